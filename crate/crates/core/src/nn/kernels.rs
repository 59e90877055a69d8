//! Per-sample numerical kernels for 3x3x3 "same" convolutions, 2x2x2 max
//! pooling and dense layers. Feature maps are channel-major with x fastest.

use super::Scalar;
use crate::volume::Dims;

pub const KERNEL: usize = 27;

/// `dst[x] += w * src[x + dx]` over the valid x range.
#[inline(always)]
fn axpy_shifted<T: Scalar>(dst: &mut [T], src: &[T], w: T, dx: isize) {
    let n = dst.len();
    match dx {
        -1 => {
            for (o, i) in dst[1..].iter_mut().zip(&src[..n - 1]) {
                *o = *o + w * *i;
            }
        }
        0 => {
            for (o, i) in dst.iter_mut().zip(src) {
                *o = *o + w * *i;
            }
        }
        _ => {
            for (o, i) in dst[..n - 1].iter_mut().zip(&src[1..]) {
                *o = *o + w * *i;
            }
        }
    }
}

/// `dst[x + dx] += w * src[x]` over the valid x range.
#[inline(always)]
fn axpy_scatter<T: Scalar>(dst: &mut [T], src: &[T], w: T, dx: isize) {
    axpy_shifted(dst, src, w, -dx)
}

/// `sum_x a[x] * b[x + dx]` over the valid x range.
#[inline(always)]
fn dot_shifted<T: Scalar>(a: &[T], b: &[T], dx: isize) -> T {
    let n = a.len();
    let (a, b) = match dx {
        -1 => (&a[1..], &b[..n - 1]),
        0 => (a, b),
        _ => (&a[..n - 1], &b[1..]),
    };
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline(always)]
fn neighbours(c: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    // (kernel offset index 0..3, neighbour coordinate)
    (0..3usize).filter_map(move |k| {
        let p = c as isize + k as isize - 1;
        (p >= 0 && (p as usize) < n).then_some((k, p as usize))
    })
}

/// Zero-padded 3x3x3 convolution of one sample.
///
/// `weight` is laid out `[out][in][kz][ky][kx]`.
pub fn conv3d_forward<T: Scalar>(
    input: &[T],
    in_ch: usize,
    dims: Dims,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    out: &mut [T],
) {
    let v = dims.len();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    debug_assert_eq!(input.len(), in_ch * v);
    debug_assert_eq!(out.len(), out_ch * v);
    for oc in 0..out_ch {
        let out_c = &mut out[oc * v..(oc + 1) * v];
        out_c.fill(bias[oc]);
        for ic in 0..in_ch {
            let in_c = &input[ic * v..(ic + 1) * v];
            let w = &weight[(oc * in_ch + ic) * KERNEL..(oc * in_ch + ic + 1) * KERNEL];
            for z in 0..nz {
                for y in 0..ny {
                    let row = (z * ny + y) * nx;
                    let out_row = &mut out_c[row..row + nx];
                    for (kz, zz) in neighbours(z, nz) {
                        for (ky, yy) in neighbours(y, ny) {
                            let src = (zz * ny + yy) * nx;
                            let in_row = &in_c[src..src + nx];
                            let wk = &w[kz * 9 + ky * 3..kz * 9 + ky * 3 + 3];
                            if nx == 1 {
                                out_row[0] = out_row[0] + wk[1] * in_row[0];
                                continue;
                            }
                            axpy_shifted(out_row, in_row, wk[0], -1);
                            axpy_shifted(out_row, in_row, wk[1], 0);
                            axpy_shifted(out_row, in_row, wk[2], 1);
                        }
                    }
                }
            }
        }
    }
}

/// Adds the transposed convolution of `grad_out` into `grad_in`.
pub fn conv3d_backward_input<T: Scalar>(
    grad_out: &[T],
    out_ch: usize,
    dims: Dims,
    weight: &[T],
    in_ch: usize,
    grad_in: &mut [T],
) {
    let v = dims.len();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for ic in 0..in_ch {
        let gin_c = &mut grad_in[ic * v..(ic + 1) * v];
        for oc in 0..out_ch {
            let g_c = &grad_out[oc * v..(oc + 1) * v];
            let w = &weight[(oc * in_ch + ic) * KERNEL..(oc * in_ch + ic + 1) * KERNEL];
            for z in 0..nz {
                for y in 0..ny {
                    let row = (z * ny + y) * nx;
                    let g_row = &g_c[row..row + nx];
                    for (kz, zz) in neighbours(z, nz) {
                        for (ky, yy) in neighbours(y, ny) {
                            let dst = (zz * ny + yy) * nx;
                            let gin_row = &mut gin_c[dst..dst + nx];
                            let wk = &w[kz * 9 + ky * 3..kz * 9 + ky * 3 + 3];
                            if nx == 1 {
                                gin_row[0] = gin_row[0] + wk[1] * g_row[0];
                                continue;
                            }
                            axpy_scatter(gin_row, g_row, wk[0], -1);
                            axpy_scatter(gin_row, g_row, wk[1], 0);
                            axpy_scatter(gin_row, g_row, wk[2], 1);
                        }
                    }
                }
            }
        }
    }
}

/// Adds the weight and bias gradients of one sample.
pub fn conv3d_backward_params<T: Scalar>(
    input: &[T],
    in_ch: usize,
    dims: Dims,
    grad_out: &[T],
    out_ch: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
) {
    let v = dims.len();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    for oc in 0..out_ch {
        let g_c = &grad_out[oc * v..(oc + 1) * v];
        grad_b[oc] = grad_b[oc] + g_c.iter().fold(T::zero(), |a, &b| a + b);
        for ic in 0..in_ch {
            let in_c = &input[ic * v..(ic + 1) * v];
            let mut acc = [T::zero(); KERNEL];
            for z in 0..nz {
                for y in 0..ny {
                    let row = (z * ny + y) * nx;
                    let g_row = &g_c[row..row + nx];
                    for (kz, zz) in neighbours(z, nz) {
                        for (ky, yy) in neighbours(y, ny) {
                            let src = (zz * ny + yy) * nx;
                            let in_row = &in_c[src..src + nx];
                            let k = kz * 9 + ky * 3;
                            if nx == 1 {
                                acc[k + 1] = acc[k + 1] + g_row[0] * in_row[0];
                                continue;
                            }
                            acc[k] = acc[k] + dot_shifted(g_row, in_row, -1);
                            acc[k + 1] = acc[k + 1] + dot_shifted(g_row, in_row, 0);
                            acc[k + 2] = acc[k + 2] + dot_shifted(g_row, in_row, 1);
                        }
                    }
                }
            }
            let gw = &mut grad_w[(oc * in_ch + ic) * KERNEL..(oc * in_ch + ic + 1) * KERNEL];
            for (g, a) in gw.iter_mut().zip(acc) {
                *g = *g + a;
            }
        }
    }
}

pub fn pooled_dims(dims: Dims) -> Dims {
    Dims::new(dims.nx / 2, dims.ny / 2, dims.nz / 2)
}

/// 2x2x2 max pooling with stride 2; odd trailing planes are dropped.
///
/// `winners` receives, per output unit, the input index (within its
/// channel) of the maximum. Ties go to the lowest linear index.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    dims: Dims,
    out: &mut [T],
    winners: &mut [u32],
) {
    let od = pooled_dims(dims);
    let (vi, vo) = (dims.len(), od.len());
    for c in 0..channels {
        let in_c = &input[c * vi..(c + 1) * vi];
        for z in 0..od.nz {
            for y in 0..od.ny {
                for x in 0..od.nx {
                    let mut arg = dims.index(2 * x, 2 * y, 2 * z);
                    let mut best = in_c[arg];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = dims.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                // strict comparison keeps the lowest-index maximum
                                if in_c[i] > best {
                                    best = in_c[i];
                                    arg = i;
                                }
                            }
                        }
                    }
                    let o = c * vo + od.index(x, y, z);
                    out[o] = best;
                    winners[o] = arg as u32;
                }
            }
        }
    }
}

/// Routes each output gradient to its cached winner.
pub fn maxpool_backward<T: Scalar>(
    grad_out: &[T],
    channels: usize,
    dims: Dims,
    winners: &[u32],
    grad_in: &mut [T],
) {
    let od = pooled_dims(dims);
    let (vi, vo) = (dims.len(), od.len());
    for c in 0..channels {
        for o in 0..vo {
            let i = c * vi + winners[c * vo + o] as usize;
            grad_in[i] = grad_in[i] + grad_out[c * vo + o];
        }
    }
}

/// `out = W x + b`, `W` laid out `[out][in]`.
pub fn dense_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n_in = input.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = T::zero();
        for (w, x) in row.iter().zip(input) {
            acc = acc + *w * *x;
        }
        *slot = acc + bias[o];
    }
}

pub fn dense_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    grad_in: Option<&mut [T]>,
) {
    let n_in = input.len();
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] = grad_b[o] + g;
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for (w, x) in gw.iter_mut().zip(input) {
            *w = *w + g * *x;
        }
    }
    if let Some(grad_in) = grad_in {
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi = *gi + g * *w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the "same" convolution sum.
    fn conv_naive(
        input: &[f64],
        in_ch: usize,
        d: Dims,
        w: &[f64],
        b: &[f64],
        out_ch: usize,
    ) -> Vec<f64> {
        let v = d.len();
        let mut out = vec![0.0; out_ch * v];
        for oc in 0..out_ch {
            for z in 0..d.nz as isize {
                for y in 0..d.ny as isize {
                    for x in 0..d.nx as isize {
                        let mut s = b[oc];
                        for ic in 0..in_ch {
                            for kz in -1..=1isize {
                                for ky in -1..=1isize {
                                    for kx in -1..=1isize {
                                        let (xx, yy, zz) = (x + kx, y + ky, z + kz);
                                        if xx < 0 || yy < 0 || zz < 0 {
                                            continue;
                                        }
                                        let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                                        if !d.contains(xx, yy, zz) {
                                            continue;
                                        }
                                        let k = ((kz + 1) * 9 + (ky + 1) * 3 + kx + 1) as usize;
                                        s += w[(oc * in_ch + ic) * 27 + k]
                                            * input[ic * v + d.index(xx, yy, zz)];
                                    }
                                }
                            }
                        }
                        out[oc * v + d.index(x as usize, y as usize, z as usize)] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 ^ seed) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for d in [Dims::new(4, 3, 5), Dims::new(1, 2, 3), Dims::new(2, 1, 1)] {
            let (ic, oc) = (2, 3);
            let input = pseudo(ic * d.len(), 1);
            let w = pseudo(oc * ic * 27, 2);
            let b = pseudo(oc, 3);
            let mut out = vec![0.0; oc * d.len()];
            conv3d_forward(&input, ic, d, &w, &b, oc, &mut out);
            let expected = conv_naive(&input, ic, d, &w, &b, oc);
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let d = Dims::new(5, 4, 3);
        let input = pseudo(d.len(), 9);
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        let mut out = vec![0.0; d.len()];
        conv3d_forward(&input, 1, d, &w, &[0.0], 1, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> with zero bias
        let d = Dims::new(4, 5, 3);
        let (ic, oc) = (2, 2);
        let x = pseudo(ic * d.len(), 4);
        let g = pseudo(oc * d.len(), 5);
        let w = pseudo(oc * ic * 27, 6);
        let mut y = vec![0.0; oc * d.len()];
        conv3d_forward(&x, ic, d, &w, &[0.0; 2], oc, &mut y);
        let mut gx = vec![0.0; ic * d.len()];
        conv3d_backward_input(&g, oc, d, &w, ic, &mut gx);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));

        // and <conv_w(x), g> is linear in w with gradient grad_w
        let mut gw = vec![0.0; oc * ic * 27];
        let mut gb = vec![0.0; oc];
        conv3d_backward_params(&x, ic, d, &g, oc, &mut gw, &mut gb);
        let lhs2: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - lhs2).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((gb[0] - g[..d.len()].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn pool_takes_first_maximum_and_floors_odd_dims() {
        let d = Dims::new(3, 2, 2);
        // patch over x in {0,1}: values 1,5,3,2,... with a later tie at 5
        let input = vec![1.0, 5.0, 9.0, 3.0, 2.0, 9.0, 5.0, 0.0, 9.0, 1.0, 1.0, 9.0];
        let mut out = vec![0.0; 1];
        let mut win = vec![0u32; 1];
        maxpool_forward(&input, 1, d, &mut out, &mut win);
        assert_eq!(out[0], 5.0);
        assert_eq!(win[0], 1);
        let mut g = vec![0.0; 12];
        maxpool_backward(&[2.5], 1, d, &win, &mut g);
        assert_eq!(g[1], 2.5);
        assert_eq!(g.iter().sum::<f64>(), 2.5);
    }

    #[test]
    fn pool_of_all_negative_patch() {
        let d = Dims::new(2, 2, 2);
        let input = vec![-3.0, -1.0, -2.0, -1.0, -5.0, -4.0, -6.0, -7.0];
        let mut out = vec![0.0; 1];
        let mut win = vec![0u32; 1];
        maxpool_forward(&input, 1, d, &mut out, &mut win);
        assert_eq!((out[0], win[0]), (-1.0, 1));
    }
}
