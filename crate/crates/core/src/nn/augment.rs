//! Left/right flips and single-axis translations with zero fill.

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D};

pub const N_VARIANTS: usize = 14;

/// Translation used at the paper's 100-voxel scale.
pub const REFERENCE_SHIFT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Augmentation {
    pub flip: bool,
    /// Axis and signed offset; `None` is no translation.
    pub shift: Option<(usize, isize)>,
}

impl Augmentation {
    /// Variant `k` of [`N_VARIANTS`]: `k / 7` selects the flip, `k % 7`
    /// selects none, +x, -x, +y, -y, +z, -z.
    pub fn variant(k: usize, shift: usize) -> Self {
        assert!(k < N_VARIANTS, "variant {k} out of range");
        let s = shift as isize;
        let shift = match k % 7 {
            0 => None,
            j => Some(((j - 1) / 2, if j % 2 == 1 { s } else { -s })),
        };
        Augmentation {
            flip: k >= 7,
            shift,
        }
    }

    pub fn all(shift: usize) -> Vec<Self> {
        (0..N_VARIANTS).map(|k| Self::variant(k, shift)).collect()
    }

    pub fn apply(&self, v: &Volume3D) -> Result<Volume3D> {
        let mut out = if self.flip { flip_x(v) } else { v.clone() };
        if let Some((axis, offset)) = self.shift {
            out = translate(&out, axis, offset)?;
        }
        Ok(out)
    }
}

/// Shift scaled to the grid: 10 voxels at a 100-voxel minimum extent.
pub fn default_shift(dims: Dims) -> usize {
    ((REFERENCE_SHIFT * dims.min_dim()) as f64 / 100.0)
        .round()
        .max(1.0) as usize
}

pub fn flip_x(v: &Volume3D) -> Volume3D {
    let d = v.dims();
    let src = v.data();
    let mut data = vec![0.0; src.len()];
    for (row_out, row_in) in data.chunks_mut(d.nx).zip(src.chunks(d.nx)) {
        for (o, i) in row_out.iter_mut().zip(row_in.iter().rev()) {
            *o = *i;
        }
    }
    v.with_data(data).expect("same length")
}

/// `out[p] = v[p - offset * e_axis]`, zero where the source is outside.
pub fn translate(v: &Volume3D, axis: usize, offset: isize) -> Result<Volume3D> {
    let d = v.dims();
    if axis > 2 {
        return Err(Error::InvalidParameter(format!(
            "axis {axis} is not 0, 1 or 2"
        )));
    }
    let n = d.axis_len(axis);
    if offset.unsigned_abs() >= n {
        return Err(Error::Shape(format!(
            "shift {offset} along axis {axis} is not smaller than the extent {n}"
        )));
    }
    let src = v.data();
    let mut data = vec![0.0f32; src.len()];
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let mut p = [x as isize, y as isize, z as isize];
                p[axis] -= offset;
                if p[axis] < 0 || p[axis] >= n as isize {
                    continue;
                }
                data[d.index(x, y, z)] = src[d.index(p[0] as usize, p[1] as usize, p[2] as usize)];
            }
        }
    }
    v.with_data(data)
}

pub fn augment_variant(v: &Volume3D, k: usize, shift: usize) -> Result<Volume3D> {
    Augmentation::variant(k, shift).apply(v)
}

/// All fourteen variants; the first is `v` itself.
pub fn augment(v: &Volume3D) -> Result<Vec<Volume3D>> {
    let shift = default_shift(v.dims());
    Augmentation::all(shift)
        .iter()
        .map(|a| a.apply(v))
        .collect()
}
