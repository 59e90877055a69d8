//! Layer-wise relevance propagation.
//!
//! Relevance starts at the target class output and is redistributed layer by
//! layer in proportion to each input's contribution `z_jk = a_j w_jk`:
//!
//! ```text
//! R_j = sum_k z_jk / z_k * R_k
//! ```
//!
//! The alpha=1/beta=0 rule keeps only positive contributions, `z_jk^+`, with
//! `z_k = sum_j z_jk^+`. The epsilon rule uses signed contributions with
//! `z_k = sum_j z_jk + eps * sign(z_k)`. By default the denominators also
//! hold the bias, `b_k^+` (alpha=1/beta=0) or `b_k` (epsilon), as in
//! iNNvestigate; clearing `bias_in_denominator` leaves it out so relevance
//! is conserved wherever a denominator is nonzero. Pooling routes all
//! relevance to the cached winner; ReLU, dropout and flatten pass it
//! through. Inference-mode batch norm, the per-channel map `y = s x + t`,
//! is folded into the weighted layer it feeds: contributions become
//! `x_j s_j w_jk` over the pre-normalization activations and `t` joins the
//! bias. A batch norm that feeds no weighted layer is propagated as a
//! one-input linear layer under the convolution rule.
//!
//! All propagation runs in 64-bit on a cast copy of the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::{BatchNorm, Conv3d, Dense, Layer, Mode, Model, Scalar};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Alpha1Beta0,
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceInit {
    /// Pre-softmax score of the target class.
    Logit,
    /// Softmax probability of the target class.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    /// Rule for convolution and batch-norm layers.
    pub conv_rule: Rule,
    pub dense_rule: Rule,
    pub epsilon: f64,
    pub init: RelevanceInit,
    pub bias_in_denominator: bool,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            conv_rule: Rule::Alpha1Beta0,
            dense_rule: Rule::Epsilon,
            epsilon: 1e-10,
            init: RelevanceInit::Logit,
            bias_in_denominator: true,
        }
    }
}

impl RuleConfig {
    pub fn alpha1beta0() -> Self {
        RuleConfig {
            dense_rule: Rule::Alpha1Beta0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub map: Volume3D,
    pub target_class: usize,
    /// Relevance placed on the target output before propagation.
    pub total_output_relevance: f64,
    pub rule_config: RuleConfig,
    /// Relevance sum at the input of every layer, then at the output.
    pub layer_sums: Vec<f64>,
    /// Input-resolution relevance before rounding to the 32-bit map.
    pub values: Vec<f64>,
}

impl RelevanceMap {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn positive_sum(&self) -> f64 {
        self.values.iter().filter(|v| **v > 0.0).sum()
    }

    pub fn negative_sum(&self) -> f64 {
        self.values.iter().filter(|v| **v < 0.0).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
fn sign(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn stabilized(z: f64, eps: f64) -> f64 {
    z + eps * sign(z)
}

/// Relevance of the `target_class` output for input `v`.
pub fn relevance_map<T: Scalar>(
    m: &Model<T>,
    v: &Volume3D,
    target_class: usize,
    cfg: &RuleConfig,
) -> Result<RelevanceMap> {
    let m64: Model<f64> = m.cast();
    relevance_map_f64(&m64, v, target_class, cfg)
}

/// As [`relevance_map`] for a model already cast to 64-bit.
pub fn relevance_map_f64(
    m: &Model<f64>,
    v: &Volume3D,
    target_class: usize,
    cfg: &RuleConfig,
) -> Result<RelevanceMap> {
    cfg.validate()?;
    if target_class > 1 {
        return Err(Error::InvalidParameter(format!(
            "target class {target_class} is not 0 or 1"
        )));
    }
    let (pred, trace) = m.forward(v, Mode::Infer)?;
    let init = match cfg.init {
        RelevanceInit::Logit => pred.logits[target_class],
        RelevanceInit::Softmax => pred.probabilities[target_class],
    };
    let mut r = vec![0.0; 2];
    r[target_class] = init;

    let shapes = m.shapes();
    let mut layer_sums = vec![0.0; m.layers().len() + 1];
    layer_sums[m.layers().len()] = init;
    for (i, layer) in m.layers().iter().enumerate().rev() {
        let x = trace.layer_input(i, 0);
        let s_in = shapes[i];
        let feeding = feeding_batchnorm(m.layers(), i);
        r = match layer {
            Layer::Dense(d) => {
                let (x, folded) = match feeding {
                    Some((j, bn)) => (trace.layer_input(j, 0), fold_into_dense(bn, d)?),
                    None => (x, d.clone()),
                };
                let b = if cfg.bias_in_denominator {
                    folded.bias
                } else {
                    vec![0.0; folded.outputs]
                };
                dense_relevance(x, &folded.weight, &b, &r, cfg.dense_rule, cfg.epsilon)
            }
            Layer::Conv3d(c) => {
                let (x, folded) = match feeding {
                    Some((j, bn)) => (trace.layer_input(j, 0), fold_into_conv(bn, c)?),
                    None => (x, c.clone()),
                };
                let mut bias = vec![0.0; r.len()];
                if cfg.bias_in_denominator {
                    // exact per-position bias: zero padding sees 0, not t
                    let shift = feeding
                        .map(|(_, bn)| bn.scale_shift().1)
                        .unwrap_or_else(|| vec![0.0; c.in_channels]);
                    let v = s_in.dims.len();
                    let t: Vec<f64> = (0..x.len()).map(|k| shift[k / v]).collect();
                    kernels::conv3d_forward(
                        &t,
                        c.in_channels,
                        s_in.dims,
                        &c.weight,
                        &c.bias,
                        c.out_channels,
                        &mut bias,
                    );
                }
                conv_relevance(x, &folded, &bias, s_in.dims, &r, cfg.conv_rule, cfg.epsilon)
            }
            Layer::BatchNorm(_) if fed_layer(m.layers(), i).is_some() => Ok(r),
            Layer::BatchNorm(b) => {
                let (scale, shift) = b.scale_shift();
                let shift = if cfg.bias_in_denominator {
                    shift
                } else {
                    vec![0.0; shift.len()]
                };
                batchnorm_relevance(
                    x,
                    &scale,
                    &shift,
                    s_in.dims.len(),
                    &r,
                    cfg.conv_rule,
                    cfg.epsilon,
                )
            }
            Layer::MaxPool => {
                let mut out = vec![0.0; x.len()];
                let win = trace.winners_of(i, 0).expect("pool winners recorded");
                kernels::maxpool_backward(&r, s_in.channels, s_in.dims, win, &mut out);
                Ok(out)
            }
            Layer::Relu | Layer::Dropout { .. } | Layer::Flatten => Ok(r),
        }
        .map_err(|e| match e {
            Error::DegenerateRelevance(msg) => {
                Error::DegenerateRelevance(format!("layer {i} ({}): {msg}", layer.name()))
            }
            e => e,
        })?;
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "relevance at layer {i} ({})",
                layer.name()
            )));
        }
        layer_sums[i] = r.iter().sum();
    }
    let map = v.with_data(r.iter().map(|&x| x as f32).collect())?;
    Ok(RelevanceMap {
        map,
        target_class,
        total_output_relevance: init,
        rule_config: *cfg,
        layer_sums,
        values: r,
    })
}

/// Fails when relevance arrives only at units whose alpha=1/beta=0
/// denominator is zero, so nothing can be passed on.
fn check_flow(r: &[f64], z: &[f64]) -> Result<()> {
    let arriving = r.iter().any(|&x| x != 0.0);
    let routable = r.iter().zip(z).any(|(&x, &d)| x != 0.0 && d > 0.0);
    if arriving && !routable {
        return Err(Error::DegenerateRelevance(
            "no positive contributions to carry relevance".into(),
        ));
    }
    Ok(())
}

/// `R_j` for a dense layer with `W` laid out `[out][in]`.
pub fn dense_relevance(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    r: &[f64],
    rule: Rule,
    eps: f64,
) -> Result<Vec<f64>> {
    let n_in = x.len();
    let mut out = vec![0.0; n_in];
    match rule {
        Rule::Epsilon => {
            for (k, &rk) in r.iter().enumerate() {
                if rk == 0.0 {
                    continue;
                }
                let row = &w[k * n_in..(k + 1) * n_in];
                let z: f64 = row.iter().zip(x).map(|(w, a)| w * a).sum::<f64>() + b[k];
                let s = rk / stabilized(z, eps);
                for ((o, wj), aj) in out.iter_mut().zip(row).zip(x) {
                    *o += aj * wj * s;
                }
            }
        }
        Rule::Alpha1Beta0 => {
            let mut zs = vec![0.0; r.len()];
            for (k, &rk) in r.iter().enumerate() {
                let row = &w[k * n_in..(k + 1) * n_in];
                let z: f64 = row
                    .iter()
                    .zip(x)
                    .map(|(w, a)| (w * a).max(0.0))
                    .sum::<f64>()
                    + b[k].max(0.0);
                zs[k] = z;
                if rk == 0.0 || z <= 0.0 {
                    continue;
                }
                let s = rk / z;
                for ((o, wj), aj) in out.iter_mut().zip(row).zip(x) {
                    *o += (aj * wj).max(0.0) * s;
                }
            }
            check_flow(r, &zs)?;
        }
    }
    Ok(out)
}

/// `bias` holds the bias of every output position.
fn conv_relevance(
    x: &[f64],
    c: &Conv3d<f64>,
    bias: &[f64],
    dims: crate::volume::Dims,
    r: &[f64],
    rule: Rule,
    eps: f64,
) -> Result<Vec<f64>> {
    let (ic, oc) = (c.in_channels, c.out_channels);
    let mut out = vec![0.0; x.len()];
    match rule {
        Rule::Epsilon => {
            let mut z = vec![0.0; r.len()];
            let zero = vec![0.0; oc];
            kernels::conv3d_forward(x, ic, dims, &c.weight, &zero, oc, &mut z);
            for (zk, bk) in z.iter_mut().zip(bias) {
                *zk += bk;
            }
            let s: Vec<f64> = r
                .iter()
                .zip(&z)
                .map(|(&rk, &zk)| rk / stabilized(zk, eps))
                .collect();
            let mut back = vec![0.0; x.len()];
            kernels::conv3d_backward_input(&s, oc, dims, &c.weight, ic, &mut back);
            for ((o, a), g) in out.iter_mut().zip(x).zip(&back) {
                *o = a * g;
            }
        }
        Rule::Alpha1Beta0 => {
            // (a w)^+ = a^+ w^+ + a^- w^-
            let ap: Vec<f64> = x.iter().map(|a| a.max(0.0)).collect();
            let an: Vec<f64> = x.iter().map(|a| a.min(0.0)).collect();
            let wp: Vec<f64> = c.weight.iter().map(|w| w.max(0.0)).collect();
            let wn: Vec<f64> = c.weight.iter().map(|w| w.min(0.0)).collect();
            let zero = vec![0.0; oc];
            let mut z = vec![0.0; r.len()];
            let mut zn = vec![0.0; r.len()];
            kernels::conv3d_forward(&ap, ic, dims, &wp, &zero, oc, &mut z);
            kernels::conv3d_forward(&an, ic, dims, &wn, &zero, oc, &mut zn);
            for ((a, b), t) in z.iter_mut().zip(&zn).zip(bias) {
                *a += b + t.max(0.0);
            }
            check_flow(r, &z)?;
            let s: Vec<f64> = r
                .iter()
                .zip(&z)
                .map(|(&rk, &zk)| if zk > 0.0 { rk / zk } else { 0.0 })
                .collect();
            let mut cp = vec![0.0; x.len()];
            let mut cn = vec![0.0; x.len()];
            kernels::conv3d_backward_input(&s, oc, dims, &wp, ic, &mut cp);
            kernels::conv3d_backward_input(&s, oc, dims, &wn, ic, &mut cn);
            for i in 0..out.len() {
                out[i] = ap[i] * cp[i] + an[i] * cn[i];
            }
        }
    }
    Ok(out)
}

/// Batch norm as the per-channel map `y = s x + t`.
fn batchnorm_relevance(
    x: &[f64],
    scale: &[f64],
    shift: &[f64],
    v: usize,
    r: &[f64],
    rule: Rule,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    let mut z = vec![0.0; x.len()];
    for (c, (&s, &t)) in scale.iter().zip(shift).enumerate() {
        for k in c * v..(c + 1) * v {
            let contrib = s * x[k];
            match rule {
                Rule::Epsilon => {
                    out[k] = contrib / stabilized(contrib + t, eps) * r[k];
                    z[k] = 1.0;
                }
                Rule::Alpha1Beta0 => {
                    let zp = contrib.max(0.0) + t.max(0.0);
                    z[k] = zp;
                    if zp > 0.0 {
                        out[k] = contrib.max(0.0) / zp * r[k];
                    }
                }
            }
        }
    }
    if rule == Rule::Alpha1Beta0 {
        check_flow(r, &z)?;
    }
    Ok(out)
}

/// The batch norm feeding layer `i` through flatten/dropout layers.
fn feeding_batchnorm(layers: &[Layer<f64>], i: usize) -> Option<(usize, &BatchNorm<f64>)> {
    for j in (0..i).rev() {
        match &layers[j] {
            Layer::Flatten | Layer::Dropout { .. } => continue,
            Layer::BatchNorm(bn) => return Some((j, bn)),
            _ => return None,
        }
    }
    None
}

/// The weighted layer batch norm `i` feeds through flatten/dropout layers.
fn fed_layer(layers: &[Layer<f64>], i: usize) -> Option<usize> {
    for (j, l) in layers.iter().enumerate().skip(i + 1) {
        match l {
            Layer::Flatten | Layer::Dropout { .. } => continue,
            Layer::Conv3d(_) | Layer::Dense(_) => return Some(j),
            _ => return None,
        }
    }
    None
}

fn checked_scale_shift(bn: &BatchNorm<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    for (c, v) in bn.moving_var.iter().enumerate() {
        let denom = v + bn.epsilon;
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!(
                "batch norm channel {c}: var + eps = {denom}"
            )));
        }
    }
    Ok(bn.scale_shift())
}

/// `dense(bn(x))` as a single dense layer over `x`. Inputs are the
/// channel-major flattening of the batch norm's output.
pub fn fold_into_dense(bn: &BatchNorm<f64>, d: &Dense<f64>) -> Result<Dense<f64>> {
    let (s, t) = checked_scale_shift(bn)?;
    let c = s.len();
    if c == 0 || d.inputs % c != 0 {
        return Err(Error::Shape(format!(
            "{} dense inputs do not split into {c} channels",
            d.inputs
        )));
    }
    let per = d.inputs / c;
    let mut weight = d.weight.clone();
    let mut bias = d.bias.clone();
    for k in 0..d.outputs {
        let row = &mut weight[k * d.inputs..(k + 1) * d.inputs];
        for (j, w) in row.iter_mut().enumerate() {
            bias[k] += *w * t[j / per];
            *w *= s[j / per];
        }
    }
    Ok(Dense {
        weight,
        bias,
        ..d.clone()
    })
}

/// `conv(bn(x))` as a single convolution over `x`. The shift folds into the
/// bias exactly only away from the zero-padded border.
pub fn fold_into_conv(bn: &BatchNorm<f64>, conv: &Conv3d<f64>) -> Result<Conv3d<f64>> {
    let (s, t) = checked_scale_shift(bn)?;
    if s.len() != conv.in_channels {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, convolution takes {}",
            s.len(),
            conv.in_channels
        )));
    }
    let k = kernels::KERNEL;
    let mut weight = conv.weight.clone();
    let mut bias = conv.bias.clone();
    for o in 0..conv.out_channels {
        for i in 0..conv.in_channels {
            let w = &mut weight[(o * conv.in_channels + i) * k..(o * conv.in_channels + i + 1) * k];
            bias[o] += t[i] * w.iter().sum::<f64>();
            w.iter_mut().for_each(|w| *w *= s[i]);
        }
    }
    Ok(Conv3d {
        weight,
        bias,
        ..conv.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub sum_input: f64,
    pub total_output: f64,
    /// `sum_input / total_output`.
    pub ratio: f64,
    /// Share of output relevance not arriving at the input (bias absorption
    /// and stabilizer leakage).
    pub absorbed_fraction: f64,
}

pub fn conservation_report(rm: &RelevanceMap) -> Result<ConservationReport> {
    if rm.total_output_relevance == 0.0 {
        return Err(Error::DegenerateRelevance(
            "total output relevance is zero".into(),
        ));
    }
    let sum_input = rm.sum();
    let ratio = sum_input / rm.total_output_relevance;
    Ok(ConservationReport {
        sum_input,
        total_output: rm.total_output_relevance,
        ratio,
        absorbed_fraction: 1.0 - ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn alpha_beta_dense_example() {
        let r = dense_relevance(
            &[2.0, 1.0],
            &[3.0, -1.0],
            &[0.0],
            &[5.0],
            Rule::Alpha1Beta0,
            1e-10,
        )
        .unwrap();
        assert_eq!(r, vec![5.0, 0.0]);
    }

    #[test]
    fn epsilon_dense_example() {
        let r = dense_relevance(
            &[1.0, 1.0],
            &[1.0, 1.0],
            &[0.0],
            &[2.0],
            Rule::Epsilon,
            1e-10,
        )
        .unwrap();
        let delta = 1.0 - 2.0 / (2.0 + 1e-10);
        for v in r {
            assert!((v - (1.0 - delta)).abs() < 1e-16);
            assert!(v < 1.0);
        }
    }

    #[test]
    fn no_positive_contributions_is_degenerate() {
        let r = dense_relevance(
            &[1.0, 1.0],
            &[-1.0, -2.0],
            &[0.0],
            &[-3.0],
            Rule::Alpha1Beta0,
            1e-10,
        );
        assert!(matches!(r, Err(Error::DegenerateRelevance(_))));
    }

    #[test]
    fn pooling_routes_to_winner() {
        // patch (x,y,z) in {0,1}^3 of a 2x2x2 grid; values 1,5,3,2 in the first
        // four positions, the rest lower
        let dims = Dims::new(2, 2, 2);
        let x = [1.0, 5.0, 3.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let mut out = [0.0];
        let mut win = [0u32];
        kernels::maxpool_forward(&x, 1, dims, &mut out, &mut win);
        let mut r = vec![0.0; 8];
        kernels::maxpool_backward(&[0.75], 1, dims, &win, &mut r);
        assert_eq!(r, vec![0.0, 0.75, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    fn conv(seed: u64) -> Conv3d<f64> {
        let w: Vec<f64> = (0..2 * 3 * 27)
            .map(|i| ((i as f64 + seed as f64) * 0.37).sin())
            .collect();
        Conv3d {
            in_channels: 3,
            out_channels: 2,
            weight: w,
            bias: vec![0.2, -0.1],
        }
    }

    fn bn() -> BatchNorm<f64> {
        BatchNorm {
            gamma: vec![1.7, -0.4, 0.9],
            beta: vec![0.3, 0.05, -0.2],
            moving_mean: vec![0.2, -0.6, 0.1],
            moving_var: vec![2.5, 0.3, 1.0],
            momentum: 0.99,
            epsilon: 1e-3,
        }
    }

    fn normalize(x: &[f64], bn: &BatchNorm<f64>) -> Vec<f64> {
        let (s, t) = bn.scale_shift();
        let per = x.len() / s.len();
        x.iter()
            .enumerate()
            .map(|(i, v)| s[i / per] * v + t[i / per])
            .collect()
    }

    #[test]
    fn identity_fold() {
        let c = conv(1);
        let mut bn = BatchNorm::<f64>::identity(3);
        bn.epsilon = 0.0;
        assert_eq!(fold_into_conv(&bn, &c).unwrap(), c);
    }

    #[test]
    fn conv_fold_matches_interior() {
        let dims = Dims::new(5, 4, 6);
        let (c, bn) = (conv(3), bn());
        let x: Vec<f64> = (0..3 * dims.len())
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let mut y = vec![0.0; 2 * dims.len()];
        kernels::conv3d_forward(&normalize(&x, &bn), 3, dims, &c.weight, &c.bias, 2, &mut y);
        let f = fold_into_conv(&bn, &c).unwrap();
        let mut yf = vec![0.0; 2 * dims.len()];
        kernels::conv3d_forward(&x, 3, dims, &f.weight, &f.bias, 2, &mut yf);
        for ch in 0..2 {
            for z in 1..dims.nz - 1 {
                for yy in 1..dims.ny - 1 {
                    for xx in 1..dims.nx - 1 {
                        let i = ch * dims.len() + dims.index(xx, yy, z);
                        assert!((y[i] - yf[i]).abs() < 1e-12, "{} vs {}", y[i], yf[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_fold_is_exact() {
        let bn = bn();
        let d = Dense {
            inputs: 6,
            outputs: 2,
            weight: (0..12).map(|i| (i as f64 * 0.61).cos()).collect(),
            bias: vec![0.1, -0.3],
            regularized: true,
        };
        let x = [0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
        let f = fold_into_dense(&bn, &d).unwrap();
        let xn = normalize(&x, &bn);
        for k in 0..2 {
            let row = |w: &[f64], x: &[f64]| -> f64 {
                w[k * 6..k * 6 + 6].iter().zip(x).map(|(a, b)| a * b).sum()
            };
            let want = row(&d.weight, &xn) + d.bias[k];
            let got = row(&f.weight, &x) + f.bias[k];
            assert!((want - got).abs() < 1e-12);
        }
        let wrong = BatchNorm::<f64>::identity(4);
        assert!(matches!(fold_into_dense(&wrong, &d), Err(Error::Shape(_))));
    }

    #[test]
    fn fold_rejects_non_positive_variance() {
        let mut bn = BatchNorm::<f64>::identity(3);
        bn.moving_var = vec![1.0, -0.5, 1.0];
        bn.epsilon = 0.0;
        assert!(matches!(
            fold_into_conv(&bn, &conv(0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn zero_output_is_degenerate_for_conservation() {
        let d = Dims::new(1, 1, 1);
        let m = Model::new(
            d,
            vec![
                Layer::Flatten,
                Layer::Dense(Dense {
                    inputs: 1,
                    outputs: 2,
                    weight: vec![0.0, 0.0],
                    bias: vec![0.0, 0.0],
                    regularized: false,
                }),
            ],
            0,
        )
        .unwrap();
        let v = Volume3D::new(d, 1.0, vec![1.0]).unwrap();
        let rm = relevance_map(&m, &v, 1, &RuleConfig::default()).unwrap();
        assert!(matches!(
            conservation_report(&rm),
            Err(Error::DegenerateRelevance(_))
        ));
    }
}
