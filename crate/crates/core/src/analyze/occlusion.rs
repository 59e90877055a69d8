use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{relevance_map_f64, RuleConfig};
use crate::nn::Model;
use crate::volume::{Dims, Volume3D};

/// Transform applied to each occluded raw volume before the model sees it,
/// e.g. covariate residualization.
pub type Preprocess<'a> = &'a (dyn Fn(&Volume3D) -> Result<Volume3D> + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Edge length in voxels; `round(0.2 * max_dim)` when absent.
    pub cube_edge: Option<usize>,
    /// Fraction by which in-cube intensities are lowered.
    pub reduction: f64,
    pub stride: usize,
    pub target_class: usize,
    pub rule: RuleConfig,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            cube_edge: None,
            reduction: 0.5,
            stride: 4,
            target_class: 1,
            rule: RuleConfig::default(),
        }
    }
}

/// 20 voxels on a 100-voxel grid, scaled.
pub fn default_cube_edge(dims: Dims) -> usize {
    ((0.2 * dims.max_dim() as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionResult {
    /// Disease probability with the cube centred at each voxel.
    pub probability: Volume3D,
    /// Total relevance of the occluded input's map.
    pub total_relevance: Volume3D,
    pub baseline_probability: f64,
    pub baseline_relevance: f64,
    pub cube_edge: usize,
    pub reduction: f64,
    pub stride: usize,
    /// Grid points evaluated.
    pub evaluations: usize,
}

impl OcclusionResult {
    /// Voxel where occlusion raised the disease probability most, lowest
    /// index on ties.
    pub fn peak_increase(&self) -> [usize; 3] {
        let d = self.probability.data();
        let mut best = 0;
        for i in 1..d.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        self.probability.dims().coords(best)
    }

    /// Grid point (cube centre) whose value fills `voxel`.
    pub fn centre_of(&self, voxel: [usize; 3]) -> [usize; 3] {
        let d = self.probability.dims();
        let mut c = [0; 3];
        for a in 0..3 {
            let n = d.axis_len(a);
            c[a] = nearest(voxel[a], n.div_ceil(self.stride), self.stride) * self.stride;
        }
        c
    }
}

fn grid(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride).collect()
}

/// Index into `grid(n, stride)` of the grid point nearest to `x`.
fn nearest(x: usize, n_points: usize, stride: usize) -> usize {
    ((x + stride / 2) / stride).min(n_points - 1)
}

pub fn occlude(v: &Volume3D, centre: [usize; 3], edge: usize, reduction: f64) -> Volume3D {
    let d = v.dims();
    let span = |c: usize, n: usize| {
        let lo = c as isize - (edge / 2) as isize;
        let hi = lo + edge as isize;
        (lo.max(0) as usize, hi.min(n as isize) as usize)
    };
    let ((x0, x1), (y0, y1), (z0, z1)) = (
        span(centre[0], d.nx),
        span(centre[1], d.ny),
        span(centre[2], d.nz),
    );
    let keep = (1.0 - reduction) as f32;
    let mut data = v.data().to_vec();
    for z in z0..z1 {
        for y in y0..y1 {
            let row = d.index(0, y, z);
            for x in &mut data[row + x0..row + x1] {
                *x *= keep;
            }
        }
    }
    v.with_data(data).expect("same length")
}

/// Slides a cube over `v`, lowering intensities inside it by `reduction`,
/// and records the disease probability and total relevance per centre.
pub fn occlusion_scan(
    m: &Model<f32>,
    v: &Volume3D,
    cfg: &OcclusionConfig,
    preprocess: Option<Preprocess<'_>>,
) -> Result<OcclusionResult> {
    let d = v.dims();
    v.ensure_dims(m.input_dims())
        .map_err(|e| Error::Shape(format!("input does not match the model: {e}")))?;
    let edge = cfg.cube_edge.unwrap_or_else(|| default_cube_edge(d));
    if edge == 0 || edge > d.min_dim() {
        return Err(Error::Shape(format!(
            "cube edge {edge} does not fit in {d}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.reduction) {
        return Err(Error::InvalidParameter(format!(
            "reduction {} is outside [0, 1]",
            cfg.reduction
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::InvalidParameter("stride must be at least 1".into()));
    }
    cfg.rule.validate()?;
    let m64: Model<f64> = m.cast();
    let evaluate = |raw: &Volume3D| -> Result<(f64, f64)> {
        let input = match preprocess {
            Some(f) => f(raw)?,
            None => raw.clone(),
        };
        let p = m.predict(&input)?.p_disease();
        let rm = relevance_map_f64(&m64, &input, cfg.target_class, &cfg.rule)?;
        Ok((p, rm.sum()))
    };
    let (baseline_probability, baseline_relevance) = evaluate(v)?;

    let (gx, gy, gz) = (
        grid(d.nx, cfg.stride),
        grid(d.ny, cfg.stride),
        grid(d.nz, cfg.stride),
    );
    let mut centres = Vec::with_capacity(gx.len() * gy.len() * gz.len());
    for &z in &gz {
        for &y in &gy {
            for &x in &gx {
                centres.push([x, y, z]);
            }
        }
    }
    let values: Vec<(f64, f64)> = centres
        .par_iter()
        .map(|&c| evaluate(&occlude(v, c, edge, cfg.reduction)))
        .collect::<Result<_>>()?;

    let mut prob = vec![0.0f32; d.len()];
    let mut rel = vec![0.0f32; d.len()];
    for z in 0..d.nz {
        let iz = nearest(z, gz.len(), cfg.stride);
        for y in 0..d.ny {
            let iy = nearest(y, gy.len(), cfg.stride);
            for x in 0..d.nx {
                let ix = nearest(x, gx.len(), cfg.stride);
                let (p, r) = values[(iz * gy.len() + iy) * gx.len() + ix];
                let i = d.index(x, y, z);
                prob[i] = p as f32;
                rel[i] = r as f32;
            }
        }
    }
    Ok(OcclusionResult {
        probability: v.with_data(prob)?,
        total_relevance: v.with_data(rel)?,
        baseline_probability,
        baseline_relevance,
        cube_edge: edge,
        reduction: cfg.reduction,
        stride: cfg.stride,
        evaluations: centres.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    #[test]
    fn cube_bounds() {
        let d = Dims::new(6, 6, 6);
        let v = Volume3D::from_fn(d, 1.0, |_, _, _| 1.0).unwrap();
        let o = occlude(&v, [0, 0, 0], 4, 0.5);
        let reduced = o.data().iter().filter(|&&x| x == 0.5).count();
        assert_eq!(reduced, 2 * 2 * 2);
        let o = occlude(&v, [3, 3, 3], 4, 0.5);
        assert_eq!(o.data().iter().filter(|&&x| x == 0.5).count(), 64);
        assert_eq!(o.get(1, 1, 1), 0.5);
        assert_eq!(o.get(4, 4, 4), 0.5);
        assert_eq!(o.get(5, 4, 4), 1.0);
    }

    #[test]
    fn nearest_fill() {
        assert_eq!(nearest(0, 3, 4), 0);
        assert_eq!(nearest(1, 3, 4), 0);
        assert_eq!(nearest(2, 3, 4), 1);
        assert_eq!(nearest(9, 3, 4), 2);
        assert_eq!(nearest(11, 3, 4), 2);
    }

    #[test]
    fn centres_lie_on_the_grid() {
        let d = Dims::new(10, 9, 8);
        let r = OcclusionResult {
            probability: Volume3D::zeros(d, 1.0).unwrap(),
            total_relevance: Volume3D::zeros(d, 1.0).unwrap(),
            baseline_probability: 0.0,
            baseline_relevance: 0.0,
            cube_edge: 2,
            reduction: 0.5,
            stride: 4,
            evaluations: 27,
        };
        assert_eq!(r.centre_of([9, 1, 6]), [8, 0, 4]);
        assert_eq!(r.centre_of([5, 7, 7]), [4, 8, 4]);
    }

    #[test]
    fn zero_reduction_is_constant() {
        let d = Dims::new(8, 8, 9);
        let m = build_model(d, 4).unwrap();
        let v = Volume3D::from_fn(d, 1.0, |x, y, z| ((x + y * z) as f32 * 0.3).sin()).unwrap();
        let cfg = OcclusionConfig {
            reduction: 0.0,
            ..Default::default()
        };
        let r = occlusion_scan(&m, &v, &cfg, None).unwrap();
        assert_eq!(r.cube_edge, 2);
        assert!(r
            .probability
            .data()
            .iter()
            .all(|&p| p == r.baseline_probability as f32));
        assert_eq!(r.evaluations, 2 * 2 * 3);
    }

    #[test]
    fn oversized_cube() {
        let d = Dims::new(8, 8, 9);
        let m = build_model(d, 4).unwrap();
        let v = Volume3D::zeros(d, 1.0).unwrap();
        let cfg = OcclusionConfig {
            cube_edge: Some(9),
            ..Default::default()
        };
        assert!(matches!(
            occlusion_scan(&m, &v, &cfg, None),
            Err(Error::Shape(_))
        ));
    }
}
