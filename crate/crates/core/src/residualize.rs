//! Covariate residualization.
//!
//! For every voxel an ordinary least squares model
//! `v = b0 + b1*age + b2*sex + b3*tiv + b4*fs` is fitted on healthy controls
//! and its prediction subtracted from any subject's image. The same
//! machinery handles a single scalar measure such as a regional volume.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::subject::{Group, SubjectRecord};
use crate::volume::{Dims, Volume3D};

pub const COVARIATE_NAMES: [&str; 4] = ["age", "sex", "tiv", "field_strength"];
pub const N_COEFFICIENTS: usize = COVARIATE_NAMES.len() + 1;

const MAGIC: &[u8; 8] = b"RVRESID1";
const FORMAT_VERSION: u32 = 1;

/// Squared residual norm, relative to the column's own squared norm, below
/// which a standardized design column counts as a linear combination of the
/// earlier ones.
const COLLINEARITY_TOL: f64 = 1e-10;

/// Solver for one design matrix, reusable across many response vectors.
///
/// Columns are centered and scaled before the normal equations are formed;
/// coefficients are mapped back to the raw covariate scale.
#[derive(Debug, Clone)]
pub struct OlsSolver {
    names: Vec<String>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// `(Z'Z)^-1 Z'`, one row per coefficient (intercept first), `n` columns.
    projector: Vec<Vec<f64>>,
    n: usize,
}

impl OlsSolver {
    /// `columns[c][j]` is covariate `c` of observation `j`; an intercept is
    /// added implicitly.
    pub fn new(names: &[&str], columns: &[Vec<f64>]) -> Result<Self> {
        assert_eq!(names.len(), columns.len());
        let n = columns.first().map_or(0, Vec::len);
        let p = columns.len() + 1;
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidParameter(
                "design columns differ in length".into(),
            ));
        }
        if n < p {
            return Err(Error::Data(format!(
                "{n} observations cannot identify {p} coefficients"
            )));
        }

        let mut means = Vec::with_capacity(columns.len());
        let mut scales = Vec::with_capacity(columns.len());
        let mut z: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for col in columns {
            let mean = col.iter().sum::<f64>() / n as f64;
            let ss: f64 = col.iter().map(|x| (x - mean).powi(2)).sum();
            let scale = (ss / n as f64).sqrt();
            means.push(mean);
            scales.push(if scale > 0.0 { scale } else { 1.0 });
            z.push(
                col.iter()
                    .map(|x| (x - mean) / scales.last().unwrap())
                    .collect(),
            );
        }

        // Gram-Schmidt pass to name collinear columns.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut offending = Vec::new();
        for (c, col) in z.iter().enumerate() {
            let mut r = col.clone();
            for q in &basis {
                let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let norm2: f64 = r.iter().map(|x| x * x).sum();
            let own: f64 = col.iter().map(|x| x * x).sum();
            if own == 0.0 || norm2 <= COLLINEARITY_TOL * own {
                offending.push(if c == 0 {
                    "intercept".to_string()
                } else {
                    names[c - 1].to_string()
                });
            } else {
                let inv = 1.0 / norm2.sqrt();
                basis.push(r.into_iter().map(|x| x * inv).collect());
            }
        }
        if !offending.is_empty() {
            return Err(Error::SingularDesign { columns: offending });
        }

        let mut gram = vec![vec![0.0; p]; p];
        for a in 0..p {
            for b in 0..=a {
                let s: f64 = z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum();
                gram[a][b] = s;
                gram[b][a] = s;
            }
        }
        let chol = cholesky(&gram).ok_or_else(|| Error::SingularDesign {
            columns: names.iter().map(|s| s.to_string()).collect(),
        })?;
        // Each column of the projector solves (Z'Z) x = z_j.
        let mut projector = vec![vec![0.0; n]; p];
        let mut rhs = vec![0.0; p];
        for j in 0..n {
            for (k, r) in rhs.iter_mut().enumerate() {
                *r = z[k][j];
            }
            let x = cholesky_solve(&chol, &rhs);
            for k in 0..p {
                projector[k][j] = x[k];
            }
        }

        let mut all_names = vec!["intercept".to_string()];
        all_names.extend(names.iter().map(|s| s.to_string()));
        Ok(OlsSolver {
            names: all_names,
            means,
            scales,
            projector,
            n,
        })
    }

    pub fn n_observations(&self) -> usize {
        self.n
    }

    pub fn n_coefficients(&self) -> usize {
        self.projector.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Raw-scale coefficients (intercept first) for one response vector.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n);
        let gamma: Vec<f64> = self
            .projector
            .iter()
            .map(|row| row.iter().zip(y).map(|(a, b)| a * b).sum())
            .collect();
        self.to_raw(&gamma)
    }

    fn to_raw(&self, gamma: &[f64]) -> Vec<f64> {
        let mut beta = vec![0.0; gamma.len()];
        let mut intercept = gamma[0];
        for c in 0..self.means.len() {
            beta[c + 1] = gamma[c + 1] / self.scales[c];
            intercept -= beta[c + 1] * self.means[c];
        }
        beta[0] = intercept;
        beta
    }
}

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

/// Result of a one-off least squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// Intercept first, then one slope per covariate.
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
}

pub fn fit_ols(names: &[&str], columns: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let solver = OlsSolver::new(names, columns)?;
    if y.len() != solver.n {
        return Err(Error::InvalidParameter(
            "response length differs from design".into(),
        ));
    }
    let coefficients = solver.solve(y);
    let residuals = (0..y.len())
        .map(|j| {
            let pred = coefficients[0]
                + columns
                    .iter()
                    .enumerate()
                    .map(|(c, col)| coefficients[c + 1] * col[j])
                    .sum::<f64>();
            y[j] - pred
        })
        .collect();
    Ok(OlsFit {
        coefficients,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateEncoding {
    pub sex: String,
    pub field_strength: String,
}

impl Default for CovariateEncoding {
    fn default() -> Self {
        CovariateEncoding {
            sex: "F=0,M=1".into(),
            field_strength: "1.5T=0,3T=1".into(),
        }
    }
}

/// Per-voxel (or scalar) covariate regression fitted on controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    covariate_names: Vec<String>,
    encoding: CovariateEncoding,
    /// `None` for a scalar model.
    dims: Option<Dims>,
    fit_count: usize,
    /// Row-major, `N_COEFFICIENTS` per voxel.
    betas: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResidualHeader {
    format_version: u32,
    covariate_names: Vec<String>,
    encoding: CovariateEncoding,
    dims: Option<Dims>,
    fit_count: usize,
}

fn canonical_order<T>(items: &mut [(&SubjectRecord, T)]) {
    items.sort_by(|a, b| {
        a.0.id.cmp(&b.0.id).then_with(|| {
            a.0.covariates()
                .iter()
                .zip(b.0.covariates().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}

fn covariate_solver(records: &[&SubjectRecord]) -> Result<OlsSolver> {
    let columns: Vec<Vec<f64>> = (0..COVARIATE_NAMES.len())
        .map(|c| records.iter().map(|r| r.covariates()[c]).collect())
        .collect();
    OlsSolver::new(&COVARIATE_NAMES, &columns)
}

fn check_controls(records: &[&SubjectRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.group != Group::CN) {
        return Err(Error::Data(format!(
            "residualizer must be fitted on controls only, {} is {}",
            r.id, r.group
        )));
    }
    if records.len() < N_COEFFICIENTS {
        return Err(Error::Data(format!(
            "{} controls cannot identify {N_COEFFICIENTS} coefficients",
            records.len()
        )));
    }
    Ok(())
}

/// Fits one regression per voxel on the given controls.
pub fn fit_residualizer(controls: &[(&Volume3D, &SubjectRecord)]) -> Result<ResidualModel> {
    let mut items: Vec<(&SubjectRecord, &Volume3D)> =
        controls.iter().map(|(v, r)| (*r, *v)).collect();
    canonical_order(&mut items);
    let records: Vec<&SubjectRecord> = items.iter().map(|(r, _)| *r).collect();
    check_controls(&records)?;
    let dims = items[0].1.dims();
    for (_, v) in &items {
        v.ensure_dims(dims)?;
    }
    let solver = covariate_solver(&records)?;

    // Projected coefficients in standardized space: gamma[i] = P y_i,
    // accumulated subject by subject in a fixed order.
    const CHUNK: usize = 4096;
    let n_vox = dims.len();
    let mut gamma = vec![0.0f64; n_vox * N_COEFFICIENTS];
    gamma
        .par_chunks_mut(CHUNK * N_COEFFICIENTS)
        .enumerate()
        .for_each(|(chunk, out)| {
            let start = chunk * CHUNK;
            for (j, (_, v)) in items.iter().enumerate() {
                let data = &v.data()[start..(start + out.len() / N_COEFFICIENTS)];
                for (o, &value) in out.chunks_exact_mut(N_COEFFICIENTS).zip(data) {
                    for (k, slot) in o.iter_mut().enumerate() {
                        *slot += solver.projector[k][j] * value as f64;
                    }
                }
            }
        });
    let betas = gamma
        .chunks_exact(N_COEFFICIENTS)
        .flat_map(|g| solver.to_raw(g))
        .collect();

    Ok(ResidualModel {
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        encoding: CovariateEncoding::default(),
        dims: Some(dims),
        fit_count: records.len(),
        betas,
    })
}

/// Scalar variant: one regression for a single measure per subject.
pub fn fit_scalar_residualizer(
    values: &[f64],
    covariates: &[SubjectRecord],
) -> Result<ResidualModel> {
    if values.len() != covariates.len() {
        return Err(Error::InvalidParameter(
            "values and covariates differ in length".into(),
        ));
    }
    let mut items: Vec<(&SubjectRecord, f64)> =
        covariates.iter().zip(values.iter().copied()).collect();
    canonical_order(&mut items);
    let records: Vec<&SubjectRecord> = items.iter().map(|(r, _)| *r).collect();
    check_controls(&records)?;
    let solver = covariate_solver(&records)?;
    let y: Vec<f64> = items.iter().map(|(_, v)| *v).collect();
    Ok(ResidualModel {
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        encoding: CovariateEncoding::default(),
        dims: None,
        fit_count: records.len(),
        betas: solver.solve(&y),
    })
}

impl ResidualModel {
    /// A model whose prediction is zero everywhere.
    pub fn zeros(dims: Option<Dims>) -> Self {
        let n = dims.map_or(1, |d| d.len());
        ResidualModel {
            covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            encoding: CovariateEncoding::default(),
            dims,
            fit_count: 0,
            betas: vec![0.0; n * N_COEFFICIENTS],
        }
    }

    pub fn dims(&self) -> Option<Dims> {
        self.dims
    }

    pub fn fit_count(&self) -> usize {
        self.fit_count
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn encoding(&self) -> &CovariateEncoding {
        &self.encoding
    }

    /// Coefficients `(b0, age, sex, tiv, fs)` of one voxel (0 for scalar).
    pub fn coefficients(&self, voxel: usize) -> &[f64] {
        &self.betas[voxel * N_COEFFICIENTS..(voxel + 1) * N_COEFFICIENTS]
    }

    pub fn predict(&self, voxel: usize, record: &SubjectRecord) -> f64 {
        let b = self.coefficients(voxel);
        let c = record.covariates();
        b[0] + b[1] * c[0] + b[2] * c[1] + b[3] * c[2] + b[4] * c[3]
    }

    /// Residuals at 64-bit precision.
    pub fn residuals_f64(&self, v: &Volume3D, record: &SubjectRecord) -> Result<Vec<f64>> {
        let dims = self
            .dims
            .ok_or_else(|| Error::InvalidParameter("scalar model applied to a volume".into()))?;
        v.ensure_dims(dims)?;
        Ok(v.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x as f64 - self.predict(i, record))
            .collect())
    }

    pub fn apply_scalar(&self, value: f64, record: &SubjectRecord) -> Result<f64> {
        if self.dims.is_some() {
            return Err(Error::InvalidParameter(
                "voxel model applied to a scalar".into(),
            ));
        }
        Ok(value - self.predict(0, record))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ResidualHeader {
            format_version: FORMAT_VERSION,
            covariate_names: self.covariate_names.clone(),
            encoding: self.encoding.clone(),
            dims: self.dims,
            fit_count: self.fit_count,
        };
        let payload: Vec<f32> = self.betas.iter().map(|&b| b as f32).collect();
        container::write(path.as_ref(), MAGIC, &header, &payload)
    }

    /// Loads a saved model. Coefficients are stored in 32-bit precision.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, payload): (ResidualHeader, Vec<f32>) = container::read(path.as_ref(), MAGIC)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "residualizer format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        if header.covariate_names != COVARIATE_NAMES {
            return Err(Error::Format(format!(
                "unexpected covariates {:?}",
                header.covariate_names
            )));
        }
        if header.encoding != CovariateEncoding::default() {
            return Err(Error::Format(format!(
                "unsupported covariate encoding {:?}",
                header.encoding
            )));
        }
        let expected = header.dims.map_or(1, |d| d.len()) * N_COEFFICIENTS;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "coefficient payload has {} values, expected {expected}",
                payload.len()
            )));
        }
        Ok(ResidualModel {
            covariate_names: header.covariate_names,
            encoding: header.encoding,
            dims: header.dims,
            fit_count: header.fit_count,
            betas: payload.into_iter().map(f64::from).collect(),
        })
    }
}

/// Subtracts the covariate prediction from a volume.
pub fn apply_residualizer(m: &ResidualModel, v: &Volume3D, r: &SubjectRecord) -> Result<Volume3D> {
    let res = m.residuals_f64(v, r)?;
    v.with_data(res.into_iter().map(|x| x as f32).collect())
}

pub fn apply_scalar(m: &ResidualModel, value: f64, r: &SubjectRecord) -> Result<f64> {
    m.apply_scalar(value, r)
}
