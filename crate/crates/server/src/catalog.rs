use std::path::{Path, PathBuf};

use relevis_core::dataset::load_cohort;
use relevis_core::lrp::RuleConfig;
use relevis_core::nn::{load_model, Model};
use relevis_core::{apply_residualizer, Cohort, Dims, ResidualModel, Volume3D};
use serde::{Deserialize, Serialize};

use crate::ServeError;

pub const DEFAULT_CACHE_CAPACITY: usize = 32;

/// On-disk catalog description. Relative paths resolve against the
/// directory holding the catalog file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    /// Dataset directory as written by `dataset::save_cohort`.
    pub dataset: PathBuf,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub rule: RuleConfig,
    #[serde(default = "default_capacity")]
    pub cache_capacity: usize,
    /// Built viewer assets, served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

fn default_capacity() -> usize {
    DEFAULT_CACHE_CAPACITY
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub path: PathBuf,
    /// Residualizer applied to each volume before it reaches the model.
    #[serde(default)]
    pub residualizer: Option<PathBuf>,
}

pub struct CatalogModel {
    pub id: String,
    pub model: Model<f32>,
    pub residualizer: Option<ResidualModel>,
}

pub struct Catalog {
    pub cohort: Cohort,
    pub models: Vec<CatalogModel>,
    pub rule: RuleConfig,
    pub cache_capacity: usize,
    pub static_dir: Option<PathBuf>,
}

fn bad(path: &Path, detail: impl std::fmt::Display) -> ServeError {
    ServeError::Catalog(format!("{}: {detail}", path.display()))
}

impl CatalogConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ServeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| bad(path, e))?;
        let mut cfg: CatalogConfig = serde_json::from_str(&text).map_err(|e| bad(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        for m in &mut cfg.models {
            resolve(&mut m.path);
            if let Some(r) = &mut m.residualizer {
                resolve(r);
            }
        }
        if let Some(s) = &mut cfg.static_dir {
            resolve(s);
        }
        Ok(cfg)
    }
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServeError> {
        Self::from_config(CatalogConfig::read(path)?)
    }

    pub fn from_config(cfg: CatalogConfig) -> Result<Self, ServeError> {
        let cohort = load_cohort(&cfg.dataset).map_err(|e| bad(&cfg.dataset, e))?;
        let mut models = Vec::with_capacity(cfg.models.len());
        for m in &cfg.models {
            let model = load_model(&m.path).map_err(|e| bad(&m.path, e))?;
            let residualizer = match &m.residualizer {
                Some(p) => Some(ResidualModel::load(p).map_err(|e| bad(p, e))?),
                None => None,
            };
            models.push(CatalogModel {
                id: m.id.clone(),
                model,
                residualizer,
            });
        }
        Catalog::new(cohort, models, cfg.rule, cfg.cache_capacity, cfg.static_dir)
    }

    pub fn new(
        cohort: Cohort,
        models: Vec<CatalogModel>,
        rule: RuleConfig,
        cache_capacity: usize,
        static_dir: Option<PathBuf>,
    ) -> Result<Self, ServeError> {
        let invalid = |s: String| Err(ServeError::Catalog(s));
        if cohort.subjects.is_empty() {
            return invalid("catalog has no subjects".into());
        }
        if models.is_empty() {
            return invalid("catalog has no models".into());
        }
        if cache_capacity == 0 {
            return invalid("cache_capacity must be at least 1".into());
        }
        rule.validate()
            .map_err(|e| ServeError::Catalog(e.to_string()))?;
        let dims = cohort.atlas.dims();
        for (i, m) in models.iter().enumerate() {
            if models[..i].iter().any(|o| o.id == m.id) {
                return invalid(format!("duplicate model id {}", m.id));
            }
            if m.model.input_dims() != dims {
                return invalid(format!(
                    "model {} expects {} but the dataset is {dims}",
                    m.id,
                    m.model.input_dims()
                ));
            }
            if let Some(r) = &m.residualizer {
                if r.dims().is_some_and(|d| d != dims) {
                    return invalid(format!(
                        "residualizer of model {} does not match the dataset dims",
                        m.id
                    ));
                }
            }
        }
        Ok(Catalog {
            cohort,
            models,
            rule,
            cache_capacity,
            static_dir,
        })
    }

    pub fn dims(&self) -> Dims {
        self.cohort.atlas.dims()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.cohort.subjects.iter().position(|(r, _)| r.id == id)
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.id == id)
    }

    /// The volume as the model sees it.
    pub fn model_input(&self, subject: usize, model: usize) -> relevis_core::Result<Volume3D> {
        let (record, volume) = &self.cohort.subjects[subject];
        match &self.models[model].residualizer {
            Some(r) => apply_residualizer(r, volume, record),
            None => Ok(volume.clone()),
        }
    }
}
