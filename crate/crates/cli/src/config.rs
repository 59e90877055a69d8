use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use relevis_core::analyze::OcclusionConfig;
use relevis_core::experiment::ExperimentConfig;
use relevis_core::{GroupCounts, PhantomSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything a run depends on. Loaded from `--config`, then overridden
/// flag by flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort seed for phantom generation.
    pub seed: u64,
    pub counts: GroupCounts,
    pub phantom: PhantomSpec,
    pub experiment: ExperimentConfig,
    pub occlusion: OcclusionConfig,
    pub relevance: RelevanceOptions,
    pub paths: Paths,
    /// Folds trained concurrently by `cross-validate`.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            counts: GroupCounts::new(150, 130, 110),
            phantom: PhantomSpec::default(),
            experiment: ExperimentConfig::default(),
            occlusion: OcclusionConfig::default(),
            relevance: RelevanceOptions::default(),
            paths: Paths::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceOptions {
    pub target_class: usize,
    /// Subject ids to export; all subjects when empty.
    pub subjects: Vec<String>,
}

impl Default for RelevanceOptions {
    fn default() -> Self {
        RelevanceOptions {
            target_class: 1,
            subjects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub residualizer: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

impl Paths {
    fn for_each(&mut self, mut f: impl FnMut(&mut PathBuf) -> Result<()>) -> Result<()> {
        for p in [
            &mut self.data,
            &mut self.out,
            &mut self.model,
            &mut self.residualizer,
            &mut self.catalog,
        ]
        .into_iter()
        .flatten()
        {
            f(p)?;
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&Path> {
        required(&self.data, "dataset directory (--data)")
    }

    pub fn out(&self) -> Result<&Path> {
        required(&self.out, "output directory (--out)")
    }

    pub fn model(&self) -> Result<&Path> {
        required(&self.model, "model file (--model)")
    }

    pub fn residualizer(&self) -> Result<&Path> {
        required(&self.residualizer, "residualizer file (--residualizer)")
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("no {what} given on the command line or in the config"),
    }
}

/// Parsed config plus whether the file set the epoch count itself.
pub struct Loaded {
    pub config: RunConfig,
    pub epochs_given: bool,
}

/// Reads a config file; relative paths inside it resolve against the
/// file's directory.
pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: RunConfig::default(),
            epochs_given: false,
        });
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let epochs_given = value.pointer("/experiment/train/epochs").is_some();
    let mut config: RunConfig = serde_json::from_value(value)
        .with_context(|| format!("invalid config {}", path.display()))?;
    let base = std::path::absolute(path)?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    config.paths.for_each(|p| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
        Ok(())
    })?;
    Ok(Loaded {
        config,
        epochs_given,
    })
}

impl RunConfig {
    /// Makes every path absolute and checks the parts a run relies on.
    pub fn finalize(&mut self, epochs_given: bool) -> Result<()> {
        self.paths.for_each(|p| {
            *p = std::path::absolute(&*p)?;
            Ok(())
        })?;
        if !epochs_given {
            self.experiment.train.epochs = self.experiment.input.default_epochs();
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        self.phantom.validate()?;
        self.experiment.train.validate()?;
        self.experiment.rule.validate()?;
        self.occlusion.rule.validate()?;
        Ok(())
    }

    /// The config as recorded next to the artifacts. The output location
    /// is left out so identical runs into different directories agree.
    pub fn recorded(&self) -> RunConfig {
        let mut c = self.clone();
        c.paths.out = None;
        c
    }

    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.recorded())?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
