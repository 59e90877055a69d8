use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub cohort: u64,
    pub fold: u64,
    pub model: u64,
    pub train: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Seeds,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<PathBuf>,
    /// Wall-clock seconds per step.
    pub timings: BTreeMap<String, f64>,
}

/// Records step timings for one subcommand and writes the manifest.
pub struct Run {
    command: &'static str,
    out: PathBuf,
    timings: BTreeMap<String, f64>,
}

impl Run {
    pub fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            command,
            out: out.to_path_buf(),
            timings: BTreeMap::new(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    pub fn step<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let v = f()?;
        let secs = t.elapsed().as_secs_f64();
        tracing::info!("{name} done in {secs:.1}s");
        *self.timings.entry(name.to_string()).or_default() += secs;
        Ok(v)
    }

    pub fn finish(self, config: &RunConfig) -> Result<Manifest> {
        write_json(&self.out.join(CONFIG_FILE), &config.recorded())?;
        let mut artifacts = Vec::new();
        collect_files(&self.out, &self.out, &mut artifacts)?;
        artifacts.retain(|p| p != Path::new(MANIFEST_FILE));
        artifacts.sort();
        let e = &config.experiment;
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash()?,
            seed: config.seed,
            seeds: Seeds {
                cohort: config.seed,
                fold: e.fold_seed,
                model: e.model_seed,
                train: e.train.seed,
            },
            artifacts,
            timings: self.timings,
        };
        write_json(&self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
