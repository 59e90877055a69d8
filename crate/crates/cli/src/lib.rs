//! The `relevis` command line: phantom generation, residualization,
//! training, cross-validation, relevance export and analysis, occlusion
//! and the viewer backend.

mod commands;
pub mod config;
pub mod manifest;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use relevis_core::experiment::InputKind;
use relevis_core::{Dims, GroupCounts};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "relevis",
    version,
    about = "Relevance maps for volumetric CNN classifiers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every artifact and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cohort seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (as written by phantom-gen).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Voxel residualizer applied before the model; omit for raw input.
    #[arg(long)]
    pub residualizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: Option<InputKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Atlas region for the volume baseline.
    #[arg(long)]
    pub region: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with atlas and covariates.
    PhantomGen {
        /// Subjects per group as CN,MCI,AD.
        #[arg(long)]
        counts: Option<GroupCounts>,
        /// Volume size as NXxNYxNZ.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<Dims>,
    },
    /// Fit the voxel-wise covariate model on the controls of a dataset.
    FitResidualizer {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a dataset of residual volumes.
    Residualize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        residualizer: Option<PathBuf>,
    },
    /// Train one model on the whole dataset for a fixed number of epochs.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Stratified k-fold training and evaluation with a summary table.
    CrossValidate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        fold_seed: Option<u64>,
        /// Also write each fold's model and residualizer.
        #[arg(long)]
        save_models: bool,
    },
    /// Predictions and per-comparison metrics of a trained model.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Export relevance maps as NIfTI volumes.
    Relevance {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Subject id; repeat for several. All subjects when absent.
        #[arg(long = "subject")]
        subjects: Vec<String>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Region relevance sums and their correlation with region volume.
    RegionStats {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        region: Option<String>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Occlusion sensitivity maps for one subject.
    Occlusion {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        subject: String,
        /// Cube edge in voxels.
        #[arg(long)]
        cube: Option<usize>,
        /// Fraction by which intensities inside the cube are lowered.
        #[arg(long)]
        reduction: Option<f64>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Serve the viewer API over HTTP.
    Serve {
        /// Catalog file.
        #[arg(long, env = relevis_server::CATALOG_ENV)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("bad dims {s:?}: {e}"))?;
    match parts[..] {
        [nx, ny, nz] if nx > 0 && ny > 0 && nz > 0 => Ok(Dims::new(nx, ny, nz)),
        _ => Err(format!("expected NXxNYxNZ with positive sizes, got {s:?}")),
    }
}

/// Loads the config and applies every flag on top of it.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let loaded = config::load(cli.global.config.as_deref())?;
    let mut c = loaded.config;
    let mut epochs_given = loaded.epochs_given;
    let g = &cli.global;
    if let Some(v) = &g.out {
        c.paths.out = Some(v.clone());
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.jobs {
        c.jobs = v;
    }
    let set_data = |c: &mut RunConfig, d: &DataArgs| {
        if let Some(v) = &d.data {
            c.paths.data = Some(v.clone());
        }
    };
    let set_model = |c: &mut RunConfig, m: &ModelArgs| {
        if let Some(v) = &m.model {
            c.paths.model = Some(v.clone());
        }
        if let Some(v) = &m.residualizer {
            c.paths.residualizer = Some(v.clone());
        }
    };
    let mut set_train = |c: &mut RunConfig, t: &TrainArgs| {
        let e = &mut c.experiment;
        if let Some(v) = t.input {
            e.input = v;
        }
        if let Some(v) = t.epochs {
            e.train.epochs = v;
            epochs_given = true;
        }
        if let Some(v) = t.model_seed {
            e.model_seed = v;
        }
        if let Some(v) = &t.region {
            e.region = v.clone();
        }
    };
    match &cli.command {
        Command::PhantomGen { counts, dims } => {
            if let Some(v) = counts {
                c.counts = *v;
            }
            if let Some(v) = dims {
                c.phantom.dims = *v;
            }
        }
        Command::FitResidualizer { data } => set_data(&mut c, data),
        Command::Residualize { data, residualizer } => {
            set_data(&mut c, data);
            if let Some(v) = residualizer {
                c.paths.residualizer = Some(v.clone());
            }
        }
        Command::Train { data, train } => {
            set_data(&mut c, data);
            set_train(&mut c, train);
        }
        Command::CrossValidate {
            data,
            train,
            k,
            fold_seed,
            ..
        } => {
            set_data(&mut c, data);
            set_train(&mut c, train);
            if let Some(v) = k {
                c.experiment.folds = *v;
            }
            if let Some(v) = fold_seed {
                c.experiment.fold_seed = *v;
            }
        }
        Command::Evaluate { data, model } => {
            set_data(&mut c, data);
            set_model(&mut c, model);
        }
        Command::Relevance {
            data,
            model,
            subjects,
            target,
        } => {
            set_data(&mut c, data);
            set_model(&mut c, model);
            if !subjects.is_empty() {
                c.relevance.subjects = subjects.clone();
            }
            if let Some(v) = target {
                c.relevance.target_class = *v;
            }
        }
        Command::RegionStats {
            data,
            model,
            region,
            target,
        } => {
            set_data(&mut c, data);
            set_model(&mut c, model);
            if let Some(v) = region {
                c.experiment.region = v.clone();
            }
            if let Some(v) = target {
                c.relevance.target_class = *v;
            }
        }
        Command::Occlusion {
            data,
            model,
            cube,
            reduction,
            stride,
            target,
            ..
        } => {
            set_data(&mut c, data);
            set_model(&mut c, model);
            let o = &mut c.occlusion;
            if cube.is_some() {
                o.cube_edge = *cube;
            }
            if let Some(v) = reduction {
                o.reduction = *v;
            }
            if let Some(v) = stride {
                o.stride = *v;
            }
            if let Some(v) = target {
                o.target_class = *v;
            }
        }
        Command::Serve { catalog, .. } => {
            if let Some(v) = catalog {
                c.paths.catalog = Some(v.clone());
            }
        }
    }
    if c.relevance.target_class > 1 || c.occlusion.target_class > 1 {
        bail!("target class must be 0 or 1");
    }
    c.finalize(epochs_given)?;
    Ok(c)
}

/// Parses `argv`, runs the subcommand and maps the outcome to an exit code:
/// 0 on success, 2 on a usage error, 1 on any other failure.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
    match effective_config(&cli).and_then(|c| commands::run(&cli.command, &c)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
