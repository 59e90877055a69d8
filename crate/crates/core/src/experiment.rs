//! Evaluation protocol on a cohort: per-fold residualization, CNN training,
//! the region-volume baseline, group comparisons and report tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::{region_relevance, region_volume};
use crate::error::{Error, Result};
use crate::eval::{
    classification_metrics, roc_auc, stratified_kfold, volume_baseline, Metrics, ScatterPoint,
};
use crate::lrp::{relevance_map_f64, RuleConfig};
use crate::nn::{
    build_model, class_weights, predict_all, train_with_progress, CheckpointPolicy, EpochRecord,
    Model, TrainConfig,
};
use crate::phantom::Cohort;
use crate::residualize::{
    apply_residualizer, fit_residualizer, fit_scalar_residualizer, ResidualModel,
};
use crate::subject::{Amyloid, Group, SubjectRecord};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Raw,
    #[default]
    Residualized,
}

impl InputKind {
    /// Raw maps converge more slowly and get twice the epochs.
    pub fn default_epochs(self) -> usize {
        match self {
            InputKind::Raw => 20,
            InputKind::Residualized => 10,
        }
    }
}

impl std::str::FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw" => Ok(InputKind::Raw),
            "residualized" => Ok(InputKind::Residualized),
            _ => Err(format!(
                "unknown input kind {s:?} (expected raw or residualized)"
            )),
        }
    }
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputKind::Raw => "raw",
            InputKind::Residualized => "residualized",
        })
    }
}

/// A binary group contrast evaluated on the test partition.
#[derive(Debug, Clone, Copy)]
pub struct Comparison {
    pub name: &'static str,
    pub positive: fn(&SubjectRecord) -> bool,
    pub negative: fn(&SubjectRecord) -> bool,
}

impl Comparison {
    /// 1 for the positive side, 0 for the negative side, `None` otherwise.
    pub fn label(&self, r: &SubjectRecord) -> Option<usize> {
        if (self.positive)(r) {
            Some(1)
        } else if (self.negative)(r) {
            Some(0)
        } else {
            None
        }
    }
}

fn amyloid_is(r: &SubjectRecord, a: Amyloid) -> bool {
    r.amyloid == Some(a)
}

pub const COMPARISONS: [Comparison; 4] = [
    Comparison {
        name: "MCI vs CN",
        positive: |r| r.group == Group::MCI,
        negative: |r| r.group == Group::CN,
    },
    Comparison {
        name: "AD vs CN",
        positive: |r| r.group == Group::AD,
        negative: |r| r.group == Group::CN,
    },
    Comparison {
        name: "MCI+ vs CN-",
        positive: |r| r.group == Group::MCI && amyloid_is(r, Amyloid::Pos),
        negative: |r| r.group == Group::CN && amyloid_is(r, Amyloid::Neg),
    },
    Comparison {
        name: "AD+ vs CN-",
        positive: |r| r.group == Group::AD && amyloid_is(r, Amyloid::Pos),
        negative: |r| r.group == Group::CN && amyloid_is(r, Amyloid::Neg),
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub input: InputKind,
    /// Atlas region used for the volume baseline and the relevance scatter.
    pub region: String,
    pub folds: usize,
    pub fold_seed: u64,
    pub model_seed: u64,
    pub rule: RuleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            input: InputKind::Residualized,
            region: "Hippocampus".into(),
            folds: 10,
            fold_seed: 0,
            model_seed: 0,
            rule: RuleConfig::default(),
        }
    }
}

/// Model inputs for every subject, with the voxel residualizer fitted on
/// the training controls when residualizing.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub volumes: Vec<Volume3D>,
    pub residualizer: Option<ResidualModel>,
}

pub fn prepare_inputs(
    cohort: &Cohort,
    train_idx: &[usize],
    kind: InputKind,
) -> Result<PreparedInputs> {
    match kind {
        InputKind::Raw => Ok(PreparedInputs {
            volumes: cohort.subjects.iter().map(|(_, v)| v.clone()).collect(),
            residualizer: None,
        }),
        InputKind::Residualized => {
            let controls: Vec<(&Volume3D, &SubjectRecord)> = train_idx
                .iter()
                .map(|&i| &cohort.subjects[i])
                .filter(|(r, _)| r.group == Group::CN)
                .map(|(r, v)| (v, r))
                .collect();
            let model = fit_residualizer(&controls)?;
            let volumes = cohort
                .subjects
                .par_iter()
                .map(|(r, v)| apply_residualizer(&model, v, r))
                .collect::<Result<_>>()?;
            Ok(PreparedInputs {
                volumes,
                residualizer: Some(model),
            })
        }
    }
}

pub fn region_id(cohort: &Cohort, name: &str) -> Result<u32> {
    cohort
        .atlas
        .region_by_name(name)
        .ok_or_else(|| Error::Atlas(format!("unknown region {name:?}")))
}

/// Region volume of every subject, residualized against covariates with a
/// scalar model fitted on the training controls.
pub fn residual_region_volumes(
    cohort: &Cohort,
    train_idx: &[usize],
    region: u32,
) -> Result<Vec<f64>> {
    let raw: Vec<f64> = cohort
        .subjects
        .par_iter()
        .map(|(_, v)| region_volume(v, &cohort.atlas, region))
        .collect::<Result<_>>()?;
    let (values, records): (Vec<f64>, Vec<SubjectRecord>) = train_idx
        .iter()
        .filter(|&&i| cohort.subjects[i].0.group == Group::CN)
        .map(|&i| (raw[i], cohort.subjects[i].0.clone()))
        .unzip();
    let model = fit_scalar_residualizer(&values, &records)?;
    cohort
        .subjects
        .iter()
        .zip(&raw)
        .map(|((r, _), &v)| model.apply_scalar(v, r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMetrics {
    pub metrics: Metrics,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub name: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub cnn: ScoredMetrics,
    pub baseline: ScoredMetrics,
    pub baseline_threshold: f64,
}

/// CNN and region-volume results for each comparison with both sides
/// present in the test partition and in the training partition.
pub fn evaluate_comparisons(
    records: &[SubjectRecord],
    scores: &[f64],
    volumes: &[f64],
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<Vec<ComparisonResult>> {
    let mut out = Vec::new();
    for c in &COMPARISONS {
        let pick = |idx: &[usize]| -> Vec<(usize, usize)> {
            idx.iter()
                .filter_map(|&i| c.label(&records[i]).map(|l| (i, l)))
                .collect()
        };
        let test = pick(test_idx);
        let train = pick(train_idx);
        let both = |s: &[(usize, usize)]| s.iter().any(|p| p.1 == 1) && s.iter().any(|p| p.1 == 0);
        if !both(&test) || !both(&train) {
            continue;
        }
        let labels: Vec<usize> = test.iter().map(|p| p.1).collect();
        let s: Vec<f64> = test.iter().map(|p| scores[p.0]).collect();
        let pred: Vec<usize> = s.iter().map(|&p| usize::from(p > 0.5)).collect();
        let cnn = ScoredMetrics {
            metrics: classification_metrics(&pred, &labels)?,
            auc: roc_auc(&s, &labels)?,
        };
        let vol = |set: &[(usize, usize)]| -> Vec<(f64, usize)> {
            set.iter().map(|&(i, l)| (volumes[i], l)).collect()
        };
        let b = volume_baseline(&vol(&train), &vol(&test))?;
        out.push(ComparisonResult {
            name: c.name.to_string(),
            n_pos: labels.iter().filter(|&&l| l == 1).count(),
            n_neg: labels.iter().filter(|&&l| l == 0).count(),
            cnn,
            baseline: ScoredMetrics {
                metrics: b.metrics,
                auc: b.roc.auc,
            },
            baseline_threshold: b.threshold,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub class_weights: [f64; 2],
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub comparisons: Vec<ComparisonResult>,
}

/// Everything a fold produced, for downstream relevance analysis.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub report: FoldReport,
    pub model: Model<f32>,
    pub inputs: PreparedInputs,
    /// Residual region volume per subject.
    pub region_volumes: Vec<f64>,
    /// Disease probability per subject.
    pub scores: Vec<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn complement(n: usize, test_idx: &[usize]) -> Vec<usize> {
    let mut in_test = vec![false; n];
    for &i in test_idx {
        in_test[i] = true;
    }
    (0..n).filter(|&i| !in_test[i]).collect()
}

/// Trains on every fold but `test_idx` with epoch selection on the test
/// partition, then evaluates all comparisons.
pub fn run_fold(
    cohort: &Cohort,
    fold: usize,
    test_idx: &[usize],
    cfg: &ExperimentConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<FoldRun> {
    let n = cohort.subjects.len();
    let train_idx = complement(n, test_idx);
    let records = cohort.records();
    let inputs = prepare_inputs(cohort, &train_idx, cfg.input)?;
    let region = region_id(cohort, &cfg.region)?;
    let region_volumes = residual_region_volumes(cohort, &train_idx, region)?;

    let labels: Vec<usize> = records.iter().map(|r| r.label()).collect();
    let mut counts = [0usize; 2];
    for &i in &train_idx {
        counts[labels[i]] += 1;
    }
    let w = class_weights(&counts)?;
    let tcfg = TrainConfig {
        class_weights: [w[0], w[1]],
        checkpoint: CheckpointPolicy::BestOnTest,
        ..cfg.train.clone()
    };
    let set = |idx: &[usize]| -> Vec<(&Volume3D, usize)> {
        idx.iter()
            .map(|&i| (&inputs.volumes[i], labels[i]))
            .collect()
    };
    let model = build_model(
        cohort.atlas.dims(),
        cfg.model_seed.wrapping_add(fold as u64),
    )?;
    let outcome = train_with_progress(model, &set(&train_idx), &set(test_idx), &tcfg, progress)?;

    let all: Vec<(&Volume3D, usize)> = set(&(0..n).collect::<Vec<_>>());
    let scores = predict_all(&outcome.model, &all)?;
    let comparisons =
        evaluate_comparisons(&records, &scores, &region_volumes, &train_idx, test_idx)?;
    Ok(FoldRun {
        report: FoldReport {
            fold,
            train_size: train_idx.len(),
            test_size: test_idx.len(),
            class_weights: tcfg.class_weights,
            selected_epoch: outcome.selected_epoch,
            history: outcome.history,
            comparisons,
        },
        model: outcome.model,
        inputs,
        region_volumes,
        scores,
        train_idx,
        test_idx: test_idx.to_vec(),
    })
}

/// Stratified folds of the cohort under the configured seed.
pub fn folds(cohort: &Cohort, cfg: &ExperimentConfig) -> Result<Vec<Vec<usize>>> {
    stratified_kfold(&cohort.records(), cfg.folds, cfg.fold_seed)
}

/// Trains one model on the whole cohort for the configured epoch count.
pub fn train_whole_sample(
    cohort: &Cohort,
    cfg: &ExperimentConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<FoldRun> {
    let n = cohort.subjects.len();
    let all: Vec<usize> = (0..n).collect();
    let records = cohort.records();
    let inputs = prepare_inputs(cohort, &all, cfg.input)?;
    let region = region_id(cohort, &cfg.region)?;
    let region_volumes = residual_region_volumes(cohort, &all, region)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label()).collect();
    let counts = [
        labels.iter().filter(|&&l| l == 0).count(),
        labels.iter().filter(|&&l| l == 1).count(),
    ];
    let w = class_weights(&counts)?;
    let tcfg = TrainConfig {
        class_weights: [w[0], w[1]],
        checkpoint: CheckpointPolicy::FixedEpochs,
        ..cfg.train.clone()
    };
    let set: Vec<(&Volume3D, usize)> = inputs.volumes.iter().zip(labels.iter().copied()).collect();
    let model = build_model(cohort.atlas.dims(), cfg.model_seed)?;
    let outcome = train_with_progress(model, &set, &[], &tcfg, progress)?;
    let scores = predict_all(&outcome.model, &set)?;
    Ok(FoldRun {
        report: FoldReport {
            fold: 0,
            train_size: n,
            test_size: 0,
            class_weights: tcfg.class_weights,
            selected_epoch: outcome.selected_epoch,
            history: outcome.history,
            comparisons: Vec::new(),
        },
        model: outcome.model,
        inputs,
        region_volumes,
        scores,
        train_idx: all,
        test_idx: Vec::new(),
    })
}

/// Region relevance (disease class) against residual region volume for the
/// given subjects.
pub fn relevance_scatter(
    model: &Model<f32>,
    cohort: &Cohort,
    inputs: &[Volume3D],
    region_volumes: &[f64],
    region: u32,
    subjects: &[usize],
    rule: &RuleConfig,
) -> Result<Vec<ScatterPoint>> {
    let m64: Model<f64> = model.cast();
    subjects
        .par_iter()
        .map(|&i| {
            let rm = relevance_map_f64(&m64, &inputs[i], 1, rule)?;
            let rel = region_relevance(&rm.map, &cohort.atlas)?;
            let r = &cohort.subjects[i].0;
            Ok(ScatterPoint {
                id: r.id.clone(),
                group: r.group,
                volume: region_volumes[i],
                relevance: rel.by_id(region).unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, n }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub balanced_accuracy: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
    pub f1: MeanSd,
    pub ppv: MeanSd,
    pub npv: MeanSd,
    pub auc: MeanSd,
}

impl MetricSummary {
    fn of(items: &[&ScoredMetrics]) -> Self {
        let f = |g: fn(&ScoredMetrics) -> f64| {
            MeanSd::of(&items.iter().map(|m| g(m)).collect::<Vec<_>>())
        };
        MetricSummary {
            balanced_accuracy: f(|m| m.metrics.balanced_accuracy),
            sensitivity: f(|m| m.metrics.sensitivity),
            specificity: f(|m| m.metrics.specificity),
            f1: f(|m| m.metrics.f1),
            ppv: f(|m| m.metrics.ppv),
            npv: f(|m| m.metrics.npv),
            auc: f(|m| m.auc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub name: String,
    pub folds: usize,
    pub cnn: MetricSummary,
    pub baseline: MetricSummary,
}

/// Mean ± SD over folds for each comparison, in `COMPARISONS` order.
pub fn summarize(reports: &[FoldReport]) -> Vec<ComparisonSummary> {
    COMPARISONS
        .iter()
        .filter_map(|c| {
            let rs: Vec<&ComparisonResult> = reports
                .iter()
                .flat_map(|r| r.comparisons.iter().filter(|x| x.name == c.name))
                .collect();
            if rs.is_empty() {
                return None;
            }
            Some(ComparisonSummary {
                name: c.name.to_string(),
                folds: rs.len(),
                cnn: MetricSummary::of(&rs.iter().map(|r| &r.cnn).collect::<Vec<_>>()),
                baseline: MetricSummary::of(&rs.iter().map(|r| &r.baseline).collect::<Vec<_>>()),
            })
        })
        .collect()
}

/// Balanced accuracy and AUC of the volume baseline next to the CNN.
pub fn format_summary_table(summaries: &[ComparisonSummary], region: &str) -> String {
    let mut s = String::new();
    let vol = format!("{region} volume");
    let _ = writeln!(s, "{:<14} {:^33} {:^33}", "", vol, "CNN");
    let _ = writeln!(
        s,
        "{:<14} {:>16} {:>16} {:>16} {:>16}",
        "Comparison", "Bal. accuracy", "AUC", "Bal. accuracy", "AUC"
    );
    for c in summaries {
        let _ = writeln!(
            s,
            "{:<14} {:>16} {:>16} {:>16} {:>16}",
            c.name,
            c.baseline.balanced_accuracy.to_string(),
            c.baseline.auc.to_string(),
            c.cnn.balanced_accuracy.to_string(),
            c.cnn.auc.to_string()
        );
    }
    s
}

/// Full CNN metric set per comparison.
pub fn format_metrics_table(summaries: &[ComparisonSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16}",
        "Comparison", "Bal. accuracy", "Sensitivity", "Specificity", "F1", "PPV", "NPV"
    );
    for c in summaries {
        let m = &c.cnn;
        let _ = writeln!(
            s,
            "{:<14} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16}",
            c.name,
            m.balanced_accuracy.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.f1.to_string(),
            m.ppv.to_string(),
            m.npv.to_string()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, GroupCounts, PhantomSpec};
    use crate::volume::Dims;

    fn small_cohort() -> Cohort {
        let spec = PhantomSpec {
            dims: Dims::new(12, 12, 14),
            ..Default::default()
        };
        generate_cohort(&spec, GroupCounts::new(12, 10, 10), 5).unwrap()
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.sd, 1.0);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
        assert_eq!(m.to_string(), "2.000 ± 1.000");
    }

    #[test]
    fn comparison_labels() {
        let c = small_cohort();
        let r = &c.subjects;
        let cn = &r[0].0;
        let ad = &r.last().unwrap().0;
        assert_eq!(COMPARISONS[1].label(cn), Some(0));
        assert_eq!(COMPARISONS[1].label(ad), Some(1));
        assert_eq!(COMPARISONS[0].label(ad), None);
    }

    #[test]
    fn residual_volumes_are_centred_on_training_controls() {
        let c = small_cohort();
        let train: Vec<usize> = (0..c.subjects.len()).step_by(2).collect();
        let v = residual_region_volumes(&c, &train, 1).unwrap();
        let cn: Vec<f64> = train
            .iter()
            .filter(|&&i| c.subjects[i].0.group == Group::CN)
            .map(|&i| v[i])
            .collect();
        assert!(cn.iter().sum::<f64>().abs() < 1e-6);
    }

    #[test]
    fn residual_volume_matches_voxelwise_residuals() {
        let c = small_cohort();
        let train: Vec<usize> = (0..c.subjects.len()).collect();
        let p = prepare_inputs(&c, &train, InputKind::Residualized).unwrap();
        let v = residual_region_volumes(&c, &train, 1).unwrap();
        for i in [0, 15, 31] {
            let voxelwise = region_volume(&p.volumes[i], &c.atlas, 1).unwrap();
            assert!((voxelwise - v[i]).abs() < 1e-3, "{voxelwise} vs {}", v[i]);
        }
    }

    #[test]
    fn summary_table_shape() {
        let c = small_cohort();
        let records = c.records();
        let n = records.len();
        let scores: Vec<f64> = records.iter().map(|r| r.lesion_severity).collect();
        let vols: Vec<f64> = records.iter().map(|r| -r.lesion_severity).collect();
        let test: Vec<usize> = (0..n).step_by(3).collect();
        let train = complement(n, &test);
        let res = evaluate_comparisons(&records, &scores, &vols, &train, &test).unwrap();
        assert!(res.len() >= 2);
        assert_eq!(res[1].name, "AD vs CN");
        assert_eq!(res[1].cnn.auc, 1.0);
        let report = FoldReport {
            fold: 0,
            train_size: train.len(),
            test_size: test.len(),
            class_weights: [1.0, 1.0],
            selected_epoch: 1,
            history: Vec::new(),
            comparisons: res,
        };
        let table = format_summary_table(&summarize(&[report]), "Hippocampus");
        assert!(table.contains("Hippocampus volume"));
        assert!(table
            .lines()
            .any(|l| l.starts_with("AD vs CN") && l.contains("1.000 ± 0.000")));
    }
}
