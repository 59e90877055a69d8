use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use relevis_core::analyze::occlusion_scan;
use relevis_core::analyze::region_relevance;
use relevis_core::dataset::{load_cohort, save_cohort};
use relevis_core::eval::{classification_metrics, correlate_relevance_volume, roc_auc};
use relevis_core::experiment::{
    folds, format_metrics_table, format_summary_table, region_id, relevance_scatter,
    residual_region_volumes, run_fold, summarize, train_whole_sample, FoldReport, FoldRun,
    COMPARISONS,
};
use relevis_core::lrp::relevance_map_f64;
use relevis_core::nn::{load_model, predict_all, save_model, EpochRecord, Model};
use relevis_core::{
    apply_residualizer, fit_residualizer, generate_cohort, write_volume, Amyloid, Cohort,
    ResidualModel, SubjectRecord, Volume3D,
};
use relevis_server::{CatalogConfig, ModelConfig, DEFAULT_CACHE_CAPACITY};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{write_json, write_text, Run};
use crate::Command;

pub fn run(cmd: &Command, c: &RunConfig) -> Result<()> {
    match cmd {
        Command::PhantomGen { .. } => phantom_gen(c),
        Command::FitResidualizer { .. } => fit_residualizer_cmd(c),
        Command::Residualize { .. } => residualize(c),
        Command::Train { .. } => train(c),
        Command::CrossValidate { save_models, .. } => cross_validate(c, *save_models),
        Command::Evaluate { .. } => evaluate(c),
        Command::Relevance { .. } => relevance(c),
        Command::RegionStats { .. } => region_stats(c),
        Command::Occlusion { subject, .. } => occlusion(c, subject),
        Command::Serve { bind, .. } => serve(c, *bind),
    }
}

fn load_data(run: &mut Run, c: &RunConfig) -> Result<Cohort> {
    let dir = c.paths.data()?;
    let cohort = run.step("load", || {
        load_cohort(dir).with_context(|| format!("loading dataset {}", dir.display()))
    })?;
    tracing::info!(
        "{} subjects at {} from {}",
        cohort.subjects.len(),
        cohort.atlas.dims(),
        dir.display()
    );
    Ok(cohort)
}

fn load_residualizer(c: &RunConfig) -> Result<Option<ResidualModel>> {
    c.paths
        .residualizer
        .as_deref()
        .map(|p| ResidualModel::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

/// Model plus the inputs it expects for every subject.
fn load_model_inputs(
    run: &mut Run,
    c: &RunConfig,
    cohort: &Cohort,
) -> Result<(Model<f32>, Vec<Volume3D>)> {
    let path = c.paths.model()?;
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    let residualizer = load_residualizer(c)?;
    let inputs = run.step("prepare", || {
        cohort
            .subjects
            .par_iter()
            .map(|(r, v)| match &residualizer {
                Some(m) => apply_residualizer(m, v, r),
                None => Ok(v.clone()),
            })
            .collect::<relevis_core::Result<Vec<_>>>()
            .map_err(Into::into)
    })?;
    if let Some(v) = inputs.first() {
        v.ensure_dims(model.input_dims())
            .context("dataset does not match the model input")?;
    }
    Ok((model, inputs))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn subject_index(cohort: &Cohort, id: &str) -> Result<usize> {
    cohort
        .subjects
        .iter()
        .position(|(r, _)| r.id == id)
        .ok_or_else(|| anyhow!("unknown subject {id:?}"))
}

fn amyloid_str(r: &SubjectRecord) -> &'static str {
    match r.amyloid {
        Some(Amyloid::Pos) => "pos",
        Some(Amyloid::Neg) => "neg",
        None => "",
    }
}

fn phantom_gen(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("phantom-gen", c.paths.out()?)?;
    let cohort = run.step("generate", || {
        Ok(generate_cohort(&c.phantom, c.counts, c.seed)?)
    })?;
    let out = run.out().to_path_buf();
    run.step("write", || Ok(save_cohort(&cohort, &out)?))?;
    println!(
        "{} subjects (CN {}, MCI {}, AD {}) at {} written to {}",
        c.counts.total(),
        c.counts.cn,
        c.counts.mci,
        c.counts.ad,
        c.phantom.dims,
        run.out().display()
    );
    run.finish(c)?;
    Ok(())
}

fn fit_residualizer_cmd(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("fit-residualizer", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let model = run.step("fit", || {
        let controls: Vec<(&Volume3D, &SubjectRecord)> = cohort
            .subjects
            .iter()
            .filter(|(r, _)| r.label() == 0)
            .map(|(r, v)| (v, r))
            .collect();
        Ok(fit_residualizer(&controls)?)
    })?;
    let path = run.path("residualizer.bin");
    model.save(&path)?;
    println!(
        "residualizer over {} fitted on {} controls: {}",
        model.covariate_names().join(", "),
        model.fit_count(),
        path.display()
    );
    run.finish(c)?;
    Ok(())
}

fn residualize(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("residualize", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let path = c.paths.residualizer()?;
    let model = ResidualModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    let residual = run.step("residualize", || {
        let subjects = cohort
            .subjects
            .par_iter()
            .map(|(r, v)| Ok((r.clone(), apply_residualizer(&model, v, r)?)))
            .collect::<relevis_core::Result<Vec<_>>>()?;
        Ok(Cohort {
            subjects,
            atlas: cohort.atlas.clone(),
        })
    })?;
    let out = run.out().to_path_buf();
    run.step("write", || Ok(save_cohort(&residual, &out)?))?;
    println!(
        "{} residual volumes written to {}",
        residual.subjects.len(),
        run.out().display()
    );
    run.finish(c)?;
    Ok(())
}

fn log_epoch(prefix: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |e| match (e.test_balanced_accuracy, e.test_auc) {
        (Some(b), Some(a)) => tracing::info!(
            "{prefix}epoch {:>2}: loss {:.4}, test balanced accuracy {b:.3}, AUC {a:.3}",
            e.epoch,
            e.train_loss
        ),
        _ => tracing::info!("{prefix}epoch {:>2}: loss {:.4}", e.epoch, e.train_loss),
    }
}

fn save_fold_artifacts(dir: &Path, fr: &FoldRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_model(&fr.model, dir.join("model.bin"))?;
    if let Some(m) = &fr.inputs.residualizer {
        m.save(dir.join("residualizer.bin"))?;
    }
    Ok(())
}

fn train(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("train", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let e = &c.experiment;
    tracing::info!(
        "training on {} {} inputs for {} epochs",
        cohort.subjects.len(),
        e.input,
        e.train.epochs
    );
    let fr = run.step("train", || {
        Ok(train_whole_sample(&cohort, e, log_epoch(""))?)
    })?;
    save_fold_artifacts(run.out(), &fr)?;
    write_json(&run.path("training.json"), &fr.report)?;
    let catalog = CatalogConfig {
        dataset: c.paths.data()?.to_path_buf(),
        models: vec![ModelConfig {
            id: "model".into(),
            path: "model.bin".into(),
            residualizer: fr
                .inputs
                .residualizer
                .as_ref()
                .map(|_| "residualizer.bin".into()),
        }],
        rule: e.rule,
        cache_capacity: DEFAULT_CACHE_CAPACITY,
        static_dir: None,
    };
    write_json(&run.path("catalog.json"), &catalog)?;
    let last = fr.report.history.last().map_or(f64::NAN, |h| h.train_loss);
    println!(
        "trained {} epochs, final loss {last:.4}; model written to {}",
        fr.report.selected_epoch,
        run.path("model.bin").display()
    );
    run.finish(c)?;
    Ok(())
}

/// Runs every fold with at most `jobs` in flight, preserving fold order.
fn run_folds(
    cohort: &Cohort,
    splits: &[Vec<usize>],
    c: &RunConfig,
    mut each: impl FnMut(FoldRun) -> Result<FoldReport> + Send,
) -> Result<Vec<FoldReport>> {
    let k = splits.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<FoldReport>>> = Mutex::new(vec![None; k]);
    let sink = Mutex::new(&mut each);
    let first_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..c.jobs.min(k) {
            s.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::SeqCst);
                if f >= k || first_error.lock().unwrap().is_some() {
                    break;
                }
                let prefix = format!("fold {}/{k} ", f + 1);
                let outcome = run_fold(cohort, f, &splits[f], &c.experiment, log_epoch(&prefix))
                    .map_err(anyhow::Error::from)
                    .and_then(|fr| (sink.lock().unwrap())(fr));
                match outcome {
                    Ok(r) => results.lock().unwrap()[f] = Some(r),
                    Err(e) => {
                        first_error
                            .lock()
                            .unwrap()
                            .get_or_insert(e.context(format!("fold {}", f + 1)));
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results
        .into_inner()
        .unwrap()
        .into_iter()
        .flatten()
        .collect())
}

fn fold_line(r: &FoldReport) -> String {
    let mut s = format!(
        "fold {:>2}: train {}, test {}, epoch {}",
        r.fold + 1,
        r.train_size,
        r.test_size,
        r.selected_epoch
    );
    for x in &r.comparisons {
        let _ = write!(
            s,
            "; {} bal. acc. {:.3} AUC {:.3}",
            x.name, x.cnn.metrics.balanced_accuracy, x.cnn.auc
        );
    }
    s
}

fn cross_validate(c: &RunConfig, save_models: bool) -> Result<()> {
    let mut run = Run::start("cross-validate", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let e = &c.experiment;
    let splits = folds(&cohort, e)?;
    tracing::info!(
        "{}-fold cross-validation on {} inputs, {} epochs, {} fold(s) at a time",
        splits.len(),
        e.input,
        e.train.epochs,
        c.jobs
    );
    let out = run.out().to_path_buf();
    let reports = run.step("folds", || {
        run_folds(&cohort, &splits, c, |fr| {
            if save_models {
                save_fold_artifacts(&out.join(format!("fold_{:02}", fr.report.fold + 1)), &fr)?;
            }
            println!("{}", fold_line(&fr.report));
            Ok(fr.report)
        })
    })?;
    let summaries = summarize(&reports);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&fold_line(r));
        text.push('\n');
    }
    let _ = writeln!(
        text,
        "\n{} inputs, mean ± SD over {} folds\n",
        e.input,
        reports.len()
    );
    text.push_str(&format_summary_table(&summaries, &e.region));
    text.push('\n');
    text.push_str(&format_metrics_table(&summaries));
    write_text(&run.path("report.txt"), &text)?;
    write_json(&run.path("folds.json"), &reports)?;
    write_json(&run.path("summary.json"), &summaries)?;
    println!("\nmean ± SD over {} folds\n", reports.len());
    print!("{}", format_summary_table(&summaries, &e.region));
    println!();
    print!("{}", format_metrics_table(&summaries));
    run.finish(c)?;
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    name: String,
    n_pos: usize,
    n_neg: usize,
    auc: f64,
    metrics: relevis_core::eval::Metrics,
}

fn evaluate(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("evaluate", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let (model, inputs) = load_model_inputs(&mut run, c, &cohort)?;
    let records = cohort.records();
    let scores = run.step("predict", || {
        let set: Vec<(&Volume3D, usize)> = inputs
            .iter()
            .zip(records.iter().map(|r| r.label()))
            .collect();
        Ok(predict_all(&model, &set)?)
    })?;
    let mut csv = csv_writer(&run.path("predictions.csv"))?;
    csv.write_record(["id", "group", "amyloid", "p_cn", "p_ad", "predicted"])?;
    for (r, p) in records.iter().zip(&scores) {
        csv.write_record([
            r.id.clone(),
            r.group.to_string(),
            amyloid_str(r).to_string(),
            (1.0 - p).to_string(),
            p.to_string(),
            usize::from(*p > 0.5).to_string(),
        ])?;
    }
    csv.flush()?;
    let mut evals = Vec::new();
    for cmp in &COMPARISONS {
        let (s, l): (Vec<f64>, Vec<usize>) = records
            .iter()
            .zip(&scores)
            .filter_map(|(r, &p)| cmp.label(r).map(|l| (p, l)))
            .unzip();
        let n_pos = l.iter().filter(|&&x| x == 1).count();
        if n_pos == 0 || n_pos == l.len() {
            continue;
        }
        let pred: Vec<usize> = s.iter().map(|&p| usize::from(p > 0.5)).collect();
        evals.push(Evaluation {
            name: cmp.name.to_string(),
            n_pos,
            n_neg: l.len() - n_pos,
            auc: roc_auc(&s, &l)?,
            metrics: classification_metrics(&pred, &l)?,
        });
    }
    write_json(&run.path("evaluation.json"), &evals)?;
    println!(
        "{:<14} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "Comparison", "n+", "n-", "Bal.acc", "Sens", "Spec", "AUC"
    );
    for e in &evals {
        println!(
            "{:<14} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            e.name,
            e.n_pos,
            e.n_neg,
            e.metrics.balanced_accuracy,
            e.metrics.sensitivity,
            e.metrics.specificity,
            e.auc
        );
    }
    run.finish(c)?;
    Ok(())
}

fn selected_subjects(cohort: &Cohort, ids: &[String]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok((0..cohort.subjects.len()).collect());
    }
    ids.iter().map(|id| subject_index(cohort, id)).collect()
}

fn relevance(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("relevance", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let (model, inputs) = load_model_inputs(&mut run, c, &cohort)?;
    let chosen = selected_subjects(&cohort, &c.relevance.subjects)?;
    let target = c.relevance.target_class;
    let maps_dir = run.path("maps");
    std::fs::create_dir_all(&maps_dir)?;
    let m64: Model<f64> = model.cast();
    let rows = run.step("relevance", || {
        chosen
            .par_iter()
            .map(|&i| {
                let r = &cohort.subjects[i].0;
                let rm = relevance_map_f64(&m64, &inputs[i], target, &c.experiment.rule)?;
                write_volume(&rm.map, maps_dir.join(format!("{}.nii", r.id)))?;
                Ok([
                    r.id.clone(),
                    r.group.to_string(),
                    target.to_string(),
                    rm.total_output_relevance.to_string(),
                    rm.sum().to_string(),
                    rm.positive_sum().to_string(),
                    rm.negative_sum().to_string(),
                ])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = csv_writer(&run.path("relevance.csv"))?;
    csv.write_record([
        "id",
        "group",
        "target_class",
        "output_relevance",
        "total",
        "positive",
        "negative",
    ])?;
    for row in rows {
        csv.write_record(row)?;
    }
    csv.flush()?;
    println!(
        "{} relevance maps written to {}",
        chosen.len(),
        maps_dir.display()
    );
    run.finish(c)?;
    Ok(())
}

#[derive(Serialize)]
struct Correlation<'a> {
    region: &'a str,
    target_class: usize,
    n: usize,
    r: f64,
    t_statistic: f64,
    p_two_sided: f64,
}

fn region_stats(c: &RunConfig) -> Result<()> {
    let mut run = Run::start("region-stats", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let (model, inputs) = load_model_inputs(&mut run, c, &cohort)?;
    let region = region_id(&cohort, &c.experiment.region)?;
    let target = c.relevance.target_class;
    let all: Vec<usize> = (0..cohort.subjects.len()).collect();
    let m64: Model<f64> = model.cast();
    let sums = run.step("relevance", || {
        all.par_iter()
            .map(|&i| {
                let rm = relevance_map_f64(&m64, &inputs[i], target, &c.experiment.rule)?;
                Ok(region_relevance(&rm.map, &cohort.atlas)?)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let names: Vec<&str> = sums
        .first()
        .map(|s| s.regions.iter().map(|x| x.name.as_str()).collect())
        .unwrap_or_default();
    let mut csv = csv_writer(&run.path("region_relevance.csv"))?;
    csv.write_record(
        ["id", "group"]
            .into_iter()
            .chain(names)
            .chain(["background"]),
    )?;
    for (i, s) in sums.iter().enumerate() {
        let r = &cohort.subjects[i].0;
        let mut row = vec![r.id.clone(), r.group.to_string()];
        row.extend(s.regions.iter().map(|x| x.sum.to_string()));
        row.push(s.background.to_string());
        csv.write_record(row)?;
    }
    csv.flush()?;

    let points = run.step("scatter", || {
        let volumes = residual_region_volumes(&cohort, &all, region)?;
        if target == 1 {
            return Ok(relevance_scatter(
                &model,
                &cohort,
                &inputs,
                &volumes,
                region,
                &all,
                &c.experiment.rule,
            )?);
        }
        Ok(all
            .iter()
            .map(|&i| {
                let r = &cohort.subjects[i].0;
                relevis_core::eval::ScatterPoint {
                    id: r.id.clone(),
                    group: r.group,
                    volume: volumes[i],
                    relevance: sums[i].by_id(region).unwrap_or(0.0),
                }
            })
            .collect())
    })?;
    let mut csv = csv_writer(&run.path("scatter.csv"))?;
    csv.write_record(["id", "group", "residual_volume", "relevance"])?;
    for p in &points {
        csv.write_record([
            p.id.clone(),
            p.group.to_string(),
            p.volume.to_string(),
            p.relevance.to_string(),
        ])?;
    }
    csv.flush()?;
    let pr = correlate_relevance_volume(&points)?;
    let corr = Correlation {
        region: &c.experiment.region,
        target_class: target,
        n: pr.n,
        r: pr.r,
        t_statistic: pr.t_statistic,
        p_two_sided: pr.p_two_sided,
    };
    write_json(&run.path("correlation.json"), &corr)?;
    println!(
        "{} relevance vs residual volume: r = {:.3}, p = {:.2e}, n = {}",
        corr.region, corr.r, corr.p_two_sided, corr.n
    );
    run.finish(c)?;
    Ok(())
}

#[derive(Serialize)]
struct OcclusionSummary<'a> {
    subject: &'a str,
    cube_edge: usize,
    reduction: f64,
    stride: usize,
    target_class: usize,
    evaluations: usize,
    baseline_probability: f64,
    baseline_relevance: f64,
    peak_increase: [usize; 3],
    peak_centre: [usize; 3],
}

fn occlusion(c: &RunConfig, subject: &str) -> Result<()> {
    let mut run = Run::start("occlusion", c.paths.out()?)?;
    let cohort = load_data(&mut run, c)?;
    let i = subject_index(&cohort, subject)?;
    let path = c.paths.model()?;
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    let residualizer = load_residualizer(c)?;
    let (record, raw) = &cohort.subjects[i];
    let pre = |v: &Volume3D| apply_residualizer(residualizer.as_ref().expect("checked"), v, record);
    let hook: Option<relevis_core::analyze::Preprocess<'_>> = match residualizer {
        Some(_) => Some(&pre),
        None => None,
    };
    let res = run.step("scan", || {
        Ok(occlusion_scan(&model, raw, &c.occlusion, hook)?)
    })?;
    write_volume(&res.probability, run.path("probability.nii"))?;
    write_volume(&res.total_relevance, run.path("total_relevance.nii"))?;
    let peak = res.peak_increase();
    let summary = OcclusionSummary {
        subject,
        cube_edge: res.cube_edge,
        reduction: res.reduction,
        stride: res.stride,
        target_class: c.occlusion.target_class,
        evaluations: res.evaluations,
        baseline_probability: res.baseline_probability,
        baseline_relevance: res.baseline_relevance,
        peak_increase: peak,
        peak_centre: res.centre_of(peak),
    };
    write_json(&run.path("occlusion.json"), &summary)?;
    println!(
        "{subject}: {} cube positions, edge {}, baseline p(disease) {:.3}, largest increase at {:?}",
        res.evaluations, res.cube_edge, res.baseline_probability, summary.peak_centre
    );
    run.finish(c)?;
    Ok(())
}

fn serve(c: &RunConfig, bind: std::net::SocketAddr) -> Result<()> {
    let Some(catalog) = c.paths.catalog.as_deref() else {
        bail!(
            "no catalog given (--catalog, {} or paths.catalog in the config)",
            relevis_server::CATALOG_ENV
        );
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(relevis_server::serve(catalog, bind))?;
    Ok(())
}
