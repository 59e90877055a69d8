//! ROC analysis, Youden thresholds, confusion-matrix metrics, Pearson
//! correlation, stratified folds and the region-volume baseline classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::subject::{Group, SubjectRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Cut points ordered by increasing threshold. The first and last
    /// entries are the trivial all-positive/all-negative cuts at -inf/+inf
    /// (swapped when inverted); the rest are midpoints between adjacent
    /// distinct scores.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// `true` when lower scores indicate the positive class.
    pub inverted: bool,
}

impl RocCurve {
    /// Whether `score` is called positive at `threshold`.
    pub fn is_positive(&self, score: f64, threshold: f64) -> bool {
        if self.inverted {
            score < threshold
        } else {
            score > threshold
        }
    }
}

fn check_labels(labels: &[usize]) -> Result<(usize, usize)> {
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidParameter(format!("label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positive and {neg} negative labels"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC, higher score meaning positive.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(roc_curve(scores, labels, false)?.auc)
}

pub fn roc_curve(scores: &[f64], labels: &[usize], inverted: bool) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("scores must be finite".into()));
    }
    let (n_pos, n_neg) = check_labels(labels)?;
    let oriented: Vec<f64> = scores
        .iter()
        .map(|&s| if inverted { -s } else { s })
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| oriented[b].total_cmp(&oriented[a]));

    // Sweep from the highest oriented score down, one tie group at a time.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc2 = 0u128; // twice the count of won pairs plus ties
    let mut sweep = vec![(f64::INFINITY, 0usize, 0usize)];
    let mut i = 0;
    while i < order.len() {
        let s = oriented[order[i]];
        let (mut gp, mut gn) = (0, 0);
        while i < order.len() && oriented[order[i]] == s {
            if labels[order[i]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        auc2 += (gn as u128) * (2 * tp as u128 + gp as u128);
        tp += gp;
        fp += gn;
        let next = order.get(i).map(|&k| oriented[k]);
        let cut = next.map_or(f64::NEG_INFINITY, |n| 0.5 * (s + n));
        sweep.push((cut, tp, fp));
    }
    let auc = auc2 as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    let mut points: Vec<RocPoint> = sweep
        .into_iter()
        .map(|(cut, tp, fp)| RocPoint {
            threshold: if inverted { -cut } else { cut },
            sensitivity: tp as f64 / n_pos as f64,
            specificity: 1.0 - fp as f64 / n_neg as f64,
        })
        .collect();
    points.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    Ok(RocCurve {
        points,
        auc,
        inverted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YoudenCut {
    pub threshold: f64,
    pub j: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Cut maximizing `sensitivity + specificity - 1` over the midpoints
/// between distinct scores; the smallest midpoint wins ties. With a single
/// distinct score the only finite cut is that score itself, with J = 0.
pub fn youden_threshold(roc: &RocCurve) -> YoudenCut {
    let mut best: Option<YoudenCut> = None;
    for p in roc.points.iter().filter(|p| p.threshold.is_finite()) {
        let j = p.sensitivity + p.specificity - 1.0;
        // Distinct J values differ by at least 1/(n_pos·n_neg); closer
        // values are rounding of equal counts.
        if best.is_none_or(|b| j > b.j + 1e-12) {
            best = Some(YoudenCut {
                threshold: p.threshold,
                j,
                sensitivity: p.sensitivity,
                specificity: p.specificity,
            });
        }
    }
    best.unwrap_or(YoudenCut {
        threshold: f64::NAN,
        j: 0.0,
        sensitivity: 1.0,
        specificity: 0.0,
    })
}

/// Youden cut computed directly from scores, covering the all-tied case.
pub fn youden_from_scores(
    scores: &[f64],
    labels: &[usize],
    inverted: bool,
) -> Result<(RocCurve, YoudenCut)> {
    let roc = roc_curve(scores, labels, inverted)?;
    let mut cut = youden_threshold(&roc);
    if cut.threshold.is_nan() {
        cut.threshold = scores[0];
    }
    Ok((roc, cut))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// 0 when nothing was predicted positive.
    pub ppv: f64,
    /// 0 when nothing was predicted negative.
    pub npv: f64,
    pub counts: Counts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize]) -> Counts {
    let mut c = Counts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn classification_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    check_labels(labels)?;
    if let Some(p) = predictions.iter().find(|&&p| p > 1) {
        return Err(Error::InvalidParameter(format!(
            "prediction {p} is not 0 or 1"
        )));
    }
    let c = confusion(predictions, labels);
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    Ok(Metrics {
        balanced_accuracy: 0.5 * (sensitivity + specificity),
        sensitivity,
        specificity,
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        ppv: ratio(c.tp, c.tp + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
        counts: c,
    })
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let c = confusion(predictions, labels);
    let mut recalls = Vec::new();
    if c.tp + c.fn_ > 0 {
        recalls.push(ratio(c.tp, c.tp + c.fn_));
    }
    if c.tn + c.fp > 0 {
        recalls.push(ratio(c.tn, c.tn + c.fp));
    }
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    pub n: usize,
    pub t_statistic: f64,
    pub p_two_sided: f64,
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter(format!(
            "{} x values for {} y values",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "{n} observations; at least 3 are needed"
        )));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let (t, p) = if r.abs() == 1.0 {
        (f64::INFINITY.copysign(r), 0.0)
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PearsonResult {
        r,
        n,
        t_statistic: t,
        p_two_sided: p,
    })
}

/// `k` disjoint test folds of record indices, balanced per diagnostic
/// group. Each group is shuffled with `seed` and dealt round-robin; the
/// starting fold carries over between groups so total fold sizes differ by
/// at most one.
pub fn stratified_kfold(records: &[SubjectRecord], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "k = {k}; at least 2 folds are needed"
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in Group::ALL {
        let mut members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].group == g)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Data(format!(
                "group {} has {} members, fewer than {k} folds",
                g.as_str(),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (i, &m) in members.iter().enumerate() {
            folds[(offset + i) % k].push(m);
        }
        offset = (offset + members.len()) % k;
    }
    if records.is_empty() {
        return Err(Error::Data("no records to split".into()));
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub threshold: f64,
    pub train_cut: YoudenCut,
    pub metrics: Metrics,
    /// Test-set curve, lower volume meaning positive.
    pub roc: RocCurve,
}

/// Region-volume classifier: Youden cut fitted on training volumes (lower
/// volume is disease) and applied to the test volumes.
pub fn volume_baseline(train: &[(f64, usize)], test: &[(f64, usize)]) -> Result<BaselineResult> {
    let (tv, tl): (Vec<f64>, Vec<usize>) = train.iter().copied().unzip();
    let (_, cut) = youden_from_scores(&tv, &tl, true)?;
    let (sv, sl): (Vec<f64>, Vec<usize>) = test.iter().copied().unzip();
    let roc = roc_curve(&sv, &sl, true)?;
    let pred: Vec<usize> = sv
        .iter()
        .map(|&v| usize::from(roc.is_positive(v, cut.threshold)))
        .collect();
    Ok(BaselineResult {
        threshold: cut.threshold,
        train_cut: cut,
        metrics: classification_metrics(&pred, &sl)?,
        roc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: String,
    pub group: Group,
    pub volume: f64,
    pub relevance: f64,
}

/// Pearson correlation of region relevance against region residual volume.
pub fn correlate_relevance_volume(points: &[ScatterPoint]) -> Result<PearsonResult> {
    let v: Vec<f64> = points.iter().map(|p| p.volume).collect();
    let r: Vec<f64> = points.iter().map(|p| p.relevance).collect();
    pearson_r(&v, &r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.7, 0.3, 0.4, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn inverted_auc() {
        let roc = roc_curve(&[-1.0, -0.5, 0.5, 1.0], &[1, 1, 0, 0], true).unwrap();
        assert_eq!(roc.auc, 1.0);
    }

    #[test]
    fn youden_midpoint() {
        let (_, cut) = youden_from_scores(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1], false).unwrap();
        assert!((cut.threshold - 0.5).abs() < 1e-15);
        assert_eq!(cut.j, 1.0);
        let (_, cut) = youden_from_scores(&[0.4; 4], &[0, 1, 0, 1], false).unwrap();
        assert_eq!(cut.j, 0.0);
        assert_eq!(cut.threshold, 0.4);
    }

    #[test]
    fn youden_inverted() {
        let (roc, cut) = youden_from_scores(&[-1.0, -0.8, 0.2, 0.6], &[1, 1, 0, 0], true).unwrap();
        assert!((cut.threshold - (-0.3)).abs() < 1e-15);
        assert!(roc.is_positive(-0.5, cut.threshold));
    }

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!(
            (m.sensitivity, m.specificity, m.f1, m.ppv, m.npv),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        let m = classification_metrics(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(
            (m.sensitivity, m.specificity, m.balanced_accuracy),
            (1.0, 0.0, 0.5)
        );
        let pred = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let lab = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let m = classification_metrics(&pred, &lab).unwrap();
        assert_eq!(
            m.counts,
            Counts {
                tp: 3,
                fp: 1,
                tn: 5,
                fn_: 1
            }
        );
        assert_eq!(m.sensitivity, 0.75);
        assert!((m.specificity - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.balanced_accuracy - 0.791_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(m.ppv, 0.75);
        assert!((m.npv - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.f1, 0.75);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_r(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap().r - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap().r + 1.0).abs() < 1e-15);
        let p = pearson_r(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((p.r - 0.8).abs() < 1e-12);
        assert!(matches!(
            pearson_r(&x, &[1.0; 4]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn pearson_p_value() {
        // r = 0.8, n = 4: t = 0.8 * sqrt(2 / 0.36) = 1.8856; two-sided p = 0.2
        let p = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((p.t_statistic - 1.885_618_083).abs() < 1e-8);
        assert!((p.p_two_sided - 0.2).abs() < 1e-9);
    }
}
