//! Class-weighted cross-entropy, ADAM and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{default_shift, Augmentation, N_VARIANTS};
use super::model::{BnBatchStats, Gradients, Mode, Model};
use super::Scalar;
use crate::error::{Error, Result};
use crate::eval::{balanced_accuracy, roc_auc};
use crate::volume::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Keep the epoch with the highest test balanced accuracy, earliest on
    /// ties.
    BestOnTest,
    /// Keep the final epoch.
    FixedEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weights: [f64; 2],
    pub seed: u64,
    pub l2_coefficient: f64,
    pub augmentation: bool,
    /// Translation in voxels; derived from the input dims when absent.
    pub shift: Option<usize>,
    pub checkpoint: CheckpointPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 20,
            epochs: 10,
            class_weights: [1.0, 1.0],
            seed: 0,
            l2_coefficient: 0.01,
            augmentation: true,
            shift: None,
            checkpoint: CheckpointPolicy::BestOnTest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !self.class_weights.iter().all(|w| *w > 0.0 && w.is_finite()) {
            return bad("class weights must be positive");
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return bad("l2_coefficient must be non-negative");
        }
        Ok(())
    }
}

/// `w_i = 0.5 n / n_i`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::DegenerateClass(format!(
            "class counts {counts:?} contain an empty class"
        )));
    }
    let n: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| 0.5 * n as f64 / c as f64).collect())
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: Gradients<T>,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Mean class-weighted cross-entropy plus `l2 * sum(W^2)` over penalized
/// dense weights, with exact gradients.
pub fn loss_and_grads<T: Scalar>(
    m: &Model<T>,
    batch: &[(&Volume3D, usize)],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut input = Vec::with_capacity(batch.len() * m.input_dims().len());
    for (v, label) in batch {
        if *label > 1 {
            return Err(Error::Data(format!("label {label} is not 0 or 1")));
        }
        v.ensure_dims(m.input_dims())
            .map_err(|e| Error::Shape(format!("input does not match the model: {e}")))?;
        input.extend(v.data().iter().map(|&x| T::of(x as f64)));
    }
    loss_on_buffer(
        m,
        input,
        &batch.iter().map(|b| b.1).collect::<Vec<_>>(),
        cfg,
        mode,
    )
}

fn loss_on_buffer<T: Scalar>(
    m: &Model<T>,
    input: Vec<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<LossOutput<T>> {
    let b = labels.len();
    let trace = m.forward_batch(input, b, mode)?;
    let mut loss = 0.0;
    let mut grad_logits = Vec::with_capacity(2 * b);
    for (i, &y) in labels.iter().enumerate() {
        let z = trace.logits(i);
        let (z0, z1) = (z[0].f64(), z[1].f64());
        let mx = z0.max(z1);
        let lse = mx + ((z0 - mx).exp() + (z1 - mx).exp()).ln();
        let w = cfg.class_weights[y];
        loss += w * (lse - [z0, z1][y]);
        let p = [(z0 - lse).exp(), (z1 - lse).exp()];
        for (k, pk) in p.iter().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad_logits.push(T::of(w * (pk - onehot) / b as f64));
        }
    }
    loss /= b as f64;
    let mut grads = m.backward(&trace, grad_logits, false);
    if cfg.l2_coefficient > 0.0 {
        let params = m.parameters();
        for (slot, (_, regularized)) in m.parameter_layout().into_iter().enumerate() {
            if !regularized {
                continue;
            }
            for (g, w) in grads.tensors[slot].iter_mut().zip(params[slot]) {
                let w = w.f64();
                loss += cfg.l2_coefficient * w * w;
                *g = *g + T::of(2.0 * cfg.l2_coefficient * w);
            }
        }
    }
    Ok(LossOutput {
        loss,
        grads,
        bn_stats: m.batch_stats(&trace),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .parameters()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<T: Scalar>(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i].f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = T::of(p[i].f64() - step);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_balanced_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned weights; 0 when no epoch ran.
    pub selected_epoch: usize,
}

pub fn train(
    model: Model<f32>,
    train_set: &[(&Volume3D, usize)],
    test_set: &[(&Volume3D, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, test_set, cfg, |_| {})
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Test-set probabilities of the disease class in inference mode.
pub fn predict_all(model: &Model<f32>, set: &[(&Volume3D, usize)]) -> Result<Vec<f64>> {
    set.par_iter()
        .map(|(v, _)| Ok(model.predict(v)?.p_disease()))
        .collect()
}

pub fn train_with_progress(
    mut model: Model<f32>,
    train_set: &[(&Volume3D, usize)],
    test_set: &[(&Volume3D, usize)],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            selected_epoch: 0,
        });
    }
    if train_set.is_empty() {
        return Err(Error::Data("training partition is empty".into()));
    }
    if test_set.is_empty() && cfg.checkpoint == CheckpointPolicy::BestOnTest {
        return Err(Error::Data("test partition is empty".into()));
    }
    for (v, label) in train_set.iter().chain(test_set) {
        if *label > 1 {
            return Err(Error::Data(format!("label {label} is not 0 or 1")));
        }
        v.ensure_dims(model.input_dims())
            .map_err(|e| Error::Shape(format!("input does not match the model: {e}")))?;
    }
    let dims = model.input_dims();
    let variants = if cfg.augmentation {
        let shift = cfg.shift.unwrap_or_else(|| default_shift(dims));
        if shift >= dims.min_dim() {
            return Err(Error::Shape(format!(
                "shift {shift} is not smaller than every dim of {dims}"
            )));
        }
        Augmentation::all(shift)
    } else {
        vec![Augmentation::variant(0, 0)]
    };
    debug_assert!(variants.len() == 1 || variants.len() == N_VARIANTS);

    let mut adam = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let mut items: Vec<(usize, usize)> = (0..train_set.len())
            .flat_map(|s| (0..variants.len()).map(move |k| (s, k)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        items.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in items.chunks(cfg.batch_size) {
            let volumes: Vec<Volume3D> = chunk
                .par_iter()
                .map(|&(s, k)| variants[k].apply(train_set[s].0))
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&(s, _)| train_set[s].1).collect();
            let mut input = Vec::with_capacity(chunk.len() * dims.len());
            for v in &volumes {
                input.extend_from_slice(v.data());
            }
            step += 1;
            let out = loss_on_buffer(
                &model,
                input,
                &labels,
                cfg,
                Mode::Train {
                    dropout_seed: mix(cfg.seed ^ 0xd7_0f, step),
                },
            )?;
            adam.update(&mut model, &out.grads, cfg.learning_rate);
            model.update_moving_stats(&out.bn_stats);
            total += out.loss * chunk.len() as f64;
        }
        let train_loss = total / items.len() as f64;

        let (bacc, auc) = if test_set.is_empty() {
            (None, None)
        } else {
            let scores = predict_all(&model, test_set)?;
            let labels: Vec<usize> = test_set.iter().map(|t| t.1).collect();
            let pred: Vec<usize> = scores.iter().map(|&p| usize::from(p > 0.5)).collect();
            (
                Some(balanced_accuracy(&pred, &labels)),
                roc_auc(&scores, &labels).ok(),
            )
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            test_balanced_accuracy: bacc,
            test_auc: auc,
        };
        progress(&record);
        history.push(record);

        if cfg.checkpoint == CheckpointPolicy::BestOnTest {
            let score = bacc.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.clone()));
            }
        }
    }

    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs),
    };
    Ok(TrainOutcome {
        model,
        history,
        selected_epoch,
    })
}
