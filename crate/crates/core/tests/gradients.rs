//! Analytic gradients against central finite differences of a 64-bit copy
//! of the model. Differences use step 1e-3 with one Richardson step
//! (`(4 D(h/2) - D(h)) / 3`) so truncation error stays below the tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relevis_core::nn::{
    build_model, loss_and_grads, BatchNorm, Conv3d, Dense, Layer, Mode, Model, Scalar, TrainConfig,
};
use relevis_core::{Dims, Volume3D};

const H: f64 = 1e-3;
const FLOOR_F64: f64 = 1e-6;
/// Gradients that are exactly zero in theory come out near 1e-8 in 32-bit.
const FLOOR_F32: f64 = 1e-4;
const DROPOUT_SEED: u64 = 77;

fn batch(dims: Dims, seed: u64) -> Vec<(Volume3D, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|i| {
            let data = (0..dims.len())
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            (Volume3D::new(dims, 1.5, data).unwrap(), i % 2)
        })
        .collect()
}

/// A small network using every layer type, with non-trivial batch-norm
/// and bias values. Few ReLU units keep finite-difference probes away from
/// kinks.
fn perturbed_model(dims: Dims, seed: u64) -> Model<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u =
        |n: usize, a: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-a..a)).collect() };
    let conv = |i: usize, o: usize, u: &mut dyn FnMut(usize, f32) -> Vec<f32>| {
        Layer::Conv3d(Conv3d {
            in_channels: i,
            out_channels: o,
            weight: u(o * i * 27, 0.4),
            bias: u(o, 0.1),
        })
    };
    let bn = |c: usize, u: &mut dyn FnMut(usize, f32) -> Vec<f32>| {
        let mut b = BatchNorm::identity(c);
        b.gamma = u(c, 0.5).into_iter().map(|g| g + 1.0).collect();
        b.beta = u(c, 0.2);
        Layer::BatchNorm(b)
    };
    let dense = |i: usize, o: usize, reg: bool, u: &mut dyn FnMut(usize, f32) -> Vec<f32>| {
        Layer::Dense(Dense {
            inputs: i,
            outputs: o,
            weight: u(i * o, 0.8),
            bias: u(o, 0.1),
            regularized: reg,
        })
    };
    let mut layers = vec![
        conv(1, 2, &mut u),
        Layer::Relu,
        Layer::MaxPool,
        bn(2, &mut u),
    ];
    layers.extend([
        conv(2, 3, &mut u),
        Layer::Relu,
        Layer::MaxPool,
        bn(3, &mut u),
    ]);
    let pooled = 3 * (dims.nx / 4) * (dims.ny / 4) * (dims.nz / 4);
    layers.extend([
        Layer::Flatten,
        Layer::Dropout { rate: 0.1 },
        dense(pooled, 5, false, &mut u),
        Layer::Relu,
    ]);
    layers.extend([
        Layer::Dropout { rate: 0.1 },
        dense(5, 4, true, &mut u),
        Layer::Relu,
    ]);
    layers.extend([Layer::Dropout { rate: 0.1 }, dense(4, 2, true, &mut u)]);
    Model::new(dims, layers, seed).unwrap()
}

fn loss_of(m: &Model<f64>, data: &[(Volume3D, usize)], cfg: &TrainConfig) -> f64 {
    let b: Vec<(&Volume3D, usize)> = data.iter().map(|(v, l)| (v, *l)).collect();
    loss_and_grads(
        m,
        &b,
        cfg,
        Mode::Train {
            dropout_seed: DROPOUT_SEED,
        },
    )
    .unwrap()
    .loss
}

/// ReLU sign pattern and pooling winners of a training pass.
fn pattern(m: &Model<f64>, data: &[(Volume3D, usize)]) -> (Vec<bool>, Vec<u32>) {
    let input: Vec<f64> = data
        .iter()
        .flat_map(|(v, _)| v.data().iter().map(|&x| x as f64))
        .collect();
    let t = m
        .forward_batch(
            input,
            data.len(),
            Mode::Train {
                dropout_seed: DROPOUT_SEED,
            },
        )
        .unwrap();
    let mut signs = Vec::new();
    let mut wins = Vec::new();
    for (i, l) in m.layers().iter().enumerate() {
        match l {
            Layer::Relu => signs.extend(t.activations[i].iter().map(|&a| a > 0.0)),
            Layer::MaxPool => wins.extend_from_slice(t.winners[i].as_ref().unwrap()),
            _ => {}
        }
    }
    (signs, wins)
}

fn set_param(m: &mut Model<f64>, slot: usize, idx: usize, value: f64) {
    m.parameters_mut()[slot][idx] = value;
}

/// Worst relative error over sampled entries of every parameter tensor.
fn worst_error<T: Scalar>(
    analytic_model: &Model<T>,
    probes_per_tensor: usize,
    seed: u64,
    floor: f64,
) -> (f64, usize) {
    let dims = analytic_model.input_dims();
    let data = batch(dims, seed);
    let cfg = TrainConfig {
        class_weights: [1.3, 0.8],
        l2_coefficient: 0.01,
        ..Default::default()
    };
    let b: Vec<(&Volume3D, usize)> = data.iter().map(|(v, l)| (v, *l)).collect();
    let analytic = loss_and_grads(
        analytic_model,
        &b,
        &cfg,
        Mode::Train {
            dropout_seed: DROPOUT_SEED,
        },
    )
    .unwrap()
    .grads;
    let base: Model<f64> = analytic_model.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let sizes: Vec<usize> = base.parameters().iter().map(|p| p.len()).collect();
    for (slot, &n) in sizes.iter().enumerate() {
        let mut done = 0;
        let mut attempts = 0;
        while done < probes_per_tensor.min(n) && attempts < 50 * probes_per_tensor {
            attempts += 1;
            let idx = rng.random_range(0..n);
            let w = base.parameters()[slot][idx];
            let mut plus = base.clone();
            set_param(&mut plus, slot, idx, w + H);
            let mut minus = base.clone();
            set_param(&mut minus, slot, idx, w - H);
            if pattern(&plus, &data) != pattern(&minus, &data) {
                continue;
            }
            let central = |h: f64| {
                let mut p = base.clone();
                set_param(&mut p, slot, idx, w + h);
                let mut q = base.clone();
                set_param(&mut q, slot, idx, w - h);
                (loss_of(&p, &data, &cfg) - loss_of(&q, &data, &cfg)) / (2.0 * h)
            };
            let fd = (4.0 * central(H / 2.0) - central(H)) / 3.0;
            let a = analytic.tensors[slot][idx].f64();
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(err);
            done += 1;
            checked += 1;
        }
        assert!(done > 0, "no smooth probe found for tensor {slot}");
    }
    (worst, checked)
}

#[test]
fn f64_gradients_match_finite_differences() {
    let m: Model<f64> = perturbed_model(Dims::new(4, 5, 4), 3).cast();
    let (worst, n) = worst_error(&m, 6, 10, FLOOR_F64);
    // min(6, tensor size) probes over 14 tensors
    assert_eq!(n, 56);
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn f32_gradients_match_finite_differences() {
    let m = perturbed_model(Dims::new(5, 4, 4), 4);
    let (worst, _) = worst_error(&m, 6, 11, FLOOR_F32);
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn input_gradient_matches_finite_differences() {
    let m: Model<f64> = perturbed_model(Dims::new(4, 4, 4), 5).cast();
    let data = batch(m.input_dims(), 12);
    let v = &data[0].0;
    let input: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let t = m.forward_batch(input.clone(), 1, Mode::Infer).unwrap();
    // d(logit_1)/d(input)
    let g = m.backward(&t, vec![0.0, 1.0], true).input.unwrap();
    let logit = |x: Vec<f64>| m.forward_batch(x, 1, Mode::Infer).unwrap().logits(0)[1];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for _ in 0..200 {
        let i = rng.random_range(0..input.len());
        let mut p = input.clone();
        p[i] += H;
        let mut q = input.clone();
        q[i] -= H;
        let tp = m.forward_batch(p.clone(), 1, Mode::Infer).unwrap();
        let tq = m.forward_batch(q.clone(), 1, Mode::Infer).unwrap();
        let kink = m.layers().iter().enumerate().any(|(li, l)| match l {
            Layer::Relu => tp.activations[li]
                .iter()
                .zip(&tq.activations[li])
                .any(|(a, b)| (*a > 0.0) != (*b > 0.0)),
            Layer::MaxPool => tp.winners[li] != tq.winners[li],
            _ => false,
        });
        if kink {
            continue;
        }
        let central = |h: f64| {
            let mut a = input.clone();
            a[i] += h;
            let mut b = input.clone();
            b[i] -= h;
            (logit(a) - logit(b)) / (2.0 * h)
        };
        let fd = (4.0 * central(H / 2.0) - central(H)) / 3.0;
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(FLOOR_F64);
        assert!(
            err < 1e-6,
            "voxel {i}: analytic {} fd {fd} err {err:e}",
            g[i]
        );
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let d = Dims::new(8, 8, 8);
    let mut m: Model<f64> = build_model(d, 1).unwrap().cast();
    for p in m.parameters_mut() {
        p.fill(0.0);
    }
    let n = m.layers().len();
    if let Layer::Dense(last) = &mut m.layers_mut()[n - 1] {
        last.bias.copy_from_slice(&[-1000.0, 1000.0]);
    }
    let v = Volume3D::zeros(d, 1.0).unwrap();
    let cfg = TrainConfig {
        l2_coefficient: 0.0,
        ..Default::default()
    };
    let out = loss_and_grads(&m, &[(&v, 1)], &cfg, Mode::Infer).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grads.tensors.iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn doubling_the_class_weight_doubles_the_loss() {
    let m = perturbed_model(Dims::new(8, 8, 8), 6);
    let data = batch(m.input_dims(), 3);
    let b: Vec<(&Volume3D, usize)> = data.iter().map(|(v, _)| (v, 1)).collect();
    let cfg = TrainConfig {
        l2_coefficient: 0.0,
        class_weights: [1.0, 0.8],
        ..Default::default()
    };
    let cfg2 = TrainConfig {
        class_weights: [1.0, 1.6],
        ..cfg.clone()
    };
    let a = loss_and_grads(&m, &b, &cfg, Mode::Infer).unwrap().loss;
    let c = loss_and_grads(&m, &b, &cfg2, Mode::Infer).unwrap().loss;
    assert_eq!(c, 2.0 * a);
}
