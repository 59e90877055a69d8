use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{self, KERNEL};
use super::Scalar;
use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D};

pub const CONV_FILTERS: usize = 5;
pub const DENSE_SIZES: [usize; 3] = [64, 32, 2];
pub const DROPOUT_RATE: f64 = 0.10;
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;
pub const MIN_INPUT_DIM: usize = 8;

/// Channel count plus spatial extent of one sample's feature map. Dense
/// features are represented as channels over a 1x1x1 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub dims: Dims,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.channels * self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn flat(n: usize) -> Self {
        FeatureShape {
            channels: n,
            dims: Dims::new(1, 1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            moving_mean: vec![T::zero(); channels],
            moving_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Inference-mode map `y = scale * x + shift` per channel.
    pub fn scale_shift(&self) -> (Vec<f64>, Vec<f64>) {
        self.gamma
            .iter()
            .zip(&self.beta)
            .zip(self.moving_mean.iter().zip(&self.moving_var))
            .map(|((g, b), (m, v))| {
                let s = g.f64() / (v.f64() + self.epsilon).sqrt();
                (s, b.f64() - m.f64() * s)
            })
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    /// Whether the L2 weight penalty applies to this layer.
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv3d(Conv3d<T>),
    Relu,
    MaxPool,
    BatchNorm(BatchNorm<T>),
    Dropout { rate: f64 },
    Flatten,
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv3d(_) => "Conv3D",
            Layer::Relu => "ReLU",
            Layer::MaxPool => "MaxPool3D",
            Layer::BatchNorm(_) => "BatchNorm",
            Layer::Dropout { .. } => "Dropout",
            Layer::Flatten => "Flatten",
            Layer::Dense(_) => "Dense",
        }
    }

    fn output_shape(&self, s: FeatureShape) -> Result<FeatureShape> {
        let bad = |m: String| Err(Error::Shape(m));
        match self {
            Layer::Conv3d(c) => {
                if c.in_channels != s.channels {
                    return bad(format!(
                        "conv expects {} channels, got {}",
                        c.in_channels, s.channels
                    ));
                }
                if c.weight.len() != c.out_channels * c.in_channels * KERNEL
                    || c.bias.len() != c.out_channels
                {
                    return bad("conv parameter sizes inconsistent".into());
                }
                Ok(FeatureShape {
                    channels: c.out_channels,
                    dims: s.dims,
                })
            }
            Layer::MaxPool => {
                let d = kernels::pooled_dims(s.dims);
                if d.is_empty() {
                    return bad(format!("pooling {} leaves an empty grid", s.dims));
                }
                Ok(FeatureShape { dims: d, ..s })
            }
            Layer::BatchNorm(b) => {
                if b.gamma.len() != s.channels
                    || b.beta.len() != s.channels
                    || b.moving_mean.len() != s.channels
                    || b.moving_var.len() != s.channels
                {
                    return bad(format!(
                        "batch norm sized for {} channels, got {}",
                        b.gamma.len(),
                        s.channels
                    ));
                }
                Ok(s)
            }
            Layer::Flatten => Ok(FeatureShape::flat(s.len())),
            Layer::Dense(d) => {
                if s.dims.len() != 1 || s.channels != d.inputs {
                    return bad(format!("dense expects {} flat inputs, got {s:?}", d.inputs));
                }
                if d.weight.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
                    return bad("dense parameter sizes inconsistent".into());
                }
                Ok(FeatureShape::flat(d.outputs))
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(s),
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        match self {
            Layer::Conv3d(l) => Layer::Conv3d(Conv3d {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                weight: c(&l.weight),
                bias: c(&l.bias),
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                gamma: c(&b.gamma),
                beta: c(&b.beta),
                moving_mean: c(&b.moving_mean),
                moving_var: c(&b.moving_var),
                momentum: b.momentum,
                epsilon: b.epsilon,
            }),
            Layer::Dense(d) => Layer::Dense(Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                weight: c(&d.weight),
                bias: c(&d.bias),
                regularized: d.regularized,
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool => Layer::MaxPool,
            Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            Layer::Flatten => Layer::Flatten,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout masks drawn from the seed.
    Train { dropout_seed: u64 },
    /// Moving statistics, dropout is the identity.
    Infer,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    uses_batch_stats: bool,
}

/// Per-layer record of one forward pass, consumed by the gradient and
/// relevance passes.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub batch: usize,
    /// `activations[i]` is the input of layer `i`; the last entry holds the
    /// logits.
    pub activations: Vec<Vec<T>>,
    /// Pooling winners (index within the channel) per pooling layer.
    pub winners: Vec<Option<Vec<u32>>>,
    bn: Vec<Option<BnCache<T>>>,
    dropout: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self, sample: usize) -> &[T] {
        let out = self.activations.last().expect("trace has output");
        let k = out.len() / self.batch;
        &out[sample * k..(sample + 1) * k]
    }

    pub fn prediction(&self, sample: usize) -> Prediction {
        let l = self.logits(sample);
        Prediction::from_logits([l[0].f64(), l[1].f64()])
    }

    /// Input of layer `layer` for one sample.
    pub fn layer_input(&self, layer: usize, sample: usize) -> &[T] {
        let a = &self.activations[layer];
        let k = a.len() / self.batch;
        &a[sample * k..(sample + 1) * k]
    }

    pub fn winners_of(&self, layer: usize, sample: usize) -> Option<&[u32]> {
        self.winners[layer].as_ref().map(|w| {
            let k = w.len() / self.batch;
            &w[sample * k..(sample + 1) * k]
        })
    }
}

/// Batch statistics of each batch-norm layer from a training pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
}

impl Prediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let s = e[0] + e[1];
        Prediction {
            logits,
            probabilities: [e[0] / s, e[1] / s],
        }
    }

    /// Probability of the disease (MCI/AD) class.
    pub fn p_disease(&self) -> f64 {
        self.probabilities[1]
    }

    pub fn predicted_class(&self) -> usize {
        usize::from(self.probabilities[1] > self.probabilities[0])
    }
}

/// Gradient tensors in [`Model::parameters`] order, plus optionally the
/// gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
    pub input: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_dims: Dims,
    layers: Vec<Layer<T>>,
    shapes: Vec<FeatureShape>,
    seed: u64,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect()
}

/// The reference classifier: three Conv-ReLU-MaxPool-BatchNorm blocks with
/// five 3x3x3 filters each, then dropout + dense layers of 64, 32 and 2
/// units. The last two dense layers carry the L2 penalty.
pub fn build_model(input_dims: Dims, seed: u64) -> Result<Model<f32>> {
    Model::standard(input_dims, seed)
}

impl<T: Scalar> Model<T> {
    pub fn standard(input_dims: Dims, seed: u64) -> Result<Self> {
        if input_dims.min_dim() < MIN_INPUT_DIM {
            return Err(Error::Shape(format!(
                "input dims {input_dims} too small: every dim must be at least {MIN_INPUT_DIM}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut channels = 1;
        let mut dims = input_dims;
        for _ in 0..3 {
            let weight = glorot(
                &mut rng,
                CONV_FILTERS * channels * KERNEL,
                channels * KERNEL,
                CONV_FILTERS * KERNEL,
            );
            layers.push(Layer::Conv3d(Conv3d {
                in_channels: channels,
                out_channels: CONV_FILTERS,
                weight,
                bias: vec![T::zero(); CONV_FILTERS],
            }));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool);
            layers.push(Layer::BatchNorm(BatchNorm::identity(CONV_FILTERS)));
            channels = CONV_FILTERS;
            dims = kernels::pooled_dims(dims);
        }
        layers.push(Layer::Flatten);
        let mut inputs = channels * dims.len();
        for (i, &outputs) in DENSE_SIZES.iter().enumerate() {
            layers.push(Layer::Dropout { rate: DROPOUT_RATE });
            layers.push(Layer::Dense(Dense {
                inputs,
                outputs,
                weight: glorot(&mut rng, inputs * outputs, inputs, outputs),
                bias: vec![T::zero(); outputs],
                regularized: i > 0,
            }));
            if i + 1 < DENSE_SIZES.len() {
                layers.push(Layer::Relu);
            }
            inputs = outputs;
        }
        Model::new(input_dims, layers, seed)
    }

    /// Assembles a model from explicit layers, checking that shapes chain
    /// and that the output has two logits.
    pub fn new(input_dims: Dims, layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let mut shapes = vec![FeatureShape {
            channels: 1,
            dims: input_dims,
        }];
        for (i, l) in layers.iter().enumerate() {
            let s = l
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", l.name())))?;
            shapes.push(s);
        }
        let out = shapes.last().unwrap();
        if out.len() != 2 {
            return Err(Error::Shape(format!(
                "model must end in 2 logits, got {}",
                out.len()
            )));
        }
        Ok(Model {
            input_dims,
            layers,
            shapes,
            seed,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// `shapes()[i]` is the input shape of layer `i`; the last entry is the
    /// output shape.
    pub fn shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_dims: self.input_dims,
            layers: self.layers.iter().map(Layer::cast).collect(),
            shapes: self.shapes.clone(),
            seed: self.seed,
        }
    }

    /// Trainable tensors: conv weight/bias, batch-norm gamma/beta, dense
    /// weight/bias, in layer order.
    pub fn parameters(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv3d(c) => out.extend([c.weight.as_slice(), c.bias.as_slice()]),
                Layer::BatchNorm(b) => out.extend([b.gamma.as_slice(), b.beta.as_slice()]),
                Layer::Dense(d) => out.extend([d.weight.as_slice(), d.bias.as_slice()]),
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv3d(c) => out.extend([c.weight.as_mut_slice(), c.bias.as_mut_slice()]),
                Layer::BatchNorm(b) => out.extend([b.gamma.as_mut_slice(), b.beta.as_mut_slice()]),
                Layer::Dense(d) => out.extend([d.weight.as_mut_slice(), d.bias.as_mut_slice()]),
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// For each parameter tensor: owning layer index and whether it is an
    /// L2-penalized weight matrix.
    pub fn parameter_layout(&self) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv3d(_) | Layer::BatchNorm(_) => out.extend([(i, false), (i, false)]),
                Layer::Dense(d) => out.extend([(i, d.regularized), (i, false)]),
                _ => {}
            }
        }
        out
    }

    pub fn forward(&self, v: &Volume3D, mode: Mode) -> Result<(Prediction, Trace<T>)> {
        v.ensure_dims(self.input_dims)
            .map_err(|e| Error::Shape(format!("input does not match the model: {e}")))?;
        let input: Vec<T> = v.data().iter().map(|&x| T::of(x as f64)).collect();
        let trace = self.forward_batch(input, 1, mode)?;
        Ok((trace.prediction(0), trace))
    }

    pub fn predict(&self, v: &Volume3D) -> Result<Prediction> {
        Ok(self.forward(v, Mode::Infer)?.0)
    }

    /// Runs a batch stored contiguously, one input volume after another.
    pub fn forward_batch(&self, input: Vec<T>, batch: usize, mode: Mode) -> Result<Trace<T>> {
        let in_len = self.shapes[0].len();
        if batch == 0 || input.len() != batch * in_len {
            return Err(Error::Shape(format!(
                "batch buffer of {} values does not hold {batch} inputs of {in_len}",
                input.len()
            )));
        }
        let n = self.layers.len();
        let mut activations = Vec::with_capacity(n + 1);
        let mut winners = vec![None; n];
        let mut bn = vec![None; n];
        let mut dropout = vec![None; n];
        activations.push(input);

        for (i, layer) in self.layers.iter().enumerate() {
            let s_in = self.shapes[i];
            let s_out = self.shapes[i + 1];
            let x = &activations[i];
            let out: Vec<T> = match layer {
                Layer::Conv3d(c) => {
                    let mut out = vec![T::zero(); batch * s_out.len()];
                    out.par_chunks_mut(s_out.len())
                        .zip(x.par_chunks(s_in.len()))
                        .for_each(|(o, xi)| {
                            kernels::conv3d_forward(
                                xi,
                                c.in_channels,
                                s_in.dims,
                                &c.weight,
                                &c.bias,
                                c.out_channels,
                                o,
                            )
                        });
                    out
                }
                Layer::Relu => x
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect(),
                Layer::MaxPool => {
                    let mut out = vec![T::zero(); batch * s_out.len()];
                    let mut win = vec![0u32; batch * s_out.len()];
                    out.par_chunks_mut(s_out.len())
                        .zip(win.par_chunks_mut(s_out.len()))
                        .zip(x.par_chunks(s_in.len()))
                        .for_each(|((o, w), xi)| {
                            kernels::maxpool_forward(xi, s_in.channels, s_in.dims, o, w)
                        });
                    winners[i] = Some(win);
                    out
                }
                Layer::BatchNorm(b) => {
                    let (out, cache) = batchnorm_forward(b, x, batch, s_in, mode);
                    bn[i] = Some(cache);
                    out
                }
                Layer::Dropout { rate } => match mode {
                    Mode::Infer => x.clone(),
                    Mode::Train { dropout_seed } => {
                        let mask = dropout_mask::<T>(*rate, x.len(), dropout_seed, i);
                        let out = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                        dropout[i] = Some(mask);
                        out
                    }
                },
                Layer::Flatten => x.clone(),
                Layer::Dense(d) => {
                    let mut out = vec![T::zero(); batch * d.outputs];
                    for (o, xi) in out.chunks_mut(d.outputs).zip(x.chunks(d.inputs)) {
                        kernels::dense_forward(xi, &d.weight, &d.bias, o);
                    }
                    out
                }
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "output of layer {i} ({})",
                    layer.name()
                )));
            }
            activations.push(out);
        }
        Ok(Trace {
            batch,
            activations,
            winners,
            bn,
            dropout,
        })
    }

    /// Batch statistics recorded by a training pass, for the moving-average
    /// update.
    pub fn batch_stats(&self, trace: &Trace<T>) -> Vec<BnBatchStats> {
        trace
            .bn
            .iter()
            .enumerate()
            .filter_map(|(layer, c)| {
                c.as_ref()
                    .filter(|c| c.uses_batch_stats)
                    .map(|c| BnBatchStats {
                        layer,
                        mean: c.batch_mean.clone(),
                        var: c.batch_var.clone(),
                    })
            })
            .collect()
    }

    pub fn update_moving_stats(&mut self, stats: &[BnBatchStats]) {
        for s in stats {
            if let Layer::BatchNorm(b) = &mut self.layers[s.layer] {
                let m = b.momentum;
                for c in 0..b.gamma.len() {
                    b.moving_mean[c] = T::of(m * b.moving_mean[c].f64() + (1.0 - m) * s.mean[c]);
                    b.moving_var[c] = T::of(m * b.moving_var[c].f64() + (1.0 - m) * s.var[c]);
                }
            }
        }
    }

    /// Back-propagates `grad_logits` (batch x 2) through a recorded pass.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_logits: Vec<T>,
        want_input: bool,
    ) -> Gradients<T> {
        let batch = trace.batch;
        let layout = self.parameter_layout();
        let mut tensors: Vec<Vec<T>> = self
            .parameters()
            .iter()
            .map(|p| vec![T::zero(); p.len()])
            .collect();
        let mut slot = layout.len();
        let mut g = grad_logits;

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let s_in = self.shapes[i];
            let s_out = self.shapes[i + 1];
            let x = &trace.activations[i];
            let need_input = i > 0 || want_input;
            g = match layer {
                Layer::Conv3d(c) => {
                    slot -= 2;
                    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = g
                        .par_chunks(s_out.len())
                        .zip(x.par_chunks(s_in.len()))
                        .map(|(gi, xi)| {
                            let mut gw = vec![T::zero(); c.weight.len()];
                            let mut gb = vec![T::zero(); c.out_channels];
                            kernels::conv3d_backward_params(
                                xi,
                                c.in_channels,
                                s_in.dims,
                                gi,
                                c.out_channels,
                                &mut gw,
                                &mut gb,
                            );
                            let gin = need_input.then(|| {
                                let mut gin = vec![T::zero(); s_in.len()];
                                kernels::conv3d_backward_input(
                                    gi,
                                    c.out_channels,
                                    s_in.dims,
                                    &c.weight,
                                    c.in_channels,
                                    &mut gin,
                                );
                                gin
                            });
                            (gw, gb, gin)
                        })
                        .collect();
                    let mut gin_all =
                        Vec::with_capacity(if need_input { batch * s_in.len() } else { 0 });
                    for (gw, gb, gin) in per_sample {
                        add_into(&mut tensors[slot], &gw);
                        add_into(&mut tensors[slot + 1], &gb);
                        if let Some(gin) = gin {
                            gin_all.extend(gin);
                        }
                    }
                    gin_all
                }
                Layer::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
                Layer::MaxPool => {
                    let mut gin = vec![T::zero(); batch * s_in.len()];
                    let win = trace.winners[i].as_ref().expect("pool winners recorded");
                    gin.par_chunks_mut(s_in.len())
                        .zip(g.par_chunks(s_out.len()))
                        .zip(win.par_chunks(s_out.len()))
                        .for_each(|((gi, go), w)| {
                            kernels::maxpool_backward(go, s_in.channels, s_in.dims, w, gi)
                        });
                    gin
                }
                Layer::BatchNorm(b) => {
                    slot -= 2;
                    let cache = trace.bn[i].as_ref().expect("batch norm cache recorded");
                    let (gin, ggamma, gbeta) = batchnorm_backward(b, cache, &g, batch, s_in);
                    add_into(&mut tensors[slot], &ggamma);
                    add_into(&mut tensors[slot + 1], &gbeta);
                    gin
                }
                Layer::Dropout { .. } => match &trace.dropout[i] {
                    Some(mask) => g.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                    None => g,
                },
                Layer::Flatten => g,
                Layer::Dense(d) => {
                    slot -= 2;
                    let mut gin = vec![T::zero(); batch * d.inputs];
                    let (gw_slot, rest) = tensors[slot..].split_at_mut(1);
                    for ((go, xi), gi) in g
                        .chunks(d.outputs)
                        .zip(x.chunks(d.inputs))
                        .zip(gin.chunks_mut(d.inputs))
                    {
                        kernels::dense_backward(
                            xi,
                            &d.weight,
                            go,
                            &mut gw_slot[0],
                            &mut rest[0],
                            Some(gi),
                        );
                    }
                    gin
                }
            };
        }
        Gradients {
            tensors,
            input: want_input.then_some(g),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn dropout_mask<T: Scalar>(rate: f64, n: usize, seed: u64, layer: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((layer as u64 + 1) << 48));
    let keep = T::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

fn batchnorm_forward<T: Scalar>(
    b: &BatchNorm<T>,
    x: &[T],
    batch: usize,
    s: FeatureShape,
    mode: Mode,
) -> (Vec<T>, BnCache<T>) {
    let c_n = s.channels;
    let v = s.dims.len();
    let count = (batch * v) as f64;
    let (mean, var, uses_batch_stats) = match mode {
        Mode::Train { .. } => {
            let mut mean = vec![0.0; c_n];
            let mut var = vec![0.0; c_n];
            for c in 0..c_n {
                let mut sum = 0.0;
                for n in 0..batch {
                    let off = n * s.len() + c * v;
                    sum += x[off..off + v].iter().map(|a| a.f64()).sum::<f64>();
                }
                let m = sum / count;
                let mut ss = 0.0;
                for n in 0..batch {
                    let off = n * s.len() + c * v;
                    ss += x[off..off + v]
                        .iter()
                        .map(|a| (a.f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = ss / count;
            }
            (mean, var, true)
        }
        Mode::Infer => (
            b.moving_mean.iter().map(|m| m.f64()).collect(),
            b.moving_var.iter().map(|m| m.f64()).collect(),
            false,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.epsilon).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..c_n {
            let off = n * s.len() + c * v;
            let (m, is) = (mean[c], inv_std[c]);
            let (g, be) = (b.gamma[c].f64(), b.beta[c].f64());
            for k in off..off + v {
                let h = (x[k].f64() - m) * is;
                xhat[k] = T::of(h);
                out[k] = T::of(g * h + be);
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            uses_batch_stats,
        },
    )
}

fn batchnorm_backward<T: Scalar>(
    b: &BatchNorm<T>,
    cache: &BnCache<T>,
    g: &[T],
    batch: usize,
    s: FeatureShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c_n = s.channels;
    let v = s.dims.len();
    let count = (batch * v) as f64;
    let mut gin = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); c_n];
    let mut gbeta = vec![T::zero(); c_n];
    for c in 0..c_n {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..batch {
            let off = n * s.len() + c * v;
            for k in off..off + v {
                sum_g += g[k].f64();
                sum_gx += g[k].f64() * cache.xhat[k].f64();
            }
        }
        ggamma[c] = T::of(sum_gx);
        gbeta[c] = T::of(sum_g);
        let scale = b.gamma[c].f64() * cache.inv_std[c];
        for n in 0..batch {
            let off = n * s.len() + c * v;
            for k in off..off + v {
                let gi = if cache.uses_batch_stats {
                    scale / count * (count * g[k].f64() - sum_g - cache.xhat[k].f64() * sum_gx)
                } else {
                    scale * g[k].f64()
                };
                gin[k] = T::of(gi);
            }
        }
    }
    (gin, ggamma, gbeta)
}
