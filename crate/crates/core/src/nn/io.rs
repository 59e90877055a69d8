//! Model files: JSON architecture header plus a little-endian f32 payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kernels::KERNEL;
use super::model::{BatchNorm, Conv3d, Dense, Layer, Model};
use crate::container;
use crate::error::{Error, Result};
use crate::volume::Dims;

const MAGIC: &[u8; 8] = b"RVMODEL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool,
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        regularized: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub input_dims: Dims,
    pub seed: u64,
    pub parameter_count: usize,
    pub architecture: Vec<LayerSpec>,
}

pub fn header_of(m: &Model<f32>) -> ModelHeader {
    let architecture = m
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv3d(c) => LayerSpec::Conv3d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool => LayerSpec::MaxPool,
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                channels: b.gamma.len(),
                momentum: b.momentum,
                epsilon: b.epsilon,
            },
            Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                regularized: d.regularized,
            },
        })
        .collect();
    ModelHeader {
        format_version: FORMAT_VERSION,
        input_dims: m.input_dims(),
        seed: m.seed(),
        parameter_count: m.parameter_count(),
        architecture,
    }
}

pub fn encode_model(m: &Model<f32>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for l in m.layers() {
        match l {
            Layer::Conv3d(c) => {
                payload.extend_from_slice(&c.weight);
                payload.extend_from_slice(&c.bias);
            }
            Layer::BatchNorm(b) => {
                for t in [&b.gamma, &b.beta, &b.moving_mean, &b.moving_var] {
                    payload.extend_from_slice(t);
                }
            }
            Layer::Dense(d) => {
                payload.extend_from_slice(&d.weight);
                payload.extend_from_slice(&d.bias);
            }
            _ => {}
        }
    }
    container::encode(MAGIC, &header_of(m), &payload)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model<f32>> {
    let (h, payload): (ModelHeader, Vec<f32>) = container::decode(MAGIC, bytes)?;
    if h.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} (expected {FORMAT_VERSION})",
            h.format_version
        )));
    }
    let mut rest = payload.as_slice();
    let mut take = |n: usize| -> Result<Vec<f32>> {
        if rest.len() < n {
            return Err(Error::Format("model payload is truncated".into()));
        }
        let (a, b) = rest.split_at(n);
        rest = b;
        Ok(a.to_vec())
    };
    let mut layers = Vec::with_capacity(h.architecture.len());
    for spec in &h.architecture {
        layers.push(match *spec {
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
            } => Layer::Conv3d(Conv3d {
                in_channels,
                out_channels,
                weight: take(out_channels * in_channels * KERNEL)?,
                bias: take(out_channels)?,
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => Layer::BatchNorm(BatchNorm {
                gamma: take(channels)?,
                beta: take(channels)?,
                moving_mean: take(channels)?,
                moving_var: take(channels)?,
                momentum,
                epsilon,
            }),
            LayerSpec::Dropout { rate } => Layer::Dropout { rate },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dense {
                inputs,
                outputs,
                regularized,
            } => Layer::Dense(Dense {
                inputs,
                outputs,
                weight: take(inputs * outputs)?,
                bias: take(outputs)?,
                regularized,
            }),
        });
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing payload values",
            rest.len()
        )));
    }
    let m = Model::new(h.input_dims, layers, h.seed)
        .map_err(|e| Error::Format(format!("architecture: {e}")))?;
    if m.parameter_count() != h.parameter_count {
        return Err(Error::Format(
            "parameter count does not match the header".into(),
        ));
    }
    Ok(m)
}

pub fn save_model(m: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Mode};
    use crate::volume::Volume3D;

    fn trained_like() -> Model<f32> {
        let mut m = build_model(Dims::new(8, 9, 10), 11).unwrap();
        for l in m.layers_mut() {
            if let Layer::BatchNorm(b) = l {
                b.moving_mean
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| *x = 0.1 * i as f32);
                b.moving_var
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| *x = 1.0 + 0.3 * i as f32);
                b.gamma[1] = 0.7;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = trained_like();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        let v = Volume3D::from_fn(m.input_dims(), 1.0, |x, y, z| {
            ((x * y) as f32 - z as f32).cos()
        })
        .unwrap();
        let a = m.forward(&v, Mode::Infer).unwrap().1;
        let b = back.forward(&v, Mode::Infer).unwrap().1;
        assert_eq!(a.activations, b.activations);
    }

    #[test]
    fn altered_magic() {
        let mut bytes = encode_model(&trained_like()).unwrap();
        bytes[0] ^= 1;
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch() {
        let m = trained_like();
        let mut h = header_of(&m);
        h.format_version = 9;
        let bytes = container::encode(MAGIC, &h, &[]).unwrap();
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_model(&trained_like()).unwrap();
        assert!(matches!(
            decode_model(&bytes[..bytes.len() - 4]),
            Err(Error::Format(_))
        ));
    }
}
