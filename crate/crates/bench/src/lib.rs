//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relevis_core::nn::{build_model, Layer, Model};
use relevis_core::{Dims, Volume3D};

pub const PHANTOM_DIMS: Dims = Dims::new(32, 32, 40);

pub fn random_volume(dims: Dims, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len())
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Volume3D::new(dims, 1.5, data).expect("valid volume")
}

/// Smooth-ish map with blobs of both signs, for cluster extraction.
pub fn blob_map(dims: Dims, blobs: usize, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<([f32; 3], f32, f32)> = (0..blobs)
        .map(|_| {
            let c = [
                rng.random_range(0.0..dims.nx as f32),
                rng.random_range(0.0..dims.ny as f32),
                rng.random_range(0.0..dims.nz as f32),
            ];
            (
                c,
                rng.random_range(1.5f32..4.0),
                rng.random_range(-1.0f32..1.0),
            )
        })
        .collect();
    Volume3D::from_fn(dims, 1.5, |x, y, z| {
        centres
            .iter()
            .map(|(c, r, a)| {
                let d2 = (x as f32 - c[0]).powi(2)
                    + (y as f32 - c[1]).powi(2)
                    + (z as f32 - c[2]).powi(2);
                a * (-d2 / (2.0 * r * r)).exp()
            })
            .sum()
    })
    .expect("valid volume")
}

/// Reference architecture with nonzero biases and batch-norm statistics,
/// so relevance propagation takes every branch.
pub fn trained_like_model(dims: Dims, seed: u64) -> Model<f32> {
    let mut m = build_model(dims, seed).expect("valid dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for l in m.layers_mut() {
        match l {
            Layer::Conv3d(c) => c
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.05..0.05)),
            Layer::Dense(d) => d
                .bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.05..0.05)),
            Layer::BatchNorm(bn) => {
                bn.gamma
                    .iter_mut()
                    .for_each(|g| *g = rng.random_range(0.5..1.5));
                bn.moving_var
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(0.5..2.0));
            }
            _ => {}
        }
    }
    m
}
