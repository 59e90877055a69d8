//! The 3D convolutional classifier: layers, exact gradients, training and
//! serialization.
//!
//! Everything is generic over [`Scalar`] so the same code runs in 32-bit for
//! training and in 64-bit for gradient checks and relevance propagation.

pub mod augment;
pub mod io;
pub mod kernels;
mod model;
pub mod train;

use std::fmt::Debug;
use std::iter::Sum;

pub use augment::{augment, augment_variant, default_shift, Augmentation, N_VARIANTS};
pub use io::{load_model, save_model};
pub use model::{
    build_model, BatchNorm, BnBatchStats, Conv3d, Dense, FeatureShape, Gradients, Layer, Mode,
    Model, Prediction, Trace,
};
pub use train::{
    class_weights, loss_and_grads, predict_all, train, train_with_progress, AdamState,
    CheckpointPolicy, EpochRecord, TrainConfig, TrainOutcome,
};

pub trait Scalar: num_traits::Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}
