//! Action progress prediction for spatio-temporal action tubes.
//!
//! The crate covers the whole pipeline on top of precomputed convolutional
//! feature maps: tube geometry and progress targets, region/pyramid pooling,
//! a compact recurrent progress regressor trained with a boundary-weighted
//! loss, progress-driven tube trimming, and the evaluation protocols
//! (framewise MSE, Average Progress Precision, Frame-AP and Video-AP).
//! A synthetic generator produces untrimmed videos with known progress so
//! every stage can be exercised without a detector or a GPU.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod features;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod refine;
pub mod synth;
pub mod train;
pub mod tube;

pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureKind, FeatureMap, FeatureVector};
pub use loss::{LossKind, LossValue};
pub use net::{ModelConfig, ModelParams, RecurrentState, Variant};
pub use refine::TrimParams;
pub use train::{TrainConfig, TubeSample};
pub use tube::{BoundingBox, ClassInfo, Dataset, ProgressSequence, Tube, VideoInfo};
