//! Joint keypoint detection and description.
//!
//! A fully-convolutional network predicts, for every pixel, a 128-d
//! descriptor, a repeatability confidence and a reliability confidence.
//! Training is self-supervised on synthetic image pairs related by known
//! homographies:
//!
//! - [`losses`]: patch-wise cosine and peakiness losses on the repeatability
//!   map, and a differentiable average-precision loss gated by reliability;
//! - [`extractor`]: multi-scale local-maximum detection with `S·R` scoring;
//! - [`eval`]: mutual nearest-neighbour matching, repeatability, MMA and
//!   matching score;
//! - [`autodiff`]: the small reverse-mode engine everything above runs on.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Primitive, Tape, Var};
pub use error::{Error, Result};
pub use model::{DenseModel, Network, NetworkConfig, NetworkOutputs, DESCRIPTOR_DIM};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Scalar, Tensor};
pub use eval::{evaluate_pair, mutual_nn_match, EvalConfig, EvalResult, MatchSet, PairGeometry};
pub use extractor::{extract_keypoints, ExtractConfig, Keypoint, KeypointSet};
pub use losses::{AblationMode, LossConfig};
pub use trainer::{train, TrainConfig, Trainer};
