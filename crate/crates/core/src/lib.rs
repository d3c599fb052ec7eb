//! Simultaneous segmentation and registration for longitudinal 3D
//! multi-channel images, at desk scale.
//!
//! The crate provides the full pipeline: grid data types with bit-exact
//! file I/O, a differentiable pull-based trilinear warp over composite
//! affine+deformable transforms, the four-term joint training objective
//! with analytic gradients, two hand-differentiated U-Net streams, the
//! simultaneous (and baseline independent) training loops, a synthetic
//! longitudinal phantom generator with known ground truth, and the
//! scan–rescan evaluation suite.

pub mod check;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod seeding;
pub mod synth;
pub mod train;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use loss::{LossBreakdown, WeightSchedule};
pub use net::{HeadKind, ModelParams, NetConfig, StreamParams};
pub use synth::SynthConfig;
pub use train::{TrainConfig, TrainMode, TrainSample};
pub use volume::{AffineTransform, Dims, GridDomain, SegKind, SegmentationSet, Volume};
pub use warp::{DisplacementField, SamplingMap};
