//! Dual-encoder image/text alignment with region-level objectives.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: tensors, stable primitives, finite-difference oracle;
//! * [`encoder`]: toy image/text encoders with masked attention pooling;
//! * [`region`]: RoIAlign region features and detector score fusion;
//! * [`losses`]: the five objectives and their weighted total;
//! * [`model`]: parameters plus batched forward/backward through all of the above;
//! * [`distsim`]: simulated data-parallel workers with deterministic all-reduce;
//! * [`synthdata`]: synthetic corpus generator and JSON-lines format;
//! * [`trainer`]: AdamW, warmup, two-stage loop, checkpoints;
//! * [`eval`]: retrieval, box classification and candidate-matching metrics.

pub mod distsim;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod region;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossWeights, Stage, TicReduction};
pub use model::{Model, ModelConfig};
pub use numerics::{GradPair, ParamMap, Tensor};
pub use region::BBox;
pub use synthdata::{Region, Sample};
