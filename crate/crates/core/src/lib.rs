//! Capsule encoder with dynamic routing, a temporal LSTM head and the
//! training machinery around them.

pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod lstm;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{DecoderKind, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig};
pub use model::CapsuleLstm;
pub use params::{ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
