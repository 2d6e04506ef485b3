pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod tuners;

pub use backbone::{build_backbone, BackboneConfig, ModelConfig, ModelGraph};
pub use error::{Error, Result};
pub use tensor::{Mode, Tape, Tensor, Var};
pub use tuners::{AttachOp, AttachSpec, TunerConfig, TunerKind};
