//! Few-shot finetuning under domain shift with adaptive semantic
//! consistency: a frozen copy of the pretrained encoder anchors the
//! finetuned encoder on weighted source-domain batches.

pub mod asc;
pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use asc::{AscConfig, PrototypeEncoder, RegularizationInputs, RegularizedBlock};
pub use autodiff::{Tape, Var};
pub use data::{ClassPrior, Dataset, DomainTransform, Episode, PriorParams, ShiftParams};
pub use encoder::{Encoder, FrozenEncoder, LinearHead, DEFAULT_DIMS};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use losses::LossKind;
pub use optim::{OptimizerConfig, OptimizerKind};
pub use tensor::Tensor;
pub use train::{FinetuneConfig, FinetuneContext, InferenceRule, PretrainConfig, Pretrained};
