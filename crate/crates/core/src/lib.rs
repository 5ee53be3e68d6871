pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod ops;
pub mod par;
pub mod param;
pub mod scheme;
pub mod solver;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{KernelParam, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor4};
