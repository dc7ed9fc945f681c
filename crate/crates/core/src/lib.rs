pub mod accounting;
pub mod arch;
pub mod checkpoint;
pub mod erf;
pub mod error;
pub mod imageio;
pub mod invariance;
pub mod layout;
pub mod nn;
pub mod ops;
pub mod reference;
pub mod selftest;
pub mod stm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
