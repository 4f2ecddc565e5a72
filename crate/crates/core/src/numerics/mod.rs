//! Tensor algebra, reverse-mode autodiff, finite-difference checking, and
//! deterministic random number generation.

pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use gradcheck::{finite_difference_check, GradCheckReport, NamedTensors};
pub use ops::Op;
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
