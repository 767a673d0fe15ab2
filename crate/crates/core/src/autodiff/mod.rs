//! Minimal dense tensors with reverse-mode differentiation, plus the Adam
//! optimizer, a plateau learning-rate scheduler and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use params::{Adam, Bound, MonitorMode, ParamId, ParamStore, PlateauScheduler};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
