//! Small dense tensor engine with reverse-mode gradients, covering exactly
//! the layers the place-recognition network uses.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::{GatherEntry, GatherPlan};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{apply_bn_updates, BnUpdate, Gradients, Tape, Var};
pub use tensor::{Real, Tensor4};
