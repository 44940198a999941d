//! Recurrent U-net volumetric segmentation.
//!
//! A 2D U-net processes a volume slice by slice; convolutional LSTM cells
//! placed at selected resolution levels carry state from one slice to the
//! next so that 3D context reaches every prediction. The crate contains the
//! tensor and gradient machinery, the recurrent cells, the network, the
//! training loop, synthetic data generation, and evaluation.

pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod recurrent;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
