//! Spiking and spatio-temporal CNN models for lung-function assessment from
//! thermal and RGB breathing videos.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod snn;
pub mod spirometry;
pub mod stcnn;

pub use error::{PulmoError, Result};
pub use numerics::Tensor;
