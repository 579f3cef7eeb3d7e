pub mod attribution;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod fsutil;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod softselect;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Mat;
