pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use models::{Asymmetry, ModelConfig, SiameseModel};
pub use rng::Rng;
pub use tensor::{Tensor, TensorError};
