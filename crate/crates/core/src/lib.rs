pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod layout;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod scene;
pub mod service;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layout::{Factor, LatentLayout};
pub use network::{LatentDistribution, LayerSpec, Network, NetworkConfig};
pub use tensor::{Scalar, Tensor};
