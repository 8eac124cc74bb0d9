pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph_conv;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod rtr;
pub mod tensor;
pub mod topology;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
