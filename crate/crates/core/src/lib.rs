pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod io_util;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod teacher;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autodiff::{AttnMask, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::Tensor;
