pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod npg;
pub mod par;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
