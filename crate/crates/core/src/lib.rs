pub mod dam;
pub mod dfam;
pub mod dirm;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub(crate) mod layers;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod reference;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use params::{Layout, ParamStore, ParamView};
pub use tensor::{Axis, Scalar, Shape, Tensor};
