pub mod archive;
pub mod backbone;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use backbone::BackboneConfig;
pub use error::{Error, ErrorClass, Result};
pub use model::{ModelConfig, TpNet};
pub use params::ParamStore;
pub use tensor::{FeatureMap, Scalar, Tensor};
