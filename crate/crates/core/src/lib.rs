pub mod archive;
pub mod basis;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod extremes;
pub mod gaussian;
pub mod metrics;
pub mod mh;
pub mod model;
pub mod numeric;
pub mod par;
pub mod posterior;
pub mod predict;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod spatial;
pub mod validate;
pub mod variogram;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
