pub mod downstream;
pub mod error;
pub mod gan;
pub mod hpo;
pub mod inversion;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod synthdata;

pub use error::{Error, Result};
