//! Joint non-linear representation and recovery for snapshot compressive
//! spectral imaging.
//!
//! The crate covers the whole pipeline: DD-CASSI sensing ([`sensing`]), a
//! small differentiable substrate ([`substrate`]), the decoder / gradient /
//! prior networks ([`networks`]), the unrolled ADMM solver ([`unrolled`]),
//! end-to-end training ([`training`]), quality metrics ([`metrics`]) and the
//! brute-force references used to check all of it ([`oracles`],
//! [`gradcheck`]).

pub mod cube;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod oracles;
pub mod seeds;
pub mod sensing;
pub mod substrate;
pub mod training;
pub mod unrolled;

pub use cube::{load_cube, normalize, save_cube, LatentCube, Measurement, SpectralCube};
pub use error::{Error, Result};
pub use metrics::QualityReport;
pub use sensing::{CodedAperture, SensingOperator};
pub use unrolled::{ModelConfig, UnrolledModel};
