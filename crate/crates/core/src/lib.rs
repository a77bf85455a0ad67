//! Flow-field learning and temporal interpolation for spatio-temporal
//! scalar-field ensembles, plus projection-quality evaluation and
//! Pareto model selection.

pub mod embed;
pub mod error;
pub mod evalkit;
pub mod fieldio;
pub mod flint;
pub mod hyper;
pub mod losses;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
