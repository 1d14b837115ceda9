//! Adaptive visual model: a transformer encoder that is trained once and then
//! frozen, plus small condition-aware modulation units (CAMUs) that are
//! trained per condition, a neuron-wise Gaussian readout, Poisson training,
//! response metrics and a synthetic V1 data generator.

pub mod avmd;
pub mod backbone;
pub mod config;
mod error;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod params;
pub mod readout;
pub mod rng;
pub mod synth;
pub mod train;

pub use config::{BackboneConfig, CamuWiring, ModelSpec, ModulationConfig, ReadoutConfig, Variant};
pub use error::CoreError;
pub use model::Model;
pub use params::{CountScope, FreezePlan, ParamGroup, ParamId, ParamStore, Phase};

pub type Result<T> = std::result::Result<T, CoreError>;
