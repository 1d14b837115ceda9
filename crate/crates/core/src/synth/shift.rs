use serde::{Deserialize, Serialize};

use super::{generate_world, DatasetBundle, Environment, World};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    Identity,
    Stimulus,
    Subject,
    Environment,
}

impl ShiftKind {
    pub const NON_TRIVIAL: [ShiftKind; 3] = [ShiftKind::Stimulus, ShiftKind::Subject, ShiftKind::Environment];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Identity => "identity",
            ShiftKind::Stimulus => "stimulus",
            ShiftKind::Subject => "subject",
            ShiftKind::Environment => "environment",
        }
    }
}

/// A change of recording condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ConditionShift {
    Identity,
    /// New images from another frequency band, same neurons.
    Stimulus { band: [f64; 2], seed: u64 },
    /// Resampled receptive fields and behavioral gains, same images.
    Subject { seed: u64 },
    /// Contrast/offset transform of the stimuli and a global response gain.
    /// With `new_stimuli` the images, behavior and noise are redrawn too.
    Environment {
        contrast: f64,
        offset: f64,
        response_gain: f64,
        new_stimuli: bool,
        seed: u64,
    },
}

impl ConditionShift {
    /// Standard parameters for each kind.
    pub fn standard(kind: ShiftKind, seed: u64) -> Self {
        match kind {
            ShiftKind::Identity => ConditionShift::Identity,
            ShiftKind::Stimulus => ConditionShift::Stimulus { band: [2.0, 4.0], seed },
            ShiftKind::Subject => ConditionShift::Subject { seed },
            ShiftKind::Environment => ConditionShift::Environment {
                contrast: -0.8,
                offset: 0.3,
                response_gain: 1.5,
                new_stimuli: true,
                seed,
            },
        }
    }

    pub fn kind(&self) -> ShiftKind {
        match self {
            ConditionShift::Identity => ShiftKind::Identity,
            ConditionShift::Stimulus { .. } => ShiftKind::Stimulus,
            ConditionShift::Subject { .. } => ShiftKind::Subject,
            ConditionShift::Environment { .. } => ShiftKind::Environment,
        }
    }
}

/// Dataset (and world) of the shifted condition.
///
/// Shifts act on the world configuration and regenerate; the identity shift
/// returns the inputs unchanged.
pub fn apply_shift(bundle: &DatasetBundle, world: &World, shift: &ConditionShift) -> Result<(DatasetBundle, World)> {
    let mut config = world.config.clone();
    match *shift {
        ConditionShift::Identity => return Ok((bundle.clone(), world.clone())),
        ConditionShift::Stimulus { band, seed } => {
            config.stimulus.band = band;
            config.seeds.stimulus = seed;
            config.seeds.session = seed;
        }
        ConditionShift::Subject { seed } => {
            config.seeds.subject = seed;
            config.seeds.session = seed;
        }
        ConditionShift::Environment {
            contrast,
            offset,
            response_gain,
            new_stimuli,
            seed,
        } => {
            let base = &world.config.environment;
            config.environment = Environment {
                contrast: base.contrast * contrast,
                offset: base.offset * contrast + offset,
                response_gain: base.response_gain * response_gain,
            };
            if new_stimuli {
                config.seeds.stimulus = seed;
                config.seeds.session = seed;
            }
        }
    }
    let (world, bundle) = generate_world(&config)?;
    Ok((bundle, world))
}
