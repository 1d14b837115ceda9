//! Run configuration: one JSON document covering every command.
//!
//! All fields are optional and default to the reference hyperparameters.
//! Unknown keys are rejected. The effective configuration, after defaults,
//! seed propagation and command-line overrides, is written to every run
//! directory as `config.json` and can be fed back with `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use avm_core::synth::{Environment, NeuronPrior, StimulusFamily, SyntheticWorldConfig, WorldSeeds};
use avm_core::train::{AdaptOptions, Strategy, TrainConfig};
use avm_core::{BackboneConfig, CamuWiring, ModelSpec, ModulationConfig, ReadoutConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Model initialization, batch order, readout jitter and the
    /// synthetic world all derive from it.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub readout: ReadoutConfig,
    /// Adaptation strategy used by `adapt`.
    pub variant: Strategy,
    pub modulation: ModulationSettings,
    /// Trains the readout alongside the modulation path during adaptation.
    pub train_readout: bool,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub ablation: AblationSettings,
    pub synth: SynthSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            readout: ReadoutConfig::default(),
            variant: Strategy::Avm,
            modulation: ModulationSettings::default(),
            train_readout: true,
            phase1: TrainConfig::default(),
            phase2: TrainConfig::default(),
            ablation: AblationSettings::default(),
            synth: SynthSettings::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationSettings {
    pub bottleneck: usize,
    pub weight: f64,
    pub wiring: CamuWiring,
}

impl Default for ModulationSettings {
    fn default() -> Self {
        let m = ModulationConfig::default();
        Self {
            bottleneck: m.bottleneck,
            weight: m.weight,
            wiring: m.wiring,
        }
    }
}

impl ModulationSettings {
    pub fn for_variant(&self, variant: Variant) -> ModulationConfig {
        ModulationConfig {
            variant,
            bottleneck: self.bottleneck,
            weight: self.weight,
            wiring: self.wiring,
        }
    }
}

/// Weight × bottleneck grid for `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub weights: Vec<f64>,
    pub dims: Vec<usize>,
    pub variant: Strategy,
    /// Off by default so that a cell differs from the frozen baseline only
    /// through its modulation path.
    pub train_readout: bool,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            weights: vec![0.1, 0.5, 1.0, 2.0],
            dims: vec![1, 5, 31, 50, 100],
            variant: Strategy::Avm,
            train_readout: false,
        }
    }
}

/// Synthetic data settings. Image size, neuron count and behavior width come
/// from the model sections so data and model always agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub test_repeats: usize,
    pub val_fraction: f64,
    pub poisson_sampling: bool,
    pub stimulus: StimulusFamily,
    pub environment: Environment,
    pub neurons: NeuronPrior,
    /// Seed of the shifted conditions written by `synth --shift`.
    pub shift_seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let w = SyntheticWorldConfig::default();
        Self {
            n_train_images: w.n_train_images,
            n_test_images: w.n_test_images,
            test_repeats: w.test_repeats,
            val_fraction: w.val_fraction,
            poisson_sampling: w.poisson_sampling,
            stimulus: w.stimulus,
            environment: w.environment,
            neurons: w.neurons,
            shift_seed: 1,
        }
    }
}

/// Defaults for paths that command-line flags leave unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Propagates `seed` into every seeded section and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.phase1.seed = self.seed;
        self.phase2.seed = self.seed;
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.model_spec().validate()?;
        self.world().validate()?;
        if self.modulation.bottleneck == 0 || !self.modulation.weight.is_finite() {
            return Err(CliError::Config("modulation needs a positive bottleneck and a finite weight".into()));
        }
        if self.ablation.weights.iter().any(|w| !w.is_finite()) || self.ablation.dims.contains(&0) {
            return Err(CliError::Config("ablation weights must be finite and dims positive".into()));
        }
        if self.ablation.variant.variant().is_none() {
            return Err(CliError::Config(format!(
                "ablation needs an adapter variant, not {}",
                self.ablation.variant.name()
            )));
        }
        Ok(self)
    }

    /// Plain model (no modulation path) described by this config.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone.clone(),
            readout: self.readout.clone(),
            modulation: None,
            seed: self.seed,
        }
    }

    pub fn world(&self) -> SyntheticWorldConfig {
        let s = &self.synth;
        SyntheticWorldConfig {
            num_neurons: self.readout.num_neurons,
            image_h: self.backbone.image_h,
            image_w: self.backbone.image_w,
            behavior_dim: self.backbone.behavior_dim,
            n_train_images: s.n_train_images,
            n_test_images: s.n_test_images,
            test_repeats: s.test_repeats,
            val_fraction: s.val_fraction,
            poisson_sampling: s.poisson_sampling,
            stimulus: s.stimulus.clone(),
            environment: s.environment.clone(),
            neurons: s.neurons.clone(),
            seeds: WorldSeeds::all(self.seed),
        }
    }

    pub fn adapt_options(&self, modulation: ModulationSettings, train_readout: bool) -> AdaptOptions {
        AdaptOptions {
            modulation: modulation.for_variant(Variant::Avm),
            train_readout,
            modulation_seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_json() + "\n").map_err(CliError::io(&path))
    }
}
