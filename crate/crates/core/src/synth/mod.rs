//! Synthetic V1 world: Gabor receptive fields, grating stimuli, behavior
//! covariates and Poisson spiking.
//!
//! `rate = gain · softplus(amp · G·I + g·behavior + baseline)`, where `G` is
//! a unit-norm Gabor filter and `I` a standardized grating-mixture image
//! after the environment's contrast transform.

mod bundle;
mod shift;

pub use bundle::{read_dataset, write_dataset, DatasetBundle, Splits, DATASET_KIND};
pub use shift::{apply_shift, ConditionShift, ShiftKind};

use std::f64::consts::PI;

use avm_autodiff::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::stream;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusFamily {
    /// Grating frequency band in cycles per image height.
    pub band: [f64; 2],
    pub components: usize,
}

impl Default for StimulusFamily {
    fn default() -> Self {
        Self {
            band: [1.0, 3.0],
            components: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Environment {
    /// Multiplies the standardized image; negative values invert polarity.
    pub contrast: f64,
    /// Added to every pixel after the contrast change.
    pub offset: f64,
    /// Multiplies every rate.
    pub response_gain: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            offset: 0.0,
            response_gain: 1.0,
        }
    }
}

/// Sampling ranges for ground-truth neurons. Lengths are fractions of the
/// image height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronPrior {
    pub center_extent: f64,
    pub wavelength: [f64; 2],
    pub envelope: [f64; 2],
    pub amplitude: [f64; 2],
    pub baseline: [f64; 2],
    pub behavior_gain_std: f64,
}

impl Default for NeuronPrior {
    fn default() -> Self {
        Self {
            center_extent: 0.7,
            wavelength: [0.3, 0.7],
            envelope: [0.1, 0.2],
            amplitude: [1.5, 3.0],
            baseline: [0.0, 1.0],
            behavior_gain_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSeeds {
    /// Receptive fields and behavioral gains.
    pub subject: u64,
    /// Images.
    pub stimulus: u64,
    /// Behavior draws, Poisson noise and the validation split.
    pub session: u64,
}

impl Default for WorldSeeds {
    fn default() -> Self {
        Self::all(0)
    }
}

impl WorldSeeds {
    pub fn all(seed: u64) -> Self {
        Self {
            subject: seed,
            stimulus: seed,
            session: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub num_neurons: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub behavior_dim: usize,
    pub n_train_images: usize,
    pub n_test_images: usize,
    pub test_repeats: usize,
    pub val_fraction: f64,
    pub poisson_sampling: bool,
    pub stimulus: StimulusFamily,
    pub environment: Environment,
    pub neurons: NeuronPrior,
    pub seeds: WorldSeeds,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_neurons: 200,
            image_h: 36,
            image_w: 64,
            behavior_dim: 5,
            n_train_images: 2000,
            n_test_images: 50,
            test_repeats: 10,
            val_fraction: 0.1,
            poisson_sampling: true,
            stimulus: StimulusFamily::default(),
            environment: Environment::default(),
            neurons: NeuronPrior::default(),
            seeds: WorldSeeds::default(),
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.num_neurons == 0 || self.image_h < 2 || self.image_w < 2 || self.behavior_dim == 0 {
            return fail("neurons, behavior_dim must be positive and images at least 2x2");
        }
        if self.n_train_images < 2 || self.n_test_images == 0 {
            return fail("need at least 2 train images and 1 test image");
        }
        if self.test_repeats < 2 {
            return fail("test_repeats must be at least 2");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        let band = self.stimulus.band;
        if !(band[0] > 0.0 && band[0] <= band[1]) || self.stimulus.components == 0 {
            return fail("stimulus band must be positive and ordered, with at least one component");
        }
        let p = &self.neurons;
        for (lo, hi) in [p.wavelength, p.envelope, p.amplitude, p.baseline].map(|r| (r[0], r[1])) {
            if !(lo <= hi) {
                return fail("neuron prior ranges must be ordered");
            }
        }
        if !(p.wavelength[0] > 0.0 && p.envelope[0] > 0.0) || !(0.0..=1.0).contains(&p.center_extent) {
            return fail("wavelength and envelope must be positive; center_extent in [0, 1]");
        }
        let e = &self.environment;
        if !(e.contrast.is_finite() && e.offset.is_finite() && e.response_gain > 0.0) {
            return fail("environment needs finite contrast/offset and positive gain");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Ground truth for one neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronTruth {
    /// `(x, y)` in `[-1, 1]`, `x` along the width; `±1` are the edge pixel centers.
    pub center: [f64; 2],
    pub orientation: f64,
    /// Pixels per cycle.
    pub wavelength: f64,
    /// Gaussian envelope standard deviation in pixels.
    pub envelope: f64,
    pub phase: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub behavior_gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: SyntheticWorldConfig,
    pub neurons: Vec<NeuronTruth>,
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl World {
    /// Samples neurons from `config.seeds.subject`.
    pub fn sample(config: &SyntheticWorldConfig) -> Result<Self> {
        config.validate()?;
        let h = config.image_h as f64;
        let p = &config.neurons;
        let neurons = (0..config.num_neurons)
            .map(|n| {
                let mut rng = stream(config.seeds.subject, "neuron", n as u64);
                let c = p.center_extent;
                NeuronTruth {
                    center: [uniform(&mut rng, [-c, c]), uniform(&mut rng, [-c, c])],
                    orientation: rng.random_range(0.0..PI),
                    wavelength: uniform(&mut rng, p.wavelength) * h,
                    envelope: uniform(&mut rng, p.envelope) * h,
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude: uniform(&mut rng, p.amplitude),
                    baseline: uniform(&mut rng, p.baseline),
                    behavior_gain: (0..config.behavior_dim)
                        .map(|_| p.behavior_gain_std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            neurons,
        })
    }

    /// Unit-norm Gabor filter of neuron `n`, row-major `[H×W]`.
    pub fn filter(&self, n: usize) -> Vec<f64> {
        let c = &self.config;
        let t = &self.neurons[n];
        let cx = (t.center[0] + 1.0) / 2.0 * (c.image_w - 1) as f64;
        let cy = (t.center[1] + 1.0) / 2.0 * (c.image_h - 1) as f64;
        let (s, co) = t.orientation.sin_cos();
        let mut g: Vec<f64> = (0..c.image_h * c.image_w)
            .map(|k| {
                let dx = (k % c.image_w) as f64 - cx;
                let dy = (k / c.image_w) as f64 - cy;
                let along = dx * co + dy * s;
                let env = (-(dx * dx + dy * dy) / (2.0 * t.envelope * t.envelope)).exp();
                env * (2.0 * PI * along / t.wavelength + t.phase).cos()
            })
            .collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            g.iter_mut().for_each(|v| *v /= norm);
        }
        g
    }

    pub fn filters(&self) -> Vec<Vec<f64>> {
        (0..self.neurons.len()).map(|n| self.filter(n)).collect()
    }

    /// Image `index` after the environment transform, row-major `[H×W]`.
    pub fn image(&self, index: usize) -> Vec<f64> {
        let c = &self.config;
        let mut rng = stream(c.seeds.stimulus, "image", index as u64);
        let h = c.image_h as f64;
        let mut img = vec![0.0; c.image_h * c.image_w];
        for _ in 0..c.stimulus.components {
            let freq = uniform(&mut rng, c.stimulus.band) / h;
            let (s, co) = rng.random_range(0.0..PI).sin_cos();
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            for (k, v) in img.iter_mut().enumerate() {
                let x = (k % c.image_w) as f64;
                let y = (k / c.image_w) as f64;
                *v += amp * (2.0 * PI * freq * (x * co + y * s) + phase).cos();
            }
        }
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let std = (img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let std = if std > 0.0 { std } else { 1.0 };
        let e = &c.environment;
        img.iter_mut().for_each(|v| *v = e.contrast * (*v - mean) / std + e.offset);
        img
    }

    /// Behavior vector of trial `trial`.
    pub fn behavior(&self, trial: usize) -> Vec<f64> {
        let mut rng = stream(self.config.seeds.session, "behavior", trial as u64);
        (0..self.config.behavior_dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Firing rates of all neurons for one image and behavior vector.
    pub fn rates(&self, filters: &[Vec<f64>], image: &[f64], behavior: &[f64]) -> Vec<f64> {
        let gain = self.config.environment.response_gain;
        self.neurons
            .iter()
            .zip(filters)
            .map(|(t, g)| {
                let drive: f64 = g.iter().zip(image).map(|(a, b)| a * b).sum();
                let beh: f64 = t.behavior_gain.iter().zip(behavior).map(|(a, b)| a * b).sum();
                (gain * softplus(t.amplitude * drive + beh + t.baseline)).max(f64::MIN_POSITIVE)
            })
            .collect()
    }

    /// Responses for `trial`: Poisson draws of `rates`, or the rates themselves
    /// when sampling is off.
    pub fn respond(&self, trial: usize, rates: &[f64]) -> Vec<f64> {
        if !self.config.poisson_sampling {
            return rates.to_vec();
        }
        let mut rng = stream(self.config.seeds.session, "spikes", trial as u64);
        rates
            .iter()
            .map(|&r| Poisson::new(r).expect("positive finite rate").sample(&mut rng))
            .collect()
    }
}

/// Samples a world and its full dataset.
pub fn generate_world(config: &SyntheticWorldConfig) -> Result<(World, DatasetBundle)> {
    let world = World::sample(config)?;
    let c = config;
    let filters = world.filters();
    let n_img = c.n_train_images + c.n_test_images;
    let repeats: Vec<usize> = (0..n_img)
        .map(|i| if i < c.n_train_images { 1 } else { c.test_repeats })
        .collect();
    let n_trials: usize = repeats.iter().sum();
    let mut stimuli = Vec::with_capacity(n_img * c.image_h * c.image_w);
    let mut behavior = Vec::with_capacity(n_trials * c.behavior_dim);
    let mut responses = Vec::with_capacity(n_trials * c.num_neurons);
    let mut trial_image = Vec::with_capacity(n_trials);
    let mut trial = 0;
    for (i, &reps) in repeats.iter().enumerate() {
        let img = world.image(i);
        for _ in 0..reps {
            let b = world.behavior(trial);
            let rates = world.rates(&filters, &img, &b);
            responses.extend(world.respond(trial, &rates));
            behavior.extend(b);
            trial_image.push(i);
            trial += 1;
        }
        stimuli.extend(img);
    }
    let splits = Splits::draw(c.n_train_images, c.n_test_images, c.val_fraction, c.seeds.session);
    let bundle = DatasetBundle {
        stimuli: Tensor::new(&[n_img, c.image_h, c.image_w], stimuli)?,
        behavior: Tensor::new(&[n_trials, c.behavior_dim], behavior)?,
        responses: Tensor::new(&[n_trials, c.num_neurons], responses)?,
        trial_image,
        splits,
        test_repeats: c.test_repeats,
        provenance: c.hash(),
    };
    bundle.validate()?;
    Ok((world, bundle))
}
