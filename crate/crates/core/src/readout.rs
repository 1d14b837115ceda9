//! Neuron-wise Gaussian readout: `ŷₙ = ELU(wₙᵀ f(posₙ) + biasₙ) + 1`.
//!
//! Eval mode samples the feature map at `μₙ`; train mode at `μₙ + σₙ ⊙ ε`
//! with standard-normal `ε` supplied by the caller.

use avm_autodiff::{Activation, Reduction, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ReadoutConfig;
use crate::params::{Bound, Init, ParamGroup, ParamId, ParamStore, Slot};
use crate::Result;

pub const SIGMA_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronReadout {
    pub num_neurons: usize,
    /// `[N×2]` positions `(x, y)` in `[-1, 1]`.
    pub mu: ParamId,
    /// `[N×2]`; `σ = softplus(sigma_free)`.
    pub sigma_free: ParamId,
    /// `[N×d]`.
    pub weight: ParamId,
    /// `[N]` when enabled.
    pub bias: Option<ParamId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling<'a> {
    Eval,
    /// `[N×2]` standard-normal draws.
    Train(&'a Tensor),
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl NeuronReadout {
    /// μ ~ uniform(−0.5, 0.5)², σ = 0.25 per axis, w ~ uniform(±1/√d), bias 0.
    pub fn init(store: &mut ParamStore, config: &ReadoutConfig, embed_dim: usize, seed: u64) -> Result<Self> {
        Self::declare(&mut Slot::Create { store, seed }, config, embed_dim)
    }

    pub fn resolve(store: &ParamStore, config: &ReadoutConfig, embed_dim: usize) -> Result<Self> {
        Self::declare(&mut Slot::Resolve(store), config, embed_dim)
    }

    fn declare(slot: &mut Slot, config: &ReadoutConfig, d: usize) -> Result<Self> {
        let g = ParamGroup::Readout;
        let n = config.num_neurons;
        if n == 0 {
            return Err(crate::CoreError::Config("num_neurons must be at least 1".into()));
        }
        Ok(Self {
            num_neurons: n,
            mu: slot.param("readout.mu", g, &[n, 2], Init::Uniform(0.5))?,
            sigma_free: slot.param("readout.sigma_free", g, &[n, 2], Init::Constant(softplus_inverse(SIGMA_INIT)))?,
            weight: slot.param("readout.weight", g, &[n, d], Init::Uniform(1.0 / (d as f64).sqrt()))?,
            bias: if config.bias {
                Some(slot.param("readout.bias", g, &[n], Init::Constant(0.0))?)
            } else {
                None
            },
        })
    }

    /// Standard-normal jitter for one train-mode forward pass.
    pub fn draw_jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        Tensor::from_fn(&[self.num_neurons, 2], |_| rng.sample(StandardNormal))
    }

    /// Clamps every μ component into `[-1, 1]`.
    pub fn clamp_positions(&self, store: &mut ParamStore) {
        for v in store.value_mut(self.mu).data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn sigma(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.sigma_free).data().iter().map(|&s| softplus(s)).collect()
    }
}

/// Positive predictions `[N]` from a feature map `[H'×W'×d]`.
pub fn readout_forward(tape: &mut Tape, bound: &Bound, readout: &NeuronReadout, fmap: Var, sampling: Sampling) -> Result<Var> {
    let mu = bound.get(readout.mu);
    let pos = match sampling {
        Sampling::Eval => mu,
        Sampling::Train(eps) => {
            let sigma = tape.activation(bound.get(readout.sigma_free), Activation::Softplus)?;
            let eps = tape.constant(eps.clone());
            let jitter = tape.mul(sigma, eps)?;
            tape.add(mu, jitter)?
        }
    };
    let features = tape.bilinear_sample(fmap, pos)?;
    let weighted = tape.mul(features, bound.get(readout.weight))?;
    let mut z = tape.reduce(weighted, Reduction::Sum, 1)?;
    if let Some(bias) = readout.bias {
        z = tape.add(z, bound.get(bias))?;
    }
    Ok(tape.activation(z, Activation::EluPlusOne)?)
}
