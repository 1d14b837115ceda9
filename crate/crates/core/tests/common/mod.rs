#![allow(dead_code)]

use avm_autodiff::Tensor;
use avm_core::config::{BackboneConfig, ModelSpec, ModulationConfig, ReadoutConfig, Variant};
use avm_core::params::ParamGroup;
use avm_core::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8×16 image, patch 4 → 8 tokens; d = 16; 2 blocks; 5 neurons.
pub fn tiny_spec(variant: Option<Variant>) -> ModelSpec {
    ModelSpec {
        backbone: BackboneConfig {
            image_h: 8,
            image_w: 16,
            patch: 4,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            behavior_dim: 5,
            layernorm_enabled: false,
        },
        readout: ReadoutConfig {
            num_neurons: 5,
            bias: false,
        },
        modulation: variant.map(|variant| ModulationConfig {
            variant,
            bottleneck: 4,
            ..Default::default()
        }),
        seed: 11,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_input(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let b = &spec.backbone;
    (
        random_tensor(rng, &[b.image_h, b.image_w], 1.0),
        random_tensor(rng, &[b.behavior_dim], 1.0),
    )
}

/// Overwrites every parameter of `group` with uniform(±scale) values.
pub fn randomize_group(model: &mut Model, group: ParamGroup, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, p) in model.store.iter_mut() {
        if p.group == group {
            for v in p.value.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
}

pub fn set_param(model: &mut Model, name: &str, value: f64) {
    let id = model.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-coordinate `|a − n| ≤ rel·max(|a|, |n|) + abs`; the absolute slack
/// absorbs central-difference rounding on near-zero gradients.
pub fn assert_grads_close(report: &avm_autodiff::GradCheckReport, rel: f64, abs: f64, label: &str) {
    for (k, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let bound = rel * a.abs().max(n.abs()) + abs;
        assert!((a - n).abs() <= bound, "{label}: coordinate {k}: analytic {a} vs numeric {n}");
    }
}
