mod common;

use avm_autodiff::{finite_difference_check, Tape, Tensor};
use avm_core::backbone::{backbone_forward, behavior_embed, block_forward, patch_embed, patchify};
use avm_core::config::{BackboneConfig, ModelSpec};
use avm_core::params::{CountScope, FreezePlan, ParamGroup};
use avm_core::Model;
use common::*;
use proptest::prelude::*;

fn zero_block_outputs(model: &mut Model, block: usize) {
    for name in ["attn.o.weight", "attn.o.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        set_param(model, &format!("backbone.block{block}.{name}"), 0.0);
    }
}

#[test]
fn default_grid_and_feature_map_shape() {
    let model = Model::new(ModelSpec::default()).unwrap();
    let image = Tensor::full(&[36, 64], 0.1);
    let behavior = Tensor::zeros(&[5]);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let tokens = patch_embed(&mut tape, &bound, &model.backbone, &image).unwrap();
    assert_eq!(tape.shape(tokens).unwrap(), [144, 64]);
    let f = backbone_forward(&mut tape, &bound, &model.backbone, &image, &behavior).unwrap();
    assert_eq!(tape.shape(f).unwrap(), [9, 16, 64]);
}

#[test]
fn patchify_orders_pixels_within_patches() {
    let cfg = BackboneConfig {
        image_h: 4,
        image_w: 8,
        patch: 2,
        embed_dim: 4,
        num_heads: 1,
        ..Default::default()
    };
    let image = Tensor::from_fn(&[4, 8], |k| k as f64);
    let p = patchify(&image, &cfg).unwrap();
    assert_eq!(p.shape(), [8, 4]);
    assert_eq!(&p.data()[..4], &[0.0, 1.0, 8.0, 9.0]);
    assert_eq!(&p.data()[4..8], &[2.0, 3.0, 10.0, 11.0]);
    assert_eq!(&p.data()[16..20], &[16.0, 17.0, 24.0, 25.0]);
    assert!(patchify(&Tensor::zeros(&[4, 6]), &cfg).is_err());
}

#[test]
fn zero_projection_tokens_are_bias_plus_position() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    set_param(&mut model, "backbone.patch.weight", 0.0);
    set_param(&mut model, "backbone.patch.bias", 0.75);
    let mut r = rng(1);
    let (image, _) = random_input(&model.spec, &mut r);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let tokens = patch_embed(&mut tape, &bound, &model.backbone, &image).unwrap();
    let pos = model.store.value(model.backbone.pos).data();
    for (t, p) in tape.value(tokens).unwrap().data().iter().zip(pos) {
        assert_eq!(*t, 0.75 + p);
    }
}

#[test]
fn zero_behavior_mlp_leaves_b_unchanged() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    set_param(&mut model, "backbone.block0.behavior.fc2.weight", 0.0);
    let mut r = rng(2);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let raw = tape.constant(random_tensor(&mut r, &[5], 1.0));
    let prev = random_tensor(&mut r, &[16], 1.0);
    let prev_var = tape.constant(prev.clone());
    let b = behavior_embed(&mut tape, &bound, &model.backbone.blocks[0], raw, prev_var).unwrap();
    assert_eq!(tape.value(b).unwrap().data(), prev.data());
}

#[test]
fn behavior_accumulates_across_blocks() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    randomize_group(&mut model, ParamGroup::Backbone, 3, 0.5);
    for name in ["behavior.fc1.weight", "behavior.fc1.bias", "behavior.fc2.weight", "behavior.fc2.bias"] {
        let src = model.store.by_name(&format!("backbone.block0.{name}")).unwrap().value.clone();
        let dst = model.store.id(&format!("backbone.block1.{name}")).unwrap();
        *model.store.value_mut(dst) = src;
    }
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let raw = tape.constant(random_tensor(&mut rng(4), &[5], 1.0));
    let zero = tape.constant(Tensor::zeros(&[16]));
    let b0 = behavior_embed(&mut tape, &bound, &model.backbone.blocks[0], raw, zero).unwrap();
    let b1 = behavior_embed(&mut tape, &bound, &model.backbone.blocks[1], raw, b0).unwrap();
    let once = tape.value(b0).unwrap().data().to_vec();
    for (two, one) in tape.value(b1).unwrap().data().iter().zip(&once) {
        assert_eq!(*two, one + one);
    }
}

#[test]
fn behavior_mlp_is_positively_homogeneous_without_biases() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    set_param(&mut model, "backbone.block0.behavior.fc1.bias", 0.0);
    set_param(&mut model, "backbone.block0.behavior.fc2.bias", 0.0);
    let delta = |model: &Model| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
        let raw = tape.constant(random_tensor(&mut rng(5), &[5], 1.0));
        let prev = tape.constant(Tensor::full(&[16], 0.3));
        let b = behavior_embed(&mut tape, &bound, &model.backbone.blocks[0], raw, prev).unwrap();
        tape.value(b).unwrap().data().iter().map(|v| v - 0.3).collect::<Vec<_>>()
    };
    let base = delta(&model);
    let id = model.store.id("backbone.block0.behavior.fc2.weight").unwrap();
    model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let doubled = delta(&model);
    for (d, b) in doubled.iter().zip(&base) {
        assert!((d - 2.0 * b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}

#[test]
fn zero_output_projections_make_block_identity() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    zero_block_outputs(&mut model, 0);
    let mut r = rng(6);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x_val = random_tensor(&mut r, &[8, 16], 1.0);
    let x = tape.constant(x_val.clone());
    let b = tape.constant(random_tensor(&mut r, &[16], 1.0));
    let (a, f) = block_forward(&mut tape, &bound, &model.backbone.blocks[0], x, b, 2).unwrap();
    assert_eq!(tape.value(a).unwrap().data(), x_val.data());
    assert_eq!(tape.value(f).unwrap().data(), x_val.data());
}

#[test]
fn single_token_attends_to_itself() {
    let mut spec = tiny_spec(None);
    spec.backbone.image_h = 4;
    spec.backbone.image_w = 4;
    let mut model = Model::new(spec).unwrap();
    for name in ["attn.v.bias", "attn.o.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        set_param(&mut model, &format!("backbone.block0.{name}"), 0.0);
    }
    for name in ["attn.v.weight", "attn.o.weight"] {
        let id = model.store.id(&format!("backbone.block0.{name}")).unwrap();
        *model.store.value_mut(id) = Tensor::from_fn(&[16, 16], |k| if k / 16 == k % 16 { 1.0 } else { 0.0 });
    }
    let mut r = rng(7);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x_val = random_tensor(&mut r, &[1, 16], 1.0);
    let b_val = random_tensor(&mut r, &[16], 1.0);
    let x = tape.constant(x_val.clone());
    let b = tape.constant(b_val.clone());
    let (a, f) = block_forward(&mut tape, &bound, &model.backbone.blocks[0], x, b, 2).unwrap();
    let expected: Vec<f64> = x_val.data().iter().zip(b_val.data()).map(|(x, b)| x + (x + b)).collect();
    let got = tape.value(a).unwrap().data().to_vec();
    assert!(max_abs_diff(&got, &expected) < 1e-15);
    assert_eq!(tape.value(f).unwrap().data(), got.as_slice());
}

#[test]
fn zero_parameters_propagate_positional_embeddings() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    let pos = model.store.value(model.backbone.pos).clone();
    for (_, p) in model.store.iter_mut() {
        if p.group == ParamGroup::Backbone {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    *model.store.value_mut(model.backbone.pos) = pos.clone();
    let (image, behavior) = random_input(&model.spec, &mut rng(8));
    let f = model.features_eval(&image, &behavior).unwrap();
    assert_eq!(f.shape(), [2, 4, 16]);
    assert_eq!(f.data(), pos.data());
}

#[test]
fn block_gradients_match_finite_differences() {
    for layernorm in [false, true] {
        let mut spec = tiny_spec(None);
        spec.backbone.layernorm_enabled = layernorm;
        let mut model = Model::new(spec).unwrap();
        randomize_group(&mut model, ParamGroup::Backbone, 9, 0.5);
        let mut r = rng(10);
        let x_val = random_tensor(&mut r, &[4, 16], 1.0);
        let b_val = random_tensor(&mut r, &[16], 1.0);
        let probe = random_tensor(&mut r, &[4, 16], 1.0);
        let block = model.backbone.blocks[0].clone();
        let prefix = "backbone.block0.";
        let ids: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix) && !p.name.contains("behavior"))
            .map(|(id, _)| id)
            .collect();
        // The key bias shifts every logit of a query row equally, so softmax
        // cancels it: its gradient is exactly zero and checked separately.
        let key_bias = model.store.id("backbone.block0.attn.k.bias").unwrap();
        let ids: Vec<_> = ids.into_iter().filter(|&id| id != key_bias).collect();
        let objective = |store: &avm_core::ParamStore, grads: bool, ids: &[avm_core::ParamId]| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, &FreezePlan::phase1());
            let x = tape.constant(x_val.clone());
            let b = tape.constant(b_val.clone());
            let (_, f) = block_forward(&mut tape, &bound, &block, x, b, 2).unwrap();
            let w = tape.constant(probe.clone());
            let fw = tape.mul(f, w).unwrap();
            let s = tape.sum_all(fw).unwrap();
            let value = tape.value(s).unwrap().data()[0];
            let g = if grads {
                tape.backward(s).unwrap();
                ids.iter().flat_map(|&id| tape.grad(bound.get(id)).unwrap().into_owned()).collect()
            } else {
                Vec::new()
            };
            (value, g)
        };
        let analytic = objective(&model.store, true, &ids).1;
        let key_grad = objective(&model.store, true, &[key_bias]).1;
        assert!(key_grad.iter().all(|g| g.abs() < 1e-12), "{key_grad:?}");
        let theta = model.store.flatten(&ids);
        let mut scratch = model.store.clone();
        let report = finite_difference_check(
            |t| {
                scratch.assign_flat(&ids, t).unwrap();
                objective(&scratch, false, &ids).0
            },
            &theta,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert_grads_close(&report, 1e-4, 1e-9, &format!("layernorm={layernorm}"));
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut model = Model::new(tiny_spec(None)).unwrap();
    randomize_group(&mut model, ParamGroup::Backbone, 12, 0.5);
    let mut r = rng(13);
    let x_val = random_tensor(&mut r, &[8, 16], 1.0);
    let b_val = random_tensor(&mut r, &[16], 1.0);
    let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
    let permuted = Tensor::from_fn(&[8, 16], |k| x_val.data()[perm[k / 16] * 16 + k % 16]);
    let run = |x_val: &Tensor| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
        let x = tape.constant(x_val.clone());
        let b = tape.constant(b_val.clone());
        let (_, f) = block_forward(&mut tape, &bound, &model.backbone.blocks[0], x, b, 2).unwrap();
        tape.value(f).unwrap().data().to_vec()
    };
    let base = run(&x_val);
    let moved = run(&permuted);
    let expected: Vec<f64> = (0..128).map(|k| base[perm[k / 16] * 16 + k % 16]).collect();
    assert!(max_abs_diff(&moved, &expected) < 1e-12);
}

#[test]
fn fresh_model_counts_all_as_trainable() {
    let model = Model::new(ModelSpec::default()).unwrap();
    let all = model.count_parameters(CountScope::All, &FreezePlan::phase1());
    assert_eq!(all, model.count_parameters(CountScope::Trainable, &FreezePlan::phase1()));
    assert_eq!(all, model.spec.parameter_count());
}

/// Independent tally of the backbone layout.
fn oracle_backbone_count(c: &BackboneConfig) -> usize {
    let d = c.embed_dim;
    let linear = |i: usize, o: usize| i * o + o;
    let tokens = (c.image_h / c.patch) * (c.image_w / c.patch);
    let embed = linear(c.patch * c.patch, d) + tokens * d;
    let block = 4 * linear(d, d)
        + linear(d, 4 * d)
        + linear(4 * d, d)
        + linear(c.behavior_dim, d)
        + linear(d, d)
        + if c.layernorm_enabled { 2 * 2 * d } else { 0 };
    embed + c.num_blocks * block
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backbone_count_matches_closed_form(
        grid_h in 1usize..4, grid_w in 1usize..4, patch in 1usize..4,
        heads in 1usize..3, head_dim in 1usize..5, blocks in 1usize..4,
        behavior in 1usize..6, layernorm in any::<bool>(),
    ) {
        let c = BackboneConfig {
            image_h: grid_h * patch,
            image_w: grid_w * patch,
            patch,
            embed_dim: heads * head_dim,
            num_blocks: blocks,
            num_heads: heads,
            behavior_dim: behavior,
            layernorm_enabled: layernorm,
        };
        let spec = ModelSpec { backbone: c.clone(), ..tiny_spec(None) };
        let model = Model::new(spec).unwrap();
        prop_assert_eq!(model.store.count_group(ParamGroup::Backbone), oracle_backbone_count(&c));
        prop_assert_eq!(c.parameter_count(), oracle_backbone_count(&c));
    }
}
