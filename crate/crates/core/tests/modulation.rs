mod common;

use avm_autodiff::{finite_difference_check, Tape, Tensor};
use avm_core::backbone::block_forward;
use avm_core::config::{camu_parameter_count, CamuWiring, ModulationConfig, Variant};
use avm_core::modulation::{camu_forward, export_camu_weights, modulated_block_forward, zero_init_modulation, CamuParams};
use avm_core::params::{CountScope, FreezePlan, ParamGroup};
use avm_core::readout::Sampling;
use avm_core::train::poisson_loss_var;
use avm_core::Model;
use common::*;

const VARIANTS: [Variant; 3] = [Variant::Avm, Variant::AvmS, Variant::AvmB];

fn unit(model: &Model) -> &CamuParams {
    &model.modulation.as_ref().unwrap().triplets[0][0]
}

#[test]
fn hand_evaluated_unit() {
    let mut spec = tiny_spec(Some(Variant::AvmS));
    spec.backbone.embed_dim = 2;
    spec.backbone.num_heads = 1;
    spec.modulation.as_mut().unwrap().bottleneck = 1;
    let mut model = Model::new(spec).unwrap();
    let camu = unit(&model).clone();
    *model.store.value_mut(camu.down.weight) = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    *model.store.value_mut(camu.up.weight) = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x = tape.constant(Tensor::new(&[1, 2], vec![3.0, 5.0]).unwrap());
    let y = camu_forward(&mut tape, &bound, &camu, x).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[3.0, 8.0]);
    let bad = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(camu_forward(&mut tape, &bound, &camu, bad).is_err());
}

#[test]
fn zero_up_or_zero_weight_is_identity() {
    let mut model = Model::new(tiny_spec(Some(Variant::Avm))).unwrap();
    randomize_group(&mut model, ParamGroup::Modulation, 1, 0.7);
    let x_val = random_tensor(&mut rng(2), &[8, 16], 2.0);
    let run = |model: &Model, camu: &CamuParams| {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
        let x = tape.constant(x_val.clone());
        let y = camu_forward(&mut tape, &bound, camu, x).unwrap();
        tape.value(y).unwrap().data().to_vec()
    };
    let mut camu = unit(&model).clone();
    camu.weight = 0.0;
    assert_eq!(run(&model, &camu), x_val.data());
    camu.weight = 3.5;
    assert_ne!(run(&model, &camu), x_val.data());
    model.store.value_mut(camu.up.weight).data_mut().fill(0.0);
    model.store.value_mut(camu.up.bias).data_mut().fill(0.0);
    assert_eq!(run(&model, &camu), x_val.data());
}

#[test]
fn literal_wiring_of_identity_units_gives_five_x() {
    let mut spec = tiny_spec(Some(Variant::Avm));
    spec.modulation.as_mut().unwrap().wiring = CamuWiring::Literal;
    let mut model = Model::new(spec).unwrap();
    for name in ["attn.o.weight", "attn.o.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        set_param(&mut model, &format!("backbone.block0.{name}"), 0.0);
    }
    let x_val = random_tensor(&mut rng(3), &[8, 16], 1.0);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x = tape.constant(x_val.clone());
    let b = tape.constant(random_tensor(&mut rng(4), &[16], 1.0));
    let m = model.modulation.as_ref().unwrap();
    let f = modulated_block_forward(&mut tape, &bound, &model.backbone.blocks[0], m.triplet(0), CamuWiring::Literal, x, b, 2).unwrap();
    let got = tape.value(f).unwrap().data().to_vec();
    let expected: Vec<f64> = x_val.data().iter().map(|v| 5.0 * v).collect();
    assert!(max_abs_diff(&got, &expected) < 1e-14);
}

#[test]
fn residual_wiring_matches_plain_block_at_zero_init() {
    let mut model = Model::new(tiny_spec(Some(Variant::Avm))).unwrap();
    randomize_group(&mut model, ParamGroup::Backbone, 5, 0.5);
    let mut r = rng(6);
    let x_val = random_tensor(&mut r, &[8, 16], 1.0);
    let b_val = random_tensor(&mut r, &[16], 1.0);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x = tape.constant(x_val);
    let b = tape.constant(b_val);
    let block = &model.backbone.blocks[0];
    let (_, plain) = block_forward(&mut tape, &bound, block, x, b, 2).unwrap();
    let m = model.modulation.as_ref().unwrap();
    let modulated = modulated_block_forward(&mut tape, &bound, block, m.triplet(0), CamuWiring::Residual, x, b, 2).unwrap();
    assert_eq!(tape.value(plain).unwrap(), tape.value(modulated).unwrap());
}

#[test]
fn identity_at_init_for_every_variant() {
    for variant in VARIANTS {
        let mut plain = Model::new(tiny_spec(None)).unwrap();
        randomize_group(&mut plain, ParamGroup::Backbone, 7, 0.5);
        let mut modulated = plain.clone();
        modulated
            .attach_modulation(ModulationConfig { variant, bottleneck: 4, ..Default::default() }, 8)
            .unwrap();
        let mut r = rng(9);
        for _ in 0..100 {
            let (image, behavior) = random_input(&plain.spec, &mut r);
            let a = plain.predict_eval(&image, &behavior).unwrap();
            let b = modulated.predict_eval(&image, &behavior).unwrap();
            assert_eq!(max_abs_diff(&a, &b), 0.0, "{variant:?}");
        }
    }
}

#[test]
fn zero_init_is_idempotent_and_one_step_breaks_identity() {
    let mut model = Model::new(tiny_spec(Some(Variant::AvmB))).unwrap();
    let (image, behavior) = random_input(&model.spec, &mut rng(10));
    let reference = model.predict_eval(&image, &behavior).unwrap();
    // One plain gradient step on modulation only.
    let plan = FreezePlan::phase2(false);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &plan);
    let o = model.predict(&mut tape, &bound, &image, &behavior, Sampling::Eval).unwrap();
    let loss = poisson_loss_var(&mut tape, o, &[0.0, 3.0, 1.0, 5.0, 2.0], 1e-8).unwrap();
    tape.backward(loss).unwrap();
    model.store.accumulate_grads(&tape, &bound, &plan).unwrap();
    for (_, p) in model.store.iter_mut() {
        if p.group == ParamGroup::Modulation {
            for (v, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                *v -= 0.1 * g;
            }
        }
    }
    let stepped = model.predict_eval(&image, &behavior).unwrap();
    assert!(max_abs_diff(&stepped, &reference) > 0.0);
    let m = model.modulation.clone().unwrap();
    zero_init_modulation(&mut model.store, &m, 3);
    assert_eq!(model.predict_eval(&image, &behavior).unwrap(), reference);
    let snapshot = model.store.clone();
    zero_init_modulation(&mut model.store, &m, 3);
    assert_eq!(model.store, snapshot);
}

#[test]
fn branch_scaling_is_linear_for_a_single_unit() {
    let mut model = Model::new(tiny_spec(Some(Variant::Avm))).unwrap();
    randomize_group(&mut model, ParamGroup::Backbone, 11, 0.5);
    randomize_group(&mut model, ParamGroup::Modulation, 12, 0.5);
    // Keep only the second unit of block 0 active.
    let m = model.modulation.clone().unwrap();
    for (k, c) in m.units().enumerate() {
        if k != 1 {
            model.store.value_mut(c.up.weight).data_mut().fill(0.0);
            model.store.value_mut(c.up.bias).data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, &FreezePlan::frozen());
    let x_val = random_tensor(&mut rng(14), &[8, 16], 1.0);
    let x = tape.constant(x_val);
    let b = tape.constant(random_tensor(&mut rng(15), &[16], 1.0));
    let block = &model.backbone.blocks[0];
    let mut out = Vec::new();
    for w in [0.0, 1.0, 0.37] {
        let mut t = m.triplet(0).clone();
        t.iter_mut().for_each(|c| c.weight = w);
        let f = modulated_block_forward(&mut tape, &bound, block, &t, CamuWiring::Residual, x, b, 2).unwrap();
        out.push(tape.value(f).unwrap().data().to_vec());
    }
    let (plain, unit_w, scaled) = (&out[0], &out[1], &out[2]);
    // The active unit reads `a`, which it does not influence, and adds to the
    // block output: f(w) = f(0) + w·(f(1) − f(0)).
    for k in 0..plain.len() {
        let predicted = plain[k] + 0.37 * (unit_w[k] - plain[k]);
        assert!((scaled[k] - predicted).abs() < 1e-12, "coordinate {k}");
    }
}

#[test]
fn shared_triplet_gradient_is_sum_of_untied_gradients() {
    let mut tied = Model::new(tiny_spec(Some(Variant::AvmS))).unwrap();
    randomize_group(&mut tied, ParamGroup::Backbone, 16, 0.5);
    randomize_group(&mut tied, ParamGroup::Modulation, 17, 0.5);
    let mut untied = tied.clone();
    untied
        .attach_modulation(ModulationConfig { variant: Variant::Avm, bottleneck: 4, ..Default::default() }, 0)
        .unwrap();
    let shared = tied.modulation.clone().unwrap();
    let per_block = untied.modulation.clone().unwrap();
    for t in &per_block.triplets {
        for (dst, src) in t.iter().zip(&shared.triplets[0]) {
            for (d, s) in [(dst.down.weight, src.down.weight), (dst.down.bias, src.down.bias), (dst.up.weight, src.up.weight), (dst.up.bias, src.up.bias)] {
                *untied.store.value_mut(d) = tied.store.value(s).clone();
            }
        }
    }
    let (image, behavior) = random_input(&tied.spec, &mut rng(18));
    let r = [1.0, 0.0, 2.0, 4.0, 1.0];
    let grads = |model: &Model| {
        let plan = FreezePlan::phase2(false);
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, &plan);
        let o = model.predict(&mut tape, &bound, &image, &behavior, Sampling::Eval).unwrap();
        let l = poisson_loss_var(&mut tape, o, &r, 1e-8).unwrap();
        tape.backward(l).unwrap();
        let mut m = model.clone();
        m.store.accumulate_grads(&tape, &bound, &plan).unwrap();
        m
    };
    let tied_g = grads(&tied);
    let untied_g = grads(&untied);
    assert_eq!(tied_g.predict_eval(&image, &behavior).unwrap(), untied_g.predict_eval(&image, &behavior).unwrap());
    for (k, src) in shared.triplets[0].iter().enumerate() {
        for (sid, pick) in [(src.down.weight, 0), (src.down.bias, 1), (src.up.weight, 2), (src.up.bias, 3)] {
            let expected: Vec<f64> = (0..2)
                .map(|blk| {
                    let c = &per_block.triplets[blk][k];
                    let id = [c.down.weight, c.down.bias, c.up.weight, c.up.bias][pick];
                    untied_g.store.get(id).grad.clone()
                })
                .fold(None, |acc: Option<Vec<f64>>, g| {
                    Some(match acc {
                        None => g,
                        Some(a) => a.iter().zip(&g).map(|(x, y)| x + y).collect(),
                    })
                })
                .unwrap();
            let got = &tied_g.store.get(sid).grad;
            let scale = expected.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            assert!(max_abs_diff(got, &expected) <= 1e-12 * scale, "unit {k} tensor {pick}");
        }
    }
}

#[test]
fn modulation_gradients_match_finite_differences_with_frozen_backbone() {
    for variant in VARIANTS {
        let mut model = Model::new(tiny_spec(Some(variant))).unwrap();
        randomize_group(&mut model, ParamGroup::Modulation, 19, 0.5);
        let (image, behavior) = random_input(&model.spec, &mut rng(20));
        let plan = FreezePlan::phase2(false);
        let ids = model.store.ids_in(&[ParamGroup::Modulation]);
        let r = [1.0, 0.0, 2.0, 4.0, 1.0];
        let objective = |store: &avm_core::ParamStore, grads: bool| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, &plan);
            let o = model.predict(&mut tape, &bound, &image, &behavior, Sampling::Eval).unwrap();
            let l = poisson_loss_var(&mut tape, o, &r, 1e-8).unwrap();
            let value = tape.value(l).unwrap().data()[0];
            let g: Vec<f64> = if grads {
                tape.backward(l).unwrap();
                ids.iter().flat_map(|&id| tape.grad(bound.get(id)).unwrap().into_owned()).collect()
            } else {
                Vec::new()
            };
            (value, g)
        };
        let analytic = objective(&model.store, true).1;
        let mut scratch = model.store.clone();
        let report = finite_difference_check(
            |t| {
                scratch.assign_flat(&ids, t).unwrap();
                objective(&scratch, false).0
            },
            &model.store.flatten(&ids),
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{variant:?}: {} at {}", report.max_relative_error, report.worst);
    }
}

#[test]
fn unit_counts_and_parameter_formulas() {
    for (variant, units) in [(Variant::Avm, 12), (Variant::AvmS, 3), (Variant::AvmB, 15)] {
        let mut spec = avm_core::ModelSpec::default();
        spec.modulation = Some(ModulationConfig { variant, ..Default::default() });
        let model = Model::new(spec).unwrap();
        let m = model.modulation.as_ref().unwrap();
        assert_eq!(m.unit_count(), units);
        assert_eq!(model.store.count_group(ParamGroup::Modulation), units * camu_parameter_count(64, 31));
        assert_eq!(
            model.count_parameters(CountScope::Trainable, &FreezePlan::phase2(false)),
            units * (64 * 31 + 31 + 31 * 64 + 64)
        );
        let dir = tempfile::tempdir().unwrap();
        let files = export_camu_weights(&model.store, m, dir.path()).unwrap();
        assert_eq!(files.len(), units);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("block,unit,matrix,row,col,value"));
        assert_eq!(lines.count(), camu_parameter_count(64, 31));
    }
}

#[test]
fn export_to_unwritable_path_is_an_io_error() {
    let model = Model::new(tiny_spec(Some(Variant::AvmS))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = export_camu_weights(&model.store, model.modulation.as_ref().unwrap(), &blocker.join("sub")).unwrap_err();
    assert!(matches!(err, avm_core::CoreError::Io { .. }), "{err}");
}
