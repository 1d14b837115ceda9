mod common;

use avm_autodiff::{finite_difference_check, Tape, Tensor};
use avm_core::config::ReadoutConfig;
use avm_core::params::{FreezePlan, ParamGroup, ParamStore};
use avm_core::readout::{readout_forward, softplus, NeuronReadout, Sampling, SIGMA_INIT};
use common::*;
use proptest::prelude::*;

fn build(n: usize, d: usize, seed: u64, bias: bool) -> (ParamStore, NeuronReadout) {
    let mut store = ParamStore::new();
    let r = NeuronReadout::init(&mut store, &ReadoutConfig { num_neurons: n, bias }, d, seed).unwrap();
    (store, r)
}

fn eval(store: &ParamStore, r: &NeuronReadout, fmap: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &FreezePlan::frozen());
    let f = tape.constant(fmap.clone());
    let y = readout_forward(&mut tape, &bound, r, f, Sampling::Eval).unwrap();
    tape.value(y).unwrap().data().to_vec()
}

#[test]
fn init_ranges_and_determinism() {
    let (store, r) = build(50, 8, 3, false);
    assert!(store.value(r.mu).data().iter().all(|v| (-0.5..=0.5).contains(v)));
    assert!(r.sigma(&store).iter().all(|&s| s > 0.0 && (s - SIGMA_INIT).abs() < 1e-15));
    let bound = 1.0 / 8f64.sqrt();
    assert!(store.value(r.weight).data().iter().all(|v| v.abs() <= bound));
    let (again, _) = build(50, 8, 3, false);
    assert_eq!(store, again);
    assert!(r.bias.is_none());
}

#[test]
fn zero_readout_weights_predict_one() {
    let (mut store, r) = build(4, 3, 1, false);
    store.value_mut(r.weight).data_mut().fill(0.0);
    let fmap = random_tensor(&mut rng(1), &[3, 5, 3], 2.0);
    assert_eq!(eval(&store, &r, &fmap), vec![1.0; 4]);
}

#[test]
fn constant_map_with_one_hot_weights() {
    let (mut store, r) = build(3, 4, 2, false);
    let w = store.value_mut(r.weight).data_mut();
    w.fill(0.0);
    for n in 0..3 {
        w[n * 4 + n] = 1.0;
    }
    let c = -0.4;
    let fmap = Tensor::full(&[4, 6, 4], c);
    let expected = c.exp_m1() + 1.0;
    for y in eval(&store, &r, &fmap) {
        assert!((y - expected).abs() < 1e-15);
    }
}

#[test]
fn eval_mode_is_deterministic_and_bias_applies() {
    let (mut store, r) = build(6, 4, 5, true);
    let fmap = random_tensor(&mut rng(6), &[3, 3, 4], 1.0);
    let a = eval(&store, &r, &fmap);
    assert_eq!(a, eval(&store, &r, &fmap));
    store.value_mut(r.bias.unwrap()).data_mut().fill(0.5);
    let b = eval(&store, &r, &fmap);
    assert!(a.iter().zip(&b).all(|(x, y)| y > x));
}

#[test]
fn positions_clamp_into_frame() {
    let (mut store, r) = build(3, 2, 7, false);
    store.value_mut(r.mu).data_mut().copy_from_slice(&[1.7, -3.0, 0.2, 0.9, -1.01, 1.0]);
    r.clamp_positions(&mut store);
    assert_eq!(store.value(r.mu).data(), &[1.0, -1.0, 0.2, 0.9, -1.0, 1.0]);
}

#[test]
fn position_gradient_matches_finite_differences() {
    let (mut store, r) = build(4, 3, 8, false);
    // Grid 4×5: cell boundaries sit at multiples of 0.5 in x and 2/3 in y.
    store
        .value_mut(r.mu)
        .data_mut()
        .copy_from_slice(&[0.13, -0.21, -0.61, 0.37, 0.77, 0.11, -0.33, -0.83]);
    let fmap = random_tensor(&mut rng(9), &[4, 5, 3], 1.0);
    let target = [2.0, 0.0, 1.0, 3.0];
    let ids = vec![r.mu];
    let objective = |store: &ParamStore, grads: bool| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezePlan::phase1());
        let f = tape.constant(fmap.clone());
        let y = readout_forward(&mut tape, &bound, &r, f, Sampling::Eval).unwrap();
        let l = avm_core::train::poisson_loss_var(&mut tape, y, &target, 1e-8).unwrap();
        let v = tape.value(l).unwrap().data()[0];
        let g = if grads {
            tape.backward(l).unwrap();
            tape.grad(bound.get(r.mu)).unwrap().into_owned()
        } else {
            Vec::new()
        };
        (v, g)
    };
    let analytic = objective(&store, true).1;
    let mut scratch = store.clone();
    let report = finite_difference_check(
        |t| {
            scratch.assign_flat(&ids, t).unwrap();
            objective(&scratch, false).0
        },
        &store.flatten(&ids),
        &analytic,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{}", report.max_relative_error);
}

#[test]
fn sigma_and_weights_receive_gradients_in_train_mode() {
    let (store, r) = build(2, 3, 10, false);
    let fmap = random_tensor(&mut rng(11), &[4, 4, 3], 1.0);
    let eps = Tensor::new(&[2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, &FreezePlan::phase1());
    let f = tape.constant(fmap);
    let y = readout_forward(&mut tape, &bound, &r, f, Sampling::Train(&eps)).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(bound.get(r.sigma_free)).unwrap().iter().any(|g| *g != 0.0));
    assert!(tape.grad(bound.get(r.weight)).unwrap().iter().all(|g| *g != 0.0));
}

#[test]
fn jittered_mean_approaches_eval_on_smooth_map() {
    let (mut store, r) = build(3, 1, 12, false);
    store.value_mut(r.weight).data_mut().fill(1.0);
    store.value_mut(r.sigma_free).data_mut().fill(avm_core::readout::softplus_inverse(0.05));
    // Smooth ramp along x over a 16×16 grid.
    let fmap = Tensor::from_fn(&[16, 16, 1], |k| 0.5 + 0.3 * ((k % 16) as f64 / 15.0));
    let eval_pred = eval(&store, &r, &fmap);
    let mut jitter_rng = rng(13);
    let mut sum = vec![0.0; 3];
    let draws = 10_000;
    for _ in 0..draws {
        let eps = r.draw_jitter(&mut jitter_rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezePlan::frozen());
        let f = tape.constant(fmap.clone());
        let y = readout_forward(&mut tape, &bound, &r, f, Sampling::Train(&eps)).unwrap();
        for (s, v) in sum.iter_mut().zip(tape.value(y).unwrap().data()) {
            *s += v;
        }
    }
    for (s, e) in sum.iter().zip(&eval_pred) {
        let mean = s / draws as f64;
        assert!((mean - e).abs() < 0.05 * e, "{mean} vs {e}");
    }
}

#[test]
fn readout_group_is_readout() {
    let (store, _) = build(2, 2, 0, true);
    assert!(store.iter().all(|(_, p)| p.group == ParamGroup::Readout));
    assert_eq!(store.count_group(ParamGroup::Readout), 2 * (4 + 2 + 1));
}

proptest! {
    #[test]
    fn predictions_are_positive(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let (mut store, r) = build(5, 3, seed, true);
        let mut g = rng(seed);
        for v in store.value_mut(r.weight).data_mut() {
            *v *= scale;
        }
        store.value_mut(r.bias.unwrap()).data_mut().fill(-scale);
        let fmap = random_tensor(&mut g, &[3, 4, 3], scale);
        for y in eval(&store, &r, &fmap) {
            prop_assert!(y > 0.0);
        }
    }

    #[test]
    fn softplus_stays_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) > 0.0);
    }
}
