//! Randomized property tests over the schedule algebra, pooling operators,
//! and edit-map algebra.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skeldiff::editing::{edit_mirror, edit_reweight, edit_word_swap};
use skeldiff::schedule::NoiseSchedule;
use skeldiff::skeleton::{counterpart_map, default_skeleton};
use skeldiff::st_ops::{joint_pool_matrix, temporal_pool_matrix};
use skeldiff::tape::Tape;

fn randd(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-2.0..2.0))
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    (a - b).mapv(f64::abs).iter().cloned().fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn velocity_round_trip_is_identity(seed in any::<u64>(), t in 1usize..=1000) {
        let s = NoiseSchedule::default_schedule();
        let x = randd(&[6], seed);
        let eps = randd(&[6], seed ^ 0xFF);
        let z = s.q_sample(&x, &eps, t).unwrap();
        let v = s.velocity(&x, &eps, t).unwrap();
        let (x2, eps2) = s.recover(&z, &v, t).unwrap();
        prop_assert!(max_abs_diff(&x2, &x) < 1e-9);
        prop_assert!(max_abs_diff(&eps2, &eps) < 1e-9);
    }

    #[test]
    fn oracle_ddim_step_stays_on_marginal(
        seed in any::<u64>(),
        t in 2usize..=1000,
        hop in 1usize..50,
    ) {
        let s = NoiseSchedule::default_schedule();
        let t_prev = t.saturating_sub(hop).min(t - 1);
        let x = randd(&[4], seed);
        let eps = randd(&[4], seed ^ 0xAB);
        let z = s.q_sample(&x, &eps, t).unwrap();
        let v = s.velocity(&x, &eps, t).unwrap();
        let z2 = s.ddim_step(&z, &v, t, t_prev).unwrap();
        let want = if t_prev == 0 { x } else { s.q_sample(&x, &eps, t_prev).unwrap() };
        prop_assert!(max_abs_diff(&z2, &want) < 1e-9);
    }

    #[test]
    fn skel_and_temp_pool_commute(seed in any::<u64>(), frames in 1usize..6) {
        let (_, plan) = default_skeleton();
        let frames = frames * 2;
        let jp = joint_pool_matrix(&plan.stages[0]);
        let tp = temporal_pool_matrix(frames);
        let x = randd(&[frames, plan.base.n_joints(), 3], seed);
        let tape = Tape::no_grad();
        let v = tape.constant(x);
        let ab = tape.axis_apply(&tp, tape.axis_apply(&jp, v, 1), 0);
        let ba = tape.axis_apply(&jp, tape.axis_apply(&tp, v, 0), 1);
        prop_assert!(max_abs_diff(&tape.value(ab), &tape.value(ba)) < 1e-9);
    }

    #[test]
    fn mirror_is_an_involution(seed in any::<u64>()) {
        let (_, plan) = default_skeleton();
        let cp = counterpart_map(plan.atomic()).unwrap();
        let m = randd(&[2, plan.atomic().n_joints(), 3, 4], seed);
        let twice = edit_mirror(&edit_mirror(&m, &cp).unwrap(), &cp).unwrap();
        prop_assert_eq!(twice, m);
    }

    #[test]
    fn reweight_composes_multiplicatively(
        seed in any::<u64>(),
        s1 in -3.0f64..3.0,
        s2 in -3.0f64..3.0,
        k in 0usize..4,
    ) {
        let m = randd(&[2, 3, 3, 4], seed);
        let a = edit_reweight(&edit_reweight(&m, k, s1).unwrap(), k, s2).unwrap();
        let b = edit_reweight(&m, k, s1 * s2).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn word_swap_picks_exactly_one_operand(
        seed in any::<u64>(),
        t in 0usize..=1000,
        tau in 0usize..=1000,
    ) {
        let a = randd(&[2, 3, 3, 4], seed);
        let b = randd(&[2, 3, 3, 4], seed ^ 0x77);
        let out = edit_word_swap(&a, &b, t, tau).unwrap();
        if t < tau {
            prop_assert_eq!(out, b);
        } else {
            prop_assert_eq!(out, a);
        }
    }
}
