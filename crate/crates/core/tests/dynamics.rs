mod common;

use common::{central, rel_err};
use proptest::prelude::*;
use stlcluster::autodiff::{Tape, Tensor};
use stlcluster::dynamics::{
    diag, rollout, rollout_on_tape, saturate_on_tape, saturate_output, stage_cost, CostNorm, SingleIntegrator,
    SystemModel, Vehicle,
};

#[test]
fn saturation_examples() {
    assert_eq!(saturate_output(&[0.0], &[-1.0], &[1.0]), vec![0.0]);
    assert_eq!(saturate_output(&[0.0], &[2.0], &[4.0]), vec![3.0]);
    let big = saturate_output(&[15.0], &[-1.0], &[1.0])[0];
    assert!(big > 0.999 && big <= 1.0);
}

#[test]
fn stage_cost_examples() {
    let r = diag(&[10.0, 1.0]);
    assert_eq!(stage_cost(&[], &[1.0, 0.0], &r, CostNorm::Quadratic).unwrap(), 10.0);
    assert_eq!(stage_cost(&[], &[0.0, 2.0], &r, CostNorm::Quadratic).unwrap(), 4.0);
    assert_eq!(stage_cost(&[], &[0.0, 2.0], &r, CostNorm::Sqrt).unwrap(), 2.0);
    assert_eq!(stage_cost(&[], &[0.0, 0.0], &r, CostNorm::Quadratic).unwrap(), 0.0);
}

#[test]
fn vehicle_step_by_hand() {
    let m = Vehicle::default();
    let x = m.step(&[1.0, 2.0, std::f64::consts::FRAC_PI_2, 2.0, 0.5], &[10.0, -100.0]);
    let want = [1.0, 4.0, std::f64::consts::FRAC_PI_2 + 0.5, 3.0, -0.5];
    for (a, b) in x.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn out_of_bounds_controls_are_rejected() {
    let m = Vehicle::default();
    assert!(rollout(&m, &[0.0; 5], &[vec![11.0, 0.0]]).is_err());
    assert!(rollout(&m, &[0.0; 5], &[vec![0.0, f64::NAN]]).is_err());
    assert!(rollout(&SingleIntegrator::new(1, 1.0), &[0.0], &[vec![1.0]]).is_ok());
}

proptest! {
    #[test]
    fn saturation_stays_inside_and_is_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, lo in -5.0f64..0.0, w in 0.1f64..5.0) {
        let hi = lo + w;
        let (ya, yb) = (saturate_output(&[a], &[lo], &[hi])[0], saturate_output(&[b], &[lo], &[hi])[0]);
        prop_assert!(ya >= lo && ya <= hi);
        if a <= b {
            prop_assert!(ya <= yb);
        }
    }

    #[test]
    fn tape_rollout_matches_plain_rollout(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = stlcluster::rng::rng_for(seed, &[]);
        let m = Vehicle::default();
        let x0: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let raw: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let controls: Vec<Vec<f64>> = raw.iter().map(|r| saturate_output(r, m.u_min(), m.u_max())).collect();
        let plain = rollout(&m, &x0, &controls).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(x0.clone()));
        let us: Vec<_> = raw
            .iter()
            .map(|r| {
                let n = tape.leaf(Tensor::vector(r.clone()));
                saturate_on_tape(&mut tape, n, m.u_min(), m.u_max()).unwrap()
            })
            .collect();
        let states = rollout_on_tape(&m, &mut tape, x, &us).unwrap();
        for (k, &s) in states.iter().enumerate() {
            for (a, b) in tape.value(s).iter().zip(plain.state(k)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn rollout_gradient_matches_finite_differences() {
    let m = Vehicle::default();
    let x0 = vec![1.0, 1.0, 0.3, 0.8, 0.0];
    let raw = vec![vec![0.2, -0.1], vec![-0.4, 0.3], vec![0.1, 0.5], vec![0.0, -0.2]];
    let position_sum = |raw: &[Vec<f64>]| {
        let us: Vec<Vec<f64>> = raw.iter().map(|r| saturate_output(r, m.u_min(), m.u_max())).collect();
        let t = rollout(&m, &x0, &us).unwrap();
        t.state(t.len() - 1)[0] + t.state(t.len() - 1)[1]
    };
    let mut tape = Tape::new();
    let x = tape.constant_vector(&x0);
    let us: Vec<_> = raw
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let n = tape.input(format!("u{k}"), Tensor::vector(r.clone()));
            saturate_on_tape(&mut tape, n, m.u_min(), m.u_max()).unwrap()
        })
        .collect();
    let states = rollout_on_tape(&m, &mut tape, x, &us).unwrap();
    let last = *states.last().unwrap();
    let p = {
        let a = tape.index(last, 0).unwrap();
        let b = tape.index(last, 1).unwrap();
        tape.add(a, b).unwrap()
    };
    tape.backward(p).unwrap();
    let grads = tape.gradients();
    for k in 0..raw.len() {
        for d in 0..2 {
            let fd = central(
                |v| {
                    let mut r = raw.clone();
                    r[k][d] = v;
                    position_sum(&r)
                },
                raw[k][d],
                1e-6,
            );
            assert!(rel_err(grads[&format!("u{k}")].data()[d], fd) < 1e-6);
        }
    }
}
