mod common;

use common::*;
use proptest::prelude::*;
use stlcluster::autodiff::{Tape, Tensor};
use stlcluster::rng::rng_for;
use stlcluster::stl::{parse, robustness, smooth_robustness, Formula, Predicate, PredicateRegistry, Trajectory};

fn smooth_at(formula: &Formula, xs: &[Vec<f64>], beta: f64) -> (f64, usize) {
    let mut tape = Tape::new();
    let ids: Vec<_> = xs.iter().map(|x| tape.leaf(Tensor::vector(x.clone()))).collect();
    let s = smooth_robustness(&mut tape, formula, &ids, beta).unwrap();
    (tape.scalar(s.node), s.m_max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn robustness_matches_enumeration(seed in any::<u64>()) {
        let mut rng = rng_for(seed, &[]);
        let n_x = 1 + (seed % 3) as usize;
        let preds = random_predicates(&mut rng, n_x, 3);
        let (names, reg) = registry(&preds);
        let raw = random_formula(&mut rng, 3, preds.len(), 6);
        let f = parse(&raw.text(&names), &reg).unwrap();
        let xs = random_states(&mut rng, raw.horizon() + 3, n_x);
        let traj = Trajectory::from_states(&xs).unwrap();
        for t in 0..3 {
            let got = robustness(&f, &traj, t).unwrap();
            let want = oracle_rho(&raw, &preds, &xs, t);
            prop_assert!(got == want || (got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn printed_formula_parses_back(seed in any::<u64>()) {
        let mut rng = rng_for(seed, &[]);
        let preds = random_predicates(&mut rng, 2, 3);
        let (names, reg) = registry(&preds);
        let raw = random_formula(&mut rng, 3, preds.len(), 6);
        let f = parse(&raw.text(&names), &reg).unwrap();
        let again = parse(&f.to_string(), &reg).unwrap();
        prop_assert_eq!(f, again);
    }

    #[test]
    fn smooth_under_approximates_within_bound(seed in any::<u64>(), beta in 0.5f64..200.0) {
        let mut rng = rng_for(seed, &[]);
        let preds = random_predicates(&mut rng, 2, 3);
        let (names, reg) = registry(&preds);
        let raw = random_formula(&mut rng, 3, preds.len(), 5);
        let xs = random_states(&mut rng, raw.horizon() + 1, 2);
        let exact = oracle_rho(&raw, &preds, &xs, 0);
        prop_assume!(exact.is_finite());
        let f = parse(&raw.text(&names), &reg).unwrap();
        let (s, m) = smooth_at(&f, &xs, beta);
        prop_assert!(s <= exact + 1e-12);
        prop_assert!(exact - s <= (m as f64).ln() / beta + 1e-12);
    }
}

#[test]
fn smooth_gradient_matches_finite_differences() {
    let mut rng = rng_for(77, &[]);
    for _ in 0..20 {
        let preds = random_predicates(&mut rng, 2, 3);
        let (names, reg) = registry(&preds);
        let raw = random_formula(&mut rng, 2, preds.len(), 5);
        let xs = random_states(&mut rng, raw.horizon() + 1, 2);
        if !oracle_rho(&raw, &preds, &xs, 0).is_finite() {
            continue;
        }
        let f = parse(&raw.text(&names), &reg).unwrap();
        let mut tape = Tape::new();
        let ids: Vec<_> = xs
            .iter()
            .enumerate()
            .map(|(k, x)| tape.input(format!("x{k:02}"), Tensor::vector(x.clone())))
            .collect();
        let s = smooth_robustness(&mut tape, &f, &ids, 5.0).unwrap();
        tape.backward(s.node).unwrap();
        let grads = tape.gradients();
        for k in 0..xs.len() {
            for d in 0..2 {
                let fd = central(
                    |v| {
                        let mut p = xs.clone();
                        p[k][d] = v;
                        smooth_at(&f, &p, 5.0).0
                    },
                    xs[k][d],
                    1e-6,
                );
                let an = grads.get(&format!("x{k:02}")).map_or(0.0, |g| g.data()[d]);
                assert!(rel_err(an, fd) < 1e-5, "{an} vs {fd}");
            }
        }
    }
}

fn scalar_registry() -> PredicateRegistry {
    let mut r = PredicateRegistry::new();
    r.insert("pos".into(), Predicate::Affine { weights: vec![1.0], offset: 0.0 });
    r.insert("big".into(), Predicate::Affine { weights: vec![1.0], offset: -2.0 });
    r
}

#[test]
fn hand_checked_values() {
    let reg = scalar_registry();
    let traj = Trajectory::scalar(&[-1.0, 0.5, 3.0, 1.0]);
    let rho = |s: &str| robustness(&parse(s, &reg).unwrap(), &traj, 0).unwrap();
    assert_eq!(rho("F[0,3] pos"), 3.0);
    assert_eq!(rho("G[0,3] pos"), -1.0);
    assert_eq!(rho("G[1,3] pos"), 0.5);
    assert_eq!(rho("not F[0,3] big"), -1.0);
    // pos must hold from t=0, which fails immediately.
    assert_eq!(rho("pos until[0,3] big"), -1.0);
    assert_eq!(rho("true until[0,3] big"), 1.0);
    assert_eq!(rho("pos or not pos"), 1.0);
}

#[test]
fn short_trajectories_are_rejected() {
    let reg = scalar_registry();
    let f = parse("F[0,5] pos", &reg).unwrap();
    assert!(robustness(&f, &Trajectory::scalar(&[1.0, 2.0]), 0).is_err());
}

#[test]
fn disk_negation_is_clearance() {
    let mut reg = PredicateRegistry::new();
    reg.insert("obs".into(), Predicate::planar_disk([0.0, 0.0], 1.0));
    let f = parse("G[0,1] not obs", &reg).unwrap();
    let traj = Trajectory::from_states(&[vec![3.0, 4.0], vec![0.0, 2.5]]).unwrap();
    assert!((robustness(&f, &traj, 0).unwrap() - 1.5).abs() < 1e-12);
}
