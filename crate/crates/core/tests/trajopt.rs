use stlcluster::dynamics::{diag, rollout, CostNorm, SingleIntegrator};
use stlcluster::experiment::{sample_instance, ExperimentConfig};
use stlcluster::stl::{parse, robustness, Predicate, PredicateRegistry};
use stlcluster::trajopt::{build_phi_xi, solve_instance, InstanceProblem, Obstacle, SolverConfig};

fn vehicle_problem(cfg: &ExperimentConfig, seed: u64) -> InstanceProblem<'_> {
    let inst = sample_instance(cfg, seed).unwrap();
    let obstacles = inst.obstacles();
    InstanceProblem {
        model: cfg.model(),
        x0: inst.x0,
        formula: build_phi_xi(&cfg.psi().unwrap(), &obstacles, cfg.horizon),
        obstacles,
        horizon: cfg.horizon,
        gamma: cfg.gamma,
        r: cfg.r.clone(),
        cost_norm: cfg.cost_norm,
        solver: SolverConfig {
            iterations: 40,
            restarts: 2,
            ..cfg.solver.clone()
        },
    }
}

#[test]
fn vehicle_records_are_consistent() {
    let cfg = ExperimentConfig::smoke();
    for seed in 0..4 {
        let p = vehicle_problem(&cfg, seed);
        let rec = solve_instance(&p, seed as usize, seed).unwrap().record;
        assert_eq!(rec.controls.len(), cfg.horizon);
        assert_eq!(rec.states.len(), cfg.horizon + 1);
        for u in &rec.controls {
            assert!((-10.0..=10.0).contains(&u[0]) && (-100.0..=100.0).contains(&u[1]));
        }
        let again = rollout(cfg.model(), &rec.x0, &rec.controls).unwrap();
        assert_eq!(again.to_states(), rec.states);

        // objective rebuilt from its definition with R = diag(10, 1)
        let rho = robustness(&p.formula, &again, 0).unwrap();
        let cost: f64 = rec.controls.iter().map(|u| 10.0 * u[0] * u[0] + u[1] * u[1]).sum();
        assert_eq!(rec.robustness, rho);
        assert!((rec.objective - (-rho + cfg.gamma * cost)).abs() <= 1e-9 * cost.max(1.0));
        assert_eq!(rec.satisfied, rho > 0.0);
    }
}

#[test]
fn solving_is_deterministic() {
    let cfg = ExperimentConfig::smoke();
    let p = vehicle_problem(&cfg, 8);
    let a = solve_instance(&p, 0, 21).unwrap();
    let b = solve_instance(&p, 0, 21).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.stage_best, b.stage_best);
}

#[test]
fn extra_restarts_never_hurt() {
    let cfg = ExperimentConfig::smoke();
    let mut p = vehicle_problem(&cfg, 3);
    p.solver.restarts = 1;
    let one = solve_instance(&p, 0, 5).unwrap().record.objective;
    p.solver.restarts = 3;
    let three = solve_instance(&p, 0, 5).unwrap();
    assert!(three.record.objective <= one);
    assert!(three.stage_best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn detours_around_an_obstacle() {
    // the straight path from (0, 0) to the goal box crosses the disk
    let model = SingleIntegrator::new(2, 1.0);
    let mut reg = PredicateRegistry::new();
    reg.insert("goal".into(), Predicate::planar_box([5.5, -0.5], [6.5, 0.5]));
    let psi = parse("F[0,10] goal", &reg).unwrap();
    let obs = [Obstacle { center: [3.0, 0.0], radius: 1.0 }];
    let straight = rollout(&model, &[0.0, 0.0], &vec![vec![0.6, 0.0]; 10]).unwrap();
    let phi = build_phi_xi(&psi, &obs, 10);
    assert!(robustness(&phi, &straight, 0).unwrap() < 0.0);

    let p = InstanceProblem {
        model: &model,
        x0: vec![0.0, 0.0],
        obstacles: obs.to_vec(),
        formula: phi,
        horizon: 10,
        gamma: 1e-3,
        r: diag(&[1.0, 1.0]),
        cost_norm: CostNorm::Quadratic,
        solver: SolverConfig {
            iterations: 200,
            restarts: 3,
            ..SolverConfig::default()
        },
    };
    let rec = solve_instance(&p, 0, 1).unwrap().record;
    assert!(rec.satisfied, "robustness {}", rec.robustness);
    for s in &rec.states {
        assert!(((s[0] - 3.0).powi(2) + s[1].powi(2)).sqrt() > 1.0);
    }
}

#[test]
fn invalid_problems_are_rejected() {
    let cfg = ExperimentConfig::smoke();
    let mut p = vehicle_problem(&cfg, 0);
    p.horizon = cfg.horizon - 1;
    assert!(solve_instance(&p, 0, 0).is_err());
    let mut p = vehicle_problem(&cfg, 0);
    p.gamma = -1.0;
    assert!(solve_instance(&p, 0, 0).is_err());
    let mut p = vehicle_problem(&cfg, 0);
    p.solver.restarts = 0;
    assert!(solve_instance(&p, 0, 0).is_err());
    let mut p = vehicle_problem(&cfg, 0);
    p.x0.pop();
    assert!(solve_instance(&p, 0, 0).is_err());
}
