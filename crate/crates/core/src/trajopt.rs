//! Open-loop trajectory optimization for a single instance.
//!
//! The raw (pre-saturation) controls are optimized with Adam against
//! `−ρ̃ + γ Σ g(x_k, u_k)`, where `ρ̃` is the smooth robustness. The
//! temperature follows an increasing schedule and the search is restarted
//! from several random initializations. Candidates are ranked by the
//! exact objective, so the smoothing only steers the search.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Optimizer, ParamMap, Tape, Tensor};
use crate::dynamics::{
    rollout, rollout_on_tape, saturate_on_tape, saturate_output, stage_cost, stage_cost_on_tape,
    weight_leaf, CostNorm, DynamicsError, SystemModel,
};
use crate::rng::rng_for;
use crate::stl::{robustness, smooth_robustness, Formula, Interval, Predicate, StlError, Trajectory};

#[derive(Debug, Error)]
pub enum TrajOptError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("all {restarts} restarts diverged")]
    Diverged { restarts: usize },
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrajOptError>;

/// Circular obstacle `ξ = (c₁, c₂, r)` in the position plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn xi(&self) -> [f64; 3] {
        [self.center[0], self.center[1], self.radius]
    }

    pub fn from_xi(xi: [f64; 3]) -> Self {
        Self {
            center: [xi[0], xi[1]],
            radius: xi[2],
        }
    }

    pub fn overlaps(&self, other: &Obstacle) -> bool {
        let d = ((self.center[0] - other.center[0]).powi(2)
            + (self.center[1] - other.center[1]).powi(2))
        .sqrt();
        d <= self.radius + other.radius
    }
}

/// An initial state together with its obstacle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x0: Vec<f64>,
    pub xi: Vec<[f64; 3]>,
}

impl Instance {
    pub fn obstacles(&self) -> Vec<Obstacle> {
        self.xi.iter().copied().map(Obstacle::from_xi).collect()
    }
}

/// Conjoins `psi` with `G[0,T] not obs_i` for every obstacle. Obstacle
/// atoms are named `obs1`, `obs2`, … in list order.
pub fn build_phi_xi(psi: &Formula, obstacles: &[Obstacle], horizon: usize) -> Formula {
    if obstacles.is_empty() {
        return psi.clone();
    }
    let interval = Interval::new(0, horizon).expect("0 <= horizon");
    let mut parts = vec![psi.clone()];
    for (i, o) in obstacles.iter().enumerate() {
        let atom = Formula::atom(format!("obs{}", i + 1), Predicate::planar_disk(o.center, o.radius));
        parts.push(Formula::always(interval, atom.negate()));
    }
    Formula::and(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub betas: Vec<f64>,
    pub iterations: usize,
    pub restarts: usize,
    pub lr: f64,
    /// Raw controls start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            betas: vec![2.0, 10.0, 50.0],
            iterations: 400,
            restarts: 5,
            lr: 0.05,
            init_range: 0.5,
        }
    }
}

pub struct InstanceProblem<'a> {
    pub model: &'a dyn SystemModel,
    pub x0: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    /// Full specification, usually from [`build_phi_xi`].
    pub formula: Formula,
    pub horizon: usize,
    pub gamma: f64,
    pub r: Vec<Vec<f64>>,
    pub cost_norm: CostNorm,
    pub solver: SolverConfig,
}

impl InstanceProblem<'_> {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrajOptError::InvalidProblem(m));
        if self.formula.horizon() > self.horizon {
            return bad(format!(
                "formula horizon {} exceeds T = {}",
                self.formula.horizon(),
                self.horizon
            ));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        let b = &self.solver.betas;
        if b.is_empty() || b[0] <= 0.0 || b.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("temperature schedule must be positive and increasing: {b:?}"));
        }
        if self.solver.restarts == 0 {
            return bad("at least one restart is required".into());
        }
        if self.x0.len() != self.model.n_x() {
            return bad(format!("x0 has dimension {}, model expects {}", self.x0.len(), self.model.n_x()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalTrajectoryRecord {
    pub n: usize,
    pub x0: Vec<f64>,
    pub xi: Vec<[f64; 3]>,
    pub controls: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    /// Exact robustness of the stored trajectory.
    pub robustness: f64,
    /// Exact objective `−ρ + γ Σ g`.
    pub objective: f64,
    pub seed: u64,
    pub satisfied: bool,
}

impl OptimalTrajectoryRecord {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory::from_states(&self.states).expect("records hold consistent states")
    }
}

/// Solver output: the record plus the best exact objective after every
/// (restart, stage) pair, in execution order.
#[derive(Debug, Clone)]
pub struct Solution {
    pub record: OptimalTrajectoryRecord,
    pub stage_best: Vec<f64>,
}

fn exact_objective(
    formula: &Formula,
    traj: &Trajectory,
    controls: &[Vec<f64>],
    gamma: f64,
    r: &[Vec<f64>],
    norm: CostNorm,
) -> Result<(f64, f64)> {
    let rho = robustness(formula, traj, 0)?;
    let mut cost = 0.0;
    for (k, u) in controls.iter().enumerate() {
        cost += stage_cost(traj.state(k), u, r, norm)?;
    }
    Ok((rho, -rho + gamma * cost))
}

/// Solves one instance. `n` is the dataset index stored in the record.
pub fn solve_instance(problem: &InstanceProblem<'_>, n: usize, seed: u64) -> Result<Solution> {
    problem.validate()?;
    let model = problem.model;
    let (t_len, n_u) = (problem.horizon, model.n_u());
    let (lo, hi) = (model.u_min().to_vec(), model.u_max().to_vec());
    let solver = &problem.solver;

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stage_best = Vec::new();
    let mut tape = Tape::new();
    let empty = tape.checkpoint();

    for restart in 0..solver.restarts {
        let mut rng = rng_for(seed, &[restart as u64]);
        let init: Vec<f64> = (0..t_len * n_u)
            .map(|_| rng.gen_range(-solver.init_range..=solver.init_range))
            .collect();
        let mut params = ParamMap::new();
        params.insert("u".into(), Tensor::vector(init));
        let mut diverged = false;

        for &beta in &solver.betas {
            let mut opt = Optimizer::adam(solver.lr);
            for _ in 0..solver.iterations {
                tape.truncate(empty);
                let raw = tape.input("u", params["u"].clone());
                let x0 = tape.constant_vector(&problem.x0);
                let rmat = weight_leaf(&mut tape, &problem.r)?;
                let mut us = Vec::with_capacity(t_len);
                let mut cost_terms = Vec::with_capacity(t_len);
                for k in 0..t_len {
                    let rk = tape.slice(raw, k * n_u, n_u)?;
                    let u = saturate_on_tape(&mut tape, rk, &lo, &hi)?;
                    cost_terms.push(stage_cost_on_tape(&mut tape, u, rmat, problem.cost_norm)?);
                    us.push(u);
                }
                let states = rollout_on_tape(model, &mut tape, x0, &us)?;
                let smooth = smooth_robustness(&mut tape, &problem.formula, &states, beta)?;

                // exact objective of the current iterate, read off the tape
                let mut data = Vec::with_capacity((t_len + 1) * model.n_x());
                for &s in &states {
                    data.extend_from_slice(tape.value(s));
                }
                let traj = Trajectory::new(model.n_x(), data)?;
                let controls: Vec<Vec<f64>> = us.iter().map(|&u| tape.value(u).to_vec()).collect();
                let (_, objective) =
                    exact_objective(&problem.formula, &traj, &controls, problem.gamma, &problem.r, problem.cost_norm)?;
                if !objective.is_finite() {
                    diverged = true;
                    break;
                }
                if best.as_ref().map_or(true, |(b, _)| objective < *b) {
                    best = Some((objective, params["u"].data().to_vec()));
                }

                let loss = if cost_terms.is_empty() {
                    tape.neg(smooth.node)
                } else {
                    let stacked = tape.concat(&cost_terms)?;
                    let total_cost = tape.sum(stacked);
                    let weighted = tape.scale(total_cost, problem.gamma);
                    tape.sub(weighted, smooth.node)?
                };
                if !tape.scalar(loss).is_finite() {
                    diverged = true;
                    break;
                }
                tape.backward(loss)?;
                let grads = tape.gradients();
                if opt.step(&mut params, &grads).is_err() {
                    diverged = true;
                    break;
                }
            }
            if let Some((b, _)) = &best {
                stage_best.push(*b);
            }
            if diverged {
                log::warn!("instance {n}: restart {restart} diverged at beta {beta}");
                break;
            }
        }
    }

    let (_, raw) = best.ok_or(TrajOptError::Diverged {
        restarts: solver.restarts,
    })?;
    let controls: Vec<Vec<f64>> = raw
        .chunks_exact(n_u.max(1))
        .take(t_len)
        .map(|r| saturate_output(r, &lo, &hi))
        .collect();
    let traj = rollout(model, &problem.x0, &controls)?;
    let (rho, objective) =
        exact_objective(&problem.formula, &traj, &controls, problem.gamma, &problem.r, problem.cost_norm)?;
    Ok(Solution {
        record: OptimalTrajectoryRecord {
            n,
            x0: problem.x0.clone(),
            xi: problem.obstacles.iter().map(Obstacle::xi).collect(),
            controls,
            states: traj.to_states(),
            robustness: rho,
            objective,
            seed,
            satisfied: rho > 0.0,
        },
        stage_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{diag, SingleIntegrator, Vehicle};
    use crate::stl::{parse, PredicateRegistry};

    fn interval_goal(lo: f64, hi: f64, t: usize) -> Formula {
        let mut r = PredicateRegistry::new();
        r.insert(
            "goal".into(),
            Predicate::Box {
                dims: vec![0],
                lo: vec![lo],
                hi: vec![hi],
            },
        );
        parse(&format!("F[0,{t}] goal"), &r).unwrap()
    }

    fn toy(model: &SingleIntegrator, x0: f64, formula: Formula) -> InstanceProblem<'_> {
        InstanceProblem {
            model,
            x0: vec![x0],
            obstacles: vec![],
            formula,
            horizon: 5,
            gamma: 1e-4,
            r: diag(&[1.0]),
            cost_norm: CostNorm::Quadratic,
            solver: SolverConfig {
                iterations: 150,
                restarts: 2,
                ..SolverConfig::default()
            },
        }
    }

    #[test]
    fn feasible_toy_is_solved() {
        let model = SingleIntegrator::new(1, 1.0);
        let formula = interval_goal(5.0, 6.0, 5);
        // constant control 0.7 reaches 5.5 at k = 5
        let oracle = rollout(&model, &[2.0], &vec![vec![0.7]; 5]).unwrap();
        assert!(robustness(&formula, &oracle, 0).unwrap() > 0.0);
        let sol = solve_instance(&toy(&model, 2.0, formula), 0, 11).unwrap();
        assert!(sol.record.satisfied && sol.record.robustness > 0.0);
        assert!(sol.stage_best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn infeasible_toy_is_flagged() {
        let model = SingleIntegrator::new(1, 1.0);
        let sol = solve_instance(&toy(&model, -5.0, interval_goal(5.0, 6.0, 5)), 0, 3).unwrap();
        assert!(sol.record.robustness < 0.0);
        assert!(!sol.record.satisfied);
    }

    #[test]
    fn record_is_dynamics_consistent() {
        let model = SingleIntegrator::new(1, 1.0);
        let sol = solve_instance(&toy(&model, 2.0, interval_goal(5.0, 6.0, 5)), 4, 5).unwrap();
        let rec = sol.record;
        let again = rollout(&model, &rec.x0, &rec.controls).unwrap();
        assert_eq!(again.to_states(), rec.states);
        assert_eq!(rec.n, 4);
        assert!(rec.controls.iter().flatten().all(|u| (-1.0..=1.0).contains(u)));
    }

    #[test]
    fn start_inside_goal() {
        let car = Vehicle::default();
        let mut reg = PredicateRegistry::new();
        reg.insert("goal".into(), Predicate::planar_box([6.0, 16.0], [10.0, 18.0]));
        let psi = parse("F[0,4] goal", &reg).unwrap();
        let x0 = vec![8.0, 17.0, 0.0, 0.0, 0.0];
        let zero = rollout(&car, &x0, &vec![vec![0.0, 0.0]; 4]).unwrap();
        assert!(robustness(&psi, &zero, 0).unwrap() > 0.0);
        let problem = InstanceProblem {
            model: &car,
            x0,
            obstacles: vec![],
            formula: psi,
            horizon: 4,
            gamma: 0.01,
            r: diag(&[10.0, 1.0]),
            cost_norm: CostNorm::Quadratic,
            solver: SolverConfig {
                iterations: 20,
                restarts: 1,
                ..SolverConfig::default()
            },
        };
        assert!(solve_instance(&problem, 0, 0).unwrap().record.satisfied);
    }

    #[test]
    fn phi_xi_structure() {
        let mut reg = PredicateRegistry::new();
        reg.insert("goal".into(), Predicate::planar_box([6.0, 16.0], [10.0, 18.0]));
        let psi = parse("F[0,25] goal", &reg).unwrap();
        assert_eq!(build_phi_xi(&psi, &[], 25), psi);
        let obs = [
            Obstacle { center: [5.0, 5.0], radius: 1.5 },
            Obstacle { center: [9.0, 9.0], radius: 2.0 },
        ];
        let phi = build_phi_xi(&psi, &obs, 25);
        match &phi {
            Formula::And(parts) => {
                assert_eq!(parts.len(), 3);
                assert_eq!(parts[0], psi);
                assert_eq!(parts[2].to_string(), "G[0,25] not obs2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn avoidance_clause_robustness_is_clearance() {
        // a straight line at height 5 passing below two disks
        let obs = [
            Obstacle { center: [2.0, 9.0], radius: 1.5 },
            Obstacle { center: [6.0, 10.0], radius: 2.0 },
        ];
        let phi = build_phi_xi(&Formula::True, &obs, 3);
        let states: Vec<Vec<f64>> = (0..4).map(|k| vec![2.0 * k as f64, 5.0]).collect();
        let traj = Trajectory::from_states(&states).unwrap();
        let mut oracle = f64::INFINITY;
        for s in &states {
            for o in &obs {
                let d = ((s[0] - o.center[0]).powi(2) + (s[1] - o.center[1]).powi(2)).sqrt();
                oracle = oracle.min(d - o.radius);
            }
        }
        assert_eq!(robustness(&phi, &traj, 0).unwrap(), oracle);
    }

    #[test]
    fn rejects_bad_schedule() {
        let model = SingleIntegrator::new(1, 1.0);
        let mut p = toy(&model, 0.0, interval_goal(5.0, 6.0, 5));
        p.solver.betas = vec![10.0, 2.0];
        assert!(matches!(solve_instance(&p, 0, 0), Err(TrajOptError::InvalidProblem(_))));
    }
}
