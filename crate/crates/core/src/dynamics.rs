//! Discrete-time system models, input saturation and stage costs.
//!
//! Every model has a numeric step and an equivalent step recorded on a tape.
//! The two are written with the same operation order so a rollout replayed
//! on a tape reproduces the numeric rollout bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::stl::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what}: expected dimension {expected}, got {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("control {component} at step {step} is {value}, outside [{lo}, {hi}]")]
    ControlOutOfBounds {
        step: usize,
        component: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// `x_{k+1} = f(x_k, u_k)` with box-bounded inputs.
pub trait SystemModel: Send + Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn u_min(&self) -> &[f64];
    fn u_max(&self) -> &[f64];
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn step_on_tape(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId>;
}

/// Unicycle-type vehicle with state `[p1, p2, θ, v, ω]` and input
/// `[F, τ]`, integrated with unit time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub mass: f64,
    pub inertia: f64,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl Default for Vehicle {
    fn default() -> Self {
        Self {
            mass: 10.0,
            inertia: 100.0,
            u_min: vec![-10.0, -100.0],
            u_max: vec![10.0, 100.0],
        }
    }
}

impl SystemModel for Vehicle {
    fn n_x(&self) -> usize {
        5
    }

    fn n_u(&self) -> usize {
        2
    }

    fn u_min(&self) -> &[f64] {
        &self.u_min
    }

    fn u_max(&self) -> &[f64] {
        &self.u_max
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (theta, v, omega) = (x[2], x[3], x[4]);
        vec![
            x[0] + v * theta.cos(),
            x[1] + v * theta.sin(),
            x[2] + omega,
            x[3] + (1.0 / self.mass) * u[0],
            x[4] + (1.0 / self.inertia) * u[1],
        ]
    }

    fn step_on_tape(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId> {
        let theta = tape.index(x, 2)?;
        let v = tape.index(x, 3)?;
        let omega = tape.index(x, 4)?;
        let c = tape.cos(theta);
        let s = tape.sin(theta);
        let dx = tape.mul(v, c)?;
        let dy = tape.mul(v, s)?;
        let dv = tape.index_affine(u, 0, 1.0 / self.mass, 0.0)?;
        let dw = tape.index_affine(u, 1, 1.0 / self.inertia, 0.0)?;
        let delta = tape.concat(&[dx, dy, omega, dv, dw])?;
        Ok(tape.add(x, delta)?)
    }
}

/// `x_{k+1} = x_k + u_k` in `n` dimensions with `|u_i| <= bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleIntegrator {
    n: usize,
    u_min: Vec<f64>,
    u_max: Vec<f64>,
}

impl SingleIntegrator {
    pub fn new(n: usize, bound: f64) -> Self {
        Self {
            n,
            u_min: vec![-bound; n],
            u_max: vec![bound; n],
        }
    }
}

impl SystemModel for SingleIntegrator {
    fn n_x(&self) -> usize {
        self.n
    }

    fn n_u(&self) -> usize {
        self.n
    }

    fn u_min(&self) -> &[f64] {
        &self.u_min
    }

    fn u_max(&self) -> &[f64] {
        &self.u_max
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter().zip(u).map(|(a, b)| a + b).collect()
    }

    fn step_on_tape(&self, tape: &mut Tape, x: NodeId, u: NodeId) -> Result<NodeId> {
        Ok(tape.add(x, u)?)
    }
}

/// `((hi − lo)/2)·tanh(raw) + (hi + lo)/2`, componentwise.
pub fn saturate_output(raw: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(lo.iter().zip(hi))
        .map(|(r, (l, h))| (((h - l) / 2.0) * r.tanh() + (h + l) / 2.0).clamp(*l, *h))
        .collect()
}

/// Tape version of [`saturate_output`].
pub fn saturate_on_tape(tape: &mut Tape, raw: NodeId, lo: &[f64], hi: &[f64]) -> Result<NodeId> {
    let half: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h - l) / 2.0).collect();
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h + l) / 2.0).collect();
    let t = tape.tanh(raw);
    let half = tape.constant_vector(&half);
    let mid = tape.constant_vector(&mid);
    let scaled = tape.mul(half, t)?;
    Ok(tape.add(scaled, mid)?)
}

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Simulates `controls` from `x0`; the result has `controls.len() + 1`
/// states. Controls must lie within the model bounds.
pub fn rollout(model: &dyn SystemModel, x0: &[f64], controls: &[Vec<f64>]) -> Result<Trajectory> {
    check_dim("initial state", model.n_x(), x0.len())?;
    let mut data = Vec::with_capacity(model.n_x() * (controls.len() + 1));
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for (step, u) in controls.iter().enumerate() {
        check_dim("control", model.n_u(), u.len())?;
        for (component, &value) in u.iter().enumerate() {
            let (lo, hi) = (model.u_min()[component], model.u_max()[component]);
            if !(value >= lo && value <= hi) {
                return Err(DynamicsError::ControlOutOfBounds {
                    step,
                    component,
                    value,
                    lo,
                    hi,
                });
            }
        }
        x = model.step(&x, u);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { step: step + 1 });
        }
        data.extend_from_slice(&x);
    }
    Ok(Trajectory::new(model.n_x(), data).expect("state dimension checked"))
}

/// Records a rollout on `tape`; returns the state nodes `x_0 … x_T`.
pub fn rollout_on_tape(
    model: &dyn SystemModel,
    tape: &mut Tape,
    x0: NodeId,
    controls: &[NodeId],
) -> Result<Vec<NodeId>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0);
    let mut x = x0;
    for &u in controls {
        x = model.step_on_tape(tape, x, u)?;
        states.push(x);
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostNorm {
    /// `uᵀ R u`.
    #[default]
    Quadratic,
    /// `√(uᵀ R u)`.
    Sqrt,
}

/// Stage cost `‖u‖_R`. The state argument is unused by the benchmark cost
/// but kept so other costs fit the same signature.
pub fn stage_cost(_x: &[f64], u: &[f64], r: &[Vec<f64>], norm: CostNorm) -> Result<f64> {
    check_dim("weight matrix rows", u.len(), r.len())?;
    let mut ru = Vec::with_capacity(u.len());
    for row in r {
        check_dim("weight matrix columns", u.len(), row.len())?;
        ru.push(row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>());
    }
    let q: f64 = u.iter().zip(&ru).map(|(a, b)| a * b).sum();
    Ok(match norm {
        CostNorm::Quadratic => q,
        CostNorm::Sqrt => q.sqrt(),
    })
}

/// Puts the weight matrix of [`stage_cost`] on a tape, once per graph.
pub fn weight_leaf(tape: &mut Tape, r: &[Vec<f64>]) -> Result<NodeId> {
    let n = r.len();
    for row in r {
        check_dim("weight matrix columns", n, row.len())?;
    }
    let flat: Vec<f64> = r.iter().flatten().copied().collect();
    Ok(tape.leaf(Tensor::matrix(n, n, flat)?))
}

/// Tape version of [`stage_cost`]; `r` comes from [`weight_leaf`].
pub fn stage_cost_on_tape(tape: &mut Tape, u: NodeId, r: NodeId, norm: CostNorm) -> Result<NodeId> {
    let ru = tape.matvec(r, u)?;
    let q = tape.dot(u, ru)?;
    Ok(match norm {
        CostNorm::Quadratic => q,
        CostNorm::Sqrt => tape.sqrt(q),
    })
}

/// `diag(values)` as nested rows.
pub fn diag(values: &[f64]) -> Vec<Vec<f64>> {
    (0..values.len())
        .map(|i| {
            let mut row = vec![0.0; values.len()];
            row[i] = values[i];
            row
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn vehicle_step_examples() {
        let car = Vehicle::default();
        assert_eq!(car.step(&[0.0, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]), vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        let y = car.step(&[0.0, 0.0, FRAC_PI_2, 2.0, 0.0], &[0.0, 0.0]);
        assert!(y[0].abs() < 1e-15);
        assert_eq!(&y[1..], &[2.0, FRAC_PI_2, 2.0, 0.0]);
        assert_eq!(car.step(&[0.0; 5], &[10.0, 100.0]), vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn saturation_examples() {
        assert_eq!(saturate_output(&[0.0], &[-1.0], &[1.0]), vec![0.0]);
        assert_eq!(saturate_output(&[0.0], &[2.0], &[4.0]), vec![3.0]);
        let big = saturate_output(&[15.0], &[-1.0], &[1.0])[0];
        assert!(big < 1.0 && big > 0.999_999);
        assert_eq!(saturate_output(&[f64::INFINITY], &[-1.0], &[1.0]), vec![1.0]);
    }

    #[test]
    fn rollout_examples() {
        let car = Vehicle::default();
        let x0 = [0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(rollout(&car, &x0, &[]).unwrap().len(), 1);
        let tr = rollout(&car, &x0, &[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let pos: Vec<_> = tr.states().map(|s| (s[0], s[1])).collect();
        assert_eq!(pos, vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let err = rollout(&car, &x0, &[vec![11.0, 0.0]]).unwrap_err();
        assert!(matches!(err, DynamicsError::ControlOutOfBounds { step: 0, component: 0, .. }));
    }

    #[test]
    fn tape_rollout_matches_numeric_bitwise() {
        let car = Vehicle::default();
        let x0 = vec![1.0, 2.0, 0.3, 0.7, -0.1];
        let us = vec![vec![3.0, -20.0], vec![-7.5, 55.0], vec![0.1, 0.2]];
        let tr = rollout(&car, &x0, &us).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(x0));
        let u: Vec<_> = us.iter().map(|u| tape.leaf(Tensor::vector(u.clone()))).collect();
        let states = rollout_on_tape(&car, &mut tape, x, &u).unwrap();
        for (k, s) in states.iter().enumerate() {
            assert_eq!(tape.value(*s), tr.state(k));
        }
    }

    #[test]
    fn stage_cost_examples() {
        let r = diag(&[10.0, 1.0]);
        let q = CostNorm::Quadratic;
        assert_eq!(stage_cost(&[], &[0.0, 0.0], &r, q).unwrap(), 0.0);
        assert_eq!(stage_cost(&[], &[1.0, 0.0], &r, q).unwrap(), 10.0);
        assert_eq!(stage_cost(&[], &[0.0, 2.0], &r, q).unwrap(), 4.0);
        assert_eq!(stage_cost(&[], &[0.0, 2.0], &r, CostNorm::Sqrt).unwrap(), 2.0);
        assert!(stage_cost(&[], &[1.0], &r, q).is_err());
    }
}
