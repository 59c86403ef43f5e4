//! Test-set metrics comparing two controllers.

use serde::{Deserialize, Serialize};

use crate::dynamics::CostNorm;
use crate::stl::Trajectory;

/// Fraction of strictly positive robustness values.
pub fn accuracy(rho: &[f64]) -> f64 {
    if rho.is_empty() {
        return 0.0;
    }
    rho.iter().filter(|&&r| r > 0.0).count() as f64 / rho.len() as f64
}

/// Indices where both controllers satisfy the task.
pub fn joint_success_set(a: &[f64], b: &[f64]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "robustness vectors differ in length");
    (0..a.len()).filter(|&i| a[i] > 0.0 && b[i] > 0.0).collect()
}

/// `Σ_{k=0}^{T-1} ‖x_{k+1} − x_goal‖_Q` with `Q` selecting the two position
/// components.
pub fn distance_cost(traj: &Trajectory, goal: &[f64], norm: CostNorm) -> f64 {
    traj.states()
        .skip(1)
        .map(|x| {
            let q = (x[0] - goal[0]).powi(2) + (x[1] - goal[1]).powi(2);
            match norm {
                CostNorm::Quadratic => q,
                CostNorm::Sqrt => q.sqrt(),
            }
        })
        .sum()
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Outcome of one test case under one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub robustness: f64,
    pub control: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerMetrics {
    pub accuracy: f64,
    pub mean_robustness: f64,
    /// Over the joint success set; `None` when that set is empty.
    pub mean_control: Option<f64>,
    pub mean_total: Option<f64>,
    pub mean_distance_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_test: usize,
    pub gamma: f64,
    pub joint_success: usize,
    pub clustered: ControllerMetrics,
    pub single: ControllerMetrics,
}

fn controller(cases: &[CaseResult], joint: &[usize], gamma: f64) -> ControllerMetrics {
    let rho: Vec<f64> = cases.iter().map(|c| c.robustness).collect();
    let mean_robustness = mean(rho.iter().copied()).unwrap_or(0.0);
    let mean_control = mean(joint.iter().map(|&i| cases[i].control));
    ControllerMetrics {
        accuracy: accuracy(&rho),
        mean_robustness,
        mean_control,
        mean_total: mean_control.map(|c| -mean_robustness + gamma * c),
        mean_distance_cost: mean(cases.iter().map(|c| c.distance)).unwrap_or(0.0),
    }
}

pub fn report(clustered: &[CaseResult], single: &[CaseResult], gamma: f64) -> MetricsReport {
    let rc: Vec<f64> = clustered.iter().map(|c| c.robustness).collect();
    let rs: Vec<f64> = single.iter().map(|c| c.robustness).collect();
    let joint = joint_success_set(&rc, &rs);
    MetricsReport {
        n_test: clustered.len(),
        gamma,
        joint_success: joint.len(),
        clustered: controller(clustered, &joint, gamma),
        single: controller(single, &joint, gamma),
    }
}
