//! Experiment configuration, read from TOML. Every section and field is
//! optional; missing values take the benchmark defaults.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentError, Result};
use crate::classifier::{ClassifierConfig, Normalizer};
use crate::clustering::SimilarityNorm;
use crate::dynamics::{CostNorm, SystemModel, Vehicle};
use crate::policy::PolicyConfig;
use crate::stl::{parse, Formula, Predicate, PredicateRegistry};
use crate::trajopt::SolverConfig;

/// Axis-aligned box in the position plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Region {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo, hi }
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.lo[0] + self.hi[0]) / 2.0, (self.lo[1] + self.hi[1]) / 2.0]
    }

    /// Whether a closed disk touches the box.
    pub fn meets_disk(&self, center: [f64; 2], radius: f64) -> bool {
        let dx = center[0].clamp(self.lo[0], self.hi[0]) - center[0];
        let dy = center[1].clamp(self.lo[1], self.hi[1]) - center[1];
        (dx * dx + dy * dy).sqrt() <= radius
    }

    fn predicate(&self) -> Predicate {
        Predicate::planar_box(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regions {
    pub goal: Region,
    pub transit: Vec<Region>,
}

impl Default for Regions {
    fn default() -> Self {
        Self {
            goal: Region::new([6.0, 16.0], [10.0, 18.0]),
            transit: vec![Region::new([1.0, 8.0], [4.0, 11.0]), Region::new([12.0, 8.0], [15.0, 11.0])],
        }
    }
}

/// Uniform ranges of the initial state; `ω` always starts at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSampling {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub theta: [f64; 2],
    pub v: [f64; 2],
}

impl Default for InitSampling {
    fn default() -> Self {
        Self {
            p1: [2.0, 12.0],
            p2: [1.0, 2.0],
            theta: [-PI, PI],
            v: [0.5, 1.0],
        }
    }
}

impl InitSampling {
    pub fn region(&self) -> Region {
        Region::new([self.p1[0], self.p2[0]], [self.p1[1], self.p2[1]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleSampling {
    pub count: usize,
    pub c1: [f64; 2],
    pub c2: [f64; 2],
    pub radius: [f64; 2],
    /// Draw budget per instance before sampling gives up.
    pub max_draws: usize,
    /// Also reject obstacles touching the initial-position box.
    pub avoid_init_region: bool,
}

impl Default for ObstacleSampling {
    fn default() -> Self {
        Self {
            count: 2,
            c1: [2.0, 14.0],
            c2: [3.0, 14.0],
            radius: [1.5, 2.0],
            max_draws: 10_000,
            avoid_init_region: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Weight matrix of the trajectory distance; defaults to the position
    /// selector.
    pub weight: Vec<Vec<f64>>,
    pub norm: SimilarityNorm,
    /// Keep only the distances to this many random anchor trajectories.
    pub anchors: Option<usize>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 16,
            weight: crate::dynamics::diag(&[1.0, 1.0, 0.0, 0.0, 0.0]),
            norm: SimilarityNorm::Sqrt,
            anchors: None,
        }
    }
}

/// Bounds used to scale network inputs to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workspace {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub v: [f64; 2],
    pub omega: [f64; 2],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            p1: [0.0, 16.0],
            p2: [0.0, 18.0],
            v: [0.0, 2.0],
            omega: [-1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub horizon: usize,
    /// Task formula over the atoms `goal`, `tr1`, `tr2`, …; `{T}` is
    /// replaced by the horizon.
    pub task: String,
    pub vehicle: Vehicle,
    pub r: Vec<Vec<f64>>,
    pub cost_norm: CostNorm,
    /// Norm reading of the distance-to-goal metric.
    pub distance_norm: CostNorm,
    pub gamma: f64,
    pub beta: f64,
    pub init: InitSampling,
    pub obstacles: ObstacleSampling,
    pub regions: Regions,
    pub workspace: Workspace,
    /// Instances solved by trajectory optimization for clustering.
    pub n_cluster: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub solver: SolverConfig,
    pub clustering: ClusteringConfig,
    pub classifier: ClassifierConfig,
    pub policy: PolicyConfig,
    /// Epochs of the single-policy baseline; defaults to `policy.epochs`,
    /// which gives it the same number of per-sample updates as the
    /// ensemble.
    pub single_epochs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: 25,
            task: "(F[0,{T}] tr1 or F[0,{T}] tr2) and F[0,{T}] goal".into(),
            vehicle: Vehicle::default(),
            r: crate::dynamics::diag(&[10.0, 1.0]),
            cost_norm: CostNorm::Quadratic,
            distance_norm: CostNorm::Sqrt,
            gamma: 1e-4,
            beta: 10.0,
            init: InitSampling::default(),
            obstacles: ObstacleSampling::default(),
            regions: Regions::default(),
            workspace: Workspace::default(),
            n_cluster: 600,
            n_train: 2000,
            n_test: 200,
            solver: SolverConfig::default(),
            clustering: ClusteringConfig::default(),
            classifier: ClassifierConfig::default(),
            policy: PolicyConfig::default(),
            single_epochs: None,
        }
    }
}

impl ExperimentConfig {
    /// Small configuration that runs the whole pipeline in seconds.
    pub fn smoke() -> Self {
        let mut c = Self {
            horizon: 10,
            n_cluster: 24,
            n_train: 24,
            n_test: 12,
            ..Self::default()
        };
        c.solver.iterations = 150;
        c.solver.restarts = 2;
        c.clustering.k_max = 4;
        c.classifier.epochs = 2;
        c.policy.epochs = 2;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        let psi = self.psi()?;
        if psi.horizon() > self.horizon {
            return bad(format!("task horizon {} exceeds T = {}", psi.horizon(), self.horizon));
        }
        let ranges = [
            ("init.p1", self.init.p1),
            ("init.p2", self.init.p2),
            ("init.theta", self.init.theta),
            ("init.v", self.init.v),
            ("obstacles.c1", self.obstacles.c1),
            ("obstacles.c2", self.obstacles.c2),
            ("obstacles.radius", self.obstacles.radius),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return bad(format!("{name} is empty: [{lo}, {hi}]"));
            }
        }
        if self.vehicle.u_min.len() != 2 || self.vehicle.u_max.len() != 2 {
            return bad("vehicle bounds must have two components".into());
        }
        if self.vehicle.u_min.iter().zip(&self.vehicle.u_max).any(|(l, h)| !(l < h)) {
            return bad("vehicle bounds must satisfy u_min < u_max".into());
        }
        if self.r.len() != 2 || self.r.iter().any(|row| row.len() != 2) {
            return bad("r must be 2×2".into());
        }
        if self.clustering.weight.len() != 5 || self.clustering.weight.iter().any(|row| row.len() != 5) {
            return bad("clustering.weight must be 5×5".into());
        }
        if !(self.gamma >= 0.0) || !(self.beta > 0.0) {
            return bad("gamma must be nonnegative and beta positive".into());
        }
        if !(self.policy.grad_clip >= 0.0) {
            return bad("policy.grad_clip must be nonnegative".into());
        }
        if self.n_cluster == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("dataset sizes must be positive".into());
        }
        Ok(())
    }

    pub fn registry(&self) -> PredicateRegistry {
        let mut r = PredicateRegistry::new();
        r.insert("goal".into(), self.regions.goal.predicate());
        for (i, t) in self.regions.transit.iter().enumerate() {
            r.insert(format!("tr{}", i + 1), t.predicate());
        }
        r
    }

    /// The task formula without obstacle clauses.
    pub fn psi(&self) -> Result<Formula> {
        let text = self.task.replace("{T}", &self.horizon.to_string());
        parse(&text, &self.registry()).map_err(|e| ExperimentError::Config(format!("task formula: {e}")))
    }

    pub fn normalizer(&self) -> Normalizer {
        let w = &self.workspace;
        let o = &self.obstacles;
        Normalizer {
            state_lo: vec![w.p1[0], w.p2[0], self.init.theta[0], w.v[0], w.omega[0]],
            state_hi: vec![w.p1[1], w.p2[1], self.init.theta[1], w.v[1], w.omega[1]],
            xi_lo: vec![o.c1[0], o.c2[0], o.radius[0]],
            xi_hi: vec![o.c1[1], o.c2[1], o.radius[1]],
        }
    }

    pub fn model(&self) -> &dyn SystemModel {
        &self.vehicle
    }

    /// `x_goal`: goal center with the other components zero.
    pub fn x_goal(&self) -> Vec<f64> {
        let c = self.regions.goal.center();
        vec![c[0], c[1], 0.0, 0.0, 0.0]
    }

    pub fn single_epochs(&self) -> usize {
        self.single_epochs.unwrap_or(self.policy.epochs)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

pub(crate) fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}
