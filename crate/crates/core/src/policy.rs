//! Recurrent control policies, their training by backpropagation through
//! time, and the classifier-switched ensemble.
//!
//! A policy reads the normalized current state (optionally followed by the
//! normalized, sorted obstacle parameters), updates a hidden state and
//! emits a saturated control. Rollouts are always recorded on a tape so
//! inference and training share one code path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{clip_global_norm, AutodiffError, NodeId, Optimizer, ParamMap, Tape, Tensor};
use crate::classifier::{ClassifierError, ClassifierWeights, Normalizer};
use crate::dynamics::{
    saturate_on_tape, stage_cost, stage_cost_on_tape, weight_leaf, CostNorm, DynamicsError, SystemModel,
};
use crate::rng::{derive_seed, rng_for};
use crate::stl::{robustness, smooth_robustness, Formula, StlError, Trajectory};
use crate::trajopt::{build_phi_xi, Instance};

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("no training data")]
    Empty,
    #[error("expected {expected} obstacles, got {found}")]
    ObstacleCount { expected: usize, found: usize },
    #[error("unsupported weights version {0}")]
    Version(u32),
    #[error("ensemble is inconsistent: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// `h = tanh(A h + B x + b)`.
    #[default]
    Rnn,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub cell: CellKind,
    /// Append the obstacle parameters to the policy input.
    pub include_xi: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Bound on the joint gradient norm of each mini-batch; 0 disables
    /// clipping.
    pub grad_clip: f64,
    /// Return the weights of the epoch with the lowest full-data loss.
    pub select_best: bool,
    /// Independent initializations, each trained for `warmup` epochs; the
    /// one with the lowest full-data loss continues.
    pub restarts: usize,
    pub warmup: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            cell: CellKind::Rnn,
            include_xi: false,
            epochs: 200,
            lr: 0.003,
            batch: 8,
            grad_clip: 5.0,
            select_best: true,
            restarts: 4,
            warmup: 10,
        }
    }
}

/// Everything a rollout needs besides the weights.
pub struct PolicyTask<'a> {
    pub model: &'a dyn SystemModel,
    /// Task formula without the obstacle clauses.
    pub psi: &'a Formula,
    pub horizon: usize,
    pub r: Vec<Vec<f64>>,
    pub cost_norm: CostNorm,
    /// Weight of the control cost in the training loss.
    pub gamma: f64,
    /// Smoothing temperature of the training robustness.
    pub beta: f64,
}

impl PolicyTask<'_> {
    pub fn formula_for(&self, inst: &Instance) -> Formula {
        build_phi_xi(self.psi, &inst.obstacles(), self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    pub version: u32,
    pub cell: CellKind,
    pub hidden: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub include_xi: bool,
    pub n_obs: usize,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub normalizer: Normalizer,
    pub params: ParamMap,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, seed: u64, path: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[path]);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect()
}

impl PolicyWeights {
    pub fn init(
        model: &dyn SystemModel,
        n_obs: usize,
        cfg: &PolicyConfig,
        normalizer: Normalizer,
        seed: u64,
    ) -> Self {
        let (n_x, n_u, h) = (model.n_x(), model.n_u(), cfg.hidden);
        let n_in = n_x + if cfg.include_xi { 3 * n_obs } else { 0 };
        let mut params = ParamMap::new();
        let mut put = |key: &str, rows: usize, cols: usize, fan_in: usize, path: u64| {
            let data = uniform(rows, cols, fan_in, seed, path);
            let t = if cols == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(rows, cols, data).expect("sized")
            };
            params.insert(key.to_string(), t);
        };
        match cfg.cell {
            CellKind::Rnn => {
                put("A", h, h, h, 0);
                put("B", h, n_in, n_in, 1);
                put("b", h, 1, h + n_in, 2);
            }
            CellKind::Lstm => {
                put("W", 4 * h, h + n_in, h + n_in, 0);
                put("b", 4 * h, 1, h + n_in, 2);
            }
        }
        put("C", n_u, h, h, 3);
        put("d", n_u, 1, h, 4);
        Self {
            version: WEIGHTS_VERSION,
            cell: cfg.cell,
            hidden: h,
            n_x,
            n_u,
            include_xi: cfg.include_xi,
            n_obs,
            u_min: model.u_min().to_vec(),
            u_max: model.u_max().to_vec(),
            normalizer,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != WEIGHTS_VERSION {
            return Err(PolicyError::Version(self.version));
        }
        let keys: &[&str] = match self.cell {
            CellKind::Rnn => &["A", "B", "b", "C", "d"],
            CellKind::Lstm => &["W", "b", "C", "d"],
        };
        for k in keys {
            let t = self
                .params
                .get(*k)
                .ok_or_else(|| PolicyError::Corrupt(format!("missing parameter {k}")))?;
            t.validate()?;
        }
        if self.params["C"].shape() != [self.n_u, self.hidden] {
            return Err(PolicyError::Corrupt("readout shape does not match n_u × hidden".into()));
        }
        if self.u_min.len() != self.n_u || self.u_max.len() != self.n_u {
            return Err(PolicyError::Corrupt("control bounds do not match n_u".into()));
        }
        Ok(())
    }

    fn input_scaling(&self) -> (Vec<f64>, Vec<f64>) {
        let n = &self.normalizer;
        let mut lo = n.state_lo.clone();
        let mut hi = n.state_hi.clone();
        if self.include_xi {
            for _ in 0..self.n_obs {
                lo.extend_from_slice(&n.xi_lo);
                hi.extend_from_slice(&n.xi_hi);
            }
        }
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                if h > l {
                    (2.0 / (h - l), -1.0 - 2.0 * l / (h - l))
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip()
    }
}

/// Rollout nodes recorded by [`unroll`].
pub struct Unrolled {
    pub states: Vec<NodeId>,
    pub controls: Vec<NodeId>,
}

struct Loaded {
    params: BTreeMap<String, NodeId>,
    scale: NodeId,
    shift: NodeId,
}

fn load(tape: &mut Tape, w: &PolicyWeights) -> Loaded {
    let params = w
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.input(k.clone(), v.clone())))
        .collect();
    let (scale, shift) = w.input_scaling();
    Loaded {
        params,
        scale: tape.constant_vector(&scale),
        shift: tape.constant_vector(&shift),
    }
}

fn sorted_xi(xi: &[[f64; 3]]) -> Vec<f64> {
    let mut s = xi.to_vec();
    s.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    s.into_iter().flatten().collect()
}

fn unroll_loaded(
    tape: &mut Tape,
    w: &PolicyWeights,
    l: &Loaded,
    model: &dyn SystemModel,
    inst: &Instance,
    horizon: usize,
) -> Result<Unrolled> {
    if horizon == 0 {
        return Err(PolicyError::EmptyHorizon);
    }
    if w.include_xi && inst.xi.len() != w.n_obs {
        return Err(PolicyError::ObstacleCount {
            expected: w.n_obs,
            found: inst.xi.len(),
        });
    }
    let p = |k: &str| l.params[k];
    let xi = w.include_xi.then(|| tape.constant_vector(&sorted_xi(&inst.xi)));
    let mut x = tape.constant_vector(&inst.x0);
    let mut h: Option<NodeId> = None;
    let mut c: Option<NodeId> = None;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let raw_in = match xi {
            Some(xi) => tape.concat(&[x, xi])?,
            None => x,
        };
        let scaled = tape.mul(raw_in, l.scale)?;
        let input = tape.add(scaled, l.shift)?;
        let hk = match w.cell {
            CellKind::Rnn => {
                let bx = tape.matvec(p("B"), input)?;
                let mut z = tape.add(bx, p("b"))?;
                if let Some(h) = h {
                    let ah = tape.matvec(p("A"), h)?;
                    z = tape.add(ah, z)?;
                }
                tape.tanh(z)
            }
            CellKind::Lstm => {
                let hs = w.hidden;
                let prev = match h {
                    Some(h) => h,
                    None => tape.constant_vector(&vec![0.0; hs]),
                };
                let joint = tape.concat(&[prev, input])?;
                let wz = tape.matvec(p("W"), joint)?;
                let z = tape.add(wz, p("b"))?;
                let zi = tape.slice(z, 0, hs)?;
                let zf = tape.slice(z, hs, hs)?;
                let zg = tape.slice(z, 2 * hs, hs)?;
                let zo = tape.slice(z, 3 * hs, hs)?;
                let (i, f, g, o) = (tape.sigmoid(zi), tape.sigmoid(zf), tape.tanh(zg), tape.sigmoid(zo));
                let ig = tape.mul(i, g)?;
                let cell = match c {
                    Some(c) => {
                        let fc = tape.mul(f, c)?;
                        tape.add(fc, ig)?
                    }
                    None => ig,
                };
                c = Some(cell);
                let tc = tape.tanh(cell);
                tape.mul(o, tc)?
            }
        };
        h = Some(hk);
        let ch = tape.matvec(p("C"), hk)?;
        let raw = tape.add(ch, p("d"))?;
        let u = saturate_on_tape(tape, raw, &w.u_min, &w.u_max)?;
        x = model.step_on_tape(tape, x, u)?;
        if tape.value(x).iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite { step: step + 1 });
        }
        controls.push(u);
        states.push(x);
    }
    Ok(Unrolled { states, controls })
}

/// Records a closed-loop rollout of `weights` on `tape`.
pub fn unroll(
    tape: &mut Tape,
    weights: &PolicyWeights,
    model: &dyn SystemModel,
    inst: &Instance,
    horizon: usize,
) -> Result<Unrolled> {
    let l = load(tape, weights);
    unroll_loaded(tape, weights, &l, model, inst, horizon)
}

/// Closed-loop rollout from `h_{-1} = 0`. Returns `T + 1` states and `T`
/// controls.
pub fn policy_rollout(
    weights: &PolicyWeights,
    model: &dyn SystemModel,
    inst: &Instance,
    horizon: usize,
) -> Result<(Trajectory, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let u = unroll(&mut tape, weights, model, inst, horizon)?;
    let mut data = Vec::with_capacity(u.states.len() * model.n_x());
    for &s in &u.states {
        data.extend_from_slice(tape.value(s));
    }
    let controls = u.controls.iter().map(|&c| tape.value(c).to_vec()).collect();
    Ok((Trajectory::new(model.n_x(), data)?, controls))
}

/// Mean losses over a batch, recorded during training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    /// `−robustness_smooth + γ·control`, read off the tape.
    pub total: f64,
    pub robustness_smooth: f64,
    pub control: f64,
    pub robustness_exact: f64,
    pub satisfaction: f64,
}

struct Forward {
    tape: Tape,
    total: NodeId,
    stats: BatchStats,
}

fn batch_forward(weights: &PolicyWeights, task: &PolicyTask<'_>, batch: &[&Instance]) -> Result<Forward> {
    let (gamma, beta) = (task.gamma, task.beta);
    let mut tape = Tape::new();
    let l = load(&mut tape, weights);
    let rmat = weight_leaf(&mut tape, &task.r)?;
    let mut rob_nodes = Vec::with_capacity(batch.len());
    let mut ctrl_nodes = Vec::with_capacity(batch.len());
    let (mut exact_sum, mut sat) = (0.0, 0usize);
    for inst in batch {
        let un = unroll_loaded(&mut tape, weights, &l, task.model, inst, task.horizon)?;
        let phi = task.formula_for(inst);
        rob_nodes.push(smooth_robustness(&mut tape, &phi, &un.states, beta)?.node);
        let costs = un
            .controls
            .iter()
            .map(|&u| stage_cost_on_tape(&mut tape, u, rmat, task.cost_norm))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stacked = tape.concat(&costs)?;
        ctrl_nodes.push(tape.sum(stacked));

        let mut data = Vec::with_capacity(un.states.len() * task.model.n_x());
        for &s in &un.states {
            data.extend_from_slice(tape.value(s));
        }
        let rho = robustness(&phi, &Trajectory::new(task.model.n_x(), data)?, 0)?;
        exact_sum += rho;
        sat += (rho > 0.0) as usize;
    }
    let inv = 1.0 / batch.len() as f64;
    let rob_all = tape.concat(&rob_nodes)?;
    let rob_sum = tape.sum(rob_all);
    let rob_mean = tape.scale(rob_sum, inv);
    let ctrl_all = tape.concat(&ctrl_nodes)?;
    let ctrl_sum = tape.sum(ctrl_all);
    let ctrl_mean = tape.scale(ctrl_sum, inv);
    let weighted = tape.scale(ctrl_mean, gamma);
    let total = tape.sub(weighted, rob_mean)?;
    let stats = BatchStats {
        total: tape.scalar(total),
        robustness_smooth: tape.scalar(rob_mean),
        control: tape.scalar(ctrl_mean),
        robustness_exact: exact_sum * inv,
        satisfaction: sat as f64 * inv,
    };
    Ok(Forward { tape, total, stats })
}

/// Loss of one mini-batch and its gradient with respect to every weight.
pub fn batch_loss_and_grad(
    weights: &PolicyWeights,
    task: &PolicyTask<'_>,
    batch: &[&Instance],
) -> Result<(BatchStats, ParamMap)> {
    let Forward { mut tape, total, stats } = batch_forward(weights, task, batch)?;
    tape.backward(total)?;
    Ok((stats, tape.gradients()))
}

impl BatchStats {
    fn accumulate(&mut self, other: &BatchStats, w: f64) {
        self.total += w * other.total;
        self.robustness_smooth += w * other.robustness_smooth;
        self.control += w * other.control;
        self.robustness_exact += w * other.robustness_exact;
        self.satisfaction += w * other.satisfaction;
    }
}

/// Mean losses of fixed weights over all of `data`, without gradients.
/// Chunks run in parallel and are combined in input order.
pub fn evaluate_loss(weights: &PolicyWeights, task: &PolicyTask<'_>, data: &[Instance]) -> Result<BatchStats> {
    if data.is_empty() {
        return Err(PolicyError::Empty);
    }
    let refs: Vec<&Instance> = data.iter().collect();
    let parts = refs
        .par_chunks(EVAL_CHUNK)
        .map(|c| batch_forward(weights, task, c).map(|f| (c.len(), f.stats)))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = BatchStats::default();
    for (n, s) in &parts {
        acc.accumulate(s, *n as f64 / data.len() as f64);
    }
    Ok(acc)
}

const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpoch {
    pub epoch: usize,
    pub stats: BatchStats,
    /// Full-data loss after the epoch, when best-epoch selection is on.
    pub eval: Option<BatchStats>,
}

/// Trains one policy on the instances of a cluster. The trace holds the
/// sample-weighted means of the batch statistics of every epoch. With
/// `select_best` the returned weights are those of the epoch whose
/// full-data loss was lowest, rather than the last.
pub fn train_policy(
    data: &[Instance],
    task: &PolicyTask<'_>,
    cfg: &PolicyConfig,
    normalizer: Normalizer,
    seed: u64,
) -> Result<(PolicyWeights, Vec<PolicyEpoch>)> {
    let first = data.first().ok_or(PolicyError::Empty)?;
    let start = |s: u64| Run {
        weights: PolicyWeights::init(task.model, first.xi.len(), cfg, normalizer.clone(), s),
        opt: Optimizer::adam(cfg.lr),
        seed: s,
        trace: Vec::with_capacity(cfg.epochs),
        best: None,
    };
    let mut run;
    if cfg.restarts > 1 {
        let warmup = cfg.warmup.min(cfg.epochs);
        let mut chosen: Option<(f64, Run)> = None;
        for r in 0..cfg.restarts {
            let mut cand = start(if r == 0 { seed } else { derive_seed(seed, &[2, r as u64]) });
            cand.epochs(data, task, cfg, 0..warmup)?;
            let loss = evaluate_loss(&cand.weights, task, data)?.total;
            log::debug!("policy restart {r}: loss {loss:.4} after {warmup} epochs");
            if chosen.as_ref().map_or(true, |(b, _)| loss < *b) {
                chosen = Some((loss, cand));
            }
        }
        run = chosen.map(|(_, c)| c).ok_or(PolicyError::Empty)?;
        run.epochs(data, task, cfg, warmup..cfg.epochs)?;
    } else {
        run = start(seed);
        run.epochs(data, task, cfg, 0..cfg.epochs)?;
    }
    let Run { mut weights, trace, best, .. } = run;
    if let Some((loss, epoch, w)) = best {
        log::debug!("policy keeps epoch {epoch} (loss {loss:.4})");
        weights = w;
    }
    Ok((weights, trace))
}

struct Run {
    weights: PolicyWeights,
    opt: Optimizer,
    seed: u64,
    trace: Vec<PolicyEpoch>,
    best: Option<(f64, usize, PolicyWeights)>,
}

impl Run {
    fn epochs(
        &mut self,
        data: &[Instance],
        task: &PolicyTask<'_>,
        cfg: &PolicyConfig,
        range: std::ops::Range<usize>,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in range {
            order.sort_unstable();
            order.shuffle(&mut rng_for(self.seed, &[1, epoch as u64]));
            let mut acc = BatchStats::default();
            for (bi, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
                let batch: Vec<&Instance> = chunk.iter().map(|&i| &data[i]).collect();
                let (stats, mut grads) = batch_loss_and_grad(&self.weights, task, &batch)?;
                if !stats.total.is_finite() {
                    return Err(PolicyError::NonFiniteLoss { epoch, batch: bi });
                }
                acc.accumulate(&stats, batch.len() as f64 / data.len() as f64);
                if cfg.grad_clip > 0.0 {
                    clip_global_norm(&mut grads, cfg.grad_clip);
                }
                self.opt.step(&mut self.weights.params, &grads)?;
            }
            log::debug!("policy epoch {epoch}: total {:.4}", acc.total);
            let eval = if cfg.select_best {
                let e = evaluate_loss(&self.weights, task, data)?;
                if self.best.as_ref().map_or(true, |(b, _, _)| e.total < *b) {
                    self.best = Some((e.total, epoch, self.weights.clone()));
                }
                Some(e)
            } else {
                None
            };
            self.trace.push(PolicyEpoch { epoch, stats: acc, eval });
        }
        Ok(())
    }
}

/// Instances grouped by predicted label, with their original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub groups: Vec<Vec<Instance>>,
    pub indices: Vec<Vec<usize>>,
}

impl ClusterDataset {
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Splits `pairs` by the label the classifier predicts, keeping input
/// order within each group.
pub fn partition_dataset(pairs: &[Instance], classifier: &ClassifierWeights) -> Result<ClusterDataset> {
    let n_c = classifier.n_c;
    let mut groups = vec![Vec::new(); n_c];
    let mut indices = vec![Vec::new(); n_c];
    for (i, p) in pairs.iter().enumerate() {
        let label = classifier.classify(&p.x0, &p.xi)?;
        groups[label].push(p.clone());
        indices[label].push(i);
    }
    Ok(ClusterDataset { groups, indices })
}

/// Classifier plus one policy per label. Labels whose cluster was empty
/// during training have no policy and fall back to `fallback`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEnsemble {
    pub classifier: ClassifierWeights,
    pub policies: Vec<Option<PolicyWeights>>,
    pub fallback: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub n_c: usize,
    pub present: Vec<bool>,
    pub sizes: Vec<usize>,
    pub fallback: usize,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

impl PolicyEnsemble {
    /// `sizes[ℓ]` is the training-set size of label `ℓ`; the largest
    /// trained cluster (lowest label on ties) becomes the fallback.
    pub fn new(classifier: ClassifierWeights, policies: Vec<Option<PolicyWeights>>, sizes: &[usize]) -> Result<Self> {
        if policies.len() != classifier.n_c || sizes.len() != classifier.n_c {
            return Err(PolicyError::Corrupt(format!(
                "{} policies and {} sizes for {} labels",
                policies.len(),
                sizes.len(),
                classifier.n_c
            )));
        }
        let fallback = (0..policies.len())
            .filter(|&l| policies[l].is_some())
            .fold(None, |best: Option<usize>, l| match best {
                Some(b) if sizes[b] >= sizes[l] => Some(b),
                _ => Some(l),
            })
            .ok_or_else(|| PolicyError::Corrupt("no trained policy".into()))?;
        Ok(Self {
            classifier,
            policies,
            fallback,
        })
    }

    /// Predicted label and the policy that serves it.
    pub fn dispatch(&self, x0: &[f64], xi: &[[f64; 3]]) -> Result<(usize, &PolicyWeights)> {
        let label = self.classifier.classify(x0, xi)?;
        assert!(label < self.policies.len(), "classifier label outside the ensemble");
        match &self.policies[label] {
            Some(p) => Ok((label, p)),
            None => {
                log::warn!("label {label} has no policy, using label {}", self.fallback);
                Ok((label, self.policies[self.fallback].as_ref().expect("fallback is trained")))
            }
        }
    }

    pub fn save(&self, dir: &Path, manifest: &EnsembleManifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| PolicyError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_json(&dir.join("classifier.json"), &self.classifier)?;
        for (l, p) in self.policies.iter().enumerate() {
            if let Some(p) = p {
                write_json(&dir.join(format!("policy_{l}.json")), p)?;
            }
        }
        write_json(&dir.join("manifest.json"), manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, EnsembleManifest)> {
        let manifest: EnsembleManifest = read_json(&dir.join("manifest.json"))?;
        let classifier: ClassifierWeights = read_json(&dir.join("classifier.json"))?;
        classifier.validate()?;
        if classifier.n_c != manifest.n_c || manifest.present.len() != manifest.n_c {
            return Err(PolicyError::Corrupt("manifest does not match the classifier".into()));
        }
        let mut policies = Vec::with_capacity(manifest.n_c);
        for (l, &present) in manifest.present.iter().enumerate() {
            policies.push(if present {
                let p: PolicyWeights = read_json(&dir.join(format!("policy_{l}.json")))?;
                p.validate()?;
                Some(p)
            } else {
                None
            });
        }
        let ens = Self::new(classifier, policies, &manifest.sizes)?;
        Ok((ens, manifest))
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PolicyError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PolicyError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Exact control cost `Σ_k g(x_k, u_k)` of a rollout.
pub fn control_cost(traj: &Trajectory, controls: &[Vec<f64>], r: &[Vec<f64>], norm: CostNorm) -> Result<f64> {
    let mut total = 0.0;
    for (k, u) in controls.iter().enumerate() {
        total += stage_cost(traj.state(k), u, r, norm)?;
    }
    Ok(total)
}
