//! Staged pipeline. Each stage reads its inputs from and writes its
//! outputs to the output directory, so stages can run one at a time from
//! the command line. `run_all` skips a stage when its input hash matches
//! the cached one and its outputs still exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{hash_json, ExperimentConfig};
use super::metrics::{distance_cost, report, CaseResult, MetricsReport};
use super::sampling::sample_instance;
use super::{ExperimentError, Result};
use crate::classifier::{train_classifier, ClassifierWeights, LabeledInstance};
use crate::clustering::{anchored_features, feature_vectors, similarity_matrix, xmeans};
use crate::policy::{
    control_cost, partition_dataset, policy_rollout, train_policy, EnsembleManifest, PolicyConfig,
    PolicyEnsemble, PolicyEpoch, PolicyTask, PolicyWeights,
};
use crate::rng::derive_seed;
use crate::stl::{robustness, Formula};
use crate::trajopt::{solve_instance, InstanceProblem, Instance, OptimalTrajectoryRecord, TrajOptError};

type Boxed = Box<dyn std::error::Error + Send + Sync>;
type StageResult<T> = std::result::Result<T, Boxed>;

// seed streams
const GEN_SAMPLE: u64 = 10;
const GEN_SOLVE: u64 = 11;
const CLUSTER: u64 = 20;
const CLASSIFIER: u64 = 30;
const TRAIN_SAMPLE: u64 = 40;
const POLICY: u64 = 50;
const SINGLE: u64 = 60;
const TEST_SAMPLE: u64 = 70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Cluster,
    TrainClassifier,
    Partition,
    TrainPolicies,
    TrainSingle,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Cluster,
        Stage::TrainClassifier,
        Stage::Partition,
        Stage::TrainPolicies,
        Stage::TrainSingle,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Cluster => "cluster",
            Stage::TrainClassifier => "train-classifier",
            Stage::Partition => "partition",
            Stage::TrainPolicies => "train-policies",
            Stage::TrainSingle => "train-single",
            Stage::Evaluate => "evaluate",
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::GenData => &["trajectories/optimal.jsonl", "yield.json"],
            Stage::Cluster => &["clusters.csv", "cluster_report.json"],
            Stage::TrainClassifier => &["ensemble/classifier.json", "traces/classifier.csv"],
            Stage::Partition => &["data/train.jsonl", "partition.csv"],
            Stage::TrainPolicies => &["ensemble/manifest.json"],
            Stage::TrainSingle => &["single/policy.json", "traces/single.csv"],
            Stage::Evaluate => &[
                "metrics.json",
                "per_case.csv",
                "data/test.jsonl",
                "trajectories/test_clustered.jsonl",
                "trajectories/test_single.jsonl",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub attempted: usize,
    pub satisfied: usize,
    pub unsatisfied: usize,
    /// Instances whose every restart diverged.
    pub diverged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClusterReport {
    n_c: usize,
    sizes: Vec<usize>,
    mic: f64,
    mic_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRow {
    n: usize,
    label: usize,
}

#[derive(Debug, Serialize)]
struct ClassifierTraceRow {
    epoch: usize,
    loss: f64,
    accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PolicyTraceRow {
    pub epoch: usize,
    pub total: f64,
    pub robustness_smooth: f64,
    pub control: f64,
    pub robustness_exact: f64,
    pub satisfaction: f64,
    pub eval_total: Option<f64>,
    pub eval_satisfaction: Option<f64>,
}

impl From<&PolicyEpoch> for PolicyTraceRow {
    fn from(e: &PolicyEpoch) -> Self {
        Self {
            epoch: e.epoch,
            total: e.stats.total,
            robustness_smooth: e.stats.robustness_smooth,
            control: e.stats.control,
            robustness_exact: e.stats.robustness_exact,
            satisfaction: e.stats.satisfaction,
            eval_total: e.eval.map(|s| s.total),
            eval_satisfaction: e.eval.map(|s| s.satisfaction),
        }
    }
}

#[derive(Debug, Serialize)]
struct CaseRow {
    case: usize,
    approach: &'static str,
    label: Option<usize>,
    robustness: f64,
    satisfied: bool,
    control: Option<f64>,
    total: Option<f64>,
    distance_cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TestTrajectory {
    case: usize,
    approach: String,
    label: Option<usize>,
    x0: Vec<f64>,
    xi: Vec<[f64; 3]>,
    controls: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    robustness: f64,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::io(path, e)
}

fn write_text(path: &Path, text: &str) -> StageResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn read_text(path: &Path) -> StageResult<String> {
    Ok(fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> StageResult<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> StageResult<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> StageResult<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_text(path, &s)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> StageResult<Vec<T>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> StageResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> StageResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

impl Pipeline {
    /// Validates the configuration and writes it to `out/config.toml`.
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let path = out.join("config.toml");
        fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
        Ok(Self { cfg, out })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive_seed(self.cfg.seed, path)
    }

    /// Hash of everything a stage's outputs depend on, chained through
    /// the stages before it.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let own = match stage {
            Stage::GenData => json!({
                "seed": c.seed, "horizon": c.horizon, "task": c.task, "vehicle": c.vehicle,
                "r": c.r, "cost_norm": c.cost_norm, "gamma": c.gamma, "init": c.init,
                "obstacles": c.obstacles, "regions": c.regions, "n_cluster": c.n_cluster,
                "solver": c.solver,
            }),
            Stage::Cluster => json!({ "clustering": c.clustering }),
            Stage::TrainClassifier => json!({ "classifier": c.classifier, "workspace": c.workspace }),
            Stage::Partition => json!({ "n_train": c.n_train }),
            Stage::TrainPolicies => json!({ "policy": c.policy, "beta": c.beta }),
            Stage::TrainSingle => json!({ "policy": c.policy, "beta": c.beta, "epochs": c.single_epochs() }),
            Stage::Evaluate => json!({ "n_test": c.n_test, "distance_norm": c.distance_norm }),
        };
        let upstream: Vec<String> = match stage {
            Stage::GenData => vec![],
            Stage::Cluster => vec![self.stage_hash(Stage::GenData)],
            Stage::TrainClassifier => vec![self.stage_hash(Stage::Cluster)],
            Stage::Partition => vec![self.stage_hash(Stage::TrainClassifier)],
            Stage::TrainPolicies | Stage::TrainSingle => vec![self.stage_hash(Stage::Partition)],
            Stage::Evaluate => vec![
                self.stage_hash(Stage::TrainPolicies),
                self.stage_hash(Stage::TrainSingle),
            ],
        };
        hash_json(&json!({ "stage": stage.name(), "own": own, "upstream": upstream }))
    }

    fn cache_path(&self) -> PathBuf {
        self.path("cache/stages.json")
    }

    fn cache(&self) -> BTreeMap<String, String> {
        fs::read_to_string(self.cache_path())
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    fn update_map(&self, path: &Path, key: &str, value: serde_json::Value) -> StageResult<()> {
        let mut map: BTreeMap<String, serde_json::Value> = fs::read_to_string(path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        map.insert(key.to_string(), value);
        write_json(path, &map)
    }

    /// Runs one stage unconditionally.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let wrap = |cause: Boxed| ExperimentError::Stage {
            stage: stage.name(),
            seed: self.cfg.seed,
            cause,
        };
        log::info!("stage {}: running", stage.name());
        let start = Instant::now();
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::Cluster => self.cluster(),
            Stage::TrainClassifier => self.train_classifier(),
            Stage::Partition => self.partition(),
            Stage::TrainPolicies => self.train_policies(),
            Stage::TrainSingle => self.train_single(),
            Stage::Evaluate => self.evaluate(),
        }
        .map_err(wrap)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("stage {}: done in {secs:.1} s", stage.name());
        self.update_map(&self.path("timings.json"), stage.name(), json!(secs))
            .and_then(|_| self.update_map(&self.cache_path(), stage.name(), json!(self.stage_hash(stage))))
            .map_err(wrap)
    }

    /// Runs a stage unless its cached hash matches and its outputs exist.
    /// Returns whether it ran.
    pub fn run_cached(&self, stage: Stage) -> Result<bool> {
        let fresh = self.cache().get(stage.name()) == Some(&self.stage_hash(stage))
            && stage.outputs().iter().all(|o| self.path(o).exists());
        if fresh {
            log::info!("stage {}: cached", stage.name());
            return Ok(false);
        }
        self.run(stage)?;
        Ok(true)
    }

    pub fn run_all(&self) -> Result<MetricsReport> {
        for stage in Stage::ALL {
            self.run_cached(stage)?;
        }
        self.metrics()
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        read_json(&self.path("metrics.json")).map_err(|cause| ExperimentError::Stage {
            stage: "report",
            seed: self.cfg.seed,
            cause,
        })
    }

    /// Plain-text comparison table of the stored metrics.
    pub fn report(&self) -> Result<String> {
        let m = self.metrics()?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<28}{:>14}{:>14}\n",
            "metric", "single", "clustered"
        );
        let rows = [
            ("accuracy", format!("{:.3}", m.single.accuracy), format!("{:.3}", m.clustered.accuracy)),
            (
                "mean robustness",
                format!("{:.4}", m.single.mean_robustness),
                format!("{:.4}", m.clustered.mean_robustness),
            ),
            ("mean control", opt(m.single.mean_control), opt(m.clustered.mean_control)),
            ("mean total", opt(m.single.mean_total), opt(m.clustered.mean_total)),
            (
                "mean distance cost",
                format!("{:.2}", m.single.mean_distance_cost),
                format!("{:.2}", m.clustered.mean_distance_cost),
            ),
        ];
        for (name, a, b) in rows {
            s.push_str(&format!("{name:<28}{a:>14}{b:>14}\n"));
        }
        s.push_str(&format!(
            "test cases: {}, both satisfied: {}, gamma: {}\n",
            m.n_test, m.joint_success, m.gamma
        ));
        Ok(s)
    }

    fn psi(&self) -> StageResult<Formula> {
        Ok(self.cfg.psi()?)
    }

    fn task<'a>(&'a self, psi: &'a Formula) -> PolicyTask<'a> {
        PolicyTask {
            model: self.cfg.model(),
            psi,
            horizon: self.cfg.horizon,
            r: self.cfg.r.clone(),
            cost_norm: self.cfg.cost_norm,
            gamma: self.cfg.gamma,
            beta: self.cfg.beta,
        }
    }

    fn gen_data(&self) -> StageResult<()> {
        let c = &self.cfg;
        let psi = self.psi()?;
        let instances = (0..c.n_cluster)
            .map(|n| sample_instance(c, self.seed(&[GEN_SAMPLE, n as u64])))
            .collect::<Result<Vec<_>>>()?;
        let solved: Vec<std::result::Result<OptimalTrajectoryRecord, TrajOptError>> = instances
            .par_iter()
            .enumerate()
            .map(|(n, inst)| {
                let problem = InstanceProblem {
                    model: c.model(),
                    x0: inst.x0.clone(),
                    obstacles: inst.obstacles(),
                    formula: crate::trajopt::build_phi_xi(&psi, &inst.obstacles(), c.horizon),
                    horizon: c.horizon,
                    gamma: c.gamma,
                    r: c.r.clone(),
                    cost_norm: c.cost_norm,
                    solver: c.solver.clone(),
                };
                solve_instance(&problem, n, self.seed(&[GEN_SOLVE, n as u64])).map(|s| s.record)
            })
            .collect();
        let mut records = Vec::new();
        let mut diverged = Vec::new();
        for (n, r) in solved.into_iter().enumerate() {
            match r {
                Ok(rec) => records.push(rec),
                Err(TrajOptError::Diverged { .. }) => {
                    log::warn!("instance {n} diverged and is excluded");
                    diverged.push(n);
                }
                Err(e) => return Err(e.into()),
            }
        }
        let satisfied = records.iter().filter(|r| r.satisfied).count();
        let y = YieldReport {
            attempted: c.n_cluster,
            satisfied,
            unsatisfied: records.len() - satisfied,
            diverged,
        };
        log::info!("trajectory optimization yield: {satisfied}/{}", c.n_cluster);
        write_jsonl(&self.path("trajectories/optimal.jsonl"), &records)?;
        write_json(&self.path("yield.json"), &y)
    }

    fn satisfied_records(&self) -> StageResult<Vec<OptimalTrajectoryRecord>> {
        let all: Vec<OptimalTrajectoryRecord> = read_jsonl(&self.path("trajectories/optimal.jsonl"))?;
        Ok(all.into_iter().filter(|r| r.satisfied).collect())
    }

    fn cluster(&self) -> StageResult<()> {
        let cc = &self.cfg.clustering;
        let records = self.satisfied_records()?;
        if records.is_empty() {
            return Err("no satisfied trajectories to cluster".into());
        }
        let trajs: Vec<_> = records.iter().map(|r| r.trajectory()).collect();
        let d = similarity_matrix(&trajs, &cc.weight, cc.norm)?;
        let features = match cc.anchors {
            Some(count) => anchored_features(&d, count, self.seed(&[CLUSTER, 1])).1,
            None => feature_vectors(&d),
        };
        let model = xmeans(&features, cc.k_min, cc.k_max.min(features.len()), self.seed(&[CLUSTER]))?;
        log::info!("clustering found {} clusters of sizes {:?}", model.n_c, model.sizes);
        let rows: Vec<LabelRow> = records
            .iter()
            .zip(&model.labels)
            .map(|(r, &label)| LabelRow { n: r.n, label })
            .collect();
        write_csv(&self.path("clusters.csv"), &rows)?;
        write_json(
            &self.path("cluster_report.json"),
            &ClusterReport {
                n_c: model.n_c,
                sizes: model.sizes.clone(),
                mic: model.mic,
                mic_trace: model.mic_trace.clone(),
            },
        )
    }

    fn train_classifier(&self) -> StageResult<()> {
        let records = self.satisfied_records()?;
        let labels: Vec<LabelRow> = read_csv(&self.path("clusters.csv"))?;
        let report: ClusterReport = read_json(&self.path("cluster_report.json"))?;
        let by_n: BTreeMap<usize, usize> = labels.iter().map(|l| (l.n, l.label)).collect();
        let data = records
            .iter()
            .map(|r| {
                let label = *by_n.get(&r.n).ok_or_else(|| format!("record {} has no cluster label", r.n))?;
                Ok(LabeledInstance {
                    x0: r.x0.clone(),
                    xi: r.xi.clone(),
                    label,
                })
            })
            .collect::<StageResult<Vec<_>>>()?;
        let (weights, trace) = train_classifier(
            &data,
            report.n_c,
            &self.cfg.classifier,
            self.cfg.normalizer(),
            self.seed(&[CLASSIFIER]),
        )?;
        if let Some(last) = trace.last() {
            log::info!("classifier: final loss {:.4}, accuracy {:.3}", last.loss, last.accuracy);
        }
        let rows: Vec<ClassifierTraceRow> = trace
            .iter()
            .map(|e| ClassifierTraceRow {
                epoch: e.epoch,
                loss: e.loss,
                accuracy: e.accuracy,
            })
            .collect();
        write_csv(&self.path("traces/classifier.csv"), &rows)?;
        write_json(&self.path("ensemble/classifier.json"), &weights)
    }

    fn load_classifier(&self) -> StageResult<ClassifierWeights> {
        let w: ClassifierWeights = read_json(&self.path("ensemble/classifier.json"))?;
        w.validate()?;
        Ok(w)
    }

    fn partition(&self) -> StageResult<()> {
        let c = &self.cfg;
        let classifier = self.load_classifier()?;
        let train = (0..c.n_train)
            .map(|i| sample_instance(c, self.seed(&[TRAIN_SAMPLE, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let ds = partition_dataset(&train, &classifier)?;
        log::info!("partition sizes {:?}", ds.sizes());
        let mut rows = Vec::with_capacity(train.len());
        for (label, idx) in ds.indices.iter().enumerate() {
            rows.extend(idx.iter().map(|&n| LabelRow { n, label }));
        }
        rows.sort_by_key(|r| r.n);
        write_jsonl(&self.path("data/train.jsonl"), &train)?;
        write_csv(&self.path("partition.csv"), &rows)
    }

    fn train_policies(&self) -> StageResult<()> {
        let classifier = self.load_classifier()?;
        let train: Vec<Instance> = read_jsonl(&self.path("data/train.jsonl"))?;
        let rows: Vec<LabelRow> = read_csv(&self.path("partition.csv"))?;
        let n_c = classifier.n_c;
        let mut groups: Vec<Vec<Instance>> = vec![Vec::new(); n_c];
        for r in &rows {
            let inst = train.get(r.n).ok_or_else(|| format!("partition row {} out of range", r.n))?;
            groups
                .get_mut(r.label)
                .ok_or_else(|| format!("partition label {} out of range", r.label))?
                .push(inst.clone());
        }
        // a previous run may have had more clusters
        remove_matching(&self.path("ensemble"), "policy_")?;
        remove_matching(&self.path("traces"), "policy_")?;
        let psi = self.psi()?;
        let task = self.task(&psi);
        let trained: Vec<StageResult<Option<(PolicyWeights, Vec<PolicyEpoch>)>>> = groups
            .par_iter()
            .enumerate()
            .map(|(l, g)| {
                if g.is_empty() {
                    log::warn!("cluster {l} received no training instances; no policy trained");
                    return Ok(None);
                }
                let seed = self.seed(&[POLICY, l as u64]);
                Ok(Some(train_policy(g, &task, &self.cfg.policy, self.cfg.normalizer(), seed)?))
            })
            .collect();
        let mut policies = Vec::with_capacity(n_c);
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), self.cfg.seed);
        for (l, t) in trained.into_iter().enumerate() {
            match t? {
                Some((w, trace)) => {
                    let rows: Vec<PolicyTraceRow> = trace.iter().map(Into::into).collect();
                    write_csv(&self.path(&format!("traces/policy_{l}.csv")), &rows)?;
                    seeds.insert(format!("policy_{l}"), self.seed(&[POLICY, l as u64]));
                    policies.push(Some(w));
                }
                None => policies.push(None),
            }
        }
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        let ens = PolicyEnsemble::new(classifier, policies, &sizes)?;
        let manifest = EnsembleManifest {
            n_c,
            present: ens.policies.iter().map(Option::is_some).collect(),
            sizes,
            fallback: ens.fallback,
            config_hash: self.cfg.hash(),
            seeds,
        };
        ens.save(&self.path("ensemble"), &manifest)?;
        Ok(())
    }

    fn train_single(&self) -> StageResult<()> {
        let train: Vec<Instance> = read_jsonl(&self.path("data/train.jsonl"))?;
        let psi = self.psi()?;
        let cfg = PolicyConfig {
            epochs: self.cfg.single_epochs(),
            ..self.cfg.policy.clone()
        };
        let (w, trace) = train_policy(&train, &self.task(&psi), &cfg, self.cfg.normalizer(), self.seed(&[SINGLE]))?;
        let rows: Vec<PolicyTraceRow> = trace.iter().map(Into::into).collect();
        write_csv(&self.path("traces/single.csv"), &rows)?;
        write_json(&self.path("single/policy.json"), &w)
    }

    fn evaluate(&self) -> StageResult<()> {
        let c = &self.cfg;
        let (ens, _) = PolicyEnsemble::load(&self.path("ensemble"))?;
        let single: PolicyWeights = read_json(&self.path("single/policy.json"))?;
        single.validate()?;
        let psi = self.psi()?;
        let goal = c.x_goal();
        let tests = (0..c.n_test)
            .map(|j| sample_instance(c, self.seed(&[TEST_SAMPLE, j as u64])))
            .collect::<Result<Vec<_>>>()?;

        let run = |inst: &Instance, w: &PolicyWeights| -> StageResult<(CaseResult, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
            let (traj, controls) = policy_rollout(w, c.model(), inst, c.horizon)?;
            let phi = crate::trajopt::build_phi_xi(&psi, &inst.obstacles(), c.horizon);
            let case = CaseResult {
                robustness: robustness(&phi, &traj, 0)?,
                control: control_cost(&traj, &controls, &c.r, c.cost_norm)?,
                distance: distance_cost(&traj, &goal, c.distance_norm),
            };
            Ok((case, controls, traj.to_states()))
        };
        type Outcome = (usize, (CaseResult, Vec<Vec<f64>>, Vec<Vec<f64>>), (CaseResult, Vec<Vec<f64>>, Vec<Vec<f64>>));
        let outcomes: Vec<StageResult<Outcome>> = tests
            .par_iter()
            .map(|inst| {
                let (label, policy) = ens.dispatch(&inst.x0, &inst.xi)?;
                Ok((label, run(inst, policy)?, run(inst, &single)?))
            })
            .collect();
        let outcomes = outcomes.into_iter().collect::<StageResult<Vec<_>>>()?;

        let clustered: Vec<CaseResult> = outcomes.iter().map(|o| o.1 .0.clone()).collect();
        let singles: Vec<CaseResult> = outcomes.iter().map(|o| o.2 .0.clone()).collect();
        let metrics = report(&clustered, &singles, c.gamma);

        let mut case_rows = Vec::with_capacity(2 * tests.len());
        let mut traj_c = Vec::with_capacity(tests.len());
        let mut traj_s = Vec::with_capacity(tests.len());
        for (j, (inst, (label, (rc, uc, xc), (rs, us, xs)))) in tests.iter().zip(outcomes).enumerate() {
            let both = rc.robustness > 0.0 && rs.robustness > 0.0;
            for (approach, lab, r) in [("single", None, &rs), ("clustered", Some(label), &rc)] {
                case_rows.push(CaseRow {
                    case: j,
                    approach,
                    label: lab,
                    robustness: r.robustness,
                    satisfied: r.robustness > 0.0,
                    control: both.then_some(r.control),
                    total: both.then(|| -r.robustness + c.gamma * r.control),
                    distance_cost: r.distance,
                });
            }
            let entry = |approach: &str, label, controls, states, robustness| TestTrajectory {
                case: j,
                approach: approach.to_string(),
                label,
                x0: inst.x0.clone(),
                xi: inst.xi.clone(),
                controls,
                states,
                robustness,
            };
            traj_c.push(entry("clustered", Some(label), uc, xc, rc.robustness));
            traj_s.push(entry("single", None, us, xs, rs.robustness));
        }
        log::info!(
            "accuracy: clustered {:.3}, single {:.3}",
            metrics.clustered.accuracy,
            metrics.single.accuracy
        );
        write_jsonl(&self.path("data/test.jsonl"), &tests)?;
        write_jsonl(&self.path("trajectories/test_clustered.jsonl"), &traj_c)?;
        write_jsonl(&self.path("trajectories/test_single.jsonl"), &traj_s)?;
        write_csv(&self.path("per_case.csv"), &case_rows)?;
        write_json(&self.path("metrics.json"), &metrics)
    }
}

fn remove_matching(dir: &Path, prefix: &str) -> StageResult<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(format!("{}: {e}", dir.display()).into()),
    };
    for entry in entries {
        let entry = entry.map_err(|e| format!("{}: {e}", dir.display()))?;
        if entry.file_name().to_string_lossy().starts_with(prefix) {
            fs::remove_file(entry.path()).map_err(|e| format!("{}: {e}", entry.path().display()))?;
        }
    }
    Ok(())
}
