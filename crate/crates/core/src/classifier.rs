//! Permutation-invariant classifier mapping an initial state and an
//! obstacle set to a cluster label.
//!
//! Each obstacle is encoded by a shared network `A`, the encodings are
//! summed, and a head network `B` maps the state together with the pooled
//! encoding to logits. Obstacles are sorted before pooling so the floating
//! point sum, and hence the output, is identical for every ordering.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Optimizer, ParamMap, Tape, Tensor};
use crate::rng::rng_for;

pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("label {label} of sample {index} is out of range for {n_c} classes")]
    LabelOutOfRange { index: usize, label: usize, n_c: usize },
    #[error("expected {expected} obstacles, got {found}")]
    ObstacleCount { expected: usize, found: usize },
    #[error("expected state dimension {expected}, got {found}")]
    StateDimension { expected: usize, found: usize },
    #[error("no training data")]
    Empty,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("unsupported weights version {0}")]
    Version(u32),
    #[error("weights are inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// Affine map of each input component onto `[-1, 1]`. Components with a
/// degenerate range map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub xi_lo: Vec<f64>,
    pub xi_hi: Vec<f64>,
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

impl Normalizer {
    pub fn state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_lo.iter().zip(&self.state_hi))
            .map(|(&v, (&l, &h))| unit(v, l, h))
            .collect()
    }

    pub fn xi(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter()
            .zip(self.xi_lo.iter().zip(&self.xi_hi))
            .map(|(&v, (&l, &h))| unit(v, l, h))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden_a: usize,
    pub hidden_b: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden_a: 128,
            hidden_b: 64,
            activation: Activation::Tanh,
            epochs: 500,
            lr: 0.001,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    pub version: u32,
    pub n_x: usize,
    pub n_xi: usize,
    pub n_obs: usize,
    pub n_c: usize,
    pub activation: Activation,
    pub normalizer: Normalizer,
    pub params: ParamMap,
}

const LAYERS: [&str; 5] = ["a1", "a2", "b1", "b2", "b3"];

#[derive(Debug, Clone)]
pub struct LabeledInstance {
    pub x0: Vec<f64>,
    pub xi: Vec<[f64; 3]>,
    /// Zero-based cluster label.
    pub label: usize,
}

fn dense(tape: &mut Tape, w: NodeId, b: NodeId, x: NodeId) -> std::result::Result<NodeId, AutodiffError> {
    let z = tape.matvec(w, x)?;
    tape.add(z, b)
}

struct Handles {
    w: Vec<NodeId>,
    b: Vec<NodeId>,
}

impl ClassifierWeights {
    /// Fresh weights, `U(±1/√fan_in)` per layer.
    pub fn init(
        n_x: usize,
        n_obs: usize,
        n_c: usize,
        cfg: &ClassifierConfig,
        normalizer: Normalizer,
        seed: u64,
    ) -> Self {
        let n_xi = 3;
        let shapes = [
            (cfg.hidden_a, n_xi),
            (cfg.hidden_a, cfg.hidden_a),
            (cfg.hidden_b, n_x + cfg.hidden_a),
            (cfg.hidden_b, cfg.hidden_b),
            (n_c, cfg.hidden_b),
        ];
        let mut params = ParamMap::new();
        for (i, (name, (rows, cols))) in LAYERS.iter().zip(shapes).enumerate() {
            let mut rng = rng_for(seed, &[i as u64]);
            let bound = 1.0 / (cols as f64).sqrt();
            let w = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            let b = (0..rows).map(|_| rng.gen_range(-bound..=bound)).collect();
            params.insert(format!("{name}.w"), Tensor::matrix(rows, cols, w).expect("sized"));
            params.insert(format!("{name}.b"), Tensor::vector(b));
        }
        Self {
            version: WEIGHTS_VERSION,
            n_x,
            n_xi,
            n_obs,
            n_c,
            activation: cfg.activation,
            normalizer,
            params,
        }
    }

    /// Checks version and layer shapes, e.g. after loading from disk.
    pub fn validate(&self) -> Result<()> {
        if self.version != WEIGHTS_VERSION {
            return Err(ClassifierError::Version(self.version));
        }
        for name in LAYERS {
            let w = self
                .params
                .get(&format!("{name}.w"))
                .ok_or_else(|| ClassifierError::Corrupt(format!("missing {name}.w")))?;
            let b = self
                .params
                .get(&format!("{name}.b"))
                .ok_or_else(|| ClassifierError::Corrupt(format!("missing {name}.b")))?;
            w.validate()?;
            b.validate()?;
            if w.shape().len() != 2 || b.shape() != [w.shape()[0]] {
                return Err(ClassifierError::Corrupt(format!("layer {name} has inconsistent shapes")));
            }
        }
        let out = self.params["b3.w"].shape()[0];
        if out != self.n_c {
            return Err(ClassifierError::Corrupt(format!("head has {out} outputs, n_c = {}", self.n_c)));
        }
        Ok(())
    }

    fn load(&self, tape: &mut Tape) -> Handles {
        let (mut w, mut b) = (Vec::with_capacity(5), Vec::with_capacity(5));
        for name in LAYERS {
            let wn = format!("{name}.w");
            let bn = format!("{name}.b");
            w.push(tape.input(wn.clone(), self.params[&wn].clone()));
            b.push(tape.input(bn.clone(), self.params[&bn].clone()));
        }
        Handles { w, b }
    }

    fn check_input(&self, x0: &[f64], xi: &[[f64; 3]]) -> Result<()> {
        if x0.len() != self.n_x {
            return Err(ClassifierError::StateDimension {
                expected: self.n_x,
                found: x0.len(),
            });
        }
        if xi.len() != self.n_obs {
            return Err(ClassifierError::ObstacleCount {
                expected: self.n_obs,
                found: xi.len(),
            });
        }
        Ok(())
    }

    fn logits_on_tape(&self, tape: &mut Tape, h: &Handles, x0: &[f64], xi: &[[f64; 3]]) -> Result<NodeId> {
        let mut sorted = xi.to_vec();
        sorted.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let act = self.activation;
        let mut pooled: Option<NodeId> = None;
        for x in &sorted {
            let input = tape.constant_vector(&self.normalizer.xi(x));
            let z1 = dense(tape, h.w[0], h.b[0], input)?;
            let a1 = act.apply(tape, z1);
            let z2 = dense(tape, h.w[1], h.b[1], a1)?;
            let a2 = act.apply(tape, z2);
            pooled = Some(match pooled {
                None => a2,
                Some(p) => tape.add(p, a2)?,
            });
        }
        let zeta = match pooled {
            Some(p) => p,
            None => tape.constant_vector(&vec![0.0; self.params["a2.b"].len()]),
        };
        let xs = tape.constant_vector(&self.normalizer.state(x0));
        let joint = tape.concat(&[xs, zeta])?;
        let z3 = dense(tape, h.w[2], h.b[2], joint)?;
        let a3 = act.apply(tape, z3);
        let z4 = dense(tape, h.w[3], h.b[3], a3)?;
        let a4 = act.apply(tape, z4);
        Ok(dense(tape, h.w[4], h.b[4], a4)?)
    }

    pub fn logits(&self, x0: &[f64], xi: &[[f64; 3]]) -> Result<Vec<f64>> {
        self.check_input(x0, xi)?;
        let mut tape = Tape::new();
        let h = self.load(&mut tape);
        let out = self.logits_on_tape(&mut tape, &h, x0, xi)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn class_probabilities(&self, x0: &[f64], xi: &[[f64; 3]]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x0, xi)?))
    }

    /// Zero-based label: argmax of the logits, lowest index on ties.
    pub fn classify(&self, x0: &[f64], xi: &[[f64; 3]]) -> Result<usize> {
        Ok(argmax(&self.logits(x0, xi)?))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample cross-entropy `−Σ y log ŷ` for a one-hot target.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mini-batch cross-entropy loss and its gradient for `batch` samples.
pub fn batch_loss_and_grad(
    weights: &ClassifierWeights,
    data: &[LabeledInstance],
    batch: &[usize],
) -> Result<(f64, usize, ParamMap)> {
    let mut tape = Tape::new();
    let h = weights.load(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    let mut correct = 0;
    for &i in batch {
        let s = &data[i];
        let z = weights.logits_on_tape(&mut tape, &h, &s.x0, &s.xi)?;
        if argmax(tape.value(z)) == s.label {
            correct += 1;
        }
        let lse = tape.logsumexp(z);
        let pick = tape.index(z, s.label)?;
        losses.push(tape.sub(lse, pick)?);
    }
    let all = tape.concat(&losses)?;
    let total = tape.sum(all);
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    tape.backward(mean)?;
    Ok((tape.scalar(mean), correct, tape.gradients()))
}

/// Trains a fresh classifier. Returns the weights and one trace row per
/// epoch with the mean training loss and accuracy seen during that epoch.
pub fn train_classifier(
    data: &[LabeledInstance],
    n_c: usize,
    cfg: &ClassifierConfig,
    normalizer: Normalizer,
    seed: u64,
) -> Result<(ClassifierWeights, Vec<EpochStats>)> {
    let first = data.first().ok_or(ClassifierError::Empty)?;
    for (index, s) in data.iter().enumerate() {
        if s.label >= n_c {
            return Err(ClassifierError::LabelOutOfRange {
                index,
                label: s.label,
                n_c,
            });
        }
    }
    let mut weights = ClassifierWeights::init(first.x0.len(), first.xi.len(), n_c, cfg, normalizer, seed);
    for s in data {
        weights.check_input(&s.x0, &s.xi)?;
    }
    let mut opt = Optimizer::adam(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(seed, &[1, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (bi, batch) in order.chunks(cfg.batch.max(1)).enumerate() {
            let (loss, ok, grads) = batch_loss_and_grad(&weights, data, batch)?;
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            opt.step(&mut weights.params, &grads)?;
        }
        trace.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((weights, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalizer() -> Normalizer {
        Normalizer {
            state_lo: vec![0.0; 5],
            state_hi: vec![16.0, 18.0, 1.0, 2.0, 0.0],
            xi_lo: vec![2.0, 3.0, 1.5],
            xi_hi: vec![14.0, 14.0, 2.0],
        }
    }

    fn small_cfg() -> ClassifierConfig {
        ClassifierConfig {
            hidden_a: 8,
            hidden_b: 6,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn normalizer_maps_range_and_degenerate_dims() {
        let n = normalizer();
        assert_eq!(n.state(&[0.0, 18.0, 0.5, 1.0, 3.0]), vec![-1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn probabilities_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&[800.0, 0.0], 0).abs() < 1e-300);
        assert!((cross_entropy(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_class_always_label_zero() {
        let w = ClassifierWeights::init(5, 2, 1, &small_cfg(), normalizer(), 3);
        assert_eq!(w.classify(&[1.0; 5], &[[3.0, 4.0, 1.6], [9.0, 9.0, 1.9]]).unwrap(), 0);
    }

    #[test]
    fn zero_head_ties_to_first_label() {
        let mut w = ClassifierWeights::init(5, 2, 3, &small_cfg(), normalizer(), 3);
        w.params.get_mut("b3.w").unwrap().data_mut().fill(0.0);
        w.params.get_mut("b3.b").unwrap().data_mut().fill(0.0);
        assert_eq!(w.classify(&[1.0; 5], &[[3.0, 4.0, 1.6], [9.0, 9.0, 1.9]]).unwrap(), 0);
    }

    #[test]
    fn swapping_obstacles_is_bit_identical() {
        let w = ClassifierWeights::init(5, 2, 4, &small_cfg(), normalizer(), 8);
        let (a, b) = ([3.0, 4.0, 1.6], [9.0, 9.0, 1.9]);
        let x0 = [4.0, 1.5, 0.2, 0.7, 0.0];
        assert_eq!(w.logits(&x0, &[a, b]).unwrap(), w.logits(&x0, &[b, a]).unwrap());
    }

    #[test]
    fn wrong_obstacle_count_rejected() {
        let w = ClassifierWeights::init(5, 2, 2, &small_cfg(), normalizer(), 8);
        assert!(matches!(
            w.classify(&[0.0; 5], &[[3.0, 4.0, 1.6]]),
            Err(ClassifierError::ObstacleCount { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let data = vec![LabeledInstance {
            x0: vec![0.0; 5],
            xi: vec![[3.0, 4.0, 1.6]],
            label: 2,
        }];
        assert!(matches!(
            train_classifier(&data, 2, &small_cfg(), normalizer(), 0),
            Err(ClassifierError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn weights_survive_json() {
        let w = ClassifierWeights::init(5, 2, 3, &small_cfg(), normalizer(), 1);
        let back: ClassifierWeights = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        back.validate().unwrap();
        assert_eq!(back, w);
    }
}
