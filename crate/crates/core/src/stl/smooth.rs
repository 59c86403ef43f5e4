//! Differentiable robustness recorded on an autodiff tape.
//!
//! Every min is replaced by `softmin_β' = −(1/β') log Σ exp(−β' aᵢ)` and
//! every max by the count-normalized `(1/β') log((1/m) Σ exp(β' aᵢ))`.
//! Both under-approximate the exact operator by at most `log(m)/β'`, are
//! non-decreasing in `β'` and are 1-Lipschitz, so errors add up along the
//! nesting depth `L` and never change sign. Using `β' = β·L` for every
//! operator therefore keeps the total error below `log(m_max)/β`.

use std::collections::HashMap;

use super::{check_length, Formula, Predicate, Result, StlError};
use crate::autodiff::{NodeId, Tape};

/// Result of [`smooth_robustness`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothRobustness {
    /// Scalar node holding the smooth robustness.
    pub node: NodeId,
    /// Largest number of operands of a smoothed min or max.
    pub m_max: usize,
    /// Number of nested smoothing layers the temperature was scaled by.
    pub depth: usize,
    /// Temperature actually used by each smoothing operator.
    pub effective_beta: f64,
}

#[derive(Debug, Clone, Copy)]
enum Val {
    Node(NodeId),
    Const(f64),
}

#[derive(Clone, Copy, PartialEq)]
enum Agg {
    Min,
    Max,
}

struct Ctx<'t> {
    tape: &'t mut Tape,
    states: &'t [NodeId],
    beta: f64,
    m_max: usize,
    memo: HashMap<(usize, usize), Val>,
    buf: Vec<NodeId>,
}

/// Smooth robustness at time 0. `states[k]` is the vector node of `x_k`.
pub fn smooth_robustness(
    tape: &mut Tape,
    formula: &Formula,
    states: &[NodeId],
    beta: f64,
) -> Result<SmoothRobustness> {
    smooth_robustness_at(tape, formula, states, beta, 0)
}

pub fn smooth_robustness_at(
    tape: &mut Tape,
    formula: &Formula,
    states: &[NodeId],
    beta: f64,
    t: usize,
) -> Result<SmoothRobustness> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(StlError::InvalidTemperature(beta));
    }
    check_length(formula, states.len(), t)?;
    let n_x = tape.shape(states[0]).first().copied().unwrap_or(1);
    for (index, &s) in states.iter().enumerate() {
        let found = tape.shape(s).first().copied().unwrap_or(1);
        if found != n_x {
            return Err(StlError::RaggedTrajectory {
                index,
                expected: n_x,
                found,
            });
        }
    }
    formula.check_dimension(n_x)?;

    let depth = layers(formula).max(1);
    let effective_beta = beta * depth as f64;
    let mut ctx = Ctx {
        tape,
        states,
        beta: effective_beta,
        m_max: 1,
        memo: HashMap::new(),
        buf: Vec::new(),
    };
    match ctx.eval(formula, t)? {
        Val::Node(node) => Ok(SmoothRobustness {
            node,
            m_max: ctx.m_max,
            depth,
            effective_beta,
        }),
        Val::Const(_) => Err(StlError::ConstantFormula),
    }
}

fn is_constant(f: &Formula) -> bool {
    match f {
        Formula::True => true,
        Formula::Not(c) => matches!(**c, Formula::True),
        _ => false,
    }
}

/// Upper bound on the number of smoothing operators along any root-to-leaf
/// path.
fn layers(f: &Formula) -> usize {
    match f {
        Formula::True => 0,
        Formula::Atom(a) => matches!(a.predicate, Predicate::Box { .. }) as usize,
        Formula::Not(c) => layers(c),
        Formula::And(cs) | Formula::Or(cs) => {
            cs.iter().map(layers).max().unwrap_or(0) + (cs.len() > 1) as usize
        }
        Formula::Eventually { child, interval } | Formula::Always { child, interval } => {
            layers(child) + (interval.b() > interval.a()) as usize
        }
        Formula::Until { lhs, rhs, interval } | Formula::Release { lhs, rhs, interval } => {
            layers(lhs).max(layers(rhs))
                + (!is_constant(lhs)) as usize
                + (interval.b() > interval.a()) as usize
        }
    }
}

impl Ctx<'_> {
    fn combine(&mut self, agg: Agg, terms: &[Val]) -> Result<Val> {
        let (absorbing, neutral) = match agg {
            Agg::Min => (f64::NEG_INFINITY, f64::INFINITY),
            Agg::Max => (f64::INFINITY, f64::NEG_INFINITY),
        };
        let mut nodes = std::mem::take(&mut self.buf);
        nodes.clear();
        for v in terms {
            match *v {
                Val::Node(n) => nodes.push(n),
                Val::Const(c) if c == absorbing => {
                    self.buf = nodes;
                    return Ok(Val::Const(absorbing));
                }
                Val::Const(c) if c == neutral => {}
                Val::Const(c) => nodes.push(self.tape.constant_scalar(c)),
            }
        }
        let out = match nodes.len() {
            0 => Val::Const(neutral),
            1 => Val::Node(nodes[0]),
            m => {
                self.m_max = self.m_max.max(m);
                Val::Node(match agg {
                    Agg::Min => self.tape.softmin(&nodes, self.beta)?,
                    Agg::Max => {
                        let s = self.tape.softmax(&nodes, self.beta)?;
                        self.tape.add_scalar(s, -(m as f64).ln() / self.beta)
                    }
                })
            }
        };
        self.buf = nodes;
        Ok(out)
    }

    fn predicate(&mut self, p: &Predicate, t: usize, negated: bool) -> Result<Val> {
        let x = self.states[t];
        let sign = if negated { -1.0 } else { 1.0 };
        match p {
            Predicate::Affine { weights, offset } => {
                let w = self.tape.constant_vector(weights);
                let n_x = self.tape.shape(x).first().copied().unwrap_or(1);
                let xs = if weights.len() == n_x {
                    x
                } else {
                    self.tape.slice(x, 0, weights.len())?
                };
                let d = self.tape.dot(w, xs)?;
                let h = self.tape.add_scalar(d, *offset);
                Ok(Val::Node(if negated { self.tape.neg(h) } else { h }))
            }
            Predicate::Box { dims, lo, hi } => {
                let mut terms = Vec::with_capacity(2 * dims.len());
                for (k, &d) in dims.iter().enumerate() {
                    terms.push(Val::Node(self.tape.index_affine(x, d, sign, -sign * lo[k])?));
                    terms.push(Val::Node(self.tape.index_affine(x, d, -sign, sign * hi[k])?));
                }
                self.combine(if negated { Agg::Max } else { Agg::Min }, &terms)
            }
            Predicate::Disk {
                dims,
                center,
                radius,
            } => {
                let mut diffs = Vec::with_capacity(dims.len());
                for (&d, c) in dims.iter().zip(center) {
                    diffs.push(self.tape.index_affine(x, d, 1.0, -c)?);
                }
                let v = self.tape.concat(&diffs)?;
                let n = self.tape.norm(v);
                Ok(Val::Node(self.tape.affine(n, -sign, sign * radius)))
            }
        }
    }

    fn eval(&mut self, f: &Formula, t: usize) -> Result<Val> {
        let key = (f as *const Formula as usize, t);
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let v = match f {
            Formula::True => Val::Const(f64::INFINITY),
            Formula::Atom(a) => self.predicate(&a.predicate, t, false)?,
            Formula::Not(c) => match &**c {
                Formula::Atom(a) => self.predicate(&a.predicate, t, true)?,
                other => match self.eval(other, t)? {
                    Val::Const(c) => Val::Const(-c),
                    Val::Node(n) => Val::Node(self.tape.neg(n)),
                },
            },
            Formula::And(cs) | Formula::Or(cs) => {
                let terms = cs
                    .iter()
                    .map(|c| self.eval(c, t))
                    .collect::<Result<Vec<_>>>()?;
                let agg = if matches!(f, Formula::And(_)) { Agg::Min } else { Agg::Max };
                self.combine(agg, &terms)?
            }
            Formula::Eventually { child, interval } | Formula::Always { child, interval } => {
                let terms = (t + interval.a()..=t + interval.b())
                    .map(|k| self.eval(child, k))
                    .collect::<Result<Vec<_>>>()?;
                let agg = if matches!(f, Formula::Always { .. }) { Agg::Min } else { Agg::Max };
                self.combine(agg, &terms)?
            }
            Formula::Until { lhs, rhs, interval } | Formula::Release { lhs, rhs, interval } => {
                let (inner, outer) = if matches!(f, Formula::Until { .. }) {
                    (Agg::Min, Agg::Max)
                } else {
                    (Agg::Max, Agg::Min)
                };
                let mut lhs_terms = Vec::new();
                let mut outer_terms = Vec::new();
                for t1 in t..=t + interval.b() {
                    lhs_terms.push(self.eval(lhs, t1)?);
                    if t1 >= t + interval.a() {
                        let mut terms = vec![self.eval(rhs, t1)?];
                        terms.extend_from_slice(&lhs_terms);
                        outer_terms.push(self.combine(inner, &terms)?);
                    }
                }
                self.combine(outer, &outer_terms)?
            }
        };
        self.memo.insert(key, v);
        Ok(v)
    }
}
