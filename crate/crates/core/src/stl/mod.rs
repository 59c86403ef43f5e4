//! Signal temporal logic over discrete-time trajectories.
//!
//! Formulas are kept in negation normal form: [`Formula::negate`] pushes a
//! negation down to predicates using De Morgan duals, so `Not` only ever
//! wraps [`Formula::True`] or an atom. Negated until becomes the internal
//! [`Formula::Release`] operator, which prints back as `not (... until ...)`.

mod parser;
mod semantics;
mod smooth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use parser::parse;
pub use semantics::{eval_bool, robustness};
pub use smooth::{smooth_robustness, smooth_robustness_at, SmoothRobustness};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("unknown predicate `{name}` at line {line}, column {col}")]
    UnknownPredicate {
        name: String,
        line: usize,
        col: usize,
    },
    #[error("empty interval [{a},{b}] at line {line}, column {col}")]
    BadInterval {
        a: usize,
        b: usize,
        line: usize,
        col: usize,
    },
    #[error("trajectory too short: evaluation needs {required} states, got {available}")]
    HorizonTooShort { required: usize, available: usize },
    #[error("predicate `{name}` reads state index {index} but states have dimension {n_x}")]
    DimensionMismatch {
        name: String,
        index: usize,
        n_x: usize,
    },
    #[error("inconsistent trajectory: state {index} has dimension {found}, expected {expected}")]
    RaggedTrajectory {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("formula does not depend on the trajectory")]
    ConstantFormula,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, StlError>;

/// Closed integer time interval `[a, b]` with `a <= b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    a: usize,
    b: usize,
}

impl Interval {
    pub fn new(a: usize, b: usize) -> Option<Self> {
        (a <= b).then_some(Self { a, b })
    }

    pub fn a(&self) -> usize {
        self.a
    }

    pub fn b(&self) -> usize {
        self.b
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.a, self.b)
    }
}

/// Real-valued margin `h(x)`; the predicate holds when `h(x) > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// `h(x) = w·x + offset`.
    Affine { weights: Vec<f64>, offset: f64 },
    /// Minimum of the signed distances to the faces of an axis-aligned box
    /// over the listed state dimensions.
    Box {
        dims: Vec<usize>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `radius − ‖x[dims] − center‖`: positive strictly inside the disk,
    /// so `not` of it is the clearance `‖p − c‖ − r`.
    Disk {
        dims: Vec<usize>,
        center: Vec<f64>,
        radius: f64,
    },
}

impl Predicate {
    /// Half-plane `x[dim] > threshold`.
    pub fn above(n_x: usize, dim: usize, threshold: f64) -> Self {
        let mut weights = vec![0.0; n_x];
        weights[dim] = 1.0;
        Predicate::Affine {
            weights,
            offset: -threshold,
        }
    }

    pub fn planar_box(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Predicate::Box {
            dims: vec![0, 1],
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        }
    }

    pub fn planar_disk(center: [f64; 2], radius: f64) -> Self {
        Predicate::Disk {
            dims: vec![0, 1],
            center: center.to_vec(),
            radius,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Predicate::Affine { weights, offset } => {
                weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + offset
            }
            Predicate::Box { dims, lo, hi } => {
                let mut m = f64::INFINITY;
                for (k, &d) in dims.iter().enumerate() {
                    m = m.min(x[d] - lo[k]).min(hi[k] - x[d]);
                }
                m
            }
            Predicate::Disk {
                dims,
                center,
                radius,
            } => {
                let sq: f64 = dims
                    .iter()
                    .zip(center)
                    .map(|(&d, c)| (x[d] - c) * (x[d] - c))
                    .sum();
                radius - sq.sqrt()
            }
        }
    }

    /// Largest state index read, if any.
    fn max_dim(&self) -> Option<usize> {
        match self {
            Predicate::Affine { weights, .. } => weights.len().checked_sub(1),
            Predicate::Box { dims, .. } | Predicate::Disk { dims, .. } => {
                dims.iter().copied().max()
            }
        }
    }
}

pub type PredicateRegistry = BTreeMap<String, Predicate>;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub name: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    True,
    Atom(Atom),
    /// Only above `True` or an atom.
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Until {
        lhs: Box<Formula>,
        rhs: Box<Formula>,
        interval: Interval,
    },
    /// Dual of until: `φ R ψ ≡ ¬(¬φ U ¬ψ)`.
    Release {
        lhs: Box<Formula>,
        rhs: Box<Formula>,
        interval: Interval,
    },
    Eventually {
        child: Box<Formula>,
        interval: Interval,
    },
    Always {
        child: Box<Formula>,
        interval: Interval,
    },
}

impl Formula {
    pub fn atom(name: impl Into<String>, predicate: Predicate) -> Self {
        Formula::Atom(Atom {
            name: name.into(),
            predicate,
        })
    }

    /// Conjunction with nested conjunctions spliced in.
    pub fn and(children: Vec<Formula>) -> Self {
        let mut flat = Vec::with_capacity(children.len());
        for c in children {
            match c {
                Formula::And(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            Formula::And(flat)
        }
    }

    pub fn or(children: Vec<Formula>) -> Self {
        let mut flat = Vec::with_capacity(children.len());
        for c in children {
            match c {
                Formula::Or(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            Formula::Or(flat)
        }
    }

    pub fn eventually(interval: Interval, child: Formula) -> Self {
        Formula::Eventually {
            child: Box::new(child),
            interval,
        }
    }

    pub fn always(interval: Interval, child: Formula) -> Self {
        Formula::Always {
            child: Box::new(child),
            interval,
        }
    }

    pub fn until(lhs: Formula, interval: Interval, rhs: Formula) -> Self {
        Formula::Until {
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            interval,
        }
    }

    /// Negation in normal form.
    pub fn negate(self) -> Self {
        match self {
            Formula::True | Formula::Atom(_) => Formula::Not(Box::new(self)),
            Formula::Not(inner) => *inner,
            Formula::And(cs) => Formula::or(cs.into_iter().map(Formula::negate).collect()),
            Formula::Or(cs) => Formula::and(cs.into_iter().map(Formula::negate).collect()),
            Formula::Until { lhs, rhs, interval } => Formula::Release {
                lhs: Box::new(lhs.negate()),
                rhs: Box::new(rhs.negate()),
                interval,
            },
            Formula::Release { lhs, rhs, interval } => Formula::Until {
                lhs: Box::new(lhs.negate()),
                rhs: Box::new(rhs.negate()),
                interval,
            },
            Formula::Eventually { child, interval } => Formula::Always {
                child: Box::new(child.negate()),
                interval,
            },
            Formula::Always { child, interval } => Formula::Eventually {
                child: Box::new(child.negate()),
                interval,
            },
        }
    }

    /// Number of future steps the formula reads beyond its start time.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::True | Formula::Atom(_) => 0,
            Formula::Not(c) => c.horizon(),
            Formula::And(cs) | Formula::Or(cs) => cs.iter().map(Formula::horizon).max().unwrap_or(0),
            Formula::Until { lhs, rhs, interval } | Formula::Release { lhs, rhs, interval } => {
                interval.b + lhs.horizon().max(rhs.horizon())
            }
            Formula::Eventually { child, interval } | Formula::Always { child, interval } => {
                interval.b + child.horizon()
            }
        }
    }

    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a Atom>) {
        match self {
            Formula::True => {}
            Formula::Atom(a) => out.push(a),
            Formula::Not(c) | Formula::Eventually { child: c, .. } | Formula::Always { child: c, .. } => {
                c.collect_atoms(out)
            }
            Formula::And(cs) | Formula::Or(cs) => cs.iter().for_each(|c| c.collect_atoms(out)),
            Formula::Until { lhs, rhs, .. } | Formula::Release { lhs, rhs, .. } => {
                lhs.collect_atoms(out);
                rhs.collect_atoms(out);
            }
        }
    }

    /// Checks that every predicate reads only indices below `n_x`.
    pub fn check_dimension(&self, n_x: usize) -> Result<()> {
        for a in self.atoms() {
            if let Some(index) = a.predicate.max_dim() {
                if index >= n_x {
                    return Err(StlError::DimensionMismatch {
                        name: a.name.clone(),
                        index,
                        n_x,
                    });
                }
            }
        }
        Ok(())
    }

    fn precedence(&self) -> u8 {
        match self {
            Formula::Or(_) => 1,
            Formula::And(_) => 2,
            Formula::Until { .. } => 3,
            Formula::Not(_) | Formula::Release { .. } | Formula::Eventually { .. } | Formula::Always { .. } => 4,
            Formula::True | Formula::Atom(_) => 5,
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Formula, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => write!(f, "true"),
            Formula::Atom(a) => write!(f, "{}", a.name),
            Formula::Not(c) => {
                write!(f, "not ")?;
                write_child(f, c, c.precedence() < 4)
            }
            Formula::And(cs) | Formula::Or(cs) => {
                let (sep, p) = match self {
                    Formula::And(_) => (" and ", 2),
                    _ => (" or ", 1),
                };
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write_child(f, c, c.precedence() <= p)?;
                }
                Ok(())
            }
            Formula::Until { lhs, rhs, interval } => {
                write_child(f, lhs, lhs.precedence() < 3)?;
                write!(f, " until{interval} ")?;
                write_child(f, rhs, rhs.precedence() <= 3)
            }
            Formula::Release { lhs, rhs, interval } => {
                let l = lhs.as_ref().clone().negate();
                let r = rhs.as_ref().clone().negate();
                write!(f, "not (")?;
                write_child(f, &l, l.precedence() < 3)?;
                write!(f, " until{interval} ")?;
                write_child(f, &r, r.precedence() <= 3)?;
                write!(f, ")")
            }
            Formula::Eventually { child, interval } => {
                write!(f, "F{interval} ")?;
                write_child(f, child, child.precedence() < 4)
            }
            Formula::Always { child, interval } => {
                write!(f, "G{interval} ")?;
                write_child(f, child, child.precedence() < 4)
            }
        }
    }
}

/// State sequence `x_0 … x_T` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_x: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(n_x: usize, data: Vec<f64>) -> Result<Self> {
        if n_x == 0 || data.len() % n_x != 0 {
            return Err(StlError::RaggedTrajectory {
                index: data.len() / n_x.max(1),
                expected: n_x,
                found: data.len() % n_x.max(1),
            });
        }
        Ok(Self { n_x, data })
    }

    pub fn from_states(states: &[Vec<f64>]) -> Result<Self> {
        let n_x = states.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_x * states.len());
        for (index, s) in states.iter().enumerate() {
            if s.len() != n_x {
                return Err(StlError::RaggedTrajectory {
                    index,
                    expected: n_x,
                    found: s.len(),
                });
            }
            data.extend_from_slice(s);
        }
        Self::new(n_x, data)
    }

    /// One-dimensional signal.
    pub fn scalar(values: &[f64]) -> Self {
        Self {
            n_x: 1,
            data: values.to_vec(),
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Number of states, `T + 1`.
    pub fn len(&self) -> usize {
        self.data.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_x)
    }

    pub fn to_states(&self) -> Vec<Vec<f64>> {
        self.states().map(<[f64]>::to_vec).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn check_length(formula: &Formula, available: usize, t: usize) -> Result<()> {
    let required = t + formula.horizon() + 1;
    if available < required {
        return Err(StlError::HorizonTooShort {
            required,
            available,
        });
    }
    Ok(())
}
