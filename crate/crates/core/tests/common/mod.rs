//! Test-side oracles shared by the integration and acceptance tests. Every
//! evaluator here is written from the textbook definitions and does not
//! call into the library's semantics.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stlcluster::stl::{Predicate, PredicateRegistry};

/// Formula tree exactly as generated, before any normalization.
#[derive(Debug, Clone)]
pub enum Raw {
    True,
    Atom(usize),
    Not(Box<Raw>),
    And(Box<Raw>, Box<Raw>),
    Or(Box<Raw>, Box<Raw>),
    Until(Box<Raw>, usize, usize, Box<Raw>),
    F(usize, usize, Box<Raw>),
    G(usize, usize, Box<Raw>),
}

impl Raw {
    pub fn text(&self, names: &[String]) -> String {
        match self {
            Raw::True => "true".into(),
            Raw::Atom(i) => names[*i].clone(),
            Raw::Not(c) => format!("not ({})", c.text(names)),
            Raw::And(a, b) => format!("({}) and ({})", a.text(names), b.text(names)),
            Raw::Or(a, b) => format!("({}) or ({})", a.text(names), b.text(names)),
            Raw::Until(a, lo, hi, b) => format!("({}) until[{lo},{hi}] ({})", a.text(names), b.text(names)),
            Raw::F(lo, hi, c) => format!("F[{lo},{hi}] ({})", c.text(names)),
            Raw::G(lo, hi, c) => format!("G[{lo},{hi}] ({})", c.text(names)),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Raw::True | Raw::Atom(_) => 0,
            Raw::Not(c) => c.horizon(),
            Raw::And(a, b) | Raw::Or(a, b) => a.horizon().max(b.horizon()),
            Raw::Until(a, _, hi, b) => hi + a.horizon().max(b.horizon()),
            Raw::F(_, hi, c) | Raw::G(_, hi, c) => hi + c.horizon(),
        }
    }

    pub fn has_atom(&self) -> bool {
        match self {
            Raw::True => false,
            Raw::Atom(_) => true,
            Raw::Not(c) | Raw::F(_, _, c) | Raw::G(_, _, c) => c.has_atom(),
            Raw::And(a, b) | Raw::Or(a, b) | Raw::Until(a, _, _, b) => a.has_atom() || b.has_atom(),
        }
    }

    /// Upper bound on the operand count of any min or max in the
    /// evaluation: binary connectives count 2 per level, so nested chains
    /// are bounded by 2^depth.
    pub fn arity_bound(&self, box_faces: usize) -> usize {
        match self {
            Raw::True => 1,
            Raw::Atom(_) => box_faces,
            Raw::Not(c) => c.arity_bound(box_faces),
            Raw::And(a, b) | Raw::Or(a, b) => {
                a.arity_bound(box_faces) + b.arity_bound(box_faces)
            }
            Raw::Until(a, lo, hi, b) => {
                (hi - lo + 1).max(hi + 2).max(a.arity_bound(box_faces)).max(b.arity_bound(box_faces)) + 1
            }
            Raw::F(lo, hi, c) | Raw::G(lo, hi, c) => (hi - lo + 1).max(c.arity_bound(box_faces)) * 2,
        }
    }
}

fn interval(rng: &mut ChaCha8Rng, budget: usize) -> (usize, usize) {
    let hi = rng.gen_range(0..=budget);
    let lo = rng.gen_range(0..=hi);
    (lo, hi)
}

/// Random formula of depth at most `depth` whose horizon fits `budget`.
pub fn random_formula(rng: &mut ChaCha8Rng, depth: usize, n_atoms: usize, budget: usize) -> Raw {
    let leaf = depth == 0 || rng.gen_bool(0.2);
    if leaf {
        return if rng.gen_bool(0.1) {
            Raw::True
        } else {
            Raw::Atom(rng.gen_range(0..n_atoms))
        };
    }
    match rng.gen_range(0..7) {
        0 => Raw::Not(Box::new(random_formula(rng, depth - 1, n_atoms, budget))),
        1 => Raw::And(
            Box::new(random_formula(rng, depth - 1, n_atoms, budget)),
            Box::new(random_formula(rng, depth - 1, n_atoms, budget)),
        ),
        2 => Raw::Or(
            Box::new(random_formula(rng, depth - 1, n_atoms, budget)),
            Box::new(random_formula(rng, depth - 1, n_atoms, budget)),
        ),
        3 => {
            let (lo, hi) = interval(rng, budget);
            Raw::Until(
                Box::new(random_formula(rng, depth - 1, n_atoms, budget - hi)),
                lo,
                hi,
                Box::new(random_formula(rng, depth - 1, n_atoms, budget - hi)),
            )
        }
        4 | 5 => {
            let (lo, hi) = interval(rng, budget);
            Raw::F(lo, hi, Box::new(random_formula(rng, depth - 1, n_atoms, budget - hi)))
        }
        _ => {
            let (lo, hi) = interval(rng, budget);
            Raw::G(lo, hi, Box::new(random_formula(rng, depth - 1, n_atoms, budget - hi)))
        }
    }
}

/// Predicate margins computed directly from their definitions.
#[derive(Debug, Clone)]
pub enum RawPred {
    Affine(Vec<f64>, f64),
    Box(Vec<usize>, Vec<f64>, Vec<f64>),
    Disk(Vec<usize>, Vec<f64>, f64),
}

impl RawPred {
    pub fn margin(&self, x: &[f64]) -> f64 {
        match self {
            RawPred::Affine(w, c) => w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + c,
            RawPred::Box(dims, lo, hi) => dims
                .iter()
                .enumerate()
                .flat_map(|(k, &d)| [x[d] - lo[k], hi[k] - x[d]])
                .fold(f64::INFINITY, f64::min),
            RawPred::Disk(dims, c, r) => {
                r - dims
                    .iter()
                    .zip(c)
                    .map(|(&d, ci)| (x[d] - ci).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    pub fn to_predicate(&self) -> Predicate {
        match self.clone() {
            RawPred::Affine(weights, offset) => Predicate::Affine { weights, offset },
            RawPred::Box(dims, lo, hi) => Predicate::Box { dims, lo, hi },
            RawPred::Disk(dims, center, radius) => Predicate::Disk { dims, center, radius },
        }
    }
}

pub fn random_predicates(rng: &mut ChaCha8Rng, n_x: usize, count: usize) -> Vec<RawPred> {
    (0..count)
        .map(|_| {
            let mut dims: Vec<usize> = (0..n_x).filter(|_| rng.gen_bool(0.6)).collect();
            if dims.is_empty() {
                dims.push(rng.gen_range(0..n_x));
            }
            match rng.gen_range(0..3) {
                0 => RawPred::Affine(
                    (0..n_x).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(-0.5..0.5),
                ),
                1 => {
                    let lo: Vec<f64> = dims.iter().map(|_| rng.gen_range(-1.5..0.0)).collect();
                    let hi = lo.iter().map(|l| l + rng.gen_range(0.5..2.0)).collect();
                    RawPred::Box(dims, lo, hi)
                }
                _ => {
                    let c = dims.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                    RawPred::Disk(dims, c, rng.gen_range(0.3..1.5))
                }
            }
        })
        .collect()
}

pub fn registry(preds: &[RawPred]) -> (Vec<String>, PredicateRegistry) {
    let names: Vec<String> = (0..preds.len()).map(|i| format!("p{i}")).collect();
    let reg = names
        .iter()
        .zip(preds)
        .map(|(n, p)| (n.clone(), p.to_predicate()))
        .collect();
    (names, reg)
}

/// Robustness by direct recursion; `Until` enumerates `t₁` and, for each,
/// every `t₂ ∈ [t, t₁]`. Negation of any subformula is `−ρ`.
pub fn oracle_rho(f: &Raw, preds: &[RawPred], xs: &[Vec<f64>], t: usize) -> f64 {
    match f {
        Raw::True => f64::INFINITY,
        Raw::Atom(i) => preds[*i].margin(&xs[t]),
        Raw::Not(c) => -oracle_rho(c, preds, xs, t),
        Raw::And(a, b) => oracle_rho(a, preds, xs, t).min(oracle_rho(b, preds, xs, t)),
        Raw::Or(a, b) => oracle_rho(a, preds, xs, t).max(oracle_rho(b, preds, xs, t)),
        Raw::Until(a, lo, hi, b) => {
            let mut best = f64::NEG_INFINITY;
            for t1 in t + lo..=t + hi {
                let mut v = oracle_rho(b, preds, xs, t1);
                for t2 in t..=t1 {
                    v = v.min(oracle_rho(a, preds, xs, t2));
                }
                best = best.max(v);
            }
            best
        }
        Raw::F(lo, hi, c) => oracle_rho(&Raw::Until(Box::new(Raw::True), *lo, *hi, c.clone()), preds, xs, t),
        Raw::G(lo, hi, c) => -oracle_rho(
            &Raw::F(*lo, *hi, Box::new(Raw::Not(c.clone()))),
            preds,
            xs,
            t,
        ),
    }
}

/// Boolean satisfaction by the same enumeration.
pub fn oracle_bool(f: &Raw, preds: &[RawPred], xs: &[Vec<f64>], t: usize) -> bool {
    match f {
        Raw::True => true,
        Raw::Atom(i) => preds[*i].margin(&xs[t]) > 0.0,
        Raw::Not(c) => !oracle_bool(c, preds, xs, t),
        Raw::And(a, b) => oracle_bool(a, preds, xs, t) && oracle_bool(b, preds, xs, t),
        Raw::Or(a, b) => oracle_bool(a, preds, xs, t) || oracle_bool(b, preds, xs, t),
        Raw::Until(a, lo, hi, b) => (t + lo..=t + hi)
            .any(|t1| oracle_bool(b, preds, xs, t1) && (t..=t1).all(|t2| oracle_bool(a, preds, xs, t2))),
        Raw::F(lo, hi, c) => (t + lo..=t + hi).any(|t1| oracle_bool(c, preds, xs, t1)),
        Raw::G(lo, hi, c) => (t + lo..=t + hi).all(|t1| oracle_bool(c, preds, xs, t1)),
    }
}

pub fn random_states(rng: &mut ChaCha8Rng, len: usize, n_x: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..n_x).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect()
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference of `f` at `x` with step `h`.
pub fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
