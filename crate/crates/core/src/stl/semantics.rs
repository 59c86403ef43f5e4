use super::{check_length, Formula, Result, Trajectory};

/// Boolean satisfaction of `formula` by `traj` from time `t`.
pub fn eval_bool(formula: &Formula, traj: &Trajectory, t: usize) -> Result<bool> {
    formula.check_dimension(traj.n_x())?;
    check_length(formula, traj.len(), t)?;
    Ok(holds(formula, traj, t))
}

/// Exact min/max robustness of `formula` on `traj` from time `t`.
pub fn robustness(formula: &Formula, traj: &Trajectory, t: usize) -> Result<f64> {
    formula.check_dimension(traj.n_x())?;
    check_length(formula, traj.len(), t)?;
    Ok(rho(formula, traj, t))
}

fn holds(f: &Formula, tr: &Trajectory, t: usize) -> bool {
    match f {
        Formula::True => true,
        Formula::Atom(a) => a.predicate.eval(tr.state(t)) > 0.0,
        Formula::Not(c) => !holds(c, tr, t),
        Formula::And(cs) => cs.iter().all(|c| holds(c, tr, t)),
        Formula::Or(cs) => cs.iter().any(|c| holds(c, tr, t)),
        Formula::Until { lhs, rhs, interval } => {
            let mut lhs_so_far = true;
            for t1 in t..=t + interval.b() {
                lhs_so_far &= holds(lhs, tr, t1);
                if !lhs_so_far {
                    return false;
                }
                if t1 >= t + interval.a() && holds(rhs, tr, t1) {
                    return true;
                }
            }
            false
        }
        Formula::Release { lhs, rhs, interval } => {
            let mut lhs_seen = false;
            for t1 in t..=t + interval.b() {
                lhs_seen |= holds(lhs, tr, t1);
                if t1 >= t + interval.a() && !(lhs_seen || holds(rhs, tr, t1)) {
                    return false;
                }
            }
            true
        }
        Formula::Eventually { child, interval } => {
            (t + interval.a()..=t + interval.b()).any(|k| holds(child, tr, k))
        }
        Formula::Always { child, interval } => {
            (t + interval.a()..=t + interval.b()).all(|k| holds(child, tr, k))
        }
    }
}

fn rho(f: &Formula, tr: &Trajectory, t: usize) -> f64 {
    match f {
        Formula::True => f64::INFINITY,
        Formula::Atom(a) => a.predicate.eval(tr.state(t)),
        Formula::Not(c) => -rho(c, tr, t),
        Formula::And(cs) => cs.iter().map(|c| rho(c, tr, t)).fold(f64::INFINITY, f64::min),
        Formula::Or(cs) => cs
            .iter()
            .map(|c| rho(c, tr, t))
            .fold(f64::NEG_INFINITY, f64::max),
        Formula::Until { lhs, rhs, interval } => {
            // running minimum of the left operand over [t, t1]
            let mut run = f64::INFINITY;
            let mut best = f64::NEG_INFINITY;
            for t1 in t..=t + interval.b() {
                run = run.min(rho(lhs, tr, t1));
                if t1 >= t + interval.a() {
                    best = best.max(rho(rhs, tr, t1).min(run));
                }
            }
            best
        }
        Formula::Release { lhs, rhs, interval } => {
            let mut run = f64::NEG_INFINITY;
            let mut worst = f64::INFINITY;
            for t1 in t..=t + interval.b() {
                run = run.max(rho(lhs, tr, t1));
                if t1 >= t + interval.a() {
                    worst = worst.min(rho(rhs, tr, t1).max(run));
                }
            }
            worst
        }
        Formula::Eventually { child, interval } => (t + interval.a()..=t + interval.b())
            .map(|k| rho(child, tr, k))
            .fold(f64::NEG_INFINITY, f64::max),
        Formula::Always { child, interval } => (t + interval.a()..=t + interval.b())
            .map(|k| rho(child, tr, k))
            .fold(f64::INFINITY, f64::min),
    }
}
