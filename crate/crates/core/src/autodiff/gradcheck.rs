use serde::Serialize;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub entries_checked: usize,
    pub entries_over_tol: usize,
    /// `(leaf index, flat entry index)` attaining `max_rel_err`.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    /// Entries over tolerance as `(leaf, entry, analytic, numeric)`, at most
    /// [`MAX_LISTED`] of them.
    pub over_tol: Vec<(usize, usize, f64, f64)>,
    /// Set when a non-finite value was met; the check then fails.
    pub failure: Option<String>,
}

pub const MAX_LISTED: usize = 64;

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<T: Scalar, F>(f: &F, leaves: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Invalid(format!("grad_check: output shape {:?} is not scalar", v.shape())));
    }
    Ok(v.data()[0])
}

/// Perturbs every entry of every leaf by ±`eps` and compares the central
/// difference of `f` against [`Tape::backward`].
///
/// `f` receives a fresh tape and the node ids of `leaves` and must return a
/// scalar node. It is rebuilt for every evaluation, so it must be
/// deterministic.
pub fn grad_check<T: Scalar, F>(f: F, leaves: &[Tensor<T>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check: eps must be > 0, got {eps}")));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        entries_checked: 0,
        entries_over_tol: 0,
        worst: None,
        worst_values: None,
        over_tol: Vec::new(),
        failure: None,
    };
    let fail = |mut r: GradCheckReport, msg: String| {
        r.pass = false;
        r.failure = Some(msg);
        Ok(r)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = match f(&mut tape, &ids) {
        Ok(l) => l,
        Err(Error::NonFinite(m)) => return fail(report, format!("forward: {m}")),
        Err(e) => return Err(e),
    };
    let grads = tape.backward(loss, &ids)?;

    let two_eps = 2.0 * eps;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = &grads[&ids[li]];
        for j in 0..leaf.numel() {
            let a = analytic.data()[j].to_f64();
            if !a.is_finite() {
                return fail(report, format!("analytic gradient leaf {li} entry {j} is non-finite"));
            }
            let mut probe = leaves.to_vec();
            let base = leaf.data()[j].to_f64();
            probe[li].data_mut()[j] = T::from_f64(base + eps);
            let plus = eval(&f, &probe);
            probe[li].data_mut()[j] = T::from_f64(base - eps);
            let minus = eval(&f, &probe);
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p.to_f64(), m.to_f64()),
                (Err(e), _) | (_, Err(e)) if !matches!(e, Error::NonFinite(_)) => return Err(e),
                _ => return fail(report, format!("non-finite objective perturbing leaf {li} entry {j}")),
            };
            let numeric = (plus - minus) / two_eps;
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            if rel > tol {
                report.entries_over_tol += 1;
                if report.over_tol.len() < MAX_LISTED {
                    report.over_tol.push((li, j, a, numeric));
                }
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((li, j));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
