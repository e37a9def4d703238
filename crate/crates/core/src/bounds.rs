//! Closed-form convergence bounds and the empirical-vs-theoretical check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::RunSummary;
use crate::objectives::RegimeKind;

/// `r^2 / lambda2^2 + 1`.
fn topology_factor(r: f64, lambda2: f64) -> f64 {
    r * r / (lambda2 * lambda2) + 1.0
}

/// Average squared gradient bound under the second-moment assumption with
/// geometric local steps and `eta = n / sqrt(T)`:
///
/// `4 (f(mu_0) - f*) / (sqrt(T) H) + 2304 H^2 max(1, L^2) M^2 / sqrt(T) * (r^2/lambda2^2 + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn bound_thm1(_n: usize, r: f64, lambda2: f64, h: f64, l: f64, m2: f64, t: f64, f0_gap: f64) -> f64 {
    let sqrt_t = t.sqrt();
    4.0 * f0_gap / (sqrt_t * h) + 2304.0 * h * h * l.powi(2).max(1.0) * m2 / sqrt_t * topology_factor(r, lambda2)
}

/// Average squared gradient bound for fixed local steps on non-i.i.d. data:
///
/// `(f(mu_0) - f*) / (sqrt(T) H) + 376 H^2 max(1, L^2) (sigma^2 + 4 rho^2) / sqrt(T) * (r^2/lambda2^2 + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn bound_thm2(
    _n: usize,
    r: f64,
    lambda2: f64,
    h: f64,
    l: f64,
    sigma2: f64,
    rho2: f64,
    t: f64,
    f0_gap: f64,
) -> f64 {
    let sqrt_t = t.sqrt();
    f0_gap / (sqrt_t * h)
        + 376.0 * h * h * l.powi(2).max(1.0) * (sigma2 + 4.0 * rho2) / sqrt_t * topology_factor(r, lambda2)
}

/// Uniform-in-time bound on `E[Gamma_t]`:
/// `(40 r / lambda2 + 80 r^2 / lambda2^2) n eta^2 H^2 M^2`.
pub fn bound_lemma_gamma(n: usize, r: f64, lambda2: f64, eta: f64, h: f64, m2: f64) -> f64 {
    (40.0 * r / lambda2 + 80.0 * r * r / (lambda2 * lambda2)) * n as f64 * eta * eta * h * h * m2
}

/// Bounds evaluated for a run, with estimated constants. Entries that do not
/// apply to the run's regime are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoreticalBounds {
    pub thm1: Option<f64>,
    pub thm2: Option<f64>,
    pub lemma_gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Thm1,
    Thm2,
    LemmaGamma,
}

impl BoundKind {
    fn regime(self) -> RegimeKind {
        match self {
            BoundKind::Thm1 | BoundKind::LemmaGamma => RegimeKind::SecondMoment,
            BoundKind::Thm2 => RegimeKind::NonIid,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("{kind:?} needs a {needed} run, got {got}")]
    RegimeMismatch {
        kind: BoundKind,
        needed: RegimeKind,
        got: RegimeKind,
    },
    #[error("bound {0:?} was not evaluated for this run (moment estimation disabled?)")]
    Missing(BoundKind),
    #[error("no runs to check")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub kind: BoundKind,
    pub bound: f64,
    /// Mean over runs of the empirical counterpart.
    pub empirical: f64,
    pub ratio: f64,
    pub pass: bool,
    /// Runs whose own empirical value exceeded the bound.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub runs: usize,
    pub precondition_t_ge_n4: bool,
    pub entries: Vec<BoundEntry>,
}

/// Compares each requested bound to its empirical counterpart, averaged
/// across `runs`: mean `Gamma_t` for the potential bound and the average
/// squared gradient norm for the two theorems.
pub fn bound_check(runs: &[RunSummary], kinds: &[BoundKind]) -> Result<BoundReport, BoundError> {
    let first = runs.first().ok_or(BoundError::Empty)?;
    let mut entries = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        if first.regime != kind.regime() {
            return Err(BoundError::RegimeMismatch {
                kind,
                needed: kind.regime(),
                got: first.regime,
            });
        }
        let pick = |r: &RunSummary| match kind {
            BoundKind::Thm1 => (r.bounds.thm1, r.avg_grad_norm_sq),
            BoundKind::Thm2 => (r.bounds.thm2, r.avg_grad_norm_sq),
            BoundKind::LemmaGamma => (r.bounds.lemma_gamma, r.mean_gamma),
        };
        let bound = pick(first).0.ok_or(BoundError::Missing(kind))?;
        let empirical = runs.iter().map(|r| pick(r).1).sum::<f64>() / runs.len() as f64;
        let violations = runs
            .iter()
            .filter(|r| {
                let (b, e) = pick(r);
                b.is_none_or(|b| e > b)
            })
            .count();
        entries.push(BoundEntry {
            kind,
            bound,
            empirical,
            ratio: empirical / bound,
            pass: empirical <= bound,
            violations,
        });
    }
    Ok(BoundReport {
        runs: runs.len(),
        precondition_t_ge_n4: runs.iter().all(|r| r.precondition_t_ge_n4),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thm1_first_term_only_without_noise() {
        let b = bound_thm1(8, 7.0, 8.0, 4.0, 1.0, 0.0, 1e6, 3.0);
        assert!((b - 4.0 * 3.0 / (1000.0 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn thm1_plug_in() {
        // sqrt(2304^2 * 4) = 4608 and the topology factor is 2.
        let b = bound_thm1(8, 3.0, 3.0, 1.0, 1.0, 1.0, 2304.0 * 2304.0 * 4.0, 0.0);
        assert!((b - 1.0).abs() < 1e-12, "{b}");
        let b = bound_thm1(8, 3.0, 3.0, 1.0, 1.0, 1.0, 2304.0 * 2304.0 * 16.0, 0.0);
        assert!((b - 0.5).abs() < 1e-12, "{b}");
    }

    #[test]
    fn thm1_doubling_t() {
        let a = bound_thm1(8, 7.0, 8.0, 4.0, 2.0, 3.0, 1e5, 1.5);
        let b = bound_thm1(8, 7.0, 8.0, 4.0, 2.0, 3.0, 2e5, 1.5);
        assert!((b / a - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn thm2_cases() {
        let base = bound_thm2(8, 3.0, 8.0, 2.0, 1.0, 0.0, 0.0, 1e4, 5.0);
        assert!((base - 5.0 / (100.0 * 2.0)).abs() < 1e-15);
        let rho = bound_thm2(8, 3.0, 8.0, 2.0, 1.0, 0.0, 0.7, 1e4, 5.0) - base;
        let sig = bound_thm2(8, 3.0, 8.0, 2.0, 1.0, 0.7, 0.0, 1e4, 5.0) - base;
        assert!((rho - 4.0 * sig).abs() < 1e-12);
    }

    #[test]
    fn lemma_gamma_cases() {
        assert_eq!(bound_lemma_gamma(8, 7.0, 8.0, 0.01, 4.0, 0.0), 0.0);
        let b = bound_lemma_gamma(8, 7.0, 8.0, 0.01, 4.0, 25.0);
        assert!((b - 30.8).abs() < 1e-9, "{b}");
        let b2 = bound_lemma_gamma(8, 7.0, 8.0, 0.02, 4.0, 25.0);
        assert!((b2 / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_each_argument() {
        let t1 = |r, l2, h, m2, t| bound_thm1(8, r, l2, h, 1.5, m2, t, 2.0);
        assert!(t1(3.0, 2.0, 2.0, 1.0, 2e4) < t1(3.0, 2.0, 2.0, 1.0, 1e4));
        assert!(t1(3.0, 3.0, 2.0, 1.0, 1e4) < t1(3.0, 2.0, 2.0, 1.0, 1e4));
        assert!(t1(3.0, 2.0, 3.0, 1.0, 1e4) > t1(3.0, 2.0, 2.0, 1.0, 1e4));
        assert!(t1(3.0, 2.0, 2.0, 2.0, 1e4) > t1(3.0, 2.0, 2.0, 1.0, 1e4));
        let t2 = |l2, h, s2, r2, t| bound_thm2(8, 3.0, l2, h, 1.5, s2, r2, t, 2.0);
        assert!(t2(2.0, 2.0, 1.0, 1.0, 2e4) < t2(2.0, 2.0, 1.0, 1.0, 1e4));
        assert!(t2(3.0, 2.0, 1.0, 1.0, 1e4) < t2(2.0, 2.0, 1.0, 1.0, 1e4));
        assert!(t2(2.0, 3.0, 1.0, 1.0, 1e4) > t2(2.0, 2.0, 1.0, 1.0, 1e4));
        assert!(t2(2.0, 2.0, 2.0, 1.0, 1e4) > t2(2.0, 2.0, 1.0, 1.0, 1e4));
        assert!(t2(2.0, 2.0, 1.0, 2.0, 1e4) > t2(2.0, 2.0, 1.0, 1.0, 1e4));
    }
}
