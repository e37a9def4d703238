//! Potential, mean model, snapshots and their on-disk formats.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::bounds::TheoreticalBounds;
use crate::objectives::{MomentsReport, RegimeKind};
use crate::protocol::Variant;
use crate::quantizer::QuantizerConfig;
use crate::topology::{check_models, Topology, TopologyError};
use crate::vecmath;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("model list is empty")]
    Empty,
    #[error("model {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
}

fn check<M: AsRef<[f64]>>(models: &[M]) -> Result<(), MetricsError> {
    let first = models.first().ok_or(MetricsError::Empty)?.as_ref().len();
    for (index, m) in models.iter().enumerate() {
        if m.as_ref().len() != first {
            return Err(MetricsError::DimensionMismatch {
                index,
                expected: first,
                got: m.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// Arithmetic mean `mu = (1/n) sum_i X^i`.
pub fn compute_mu<M: AsRef<[f64]>>(models: &[M]) -> Result<Vec<f64>, MetricsError> {
    check(models)?;
    Ok(vecmath::mean(models))
}

/// Potential `Gamma = sum_i ||X^i - mu||^2`.
pub fn compute_gamma<M: AsRef<[f64]>>(models: &[M]) -> Result<f64, MetricsError> {
    let mu = compute_mu(models)?;
    Ok(vecmath::spread(models, &mu))
}

/// Exact expected potential after one gradient-free averaging step:
/// `(2 / (n r)) sum over edges of Gamma(X with that pair averaged)`.
pub fn exact_gamma_contraction<M: AsRef<[f64]>>(topology: &Topology, models: &[M]) -> Result<f64, TopologyError> {
    check_models(topology.n(), models)?;
    let mut work: Vec<Vec<f64>> = models.iter().map(|m| m.as_ref().to_vec()).collect();
    // Averaging a pair leaves mu unchanged.
    let mu = vecmath::mean(&work);
    let mut total = 0.0;
    for &(i, j) in topology.edges() {
        let (xi, xj) = (work[i].clone(), work[j].clone());
        let avg: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| (a + b) / 2.0).collect();
        work[i].clone_from(&avg);
        work[j].clone_from(&avg);
        total += vecmath::spread(&work, &mu);
        work[i] = xi;
        work[j] = xj;
    }
    Ok(total / topology.edge_count() as f64)
}

/// Metrics at interaction index `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSnapshot {
    pub t: u64,
    pub gamma: f64,
    pub grad_norm_sq_at_mu: f64,
    pub f_at_mu: f64,
    pub cum_bits: u64,
    pub quantize_failures: u64,
    pub per_node_steps: Vec<u64>,
}

/// Column order shared by the JSON Lines and CSV exports.
pub const SNAPSHOT_COLUMNS: [&str; 7] = [
    "t",
    "gamma",
    "grad_norm_sq_at_mu",
    "f_at_mu",
    "cum_bits",
    "quantize_failures",
    "per_node_steps",
];

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, snapshots: &[MetricsSnapshot]) -> io::Result<()> {
    for s in snapshots {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// CSV export; `per_node_steps` is a `;`-separated list.
pub fn write_csv<W: Write>(out: W, snapshots: &[MetricsSnapshot]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SNAPSHOT_COLUMNS)?;
    for s in snapshots {
        let steps = s
            .per_node_steps
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            s.t.to_string(),
            s.gamma.to_string(),
            s.grad_norm_sq_at_mu.to_string(),
            s.f_at_mu.to_string(),
            s.cum_bits.to_string(),
            s.quantize_failures.to_string(),
            steps,
        ])?;
    }
    w.flush()
}

/// Outcome of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub variant: Variant,
    pub regime: RegimeKind,
    pub seed: u64,
    pub n: usize,
    pub degree: usize,
    pub lambda2: f64,
    pub total_t: u64,
    /// `total_t / n`.
    pub parallel_time: f64,
    pub eta: f64,
    pub mean_h: f64,
    pub metrics_every: u64,
    /// Mean of `||grad f(mu_t)||^2` over the snapshot grid `t < T`.
    pub avg_grad_norm_sq: f64,
    pub f0_gap: f64,
    pub final_f_gap: f64,
    pub max_gamma: f64,
    /// Mean of `Gamma_t` over the snapshot grid `t < T`.
    pub mean_gamma: f64,
    pub cum_bits: u64,
    pub bits_per_interaction: f64,
    pub quantize_failures: u64,
    pub mean_steps_per_node: f64,
    /// Whether `T >= n^4`.
    pub precondition_t_ge_n4: bool,
    pub quantizer: Option<QuantizerConfig>,
    pub moments: Option<MomentsReport>,
    pub bounds: TheoreticalBounds,
    /// Not serialized, so that identical seeds give identical files.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Mean of per-replica summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSummary {
    pub replicas: usize,
    pub seeds: Vec<u64>,
    pub avg_grad_norm_sq: f64,
    pub avg_grad_norm_sq_std_err: f64,
    pub final_f_gap: f64,
    pub mean_gamma: f64,
    pub max_gamma: f64,
    pub cum_bits: f64,
    pub bits_per_interaction: f64,
    pub quantize_failures: u64,
    pub mean_steps_per_node: f64,
    pub bounds: TheoreticalBounds,
}

impl AggregateSummary {
    pub fn from_runs(runs: &[RunSummary]) -> Self {
        assert!(!runs.is_empty(), "aggregate of zero runs");
        let k = runs.len() as f64;
        let mean = |f: fn(&RunSummary) -> f64| runs.iter().map(f).sum::<f64>() / k;
        let avg = mean(|r| r.avg_grad_norm_sq);
        let var = if runs.len() > 1 {
            runs.iter()
                .map(|r| (r.avg_grad_norm_sq - avg).powi(2))
                .sum::<f64>()
                / (k - 1.0)
        } else {
            0.0
        };
        AggregateSummary {
            replicas: runs.len(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            avg_grad_norm_sq: avg,
            avg_grad_norm_sq_std_err: (var / k).sqrt(),
            final_f_gap: mean(|r| r.final_f_gap),
            mean_gamma: mean(|r| r.mean_gamma),
            max_gamma: mean(|r| r.max_gamma),
            cum_bits: mean(|r| r.cum_bits as f64),
            bits_per_interaction: mean(|r| r.bits_per_interaction),
            quantize_failures: runs.iter().map(|r| r.quantize_failures).sum(),
            mean_steps_per_node: mean(|r| r.mean_steps_per_node),
            bounds: runs[0].bounds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TopologyKind;

    #[test]
    fn mu_and_gamma_hand_values() {
        assert_eq!(compute_gamma(&vec![vec![3.0, 1.0]; 4]).unwrap(), 0.0);
        let two = [vec![0.0], vec![2.0]];
        assert_eq!(compute_mu(&two).unwrap(), vec![1.0]);
        assert_eq!(compute_gamma(&two).unwrap(), 2.0);
        let three = [vec![1.0], vec![2.0], vec![6.0]];
        assert_eq!(compute_mu(&three).unwrap(), vec![3.0]);
        assert_eq!(compute_gamma(&three).unwrap(), 14.0);
    }

    #[test]
    fn mu_errors() {
        let empty: [Vec<f64>; 0] = [];
        assert_eq!(compute_mu(&empty), Err(MetricsError::Empty));
        assert!(matches!(
            compute_gamma(&[vec![0.0], vec![1.0, 2.0]]),
            Err(MetricsError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn contraction_hand_values() {
        let k2 = Topology::build(TopologyKind::Complete, 2, 1, 0).unwrap();
        assert_eq!(exact_gamma_contraction(&k2, &[vec![0.0], vec![2.0]]).unwrap(), 0.0);
        let ring = Topology::build(TopologyKind::Ring, 8, 2, 0).unwrap();
        assert_eq!(exact_gamma_contraction(&ring, &vec![vec![1.0, 2.0]; 8]).unwrap(), 0.0);
        // Three nodes on a triangle, scalars {0, 0, 3}: averaging (0,1) keeps
        // Gamma = 6, averaging (0,2) or (1,2) gives {0, 1.5, 1.5} -> 1.5.
        let k3 = Topology::build(TopologyKind::Complete, 3, 2, 0).unwrap();
        let got = exact_gamma_contraction(&k3, &[vec![0.0], vec![0.0], vec![3.0]]).unwrap();
        assert!((got - (6.0 + 1.5 + 1.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_shared_columns() {
        let snap = MetricsSnapshot {
            t: 3,
            gamma: 0.5,
            grad_norm_sq_at_mu: 1.0,
            f_at_mu: 2.0,
            cum_bits: 64,
            quantize_failures: 0,
            per_node_steps: vec![1, 2],
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&snap)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), SNAPSHOT_COLUMNS.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "3,0.5,1,2,64,0,1;2");
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&snap)).unwrap();
        let back: MetricsSnapshot = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, snap);
    }
}
