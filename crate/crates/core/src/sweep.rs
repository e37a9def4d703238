//! One-axis parameter sweeps over a base configuration.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::engine::{EngineError, Experiment};
use crate::protocol::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "T")]
    T,
    #[serde(rename = "H")]
    H,
    #[serde(rename = "n")]
    N,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "variant")]
    Variant,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::T => "T",
            SweepAxis::H => "H",
            SweepAxis::N => "n",
            SweepAxis::Eta => "eta",
            SweepAxis::Variant => "variant",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T" | "t" | "total_t" => Ok(SweepAxis::T),
            "H" | "h" | "mean_h" => Ok(SweepAxis::H),
            "n" | "N" => Ok(SweepAxis::N),
            "eta" => Ok(SweepAxis::Eta),
            "variant" => Ok(SweepAxis::Variant),
            other => Err(format!("unknown sweep axis '{other}' (expected T, H, n, eta or variant)")),
        }
    }
}

/// Integer parse that also accepts exact scientific notation such as `1e4`.
fn parse_count(value: &str) -> Result<u64, String> {
    if let Ok(v) = value.parse::<u64>() {
        return Ok(v);
    }
    match value.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(v as u64),
        _ => Err(format!("'{value}' is not a non-negative integer")),
    }
}

/// `base` with one axis set to `value`. A learning rate or snapshot cadence
/// left unset in `base` keeps following its defaults for the new `T` and `n`.
pub fn apply_axis(base: &SimConfig, axis: SweepAxis, value: &str) -> Result<SimConfig, EngineError> {
    let bad = |e: String| EngineError::Config(format!("sweep {axis}: {e}"));
    let mut cfg = base.clone();
    match axis {
        SweepAxis::T => cfg.total_t = parse_count(value).map_err(bad)?,
        SweepAxis::H => {
            let h = parse_count(value).map_err(bad)?;
            cfg.local_steps.mean_h = u32::try_from(h).map_err(|_| bad(format!("{h} out of range")))?;
        }
        SweepAxis::N => {
            cfg.n = parse_count(value).map_err(bad)? as usize;
            if base.initial_models.is_some() {
                return Err(bad("initial_models is fixed to the base n".into()));
            }
        }
        SweepAxis::Eta => cfg.eta = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
        SweepAxis::Variant => cfg.variant = value.parse::<Variant>().map_err(bad)?,
    }
    Ok(cfg)
}

/// One row of a sweep table, aggregated over the point's replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub axis_value: String,
    pub replicas: usize,
    pub avg_grad_norm_sq: f64,
    pub avg_grad_norm_sq_std_err: f64,
    pub mean_gamma: f64,
    pub final_f_gap: f64,
    pub bits: f64,
    pub bits_per_interaction: f64,
    pub mean_steps_per_node: f64,
    pub quantize_failures: u64,
    pub bound_thm1: Option<f64>,
    pub bound_thm2: Option<f64>,
    pub bound_lemma_gamma: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "axis",
    "axis_value",
    "replicas",
    "avg_grad_norm_sq",
    "avg_grad_norm_sq_std_err",
    "mean_gamma",
    "final_f_gap",
    "bits",
    "bits_per_interaction",
    "mean_steps_per_node",
    "quantize_failures",
    "bound_thm1",
    "bound_thm2",
    "bound_lemma_gamma",
];

/// Runs one sweep point.
pub fn run_point(base: &SimConfig, axis: SweepAxis, value: &str) -> Result<SweepRow, EngineError> {
    let cfg = apply_axis(base, axis, value)?;
    let result = Experiment::prepare(&cfg)?.run_all()?;
    let a = result.aggregate;
    Ok(SweepRow {
        axis,
        axis_value: value.to_string(),
        replicas: a.replicas,
        avg_grad_norm_sq: a.avg_grad_norm_sq,
        avg_grad_norm_sq_std_err: a.avg_grad_norm_sq_std_err,
        mean_gamma: a.mean_gamma,
        final_f_gap: a.final_f_gap,
        bits: a.cum_bits,
        bits_per_interaction: a.bits_per_interaction,
        mean_steps_per_node: a.mean_steps_per_node,
        quantize_failures: a.quantize_failures,
        bound_thm1: a.bounds.thm1,
        bound_thm2: a.bounds.thm2,
        bound_lemma_gamma: a.bounds.lemma_gamma,
    })
}

/// Runs every point concurrently on the current rayon pool. Results come
/// back in the order of `values`; a failed point does not stop the others.
pub fn run_sweep(base: &SimConfig, axis: SweepAxis, values: &[String]) -> Vec<Result<SweepRow, EngineError>> {
    values.par_iter().map(|v| run_point(base, axis, v)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows as CSV under [`SWEEP_COLUMNS`]; missing bounds are empty cells.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            r.axis_value.clone(),
            r.replicas.to_string(),
            r.avg_grad_norm_sq.to_string(),
            r.avg_grad_norm_sq_std_err.to_string(),
            r.mean_gamma.to_string(),
            r.final_f_gap.to_string(),
            r.bits.to_string(),
            r.bits_per_interaction.to_string(),
            r.mean_steps_per_node.to_string(),
            r.quantize_failures.to_string(),
            opt(r.bound_thm1),
            opt(r.bound_thm2),
            opt(r.bound_lemma_gamma),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Center, ObjectiveSpec, TopologySpec};
    use crate::topology::TopologyKind;

    fn base() -> SimConfig {
        let topo = TopologySpec {
            kind: TopologyKind::Complete,
            degree: None,
            seed: None,
        };
        let obj = ObjectiveSpec::NoisyQuadratic {
            dimension: 2,
            center: Center::Fill(1.0),
            noise_std: 0.5,
            domain_radius: None,
            m_clip: None,
        };
        SimConfig::new(4, 1000, topo, obj)
    }

    #[test]
    fn axes_parse() {
        for (s, a) in [("T", SweepAxis::T), ("H", SweepAxis::H), ("n", SweepAxis::N), ("eta", SweepAxis::Eta)] {
            assert_eq!(s.parse::<SweepAxis>().unwrap(), a);
            assert_eq!(a.to_string(), s);
        }
        assert!("q".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn apply_keeps_default_eta_following_t() {
        let cfg = apply_axis(&base(), SweepAxis::T, "1e4").unwrap();
        assert_eq!(cfg.total_t, 10_000);
        assert!((cfg.effective_eta() - 4.0 / 100.0).abs() < 1e-15);
        let cfg = apply_axis(&base(), SweepAxis::Variant, "nonblocking").unwrap();
        assert_eq!(cfg.variant, Variant::Nonblocking);
        assert!(apply_axis(&base(), SweepAxis::T, "1.5").is_err());
        assert!(apply_axis(&base(), SweepAxis::Eta, "x").is_err());
    }

    #[test]
    fn variant_sweep_has_both_rows() {
        let values = vec!["blocking".to_string(), "nonblocking".to_string()];
        let rows: Vec<SweepRow> = run_sweep(&base(), SweepAxis::Variant, &values)
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(rows.len(), 2);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("variant,blocking"));
        assert!(text.contains("variant,nonblocking"));
    }

    #[test]
    fn h_sweep_keeps_bits_and_scales_steps() {
        let mut cfg = base();
        cfg.local_steps = crate::protocol::LocalStepPolicy::fixed(1);
        let values: Vec<String> = ["1", "2", "4"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<SweepRow> = run_sweep(&cfg, SweepAxis::H, &values)
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap();
        for r in &rows {
            assert_eq!(r.bits, rows[0].bits);
        }
        // fixed H: each interaction gives each endpoint exactly H steps
        let per_h = rows[0].mean_steps_per_node;
        assert!((rows[1].mean_steps_per_node / per_h - 2.0).abs() < 1e-12);
        assert!((rows[2].mean_steps_per_node / per_h - 4.0).abs() < 1e-12);
    }
}
