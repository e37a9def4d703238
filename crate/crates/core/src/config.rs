//! Serializable experiment configuration.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::objectives::{BoundedNonconvex, ConstantObjective, NoisyQuadratic, NoniidLogistic, Objective, ObjectiveError};
use crate::protocol::{LocalStepPolicy, Variant};
use crate::topology::{Topology, TopologyError, TopologyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    /// Required for `random_regular`; implied by the other families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    /// Seed for `random_regular`; defaults to the run's master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl TopologySpec {
    pub fn build(&self, n: usize, master_seed: u64) -> Result<Topology, TopologyError> {
        let r = match self.degree.or_else(|| self.kind.implied_degree(n)) {
            Some(r) => r,
            None => {
                return Err(TopologyError::Infeasible {
                    kind: self.kind,
                    n,
                    r: 0,
                    reason: "degree must be given (or n must be a power of two for hypercube)".into(),
                })
            }
        };
        Topology::build(self.kind, n, r, self.seed.unwrap_or(master_seed))
    }
}

/// Quadratic center: one value repeated, or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Center {
    Fill(f64),
    Vector(Vec<f64>),
}

impl Default for Center {
    fn default() -> Self {
        Center::Fill(1.0)
    }
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    NoisyQuadratic {
        dimension: usize,
        #[serde(default)]
        center: Center,
        #[serde(default)]
        noise_std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain_radius: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m_clip: Option<f64>,
    },
    BoundedNonconvex {
        dimension: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
    },
    NoniidLogistic {
        dimension: usize,
        samples_per_agent: usize,
        heterogeneity: f64,
        #[serde(default)]
        data_seed: u64,
    },
    Constant {
        dimension: usize,
        #[serde(default)]
        level: f64,
    },
}

impl ObjectiveSpec {
    pub fn dimension(&self) -> usize {
        match *self {
            ObjectiveSpec::NoisyQuadratic { dimension, .. }
            | ObjectiveSpec::BoundedNonconvex { dimension, .. }
            | ObjectiveSpec::NoniidLogistic { dimension, .. }
            | ObjectiveSpec::Constant { dimension, .. } => dimension,
        }
    }

    /// Builds the oracle for `n` agents.
    pub fn build(&self, n: usize) -> Result<Arc<dyn Objective>, ObjectiveError> {
        Ok(match self {
            ObjectiveSpec::NoisyQuadratic {
                dimension,
                center,
                noise_std,
                domain_radius,
                m_clip,
            } => {
                let center = match center {
                    Center::Fill(v) => vec![*v; *dimension],
                    Center::Vector(v) => {
                        if v.len() != *dimension {
                            return Err(ObjectiveError::InvalidParameter(format!(
                                "center has {} entries, dimension is {dimension}",
                                v.len()
                            )));
                        }
                        v.clone()
                    }
                };
                match (domain_radius, m_clip) {
                    (None, None) => Arc::new(NoisyQuadratic::new(center, *noise_std)?),
                    _ => {
                        let radius = domain_radius.unwrap_or_else(|| crate::vecmath::norm(&center).max(1.0));
                        Arc::new(NoisyQuadratic::with_domain(center, *noise_std, radius, *m_clip)?)
                    }
                }
            }
            ObjectiveSpec::BoundedNonconvex { dimension, noise_std } => {
                Arc::new(BoundedNonconvex::new(*dimension, *noise_std)?)
            }
            ObjectiveSpec::NoniidLogistic {
                dimension,
                samples_per_agent,
                heterogeneity,
                data_seed,
            } => Arc::new(NoniidLogistic::new(n, *samples_per_agent, *dimension, *heterogeneity, *data_seed)?),
            ObjectiveSpec::Constant { dimension, level } => Arc::new(ConstantObjective::new(*dimension, *level)?),
        })
    }
}

/// Quantizer parameters; unset fields are chosen from the run's estimated
/// constants (see [`crate::engine::Experiment::prepare`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_b: Option<u64>,
    /// Multiplier on the distance envelope used to size `range_b`.
    #[serde(default = "default_safety")]
    pub safety: f64,
}

fn default_safety() -> f64 {
    4.0
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec {
            epsilon: None,
            range_b: None,
            safety: default_safety(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSpec {
    /// Estimate constants and evaluate bounds. Required for quantized runs
    /// that leave the quantizer parameters unset.
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_probe_points")]
    pub probe_points: usize,
    #[serde(default = "default_draws")]
    pub draws_per_point: usize,
}

fn default_true() -> bool {
    true
}

fn default_probe_points() -> usize {
    16
}

fn default_draws() -> usize {
    200
}

impl Default for MomentsSpec {
    fn default() -> Self {
        MomentsSpec {
            enabled: true,
            probe_points: default_probe_points(),
            draws_per_point: default_draws(),
        }
    }
}

fn default_replicas() -> usize {
    1
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub total_t: u64,
    /// Learning rate; defaults to `n / sqrt(T)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub local_steps: LocalStepPolicy,
    pub variant: Variant,
    pub topology: TopologySpec,
    pub objective: ObjectiveSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantizer: Option<QuantizerSpec>,
    #[serde(default)]
    pub master_seed: u64,
    /// Snapshot cadence; defaults to `ceil(T / 1000)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_every: Option<u64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Per-node starting models; all zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_models: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub moments: MomentsSpec,
}

impl SimConfig {
    /// A minimal blocking configuration, handy as a starting point.
    pub fn new(n: usize, total_t: u64, topology: TopologySpec, objective: ObjectiveSpec) -> Self {
        SimConfig {
            n,
            total_t,
            eta: None,
            local_steps: LocalStepPolicy::fixed(1),
            variant: Variant::Blocking,
            topology,
            objective,
            quantizer: None,
            master_seed: 0,
            metrics_every: None,
            replicas: 1,
            initial_models: None,
            moments: MomentsSpec::default(),
        }
    }

    pub fn effective_eta(&self) -> f64 {
        self.eta.unwrap_or(self.n as f64 / (self.total_t as f64).sqrt())
    }

    pub fn effective_metrics_every(&self) -> u64 {
        self.metrics_every.unwrap_or(self.total_t.div_ceil(1000)).max(1)
    }

    /// Seed of replica `k`.
    pub fn replica_seed(&self, k: usize) -> u64 {
        self.master_seed.wrapping_add(k as u64)
    }
}
