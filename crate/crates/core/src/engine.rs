//! Sequential simulation over global interaction indices `t = 1..T`.
//!
//! Each interaction samples an edge of the topology uniformly, dispatches to
//! the configured interaction rule, and every `metrics_every` interactions a
//! [`MetricsSnapshot`] is recorded. Runs are deterministic given the master
//! seed: the edge sampler and every agent own independent substreams.

use std::sync::Arc;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::bounds::{bound_lemma_gamma, bound_thm1, bound_thm2, TheoreticalBounds};
use crate::config::SimConfig;
use crate::metrics::{AggregateSummary, MetricsSnapshot, RunSummary};
use crate::objectives::{estimate_moments, MomentsReport, Objective, ObjectiveError, RegimeKind};
use crate::protocol::{
    interact_blocking, interact_nonblocking, interact_quantized, Exchange, InteractionOutcome, LocalStepPolicy,
    NodeState, Peer, ProtocolError, Variant,
};
use crate::quantizer::{range_for_distance, select_epsilon, Quantizer, QuantizerConfig, QuantizerError};
use crate::streams::{agent_stream, substream, SimRng, EDGE_STREAM};
use crate::topology::{Topology, TopologyError};
use crate::vecmath;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error("interaction {t}: {error}")]
    Protocol { t: u64, error: ProtocolError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node index {0} out of range")]
    NodeIndex(usize),
}

impl EngineError {
    /// True when the run was stopped by the divergence guard.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            EngineError::Protocol {
                error: ProtocolError::Divergence { .. },
                ..
            }
        )
    }
}

/// Live state of one run.
pub struct Simulation {
    topology: Arc<Topology>,
    objective: Arc<dyn Objective>,
    variant: Variant,
    policy: LocalStepPolicy,
    eta: f64,
    quantizer: Option<Quantizer>,
    nodes: Vec<NodeState>,
    agent_rngs: Vec<SimRng>,
    edge_rng: SimRng,
    t: u64,
    cum_bits: u64,
    quantize_failures: u64,
}

impl Simulation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        topology: Arc<Topology>,
        objective: Arc<dyn Objective>,
        variant: Variant,
        policy: LocalStepPolicy,
        eta: f64,
        quantizer: Option<QuantizerConfig>,
        seed: u64,
        initial_models: Vec<Vec<f64>>,
    ) -> Result<Self, EngineError> {
        let n = topology.n();
        if initial_models.len() != n {
            return Err(EngineError::Config(format!(
                "{} initial models for {n} nodes",
                initial_models.len()
            )));
        }
        let d = objective.dimension();
        if let Some(bad) = initial_models.iter().position(|m| m.len() != d) {
            return Err(EngineError::Config(format!(
                "initial model {bad} has dimension {}, objective has {d}",
                initial_models[bad].len()
            )));
        }
        if variant == Variant::Quantized && quantizer.is_none() {
            return Err(EngineError::Config("quantized variant needs a quantizer".into()));
        }
        if let Some(agents) = objective.agents() {
            if agents != n {
                return Err(EngineError::Config(format!("objective has {agents} agents, topology {n} nodes")));
            }
        }
        Ok(Simulation {
            topology,
            objective,
            variant,
            policy,
            eta,
            quantizer: quantizer.map(Quantizer::new),
            nodes: initial_models
                .into_iter()
                .enumerate()
                .map(|(i, m)| NodeState::new(i, m))
                .collect(),
            agent_rngs: (0..n).map(|i| agent_stream(seed, i)).collect(),
            edge_rng: substream(seed, EDGE_STREAM),
            t: 0,
            cum_bits: 0,
            quantize_failures: 0,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn cum_bits(&self) -> u64 {
        self.cum_bits
    }

    pub fn quantize_failures(&self) -> u64 {
        self.quantize_failures
    }

    pub fn models(&self) -> Vec<&[f64]> {
        self.nodes.iter().map(|s| s.live_model.as_slice()).collect()
    }

    pub fn mu(&self) -> Vec<f64> {
        vecmath::mean(&self.models())
    }

    /// Runs interaction `t + 1` between `initiator` and `partner`, whether or
    /// not they are adjacent.
    pub fn interact(&mut self, initiator: usize, partner: usize) -> Result<InteractionOutcome, EngineError> {
        let n = self.nodes.len();
        for idx in [initiator, partner] {
            if idx >= n {
                return Err(EngineError::NodeIndex(idx));
            }
        }
        if initiator == partner {
            return Err(EngineError::Config(format!("node {initiator} cannot interact with itself")));
        }
        let t = self.t + 1;
        let ctx = Exchange {
            t,
            eta: self.eta,
            policy: self.policy,
            objective: self.objective.as_ref(),
        };
        let (sa, sb) = pair_mut(&mut self.nodes, initiator, partner);
        let (ra, rb) = pair_mut(&mut self.agent_rngs, initiator, partner);
        let (a, b) = (Peer::new(sa, ra), Peer::new(sb, rb));
        let outcome = match self.variant {
            Variant::Blocking => interact_blocking(&ctx, a, b),
            Variant::Nonblocking => interact_nonblocking(&ctx, a, b),
            Variant::Quantized => {
                let q = self.quantizer.as_ref().expect("checked at construction");
                interact_quantized(&ctx, q, a, b)
            }
        }
        .map_err(|error| EngineError::Protocol { t, error })?;
        self.t = t;
        self.cum_bits += outcome.bits;
        self.quantize_failures += outcome.quantize_failures as u64;
        Ok(outcome)
    }

    /// Samples an edge and runs one interaction on it.
    pub fn step(&mut self) -> Result<(usize, usize, InteractionOutcome), EngineError> {
        let (i, j) = self.topology.sample_edge(&mut self.edge_rng);
        let outcome = self.interact(i, j)?;
        Ok((i, j, outcome))
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let models = self.models();
        let mu = vecmath::mean(&models);
        let mut grad = vec![0.0; mu.len()];
        self.objective.gradient(&mu, &mut grad);
        MetricsSnapshot {
            t: self.t,
            gamma: vecmath::spread(&models, &mu),
            grad_norm_sq_at_mu: vecmath::norm_sq(&grad),
            f_at_mu: self.objective.value(&mu),
            cum_bits: self.cum_bits,
            quantize_failures: self.quantize_failures,
            per_node_steps: self.nodes.iter().map(|s| s.steps_taken).collect(),
        }
    }
}

fn pair_mut<T>(items: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = items.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = items.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// A validated configuration with everything shared across replicas built
/// once: topology, objective, estimated constants, quantizer and bounds.
pub struct Experiment {
    config: SimConfig,
    topology: Arc<Topology>,
    objective: Arc<dyn Objective>,
    moments: Option<MomentsReport>,
    quantizer: Option<QuantizerConfig>,
    eta: f64,
    metrics_every: u64,
    initial_models: Vec<Vec<f64>>,
    f0_gap: f64,
    bounds: TheoreticalBounds,
}

/// Snapshots and summary of one replica.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<MetricsSnapshot>,
    pub summary: RunSummary,
}

/// All replicas of a configuration.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub replicas: Vec<RunOutput>,
    pub aggregate: AggregateSummary,
}

impl Experiment {
    pub fn prepare(config: &SimConfig) -> Result<Self, EngineError> {
        let cfg = config;
        if cfg.n < 2 {
            return Err(EngineError::Config(format!("n = {} (need >= 2)", cfg.n)));
        }
        if cfg.total_t == 0 {
            return Err(EngineError::Config("total_t must be >= 1".into()));
        }
        if cfg.replicas == 0 {
            return Err(EngineError::Config("replicas must be >= 1".into()));
        }
        if cfg.metrics_every == Some(0) {
            return Err(EngineError::Config("metrics_every must be >= 1".into()));
        }
        if cfg.local_steps.mean_h == 0 {
            return Err(EngineError::Config("local_steps.mean_h must be >= 1".into()));
        }
        let eta = cfg.effective_eta();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(EngineError::Config(format!("eta = {eta} (need > 0)")));
        }

        let topology = Arc::new(cfg.topology.build(cfg.n, cfg.master_seed)?);
        let objective = cfg.objective.build(cfg.n)?;
        let d = objective.dimension();
        let initial_models = match &cfg.initial_models {
            Some(models) => models.clone(),
            None => vec![vec![0.0; d]; cfg.n],
        };
        if initial_models.len() != cfg.n || initial_models.iter().any(|m| m.len() != d) {
            return Err(EngineError::Config(format!(
                "initial_models must hold {} vectors of dimension {d}",
                cfg.n
            )));
        }

        if cfg.total_t < (cfg.n as u64).saturating_pow(4) {
            warn!(
                "T = {} is below n^4 = {}; the convergence theorem's regime does not hold",
                cfg.total_t,
                (cfg.n as u64).saturating_pow(4)
            );
        }

        let moments = if cfg.moments.enabled {
            Some(estimate_moments(
                objective.as_ref(),
                cfg.moments.probe_points,
                cfg.moments.draws_per_point,
                cfg.master_seed,
            )?)
        } else {
            None
        };

        let mean_h = cfg.local_steps.mean_h as f64;
        let lambda2 = topology.lambda2();
        let r = topology.degree() as f64;
        let gamma_bound = moments
            .as_ref()
            .map(|m| bound_lemma_gamma(cfg.n, r, lambda2, eta, mean_h, m.m2_hat.value));

        let quantizer = if cfg.variant == Variant::Quantized {
            let spec = cfg.quantizer.clone().unwrap_or_default();
            let m_hat = moments.as_ref().map(|m| m.m2_hat.value.sqrt());
            let epsilon = match (spec.epsilon, m_hat) {
                (Some(e), _) => e,
                (None, Some(m)) if m > 0.0 => select_epsilon(eta, mean_h, m, d),
                _ => {
                    return Err(EngineError::Config(
                        "quantizer.epsilon unset and no positive M estimate to select it from".into(),
                    ))
                }
            };
            let range_b = match (spec.range_b, gamma_bound, m_hat) {
                (Some(b), _, _) => b,
                (None, Some(g), Some(m)) => {
                    let envelope = spec.safety * ((2.0 * g).sqrt() + 2.0 * eta * mean_h * m);
                    range_for_distance(envelope, epsilon)
                }
                _ => {
                    return Err(EngineError::Config(
                        "quantizer.range_b unset and moment estimation disabled".into(),
                    ))
                }
            };
            Some(QuantizerConfig::new(epsilon, range_b, d)?)
        } else {
            None
        };

        let mu0 = vecmath::mean(&initial_models);
        let f_star = objective.meta().f_star.unwrap_or(0.0);
        let f0_gap = objective.value(&mu0) - f_star;
        let t = cfg.total_t as f64;
        let bounds = match &moments {
            None => TheoreticalBounds::default(),
            Some(m) => match m.regime {
                RegimeKind::SecondMoment => TheoreticalBounds {
                    thm1: Some(bound_thm1(cfg.n, r, lambda2, mean_h, m.l_hat, m.m2_hat.value, t, f0_gap)),
                    thm2: None,
                    lemma_gamma: gamma_bound,
                },
                RegimeKind::NonIid => TheoreticalBounds {
                    thm1: None,
                    thm2: Some(bound_thm2(
                        cfg.n,
                        r,
                        lambda2,
                        mean_h,
                        m.l_hat,
                        m.sigma2_hat.value,
                        m.rho2_hat.map_or(0.0, |e| e.value),
                        t,
                        f0_gap,
                    )),
                    lemma_gamma: None,
                },
            },
        };

        Ok(Experiment {
            config: cfg.clone(),
            topology,
            objective,
            moments,
            quantizer,
            eta,
            metrics_every: cfg.effective_metrics_every(),
            initial_models,
            f0_gap,
            bounds,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn objective(&self) -> &Arc<dyn Objective> {
        &self.objective
    }

    pub fn moments(&self) -> Option<&MomentsReport> {
        self.moments.as_ref()
    }

    pub fn quantizer(&self) -> Option<&QuantizerConfig> {
        self.quantizer.as_ref()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn bounds(&self) -> TheoreticalBounds {
        self.bounds
    }

    /// Fresh simulation for replica `k`.
    pub fn simulation(&self, k: usize) -> Result<Simulation, EngineError> {
        Simulation::new(
            Arc::clone(&self.topology),
            Arc::clone(&self.objective),
            self.config.variant,
            self.config.local_steps,
            self.eta,
            self.quantizer,
            self.config.replica_seed(k),
            self.initial_models.clone(),
        )
    }

    /// Runs replica `k`, handing every snapshot to `sink` as it is taken.
    pub fn run_replica_with<F>(&self, k: usize, mut sink: F) -> Result<RunSummary, EngineError>
    where
        F: FnMut(&MetricsSnapshot),
    {
        let start = Instant::now();
        let total = self.config.total_t;
        let every = self.metrics_every;
        let mut sim = self.simulation(k)?;

        let mut grid_count = 0usize;
        let mut grad_sum = 0.0;
        let mut gamma_sum = 0.0;
        let mut gamma_max: f64 = 0.0;
        let mut record = |snap: &MetricsSnapshot| {
            if snap.t < total {
                grid_count += 1;
                grad_sum += snap.grad_norm_sq_at_mu;
                gamma_sum += snap.gamma;
                gamma_max = gamma_max.max(snap.gamma);
            }
        };

        let first = sim.snapshot();
        record(&first);
        sink(&first);
        let mut last = first;
        while sim.t() < total {
            sim.step()?;
            if sim.t() % every == 0 || sim.t() == total {
                last = sim.snapshot();
                record(&last);
                sink(&last);
            }
        }

        let f_star = self.objective.meta().f_star.unwrap_or(0.0);
        let n = self.config.n;
        let summary = RunSummary {
            variant: self.config.variant,
            regime: self.objective.meta().regime.kind(),
            seed: self.config.replica_seed(k),
            n,
            degree: self.topology.degree(),
            lambda2: self.topology.lambda2(),
            total_t: total,
            parallel_time: total as f64 / n as f64,
            eta: self.eta,
            mean_h: self.config.local_steps.mean_h as f64,
            metrics_every: every,
            avg_grad_norm_sq: grad_sum / grid_count as f64,
            f0_gap: self.f0_gap,
            final_f_gap: last.f_at_mu - f_star,
            max_gamma: gamma_max,
            mean_gamma: gamma_sum / grid_count as f64,
            cum_bits: sim.cum_bits(),
            bits_per_interaction: sim.cum_bits() as f64 / total as f64,
            quantize_failures: sim.quantize_failures(),
            mean_steps_per_node: last.per_node_steps.iter().sum::<u64>() as f64 / n as f64,
            precondition_t_ge_n4: total >= (n as u64).saturating_pow(4),
            quantizer: self.quantizer,
            moments: self.moments.clone(),
            bounds: self.bounds,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        Ok(summary)
    }

    pub fn run_replica(&self, k: usize) -> Result<RunOutput, EngineError> {
        let mut snapshots = Vec::new();
        let summary = self.run_replica_with(k, |s| snapshots.push(s.clone()))?;
        Ok(RunOutput { snapshots, summary })
    }

    /// Runs every replica (in parallel) and aggregates their summaries.
    pub fn run_all(&self) -> Result<RunResult, EngineError> {
        let replicas = (0..self.config.replicas)
            .into_par_iter()
            .map(|k| self.run_replica(k))
            .collect::<Result<Vec<_>, _>>()?;
        let summaries: Vec<RunSummary> = replicas.iter().map(|r| r.summary.clone()).collect();
        Ok(RunResult {
            aggregate: AggregateSummary::from_runs(&summaries),
            replicas,
        })
    }
}

/// Prepares and runs a configuration.
pub fn run(config: &SimConfig) -> Result<RunResult, EngineError> {
    Experiment::prepare(config)?.run_all()
}
