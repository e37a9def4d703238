//! Simulator for decentralized SGD with pairwise gossip interactions.
//!
//! Nodes sit on an `r`-regular graph. At every global step an edge is drawn
//! uniformly at random and its two endpoints run some local SGD steps, then
//! average their models (blocking), average against a stale communication
//! copy (non-blocking), or do the latter over a lattice-quantized channel.

pub mod bounds;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod objectives;
pub mod protocol;
pub mod quantizer;
pub mod streams;
pub mod sweep;
pub mod topology;
pub mod vecmath;

pub use bounds::{bound_check, bound_lemma_gamma, bound_thm1, bound_thm2, BoundKind, BoundReport, TheoreticalBounds};
pub use config::{Center, MomentsSpec, ObjectiveSpec, QuantizerSpec, SimConfig, TopologySpec};
pub use engine::{run, EngineError, Experiment, RunOutput, RunResult, Simulation};
pub use metrics::{compute_gamma, compute_mu, exact_gamma_contraction, AggregateSummary, MetricsSnapshot, RunSummary};
pub use objectives::{estimate_moments, MomentsReport, Objective, Regime, RegimeKind};
pub use protocol::{LocalStepPolicy, NodeState, StepKind, Variant};
pub use quantizer::{QuantizedMessage, Quantizer, QuantizerConfig};
pub use topology::{laplacian_lambda2, Topology, TopologyKind};
