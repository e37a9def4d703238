//! Node state and the pairwise interaction rules.
//!
//! * [`interact_blocking`]: both nodes run their local steps, then both adopt
//!   the exact average.
//! * [`interact_nonblocking`]: each node averages its pre-step model with the
//!   partner's communication copy `X' = X + eta * h` (the partner's last
//!   half-state, missing its in-flight gradient batch), then applies its own
//!   fresh local steps on top.
//! * [`interact_quantized`]: as non-blocking, but each communication copy
//!   crosses the wire through the lattice [`Quantizer`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::Objective;
use crate::quantizer::{Quantizer, QuantizerError};
use crate::streams::SimRng;
use crate::vecmath::norm;

/// Any coordinate beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Bits charged per coordinate for an unquantized `f64` exchange.
pub const RAW_BITS_PER_COORD: u64 = 64;

/// Per-direction framing around a quantized message (a `u32` length prefix).
pub const FRAME_PREFIX_BITS: u64 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("node {node} diverged (non-finite or |x| > 1e12) during local steps")]
    Divergence { node: usize },
    #[error("nodes have dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Blocking,
    Nonblocking,
    Quantized,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Blocking => "blocking",
            Variant::Nonblocking => "nonblocking",
            Variant::Quantized => "quantized",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blocking" => Ok(Variant::Blocking),
            "nonblocking" | "non_blocking" | "non-blocking" => Ok(Variant::Nonblocking),
            "quantized" => Ok(Variant::Quantized),
            other => Err(format!("unknown variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Fixed,
    Geometric,
}

/// How many local steps a node takes when it is activated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalStepPolicy {
    pub kind: StepKind,
    pub mean_h: u32,
}

impl LocalStepPolicy {
    pub fn fixed(h: u32) -> Self {
        LocalStepPolicy {
            kind: StepKind::Fixed,
            mean_h: h,
        }
    }

    pub fn geometric(mean_h: u32) -> Self {
        LocalStepPolicy {
            kind: StepKind::Geometric,
            mean_h,
        }
    }

    /// Fixed: `mean_h`. Geometric: inverse-CDF draw on `{1, 2, ...}` with
    /// success probability `1 / mean_h`.
    pub fn sample(&self, rng: &mut SimRng) -> u32 {
        match self.kind {
            StepKind::Fixed => self.mean_h,
            StepKind::Geometric => {
                if self.mean_h <= 1 {
                    return 1;
                }
                let p = 1.0 / self.mean_h as f64;
                // 1 - U lies in (0, 1]
                let u = 1.0 - rng.random::<f64>();
                let k = (u.ln() / (1.0 - p).ln()).ceil();
                if k < 1.0 {
                    1
                } else if k >= u32::MAX as f64 {
                    u32::MAX
                } else {
                    k as u32
                }
            }
        }
    }
}

/// One agent's state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: usize,
    /// `X^i`.
    pub live_model: Vec<f64>,
    /// `X'^i`, the model other nodes read. Equals `live_model - pending_update`
    /// under the non-blocking rules and mirrors `live_model` otherwise.
    pub comm_copy: Vec<f64>,
    /// Index of the last interaction this node took part in, 0 if none.
    pub last_interaction: u64,
    /// `-eta * h` from the node's most recent local-step batch.
    pub pending_update: Vec<f64>,
    pub steps_taken: u64,
}

impl NodeState {
    pub fn new(id: usize, model: Vec<f64>) -> Self {
        let d = model.len();
        NodeState {
            id,
            comm_copy: model.clone(),
            live_model: model,
            last_interaction: 0,
            pending_update: vec![0.0; d],
            steps_taken: 0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.live_model.len()
    }
}

/// Result of running a batch of local SGD steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Sum of the stochastic gradients taken along the way.
    pub h_tilde_sum: Vec<f64>,
    pub steps: u32,
    /// `start - eta * h_tilde_sum` (up to rounding).
    pub final_model: Vec<f64>,
}

fn within_limits(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

/// `steps` iterations of `x <- x - eta * g_agent(x)` from `start`.
pub fn local_steps(
    start: &[f64],
    steps: u32,
    eta: f64,
    agent: usize,
    objective: &dyn Objective,
    rng: &mut SimRng,
) -> Result<LocalUpdate, ProtocolError> {
    let d = start.len();
    let mut x = start.to_vec();
    let mut sum = vec![0.0; d];
    let mut g = vec![0.0; d];
    for _ in 0..steps {
        objective.stochastic_gradient(agent, &x, rng, &mut g);
        for k in 0..d {
            x[k] -= eta * g[k];
            sum[k] += g[k];
        }
        if !within_limits(&x) {
            return Err(ProtocolError::Divergence { node: agent });
        }
    }
    Ok(LocalUpdate {
        h_tilde_sum: sum,
        steps,
        final_model: x,
    })
}

/// Shared parameters of one interaction.
#[derive(Debug, Clone, Copy)]
pub struct Exchange<'a> {
    /// Global interaction index, starting at 1.
    pub t: u64,
    pub eta: f64,
    pub policy: LocalStepPolicy,
    pub objective: &'a dyn Objective,
}

/// A node taking part in an interaction, with its own random stream.
pub struct Peer<'a> {
    pub state: &'a mut NodeState,
    pub rng: &'a mut SimRng,
}

impl<'a> Peer<'a> {
    pub fn new(state: &'a mut NodeState, rng: &'a mut SimRng) -> Self {
        Peer { state, rng }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InteractionOutcome {
    /// Bits exchanged in both directions.
    pub bits: u64,
    pub quantize_failures: u32,
    pub steps: [u32; 2],
    /// `||h_tilde||` of the batch each node just computed.
    pub h_norms: [f64; 2],
}

fn check_pair(a: &NodeState, b: &NodeState) -> Result<usize, ProtocolError> {
    if a.dimension() != b.dimension() {
        return Err(ProtocolError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    Ok(a.dimension())
}

fn run_local(ctx: &Exchange<'_>, peer: &mut Peer<'_>) -> Result<LocalUpdate, ProtocolError> {
    let steps = ctx.policy.sample(peer.rng);
    local_steps(&peer.state.live_model, steps, ctx.eta, peer.state.id, ctx.objective, peer.rng)
}

/// Local steps on both nodes followed by exact averaging.
pub fn interact_blocking(
    ctx: &Exchange<'_>,
    mut a: Peer<'_>,
    mut b: Peer<'_>,
) -> Result<InteractionOutcome, ProtocolError> {
    let d = check_pair(a.state, b.state)?;
    let ua = run_local(ctx, &mut a)?;
    let ub = run_local(ctx, &mut b)?;
    let avg: Vec<f64> = ua
        .final_model
        .iter()
        .zip(&ub.final_model)
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    for (state, update) in [(&mut *a.state, &ua), (&mut *b.state, &ub)] {
        state.live_model.clone_from(&avg);
        state.comm_copy.clone_from(&avg);
        state.pending_update.fill(0.0);
        state.last_interaction = ctx.t;
        state.steps_taken += update.steps as u64;
    }
    Ok(InteractionOutcome {
        bits: 2 * RAW_BITS_PER_COORD * d as u64,
        quantize_failures: 0,
        steps: [ua.steps, ub.steps],
        h_norms: [norm(&ua.h_tilde_sum), norm(&ub.h_tilde_sum)],
    })
}

/// Applies the non-blocking update given the copies each node received.
fn apply_stale_average(
    ctx: &Exchange<'_>,
    state: &mut NodeState,
    update: &LocalUpdate,
    received: &[f64],
) {
    let start = &state.live_model;
    let half: Vec<f64> = start.iter().zip(received).map(|(s, r)| (s + r) / 2.0).collect();
    let pending: Vec<f64> = update
        .final_model
        .iter()
        .zip(start)
        .map(|(x, s)| x - s)
        .collect();
    state.live_model = half.iter().zip(&pending).map(|(h, p)| h + p).collect();
    state.comm_copy = half;
    state.pending_update = pending;
    state.last_interaction = ctx.t;
    state.steps_taken += update.steps as u64;
}

/// Stale-copy averaging. `a` is the initiator; the update is symmetric.
pub fn interact_nonblocking(
    ctx: &Exchange<'_>,
    mut a: Peer<'_>,
    mut b: Peer<'_>,
) -> Result<InteractionOutcome, ProtocolError> {
    let d = check_pair(a.state, b.state)?;
    let ua = run_local(ctx, &mut a)?;
    let ub = run_local(ctx, &mut b)?;
    let copy_a = a.state.comm_copy.clone();
    let copy_b = b.state.comm_copy.clone();
    apply_stale_average(ctx, a.state, &ua, &copy_b);
    apply_stale_average(ctx, b.state, &ub, &copy_a);
    Ok(InteractionOutcome {
        bits: 2 * RAW_BITS_PER_COORD * d as u64,
        quantize_failures: 0,
        steps: [ua.steps, ub.steps],
        h_norms: [norm(&ua.h_tilde_sum), norm(&ub.h_tilde_sum)],
    })
}

/// Sends `copy` from `sender` to a receiver whose side information is
/// `side_info`. Falls back to the raw copy when decoding fails.
fn transmit(
    quantizer: &Quantizer,
    copy: &[f64],
    side_info: &[f64],
    sender_rng: &mut SimRng,
) -> Result<(Vec<f64>, u64, bool), ProtocolError> {
    let msg = quantizer.encode(copy, sender_rng)?;
    let wire = msg.to_wire();
    let bits = FRAME_PREFIX_BITS + msg.bit_cost();
    let received = crate::quantizer::QuantizedMessage::from_wire(&wire)?;
    match quantizer.decode(&received, side_info) {
        Ok(decoded) => Ok((decoded, bits, false)),
        Err(QuantizerError::DistanceCriterion { .. }) => {
            let fallback = RAW_BITS_PER_COORD * copy.len() as u64;
            Ok((copy.to_vec(), bits + fallback, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// Non-blocking interaction with quantized communication copies. Each node
/// decodes the partner's copy against its own live model.
pub fn interact_quantized(
    ctx: &Exchange<'_>,
    quantizer: &Quantizer,
    mut a: Peer<'_>,
    mut b: Peer<'_>,
) -> Result<InteractionOutcome, ProtocolError> {
    check_pair(a.state, b.state)?;
    let ua = run_local(ctx, &mut a)?;
    let ub = run_local(ctx, &mut b)?;
    let (for_a, bits_ab, fail_ab) = transmit(quantizer, &b.state.comm_copy, &a.state.live_model, b.rng)?;
    let (for_b, bits_ba, fail_ba) = transmit(quantizer, &a.state.comm_copy, &b.state.live_model, a.rng)?;
    apply_stale_average(ctx, a.state, &ua, &for_a);
    apply_stale_average(ctx, b.state, &ub, &for_b);
    Ok(InteractionOutcome {
        bits: bits_ab + bits_ba,
        quantize_failures: fail_ab as u32 + fail_ba as u32,
        steps: [ua.steps, ub.steps],
        h_norms: [norm(&ua.h_tilde_sum), norm(&ub.h_tilde_sum)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{ConstantObjective, NoisyQuadratic};
    use crate::quantizer::QuantizerConfig;
    use crate::streams::substream;

    fn ctx<'a>(obj: &'a dyn Objective, eta: f64, policy: LocalStepPolicy) -> Exchange<'a> {
        Exchange {
            t: 1,
            eta,
            policy,
            objective: obj,
        }
    }

    #[test]
    fn fixed_policy_is_constant() {
        let mut rng = substream(0, 1);
        let p = LocalStepPolicy::fixed(4);
        assert!((0..100).all(|_| p.sample(&mut rng) == 4));
    }

    #[test]
    fn geometric_mean_one_is_one() {
        let mut rng = substream(0, 1);
        let p = LocalStepPolicy::geometric(1);
        assert!((0..100).all(|_| p.sample(&mut rng) == 1));
    }

    #[test]
    fn one_and_two_explicit_steps() {
        let q = NoisyQuadratic::new(vec![0.0], 0.0).unwrap();
        let mut rng = substream(0, 1);
        let one = local_steps(&[1.0], 1, 0.1, 0, &q, &mut rng).unwrap();
        assert!((one.final_model[0] - 0.9).abs() < 1e-15);
        assert!((one.h_tilde_sum[0] - 1.0).abs() < 1e-15);
        let two = local_steps(&[1.0], 2, 0.1, 0, &q, &mut rng).unwrap();
        assert!((two.final_model[0] - 0.81).abs() < 1e-15);
        assert!((two.h_tilde_sum[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_local_steps_do_nothing() {
        let c = ConstantObjective::new(3, 1.0).unwrap();
        let mut rng = substream(0, 1);
        let u = local_steps(&[1.0, 2.0, 3.0], 17, 0.5, 0, &c, &mut rng).unwrap();
        assert_eq!(u.final_model, vec![1.0, 2.0, 3.0]);
        assert_eq!(u.h_tilde_sum, vec![0.0; 3]);
    }

    #[test]
    fn divergence_guard_trips() {
        let q = NoisyQuadratic::new(vec![0.0], 0.0).unwrap();
        let mut rng = substream(0, 1);
        // x <- (1 - 3) x doubles the magnitude each step
        let err = local_steps(&[1.0], 100, 3.0, 5, &q, &mut rng).unwrap_err();
        assert_eq!(err, ProtocolError::Divergence { node: 5 });
    }

    #[test]
    fn blocking_pure_averaging() {
        let c = ConstantObjective::new(2, 0.0).unwrap();
        let mut a = NodeState::new(0, vec![0.0, 0.0]);
        let mut b = NodeState::new(1, vec![2.0, 2.0]);
        let (mut ra, mut rb) = (substream(1, 1), substream(1, 2));
        let e = ctx(&c, 0.1, LocalStepPolicy::geometric(3));
        interact_blocking(&e, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)).unwrap();
        assert_eq!(a.live_model, vec![1.0, 1.0]);
        assert_eq!(b.live_model, vec![1.0, 1.0]);
        assert_eq!((a.last_interaction, b.last_interaction), (1, 1));
    }

    #[test]
    fn blocking_hand_computation() {
        let q = NoisyQuadratic::new(vec![0.0], 0.0).unwrap();
        let mut a = NodeState::new(0, vec![1.0]);
        let mut b = NodeState::new(1, vec![3.0]);
        let (mut ra, mut rb) = (substream(1, 1), substream(1, 2));
        let e = ctx(&q, 0.1, LocalStepPolicy::fixed(1));
        let out = interact_blocking(&e, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)).unwrap();
        assert!((a.live_model[0] - 1.8).abs() < 1e-15);
        assert_eq!(a.live_model, b.live_model);
        assert_eq!(out.steps, [1, 1]);
        assert_eq!(out.bits, 128);
    }

    #[test]
    fn nonblocking_first_interaction_matches_blocking_without_gradients() {
        let c = ConstantObjective::new(2, 0.0).unwrap();
        let mut a = NodeState::new(0, vec![0.0, 4.0]);
        let mut b = NodeState::new(1, vec![2.0, -2.0]);
        let (mut ra, mut rb) = (substream(1, 1), substream(1, 2));
        let e = ctx(&c, 0.1, LocalStepPolicy::fixed(2));
        interact_nonblocking(&e, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)).unwrap();
        assert_eq!(a.live_model, vec![1.0, 1.0]);
        assert_eq!(b.live_model, vec![1.0, 1.0]);
    }

    #[test]
    fn nonblocking_staleness_identity() {
        let q = NoisyQuadratic::new(vec![1.0, -1.0], 0.5).unwrap();
        let mut nodes = vec![
            NodeState::new(0, vec![0.3, 0.1]),
            NodeState::new(1, vec![-0.2, 0.4]),
        ];
        let (mut ra, mut rb) = (substream(2, 1), substream(2, 2));
        let policy = LocalStepPolicy::geometric(3);
        for t in 1..=50 {
            let e = Exchange {
                t,
                eta: 0.05,
                policy,
                objective: &q,
            };
            let (l, r) = nodes.split_at_mut(1);
            interact_nonblocking(&e, Peer::new(&mut l[0], &mut ra), Peer::new(&mut r[0], &mut rb)).unwrap();
            for node in &nodes {
                for k in 0..2 {
                    let gap = node.comm_copy[k] - node.live_model[k] + node.pending_update[k];
                    assert!(gap.abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn quantized_identical_lattice_aligned_copies_average_exactly() {
        let c = ConstantObjective::new(3, 0.0).unwrap();
        let quant = Quantizer::new(QuantizerConfig::new(0.25, 16, 3).unwrap());
        let mut a = NodeState::new(0, vec![0.5, -0.25, 1.0]);
        let mut b = NodeState::new(1, vec![0.5, -0.25, 1.0]);
        let (mut ra, mut rb) = (substream(3, 1), substream(3, 2));
        let e = ctx(&c, 0.1, LocalStepPolicy::fixed(1));
        let out = interact_quantized(&e, &quant, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)).unwrap();
        assert_eq!(a.live_model, vec![0.5, -0.25, 1.0]);
        assert_eq!(b.live_model, vec![0.5, -0.25, 1.0]);
        assert_eq!(out.quantize_failures, 0);
        assert_eq!(out.bits, 2 * (3 * 4 + 64 + FRAME_PREFIX_BITS));
    }

    #[test]
    fn quantized_failure_falls_back_to_raw_copy() {
        let c = ConstantObjective::new(1, 0.0).unwrap();
        let quant = Quantizer::new(QuantizerConfig::new(1.0, 8, 1).unwrap());
        let mut a = NodeState::new(0, vec![0.0]);
        let mut b = NodeState::new(1, vec![10.0]);
        let (mut ra, mut rb) = (substream(3, 1), substream(3, 2));
        let e = ctx(&c, 0.1, LocalStepPolicy::fixed(1));
        let out = interact_quantized(&e, &quant, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)).unwrap();
        assert_eq!(out.quantize_failures, 2);
        assert_eq!(a.live_model, vec![5.0]);
        assert_eq!(b.live_model, vec![5.0]);
        assert_eq!(out.bits, 2 * (3 + 64 + FRAME_PREFIX_BITS + 64));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let c = ConstantObjective::new(1, 0.0).unwrap();
        let mut a = NodeState::new(0, vec![0.0]);
        let mut b = NodeState::new(1, vec![0.0, 1.0]);
        let (mut ra, mut rb) = (substream(3, 1), substream(3, 2));
        let e = ctx(&c, 0.1, LocalStepPolicy::fixed(1));
        assert!(matches!(
            interact_blocking(&e, Peer::new(&mut a, &mut ra), Peer::new(&mut b, &mut rb)),
            Err(ProtocolError::DimensionMismatch { .. })
        ));
    }
}
