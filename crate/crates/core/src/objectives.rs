//! Stochastic-gradient oracles.
//!
//! Two regimes are supported:
//!
//! * **Second moment** – every agent samples unbiased gradients of the same
//!   `f`, and `E||g(x)||^2 <= M^2` holds on the oracle's certified domain.
//! * **Non-i.i.d.** – agent `i` samples unbiased gradients of its own `f_i`,
//!   with `f = (1/n) sum_i f_i`, per-agent variance at most `sigma^2` and
//!   cross-agent gradient dissimilarity at most `rho^2`.
//!
//! Declared constants are certificates only; the engine evaluates bounds with
//! the empirical constants returned by [`estimate_moments`].

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::{substream, SimRng, DATA_STREAM, MOMENTS_STREAM};
use crate::vecmath::{norm, norm_sq};

/// Ridge term added to every local logistic loss.
pub const LOGISTIC_RIDGE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("invalid objective parameter: {0}")]
    InvalidParameter(String),
    #[error("data set of {agents} agents x {samples} samples x {dimension} features overflows")]
    SizeOverflow {
        agents: usize,
        samples: usize,
        dimension: usize,
    },
    #[error("requested {requested} from a {regime} objective")]
    RegimeMismatch {
        requested: &'static str,
        regime: RegimeKind,
    },
}

/// Assumption regime and its declared constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    SecondMoment { m2: f64 },
    NonIid { sigma2: f64, rho2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    SecondMoment,
    NonIid,
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegimeKind::SecondMoment => f.write_str("second-moment"),
            RegimeKind::NonIid => f.write_str("non-i.i.d."),
        }
    }
}

impl Regime {
    pub fn kind(&self) -> RegimeKind {
        match self {
            Regime::SecondMoment { .. } => RegimeKind::SecondMoment,
            Regime::NonIid { .. } => RegimeKind::NonIid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveMeta {
    pub dimension: usize,
    /// Declared smoothness constant `L`.
    pub smoothness: f64,
    pub regime: Regime,
    /// Minimum value of `f`, when known.
    pub f_star: Option<f64>,
}

/// Ball from which [`estimate_moments`] draws probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// A differentiable objective with a stochastic-gradient oracle.
pub trait Objective: Send + Sync + fmt::Debug {
    fn meta(&self) -> &ObjectiveMeta;

    fn dimension(&self) -> usize {
        self.meta().dimension
    }

    fn value(&self, x: &[f64]) -> f64;

    /// Full gradient of `f`, written into `out`.
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Number of agents with distinct local functions (non-i.i.d. regime).
    fn agents(&self) -> Option<usize> {
        None
    }

    fn agent_value(&self, _agent: usize, x: &[f64]) -> f64 {
        self.value(x)
    }

    fn agent_gradient(&self, _agent: usize, x: &[f64], out: &mut [f64]) {
        self.gradient(x, out)
    }

    /// One stochastic gradient sample for `agent` at `x`.
    fn stochastic_gradient(&self, agent: usize, x: &[f64], rng: &mut SimRng, out: &mut [f64]);

    fn probe_region(&self) -> ProbeRegion;
}

/// Adds `N(0, std^2 I)` noise to `out`, norm-clipped at `clip`.
///
/// Norm clipping keeps the noise symmetric, hence mean zero.
fn add_clipped_noise(out: &mut [f64], std: f64, clip: f64, rng: &mut SimRng) {
    if std == 0.0 {
        return;
    }
    let mut noise: Vec<f64> = (0..out.len())
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let len = norm(&noise);
    if len > clip {
        let scale = clip / len;
        noise.iter_mut().for_each(|v| *v *= scale);
    }
    out.iter_mut().zip(&noise).for_each(|(o, n)| *o += n);
}

/// Default clipping radius: ten times one plus the largest gradient norm the
/// oracle can produce on its domain.
pub fn default_clip_radius(sup_grad_norm: f64) -> f64 {
    10.0 * (1.0 + sup_grad_norm)
}

/// `f(x) = 0.5 ||x - a||^2` with clipped Gaussian gradient noise.
///
/// The gradient is unbounded on all of `R^d`, so the second-moment
/// certificate `M^2 = M_clip^2` holds on the ball `||x - a|| <= domain_radius`.
#[derive(Debug, Clone)]
pub struct NoisyQuadratic {
    center: Vec<f64>,
    noise_std: f64,
    noise_clip: f64,
    domain_radius: f64,
    meta: ObjectiveMeta,
}

impl NoisyQuadratic {
    pub fn new(center: Vec<f64>, noise_std: f64) -> Result<Self, ObjectiveError> {
        let radius = norm(&center).max(1.0);
        Self::with_domain(center, noise_std, radius, None)
    }

    /// Full control over the certified domain radius and the clip radius
    /// `M_clip` (defaults to [`default_clip_radius`] of the domain radius).
    pub fn with_domain(
        center: Vec<f64>,
        noise_std: f64,
        domain_radius: f64,
        m_clip: Option<f64>,
    ) -> Result<Self, ObjectiveError> {
        if center.is_empty() {
            return Err(ObjectiveError::EmptyDimension);
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(ObjectiveError::InvalidParameter(format!("noise_std = {noise_std}")));
        }
        if !(domain_radius > 0.0) {
            return Err(ObjectiveError::InvalidParameter(format!("domain_radius = {domain_radius}")));
        }
        let m_clip = m_clip.unwrap_or_else(|| default_clip_radius(domain_radius));
        if m_clip <= domain_radius {
            return Err(ObjectiveError::InvalidParameter(format!(
                "M_clip = {m_clip} must exceed the domain gradient bound {domain_radius}"
            )));
        }
        let meta = ObjectiveMeta {
            dimension: center.len(),
            smoothness: 1.0,
            regime: Regime::SecondMoment { m2: m_clip * m_clip },
            f_star: Some(0.0),
        };
        Ok(NoisyQuadratic {
            center,
            noise_std,
            noise_clip: m_clip - domain_radius,
            domain_radius,
            meta,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }
}

impl Objective for NoisyQuadratic {
    fn meta(&self) -> &ObjectiveMeta {
        &self.meta
    }

    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(&self.center) {
            *o = a - b;
        }
    }

    fn stochastic_gradient(&self, _agent: usize, x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        self.gradient(x, out);
        add_clipped_noise(out, self.noise_std, self.noise_clip, rng);
    }

    fn probe_region(&self) -> ProbeRegion {
        ProbeRegion {
            center: self.center.clone(),
            radius: self.domain_radius,
        }
    }
}

/// A constant function: every gradient, stochastic or not, is exactly zero.
#[derive(Debug, Clone)]
pub struct ConstantObjective {
    level: f64,
    meta: ObjectiveMeta,
}

impl ConstantObjective {
    pub fn new(dimension: usize, level: f64) -> Result<Self, ObjectiveError> {
        if dimension == 0 {
            return Err(ObjectiveError::EmptyDimension);
        }
        Ok(ConstantObjective {
            level,
            meta: ObjectiveMeta {
                dimension,
                smoothness: 0.0,
                regime: Regime::SecondMoment { m2: 0.0 },
                f_star: Some(level),
            },
        })
    }
}

impl Objective for ConstantObjective {
    fn meta(&self) -> &ObjectiveMeta {
        &self.meta
    }

    fn value(&self, _x: &[f64]) -> f64 {
        self.level
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn stochastic_gradient(&self, _agent: usize, _x: &[f64], _rng: &mut SimRng, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn probe_region(&self) -> ProbeRegion {
        ProbeRegion {
            center: vec![0.0; self.meta.dimension],
            radius: 1.0,
        }
    }
}

/// `f(x) = sum_k x_k^2 / (1 + x_k^2)`: smooth, non-convex, with globally
/// bounded gradients.
///
/// Per coordinate `|f'| <= 3 sqrt(3) / 8` (attained at `x = 1/sqrt(3)`) and
/// `|f''| <= 2` (attained at 0), so `L = 2`.
#[derive(Debug, Clone)]
pub struct BoundedNonconvex {
    noise_std: f64,
    noise_clip: f64,
    meta: ObjectiveMeta,
}

impl BoundedNonconvex {
    pub const COORD_GRAD_BOUND: f64 = 0.649_519_052_838_329; // 3 * sqrt(3) / 8

    pub fn new(dimension: usize, noise_std: f64) -> Result<Self, ObjectiveError> {
        if dimension == 0 {
            return Err(ObjectiveError::EmptyDimension);
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(ObjectiveError::InvalidParameter(format!("noise_std = {noise_std}")));
        }
        let sup = Self::COORD_GRAD_BOUND * (dimension as f64).sqrt();
        let m_clip = default_clip_radius(sup);
        Ok(BoundedNonconvex {
            noise_std,
            noise_clip: m_clip - sup,
            meta: ObjectiveMeta {
                dimension,
                smoothness: 2.0,
                regime: Regime::SecondMoment { m2: m_clip * m_clip },
                f_star: Some(0.0),
            },
        })
    }

    /// Supremum of `||grad f||` over `R^d`.
    pub fn sup_gradient_norm(&self) -> f64 {
        Self::COORD_GRAD_BOUND * (self.meta.dimension as f64).sqrt()
    }
}

impl Objective for BoundedNonconvex {
    fn meta(&self) -> &ObjectiveMeta {
        &self.meta
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v / (1.0 + v * v)).sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            let q = 1.0 + v * v;
            *o = 2.0 * v / (q * q);
        }
    }

    fn stochastic_gradient(&self, _agent: usize, x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        self.gradient(x, out);
        add_clipped_noise(out, self.noise_std, self.noise_clip, rng);
    }

    fn probe_region(&self) -> ProbeRegion {
        ProbeRegion {
            center: vec![0.0; self.meta.dimension],
            radius: (self.meta.dimension as f64).sqrt(),
        }
    }
}

/// Local data set of one agent, row-major features and `±1` labels.
#[derive(Debug, Clone)]
struct AgentData {
    features: Vec<f64>,
    labels: Vec<f64>,
}

/// Ridge-regularized logistic regression with data split across agents.
///
/// Samples come from agent-specific clusters: cluster `k` is shifted along
/// coordinate `k mod d` and odd clusters flip their labels. `heterogeneity`
/// is the fraction of each cluster that stays with its own agent; the rest
/// is pooled, shuffled and dealt back evenly.
#[derive(Debug, Clone)]
pub struct NoniidLogistic {
    agents: Vec<AgentData>,
    samples_per_agent: usize,
    heterogeneity: f64,
    meta: ObjectiveMeta,
}

impl NoniidLogistic {
    pub fn new(
        n_agents: usize,
        samples_per_agent: usize,
        dimension: usize,
        heterogeneity: f64,
        seed: u64,
    ) -> Result<Self, ObjectiveError> {
        if dimension == 0 {
            return Err(ObjectiveError::EmptyDimension);
        }
        if n_agents < 2 {
            return Err(ObjectiveError::InvalidParameter(format!("n_agents = {n_agents} (need >= 2)")));
        }
        if samples_per_agent == 0 {
            return Err(ObjectiveError::InvalidParameter("samples_per_agent = 0".into()));
        }
        if !(0.0..=1.0).contains(&heterogeneity) {
            return Err(ObjectiveError::InvalidParameter(format!("heterogeneity = {heterogeneity}")));
        }
        n_agents
            .checked_mul(samples_per_agent)
            .and_then(|t| t.checked_mul(dimension))
            .filter(|&t| t <= isize::MAX as usize / 8)
            .ok_or(ObjectiveError::SizeOverflow {
                agents: n_agents,
                samples: samples_per_agent,
                dimension,
            })?;

        let mut rng = substream(seed, DATA_STREAM);
        let truth: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
        let mut clusters: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(n_agents);
        for k in 0..n_agents {
            let axis = k % dimension;
            let sign = if (k / dimension).is_multiple_of(2) { 1.5 } else { -1.5 };
            let flip = k % 2 == 1;
            let samples = (0..samples_per_agent)
                .map(|_| {
                    let mut x: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
                    x[axis] += sign;
                    let z: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
                    let mut y = if rng.random::<f64>() < sigmoid(z) { 1.0 } else { -1.0 };
                    if flip {
                        y = -y;
                    }
                    (x, y)
                })
                .collect();
            clusters.push(samples);
        }

        // Pool the non-resident share of every cluster and deal it back.
        let keep = (heterogeneity * samples_per_agent as f64).round() as usize;
        let mut pool = Vec::new();
        for cluster in clusters.iter_mut() {
            use rand::seq::SliceRandom;
            cluster.shuffle(&mut rng);
            pool.extend(cluster.drain(keep..));
        }
        {
            use rand::seq::SliceRandom;
            pool.shuffle(&mut rng);
        }
        let give_back = samples_per_agent - keep;
        for cluster in clusters.iter_mut() {
            cluster.extend(pool.drain(pool.len() - give_back..));
        }

        let mut max_row_sq: f64 = 0.0;
        let agents: Vec<AgentData> = clusters
            .into_iter()
            .map(|cluster| {
                let mut features = Vec::with_capacity(samples_per_agent * dimension);
                let mut labels = Vec::with_capacity(samples_per_agent);
                for (x, y) in cluster {
                    max_row_sq = max_row_sq.max(norm_sq(&x));
                    features.extend(x);
                    labels.push(y);
                }
                AgentData { features, labels }
            })
            .collect();

        // |per-sample gradient| <= ||row|| + ridge term common to all agents,
        // so sigma^2 <= max||row||^2 and rho^2 <= 4 max||row||^2.
        let meta = ObjectiveMeta {
            dimension,
            smoothness: 0.25 * max_row_sq + LOGISTIC_RIDGE,
            regime: Regime::NonIid {
                sigma2: max_row_sq,
                rho2: 4.0 * max_row_sq,
            },
            f_star: None,
        };
        let mut objective = NoniidLogistic {
            agents,
            samples_per_agent,
            heterogeneity,
            meta,
        };
        objective.meta.f_star = Some(objective.solve_minimum());
        Ok(objective)
    }

    pub fn heterogeneity(&self) -> f64 {
        self.heterogeneity
    }

    /// Gradient descent with step `1/L` on the strongly convex `f`.
    fn solve_minimum(&self) -> f64 {
        let d = self.meta.dimension;
        let step = 1.0 / self.meta.smoothness;
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        for _ in 0..200_000 {
            self.gradient(&x, &mut g);
            if norm_sq(&g) < 1e-24 {
                break;
            }
            x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
        }
        self.value(&x)
    }

    fn sample_loss(x: &[f64], row: &[f64], y: f64) -> f64 {
        let margin = y * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        softplus(-margin)
    }

    /// Adds `coef * grad loss(row, y)` at `x` into `out`.
    fn add_sample_gradient(x: &[f64], row: &[f64], y: f64, coef: f64, out: &mut [f64]) {
        let margin = y * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let w = -y * sigmoid(-margin) * coef;
        out.iter_mut().zip(row).for_each(|(o, r)| *o += w * r);
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Objective for NoniidLogistic {
    fn meta(&self) -> &ObjectiveMeta {
        &self.meta
    }

    fn value(&self, x: &[f64]) -> f64 {
        let n = self.agents.len() as f64;
        (0..self.agents.len()).map(|i| self.agent_value(i, x)).sum::<f64>() / n
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.agents.len() as f64;
        let mut tmp = vec![0.0; x.len()];
        out.fill(0.0);
        for i in 0..self.agents.len() {
            self.agent_gradient(i, x, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t / n);
        }
    }

    fn agents(&self) -> Option<usize> {
        Some(self.agents.len())
    }

    fn agent_value(&self, agent: usize, x: &[f64]) -> f64 {
        let data = &self.agents[agent];
        let d = self.meta.dimension;
        let loss: f64 = data
            .features
            .chunks_exact(d)
            .zip(&data.labels)
            .map(|(row, &y)| Self::sample_loss(x, row, y))
            .sum::<f64>()
            / self.samples_per_agent as f64;
        loss + 0.5 * LOGISTIC_RIDGE * norm_sq(x)
    }

    fn agent_gradient(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        let data = &self.agents[agent];
        let d = self.meta.dimension;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = LOGISTIC_RIDGE * xi;
        }
        let coef = 1.0 / self.samples_per_agent as f64;
        for (row, &y) in data.features.chunks_exact(d).zip(&data.labels) {
            Self::add_sample_gradient(x, row, y, coef, out);
        }
    }

    fn stochastic_gradient(&self, agent: usize, x: &[f64], rng: &mut SimRng, out: &mut [f64]) {
        let data = &self.agents[agent];
        let d = self.meta.dimension;
        let s = rng.random_range(0..self.samples_per_agent);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = LOGISTIC_RIDGE * xi;
        }
        Self::add_sample_gradient(x, &data.features[s * d..(s + 1) * d], data.labels[s], 1.0, out);
    }

    fn probe_region(&self) -> ProbeRegion {
        ProbeRegion {
            center: vec![0.0; self.meta.dimension],
            radius: 1.0,
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_samples(samples: &[f64]) -> Self {
        let k = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / k;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Estimate {
            value: mean,
            std_err: (var / k).sqrt(),
        }
    }

    fn exact(value: f64) -> Self {
        Estimate { value, std_err: 0.0 }
    }
}

/// Empirical constants of an oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsReport {
    pub regime: RegimeKind,
    pub probe_points: usize,
    pub draws_per_point: usize,
    /// Max over probe points of the mean `||g||^2`.
    pub m2_hat: Estimate,
    /// Max over probe points of the mean `||g_i - grad f_i||^2`.
    pub sigma2_hat: Estimate,
    /// Max over probe points of `(1/n) sum_i ||grad f_i - grad f||^2`.
    pub rho2_hat: Option<Estimate>,
    /// Largest observed secant ratio `||grad(x) - grad(y)|| / ||x - y||`.
    pub l_hat: f64,
}

impl MomentsReport {
    pub fn m2(&self) -> Result<Estimate, ObjectiveError> {
        match self.regime {
            RegimeKind::SecondMoment => Ok(self.m2_hat),
            regime => Err(ObjectiveError::RegimeMismatch { requested: "M2", regime }),
        }
    }

    pub fn rho2(&self) -> Result<Estimate, ObjectiveError> {
        self.rho2_hat.ok_or(ObjectiveError::RegimeMismatch {
            requested: "rho2",
            regime: self.regime,
        })
    }
}

fn sample_ball(region: &ProbeRegion, rng: &mut SimRng) -> Vec<f64> {
    let d = region.center.len();
    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let len = norm(&dir).max(f64::MIN_POSITIVE);
    let radius = region.radius * rng.random::<f64>().powf(1.0 / d as f64);
    region
        .center
        .iter()
        .zip(&dir)
        .map(|(c, u)| c + radius * u / len)
        .collect()
}

/// Monte-Carlo certification of an oracle's constants at random probe points
/// drawn from its [`ProbeRegion`].
pub fn estimate_moments(
    objective: &dyn Objective,
    probe_points: usize,
    draws_per_point: usize,
    seed: u64,
) -> Result<MomentsReport, ObjectiveError> {
    if draws_per_point < 100 {
        return Err(ObjectiveError::InvalidParameter(format!(
            "draws_per_point = {draws_per_point} (need >= 100)"
        )));
    }
    if probe_points == 0 {
        return Err(ObjectiveError::InvalidParameter("probe_points = 0".into()));
    }
    let d = objective.dimension();
    let regime = objective.meta().regime.kind();
    let agents = objective.agents().unwrap_or(1);
    let region = objective.probe_region();
    let mut rng = substream(seed, MOMENTS_STREAM);

    let mut best_m2: Option<Estimate> = None;
    let mut best_sigma2: Option<Estimate> = None;
    let mut best_rho2: Option<f64> = None;
    let mut points = Vec::with_capacity(probe_points);
    let mut g = vec![0.0; d];
    let mut full = vec![0.0; d];
    let mut local: Vec<Vec<f64>> = vec![vec![0.0; d]; agents];

    for _ in 0..probe_points {
        let x = sample_ball(&region, &mut rng);
        objective.gradient(&x, &mut full);
        for (i, li) in local.iter_mut().enumerate() {
            objective.agent_gradient(i, &x, li);
        }
        let mut second = Vec::with_capacity(draws_per_point);
        let mut centered = Vec::with_capacity(draws_per_point);
        for k in 0..draws_per_point {
            let agent = k % agents;
            objective.stochastic_gradient(agent, &x, &mut rng, &mut g);
            second.push(norm_sq(&g));
            centered.push(g.iter().zip(&local[agent]).map(|(a, b)| (a - b) * (a - b)).sum());
        }
        let m2 = Estimate::from_samples(&second);
        let s2 = Estimate::from_samples(&centered);
        if best_m2.is_none_or(|b| m2.value > b.value) {
            best_m2 = Some(m2);
        }
        if best_sigma2.is_none_or(|b| s2.value > b.value) {
            best_sigma2 = Some(s2);
        }
        if regime == RegimeKind::NonIid {
            let rho2 = local
                .iter()
                .map(|li| li.iter().zip(&full).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / agents as f64;
            best_rho2 = Some(best_rho2.map_or(rho2, |b: f64| b.max(rho2)));
        }
        points.push(x);
    }

    let l_hat = secant_smoothness(objective, &points, region.radius, &mut rng);
    Ok(MomentsReport {
        regime,
        probe_points,
        draws_per_point,
        m2_hat: best_m2.expect("at least one probe point"),
        sigma2_hat: best_sigma2.expect("at least one probe point"),
        rho2_hat: best_rho2.map(Estimate::exact),
        l_hat,
    })
}

/// Max secant ratio over all probe pairs and over a short random
/// perturbation of each probe point, for `f` and every local `f_i`.
fn secant_smoothness(objective: &dyn Objective, points: &[Vec<f64>], radius: f64, rng: &mut SimRng) -> f64 {
    let d = objective.dimension();
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (a, x) in points.iter().enumerate() {
        for y in &points[a + 1..] {
            pairs.push((x.clone(), y.clone()));
        }
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm(&dir).max(f64::MIN_POSITIVE);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(xi, u)| xi + 0.1 * radius * u / len).collect();
        pairs.push((x.clone(), y));
    }
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];
    let mut best: f64 = 0.0;
    for (x, y) in &pairs {
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let mut ratio = |gx: &[f64], gy: &[f64]| {
            let num = gx.iter().zip(gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            best = best.max(num / dist);
        };
        objective.gradient(x, &mut gx);
        objective.gradient(y, &mut gy);
        ratio(&gx, &gy);
        if let Some(agents) = objective.agents() {
            for i in 0..agents {
                objective.agent_gradient(i, x, &mut gx);
                objective.agent_gradient(i, y, &mut gy);
                ratio(&gx, &gy);
            }
        }
    }
    best
}
