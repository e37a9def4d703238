//! Regular interaction graphs and their Laplacian spectral gap.
//!
//! A [`Topology`] is an undirected, connected, `r`-regular graph on `n`
//! nodes. The second-smallest eigenvalue of its Laplacian `L = D - A`
//! (`lambda2`) controls how fast pairwise averaging mixes, and appears in
//! every convergence bound evaluated by the engine.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::{substream, SimRng, TOPOLOGY_STREAM};

/// Maximum number of whole-graph regenerations while looking for a connected
/// random regular graph.
pub const CONNECTIVITY_RETRY_BUDGET: usize = 100;

/// Upper bound on restarts of the pairing procedure for a single attempt.
const PAIRING_RESTART_BUDGET: usize = 10_000;

/// Jacobi sweeps stop once the off-diagonal Frobenius norm drops below this.
const JACOBI_OFF_DIAGONAL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("infeasible {kind} topology with n = {n}, r = {r}: {reason}")]
    Infeasible {
        kind: TopologyKind,
        n: usize,
        r: usize,
        reason: String,
    },
    #[error("no connected random {r}-regular graph on {n} nodes after {attempts} attempts")]
    RetryBudgetExhausted { n: usize, r: usize, attempts: usize },
    #[error("expected {expected} models, got {got}")]
    ModelCount { expected: usize, got: usize },
    #[error("model {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
}

/// Graph family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Complete,
    Ring,
    Hypercube,
    RandomRegular,
}

impl TopologyKind {
    /// The degree forced by the family, if any.
    pub fn implied_degree(self, n: usize) -> Option<usize> {
        match self {
            TopologyKind::Complete => Some(n.saturating_sub(1)),
            TopologyKind::Ring => Some(2),
            TopologyKind::Hypercube => {
                if n.is_power_of_two() {
                    Some(n.trailing_zeros() as usize)
                } else {
                    None
                }
            }
            TopologyKind::RandomRegular => None,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TopologyKind::Complete => "complete",
            TopologyKind::Ring => "ring",
            TopologyKind::Hypercube => "hypercube",
            TopologyKind::RandomRegular => "random_regular",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "complete" => Ok(TopologyKind::Complete),
            "ring" => Ok(TopologyKind::Ring),
            "hypercube" => Ok(TopologyKind::Hypercube),
            "random_regular" | "random-regular" => Ok(TopologyKind::RandomRegular),
            other => Err(format!("unknown topology kind `{other}`")),
        }
    }
}

/// Immutable `r`-regular interaction graph.
#[derive(Debug)]
pub struct Topology {
    kind: TopologyKind,
    n: usize,
    degree: usize,
    /// Unordered edges stored as `(lo, hi)`.
    edges: Vec<(usize, usize)>,
    lambda2: OnceLock<f64>,
}

impl Clone for Topology {
    fn clone(&self) -> Self {
        let lambda2 = OnceLock::new();
        if let Some(v) = self.lambda2.get() {
            let _ = lambda2.set(*v);
        }
        Topology {
            kind: self.kind,
            n: self.n,
            degree: self.degree,
            edges: self.edges.clone(),
            lambda2,
        }
    }
}

/// JSON view printed by `graph-info`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TopologyInfo {
    pub kind: TopologyKind,
    pub n: usize,
    pub r: usize,
    pub edges: usize,
    pub lambda2: f64,
}

impl Topology {
    /// Builds a connected `r`-regular graph of the requested family.
    ///
    /// `seed` only matters for [`TopologyKind::RandomRegular`].
    pub fn build(kind: TopologyKind, n: usize, r: usize, seed: u64) -> Result<Self, TopologyError> {
        let infeasible = |reason: &str| TopologyError::Infeasible {
            kind,
            n,
            r,
            reason: reason.to_string(),
        };
        if n < 2 {
            return Err(infeasible("need at least 2 nodes"));
        }
        if r == 0 || r > n - 1 {
            return Err(infeasible("degree must satisfy 1 <= r <= n - 1"));
        }
        if !(n * r).is_multiple_of(2) {
            return Err(infeasible("n * r must be even"));
        }
        let edges = match kind {
            TopologyKind::Complete => {
                if r != n - 1 {
                    return Err(infeasible("complete graph requires r = n - 1"));
                }
                let mut edges = Vec::with_capacity(n * r / 2);
                for i in 0..n {
                    for j in (i + 1)..n {
                        edges.push((i, j));
                    }
                }
                edges
            }
            TopologyKind::Ring => {
                if r != 2 {
                    return Err(infeasible("ring requires r = 2"));
                }
                if n < 3 {
                    return Err(infeasible("ring requires n >= 3"));
                }
                (0..n).map(|i| ordered(i, (i + 1) % n)).collect()
            }
            TopologyKind::Hypercube => {
                if !n.is_power_of_two() || n.trailing_zeros() as usize != r {
                    return Err(infeasible("hypercube requires n = 2^r"));
                }
                let mut edges = Vec::with_capacity(n * r / 2);
                for i in 0..n {
                    for k in 0..r {
                        let j = i ^ (1 << k);
                        if i < j {
                            edges.push((i, j));
                        }
                    }
                }
                edges
            }
            TopologyKind::RandomRegular => {
                if r < 3 {
                    return Err(infeasible("random regular graphs require r >= 3"));
                }
                random_regular_edges(n, r, seed)?
            }
        };
        let topology = Topology {
            kind,
            n,
            degree: r,
            edges,
            lambda2: OnceLock::new(),
        };
        debug_assert!(topology.is_connected());
        Ok(topology)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.n, &self.edges)
    }

    /// Second-smallest Laplacian eigenvalue, computed once and cached.
    pub fn lambda2(&self) -> f64 {
        *self.lambda2.get_or_init(|| laplacian_lambda2(self))
    }

    /// Samples an edge uniformly and orients it by a fair coin, returning
    /// `(initiator, partner)`.
    pub fn sample_edge(&self, rng: &mut SimRng) -> (usize, usize) {
        let (a, b) = self.edges[rng.random_range(0..self.edges.len())];
        if rng.random::<bool>() {
            (a, b)
        } else {
            (b, a)
        }
    }

    /// `sum over edges (i, j) of ||X^i - X^j||^2`.
    pub fn pairwise_disagreement<M: AsRef<[f64]>>(&self, models: &[M]) -> Result<f64, TopologyError> {
        check_models(self.n, models)?;
        Ok(self
            .edges
            .iter()
            .map(|&(i, j)| squared_distance(models[i].as_ref(), models[j].as_ref()))
            .sum())
    }

    /// Dense Laplacian `D - A`, row major.
    pub fn laplacian(&self) -> Vec<f64> {
        let n = self.n;
        let mut lap = vec![0.0; n * n];
        for &(i, j) in &self.edges {
            lap[i * n + j] -= 1.0;
            lap[j * n + i] -= 1.0;
            lap[i * n + i] += 1.0;
            lap[j * n + j] += 1.0;
        }
        lap
    }

    pub fn info(&self) -> TopologyInfo {
        TopologyInfo {
            kind: self.kind,
            n: self.n,
            r: self.degree,
            edges: self.edges.len(),
            lambda2: self.lambda2(),
        }
    }
}

/// Second-smallest eigenvalue of the graph Laplacian via dense Jacobi sweeps.
pub fn laplacian_lambda2(topology: &Topology) -> f64 {
    let eig = symmetric_eigenvalues(topology.laplacian(), topology.n());
    eig[1].max(0.0)
}

/// All eigenvalues of a dense symmetric matrix (row major, `n x n`), sorted
/// ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a, n) < JACOBI_OFF_DIAGONAL_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = arp - s * (arq + tau * arp);
                    let new_rq = arq + s * (arp - tau * arq);
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[i * n + j] * a[i * n + j];
            }
        }
    }
    sum.sqrt()
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn check_models<M: AsRef<[f64]>>(n: usize, models: &[M]) -> Result<usize, TopologyError> {
    if models.len() != n {
        return Err(TopologyError::ModelCount {
            expected: n,
            got: models.len(),
        });
    }
    let d = models[0].as_ref().len();
    for (index, m) in models.iter().enumerate() {
        if m.as_ref().len() != d {
            return Err(TopologyError::DimensionMismatch {
                index,
                expected: d,
                got: m.as_ref().len(),
            });
        }
    }
    Ok(d)
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Pairing-model generation: node stubs are matched at random, pairs that
/// would create a self-loop or a multi-edge are rejected, and a dead end
/// restarts the whole pairing. Disconnected results are regenerated.
fn random_regular_edges(n: usize, r: usize, seed: u64) -> Result<Vec<(usize, usize)>, TopologyError> {
    let mut rng = substream(seed, TOPOLOGY_STREAM);
    for _ in 0..CONNECTIVITY_RETRY_BUDGET {
        let edges = simple_pairing(n, r, &mut rng).ok_or(TopologyError::RetryBudgetExhausted {
            n,
            r,
            attempts: PAIRING_RESTART_BUDGET,
        })?;
        if is_connected(n, &edges) {
            return Ok(edges);
        }
    }
    Err(TopologyError::RetryBudgetExhausted {
        n,
        r,
        attempts: CONNECTIVITY_RETRY_BUDGET,
    })
}

fn simple_pairing(n: usize, r: usize, rng: &mut SimRng) -> Option<Vec<(usize, usize)>> {
    'restart: for _ in 0..PAIRING_RESTART_BUDGET {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, r)).collect();
        stubs.shuffle(rng);
        let mut present: HashSet<(usize, usize)> = HashSet::with_capacity(n * r / 2);
        let mut edges = Vec::with_capacity(n * r / 2);
        while !stubs.is_empty() {
            let m = stubs.len();
            let mut placed = false;
            // A bounded number of random proposals, then give up on this pairing.
            for _ in 0..(4 * m).max(16) {
                let a = rng.random_range(0..m);
                let b = rng.random_range(0..m);
                if a == b {
                    continue;
                }
                let (u, v) = (stubs[a], stubs[b]);
                let e = ordered(u, v);
                if u == v || present.contains(&e) {
                    continue;
                }
                present.insert(e);
                edges.push(e);
                let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                stubs.swap_remove(hi);
                stubs.swap_remove(lo);
                placed = true;
                break;
            }
            if !placed {
                continue 'restart;
            }
        }
        edges.sort_unstable();
        return Some(edges);
    }
    None
}
