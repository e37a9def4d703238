use proptest::prelude::*;
use swarm_core::config::{Center, ObjectiveSpec, SimConfig, TopologySpec};
use swarm_core::engine::Experiment;
use swarm_core::metrics::{compute_gamma, compute_mu, exact_gamma_contraction};
use swarm_core::protocol::{LocalStepPolicy, Variant};
use swarm_core::quantizer::{QuantizedMessage, Quantizer, QuantizerConfig};
use swarm_core::streams::substream;
use swarm_core::topology::{Topology, TopologyKind};
use swarm_core::vecmath::norm;

fn models(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), n)
}

fn graph() -> impl Strategy<Value = Topology> {
    prop_oneof![
        (2usize..12).prop_map(|n| Topology::build(TopologyKind::Complete, n, n - 1, 0).unwrap()),
        (3usize..16).prop_map(|n| Topology::build(TopologyKind::Ring, n, 2, 0).unwrap()),
        (1u32..5).prop_map(|k| Topology::build(TopologyKind::Hypercube, 1 << k, k as usize, 0).unwrap()),
        (0u64..1000).prop_map(|s| Topology::build(TopologyKind::RandomRegular, 12, 3, s).unwrap()),
    ]
}

fn graph_and_models() -> impl Strategy<Value = (Topology, Vec<Vec<f64>>)> {
    (graph(), 1usize..5).prop_flat_map(|(g, d)| {
        let n = g.n();
        (Just(g), models(n, d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn disagreement_dominates_spectral_gap_times_gamma((g, x) in graph_and_models()) {
        let gamma = compute_gamma(&x).unwrap();
        let dis = g.pairwise_disagreement(&x).unwrap();
        prop_assert!(dis >= g.lambda2() * gamma - 1e-9 * gamma.max(1.0));
    }

    #[test]
    fn zero_gradient_contraction((g, x) in graph_and_models()) {
        let gamma = compute_gamma(&x).unwrap();
        let next = exact_gamma_contraction(&g, &x).unwrap();
        let factor = 1.0 - g.lambda2() / (g.degree() as f64 * g.n() as f64);
        prop_assert!(next <= factor * gamma + 1e-9 * gamma.max(1.0));
    }

    #[test]
    fn random_regular_is_simple_regular_connected(half in 2usize..15, r in 3usize..6, seed in 0u64..10_000) {
        let n = 2 * half;
        prop_assume!(r < n);
        let g = Topology::build(TopologyKind::RandomRegular, n, r, seed).unwrap();
        prop_assert!(g.degrees().iter().all(|&k| k == r));
        prop_assert!(g.is_connected());
        let mut edges = g.edges().to_vec();
        prop_assert!(edges.iter().all(|&(a, b)| a < b));
        edges.sort_unstable();
        edges.dedup();
        prop_assert_eq!(edges.len(), n * r / 2);
    }

    #[test]
    fn quantizer_decodes_inside_success_radius(
        x in prop::collection::vec(-50.0..50.0f64, 1..6),
        frac in prop::collection::vec(-1.0..1.0f64, 6),
        log_b in 2u32..12,
        eps in 0.01..1.0f64,
        seed in 0u64..1000,
    ) {
        let d = x.len();
        let cfg = QuantizerConfig::new(eps, 1 << log_b, d).unwrap();
        let q = Quantizer::new(cfg);
        let radius = cfg.success_radius();
        let y: Vec<f64> = x.iter().zip(&frac).map(|(v, f)| v + f * radius).collect();
        let mut rng = substream(seed, 0);
        let msg = q.encode(&x, &mut rng).unwrap();
        let back = QuantizedMessage::from_wire(&msg.to_wire()).unwrap();
        prop_assert_eq!(&back, &msg);
        let out = q.decode(&back, &y).unwrap();
        let err = norm(&x.iter().zip(&out).map(|(a, b)| a - b).collect::<Vec<_>>());
        prop_assert!(err <= cfg.round_trip_error_bound() + 1e-12);
        prop_assert_eq!(msg.bit_cost(), d as u64 * log_b as u64 + 64);
    }

    #[test]
    fn geometric_local_steps_are_positive(h in 1u32..64, seed in 0u64..1000) {
        let p = LocalStepPolicy::geometric(h);
        let mut rng = substream(seed, 1);
        prop_assert!((0..200).all(|_| p.sample(&mut rng) >= 1));
    }
}

fn quadratic_config(variant: Variant, seed: u64, noise: f64) -> SimConfig {
    let topo = TopologySpec {
        kind: TopologyKind::RandomRegular,
        degree: Some(3),
        seed: None,
    };
    let obj = ObjectiveSpec::NoisyQuadratic {
        dimension: 3,
        center: Center::Vector(vec![1.0, -1.0, 0.5]),
        noise_std: noise,
        domain_radius: None,
        m_clip: None,
    };
    let mut cfg = SimConfig::new(8, 400, topo, obj);
    cfg.variant = variant;
    cfg.local_steps = LocalStepPolicy::geometric(3);
    cfg.master_seed = seed;
    cfg.eta = Some(0.05);
    cfg.moments.enabled = false;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn blocking_mean_drift_bounded_per_step(seed in 0u64..10_000) {
        let cfg = quadratic_config(Variant::Blocking, seed, 0.5);
        let exp = Experiment::prepare(&cfg).unwrap();
        let mut sim = exp.simulation(0).unwrap();
        let n = 8.0;
        for _ in 0..400 {
            let before = sim.mu();
            let (_, _, out) = sim.step().unwrap();
            let after = sim.mu();
            let drift = norm(&after.iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<_>>());
            prop_assert!(drift <= 2.0 * 0.05 / n * (out.h_norms[0] + out.h_norms[1]) + 1e-12);
        }
    }

    #[test]
    fn snapshot_streams_reproducible(seed in 0u64..10_000, v in 0usize..2) {
        let variant = [Variant::Blocking, Variant::Nonblocking][v];
        let cfg = quadratic_config(variant, seed, 1.0);
        let a = Experiment::prepare(&cfg).unwrap().run_replica(0).unwrap();
        let b = Experiment::prepare(&cfg).unwrap().run_replica(0).unwrap();
        prop_assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn mean_is_invariant_without_gradients(seed in 0u64..10_000, v in 0usize..2, x in models(8, 2)) {
        let variant = [Variant::Blocking, Variant::Nonblocking][v];
        let mut cfg = quadratic_config(variant, seed, 0.0);
        cfg.objective = ObjectiveSpec::Constant { dimension: 2, level: 0.0 };
        cfg.initial_models = Some(x.clone());
        let exp = Experiment::prepare(&cfg).unwrap();
        let mut sim = exp.simulation(0).unwrap();
        let mu0 = compute_mu(&x).unwrap();
        for _ in 0..200 {
            sim.step().unwrap();
        }
        for (a, b) in sim.mu().iter().zip(&mu0) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(compute_gamma(&sim.models()).unwrap() <= compute_gamma(&x).unwrap() + 1e-9);
    }
}
