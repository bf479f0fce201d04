//! Stochastic kernels driving the vesicle life cycle: emission intensity and
//! Poisson counts, migration over the transition matrix, docking decisions,
//! and lifetime decay.

use std::collections::BTreeSet;

use crate::error::{NvError, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::{dot, sigmoid};
use crate::network::NetworkState;
use crate::rng::{EventRng, Phase, RngStream};
use crate::vesicle::{Vesicle, VesicleConfig, VesicleTypeRegistry};

/// One emission outcome at a `(node, type)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionEvent {
    pub node: NodeId,
    pub type_id: usize,
    pub count: u32,
    /// Sigmoid intensity, strictly inside `(0, 1)`.
    pub intensity: f64,
}

/// Scripted emission used by deterministic scenarios; replaces sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedEmission {
    pub node: usize,
    pub type_id: usize,
    pub count: u32,
}

/// Runtime knobs of the kernel layer.
#[derive(Clone, Debug)]
pub struct KernelParams {
    /// Per-(node, type) cap on emitted vesicles per step.
    pub max_emit_per_node: u32,
    /// Std of the optional Gaussian lifetime noise (0 disables it).
    pub decay_noise_std: f64,
    /// Docking at these nodes removes the vesicle (clearance).
    pub absorber_nodes: BTreeSet<usize>,
    /// Step duration in lifetime units.
    pub dt: f64,
    /// Skip the Bernoulli and dock unconditionally (scripted scenarios).
    pub force_dock: bool,
    /// When non-empty, emission is scripted instead of sampled.
    pub forced_emissions: Vec<ForcedEmission>,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            max_emit_per_node: 4,
            decay_noise_std: 0.0,
            absorber_nodes: BTreeSet::new(),
            dt: 1.0,
            force_dock: false,
            forced_emissions: Vec::new(),
        }
    }
}

fn emission_entity(node: usize, type_id: usize) -> u64 {
    ((node as u64) << 32) | type_id as u64
}

/// Emission intensity `sigmoid(u . psi_emit(features))`.
pub fn emission_intensity(
    registry: &VesicleTypeRegistry,
    type_id: usize,
    features: &[f64],
) -> Result<f64> {
    let encoded = registry.emit_encoder.apply(features)?;
    Ok(sigmoid(dot(
        &registry.types[type_id].emit_weights,
        &encoded,
    )))
}

/// Sample Poisson emission counts for every `(node, type)` pair. Counts are
/// clamped to `max_emit_per_node`; only nonzero outcomes are returned.
pub fn sample_emissions(
    graph: &Graph,
    registry: &VesicleTypeRegistry,
    net: &NetworkState,
    params: &KernelParams,
    rng: EventRng,
) -> Result<Vec<EmissionEvent>> {
    if !params.forced_emissions.is_empty() {
        let mut events = Vec::new();
        for f in &params.forced_emissions {
            if f.count == 0 {
                continue;
            }
            let features = net.node_features(NodeId(f.node));
            let intensity = emission_intensity(registry, f.type_id, &features)?;
            events.push(EmissionEvent {
                node: NodeId(f.node),
                type_id: f.type_id,
                count: f.count,
                intensity,
            });
        }
        return Ok(events);
    }
    let mut events = Vec::new();
    for node in 0..graph.num_nodes() {
        let features = net.node_features(NodeId(node));
        for type_id in 0..registry.num_types() {
            let intensity = emission_intensity(registry, type_id, &features)?;
            let mut stream = rng.stream(Phase::Emit, emission_entity(node, type_id));
            let count = (stream.poisson(intensity) as u32).min(params.max_emit_per_node);
            if count > 0 {
                events.push(EmissionEvent {
                    node: NodeId(node),
                    type_id,
                    count,
                    intensity,
                });
            }
        }
    }
    Ok(events)
}

/// Migration distribution over all nodes given explicit per-node scores:
/// `p(v) ∝ T[loc][v] * exp(temperature * score[v])` on the support, zero
/// elsewhere. A degenerate row falls back to a self-loop.
pub fn migration_distribution_from_scores(
    graph: &Graph,
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    scores: &[f64],
) -> Result<Vec<f64>> {
    if !graph.contains(vesicle.location) {
        return Err(NvError::NodeOutOfRange {
            index: vesicle.location.0,
            num_nodes: graph.num_nodes(),
        });
    }
    let tp = &registry.types[vesicle.type_id];
    let loc = vesicle.location.0;
    let support = graph.migration_support(vesicle.location);
    let mut dist = vec![0.0; graph.num_nodes()];

    // Log-domain weights, shifted by the max so exp never overflows.
    let mut max_logw = f64::NEG_INFINITY;
    let mut logws = Vec::with_capacity(support.len());
    for v in &support {
        let t = tp.transition.get(loc, v.0);
        let logw = if t > 0.0 {
            t.ln() + tp.move_temperature * scores[v.0]
        } else {
            f64::NEG_INFINITY
        };
        max_logw = max_logw.max(logw);
        logws.push(logw);
    }
    if !max_logw.is_finite() {
        dist[loc] = 1.0;
        return Ok(dist);
    }
    let mut total = 0.0;
    for (v, logw) in support.iter().zip(logws.iter()) {
        let w = (logw - max_logw).exp();
        dist[v.0] = w;
        total += w;
    }
    for p in dist.iter_mut() {
        *p /= total;
    }
    Ok(dist)
}

/// Migration distribution with the default score: the gradient norm at the
/// candidate node.
pub fn migration_distribution(
    graph: &Graph,
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    net: &NetworkState,
) -> Result<Vec<f64>> {
    let scores: Vec<f64> = (0..graph.num_nodes())
        .map(|v| net.grad_norm(NodeId(v)))
        .collect();
    migration_distribution_from_scores(graph, registry, vesicle, &scores)
}

/// Inverse-CDF categorical draw; ties at cumulative boundaries resolve to the
/// lower node index.
pub fn sample_move(distribution: &[f64], stream: &mut RngStream) -> NodeId {
    let u = stream.next_f64();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in distribution.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u <= cum {
            return NodeId(i);
        }
    }
    NodeId(last)
}

/// Docking probability `sigmoid(w . psi_dock([features; content; budget]))`.
pub fn docking_probability_from_features(
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    node_features: &[f64],
) -> Result<f64> {
    let mut input = Vec::with_capacity(node_features.len() + vesicle.content.len() + 1);
    input.extend_from_slice(node_features);
    input.extend_from_slice(&vesicle.content);
    input.push(vesicle.internal.budget);
    let encoded = registry.dock_encoder.apply(&input)?;
    Ok(sigmoid(dot(
        &registry.types[vesicle.type_id].dock_weights,
        &encoded,
    )))
}

/// Docking probability at the vesicle's current node.
pub fn docking_probability(
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    net: &NetworkState,
) -> Result<f64> {
    let features = net.node_features(vesicle.location);
    docking_probability_from_features(registry, vesicle, &features)
}

/// Advance lifetimes by `dt` (plus optional Gaussian noise) and drop expired
/// vesicles. Returns the removed vesicles in id order.
pub fn decay_step(cfg: &mut VesicleConfig, dt: f64, noise_std: f64, rng: EventRng) -> Vec<Vesicle> {
    for v in cfg.vesicles.iter_mut() {
        let noise = if noise_std > 0.0 {
            noise_std * rng.stream(Phase::Decay, v.id).normal()
        } else {
            0.0
        };
        v.lifetime = v.lifetime - dt + noise;
    }
    let mut removed = Vec::new();
    cfg.vesicles.retain(|v| {
        if v.lifetime <= 0.0 {
            removed.push(v.clone());
            false
        } else {
            true
        }
    });
    removed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::RngStream;
    use crate::vesicle::{InternalState, RegistryInit, TypeSpec, VesicleTypeRegistry};
    use proptest::prelude::*;

    fn test_registry(graph: &Graph, widths: &[usize], types: usize) -> VesicleTypeRegistry {
        let mut rng = RngStream::for_event(4, Phase::Init, 0, 0);
        let specs = vec![TypeSpec::default(); types];
        VesicleTypeRegistry::new(
            graph,
            widths,
            &specs,
            2,
            3,
            4,
            1,
            RegistryInit::default(),
            &mut rng,
        )
        .unwrap()
    }

    fn vesicle_at(node: usize, type_id: usize) -> Vesicle {
        Vesicle {
            id: 0,
            content: vec![0.0, 0.0],
            type_id,
            location: NodeId(node),
            lifetime: 2.0,
            internal: InternalState::fresh(),
        }
    }

    #[test]
    fn intensity_is_half_for_zero_weights() {
        let g = Graph::chain(2);
        let mut reg = test_registry(&g, &[1, 1], 1);
        reg.types[0].emit_weights = vec![0.0; 3];
        let lam = emission_intensity(&reg, 0, &[0.2, 0.1, 0.0, 0.0]).unwrap();
        assert_eq!(lam, 0.5);
    }

    #[test]
    fn intensity_saturates_within_clamp() {
        let g = Graph::chain(2);
        let mut reg = test_registry(&g, &[1, 1], 1);
        // Encoder output saturates near 1; huge weights push the logit to +-20.
        reg.emit_encoder
            .weight
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        reg.emit_encoder.bias = vec![30.0; 3];
        reg.types[0].emit_weights = vec![20.0, 0.0, 0.0];
        let hi = emission_intensity(&reg, 0, &[0.0; 4]).unwrap();
        assert!(hi >= 1.0 - 1e-8 && hi < 1.0);
        reg.types[0].emit_weights = vec![-20.0, 0.0, 0.0];
        let lo = emission_intensity(&reg, 0, &[0.0; 4]).unwrap();
        assert!(lo <= 1e-8 && lo > 0.0);
    }

    #[test]
    fn intensity_hits_arranged_sigmoid_point() {
        let g = Graph::chain(2);
        let mut reg = test_registry(&g, &[1, 1], 1);
        reg.emit_encoder
            .weight
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let t: f64 = 0.5;
        reg.emit_encoder.bias = vec![t.atanh(), 0.0, 0.0];
        reg.types[0].emit_weights = vec![3f64.ln() / t, 0.0, 0.0];
        let lam = emission_intensity(&reg, 0, &[0.0; 4]).unwrap();
        assert!((lam - 0.75).abs() < 1e-9, "got {lam}");
    }

    #[test]
    fn poisson_mean_of_emission_counts() {
        // Frozen features, lambda = 0.5, no clamp: Monte Carlo mean within
        // 3 standard errors of the Poisson mean.
        let g = Graph::chain(2);
        let mut reg = test_registry(&g, &[1, 1], 1);
        reg.emit_encoder
            .weight
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        reg.emit_encoder.bias = vec![30.0, 0.0, 0.0];
        reg.types[0].emit_weights = vec![0.0; 3];
        let lam = emission_intensity(&reg, 0, &[0.0; 4]).unwrap();
        assert_eq!(lam, 0.5);

        let n = 100_000u64;
        let mut total = 0u64;
        let mut total_sq = 0u64;
        for step in 0..n {
            let mut s = EventRng::new(21, step).stream(Phase::Emit, 0);
            let c = s.poisson(lam);
            total += c;
            total_sq += c * c;
        }
        let mean = total as f64 / n as f64;
        let var = total_sq as f64 / n as f64 - mean * mean;
        let se_mean = (lam / n as f64).sqrt();
        assert!((mean - lam).abs() < 3.0 * se_mean, "mean {mean}");
        // Poisson variance equals the rate; allow a loose band.
        assert!((var - lam).abs() < 0.02, "var {var}");
    }

    #[test]
    fn clamp_zero_silences_emission() {
        let g = Graph::chain(3);
        let reg = test_registry(&g, &[1, 2, 1], 2);
        let mut rng = RngStream::for_event(0, Phase::Init, 0, 0);
        let mut net = NetworkState::new(&[1, 2, 1], 1, 1, &mut rng);
        net.forward(&[0.5]).unwrap();
        let params = KernelParams {
            max_emit_per_node: 0,
            ..KernelParams::default()
        };
        for step in 0..50 {
            let events = sample_emissions(&g, &reg, &net, &params, EventRng::new(9, step)).unwrap();
            assert!(events.is_empty());
        }
    }

    #[test]
    fn near_zero_intensity_never_emits() {
        // Intensity at the lower clamp (1e-12): a million draws stay zero.
        let mut hits = 0u64;
        for step in 0..1_000_000u64 {
            let mut s = EventRng::new(33, step).stream(Phase::Emit, 0);
            hits += s.poisson(1e-12);
        }
        assert_eq!(hits, 0);
    }

    #[test]
    fn migration_uniform_two_neighbors() {
        let g = Graph::new(3, &[(0, 1), (0, 2)], vec![0, 1, 1], false).unwrap();
        let mut reg = test_registry(&g, &[1, 1, 1], 1);
        reg.types[0].move_temperature = 0.0;
        let v = vesicle_at(0, 0);
        let dist = migration_distribution_from_scores(&g, &reg, &v, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(dist, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn migration_score_reweighting() {
        // Uniform T over two neighbors, temperature 1, scores (ln 2, 0):
        // probabilities (2/3, 1/3).
        let g = Graph::new(3, &[(0, 1), (0, 2)], vec![0, 1, 1], false).unwrap();
        let mut reg = test_registry(&g, &[1, 1, 1], 1);
        reg.types[0].move_temperature = 1.0;
        let v = vesicle_at(0, 0);
        let dist =
            migration_distribution_from_scores(&g, &reg, &v, &[0.0, 2f64.ln(), 0.0]).unwrap();
        assert!((dist[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((dist[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_self_loops() {
        let g = Graph::chain(3);
        let reg = test_registry(&g, &[1, 1, 1], 1);
        let v = vesicle_at(2, 0);
        let dist = migration_distribution_from_scores(&g, &reg, &v, &[0.0; 3]).unwrap();
        assert_eq!(dist, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_row_falls_back_to_self_loop() {
        let g = Graph::new(3, &[(0, 1), (0, 2)], vec![0, 1, 1], false).unwrap();
        let mut reg = test_registry(&g, &[1, 1, 1], 1);
        // Hand-built registry with a zeroed row.
        for j in 0..3 {
            reg.types[0].transition.set(0, j, 0.0);
        }
        let v = vesicle_at(0, 0);
        let dist = migration_distribution_from_scores(&g, &reg, &v, &[0.0; 3]).unwrap();
        assert_eq!(dist, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn migration_rejects_out_of_range_location() {
        let g = Graph::chain(2);
        let reg = test_registry(&g, &[1, 1], 1);
        let v = vesicle_at(5, 0);
        assert!(migration_distribution_from_scores(&g, &reg, &v, &[0.0; 2]).is_err());
    }

    #[test]
    fn sample_move_point_mass() {
        let mut s = RngStream::new(0, 0);
        for _ in 0..100 {
            assert_eq!(sample_move(&[0.0, 0.0, 0.0, 1.0], &mut s), NodeId(3));
        }
    }

    #[test]
    fn sample_move_frequencies() {
        let dist = [0.0, 0.5, 0.5];
        let n = 100_000;
        let mut ones = 0u64;
        let mut s = RngStream::new(77, 1);
        for _ in 0..n {
            if sample_move(&dist, &mut s) == NodeId(1) {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "freq {freq}");
    }

    #[test]
    fn sample_move_chi_square_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let k = 5usize;
        let dist = vec![1.0 / k as f64; k];
        let n = 100_000u64;
        let mut counts = vec![0u64; k];
        let mut s = RngStream::new(5150, 2);
        for _ in 0..n {
            counts[sample_move(&dist, &mut s).0] += 1;
        }
        let expected = n as f64 / k as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let crit = ChiSquared::new((k - 1) as f64)
            .unwrap()
            .inverse_cdf(1.0 - 0.001);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn docking_probability_reference_points() {
        let g = Graph::chain(2);
        let mut reg = test_registry(&g, &[1, 1], 1);
        reg.types[0].dock_weights = vec![0.0; 3];
        let v = vesicle_at(0, 0);
        let p = docking_probability_from_features(&reg, &v, &[0.0; 4]).unwrap();
        assert_eq!(p, 0.5);

        reg.dock_encoder
            .weight
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
        reg.dock_encoder.bias = vec![30.0; 3];
        reg.types[0].dock_weights = vec![-20.0, 0.0, 0.0];
        let p = docking_probability_from_features(&reg, &v, &[0.0; 4]).unwrap();
        assert!(p <= 1e-8 && p > 0.0);

        let t: f64 = 0.5;
        reg.dock_encoder.bias = vec![t.atanh(), 0.0, 0.0];
        reg.types[0].dock_weights = vec![(1.0f64 / 3.0).ln() / t, 0.0, 0.0];
        let p = docking_probability_from_features(&reg, &v, &[0.0; 4]).unwrap();
        assert!((p - 0.25).abs() < 1e-9, "got {p}");
    }

    #[test]
    fn decay_countdown_is_deterministic() {
        let mut cfg = VesicleConfig::new();
        let mut v = vesicle_at(0, 0);
        v.lifetime = 1.5;
        cfg.vesicles.push(v);
        let removed = decay_step(&mut cfg, 1.0, 0.0, EventRng::new(0, 0));
        assert!(removed.is_empty());
        assert_eq!(cfg.vesicles[0].lifetime, 0.5);
        let removed = decay_step(&mut cfg, 1.0, 0.0, EventRng::new(0, 1));
        assert_eq!(removed.len(), 1);
        assert!(cfg.vesicles.is_empty());
    }

    #[test]
    fn decay_removal_time_matches_ceil() {
        for tau0 in [0.4, 1.0, 2.3, 5.9] {
            let mut cfg = VesicleConfig::new();
            let mut v = vesicle_at(0, 0);
            v.lifetime = tau0;
            cfg.vesicles.push(v);
            let dt = 0.5;
            let mut steps = 0u64;
            while !cfg.vesicles.is_empty() {
                decay_step(&mut cfg, dt, 0.0, EventRng::new(0, steps));
                steps += 1;
                assert!(steps < 100);
            }
            assert_eq!(steps, (tau0 / dt).ceil() as u64, "tau0 {tau0}");
        }
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (2usize..10).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..n * 2).prop_map(move |mut edges| {
                edges.retain(|(u, v)| u != v);
                Graph::new(n, &edges, vec![0; n], false).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn migration_support_and_normalization(
            g in arb_graph(),
            seed in 0u64..500,
            loc_raw in 0usize..10,
        ) {
            let n = g.num_nodes();
            let widths = vec![1usize; n];
            let mut reg = test_registry(&g, &widths, 1);
            let mut rng = RngStream::for_event(seed, Phase::Init, 3, 0);
            for v in reg.types[0].transition_scores.data.iter_mut() {
                *v = rng.uniform(-2.0, 2.0);
            }
            reg.types[0].move_temperature = rng.uniform(-2.0, 2.0);
            reg.rebuild_transitions(&g);
            reg.validate_transitions(&g).unwrap();

            let loc = loc_raw % n;
            let v = vesicle_at(loc, 0);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 2.0)).collect();
            let dist = migration_distribution_from_scores(&g, &reg, &v, &scores).unwrap();
            let sum: f64 = dist.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            let mask = g.adjacency_mask();
            for (j, &p) in dist.iter().enumerate() {
                if p > 0.0 {
                    let allowed = mask[loc][j] || (j == loc && g.is_terminal(NodeId(loc)));
                    prop_assert!(allowed, "mass at ({}, {})", loc, j);
                }
            }
        }
    }
}
