//! Vesicle state, the population multiset, and the per-type parameter
//! registry.
//!
//! A vesicle is a discrete mobile entity `(content, type, location, lifetime,
//! internal state)`. The registry bundles every learnable quantity attached to
//! a vesicle type: emission weights and content distribution, the masked
//! row-stochastic transition matrix, docking weights, the four release maps,
//! decay rate, and the spiking-overlay modulation strength.

use crate::error::{NvError, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::{AffineMap, Matrix, TanhEncoder};
use crate::network::NetworkState;
use crate::rng::{fnv1a64, RngStream};

/// Minimum lifetime at spawn: every vesicle gets at least one chance to act.
pub const LIFETIME_FLOOR: f64 = 0.5;

/// Optional internal state carried by a vesicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InternalState {
    /// Residual release budget in `[0, 1]`. Effects are scaled by it and it
    /// halves after each docking release.
    pub budget: f64,
    /// Discrete mode; reserved for multi-stage protocols.
    pub mode: u8,
}

impl InternalState {
    pub fn fresh() -> Self {
        InternalState {
            budget: 1.0,
            mode: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vesicle {
    /// Stable identifier, unique within a run; keys event-log records and
    /// RNG streams.
    pub id: u64,
    pub content: Vec<f64>,
    pub type_id: usize,
    pub location: NodeId,
    pub lifetime: f64,
    pub internal: InternalState,
}

/// The active population V_t.
#[derive(Clone, Debug, Default)]
pub struct VesicleConfig {
    pub vesicles: Vec<Vesicle>,
    pub next_id: u64,
}

impl VesicleConfig {
    pub fn new() -> Self {
        VesicleConfig::default()
    }

    pub fn count(&self) -> usize {
        self.vesicles.len()
    }

    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Vesicle counts per node.
    pub fn counts_per_node(&self, num_nodes: usize) -> Vec<u32> {
        let mut counts = vec![0u32; num_nodes];
        for v in &self.vesicles {
            counts[v.location.0] += 1;
        }
        counts
    }

    pub fn write_state_bytes(&self, out: &mut Vec<u8>) {
        for v in &self.vesicles {
            out.extend_from_slice(&v.id.to_le_bytes());
            out.extend_from_slice(&(v.type_id as u64).to_le_bytes());
            out.extend_from_slice(&(v.location.0 as u64).to_le_bytes());
            out.extend_from_slice(&v.lifetime.to_le_bytes());
            out.extend_from_slice(&v.internal.budget.to_le_bytes());
            out.push(v.internal.mode);
            for c in &v.content {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
}

/// Affine maps producing the mean and log-std of the spawn content
/// distribution from node features.
#[derive(Clone, Debug)]
pub struct ContentMap {
    pub mean: AffineMap,
    pub log_std: AffineMap,
}

impl ContentMap {
    pub fn zeros(content_dim: usize, feature_dim: usize) -> Self {
        ContentMap {
            mean: AffineMap::zeros(content_dim, feature_dim),
            log_std: AffineMap::zeros(content_dim, feature_dim),
        }
    }
}

/// Rank-one parameter release map for one (type, layer) pair:
/// `delta_theta = step * (left c)(right c)^T`.
#[derive(Clone, Debug)]
pub struct ParamReleaseMap {
    pub left: Matrix,
    pub right: Matrix,
    pub step: f64,
}

/// Rule release map for one (type, layer) pair. `scale` and `shift` map
/// content onto the layer's flattened parameter space; `rate_*` feed a
/// softplus producing the learning-rate scale (identity at zero init).
#[derive(Clone, Debug)]
pub struct RuleReleaseMap {
    pub scale: AffineMap,
    pub shift: AffineMap,
    pub rate_weights: Vec<f64>,
    pub rate_bias: f64,
}

impl RuleReleaseMap {
    /// Identity rule: scale 1, shift 0, rate scale 1.
    pub fn identity(param_count: usize, content_dim: usize) -> Self {
        let mut scale = AffineMap::zeros(param_count, content_dim);
        scale.bias.iter_mut().for_each(|b| *b = 1.0);
        RuleReleaseMap {
            scale,
            shift: AffineMap::zeros(param_count, content_dim),
            rate_weights: vec![0.0; content_dim],
            rate_bias: 0.0,
        }
    }
}

/// All learnable quantities for one vesicle type.
#[derive(Clone, Debug)]
pub struct TypeParams {
    /// Emission weight vector applied to the encoded features.
    pub emit_weights: Vec<f64>,
    /// Spawn content distribution parameters.
    pub emit_content: ContentMap,
    /// Mean of the (floored) exponential lifetime distribution.
    pub lifetime_mean: f64,
    /// Free scores; the transition matrix is their masked row-softmax.
    pub transition_scores: Matrix,
    /// Row-stochastic transition matrix over the migration support.
    pub transition: Matrix,
    /// Migration score temperature.
    pub move_temperature: f64,
    /// Docking weight vector applied to the encoded dock features.
    pub dock_weights: Vec<f64>,
    /// FiLM map per node: content -> (gamma, beta), each of the node width.
    pub act_maps: Vec<AffineMap>,
    /// Rank-one parameter release per layer node (none at the input node).
    pub param_maps: Vec<Option<ParamReleaseMap>>,
    /// Gradient modulation per layer node (none at the input node).
    pub rule_maps: Vec<Option<RuleReleaseMap>>,
    /// Density decay rate in `[0, 1]`.
    pub decay_rate: f64,
    /// Content weights of the spiking-overlay modulation strength
    /// `tanh(a . c) * budget`.
    pub mod_strength: Vec<f64>,
    /// Projection of content into the memory slot space.
    pub memory_proj: Matrix,
}

/// Scales used when initializing a registry.
#[derive(Clone, Copy, Debug)]
pub struct RegistryInit {
    /// Uniform init half-width for encoder and emission/docking weights.
    pub weight_scale: f64,
    /// Half-width for the per-type modulation strength vector.
    pub mod_scale: f64,
    /// Fixed step size of the rank-one parameter release.
    pub param_step: f64,
}

impl Default for RegistryInit {
    fn default() -> Self {
        RegistryInit {
            weight_scale: 0.5,
            mod_scale: 1.0,
            param_step: 0.1,
        }
    }
}

/// Per-type hyperparameters supplied by the experiment config.
#[derive(Clone, Debug)]
pub struct TypeSpec {
    pub lifetime_mean: f64,
    pub move_temperature: f64,
    pub decay_rate: f64,
}

impl Default for TypeSpec {
    fn default() -> Self {
        TypeSpec {
            lifetime_mean: 3.0,
            move_temperature: 1.0,
            decay_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VesicleTypeRegistry {
    pub content_dim: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub memory_dim: usize,
    /// Shared feature encoder for emission intensity.
    pub emit_encoder: TanhEncoder,
    /// Shared feature encoder for docking probability
    /// (input: node features ++ content ++ budget).
    pub dock_encoder: TanhEncoder,
    /// Memory read projection per node: node width x memory dim.
    pub read_proj: Vec<Matrix>,
    pub types: Vec<TypeParams>,
}

impl VesicleTypeRegistry {
    /// Build a registry over `graph` for nodes whose activation widths are
    /// `widths`. Release maps start at zero (the no-op limit); encoder and
    /// emission/docking weights are drawn uniformly from the run seed.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: &Graph,
        widths: &[usize],
        type_specs: &[TypeSpec],
        content_dim: usize,
        embed_dim: usize,
        feature_dim: usize,
        memory_dim: usize,
        init: RegistryInit,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if widths.len() != graph.num_nodes() {
            return Err(NvError::DimensionMismatch {
                context: "registry node widths",
                expected: graph.num_nodes(),
                actual: widths.len(),
            });
        }
        let n = graph.num_nodes();
        let emit_encoder = TanhEncoder::uniform(embed_dim, feature_dim, init.weight_scale, rng);
        let dock_encoder = TanhEncoder::uniform(
            embed_dim,
            feature_dim + content_dim + 1,
            init.weight_scale,
            rng,
        );
        let read_proj = widths
            .iter()
            .map(|&w| Matrix::zeros(w, memory_dim))
            .collect();

        let mut types = Vec::with_capacity(type_specs.len());
        for spec in type_specs {
            if !(0.0..=1.0).contains(&spec.decay_rate) {
                return Err(NvError::Config {
                    path: "vesicle.types.decay_rate".into(),
                    message: format!("must lie in [0, 1], got {}", spec.decay_rate),
                });
            }
            if spec.lifetime_mean <= 0.0 {
                return Err(NvError::Config {
                    path: "vesicle.types.lifetime_mean".into(),
                    message: format!("must be positive, got {}", spec.lifetime_mean),
                });
            }
            let emit_weights = (0..embed_dim)
                .map(|_| rng.uniform(-init.weight_scale, init.weight_scale))
                .collect();
            let dock_weights = (0..embed_dim)
                .map(|_| rng.uniform(-init.weight_scale, init.weight_scale))
                .collect();
            let mod_strength = (0..content_dim)
                .map(|_| rng.uniform(-init.mod_scale, init.mod_scale))
                .collect();
            let act_maps = widths
                .iter()
                .map(|&w| AffineMap::zeros(2 * w, content_dim))
                .collect();
            let mut param_maps = vec![None];
            let mut rule_maps = vec![None];
            for l in 1..n {
                let (d_out, d_in) = (widths[l], widths[l - 1]);
                param_maps.push(Some(ParamReleaseMap {
                    left: Matrix::zeros(d_out, content_dim),
                    right: Matrix::zeros(d_in, content_dim),
                    step: init.param_step,
                }));
                rule_maps.push(Some(RuleReleaseMap::identity(
                    d_out * d_in + d_out,
                    content_dim,
                )));
            }
            let mut tp = TypeParams {
                emit_weights,
                emit_content: ContentMap::zeros(content_dim, feature_dim),
                lifetime_mean: spec.lifetime_mean,
                transition_scores: Matrix::zeros(n, n),
                transition: Matrix::zeros(n, n),
                move_temperature: spec.move_temperature,
                dock_weights,
                act_maps,
                param_maps,
                rule_maps,
                decay_rate: spec.decay_rate,
                mod_strength,
                memory_proj: Matrix::zeros(memory_dim, content_dim),
            };
            rebuild_transition(&mut tp, graph);
            types.push(tp);
        }
        Ok(VesicleTypeRegistry {
            content_dim,
            embed_dim,
            feature_dim,
            memory_dim,
            emit_encoder,
            dock_encoder,
            read_proj,
            types,
        })
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Re-derive every transition matrix from its score matrix; call after
    /// any update that touched the scores.
    pub fn rebuild_transitions(&mut self, graph: &Graph) {
        for tp in &mut self.types {
            rebuild_transition(tp, graph);
        }
    }

    /// Check that every transition row is stochastic (1e-12) and supported
    /// only where the migration mask allows.
    pub fn validate_transitions(&self, graph: &Graph) -> Result<()> {
        let mask = graph.adjacency_mask();
        for (k, tp) in self.types.iter().enumerate() {
            let t = &tp.transition;
            for u in 0..graph.num_nodes() {
                let mut sum = 0.0;
                for v in 0..graph.num_nodes() {
                    let p = t.get(u, v);
                    sum += p;
                    let allowed = mask[u][v] || (u == v && graph.is_terminal(NodeId(u)));
                    if !allowed && p != 0.0 {
                        return Err(NvError::Config {
                            path: format!("registry.types[{k}].transition"),
                            message: format!("mass {p} outside migration support at ({u}, {v})"),
                        });
                    }
                }
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(NvError::Config {
                        path: format!("registry.types[{k}].transition"),
                        message: format!("row {u} sums to {sum}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Masked row-softmax of the free scores over the migration support
/// (out-neighbors, or the node itself at terminals).
fn rebuild_transition(tp: &mut TypeParams, graph: &Graph) {
    let n = graph.num_nodes();
    let mut t = Matrix::zeros(n, n);
    for u in 0..n {
        let support = graph.migration_support(NodeId(u));
        let max_score = support
            .iter()
            .map(|v| tp.transition_scores.get(u, v.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &support {
            total += (tp.transition_scores.get(u, v.0) - max_score).exp();
        }
        for v in &support {
            let w = (tp.transition_scores.get(u, v.0) - max_score).exp() / total;
            t.set(u, v.0, w);
        }
    }
    tp.transition = t;
}

/// Sample a new vesicle at `location`: content from the per-type Gaussian
/// map of the node features, lifetime from a floored exponential, budget 1.
pub fn spawn(
    registry: &VesicleTypeRegistry,
    type_id: usize,
    location: NodeId,
    features: &[f64],
    id: u64,
    rng: &mut RngStream,
) -> Result<Vesicle> {
    let tp = registry.types.get(type_id).ok_or(NvError::NodeOutOfRange {
        index: type_id,
        num_nodes: registry.num_types(),
    })?;
    let mean = tp.emit_content.mean.apply(features)?;
    let log_std = tp.emit_content.log_std.apply(features)?;
    let content: Vec<f64> = mean
        .iter()
        .zip(log_std.iter())
        .map(|(m, ls)| m + ls.exp().max(1e-8) * rng.normal())
        .collect();
    let lifetime = sample_lifetime(tp.lifetime_mean, rng);
    Ok(Vesicle {
        id,
        content,
        type_id,
        location,
        lifetime,
        internal: InternalState::fresh(),
    })
}

/// Exponential lifetime, resampled while below the floor. After enough
/// rejections the memoryless shift form is used, which has the identical
/// truncated distribution.
fn sample_lifetime(mean: f64, rng: &mut RngStream) -> f64 {
    for _ in 0..64 {
        let t = rng.exponential(mean);
        if t >= LIFETIME_FLOOR {
            return t;
        }
    }
    LIFETIME_FLOOR + rng.exponential(mean)
}

/// Stable digest of the joint state (params, activations, memories, meta,
/// vesicles) for regression testing.
pub fn joint_state_snapshot(net: &NetworkState, cfg: &VesicleConfig) -> u64 {
    let mut bytes = Vec::new();
    net.write_state_bytes(&mut bytes);
    cfg.write_state_bytes(&mut bytes);
    fnv1a64(&bytes)
}
