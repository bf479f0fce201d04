//! The four release operators triggered by a docking vesicle: activation
//! modulation (FiLM-style affine), rank-one parameter deltas, gradient-rule
//! modulation, and external memory writes/reads.

use serde::{Deserialize, Serialize};

use crate::error::{NvError, Result};
use crate::linalg::{softplus, Matrix};
use crate::network::{LayerGrads, LayerParams};
use crate::vesicle::{Vesicle, VesicleTypeRegistry};

/// Per-node external memory slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMemory {
    pub slot: Vec<f64>,
    pub write_count: u64,
}

impl ExternalMemory {
    pub fn new(dim: usize) -> Self {
        ExternalMemory {
            slot: vec![0.0; dim],
            write_count: 0,
        }
    }
}

/// Which release operators are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseFlags {
    pub activation: bool,
    pub parameter: bool,
    pub rule: bool,
    pub memory: bool,
}

impl Default for ReleaseFlags {
    fn default() -> Self {
        ReleaseFlags {
            activation: true,
            parameter: true,
            rule: true,
            memory: true,
        }
    }
}

impl ReleaseFlags {
    pub fn none() -> Self {
        ReleaseFlags {
            activation: false,
            parameter: false,
            rule: false,
            memory: false,
        }
    }

    pub fn active_ops(&self) -> Vec<&'static str> {
        let mut ops = Vec::new();
        if self.activation {
            ops.push("act");
        }
        if self.parameter {
            ops.push("param");
        }
        if self.rule {
            ops.push("rule");
        }
        if self.memory {
            ops.push("memory");
        }
        ops
    }
}

/// Rank-one parameter delta `scale * left * right^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOneDelta {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub scale: f64,
}

/// Gradient-rule modulation over a layer's flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleMod {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub rate_scale: f64,
}

/// Everything a single docked vesicle contributes at its node.
#[derive(Clone, Debug, Default)]
pub struct ReleaseEffect {
    pub delta_h: Option<Vec<f64>>,
    pub delta_theta: Option<RankOneDelta>,
    pub rule_mod: Option<RuleMod>,
    pub memory_write: bool,
}

/// Budget-scaled FiLM delta: `budget * (gamma ⊙ h + beta)` with
/// `(gamma, beta) = W_act c + b_act` for the vesicle's node and type.
pub fn release_activation(
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    h: &[f64],
) -> Result<Vec<f64>> {
    let map = &registry.types[vesicle.type_id].act_maps[vesicle.location.0];
    let gb = map.apply(&vesicle.content)?;
    if gb.len() != 2 * h.len() {
        return Err(NvError::DimensionMismatch {
            context: "activation release",
            expected: 2 * h.len(),
            actual: gb.len(),
        });
    }
    let (gamma, beta) = gb.split_at(h.len());
    let budget = vesicle.internal.budget;
    Ok(h.iter()
        .zip(gamma.iter().zip(beta.iter()))
        .map(|(hv, (g, b))| budget * (g * hv + b))
        .collect())
}

/// Rank-one parameter release for the vesicle's layer; the scale already
/// includes the budget.
pub fn release_parameters(
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    layer: &LayerParams,
) -> Result<RankOneDelta> {
    let node = vesicle.location.0;
    let map = registry.types[vesicle.type_id].param_maps[node]
        .as_ref()
        .ok_or(NvError::DimensionMismatch {
            context: "parameter release at a node without parameters",
            expected: 1,
            actual: 0,
        })?;
    let left = map.left.matvec(&vesicle.content)?;
    let right = map.right.matvec(&vesicle.content)?;
    if left.len() != layer.weight.rows || right.len() != layer.weight.cols {
        return Err(NvError::DimensionMismatch {
            context: "parameter release shape",
            expected: layer.weight.rows * layer.weight.cols,
            actual: left.len() * right.len(),
        });
    }
    Ok(RankOneDelta {
        left,
        right,
        scale: map.step * vesicle.internal.budget,
    })
}

/// Gradient modulation `g~ = scale(c) ⊙ g + shift(c)` over the flattened
/// layer gradient, plus the softplus-normalized learning-rate scale
/// (exactly 1 at zero init).
pub fn release_rule(
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    grads_fresh: bool,
) -> Result<RuleMod> {
    if !grads_fresh {
        return Err(NvError::StaleGradient);
    }
    let node = vesicle.location.0;
    let map = registry.types[vesicle.type_id].rule_maps[node]
        .as_ref()
        .ok_or(NvError::DimensionMismatch {
            context: "rule release at a node without parameters",
            expected: 1,
            actual: 0,
        })?;
    let scale = map.scale.apply(&vesicle.content)?;
    let shift = map.shift.apply(&vesicle.content)?;
    let z = crate::linalg::dot(&map.rate_weights, &vesicle.content) + map.rate_bias;
    let rate_scale = softplus(z) / std::f64::consts::LN_2;
    Ok(RuleMod {
        scale,
        shift,
        rate_scale,
    })
}

/// Apply a rule modulation to a gradient bundle, returning the flattened
/// modulated gradient (weights row-major, then biases).
pub fn apply_rule_mod(grads: &LayerGrads, mods: &[&RuleMod]) -> Vec<f64> {
    let mut flat: Vec<f64> = grads
        .weight
        .data
        .iter()
        .chain(grads.bias.iter())
        .copied()
        .collect();
    for m in mods {
        for (g, (s, b)) in flat.iter_mut().zip(m.scale.iter().zip(m.shift.iter())) {
            *g = s * *g + b;
        }
    }
    flat
}

/// EMA write of the projected content into the node's memory slot.
pub fn memory_write(
    mem: &mut ExternalMemory,
    registry: &VesicleTypeRegistry,
    vesicle: &Vesicle,
    write_rate: f64,
) -> Result<()> {
    let projected = registry.types[vesicle.type_id]
        .memory_proj
        .matvec(&vesicle.content)?;
    if projected.len() != mem.slot.len() {
        return Err(NvError::DimensionMismatch {
            context: "memory write",
            expected: mem.slot.len(),
            actual: projected.len(),
        });
    }
    for (s, z) in mem.slot.iter_mut().zip(projected.iter()) {
        *s = (1.0 - write_rate) * *s + write_rate * z;
    }
    mem.write_count += 1;
    Ok(())
}

/// Additive memory read injection `h += Q * slot`. The activation is left
/// untouched when the read is exactly zero, so an untouched memory is a
/// strict no-op.
pub fn memory_read_inject(mem: &ExternalMemory, h: &mut [f64], read_proj: &Matrix) -> Result<()> {
    let r = read_proj.matvec(&mem.slot)?;
    if r.len() != h.len() {
        return Err(NvError::DimensionMismatch {
            context: "memory read",
            expected: h.len(),
            actual: r.len(),
        });
    }
    if r.iter().any(|&v| v != 0.0) {
        for (hv, rv) in h.iter_mut().zip(r.iter()) {
            *hv += rv;
        }
    }
    Ok(())
}

/// Sum of the activation deltas of every docked vesicle at one node, each
/// evaluated against the same pre-release activation (parallel composition).
pub fn combined_release(
    registry: &VesicleTypeRegistry,
    docked: &[&Vesicle],
    h: &[f64],
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; h.len()];
    for v in docked {
        let delta = release_activation(registry, v, h)?;
        for (t, d) in total.iter_mut().zip(delta.iter()) {
            *t += d;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, NodeId};
    use crate::rng::{Phase, RngStream};
    use crate::vesicle::{InternalState, RegistryInit, TypeSpec};

    fn setup() -> (Graph, VesicleTypeRegistry) {
        let g = Graph::chain(3);
        let mut rng = RngStream::for_event(1, Phase::Init, 0, 0);
        let reg = VesicleTypeRegistry::new(
            &g,
            &[2, 2, 2],
            &[TypeSpec::default()],
            2,
            3,
            4,
            1,
            RegistryInit::default(),
            &mut rng,
        )
        .unwrap();
        (g, reg)
    }

    fn vesicle(node: usize, content: Vec<f64>, budget: f64) -> Vesicle {
        Vesicle {
            id: 0,
            content,
            type_id: 0,
            location: NodeId(node),
            lifetime: 1.0,
            internal: InternalState { budget, mode: 0 },
        }
    }

    #[test]
    fn zero_maps_give_identity_modulation() {
        let (_, reg) = setup();
        let v = vesicle(1, vec![0.3, -0.2], 1.0);
        let delta = release_activation(&reg, &v, &[0.5, -0.5]).unwrap();
        assert_eq!(delta, vec![0.0, 0.0]);
    }

    #[test]
    fn all_ones_gamma_doubles() {
        let (_, mut reg) = setup();
        // bias = (gamma, beta) = (1, 1, 0, 0) regardless of content.
        reg.types[0].act_maps[1].bias = vec![1.0, 1.0, 0.0, 0.0];
        let v = vesicle(1, vec![0.0, 0.0], 1.0);
        let h = [0.7, -0.4];
        let delta = release_activation(&reg, &v, &h).unwrap();
        assert_eq!(delta, vec![0.7, -0.4]);
    }

    #[test]
    fn film_hand_example() {
        let (_, mut reg) = setup();
        reg.types[0].act_maps[1].bias = vec![0.5, -1.0, 0.0, 1.0];
        let v = vesicle(1, vec![0.0, 0.0], 1.0);
        let delta = release_activation(&reg, &v, &[2.0, 3.0]).unwrap();
        assert_eq!(delta, vec![1.0, -2.0]);
    }

    #[test]
    fn activation_width_mismatch_errors() {
        let (_, reg) = setup();
        let v = vesicle(1, vec![0.0, 0.0], 1.0);
        assert!(release_activation(&reg, &v, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn budget_scales_activation_delta() {
        let (_, mut reg) = setup();
        reg.types[0].act_maps[1].bias = vec![1.0, 1.0, 0.0, 0.0];
        let full = release_activation(&reg, &vesicle(1, vec![0.0; 2], 1.0), &[1.0, 1.0]).unwrap();
        let half = release_activation(&reg, &vesicle(1, vec![0.0; 2], 0.5), &[1.0, 1.0]).unwrap();
        assert_eq!(full, vec![1.0, 1.0]);
        assert_eq!(half, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_content_gives_zero_rank_one() {
        let (_, mut reg) = setup();
        let mut rng = RngStream::for_event(8, Phase::Init, 0, 0);
        let map = reg.types[0].param_maps[1].as_mut().unwrap();
        for v in map.left.data.iter_mut().chain(map.right.data.iter_mut()) {
            *v = rng.uniform(-1.0, 1.0);
        }
        let layer = LayerParams::zeros(2, 2);
        let d = release_parameters(&reg, &vesicle(1, vec![0.0, 0.0], 1.0), &layer).unwrap();
        assert!(d.left.iter().all(|&x| x == 0.0));
        assert!(d.right.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outer_product_structure() {
        let (_, mut reg) = setup();
        {
            let map = reg.types[0].param_maps[1].as_mut().unwrap();
            // left = (c0, 0), right = (0, c0), step 0.1.
            map.left.set(0, 0, 1.0);
            map.right.set(1, 0, 1.0);
            map.step = 0.1;
        }
        let layer = LayerParams::zeros(2, 2);
        let d = release_parameters(&reg, &vesicle(1, vec![1.0, 0.0], 1.0), &layer).unwrap();
        let mut theta = Matrix::zeros(2, 2);
        theta.add_outer(&d.left, &d.right, d.scale).unwrap();
        assert_eq!(theta.get(0, 1), 0.1);
        assert_eq!(theta.get(0, 0), 0.0);
        assert_eq!(theta.get(1, 0), 0.0);
        assert_eq!(theta.get(1, 1), 0.0);
    }

    #[test]
    fn rank_one_property_via_minors() {
        // Every 2x2 minor of an outer product vanishes.
        let (_, mut reg) = setup();
        let mut rng = RngStream::for_event(3, Phase::Init, 1, 0);
        {
            let map = reg.types[0].param_maps[1].as_mut().unwrap();
            for v in map.left.data.iter_mut().chain(map.right.data.iter_mut()) {
                *v = rng.uniform(-1.0, 1.0);
            }
        }
        for trial in 0..20 {
            let content = vec![rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            let layer = LayerParams::zeros(2, 2);
            let d = release_parameters(&reg, &vesicle(1, content, 1.0), &layer).unwrap();
            let mut m = Matrix::zeros(2, 2);
            m.add_outer(&d.left, &d.right, d.scale).unwrap();
            let det = m.get(0, 0) * m.get(1, 1) - m.get(0, 1) * m.get(1, 0);
            assert!(det.abs() < 1e-12, "trial {trial}: det {det}");
        }
    }

    #[test]
    fn identity_rule_recovers_gradient() {
        let (_, reg) = setup();
        let m = release_rule(&reg, &vesicle(1, vec![0.4, 0.1], 1.0), true).unwrap();
        assert_eq!(m.rate_scale, 1.0);
        let mut grads = LayerGrads::zeros(2, 2);
        grads.weight.data = vec![0.1, -0.2, 0.3, 0.0];
        grads.bias = vec![1.0, 2.0];
        let out = apply_rule_mod(&grads, &[&m]);
        assert_eq!(out, vec![0.1, -0.2, 0.3, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn gating_off_freezes_layer() {
        let (_, mut reg) = setup();
        {
            let map = reg.types[0].rule_maps[1].as_mut().unwrap();
            map.scale.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let m = release_rule(&reg, &vesicle(1, vec![0.0, 0.0], 1.0), true).unwrap();
        let mut grads = LayerGrads::zeros(2, 2);
        grads.weight.data = vec![1.0, 2.0, 3.0, 4.0];
        grads.bias = vec![5.0, 6.0];
        let out = apply_rule_mod(&grads, &[&m]);
        assert!(out.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rule_hand_example() {
        let (_, mut reg) = setup();
        {
            let map = reg.types[0].rule_maps[1].as_mut().unwrap();
            map.scale.bias = vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0];
            map.shift.bias = vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0];
        }
        let m = release_rule(&reg, &vesicle(1, vec![0.0, 0.0], 1.0), true).unwrap();
        let mut grads = LayerGrads::zeros(2, 2);
        grads.weight.data = vec![3.0, 4.0, 0.0, 0.0];
        let out = apply_rule_mod(&grads, &[&m]);
        assert_eq!(&out[..2], &[6.0, 3.0]);
    }

    #[test]
    fn rule_requires_fresh_gradients() {
        let (_, reg) = setup();
        assert!(matches!(
            release_rule(&reg, &vesicle(1, vec![0.0, 0.0], 1.0), false),
            Err(NvError::StaleGradient)
        ));
    }

    #[test]
    fn memory_ema_fixed_point() {
        let (_, mut reg) = setup();
        reg.types[0].memory_proj.set(0, 0, 1.0);
        let mut mem = ExternalMemory::new(1);
        let v = vesicle(1, vec![0.0, 0.0], 1.0);
        // Projected write of zero onto a zero slot stays zero.
        memory_write(&mut mem, &reg, &v, 0.1).unwrap();
        assert_eq!(mem.slot, vec![0.0]);
        assert_eq!(mem.write_count, 1);

        // slot = 1.0, write 0: one EMA step lands on 0.9.
        mem.slot = vec![1.0];
        memory_write(&mut mem, &reg, &v, 0.1).unwrap();
        assert!((mem.slot[0] - 0.9).abs() < 1e-15);

        // Repeated writes of z converge geometrically: the gap shrinks 0.9x.
        let vz = vesicle(1, vec![2.0, 0.0], 1.0); // projects to z = 2.0
        let mut prev_gap = (mem.slot[0] - 2.0f64).abs();
        for _ in 0..20 {
            memory_write(&mut mem, &reg, &vz, 0.1).unwrap();
            let gap = (mem.slot[0] - 2.0f64).abs();
            assert!((gap - 0.9 * prev_gap).abs() < 1e-12);
            prev_gap = gap;
        }
    }

    #[test]
    fn memory_read_injection() {
        let mut h = vec![1.0, 1.0];
        let mem = ExternalMemory {
            slot: vec![0.5],
            write_count: 0,
        };
        let mut q = Matrix::zeros(2, 1);
        // Zero projection leaves h untouched.
        memory_read_inject(&mem, &mut h, &q).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);

        q.set(0, 0, 1.0);
        memory_read_inject(&mem, &mut h, &q).unwrap();
        assert_eq!(h, vec![1.5, 1.0]);

        // Zero slot leaves h untouched regardless of Q.
        let empty = ExternalMemory::new(1);
        let mut h2 = vec![0.3, 0.4];
        memory_read_inject(&empty, &mut h2, &q).unwrap();
        assert_eq!(h2, vec![0.3, 0.4]);
    }

    #[test]
    fn combined_release_sums_over_dock_set() {
        let (_, mut reg) = setup();
        reg.types[0].act_maps[1].bias = vec![1.0, 1.0, 0.0, 0.0];
        let h = [1.0, 2.0];
        let empty: Vec<&Vesicle> = vec![];
        assert_eq!(combined_release(&reg, &empty, &h).unwrap(), vec![0.0, 0.0]);

        let v1 = vesicle(1, vec![0.0, 0.0], 1.0);
        let v2 = v1.clone();
        let both = combined_release(&reg, &[&v1, &v2], &h).unwrap();
        let single = combined_release(&reg, &[&v1], &h).unwrap();
        assert_eq!(both, vec![2.0 * single[0], 2.0 * single[1]]);
    }

    #[test]
    fn combined_release_hand_sum() {
        let (_, mut reg) = setup();
        let mut rng = RngStream::for_event(10, Phase::Init, 0, 0);
        let map = &mut reg.types[0].act_maps[1];
        for v in map.weight.data.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        // Two vesicles whose deltas are computed against the same pre-release
        // h must add component-wise.
        let va = vesicle(1, vec![0.7, -0.3], 1.0);
        let vb = vesicle(1, vec![-0.2, 0.9], 0.5);
        let h = [0.4, -1.1];
        let da = release_activation(&reg, &va, &h).unwrap();
        let db = release_activation(&reg, &vb, &h).unwrap();
        let total = combined_release(&reg, &[&va, &vb], &h).unwrap();
        for i in 0..2 {
            assert!((total[i] - (da[i] + db[i])).abs() < 1e-15);
        }
    }
}
