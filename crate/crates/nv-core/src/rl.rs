//! REINFORCE control of the vesicle layer.
//!
//! A factored stochastic policy replaces the kernel samplers: per-node
//! emission Bernoullis, a categorical move head over neighbor candidates, a
//! docking Bernoulli, and a categorical choice of release-operator subset.
//! All heads are linear in their input features, so the score functions have
//! closed forms and the policy trains with plain REINFORCE plus a running
//! baseline.

use serde::Serialize;

use crate::error::Result;
use crate::graph::NodeId;
use crate::kernels::EmissionEvent;
use crate::linalg::{dot, sigmoid, Matrix};
use crate::release::ReleaseFlags;
use crate::rng::{EventRng, Phase, RngStream};
use crate::sim::{Controller, CoupledSim, SimRefs};
use crate::vesicle::Vesicle;

/// Bernoulli head: `p = sigmoid(w . x + b)`.
#[derive(Clone, Debug)]
pub struct BernoulliHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BernoulliHead {
    pub fn zeros(dim: usize) -> Self {
        BernoulliHead {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, x) + self.bias)
    }

    pub fn log_prob(&self, x: &[f64], action: bool) -> f64 {
        let p = self.prob(x);
        if action {
            p.ln()
        } else {
            (1.0 - p).ln()
        }
    }

    /// Score function: `d log p / dw = (a - p) x`, `d/db = (a - p)`.
    pub fn grad_log_prob(&self, x: &[f64], action: bool) -> (Vec<f64>, f64) {
        let p = self.prob(x);
        let a = if action { 1.0 } else { 0.0 };
        ((0..x.len()).map(|i| (a - p) * x[i]).collect(), a - p)
    }
}

/// Categorical head scoring candidate feature vectors with shared weights:
/// `logit_c = w . x_c`, sampled by softmax.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub weights: Vec<f64>,
}

impl ScoreHead {
    pub fn zeros(dim: usize) -> Self {
        ScoreHead {
            weights: vec![0.0; dim],
        }
    }

    pub fn probs(&self, candidates: &[Vec<f64>]) -> Vec<f64> {
        let logits: Vec<f64> = candidates.iter().map(|x| dot(&self.weights, x)).collect();
        softmax(&logits)
    }

    pub fn log_prob(&self, candidates: &[Vec<f64>], chosen: usize) -> f64 {
        self.probs(candidates)[chosen].ln()
    }

    /// Score function: `x_chosen - sum_c p_c x_c`.
    pub fn grad_log_prob(&self, candidates: &[Vec<f64>], chosen: usize) -> Vec<f64> {
        let p = self.probs(candidates);
        let mut g = candidates[chosen].clone();
        for (c, x) in candidates.iter().enumerate() {
            for (gi, xi) in g.iter_mut().zip(x.iter()) {
                *gi -= p[c] * xi;
            }
        }
        g
    }

    pub fn sample(&self, candidates: &[Vec<f64>], stream: &mut RngStream) -> usize {
        let p = self.probs(candidates);
        crate::kernels::sample_move(&p, stream).0
    }
}

/// Categorical head with per-class weights: `logits = W x + b`.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassHead {
            weights: Matrix::zeros(classes, dim),
            bias: vec![0.0; classes],
        }
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = self.weights.matvec(x).expect("class head input width");
        for (l, b) in logits.iter_mut().zip(self.bias.iter()) {
            *l += b;
        }
        softmax(&logits)
    }

    pub fn log_prob(&self, x: &[f64], chosen: usize) -> f64 {
        self.probs(x)[chosen].ln()
    }

    /// Score function rows: `(1[j = chosen] - p_j) x`.
    pub fn grad_log_prob(&self, x: &[f64], chosen: usize) -> (Matrix, Vec<f64>) {
        let p = self.probs(x);
        let mut gw = Matrix::zeros(self.weights.rows, self.weights.cols);
        let mut gb = vec![0.0; self.bias.len()];
        for j in 0..p.len() {
            let coef = if j == chosen { 1.0 - p[j] } else { -p[j] };
            gb[j] = coef;
            for (i, xi) in x.iter().enumerate() {
                gw.set(j, i, coef * xi);
            }
        }
        (gw, gb)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Every subset of the enabled release operators (including the empty set).
pub fn release_subsets(base: ReleaseFlags) -> Vec<ReleaseFlags> {
    let mut active = Vec::new();
    if base.activation {
        active.push(0usize);
    }
    if base.parameter {
        active.push(1);
    }
    if base.rule {
        active.push(2);
    }
    if base.memory {
        active.push(3);
    }
    let mut subsets = Vec::with_capacity(1 << active.len());
    for mask in 0..(1u32 << active.len()) {
        let mut f = ReleaseFlags::none();
        for (bit, &op) in active.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                match op {
                    0 => f.activation = true,
                    1 => f.parameter = true,
                    2 => f.rule = true,
                    _ => f.memory = true,
                }
            }
        }
        subsets.push(f);
    }
    subsets
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    /// One emission head per vesicle type, applied to node features.
    pub emit: Vec<BernoulliHead>,
    /// Move head over candidate-node features.
    pub move_head: ScoreHead,
    /// Dock head over `[node features; content; budget]`.
    pub dock: BernoulliHead,
    /// Release-subset head over the same input as `dock`.
    pub release: ClassHead,
    pub subsets: Vec<ReleaseFlags>,
    /// Running-mean baseline over returns.
    pub baseline: f64,
    pub baseline_decay: f64,
    baseline_ready: bool,
}

impl PolicyParams {
    /// The emission head sees the node features plus two vesicle-count
    /// summaries (count at the node, total population).
    pub fn new(
        feature_dim: usize,
        content_dim: usize,
        num_types: usize,
        base: ReleaseFlags,
    ) -> Self {
        let dock_dim = feature_dim + content_dim + 1;
        let subsets = release_subsets(base);
        PolicyParams {
            emit: (0..num_types)
                .map(|_| BernoulliHead::zeros(feature_dim + 2))
                .collect(),
            move_head: ScoreHead::zeros(feature_dim),
            dock: BernoulliHead::zeros(dock_dim),
            release: ClassHead::zeros(subsets.len(), dock_dim),
            subsets,
            baseline: 0.0,
            baseline_decay: 0.99,
            baseline_ready: false,
        }
    }
}

/// Per-step reward: negative loss minus a linear vesicle-count penalty.
pub fn reward(loss_value: f64, n_vesicles: usize, omega_coeff: f64) -> f64 {
    -loss_value - omega_coeff * n_vesicles as f64
}

/// One recorded policy decision with everything needed to replay its
/// log-probability and score gradient.
#[derive(Clone, Debug)]
pub enum Decision {
    Emit {
        type_id: usize,
        features: Vec<f64>,
        taken: bool,
    },
    Move {
        candidates: Vec<Vec<f64>>,
        chosen: usize,
    },
    Dock {
        input: Vec<f64>,
        taken: bool,
    },
    Release {
        input: Vec<f64>,
        subset: usize,
    },
}

#[derive(Clone, Debug, Default)]
pub struct StepDecisions {
    pub decisions: Vec<Decision>,
    pub log_prob: f64,
}

#[derive(Clone, Debug)]
pub struct TrajStep {
    pub decisions: StepDecisions,
    pub reward: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
}

impl Trajectory {
    /// Discounted returns `R_t = r_t + gamma R_{t+1}`.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut acc = 0.0;
        for (i, step) in self.steps.iter().enumerate().rev() {
            acc = step.reward + gamma * acc;
            out[i] = acc;
        }
        out
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Recompute the log-probability of a recorded step under `policy`;
/// bitwise-identical to the value stored at sampling time when the policy
/// has not changed.
pub fn replay_log_prob(policy: &PolicyParams, step: &StepDecisions) -> f64 {
    let mut total = 0.0;
    for d in &step.decisions {
        total += match d {
            Decision::Emit {
                type_id,
                features,
                taken,
            } => policy.emit[*type_id].log_prob(features, *taken),
            Decision::Move { candidates, chosen } => policy.move_head.log_prob(candidates, *chosen),
            Decision::Dock { input, taken } => policy.dock.log_prob(input, *taken),
            Decision::Release { input, subset } => policy.release.log_prob(input, *subset),
        };
    }
    total
}

/// Gradient accumulator mirroring [`PolicyParams`].
#[derive(Clone, Debug)]
pub struct PolicyGrad {
    pub emit: Vec<(Vec<f64>, f64)>,
    pub move_head: Vec<f64>,
    pub dock: (Vec<f64>, f64),
    pub release: (Matrix, Vec<f64>),
}

impl PolicyGrad {
    pub fn zeros_like(policy: &PolicyParams) -> Self {
        PolicyGrad {
            emit: policy
                .emit
                .iter()
                .map(|h| (vec![0.0; h.weights.len()], 0.0))
                .collect(),
            move_head: vec![0.0; policy.move_head.weights.len()],
            dock: (vec![0.0; policy.dock.weights.len()], 0.0),
            release: (
                Matrix::zeros(policy.release.weights.rows, policy.release.weights.cols),
                vec![0.0; policy.release.bias.len()],
            ),
        }
    }

    /// Accumulate `coef * grad log pi(step decisions)`.
    pub fn accumulate(&mut self, policy: &PolicyParams, step: &StepDecisions, coef: f64) {
        for d in &step.decisions {
            match d {
                Decision::Emit {
                    type_id,
                    features,
                    taken,
                } => {
                    let (gw, gb) = policy.emit[*type_id].grad_log_prob(features, *taken);
                    let acc = &mut self.emit[*type_id];
                    for (a, g) in acc.0.iter_mut().zip(gw.iter()) {
                        *a += coef * g;
                    }
                    acc.1 += coef * gb;
                }
                Decision::Move { candidates, chosen } => {
                    let g = policy.move_head.grad_log_prob(candidates, *chosen);
                    for (a, gi) in self.move_head.iter_mut().zip(g.iter()) {
                        *a += coef * gi;
                    }
                }
                Decision::Dock { input, taken } => {
                    let (gw, gb) = policy.dock.grad_log_prob(input, *taken);
                    for (a, g) in self.dock.0.iter_mut().zip(gw.iter()) {
                        *a += coef * g;
                    }
                    self.dock.1 += coef * gb;
                }
                Decision::Release { input, subset } => {
                    let (gw, gb) = policy.release.grad_log_prob(input, *subset);
                    for (a, g) in self.release.0.data.iter_mut().zip(gw.data.iter()) {
                        *a += coef * g;
                    }
                    for (a, g) in self.release.1.iter_mut().zip(gb.iter()) {
                        *a += coef * g;
                    }
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let mut sq = 0.0;
        for (w, b) in &self.emit {
            sq += w.iter().map(|v| v * v).sum::<f64>() + b * b;
        }
        sq += self.move_head.iter().map(|v| v * v).sum::<f64>();
        sq += self.dock.0.iter().map(|v| v * v).sum::<f64>() + self.dock.1 * self.dock.1;
        sq += self.release.0.data.iter().map(|v| v * v).sum::<f64>();
        sq += self.release.1.iter().map(|v| v * v).sum::<f64>();
        sq.sqrt()
    }
}

/// REINFORCE update: `phi += lr * sum_t grad log pi(a_t | s_t) (R_t - b_t)`
/// with the policy's running-mean baseline (updated after each use).
pub fn reinforce_update(
    policy: &mut PolicyParams,
    trajectories: &[Trajectory],
    gamma: f64,
    learning_rate: f64,
) -> f64 {
    let mut grad = PolicyGrad::zeros_like(policy);
    for traj in trajectories {
        let returns = traj.returns(gamma);
        for (step, &ret) in traj.steps.iter().zip(returns.iter()) {
            let baseline = if policy.baseline_ready {
                policy.baseline
            } else {
                0.0
            };
            grad.accumulate(policy, &step.decisions, ret - baseline);
            policy.baseline = if policy.baseline_ready {
                policy.baseline_decay * policy.baseline + (1.0 - policy.baseline_decay) * ret
            } else {
                ret
            };
            policy.baseline_ready = true;
        }
    }
    apply_grad(policy, &grad, learning_rate);
    grad.norm() * learning_rate
}

fn apply_grad(policy: &mut PolicyParams, grad: &PolicyGrad, lr: f64) {
    for (head, (gw, gb)) in policy.emit.iter_mut().zip(grad.emit.iter()) {
        for (w, g) in head.weights.iter_mut().zip(gw.iter()) {
            *w += lr * g;
        }
        head.bias += lr * gb;
    }
    for (w, g) in policy
        .move_head
        .weights
        .iter_mut()
        .zip(grad.move_head.iter())
    {
        *w += lr * g;
    }
    for (w, g) in policy.dock.weights.iter_mut().zip(grad.dock.0.iter()) {
        *w += lr * g;
    }
    policy.dock.bias += lr * grad.dock.1;
    for (w, g) in policy
        .release
        .weights
        .data
        .iter_mut()
        .zip(grad.release.0.data.iter())
    {
        *w += lr * g;
    }
    for (b, g) in policy.release.bias.iter_mut().zip(grad.release.1.iter()) {
        *b += lr * g;
    }
}

/// Controller that samples every vesicle decision from the policy, recording
/// enough to replay log-probabilities exactly.
pub struct PolicyController<'a> {
    pub policy: &'a PolicyParams,
    pub captured: StepDecisions,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a PolicyParams) -> Self {
        PolicyController {
            policy,
            captured: StepDecisions::default(),
        }
    }

    fn dock_input(s: &SimRefs, v: &Vesicle) -> Vec<f64> {
        let mut input = s.net.node_features(v.location);
        input.extend_from_slice(&v.content);
        input.push(v.internal.budget);
        input
    }
}

impl Controller for PolicyController<'_> {
    fn emissions(&mut self, s: &SimRefs, rng: EventRng) -> Result<Vec<EmissionEvent>> {
        let mut events = Vec::new();
        let counts = s.vesicles.counts_per_node(s.graph.num_nodes());
        let total = s.vesicles.count() as f64;
        for node in 0..s.graph.num_nodes() {
            let mut features = s.net.node_features(NodeId(node));
            features.push(counts[node] as f64);
            features.push(total);
            for (type_id, head) in self.policy.emit.iter().enumerate() {
                let p = head.prob(&features);
                let mut stream =
                    rng.stream(Phase::PolicyEmit, ((node as u64) << 32) | type_id as u64);
                let taken = stream.bernoulli(p);
                self.captured.log_prob += head.log_prob(&features, taken);
                self.captured.decisions.push(Decision::Emit {
                    type_id,
                    features: features.clone(),
                    taken,
                });
                if taken {
                    events.push(EmissionEvent {
                        node: NodeId(node),
                        type_id,
                        count: 1,
                        intensity: p,
                    });
                }
            }
        }
        Ok(events)
    }

    fn migrate(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<NodeId> {
        let support = s.graph.migration_support(v.location);
        let candidates: Vec<Vec<f64>> = support.iter().map(|n| s.net.node_features(*n)).collect();
        let mut stream = rng.stream(Phase::PolicyMove, v.id);
        let chosen = self.policy.move_head.sample(&candidates, &mut stream);
        self.captured.log_prob += self.policy.move_head.log_prob(&candidates, chosen);
        self.captured
            .decisions
            .push(Decision::Move { candidates, chosen });
        Ok(support[chosen])
    }

    fn dock(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<(bool, f64)> {
        let input = Self::dock_input(s, v);
        let p = self.policy.dock.prob(&input);
        let mut stream = rng.stream(Phase::PolicyDock, v.id);
        let taken = stream.bernoulli(p);
        self.captured.log_prob += self.policy.dock.log_prob(&input, taken);
        self.captured
            .decisions
            .push(Decision::Dock { input, taken });
        Ok((taken, p))
    }

    fn release_subset(
        &mut self,
        s: &SimRefs,
        v: &Vesicle,
        _base: ReleaseFlags,
        rng: EventRng,
    ) -> Result<ReleaseFlags> {
        let input = Self::dock_input(s, v);
        let probs = self.policy.release.probs(&input);
        let mut stream = rng.stream(Phase::PolicyRelease, v.id);
        let subset = crate::kernels::sample_move(&probs, &mut stream).0;
        self.captured.log_prob += self.policy.release.log_prob(&input, subset);
        self.captured
            .decisions
            .push(Decision::Release { input, subset });
        Ok(self.policy.subsets[subset])
    }
}

/// Per-episode summary emitted by the rl mode.
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeReport {
    pub episode: u64,
    pub total_reward: f64,
    pub mean_loss: f64,
    pub update_norm: f64,
}

/// Run one policy-controlled episode on `sim` (which should be freshly
/// constructed for the episode).
pub fn rl_episode(
    sim: &mut CoupledSim,
    policy: &PolicyParams,
    horizon: u64,
    omega_coeff: f64,
) -> Result<Trajectory> {
    let mut traj = Trajectory::default();
    for _ in 0..horizon {
        let (x, y) = sim.data.batch(sim.seed, sim.step_index);
        let mut controller = PolicyController::new(policy);
        let report = sim.step_on(&x, &y, &mut controller)?;
        let r = reward(report.loss_post, report.n_vesicles, omega_coeff);
        traj.steps.push(TrajStep {
            decisions: controller.captured,
            reward: r,
        });
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelParams;
    use crate::sim::SimOptions;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn returns_recursion() {
        let mut t = Trajectory::default();
        for r in [1.0, 2.0, 3.0] {
            t.steps.push(TrajStep {
                decisions: StepDecisions::default(),
                reward: r,
            });
        }
        let r1 = t.returns(1.0);
        assert_eq!(r1, vec![6.0, 5.0, 3.0]);
        let rg = t.returns(0.5);
        assert!((rg[0] - (1.0 + 0.5 * (2.0 + 0.5 * 3.0))).abs() < 1e-15);
    }

    #[test]
    fn reward_reference_points() {
        assert_eq!(reward(0.0, 0, 0.1), 0.0);
        assert!((reward(0.5, 3, 0.1) + 0.8).abs() < 1e-15);
        assert_eq!(reward(0.7, 5, 0.0), -0.7);
    }

    #[test]
    fn bernoulli_grad_matches_finite_differences() {
        let mut rng = RngStream::new(8, 1);
        for trial in 0..100 {
            let dim = 3;
            let mut head = BernoulliHead::zeros(dim);
            for w in head.weights.iter_mut() {
                *w = rng.uniform(-2.0, 2.0);
            }
            head.bias = rng.uniform(-1.0, 1.0);
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let action = rng.bernoulli(0.5);
            let (gw, gb) = head.grad_log_prob(&x, action);
            let eps = 1e-6;
            for i in 0..dim {
                let mut hp = head.clone();
                hp.weights[i] += eps;
                let mut hm = head.clone();
                hm.weights[i] -= eps;
                let fd = (hp.log_prob(&x, action) - hm.log_prob(&x, action)) / (2.0 * eps);
                assert!(
                    rel_close(gw[i], fd, 1e-6),
                    "trial {trial} w{i}: {} vs {fd}",
                    gw[i]
                );
            }
            let mut hp = head.clone();
            hp.bias += eps;
            let mut hm = head.clone();
            hm.bias -= eps;
            let fd = (hp.log_prob(&x, action) - hm.log_prob(&x, action)) / (2.0 * eps);
            assert!(rel_close(gb, fd, 1e-6));
        }
    }

    #[test]
    fn score_head_grad_matches_finite_differences() {
        let mut rng = RngStream::new(9, 2);
        for _ in 0..100 {
            let dim = 3;
            let mut head = ScoreHead::zeros(dim);
            for w in head.weights.iter_mut() {
                *w = rng.uniform(-2.0, 2.0);
            }
            let candidates: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let chosen = (rng.next_u64() % 4) as usize;
            let g = head.grad_log_prob(&candidates, chosen);
            let eps = 1e-6;
            for i in 0..dim {
                let mut hp = head.clone();
                hp.weights[i] += eps;
                let mut hm = head.clone();
                hm.weights[i] -= eps;
                let fd = (hp.log_prob(&candidates, chosen) - hm.log_prob(&candidates, chosen))
                    / (2.0 * eps);
                assert!(rel_close(g[i], fd, 1e-6), "{} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn class_head_grad_matches_finite_differences() {
        let mut rng = RngStream::new(10, 3);
        for _ in 0..100 {
            let (classes, dim) = (3, 2);
            let mut head = ClassHead::zeros(classes, dim);
            for w in head.weights.data.iter_mut() {
                *w = rng.uniform(-2.0, 2.0);
            }
            for b in head.bias.iter_mut() {
                *b = rng.uniform(-1.0, 1.0);
            }
            let x: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let chosen = (rng.next_u64() % classes as u64) as usize;
            let (gw, gb) = head.grad_log_prob(&x, chosen);
            let eps = 1e-6;
            for idx in 0..classes * dim {
                let mut hp = head.clone();
                hp.weights.data[idx] += eps;
                let mut hm = head.clone();
                hm.weights.data[idx] -= eps;
                let fd = (hp.log_prob(&x, chosen) - hm.log_prob(&x, chosen)) / (2.0 * eps);
                assert!(rel_close(gw.data[idx], fd, 1e-6));
            }
            for j in 0..classes {
                let mut hp = head.clone();
                hp.bias[j] += eps;
                let mut hm = head.clone();
                hm.bias[j] -= eps;
                let fd = (hp.log_prob(&x, chosen) - hm.log_prob(&x, chosen)) / (2.0 * eps);
                assert!(rel_close(gb[j], fd, 1e-6));
            }
        }
    }

    #[test]
    fn saturated_emit_heads_never_emit() {
        let mut head = BernoulliHead::zeros(3);
        head.bias = -30.0;
        let x = [0.5, -0.5, 1.0];
        let p = head.prob(&x);
        assert!(p <= 1e-12);
        // log-probability of "not taken" is essentially zero.
        assert!(head.log_prob(&x, false).abs() < 1e-8);
    }

    #[test]
    fn uniform_two_action_head() {
        let head = ScoreHead::zeros(2);
        let candidates = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = head.probs(&candidates);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((head.log_prob(&candidates, 0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn release_subsets_enumerate_powerset() {
        let all = release_subsets(ReleaseFlags::default());
        assert_eq!(all.len(), 16);
        let act_only = release_subsets(ReleaseFlags {
            activation: true,
            parameter: false,
            rule: false,
            memory: false,
        });
        assert_eq!(act_only.len(), 2);
        assert!(release_subsets(ReleaseFlags::none()).len() == 1);
    }

    /// Two-armed bandit with rewards 1 and 0 on a ScoreHead over one-hot
    /// candidates; analytic gradient of J = p_0 is available in closed form.
    struct Bandit {
        head: ScoreHead,
    }

    impl Bandit {
        fn candidates() -> Vec<Vec<f64>> {
            vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        }

        fn analytic_grad(&self) -> Vec<f64> {
            // J = p0; dJ/dw = p0 * (x0 - sum p_c x_c) = p0 p1 (x0 - x1).
            let p = self.head.probs(&Self::candidates());
            vec![p[0] * p[1], -p[0] * p[1]]
        }
    }

    #[test]
    fn bandit_monte_carlo_gradient_matches_analytic() {
        let mut bandit = Bandit {
            head: ScoreHead::zeros(2),
        };
        bandit.head.weights = vec![0.3, -0.2];
        let candidates = Bandit::candidates();
        let analytic = bandit.analytic_grad();
        let n = 200_000u64;
        let mut estimate = vec![0.0; 2];
        let mut stream = RngStream::new(123, 0);
        for _ in 0..n {
            let a = bandit.head.sample(&candidates, &mut stream);
            let r = if a == 0 { 1.0 } else { 0.0 };
            let g = bandit.head.grad_log_prob(&candidates, a);
            for (e, gi) in estimate.iter_mut().zip(g.iter()) {
                *e += r * gi;
            }
        }
        for (e, a) in estimate.iter().zip(analytic.iter()) {
            let mc = e / n as f64;
            assert!((mc - a).abs() < 1e-2, "{mc} vs {a}");
        }
    }

    #[test]
    fn bandit_training_prefers_rewarded_arm() {
        let mut policy = PolicyParams::new(2, 0, 0, ReleaseFlags::none());
        // Reuse the move head as the bandit head.
        let candidates = Bandit::candidates();
        let mut stream = RngStream::new(7, 7);
        for _ in 0..2000 {
            let a = policy.move_head.sample(&candidates, &mut stream);
            let r = if a == 0 { 1.0 } else { 0.0 };
            let mut traj = Trajectory::default();
            traj.steps.push(TrajStep {
                decisions: StepDecisions {
                    decisions: vec![Decision::Move {
                        candidates: candidates.clone(),
                        chosen: a,
                    }],
                    log_prob: policy.move_head.log_prob(&candidates, a),
                },
                reward: r,
            });
            reinforce_update(&mut policy, &[traj], 0.99, 0.05);
        }
        let p = policy.move_head.probs(&candidates);
        assert!(p[0] >= 0.95, "p(rewarded arm) = {}", p[0]);
    }

    #[test]
    fn constant_rewards_shrink_updates_via_baseline() {
        let mut policy = PolicyParams::new(2, 0, 0, ReleaseFlags::none());
        let candidates = Bandit::candidates();
        let mut stream = RngStream::new(3, 3);
        let mut last_norm = f64::INFINITY;
        for i in 0..400 {
            let a = policy.move_head.sample(&candidates, &mut stream);
            let mut traj = Trajectory::default();
            traj.steps.push(TrajStep {
                decisions: StepDecisions {
                    decisions: vec![Decision::Move {
                        candidates: candidates.clone(),
                        chosen: a,
                    }],
                    log_prob: policy.move_head.log_prob(&candidates, a),
                },
                reward: 1.0,
            });
            let norm = reinforce_update(&mut policy, &[traj], 1.0, 0.01);
            if i > 200 {
                assert!(norm < 1e-10, "baseline failed to cancel: {norm}");
            }
            last_norm = norm;
        }
        assert!(last_norm < 1e-10);
    }

    #[test]
    fn baseline_is_unbiased_on_bandit() {
        // Gradient estimates with and without the baseline agree in mean.
        let head = {
            let mut h = ScoreHead::zeros(2);
            h.weights = vec![0.4, -0.1];
            h
        };
        let candidates = Bandit::candidates();
        let n = 100_000u64;
        let baseline = 0.37;
        let mut with = vec![0.0; 2];
        let mut without = vec![0.0; 2];
        let mut sq_diff = vec![0.0; 2];
        let mut stream = RngStream::new(55, 0);
        for _ in 0..n {
            let a = head.sample(&candidates, &mut stream);
            let r = if a == 0 { 1.0 } else { 0.0 };
            let g = head.grad_log_prob(&candidates, a);
            for i in 0..2 {
                without[i] += r * g[i];
                with[i] += (r - baseline) * g[i];
                sq_diff[i] += (baseline * g[i]) * (baseline * g[i]);
            }
        }
        for i in 0..2 {
            let d = (with[i] - without[i]) / n as f64;
            let se = (sq_diff[i] / n as f64).sqrt() / (n as f64).sqrt();
            assert!(
                d.abs() < 3.0 * se + 1e-12,
                "component {i}: diff {d}, se {se}"
            );
        }
    }

    fn rl_sim(seed: u64) -> CoupledSim {
        crate::sim::tests::build_sim(seed, KernelParams::default(), SimOptions::default())
    }

    #[test]
    fn episode_replay_log_probs_bitwise() {
        let mut sim = rl_sim(19);
        let policy = PolicyParams::new(
            sim.net.feature_dim(),
            sim.registry.content_dim,
            sim.registry.num_types(),
            sim.options.release_flags,
        );
        let traj = rl_episode(&mut sim, &policy, 15, 0.05).unwrap();
        assert_eq!(traj.steps.len(), 15);
        for step in &traj.steps {
            let replayed = replay_log_prob(&policy, &step.decisions);
            assert_eq!(replayed.to_bits(), step.decisions.log_prob.to_bits());
        }
    }

    #[test]
    fn zero_horizon_is_empty() {
        let mut sim = rl_sim(20);
        let policy = PolicyParams::new(
            sim.net.feature_dim(),
            sim.registry.content_dim,
            sim.registry.num_types(),
            sim.options.release_flags,
        );
        let traj = rl_episode(&mut sim, &policy, 0, 0.1).unwrap();
        assert!(traj.steps.is_empty());
    }

    #[test]
    fn suppressed_policy_recovers_baseline_losses() {
        // Emit heads saturated off: the policy-controlled env is plain SGD.
        let mut sim = rl_sim(22);
        let mut policy = PolicyParams::new(
            sim.net.feature_dim(),
            sim.registry.content_dim,
            sim.registry.num_types(),
            sim.options.release_flags,
        );
        for head in policy.emit.iter_mut() {
            head.bias = -40.0;
        }
        let traj = rl_episode(&mut sim, &policy, 20, 0.0).unwrap();

        let mut reference = rl_sim(22);
        reference.kernel_params.max_emit_per_node = 0;
        let reports = reference.run(20).unwrap();
        for (step, report) in traj.steps.iter().zip(reports.iter()) {
            assert_eq!(step.reward.to_bits(), (-report.loss_post).to_bits());
        }
    }

    #[test]
    fn fixed_policy_fixed_seed_identical_trajectories() {
        let policy = {
            let sim = rl_sim(30);
            let mut p = PolicyParams::new(
                sim.net.feature_dim(),
                sim.registry.content_dim,
                sim.registry.num_types(),
                sim.options.release_flags,
            );
            p.dock.bias = 0.7;
            p
        };
        let mut a = rl_sim(30);
        let mut b = rl_sim(30);
        let ta = rl_episode(&mut a, &policy, 12, 0.01).unwrap();
        let tb = rl_episode(&mut b, &policy, 12, 0.01).unwrap();
        for (x, y) in ta.steps.iter().zip(tb.steps.iter()) {
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(
                x.decisions.log_prob.to_bits(),
                y.decisions.log_prob.to_bits()
            );
        }
        assert_eq!(a.digest(), b.digest());
    }
}
