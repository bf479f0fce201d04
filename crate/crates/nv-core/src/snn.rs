//! Spiking-network overlay: leaky integrate-and-fire neurons, eligibility
//! traces, and vesicle-gated three-factor plasticity on a per-neuron graph.
//!
//! The neural dynamics integrate on a fixed tick grid. The vesicle layer is
//! event-driven: vesicles age between spikes and their kernels (emission,
//! migration, docking) run only at spike ticks. Lifetimes are anchored to the
//! birth tick (`remaining = tau0 - (tick - birth) * dt`), so the dense
//! per-tick reference and the event-jumping scheduler agree bitwise at every
//! spike time.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::rng::{EventRng, Phase, RngStream};
use crate::sim::{EventDetail, EventLog};
use crate::vesicle::{self, Vesicle, VesicleConfig, VesicleTypeRegistry};

#[derive(Clone, Debug)]
pub struct LifNeuron {
    pub u: f64,
    pub threshold: f64,
    pub tau_m: f64,
    pub refractory_until: f64,
}

impl LifNeuron {
    pub fn new(threshold: f64, tau_m: f64) -> Self {
        LifNeuron {
            u: 0.0,
            threshold,
            tau_m,
            refractory_until: 0.0,
        }
    }
}

/// Forward-Euler membrane update; returns whether the neuron spiked.
/// During the refractory window the potential is held at reset.
pub fn lif_step(
    neuron: &mut LifNeuron,
    input_current: f64,
    dt: f64,
    now: f64,
    refractory: f64,
) -> bool {
    if now < neuron.refractory_until {
        neuron.u = 0.0;
        return false;
    }
    neuron.u += dt / neuron.tau_m * (-neuron.u + input_current);
    if neuron.u >= neuron.threshold {
        neuron.u = 0.0;
        neuron.refractory_until = now + refractory;
        true
    } else {
        false
    }
}

#[derive(Clone, Debug)]
pub struct Synapse {
    pub w: f64,
    pub e_trace: f64,
    pub tau_e: f64,
    pub pre: NodeId,
    pub post: NodeId,
}

/// Forward-Euler eligibility update with a pair-based STDP drive:
/// `+a_plus` when the presynaptic neuron spiked this tick, `-a_minus` when
/// only the postsynaptic one did.
pub fn trace_step(
    synapse: &mut Synapse,
    pre_spiked: bool,
    post_spiked: bool,
    dt: f64,
    a_plus: f64,
    a_minus: f64,
) {
    let drive = if pre_spiked {
        a_plus
    } else if post_spiked {
        -a_minus
    } else {
        0.0
    };
    synapse.e_trace += dt / synapse.tau_e * (-synapse.e_trace + drive);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeEvent {
    pub time: f64,
    pub neuron: NodeId,
}

impl Eq for SpikeEvent {}

impl Ord for SpikeEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.neuron.cmp(&other.neuron))
    }
}

impl PartialOrd for SpikeEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Modulation strength of one vesicle: `tanh(a_k . c) * budget`.
pub fn modulation_strength(registry: &VesicleTypeRegistry, v: &Vesicle) -> f64 {
    crate::linalg::dot(&registry.types[v.type_id].mod_strength, &v.content).tanh()
        * v.internal.budget
}

/// Aggregated modulatory field at a synapse: the summed strength of all
/// vesicles inside the synapse neighborhood.
pub fn modulatory_field(
    cfg: &VesicleConfig,
    registry: &VesicleTypeRegistry,
    graph: &Graph,
    synapse: &Synapse,
    radius: usize,
) -> Result<f64> {
    let hood = graph.synapse_neighborhood(synapse.post, synapse.pre, radius)?;
    let mut m = 0.0;
    for v in &cfg.vesicles {
        if hood.contains(&v.location) {
            m += modulation_strength(registry, v);
        }
    }
    Ok(m)
}

/// Three-factor weight update `dw = eta * e * m`, applied immediately.
pub fn three_factor_update(synapse: &mut Synapse, m: f64, eta: f64) -> f64 {
    let dw = eta * synapse.e_trace * m;
    synapse.w += dw;
    dw
}

/// Generic three-term plasticity: pre, post, and gated modulatory
/// contributions with their amplitudes.
pub fn darwin3_plasticity(
    stdp_pre: f64,
    stdp_post: f64,
    stdp_mod: f64,
    a_pre: f64,
    a_post: f64,
    a_mod: f64,
) -> f64 {
    a_pre * stdp_pre + a_post * stdp_post + a_mod * stdp_mod
}

/// Vesicle bookkeeping for event-driven runs. Lifetimes are derived from the
/// birth anchor, never accumulated, so any two evaluation schedules agree.
#[derive(Clone, Debug)]
pub struct VesicleOverlay {
    pub vesicles: VesicleConfig,
    /// id -> (birth tick, initial lifetime).
    birth: BTreeMap<u64, (u64, f64)>,
    /// Ids docked at the most recent kernel event.
    pub docked: BTreeSet<u64>,
    pub dt: f64,
    pub seed: u64,
}

impl VesicleOverlay {
    pub fn new(dt: f64, seed: u64) -> Self {
        VesicleOverlay {
            vesicles: VesicleConfig::new(),
            birth: BTreeMap::new(),
            docked: BTreeSet::new(),
            dt,
            seed,
        }
    }

    /// Remaining lifetime at a tick, anchored to the birth tick.
    pub fn remaining(&self, id: u64, tick: u64) -> f64 {
        let (birth, tau0) = self.birth[&id];
        tau0 - (tick - birth) as f64 * self.dt
    }

    /// First tick at which the vesicle is expired (`remaining <= 0`).
    pub fn expire_tick(&self, id: u64) -> u64 {
        let (birth, tau0) = self.birth[&id];
        let mut n = (tau0 / self.dt).ceil() as u64;
        // Adjust against the exact predicate to be safe near representability
        // boundaries.
        while tau0 - n as f64 * self.dt > 0.0 {
            n += 1;
        }
        while n > 0 && tau0 - (n - 1) as f64 * self.dt <= 0.0 {
            n -= 1;
        }
        birth + n
    }

    /// Sync every stored lifetime to its value at `tick`.
    pub fn sync_lifetimes(&mut self, tick: u64) {
        for v in self.vesicles.vesicles.iter_mut() {
            let (birth, tau0) = self.birth[&v.id];
            v.lifetime = tau0 - (tick - birth) as f64 * self.dt;
        }
    }

    fn remove_ids(&mut self, ids: &BTreeSet<u64>) -> Vec<Vesicle> {
        let mut removed = Vec::new();
        self.vesicles.vesicles.retain(|v| {
            if ids.contains(&v.id) {
                removed.push(v.clone());
                false
            } else {
                true
            }
        });
        for v in &removed {
            self.birth.remove(&v.id);
            self.docked.remove(&v.id);
        }
        removed
    }

    /// Dense reference: check the expiry predicate at one tick.
    /// Returns vesicles removed at this tick with synced lifetimes.
    pub fn age_dense_tick(&mut self, tick: u64) -> Vec<Vesicle> {
        let mut gone = BTreeSet::new();
        for v in &self.vesicles.vesicles {
            if self.remaining(v.id, tick) <= 0.0 {
                gone.insert(v.id);
            }
        }
        self.sync_lifetimes(tick);
        self.remove_ids(&gone)
    }

    /// Event scheduler: jump from `after_tick` (exclusive) to `to_tick`
    /// (inclusive), removing mid-gap expiries at their exact ticks.
    pub fn age_event_to(&mut self, after_tick: u64, to_tick: u64) -> Vec<(u64, Vesicle)> {
        let mut expiries: Vec<(u64, u64)> = self
            .vesicles
            .vesicles
            .iter()
            .map(|v| (self.expire_tick(v.id), v.id))
            .filter(|&(t, _)| t > after_tick && t <= to_tick)
            .collect();
        expiries.sort_unstable();
        let mut out = Vec::new();
        for (t, id) in expiries {
            self.sync_lifetimes(t);
            let mut ids = BTreeSet::new();
            ids.insert(id);
            for v in self.remove_ids(&ids) {
                out.push((t, v));
            }
        }
        self.sync_lifetimes(to_tick);
        out
    }

    /// Run the vesicle kernels at a spike tick: emission at every node,
    /// migration of every vesicle, docking decisions. `features[node]` is the
    /// kernel feature vector, `scores[node]` the migration score.
    #[allow(clippy::too_many_arguments)]
    pub fn kernel_event(
        &mut self,
        tick: u64,
        graph: &Graph,
        registry: &VesicleTypeRegistry,
        features: &[Vec<f64>],
        scores: &[f64],
        max_emit: u32,
        log: Option<&mut EventLog>,
    ) -> Result<()> {
        let rng = EventRng::new(self.seed, tick);
        let mut local_log = EventLog::default();

        // Emission.
        for node in 0..graph.num_nodes() {
            for type_id in 0..registry.num_types() {
                let intensity = kernels::emission_intensity(registry, type_id, &features[node])?;
                let mut stream = rng.stream(Phase::Emit, ((node as u64) << 32) | type_id as u64);
                let count = (stream.poisson(intensity) as u32).min(max_emit);
                for _ in 0..count {
                    let id = self.vesicles.allocate_id();
                    let mut spawn_stream = rng.stream(Phase::SpawnContent, id);
                    let v = vesicle::spawn(
                        registry,
                        type_id,
                        NodeId(node),
                        &features[node],
                        id,
                        &mut spawn_stream,
                    )?;
                    self.birth.insert(id, (tick, v.lifetime));
                    local_log.push(
                        tick,
                        Some(id),
                        Some(node),
                        EventDetail::Emit { type_id, intensity },
                    );
                    self.vesicles.vesicles.push(v);
                }
            }
        }

        // Migration.
        let mut moves = Vec::with_capacity(self.vesicles.count());
        for v in &self.vesicles.vesicles {
            let dist = kernels::migration_distribution_from_scores(graph, registry, v, scores)?;
            let mut stream = rng.stream(Phase::Move, v.id);
            moves.push(kernels::sample_move(&dist, &mut stream));
        }
        for (v, dest) in self.vesicles.vesicles.iter_mut().zip(moves) {
            local_log.push(
                tick,
                Some(v.id),
                Some(dest.0),
                EventDetail::Move {
                    from: v.location.0,
                    to: dest.0,
                },
            );
            v.location = dest;
        }

        // Docking.
        self.docked.clear();
        for v in self.vesicles.vesicles.iter_mut() {
            let p =
                kernels::docking_probability_from_features(registry, v, &features[v.location.0])?;
            let mut stream = rng.stream(Phase::Dock, v.id);
            if stream.bernoulli(p) {
                local_log.push(
                    tick,
                    Some(v.id),
                    Some(v.location.0),
                    EventDetail::Dock { p },
                );
                self.docked.insert(v.id);
                v.internal.budget *= 0.5;
            }
        }

        self.sync_lifetimes(tick);
        if let Some(log) = log {
            log.records.extend(local_log.records);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlasticityRule {
    /// `dw = eta * e * m` with the presence-based field.
    ThreeFactor,
    /// Three-term update whose modulatory term is gated by docked vesicles.
    Darwin3,
}

#[derive(Clone, Debug)]
pub struct SnnParams {
    pub tau_m: f64,
    pub tau_e: f64,
    pub threshold: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub neighborhood_radius: usize,
    /// Width of the spike-count feature window, in time units.
    pub window: f64,
    pub eta: f64,
    pub dt: f64,
    pub refractory: f64,
    pub input_current: f64,
    pub input_neurons: usize,
    pub input_noise_std: f64,
    pub max_emit_per_node: u32,
    pub plasticity: PlasticityRule,
    /// Pre/post amplitudes of the generic rule (modulatory amplitude comes
    /// from vesicle content).
    pub a_pre: f64,
    pub a_post: f64,
    /// Decay time constant of the pre/post traces in the generic rule.
    pub tau_pp: f64,
}

impl Default for SnnParams {
    fn default() -> Self {
        SnnParams {
            tau_m: 10.0,
            tau_e: 5.0,
            threshold: 1.0,
            a_plus: 0.1,
            a_minus: 0.12,
            neighborhood_radius: 1,
            window: 5.0,
            eta: 0.01,
            dt: 1.0,
            refractory: 0.0,
            input_current: 1.2,
            input_neurons: 2,
            input_noise_std: 0.0,
            max_emit_per_node: 1,
            plasticity: PlasticityRule::ThreeFactor,
            a_pre: 0.0,
            a_post: 0.0,
            tau_pp: 5.0,
        }
    }
}

/// Per-tick record kept for audits and file output.
#[derive(Clone, Debug)]
pub struct SnnStepRecord {
    pub tick: u64,
    pub spikes: Vec<usize>,
    /// (synapse index, dw, field) for every nonzero update.
    pub weight_deltas: Vec<(usize, f64, f64)>,
    /// (vesicle id, node) snapshot after the vesicle phases.
    pub vesicle_nodes: Vec<(u64, usize)>,
}

pub struct SnnSim {
    pub graph: Graph,
    pub neurons: Vec<LifNeuron>,
    pub synapses: Vec<Synapse>,
    pub registry: VesicleTypeRegistry,
    pub overlay: VesicleOverlay,
    pub params: SnnParams,
    pub seed: u64,
    pub tick: u64,
    pub log: EventLog,
    last_spikes: Vec<bool>,
    spike_history: Vec<VecDeque<u64>>,
    /// Cached modulatory field per synapse; refreshed whenever the vesicle
    /// population changes.
    field_cache: Vec<f64>,
    field_dirty: bool,
    pre_trace: Vec<f64>,
    post_trace: Vec<f64>,
}

impl SnnSim {
    pub fn new(graph: Graph, registry: VesicleTypeRegistry, params: SnnParams, seed: u64) -> Self {
        let n = graph.num_nodes();
        let neurons = (0..n)
            .map(|_| LifNeuron::new(params.threshold, params.tau_m))
            .collect();
        let mut synapses = Vec::new();
        let mut weight_rng = RngStream::for_event(seed, Phase::Init, 1, 0);
        for pre in 0..n {
            for post in graph.neighbors_out(NodeId(pre)) {
                synapses.push(Synapse {
                    w: weight_rng.uniform(0.0, 0.5),
                    e_trace: 0.0,
                    tau_e: params.tau_e,
                    pre: NodeId(pre),
                    post,
                });
            }
        }
        let overlay = VesicleOverlay::new(params.dt, seed);
        let syn_count = synapses.len();
        SnnSim {
            graph,
            neurons,
            synapses,
            registry,
            overlay,
            params,
            seed,
            tick: 0,
            log: EventLog::default(),
            last_spikes: vec![false; n],
            spike_history: vec![VecDeque::new(); n],
            field_cache: vec![0.0; syn_count],
            field_dirty: true,
            pre_trace: vec![0.0; n],
            post_trace: vec![0.0; n],
        }
    }

    /// Kernel feature vector for a node: windowed spike rate, membrane
    /// potential, and a zero placeholder (no gradients in the spiking
    /// overlay), padded to the registry's feature width.
    fn node_features(&self, node: usize) -> Vec<f64> {
        let window_ticks = (self.params.window / self.params.dt).round().max(1.0) as u64;
        let lo = self.tick.saturating_sub(window_ticks);
        let count = self.spike_history[node].iter().filter(|&&t| t > lo).count();
        let mut f = vec![
            count as f64 / window_ticks as f64,
            self.neurons[node].u,
            0.0,
        ];
        f.resize(self.registry.feature_dim, 0.0);
        f
    }

    fn refresh_field_cache(&mut self) -> Result<()> {
        for (i, syn) in self.synapses.iter().enumerate() {
            self.field_cache[i] = modulatory_field(
                &self.overlay.vesicles,
                &self.registry,
                &self.graph,
                syn,
                self.params.neighborhood_radius,
            )?;
        }
        self.field_dirty = false;
        Ok(())
    }

    /// Advance one tick: integrate neurons, update traces, run the vesicle
    /// layer (event-driven), and apply plasticity.
    pub fn step(&mut self) -> Result<SnnStepRecord> {
        let tick = self.tick;
        let now = tick as f64 * self.params.dt;
        let n = self.graph.num_nodes();

        // Synaptic input from last tick's spikes (delta kernel) plus drive.
        let mut input = vec![0.0; n];
        for syn in &self.synapses {
            if self.last_spikes[syn.pre.0] {
                input[syn.post.0] += syn.w;
            }
        }
        let rng = EventRng::new(self.seed, tick);
        for (i, inp) in input.iter_mut().enumerate() {
            if i < self.params.input_neurons {
                *inp += self.params.input_current;
                if self.params.input_noise_std > 0.0 {
                    *inp += self.params.input_noise_std
                        * rng.stream(Phase::SnnInput, i as u64).normal();
                }
            }
        }

        // Membrane integration.
        let mut spikes = Vec::new();
        for i in 0..n {
            if lif_step(
                &mut self.neurons[i],
                input[i],
                self.params.dt,
                now,
                self.params.refractory,
            ) {
                spikes.push(i);
                self.spike_history[i].push_back(tick);
                self.log
                    .push(tick, None, Some(i), EventDetail::Spike { time: now });
            }
        }
        let window_ticks = (self.params.window / self.params.dt).round().max(1.0) as u64;
        for hist in self.spike_history.iter_mut() {
            while let Some(&front) = hist.front() {
                if front + window_ticks < tick {
                    hist.pop_front();
                } else {
                    break;
                }
            }
        }
        let spiked_now: Vec<bool> = (0..n).map(|i| spikes.contains(&i)).collect();

        // Eligibility and pre/post traces.
        for syn in self.synapses.iter_mut() {
            trace_step(
                syn,
                spiked_now[syn.pre.0],
                spiked_now[syn.post.0],
                self.params.dt,
                self.params.a_plus,
                self.params.a_minus,
            );
        }
        for i in 0..n {
            let drive_pre = if spiked_now[i] { 1.0 } else { 0.0 };
            self.pre_trace[i] +=
                self.params.dt / self.params.tau_pp * (-self.pre_trace[i] + drive_pre);
            self.post_trace[i] +=
                self.params.dt / self.params.tau_pp * (-self.post_trace[i] + drive_pre);
        }

        // Vesicle layer: age to this tick; kernels only when spikes occurred.
        let expired = self.overlay.age_event_to(tick.saturating_sub(1), tick);
        for (t, v) in &expired {
            self.log.push(
                *t,
                Some(v.id),
                Some(v.location.0),
                EventDetail::Decay {
                    reason: "expired",
                    lifetime: v.lifetime,
                },
            );
            self.field_dirty = true;
        }
        if !spikes.is_empty() {
            let features: Vec<Vec<f64>> = (0..n).map(|i| self.node_features(i)).collect();
            let scores: Vec<f64> = features.iter().map(|f| f[0]).collect();
            self.overlay.kernel_event(
                tick,
                &self.graph,
                &self.registry,
                &features,
                &scores,
                self.params.max_emit_per_node,
                Some(&mut self.log),
            )?;
            self.field_dirty = true;
        }
        if self.field_dirty {
            self.refresh_field_cache()?;
        }

        // Plasticity.
        let mut weight_deltas = Vec::new();
        for i in 0..self.synapses.len() {
            let dw = match self.params.plasticity {
                PlasticityRule::ThreeFactor => {
                    let m = self.field_cache[i];
                    if m == 0.0 {
                        0.0
                    } else {
                        three_factor_update(&mut self.synapses[i], m, self.params.eta)
                    }
                }
                PlasticityRule::Darwin3 => {
                    let syn = &self.synapses[i];
                    let hood = self.graph.synapse_neighborhood(
                        syn.post,
                        syn.pre,
                        self.params.neighborhood_radius,
                    )?;
                    let mut a_mod = 0.0;
                    for v in &self.overlay.vesicles.vesicles {
                        if self.overlay.docked.contains(&v.id) && hood.contains(&v.location) {
                            a_mod += modulation_strength(&self.registry, v);
                        }
                    }
                    let stdp_pre = if spiked_now[syn.post.0] {
                        self.pre_trace[syn.pre.0]
                    } else {
                        0.0
                    };
                    let stdp_post = if spiked_now[syn.pre.0] {
                        -self.post_trace[syn.post.0]
                    } else {
                        0.0
                    };
                    let stdp_mod = if a_mod != 0.0 { syn.e_trace } else { 0.0 };
                    let dw = darwin3_plasticity(
                        stdp_pre,
                        stdp_post,
                        stdp_mod,
                        self.params.a_pre,
                        self.params.a_post,
                        a_mod,
                    ) * self.params.eta;
                    self.synapses[i].w += dw;
                    dw
                }
            };
            if dw != 0.0 {
                let syn = &self.synapses[i];
                weight_deltas.push((i, dw, self.field_cache[i]));
                self.log.push(
                    tick,
                    None,
                    Some(syn.post.0),
                    EventDetail::Plasticity {
                        pre: syn.pre.0,
                        post: syn.post.0,
                        dw,
                        field: self.field_cache[i],
                    },
                );
            }
        }

        self.last_spikes = spiked_now;
        self.tick += 1;
        Ok(SnnStepRecord {
            tick,
            spikes,
            weight_deltas,
            vesicle_nodes: self
                .overlay
                .vesicles
                .vesicles
                .iter()
                .map(|v| (v.id, v.location.0))
                .collect(),
        })
    }

    pub fn run(&mut self, ticks: u64) -> Result<Vec<SnnStepRecord>> {
        let mut records = Vec::with_capacity(ticks as usize);
        for _ in 0..ticks {
            records.push(self.step()?);
        }
        Ok(records)
    }
}
