//! The coupled network/vesicle transition step and run loop.
//!
//! One step executes, in order: forward pass (with memory read injection),
//! backward pass, emission, migration, docking + release, decay, and the
//! parameter update with rule-modulated gradients. Every stochastic decision
//! comes from a stream keyed by `(seed, phase, entity, step)`, and every
//! event lands in an append-only log.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{NvError, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{self, EmissionEvent, KernelParams};
use crate::linalg::Matrix;
use crate::network::{loss, NetworkState};
use crate::release::{self, RankOneDelta, ReleaseFlags, RuleMod};
use crate::rng::{EventRng, Phase, RngStream};
use crate::vesicle::{self, joint_state_snapshot, Vesicle, VesicleConfig, VesicleTypeRegistry};

/// Structured payload of one event record.
#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum EventDetail {
    Emit {
        type_id: usize,
        intensity: f64,
    },
    Move {
        from: usize,
        to: usize,
    },
    Dock {
        p: f64,
    },
    Release {
        ops: Vec<&'static str>,
        budget: f64,
    },
    Decay {
        reason: &'static str,
        lifetime: f64,
    },
    Update {
        layers: usize,
    },
    // Spiking-overlay records.
    Spike {
        time: f64,
    },
    Plasticity {
        pre: usize,
        post: usize,
        dw: f64,
        field: f64,
    },
}

impl EventDetail {
    /// Rank used to check the per-step phase ordering; dock and release
    /// share a rank because they interleave per vesicle.
    pub fn phase_rank(&self) -> u8 {
        match self {
            EventDetail::Emit { .. } | EventDetail::Spike { .. } => 0,
            EventDetail::Move { .. } => 1,
            EventDetail::Dock { .. } | EventDetail::Release { .. } => 2,
            EventDetail::Decay { .. } => 3,
            EventDetail::Update { .. } | EventDetail::Plasticity { .. } => 4,
        }
    }

    pub fn phase_name(&self) -> &'static str {
        match self {
            EventDetail::Emit { .. } => "emit",
            EventDetail::Move { .. } => "move",
            EventDetail::Dock { .. } => "dock",
            EventDetail::Release { .. } => "release",
            EventDetail::Decay { .. } => "decay",
            EventDetail::Update { .. } => "update",
            EventDetail::Spike { .. } => "spike",
            EventDetail::Plasticity { .. } => "plasticity",
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EventRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vesicle: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    /// Carries the `phase` tag plus the per-phase payload.
    #[serde(flatten)]
    pub detail: EventDetail,
}

impl EventRecord {
    pub fn phase(&self) -> &'static str {
        self.detail.phase_name()
    }
}

/// Append-only event log; one line of JSON per record when serialized.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

impl EventLog {
    pub fn push(
        &mut self,
        step: u64,
        vesicle: Option<u64>,
        node: Option<usize>,
        detail: EventDetail,
    ) {
        self.records.push(EventRecord {
            step,
            vesicle,
            node,
            detail,
        });
    }

    pub fn write_ndjson<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        for rec in &self.records {
            let line = serde_json::to_string(rec).expect("event serialization");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// (emissions, removals) counted from the log for one step.
    pub fn step_counts(&self, step: u64) -> (u64, u64) {
        let mut emitted = 0;
        let mut removed = 0;
        for r in self.records.iter().filter(|r| r.step == step) {
            match r.detail {
                EventDetail::Emit { .. } => emitted += 1,
                EventDetail::Decay { .. } => removed += 1,
                _ => {}
            }
        }
        (emitted, removed)
    }
}

/// Per-step scalar metrics.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub n_vesicles: usize,
    pub emissions: u64,
    pub docks: u64,
    pub removals: u64,
    pub per_node_counts: Vec<u32>,
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh uniform input each step, target from a fixed random linear map.
    Teacher { weights: Matrix },
    /// One constant batch.
    Fixed { x: Vec<f64>, y: Vec<f64> },
}

const TEACHER_ENTITY: u64 = u64::MAX;

impl DataSource {
    pub fn teacher(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = RngStream::for_event(seed, Phase::Data, TEACHER_ENTITY, 0);
        DataSource::Teacher {
            weights: Matrix::uniform(d_out, d_in, 1.0, &mut rng),
        }
    }

    pub fn fixed(x: Vec<f64>, y: Vec<f64>) -> Self {
        DataSource::Fixed { x, y }
    }

    /// Batch for a step; pure in `(seed, step)`.
    pub fn batch(&self, seed: u64, step: u64) -> (Vec<f64>, Vec<f64>) {
        match self {
            DataSource::Teacher { weights } => {
                let mut rng = RngStream::for_event(seed, Phase::Data, 0, step);
                let x: Vec<f64> = (0..weights.cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let y = weights.matvec(&x).expect("teacher width");
                (x, y)
            }
            DataSource::Fixed { x, y } => (x.clone(), y.clone()),
        }
    }
}

/// Read-only view handed to controllers.
pub struct SimRefs<'a> {
    pub graph: &'a Graph,
    pub registry: &'a VesicleTypeRegistry,
    pub net: &'a NetworkState,
    pub kernel_params: &'a KernelParams,
    pub vesicles: &'a VesicleConfig,
}

/// Pluggable decision source for the stochastic phases. The default
/// [`KernelController`] samples the learned kernels; the policy overlay
/// substitutes its own heads.
pub trait Controller {
    fn emissions(&mut self, s: &SimRefs, rng: EventRng) -> Result<Vec<EmissionEvent>>;
    fn migrate(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<NodeId>;
    /// Returns (docked, probability used for the decision).
    fn dock(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<(bool, f64)>;
    fn release_subset(
        &mut self,
        s: &SimRefs,
        v: &Vesicle,
        base: ReleaseFlags,
        rng: EventRng,
    ) -> Result<ReleaseFlags>;
}

/// Samples every decision from the registry kernels.
pub struct KernelController;

impl Controller for KernelController {
    fn emissions(&mut self, s: &SimRefs, rng: EventRng) -> Result<Vec<EmissionEvent>> {
        kernels::sample_emissions(s.graph, s.registry, s.net, s.kernel_params, rng)
    }

    fn migrate(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<NodeId> {
        let dist = kernels::migration_distribution(s.graph, s.registry, v, s.net)?;
        let mut stream = rng.stream(Phase::Move, v.id);
        Ok(kernels::sample_move(&dist, &mut stream))
    }

    fn dock(&mut self, s: &SimRefs, v: &Vesicle, rng: EventRng) -> Result<(bool, f64)> {
        let p = kernels::docking_probability(s.registry, v, s.net)?;
        if s.kernel_params.force_dock {
            return Ok((true, p));
        }
        let mut stream = rng.stream(Phase::Dock, v.id);
        Ok((stream.bernoulli(p), p))
    }

    fn release_subset(
        &mut self,
        _s: &SimRefs,
        _v: &Vesicle,
        base: ReleaseFlags,
        _rng: EventRng,
    ) -> Result<ReleaseFlags> {
        Ok(base)
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub learning_rate: f64,
    pub vesicle_every: u64,
    pub release_flags: ReleaseFlags,
    pub memory_write_rate: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            learning_rate: 0.05,
            vesicle_every: 1,
            release_flags: ReleaseFlags::default(),
            memory_write_rate: 0.1,
        }
    }
}

pub struct CoupledSim {
    pub graph: Graph,
    pub net: NetworkState,
    pub registry: VesicleTypeRegistry,
    pub vesicles: VesicleConfig,
    pub kernel_params: KernelParams,
    pub options: SimOptions,
    pub data: DataSource,
    pub seed: u64,
    pub step_index: u64,
    pub log: EventLog,
}

impl CoupledSim {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: Graph,
        net: NetworkState,
        registry: VesicleTypeRegistry,
        kernel_params: KernelParams,
        options: SimOptions,
        data: DataSource,
        seed: u64,
    ) -> Self {
        CoupledSim {
            graph,
            net,
            registry,
            vesicles: VesicleConfig::new(),
            kernel_params,
            options,
            data,
            seed,
            step_index: 0,
            log: EventLog::default(),
        }
    }

    pub fn digest(&self) -> u64 {
        joint_state_snapshot(&self.net, &self.vesicles)
    }

    /// One full transition step on the next batch from the data source.
    pub fn step(&mut self) -> Result<StepReport> {
        let (x, y) = self.data.batch(self.seed, self.step_index);
        self.step_on(&x, &y, &mut KernelController)
    }

    /// One full transition step with an explicit controller.
    pub fn step_on(
        &mut self,
        x: &[f64],
        y: &[f64],
        controller: &mut dyn Controller,
    ) -> Result<StepReport> {
        let step = self.step_index;
        let rng = EventRng::new(self.seed, step);
        let n_before = self.vesicles.count();
        let vesicle_phase = step % self.options.vesicle_every.max(1) == 0;

        // Phase 1: forward with memory read injection.
        let yhat = self.net.forward_pass(x, Some(&self.registry.read_proj))?;
        let loss_pre = loss(&yhat, y)?;
        self.net.record_loss(loss_pre);

        // Phase 2: backward on the pre-release output.
        self.net.backward(y)?;

        let mut emissions: u64 = 0;
        let mut docks: u64 = 0;
        let mut removals: u64 = 0;
        let mut loss_post = loss_pre;

        if vesicle_phase {
            // Phase 3: emission.
            let events = {
                let refs = SimRefs {
                    graph: &self.graph,
                    registry: &self.registry,
                    net: &self.net,
                    kernel_params: &self.kernel_params,
                    vesicles: &self.vesicles,
                };
                controller.emissions(&refs, rng)?
            };
            for ev in &events {
                let features = self.net.node_features(ev.node);
                for _ in 0..ev.count {
                    let id = self.vesicles.allocate_id();
                    let mut stream = rng.stream(Phase::SpawnContent, id);
                    let v = vesicle::spawn(
                        &self.registry,
                        ev.type_id,
                        ev.node,
                        &features,
                        id,
                        &mut stream,
                    )?;
                    self.log.push(
                        step,
                        Some(id),
                        Some(ev.node.0),
                        EventDetail::Emit {
                            type_id: ev.type_id,
                            intensity: ev.intensity,
                        },
                    );
                    self.vesicles.vesicles.push(v);
                    emissions += 1;
                }
            }

            // Phase 4: migration (all vesicles, ascending id).
            let mut moves = Vec::with_capacity(self.vesicles.count());
            {
                let refs = SimRefs {
                    graph: &self.graph,
                    registry: &self.registry,
                    net: &self.net,
                    kernel_params: &self.kernel_params,
                    vesicles: &self.vesicles,
                };
                for v in &self.vesicles.vesicles {
                    moves.push(controller.migrate(&refs, v, rng)?);
                }
            }
            for (v, dest) in self.vesicles.vesicles.iter_mut().zip(moves.iter()) {
                self.log.push(
                    step,
                    Some(v.id),
                    Some(dest.0),
                    EventDetail::Move {
                        from: v.location.0,
                        to: dest.0,
                    },
                );
                v.location = *dest;
            }

            // Phase 5: docking decisions, release effects against the
            // pre-release state, then ordered application.
            let mut act_deltas: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut param_deltas: Vec<(usize, RankOneDelta)> = Vec::new();
            let mut rule_mods: BTreeMap<usize, Vec<RuleMod>> = BTreeMap::new();
            let mut mem_writes: Vec<usize> = Vec::new();
            let mut absorbed: BTreeSet<u64> = BTreeSet::new();

            for i in 0..self.vesicles.vesicles.len() {
                let (docked, p) = {
                    let refs = SimRefs {
                        graph: &self.graph,
                        registry: &self.registry,
                        net: &self.net,
                        kernel_params: &self.kernel_params,
                        vesicles: &self.vesicles,
                    };
                    controller.dock(&refs, &self.vesicles.vesicles[i], rng)?
                };
                if !docked {
                    continue;
                }
                docks += 1;
                let flags = {
                    let refs = SimRefs {
                        graph: &self.graph,
                        registry: &self.registry,
                        net: &self.net,
                        kernel_params: &self.kernel_params,
                        vesicles: &self.vesicles,
                    };
                    controller.release_subset(
                        &refs,
                        &self.vesicles.vesicles[i],
                        self.options.release_flags,
                        rng,
                    )?
                };
                let v = &self.vesicles.vesicles[i];
                let node = v.location.0;
                self.log
                    .push(step, Some(v.id), Some(node), EventDetail::Dock { p });

                if flags.activation {
                    let delta = release::release_activation(
                        &self.registry,
                        v,
                        &self.net.activations[node],
                    )?;
                    if delta.iter().any(|&d| d != 0.0) {
                        let entry = act_deltas
                            .entry(node)
                            .or_insert_with(|| vec![0.0; delta.len()]);
                        for (t, d) in entry.iter_mut().zip(delta.iter()) {
                            *t += d;
                        }
                    }
                }
                if flags.parameter && node >= 1 {
                    let d =
                        release::release_parameters(&self.registry, v, &self.net.params[node - 1])?;
                    let nonzero = d.scale != 0.0
                        && d.left.iter().any(|&a| a != 0.0)
                        && d.right.iter().any(|&a| a != 0.0);
                    if nonzero {
                        param_deltas.push((node, d));
                    }
                }
                if flags.rule && node >= 1 {
                    let m = release::release_rule(&self.registry, v, self.net.grads_fresh())?;
                    rule_mods.entry(node).or_default().push(m);
                }
                if flags.memory {
                    mem_writes.push(i);
                }
                self.log.push(
                    step,
                    Some(v.id),
                    Some(node),
                    EventDetail::Release {
                        ops: flags.active_ops(),
                        budget: v.internal.budget,
                    },
                );
                self.vesicles.vesicles[i].internal.budget *= 0.5;
                if self.kernel_params.absorber_nodes.contains(&node) {
                    absorbed.insert(self.vesicles.vesicles[i].id);
                }
            }

            // Activation deltas first (parallel composition over the dock
            // set), re-running the forward tail below the lowest change.
            if !act_deltas.is_empty() {
                let out = self
                    .net
                    .apply_activation_deltas(&act_deltas, Some(&self.registry.read_proj))?;
                loss_post = loss(&out, y)?;
            }
            // Parameter releases next, in vesicle-id order.
            if !param_deltas.is_empty() {
                let result: Result<()> = {
                    let mut r = Ok(());
                    self.net.update_params(|params| {
                        for (node, d) in &param_deltas {
                            if let Err(e) = params[*node - 1]
                                .weight
                                .add_outer(&d.left, &d.right, d.scale)
                            {
                                r = Err(e);
                                return;
                            }
                        }
                    });
                    r
                };
                result?;
            }
            // Memory writes last, in vesicle-id order.
            for &i in &mem_writes {
                let v = &self.vesicles.vesicles[i];
                release::memory_write(
                    &mut self.net.memories[v.location.0],
                    &self.registry,
                    v,
                    self.options.memory_write_rate,
                )?;
            }

            // Phase 6: decay (absorbed first, then lifetime countdown).
            if !absorbed.is_empty() {
                let mut kept = Vec::with_capacity(self.vesicles.vesicles.len());
                for v in std::mem::take(&mut self.vesicles.vesicles) {
                    if absorbed.contains(&v.id) {
                        self.log.push(
                            step,
                            Some(v.id),
                            Some(v.location.0),
                            EventDetail::Decay {
                                reason: "absorbed",
                                lifetime: v.lifetime,
                            },
                        );
                        removals += 1;
                    } else {
                        kept.push(v);
                    }
                }
                self.vesicles.vesicles = kept;
            }
            let expired = kernels::decay_step(
                &mut self.vesicles,
                self.kernel_params.dt,
                self.kernel_params.decay_noise_std,
                rng,
            );
            for v in &expired {
                self.log.push(
                    step,
                    Some(v.id),
                    Some(v.location.0),
                    EventDetail::Decay {
                        reason: "expired",
                        lifetime: v.lifetime,
                    },
                );
                removals += 1;
            }

            // Rule-modulated parameter update (phase 7).
            self.apply_update(&rule_mods)?;
        } else {
            self.apply_update(&BTreeMap::new())?;
        }
        self.log.push(
            step,
            None,
            None,
            EventDetail::Update {
                layers: self.net.num_layers(),
            },
        );

        if !self.net.params_finite() || !loss_pre.is_finite() || !loss_post.is_finite() {
            return Err(NvError::NonFinite {
                what: "network state".into(),
                step,
            });
        }
        if self
            .vesicles
            .vesicles
            .iter()
            .any(|v| !v.lifetime.is_finite())
        {
            return Err(NvError::NonFinite {
                what: "vesicle lifetime".into(),
                step,
            });
        }

        let n_after = self.vesicles.count();
        debug_assert_eq!(
            n_after as i64,
            n_before as i64 + emissions as i64 - removals as i64
        );

        self.step_index += 1;
        Ok(StepReport {
            step,
            loss_pre,
            loss_post,
            n_vesicles: n_after,
            emissions,
            docks,
            removals,
            per_node_counts: self.vesicles.counts_per_node(self.graph.num_nodes()),
        })
    }

    /// SGD step with any docked rule modulations applied per layer.
    fn apply_update(&mut self, rule_mods: &BTreeMap<usize, Vec<RuleMod>>) -> Result<()> {
        let lr = self.options.learning_rate;
        let mut per_layer: Vec<(Vec<f64>, f64)> = Vec::with_capacity(self.net.num_layers());
        for l in 1..=self.net.num_layers() {
            let grads = self.net.layer_grads(l);
            match rule_mods.get(&l) {
                Some(mods) => {
                    let refs: Vec<&RuleMod> = mods.iter().collect();
                    let flat = release::apply_rule_mod(grads, &refs);
                    let scale: f64 = mods.iter().map(|m| m.rate_scale).product();
                    per_layer.push((flat, scale));
                }
                None => {
                    let flat: Vec<f64> = grads
                        .weight
                        .data
                        .iter()
                        .chain(grads.bias.iter())
                        .copied()
                        .collect();
                    per_layer.push((flat, 1.0));
                }
            }
        }
        self.net.update_params(|params| {
            for (l, (flat, scale)) in per_layer.iter().enumerate() {
                let p = &mut params[l];
                let nw = p.weight.data.len();
                for (w, g) in p.weight.data.iter_mut().zip(flat[..nw].iter()) {
                    *w -= lr * scale * g;
                }
                for (b, g) in p.bias.iter_mut().zip(flat[nw..].iter()) {
                    *b -= lr * scale * g;
                }
            }
        });
        Ok(())
    }

    /// Run `steps` full steps; returns the reports and leaves the event log
    /// on the sim.
    pub fn run(&mut self, steps: u64) -> Result<Vec<StepReport>> {
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            reports.push(self.step()?);
        }
        Ok(reports)
    }
}
