//! Experiment configuration: TOML schema, defaults, validation, and the
//! canonical resolved form.
//!
//! Unknown keys are rejected, every tunable has an explicit default, and the
//! resolved config (all defaults applied) re-serializes canonically, so a
//! `(config, seed)` pair pins a run completely.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{NvError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Particle,
    Density,
    Consistency,
    Snn,
    Rl,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Particle => "particle",
            Mode::Density => "density",
            Mode::Consistency => "consistency",
            Mode::Snn => "snn",
            Mode::Rl => "rl",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "particle" => Ok(Mode::Particle),
            "density" => Ok(Mode::Density),
            "consistency" => Ok(Mode::Consistency),
            "snn" => Ok(Mode::Snn),
            "rl" => Ok(Mode::Rl),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Node count; 0 means "derive from the network widths".
    pub nodes: usize,
    /// Edge list; empty means "chain over the nodes".
    pub edges: Vec<(usize, usize)>,
    /// Layer assignment; empty means "node index".
    pub layers: Vec<usize>,
    pub allow_self_loops: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Layer widths, input first.
    pub widths: Vec<usize>,
    pub meta_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            widths: vec![3, 4, 2],
            meta_dim: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypeConfig {
    pub lifetime_mean: f64,
    pub move_temperature: f64,
    pub decay_rate: f64,
}

impl Default for TypeConfig {
    fn default() -> Self {
        TypeConfig {
            lifetime_mean: 3.0,
            move_temperature: 1.0,
            decay_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesicleSection {
    pub content_dim: usize,
    pub embed_dim: usize,
    pub memory_dim: usize,
    pub weight_scale: f64,
    pub mod_scale: f64,
    pub param_step: f64,
    pub types: Vec<TypeConfig>,
}

impl Default for VesicleSection {
    fn default() -> Self {
        VesicleSection {
            content_dim: 3,
            embed_dim: 4,
            memory_dim: 2,
            weight_scale: 0.5,
            mod_scale: 1.0,
            param_step: 0.1,
            types: vec![TypeConfig::default()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForcedEmissionConfig {
    pub node: usize,
    pub type_id: usize,
    pub count: u32,
}

impl Default for ForcedEmissionConfig {
    fn default() -> Self {
        ForcedEmissionConfig {
            node: 0,
            type_id: 0,
            count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub max_emit_per_node: u32,
    pub decay_noise_std: f64,
    pub absorber_nodes: Vec<usize>,
    pub dt: f64,
    pub force_dock: bool,
    pub forced_emissions: Vec<ForcedEmissionConfig>,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            max_emit_per_node: 4,
            decay_noise_std: 0.0,
            absorber_nodes: Vec::new(),
            dt: 1.0,
            force_dock: false,
            forced_emissions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReleaseSection {
    pub activation: bool,
    pub parameter: bool,
    pub rule: bool,
    pub memory: bool,
    pub write_rate: f64,
}

impl Default for ReleaseSection {
    fn default() -> Self {
        ReleaseSection {
            activation: true,
            parameter: true,
            rule: true,
            memory: true,
            write_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityInit {
    pub node: usize,
    pub type_id: usize,
    pub rho: f64,
}

impl Default for DensityInit {
    fn default() -> Self {
        DensityInit {
            node: 0,
            type_id: 0,
            rho: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub enable_emission: bool,
    pub fold_dock_prob: bool,
    pub init: Vec<DensityInit>,
    pub consistency_runs: u64,
    pub consistency_horizon: u64,
    /// Frozen emission rates for consistency mode: (node, type, rate).
    pub consistency_rates: Vec<DensityInit>,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            enable_emission: true,
            fold_dock_prob: false,
            init: Vec::new(),
            consistency_runs: 10_000,
            consistency_horizon: 20,
            consistency_rates: vec![DensityInit {
                node: 0,
                type_id: 0,
                rho: 0.3,
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnnSection {
    pub neurons: usize,
    /// Edge list; empty means "complete digraph".
    pub edges: Vec<(usize, usize)>,
    pub tau_m: f64,
    pub tau_e: f64,
    pub threshold: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub neighborhood_radius: usize,
    pub window: f64,
    pub eta: f64,
    pub dt: f64,
    pub refractory: f64,
    pub input_current: f64,
    pub input_neurons: usize,
    pub input_noise_std: f64,
    pub max_emit_per_node: u32,
    pub plasticity: String,
    pub a_pre: f64,
    pub a_post: f64,
    pub tau_pp: f64,
}

impl Default for SnnSection {
    fn default() -> Self {
        SnnSection {
            neurons: 5,
            edges: Vec::new(),
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
            plasticity: "three_factor".into(),
            a_pre: 0.0,
            a_post: 0.0,
            tau_pp: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    pub gamma: f64,
    pub learning_rate: f64,
    pub omega_coeff: f64,
    pub horizon: u64,
    pub episodes: u64,
}

impl Default for RlSection {
    fn default() -> Self {
        RlSection {
            gamma: 0.99,
            learning_rate: 0.01,
            omega_coeff: 0.01,
            horizon: 20,
            episodes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub steps: u64,
    pub mode: Mode,
    pub learning_rate: f64,
    pub vesicle_every: u64,
    /// "teacher" (random linear target) or "fixed" (constant batch below).
    pub data: String,
    pub data_x: Vec<f64>,
    pub data_y: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            steps: 100,
            mode: Mode::Particle,
            learning_rate: 0.05,
            vesicle_every: 1,
            data: "teacher".into(),
            data_x: Vec::new(),
            data_y: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    pub network: NetworkConfig,
    pub vesicle: VesicleSection,
    pub kernels: KernelSection,
    pub release: ReleaseSection,
    pub density: DensitySection,
    pub snn: SnnSection,
    pub rl: RlSection,
    pub run: RunSection,
}

/// Every leaf key of the schema; the completeness test keeps this in sync
/// with the resolved dump.
pub const CONFIG_KEYS: &[&str] = &[
    "graph.nodes",
    "graph.edges",
    "graph.layers",
    "graph.allow_self_loops",
    "network.widths",
    "network.meta_dim",
    "vesicle.content_dim",
    "vesicle.embed_dim",
    "vesicle.memory_dim",
    "vesicle.weight_scale",
    "vesicle.mod_scale",
    "vesicle.param_step",
    "vesicle.types",
    "kernels.max_emit_per_node",
    "kernels.decay_noise_std",
    "kernels.absorber_nodes",
    "kernels.dt",
    "kernels.force_dock",
    "kernels.forced_emissions",
    "release.activation",
    "release.parameter",
    "release.rule",
    "release.memory",
    "release.write_rate",
    "density.enable_emission",
    "density.fold_dock_prob",
    "density.init",
    "density.consistency_runs",
    "density.consistency_horizon",
    "density.consistency_rates",
    "snn.neurons",
    "snn.edges",
    "snn.tau_m",
    "snn.tau_e",
    "snn.threshold",
    "snn.a_plus",
    "snn.a_minus",
    "snn.neighborhood_radius",
    "snn.window",
    "snn.eta",
    "snn.dt",
    "snn.refractory",
    "snn.input_current",
    "snn.input_neurons",
    "snn.input_noise_std",
    "snn.max_emit_per_node",
    "snn.plasticity",
    "snn.a_pre",
    "snn.a_post",
    "snn.tau_pp",
    "rl.gamma",
    "rl.learning_rate",
    "rl.omega_coeff",
    "rl.horizon",
    "rl.episodes",
    "run.seed",
    "run.steps",
    "run.mode",
    "run.learning_rate",
    "run.vesicle_every",
    "run.data",
    "run.data_x",
    "run.data_y",
];

impl ExperimentConfig {
    /// Node count of the particle/density graph.
    pub fn num_nodes(&self) -> usize {
        if self.graph.nodes > 0 {
            self.graph.nodes
        } else {
            self.network.widths.len()
        }
    }

    /// Canonical serialized form of the resolved config.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn bail(path: &str, message: impl Into<String>) -> Result<()> {
            Err(NvError::Config {
                path: path.into(),
                message: message.into(),
            })
        }

        if self.network.widths.len() < 2 {
            return bail("network.widths", "need at least input and output widths");
        }
        if self.network.widths.contains(&0) {
            return bail("network.widths", "widths must be positive");
        }
        if self.graph.nodes > 0 && self.graph.nodes != self.network.widths.len() {
            return bail(
                "graph.nodes",
                format!(
                    "must match the network node count {} (one node per layer)",
                    self.network.widths.len()
                ),
            );
        }
        let n = self.num_nodes();
        if !self.graph.layers.is_empty() && self.graph.layers.len() != n {
            return bail("graph.layers", format!("expected {n} entries"));
        }
        for &(u, v) in &self.graph.edges {
            if u >= n || v >= n {
                return bail(
                    "graph.edges",
                    format!("edge ({u}, {v}) out of range for {n} nodes"),
                );
            }
        }
        if self.vesicle.types.is_empty() {
            return bail("vesicle.types", "need at least one vesicle type");
        }
        for (i, t) in self.vesicle.types.iter().enumerate() {
            if !(0.0..=1.0).contains(&t.decay_rate) {
                return bail(
                    &format!("vesicle.types[{i}].decay_rate"),
                    format!("must lie in [0, 1], got {}", t.decay_rate),
                );
            }
            if t.lifetime_mean <= 0.0 {
                return bail(
                    &format!("vesicle.types[{i}].lifetime_mean"),
                    "must be positive",
                );
            }
        }
        if self.vesicle.content_dim == 0 {
            return bail("vesicle.content_dim", "must be positive");
        }
        if self.kernels.dt <= 0.0 {
            return bail("kernels.dt", "must be positive");
        }
        for &a in &self.kernels.absorber_nodes {
            if a >= n {
                return bail("kernels.absorber_nodes", format!("node {a} out of range"));
            }
        }
        for (i, f) in self.kernels.forced_emissions.iter().enumerate() {
            if f.node >= n {
                return bail(
                    &format!("kernels.forced_emissions[{i}].node"),
                    "out of range",
                );
            }
            if f.type_id >= self.vesicle.types.len() {
                return bail(
                    &format!("kernels.forced_emissions[{i}].type_id"),
                    "out of range",
                );
            }
        }
        if !(0.0 < self.release.write_rate && self.release.write_rate <= 1.0) {
            return bail("release.write_rate", "must lie in (0, 1]");
        }
        for (i, d) in self
            .density
            .init
            .iter()
            .chain(self.density.consistency_rates.iter())
            .enumerate()
        {
            if d.node >= n {
                return bail(&format!("density entry [{i}].node"), "out of range");
            }
            if d.type_id >= self.vesicle.types.len() {
                return bail(&format!("density entry [{i}].type_id"), "out of range");
            }
            if d.rho < 0.0 {
                return bail(&format!("density entry [{i}].rho"), "must be non-negative");
            }
        }
        if self.snn.neurons == 0 {
            return bail("snn.neurons", "must be positive");
        }
        for &(u, v) in &self.snn.edges {
            if u >= self.snn.neurons || v >= self.snn.neurons {
                return bail("snn.edges", format!("edge ({u}, {v}) out of range"));
            }
        }
        if self.snn.plasticity != "three_factor" && self.snn.plasticity != "darwin3" {
            return bail("snn.plasticity", "must be `three_factor` or `darwin3`");
        }
        if self.snn.dt <= 0.0 || self.snn.tau_m <= 0.0 || self.snn.tau_e <= 0.0 {
            return bail("snn", "dt and time constants must be positive");
        }
        if self.snn.input_neurons > self.snn.neurons {
            return bail("snn.input_neurons", "more input neurons than neurons");
        }
        if !(0.0 < self.rl.gamma && self.rl.gamma <= 1.0) {
            return bail("rl.gamma", "must lie in (0, 1]");
        }
        if self.run.vesicle_every == 0 {
            return bail("run.vesicle_every", "must be at least 1");
        }
        match self.run.data.as_str() {
            "teacher" => {}
            "fixed" => {
                if self.run.data_x.len() != self.network.widths[0] {
                    return bail("run.data_x", "width must match the input layer");
                }
                if self.run.data_y.len() != *self.network.widths.last().unwrap() {
                    return bail("run.data_y", "width must match the output layer");
                }
            }
            other => return bail("run.data", format!("unknown data source `{other}`")),
        }
        let absorbers: BTreeSet<usize> = self.kernels.absorber_nodes.iter().copied().collect();
        if absorbers.len() != self.kernels.absorber_nodes.len() {
            return bail("kernels.absorber_nodes", "duplicate entries");
        }
        Ok(())
    }
}

/// Parse a TOML config, apply defaults, and validate.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| NvError::Config {
        path: "config".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
