//! Mode runners: build engines from an [`ExperimentConfig`] and emit the
//! output files (resolved config, metrics, event log, and per-mode extras)
//! into an output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::{ExperimentConfig, Mode};
use crate::density::{self, DensityField, EmissionField};
use crate::error::{NvError, Result};
use crate::graph::Graph;
use crate::kernels::{ForcedEmission, KernelParams};
use crate::network::NetworkState;
use crate::release::ReleaseFlags;
use crate::rl::{self, EpisodeReport, PolicyParams};
use crate::rng::{mix64, Phase, RngStream};
use crate::sim::{CoupledSim, DataSource, SimOptions};
use crate::snn::{PlasticityRule, SnnParams, SnnSim};
use crate::vesicle::{RegistryInit, TypeSpec, VesicleTypeRegistry};

pub fn build_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    let n = cfg.num_nodes();
    let edges: Vec<(usize, usize)> = if cfg.graph.edges.is_empty() {
        (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect()
    } else {
        cfg.graph.edges.clone()
    };
    let layers = if cfg.graph.layers.is_empty() {
        (0..n).collect()
    } else {
        cfg.graph.layers.clone()
    };
    Graph::new(n, &edges, layers, cfg.graph.allow_self_loops)
}

fn type_specs(cfg: &ExperimentConfig) -> Vec<TypeSpec> {
    cfg.vesicle
        .types
        .iter()
        .map(|t| TypeSpec {
            lifetime_mean: t.lifetime_mean,
            move_temperature: t.move_temperature,
            decay_rate: t.decay_rate,
        })
        .collect()
}

fn registry_init(cfg: &ExperimentConfig) -> RegistryInit {
    RegistryInit {
        weight_scale: cfg.vesicle.weight_scale,
        mod_scale: cfg.vesicle.mod_scale,
        param_step: cfg.vesicle.param_step,
    }
}

fn kernel_params(cfg: &ExperimentConfig) -> KernelParams {
    KernelParams {
        max_emit_per_node: cfg.kernels.max_emit_per_node,
        decay_noise_std: cfg.kernels.decay_noise_std,
        absorber_nodes: cfg.kernels.absorber_nodes.iter().copied().collect(),
        dt: cfg.kernels.dt,
        force_dock: cfg.kernels.force_dock,
        forced_emissions: cfg
            .kernels
            .forced_emissions
            .iter()
            .map(|f| ForcedEmission {
                node: f.node,
                type_id: f.type_id,
                count: f.count,
            })
            .collect(),
    }
}

fn release_flags(cfg: &ExperimentConfig) -> ReleaseFlags {
    ReleaseFlags {
        activation: cfg.release.activation,
        parameter: cfg.release.parameter,
        rule: cfg.release.rule,
        memory: cfg.release.memory,
    }
}

/// Build the particle-mode simulation. Initialization draws happen in a
/// fixed order (network, then registry) from the run seed.
pub fn build_particle_sim(cfg: &ExperimentConfig) -> Result<CoupledSim> {
    let graph = build_graph(cfg)?;
    let seed = cfg.run.seed;
    let mut init = RngStream::for_event(seed, Phase::Init, 0, 0);
    let widths = cfg.network.widths.clone();
    let net = NetworkState::new(
        &widths,
        cfg.vesicle.memory_dim,
        cfg.network.meta_dim,
        &mut init,
    );
    let registry = VesicleTypeRegistry::new(
        &graph,
        &widths,
        &type_specs(cfg),
        cfg.vesicle.content_dim,
        cfg.vesicle.embed_dim,
        net.feature_dim(),
        cfg.vesicle.memory_dim,
        registry_init(cfg),
        &mut init,
    )?;
    let data = match cfg.run.data.as_str() {
        "fixed" => DataSource::fixed(cfg.run.data_x.clone(), cfg.run.data_y.clone()),
        _ => DataSource::teacher(widths[0], *widths.last().unwrap(), seed),
    };
    let options = SimOptions {
        learning_rate: cfg.run.learning_rate,
        vesicle_every: cfg.run.vesicle_every,
        release_flags: release_flags(cfg),
        memory_write_rate: cfg.release.write_rate,
    };
    Ok(CoupledSim::new(
        graph,
        net,
        registry,
        kernel_params(cfg),
        options,
        data,
        seed,
    ))
}

pub fn build_snn_graph(cfg: &ExperimentConfig) -> Result<Graph> {
    let n = cfg.snn.neurons;
    if cfg.snn.edges.is_empty() {
        Ok(Graph::complete(n))
    } else {
        Graph::new(n, &cfg.snn.edges, vec![0; n], false)
    }
}

pub fn build_snn_sim(cfg: &ExperimentConfig) -> Result<SnnSim> {
    let graph = build_snn_graph(cfg)?;
    let seed = cfg.run.seed;
    let mut init = RngStream::for_event(seed, Phase::Init, 2, 0);
    let widths = vec![1usize; graph.num_nodes()];
    let registry = VesicleTypeRegistry::new(
        &graph,
        &widths,
        &type_specs(cfg),
        cfg.vesicle.content_dim,
        cfg.vesicle.embed_dim,
        3, // spike rate, membrane potential, placeholder
        cfg.vesicle.memory_dim,
        registry_init(cfg),
        &mut init,
    )?;
    let params = SnnParams {
        tau_m: cfg.snn.tau_m,
        tau_e: cfg.snn.tau_e,
        threshold: cfg.snn.threshold,
        a_plus: cfg.snn.a_plus,
        a_minus: cfg.snn.a_minus,
        neighborhood_radius: cfg.snn.neighborhood_radius,
        window: cfg.snn.window,
        eta: cfg.snn.eta,
        dt: cfg.snn.dt,
        refractory: cfg.snn.refractory,
        input_current: cfg.snn.input_current,
        input_neurons: cfg.snn.input_neurons,
        input_noise_std: cfg.snn.input_noise_std,
        max_emit_per_node: cfg.snn.max_emit_per_node,
        plasticity: if cfg.snn.plasticity == "darwin3" {
            PlasticityRule::Darwin3
        } else {
            PlasticityRule::ThreeFactor
        },
        a_pre: cfg.snn.a_pre,
        a_post: cfg.snn.a_post,
        tau_pp: cfg.snn.tau_pp,
    };
    Ok(SnnSim::new(graph, registry, params, seed))
}

fn create_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn fmt_row(fields: &[String]) -> String {
    fields.join(",")
}

/// Execute the configured mode, writing every output under `out_dir`.
/// Returns a one-line human summary.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path, emit_plots: bool) -> Result<String> {
    cfg.validate()?;
    create_out_dir(out_dir)?;
    write_file(
        &out_dir.join("resolved_config.toml"),
        &cfg.to_canonical_toml(),
    )?;
    match cfg.run.mode {
        Mode::Particle => run_particle(cfg, out_dir, emit_plots),
        Mode::Density => run_density(cfg, out_dir, emit_plots),
        Mode::Consistency => run_consistency(cfg, out_dir),
        Mode::Snn => run_snn(cfg, out_dir, emit_plots),
        Mode::Rl => run_rl(cfg, out_dir),
    }
}

fn dump_events(sim_log: &crate::sim::EventLog, out_dir: &Path) -> Result<()> {
    let file = fs::File::create(out_dir.join("events.log"))?;
    let mut w = BufWriter::new(file);
    sim_log.write_ndjson(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_particle(cfg: &ExperimentConfig, out_dir: &Path, emit_plots: bool) -> Result<String> {
    let mut sim = build_particle_sim(cfg)?;
    let result = sim.run(cfg.run.steps);
    // The event log is written even when a step aborts, as the diagnostic.
    dump_events(&sim.log, out_dir)?;
    let reports = result?;

    let n = sim.graph.num_nodes();
    let mut header: Vec<String> = [
        "step",
        "loss_pre",
        "loss_post",
        "n_vesicles",
        "emissions",
        "docks",
        "removals",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n).map(|i| format!("node_{i}")));
    let mut csv = fmt_row(&header) + "\n";
    for r in &reports {
        let mut row = vec![
            r.step.to_string(),
            r.loss_pre.to_string(),
            r.loss_post.to_string(),
            r.n_vesicles.to_string(),
            r.emissions.to_string(),
            r.docks.to_string(),
            r.removals.to_string(),
        ];
        row.extend(r.per_node_counts.iter().map(|c| c.to_string()));
        csv.push_str(&fmt_row(&row));
        csv.push('\n');
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;
    write_file(
        &out_dir.join("digest.txt"),
        &format!("{:016x}\n", sim.digest()),
    )?;

    if emit_plots {
        let plots = out_dir.join("plots");
        create_out_dir(&plots)?;
        let mut long = String::from("step,node,count\n");
        for r in &reports {
            for (node, c) in r.per_node_counts.iter().enumerate() {
                long.push_str(&format!("{},{},{}\n", r.step, node, c));
            }
        }
        write_file(&plots.join("node_counts.csv"), &long)?;
    }
    let final_loss = reports.last().map(|r| r.loss_post).unwrap_or(f64::NAN);
    Ok(format!(
        "particle: {} steps, {} events, final loss {}",
        reports.len(),
        sim.log.records.len(),
        final_loss
    ))
}

fn run_density(cfg: &ExperimentConfig, out_dir: &Path, emit_plots: bool) -> Result<String> {
    let mut sim = build_particle_sim(cfg)?;
    let (x, y) = sim.data.batch(cfg.run.seed, 0);
    sim.net.forward(&x)?;
    sim.net.backward(&y)?;

    let n = sim.graph.num_nodes();
    let k = sim.registry.num_types();
    let d_c = sim.registry.content_dim;
    let emission = if cfg.density.enable_emission {
        EmissionField::from_net(&sim.graph, &sim.registry, &sim.net)?
    } else {
        EmissionField::zeros(n, k, d_c)
    };
    let mut field = DensityField::zeros(n, k, d_c);
    for init in &cfg.density.init {
        field.rho[init.node][init.type_id] = init.rho;
    }

    let mut csv = String::from("step,node,type,rho,content_norm\n");
    let emit_row = |step: u64, field: &DensityField, csv: &mut String| {
        for node in 0..n {
            for type_id in 0..k {
                let c_norm = crate::linalg::norm(&field.mean_content[node][type_id]);
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    step, node, type_id, field.rho[node][type_id], c_norm
                ));
            }
        }
    };
    if cfg.run.steps > 0 {
        emit_row(0, &field, &mut csv);
    }
    for step in 1..=cfg.run.steps {
        density::density_step(&mut field, &sim.registry, &emission);
        emit_row(step, &field, &mut csv);
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;
    write_file(&out_dir.join("events.log"), "")?;
    write_file(
        &out_dir.join("digest.txt"),
        &format!("{:016x}\n", {
            let mut bytes = Vec::new();
            for node in &field.rho {
                for v in node {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            crate::rng::fnv1a64(&bytes)
        }),
    )?;
    if emit_plots {
        let plots = out_dir.join("plots");
        create_out_dir(&plots)?;
        write_file(&plots.join("density_long.csv"), &csv)?;
    }
    Ok(format!(
        "density: {} steps, total mass {}, {} clamps",
        cfg.run.steps,
        (0..k).map(|t| field.total_mass(t)).sum::<f64>(),
        field.clamp_events
    ))
}

fn run_consistency(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let graph = build_graph(cfg)?;
    let mut init = RngStream::for_event(cfg.run.seed, Phase::Init, 1, 0);
    let widths = cfg.network.widths.clone();
    let registry = VesicleTypeRegistry::new(
        &graph,
        &widths,
        &type_specs(cfg),
        cfg.vesicle.content_dim,
        cfg.vesicle.embed_dim,
        3 + cfg.network.meta_dim,
        cfg.vesicle.memory_dim,
        registry_init(cfg),
        &mut init,
    )?;
    let mut rates = vec![vec![0.0; registry.num_types()]; graph.num_nodes()];
    for r in &cfg.density.consistency_rates {
        rates[r.node][r.type_id] = r.rho;
    }
    let report = density::consistency_check(
        &graph,
        &registry,
        &rates,
        cfg.density.consistency_horizon,
        cfg.density.consistency_runs,
        cfg.run.seed,
    );

    let mut csv = String::from("step,node,type,mean_count,rho,std_error,deviation\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.step, row.node, row.type_id, row.mean_count, row.rho, row.std_error, row.deviation
        ));
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;
    write_file(&out_dir.join("events.log"), "")?;
    let pass = report.max_deviation < 3.0;
    write_file(
        &out_dir.join("report.txt"),
        &format!(
            "runs = {}\nhorizon = {}\nmax_deviation = {}\nthreshold = 3\npass = {}\n",
            report.n_runs, report.horizon, report.max_deviation, pass
        ),
    )?;
    Ok(format!(
        "consistency: max deviation {} over {} runs ({})",
        report.max_deviation,
        report.n_runs,
        if pass { "pass" } else { "FAIL" }
    ))
}

fn run_snn(cfg: &ExperimentConfig, out_dir: &Path, emit_plots: bool) -> Result<String> {
    let mut sim = build_snn_sim(cfg)?;
    let records = sim.run(cfg.run.steps)?;
    dump_events(&sim.log, out_dir)?;

    let mut metrics = String::from("tick,spikes,n_vesicles,weight_updates\n");
    let mut raster = String::from("time,neuron\n");
    let mut weights = String::from("tick,synapse,pre,post,w\n");
    // Rebuild the per-tick weight trajectory from the initial weights and the
    // recorded deltas.
    let fresh = build_snn_sim(cfg)?;
    let mut weight_state: Vec<f64> = fresh.synapses.iter().map(|s| s.w).collect();
    for r in &records {
        for &n in &r.spikes {
            raster.push_str(&format!("{},{}\n", r.tick as f64 * cfg.snn.dt, n));
        }
        for &(idx, dw, _) in &r.weight_deltas {
            weight_state[idx] += dw;
        }
        for (idx, w) in weight_state.iter().enumerate() {
            let syn = &fresh.synapses[idx];
            weights.push_str(&format!(
                "{},{},{},{},{}\n",
                r.tick, idx, syn.pre.0, syn.post.0, w
            ));
        }
        metrics.push_str(&format!(
            "{},{},{},{}\n",
            r.tick,
            r.spikes.len(),
            r.vesicle_nodes.len(),
            r.weight_deltas.len()
        ));
    }
    write_file(&out_dir.join("metrics.csv"), &metrics)?;
    write_file(&out_dir.join("raster.csv"), &raster)?;
    write_file(&out_dir.join("weights.csv"), &weights)?;
    if emit_plots {
        let plots = out_dir.join("plots");
        create_out_dir(&plots)?;
        let mut counts = String::from("tick,node,count\n");
        for r in &records {
            let mut per_node = vec![0u32; cfg.snn.neurons];
            for &(_, node) in &r.vesicle_nodes {
                per_node[node] += 1;
            }
            for (node, c) in per_node.iter().enumerate() {
                counts.push_str(&format!("{},{},{}\n", r.tick, node, c));
            }
        }
        write_file(&plots.join("vesicle_counts.csv"), &counts)?;
    }
    let total_spikes: usize = records.iter().map(|r| r.spikes.len()).sum();
    Ok(format!(
        "snn: {} ticks, {} spikes",
        records.len(),
        total_spikes
    ))
}

fn run_rl(cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let probe = build_particle_sim(cfg)?;
    let mut policy = PolicyParams::new(
        probe.net.feature_dim(),
        probe.registry.content_dim,
        probe.registry.num_types(),
        probe.options.release_flags,
    );

    let mut csv = String::from("episode,total_reward,mean_loss,update_norm\n");
    let mut last_log = crate::sim::EventLog::default();
    let mut reports: Vec<EpisodeReport> = Vec::new();
    for episode in 0..cfg.rl.episodes {
        let mut ep_cfg = cfg.clone();
        ep_cfg.run.seed = mix64(cfg.run.seed ^ mix64(episode + 1));
        let mut sim = build_particle_sim(&ep_cfg)?;
        let traj = rl::rl_episode(&mut sim, &policy, cfg.rl.horizon, cfg.rl.omega_coeff)?;
        let mean_loss = if traj.steps.is_empty() {
            0.0
        } else {
            -traj.steps.iter().map(|s| s.reward).sum::<f64>() / traj.steps.len() as f64
        };
        let total = traj.total_reward();
        let norm = rl::reinforce_update(&mut policy, &[traj], cfg.rl.gamma, cfg.rl.learning_rate);
        csv.push_str(&format!("{},{},{},{}\n", episode, total, mean_loss, norm));
        reports.push(EpisodeReport {
            episode,
            total_reward: total,
            mean_loss,
            update_norm: norm,
        });
        last_log = sim.log;
    }
    write_file(&out_dir.join("metrics.csv"), &csv)?;
    dump_events(&last_log, out_dir)?;
    let final_reward = reports.last().map(|r| r.total_reward).unwrap_or(0.0);
    Ok(format!(
        "rl: {} episodes, final return {}",
        reports.len(),
        final_reward
    ))
}

/// Map an error to the CLI exit class: config errors, numeric aborts, IO.
pub fn exit_code_for(err: &NvError) -> i32 {
    match err {
        NvError::Config { .. } => 3,
        NvError::NonFinite { .. } => 4,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("nv-runner-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn particle_mode_writes_expected_files() {
        let cfg = parse_config("[network]\nwidths = [2, 3, 2]\n[run]\nsteps = 20\n").unwrap();
        let dir = tmpdir("particle");
        let summary = execute(&cfg, &dir, true).unwrap();
        assert!(summary.starts_with("particle:"));
        for f in [
            "resolved_config.toml",
            "metrics.csv",
            "events.log",
            "digest.txt",
        ] {
            assert!(dir.join(f).exists(), "{f} missing");
        }
        assert!(dir.join("plots/node_counts.csv").exists());
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 21); // header + 20 steps
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn zero_steps_particle_has_header_only() {
        let cfg = parse_config("[network]\nwidths = [2, 2]\n[run]\nsteps = 0\n").unwrap();
        let dir = tmpdir("zero");
        execute(&cfg, &dir, false).unwrap();
        let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn density_and_consistency_modes_run() {
        let cfg =
            parse_config("[network]\nwidths = [2, 2, 2]\n[run]\nmode = \"density\"\nsteps = 10\n")
                .unwrap();
        let dir = tmpdir("density");
        let summary = execute(&cfg, &dir, false).unwrap();
        assert!(summary.starts_with("density:"), "{summary}");

        let cfg = parse_config(
            "[network]\nwidths = [2, 2, 2]\n[run]\nmode = \"consistency\"\n[density]\nconsistency_runs = 500\nconsistency_horizon = 10\n",
        )
        .unwrap();
        let dir2 = tmpdir("consistency");
        let summary = execute(&cfg, &dir2, false).unwrap();
        assert!(summary.contains("max deviation"), "{summary}");
        assert!(dir2.join("report.txt").exists());
        let _ = fs::remove_dir_all(&dir);
        let _ = fs::remove_dir_all(&dir2);
    }

    #[test]
    fn snn_and_rl_modes_run() {
        let cfg = parse_config(
            "[network]\nwidths = [2, 2]\n[run]\nmode = \"snn\"\nsteps = 200\n[snn]\nneurons = 4\n",
        )
        .unwrap();
        let dir = tmpdir("snn");
        execute(&cfg, &dir, true).unwrap();
        assert!(dir.join("raster.csv").exists());
        assert!(dir.join("weights.csv").exists());

        let cfg = parse_config(
            "[network]\nwidths = [2, 2]\n[run]\nmode = \"rl\"\n[rl]\nepisodes = 3\nhorizon = 5\n",
        )
        .unwrap();
        let dir2 = tmpdir("rl");
        execute(&cfg, &dir2, false).unwrap();
        let metrics = fs::read_to_string(dir2.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        let _ = fs::remove_dir_all(&dir);
        let _ = fs::remove_dir_all(&dir2);
    }

    #[test]
    fn repeated_execution_is_byte_identical() {
        let cfg =
            parse_config("[network]\nwidths = [2, 3, 2]\n[run]\nsteps = 15\nseed = 9\n").unwrap();
        let a = tmpdir("det-a");
        let b = tmpdir("det-b");
        execute(&cfg, &a, false).unwrap();
        execute(&cfg, &b, false).unwrap();
        for f in [
            "resolved_config.toml",
            "metrics.csv",
            "events.log",
            "digest.txt",
        ] {
            let fa = fs::read(a.join(f)).unwrap();
            let fb = fs::read(b.join(f)).unwrap();
            assert_eq!(fa, fb, "{f} differs");
        }
        let _ = fs::remove_dir_all(&a);
        let _ = fs::remove_dir_all(&b);
    }
}
