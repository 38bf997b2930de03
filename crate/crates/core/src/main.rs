use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use atslg::config::{PolicyKind, RunConfig};
use atslg::evaluator::{evaluate_crude, evaluate_is};
use atslg::exposure::{write_events_csv, ExposureModel};
use atslg::library::OfflineArtifacts;
use atslg::pipeline::{self, Stage};
use atslg::vehicle::{simulate_cutin, write_trace_csv};
use atslg::{rng, Error, Result, ScenarioSpace};

#[derive(Parser, Debug)]
#[command(name = "atslg", version, about = "Adaptive testing scenario library generation for cut-in tests")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Naturalistic driving data: ingest events or synthesize them.
    Ndd {
        #[command(subcommand)]
        action: NddAction,
    },
    /// Simulate one cut-in episode.
    Sim {
        #[arg(long, value_enum)]
        policy: PolicyKind,
        #[arg(long)]
        r: f64,
        #[arg(long, allow_hyphen_values = true)]
        rdot: f64,
        /// Write the per-step trajectory to this CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Build the offline library from exposure data and the surrogate.
    Offline {
        /// Cut-in events CSV (`range,range_rate`); synthetic data when absent.
        #[arg(long)]
        exposure: Option<PathBuf>,
    },
    /// Customize an offline library against the vehicle under test.
    Adapt {
        #[arg(long)]
        offline: PathBuf,
    },
    /// Evaluate the vehicle under test with a library or crude Monte Carlo.
    Eval {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, value_enum, default_value = "is")]
        method: Method,
    },
    /// Replicated comparison of crude, offline and adaptive evaluation.
    Compare {
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Run every stage and write a complete run directory.
    Pipeline {
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
    },
}

#[derive(Subcommand, Debug)]
enum NddAction {
    /// Bin a cut-in events CSV into an exposure field.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Generate synthetic cut-in events.
    Synth {
        #[arg(long)]
        n: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Crude,
    Is,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::config("--out", "this command needs an output path"))
}

fn print_json(v: &serde_json::Value) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    ensure_parent(path)?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn run(cli: &Cli) -> std::result::Result<(), (&'static str, Error)> {
    let stage = |s: &'static str| move |e: Error| (s, e);
    let cfg = load_config(cli).map_err(stage("config"))?;
    match &cli.command {
        Command::Ndd { action } => {
            let space = ScenarioSpace::new(&cfg.grid).map_err(stage("config"))?;
            match action {
                NddAction::Ingest { csv } => {
                    let f = std::fs::File::open(csv).map_err(|e| ("ndd", Error::io(csv, e)))?;
                    let m = ExposureModel::ingest_csv(space, std::io::BufReader::new(f)).map_err(stage("ndd"))?;
                    if let Some(out) = &cli.out {
                        ensure_parent(out).map_err(stage("ndd"))?;
                        m.p_x.write_csv_file(out).map_err(stage("ndd"))?;
                    }
                    print_json(&json!({
                        "events_used": m.n_events_used,
                        "events_rejected": m.n_events_rejected,
                        "nonzero_cells": m.p_x.values().iter().filter(|v| **v > 0.0).count(),
                    }));
                }
                NddAction::Synth { n } => {
                    let out = require_out(cli).map_err(stage("config"))?;
                    let mut syn = cfg.exposure.synthetic.clone();
                    if let Some(n) = n {
                        syn.n_events = *n;
                    }
                    syn.validate().map_err(stage("config"))?;
                    let events = syn
                        .generate(&space, &mut rng::stream(cfg.seed, "exposure"))
                        .map_err(stage("ndd"))?;
                    write_events_csv(&events, create(out).map_err(stage("ndd"))?).map_err(stage("ndd"))?;
                    print_json(&json!({ "events": events.len(), "out": out }));
                }
            }
        }
        Command::Sim { policy, r, rdot, trace } => {
            let pol = cfg.vehicle.policy(*policy);
            let res = simulate_cutin(pol, *r, *rdot, &cfg.vehicle.episode, trace.is_some()).map_err(stage("sim"))?;
            if let Some(path) = trace {
                write_trace_csv(res.trajectory.as_deref().unwrap_or_default(), create(path).map_err(stage("sim"))?).map_err(stage("sim"))?;
            }
            print_json(&json!({
                "policy": policy,
                "r0": r,
                "rdot0": rdot,
                "accident": res.accident,
                "min_distance": res.min_distance,
            }));
        }
        Command::Offline { exposure } => {
            let out = require_out(cli).map_err(stage("config"))?;
            let mut cfg = cfg.clone();
            if exposure.is_some() {
                cfg.exposure.csv = exposure.clone();
            }
            let (art, m) = pipeline::offline_stage(&cfg).map_err(stage("offline"))?;
            ensure_parent(out).map_err(stage("offline"))?;
            art.save(out).map_err(stage("offline"))?;
            print_json(&json!({
                "out": out,
                "events_used": m.n_events_used,
                "events_rejected": m.n_events_rejected,
                "n_phi": art.library.phi_len(),
                "w_norm": art.library.w_norm,
            }));
        }
        Command::Adapt { offline } => {
            let out = require_out(cli).map_err(stage("config"))?;
            let art = OfflineArtifacts::load(offline).map_err(stage("adapt"))?;
            if art.p_x.space() != &ScenarioSpace::new(&cfg.grid).map_err(stage("config"))? {
                return Err(("adapt", Error::Shape("offline library grid differs from the configured grid".into())));
            }
            std::fs::create_dir_all(out).map_err(|e| ("adapt", Error::io(out, e)))?;
            let outcome = pipeline::adaptive_stage(&cfg, &art, cfg.seed, Some(&out.join("adaptive"))).map_err(stage("adapt"))?;
            let custom = pipeline::customized_artifacts(&art, &outcome).map_err(stage("adapt"))?;
            custom.save(&out.join("customized.bin")).map_err(stage("adapt"))?;
            print_json(&json!({
                "out": out,
                "cav_tests": outcome.cav_tests,
                "iterations": outcome.iterations,
                "stopped_early": outcome.stopped_early,
                "n_phi": custom.library.phi_len(),
            }));
        }
        Command::Eval { library, method } => {
            let art = OfflineArtifacts::load(library).map_err(stage("eval"))?;
            let cav = cfg.vehicle.policy(cfg.vehicle.cav);
            let episode = cfg.vehicle.episode;
            let space = *art.p_x.space();
            let outcome = |i| {
                let (r, rdot) = space.scenario(i)?;
                simulate_cutin(cav, r, rdot, &episode, false).map(|e| if e.accident { 1.0 } else { 0.0 })
            };
            let record = cli.out.is_some();
            let trace = match method {
                Method::Crude => evaluate_crude(&art.p_x, outcome, &cfg.eval, record, &mut rng::stream(cfg.seed, "eval.crude")),
                Method::Is => evaluate_is(&art.library.q, &art.p_x, outcome, &cfg.eval, record, &mut rng::stream(cfg.seed, "eval.is")),
            }
            .map_err(stage("eval"))?;
            if let Some(out) = &cli.out {
                trace.write_csv(create(out).map_err(stage("eval"))?).map_err(stage("eval"))?;
            }
            print_json(&json!({
                "method": format!("{method:?}").to_lowercase(),
                "mu_hat": trace.mu_hat,
                "tests": trace.n_used,
                "converged": trace.converged,
                "diagnostic": trace.diagnostic,
            }));
        }
        Command::Compare { reps } => {
            let out = require_out(cli).map_err(stage("config"))?;
            let mut cfg = cfg.clone();
            if let Some(r) = reps {
                cfg.compare.reps = *r;
            }
            cfg.validate().map_err(stage("config"))?;
            let (art, _) = pipeline::offline_stage(&cfg).map_err(stage("offline"))?;
            let p_a = pipeline::ground_truth(&cfg, art.p_x.space()).map_err(stage("compare"))?;
            let n_runs = if cfg.compare.rerun_adaptive { cfg.compare.reps } else { 1 };
            let runs = (0..n_runs)
                .map(|k| pipeline::adaptive_stage(&cfg, &art, pipeline::replication_seed(cfg.seed, k), None))
                .collect::<Result<Vec<_>>>()
                .map_err(stage("adapt"))?;
            let reports =
                pipeline::compare_stage(&cfg, &art, &p_a, &runs, &[cfg.eval.target_half_width]).map_err(stage("compare"))?;
            ensure_parent(out).map_err(stage("compare"))?;
            pipeline::write_json(out, &reports[0]).map_err(stage("compare"))?;
            let r = &reports[0];
            print_json(&json!({
                "out": out,
                "reps": r.n_reps,
                "crude_analytic": r.crude_analytic,
                "offline_mean": r.offline.mean,
                "adaptive_mean": r.adaptive_total.mean,
                "offline_over_adaptive": r.accel_offline_vs_adaptive,
            }));
        }
        Command::Pipeline { stage: st } => {
            let out = require_out(cli).map_err(stage("config"))?;
            let res = pipeline::run_pipeline(&cfg, out, *st).map_err(|e| (e.stage, e.error))?;
            print_json(&json!({
                "out": res.out_dir,
                "config_hash": res.manifest.config_hash,
                "summary": res.manifest.summary,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error [{stage}]: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
