use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fleetmap_core::pipeline::{
    compute_metrics, evaluate_outputs, fuse_submaps, overlapping_scene, render_metrics, render_metrics_table,
    run_single_agent, run_system, submap_path, RunConfig, RunStatus, Session,
};
use fleetmap_core::Error;
use log::error;

#[derive(Parser, Debug)]
#[command(name = "fleetmap", version, about = "Multi-agent monocular dense SLAM")]
struct Cli {
    /// Run configuration (TOML). Without it a two-agent demo room is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of agents to run (the first n streams).
    #[arg(long, global = true)]
    agents: Option<usize>,
    /// `oracle` or `bridge:<host:port>`.
    #[arg(long, global = true)]
    predictor: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run all agents, fuse their submaps and evaluate.
    Run,
    /// Run a single agent and write its submap, local trajectory and cloud.
    Agent { id: u32 },
    /// Fuse saved submaps (default: every agent submap in the output directory).
    Fuse { submaps: Vec<PathBuf> },
    /// Evaluate the outputs in a directory (default: the output directory).
    Eval { dir: Option<PathBuf> },
    /// Print a run configuration with a synthetic overlapping-circles scene.
    GenScene {
        #[arg(long, default_value_t = 120)]
        frames: usize,
    },
}

const DEMO_FRAMES: usize = 120;

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            scene: Some(overlapping_scene(cli.agents.unwrap_or(2), DEMO_FRAMES)),
            ..Default::default()
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(n) = cli.agents {
        cfg.agents = Some(n);
    }
    if let Some(p) = &cli.predictor {
        cfg.predictor = p.parse()?;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::DimensionMismatch { .. } => 2,
        Error::Io(_) | Error::Parse { .. } | Error::PredictorUnavailable(_) => 3,
        _ => 1,
    }
}

fn saved_submaps(dir: &Path) -> Vec<PathBuf> {
    (0..)
        .map(|agent| submap_path(dir, agent))
        .take_while(|p| p.is_file())
        .collect()
}

fn execute(cli: &Cli) -> Result<u8, Error> {
    if let Command::GenScene { frames } = cli.command {
        let cfg = RunConfig {
            seed: cli.seed.unwrap_or_default(),
            scene: Some(overlapping_scene(cli.agents.unwrap_or(2), frames)),
            ..Default::default()
        };
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    let cfg = load_config(cli)?;
    let out = cfg.output.clone();
    match &cli.command {
        Command::Run => {
            let report = run_system(&cfg)?;
            print!("{}", fleetmap_core::pipeline::render_report(&report));
            Ok(match report.status {
                RunStatus::Ok => 0,
                RunStatus::Partial(_) => 1,
            })
        }
        Command::Agent { id } => {
            let session = Session::new(cfg)?;
            if *id as usize >= session.agent_count() {
                return Err(Error::Config(format!("agent {id} is not in the source")));
            }
            let output = run_single_agent(&session, *id, &out)?;
            let s = &output.stats;
            println!(
                "agent{id}: {} frames tracked, {} skipped, {} keyframes, {:.2} fps",
                s.frames_tracked,
                s.skipped,
                s.keyframes,
                s.fps()
            );
            Ok(0)
        }
        Command::Fuse { submaps } => {
            let session = Session::new(cfg)?;
            let paths = if submaps.is_empty() { saved_submaps(&out) } else { submaps.clone() };
            if paths.is_empty() {
                return Err(Error::Config(format!("no submaps given and none found in {}", out.display())));
            }
            let bytes = paths.iter().map(fs::read).collect::<Result<Vec<_>, _>>()?;
            let fused = fuse_submaps(&session, &bytes, &out)?;
            let r = &fused.report;
            println!(
                "fused {} agents: {} temporal, {} intra-loop, {} inter-loop edges; energy {:.3e} -> {:.3e}",
                r.keyframes_per_agent.len(),
                r.temporal_edges,
                r.intra_loop_edges,
                r.inter_loop_edges,
                r.initial_energy,
                r.final_energy
            );
            if let Some(m) = compute_metrics(&session, &fused.trajectories, Some(&fused.global_cloud), &fused.keyframe_frames)? {
                print!("{}", render_metrics(&m));
            }
            if fused.unfused.is_empty() {
                Ok(0)
            } else {
                error!("agents {:?} could not be linked to the anchor agent", fused.unfused);
                Ok(1)
            }
        }
        Command::Eval { dir } => {
            let session = Session::new(cfg)?;
            let dir = dir.clone().unwrap_or(out);
            match evaluate_outputs(&session, &dir)? {
                Some(m) => {
                    print!("{}", render_metrics(&m));
                    fs::write(dir.join("metrics.txt"), render_metrics(&m))?;
                    fs::write(dir.join("metrics.csv"), render_metrics_table(&m))?;
                    Ok(0)
                }
                None => Err(Error::Metric("no ground truth for the outputs".into())),
            }
        }
        Command::GenScene { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            eprintln!("fleetmap: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
