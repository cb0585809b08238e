use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anmpc::human_model::RationalityCoefficient;
use anmpc::simulation::batch::save_csv;
use anmpc::simulation::log::{load_log, save_log};
use anmpc::simulation::{
    config_grid, resolve_scenario, run_batch, run_episode, summarize, BatchSpec, EpisodeResult, OperatorModel,
    SimConfig, TickRecord,
};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "anmpc", about = "Shared-autonomy NMPC simulations", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one closed-loop episode.
    Run {
        #[arg(long, default_value = "lab_gA")]
        scenario: String,
        #[command(flatten)]
        operator: OperatorArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for episode.jsonl and metrics.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a λ × w grid over scenarios and seeds.
    Batch {
        /// Repeatable; defaults to both lab goals.
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        #[command(flatten)]
        operator: OperatorArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.35,0.5")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,1000,10000")]
        slack_weights: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file for the per-episode rows.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run an episode from the operator commands in a log.
    Replay {
        log: PathBuf,
        #[arg(long, default_value = "lab_gA")]
        scenario: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check scenario documents.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OperatorKind {
    Rational,
    Boltzmann,
    Scripted,
    External,
}

#[derive(Args)]
struct OperatorArgs {
    #[arg(long, value_enum, default_value = "boltzmann")]
    operator: OperatorKind,
    /// Rationality coefficient of the Boltzmann operator.
    #[arg(long)]
    beta: Option<f64>,
    /// Full operator description as JSON; overrides --operator.
    #[arg(long)]
    operator_file: Option<PathBuf>,
}

impl OperatorArgs {
    fn model(&self) -> Result<OperatorModel> {
        if let Some(path) = &self.operator_file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let model: OperatorModel = serde_json::from_str(&text)?;
            model.validate()?;
            return Ok(model);
        }
        let mut model = match self.operator {
            OperatorKind::Rational => OperatorModel::rational(),
            OperatorKind::Boltzmann => OperatorModel::boltzmann(),
            OperatorKind::Scripted => OperatorModel::scripted(vec![]),
            OperatorKind::External => OperatorModel::External,
        };
        if let Some(b) = self.beta {
            let OperatorModel::Boltzmann { beta, .. } = &mut model else {
                bail!("--beta only applies to the boltzmann operator");
            };
            *beta = RationalityCoefficient::new(b)?;
        }
        Ok(model)
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// Base configuration as JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    slack_weight: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// CBF decay rate.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_sqp_iters: Option<usize>,
    /// Simulated seconds before the episode is cut off.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    goal_tolerance: Option<f64>,
    #[arg(long)]
    yaw_tolerance: Option<f64>,
    /// Apply each robot input one tick late.
    #[arg(long)]
    actuation_delay: bool,
    /// Discard solves slower than this many seconds.
    #[arg(long)]
    solve_deadline: Option<f64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)?
            }
            None => SimConfig::default(),
        };
        if let Some(l) = self.lambda {
            cfg = cfg.with_lambda(l);
        }
        if let Some(w) = self.slack_weight {
            cfg = cfg.with_slack_weight(w);
        }
        if let Some(n) = self.horizon {
            cfg.nmpc.horizon = n;
        }
        if let Some(g) = self.gamma {
            cfg.nmpc.barrier.gamma = g;
        }
        if let Some(n) = self.max_sqp_iters {
            cfg.nmpc.max_sqp_iters = n;
        }
        if let Some(d) = self.duration {
            cfg.duration_limit = d;
        }
        if let Some(t) = self.goal_tolerance {
            cfg.goal_tolerance = t;
        }
        if let Some(t) = self.yaw_tolerance {
            cfg.yaw_tolerance = t;
        }
        cfg.actuation_delay |= self.actuation_delay;
        if self.solve_deadline.is_some() {
            cfg.solve_deadline = self.solve_deadline;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_episode(dir: &Path, r: &EpisodeResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_log(&r.trace, dir.join("episode.jsonl"))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&r.metrics)?)?;
    Ok(())
}

fn report(r: &EpisodeResult) {
    let m = &r.metrics;
    match m.time_to_goal {
        Some(t) => println!("goal reached in {t:.1} s"),
        None => println!("goal not reached after {} ticks", m.ticks),
    }
    if let Some(d) = m.min_obstacle_distance {
        println!("closest obstacle {d:.3} m");
    }
    println!("path {:.2} m, operator effort {:.3}", m.path_length, m.human_effort);
    if let Some(t) = m.mean_solve_time {
        println!("mean solve {:.1} ms, fallbacks {}, overruns {}", t * 1e3, m.solver_fallbacks, m.overruns);
    }
}

/// First tick at which two traces disagree, ignoring wall-clock fields.
fn divergence(a: &[TickRecord], b: &[TickRecord]) -> Option<usize> {
    let n = a.len().min(b.len());
    (0..n)
        .find(|&k| a[k].without_timing() != b[k].without_timing())
        .or((a.len() != b.len()).then_some(n))
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Cmd::Run {
            scenario,
            operator,
            config,
            seed,
            out,
        } => {
            let sc = resolve_scenario(&scenario)?;
            let r = run_episode(&sc, &operator.model()?, &config.build()?, seed)?;
            report(&r);
            if let Some(dir) = out {
                write_episode(&dir, &r)?;
            }
            Ok(if r.metrics.success { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Batch {
            scenarios,
            operator,
            config,
            lambdas,
            slack_weights,
            repetitions,
            threads,
            seed,
            out,
        } => {
            let names = if scenarios.is_empty() {
                vec!["lab_gA".to_owned(), "lab_gB".to_owned()]
            } else {
                scenarios
            };
            let spec = BatchSpec {
                scenarios: names.iter().map(|n| resolve_scenario(n)).collect::<Result<_, _>>()?,
                configs: config_grid(&config.build()?, &lambdas, &slack_weights),
                operator: operator.model()?,
                repetitions,
                seed,
                threads,
            };
            let rows = run_batch(&spec)?;
            for s in summarize(&rows) {
                println!(
                    "{:<28} success {}/{}  min dist {}  mean time {}",
                    s.config_id,
                    s.successes,
                    s.episodes,
                    s.min_dist.map_or("-".into(), |d| format!("{d:.3}")),
                    s.mean_time_to_goal.map_or("-".into(), |t| format!("{t:.1}")),
                );
            }
            if let Some(path) = out {
                save_csv(&rows, &path)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay {
            log,
            scenario,
            config,
            seed,
            out,
        } => {
            let recorded = load_log(&log)?;
            let sc = resolve_scenario(&scenario)?;
            let r = run_episode(&sc, &OperatorModel::replay_log(&recorded), &config.build()?, seed)?;
            report(&r);
            if let Some(dir) = out {
                write_episode(&dir, &r)?;
            }
            match divergence(&recorded, &r.trace) {
                None => {
                    println!("replay identical over {} ticks", recorded.len());
                    Ok(ExitCode::SUCCESS)
                }
                Some(k) => {
                    println!("replay diverges at tick {k}");
                    Ok(ExitCode::from(3))
                }
            }
        }
        Cmd::Validate { scenarios } => {
            let mut failed = false;
            for name in &scenarios {
                match resolve_scenario(name) {
                    Ok(s) => println!("ok {name}: {} obstacles, d_th {}", s.obstacles.len(), s.obstacles.d_th),
                    Err(e) => {
                        println!("error {name}: {e}");
                        failed = true;
                    }
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
    }
}
