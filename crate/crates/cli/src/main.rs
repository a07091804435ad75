use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use mixedlane_cli::{compare, human_batch, seed_list, write_compare};
use mixedlane_core::controller::{ControlMode, Outcome};
use mixedlane_core::policy::HdvPolicy;
use mixedlane_core::scenario::ScenarioConfig;
use mixedlane_core::sim::{compute_metrics, run_scenario, TrajectoryLog};
use mixedlane_live::{Server, SessionConfig};

#[derive(Parser)]
#[command(
    name = "mixedlane",
    version,
    about = "Lane-change controller and mixed-traffic simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Time,
    Event,
}

impl From<Mode> for ControlMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Time => ControlMode::Time,
            Mode::Event => ControlMode::Event,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory log.
    Run {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// HDV policy: random, aggressive, conservative, hesitant or zero.
        #[arg(long)]
        policy: Option<String>,
        /// JSON-lines log; metrics go to stdout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three controller cases over paired seeds.
    Compare {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep every n-th micro-step in the barrier CSVs.
        #[arg(long, default_value_t = 10)]
        decimate: usize,
    },
    /// Repeat a scenario with a scripted driver archetype.
    HumanBatch {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        archetype: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded log from its header and check it reproduces byte for byte.
    Replay {
        log: PathBuf,
        /// Where to write the regenerated log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a live session over WebSocket with the HDV under human control.
    Serve {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Extra scenarios a client may reset to, as name=path.
        #[arg(long = "extra", value_parser = parse_named)]
        extra: Vec<(String, PathBuf)>,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        /// Real-time factor; 0 starts paused.
        #[arg(long, default_value_t = 1.0)]
        pacing: f64,
        /// Directory for logs of finished runs.
        #[arg(long)]
        record_dir: Option<PathBuf>,
    },
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load(path: Option<&Path>) -> anyhow::Result<ScenarioConfig> {
    let config = match path {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::default(),
    };
    for w in config.validate()? {
        log::warn!("{w}");
    }
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn write_log(path: &Path, log: &TrajectoryLog) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    log.write_jsonl(BufWriter::new(f))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            mode,
            seed,
            policy,
            out,
        } => {
            let mut config = load(scenario.as_deref())?;
            if let Some(m) = mode {
                config = config.with_mode(m.into());
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            let policy = match policy {
                Some(name) => HdvPolicy::archetype(&name).with_context(|| format!("unknown policy {name:?}"))?,
                None => config.hdv_policy.clone(),
            };
            let log = run_scenario(config, policy)?;
            write_log(&out, &log)?;
            let metrics = compute_metrics(&log);
            if let Some(t) = &metrics.solve_timing {
                log::info!(
                    "{} QP solves, mean {:.3} ms, max {:.3} ms",
                    t.count,
                    t.mean_ms,
                    t.max_ms
                );
            }
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(match log.outcome {
                Outcome::Complete => ExitCode::SUCCESS,
                Outcome::Abort => ExitCode::from(2),
            })
        }
        Command::Compare {
            scenario,
            seeds,
            out,
            decimate,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let config = load(scenario.as_deref())?;
            let policy = config.hdv_policy.clone();
            let report = compare(&config, &policy, &seed_list(config.seed, seeds), decimate)?;
            write_compare(&report, &out)?;
            print!("{}", report.summary_table());
            Ok(ExitCode::SUCCESS)
        }
        Command::HumanBatch {
            scenario,
            archetype,
            reps,
            mode,
            out,
        } => {
            if !matches!(archetype.as_str(), "aggressive" | "conservative" | "hesitant") {
                bail!("unknown archetype {archetype:?}; expected aggressive, conservative or hesitant");
            }
            if reps == 0 {
                bail!("--reps must be at least 1");
            }
            let mut config = load(scenario.as_deref())?;
            if let Some(m) = mode {
                config = config.with_mode(m.into());
            }
            let report = human_batch(&config, &archetype, &seed_list(config.seed, reps))?;
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report.aggregates)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { log, out } => {
            let f = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let recorded = TrajectoryLog::read_jsonl(BufReader::new(f))?;
            let original = std::fs::read(&log)?;
            let again = run_scenario(recorded.header.config.clone(), recorded.header.policy.clone())?;
            if let Some(out) = out {
                write_log(&out, &again)?;
            }
            if again.to_jsonl_bytes() == original {
                println!("identical");
                Ok(ExitCode::SUCCESS)
            } else {
                let first = again
                    .steps
                    .iter()
                    .zip(&recorded.steps)
                    .find(|(a, b)| a != b)
                    .map(|(a, _)| a.step);
                println!("differs (first differing step: {first:?})");
                Ok(ExitCode::from(1))
            }
        }
        Command::Serve {
            scenario,
            extra,
            addr,
            pacing,
            record_dir,
        } => {
            let mut scenarios = BTreeMap::from([("default".to_string(), load(scenario.as_deref())?)]);
            for (name, path) in extra {
                scenarios.insert(name, load(Some(&path))?);
            }
            let mut cfg = SessionConfig::single("default", scenarios["default"].clone());
            cfg.scenarios = scenarios;
            cfg.pacing = pacing;
            let server = Server::bind(addr.as_str(), cfg)?.spawn();
            eprintln!("listening on ws://{}", server.local_addr());
            for run in server.finished_runs().iter() {
                let m = compute_metrics(&run.log);
                log::info!("run {} finished: {:?} at t = {:.3}", run.run, m.outcome, m.t_f);
                if let Some(dir) = &record_dir {
                    let stem = dir.join(format!("session-{}-run-{}", run.session, run.run));
                    write_log(&stem.with_extension("jsonl"), &run.log)?;
                    write_json(&stem.with_extension("commands.json"), &run.commands)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXEDLANE_LOG_LEVEL", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
