//! `igrft`: demonstration generation, annotation, the three training stages,
//! evaluation and plotting from the command line.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 schema mismatch
//! in a stored episode or checkpoint, 4 any other runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use igrft_core::checkpoint;
use igrft_core::config::Config;
use igrft_core::demos::generate_demos;
use igrft_core::episode::Episode;
use igrft_core::error::{Error, Result};
use igrft_core::eval::{evaluate, EvalPolicy};
use igrft_core::hil::{critic_readings, run_stage_iii, Intervener, IterationSummary, ScriptedIntervener, Snapshot};
use igrft_core::plot::{reward_series, to_csv, to_svg, value_series, Series};
use igrft_core::store::{self, FrameMode};
use igrft_core::trainer::{metrics_csv, run_stage_i, run_stage_ii, Dataset, Stage, Trainer};
use igrft_session::SessionServer;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "igrft", version, about = "Interaction-guided refinement of flow-matching policies")]
struct Cli {
    /// Configuration file. Falls back to $IGRFT_CONFIG, then to the built-in
    /// desk defaults. Commands that load a checkpoint use its configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice the command makes. Defaults to the
    /// configured training seed; commands that resume a checkpoint keep its
    /// random streams unless a seed is given.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    Expert,
    Random,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record annotated scripted-expert demonstrations.
    DemoGen {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 60)]
        count: usize,
        /// Upper bound of the per-episode action noise scale.
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Output buffer directory.
        #[arg(long)]
        out: PathBuf,
        /// Embed frames as base64 instead of PNG files.
        #[arg(long)]
        inline: bool,
    },
    /// Recompute interaction labels, rewards and value targets in place.
    Annotate {
        /// Episode files or buffer directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        inline: bool,
    },
    /// Stage I: supervised flow matching with critic warm-up.
    TrainSft {
        #[arg(long)]
        demos: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Stage II: advantage-weighted training on the demonstrations.
    TrainOffline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Stage III: rollouts with takeovers, interleaved with hybrid updates.
    RolloutHil {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        task: String,
        /// Receives the real buffer, per-iteration checkpoints, `final.json`,
        /// `summary.json` and `metrics.csv`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Scripted takeovers only, no network endpoint (the default).
        #[arg(long, conflicts_with = "serve")]
        headless: bool,
        /// Serve the operator session on this address, e.g. 127.0.0.1:8765.
        #[arg(long)]
        serve: Option<String>,
        #[arg(long)]
        inline: bool,
    },
    /// Success rate and subtask progress over seeded episodes.
    Eval {
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a reference policy instead of a checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step reward decomposition and return-to-go as CSV and SVG.
    PlotReward {
        #[arg(long)]
        episode: PathBuf,
        /// Output prefix; `.csv` and `.svg` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Critic value, reference value and interaction probability as CSV and
    /// SVG. Uses the readings logged during a rollout, or recomputes them
    /// with `--checkpoint`.
    PlotValue {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        e if e.is_schema() => 3,
        _ => 4,
    }
}

fn frame_mode(inline: bool) -> FrameMode {
    if inline {
        FrameMode::Inline
    } else {
        FrameMode::Png
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let config = || -> Result<Config> {
        let mut cfg = Config::resolve(cli.config.as_deref())?;
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    };
    match cli.command {
        Command::DemoGen {
            task,
            count,
            noise,
            out,
            inline,
        } => {
            let cfg = config()?;
            if !(noise >= 0.0) {
                return Err(Error::Usage("--noise must be >= 0".into()));
            }
            let demos = generate_demos(&cfg, &task, count, noise, cfg.train.seed)?;
            store::write_buffer(&out, &demos, frame_mode(inline))?;
            let steps: usize = demos.iter().map(Episode::len).sum();
            say!("wrote {} episodes ({steps} steps) to {}", demos.len(), out.display());
        }
        Command::Annotate { inputs, inline } => {
            let cfg = config()?;
            let mut files = Vec::new();
            for p in &inputs {
                if p.is_dir() {
                    files.extend(store::buffer_files(p)?);
                } else {
                    files.push(p.clone());
                }
            }
            for f in &files {
                let mut ep = store::read_episode(f)?;
                let task = cfg.task(&ep.task)?;
                ep.annotate(&cfg, &task)?;
                ep.validate()?;
                store::write_episode(f, &ep, frame_mode(inline))?;
            }
            say!("annotated {} episodes", files.len());
        }
        Command::TrainSft { demos, out, metrics } => {
            let cfg = config()?;
            let mut tr = Trainer::new(&cfg)?;
            let data = load_dataset(&tr, &demos)?;
            run_stage_i(&mut tr, &data)?;
            finish_stage(&tr, Stage::Sft, &out, metrics)?;
        }
        Command::TrainOffline {
            checkpoint,
            demos,
            out,
            metrics,
        } => {
            let mut tr = resume(&checkpoint, seed)?;
            let data = load_dataset(&tr, &demos)?;
            run_stage_ii(&mut tr, &data)?;
            finish_stage(&tr, Stage::Offline, &out, metrics)?;
        }
        Command::RolloutHil {
            checkpoint,
            demos,
            task,
            out_dir,
            headless: _,
            serve,
            inline,
        } => {
            let mut tr = resume(&checkpoint, seed)?;
            let spec = tr.cfg.task(&task)?;
            let data = load_dataset(&tr, &demos)?;
            let run_seed = tr.cfg.train.seed;
            let scripted = ScriptedIntervener::new(tr.cfg.hil.scripted_noise, run_seed);
            let server = serve.as_deref().map(SessionServer::bind).transpose()?;
            let mut intervener: Box<dyn Intervener> = match &server {
                Some(s) => {
                    say!("operator session on ws://{}", s.local_addr());
                    Box::new(s.intervener(scripted, Duration::from_millis(tr.cfg.hil.step_period_ms)))
                }
                None => Box::new(scripted),
            };
            fs::create_dir_all(&out_dir)?;
            let mut real = tr.dataset();
            let mut real_episodes = Vec::new();
            let summaries = run_stage_iii(
                &mut tr,
                &spec,
                &data,
                &mut real,
                &mut real_episodes,
                intervener.as_mut(),
                run_seed,
                &mut |t: &Trainer, s: &IterationSummary| {
                    checkpoint::save(&out_dir.join(format!("iteration_{}.json", s.iteration)), t, None)?;
                    say!(
                        "iteration {}: {} rollouts, {} aborted, {} successes, {} takeovers in {} episodes",
                        s.iteration, s.rollouts, s.aborted, s.successes, s.interventions, s.episodes_with_intervention
                    );
                    Ok(())
                },
            )?;
            store::write_buffer(&out_dir.join("real"), &real_episodes, frame_mode(inline))?;
            fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
            fs::write(out_dir.join("metrics.csv"), metrics_csv(&tr.metrics))?;
            let last = out_dir.join("final.json");
            checkpoint::save(&last, &tr, Some(Stage::Hitl))?;
            say!("wrote {} (sha256 {})", last.display(), checkpoint::file_sha256(&last)?);
        }
        Command::Eval {
            checkpoint,
            baseline,
            task,
            episodes,
            out,
        } => {
            let eval_seed = seed.unwrap_or(0);
            let report = match (checkpoint, baseline) {
                (Some(path), _) => {
                    let (tr, _) = checkpoint::load(&path)?;
                    let spec = tr.cfg.task(&task).map_err(|_| {
                        Error::Usage(format!("checkpoint {} was not trained for task `{task}`", path.display()))
                    })?;
                    evaluate(EvalPolicy::Learned(Snapshot::of(&tr)), &tr.cfg, &spec, episodes, eval_seed)?
                }
                (None, Some(b)) => {
                    let cfg = config()?;
                    let policy = match b {
                        Baseline::Expert => EvalPolicy::Expert,
                        Baseline::Random => EvalPolicy::Random,
                    };
                    evaluate(policy, &cfg, &cfg.task(&task)?, episodes, eval_seed)?
                }
                (None, None) => return Err(Error::Usage("eval needs --checkpoint or --baseline".into())),
            };
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                write_creating_dirs(&p, &json)?;
            }
            say!("{json}");
        }
        Command::PlotReward { episode, out } => {
            let ep = store::read_episode(&episode)?;
            let series = reward_series(&ep).map_err(|e| Error::Usage(format!("{e}; run `igrft annotate` first")))?;
            write_plot(&out, &format!("rewards: {} seed {}", ep.task, ep.seed), &series)?;
        }
        Command::PlotValue {
            episode,
            out,
            checkpoint,
        } => {
            let mut ep = store::read_episode(&episode)?;
            if let Some(path) = checkpoint {
                let (tr, _) = checkpoint::load(&path)?;
                let readings = critic_readings(Snapshot::of(&tr), &tr.cfg, &ep, ep.len())?;
                for (s, r) in ep.steps.iter_mut().zip(readings) {
                    s.critic = Some(r);
                }
            }
            let series = value_series(&ep)?;
            write_plot(&out, &format!("value: {} seed {}", ep.task, ep.seed), &series)?;
        }
    }
    Ok(())
}

/// Loads a checkpoint, optionally restarting its random streams.
fn resume(path: &Path, seed: Option<u64>) -> Result<Trainer> {
    let (mut tr, stage) = checkpoint::load(path)?;
    log::info!("resuming {} (last stage {:?})", path.display(), stage.map(Stage::as_str));
    if let Some(s) = seed {
        tr.reseed(s);
    }
    Ok(tr)
}

/// Reads a buffer, annotating in memory any episode stored without labels.
fn load_dataset(tr: &Trainer, dir: &Path) -> Result<Dataset> {
    let mut eps = store::read_buffer(dir)?;
    if eps.is_empty() {
        return Err(Error::Usage(format!("no episodes in {}", dir.display())));
    }
    for ep in eps.iter_mut().filter(|e| e.annotation.is_none()) {
        let task = tr.cfg.task(&ep.task)?;
        ep.annotate(&tr.cfg, &task)?;
    }
    tr.dataset_from(&eps)
}

fn finish_stage(tr: &Trainer, stage: Stage, out: &Path, metrics: Option<PathBuf>) -> Result<()> {
    checkpoint::save(out, tr, Some(stage))?;
    let metrics = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
    write_creating_dirs(&metrics, &metrics_csv(&tr.metrics))?;
    if let Some(last) = tr.metrics.last() {
        say!("{} done: {} actor steps, final loss {:.5}", stage.as_str(), last.actor_step, last.actor_loss);
    }
    say!("wrote {} (sha256 {})", out.display(), checkpoint::file_sha256(out)?);
    Ok(())
}

fn write_plot(prefix: &Path, title: &str, series: &[Series]) -> Result<()> {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    write_creating_dirs(&with(".csv"), &to_csv(series))?;
    write_creating_dirs(&with(".svg"), &to_svg(title, series))?;
    say!("wrote {0}.csv and {0}.svg", prefix.display());
    Ok(())
}

fn write_creating_dirs(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
