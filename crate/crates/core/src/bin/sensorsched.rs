use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sensorsched::harness::{emit_summary, run_sweep, ExitCode, ExperimentConfig, SummaryRow, Variation};
use sensorsched::scheduling::{evaluate, train, write_curve, write_step_csv, ActorCritic, PolicySpec};
use sensorsched::snapshot::{parse_snapshot, render_snapshot};
use sensorsched::stability::analyze;
use sensorsched::{Error, Result};

#[derive(Parser)]
#[command(name = "sensorsched", version, about = "Delay-aware sensor scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set env.beta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (overrides `experiment.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `experiment.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, runs: Option<usize>) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("experiment.seed={s}"));
        }
        if let Some(r) = runs {
            overrides.push(format!("experiment.n_runs={r}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("experiment.output_dir={}", toml::Value::String(o.display().to_string())));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Idle,
    Random,
    Greedy,
    Ppo,
    /// random, greedy, and ppo when a checkpoint is given.
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train the PPO scheduler; writes `ppo.ckpt` and `learning_curve.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total environment steps (overrides `ppo.total_steps`).
        #[arg(long)]
        total_steps: Option<usize>,
    },
    /// Evaluate policies with paired seeds; writes `summary.csv` and per-step CSVs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        policy: PolicyArg,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Standard setup plus the six parameter variations; writes `sweep_summary.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        policy: PolicyArg,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decide whether some schedule keeps the estimation error bounded.
    CheckStability {
        #[command(flatten)]
        common: Common,
        /// Analyze a model snapshot instead of the generated system.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Write the generated system as a plain-text snapshot.
    Snapshot {
        #[command(flatten)]
        common: Common,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn load_checkpoint(path: &Path) -> std::result::Result<ActorCritic, (ExitCode, String)> {
    let file = File::open(path).map_err(|e| {
        (
            ExitCode::MissingCheckpoint,
            format!("cannot open checkpoint {}: {e}", path.display()),
        )
    })?;
    ActorCritic::load(BufReader::new(file))
        .map(|(net, _)| net)
        .map_err(|e| (ExitCode::MissingCheckpoint, format!("invalid checkpoint {}: {e}", path.display())))
}

fn policies(arg: PolicyArg, checkpoint: Option<&Path>) -> std::result::Result<Vec<PolicySpec>, (ExitCode, String)> {
    let ppo = || -> std::result::Result<PolicySpec, (ExitCode, String)> {
        let path = checkpoint.ok_or((ExitCode::MissingCheckpoint, "the ppo policy needs --checkpoint".to_string()))?;
        Ok(PolicySpec::Ppo(Arc::new(load_checkpoint(path)?)))
    };
    Ok(match arg {
        PolicyArg::Idle => vec![PolicySpec::Idle],
        PolicyArg::Random => vec![PolicySpec::Random],
        PolicyArg::Greedy => vec![PolicySpec::Greedy],
        PolicyArg::Ppo => vec![ppo()?],
        PolicyArg::All => {
            let mut v = vec![PolicySpec::Random, PolicySpec::Greedy];
            if checkpoint.is_some() {
                v.push(ppo()?);
            }
            v
        }
    })
}

type Outcome = std::result::Result<(), (ExitCode, String)>;

fn lift<T>(r: Result<T>) -> std::result::Result<T, (ExitCode, String)> {
    r.map_err(|e| (ExitCode::for_error(&e), e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::ShowConfig { common } => {
            let cfg = lift(common.load(None))?;
            print!("{}", cfg.to_toml());
        }
        Command::Snapshot { common, file } => {
            let cfg = lift(common.load(None))?;
            let env = lift(cfg.env_config(Variation::Standard))?;
            let text = render_snapshot(&env.model, &env.sensors);
            match file {
                Some(p) => lift(fs::write(&p, text).map_err(Error::from))?,
                None => print!("{text}"),
            }
        }
        Command::CheckStability { common, model } => {
            let cfg = lift(common.load(None))?;
            let (a, sensors) = match model {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| (ExitCode::Io, format!("cannot read {}: {e}", p.display())))?;
                    let (m, s) = lift(parse_snapshot(&text))?;
                    (m.a().clone(), s)
                }
                None => {
                    let env = lift(cfg.env_config(Variation::Standard))?;
                    (env.model.a().clone(), env.sensors.clone())
                }
            };
            let report = lift(analyze(&a, &sensors))?;
            print!("{report}");
            if !report.feasible {
                return Err((ExitCode::Infeasible, "no schedule keeps the error bounded".into()));
            }
        }
        Command::Train { common, total_steps } => {
            let mut cfg = lift(common.load(None))?;
            if let Some(t) = total_steps {
                cfg.ppo.total_steps = t;
            }
            let env = lift(cfg.env_config(Variation::Standard))?;
            let out = lift(train(env, &cfg.ppo, cfg.train_seed()))?;
            let dir = &cfg.experiment.output_dir;
            lift(create(dir, "ppo.ckpt").and_then(|w| out.policy.save(w, cfg.train_seed())))?;
            lift(create(dir, "learning_curve.csv").and_then(|w| write_curve(&out.curve, w)))?;
            eprintln!("wrote {}", dir.join("ppo.ckpt").display());
        }
        Command::Evaluate {
            common,
            policy,
            runs,
            checkpoint,
        } => {
            let cfg = lift(common.load(runs))?;
            let specs = policies(policy, checkpoint.as_deref())?;
            let env = lift(cfg.env_config(Variation::Standard))?;
            let dir = &cfg.experiment.output_dir;
            let mut rows = Vec::new();
            for p in &specs {
                let s = lift(evaluate(&env, p, cfg.experiment.n_runs, cfg.eval_seed()))?;
                lift(create(dir, &format!("steps_{}.csv", s.policy)).and_then(|w| write_step_csv(&s, w)))?;
                rows.push(SummaryRow::new(&s, Variation::Standard));
            }
            lift(create(dir, "summary.csv").and_then(|w| emit_summary(&rows, w)))?;
            lift(emit_summary(&rows, io::stdout().lock()))?;
        }
        Command::Sweep {
            common,
            policy,
            runs,
            checkpoint,
        } => {
            let cfg = lift(common.load(runs))?;
            let specs = policies(policy, checkpoint.as_deref())?;
            let results = lift(run_sweep(&cfg, &specs, &Variation::ALL))?;
            let rows: Vec<SummaryRow> = results.iter().map(|(v, s)| SummaryRow::new(s, *v)).collect();
            lift(create(&cfg.experiment.output_dir, "sweep_summary.csv").and_then(|w| emit_summary(&rows, w)))?;
            lift(emit_summary(&rows, io::stdout().lock()))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err((code, msg)) = run(cli) {
        let _ = io::stdout().flush();
        eprintln!("error: {msg}");
        process::exit(code as i32);
    }
}
