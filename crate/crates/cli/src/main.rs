use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use visplan_cli::run::{self, OUT_ENV};
use visplan_cli::{CliError, EvalSource, ExperimentConfig, Regime, RenderTarget, TrainOptions, TrainOutcome, Workspace};

#[derive(Parser)]
#[command(name = "visplan", version, about = "Visual planning laboratory on synthetic grid worlds")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override every seed of the config (the run directory gets a `-s<seed>` suffix).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Vpft,
    Vprl,
    VpftStar,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::Vpft => Regime::Vpft,
            RegimeArg::Vprl => Regime::Vprl,
            RegimeArg::VpftStar => Regime::VpftStar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Vpft,
    Vprl,
    VpftStar,
    Oracle,
    Uniform,
}

#[derive(Subcommand)]
enum Command {
    /// Build the environment pool and datasets.
    Gen {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train one regime, checkpointing every epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        regime: RegimeArg,
        /// Continue an interrupted run.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        #[arg(long)]
        force: bool,
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Roll out a planner on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Trained regime or baseline planner.
        #[arg(long, value_enum, required_unless_present = "checkpoint")]
        source: Option<SourceArg>,
        /// Evaluate a checkpoint file instead.
        #[arg(long, conflicts_with = "source")]
        checkpoint: Option<PathBuf>,
        /// Output label (defaults to the source name).
        #[arg(long)]
        label: Option<String>,
        /// Also evaluate the out-of-distribution pool.
        #[arg(long)]
        ood: bool,
        /// Write image strips for this many rollouts.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Draw an environment's optimal trajectory or a trajectory file.
    Render {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, required_unless_present = "trajectory")]
        env: Option<String>,
        #[arg(long, conflicts_with = "env")]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Summarize training curves and evaluations into a markdown report.
    Report {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Print the desk-scale default config.
    Defaults {
        #[arg(long, default_value = "desk")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn workspace(out: PathBuf, arg: &ConfigArg) -> Result<Workspace, CliError> {
    let mut cfg = ExperimentConfig::load(&arg.config)?;
    if let Some(seed) = arg.seed {
        cfg.reseed(seed);
        cfg.name = format!("{}-s{seed}", cfg.name);
    }
    Workspace::new(out, cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.cmd {
        Command::Gen { cfg, force } => {
            let ws = workspace(cli.out, &cfg)?;
            run::cmd_gen(&ws, force)?;
            println!("corpus written to {}", ws.corpus_dir().display());
        }
        Command::Train { cfg, regime, resume, force, halt_after } => {
            let ws = workspace(cli.out, &cfg)?;
            let regime = Regime::from(regime);
            let opts = TrainOptions { resume, force, halt_after };
            match run::cmd_train(&ws, regime, &opts)? {
                TrainOutcome::Finished(_) => println!("{} finished in {}", regime.tag(), ws.train_dir(regime).display()),
                TrainOutcome::Halted { epochs } => println!("halted after {epochs} epochs; continue with --resume"),
            }
        }
        Command::Eval { cfg, source, checkpoint, label, ood, images, force } => {
            let mut ws = workspace(cli.out, &cfg)?;
            if ood {
                ws.cfg.eval.ood = true;
            }
            if let Some(n) = images {
                ws.cfg.eval.dump_images = n;
            }
            ws.cfg.validate()?;
            let source = match (source, checkpoint) {
                (_, Some(path)) => EvalSource::Checkpoint(path),
                (Some(SourceArg::Vpft), _) => EvalSource::Regime(Regime::Vpft),
                (Some(SourceArg::Vprl), _) => EvalSource::Regime(Regime::Vprl),
                (Some(SourceArg::VpftStar), _) => EvalSource::Regime(Regime::VpftStar),
                (Some(SourceArg::Oracle), _) => EvalSource::Oracle,
                (Some(SourceArg::Uniform), _) => EvalSource::Uniform { seed: ws.cfg.corpus.seed },
                (None, None) => unreachable!("clap requires one of them"),
            };
            let label = label.unwrap_or_else(|| source.default_label());
            let (summary, warnings) = run::cmd_eval(&ws, &source, &label, force)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", summary.to_table());
        }
        Command::Render { cfg, env, trajectory, force } => {
            let ws = workspace(cli.out, &cfg)?;
            let target = match (env, trajectory) {
                (_, Some(p)) => RenderTarget::Trajectory(p),
                (Some(id), None) => RenderTarget::Env(id),
                (None, None) => unreachable!("clap requires one of them"),
            };
            for p in run::cmd_render(&ws, &target, force)? {
                println!("{}", p.display());
            }
        }
        Command::Report { cfg } => {
            let ws = workspace(cli.out, &cfg)?;
            println!("{}", run::cmd_report(&ws)?.display());
        }
        Command::Defaults { name, seed } => print!("{}", ExperimentConfig::desk(&name, seed).to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
