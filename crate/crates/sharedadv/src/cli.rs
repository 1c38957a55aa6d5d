use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{AttackMode, Config, DataKind, DefenseKind, EvalMode};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "sharedadv", version, about = "Shared adversarial training and universal robustness experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus its history.
    Train {
        #[command(flatten)]
        flags: Flags,
        /// erm, adv or shared.
        #[arg(long)]
        defense: Option<String>,
    },
    /// Craft a perturbation against a checkpoint and report its effect.
    Attack {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// Estimate the smallest budget reaching a fooling rate above delta.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train and evaluate a grid of configurations; resumable.
    Sweep {
        #[command(flatten)]
        flags: Flags,
    },
    /// Heap adversary losses for sharedness 1, 2, 4, ..., d on one batch.
    RiskChain {
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: Flags,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Per-sharedness (accuracy, eps_uni) series from a records file.
    ExportPlot {
        records: PathBuf,
        #[arg(long, default_value = "plot")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args, Default)]
pub struct Flags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// `blobs`, `shapes`, or the path of an IDX image file.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub sigma: Option<f32>,
    #[arg(long)]
    pub sharedness: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub bsearch: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Class index, `scene`, or path of a TNSR1 label map.
    #[arg(long)]
    pub targeted: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<AttackMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Train,
    Attack,
    Eval,
    Sweep,
    Risk,
}

fn reject(flag: &str, cmd: &str) -> Error {
    Error::Config(format!("--{flag} does not apply to {cmd}"))
}

/// Resolve the configuration for a command: the checkpoint's own
/// configuration (if any), then the `--config` file, then flags.
fn resolve(flags: &Flags, base: Option<Config>, target: Target) -> Result<Config> {
    let mut cfg = match (&flags.config, base) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(base)) => base,
        (None, None) => Config::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(d) = &flags.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(d) = &flags.dataset {
        match d.as_str() {
            "blobs" => cfg.data.kind = DataKind::Blobs,
            "shapes" => cfg.data.kind = DataKind::Shapes,
            path => {
                cfg.data.kind = DataKind::Idx;
                cfg.data.images = Some(PathBuf::from(path));
                if cfg.data.labels.is_none() {
                    cfg.data.labels = labels_beside(Path::new(path));
                }
            }
        }
    }
    let name = format!("{target:?}").to_lowercase();
    match target {
        Target::Train | Target::Sweep => {
            if let Some(e) = flags.eps {
                cfg.train.eps = e;
            }
            if let Some(s) = flags.sigma {
                cfg.train.sigma = s;
            }
            if let Some(s) = flags.sharedness {
                cfg.train.sharedness = s;
            }
            if let Some(s) = flags.steps {
                cfg.train.steps = s;
            }
        }
        Target::Attack => {
            if let Some(e) = flags.eps {
                cfg.attack.eps = e;
            }
            if let Some(s) = flags.sharedness {
                cfg.attack.sharedness = s;
            }
            if let Some(s) = flags.steps {
                cfg.attack.steps = s;
            }
            if let Some(b) = flags.beta {
                cfg.attack.beta = b;
            }
            if let Some(g) = flags.gamma {
                cfg.attack.gamma = g;
            }
            if let Some(m) = flags.mode {
                cfg.attack.mode = m;
            }
            if flags.targeted.is_some() {
                cfg.attack.targeted = flags.targeted.clone();
            }
        }
        Target::Eval => {
            if let Some(e) = flags.eps {
                cfg.eval.eps_hi = Some(e);
            }
            if let Some(s) = flags.steps {
                cfg.eval.steps = s;
            }
            if let Some(b) = flags.beta {
                cfg.eval.beta = b;
            }
            if let Some(g) = flags.gamma {
                cfg.eval.gamma = g;
            }
            match flags.mode {
                Some(AttackMode::Universal) => cfg.eval.mode = EvalMode::Universal,
                Some(AttackMode::Pgd) => cfg.eval.mode = EvalMode::PerExample,
                Some(AttackMode::Shared) => return Err(reject("mode shared", &name)),
                None => {}
            }
            if flags.targeted.is_some() {
                cfg.eval.targeted = flags.targeted.clone();
            }
        }
        Target::Risk => {
            if let Some(e) = flags.eps {
                cfg.risk.eps = e;
            }
            if let Some(s) = flags.steps {
                cfg.risk.steps = s;
            }
        }
    }
    if let Some(b) = flags.bsearch {
        cfg.eval.bsearch = b;
    }
    if let Some(d) = flags.delta {
        cfg.eval.delta = d;
    }
    // Flags that a command would silently ignore are rejected instead.
    let ignored = [
        ("sigma", flags.sigma.is_some() && !matches!(target, Target::Train | Target::Sweep)),
        ("sharedness", flags.sharedness.is_some() && matches!(target, Target::Eval | Target::Risk)),
        ("mode", flags.mode.is_some() && !matches!(target, Target::Attack | Target::Eval)),
        ("targeted", flags.targeted.is_some() && !matches!(target, Target::Attack | Target::Eval)),
        ("beta", flags.beta.is_some() && matches!(target, Target::Train | Target::Sweep)),
        ("gamma", flags.gamma.is_some() && matches!(target, Target::Train | Target::Sweep)),
    ];
    if let Some((flag, _)) = ignored.iter().find(|(_, bad)| *bad) {
        return Err(reject(flag, &name));
    }
    Ok(cfg)
}

/// `train-images-idx3-ubyte` pairs with `train-labels-idx1-ubyte`.
fn labels_beside(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    name.contains("images")
        .then(|| images.with_file_name(name.replace("images", "labels").replace("idx3", "idx1")))
}

fn parse_defense(s: &str) -> Result<DefenseKind> {
    match s {
        "erm" => Ok(DefenseKind::Erm),
        "adv" => Ok(DefenseKind::Adv),
        "shared" => Ok(DefenseKind::Shared),
        other => Err(Error::Config(format!("unknown defense {other:?}"))),
    }
}

fn checkpoint_config(path: &std::path::Path) -> Result<Config> {
    Ok(crate::checkpoint::load_checkpoint(path)?.1)
}

/// Run a parsed command, printing a short summary on success.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { flags, defense } => {
            let mut cfg = resolve(&flags, None, Target::Train)?;
            if let Some(d) = defense {
                cfg.train.defense = parse_defense(&d)?;
            }
            if flags.sharedness.is_some() && cfg.train.defense != DefenseKind::Shared {
                return Err(Error::Config("--sharedness needs the shared defense".into()));
            }
            let out = commands::cmd_train(&cfg)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("train_accuracy {}", out.train_accuracy);
            println!("test_accuracy {}", out.test_accuracy);
        }
        Command::Attack {
            checkpoint,
            flags,
            sample_size,
        } => {
            let mut cfg = resolve(&flags, Some(checkpoint_config(&checkpoint)?), Target::Attack)?;
            if let Some(m) = sample_size {
                if cfg.attack.mode != AttackMode::Universal {
                    return Err(Error::Config("--sample-size only applies to the universal mode".into()));
                }
                cfg.attack.sample_size = m;
            }
            let (dir, r) = commands::cmd_attack(&checkpoint, &cfg)?;
            println!("output {}", dir.display());
            println!("clean_accuracy {}", r.clean_accuracy);
            println!("fooling_rate {}", r.fooling_rate);
            if let Some(p) = r.mean_pixel_accuracy {
                println!("mean_pixel_accuracy {p}");
            }
        }
        Command::Eval { checkpoint, flags } => {
            let cfg = resolve(&flags, Some(checkpoint_config(&checkpoint)?), Target::Eval)?;
            let (dir, out) = commands::cmd_eval(&checkpoint, &cfg)?;
            println!("output {}", dir.display());
            println!("eps_hat {}", out.eps_hat.expect("found"));
        }
        Command::Sweep { flags } => {
            if flags.config.is_none() {
                return Err(Error::Config("sweep needs a plan given with --config".into()));
            }
            let cfg = resolve(&flags, None, Target::Sweep)?;
            let s = commands::cmd_sweep(&cfg)?;
            println!("records {}", s.records.display());
            println!("pareto {}", s.pareto.display());
            println!("ran {} skipped {} failed {}", s.ran, s.skipped, s.failed);
        }
        Command::RiskChain {
            checkpoint,
            flags,
            batch,
        } => {
            let mut cfg = resolve(&flags, Some(checkpoint_config(&checkpoint)?), Target::Risk)?;
            if let Some(b) = batch {
                cfg.risk.batch = b;
            }
            let (dir, chain) = commands::cmd_risk_chain(&checkpoint, &cfg)?;
            println!("output {}", dir.display());
            for e in &chain.entries {
                match e.sharedness {
                    Some(s) => println!("s={s} {}", e.mean_loss),
                    None => println!("universal {}", e.mean_loss),
                }
            }
            println!("monotone {}", chain.is_monotone());
        }
        Command::ExportPlot { records, out_dir } => {
            for f in commands::cmd_export_plot(&records, &out_dir)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
