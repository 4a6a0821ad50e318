use std::path::PathBuf;

use clap::{Parser, Subcommand};

use etdpc::corpus::Category;
use etdpc::evalrep::{Case, Experiment, SWEEP_CATEGORIES, SWEEP_FRACTIONS};
use etdpc::Error;

use crate::commands::{self, case_dir, AtStage, StageError};
use crate::config::{Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "etdpc",
    version,
    about = "Page classification for scanned theses and dissertations"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest (or generate a synthetic corpus), split it and build the vocabulary.
    Prepare {
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Generate this many synthetic pages per category instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Dataset directory (overrides `paths.data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render pseudo pages for minority categories of the training split.
    Augment {
        /// Pool to augment from instead of the prepared training split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        floor: Option<i64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the classifier(s) of one case.
    Train {
        #[arg(long, value_parser = parse_case)]
        case: Case,
        /// Checkpoint directory for this case.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained case on the test split.
    Eval {
        #[arg(long, value_parser = parse_case)]
        case: Case,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the variants of an ablation.
    Ablate {
        #[arg(long, value_parser = parse_experiment)]
        experiment: Experiment,
        #[arg(long, value_parser = parse_case, default_value = "a")]
        case: Case,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain with subsampled categories and record their F1.
    Sweep {
        /// Comma-separated category names.
        #[arg(long, value_delimiter = ',', value_parser = parse_category)]
        categories: Vec<Category>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_parser = parse_case, default_value = "a")]
        case: Case,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify the pages of a manifest into JSON lines.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Use the checkpoints of this case.
        #[arg(long, value_parser = parse_case, conflicts_with = "checkpoint")]
        case: Option<Case>,
        /// Checkpoint directory holding model.json or level1.json + level2.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// prepare, augment, train, eval for every configured case, then the combined report.
    EndToEnd,
}

fn parse_case(s: &str) -> Result<Case, String> {
    Case::parse(s).map_err(|e| e.to_string())
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    Experiment::parse(s).map_err(|e| e.to_string())
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.trim().parse().map_err(|e: Error| e.to_string())
}

macro_rules! with_scalar {
    ($p:expr, $($f:ident)::+, $($a:expr),*) => {
        match $p {
            Precision::F32 => $($f)::+::<f32>($($a),*),
            Precision::F64 => $($f)::+::<f64>($($a),*),
        }
    };
}

fn print_json<V: serde::Serialize>(v: &V) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

/// Execute one parsed command line.
pub fn run(cli: Cli) -> Result<(), StageError> {
    let mut cfg = RunConfig::load(cli.config.as_deref()).at("config")?;
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs {j}: {e}")))
            .at("config")?;
    }
    let p = cfg.precision;
    match cli.command {
        Command::Prepare {
            manifest,
            synthetic,
            out,
        } => {
            if let Some(dir) = out {
                cfg.paths.data_dir = dir;
            }
            let s = commands::prepare(&cfg, manifest.as_deref(), synthetic).at("prepare")?;
            println!("split hash {}", s.split_hash);
            print_json(&s);
        }
        Command::Augment {
            manifest,
            floor,
            seed,
            out,
        } => {
            let s = commands::augment(&cfg, manifest.as_deref(), floor, seed, out.as_deref()).at("augment")?;
            print_json(&s);
        }
        Command::Train { case, out } => {
            let s = with_scalar!(p, commands::train, &cfg, case, out.as_deref()).at("train")?;
            print_json(&s);
        }
        Command::Eval { case, out } => {
            let e = with_scalar!(p, commands::eval, &cfg, case, out.as_deref()).at("eval")?;
            println!(
                "case {} macro-F1 {:.4} accuracy {:.4}",
                case.letter(),
                e.metrics.macro_f1,
                e.metrics.accuracy
            );
        }
        Command::Ablate { experiment, case, out } => {
            let t = with_scalar!(p, commands::ablate, &cfg, experiment, case, out.as_deref()).at("ablate")?;
            for v in &t.variants {
                println!("{} macro-F1 {:.4}", v.name, v.metrics.macro_f1);
            }
        }
        Command::Sweep {
            categories,
            fractions,
            case,
            out,
        } => {
            let cats = if categories.is_empty() {
                SWEEP_CATEGORIES.to_vec()
            } else {
                categories
            };
            let fr = if fractions.is_empty() {
                SWEEP_FRACTIONS.to_vec()
            } else {
                fractions
            };
            let r = with_scalar!(p, commands::sweep, &cfg, &cats, &fr, case, out.as_deref()).at("sweep")?;
            print_json(&r.cells);
        }
        Command::Predict {
            manifest,
            out,
            case,
            checkpoint,
        } => {
            let dir = match (checkpoint, case) {
                (Some(d), _) => d,
                (None, Some(c)) => case_dir(&cfg.paths.checkpoint_dir, c),
                (None, None) => return Err(Error::Config("predict needs --case or --checkpoint".into())).at("predict"),
            };
            let s = with_scalar!(p, commands::predict, &dir, &manifest, &out).at("predict")?;
            print_json(&s);
        }
        Command::EndToEnd => {
            let set = with_scalar!(p, commands::end_to_end, &cfg)?;
            for e in &set.cases {
                println!("case {} macro-F1 {:.4}", e.case.letter(), e.metrics.macro_f1);
            }
        }
    }
    Ok(())
}
