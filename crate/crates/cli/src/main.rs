mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clapt::evalkit::AmapGrid;
use clapt::experiment::RunConfig;
use clapt::losses::Objective;
use clapt::{Error, Execution, Result};

#[derive(Parser, Debug)]
#[command(version, about = "Contrastive language-action post-pre-training on synthetic videos")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus, its class vocabulary and the split manifest.
    GenData(GenDataArgs),
    /// Post-pre-train a model and write a checkpoint plus step log.
    Train(TrainArgs),
    /// Write per-second encoder features for every video.
    Extract(ExtractArgs),
    /// Sliding-window localization with a linear probe.
    EvalTal(EvalArgs),
    /// Prototype episodes over the novel classes.
    EvalFewshot(EvalArgs),
    /// Caption-to-interval grounding.
    EvalGrounding(EvalArgs),
    /// fg2fg / fg2bg distance analysis with a histogram.
    AnalyzeFeatures(AnalyzeArgs),
    /// Run the variant × task × seed matrix and write a comparison table.
    ReproAblation(AblationArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Corpus JSONL; classes.json and splits.json go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_videos: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    d_raw: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Tac,
    ClapClip,
    ClapMask,
    Clap,
    ClapDagger,
    ClapNoCls,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Tac => Objective::Tac,
            ObjectiveArg::ClapClip => Objective::ClapClip,
            ObjectiveArg::ClapMask => Objective::ClapMask,
            ObjectiveArg::Clap => Objective::Clap,
            ObjectiveArg::ClapDagger => Objective::ClapDagger,
            ObjectiveArg::ClapNoCls => Objective::ClapNoCls,
        }
    }
}

#[derive(Args, Debug, Default)]
struct DataPaths {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Defaults to splits.json next to the corpus.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Defaults to classes.json next to the corpus.
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataPaths,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Output directory for checkpoint.json and train_log.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train only on base-class videos, as required before few-shot
    /// evaluation.
    #[arg(long)]
    base_only: bool,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataPaths,
    /// Features JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GridArg {
    Full,
    ActivityNet,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataPaths,
    /// Precomputed features; extracted from the checkpoint when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Seed for episode sampling and random baselines.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    amap_grid: Option<GridArg>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Detections JSONL (eval-tal only).
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataPaths,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Histogram CSV; defaults to the report path with a .csv extension.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated variants.
    #[arg(long, value_enum, value_delimiter = ',')]
    variants: Option<Vec<ObjectiveArg>>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn apply_overrides(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::GenData(a) => {
            if let Some(v) = a.n_videos {
                cfg.generator.n_videos = v;
            }
            if let Some(v) = a.n_classes {
                cfg.generator.n_classes = v;
                cfg.train.model.n_classes = v;
            }
            if let Some(v) = a.d_raw {
                cfg.generator.d_raw = v;
                cfg.train.model.d_raw = v;
            }
            if let Some(v) = a.seed {
                cfg.generator.seed = v;
            }
            if let Some(p) = &a.out {
                cfg.out_dir = p.parent().map(PathBuf::from);
            }
        }
        Command::Train(a) => {
            if let Some(o) = a.objective {
                cfg.train.objective = o.into();
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.seed {
                cfg.train.seed = v;
            }
            if let Some(p) = &a.out {
                cfg.out_dir = Some(p.clone());
            }
        }
        Command::EvalTal(a) | Command::EvalFewshot(a) | Command::EvalGrounding(a) => {
            if let Some(g) = a.amap_grid {
                let grid = match g {
                    GridArg::Full => AmapGrid::Full,
                    GridArg::ActivityNet => AmapGrid::ActivityNet,
                };
                cfg.tal.amap_grid = grid;
                cfg.fewshot.amap_grid = grid;
            }
            if let Some(v) = a.shots {
                cfg.fewshot.shots = v;
            }
            if let Some(v) = a.episodes {
                cfg.fewshot.episodes = v;
            }
            if let Some(v) = a.seed {
                cfg.seeds = vec![v];
            }
        }
        Command::AnalyzeFeatures(a) => {
            if let Some(v) = a.bins {
                cfg.analysis.bins = v;
            }
            if let Some(v) = a.seed {
                cfg.seeds = vec![v];
            }
        }
        Command::ReproAblation(a) => {
            if let Some(s) = &a.seeds {
                cfg.seeds = s.clone();
            }
            if let Some(v) = &a.variants {
                cfg.variants = v.iter().map(|&o| o.into()).collect();
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(p) = &a.out {
                cfg.out_dir = Some(p.clone());
            }
        }
        Command::Extract(_) => {}
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Input(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.command);
    if cli.print_config {
        let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        let _ = writeln!(std::io::stdout().lock(), "{json}");
        return Ok(());
    }
    cfg.validate()?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&cfg, a.out, exec),
        Command::Train(a) => commands::train(&cfg, &a.data, a.base_only),
        Command::Extract(a) => commands::extract(&a.checkpoint, &a.data, &a.out, exec),
        Command::EvalTal(a) => commands::eval_tal(&cfg, &a, exec),
        Command::EvalFewshot(a) => commands::eval_fewshot(&cfg, &a, exec),
        Command::EvalGrounding(a) => commands::eval_grounding(&cfg, &a, exec),
        Command::AnalyzeFeatures(a) => commands::analyze(&cfg, &a, exec),
        Command::ReproAblation(_) => commands::repro_ablation(&cfg, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
