use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use planlab::datakit::Ratio;
use planlab::error::ExperimentError;
use planlab::experiment::{
    ratio_label, stage_eval, stage_generate, stage_ood, stage_report, stage_rft, stage_sft, stage_split,
    ExperimentConfig, Manifest,
};

/// Two-phase trajectory planning lab: supervised fine-tuning, GRPO
/// reinforcement fine-tuning and OOD safety evaluation on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "planlab", version)]
struct Cli {
    /// Experiment config (JSON). Flags override its values.
    #[arg(long, global = true, env = "PLANLAB_CONFIG")]
    config: Option<PathBuf>,
    /// Working directory for data, checkpoints, logs and reports.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct ReasoningFlag {
    /// Train without think text and do not require it in the format check.
    #[arg(long)]
    no_reasoning: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic training, validation and OOD scene files.
    Generate {
        /// Number of training samples.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        ood_count: Option<usize>,
    },
    /// Tag SFT/RFT splits and build easy/hard validation sets.
    Split {
        /// SFT:RFT ratio, e.g. 4:1.
        #[arg(long)]
        sft_rft: Option<Ratio>,
        /// Straight:turn ratio of the RFT share, e.g. 6:4.
        #[arg(long)]
        rft_ratio: Option<Ratio>,
    },
    /// Supervised fine-tuning from a fresh policy.
    Sft {
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        reasoning: ReasoningFlag,
    },
    /// GRPO fine-tuning from an SFT checkpoint.
    Rft {
        /// Checkpoint to start from (and anchor the KL term to).
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        reasoning: ReasoningFlag,
        /// Easy:hard ablation: one RFT run (plus evaluation) per ratio.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<Ratio>,
    },
    /// In-domain ADE/FDE on the easy and hard validation sets.
    Eval {
        /// Checkpoint labels to evaluate.
        #[arg(long = "label", default_values_t = [String::from("sft"), String::from("rft")])]
        labels: Vec<String>,
    },
    /// Collision metrics on OOD scenes.
    Ood {
        #[arg(long = "label", default_values_t = [String::from("sft"), String::from("rft")])]
        labels: Vec<String>,
    },
    /// Write report.md and report.json from available evaluations.
    Report,
    /// Print the effective config as JSON.
    Config,
}

fn exit_code(e: &ExperimentError) -> u8 {
    match e.category() {
        "config" => 2,
        "missing_stage" => 3,
        "io" => 4,
        "data" => 5,
        "train" => 6,
        "eval" => 7,
        _ => 8,
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Generate { count, val_count, ood_count } => {
            cfg.data.train_count = count.unwrap_or(cfg.data.train_count);
            cfg.data.val_count = val_count.unwrap_or(cfg.data.val_count);
            cfg.data.ood_count = ood_count.unwrap_or(cfg.data.ood_count);
        }
        Command::Split { sft_rft, rft_ratio } => {
            cfg.split.sft_rft = sft_rft.unwrap_or(cfg.split.sft_rft);
            cfg.split.rft_straight_turn = rft_ratio.unwrap_or(cfg.split.rft_straight_turn);
        }
        Command::Sft { reasoning, .. } | Command::Rft { reasoning, .. } if reasoning.no_reasoning => {
            cfg = cfg.with_reasoning(false);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_manifest(m: &Manifest) {
    let label = m.label.as_deref().map(|l| format!(" [{l}]")).unwrap_or_default();
    println!("{}{}: {}", m.stage, label, m.summary);
}

fn default_label(base: &str, reasoning: ReasoningFlag) -> String {
    if reasoning.no_reasoning {
        format!("{base}-noreason")
    } else {
        base.to_string()
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
    }
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Generate { .. } => print_manifest(&stage_generate(&cfg)?),
        Command::Split { .. } => print_manifest(&stage_split(&cfg)?),
        Command::Sft { label, reasoning } => {
            let label = label.clone().unwrap_or_else(|| default_label("sft", *reasoning));
            print_manifest(&stage_sft(&cfg, &label)?);
        }
        Command::Rft {
            from,
            label,
            reasoning,
            ratios,
        } => {
            let from = from.clone().unwrap_or_else(|| default_label("sft", *reasoning));
            if ratios.is_empty() {
                let label = label.clone().unwrap_or_else(|| default_label("rft", *reasoning));
                print_manifest(&stage_rft(&cfg, &from, &label, None)?);
            } else {
                for r in ratios {
                    let label = ratio_label(r);
                    print_manifest(&stage_rft(&cfg, &from, &label, Some(*r))?);
                    print_manifest(&stage_eval(&cfg, &label)?);
                }
            }
        }
        Command::Eval { labels } => {
            for l in labels {
                print_manifest(&stage_eval(&cfg, l)?);
            }
        }
        Command::Ood { labels } => {
            for l in labels {
                print_manifest(&stage_ood(&cfg, l)?);
            }
        }
        Command::Report => {
            let report = stage_report(&cfg)?;
            print!("{}", report.to_markdown());
        }
        Command::Config => println!("{}", cfg.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
