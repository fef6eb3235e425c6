//! Command-line front door: dataset building, encoder training, embedding
//! generation, a definition demo, and the three evaluation harnesses. Every
//! command reads one TOML config (CLI flags override individual fields),
//! seeds a single RNG, and writes a JSON report echoing the resolved config.
//!
//! Exit codes: 0 success, 1 runtime failure (with reports/error.json),
//! 2 usage error.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_config, AppConfig, Overrides};

#[derive(Parser, Debug)]
#[command(
    name = "college",
    version,
    about = "Few-shot concept embeddings for a frozen language model"
)]
struct Cli {
    /// TOML configuration file (required by every command).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config report directory.
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile raw text corpora into an episode dataset.
    BuildData {
        /// Plain-text or JSONL document files (repeatable).
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Episode output path (default: paths.data from the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the concept encoder against the frozen models.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Generate a concept embedding file from a word file
    /// (first line: the word; following lines: support sentences).
    GenEmbedding {
        #[arg(long)]
        word_file: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "college")]
        provider: String,
        #[arg(long)]
        k_shot: Option<usize>,
    },
    /// Generate a definition for the word in a word file.
    Define {
        #[arg(long)]
        word_file: PathBuf,
        #[arg(long, default_value = "college")]
        provider: String,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Fill-in-the-blank multiple choice evaluation.
    EvalGre {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "college")]
        provider: String,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// Add each choice's definition as an extra support.
        #[arg(long)]
        with_definition: bool,
        /// Also place supports in the LM context window.
        #[arg(long)]
        prompting: bool,
        /// Sweep harness.k_values and emit an accuracy-vs-k SVG.
        #[arg(long)]
        plot: bool,
    },
    /// Slang-term definition matching evaluation.
    EvalSlang {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "college")]
        provider: String,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        n_distractors: Option<usize>,
        #[arg(long)]
        prompting: bool,
        #[arg(long)]
        plot: bool,
    },
    /// Definition-generation tournament (similarity F1 + judged Elo).
    EvalDefgen {
        #[arg(long)]
        tasks: PathBuf,
        /// Champion provider; every other available provider challenges.
        #[arg(long, default_value = "college")]
        provider: String,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Write a synthetic working set for demos: corpus, episodes, task
    /// files, pretrained toy models and ready-to-run configs.
    MakeFixtures {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        concepts: usize,
        /// Pretraining steps for the toy LM (the extractor gets 2/3).
        #[arg(long, default_value_t = 600)]
        pretrain_steps: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config <FILE> is required\n\nUsage: college --config <FILE> <COMMAND>");
        return ExitCode::from(2);
    };
    let command_name = command_name(&cli.command);
    let overrides = build_overrides(&cli);
    let cfg = match parse_config(&config_path, &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli.command, &cfg) {
        Ok(report_path) => {
            println!("report: {}", report_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            report::write_error_record(&cfg.paths.reports, command_name, &e.to_string());
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::BuildData { .. } => "build-data",
        Command::Train { .. } => "train",
        Command::GenEmbedding { .. } => "gen-embedding",
        Command::Define { .. } => "define",
        Command::EvalGre { .. } => "eval-gre",
        Command::EvalSlang { .. } => "eval-slang",
        Command::EvalDefgen { .. } => "eval-defgen",
        Command::MakeFixtures { .. } => "make-fixtures",
    }
}

fn build_overrides(cli: &Cli) -> Overrides {
    let mut over = Overrides {
        seed: cli.seed,
        report_dir: cli.report_dir.clone(),
        ..Overrides::default()
    };
    match &cli.command {
        Command::Train {
            data,
            steps,
            lr,
            batch_size,
            checkpoint_dir,
        } => {
            over.data = data.clone();
            over.steps = *steps;
            over.lr = *lr;
            over.batch_size = *batch_size;
            over.checkpoint_dir = checkpoint_dir.clone();
        }
        Command::EvalGre { k_shot, trials, .. } => {
            over.k_shot = *k_shot;
            over.trials = *trials;
        }
        Command::EvalSlang {
            k_shot,
            n_distractors,
            ..
        } => {
            over.k_shot = *k_shot;
            over.n_distractors = *n_distractors;
        }
        _ => {}
    }
    over
}

fn dispatch(command: &Command, cfg: &AppConfig) -> college::Result<PathBuf> {
    match command {
        Command::BuildData { input, output } => commands::build_data(cfg, input, output.clone()),
        Command::Train { .. } => commands::train(cfg),
        Command::GenEmbedding {
            word_file,
            output,
            provider,
            k_shot,
        } => commands::gen_embedding(cfg, word_file, output, provider, *k_shot),
        Command::Define {
            word_file,
            provider,
            k_shot,
            max_new,
        } => commands::define(cfg, word_file, provider, *k_shot, *max_new),
        Command::EvalGre {
            tasks,
            provider,
            with_definition,
            prompting,
            plot,
            ..
        } => commands::eval_gre(
            cfg,
            tasks,
            provider,
            cfg.harness.k_shot,
            cfg.harness.trials,
            *with_definition,
            *prompting,
            *plot,
        ),
        Command::EvalSlang {
            tasks,
            provider,
            prompting,
            plot,
            ..
        } => commands::eval_slang_cmd(
            cfg,
            tasks,
            provider,
            cfg.harness.k_shot,
            cfg.harness.n_distractors,
            *prompting,
            *plot,
        ),
        Command::EvalDefgen {
            tasks,
            provider,
            max_new,
        } => commands::eval_defgen(cfg, tasks, provider, *max_new),
        Command::MakeFixtures {
            dir,
            concepts,
            pretrain_steps,
        } => commands::make_fixtures(cfg, dir, *concepts, *pretrain_steps),
    }
}
