//! `tabhop` — retrieval-augmented question answering over linked tables and
//! text, from the command line.
//!
//! Exit codes: 0 on success (a run with some failed questions still counts),
//! 2 for usage or configuration problems, 3 when every selected question
//! failed.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tabhop_core::corpus::Split;
use tabhop_core::error::Error;
use tabhop_core::evaluate::aggregate_line;
use tabhop_core::ingest::{ingest_to_dir, RawFormat};
use tabhop_core::runner::{self, load_config};

#[derive(Parser)]
#[command(name = "tabhop", version, about = "Multi-hop question answering over tables and linked text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset dump into canonical corpus files.
    Ingest {
        /// Source layout: "hybridqa" or "ottqa-dev".
        #[arg(long)]
        format: String,
        /// Directory holding tables.json, passages.json, questions.json.
        #[arg(long)]
        input: PathBuf,
        /// Corpus name recorded in the output.
        #[arg(long)]
        name: String,
        /// Split for questions that don't carry one: train, dev, or test.
        #[arg(long, default_value = "dev")]
        split: String,
        /// Where the canonical files are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute (or resume) a run described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Answer at most N questions (seeded random subset of the corpus).
        #[arg(long)]
        limit: Option<usize>,
        /// Answer exactly these question ids (comma-separated).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score an existing run directory from its persisted traces.
    Eval {
        run_dir: PathBuf,
    },
    /// Run several configs over one corpus and compare them to the first.
    Ablate {
        /// Config files; the first is the baseline.
        configs: Vec<PathBuf>,
        /// Directory for the comparison table files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one question's full pipeline record from a run directory.
    Trace {
        run_dir: PathBuf,
        question_id: String,
    },
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidConfig(format!(
            "unknown split {other:?} (expected train, dev, or test)"
        ))),
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Ingest {
            format,
            input,
            name,
            split,
            out,
        } => {
            let format = RawFormat::parse(&format)?;
            let split = parse_split(&split)?;
            let report = ingest_to_dir(format, &input, &out, &name, split)?;
            println!(
                "ingested {} tables / {} passages / {} questions into {}",
                report.tables,
                report.passages,
                report.questions,
                out.display()
            );
            if !report.dropped_links.is_empty() {
                println!("dropped {} dangling link(s):", report.dropped_links.len());
                for link in &report.dropped_links {
                    println!(
                        "  table {} row {} col {} -> {}",
                        link.table_id, link.row_index, link.column_index, link.link_id
                    );
                }
            }
            Ok(())
        }
        Command::Run {
            config,
            limit,
            ids,
            out,
        } => {
            let mut config = load_config(&config)?;
            if let Some(limit) = limit {
                config.limit = Some(limit);
            }
            if !ids.is_empty() {
                config.ids = ids;
            }
            if let Some(out) = out {
                config.out_dir = out;
            }
            let outcome = runner::cmd_run(&config)?;
            println!(
                "{} ok / {} failed / {} already done → {}",
                outcome.ok,
                outcome.failed,
                outcome.skipped,
                outcome.out_dir.display()
            );
            println!("{}", aggregate_line(&outcome.report.aggregates));
            Ok(())
        }
        Command::Eval { run_dir } => {
            let report = runner::cmd_eval(&run_dir)?;
            println!("{}", aggregate_line(&report.aggregates));
            Ok(())
        }
        Command::Ablate { configs, out } => {
            let (_, text) = runner::cmd_ablate(&configs, out.as_deref())?;
            print!("{text}");
            Ok(())
        }
        Command::Trace {
            run_dir,
            question_id,
        } => {
            let text = runner::cmd_trace(&run_dir, &question_id)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::TotalFailure { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
