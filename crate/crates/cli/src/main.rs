use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Desk-scale LayerNorm placement experiments for multilingual zero-shot
/// translation.
#[derive(Parser, Debug)]
#[command(name = "zeronorm", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML file with [corpus], [model], [training], [decode], [probe] and
    /// [analysis] tables plus `rows`, `seeds` and `out`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model and training seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus seed (overrides the config).
    #[arg(long, global = true)]
    corpus_seed: Option<u64>,
    /// Concurrent experiment cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus as TSV files.
    GenData,
    /// Train one model from the [model] and [training] tables.
    Train,
    /// Translate whitespace-tokenized lines from a file or stdin.
    Translate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Go through English instead of translating directly.
        #[arg(long)]
        pivot: bool,
    },
    /// Score every test direction; writes `src,tgt,zero_shot,bleu,off_target,p_value`.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus directory written by `gen-data`; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Second model for per-direction bootstrap p-values.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Layer-wise language recognition probes; writes `layer,kind,split,accuracy`.
    ProbeLlr {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Encoder layer-wise SVCCA between en-xx and xx-en.
    ProbeSvcca {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Enumerate the sub-network paths of the unraveled encoder.
    Unravel {
        #[arg(long, value_enum)]
        placement: Option<Placement>,
        #[arg(long)]
        layers: Option<usize>,
        /// Encoder layer whose self-attention residual is removed.
        #[arg(long)]
        ablate: Option<usize>,
    },
    /// Run the whole setting matrix.
    Experiment,
    /// Re-render tables and plots from `report.json`.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Placement {
    Post,
    Pre,
    Swap,
    PreWoEncLast,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                commands::exit_config()
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
