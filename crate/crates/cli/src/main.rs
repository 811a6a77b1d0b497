use std::io::{self, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrfibp_cli::commands::{self, AdaptArgs, ReidArgs, SearchArgs, SynthArgs, TrainArgs};
use mrfibp_cli::{server, CliError, CliResult};

#[derive(Parser)]
#[command(name = "mrfibp", version, about = "Latent attribute training, adaptation, re-id and search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train appearance factors on annotated auxiliary data.
    Train(TrainArgs),
    /// Adapt a source checkpoint to an unlabeled target set.
    Adapt(AdaptArgs),
    /// Match probe against gallery descriptors and print a CMC table.
    Reid(ReidArgs),
    /// Rank indexed images by an attribute query.
    Search(SearchArgs),
    /// Serve the search index over HTTP.
    Serve {
        #[arg(long)]
        index: PathBuf,
        /// Checkpoint whose factor names must match the index.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Generate a synthetic source/target pair with ground truth.
    Synth(SynthArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Train(a) => commands::train(&a, &mut stdout).map(drop),
        Command::Adapt(a) => commands::adapt(&a, &mut stdout).map(drop),
        Command::Reid(a) => commands::reid(&a, &mut stdout).map(drop),
        Command::Search(a) => commands::search(&a, &mut stdout).map(drop),
        Command::Synth(a) => commands::synth(&a),
        Command::Serve { index, ckpt, addr } => {
            let index = commands::load_index(&index)?;
            if let Some(path) = ckpt {
                let model = mrfibp::data::load_model(&path)?;
                if model.factor_names != index.factor_names {
                    return Err(CliError::new(
                        "E_VOCABULARY",
                        format!("{} factor names differ from the index", path.display()),
                    ));
                }
            }
            drop(stdout);
            server::serve(index, &addr)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info,tower_http=debug".into()),
        )
        .with_ansi(io::stderr().is_terminal())
        .with_writer(io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::usage(e.kind().to_string()).line());
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
