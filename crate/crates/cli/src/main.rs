mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use settings::{Overrides, Settings};

#[derive(Parser, Debug)]
#[command(name = "mpq", version, about = "Mixed-precision quantization of neural language models")]
struct Cli {
    /// Settings file with one key=value per line.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic sample corpus to --out.
    SampleCorpus,
    /// Train a full-precision model; writes the vocabulary and a checkpoint.
    Train,
    /// Quantize a checkpoint to one bit-width for every cluster.
    QuantizeUniform {
        /// admm | modbp | offline
        #[arg(long)]
        method: Option<String>,
    },
    /// Measure per-cluster quantization sensitivity.
    Sensitivity {
        /// kl | hes
        #[arg(long)]
        method: Option<String>,
    },
    /// Solve for a precision assignment under an average-bits budget.
    Assign,
    /// Search a precision assignment with the supernet.
    Nas,
    /// Build and fine-tune the mixed-precision model of an assignment.
    Finetune,
    /// Perplexity, size and timing of a packed model or checkpoint.
    Eval,
    /// Print the header and per-cluster table of a model file.
    Inspect,
    /// Print the resolved settings.
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=config msg={first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> mpq_core::Result<()> {
    let mut pairs = cli.overrides.pairs();
    match &cli.command {
        Command::QuantizeUniform { method: Some(m) } => pairs.push(("quant_method", m.clone())),
        Command::Sensitivity { method: Some(m) } => pairs.push(("sens_method", m.clone())),
        _ => {}
    }
    let s = Settings::resolve(cli.config.as_deref(), &pairs)?;
    match cli.command {
        Command::SampleCorpus => commands::sample_corpus(&s),
        Command::Train => commands::train(&s),
        Command::QuantizeUniform { .. } => commands::quantize_uniform(&s),
        Command::Sensitivity { .. } => commands::sensitivity(&s),
        Command::Assign => commands::assign(&s),
        Command::Nas => commands::nas(&s),
        Command::Finetune => commands::finetune(&s),
        Command::Eval => commands::eval(&s),
        Command::Inspect => commands::inspect(&s),
        Command::Config => {
            print!("{}", s.to_text());
            Ok(())
        }
    }
}
