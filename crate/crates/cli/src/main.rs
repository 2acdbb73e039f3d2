use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kedit_cli::config::RunConfig;
use kedit_cli::error::Result;
use kedit_cli::pipeline;
use kedit_core::dke::EditorKind;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kedit", version, about = "Knowledge-editing lab on a toy transformer")]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set lm.train.epochs=40`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; beats the config file and KEDIT_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

fn parse_editor(s: &str) -> std::result::Result<EditorKind, String> {
    s.parse::<EditorKind>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world, subject plans and CounterFact-style records.
    GenData,
    /// Train the language model on the world's facts.
    TrainLm {
        #[arg(long)]
        force: bool,
        /// Continue from the saved checkpoint and optimizer state.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Train the disentangler on the trained model's representations.
    TrainKrd {
        #[arg(long)]
        force: bool,
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Apply every editor to every record and store the updates.
    Edit {
        /// Editors to run (dike, memit, memit-constrained); config list when omitted.
        #[arg(long = "editor", value_parser = parse_editor)]
        editors: Vec<EditorKind>,
        /// Replace W3 by zero, which reduces the DiKE update to MEMIT.
        #[arg(long)]
        zero_w3: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score stored edits and write the report tables.
    Eval {
        #[arg(long = "editor", value_parser = parse_editor)]
        editors: Vec<EditorKind>,
    },
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn pick(editors: Vec<EditorKind>, cfg: &RunConfig) -> Vec<EditorKind> {
    if editors.is_empty() {
        cfg.eval.editors.clone()
    } else {
        editors
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.out.as_deref())?;
    match cli.command {
        Command::GenData => print(&pipeline::gen_data(&cfg)?),
        Command::TrainLm { force, resume } => print(&pipeline::train_lm(&cfg, force, resume)?),
        Command::TrainKrd { force, resume } => print(&pipeline::train_krd(&cfg, force, resume)?),
        Command::Edit {
            editors,
            zero_w3,
            force,
        } => {
            let editors = pick(editors, &cfg);
            print(&pipeline::edit(&cfg, &editors, zero_w3, force)?)
        }
        Command::Eval { editors } => {
            let editors = pick(editors, &cfg);
            let summary = pipeline::eval(&cfg, &editors)?;
            print(&summary.rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
