mod args;
mod commands;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;
use log::{error, info};

use args::{config_args, echo, Cli, Command};

const SUBCOMMANDS: [&str; 7] = ["simulate", "separate", "prepare", "train", "infer", "evaluate", "gradcheck"];

pub enum CliError {
    Usage(String),
    Numeric(String),
    Core(lgmsep::Error),
}

impl From<lgmsep::Error> for CliError {
    fn from(e: lgmsep::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        use lgmsep::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                E::InputTooShort { .. } | E::Shape(_) | E::InvalidArgument(_) | E::NeedMultichannel | E::EmptyDataset(_) => 2,
                E::NonFinite { .. } | E::Degenerate(_) => 3,
                E::Checkpoint(_) | E::Io(_) | E::Wav(_) | E::Json(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Value of `--config` in raw arguments, if any.
fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Splices the config file's flags right after the subcommand, so that
/// anything given on the command line comes later and wins.
fn merged_args(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else { return Ok(argv) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let extra = config_args(&text).map_err(CliError::Usage)?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn run() -> Result<(), CliError> {
    let argv = merged_args(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => Ok(()),
                _ => Err(CliError::Usage(String::new())),
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let echo = echo(&cli.command);
    info!("{} with\n{}", cli.command.name(), echo.trim_end());
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &echo),
        Command::Separate(a) => commands::separate(a, &echo),
        Command::Prepare(a) => commands::prepare(a, &echo),
        Command::Train(a) => commands::train_cmd(a, &echo),
        Command::Infer(a) => commands::infer(a, &echo),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string();
            if !msg.is_empty() {
                error!("{msg}");
            }
            ExitCode::from(e.code())
        }
    }
}
