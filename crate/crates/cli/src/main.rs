//! `saliencydecor` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or contract error, 3 numerical
//! abort during training, 4 IO failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};

use config::{RunConfig, KEYS};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    /// Bad value or unknown key; the message names the key.
    pub fn config(key: &str, msg: impl fmt::Display) -> Self {
        CliError::new(2, format!("config key '{key}': {msg}"))
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        CliError::new(4, format!("{}: {err}", path.display()))
    }
}

impl From<saliencydecor::Error> for CliError {
    fn from(e: saliencydecor::Error) -> Self {
        use saliencydecor::Error as E;
        let code = match e {
            E::Numerical(_) => 3,
            E::Io(_) => 4,
            E::Shape { .. } | E::Contract(_) | E::Format { .. } | E::Uninitialized(_) => 2,
        };
        CliError::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let keys = KEYS.iter().map(|(key, default, help)| {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        Arg::new(*key).long(*key).value_name("VALUE").help(help)
    });
    Command::new(name)
        .about(about)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("key = value configuration file; flags override it"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .required(true)
                .value_parser(value_parser!(PathBuf))
                .help("output directory"),
        )
        .args(keys)
}

fn cli() -> Command {
    Command::new("saliencydecor")
        .about("Saliency-guided training with group-wise ZCA feature decorrelation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand("train", "Train one model and write a checkpoint and step log"))
        .subcommand(subcommand(
            "evaluate",
            "Masking curves, AUC and gradient statistics for one or more checkpoints",
        ))
        .subcommand(subcommand("explain", "Export saliency maps of selected test samples"))
        .subcommand(subcommand("diagnose", "Effective rank of encoder features before and after whitening"))
        .subcommand(subcommand(
            "sweep",
            "Train and evaluate once per value of a comma-separated rho or lambda list",
        ))
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for (key, _, _) in KEYS {
        if let Some(value) = matches.get_one::<String>(key) {
            cfg.set(key, value)?;
        }
    }
    cfg.resolve_data_dir();
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = resolve(sub)?;
    let out = sub.get_one::<PathBuf>("out").expect("required").clone();
    match name {
        "train" => commands::train(&cfg, &out),
        "evaluate" => commands::evaluate(&cfg, &out),
        "explain" => commands::explain(&cfg, &out),
        "diagnose" => commands::diagnose(&cfg, &out),
        "sweep" => commands::sweep(&cfg, &out),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
