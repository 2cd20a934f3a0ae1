//! Command-line entry point.
//!
//! ```text
//! disent run [--config FILE] [--KEY VALUE ...]
//! disent evaluate --checkpoint FILE [--config FILE] [--KEY VALUE ...]
//! ```
//!
//! Any configuration key doubles as a flag (`--training.lambda 0.1`); flags
//! override values from the file. Exit codes: 0 success, 1 configuration
//! error, 2 runtime divergence, 3 i/o error.

use disent::config::ExperimentConfig;
use disent::error::{Error, Result};
use disent::experiment;
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
disent - controllable latent features on gridworlds

USAGE:
    disent run [--config FILE] [--KEY VALUE ...]
    disent evaluate --checkpoint FILE [--config FILE] [--KEY VALUE ...]
    disent help

Any config key can be passed as a flag and overrides the file, e.g.
    disent run --config basic.cfg --training.lambda 0.2 --output_dir out/run1

Keys and defaults are listed by `disent help-keys`. Exit codes:
0 success, 1 config error, 2 runtime divergence, 3 i/o error.
";

struct CliArgs {
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> Result<CliArgs> {
    let mut out = CliArgs {
        config: None,
        checkpoint: None,
        overrides: Vec::new(),
    };
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --flag, got `{arg}`")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("flag `--{key}` needs a value")))?;
        match key {
            "config" => out.config = Some(PathBuf::from(value)),
            "checkpoint" => out.checkpoint = Some(PathBuf::from(value)),
            _ => out.overrides.push((key.to_string(), value.to_string())),
        }
        i += 2;
    }
    Ok(out)
}

fn load_config(cli: &CliArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    Ok(cfg)
}

fn cmd_run(cli: &CliArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let result = experiment::run(&cfg)?;
    print!("{}", result.summary);
    println!("artifacts written to {}", result.output_dir.display());
    Ok(())
}

fn cmd_evaluate(cli: &CliArgs) -> Result<()> {
    let ckpt = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint FILE".into()))?;
    let cfg = load_config(cli)?;
    let bundle = experiment::evaluate(&cfg, ckpt)?;
    println!(
        "evaluated {} over {} probe states, recon_mse={}",
        ckpt.display(),
        bundle.probe_set_size,
        bundle.recon_mse
    );
    println!("metrics written to {}", cfg.output_dir.display());
    Ok(())
}

fn print_keys() {
    print!("{}", ExperimentConfig::default().snapshot());
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (cmd, rest) = match args.split_first() {
        Some((cmd, rest)) => (cmd.as_str(), rest),
        None => {
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    let outcome = match cmd {
        "run" => parse_args(rest).and_then(|cli| cmd_run(&cli)),
        "evaluate" => parse_args(rest).and_then(|cli| cmd_evaluate(&cli)),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        "help-keys" => {
            print_keys();
            Ok(())
        }
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
