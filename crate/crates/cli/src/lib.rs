pub mod commands;
pub mod config;

use std::path::PathBuf;

use posegraph::error::{Error, Result};

use config::Config;

pub struct RunArgs {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<(String, String)>,
}

pub const USAGE: &str = "\
usage: posegraph <gen|train|eval|infer|selftest> [options]

options:
  --config PATH        INI config file (sections [gen] [detector] [spatial]
                       [train] [eval] [infer]; flags override the file)
  --out DIR            output directory (default: out)
  --seed N             RNG seed (overrides config `seed`)
  --set key=value      override one config key (repeatable)

environment:
  POSEGRAPH_THREADS    worker threads for batch gradients (default 1;
                       keep 1 for bit-reproducible runs across machines)
";

pub fn parse_args(argv: &[String]) -> Result<RunArgs> {
    let mut it = argv.iter();
    let command = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("missing command".into()))?
        .clone();
    let mut args = RunArgs {
        command,
        config_path: None,
        out: PathBuf::from("out"),
        seed: None,
        overrides: Vec::new(),
    };
    while let Some(flag) = it.next() {
        let mut value = |name: &str| -> Result<String> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => args.config_path = Some(PathBuf::from(value("--config")?)),
            "--out" => args.out = PathBuf::from(value("--out")?),
            "--seed" => {
                args.seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|_| Error::InvalidArgument("--seed: expected an integer".into()))?,
                )
            }
            "--set" => {
                let kv = value("--set")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument("--set expects key=value".into()))?;
                args.overrides.push((k.to_string(), v.to_string()));
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown flag {other}")));
            }
        }
    }
    Ok(args)
}

pub fn effective_config(args: &RunArgs) -> Result<Config> {
    let mut cfg = Config::defaults();
    if let Some(path) = &args.config_path {
        cfg.load_file(path)?;
    }
    for (k, v) in &args.overrides {
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

pub fn threads_from_env() -> usize {
    std::env::var("POSEGRAPH_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Dispatch; returns the process exit code.
pub fn run(args: &RunArgs) -> i32 {
    let result = (|| -> Result<i32> {
        match args.command.as_str() {
            "selftest" => {
                let ok = commands::cmd_selftest()?;
                Ok(if ok { 0 } else { 1 })
            }
            "gen" => {
                let cfg = effective_config(args)?;
                commands::cmd_gen(&cfg, &args.out)?;
                Ok(0)
            }
            "train" => {
                let cfg = effective_config(args)?;
                commands::cmd_train(&cfg, &args.out, threads_from_env())?;
                Ok(0)
            }
            "eval" => {
                let cfg = effective_config(args)?;
                commands::cmd_eval(&cfg, &args.out)?;
                Ok(0)
            }
            "infer" => {
                let cfg = effective_config(args)?;
                commands::cmd_infer(&cfg, &args.out)?;
                Ok(0)
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown command `{other}`\n{USAGE}"
            ))),
        }
    })();
    match result {
        Ok(code) => code,
        Err(Error::Diverged { stage, epoch }) => {
            eprintln!("error: training diverged at stage {stage}, epoch {epoch}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
