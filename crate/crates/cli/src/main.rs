mod alloc;
mod commands;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[global_allocator]
static ALLOC: alloc::Counting = alloc::Counting;

/// Experiments, verification probes and benchmarks for the ⵟ kernel.
#[derive(Parser, Debug, Serialize)]
#[command(name = "yatk", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Kernel ε (defaults depend on the subcommand).
    #[arg(long, global = true, value_parser = positive_f64)]
    pub eps: Option<f64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the linear algebra and probe pool.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Run every kernel probe and write line-delimited reports.
    Verify(commands::VerifyArgs),
    /// XOR with a single unit: exact table, training, decision grid.
    Xor(commands::XorArgs),
    /// 10-prototype MNIST classifier against a linear baseline.
    Mnist(commands::MnistArgs),
    /// Character-level language model on a text corpus.
    Lm(commands::LmArgs),
    /// FLOP tables and timings of the batched kernel against dense + GeLU.
    Bench(commands::BenchArgs),
    /// Class responses of a prototype set on a 2-D grid.
    Boundary(commands::BoundaryArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not a positive finite number")),
        Err(e) => Err(e.to_string()),
    }
}

/// Failure classes mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or missing inputs: exit 2.
    Usage(String),
    /// A probe or experiment ran and did not meet its criterion: exit 1.
    Check(String),
    /// Anything else that stopped the run: exit 1.
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

/// Writes `config.txt` with one `key=value` line per resolved setting.
fn write_config(cli: &Cli, dir: &Path) -> anyhow::Result<()> {
    let value = serde_json::to_value(cli)?;
    let mut lines = Vec::new();
    // the two top-level groups have disjoint keys, so they are not prefixed
    if let serde_json::Value::Object(groups) = &value {
        for v in groups.values() {
            flatten("", v, &mut lines);
        }
    }
    fs::write(dir.join("config.txt"), lines.join("\n") + "\n")?;
    Ok(())
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        serde_json::Value::String(s) => out.push(format!("{prefix}={s}")),
        serde_json::Value::Null => out.push(format!("{prefix}=")),
        other => out.push(format!("{prefix}={other}")),
    }
}

fn run(cli: &Cli) -> Outcome {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads as usize)
        .build_global()
        .map_err(|e| Failure::Run(e.into()))?;
    fs::create_dir_all(&cli.common.out)?;
    write_config(cli, &cli.common.out)?;
    match &cli.command {
        Command::Verify(a) => commands::verify(&cli.common, a),
        Command::Xor(a) => commands::xor(&cli.common, a),
        Command::Mnist(a) => commands::mnist(&cli.common, a),
        Command::Lm(a) => commands::lm(&cli.common, a),
        Command::Bench(a) => commands::bench(&cli.common, a),
        Command::Boundary(a) => commands::boundary(&cli.common, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
