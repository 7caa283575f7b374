use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use emt_core::commands;
use emt_core::config::RunConfig;
use emt_core::Error;

#[derive(Parser)]
#[command(name = "emt", version, about = "Efficient multimodal transformer with feature restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base preset: mosi, desk or tiny (default: the file's preset, else desk).
    #[arg(long)]
    preset: Option<String>,
    /// Override a field, e.g. `--set train.lambda1=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: the config's output_dir).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and report test metrics.
    Train(Common),
    /// Evaluate over missing rates and integrate the curves.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// MAC and parameter tables for the fusion strategies.
    Bench(Common),
    /// Finite-difference check of the training objective.
    Gradcheck(Common),
    /// Write attention weights of one sample as CSV.
    DumpAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: Option<usize>,
        /// Missing rate of the dumped view; 0 is the complete view.
        #[arg(long)]
        rate: Option<f64>,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<(RunConfig, PathBuf), Error> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    let cfg = RunConfig::resolve(common.config.as_deref(), common.preset.as_deref(), &overrides)?;
    let out = commands::output_dir(&cfg, common.out.clone());
    Ok((cfg, out))
}

fn quoted(path: &std::path::Path) -> String {
    serde_json::to_string(&path.display().to_string()).unwrap_or_default()
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = resolve(&common, vec![])?;
            let s = commands::cmd_train(&cfg, &out)?;
            Ok(json!({ "command": "train", "output_dir": out, "mean": s.mean }))
        }
        Command::Sweep { common, checkpoint } => {
            let extra = checkpoint.map(|p| format!("sweep.checkpoint={}", quoted(&p))).into_iter().collect();
            let (cfg, out) = resolve(&common, extra)?;
            let s = commands::cmd_sweep(&cfg, &out)?;
            Ok(json!({ "command": "sweep", "output_dir": out, "mean_auilc": s.mean_auilc }))
        }
        Command::Bench(common) => {
            let (cfg, out) = resolve(&common, vec![])?;
            let r = commands::cmd_bench(&cfg, &out)?;
            let rows: Vec<_> = r
                .rows
                .iter()
                .map(|row| json!({ "strategy": row.strategy, "macs": row.analytic_macs, "params": row.params.total }))
                .collect();
            Ok(json!({ "command": "bench", "output_dir": out, "rows": rows }))
        }
        Command::Gradcheck(common) => {
            let (cfg, out) = resolve(&common, vec![])?;
            let r = commands::cmd_gradcheck(&cfg, &out)?;
            Ok(json!({ "command": "gradcheck", "passed": r.passed, "max_rel_error": r.max_rel_error }))
        }
        Command::DumpAttn {
            common,
            checkpoint,
            sample,
            rate,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = checkpoint {
                extra.push(format!("dump.checkpoint={}", quoted(&p)));
            }
            if let Some(s) = sample {
                extra.push(format!("dump.sample={s}"));
            }
            if let Some(r) = rate {
                extra.push(format!("dump.missing_rate={r:?}"));
            }
            let (cfg, out) = resolve(&common, extra)?;
            let listing = commands::cmd_dump_attention(&cfg, &out)?;
            Ok(json!({ "command": "dump-attn", "output_dir": out, "matrices": listing.len() }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            if e.kind() == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
