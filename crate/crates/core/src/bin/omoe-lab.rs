use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use omoe_core::checkpoint::{load_model, save_model};
use omoe_core::error::{LabError, Result};
use omoe_core::harness::{self, ExperimentConfig};
use omoe_core::metrics;
use omoe_core::optim::OptimizerKind;

#[derive(Parser)]
#[command(name = "omoe-lab", version, about = "Orthogonal MoE optimizer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for reports and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Dotted-path override such as `omoe.s=10`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write report.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write one model checkpoint per seed.
        #[arg(long)]
        save_models: bool,
    },
    /// One run per skipping step.
    AblateSkip {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
        s_values: Vec<u64>,
    },
    /// Baseline and orthogonal runs per expert count.
    AblateExperts {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        m_values: Vec<usize>,
    },
    /// Paired baseline and orthogonal runs per base optimizer.
    CompareOptimizers {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "adamw,rmsprop,adagrad")]
        kinds: Vec<String>,
    },
    /// Closed-form compute and memory overhead for the configured shapes.
    Overhead {
        #[command(flatten)]
        common: Common,
    },
    /// Diversity metrics for two model checkpoints.
    Metrics {
        /// Checkpoint trained with the orthogonal optimizer.
        #[arg(long)]
        omoe: PathBuf,
        /// Checkpoint trained with the base optimizer.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| LabError::config("--config", format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| LabError::config("<root>", e.to_string()))?
        }
        None => ExperimentConfig::default().to_value(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seeds) = &common.seeds {
        overrides.push(format!("seeds={}", serde_json::to_string(seeds)?));
    }
    ExperimentConfig::with_overrides(base, &overrides)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Option<PathBuf> {
    common.out.clone().or_else(|| cfg.output.clone())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, name: &str, value: &T) -> Result<()> {
    match out {
        Some(dir) => {
            write_json(dir, name, value)?;
            println!("{}", json!({ "status": "ok", "written": dir.join(name) }));
        }
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, save_models } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let outcome = harness::run(&cfg)?;
            if let Some(dir) = &out {
                write_json(dir, "timing.json", &outcome.timings)?;
                if save_models {
                    for (run, model) in outcome.report.runs.iter().zip(&outcome.models) {
                        save_model(model, &dir.join(format!("model_seed{}.json", run.seed)))?;
                    }
                }
            }
            emit(out.as_deref(), "report.json", &outcome.report)
        }
        Command::AblateSkip { common, s_values } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            emit(out.as_deref(), "ablate_skip.json", &harness::ablate_skip(&cfg, &s_values)?)
        }
        Command::AblateExperts { common, m_values } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            emit(out.as_deref(), "ablate_experts.json", &harness::ablate_experts(&cfg, &m_values)?)
        }
        Command::CompareOptimizers { common, kinds } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let parsed = kinds
                .iter()
                .filter(|k| !k.trim().is_empty())
                .map(|k| {
                    OptimizerKind::parse(k.trim())
                        .ok_or_else(|| LabError::config("--kinds", format!("unknown optimizer `{k}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = harness::compare_optimizers(&cfg, &parsed, &BTreeMap::new())?;
            emit(out.as_deref(), "compare_optimizers.json", &table)
        }
        Command::Overhead { common } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, &cfg);
            let (d_raw, c) = harness::task_shape(&cfg)?;
            emit(out.as_deref(), "overhead.json", &harness::overhead_report(&cfg, d_raw, c)?)
        }
        Command::Metrics { omoe, base, out } => {
            let a = load_model(&omoe)?;
            let b = load_model(&base)?;
            let pa = metrics::expert_params(&a);
            let pb = metrics::expert_params(&b);
            let detail = metrics::diverse_degree_params(&pa, &pb)?;
            let report = json!({
                "omoe": {
                    "param_variance": metrics::expert_param_variance(&pa)?,
                    "similar_fraction": metrics::mean_pairwise_similarity(&pa, metrics::SIMILARITY_THRESHOLD)?,
                },
                "base": {
                    "param_variance": metrics::expert_param_variance(&pb)?,
                    "similar_fraction": metrics::mean_pairwise_similarity(&pb, metrics::SIMILARITY_THRESHOLD)?,
                },
                "diverse_degree": detail,
            });
            emit(out.as_deref(), "metrics.json", &report)
        }
    }
}

fn error_object(err: &LabError) -> Value {
    let mut obj = json!({ "error": err.kind(), "message": err.to_string() });
    if let LabError::Config { path, .. } = err {
        obj["path"] = Value::String(path.clone());
    }
    obj
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_object(&err));
            ExitCode::from(if err.is_config() { 2 } else { 3 })
        }
    }
}
