use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use otmerge::pipeline::{self, PipelineConfig, ToyRunConfig};
use otmerge::verify;
use otmerge::{Error, Result};

/// Cross-architecture model merging by entropic optimal transport.
#[derive(Parser)]
#[command(name = "otmerge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON); gen-toy takes a scenario config instead.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fusion strength in [0, 1].
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Output neurons replaced per module.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Feature-level entropic regularization.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Layer-level entropic regularization.
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flip one mask bit inside the verify suite (negative control).
    #[arg(long, global = true)]
    fault_inject: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve feature-level and layer-level transport plans.
    Plan,
    /// Fuse source weights into the target using saved plans.
    Fuse,
    /// Transport-mass-explained curve of saved feature plans.
    Analyze {
        /// Plan container; defaults to <out_dir>/plans.otmb from the config.
        #[arg(long)]
        plans: Option<PathBuf>,
        /// Comma-separated ranks, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Run the built-in invariant checks on generated instances.
    Verify,
    /// Residual-frozen adaptation of one fused module, then fold.
    Adapt {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write a planted toy source/target pair and a ready pipeline config.
    GenToy,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::MissingInput("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(k) = common.k {
        cfg.top_k = k;
    }
    if let Some(e) = common.epsilon {
        cfg.feature_solver.epsilon = e;
    }
    if let Some(e) = common.eta {
        cfg.layer_solver.epsilon = e;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let common = &cli.common;
    match &cli.command {
        Command::Plan => println!("{}", pipeline::cmd_plan(&load_config(common)?)?.summary()),
        Command::Fuse => println!("{}", pipeline::cmd_fuse(&load_config(common)?)?.summary()),
        Command::Analyze { plans, ks } => {
            let (plans_path, out_dir, cfg_ks) = match plans {
                Some(p) => {
                    let out = common
                        .out
                        .clone()
                        .unwrap_or_else(|| p.parent().map_or_else(PathBuf::new, Path::to_path_buf));
                    (p.clone(), out, None)
                }
                None => {
                    let cfg = load_config(common)?;
                    (cfg.out_dir.join(pipeline::PLANS_FILE), cfg.out_dir, cfg.mass_ks)
                }
            };
            let ks = ks.clone().or(cfg_ks);
            println!("{}", pipeline::cmd_analyze(&plans_path, &out_dir, ks.as_deref())?.summary());
        }
        Command::Verify => {
            let report = verify::run_verify(common.seed.unwrap_or(0), common.fault_inject)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                let path = out.join("verify_report.json");
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            println!("{}", report.summary());
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Adapt { steps, lr } => {
            let mut cfg = load_config(common)?;
            if let Some(s) = steps {
                cfg.adapt.steps = *s;
            }
            if let Some(lr) = lr {
                cfg.adapt.lr = *lr;
            }
            println!("{}", pipeline::cmd_adapt(&cfg)?.summary());
        }
        Command::GenToy => {
            let mut run = match &common.config {
                Some(p) => ToyRunConfig::load(p)?,
                None => ToyRunConfig::default(),
            };
            if let Some(s) = common.seed {
                run.scenario.source.seed = s;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("toy"));
            println!("{}", pipeline::cmd_gen_toy(&run, &out)?.summary());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
