use std::path::PathBuf;
use std::process::ExitCode;

use anchorflow::config::RunConfig;
use anchorflow::pipeline;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anchorflow", version, about = "Anchor-then-complete human motion recovery on synthetic data")]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sample.steps=20`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    GenData,
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Complete the test sequences with the trained networks.
    Infer,
    /// Evaluate predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Metrics against sampling steps and guidance scale.
    AblateSteps,
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Scale the analytic gradient of one component (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load(cli: &Cli) -> anchorflow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anchorflow::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anchorflow::Result<bool> {
    let cfg = load(&cli)?;
    match cli.command {
        Command::GenData => {
            let (train, test) = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train { stage } => {
            let out = pipeline::cmd_train(&cfg, stage)?;
            if let (Some(first), Some(last)) = (out.curve.first(), out.curve.last()) {
                println!("stage {stage}: loss {:.4} -> {:.4} over {} epochs", first.total, last.total, out.curve.len());
            }
            println!("wrote {} and {}", out.checkpoint.display(), out.loss_csv.display());
        }
        Command::Infer => {
            let path = pipeline::cmd_infer(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { pred, gt } => {
            let pred = pred.unwrap_or_else(|| cfg.pred_path.clone());
            let gt = gt.unwrap_or_else(|| cfg.test_path.clone());
            let s = pipeline::cmd_eval(&cfg, &pred, &gt)?;
            let a = &s.aggregate;
            println!(
                "MPJPE {:.1}  PA-MPJPE {:.1}  PVE {:.1}  non-torso {:.1}  WA {:.1}  W {:.1}  jitter {:.2}  foot sliding {:.1}",
                a.mpjpe, a.pa_mpjpe, a.pve, a.non_torso_mpjpe, a.wa_mpjpe, a.w_mpjpe, a.jitter, a.foot_sliding
            );
            println!(
                "anchor mean {:.2}  distal mean {:.2}  gap {:.2}",
                a.regional.anchor_mean, a.regional.distal_mean, a.regional.gap
            );
            println!("wrote {}", cfg.out_dir.join("eval.csv").display());
        }
        Command::AblateSteps => {
            let out = pipeline::cmd_ablate_steps(&cfg)?;
            for r in out.steps.iter().chain(&out.cfg) {
                println!("steps {:>4}  cfg {:.2}  non-torso MPJPE {:.2}", r.steps, r.cfg_scale, r.non_torso_mpjpe);
            }
        }
        Command::Gradcheck { corrupt } => {
            let out = pipeline::cmd_gradcheck(&cfg, corrupt)?;
            for c in &out.report.components {
                println!(
                    "{:<20} {:>4} probes  max rel err {:.2e}  {}",
                    c.component,
                    c.probes,
                    c.max_rel_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            return Ok(out.report.passed);
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
