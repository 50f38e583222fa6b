//! Sweep sampling steps and guidance scale with checkpoints produced by the
//! command-line tool.
//!
//! ```text
//! anchorflow gen-data && anchorflow train --stage 1 && anchorflow train --stage 2
//! cargo run --release --example step_ablation [config]
//! ```

use anchorflow::config::RunConfig;
use anchorflow::pipeline::cmd_ablate_steps;

fn main() -> anchorflow::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let out = cmd_ablate_steps(&cfg)?;
    println!("steps  cfg   non-torso MPJPE (mm)");
    for r in out.steps.iter().chain(&out.cfg) {
        println!("{:>5}  {:.2}  {:.2}", r.steps, r.cfg_scale, r.non_torso_mpjpe);
    }
    Ok(())
}
