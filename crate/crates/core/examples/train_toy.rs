//! Train both stages on the default synthetic set and compare sampled
//! completions with the zero-pose reference on the held-out split.
//!
//! ```text
//! cargo run --release --example train_toy [stage1_epochs] [stage2_epochs]
//! ```

use std::time::Instant;

use anchorflow::config::RunConfig;
use anchorflow::flowmatch::LatentCodec;
use anchorflow::losses::LossContext;
use anchorflow::metrics::aggregate;
use anchorflow::nn::train::{record_anchor, train_stage1, train_stage2, zero_pose_motion, AnchorSource};
use anchorflow::pipeline::{evaluate_records, predict_records, Models};
use anchorflow::seed::{derive_seed, rng_for};
use anchorflow::synthdata::generate_dataset;

fn main() -> anchorflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut cfg = RunConfig::default();
    cfg.stage1_epochs = args.first().copied().unwrap_or(cfg.stage1_epochs);
    cfg.stage2_epochs = args.get(1).copied().unwrap_or(cfg.stage2_epochs);
    let (ctx, codec) = (LossContext::default(), LatentCodec::default());
    let root = derive_seed(cfg.seed, "data");
    let train = generate_dataset(root, "train", cfg.n_train, &cfg.motion_spec())?;
    let test = generate_dataset(root, "test", cfg.n_test, &cfg.motion_spec())?;

    let clock = Instant::now();
    let (anchor, c1) = train_stage1(&train, &cfg.train_config(1), &ctx, &codec, &mut rng_for(cfg.seed, "train.stage1"))?;
    let (first, last) = (&c1[0], &c1[c1.len() - 1]);
    println!("stage 1: {:.4} -> {:.4} in {:.0} s", first.total, last.total, clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let mut rng = rng_for(cfg.seed, "train.stage2");
    let (net, c2) = train_stage2(&train, AnchorSource::Stage1(&anchor), cfg.head, &cfg.train_config(2), &ctx, &codec, &mut rng)?;
    let (first, last) = (&c2[0], &c2[c2.len() - 1]);
    println!("stage 2: {:.4} -> {:.4} in {:.0} s", first.total, last.total, clock.elapsed().as_secs_f64());
    for (name, v) in &first.terms {
        println!("  {name:<14} {v:>9.4} -> {:>9.4}", last.terms[name]);
    }

    let models = Models {
        anchor: Some(anchor),
        completion: net,
    };
    let preds = predict_records(&models, &test, &cfg.sampler, cfg.seed)?;
    let model = aggregate(&evaluate_records(&preds, &test, &cfg.metrics)?)?;
    let zero = test
        .iter()
        .map(|r| Ok(zero_pose_motion(&record_anchor(r, AnchorSource::Stage1(models.anchor.as_ref().unwrap()), &ctx)?, &codec, r.gt.fps)))
        .collect::<anchorflow::Result<Vec<_>>>()?;
    let base = aggregate(&evaluate_records(&zero, &test, &cfg.metrics)?)?;
    println!(
        "non-torso MPJPE: sampled {:.1} mm, zero pose {:.1} mm, ratio {:.3}",
        model.non_torso_mpjpe,
        base.non_torso_mpjpe,
        model.non_torso_mpjpe / base.non_torso_mpjpe
    );
    Ok(())
}
