//! Train the flow head and a direct regression head of the same size on the
//! same data, then compare how much each degrades when half the keypoints
//! are dropped at evaluation.
//!
//! ```text
//! cargo run --release --example occlusion [seeds]
//! ```

use anchorflow::config::RunConfig;
use anchorflow::flowmatch::LatentCodec;
use anchorflow::losses::LossContext;
use anchorflow::metrics::aggregate;
use anchorflow::nn::train::{train_stage1, train_stage2, AnchorSource};
use anchorflow::nn::HeadKind;
use anchorflow::pipeline::{evaluate_records, predict_records, Models};
use anchorflow::seed::{derive_seed, rng_for};
use anchorflow::synthdata::generate_dataset;

fn main() -> anchorflow::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let cfg = RunConfig::default();
    let (ctx, codec) = (LossContext::default(), LatentCodec::default());
    let train = generate_dataset(derive_seed(cfg.seed, "data"), "train", cfg.n_train, &cfg.motion_spec())?;

    let (anchor, _) = train_stage1(&train, &cfg.train_config(1), &ctx, &codec, &mut rng_for(cfg.seed, "train.stage1"))?;
    let mut models = Vec::new();
    for head in [HeadKind::Velocity, HeadKind::Direct] {
        let mut rng = rng_for(cfg.seed, "train.stage2");
        let (net, _) = train_stage2(&train, AnchorSource::Stage1(&anchor), head, &cfg.train_config(2), &ctx, &codec, &mut rng)?;
        models.push(Models {
            anchor: Some(anchor.clone()),
            completion: net,
        });
    }

    println!("seed  head      clean   occluded  factor");
    for s in 0..seeds {
        for m in &models {
            let mut errs = Vec::new();
            for dropout in [0.0, 0.5] {
                let mut spec = cfg.motion_spec();
                spec.occlusion.dropout = dropout;
                let test = generate_dataset(derive_seed(s, "eval"), "test", cfg.n_test, &spec)?;
                let preds = predict_records(m, &test, &cfg.sampler, s)?;
                errs.push(aggregate(&evaluate_records(&preds, &test, &cfg.metrics)?)?.non_torso_mpjpe);
            }
            println!(
                "{s:>4}  {:<8} {:>7.1} {:>9.1} {:>7.3}",
                m.completion.kind.name(),
                errs[0],
                errs[1],
                errs[1] / errs[0]
            );
        }
    }
    Ok(())
}
