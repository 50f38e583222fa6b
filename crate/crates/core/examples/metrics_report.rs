//! Evaluate a perturbed copy of a synthetic sequence and print the metric
//! report, then ingest the per-joint table fixture.

use std::path::Path;

use anchorflow::losses::LossContext;
use anchorflow::metrics::{evaluate_sequence, read_joint_table, MetricOptions};
use anchorflow::rotation::Vec3;
use anchorflow::synthdata::{generate_record, MotionSpec};

fn main() -> anchorflow::Result<()> {
    let ctx = LossContext::default();
    let gt = generate_record(11, "demo", &MotionSpec::default(), &ctx.skeleton)?.gt;
    let mut pred = gt.clone();
    for (t, f) in pred.frames.iter_mut().enumerate() {
        // Bend the elbows a little and let the root drift forward.
        f.body_pose[17] += Vec3::new(0.0, 0.3, 0.0);
        f.body_pose[18] += Vec3::new(0.0, -0.3, 0.0);
        f.world_transl += Vec3::new(0.0, 0.0, 0.002 * t as f64);
    }
    let r = evaluate_sequence(&pred, &gt, &ctx.skeleton, &ctx.mesh, &ctx.partition, &MetricOptions::default())?;
    println!("MPJPE {:.1} mm, PA-MPJPE {:.1} mm, PVE {:.1} mm", r.mpjpe, r.pa_mpjpe, r.pve);
    println!("WA-MPJPE {:.1} mm, W-MPJPE {:.1} mm, RTE {:.2?} %", r.wa_mpjpe, r.w_mpjpe, r.rte);
    println!("jitter {:.2} m/s^3, foot sliding {:.2} mm", r.jitter, r.foot_sliding);
    println!(
        "torso mean {:.1} mm, distal mean {:.1} mm, gap {:.1} mm",
        r.regional.anchor_mean, r.regional.distal_mean, r.regional.gap
    );

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/table5_per_joint.csv");
    let table = read_joint_table(&fixture)?;
    let m = table.mean_regional()?;
    println!("table fixture: anchor {:.2}, distal {:.2}, gap {:.2}", m.anchor_mean, m.distal_mean, m.gap);
    Ok(())
}
