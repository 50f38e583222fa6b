//! Encode a curved walk into gravity-view orientation and root-local
//! velocity, then roll it back out.

use anchorflow::rotation::Vec3;
use anchorflow::worldmotion::{encode_gv, recover_world, WorldTrajectory};

fn main() -> anchorflow::Result<()> {
    let n = 120;
    let (mut gamma_w, mut tau_w) = (Vec::new(), Vec::new());
    let (mut heading, mut pos) = (0.0f64, Vec3::zeros());
    for _ in 0..n {
        gamma_w.push(Vec3::new(0.0, heading, 0.0));
        tau_w.push(pos);
        pos += Vec3::new(heading.sin(), 0.0, heading.cos()) * 0.04;
        heading += 0.01;
    }
    let traj = WorldTrajectory { gamma_w, tau_w, fps: 30.0 };
    let g = Vec3::new(0.0, -9.81, 0.0);
    let enc = encode_gv(&traj, &g)?;
    println!("v_root[0] = {:.4?} (root-local, m/frame)", enc.v_root[0].as_slice());
    println!("gamma_gv[60] = {:.4?}", enc.gamma_gv[60].as_slice());

    let back = recover_world(&enc.gamma_gv, &enc.v_root, &enc.frame, &traj.tau_w[0], traj.fps)?;
    let err = back.tau_w.iter().zip(&traj.tau_w).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    println!("max round-trip translation error over {n} frames: {err:.2e} m");
    Ok(())
}
