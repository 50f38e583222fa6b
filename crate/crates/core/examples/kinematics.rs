//! Forward kinematics and skinning of a bent-knee pose, with the effect of
//! shape coefficients on bone lengths.

use anchorflow::rotation::Vec3;
use anchorflow::skeleton::{forward_kinematics, lbs_vertices, BodyShape, Pose, ProxyMesh, Skeleton, JOINT_NAMES, NUM_BETAS};

fn main() -> anchorflow::Result<()> {
    let skel = Skeleton::template();
    let mut pose = Pose::default();
    let knee = skel.joint_index("left_knee").expect("template has a left knee");
    pose.body_pose[knee - 1] = Vec3::new(1.2, 0.0, 0.0);
    pose.root_transl = Vec3::new(0.0, 0.9, 3.0);

    let neutral = BodyShape::default();
    let joints = forward_kinematics(&pose, &neutral, &skel)?;
    for (name, j) in JOINT_NAMES.iter().zip(joints.iter()).take(12) {
        println!("{name:<16} {:>7.3} {:>7.3} {:>7.3}", j.x, j.y, j.z);
    }

    let mut beta = [0.0; NUM_BETAS];
    beta[0] = 2.0;
    let tall = BodyShape::new(beta);
    let head = skel.joint_index("head").expect("template has a head");
    let height = |s: &BodyShape| -> anchorflow::Result<f64> {
        let j = forward_kinematics(&Pose::default(), s, &skel)?;
        Ok(j[head].y - j.iter().map(|p| p.y).fold(f64::INFINITY, f64::min))
    };
    println!("pelvis-to-head span: neutral {:.3} m, beta0=2 {:.3} m", height(&neutral)?, height(&tall)?);

    let mesh = ProxyMesh::generate(&skel, 400, 0);
    let verts = lbs_vertices(&pose, &neutral, &mesh, &skel)?;
    let lowest = verts.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    println!("{} skinned vertices, lowest at y = {lowest:.3} m", verts.len());
    Ok(())
}
