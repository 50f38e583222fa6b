//! Project a point, lift the pixel back to a ray and build the keypoint
//! embedding used as a condition.

use anchorflow::camera::{pixel_to_ray, project, ray_embedding, relative_camera_features, sample_trajectory, Intrinsics, TrajectoryBounds};
use anchorflow::rotation::Vec3;
use anchorflow::seed::rng_for;

fn main() -> anchorflow::Result<()> {
    let k = Intrinsics::default();
    let x = Vec3::new(0.3, -0.2, 4.0);
    let u = project(&k, &x)?;
    let ray = pixel_to_ray(&k, &u);
    println!("point {x:?} -> pixel ({:.1}, {:.1}) -> ray {:.4?}", u[0], u[1], ray.as_slice());
    println!("angle to true direction: {:.2e} rad", ray.angle(&x.normalize()));

    let e = ray_embedding(&k, &u, 1.0);
    println!("embedding width {}, first entries {:.3?}", e.len(), &e[..6]);
    let hidden = ray_embedding(&k, &u, 0.0);
    println!("invisible keypoint embeds to zeros: {}", hidden.iter().all(|v| *v == 0.0));

    let poses = sample_trajectory(&mut rng_for(0, "camera"), 30, &TrajectoryBounds::default())?;
    let feats = relative_camera_features(&poses);
    println!("relative camera motion at frame 10: {:.4?}", feats[10]);
    Ok(())
}
