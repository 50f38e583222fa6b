//! Pinhole geometry, keypoint ray encoding and camera trajectories.
//!
//! Camera space shares the world's y-up convention: x right, y up, z along
//! the optical axis. Image rows therefore grow upward.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rotation::{log_so3, rot_x, rot_y, rot_z, Mat3, Vec3};

/// Default number of sinusoidal frequencies for ray embeddings.
pub const RAY_FREQS: usize = 4;
/// Ray (3) + sinusoidal features + confidence (1).
pub const RAY_EMBED_DIM: usize = 3 + 2 * 3 * RAY_FREQS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 500.0,
            width: 1000.0,
            height: 1000.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn contains(&self, u: &[f64; 2]) -> bool {
        u[0] >= 0.0 && u[0] <= self.width && u[1] >= 0.0 && u[1] <= self.height
    }
}

/// World-to-camera transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

impl CameraPose {
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x_world: &Vec3) -> Vec3 {
        self.rotation * x_world + self.translation
    }
}

/// Pinhole projection of a camera-space point.
pub fn project(k: &Intrinsics, x: &Vec3) -> Result<[f64; 2]> {
    if x.z <= 0.0 {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok(project_unchecked(k, x))
}

#[inline]
pub fn project_unchecked(k: &Intrinsics, x: &Vec3) -> [f64; 2] {
    [k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy]
}

/// Jacobian-transpose product of the projection: `d pixel -> d x`.
#[inline]
pub fn project_vjp(k: &Intrinsics, x: &Vec3, g: &[f64; 2]) -> Vec3 {
    let iz = 1.0 / x.z;
    Vec3::new(
        k.fx * iz * g[0],
        k.fy * iz * g[1],
        -(k.fx * x.x * g[0] + k.fy * x.y * g[1]) * iz * iz,
    )
}

pub fn pixel_to_ray(k: &Intrinsics, u: &[f64; 2]) -> Vec3 {
    Vec3::new((u[0] - k.cx) / k.fx, (u[1] - k.cy) / k.fy, 1.0).normalize()
}

/// `[sin(2^k pi x_i), cos(2^k pi x_i)]` for each component `i` and
/// frequency `k`, component-major.
pub fn sinusoidal_embed(x: &[f64], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * x.len() * n_freq);
    for &xi in x {
        for k in 0..n_freq {
            let (s, c) = ((1u64 << k) as f64 * PI * xi).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

/// Embedding of one keypoint. Invisible keypoints embed to all zeros.
pub fn ray_embedding(k: &Intrinsics, u: &[f64; 2], confidence: f64) -> [f64; RAY_EMBED_DIM] {
    let mut out = [0.0; RAY_EMBED_DIM];
    if confidence <= 0.0 {
        return out;
    }
    let ray = pixel_to_ray(k, u);
    out[..3].copy_from_slice(ray.as_slice());
    let sin = sinusoidal_embed(ray.as_slice(), RAY_FREQS);
    out[3..3 + sin.len()].copy_from_slice(&sin);
    out[RAY_EMBED_DIM - 1] = confidence.clamp(0.0, 1.0);
    out
}

/// Per-channel closed ranges for trajectory endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBounds {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    pub roll: (f64, f64),
    pub tx: (f64, f64),
    pub ty: (f64, f64),
    pub tz: (f64, f64),
}

impl TrajectoryBounds {
    pub fn fixed(yaw: f64, pitch: f64, roll: f64, t: [f64; 3]) -> Self {
        TrajectoryBounds {
            yaw: (yaw, yaw),
            pitch: (pitch, pitch),
            roll: (roll, roll),
            tx: (t[0], t[0]),
            ty: (t[1], t[1]),
            tz: (t[2], t[2]),
        }
    }

    fn channels(&self) -> [(f64, f64); 6] {
        [self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz]
    }
}

impl Default for TrajectoryBounds {
    fn default() -> Self {
        TrajectoryBounds {
            yaw: (-0.15, 0.15),
            pitch: (-0.1, 0.1),
            roll: (-0.05, 0.05),
            tx: (-0.4, 0.4),
            ty: (-1.1, -0.8),
            tz: (5.5, 7.0),
        }
    }
}

/// `R = R_yaw(y) * R_pitch(x) * R_roll(z)`.
pub fn ypr_to_matrix(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    rot_y(yaw) * rot_x(pitch) * rot_z(roll)
}

/// Smooth trajectory between two endpoints drawn uniformly within `bounds`,
/// interpolated with a cosine ease.
pub fn sample_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    n_frames: usize,
    bounds: &TrajectoryBounds,
) -> Result<Vec<CameraPose>> {
    if n_frames < 2 {
        return Err(invalid("trajectory needs at least 2 frames"));
    }
    let channels = bounds.channels();
    if channels.iter().any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(invalid(format!("empty trajectory bounds {bounds:?}")));
    }
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let start: Vec<f64> = channels.iter().map(|c| draw(*c)).collect();
    let end: Vec<f64> = channels.iter().map(|c| draw(*c)).collect();
    Ok((0..n_frames)
        .map(|i| {
            let u = i as f64 / (n_frames - 1) as f64;
            let s = 0.5 * (1.0 - (PI * u).cos());
            let c: Vec<f64> = start.iter().zip(&end).map(|(a, b)| a + s * (b - a)).collect();
            CameraPose {
                rotation: ypr_to_matrix(c[0], c[1], c[2]),
                translation: Vec3::new(c[3], c[4], c[5]),
            }
        })
        .collect())
}

/// Relative rotation (axis-angle of `R_t R_{t-1}^T`) and center displacement
/// expressed in the previous camera frame. Frame 0 is all zeros.
pub fn relative_camera_features(poses: &[CameraPose]) -> Vec<[f64; 6]> {
    let mut out = Vec::with_capacity(poses.len());
    for (t, pose) in poses.iter().enumerate() {
        if t == 0 {
            out.push([0.0; 6]);
            continue;
        }
        let prev = &poses[t - 1];
        let rel = log_so3(&(pose.rotation * prev.rotation.transpose()));
        let dt = prev.rotation * (pose.center() - prev.center());
        out.push([rel.x, rel.y, rel.z, dt.x, dt.y, dt.z]);
    }
    out
}

/// Rotation matrix from a stored row-major array.
pub fn mat_from_rows(r: &[f64]) -> Mat3 {
    Mat3::from_row_slice(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::default()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        assert_eq!(project(&k(), &Vec3::new(0.0, 0.0, 2.0)).unwrap(), [500.0, 500.0]);
        assert_eq!(project(&k(), &Vec3::new(0.5, 0.0, 2.0)).unwrap(), [750.0, 500.0]);
    }

    #[test]
    fn behind_camera_is_an_error() {
        assert!(matches!(
            project(&k(), &Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project(&k(), &Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn principal_point_ray() {
        assert_eq!(pixel_to_ray(&k(), &[500.0, 500.0]), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_embedding_alternates() {
        let e = sinusoidal_embed(&[0.0, 0.0], 3);
        assert_eq!(e.len(), 12);
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn lowest_frequency_has_period_two() {
        for x in [0.1, -0.7, 0.33] {
            let a = sinusoidal_embed(&[x], 3);
            let b = sinusoidal_embed(&[x + 2.0], 3);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn occluded_ray_embedding_is_zero() {
        let e = ray_embedding(&k(), &[100.0, 200.0], 0.0);
        assert!(e.iter().all(|x| *x == 0.0));
        let v = ray_embedding(&k(), &[100.0, 200.0], 1.0);
        assert!((Vec3::new(v[0], v[1], v[2]).norm() - 1.0).abs() < 1e-12);
        assert_eq!(v[RAY_EMBED_DIM - 1], 1.0);
    }

    #[test]
    fn degenerate_bounds_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = sample_trajectory(&mut rng, 5, &TrajectoryBounds::fixed(0.0, 0.0, 0.0, [0.0; 3])).unwrap();
        assert_eq!(traj.len(), 5);
        for p in traj {
            assert_eq!(p, CameraPose::default());
        }
    }

    #[test]
    fn inverted_bounds_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = TrajectoryBounds::default();
        b.pitch = (0.2, 0.1);
        assert!(sample_trajectory(&mut rng, 5, &b).is_err());
        assert!(sample_trajectory(&mut rng, 1, &TrajectoryBounds::default()).is_err());
    }

    #[test]
    fn static_camera_has_zero_features() {
        let poses = vec![
            CameraPose {
                rotation: ypr_to_matrix(0.1, 0.2, 0.0),
                translation: Vec3::new(0.0, -1.0, 6.0)
            };
            4
        ];
        for f in relative_camera_features(&poses) {
            assert!(f.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn yaw_steps_show_up_on_y() {
        let poses: Vec<_> = (0..5)
            .map(|t| CameraPose {
                rotation: rot_y(0.1 * t as f64),
                translation: Vec3::zeros(),
            })
            .collect();
        let f = relative_camera_features(&poses);
        assert_eq!(f[0], [0.0; 6]);
        for row in &f[1..] {
            assert!((row[1] - 0.1).abs() < 1e-12 && row[0].abs() < 1e-12 && row[2].abs() < 1e-12);
        }
    }
}
