//! Gravity-view encoding of world motion: per-frame orientation relative to a
//! gravity-aligned, first-frame-yaw frame plus root-local velocities, and
//! the rollout that recovers a world trajectory from them.

use crate::error::{invalid, Error, Result};
use crate::rotation::{exp_so3, exp_so3_vjp, log_so3, Mat3, Vec3};

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, -9.81, 0.0];

/// Rotation from world coordinates into the gravity-view frame. The frame's
/// y axis opposes gravity and its yaw follows a reference heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityFrame {
    pub rotation: Mat3,
}

impl GravityFrame {
    /// Frame aligned with gravity whose yaw matches the heading of
    /// `reference` (a body-to-world rotation). Without a reference the
    /// frame keeps the world's own yaw.
    pub fn new(g: &Vec3, reference: Option<&Mat3>) -> Result<Self> {
        let n = g.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid("gravity vector must be non-zero"));
        }
        let up = -g / n;
        // Minimal rotation taking `up` onto +y.
        let align = rotation_between(&up, &Vec3::y());
        let yaw = match reference {
            Some(r) => {
                let fwd = align * r * Vec3::z();
                if fwd.x.hypot(fwd.z) < 1e-9 {
                    0.0
                } else {
                    fwd.x.atan2(fwd.z)
                }
            }
            None => 0.0,
        };
        Ok(GravityFrame {
            rotation: exp_so3(&Vec3::new(0.0, -yaw, 0.0)) * align,
        })
    }

    pub fn up(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::y()
    }
}

fn rotation_between(a: &Vec3, b: &Vec3) -> Mat3 {
    let axis = a.cross(b);
    let s = axis.norm();
    let c = a.dot(b);
    if s < 1e-12 {
        if c > 0.0 {
            return Mat3::identity();
        }
        // Opposite vectors: half turn about any perpendicular axis.
        let perp = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
        let axis = a.cross(&perp).normalize();
        return exp_so3(&(axis * std::f64::consts::PI));
    }
    exp_so3(&(axis / s * s.atan2(c)))
}

/// World-space root trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldTrajectory {
    pub gamma_w: Vec<Vec3>,
    pub tau_w: Vec<Vec3>,
    pub fps: f64,
}

impl WorldTrajectory {
    pub fn len(&self) -> usize {
        self.tau_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_w.is_empty()
    }
}

/// Gravity-view targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GvEncoding {
    pub gamma_gv: Vec<Vec3>,
    /// Root-local displacement per frame, meters/frame.
    pub v_root: Vec<Vec3>,
    pub frame: GravityFrame,
}

/// Encode a trajectory. The gravity frame's yaw is anchored to the first
/// frame's heading. The last velocity copies the previous one.
pub fn encode_gv(traj: &WorldTrajectory, g: &Vec3) -> Result<GvEncoding> {
    if traj.is_empty() || traj.gamma_w.len() != traj.tau_w.len() {
        return Err(invalid("trajectory must be non-empty with matching lengths"));
    }
    let r0 = exp_so3(&traj.gamma_w[0]);
    let frame = GravityFrame::new(g, Some(&r0))?;
    encode_gv_in(traj, &frame).map(|(gamma_gv, v_root)| GvEncoding {
        gamma_gv,
        v_root,
        frame,
    })
}

/// Encode relative to an explicit gravity frame.
pub fn encode_gv_in(traj: &WorldTrajectory, frame: &GravityFrame) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let n = traj.len();
    if n == 0 || traj.gamma_w.len() != n {
        return Err(invalid("trajectory must be non-empty with matching lengths"));
    }
    let rots: Vec<Mat3> = traj.gamma_w.iter().map(exp_so3).collect();
    let gamma_gv = rots.iter().map(|r| log_so3(&(frame.rotation * r))).collect();
    let mut v_root = Vec::with_capacity(n);
    for t in 0..n {
        if t + 1 < n {
            v_root.push(rots[t].transpose() * (traj.tau_w[t + 1] - traj.tau_w[t]));
        } else if t > 0 {
            let last = v_root[t - 1];
            v_root.push(last);
        } else {
            v_root.push(Vec3::zeros());
        }
    }
    Ok((gamma_gv, v_root))
}

/// Roll out world orientation and translation from gravity-view predictions.
pub fn recover_world(
    gamma_gv: &[Vec3],
    v_root: &[Vec3],
    frame: &GravityFrame,
    tau0: &Vec3,
    fps: f64,
) -> Result<WorldTrajectory> {
    if gamma_gv.len() != v_root.len() {
        return Err(Error::ShapeMismatch(format!(
            "gamma_gv has {} frames, v_root {}",
            gamma_gv.len(),
            v_root.len()
        )));
    }
    let ft = frame.rotation.transpose();
    let mut gamma_w = Vec::with_capacity(gamma_gv.len());
    let mut tau_w = Vec::with_capacity(gamma_gv.len());
    let mut tau = *tau0;
    for (g, v) in gamma_gv.iter().zip(v_root) {
        let r = ft * exp_so3(g);
        gamma_w.push(log_so3(&r));
        tau_w.push(tau);
        tau += r * v;
    }
    Ok(WorldTrajectory { gamma_w, tau_w, fps })
}

/// Rolled-out translations only; used on the training path.
pub fn rollout_translation(gamma_gv: &[Vec3], v_root: &[Vec3], frame: &GravityFrame, tau0: &Vec3) -> Vec<Vec3> {
    let ft = frame.rotation.transpose();
    let mut out = Vec::with_capacity(gamma_gv.len());
    let mut tau = *tau0;
    for (g, v) in gamma_gv.iter().zip(v_root) {
        out.push(tau);
        tau += ft * exp_so3(g) * v;
    }
    out
}

/// Backward pass of [`rollout_translation`]: returns gradients on
/// `gamma_gv` and `v_root`.
pub fn rollout_backward(
    gamma_gv: &[Vec3],
    v_root: &[Vec3],
    frame: &GravityFrame,
    d_tau: &[Vec3],
) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = gamma_gv.len();
    let ft = frame.rotation.transpose();
    let mut g_gamma = vec![Vec3::zeros(); n];
    let mut g_v = vec![Vec3::zeros(); n];
    // Suffix sums: v_root[s] influences every tau[t] with t > s.
    let mut acc = Vec3::zeros();
    for s in (0..n).rev() {
        if s + 1 < n {
            acc += d_tau[s + 1];
        }
        if acc == Vec3::zeros() {
            continue;
        }
        let e = exp_so3(&gamma_gv[s]);
        g_v[s] = (ft * e).transpose() * acc;
        // d/dE of acc . (F^T E v) = F acc v^T
        let g_e = frame.rotation * acc * v_root[s].transpose();
        g_gamma[s] = exp_so3_vjp(&gamma_gv[s], &g_e);
    }
    (g_gamma, g_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> Vec3 {
        Vec3::from(DEFAULT_GRAVITY)
    }

    #[test]
    fn frame_up_opposes_gravity() {
        for grav in [g(), Vec3::new(1.0, -3.0, 0.5), Vec3::new(0.0, 9.81, 0.0)] {
            let f = GravityFrame::new(&grav, Some(&exp_so3(&Vec3::new(0.2, 0.7, 0.0)))).unwrap();
            assert!((f.up().dot(&grav) + grav.norm()).abs() < 1e-9);
            assert!((f.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gravity_rejected() {
        assert!(GravityFrame::new(&Vec3::zeros(), None).is_err());
    }

    #[test]
    fn static_trajectory_has_zero_velocity() {
        let traj = WorldTrajectory {
            gamma_w: vec![Vec3::new(0.0, 0.4, 0.0); 5],
            tau_w: vec![Vec3::new(1.0, 0.9, 2.0); 5],
            fps: 30.0,
        };
        let enc = encode_gv(&traj, &g()).unwrap();
        assert!(enc.v_root.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn rigid_transport_velocity() {
        let traj = WorldTrajectory {
            gamma_w: vec![Vec3::zeros(); 6],
            tau_w: (0..6).map(|t| Vec3::new(0.1 * t as f64, 0.0, 0.0)).collect(),
            fps: 30.0,
        };
        let enc = encode_gv(&traj, &g()).unwrap();
        for v in &enc.v_root {
            assert!((v - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_rollout() {
        let frame = GravityFrame::new(&g(), Some(&exp_so3(&Vec3::new(0.0, 0.5, 0.0)))).unwrap();
        let tau0 = Vec3::new(1.0, 2.0, 3.0);
        let n = 10;
        let traj = recover_world(
            &vec![Vec3::zeros(); n],
            &vec![Vec3::new(0.0, 0.0, 0.1); n],
            &frame,
            &tau0,
            30.0,
        )
        .unwrap();
        let step = frame.rotation.transpose() * Vec3::new(0.0, 0.0, 0.1);
        for (t, tau) in traj.tau_w.iter().enumerate() {
            assert!((tau - (tau0 + step * t as f64)).norm() < 1e-12);
        }
    }

    #[test]
    fn recover_rejects_length_mismatch() {
        let frame = GravityFrame::new(&g(), None).unwrap();
        assert!(recover_world(&[Vec3::zeros(); 3], &[Vec3::zeros(); 2], &frame, &Vec3::zeros(), 30.0).is_err());
    }

    #[test]
    fn constant_bias_drift_is_linear() {
        let frame = GravityFrame::new(&g(), None).unwrap();
        let n = 100;
        let b = Vec3::new(0.01, 0.0, 0.0);
        let tau = rollout_translation(&vec![Vec3::zeros(); n], &vec![b; n], &frame, &Vec3::zeros());
        assert!((tau[n - 1].norm() - (n - 1) as f64 * 0.01).abs() < 1e-12);
    }
}
