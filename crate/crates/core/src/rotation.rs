//! Axis-angle rotations: exponential map, logarithm and the Jacobian
//! vector product needed to push gradients through the exponential map.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the exponential map switches to its second-order series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this angle the backward pass uses series coefficients.
const SERIES_ANGLE_GRAD: f64 = 1e-3;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula. Validates the input.
pub fn axis_angle_to_matrix(aa: &Vec3) -> Result<Mat3> {
    if !aa.iter().all(|x| x.is_finite()) {
        return Err(invalid(format!("non-finite axis-angle {aa:?}")));
    }
    Ok(exp_so3(aa))
}

/// Unchecked exponential map.
pub fn exp_so3(aa: &Vec3) -> Mat3 {
    let theta = aa.norm();
    let k = skew(aa);
    if theta <= SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let half = 0.5 * theta;
    let b = 2.0 * (half.sin() / theta).powi(2);
    Mat3::identity() + a * k + b * k * k
}

/// Logarithm of a rotation matrix, returned with angle in [0, pi].
pub fn log_so3(r: &Mat3) -> Vec3 {
    let cos = (r.trace() - 1.0) * 0.5;
    let w = vee(&(r - r.transpose())) * 0.5; // sin(theta) * axis
    let theta = w.norm().atan2(cos);
    if theta < 1e-6 {
        // R - R^T = 2 sin(theta) K, and sin(theta)/theta ~ 1 here.
        return w * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return w * (theta / theta.sin());
    }
    // Near pi: recover the axis from the symmetric part,
    // (R + R^T) / 2 = cos(theta) I + (1 - cos(theta)) a a^T.
    let s = ((r + r.transpose()) * 0.5 - Mat3::identity() * cos) / (1.0 - cos);
    let diag = [s[(0, 0)], s[(1, 1)], s[(2, 2)]];
    let i = (0..3)
        .max_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap())
        .unwrap();
    let mut axis = s.column(i).into_owned();
    axis /= axis.norm();
    let mut sign = axis.dot(&w);
    if sign.abs() < 1e-12 {
        // Exactly pi: pick the representative whose largest component is positive.
        let j = (0..3)
            .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap())
            .unwrap();
        sign = axis[j];
    }
    if sign < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Given `upstream = dL/dR` for `R = exp(aa)`, return `dL/d aa`.
pub fn exp_so3_vjp(aa: &Vec3, upstream: &Mat3) -> Vec3 {
    let theta2 = aa.norm_squared();
    let theta = theta2.sqrt();
    // R = I + a K + b K^2 with K = skew(aa); a, b functions of theta.
    // da/dv_i = a1 * v_i, db/dv_i = b1 * v_i.
    let (a, b, a1, b1) = if theta < SERIES_ANGLE_GRAD {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            -1.0 / 3.0 + theta2 / 30.0,
            -1.0 / 12.0 + theta2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / theta2;
        let a1 = (theta * c - s) / (theta2 * theta);
        let b1 = (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2);
        (a, b, a1, b1)
    };
    let k = skew(aa);
    let k2 = k * k;
    let g_k = upstream.component_mul(&k).sum();
    let g_k2 = upstream.component_mul(&k2).sum();
    let mut out = Vec3::zeros();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = 1.0;
        let ei = skew(&e);
        let d_k2 = ei * k + k * ei;
        out[i] = a1 * aa[i] * g_k
            + a * upstream.component_mul(&ei).sum()
            + b1 * aa[i] * g_k2
            + b * upstream.component_mul(&d_k2).sum();
    }
    out
}

/// Rotation about the world y axis.
pub fn rot_y(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, angle, 0.0))
}

pub fn rot_x(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(angle, 0.0, 0.0))
}

pub fn rot_z(angle: f64) -> Mat3 {
    exp_so3(&Vec3::new(0.0, 0.0, angle))
}
