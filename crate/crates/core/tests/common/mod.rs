//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use anchorflow::rotation::Vec3;
use anchorflow::skeleton::{BodyShape, Pose, Skeleton, NUM_JOINTS};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;

/// Joint positions by walking each joint's chain from the root, using
/// nalgebra's own axis-angle conversion.
pub fn fk_oracle(pose: &Pose, shape: &BodyShape, skel: &Skeleton) -> Vec<Vec3> {
    let rot = |j: usize| {
        let aa = if j == 0 { pose.global_orient } else { pose.body_pose[j - 1] };
        Rotation3::from_scaled_axis(Vector3::new(aa.x, aa.y, aa.z))
    };
    (0..NUM_JOINTS)
        .map(|j| {
            let mut chain = vec![j];
            while let Some(p) = skel.parent_index[*chain.last().unwrap()] {
                chain.push(p);
            }
            chain.reverse();
            let mut r = Rotation3::identity();
            let mut x = pose.root_transl;
            for (i, &k) in chain.iter().enumerate() {
                if i > 0 {
                    x += r * skel.shaped_offset(k, shape);
                }
                r *= rot(k);
            }
            x
        })
        .collect()
}

pub fn random_pose<R: Rng>(rng: &mut R, scale: f64) -> Pose {
    let mut p = Pose::default();
    let mut v = || Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale));
    p.body_pose.iter_mut().for_each(|r| *r = v());
    p.global_orient = v();
    p.root_transl = v();
    p
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let v = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    Rotation3::from_scaled_axis(v)
}

pub fn random_cloud<R: Rng>(rng: &mut R, n: usize, s: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s)))
        .collect()
}

/// Mean joint error of a chunk after the rigid motion that best maps the
/// first two frames of `pred` onto `gt`, found by coordinate search over
/// rotations with the translation solved in closed form.
pub fn w_mpjpe_search(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> f64 {
    let fit_p: Vec<Vec3> = pred[..2].iter().flatten().copied().collect();
    let fit_g: Vec<Vec3> = gt[..2].iter().flatten().copied().collect();
    let n = fit_p.len() as f64;
    let cost = |r: &Rotation3<f64>| {
        let t = fit_g.iter().zip(&fit_p).map(|(g, p)| g - r * p).sum::<Vec3>() / n;
        let c: f64 = fit_g.iter().zip(&fit_p).map(|(g, p)| (r * p + t - g).norm_squared()).sum();
        (c, t)
    };
    let mut best = Rotation3::identity();
    let mut best_c = cost(&best).0;
    let mut step = 0.5;
    while step > 1e-9 {
        let mut improved = false;
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            for sgn in [-1.0, 1.0] {
                let cand = Rotation3::from_scaled_axis(axis * (sgn * step)) * best;
                let c = cost(&cand).0;
                if c < best_c {
                    best = cand;
                    best_c = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let t = cost(&best).1;
    let (mut s, mut k) = (0.0, 0usize);
    for (pf, gf) in pred.iter().zip(gt) {
        for (p, g) in pf.iter().zip(gf) {
            s += (best * p + t - g).norm();
            k += 1;
        }
    }
    s / k as f64 * 1000.0
}
