//! Kinematic body model: a 22-joint tree with SMPL-X-like proportions, a
//! linear shape basis, forward kinematics with its backward pass, and a
//! procedural skinned proxy mesh used for vertex-level metrics.
//!
//! Conventions: y is up, the body faces +z and its left side is +x. The rest
//! pose is a T-pose with the pelvis at the origin.
//!
//! Template offsets (meters, parent to child):
//!
//! | joint | offset |
//! |---|---|
//! | hips | (±0.09, -0.08, 0) |
//! | thigh (hip to knee) | 0.38 |
//! | shin (knee to ankle) | 0.40 |
//! | foot | (0, -0.06, 0.12) |
//! | spine1 / spine2 / spine3 | 0.10 / 0.13 / 0.05 |
//! | neck, head | 0.22, 0.09 |
//! | collars | (±0.07, 0.12, -0.01) |
//! | shoulders | (±0.11, 0.03, 0) |
//! | upper arm, forearm | 0.26, 0.25 |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rotation::{exp_so3, exp_so3_vjp, Mat3, Vec3};

pub const NUM_JOINTS: usize = 22;
pub const NUM_BODY_JOINTS: usize = 21;
pub const NUM_BETAS: usize = 10;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
];

const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.10, -0.01],
    [0.0, -0.38, 0.0],
    [0.0, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.40, -0.02],
    [0.0, -0.40, -0.02],
    [0.0, 0.05, 0.02],
    [0.0, -0.06, 0.12],
    [0.0, -0.06, 0.12],
    [0.0, 0.22, -0.02],
    [0.07, 0.12, -0.01],
    [-0.07, 0.12, -0.01],
    [0.0, 0.09, 0.04],
    [0.11, 0.03, 0.0],
    [-0.11, 0.03, 0.0],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
];

/// Torso joints: hips, spine, neck and collars.
pub const TORSO_IDS: [usize; 8] = [1, 2, 3, 6, 9, 12, 13, 14];
/// Legs, arms and head.
pub const NON_TORSO_IDS: [usize; 13] = [4, 5, 7, 8, 10, 11, 15, 16, 17, 18, 19, 20, 21];

const SHAPE_BASIS_SEED: u64 = 0x5eed_0b0d_7a11;
const SHAPE_BASIS_MAX: f64 = 0.02;

pub type Joints = [Vec3; NUM_JOINTS];

/// Joint tree with rest offsets and a linear shape basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub parent_index: [Option<usize>; NUM_JOINTS],
    pub rest_offset: [Vec3; NUM_JOINTS],
    pub joint_names: [&'static str; NUM_JOINTS],
    /// Per-joint 3x10 basis: offset change per unit beta.
    pub shape_basis: [[[f64; NUM_BETAS]; 3]; NUM_JOINTS],
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::template()
    }
}

impl Skeleton {
    pub fn template() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SHAPE_BASIS_SEED);
        let mut shape_basis = [[[0.0; NUM_BETAS]; 3]; NUM_JOINTS];
        for basis in shape_basis.iter_mut().skip(1) {
            for row in basis.iter_mut() {
                for b in row.iter_mut() {
                    *b = rng.random_range(-SHAPE_BASIS_MAX..=SHAPE_BASIS_MAX);
                }
            }
        }
        Skeleton {
            parent_index: PARENTS,
            rest_offset: REST_OFFSETS.map(|o| Vec3::new(o[0], o[1], o[2])),
            joint_names: JOINT_NAMES,
            shape_basis,
        }
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| *n == name)
    }

    /// Offset from the parent after applying the shape basis.
    pub fn shaped_offset(&self, joint: usize, shape: &BodyShape) -> Vec3 {
        let mut o = self.rest_offset[joint];
        let basis = &self.shape_basis[joint];
        for (axis, row) in basis.iter().enumerate() {
            o[axis] += row.iter().zip(shape.beta.iter()).map(|(b, x)| b * x).sum::<f64>();
        }
        o
    }

    /// Rest-pose joint positions (pelvis at the origin).
    pub fn rest_joints(&self, shape: &BodyShape) -> Joints {
        let mut j = [Vec3::zeros(); NUM_JOINTS];
        for i in 1..NUM_JOINTS {
            let p = self.parent_index[i].expect("non-root joint has a parent");
            j[i] = j[p] + self.shaped_offset(i, shape);
        }
        j
    }

    fn shape_basis_transpose_mul(&self, joint: usize, g: &Vec3, out: &mut [f64; NUM_BETAS]) {
        for (axis, row) in self.shape_basis[joint].iter().enumerate() {
            for (o, b) in out.iter_mut().zip(row.iter()) {
                *o += b * g[axis];
            }
        }
    }
}

/// Body shape coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyShape {
    pub beta: [f64; NUM_BETAS],
}

impl BodyShape {
    pub fn new(beta: [f64; NUM_BETAS]) -> Self {
        Self { beta }
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().all(|b| b.is_finite())
    }
}

/// Body pose plus global orientation and root translation in some frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub body_pose: [Vec3; NUM_BODY_JOINTS],
    pub global_orient: Vec3,
    pub root_transl: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            body_pose: [Vec3::zeros(); NUM_BODY_JOINTS],
            global_orient: Vec3::zeros(),
            root_transl: Vec3::zeros(),
        }
    }
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !self.body_pose.iter().all(finite) || !finite(&self.global_orient) || !finite(&self.root_transl) {
            return Err(invalid("pose has non-finite entries"));
        }
        Ok(())
    }

    /// Rotation parameter for joint `j` (global orientation for the root).
    #[inline]
    pub fn joint_rotation(&self, j: usize) -> &Vec3 {
        if j == 0 {
            &self.global_orient
        } else {
            &self.body_pose[j - 1]
        }
    }
}

/// Torso / non-torso split of the 21 body joints (indices into the full
/// 22-joint skeleton).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub torso_ids: Vec<usize>,
    pub non_torso_ids: Vec<usize>,
}

impl Default for Partition {
    fn default() -> Self {
        Partition {
            torso_ids: TORSO_IDS.to_vec(),
            non_torso_ids: NON_TORSO_IDS.to_vec(),
        }
    }
}

impl Partition {
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; NUM_JOINTS];
        for &j in self.torso_ids.iter().chain(self.non_torso_ids.iter()) {
            if j == 0 || j >= NUM_JOINTS || seen[j] {
                return Err(invalid(format!("partition index {j} is out of range or repeated")));
            }
            seen[j] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(invalid("partition does not cover all body joints"));
        }
        Ok(())
    }
}

/// Intermediate values of forward kinematics, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    pub joints: Joints,
    /// Accumulated rotation of each joint's frame.
    pub chain: [Mat3; NUM_JOINTS],
    /// Local rotation of each joint (global orientation at the root).
    pub local: [Mat3; NUM_JOINTS],
    pub offsets: [Vec3; NUM_JOINTS],
}

/// Gradient with respect to the inputs of forward kinematics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseGrad {
    pub body_pose: [Vec3; NUM_BODY_JOINTS],
    pub global_orient: Vec3,
    pub root_transl: Vec3,
    pub beta: [f64; NUM_BETAS],
}

impl Default for PoseGrad {
    fn default() -> Self {
        PoseGrad {
            body_pose: [Vec3::zeros(); NUM_BODY_JOINTS],
            global_orient: Vec3::zeros(),
            root_transl: Vec3::zeros(),
            beta: [0.0; NUM_BETAS],
        }
    }
}

impl PoseGrad {
    pub fn add_assign(&mut self, other: &PoseGrad) {
        for (a, b) in self.body_pose.iter_mut().zip(other.body_pose.iter()) {
            *a += b;
        }
        self.global_orient += other.global_orient;
        self.root_transl += other.root_transl;
        for (a, b) in self.beta.iter_mut().zip(other.beta.iter()) {
            *a += b;
        }
    }
}

/// Joint positions for `pose` and `shape`. The root lands on `root_transl`.
pub fn forward_kinematics(pose: &Pose, shape: &BodyShape, skel: &Skeleton) -> Result<Joints> {
    pose.validate()?;
    if !shape.is_finite() {
        return Err(invalid("shape has non-finite entries"));
    }
    Ok(fk_with_cache(pose, shape, skel).joints)
}

/// Unchecked forward kinematics that keeps intermediates.
pub fn fk_with_cache(pose: &Pose, shape: &BodyShape, skel: &Skeleton) -> FkCache {
    let mut joints = [Vec3::zeros(); NUM_JOINTS];
    let mut chain = [Mat3::identity(); NUM_JOINTS];
    let mut local = [Mat3::identity(); NUM_JOINTS];
    let mut offsets = [Vec3::zeros(); NUM_JOINTS];
    local[0] = exp_so3(&pose.global_orient);
    chain[0] = local[0];
    joints[0] = pose.root_transl;
    for j in 1..NUM_JOINTS {
        let p = skel.parent_index[j].expect("non-root joint has a parent");
        offsets[j] = skel.shaped_offset(j, shape);
        local[j] = exp_so3(&pose.body_pose[j - 1]);
        joints[j] = joints[p] + chain[p] * offsets[j];
        chain[j] = chain[p] * local[j];
    }
    FkCache {
        joints,
        chain,
        local,
        offsets,
    }
}

/// Backward pass of [`fk_with_cache`]. `d_chain` carries gradients with
/// respect to the accumulated joint rotations (used by skinning).
pub fn fk_backward(
    pose: &Pose,
    cache: &FkCache,
    skel: &Skeleton,
    d_joints: &Joints,
    d_chain: Option<&[Mat3; NUM_JOINTS]>,
) -> PoseGrad {
    let mut g_j = *d_joints;
    let mut g_c = match d_chain {
        Some(c) => *c,
        None => [Mat3::zeros(); NUM_JOINTS],
    };
    let mut grad = PoseGrad::default();
    for j in (1..NUM_JOINTS).rev() {
        let p = skel.parent_index[j].expect("non-root joint has a parent");
        let gj = g_j[j];
        g_j[p] += gj;
        g_c[p] += gj * cache.offsets[j].transpose();
        let g_offset = cache.chain[p].transpose() * gj;
        skel.shape_basis_transpose_mul(j, &g_offset, &mut grad.beta);
        let gc = g_c[j];
        g_c[p] += gc * cache.local[j].transpose();
        let g_local = cache.chain[p].transpose() * gc;
        grad.body_pose[j - 1] = exp_so3_vjp(&pose.body_pose[j - 1], &g_local);
    }
    grad.root_transl = g_j[0];
    grad.global_orient = exp_so3_vjp(&pose.global_orient, &g_c[0]);
    grad
}

/// (child, parent) pairs, one per non-root joint.
pub fn bone_pairs(skel: &Skeleton) -> Vec<(usize, usize)> {
    (0..NUM_JOINTS)
        .filter_map(|j| skel.parent_index[j].map(|p| (j, p)))
        .collect()
}

/// Procedural skinned mesh standing in for a full body surface.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMesh {
    pub template_vertices: Vec<Vec3>,
    pub skin_weights: Vec<[f64; NUM_JOINTS]>,
}

const LEAF_JOINTS: [usize; 5] = [10, 11, 15, 20, 21];

impl ProxyMesh {
    pub const DEFAULT_VERTICES: usize = 96;

    /// Vertices are scattered around bones of the rest skeleton. Each vertex
    /// is bound to at most two joints; vertices around leaf joints are bound
    /// rigidly to that joint.
    pub fn generate(skel: &Skeleton, n_vertices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rest = skel.rest_joints(&BodyShape::default());
        let mut template_vertices = Vec::with_capacity(n_vertices);
        let mut skin_weights = Vec::with_capacity(n_vertices);
        for i in 0..n_vertices {
            let j = 1 + i % NUM_BODY_JOINTS;
            let p = skel.parent_index[j].unwrap();
            let mut jitter = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            jitter *= rng.random_range(0.02..0.06) / jitter.norm().max(1e-6);
            let mut w = [0.0; NUM_JOINTS];
            if LEAF_JOINTS.contains(&j) && (i / NUM_BODY_JOINTS) % 2 == 0 {
                w[j] = 1.0;
                template_vertices.push(rest[j] + jitter);
            } else {
                let s: f64 = rng.random_range(0.1..0.9);
                w[p] = 1.0 - s;
                w[j] += s;
                template_vertices.push(rest[p] + (rest[j] - rest[p]) * s + jitter);
            }
            skin_weights.push(w);
        }
        ProxyMesh {
            template_vertices,
            skin_weights,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    fn nonzero(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.skin_weights[v]
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, w)| (j, *w))
    }

    /// Template vertices moved along with the shaped rest joints.
    fn shaped_template(&self, rest: &Joints, rest0: &Joints) -> Vec<Vec3> {
        (0..self.num_vertices())
            .map(|v| {
                let mut x = self.template_vertices[v];
                for (j, w) in self.nonzero(v) {
                    x += w * (rest[j] - rest0[j]);
                }
                x
            })
            .collect()
    }
}

/// Linear blend skinning of the proxy mesh.
pub fn lbs_vertices(pose: &Pose, shape: &BodyShape, mesh: &ProxyMesh, skel: &Skeleton) -> Result<Vec<Vec3>> {
    pose.validate()?;
    let fk = fk_with_cache(pose, shape, skel);
    Ok(lbs_with_fk(&fk, shape, mesh, skel))
}

/// Skinning from precomputed forward kinematics.
pub fn lbs_with_fk(fk: &FkCache, shape: &BodyShape, mesh: &ProxyMesh, skel: &Skeleton) -> Vec<Vec3> {
    let rest = skel.rest_joints(shape);
    let rest0 = skel.rest_joints(&BodyShape::default());
    let shaped = mesh.shaped_template(&rest, &rest0);
    shaped
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let mut out = Vec3::zeros();
            for (j, w) in mesh.nonzero(v) {
                out += w * (fk.chain[j] * (x - rest[j]) + fk.joints[j]);
            }
            out
        })
        .collect()
}

/// Backward pass of skinning, returning gradients on the pose and shape.
pub fn lbs_backward(
    pose: &Pose,
    shape: &BodyShape,
    fk: &FkCache,
    mesh: &ProxyMesh,
    skel: &Skeleton,
    d_vertices: &[Vec3],
) -> PoseGrad {
    let rest = skel.rest_joints(shape);
    let rest0 = skel.rest_joints(&BodyShape::default());
    let shaped = mesh.shaped_template(&rest, &rest0);
    let mut g_joints = [Vec3::zeros(); NUM_JOINTS];
    let mut g_chain = [Mat3::zeros(); NUM_JOINTS];
    let mut g_rest = [Vec3::zeros(); NUM_JOINTS];
    for (v, gv) in d_vertices.iter().enumerate() {
        let mut g_shaped = Vec3::zeros();
        for (j, w) in mesh.nonzero(v) {
            let d = shaped[v] - rest[j];
            g_chain[j] += w * gv * d.transpose();
            g_joints[j] += w * gv;
            let gd = w * (fk.chain[j].transpose() * gv);
            g_shaped += gd;
            g_rest[j] -= gd;
        }
        for (j, w) in mesh.nonzero(v) {
            g_rest[j] += w * g_shaped;
        }
    }
    let mut grad = fk_backward(pose, fk, skel, &g_joints, Some(&g_chain));
    // rest[j] is the sum of shaped offsets along the path to the root.
    for j in (1..NUM_JOINTS).rev() {
        let p = skel.parent_index[j].unwrap();
        let g = g_rest[j];
        skel.shape_basis_transpose_mul(j, &g, &mut grad.beta);
        g_rest[p] += g;
    }
    grad
}
