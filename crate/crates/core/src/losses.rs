//! Training objectives: Huber penalty, joint-bone consistency, ramped
//! projection loss and the regression terms shared by both stages.

use crate::camera::{project_unchecked, project_vjp, Intrinsics};
use crate::error::{invalid, Error, Result};
use crate::motion::MotionSequence;
use crate::rotation::Vec3;
use crate::skeleton::{
    bone_pairs, fk_backward, fk_with_cache, lbs_backward, lbs_with_fk, BodyShape, Joints, Partition, Pose, PoseGrad,
    ProxyMesh, Skeleton, NUM_BETAS, NUM_BODY_JOINTS, NUM_JOINTS,
};
use crate::worldmotion::{encode_gv_in, rollout_backward, rollout_translation, GravityFrame};

/// Huber threshold for metric-space residuals (meters).
pub const DELTA_3D: f64 = 0.05;
/// Huber threshold for image-space residuals (pixels).
pub const DELTA_PX: f64 = 5.0;

/// Huber penalty on the residual norm.
pub fn robust_penalty(r: &[f64], delta: f64) -> f64 {
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= delta {
        0.5 * n * n / delta
    } else {
        n - 0.5 * delta
    }
}

/// Gradient of [`robust_penalty`] with respect to `r`, written into `out`.
pub fn robust_penalty_grad(r: &[f64], delta: f64, out: &mut [f64]) {
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if n <= delta {
        1.0 / delta
    } else {
        1.0 / n
    };
    for (o, x) in out.iter_mut().zip(r) {
        *o = scale * x;
    }
}

#[inline]
fn huber3(r: &Vec3, delta: f64) -> (f64, Vec3) {
    let n = r.norm();
    if n <= delta {
        (0.5 * n * n / delta, r / delta)
    } else {
        (n - 0.5 * delta, r / n)
    }
}

#[inline]
fn huber2(r: [f64; 2], delta: f64) -> (f64, [f64; 2]) {
    let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
    let s = if n <= delta { 1.0 / delta } else { 1.0 / n };
    let v = if n <= delta { 0.5 * n * n / delta } else { n - 0.5 * delta };
    (v, [s * r[0], s * r[1]])
}

/// Per-term weights of the training mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_fm: f64,
    pub w_pose: f64,
    pub w_joints3d: f64,
    pub w_transl: f64,
    pub w_world_transl: f64,
    pub w_cons: f64,
    pub w_proj_max: f64,
    pub w_vertices: f64,
    pub w_kp2d: f64,
    pub r_proj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_fm: 1.0,
            w_pose: 1.0,
            w_joints3d: 1.0,
            w_transl: 1.0,
            w_world_transl: 1.0,
            w_cons: 0.5,
            w_proj_max: 0.1,
            w_vertices: 1.0,
            w_kp2d: 1.0,
            r_proj: 0.5,
        }
    }
}

impl LossWeights {
    /// Everything but the flow-matching term switched off.
    pub fn fm_only() -> Self {
        LossWeights {
            w_fm: 1.0,
            w_pose: 0.0,
            w_joints3d: 0.0,
            w_transl: 0.0,
            w_world_transl: 0.0,
            w_cons: 0.0,
            w_proj_max: 0.0,
            w_vertices: 0.0,
            w_kp2d: 0.0,
            r_proj: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_fm,
            self.w_pose,
            self.w_joints3d,
            self.w_transl,
            self.w_world_transl,
            self.w_cons,
            self.w_proj_max,
            self.w_vertices,
            self.w_kp2d,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(self.r_proj > 0.0 && self.r_proj <= 1.0) {
            return Err(invalid(format!("r_proj must lie in (0, 1], got {}", self.r_proj)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub name: &'static str,
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms and their weighted total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn push(&mut self, name: &'static str, weight: f64, value: f64) {
        self.terms.push(LossTerm { name, weight, value });
        self.total += weight * value;
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn merge(&mut self, other: &LossReport) {
        for t in &other.terms {
            self.push(t.name, t.weight, t.value);
        }
    }
}

fn check_joint_sets(a: &[Vec<Vec3>], b: &[Vec<Vec3>], ids: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} frames", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|f| f.len() != ids.len()) {
        return Err(Error::ShapeMismatch("joint arrays do not cover the same index set".into()));
    }
    Ok(())
}

/// Joint term plus bone term between the joint branch `j_hat` and the
/// forward-kinematics branch `j_fk`. Entry `k` of each frame is joint
/// `ids[k]`; only bones with both ends in `ids` are used.
pub fn joint_bone_consistency(
    j_hat: &[Vec<Vec3>],
    j_fk: &[Vec<Vec3>],
    ids: &[usize],
    pairs: &[(usize, usize)],
    delta: f64,
) -> Result<f64> {
    Ok(joint_bone_consistency_grad(j_hat, j_fk, ids, pairs, delta)?.0)
}

/// Value plus gradients with respect to `j_hat` and `j_fk`.
#[allow(clippy::type_complexity)]
pub fn joint_bone_consistency_grad(
    j_hat: &[Vec<Vec3>],
    j_fk: &[Vec<Vec3>],
    ids: &[usize],
    pairs: &[(usize, usize)],
    delta: f64,
) -> Result<(f64, Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> {
    check_joint_sets(j_hat, j_fk, ids)?;
    let local: Vec<(usize, usize)> = pairs
        .iter()
        .filter_map(|&(j, p)| {
            let a = ids.iter().position(|&x| x == j)?;
            let b = ids.iter().position(|&x| x == p)?;
            Some((a, b))
        })
        .collect();
    let n = j_hat.len().max(1) as f64;
    let mut total = 0.0;
    let mut g_hat = vec![vec![Vec3::zeros(); ids.len()]; j_hat.len()];
    let mut g_fk = g_hat.clone();
    for (t, (h, f)) in j_hat.iter().zip(j_fk).enumerate() {
        for k in 0..ids.len() {
            let (v, g) = huber3(&(h[k] - f[k]), delta);
            total += v;
            g_hat[t][k] += g / n;
            g_fk[t][k] -= g / n;
        }
        for &(a, b) in &local {
            let r = (h[a] - h[b]) - (f[a] - f[b]);
            let (v, g) = huber3(&r, delta);
            total += v;
            let g = g / n;
            g_hat[t][a] += g;
            g_hat[t][b] -= g;
            g_fk[t][a] -= g;
            g_fk[t][b] += g;
        }
    }
    Ok((total / n, g_hat, g_fk))
}

/// Robust reprojection error of the selected visible joints, averaged over
/// frames. Joints behind the camera contribute nothing.
pub fn projection_loss(
    j_cam: &[Joints],
    u_gt: &[[[f64; 2]; NUM_JOINTS]],
    visible: &[[bool; NUM_JOINTS]],
    selected: &[usize],
    k: &Intrinsics,
    delta: f64,
) -> f64 {
    projection_loss_grad(j_cam, u_gt, visible, selected, k, delta).0
}

pub fn projection_loss_grad(
    j_cam: &[Joints],
    u_gt: &[[[f64; 2]; NUM_JOINTS]],
    visible: &[[bool; NUM_JOINTS]],
    selected: &[usize],
    k: &Intrinsics,
    delta: f64,
) -> (f64, Vec<Joints>) {
    let n = j_cam.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![[Vec3::zeros(); NUM_JOINTS]; j_cam.len()];
    for (t, ((j, u), vis)) in j_cam.iter().zip(u_gt).zip(visible).enumerate() {
        for &i in selected {
            if !vis[i] || j[i].z <= 0.0 {
                continue;
            }
            let p = project_unchecked(k, &j[i]);
            let (v, g) = huber2([p[0] - u[i][0], p[1] - u[i][1]], delta);
            total += v;
            grad[t][i] = project_vjp(k, &j[i], &g) / n;
        }
    }
    (total / n, grad)
}

/// Linear ramp from 0 at step 0 to `w_max` at `ceil(r_proj * total)`.
pub fn projection_weight(step: usize, total_steps: usize, w_max: f64, r_proj: f64) -> f64 {
    let end = (r_proj * total_steps.max(1) as f64).ceil();
    if end <= 0.0 || step as f64 >= end {
        w_max
    } else {
        w_max * (step as f64 / end)
    }
}

/// Fixed geometry needed by the regression losses.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub skeleton: Skeleton,
    pub mesh: ProxyMesh,
    pub partition: Partition,
    pub intrinsics: Intrinsics,
    pub pairs: Vec<(usize, usize)>,
    pub delta_3d: f64,
    pub delta_px: f64,
}

impl LossContext {
    pub fn new(skeleton: Skeleton, partition: Partition, intrinsics: Intrinsics) -> Self {
        let mesh = ProxyMesh::generate(&skeleton, ProxyMesh::DEFAULT_VERTICES, 0x6d65_7368);
        let pairs = bone_pairs(&skeleton);
        LossContext {
            skeleton,
            mesh,
            partition,
            intrinsics,
            pairs,
            delta_3d: DELTA_3D,
            delta_px: DELTA_PX,
        }
    }
}

impl Default for LossContext {
    fn default() -> Self {
        LossContext::new(Skeleton::template(), Partition::default(), Intrinsics::default())
    }
}

/// Which fields a regression loss supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionScope {
    /// Torso rotations, shape and camera trajectory (first stage).
    Anchor,
    /// Everything, including vertices and world translation.
    Full,
}

/// Predicted motion fields fed to the regression losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPrediction {
    pub body_pose: Vec<[Vec3; NUM_BODY_JOINTS]>,
    pub cam_orient: Vec<Vec3>,
    pub cam_transl: Vec<Vec3>,
    pub shape: BodyShape,
    pub gamma_gv: Vec<Vec3>,
    pub v_root: Vec<Vec3>,
}

impl MotionPrediction {
    pub fn len(&self) -> usize {
        self.cam_orient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cam_orient.is_empty()
    }

    pub fn camera_pose(&self, t: usize) -> Pose {
        Pose {
            body_pose: self.body_pose[t],
            global_orient: self.cam_orient[t],
            root_transl: self.cam_transl[t],
        }
    }
}

/// Gradient with the same layout as [`MotionPrediction`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub body_pose: Vec<[Vec3; NUM_BODY_JOINTS]>,
    pub cam_orient: Vec<Vec3>,
    pub cam_transl: Vec<Vec3>,
    pub shape: [f64; NUM_BETAS],
    pub gamma_gv: Vec<Vec3>,
    pub v_root: Vec<Vec3>,
}

impl PredictionGrad {
    pub fn zeros(frames: usize) -> Self {
        PredictionGrad {
            body_pose: vec![[Vec3::zeros(); NUM_BODY_JOINTS]; frames],
            cam_orient: vec![Vec3::zeros(); frames],
            cam_transl: vec![Vec3::zeros(); frames],
            shape: [0.0; NUM_BETAS],
            gamma_gv: vec![Vec3::zeros(); frames],
            v_root: vec![Vec3::zeros(); frames],
        }
    }

    fn add_pose(&mut self, t: usize, g: &PoseGrad, scale: f64) {
        for (a, b) in self.body_pose[t].iter_mut().zip(g.body_pose.iter()) {
            *a += scale * b;
        }
        self.cam_orient[t] += scale * g.global_orient;
        self.cam_transl[t] += scale * g.root_transl;
        for (a, b) in self.shape.iter_mut().zip(g.beta.iter()) {
            *a += scale * b;
        }
    }
}

/// Ground truth with derived targets precomputed once per sequence.
#[derive(Debug, Clone)]
pub struct RegressionTarget {
    pub motion: MotionSequence,
    pub frame: GravityFrame,
    pub gamma_gv: Vec<Vec3>,
    pub v_root: Vec<Vec3>,
    pub cam_joints: Vec<Joints>,
    pub cam_vertices: Vec<Vec<Vec3>>,
}

impl RegressionTarget {
    pub fn new(motion: &MotionSequence, frame: GravityFrame, ctx: &LossContext) -> Result<Self> {
        let (gamma_gv, v_root) = encode_gv_in(&motion.world_trajectory(), &frame)?;
        let mut cam_joints = Vec::with_capacity(motion.len());
        let mut cam_vertices = Vec::with_capacity(motion.len());
        for f in &motion.frames {
            let fk = fk_with_cache(&f.camera_pose(), &motion.shape, &ctx.skeleton);
            cam_vertices.push(lbs_with_fk(&fk, &motion.shape, &ctx.mesh, &ctx.skeleton));
            cam_joints.push(fk.joints);
        }
        Ok(RegressionTarget {
            motion: motion.clone(),
            frame,
            gamma_gv,
            v_root,
            cam_joints,
            cam_vertices,
        })
    }

    pub fn len(&self) -> usize {
        self.motion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motion.is_empty()
    }
}

/// Regression terms without gradients.
pub fn regression_losses(
    pred: &MotionPrediction,
    target: &RegressionTarget,
    ctx: &LossContext,
    weights: &LossWeights,
    scope: RegressionScope,
) -> Result<LossReport> {
    Ok(regression_losses_grad(pred, target, ctx, weights, scope)?.0)
}

/// Regression terms and the gradient of their weighted total.
pub fn regression_losses_grad(
    pred: &MotionPrediction,
    target: &RegressionTarget,
    ctx: &LossContext,
    weights: &LossWeights,
    scope: RegressionScope,
) -> Result<(LossReport, PredictionGrad)> {
    let n = pred.len();
    let lens = [
        pred.body_pose.len(),
        pred.cam_transl.len(),
        target.len(),
    ];
    if lens.iter().any(|&l| l != n) || n == 0 {
        return Err(Error::ShapeMismatch(format!("prediction has {n} frames, target {}", target.len())));
    }
    let full = scope == RegressionScope::Full;
    if full && (pred.gamma_gv.len() != n || pred.v_root.len() != n) {
        return Err(Error::ShapeMismatch("world fields missing from prediction".into()));
    }
    let rot_ids: Vec<usize> = match scope {
        RegressionScope::Anchor => ctx.partition.torso_ids.clone(),
        RegressionScope::Full => (1..NUM_JOINTS).collect(),
    };
    let joint_ids: Vec<usize> = std::iter::once(0).chain(rot_ids.iter().copied()).collect();
    let (d3, dpx) = (ctx.delta_3d, ctx.delta_px);
    let fx = ctx.intrinsics.fx;
    let inv_t = 1.0 / n as f64;
    let mut grad = PredictionGrad::zeros(n);
    let mut pose = 0.0;
    let mut joints3d = 0.0;
    let mut joints_rel = 0.0;
    let mut kp2d = 0.0;
    let mut transl = 0.0;
    let mut verts = 0.0;
    let mut vert2d = 0.0;

    let n_rot = (rot_ids.len() + 1 + usize::from(full) + 1) as f64;
    let w_pose = weights.w_pose * inv_t / n_rot;
    let w_j = weights.w_joints3d * inv_t / joint_ids.len() as f64;
    let w_rel = weights.w_joints3d * inv_t / rot_ids.len() as f64;
    let w_kp = weights.w_kp2d * inv_t / (joint_ids.len() as f64 * fx);
    let w_tr = weights.w_transl * inv_t;
    let nv = ctx.mesh.num_vertices() as f64;
    let w_v = weights.w_vertices * inv_t / nv;
    let w_v2 = weights.w_kp2d * inv_t / (nv * fx);

    let gt_shape = target.motion.shape;
    for t in 0..n {
        let gt = &target.motion.frames[t];
        // Rotations, shape and orientation.
        for &j in &rot_ids {
            let (v, g) = huber3(&(pred.body_pose[t][j - 1] - gt.body_pose[j - 1]), d3);
            pose += v / n_rot;
            grad.body_pose[t][j - 1] += w_pose * g;
        }
        let (v, g) = huber3(&(pred.cam_orient[t] - gt.cam_orient), d3);
        pose += v / n_rot;
        grad.cam_orient[t] += w_pose * g;
        let rb: Vec<f64> = (0..NUM_BETAS).map(|i| pred.shape.beta[i] - gt_shape.beta[i]).collect();
        pose += robust_penalty(&rb, d3) / n_rot;
        let mut gb = [0.0; NUM_BETAS];
        robust_penalty_grad(&rb, d3, &mut gb);
        for (a, b) in grad.shape.iter_mut().zip(gb) {
            *a += w_pose * b;
        }
        if full {
            let (v, g) = huber3(&(pred.gamma_gv[t] - target.gamma_gv[t]), d3);
            pose += v / n_rot;
            grad.gamma_gv[t] += w_pose * g;
        }

        let (v, g) = huber3(&(pred.cam_transl[t] - gt.cam_transl), d3);
        transl += v;
        grad.cam_transl[t] += w_tr * g;

        let p = pred.camera_pose(t);
        let fk = fk_with_cache(&p, &pred.shape, &ctx.skeleton);
        let jg = &target.cam_joints[t];
        let jp = &fk.joints;
        let mut d_joints = [Vec3::zeros(); NUM_JOINTS];
        for &j in &joint_ids {
            let (v, g) = huber3(&(jp[j] - jg[j]), d3);
            joints3d += v / joint_ids.len() as f64;
            d_joints[j] += w_j * g;
            if jp[j].z > 0.0 && jg[j].z > 0.0 {
                let a = project_unchecked(&ctx.intrinsics, &jp[j]);
                let b = project_unchecked(&ctx.intrinsics, &jg[j]);
                let (v, g) = huber2([a[0] - b[0], a[1] - b[1]], dpx);
                kp2d += v / (joint_ids.len() as f64 * fx);
                d_joints[j] += w_kp * project_vjp(&ctx.intrinsics, &jp[j], &g);
            }
        }
        for &j in &rot_ids {
            let (v, g) = huber3(&((jp[j] - jp[0]) - (jg[j] - jg[0])), d3);
            joints_rel += v / rot_ids.len() as f64;
            d_joints[j] += w_rel * g;
            d_joints[0] -= w_rel * g;
        }
        let g_fk = fk_backward(&p, &fk, &ctx.skeleton, &d_joints, None);
        grad.add_pose(t, &g_fk, 1.0);

        if full {
            let vp = lbs_with_fk(&fk, &pred.shape, &ctx.mesh, &ctx.skeleton);
            let vg = &target.cam_vertices[t];
            let mut d_verts = vec![Vec3::zeros(); vp.len()];
            let mut d_root = Vec3::zeros();
            for (i, (a, b)) in vp.iter().zip(vg).enumerate() {
                let (v, g) = huber3(&((a - jp[0]) - (b - jg[0])), d3);
                verts += v / nv;
                d_verts[i] += w_v * g;
                d_root -= w_v * g;
                if a.z > 0.0 && b.z > 0.0 {
                    let pa = project_unchecked(&ctx.intrinsics, a);
                    let pb = project_unchecked(&ctx.intrinsics, b);
                    let (v, g) = huber2([pa[0] - pb[0], pa[1] - pb[1]], dpx);
                    vert2d += v / (nv * fx);
                    d_verts[i] += w_v2 * project_vjp(&ctx.intrinsics, a, &g);
                }
            }
            let g_l = lbs_backward(&p, &pred.shape, &fk, &ctx.mesh, &ctx.skeleton, &d_verts);
            grad.add_pose(t, &g_l, 1.0);
            let mut dj = [Vec3::zeros(); NUM_JOINTS];
            dj[0] = d_root;
            let g_r = fk_backward(&p, &fk, &ctx.skeleton, &dj, None);
            grad.add_pose(t, &g_r, 1.0);
        }
    }

    let mut report = LossReport::default();
    report.push("pose", weights.w_pose, pose * inv_t);
    report.push("joints3d", weights.w_joints3d, joints3d * inv_t);
    report.push("joints_rel", weights.w_joints3d, joints_rel * inv_t);
    report.push("kp2d", weights.w_kp2d, kp2d * inv_t);
    report.push("transl", weights.w_transl, transl * inv_t);
    if full {
        report.push("vertices", weights.w_vertices, verts * inv_t);
        report.push("vert2d", weights.w_kp2d, vert2d * inv_t);
        let tau0 = target.motion.frames[0].world_transl;
        let tau = rollout_translation(&pred.gamma_gv, &pred.v_root, &target.frame, &tau0);
        let mut value = 0.0;
        let mut d_tau = vec![Vec3::zeros(); n];
        for (t, (a, f)) in tau.iter().zip(&target.motion.frames).enumerate() {
            let (v, g) = huber3(&(a - f.world_transl), d3);
            value += v;
            d_tau[t] = weights.w_world_transl * inv_t * g;
        }
        let (g_gamma, g_v) = rollout_backward(&pred.gamma_gv, &pred.v_root, &target.frame, &d_tau);
        for t in 0..n {
            grad.gamma_gv[t] += g_gamma[t];
            grad.v_root[t] += g_v[t];
        }
        report.push("world_transl", weights.w_world_transl, value * inv_t);
    }
    Ok((report, grad))
}
