//! Central finite-difference checks of every hand-written backward pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::flowmatch::{masked_path, sample_source_noise, KnownMask, LatentCodec, NoiseSpec};
use crate::losses::{
    joint_bone_consistency, joint_bone_consistency_grad, projection_loss, projection_loss_grad, regression_losses,
    regression_losses_grad, robust_penalty, robust_penalty_grad, LossContext, LossWeights, MotionPrediction,
    RegressionScope, RegressionTarget,
};
use crate::motion::{StructuralAnchor, CONDITION_DIM};
use crate::nn::layers::{Activation, AttentionBlock, Dense, LayerNorm, Module, RopeAttention};
use crate::nn::nets::{anchor_targets, AnchorNet, HeadKind, NetConfig, Standardizer, VelocityNet, ANCHOR_OUT};
use crate::nn::train::{record_anchor, stage1_objective, stage2_objective, AnchorSource, Stage2Item};
use crate::rotation::Vec3;
use crate::skeleton::{fk_backward, fk_with_cache, lbs_backward, lbs_with_fk, BodyShape, Pose, PoseGrad, NUM_BETAS, NUM_BODY_JOINTS, NUM_JOINTS};
use crate::synthdata::{generate_record, MotionSpec};
use crate::worldmotion::{rollout_backward, rollout_translation, GravityFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub probes: usize,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: scale the analytic gradient of the named component.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            probes: 100,
            h: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

/// Relative error with a floor so that vanishing gradients compare on an
/// absolute scale.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Tracker<'a> {
    name: &'static str,
    opts: &'a GradcheckOptions,
    errs: Vec<f64>,
}

impl<'a> Tracker<'a> {
    fn new(name: &'static str, opts: &'a GradcheckOptions) -> Self {
        Tracker {
            name,
            opts,
            errs: Vec::new(),
        }
    }

    fn done(&self) -> bool {
        self.errs.len() >= self.opts.probes
    }

    /// Compare `analytic` with the central difference of `f` along one
    /// coordinate, where `f(s)` evaluates the loss with that coordinate
    /// shifted by `s`.
    fn probe(&mut self, analytic: f64, f: impl Fn(f64) -> f64) {
        let h = self.opts.h;
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        let a = if self.opts.corrupt.as_deref() == Some(self.name) { analytic * 1.1 + 1e-3 } else { analytic };
        self.errs.push(rel_error(a, numeric));
    }

    fn result(self) -> ComponentResult {
        let max = self.errs.iter().copied().fold(0.0, f64::max);
        ComponentResult {
            component: self.name.to_string(),
            probes: self.errs.len(),
            max_rel_error: max,
            passed: self.errs.len() >= self.opts.probes && max < self.opts.tolerance,
        }
    }
}

fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn rmat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s))
}

const POSE_DIM: usize = 3 * NUM_BODY_JOINTS + 6 + NUM_BETAS;

fn pose_to_vec(p: &Pose, b: &BodyShape) -> Vec<f64> {
    let mut v = Vec::with_capacity(POSE_DIM);
    p.body_pose.iter().for_each(|r| v.extend(r.iter()));
    v.extend(p.global_orient.iter());
    v.extend(p.root_transl.iter());
    v.extend(b.beta.iter());
    v
}

fn vec_to_pose(v: &[f64]) -> (Pose, BodyShape) {
    let v3 = |o: usize| Vec3::new(v[o], v[o + 1], v[o + 2]);
    let mut body_pose = [Vec3::zeros(); NUM_BODY_JOINTS];
    body_pose.iter_mut().enumerate().for_each(|(i, r)| *r = v3(3 * i));
    let o = 3 * NUM_BODY_JOINTS;
    let mut beta = [0.0; NUM_BETAS];
    beta.copy_from_slice(&v[o + 6..o + 6 + NUM_BETAS]);
    (
        Pose {
            body_pose,
            global_orient: v3(o),
            root_transl: v3(o + 3),
        },
        BodyShape::new(beta),
    )
}

fn grad_to_vec(g: &PoseGrad) -> Vec<f64> {
    let p = Pose {
        body_pose: g.body_pose,
        global_orient: g.global_orient,
        root_transl: g.root_transl,
    };
    pose_to_vec(&p, &BodyShape::new(g.beta))
}

fn random_pose(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(-0.6..0.6)).collect();
    v[3 * NUM_BODY_JOINTS + 5] += 4.0;
    v
}

fn shifted(x: &[f64], i: usize, s: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[i] += s;
    y
}

fn check_huber(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("huber", opts);
    let delta = 0.05;
    while !tr.done() {
        let scale = [0.1, 0.5, 3.0, 10.0][rng.random_range(0..4)] * delta;
        let r = rv(rng, 1.0).normalize() * scale;
        let r = [r.x, r.y, r.z];
        let mut g = [0.0; 3];
        robust_penalty_grad(&r, delta, &mut g);
        let i = rng.random_range(0..3);
        tr.probe(g[i], |s| robust_penalty(&shifted(&r, i, s), delta));
    }
    tr.result()
}

fn check_fk(ctx: &LossContext, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("fk", opts);
    while !tr.done() {
        let x = random_pose(rng);
        let w: Vec<Vec3> = (0..NUM_JOINTS).map(|_| rv(rng, 1.0)).collect();
        let loss = |x: &[f64]| {
            let (p, b) = vec_to_pose(x);
            let fk = fk_with_cache(&p, &b, &ctx.skeleton);
            fk.joints.iter().zip(&w).map(|(j, w)| j.dot(w)).sum::<f64>()
        };
        let (p, b) = vec_to_pose(&x);
        let fk = fk_with_cache(&p, &b, &ctx.skeleton);
        let mut dj = [Vec3::zeros(); NUM_JOINTS];
        dj.iter_mut().zip(&w).for_each(|(d, w)| *d = *w);
        let g = grad_to_vec(&fk_backward(&p, &fk, &ctx.skeleton, &dj, None));
        for _ in 0..10 {
            let i = rng.random_range(0..POSE_DIM);
            tr.probe(g[i], |s| loss(&shifted(&x, i, s)));
        }
    }
    tr.result()
}

fn check_lbs(ctx: &LossContext, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("lbs", opts);
    let nv = ctx.mesh.num_vertices();
    while !tr.done() {
        let x = random_pose(rng);
        let w: Vec<Vec3> = (0..nv).map(|_| rv(rng, 1.0)).collect();
        let loss = |x: &[f64]| {
            let (p, b) = vec_to_pose(x);
            let fk = fk_with_cache(&p, &b, &ctx.skeleton);
            lbs_with_fk(&fk, &b, &ctx.mesh, &ctx.skeleton).iter().zip(&w).map(|(v, w)| v.dot(w)).sum::<f64>()
        };
        let (p, b) = vec_to_pose(&x);
        let fk = fk_with_cache(&p, &b, &ctx.skeleton);
        let g = grad_to_vec(&lbs_backward(&p, &b, &fk, &ctx.mesh, &ctx.skeleton, &w));
        for _ in 0..10 {
            let i = rng.random_range(0..POSE_DIM);
            tr.probe(g[i], |s| loss(&shifted(&x, i, s)));
        }
    }
    tr.result()
}

fn check_projection(ctx: &LossContext, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("projection", opts);
    let k = ctx.intrinsics;
    let sel = ctx.partition.non_torso_ids.clone();
    while !tr.done() {
        let n = 3;
        let joints: Vec<[Vec3; NUM_JOINTS]> = (0..n)
            .map(|_| {
                let mut j = [Vec3::zeros(); NUM_JOINTS];
                j.iter_mut().for_each(|x| *x = rv(rng, 0.8) + Vec3::new(0.0, 0.0, 5.0));
                j
            })
            .collect();
        let u: Vec<[[f64; 2]; NUM_JOINTS]> = joints
            .iter()
            .map(|j| {
                let mut u = [[0.0; 2]; NUM_JOINTS];
                for (a, p) in u.iter_mut().zip(j) {
                    let q = crate::camera::project_unchecked(&k, p);
                    let off = [2.0, 40.0][rng.random_range(0..2)];
                    *a = [q[0] + off * rng.random_range(-1.0..1.0), q[1] + off * rng.random_range(-1.0..1.0)];
                }
                u
            })
            .collect();
        let vis: Vec<[bool; NUM_JOINTS]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.8))).collect();
        let (_, g) = projection_loss_grad(&joints, &u, &vis, &sel, &k, ctx.delta_px);
        for _ in 0..10 {
            let (t, j, c) = (rng.random_range(0..n), sel[rng.random_range(0..sel.len())], rng.random_range(0..3));
            tr.probe(g[t][j][c], |s| {
                let mut jj = joints.clone();
                jj[t][j][c] += s;
                projection_loss(&jj, &u, &vis, &sel, &k, ctx.delta_px)
            });
        }
    }
    tr.result()
}

fn check_consistency(ctx: &LossContext, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("consistency", opts);
    let ids: Vec<usize> = (1..NUM_JOINTS).collect();
    while !tr.done() {
        let n = 2;
        let a: Vec<Vec<Vec3>> = (0..n).map(|_| ids.iter().map(|_| rv(rng, 1.0)).collect()).collect();
        let b: Vec<Vec<Vec3>> = a
            .iter()
            .map(|f| {
                f.iter()
                    .map(|x| {
                        let s = [0.01, 0.2][rng.random_range(0..2)];
                        x + rv(rng, s)
                    })
                    .collect()
            })
            .collect();
        let (_, ga, gb) = joint_bone_consistency_grad(&a, &b, &ids, &ctx.pairs, ctx.delta_3d).unwrap();
        for _ in 0..10 {
            let (t, k, c) = (rng.random_range(0..n), rng.random_range(0..ids.len()), rng.random_range(0..3));
            if rng.random_bool(0.5) {
                tr.probe(ga[t][k][c], |s| {
                    let mut aa = a.clone();
                    aa[t][k][c] += s;
                    joint_bone_consistency(&aa, &b, &ids, &ctx.pairs, ctx.delta_3d).unwrap()
                });
            } else {
                tr.probe(gb[t][k][c], |s| {
                    let mut bb = b.clone();
                    bb[t][k][c] += s;
                    joint_bone_consistency(&a, &bb, &ids, &ctx.pairs, ctx.delta_3d).unwrap()
                });
            }
        }
    }
    tr.result()
}

fn check_rollout(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ComponentResult {
    let mut tr = Tracker::new("rollout", opts);
    while !tr.done() {
        let n = 12;
        let frame = GravityFrame::new(&Vec3::new(0.0, -9.81, 0.0), Some(&crate::rotation::exp_so3(&rv(rng, 1.0)))).unwrap();
        let gam: Vec<Vec3> = (0..n).map(|_| rv(rng, 1.0)).collect();
        let vel: Vec<Vec3> = (0..n).map(|_| rv(rng, 0.1)).collect();
        let w: Vec<Vec3> = (0..n).map(|_| rv(rng, 1.0)).collect();
        let tau0 = rv(rng, 1.0);
        let loss = |g: &[Vec3], v: &[Vec3]| {
            rollout_translation(g, v, &frame, &tau0).iter().zip(&w).map(|(a, b)| a.dot(b)).sum::<f64>()
        };
        let (gg, gv) = rollout_backward(&gam, &vel, &frame, &w);
        for _ in 0..10 {
            let (t, c) = (rng.random_range(0..n - 1), rng.random_range(0..3));
            if rng.random_bool(0.5) {
                tr.probe(gg[t][c], |s| {
                    let mut g = gam.clone();
                    g[t][c] += s;
                    loss(&g, &vel)
                });
            } else {
                tr.probe(gv[t][c], |s| {
                    let mut v = vel.clone();
                    v[t][c] += s;
                    loss(&gam, &v)
                });
            }
        }
    }
    tr.result()
}

fn toy_record(seed: u64, frames: usize) -> Result<crate::synthdata::DatasetRecord> {
    let spec = MotionSpec {
        n_frames: frames,
        ..MotionSpec::default()
    };
    generate_record(seed, "gradcheck", &spec, &crate::skeleton::Skeleton::template())
}

fn check_regression(ctx: &LossContext, codec: &LatentCodec, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let mut tr = Tracker::new("regression", opts);
    let rec = toy_record(rng.random(), 6)?;
    let target = RegressionTarget::new(&rec.gt, codec.gravity_frame(&rec.gt)?, ctx)?;
    let w = LossWeights::default();
    while !tr.done() {
        let n = rec.len();
        let mut pred = MotionPrediction {
            body_pose: rec.gt.frames.iter().map(|f| f.body_pose).collect(),
            cam_orient: rec.gt.frames.iter().map(|f| f.cam_orient).collect(),
            cam_transl: rec.gt.frames.iter().map(|f| f.cam_transl).collect(),
            shape: rec.gt.shape,
            gamma_gv: target.gamma_gv.clone(),
            v_root: target.v_root.clone(),
        };
        for t in 0..n {
            pred.body_pose[t].iter_mut().for_each(|r| *r += rv(rng, 0.3));
            pred.cam_orient[t] += rv(rng, 0.2);
            pred.cam_transl[t] += rv(rng, 0.2);
            pred.gamma_gv[t] += rv(rng, 0.2);
            pred.v_root[t] += rv(rng, 0.05);
        }
        let (_, g) = regression_losses_grad(&pred, &target, ctx, &w, RegressionScope::Full)?;
        let f = |p: &MotionPrediction| regression_losses(p, &target, ctx, &w, RegressionScope::Full).unwrap().total;
        for _ in 0..10 {
            let (t, c) = (rng.random_range(0..n), rng.random_range(0..3));
            match rng.random_range(0..5) {
                0 => {
                    let j = rng.random_range(0..NUM_BODY_JOINTS);
                    tr.probe(g.body_pose[t][j][c], |s| {
                        let mut p = pred.clone();
                        p.body_pose[t][j][c] += s;
                        f(&p)
                    })
                }
                1 => tr.probe(g.cam_orient[t][c], |s| {
                    let mut p = pred.clone();
                    p.cam_orient[t][c] += s;
                    f(&p)
                }),
                2 => tr.probe(g.cam_transl[t][c], |s| {
                    let mut p = pred.clone();
                    p.cam_transl[t][c] += s;
                    f(&p)
                }),
                3 => tr.probe(g.gamma_gv[t][c], |s| {
                    let mut p = pred.clone();
                    p.gamma_gv[t][c] += s;
                    f(&p)
                }),
                _ => tr.probe(g.v_root[t][c], |s| {
                    let mut p = pred.clone();
                    p.v_root[t][c] += s;
                    f(&p)
                }),
            }
        }
    }
    Ok(tr.result())
}

fn flat_params<M: Module + ?Sized>(m: &mut M) -> (Vec<f64>, Vec<f64>) {
    let (mut v, mut g) = (Vec::new(), Vec::new());
    m.visit("", &mut |_, p| {
        v.extend(p.value.iter());
        g.extend(p.grad.iter());
    });
    (v, g)
}

fn shift_param<M: Module + ?Sized>(m: &mut M, index: usize, s: f64) {
    let mut k = index;
    m.visit("", &mut |_, p| {
        if k < p.value.len() {
            let c = p.value.ncols();
            p.value[[k / c, k % c]] += s;
            k = usize::MAX;
        } else if k != usize::MAX {
            k -= p.value.len();
        }
    });
}

/// Probe parameter gradients of `m` for the scalar loss `loss(m)`; `grad`
/// fills the module's gradients for the same loss.
fn probe_module<M: Module + Clone>(
    tr: &mut Tracker<'_>,
    m: &M,
    rng: &mut ChaCha8Rng,
    n: usize,
    loss: impl Fn(&M) -> f64,
    grad: impl Fn(&mut M),
) {
    let mut g = m.clone();
    g.zero_grad();
    grad(&mut g);
    let (_, grads) = flat_params(&mut g);
    for _ in 0..n {
        let i = rng.random_range(0..grads.len());
        tr.probe(grads[i], |s| {
            let mut mm = m.clone();
            shift_param(&mut mm, i, s);
            loss(&mm)
        });
    }
}

fn weighted(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (y * w).sum()
}

fn check_layers(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Vec<ComponentResult> {
    let (t, d) = (5, 8);
    let mut out = Vec::new();

    let mut tr = Tracker::new("dense", opts);
    while !tr.done() {
        let layer = Dense::new(rng, d, 6, Activation::Gelu, 1.0);
        let x = rmat(rng, t, d, 1.0);
        let w = rmat(rng, t, 6, 1.0);
        probe_module(&mut tr, &layer, rng, 10, |l| weighted(&l.forward(&x).0, &w), |l| {
            let (_, c) = l.forward(&x);
            l.backward(&c, &w);
        });
    }
    out.push(tr.result());

    let mut tr = Tracker::new("layer_norm", opts);
    while !tr.done() {
        let mut ln = LayerNorm::new(d);
        ln.gain.value = rmat(rng, 1, d, 1.0) + 1.0;
        ln.offset.value = rmat(rng, 1, d, 1.0);
        let x = rmat(rng, t, d, 1.0);
        let w = rmat(rng, t, d, 1.0);
        probe_module(&mut tr, &ln, rng, 5, |l| weighted(&l.forward(&x).0, &w), |l| {
            let (_, c) = l.forward(&x);
            l.backward(&c, &w);
        });
        let mut l2 = ln.clone();
        let (_, c) = l2.forward(&x);
        let dx = l2.backward(&c, &w);
        for _ in 0..5 {
            let (r, k) = (rng.random_range(0..t), rng.random_range(0..d));
            tr.probe(dx[[r, k]], |s| {
                let mut xx = x.clone();
                xx[[r, k]] += s;
                weighted(&ln.forward(&xx).0, &w)
            });
        }
    }
    out.push(tr.result());

    let mut tr = Tracker::new("rope_attention", opts);
    while !tr.done() {
        let att = RopeAttention::new(rng, d).expect("even dim");
        let x = rmat(rng, t, d, 1.0);
        let w = rmat(rng, t, d, 1.0);
        probe_module(&mut tr, &att, rng, 5, |a| weighted(&a.forward(&x, None).0, &w), |a| {
            let (_, c) = a.forward(&x, None);
            a.backward(&c, &w);
        });
        let mut a2 = att.clone();
        let (_, c) = a2.forward(&x, None);
        let dx = a2.backward(&c, &w);
        for _ in 0..5 {
            let (r, k) = (rng.random_range(0..t), rng.random_range(0..d));
            tr.probe(dx[[r, k]], |s| {
                let mut xx = x.clone();
                xx[[r, k]] += s;
                weighted(&att.forward(&xx, None).0, &w)
            });
        }
    }
    out.push(tr.result());

    let mut tr = Tracker::new("attention_block", opts);
    while !tr.done() {
        let blk = AttentionBlock::new(rng, d).expect("even dim");
        let x = rmat(rng, t, d, 1.0);
        let w = rmat(rng, t, d, 1.0);
        probe_module(&mut tr, &blk, rng, 10, |b| weighted(&b.forward(&x, None).0, &w), |b| {
            let (_, c) = b.forward(&x, None);
            b.backward(&c, &w);
        });
    }
    out.push(tr.result());
    out
}

fn net_config() -> NetConfig {
    NetConfig {
        dim: 32,
        blocks: 2,
        time_freqs: 4,
    }
}

fn check_nets(codec: &LatentCodec, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<ComponentResult>> {
    let frames = 4;
    let mut out = Vec::new();
    let mut tr = Tracker::new("anchor_net", opts);
    while !tr.done() {
        let mut out_stats = Standardizer::identity(ANCHOR_OUT);
        out_stats.std.iter_mut().for_each(|s| *s = rng.random_range(0.5..2.0));
        let net = AnchorNet::new(rng, net_config(), Standardizer::identity(CONDITION_DIM), out_stats)?;
        let c = rmat(rng, frames, CONDITION_DIM, 1.0);
        let w = rmat(rng, frames, ANCHOR_OUT, 1.0);
        probe_module(&mut tr, &net, rng, 20, |n| weighted(&n.forward(&c).unwrap().0, &w), |n| {
            let (_, cache) = n.forward(&c).unwrap();
            n.backward(&cache, &w);
        });
    }
    out.push(tr.result());

    for (name, kind) in [("velocity_net", HeadKind::Velocity), ("direct_net", HeadKind::Direct)] {
        let mut tr = Tracker::new(name, opts);
        let width = codec.layout.frame_width();
        while !tr.done() {
            let mut stats = Standardizer::identity(width);
            stats.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.5..0.5));
            let net = VelocityNet::new(rng, net_config(), kind, &codec.layout, &NoiseSpec::default(), stats, Standardizer::identity(CONDITION_DIM))?;
            let z = rmat(rng, frames, width, 1.0);
            let c = rmat(rng, frames, CONDITION_DIM, 1.0);
            let t = rng.random_range(0.05..0.95);
            let w = rmat(rng, frames, width, 1.0);
            probe_module(&mut tr, &net, rng, 20, |n| weighted(&n.forward(&z, t, &c).unwrap().0, &w), |n| {
                let (_, cache) = n.forward(&z, t, &c).unwrap();
                n.backward(&cache, &w);
            });
        }
        out.push(tr.result());
    }
    Ok(out)
}

fn check_objectives(ctx: &LossContext, codec: &LatentCodec, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<ComponentResult>> {
    let mut out = Vec::new();
    let w = LossWeights::default();

    let mut tr = Tracker::new("stage1_objective", opts);
    while !tr.done() {
        let rec = toy_record(rng.random(), 5)?;
        let target = RegressionTarget::new(&rec.gt, codec.gravity_frame(&rec.gt)?, ctx)?;
        let mut o = anchor_targets(&StructuralAnchor::from_sequence(&rec.gt, &ctx.partition));
        o.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
        let (_, d) = stage1_objective(&o, &target, ctx, &w)?;
        for _ in 0..20 {
            let (r, c) = (rng.random_range(0..o.nrows()), rng.random_range(0..ANCHOR_OUT));
            tr.probe(d[[r, c]], |s| {
                let mut oo = o.clone();
                oo[[r, c]] += s;
                stage1_objective(&oo, &target, ctx, &w).unwrap().0.total
            });
        }
    }
    out.push(tr.result());

    let mut tr = Tracker::new("stage2_objective", opts);
    let mask = KnownMask::new(&codec.layout);
    let unknown: Vec<usize> = (0..mask.mask.len()).filter(|&c| mask.is_unknown(c)).collect();
    while !tr.done() {
        let rec = toy_record(rng.random(), 5)?;
        let anchor = record_anchor(&rec, AnchorSource::GroundTruth, ctx)?;
        let item = Stage2Item::new(&rec, &anchor, ctx, codec)?;
        let t = rng.random_range(0.3..0.9);
        let eps = sample_source_noise(rng, rec.len(), &codec.layout, &NoiseSpec::default())?;
        let z_t = masked_path(&item.z, &eps, &mask, t)?;
        // A velocity close to the target keeps the completion near the data.
        let mut v = &item.z - &eps;
        for c in &unknown {
            v.column_mut(*c).mapv_inplace(|x| x + rng.random_range(-0.2..0.2));
        }
        for c in 0..mask.mask.len() {
            if !mask.is_unknown(c) {
                v.column_mut(c).fill(0.0);
            }
        }
        let f = |v: &Array2<f64>| stage2_objective(HeadKind::Velocity, v, &z_t, &eps, t, &item, &mask, ctx, codec, &w, 0.1).unwrap();
        let (_, d) = f(&v);
        for _ in 0..20 {
            let (r, c) = (rng.random_range(0..v.nrows()), unknown[rng.random_range(0..unknown.len())]);
            tr.probe(d[[r, c]], |s| {
                let mut vv = v.clone();
                vv[[r, c]] += s;
                f(&vv).0.total
            });
        }
    }
    out.push(tr.result());
    Ok(out)
}

/// Run every suite.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ctx = LossContext::default();
    let codec = LatentCodec::default();
    let mut components = vec![
        check_huber(opts, &mut rng),
        check_fk(&ctx, opts, &mut rng),
        check_lbs(&ctx, opts, &mut rng),
        check_projection(&ctx, opts, &mut rng),
        check_consistency(&ctx, opts, &mut rng),
        check_rollout(opts, &mut rng),
        check_regression(&ctx, &codec, opts, &mut rng)?,
    ];
    components.extend(check_layers(opts, &mut rng));
    components.extend(check_nets(&codec, opts, &mut rng)?);
    components.extend(check_objectives(&ctx, &codec, opts, &mut rng)?);
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport { components, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        for c in &report.components {
            assert!(c.passed, "{} max rel error {:.2e}", c.component, c.max_rel_error);
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let opts = GradcheckOptions {
            probes: 20,
            corrupt: Some("fk".into()),
            ..GradcheckOptions::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed);
        let bad: Vec<_> = report.components.iter().filter(|c| !c.passed).map(|c| c.component.as_str()).collect();
        assert_eq!(bad, ["fk"]);
    }
}
