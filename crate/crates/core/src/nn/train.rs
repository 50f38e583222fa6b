//! Training loops for both stages, the per-sequence objectives they
//! minimize, and inference helpers built on the trained networks.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::{AdamConfig, AdamState};
use super::layers::Module;
use super::nets::{anchor_targets, AnchorNet, Buffers, HeadKind, NetConfig, Standardizer, VelocityNet};
use super::nets::{ANCHOR_BETA, ANCHOR_GAMMA, ANCHOR_OUT, ANCHOR_TAU, ANCHOR_THETA};
use crate::error::{invalid, Error, Result};
use crate::flowmatch::{
    fm_loss_with_grad, make_uncond_condition, masked_path, sample, sample_source_noise, Block, CompositeLatent,
    DecodeContext, KnownMask, LatentCodec, NoiseSpec, SamplerConfig, V_ROOT_SCALE,
};
use crate::losses::{
    joint_bone_consistency_grad, projection_loss_grad, projection_weight, regression_losses_grad, LossContext,
    LossReport, LossWeights, MotionPrediction, PredictionGrad, RegressionScope, RegressionTarget,
};
use crate::motion::{ConditionSet, MotionSequence, MotionState, StructuralAnchor, CONDITION_DIM, NUM_KEYPOINTS};
use crate::rotation::Vec3;
use crate::skeleton::{fk_backward, fk_with_cache, BodyShape, PoseGrad, NUM_BETAS, NUM_BODY_JOINTS, NUM_JOINTS};
use crate::synthdata::DatasetRecord;
use crate::worldmotion::GravityFrame;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub weights: LossWeights,
    pub noise: NoiseSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            epochs: 40,
            batch: 4,
            lr: 1e-3,
            p_drop: 0.1,
            weights: LossWeights::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("epochs and batch must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(invalid(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if self.net.dim == 0 || self.net.dim % 2 != 0 {
            return Err(invalid("model dim must be even and positive"));
        }
        self.weights.validate()?;
        self.noise.validate()
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Default)]
struct EpochAccum {
    n: usize,
    total: f64,
    terms: BTreeMap<String, f64>,
}

impl EpochAccum {
    fn add(&mut self, r: &LossReport) {
        self.n += 1;
        self.total += r.total;
        for t in &r.terms {
            *self.terms.entry(t.name.to_string()).or_default() += t.value;
        }
    }

    fn finish(self, epoch: usize) -> Result<EpochStats> {
        let n = self.n.max(1) as f64;
        let total = self.total / n;
        if !total.is_finite() {
            return Err(Error::TrainingDivergence { epoch });
        }
        Ok(EpochStats {
            epoch,
            total,
            terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
        })
    }
}

/// With probability `p_drop` replace the condition by its anchor-only
/// version.
pub fn condition_dropout<R: Rng + ?Sized>(c: &ConditionSet, p_drop: f64, rng: &mut R) -> Result<ConditionSet> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(invalid(format!("p_drop must lie in [0, 1], got {p_drop}")));
    }
    let u: f64 = rng.random();
    Ok(if u < p_drop { make_uncond_condition(c) } else { c.clone() })
}

/// Round every parameter and buffer to the nearest `f32`, so that the
/// checkpoint format stores the model exactly.
pub fn quantize_f32<M: Module + Buffers + ?Sized>(m: &mut M) {
    m.visit("", &mut |_, p| p.value.mapv_inplace(|v| v as f32 as f64));
    for (_, b) in m.buffers_mut() {
        b.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

fn batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn check_nonempty(records: &[DatasetRecord]) -> Result<()> {
    if records.is_empty() || records.iter().any(|r| r.is_empty()) {
        return Err(invalid("training needs a non-empty dataset of non-empty sequences"));
    }
    Ok(())
}

fn stage1_condition(c: &ConditionSet) -> ConditionSet {
    let mut c = c.clone();
    c.torso.fill(0.0);
    c
}

/// Anchor-stage prediction from raw head outputs. Non-torso rotations are
/// zero and the world fields are absent.
pub fn anchor_prediction(out: &Array2<f64>, ctx: &LossContext) -> MotionPrediction {
    let anchor = super::nets::anchor_from_output(out);
    let n = anchor.len();
    MotionPrediction {
        body_pose: (0..n).map(|t| anchor.camera_pose(t, &ctx.partition, &[]).body_pose).collect(),
        cam_orient: anchor.cam_orient,
        cam_transl: anchor.cam_transl,
        shape: anchor.shape,
        gamma_gv: Vec::new(),
        v_root: Vec::new(),
    }
}

/// First-stage objective for one sequence and its gradient on the raw
/// head outputs.
pub fn stage1_objective(
    out: &Array2<f64>,
    target: &RegressionTarget,
    ctx: &LossContext,
    weights: &LossWeights,
) -> Result<(LossReport, Array2<f64>)> {
    let pred = anchor_prediction(out, ctx);
    let (report, g) = regression_losses_grad(&pred, target, ctx, weights, RegressionScope::Anchor)?;
    let n = out.nrows();
    let mut d = Array2::zeros((n, ANCHOR_OUT));
    for t in 0..n {
        for (k, &j) in ctx.partition.torso_ids.iter().enumerate() {
            for i in 0..3 {
                d[[t, ANCHOR_THETA + 3 * k + i]] = g.body_pose[t][j - 1][i];
            }
        }
        for i in 0..3 {
            d[[t, ANCHOR_GAMMA + i]] = g.cam_orient[t][i];
            d[[t, ANCHOR_TAU + i]] = g.cam_transl[t][i];
        }
        for i in 0..NUM_BETAS {
            d[[t, ANCHOR_BETA + i]] = g.shape[i] / n as f64;
        }
    }
    Ok((report, d))
}

/// Train the anchor regressor. Returns the network (rounded to `f32`) and
/// per-epoch mean losses.
pub fn train_stage1<R: Rng + ?Sized>(
    records: &[DatasetRecord],
    config: &TrainConfig,
    ctx: &LossContext,
    codec: &LatentCodec,
    rng: &mut R,
) -> Result<(AnchorNet, Vec<EpochStats>)> {
    check_nonempty(records)?;
    config.validate()?;
    let conds: Vec<Array2<f64>> = records.iter().map(|r| stage1_condition(&r.obs.cond).to_matrix()).collect();
    let targets: Vec<RegressionTarget> = records
        .iter()
        .map(|r| RegressionTarget::new(&r.gt, codec.gravity_frame(&r.gt)?, ctx))
        .collect::<Result<_>>()?;
    let outs: Vec<Array2<f64>> = records
        .iter()
        .map(|r| anchor_targets(&StructuralAnchor::from_sequence(&r.gt, &ctx.partition)))
        .collect();
    let cond_stats = Standardizer::fit(conds.iter().map(|c| c.view()), CONDITION_DIM);
    let out_stats = Standardizer::fit(outs.iter().map(|c| c.view()), ANCHOR_OUT);
    let mut net = AnchorNet::new(rng, config.net, cond_stats, out_stats)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut acc = EpochAccum::default();
        for b in batches(records.len(), config.batch, rng) {
            net.zero_grad();
            for &i in &b {
                let (out, cache) = net.forward(&conds[i])?;
                let (report, mut d) = stage1_objective(&out, &targets[i], ctx, &config.weights)?;
                if !report.total.is_finite() {
                    return Err(Error::TrainingDivergence { epoch });
                }
                d /= b.len() as f64;
                net.backward(&cache, &d);
                acc.add(&report);
            }
            adam.step(&mut net)?;
        }
        curve.push(acc.finish(epoch)?);
    }
    quantize_f32(&mut net);
    Ok((net, curve))
}

/// Where the second stage takes its anchor from during training.
#[derive(Debug, Clone, Copy)]
pub enum AnchorSource<'a> {
    GroundTruth,
    Stage1(&'a AnchorNet),
}

/// Anchor used for a record under the given source.
pub fn record_anchor(record: &DatasetRecord, source: AnchorSource<'_>, ctx: &LossContext) -> Result<StructuralAnchor> {
    match source {
        AnchorSource::GroundTruth => Ok(StructuralAnchor::from_sequence(&record.gt, &ctx.partition)),
        AnchorSource::Stage1(net) => net.predict(&stage1_condition(&record.obs.cond)),
    }
}

/// Everything the second-stage objective needs for one sequence.
#[derive(Debug, Clone)]
pub struct Stage2Item {
    /// Ground-truth latent with the known blocks taken from the anchor.
    pub z: Array2<f64>,
    pub target: RegressionTarget,
    pub cond: ConditionSet,
    pub keypoints: Vec<[[f64; 2]; NUM_KEYPOINTS]>,
    pub visible: Vec<[bool; NUM_KEYPOINTS]>,
}

impl Stage2Item {
    pub fn new(record: &DatasetRecord, anchor: &StructuralAnchor, ctx: &LossContext, codec: &LatentCodec) -> Result<Self> {
        let mut z = codec.build_latent(&record.gt)?.data;
        let za = codec.anchor_latent(anchor).data;
        let mask = KnownMask::new(&codec.layout);
        for (c, m) in mask.mask.iter().enumerate() {
            if *m == 0.0 {
                z.column_mut(c).assign(&za.column(c));
            }
        }
        Ok(Stage2Item {
            z,
            target: RegressionTarget::new(&record.gt, codec.gravity_frame(&record.gt)?, ctx)?,
            cond: record.obs.cond.clone().with_anchor(anchor),
            keypoints: record.obs.keypoints.clone(),
            visible: record.obs.visible.clone(),
        })
    }
}

/// Motion fields read from a latent.
pub fn prediction_from_latent(z: &Array2<f64>, codec: &LatentCodec) -> MotionPrediction {
    let lat = CompositeLatent {
        data: z.clone(),
        layout: codec.layout.clone(),
    };
    let n = z.nrows();
    let p = &codec.partition;
    let (ob, _) = codec.layout.block(Block::Beta);
    let mut beta = [0.0; NUM_BETAS];
    for (i, b) in beta.iter_mut().enumerate() {
        *b = z.column(ob + i).mean().unwrap_or(0.0);
    }
    let mut body_pose = vec![[Vec3::zeros(); NUM_BODY_JOINTS]; n];
    for (t, bp) in body_pose.iter_mut().enumerate() {
        for (k, &j) in p.torso_ids.iter().enumerate() {
            bp[j - 1] = lat.get3(t, Block::ThetaTorso, k);
        }
        for (k, &j) in p.non_torso_ids.iter().enumerate() {
            bp[j - 1] = lat.get3(t, Block::ThetaNon, k);
        }
    }
    MotionPrediction {
        body_pose,
        cam_orient: (0..n).map(|t| lat.get3(t, Block::GammaC, 0)).collect(),
        cam_transl: (0..n).map(|t| lat.get3(t, Block::TauC, 0)).collect(),
        shape: BodyShape::new(beta),
        gamma_gv: (0..n).map(|t| lat.get3(t, Block::GammaGv, 0)).collect(),
        v_root: (0..n).map(|t| lat.get3(t, Block::VRoot, 0) / V_ROOT_SCALE).collect(),
    }
}

fn add3(d: &mut Array2<f64>, t: usize, col: usize, v: &Vec3) {
    for i in 0..3 {
        d[[t, col + i]] += v[i];
    }
}

/// Scatter a prediction gradient back onto latent columns (the inverse
/// of [`prediction_from_latent`]).
pub fn latent_grad_from_prediction(g: &PredictionGrad, codec: &LatentCodec, d: &mut Array2<f64>) {
    let n = d.nrows();
    let l = &codec.layout;
    let p = &codec.partition;
    let (ob, _) = l.block(Block::Beta);
    for t in 0..n {
        for (k, &j) in p.torso_ids.iter().enumerate() {
            add3(d, t, l.block(Block::ThetaTorso).0 + 3 * k, &g.body_pose[t][j - 1]);
        }
        for (k, &j) in p.non_torso_ids.iter().enumerate() {
            add3(d, t, l.block(Block::ThetaNon).0 + 3 * k, &g.body_pose[t][j - 1]);
        }
        add3(d, t, l.block(Block::GammaC).0, &g.cam_orient[t]);
        add3(d, t, l.block(Block::TauC).0, &g.cam_transl[t]);
        add3(d, t, l.block(Block::GammaGv).0, &g.gamma_gv[t]);
        add3(d, t, l.block(Block::VRoot).0, &(g.v_root[t] / V_ROOT_SCALE));
        for i in 0..NUM_BETAS {
            d[[t, ob + i]] += g.shape[i] / n as f64;
        }
    }
}

fn add_pose_grad(g: &mut PredictionGrad, t: usize, pg: &PoseGrad) {
    for (a, b) in g.body_pose[t].iter_mut().zip(pg.body_pose.iter()) {
        *a += b;
    }
    g.cam_orient[t] += pg.global_orient;
    g.cam_transl[t] += pg.root_transl;
    for (a, b) in g.shape.iter_mut().zip(pg.beta.iter()) {
        *a += b;
    }
}

/// Geometric losses on a completed latent `z_hat`: full regression,
/// joint-bone consistency between the joint branch and forward kinematics,
/// and reprojection of the generated joints. Returns the report and the
/// gradient on `z_hat`.
pub fn completion_losses(
    z_hat: &Array2<f64>,
    item: &Stage2Item,
    ctx: &LossContext,
    codec: &LatentCodec,
    weights: &LossWeights,
    proj_weight: f64,
) -> Result<(LossReport, Array2<f64>)> {
    let n = z_hat.nrows();
    let pred = prediction_from_latent(z_hat, codec);
    let (mut report, mut g) = regression_losses_grad(&pred, &item.target, ctx, weights, RegressionScope::Full)?;
    let ids: Vec<usize> = ctx.partition.torso_ids.iter().chain(&ctx.partition.non_torso_ids).copied().collect();
    let lat = CompositeLatent {
        data: z_hat.clone(),
        layout: codec.layout.clone(),
    };
    let nt = ctx.partition.torso_ids.len();
    let mut j_hat = Vec::with_capacity(n);
    let mut j_fk = Vec::with_capacity(n);
    let mut j_cam = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for t in 0..n {
        let pose = pred.camera_pose(t);
        let fk = fk_with_cache(&pose, &pred.shape, &ctx.skeleton);
        j_hat.push(
            (0..ids.len())
                .map(|k| if k < nt { lat.get3(t, Block::JTorso, k) } else { lat.get3(t, Block::JNon, k - nt) })
                .collect::<Vec<_>>(),
        );
        j_fk.push(ids.iter().map(|&j| fk.joints[j]).collect::<Vec<_>>());
        j_cam.push(fk.joints);
        caches.push((pose, fk));
    }
    let (cons, g_hat, g_fk) = joint_bone_consistency_grad(&j_hat, &j_fk, &ids, &ctx.pairs, ctx.delta_3d)?;
    let fx = ctx.intrinsics.fx;
    let (proj, g_proj) = projection_loss_grad(
        &j_cam,
        &item.keypoints,
        &item.visible,
        &ctx.partition.non_torso_ids,
        &ctx.intrinsics,
        ctx.delta_px,
    );
    report.push("consistency", weights.w_cons, cons);
    report.push("projection", proj_weight, proj / fx);
    let mut d = Array2::zeros(z_hat.dim());
    for t in 0..n {
        let mut dj = [Vec3::zeros(); NUM_JOINTS];
        for (k, &j) in ids.iter().enumerate() {
            dj[j] += weights.w_cons * g_fk[t][k];
            let (b, kk) = if k < nt { (Block::JTorso, k) } else { (Block::JNon, k - nt) };
            add3(&mut d, t, codec.layout.block(b).0 + 3 * kk, &(weights.w_cons * g_hat[t][k]));
        }
        for j in 0..NUM_JOINTS {
            dj[j] += proj_weight / fx * g_proj[t][j];
        }
        let (pose, fk) = &caches[t];
        let pg = fk_backward(pose, fk, &ctx.skeleton, &dj, None);
        add_pose_grad(&mut g, t, &pg);
    }
    latent_grad_from_prediction(&g, codec, &mut d);
    Ok((report, d))
}

/// Second-stage objective given the network output `out` at path point
/// `z_t`. For the velocity head the completion is the one-step estimate
/// `z_t + (1 - t) v`; for the direct head it is the output itself. Returns
/// the report and the gradient on `out`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_objective(
    kind: HeadKind,
    out: &Array2<f64>,
    z_t: &Array2<f64>,
    eps: &Array2<f64>,
    t: f64,
    item: &Stage2Item,
    mask: &KnownMask,
    ctx: &LossContext,
    codec: &LatentCodec,
    weights: &LossWeights,
    proj_weight: f64,
) -> Result<(LossReport, Array2<f64>)> {
    // The one-step estimate is only informative late on the path, so the
    // geometric terms are scaled by t for the velocity head.
    let (factor, aux_scale) = match kind {
        HeadKind::Velocity => (1.0 - t, t),
        HeadKind::Direct => (1.0, 1.0),
    };
    let mut z_hat = z_t.clone();
    for r in 0..z_hat.nrows() {
        for (c, m) in mask.mask.iter().enumerate() {
            if *m != 0.0 {
                z_hat[[r, c]] = match kind {
                    HeadKind::Velocity => z_t[[r, c]] + factor * out[[r, c]],
                    HeadKind::Direct => out[[r, c]],
                };
            }
        }
    }
    let (fm, mut d_out) = match kind {
        HeadKind::Velocity => fm_loss_with_grad(out, &item.z, eps, mask)?,
        // Squared error of the direct estimate, in the same units.
        HeadKind::Direct => fm_loss_with_grad(out, &item.z, &Array2::zeros(out.dim()), mask)?,
    };
    d_out *= weights.w_fm;
    let mut report = LossReport::default();
    report.push("fm", weights.w_fm, fm);
    let any_aux = weights.w_pose + weights.w_joints3d + weights.w_transl + weights.w_world_transl + weights.w_cons + weights.w_vertices + weights.w_kp2d + proj_weight > 0.0;
    if any_aux && aux_scale > 0.0 {
        let (mut aux, dz) = completion_losses(&z_hat, item, ctx, codec, weights, proj_weight)?;
        aux.terms.iter_mut().for_each(|t| t.weight *= aux_scale);
        aux.total *= aux_scale;
        report.merge(&aux);
        for r in 0..d_out.nrows() {
            for (c, m) in mask.mask.iter().enumerate() {
                d_out[[r, c]] += m * factor * aux_scale * dz[[r, c]];
            }
        }
    }
    Ok((report, d_out))
}

/// Network input for the direct head: generated coordinates zeroed.
pub fn direct_input(z: &Array2<f64>, mask: &KnownMask) -> Array2<f64> {
    let mut x = z.clone();
    for (c, m) in mask.mask.iter().enumerate() {
        if *m != 0.0 {
            x.column_mut(c).fill(0.0);
        }
    }
    x
}

/// Train the second-stage network. `kind` selects the flow-matching
/// velocity head or the deterministic direct head.
pub fn train_stage2<R: Rng + ?Sized>(
    records: &[DatasetRecord],
    anchor_source: AnchorSource<'_>,
    kind: HeadKind,
    config: &TrainConfig,
    ctx: &LossContext,
    codec: &LatentCodec,
    rng: &mut R,
) -> Result<(VelocityNet, Vec<EpochStats>)> {
    check_nonempty(records)?;
    config.validate()?;
    let items: Vec<Stage2Item> = records
        .iter()
        .map(|r| Stage2Item::new(r, &record_anchor(r, anchor_source, ctx)?, ctx, codec))
        .collect::<Result<_>>()?;
    let latent_stats = Standardizer::fit(items.iter().map(|i| i.z.view()), codec.layout.frame_width());
    let conds: Vec<Array2<f64>> = items.iter().map(|i| i.cond.to_matrix()).collect();
    let cond_stats = Standardizer::fit(conds.iter().map(|c| c.view()), CONDITION_DIM);
    let mut net = VelocityNet::new(rng, config.net, kind, &codec.layout, &config.noise, latent_stats, cond_stats)?;
    let mask = KnownMask::new(&codec.layout);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let steps_per_epoch = records.len().div_ceil(config.batch);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut acc = EpochAccum::default();
        for b in batches(records.len(), config.batch, rng) {
            let w_proj = projection_weight(step, total_steps, config.weights.w_proj_max, config.weights.r_proj);
            net.zero_grad();
            for &i in &b {
                let item = &items[i];
                let cond = condition_dropout(&item.cond, config.p_drop, rng)?.to_matrix();
                let (t, eps, z_t, input) = match kind {
                    HeadKind::Velocity => {
                        let t: f64 = rng.random();
                        let eps = sample_source_noise(rng, item.z.nrows(), &codec.layout, &config.noise)?;
                        let z_t = masked_path(&item.z, &eps, &mask, t)?;
                        (t, eps, z_t.clone(), z_t)
                    }
                    HeadKind::Direct => {
                        let zero = Array2::zeros(item.z.dim());
                        (0.0, zero, item.z.clone(), direct_input(&item.z, &mask))
                    }
                };
                let (out, cache) = net.forward(&input, t, &cond)?;
                let (report, mut d) = stage2_objective(kind, &out, &z_t, &eps, t, item, &mask, ctx, codec, &config.weights, w_proj)?;
                if !report.total.is_finite() {
                    return Err(Error::TrainingDivergence { epoch });
                }
                d /= b.len() as f64;
                net.backward(&cache, &d);
                acc.add(&report);
            }
            adam.step(&mut net)?;
            step += 1;
        }
        curve.push(acc.finish(epoch)?);
    }
    quantize_f32(&mut net);
    Ok((net, curve))
}

impl VelocityNet {
    /// Per-block source-noise scales stored in the network.
    pub fn noise_spec(&self, codec: &LatentCodec) -> NoiseSpec {
        NoiseSpec {
            sigma: Block::ALL
                .iter()
                .map(|&b| (b, self.sigma[codec.layout.block(b).0]))
                .collect(),
        }
    }
}

/// Decoding context used at inference: the world frame is the gravity-view
/// frame itself and the root starts at the origin.
pub fn inference_context(codec: &LatentCodec) -> Result<DecodeContext> {
    Ok(DecodeContext {
        frame: GravityFrame::new(&codec.gravity, None)?,
        tau0: Vec3::zeros(),
    })
}

/// Complete a sequence from an anchor and its observations. The velocity
/// head integrates the flow from fresh noise; the direct head predicts in
/// one pass and ignores `rng`.
pub fn complete_motion<R: Rng + ?Sized>(
    net: &VelocityNet,
    anchor: &StructuralAnchor,
    cond: &ConditionSet,
    sampler: &SamplerConfig,
    codec: &LatentCodec,
    fps: f64,
    rng: &mut R,
) -> Result<MotionSequence> {
    let cond = cond.clone().with_anchor(anchor);
    let za = codec.anchor_latent(anchor);
    let mask = KnownMask::new(&codec.layout);
    let z = match net.kind {
        HeadKind::Velocity => sample(net, &za, &mask, &cond, sampler, &net.noise_spec(codec), rng)?,
        HeadKind::Direct => {
            let (out, _) = net.forward(&direct_input(&za.data, &mask), 0.0, &cond.to_matrix())?;
            let mut data = za.data.clone();
            for (c, m) in mask.mask.iter().enumerate() {
                if *m != 0.0 {
                    data.column_mut(c).assign(&out.column(c));
                }
            }
            CompositeLatent {
                data,
                layout: codec.layout.clone(),
            }
        }
    };
    let mut motion = codec.decode_latent(&z, &inference_context(codec)?, fps)?.motion;
    motion.shape = anchor.shape;
    Ok(motion)
}

/// Reference completion: anchor fields with every non-torso rotation at
/// zero and a static world root.
pub fn zero_pose_motion(anchor: &StructuralAnchor, codec: &LatentCodec, fps: f64) -> MotionSequence {
    let frames = (0..anchor.len())
        .map(|t| {
            let p = anchor.camera_pose(t, &codec.partition, &[]);
            MotionState {
                body_pose: p.body_pose,
                cam_orient: p.global_orient,
                cam_transl: p.root_transl,
                ..MotionState::default()
            }
        })
        .collect();
    MotionSequence {
        frames,
        shape: anchor.shape,
        fps,
    }
}
