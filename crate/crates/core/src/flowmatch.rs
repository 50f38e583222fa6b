//! Masked conditional flow matching over the composite motion latent.
//!
//! The latent stacks, per frame, the torso and non-torso rotations, the
//! matching camera-space joints, shape, camera trajectory, gravity-view
//! orientation and root velocity. Known coordinates (the structural anchor)
//! stay fixed along the probability path and during sampling; only the
//! remaining coordinates are transported from noise to data.

use ndarray::{s, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::motion::{ConditionSet, MotionSequence, MotionState, StructuralAnchor};
use crate::rotation::{exp_so3, Vec3};
use crate::skeleton::{fk_with_cache, BodyShape, Partition, Skeleton, NUM_BETAS};
use crate::worldmotion::{encode_gv_in, recover_world, GravityFrame, WorldTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    ThetaTorso,
    ThetaNon,
    JTorso,
    JNon,
    Beta,
    GammaC,
    TauC,
    GammaGv,
    VRoot,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::ThetaTorso,
        Block::ThetaNon,
        Block::JTorso,
        Block::JNon,
        Block::Beta,
        Block::GammaC,
        Block::TauC,
        Block::GammaGv,
        Block::VRoot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::ThetaTorso => "theta_torso",
            Block::ThetaNon => "theta_non",
            Block::JTorso => "J_torso",
            Block::JNon => "J_non",
            Block::Beta => "beta",
            Block::GammaC => "gamma_c",
            Block::TauC => "tau_c",
            Block::GammaGv => "gamma_gv",
            Block::VRoot => "v_root",
        }
    }

    /// Whether the block belongs to the known (anchor) subset.
    pub fn is_known(self) -> bool {
        matches!(
            self,
            Block::ThetaTorso | Block::JTorso | Block::Beta | Block::GammaC | Block::TauC
        )
    }
}

/// Root velocity is stored in the latent in meters per 1/30 s rather than
/// meters per frame, which puts it on the same scale as the source noise.
pub const V_ROOT_SCALE: f64 = 30.0;

/// Per-frame block layout of the composite latent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentLayout {
    blocks: Vec<(Block, usize, usize)>,
    frame_width: usize,
}

impl LatentLayout {
    pub fn new(partition: &Partition) -> Self {
        let widths = [
            (Block::ThetaTorso, 3 * partition.torso_ids.len()),
            (Block::ThetaNon, 3 * partition.non_torso_ids.len()),
            (Block::JTorso, 3 * partition.torso_ids.len()),
            (Block::JNon, 3 * partition.non_torso_ids.len()),
            (Block::Beta, NUM_BETAS),
            (Block::GammaC, 3),
            (Block::TauC, 3),
            (Block::GammaGv, 3),
            (Block::VRoot, 3),
        ];
        let mut offset = 0;
        let blocks = widths
            .iter()
            .map(|&(b, w)| {
                let e = (b, offset, w);
                offset += w;
                e
            })
            .collect();
        LatentLayout {
            blocks,
            frame_width: offset,
        }
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    /// Offset and width of a block.
    pub fn block(&self, b: Block) -> (usize, usize) {
        self.blocks
            .iter()
            .find(|(x, _, _)| *x == b)
            .map(|(_, o, w)| (*o, *w))
            .expect("every block is present")
    }

    pub fn range(&self, b: Block) -> std::ops::Range<usize> {
        let (o, w) = self.block(b);
        o..o + w
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Block, usize, usize)> + '_ {
        self.blocks.iter().copied()
    }

    /// Short stable hash of the layout, embedded in files.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (b, o, w) in &self.blocks {
            h.update(format!("{}:{}:{};", b.name(), o, w).as_bytes());
        }
        h.update(format!("v_root_scale:{V_ROOT_SCALE}").as_bytes());
        hex_prefix(&h.finalize(), 16)
    }
}

impl Default for LatentLayout {
    fn default() -> Self {
        LatentLayout::new(&Partition::default())
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()[..n].to_string()
}

/// Frames × frame_width latent.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLatent {
    pub data: Array2<f64>,
    pub layout: LatentLayout,
}

impl CompositeLatent {
    pub fn zeros(frames: usize, layout: LatentLayout) -> Self {
        CompositeLatent {
            data: Array2::zeros((frames, layout.frame_width())),
            layout,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn get3(&self, t: usize, b: Block, k: usize) -> Vec3 {
        let (o, _) = self.layout.block(b);
        Vec3::new(
            self.data[[t, o + 3 * k]],
            self.data[[t, o + 3 * k + 1]],
            self.data[[t, o + 3 * k + 2]],
        )
    }

    pub fn set3(&mut self, t: usize, b: Block, k: usize, v: &Vec3) {
        let (o, _) = self.layout.block(b);
        for i in 0..3 {
            self.data[[t, o + 3 * k + i]] = v[i];
        }
    }
}

/// Binary mask over one latent frame: 0 on known coordinates, 1 on the
/// coordinates to generate. Constant over time.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownMask {
    pub mask: Vec<f64>,
}

impl KnownMask {
    pub fn new(layout: &LatentLayout) -> Self {
        let mut mask = vec![0.0; layout.frame_width()];
        for (b, o, w) in layout.blocks() {
            if !b.is_known() {
                mask[o..o + w].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        KnownMask { mask }
    }

    pub fn count_unknown(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0.0).count()
    }

    #[inline]
    pub fn is_unknown(&self, col: usize) -> bool {
        self.mask[col] != 0.0
    }
}

/// Per-block standard deviation of the source noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma: Vec<(Block, f64)>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: Block::ALL
                .iter()
                .map(|&b| (b, if matches!(b, Block::JTorso | Block::JNon) { 0.5 } else { 1.0 }))
                .collect(),
        }
    }
}

impl NoiseSpec {
    pub fn uniform(sigma: f64) -> Self {
        NoiseSpec {
            sigma: Block::ALL.iter().map(|&b| (b, sigma)).collect(),
        }
    }

    pub fn sigma_of(&self, b: Block) -> f64 {
        self.sigma.iter().find(|(x, _)| *x == b).map(|(_, s)| *s).unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (b, s) in &self.sigma {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(invalid(format!("noise sigma for {} must be positive, got {s}", b.name())));
            }
        }
        Ok(())
    }

    /// Per-column standard deviations for a layout.
    pub fn column_sigma(&self, layout: &LatentLayout) -> Vec<f64> {
        let mut out = vec![1.0; layout.frame_width()];
        for (b, o, w) in layout.blocks() {
            let s = self.sigma_of(b);
            out[o..o + w].iter_mut().for_each(|x| *x = s);
        }
        out
    }
}

/// Builds latents from motion and decodes latents back into motion.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    pub skeleton: Skeleton,
    pub partition: Partition,
    pub layout: LatentLayout,
    pub gravity: Vec3,
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec::new(Skeleton::template(), Partition::default(), Vec3::from(crate::worldmotion::DEFAULT_GRAVITY))
    }
}

/// What decoding needs beyond the latent: the gravity frame of the
/// sequence and its initial root position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeContext {
    pub frame: GravityFrame,
    pub tau0: Vec3,
}

/// Decoded motion plus the auxiliary joint-position branch.
#[derive(Debug, Clone)]
pub struct DecodedLatent {
    pub motion: MotionSequence,
    /// Per frame: torso joints then non-torso joints, in partition order.
    pub joints: Vec<Vec<Vec3>>,
}

impl LatentCodec {
    pub fn new(skeleton: Skeleton, partition: Partition, gravity: Vec3) -> Self {
        let layout = LatentLayout::new(&partition);
        LatentCodec {
            skeleton,
            partition,
            layout,
            gravity,
        }
    }

    /// Gravity frame anchored to the sequence's first-frame heading.
    pub fn gravity_frame(&self, seq: &MotionSequence) -> Result<GravityFrame> {
        let r0 = seq.frames.first().map(|f| exp_so3(&f.world_orient));
        GravityFrame::new(&self.gravity, r0.as_ref())
    }

    pub fn decode_context(&self, seq: &MotionSequence) -> Result<DecodeContext> {
        Ok(DecodeContext {
            frame: self.gravity_frame(seq)?,
            tau0: seq.frames.first().map(|f| f.world_transl).unwrap_or_else(Vec3::zeros),
        })
    }

    pub fn build_latent(&self, seq: &MotionSequence) -> Result<CompositeLatent> {
        if seq.is_empty() {
            return Err(invalid("cannot build a latent from an empty sequence"));
        }
        let frame = self.gravity_frame(seq)?;
        let (gamma_gv, v_root) = encode_gv_in(&seq.world_trajectory(), &frame)?;
        let mut z = CompositeLatent::zeros(seq.len(), self.layout.clone());
        for (t, f) in seq.frames.iter().enumerate() {
            let joints = fk_with_cache(&f.camera_pose(), &seq.shape, &self.skeleton).joints;
            for (k, &j) in self.partition.torso_ids.iter().enumerate() {
                z.set3(t, Block::ThetaTorso, k, &f.body_pose[j - 1]);
                z.set3(t, Block::JTorso, k, &joints[j]);
            }
            for (k, &j) in self.partition.non_torso_ids.iter().enumerate() {
                z.set3(t, Block::ThetaNon, k, &f.body_pose[j - 1]);
                z.set3(t, Block::JNon, k, &joints[j]);
            }
            let (ob, _) = self.layout.block(Block::Beta);
            for (i, b) in seq.shape.beta.iter().enumerate() {
                z.data[[t, ob + i]] = *b;
            }
            z.set3(t, Block::GammaC, 0, &f.cam_orient);
            z.set3(t, Block::TauC, 0, &f.cam_transl);
            z.set3(t, Block::GammaGv, 0, &gamma_gv[t]);
            z.set3(t, Block::VRoot, 0, &(v_root[t] * V_ROOT_SCALE));
        }
        Ok(z)
    }

    /// Latent with the anchor's known blocks filled and zeros elsewhere.
    pub fn anchor_latent(&self, anchor: &StructuralAnchor) -> CompositeLatent {
        let mut z = CompositeLatent::zeros(anchor.len(), self.layout.clone());
        let (ob, _) = self.layout.block(Block::Beta);
        for t in 0..anchor.len() {
            let pose = anchor.camera_pose(t, &self.partition, &[]);
            let joints = fk_with_cache(&pose, &anchor.shape, &self.skeleton).joints;
            for (k, &j) in self.partition.torso_ids.iter().enumerate() {
                z.set3(t, Block::ThetaTorso, k, &anchor.torso_pose[t][k]);
                z.set3(t, Block::JTorso, k, &joints[j]);
            }
            for (i, b) in anchor.shape.beta.iter().enumerate() {
                z.data[[t, ob + i]] = *b;
            }
            z.set3(t, Block::GammaC, 0, &anchor.cam_orient[t]);
            z.set3(t, Block::TauC, 0, &anchor.cam_transl[t]);
        }
        z
    }

    pub fn decode_latent(&self, z: &CompositeLatent, ctx: &DecodeContext, fps: f64) -> Result<DecodedLatent> {
        if z.layout != self.layout {
            return Err(Error::ShapeMismatch("latent layout differs from codec layout".into()));
        }
        if z.data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("latent has non-finite entries"));
        }
        let n = z.frames();
        let (ob, wb) = self.layout.block(Block::Beta);
        let mut beta = [0.0; NUM_BETAS];
        for (i, b) in beta.iter_mut().enumerate().take(wb) {
            *b = z.data.column(ob + i).mean().unwrap_or(0.0);
        }
        let gamma_gv: Vec<Vec3> = (0..n).map(|t| z.get3(t, Block::GammaGv, 0)).collect();
        let v_root: Vec<Vec3> = (0..n).map(|t| z.get3(t, Block::VRoot, 0) / V_ROOT_SCALE).collect();
        let world: WorldTrajectory = recover_world(&gamma_gv, &v_root, &ctx.frame, &ctx.tau0, fps)?;
        let mut frames = Vec::with_capacity(n);
        let mut joints = Vec::with_capacity(n);
        for t in 0..n {
            let mut state = MotionState::default();
            let mut jf = Vec::with_capacity(21);
            for (k, &j) in self.partition.torso_ids.iter().enumerate() {
                state.body_pose[j - 1] = z.get3(t, Block::ThetaTorso, k);
                jf.push(z.get3(t, Block::JTorso, k));
            }
            for (k, &j) in self.partition.non_torso_ids.iter().enumerate() {
                state.body_pose[j - 1] = z.get3(t, Block::ThetaNon, k);
                jf.push(z.get3(t, Block::JNon, k));
            }
            state.cam_orient = z.get3(t, Block::GammaC, 0);
            state.cam_transl = z.get3(t, Block::TauC, 0);
            state.world_orient = world.gamma_w[t];
            state.world_transl = world.tau_w[t];
            frames.push(state);
            joints.push(jf);
        }
        Ok(DecodedLatent {
            motion: MotionSequence {
                frames,
                shape: BodyShape::new(beta),
                fps,
            },
            joints,
        })
    }
}

/// Independent Gaussians with per-block standard deviations.
pub fn sample_source_noise<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    layout: &LatentLayout,
    spec: &NoiseSpec,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let sigma = spec.column_sigma(layout);
    let w = layout.frame_width();
    let mut out = Array2::zeros((frames, w));
    for t in 0..frames {
        for c in 0..w {
            let e: f64 = rng.sample(StandardNormal);
            out[[t, c]] = sigma[c] * e;
        }
    }
    Ok(out)
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>, mask: &KnownMask) -> Result<()> {
    if a.dim() != b.dim() || a.ncols() != mask.mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?} with mask width {}",
            a.dim(),
            b.dim(),
            mask.mask.len()
        )));
    }
    Ok(())
}

/// `z_t = (1 - M) * z + M * ((1 - t) * eps + t * z)`.
pub fn masked_path(z: &Array2<f64>, eps: &Array2<f64>, mask: &KnownMask, t: f64) -> Result<Array2<f64>> {
    check_shapes(z, eps, mask)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("path time {t} outside [0, 1]")));
    }
    let mut out = z.clone();
    for (mut zr, er) in out.rows_mut().into_iter().zip(eps.rows()) {
        for (c, m) in mask.mask.iter().enumerate() {
            if *m != 0.0 {
                zr[c] = (1.0 - t) * er[c] + t * zr[c];
            }
        }
    }
    Ok(out)
}

/// Mean squared velocity error over the generated coordinates.
pub fn fm_loss(v_pred: &Array2<f64>, z: &Array2<f64>, eps: &Array2<f64>, mask: &KnownMask) -> Result<f64> {
    Ok(fm_loss_with_grad(v_pred, z, eps, mask)?.0)
}

/// Loss and its gradient with respect to `v_pred`.
pub fn fm_loss_with_grad(
    v_pred: &Array2<f64>,
    z: &Array2<f64>,
    eps: &Array2<f64>,
    mask: &KnownMask,
) -> Result<(f64, Array2<f64>)> {
    check_shapes(v_pred, z, mask)?;
    check_shapes(z, eps, mask)?;
    let count = (mask.count_unknown() * z.nrows()).max(1) as f64;
    let mut grad = Array2::zeros(v_pred.dim());
    let mut total = 0.0;
    for t in 0..z.nrows() {
        for (c, m) in mask.mask.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            let r = v_pred[[t, c]] - (z[[t, c]] - eps[[t, c]]);
            total += r * r;
            grad[[t, c]] = 2.0 * r / count;
        }
    }
    Ok((total / count, grad))
}

/// Keep the anchor-related channels (bbox, camera motion, torso pose) and
/// zero the articulation-related ones (keypoint rays, image features).
pub fn make_uncond_condition(c: &ConditionSet) -> ConditionSet {
    let mut out = c.clone();
    out.rays.fill(0.0);
    out.image.fill(0.0);
    out
}

/// Classifier-free guidance in velocity space.
pub fn cfg_velocity(v_cond: &Array2<f64>, v_uncond: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(invalid(format!("guidance scale must be non-negative, got {scale}")));
    }
    if v_cond.dim() != v_uncond.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", v_cond.dim(), v_uncond.dim())));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    let mut out = v_uncond.clone();
    Zip::from(&mut out).and(v_cond).for_each(|u, &c| *u += scale * (c - *u));
    Ok(out)
}

/// A velocity model `v(z_t, t, c)`. Must be free of side effects.
pub trait VelocityField {
    fn velocity(&self, z_t: &Array2<f64>, t: f64, cond: &ConditionSet) -> Result<Array2<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(&Array2<f64>, f64, &ConditionSet) -> Array2<f64>,
{
    fn velocity(&self, z_t: &Array2<f64>, t: f64, cond: &ConditionSet) -> Result<Array2<f64>> {
        Ok(self(z_t, t, cond))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            cfg_scale: 1.5,
        }
    }
}

/// Euler integration of the guided velocity from t = 0 to 1. Generated
/// coordinates start from source noise; known coordinates are copied from
/// `anchor` and re-imposed after every update.
pub fn sample<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    vfield: &V,
    anchor: &CompositeLatent,
    mask: &KnownMask,
    cond: &ConditionSet,
    config: &SamplerConfig,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<CompositeLatent> {
    if config.steps == 0 {
        return Err(invalid("sampler needs at least one step"));
    }
    let frames = anchor.frames();
    let eps = sample_source_noise(rng, frames, &anchor.layout, spec)?;
    let mut z = anchor.data.clone();
    impose(&mut z, &eps, mask, true);
    let uncond = make_uncond_condition(cond);
    let dt = 1.0 / config.steps as f64;
    for k in 0..config.steps {
        let t = k as f64 * dt;
        let v_cond = vfield.velocity(&z, t, cond)?;
        let v = if config.cfg_scale == 1.0 {
            v_cond
        } else {
            let v_uncond = vfield.velocity(&z, t, &uncond)?;
            cfg_velocity(&v_cond, &v_uncond, config.cfg_scale)?
        };
        if v.dim() != z.dim() {
            return Err(Error::ShapeMismatch(format!("velocity {:?} vs latent {:?}", v.dim(), z.dim())));
        }
        for (mut zr, vr) in z.rows_mut().into_iter().zip(v.rows()) {
            for (c, m) in mask.mask.iter().enumerate() {
                if *m != 0.0 {
                    zr[c] += dt * vr[c];
                }
            }
        }
        impose(&mut z, &anchor.data, mask, false);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok(CompositeLatent {
        data: z,
        layout: anchor.layout.clone(),
    })
}

/// Copy `src` into `dst` on unknown (`unknown = true`) or known columns.
fn impose(dst: &mut Array2<f64>, src: &Array2<f64>, mask: &KnownMask, unknown: bool) {
    for (c, m) in mask.mask.iter().enumerate() {
        if (*m != 0.0) == unknown {
            dst.slice_mut(s![.., c]).assign(&src.slice(s![.., c]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_is_contiguous() {
        let l = LatentLayout::default();
        assert_eq!(l.frame_width(), 148);
        let mut end = 0;
        for (_, o, w) in l.blocks() {
            assert_eq!(o, end);
            end += w;
        }
        assert_eq!(end, 148);
        assert_eq!(l.block(Block::ThetaTorso).1, 24);
        assert_eq!(l.block(Block::JNon).1, 39);
    }

    #[test]
    fn default_mask_has_84_unknowns() {
        let l = LatentLayout::default();
        let m = KnownMask::new(&l);
        assert_eq!(m.count_unknown(), 84);
        for c in l.range(Block::TauC) {
            assert_eq!(m.mask[c], 0.0);
        }
        for c in l.range(Block::VRoot) {
            assert_eq!(m.mask[c], 1.0);
        }
    }

    #[test]
    fn zero_sigma_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NoiseSpec::uniform(0.0);
        assert!(sample_source_noise(&mut rng, 2, &LatentLayout::default(), &spec).is_err());
    }

    #[test]
    fn cfg_boundaries() {
        let c = Array2::from_elem((2, 3), 0.3);
        let u = Array2::from_elem((2, 3), -0.7);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        let z = Array2::zeros((2, 3));
        assert_eq!(cfg_velocity(&c, &z, 1.5).unwrap(), c.mapv(|x| 1.5 * x));
        assert!(cfg_velocity(&c, &u, -1.0).is_err());
    }

    #[test]
    fn path_endpoints() {
        let l = LatentLayout::default();
        let m = KnownMask::new(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_source_noise(&mut rng, 4, &l, &NoiseSpec::default()).unwrap();
        let e = sample_source_noise(&mut rng, 4, &l, &NoiseSpec::default()).unwrap();
        assert_eq!(masked_path(&z, &e, &m, 1.0).unwrap(), z);
        let p0 = masked_path(&z, &e, &m, 0.0).unwrap();
        for t in 0..4 {
            for c in 0..148 {
                let want = if m.is_unknown(c) { e[[t, c]] } else { z[[t, c]] };
                assert_eq!(p0[[t, c]], want);
            }
        }
        assert!(masked_path(&z, &e, &m, 1.5).is_err());
    }

    #[test]
    fn loss_zero_at_target_and_closed_form() {
        let l = LatentLayout::default();
        let m = KnownMask::new(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = sample_source_noise(&mut rng, 3, &l, &NoiseSpec::default()).unwrap();
        let e = sample_source_noise(&mut rng, 3, &l, &NoiseSpec::default()).unwrap();
        assert_eq!(fm_loss(&(&z - &e), &z, &e, &m).unwrap(), 0.0);
        let c = 0.7;
        let shifted = &e + &Array2::from_shape_fn((3, 148), |(_, col)| c * m.mask[col]);
        let loss = fm_loss(&Array2::zeros((3, 148)), &shifted, &e, &m).unwrap();
        assert!((loss - c * c).abs() < 1e-12);
    }

    #[test]
    fn uncond_is_idempotent() {
        let mut c = ConditionSet::zeros(3);
        c.rays.fill(0.5);
        c.image.fill(-1.0);
        c.bbox.fill(2.0);
        let u = make_uncond_condition(&c);
        assert_eq!(u.bbox, c.bbox);
        assert!(u.rays.iter().all(|x| *x == 0.0) && u.image.iter().all(|x| *x == 0.0));
        assert_eq!(make_uncond_condition(&u), u);
    }
}
