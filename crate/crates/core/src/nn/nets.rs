//! The first-stage anchor regressor and the second-stage velocity network.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::{join, Activation, AttentionBlock, BlockCache, Dense, DenseCache, LayerNorm, LayerNormCache, Module, Param};
use crate::camera::sinusoidal_embed;
use crate::error::{Error, Result};
use crate::flowmatch::{KnownMask, LatentLayout, NoiseSpec, VelocityField};
use crate::motion::{ConditionSet, StructuralAnchor, BBOX_DIM, CAMERA_FEATURE_DIM, CONDITION_DIM, IMAGE_FEATURE_DIM, RAYS_DIM};
use crate::rotation::Vec3;
use crate::skeleton::{BodyShape, NUM_BETAS};

/// Width and depth of the attention trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub dim: usize,
    pub blocks: usize,
    pub time_freqs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            dim: 64,
            blocks: 2,
            time_freqs: 8,
        }
    }
}

/// Per-column affine normalization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Column statistics over the stacked rows of `mats`. Constant columns
    /// get unit scale.
    pub fn fit<'a>(mats: impl IntoIterator<Item = ArrayView2<'a, f64>>, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mats: Vec<_> = mats.into_iter().collect();
        for m in &mats {
            for row in m.rows() {
                n += 1;
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                }
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        for m in &mats {
            for row in m.rows() {
                for (c, v) in row.iter().enumerate() {
                    sq[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd.max(1e-3)
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Named non-trainable vectors stored alongside parameters.
pub trait Buffers {
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)>;
}

fn trunk_visit(
    blocks: &mut [AttentionBlock],
    norm: &mut LayerNorm,
    f: &mut dyn FnMut(&str, &mut Param),
) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit(&format!("block{i}"), f);
    }
    norm.visit("norm", f);
}

fn trunk_forward(
    blocks: &[AttentionBlock],
    norm: &LayerNorm,
    x: Array2<f64>,
) -> (Array2<f64>, Vec<BlockCache>, LayerNormCache) {
    let mut h = x;
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = b.forward(&h, None);
        caches.push(c);
        h = y;
    }
    let (y, nc) = norm.forward(&h);
    (y, caches, nc)
}

fn trunk_backward(
    blocks: &mut [AttentionBlock],
    norm: &mut LayerNorm,
    caches: &[BlockCache],
    nc: &LayerNormCache,
    dy: &Array2<f64>,
) -> Array2<f64> {
    let mut d = norm.backward(nc, dy);
    for (b, c) in blocks.iter_mut().zip(caches).rev() {
        d = b.backward(c, &d);
    }
    d
}

/// Column ranges of the condition groups in [`ConditionSet::to_matrix`].
pub const OBS_GROUPS: [(usize, usize); 4] = [
    (0, BBOX_DIM),
    (BBOX_DIM, RAYS_DIM),
    (BBOX_DIM + RAYS_DIM, IMAGE_FEATURE_DIM),
    (BBOX_DIM + RAYS_DIM + IMAGE_FEATURE_DIM, CAMERA_FEATURE_DIM),
];

/// Anchor head layout: torso rotations, camera orientation, camera
/// translation, shape.
pub const ANCHOR_THETA: usize = 0;
pub const ANCHOR_GAMMA: usize = 24;
pub const ANCHOR_TAU: usize = 27;
pub const ANCHOR_BETA: usize = 30;
pub const ANCHOR_OUT: usize = 40;

/// Deterministic regressor of the structural anchor from observations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorNet {
    pub config: NetConfig,
    pub encoders: Vec<Dense>,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub head: Dense,
    pub cond_stats: Standardizer,
    pub out_stats: Standardizer,
}

#[derive(Debug, Clone)]
pub struct AnchorCache {
    enc: Vec<DenseCache>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    head: DenseCache,
}

impl AnchorNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: NetConfig, cond_stats: Standardizer, out_stats: Standardizer) -> Result<Self> {
        let d = config.dim;
        let encoders = OBS_GROUPS
            .iter()
            .map(|&(_, w)| Dense::new(rng, w, d, Activation::Identity, 1.0))
            .collect();
        let blocks = (0..config.blocks)
            .map(|_| AttentionBlock::new(rng, d))
            .collect::<Result<_>>()?;
        Ok(AnchorNet {
            config,
            encoders,
            blocks,
            norm: LayerNorm::new(d),
            head: Dense::new(rng, d, ANCHOR_OUT, Activation::Identity, 0.1),
            cond_stats,
            out_stats,
        })
    }

    /// Per-frame outputs in target units. Shape columns are per frame; the
    /// sequence shape is their mean.
    pub fn forward(&self, cond: &Array2<f64>) -> Result<(Array2<f64>, AnchorCache)> {
        if cond.ncols() != CONDITION_DIM || cond.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!("condition matrix is {:?}", cond.dim())));
        }
        let x = self.cond_stats.apply(&cond.view());
        let mut tok = Array2::zeros((x.nrows(), self.config.dim));
        let mut enc = Vec::with_capacity(4);
        for (e, &(o, w)) in self.encoders.iter().zip(OBS_GROUPS.iter()) {
            let (y, c) = e.forward(&x.slice(s![.., o..o + w]).to_owned());
            tok += &y;
            enc.push(c);
        }
        let (h, blocks, norm) = trunk_forward(&self.blocks, &self.norm, tok);
        let (o, head) = self.head.forward(&h);
        let mut out = o;
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.out_stats.std[c] + self.out_stats.mean[c];
            }
        }
        Ok((out, AnchorCache { enc, blocks, norm, head }))
    }

    /// Accumulates parameter gradients given the gradient on the outputs.
    pub fn backward(&mut self, cache: &AnchorCache, d_out: &Array2<f64>) {
        let mut d = d_out.clone();
        for mut row in d.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v *= self.out_stats.std[c];
            }
        }
        let dh = self.head.backward(&cache.head, &d);
        let dtok = trunk_backward(&mut self.blocks, &mut self.norm, &cache.blocks, &cache.norm, &dh);
        for (e, c) in self.encoders.iter_mut().zip(&cache.enc) {
            e.backward(c, &dtok);
        }
    }

    pub fn predict(&self, cond: &ConditionSet) -> Result<StructuralAnchor> {
        let (out, _) = self.forward(&cond.to_matrix())?;
        Ok(anchor_from_output(&out))
    }
}

/// Split per-frame anchor outputs into a [`StructuralAnchor`].
pub fn anchor_from_output(out: &Array2<f64>) -> StructuralAnchor {
    let v3 = |row: ndarray::ArrayView1<f64>, o: usize| Vec3::new(row[o], row[o + 1], row[o + 2]);
    let mut beta = [0.0; NUM_BETAS];
    let mean = out.slice(s![.., ANCHOR_BETA..ANCHOR_OUT]).mean_axis(Axis(0)).expect("non-empty");
    beta.iter_mut().zip(mean.iter()).for_each(|(b, m)| *b = *m);
    StructuralAnchor {
        torso_pose: out
            .rows()
            .into_iter()
            .map(|r| (0..8).map(|k| v3(r, ANCHOR_THETA + 3 * k)).collect())
            .collect(),
        shape: BodyShape::new(beta),
        cam_orient: out.rows().into_iter().map(|r| v3(r, ANCHOR_GAMMA)).collect(),
        cam_transl: out.rows().into_iter().map(|r| v3(r, ANCHOR_TAU)).collect(),
    }
}

/// Per-frame training targets for the anchor head.
pub fn anchor_targets(anchor: &StructuralAnchor) -> Array2<f64> {
    let mut out = Array2::zeros((anchor.len(), ANCHOR_OUT));
    for t in 0..anchor.len() {
        for (k, r) in anchor.torso_pose[t].iter().enumerate() {
            for i in 0..3 {
                out[[t, ANCHOR_THETA + 3 * k + i]] = r[i];
            }
        }
        for i in 0..3 {
            out[[t, ANCHOR_GAMMA + i]] = anchor.cam_orient[t][i];
            out[[t, ANCHOR_TAU + i]] = anchor.cam_transl[t][i];
        }
        for i in 0..NUM_BETAS {
            out[[t, ANCHOR_BETA + i]] = anchor.shape.beta[i];
        }
    }
    out
}

impl Module for AnchorNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit(&join(prefix, &format!("enc{i}")), f);
        }
        let p = prefix.to_string();
        trunk_visit(&mut self.blocks, &mut self.norm, &mut |n, x| f(&join(&p, n), x));
        self.head.visit(&join(prefix, "head"), f);
    }
}

impl Buffers for AnchorNet {
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            ("cond_mean".into(), &mut self.cond_stats.mean),
            ("cond_std".into(), &mut self.cond_stats.std),
            ("out_mean".into(), &mut self.out_stats.mean),
            ("out_std".into(), &mut self.out_stats.std),
        ]
    }
}

/// What the second-stage head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Flow-matching velocity `z - eps` on generated coordinates.
    Velocity,
    /// The generated coordinates themselves, from the anchor alone
    /// (deterministic baseline with the same trunk).
    Direct,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Velocity => "velocity",
            HeadKind::Direct => "direct",
        }
    }
}

/// Transformer over frames of `[z_t | time embedding | condition]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub kind: HeadKind,
    pub input: Dense,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub head: Dense,
    /// 1 on generated coordinates.
    pub mask: Vec<f64>,
    /// Source-noise standard deviation per coordinate.
    pub sigma: Vec<f64>,
    pub latent_stats: Standardizer,
    pub cond_stats: Standardizer,
}

#[derive(Debug, Clone)]
pub struct VelocityCache {
    input: DenseCache,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    head: DenseCache,
}

impl VelocityNet {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        config: NetConfig,
        kind: HeadKind,
        layout: &LatentLayout,
        noise: &NoiseSpec,
        latent_stats: Standardizer,
        cond_stats: Standardizer,
    ) -> Result<Self> {
        noise.validate()?;
        let w = layout.frame_width();
        let d = config.dim;
        let in_dim = w + 2 * config.time_freqs + CONDITION_DIM;
        let blocks = (0..config.blocks)
            .map(|_| AttentionBlock::new(rng, d))
            .collect::<Result<_>>()?;
        Ok(VelocityNet {
            config,
            kind,
            input: Dense::new(rng, in_dim, d, Activation::Identity, 1.0),
            blocks,
            norm: LayerNorm::new(d),
            head: Dense::new(rng, d, w, Activation::Identity, 0.1),
            mask: KnownMask::new(layout).mask,
            sigma: noise.column_sigma(layout),
            latent_stats,
            cond_stats,
        })
    }

    pub fn width(&self) -> usize {
        self.mask.len()
    }

    /// Output scale and shift per coordinate.
    fn out_affine(&self, c: usize) -> (f64, f64) {
        let (m, s) = (self.latent_stats.mean[c], self.latent_stats.std[c]);
        match self.kind {
            HeadKind::Velocity => ((s * s + self.sigma[c] * self.sigma[c]).sqrt(), m),
            HeadKind::Direct => (s, m),
        }
    }

    fn features(&self, z_t: &Array2<f64>, t: f64, cond: &Array2<f64>) -> Array2<f64> {
        let w = self.width();
        let nt = 2 * self.config.time_freqs;
        let frames = z_t.nrows();
        let mut x = Array2::zeros((frames, w + nt + CONDITION_DIM));
        let temb = sinusoidal_embed(&[t], self.config.time_freqs);
        for c in 0..w {
            let (m, s) = (self.latent_stats.mean[c], self.latent_stats.std[c]);
            let unknown = self.mask[c] != 0.0;
            for r in 0..frames {
                x[[r, c]] = match (unknown, self.kind) {
                    (false, _) => (z_t[[r, c]] - m) / s,
                    (true, HeadKind::Direct) => 0.0,
                    (true, HeadKind::Velocity) => {
                        let sd = (t * t * s * s + (1.0 - t) * (1.0 - t) * self.sigma[c] * self.sigma[c]).sqrt();
                        (z_t[[r, c]] - t * m) / sd
                    }
                };
            }
        }
        for r in 0..frames {
            for (i, e) in temb.iter().enumerate() {
                x[[r, w + i]] = *e;
            }
        }
        x.slice_mut(s![.., w + nt..]).assign(&self.cond_stats.apply(&cond.view()));
        x
    }

    /// Output in latent units; zero on known coordinates.
    pub fn forward(&self, z_t: &Array2<f64>, t: f64, cond: &Array2<f64>) -> Result<(Array2<f64>, VelocityCache)> {
        if z_t.ncols() != self.width() || cond.ncols() != CONDITION_DIM || cond.nrows() != z_t.nrows() || z_t.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} and condition {:?}",
                z_t.dim(),
                cond.dim()
            )));
        }
        let x = self.features(z_t, t, cond);
        let (h, input) = self.input.forward(&x);
        let (h, blocks, norm) = trunk_forward(&self.blocks, &self.norm, h);
        let (o, head) = self.head.forward(&h);
        let mut out = o;
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                let (sc, sh) = self.out_affine(c);
                *v = self.mask[c] * (*v * sc + sh);
            }
        }
        Ok((out, VelocityCache { input, blocks, norm, head }))
    }

    pub fn backward(&mut self, cache: &VelocityCache, d_out: &Array2<f64>) {
        let mut d = d_out.clone();
        for mut row in d.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v *= self.mask[c] * self.out_affine(c).0;
            }
        }
        let dh = self.head.backward(&cache.head, &d);
        let dh = trunk_backward(&mut self.blocks, &mut self.norm, &cache.blocks, &cache.norm, &dh);
        self.input.backward(&cache.input, &dh);
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, z_t: &Array2<f64>, t: f64, cond: &ConditionSet) -> Result<Array2<f64>> {
        Ok(self.forward(z_t, t, &cond.to_matrix())?.0)
    }
}

impl Module for VelocityNet {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input.visit(&join(prefix, "input"), f);
        let p = prefix.to_string();
        trunk_visit(&mut self.blocks, &mut self.norm, &mut |n, x| f(&join(&p, n), x));
        self.head.visit(&join(prefix, "head"), f);
    }
}

impl Buffers for VelocityNet {
    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        vec![
            ("mask".into(), &mut self.mask),
            ("sigma".into(), &mut self.sigma),
            ("latent_mean".into(), &mut self.latent_stats.mean),
            ("latent_std".into(), &mut self.latent_stats.std),
            ("cond_mean".into(), &mut self.cond_stats.mean),
            ("cond_std".into(), &mut self.cond_stats.std),
        ]
    }
}
