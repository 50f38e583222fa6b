//! Procedural walking motion, synthetic observations and the dataset file.
//!
//! The body walks along its heading (+z in the body frame) in front of a
//! slowly moving camera. Observations are noisy, partially occluded 2D
//! keypoints plus the derived condition channels.
//!
//! # Dataset file
//!
//! ```text
//! "FMKD" | version u32 | manifest length u64 | manifest JSON | manifest CRC-32
//! per record: record fields then frame fields (f32 LE) | CRC-32 of those bytes
//! ```
//!
//! The manifest lists the field names and widths in storage order. All
//! stored values are rounded to `f32` at generation time, so a write/read
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{
    mat_from_rows, project_unchecked, ray_embedding, relative_camera_features, sample_trajectory, CameraPose,
    Intrinsics, TrajectoryBounds, RAY_EMBED_DIM,
};
use crate::error::{invalid, Error, Result};
use crate::flowmatch::{hex_prefix, LatentLayout};
use crate::motion::{
    ConditionSet, MotionSequence, MotionState, Observations, IMAGE_FEATURE_DIM, NUM_KEYPOINTS, TORSO_COND_DIM,
};
use crate::rotation::{exp_so3, log_so3, rot_x, rot_y, rot_z, Mat3, Vec3};
use crate::seed::derive_seed;
use crate::skeleton::{fk_with_cache, BodyShape, Skeleton, NUM_BETAS, NUM_BODY_JOINTS};

pub const DATASET_MAGIC: &[u8; 4] = b"FMKD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    /// Per-joint, per-frame drop probability.
    pub dropout: f64,
    /// Number of square occluders per sequence.
    pub occluders: usize,
    /// Side length range of the occluders in pixels.
    pub occluder_size: (f64, f64),
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        OcclusionSpec {
            dropout: 0.1,
            occluders: 1,
            occluder_size: (80.0, 200.0),
        }
    }
}

impl OcclusionSpec {
    pub fn none() -> Self {
        OcclusionSpec {
            dropout: 0.0,
            occluders: 0,
            occluder_size: (0.0, 0.0),
        }
    }
}

/// Generation parameters. Gait ranges are sampled once per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub n_frames: usize,
    pub fps: f64,
    /// Stride length in meters.
    pub stride: (f64, f64),
    /// Steps per second.
    pub cadence: (f64, f64),
    /// Arm swing amplitude in radians.
    pub arm_swing: (f64, f64),
    /// Heading change in radians per second.
    pub turn_rate: (f64, f64),
    /// Initial heading in radians.
    pub heading: (f64, f64),
    /// Shape coefficients are uniform in `[-beta_range, beta_range]`.
    pub beta_range: f64,
    pub occlusion: OcclusionSpec,
    /// Keypoint noise standard deviation in pixels.
    pub pixel_noise: f64,
    pub camera: TrajectoryBounds,
    pub intrinsics: Intrinsics,
}

impl Default for MotionSpec {
    fn default() -> Self {
        MotionSpec {
            n_frames: 120,
            fps: 30.0,
            stride: (0.5, 0.8),
            cadence: (0.8, 1.1),
            arm_swing: (0.2, 0.5),
            turn_rate: (-0.1, 0.1),
            heading: (-0.4, 0.4),
            beta_range: 1.0,
            occlusion: OcclusionSpec::default(),
            pixel_noise: 2.0,
            camera: TrajectoryBounds::default(),
            intrinsics: Intrinsics::default(),
        }
    }
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(invalid("a motion needs at least 2 frames"));
        }
        if !(self.fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occlusion.dropout) {
            return Err(invalid("dropout must be a probability"));
        }
        for (lo, hi) in [
            self.stride,
            self.cadence,
            self.arm_swing,
            self.turn_rate,
            self.heading,
            self.occlusion.occluder_size,
        ] {
            if !(lo <= hi) {
                return Err(invalid(format!("empty range ({lo}, {hi})")));
            }
        }
        if !(self.pixel_noise >= 0.0) || !(self.beta_range >= 0.0) {
            return Err(invalid("noise and shape range must be non-negative"));
        }
        self.intrinsics.validate()
    }

    /// Short hash of the serialized spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex_prefix(&Sha256::digest(json.as_bytes()), 16)
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Random body shape within the spec's range.
pub fn sample_shape<R: Rng + ?Sized>(rng: &mut R, spec: &MotionSpec) -> BodyShape {
    let mut beta = [0.0; NUM_BETAS];
    for b in beta.iter_mut() {
        *b = draw(rng, (-spec.beta_range, spec.beta_range));
    }
    BodyShape::new(beta)
}

/// Small random rotation.
fn jitter<R: Rng + ?Sized>(rng: &mut R, s: f64) -> Vec3 {
    Vec3::new(draw(rng, (-s, s)), draw(rng, (-s, s)), draw(rng, (-s, s)))
}

/// Procedural walk observed by `cameras` (one pose per frame).
pub fn generate_motion<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &MotionSpec,
    shape: &BodyShape,
    cameras: &[CameraPose],
) -> Result<MotionSequence> {
    spec.validate()?;
    let n = spec.n_frames;
    if cameras.len() != n {
        return Err(Error::ShapeMismatch(format!("{} camera poses for {n} frames", cameras.len())));
    }
    let stride = draw(rng, spec.stride);
    let cadence = draw(rng, spec.cadence);
    let swing = draw(rng, spec.arm_swing);
    let turn = draw(rng, spec.turn_rate);
    let heading0 = draw(rng, spec.heading);
    let phase0 = draw(rng, (0.0, 2.0 * PI));
    let hip_amp = draw(rng, (0.3, 0.5));
    let knee_amp = draw(rng, (0.3, 0.5));
    let knee_bias = knee_amp + draw(rng, (0.05, 0.2));
    let lower = [draw(rng, (0.9, 1.4)), draw(rng, (0.9, 1.4))];
    let elbow = draw(rng, (0.2, 0.6));
    let mut offsets = [Vec3::zeros(); NUM_BODY_JOINTS];
    for j in [3, 6, 9, 12, 13, 14, 15] {
        offsets[j - 1] = jitter(rng, 0.08);
    }
    for j in [1, 2, 7, 8, 20, 21] {
        offsets[j - 1] = jitter(rng, 0.05);
    }
    let speed = stride * cadence;
    let start = Vec3::new(draw(rng, (-0.3, 0.3)), 0.92, draw(rng, (-1.5, -0.5)));

    let compose = |r: Mat3, off: &Vec3| log_so3(&(r * exp_so3(off)));
    let mut frames = Vec::with_capacity(n);
    let mut tau = start;
    for t in 0..n {
        let s = t as f64 / spec.fps;
        let phi = phase0 + 2.0 * PI * 0.5 * cadence * s;
        let heading = heading0 + turn * s;
        let mut f = MotionState::default();
        let bp = &mut f.body_pose;
        bp[0] = compose(rot_x(-hip_amp * phi.sin()), &offsets[0]);
        bp[1] = compose(rot_x(-hip_amp * (phi + PI).sin()), &offsets[1]);
        bp[3] = Vec3::new(knee_bias + knee_amp * (phi + PI / 2.0).sin(), 0.0, 0.0);
        bp[4] = Vec3::new(knee_bias + knee_amp * (phi + 1.5 * PI).sin(), 0.0, 0.0);
        bp[6] = compose(rot_x(0.2 * (phi + PI / 4.0).sin()), &offsets[6]);
        bp[7] = compose(rot_x(0.2 * (phi + 1.25 * PI).sin()), &offsets[7]);
        for j in [3, 6, 9] {
            bp[j - 1] = compose(rot_y(0.05 * phi.sin()), &offsets[j - 1]);
        }
        for j in [12, 13, 14, 15] {
            bp[j - 1] = offsets[j - 1];
        }
        bp[15] = log_so3(&(rot_x(-swing * (phi + PI).sin()) * rot_z(-lower[0])));
        bp[16] = log_so3(&(rot_x(-swing * phi.sin()) * rot_z(lower[1])));
        bp[17] = Vec3::new(0.0, -(elbow + 0.15 * (phi + PI).sin().max(0.0)), 0.0);
        bp[18] = Vec3::new(0.0, elbow + 0.15 * phi.sin().max(0.0), 0.0);
        bp[19] = offsets[19];
        bp[20] = offsets[20];

        let r_w = rot_y(heading) * rot_x(0.03 * (2.0 * phi).cos());
        let mut pos = tau;
        pos.y = 0.92 + 0.02 * (2.0 * phi).cos();
        f.world_orient = log_so3(&r_w);
        f.world_transl = pos;
        let cam = &cameras[t];
        f.cam_orient = log_so3(&(cam.rotation * r_w));
        f.cam_transl = cam.to_camera(&pos);
        frames.push(f);
        tau += speed / spec.fps * Vec3::new(heading.sin(), 0.0, heading.cos());
    }
    Ok(MotionSequence {
        frames,
        shape: *shape,
        fps: spec.fps,
    })
}

/// Fixed projection from normalized keypoints to surrogate image features.
fn image_projection() -> Vec<[f64; 2 * NUM_KEYPOINTS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a6e_f3a7);
    let n = Normal::new(0.0, 1.0 / (2.0 * NUM_KEYPOINTS as f64).sqrt()).expect("finite");
    (0..IMAGE_FEATURE_DIM)
        .map(|_| {
            let mut row = [0.0; 2 * NUM_KEYPOINTS];
            row.iter_mut().for_each(|x| *x = n.sample(&mut rng));
            row
        })
        .collect()
}

/// Keypoints, visibility and condition channels for a ground-truth motion.
/// The torso channel is left at zero; it is filled from an anchor later.
pub fn generate_observations<R: Rng + ?Sized>(
    gt: &MotionSequence,
    cameras: &[CameraPose],
    spec: &MotionSpec,
    skel: &Skeleton,
    rng: &mut R,
) -> Result<Observations> {
    spec.validate()?;
    let n = gt.len();
    if cameras.len() != n {
        return Err(Error::ShapeMismatch(format!("{} camera poses for {n} frames", cameras.len())));
    }
    let k = &spec.intrinsics;
    let occ = &spec.occlusion;
    let boxes: Vec<[f64; 4]> = (0..occ.occluders)
        .map(|_| {
            let side = draw(rng, occ.occluder_size);
            let cx = draw(rng, (0.0, k.width));
            let cy = draw(rng, (0.0, k.height));
            [cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0]
        })
        .collect();
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let proj = image_projection();
    let mut cond = ConditionSet::zeros(n);
    let mut keypoints = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    let mut last_bbox = [0.0; 3];
    for (t, f) in gt.frames.iter().enumerate() {
        let joints = fk_with_cache(&f.camera_pose(), &gt.shape, skel).joints;
        let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
        let mut vis = [false; NUM_KEYPOINTS];
        for j in 0..NUM_KEYPOINTS {
            let in_front = joints[j].z > 0.0;
            let mut u = if in_front {
                project_unchecked(k, &joints[j])
            } else {
                [f64::NAN; 2]
            };
            if spec.pixel_noise > 0.0 {
                u[0] += noise.sample(rng);
                u[1] += noise.sample(rng);
            }
            let dropped = occ.dropout > 0.0 && rng.random_bool(occ.dropout);
            let covered = boxes.iter().any(|b| u[0] >= b[0] && u[0] <= b[2] && u[1] >= b[1] && u[1] <= b[3]);
            vis[j] = in_front && !dropped && !covered && k.contains(&u);
            kp[j] = if vis[j] { u } else { [0.0; 2] };
        }
        for j in 0..NUM_KEYPOINTS {
            let e = ray_embedding(k, &kp[j], if vis[j] { 1.0 } else { 0.0 });
            for (i, v) in e.iter().enumerate() {
                cond.rays[[t, j * RAY_EMBED_DIM + i]] = *v;
            }
        }
        let pts: Vec<[f64; 2]> = (0..NUM_KEYPOINTS).filter(|&j| vis[j]).map(|j| kp[j]).collect();
        if !pts.is_empty() {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &pts {
                for a in 0..2 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
            last_bbox = [
                (0.5 * (lo[0] + hi[0]) - k.cx) / k.fx,
                (0.5 * (lo[1] + hi[1]) - k.cy) / k.fy,
                (hi[0] - lo[0]).max(hi[1] - lo[1]) / k.fx,
            ];
        }
        for a in 0..3 {
            cond.bbox[[t, a]] = last_bbox[a];
        }
        let mut flat = [0.0; 2 * NUM_KEYPOINTS];
        for j in 0..NUM_KEYPOINTS {
            if vis[j] {
                flat[2 * j] = (kp[j][0] - k.cx) / k.fx;
                flat[2 * j + 1] = (kp[j][1] - k.cy) / k.fy;
            }
        }
        for (i, row) in proj.iter().enumerate() {
            cond.image[[t, i]] = row.iter().zip(&flat).map(|(a, b)| a * b).sum();
        }
        keypoints.push(kp);
        visible.push(vis);
    }
    for (t, c) in relative_camera_features(cameras).iter().enumerate() {
        for a in 0..6 {
            cond.camera[[t, a]] = c[a];
        }
    }
    Ok(Observations {
        keypoints,
        visible,
        cond,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: String,
    pub seed: u64,
    pub spec_hash: String,
}

/// One sequence: ground truth, camera and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub meta: RecordMeta,
    pub gt: MotionSequence,
    pub intrinsics: Intrinsics,
    pub cameras: Vec<CameraPose>,
    pub obs: Observations,
}

impl DatasetRecord {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }
}

#[inline]
fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn q3(v: &mut Vec3) {
    v.iter_mut().for_each(|x| *x = q(*x));
}

/// Round every stored value to `f32` precision.
pub fn quantize_record(r: &mut DatasetRecord) {
    for f in r.gt.frames.iter_mut() {
        f.body_pose.iter_mut().for_each(q3);
        q3(&mut f.cam_orient);
        q3(&mut f.cam_transl);
        q3(&mut f.world_orient);
        q3(&mut f.world_transl);
    }
    r.gt.shape.beta.iter_mut().for_each(|b| *b = q(*b));
    r.gt.fps = q(r.gt.fps);
    for c in r.cameras.iter_mut() {
        c.rotation.iter_mut().for_each(|x| *x = q(*x));
        q3(&mut c.translation);
    }
    for kp in r.obs.keypoints.iter_mut() {
        kp.iter_mut().flatten().for_each(|x| *x = q(*x));
    }
    let c = &mut r.obs.cond;
    for m in [&mut c.bbox, &mut c.rays, &mut c.image, &mut c.camera, &mut c.torso] {
        m.mapv_inplace(q);
    }
}

/// A record generated from its own seed.
pub fn generate_record(seed: u64, id: &str, spec: &MotionSpec, skel: &Skeleton) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = sample_trajectory(&mut rng, spec.n_frames, &spec.camera)?;
    let shape = sample_shape(&mut rng, spec);
    let mut gt = generate_motion(&mut rng, spec, &shape, &cameras)?;
    let mut rec = DatasetRecord {
        meta: RecordMeta {
            id: id.to_string(),
            seed,
            spec_hash: spec.hash(),
        },
        gt: gt.clone(),
        intrinsics: spec.intrinsics,
        cameras,
        obs: Observations {
            keypoints: Vec::new(),
            visible: Vec::new(),
            cond: ConditionSet::zeros(0),
        },
    };
    quantize_record(&mut rec);
    gt.clone_from(&rec.gt);
    rec.obs = generate_observations(&gt, &rec.cameras, spec, skel, &mut rng)?;
    quantize_record(&mut rec);
    Ok(rec)
}

/// `n` records with seeds derived from `root` and the split name.
pub fn generate_dataset(root: u64, split: &str, n: usize, spec: &MotionSpec) -> Result<Vec<DatasetRecord>> {
    let skel = Skeleton::template();
    (0..n)
        .map(|i| {
            let id = format!("{split}_{i:04}");
            generate_record(derive_seed(root, &id), &id, spec, &skel)
        })
        .collect()
}

/// Per-file metadata written as JSON ahead of the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub layout_hash: String,
    pub joint_names: Vec<String>,
    pub record_fields: Vec<(String, usize)>,
    pub frame_fields: Vec<(String, usize)>,
    pub records: Vec<ManifestEntry>,
    pub spec: Option<MotionSpec>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub spec_hash: String,
    pub frames: usize,
}

fn record_fields() -> Vec<(String, usize)> {
    [("beta", NUM_BETAS), ("fps", 1), ("intrinsics", 6)]
        .iter()
        .map(|(n, w)| (n.to_string(), *w))
        .collect()
}

fn frame_fields() -> Vec<(String, usize)> {
    [
        ("gt.body_pose", 3 * NUM_BODY_JOINTS),
        ("gt.cam_orient", 3),
        ("gt.cam_transl", 3),
        ("gt.world_orient", 3),
        ("gt.world_transl", 3),
        ("camera.rotation", 9),
        ("camera.translation", 3),
        ("obs.keypoints", 2 * NUM_KEYPOINTS),
        ("obs.visible", NUM_KEYPOINTS),
        ("obs.bbox", crate::motion::BBOX_DIM),
        ("obs.rays", crate::motion::RAYS_DIM),
        ("obs.image", IMAGE_FEATURE_DIM),
        ("obs.camera", crate::motion::CAMERA_FEATURE_DIM),
        ("obs.torso", TORSO_COND_DIM),
    ]
    .iter()
    .map(|(n, w)| (n.to_string(), *w))
    .collect()
}

impl Manifest {
    pub fn new(records: &[DatasetRecord], spec: Option<MotionSpec>) -> Self {
        Manifest {
            format: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            version: DATASET_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            layout_hash: LatentLayout::default().hash(),
            joint_names: crate::skeleton::JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            record_fields: record_fields(),
            frame_fields: frame_fields(),
            records: records
                .iter()
                .map(|r| ManifestEntry {
                    id: r.meta.id.clone(),
                    seed: r.meta.seed,
                    spec_hash: r.meta.spec_hash.clone(),
                    frames: r.len(),
                })
                .collect(),
            spec,
            extra: BTreeMap::new(),
        }
    }
}

fn push(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&(x as f32).to_le_bytes());
}

fn encode_record(r: &DatasetRecord) -> Vec<u8> {
    let per_frame: usize = frame_fields().iter().map(|f| f.1).sum();
    let mut buf = Vec::with_capacity(4 * (per_frame * r.len() + 17));
    r.gt.shape.beta.iter().for_each(|b| push(&mut buf, *b));
    push(&mut buf, r.gt.fps);
    let k = &r.intrinsics;
    for x in [k.fx, k.fy, k.cx, k.cy, k.width, k.height] {
        push(&mut buf, x);
    }
    let c = &r.obs.cond;
    for t in 0..r.len() {
        let f = &r.gt.frames[t];
        f.body_pose.iter().flat_map(|v| v.iter()).for_each(|x| push(&mut buf, *x));
        for v in [f.cam_orient, f.cam_transl, f.world_orient, f.world_transl] {
            v.iter().for_each(|x| push(&mut buf, *x));
        }
        let cam = &r.cameras[t];
        for i in 0..3 {
            for j in 0..3 {
                push(&mut buf, cam.rotation[(i, j)]);
            }
        }
        cam.translation.iter().for_each(|x| push(&mut buf, *x));
        r.obs.keypoints[t].iter().flatten().for_each(|x| push(&mut buf, *x));
        r.obs.visible[t].iter().for_each(|v| push(&mut buf, if *v { 1.0 } else { 0.0 }));
        for m in [&c.bbox, &c.rays, &c.image, &c.camera, &c.torso] {
            m.row(t).iter().for_each(|x| push(&mut buf, *x));
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> f64 {
        let b: [u8; 4] = self.data[self.pos..self.pos + 4].try_into().expect("4 bytes");
        self.pos += 4;
        f32::from_le_bytes(b) as f64
    }

    fn v3(&mut self) -> Vec3 {
        Vec3::new(self.take(), self.take(), self.take())
    }
}

fn decode_record(bytes: &[u8], entry: &ManifestEntry) -> DatasetRecord {
    let mut c = Cursor { data: bytes, pos: 0 };
    let mut beta = [0.0; NUM_BETAS];
    beta.iter_mut().for_each(|b| *b = c.take());
    let fps = c.take();
    let intrinsics = Intrinsics {
        fx: c.take(),
        fy: c.take(),
        cx: c.take(),
        cy: c.take(),
        width: c.take(),
        height: c.take(),
    };
    let n = entry.frames;
    let mut frames = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut keypoints = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    let mut cond = ConditionSet::zeros(n);
    for t in 0..n {
        let mut f = MotionState::default();
        f.body_pose.iter_mut().for_each(|v| *v = c.v3());
        f.cam_orient = c.v3();
        f.cam_transl = c.v3();
        f.world_orient = c.v3();
        f.world_transl = c.v3();
        frames.push(f);
        let rows: Vec<f64> = (0..9).map(|_| c.take()).collect();
        cameras.push(CameraPose {
            rotation: mat_from_rows(&rows),
            translation: c.v3(),
        });
        let mut kp = [[0.0; 2]; NUM_KEYPOINTS];
        kp.iter_mut().flatten().for_each(|x| *x = c.take());
        keypoints.push(kp);
        let mut vis = [false; NUM_KEYPOINTS];
        vis.iter_mut().for_each(|v| *v = c.take() != 0.0);
        visible.push(vis);
        for m in [&mut cond.bbox, &mut cond.rays, &mut cond.image, &mut cond.camera, &mut cond.torso] {
            m.row_mut(t).iter_mut().for_each(|x| *x = c.take());
        }
    }
    DatasetRecord {
        meta: RecordMeta {
            id: entry.id.clone(),
            seed: entry.seed,
            spec_hash: entry.spec_hash.clone(),
        },
        gt: MotionSequence {
            frames,
            shape: BodyShape::new(beta),
            fps,
        },
        intrinsics,
        cameras,
        obs: Observations {
            keypoints,
            visible,
            cond,
        },
    }
}

/// Serialize records with a manifest into the dataset byte format.
pub fn encode_dataset(records: &[DatasetRecord], manifest: &Manifest) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    for r in records {
        let bytes = encode_record(r);
        out.extend_from_slice(&bytes);
        out.extend_from_slice(&crc32fast::hash(&bytes).to_le_bytes());
    }
    Ok(out)
}

/// Parse the dataset byte format.
pub fn decode_dataset(data: &[u8]) -> Result<(Manifest, Vec<DatasetRecord>)> {
    let truncated = || Error::Format("truncated dataset file".into());
    if data.len() < 16 || &data[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing FMKD magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|e| e + 4 <= data.len()).ok_or_else(truncated)?;
    let json = &data[16..end];
    let crc = u32::from_le_bytes(data[end..end + 4].try_into().expect("4 bytes"));
    if crc != crc32fast::hash(json) {
        return Err(Error::Format("manifest checksum failure".into()));
    }
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.frame_fields != frame_fields() || manifest.record_fields != record_fields() {
        return Err(Error::Format("unexpected field layout in manifest".into()));
    }
    let per_frame: usize = frame_fields().iter().map(|f| f.1).sum();
    let fixed: usize = record_fields().iter().map(|f| f.1).sum();
    let mut pos = end + 4;
    let mut records = Vec::with_capacity(manifest.records.len());
    for (i, entry) in manifest.records.iter().enumerate() {
        let size = 4 * (fixed + per_frame * entry.frames);
        if pos + size + 4 > data.len() {
            return Err(truncated());
        }
        let bytes = &data[pos..pos + size];
        let crc = u32::from_le_bytes(data[pos + size..pos + size + 4].try_into().expect("4 bytes"));
        if crc != crc32fast::hash(bytes) {
            return Err(Error::Checksum { record: i });
        }
        records.push(decode_record(bytes, entry));
        pos += size + 4;
    }
    if pos != data.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok((manifest, records))
}

pub fn write_dataset(records: &[DatasetRecord], manifest: &Manifest, path: &Path) -> Result<()> {
    let bytes = encode_dataset(records, manifest)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(Manifest, Vec<DatasetRecord>)> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&data)
}
