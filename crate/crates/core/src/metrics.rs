//! Evaluation metrics. Inputs are in meters; reported distances are in
//! millimeters, RTE in percent and jitter in m/s^3.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::motion::MotionSequence;
use crate::rotation::{Mat3, Vec3};
use crate::skeleton::{fk_with_cache, lbs_with_fk, Partition, ProxyMesh, Skeleton, JOINT_NAMES, NUM_JOINTS};

const MM: f64 = 1000.0;

/// Similarity transform mapping `Y` onto `X`: `x ≈ s R y + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        AlignmentResult {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, y: &Vec3) -> Vec3 {
        self.scale * (self.rotation * y) + self.translation
    }
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().fold(Vec3::zeros(), |a, b| a + b) / p.len() as f64
}

fn umeyama(x: &[Vec3], y: &[Vec3], with_scale: bool, strict: bool) -> Result<AlignmentResult> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", x.len(), y.len())));
    }
    if x.len() < 3 && strict {
        return Err(invalid("alignment needs at least 3 points"));
    }
    if x.is_empty() {
        return Ok(AlignmentResult::identity());
    }
    let (mx, my) = (centroid(x), centroid(y));
    let n = x.len() as f64;
    let mut cov = Mat3::zeros();
    let mut var_y = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += da * db.transpose();
        var_y += db.norm_squared();
    }
    cov /= n;
    var_y /= n;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = svd.singular_values;
    if strict && (d[0] <= 1e-15 || d[1] <= 1e-10 * d[0]) {
        return Err(Error::Degenerate("covariance has rank below 2".into()));
    }
    let mut s = Mat3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale && var_y > 0.0 {
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_y
    } else {
        1.0
    };
    let translation = mx - scale * (rotation * my);
    Ok(AlignmentResult {
        scale,
        rotation,
        translation,
    })
}

/// Least-squares similarity (or rigid, without scale) alignment of `y`
/// onto `x`, with reflection correction.
pub fn procrustes_align(x: &[Vec3], y: &[Vec3], with_scale: bool) -> Result<AlignmentResult> {
    umeyama(x, y, with_scale, true)
}

/// Like [`procrustes_align`] but accepts collinear or tiny point sets,
/// returning one of the equally good solutions.
pub fn procrustes_align_lenient(x: &[Vec3], y: &[Vec3], with_scale: bool) -> Result<AlignmentResult> {
    umeyama(x, y, with_scale, false)
}

fn check_frames(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<()> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("prediction and ground truth shapes differ".into()));
    }
    if pred.is_empty() || pred[0].is_empty() {
        return Err(invalid("metrics need at least one frame and one point"));
    }
    Ok(())
}

fn mean_err(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Root-aligned mean joint error (index 0 is the root), in mm.
pub fn mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    check_frames(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (rp, rg) = (p[0], g[0]);
            p.iter().zip(g).map(|(a, b)| ((a - rp) - (b - rg)).norm()).sum::<f64>() / p.len() as f64
        })
        .sum::<f64>()
        / pred.len() as f64
        * MM)
}

/// Mean joint error after per-frame similarity alignment, in mm.
pub fn pa_mpjpe(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    check_frames(pred, gt)?;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let a = procrustes_align(g, p, true)?;
        let aligned: Vec<Vec3> = p.iter().map(|x| a.apply(x)).collect();
        total += mean_err(&aligned, g);
    }
    Ok(total / pred.len() as f64 * MM)
}

/// Mean vertex error after subtracting each side's root joint, in mm.
pub fn pve(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], pred_root: &[Vec3], gt_root: &[Vec3]) -> Result<f64> {
    check_frames(pred, gt)?;
    if pred_root.len() != pred.len() || gt_root.len() != gt.len() {
        return Err(Error::ShapeMismatch("root count differs from frame count".into()));
    }
    let mut total = 0.0;
    for t in 0..pred.len() {
        total += pred[t]
            .iter()
            .zip(&gt[t])
            .map(|(a, b)| ((a - pred_root[t]) - (b - gt_root[t])).norm())
            .sum::<f64>()
            / pred[t].len() as f64;
    }
    Ok(total / pred.len() as f64 * MM)
}

/// Root-aligned error per joint, averaged over frames, in mm.
pub fn per_joint_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<Vec<f64>> {
    check_frames(pred, gt)?;
    let nj = pred[0].len();
    let mut out = vec![0.0; nj];
    for (p, g) in pred.iter().zip(gt) {
        for j in 0..nj {
            out[j] += ((p[j] - p[0]) - (g[j] - g[0])).norm();
        }
    }
    Ok(out.into_iter().map(|e| e / pred.len() as f64 * MM).collect())
}

/// World-space joint errors over consecutive chunks: full-chunk alignment
/// (WA) and first-two-frame alignment (W), in mm.
pub fn chunk_world_metrics(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], chunk: usize, with_scale: bool) -> Result<(f64, f64)> {
    check_frames(pred, gt)?;
    if pred.len() < 2 {
        return Err(invalid("world metrics need at least 2 frames"));
    }
    if chunk < 2 {
        return Err(invalid("chunk size must be at least 2"));
    }
    let (mut wa, mut w, mut count) = (0.0, 0.0, 0usize);
    let mut start = 0;
    while start + 2 <= pred.len() {
        let end = (start + chunk).min(pred.len());
        let (p, g) = (&pred[start..end], &gt[start..end]);
        let flat = |s: &[Vec<Vec3>]| s.iter().flatten().copied().collect::<Vec<_>>();
        let (pf, gf) = (flat(p), flat(g));
        let full = procrustes_align_lenient(&gf, &pf, with_scale)?;
        let first = procrustes_align_lenient(&flat(&g[..2]), &flat(&p[..2]), with_scale)?;
        let err = |a: &AlignmentResult| pf.iter().zip(&gf).map(|(x, y)| (a.apply(x) - y).norm()).sum::<f64>() / pf.len() as f64;
        wa += err(&full);
        w += err(&first);
        count += 1;
        start = end;
    }
    Ok((wa / count as f64 * MM, w / count as f64 * MM))
}

/// Root translation error after rigid alignment, as a percentage of the
/// ground-truth path length.
pub fn rte(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} vs {} root positions", pred.len(), gt.len())));
    }
    let path: f64 = gt.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if path <= 1e-9 {
        return Err(Error::UndefinedMetric("ground-truth root does not move".into()));
    }
    let a = procrustes_align_lenient(gt, pred, false)?;
    let err = pred.iter().zip(gt).map(|(p, g)| (a.apply(p) - g).norm()).sum::<f64>() / pred.len() as f64;
    Ok(err / path * 100.0)
}

/// Mean magnitude of the third finite difference, scaled to m/s^3.
pub fn jitter(joints: &[Vec<Vec3>], fps: f64) -> Result<f64> {
    if joints.len() < 4 {
        return Err(invalid("jitter needs at least 4 frames"));
    }
    let nj = joints[0].len();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 1..joints.len() - 2 {
        for j in 0..nj {
            let d = joints[t + 2][j] - 3.0 * joints[t + 1][j] + 3.0 * joints[t][j] - joints[t - 1][j];
            total += d.norm();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64 * fps.powi(3))
}

/// Ground-contact thresholds for foot sliding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// Maximum GT foot speed in meters per frame.
    pub speed: f64,
    /// Maximum GT foot height above the lowest GT foot height, meters.
    pub height: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds {
            speed: 0.005,
            height: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootSliding {
    pub mm: f64,
    /// True when the ground truth has no contact frames.
    pub empty_contact: bool,
}

/// Mean horizontal displacement of predicted feet between consecutive GT
/// contact frames (y is up), in mm.
pub fn foot_sliding(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>], th: &ContactThresholds) -> Result<FootSliding> {
    check_frames(pred, gt)?;
    let n = gt.len();
    let floor = gt.iter().flatten().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let contact = |t: usize, f: usize| {
        let speed = if t + 1 < n {
            (gt[t + 1][f] - gt[t][f]).norm()
        } else if t > 0 {
            (gt[t][f] - gt[t - 1][f]).norm()
        } else {
            0.0
        };
        speed < th.speed && gt[t][f].y < floor + th.height
    };
    let (mut total, mut count) = (0.0, 0usize);
    for t in 0..n.saturating_sub(1) {
        for f in 0..gt[t].len() {
            if contact(t, f) && contact(t + 1, f) {
                let d = pred[t + 1][f] - pred[t][f];
                total += (d.x * d.x + d.z * d.z).sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        FootSliding {
            mm: 0.0,
            empty_contact: true,
        }
    } else {
        FootSliding {
            mm: total / count as f64 * MM,
            empty_contact: false,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regional {
    pub anchor_mean: f64,
    pub distal_mean: f64,
    pub gap: f64,
}

/// Group means over the joints present in `per_joint`; absent joints are
/// skipped.
pub fn regional_breakdown(per_joint: &BTreeMap<String, f64>, anchor: &[&str], distal: &[&str]) -> Result<Regional> {
    let mean = |names: &[&str]| -> Result<f64> {
        let vals: Vec<f64> = names.iter().filter_map(|n| per_joint.get(*n).copied()).collect();
        if vals.is_empty() {
            return Err(invalid("joint group has no values"));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let anchor_mean = mean(anchor)?;
    let distal_mean = mean(distal)?;
    Ok(Regional {
        anchor_mean,
        distal_mean,
        gap: distal_mean - anchor_mean,
    })
}

/// Joint names of the torso and non-torso groups of a partition.
pub fn partition_groups(partition: &Partition) -> (Vec<&'static str>, Vec<&'static str>) {
    (
        partition.torso_ids.iter().map(|&j| JOINT_NAMES[j]).collect(),
        partition.non_torso_ids.iter().map(|&j| JOINT_NAMES[j]).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub chunk: usize,
    pub world_scale: bool,
    pub contact: ContactThresholds,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            chunk: 100,
            world_scale: false,
            contact: ContactThresholds::default(),
        }
    }
}

/// All metrics for one sequence (or an aggregate of several).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub non_torso_mpjpe: f64,
    pub wa_mpjpe: f64,
    pub w_mpjpe: f64,
    /// `None` when the ground-truth root is static.
    pub rte: Option<f64>,
    pub jitter: f64,
    pub foot_sliding: f64,
    pub empty_contact: bool,
    pub per_joint: BTreeMap<String, f64>,
    pub regional: Regional,
}

pub const FEET: [usize; 2] = [10, 11];

/// Evaluate a predicted motion against ground truth.
pub fn evaluate_sequence(
    pred: &MotionSequence,
    gt: &MotionSequence,
    skel: &Skeleton,
    mesh: &ProxyMesh,
    partition: &Partition,
    opts: &MetricOptions,
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} frames", pred.len(), gt.len())));
    }
    let cam = |s: &MotionSequence| {
        let mut joints = Vec::with_capacity(s.len());
        let mut verts = Vec::with_capacity(s.len());
        for f in &s.frames {
            let fk = fk_with_cache(&f.camera_pose(), &s.shape, skel);
            verts.push(lbs_with_fk(&fk, &s.shape, mesh, skel));
            joints.push(fk.joints.to_vec());
        }
        (joints, verts)
    };
    let (pj, pv) = cam(pred);
    let (gj, gv) = cam(gt);
    let pw: Vec<Vec<Vec3>> = pred.world_joints(skel).iter().map(|j| j.to_vec()).collect();
    let gw: Vec<Vec<Vec3>> = gt.world_joints(skel).iter().map(|j| j.to_vec()).collect();
    let per = per_joint_error(&pj, &gj)?;
    let per_joint: BTreeMap<String, f64> = (0..NUM_JOINTS).map(|j| (JOINT_NAMES[j].to_string(), per[j])).collect();
    let (anchor, distal) = partition_groups(partition);
    let regional = regional_breakdown(&per_joint, &anchor, &distal)?;
    let non_torso_mpjpe = regional.distal_mean;
    let (wa, w) = chunk_world_metrics(&pw, &gw, opts.chunk, opts.world_scale)?;
    let root = |j: &[Vec<Vec3>]| j.iter().map(|f| f[0]).collect::<Vec<_>>();
    let rte_v = match rte(&root(&pw), &root(&gw)) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let feet = |j: &[Vec<Vec3>]| j.iter().map(|f| FEET.iter().map(|&i| f[i]).collect()).collect::<Vec<Vec<Vec3>>>();
    let fs = foot_sliding(&feet(&pw), &feet(&gw), &opts.contact)?;
    let jit = if pw.len() >= 4 { jitter(&pw, pred.fps)? } else { 0.0 };
    Ok(MetricReport {
        mpjpe: mpjpe(&pj, &gj)?,
        pa_mpjpe: pa_mpjpe(&pj, &gj)?,
        pve: pve(&pv, &gv, &root(&pj), &root(&gj))?,
        non_torso_mpjpe,
        wa_mpjpe: wa,
        w_mpjpe: w,
        rte: rte_v,
        jitter: jit,
        foot_sliding: fs.mm,
        empty_contact: fs.empty_contact,
        per_joint,
        regional,
    })
}

/// Unweighted mean over sequences. RTE averages the defined values only.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let rtes: Vec<f64> = reports.iter().filter_map(|r| r.rte).collect();
    let mut per_joint = BTreeMap::new();
    for name in reports[0].per_joint.keys() {
        per_joint.insert(name.clone(), avg(&|r| r.per_joint.get(name).copied().unwrap_or(0.0)));
    }
    let anchor_mean = avg(&|r| r.regional.anchor_mean);
    let distal_mean = avg(&|r| r.regional.distal_mean);
    Ok(MetricReport {
        mpjpe: avg(&|r| r.mpjpe),
        pa_mpjpe: avg(&|r| r.pa_mpjpe),
        pve: avg(&|r| r.pve),
        non_torso_mpjpe: avg(&|r| r.non_torso_mpjpe),
        wa_mpjpe: avg(&|r| r.wa_mpjpe),
        w_mpjpe: avg(&|r| r.w_mpjpe),
        rte: if rtes.is_empty() {
            None
        } else {
            Some(rtes.iter().sum::<f64>() / rtes.len() as f64)
        },
        jitter: avg(&|r| r.jitter),
        foot_sliding: avg(&|r| r.foot_sliding),
        empty_contact: reports.iter().all(|r| r.empty_contact),
        per_joint,
        regional: Regional {
            anchor_mean,
            distal_mean,
            gap: distal_mean - anchor_mean,
        },
    })
}

/// Per-dataset joint errors from a published per-joint table.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub datasets: Vec<String>,
    /// (joint, group, per-dataset value or blank).
    pub rows: Vec<(String, String, Vec<Option<f64>>)>,
    /// Summary rows keyed by name (`anchor_mean`, `distal_mean`, `gap`).
    pub summary: BTreeMap<String, Vec<f64>>,
}

/// Parse a CSV with columns `joint,group,<dataset>...,mean`. Rows whose
/// group is `summary` hold the published per-dataset aggregates.
pub fn read_joint_table(path: &Path) -> Result<JointTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "joint" || &headers[1] != "group" {
        return Err(Error::Format("expected joint,group,<datasets>...,mean header".into()));
    }
    let datasets: Vec<String> = headers.iter().skip(2).take(headers.len() - 3).map(String::from).collect();
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<Option<f64>> = (2..2 + datasets.len())
            .map(|i| {
                let s = rec.get(i).unwrap_or("").trim();
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|e| Error::Format(format!("{s}: {e}")))
                }
            })
            .collect::<Result<_>>()?;
        if &rec[1] == "summary" {
            let v = vals
                .iter()
                .map(|v| v.ok_or_else(|| Error::Format(format!("blank summary value in {}", &rec[0]))))
                .collect::<Result<_>>()?;
            summary.insert(rec[0].to_string(), v);
        } else {
            rows.push((rec[0].to_string(), rec[1].to_string(), vals));
        }
    }
    Ok(JointTable { datasets, rows, summary })
}

impl JointTable {
    /// Recomputed regional means for one dataset column.
    pub fn dataset_regional(&self, column: usize) -> Result<Regional> {
        let per: BTreeMap<String, f64> = self
            .rows
            .iter()
            .filter_map(|(j, _, v)| v[column].map(|x| (j.clone(), x)))
            .collect();
        let group = |g: &str| self.rows.iter().filter(|r| r.1 == g).map(|r| r.0.as_str()).collect::<Vec<_>>();
        regional_breakdown(&per, &group("torso"), &group("distal"))
    }

    /// Cross-dataset regional summary: the mean of the per-dataset summary
    /// rows, rounded to two decimals as published.
    pub fn mean_regional(&self) -> Result<Regional> {
        let get = |k: &str| {
            self.summary
                .get(k)
                .ok_or_else(|| Error::Format(format!("missing summary row {k}")))
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let (a, d) = (get("anchor_mean")?, get("distal_mean")?);
        Ok(Regional {
            anchor_mean: round2(a),
            distal_mean: round2(d),
            gap: round2(d - a),
        })
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
