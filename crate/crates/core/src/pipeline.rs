//! Commands behind the command-line verbs. Each reads its inputs from the
//! paths in a [`RunConfig`], writes its outputs under the configured paths
//! and stamps them with the config hash and tool version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowmatch::{LatentCodec, LatentLayout, SamplerConfig};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport};
use crate::losses::LossContext;
use crate::metrics::{aggregate, evaluate_sequence, MetricOptions, MetricReport};
use crate::motion::MotionSequence;
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, Model};
use crate::nn::train::{
    complete_motion, record_anchor, train_stage1, train_stage2, AnchorSource, EpochStats,
};
use crate::nn::{AnchorNet, VelocityNet};
use crate::seed::{derive_seed, rng_for};
use crate::skeleton::JOINT_NAMES;
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, DatasetRecord, Manifest};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.join(name))
}

fn stamp(manifest: &mut Manifest, cfg: &RunConfig) {
    manifest.extra.insert("config_hash".into(), cfg.hash());
    manifest.extra.insert("tool_version".into(), TOOL_VERSION.into());
}

/// Generate the train and test splits. Returns their paths.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let spec = cfg.motion_spec();
    let root = derive_seed(cfg.seed, "data");
    for (split, n, path) in [("train", cfg.n_train, &cfg.train_path), ("test", cfg.n_test, &cfg.test_path)] {
        let records = generate_dataset(root, split, n, &spec)?;
        let mut manifest = Manifest::new(&records, Some(spec.clone()));
        stamp(&mut manifest, cfg);
        manifest.extra.insert("split".into(), split.into());
        ensure_parent(path)?;
        write_dataset(&records, &manifest, path)?;
    }
    Ok((cfg.train_path.clone(), cfg.test_path.clone()))
}

fn read_split(path: &Path, what: &str) -> Result<(Manifest, Vec<DatasetRecord>)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{what} dataset {} (run gen-data first)", path.display())));
    }
    read_dataset(path)
}

fn check_layout(hash: &str, manifest: &Manifest) -> Result<()> {
    if hash != manifest.layout_hash {
        return Err(Error::LayoutMismatch {
            checkpoint: hash.to_string(),
            dataset: manifest.layout_hash.clone(),
        });
    }
    Ok(())
}

pub fn load_anchor_net(path: &Path) -> Result<(String, AnchorNet)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("stage-1 checkpoint {}", path.display())));
    }
    match read_checkpoint(path)? {
        (h, Model::Anchor(a)) => Ok((h.layout_hash, a)),
        (h, _) => Err(Error::Format(format!("{} holds a {} network, not an anchor network", path.display(), h.kind))),
    }
}

pub fn load_velocity_net(path: &Path) -> Result<(String, VelocityNet)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("stage-2 checkpoint {}", path.display())));
    }
    match read_checkpoint(path)? {
        (h, Model::Velocity(v)) => Ok((h.layout_hash, v)),
        (h, _) => Err(Error::Format(format!("{} holds a {} network, not a completion network", path.display(), h.kind))),
    }
}

/// Per-epoch loss table with a running minimum of the total.
pub fn write_loss_csv(path: &Path, curve: &[EpochStats], cfg: &RunConfig) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let terms: Vec<&String> = curve.first().map(|c| c.terms.keys().collect()).unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "total".into(), "best_so_far".into()];
    header.extend(terms.iter().map(|t| t.to_string()));
    header.extend(["config_hash".into(), "tool_version".into()]);
    w.write_record(&header)?;
    let mut best = f64::INFINITY;
    let hash = cfg.hash();
    for e in curve {
        best = best.min(e.total);
        let mut row = vec![e.epoch.to_string(), e.total.to_string(), best.to_string()];
        row.extend(terms.iter().map(|t| e.terms.get(*t).copied().unwrap_or(f64::NAN).to_string()));
        row.extend([hash.clone(), TOOL_VERSION.into()]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub curve: Vec<EpochStats>,
}

/// Train stage 1 (anchor) or stage 2 (completion).
pub fn cmd_train(cfg: &RunConfig, stage: u8) -> Result<TrainOutput> {
    cfg.validate()?;
    let (ctx, codec) = (LossContext::default(), LatentCodec::default());
    let tc = cfg.train_config(stage);
    let (manifest, records) = read_split(&cfg.train_path, "training")?;
    check_layout(&LatentLayout::default().hash(), &manifest)?;
    let (model, curve, path) = match stage {
        1 => {
            let mut rng = rng_for(cfg.seed, "train.stage1");
            let (net, curve) = train_stage1(&records, &tc, &ctx, &codec, &mut rng)?;
            (Model::Anchor(net), curve, cfg.stage1_path.clone())
        }
        2 => {
            let anchor_net = if cfg.gt_anchor {
                None
            } else if cfg.stage1_path.exists() {
                let (hash, net) = load_anchor_net(&cfg.stage1_path)?;
                check_layout(&hash, &manifest)?;
                Some(net)
            } else {
                return Err(Error::MissingPrerequisite(format!(
                    "stage 2 needs the stage-1 checkpoint {} or train.gt_anchor = true",
                    cfg.stage1_path.display()
                )));
            };
            let source = anchor_net.as_ref().map_or(AnchorSource::GroundTruth, AnchorSource::Stage1);
            let mut rng = rng_for(cfg.seed, "train.stage2");
            let (net, curve) = train_stage2(&records, source, cfg.head, &tc, &ctx, &codec, &mut rng)?;
            (Model::Velocity(net), curve, cfg.stage2_path.clone())
        }
        s => return Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {s}"))),
    };
    ensure_parent(&path)?;
    write_checkpoint(&model, &codec.layout, &cfg.hash(), &path)?;
    let loss_csv = out_file(cfg, &format!("stage{stage}_loss.csv"))?;
    write_loss_csv(&loss_csv, &curve, cfg)?;
    Ok(TrainOutput {
        checkpoint: path,
        loss_csv,
        curve,
    })
}

/// Trained networks for inference. Without an anchor network the
/// ground-truth anchor is used.
pub struct Models {
    pub anchor: Option<AnchorNet>,
    pub completion: VelocityNet,
}

impl Models {
    pub fn load(cfg: &RunConfig, manifest: &Manifest) -> Result<Self> {
        let (hash, completion) = load_velocity_net(&cfg.stage2_path)?;
        check_layout(&hash, manifest)?;
        let anchor = if cfg.gt_anchor && !cfg.stage1_path.exists() {
            None
        } else {
            let (hash, net) = load_anchor_net(&cfg.stage1_path)?;
            check_layout(&hash, manifest)?;
            Some(net)
        };
        Ok(Models { anchor, completion })
    }
}

/// Complete every record. Each sequence draws its noise from a substream
/// of `seed` named after its id, so results do not depend on batch order.
pub fn predict_records(models: &Models, records: &[DatasetRecord], sampler: &SamplerConfig, seed: u64) -> Result<Vec<MotionSequence>> {
    let (ctx, codec) = (LossContext::default(), LatentCodec::default());
    let root = derive_seed(seed, "infer");
    records
        .iter()
        .map(|r| {
            let source = models.anchor.as_ref().map_or(AnchorSource::GroundTruth, AnchorSource::Stage1);
            let anchor = record_anchor(r, source, &ctx)?;
            let mut rng = rng_for(root, &r.meta.id);
            complete_motion(&models.completion, &anchor, &r.obs.cond, sampler, &codec, r.gt.fps, &mut rng)
        })
        .collect()
}

/// Run inference on the test split and write the predictions in the
/// dataset format, with the ground-truth slot holding the prediction.
pub fn cmd_infer(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let (manifest, records) = read_split(&cfg.test_path, "test")?;
    let models = Models::load(cfg, &manifest)?;
    let preds = predict_records(&models, &records, &cfg.sampler, cfg.seed)?;
    let out: Vec<DatasetRecord> = records
        .into_iter()
        .zip(preds)
        .map(|(mut r, p)| {
            r.gt = p;
            crate::synthdata::quantize_record(&mut r);
            r
        })
        .collect();
    let mut m = Manifest::new(&out, manifest.spec.clone());
    stamp(&mut m, cfg);
    m.extra.insert("kind".into(), "prediction".into());
    m.extra.insert("steps".into(), cfg.sampler.steps.to_string());
    m.extra.insert("cfg_scale".into(), cfg.sampler.cfg_scale.to_string());
    m.extra.insert("seed".into(), cfg.seed.to_string());
    m.extra.insert("head".into(), models.completion.kind.name().into());
    ensure_parent(&cfg.pred_path)?;
    write_dataset(&out, &m, &cfg.pred_path)?;
    Ok(cfg.pred_path.clone())
}

/// Metrics for matching prediction and ground-truth sequences.
pub fn evaluate_records(pred: &[MotionSequence], gt: &[DatasetRecord], opts: &MetricOptions) -> Result<Vec<MetricReport>> {
    if pred.len() != gt.len() {
        return Err(Error::IdMismatch(format!("{} predictions for {} sequences", pred.len(), gt.len())));
    }
    let ctx = LossContext::default();
    pred.iter()
        .zip(gt)
        .map(|(p, g)| evaluate_sequence(p, &g.gt, &ctx.skeleton, &ctx.mesh, &ctx.partition, opts))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub tool_version: String,
    pub prediction: String,
    pub ground_truth: String,
    pub aggregate: MetricReport,
    pub sequences: Vec<(String, MetricReport)>,
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "mpjpe",
    "pa_mpjpe",
    "pve",
    "non_torso_mpjpe",
    "wa_mpjpe",
    "w_mpjpe",
    "rte",
    "jitter",
    "foot_sliding",
    "empty_contact",
    "anchor_mean",
    "distal_mean",
    "gap",
];

fn metric_row(id: &str, r: &MetricReport, hash: &str) -> Vec<String> {
    let mut row = vec![id.to_string()];
    row.extend(
        [r.mpjpe, r.pa_mpjpe, r.pve, r.non_torso_mpjpe, r.wa_mpjpe, r.w_mpjpe]
            .iter()
            .map(|v| v.to_string()),
    );
    row.push(r.rte.map(|v| v.to_string()).unwrap_or_default());
    row.push(r.jitter.to_string());
    row.push(r.foot_sliding.to_string());
    row.push(r.empty_contact.to_string());
    row.extend([r.regional.anchor_mean, r.regional.distal_mean, r.regional.gap].iter().map(|v| v.to_string()));
    row.extend(JOINT_NAMES.iter().map(|j| r.per_joint.get(*j).map(|v| v.to_string()).unwrap_or_default()));
    row.extend([hash.to_string(), TOOL_VERSION.into()]);
    row
}

/// Write the per-sequence metric table followed by an `aggregate` row.
pub fn write_metric_csv(path: &Path, rows: &[(String, MetricReport)], agg: &MetricReport, cfg: &RunConfig) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(JOINT_NAMES.iter().map(|j| format!("joint_{j}")));
    header.extend(["config_hash".into(), "tool_version".into()]);
    w.write_record(&header)?;
    let hash = cfg.hash();
    for (id, r) in rows {
        w.write_record(metric_row(id, r, &hash))?;
    }
    w.write_record(metric_row("aggregate", agg, &hash))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evaluate a prediction file against a ground-truth dataset. Sequence ids
/// must match one to one and in order.
pub fn cmd_eval(cfg: &RunConfig, pred_path: &Path, gt_path: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let (_, pred) = read_split(pred_path, "prediction")?;
    let (_, gt) = read_split(gt_path, "ground-truth")?;
    let ids = |rs: &[DatasetRecord]| rs.iter().map(|r| r.meta.id.clone()).collect::<Vec<_>>();
    let (pi, gi) = (ids(&pred), ids(&gt));
    if pi != gi {
        let first = pi.iter().zip(&gi).find(|(a, b)| a != b);
        let msg = match first {
            Some((a, b)) => format!("prediction {a} against ground truth {b}"),
            None => format!("{} predictions for {} sequences", pi.len(), gi.len()),
        };
        return Err(Error::IdMismatch(msg));
    }
    let seqs: Vec<MotionSequence> = pred.into_iter().map(|r| r.gt).collect();
    let reports = evaluate_records(&seqs, &gt, &cfg.metrics)?;
    let agg = if reports.is_empty() { empty_report() } else { aggregate(&reports)? };
    let sequences: Vec<(String, MetricReport)> = gi.into_iter().zip(reports).collect();
    write_metric_csv(&out_file(cfg, "eval.csv")?, &sequences, &agg, cfg)?;
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        tool_version: TOOL_VERSION.into(),
        prediction: pred_path.display().to_string(),
        ground_truth: gt_path.display().to_string(),
        aggregate: agg,
        sequences,
    };
    let json = out_file(cfg, "eval.json")?;
    std::fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))?;
    Ok(summary)
}

fn empty_report() -> MetricReport {
    MetricReport {
        mpjpe: 0.0,
        pa_mpjpe: 0.0,
        pve: 0.0,
        non_torso_mpjpe: 0.0,
        wa_mpjpe: 0.0,
        w_mpjpe: 0.0,
        rte: None,
        jitter: 0.0,
        foot_sliding: 0.0,
        empty_contact: true,
        per_joint: BTreeMap::new(),
        regional: crate::metrics::Regional {
            anchor_mean: 0.0,
            distal_mean: 0.0,
            gap: 0.0,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub steps: usize,
    pub cfg_scale: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub non_torso_mpjpe: f64,
}

fn ablation_row(models: &Models, records: &[DatasetRecord], sampler: SamplerConfig, cfg: &RunConfig) -> Result<AblationRow> {
    let preds = predict_records(models, records, &sampler, cfg.seed)?;
    let agg = aggregate(&evaluate_records(&preds, records, &cfg.metrics)?)?;
    Ok(AblationRow {
        steps: sampler.steps,
        cfg_scale: sampler.cfg_scale,
        mpjpe: agg.mpjpe,
        pa_mpjpe: agg.pa_mpjpe,
        non_torso_mpjpe: agg.non_torso_mpjpe,
    })
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow], cfg: &RunConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["steps", "cfg_scale", "mpjpe", "pa_mpjpe", "non_torso_mpjpe", "config_hash", "tool_version"])?;
    let hash = cfg.hash();
    for r in rows {
        w.write_record([
            r.steps.to_string(),
            r.cfg_scale.to_string(),
            r.mpjpe.to_string(),
            r.pa_mpjpe.to_string(),
            r.non_torso_mpjpe.to_string(),
            hash.clone(),
            TOOL_VERSION.into(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationOutput {
    pub steps: Vec<AblationRow>,
    pub cfg: Vec<AblationRow>,
}

/// Test-split metrics against the number of sampling steps (at the
/// configured guidance scale) and against the guidance scale (at the
/// configured step count), with a fixed seed throughout.
pub fn ablate(models: &Models, records: &[DatasetRecord], cfg: &RunConfig) -> Result<AblationOutput> {
    let steps = cfg
        .ablate_steps
        .iter()
        .map(|&s| ablation_row(models, records, SamplerConfig { steps: s, ..cfg.sampler }, cfg))
        .collect::<Result<_>>()?;
    let scales = cfg
        .ablate_cfg
        .iter()
        .map(|&c| ablation_row(models, records, SamplerConfig { cfg_scale: c, ..cfg.sampler }, cfg))
        .collect::<Result<_>>()?;
    Ok(AblationOutput { steps, cfg: scales })
}

/// Writes `ablate_steps.csv` (one row per step count) and `ablate_cfg.csv`.
pub fn cmd_ablate_steps(cfg: &RunConfig) -> Result<AblationOutput> {
    cfg.validate()?;
    let (manifest, records) = read_split(&cfg.test_path, "test")?;
    let models = Models::load(cfg, &manifest)?;
    let out = ablate(&models, &records, cfg)?;
    write_ablation_csv(&out_file(cfg, "ablate_steps.csv")?, &out.steps, cfg)?;
    write_ablation_csv(&out_file(cfg, "ablate_cfg.csv")?, &out.cfg, cfg)?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub config_hash: String,
    pub tool_version: String,
    pub report: GradcheckReport,
}

/// Run the finite-difference suites and write `gradcheck.json`.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: Option<String>) -> Result<GradcheckOutput> {
    let opts = GradcheckOptions {
        seed: derive_seed(cfg.seed, "gradcheck"),
        corrupt,
        ..GradcheckOptions::default()
    };
    let out = GradcheckOutput {
        config_hash: cfg.hash(),
        tool_version: TOOL_VERSION.into(),
        report: run_gradcheck(&opts)?,
    };
    let path = out_file(cfg, "gradcheck.json")?;
    std::fs::write(&path, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}
