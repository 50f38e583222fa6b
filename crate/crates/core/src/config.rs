//! Run configuration: a flat text file of `section.key = value` lines.
//! Blank lines and `#` comments are ignored; absent keys keep their
//! defaults, so an empty file is a complete configuration.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flowmatch::{Block, NoiseSpec, SamplerConfig};
use crate::losses::LossWeights;
use crate::metrics::MetricOptions;
use crate::nn::train::TrainConfig;
use crate::nn::{HeadKind, NetConfig};
use crate::synthdata::MotionSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub frames: usize,
    pub dropout: f64,
    pub pixel_noise: f64,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub stage1_path: PathBuf,
    pub stage2_path: PathBuf,
    pub pred_path: PathBuf,
    pub out_dir: PathBuf,
    pub net: NetConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_drop: f64,
    pub gt_anchor: bool,
    pub head: HeadKind,
    pub weights: LossWeights,
    pub sigma: f64,
    pub sigma_joints: f64,
    pub sampler: SamplerConfig,
    pub metrics: MetricOptions,
    pub ablate_steps: Vec<usize>,
    pub ablate_cfg: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_train: 64,
            n_test: 16,
            frames: 120,
            dropout: 0.1,
            pixel_noise: 2.0,
            train_path: "run/train.fmkd".into(),
            test_path: "run/test.fmkd".into(),
            stage1_path: "run/stage1.fmkc".into(),
            stage2_path: "run/stage2.fmkc".into(),
            pred_path: "run/pred.fmkd".into(),
            out_dir: "run".into(),
            net: NetConfig::default(),
            stage1_epochs: 40,
            stage2_epochs: 80,
            batch: 4,
            lr: 1e-3,
            p_drop: 0.1,
            gt_anchor: false,
            head: HeadKind::Velocity,
            weights: LossWeights {
                w_cons: 0.05,
                w_world_transl: 0.01,
                ..LossWeights::default()
            },
            sigma: 1.0,
            sigma_joints: 0.5,
            sampler: SamplerConfig::default(),
            metrics: MetricOptions::default(),
            ablate_steps: vec![1, 2, 5, 10, 20, 50, 100],
            ablate_cfg: vec![1.0, 1.25, 1.5, 1.75],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.weights;
        let p = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("data.n_train", self.n_train.to_string()),
            ("data.n_test", self.n_test.to_string()),
            ("data.frames", self.frames.to_string()),
            ("data.dropout", self.dropout.to_string()),
            ("data.pixel_noise", self.pixel_noise.to_string()),
            ("paths.train", p(&self.train_path)),
            ("paths.test", p(&self.test_path)),
            ("paths.stage1", p(&self.stage1_path)),
            ("paths.stage2", p(&self.stage2_path)),
            ("paths.pred", p(&self.pred_path)),
            ("paths.out_dir", p(&self.out_dir)),
            ("model.dim", self.net.dim.to_string()),
            ("model.blocks", self.net.blocks.to_string()),
            ("model.time_freqs", self.net.time_freqs.to_string()),
            ("train.stage1_epochs", self.stage1_epochs.to_string()),
            ("train.stage2_epochs", self.stage2_epochs.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.p_drop", self.p_drop.to_string()),
            ("train.gt_anchor", self.gt_anchor.to_string()),
            ("train.head", self.head.name().to_string()),
            ("loss.w_fm", w.w_fm.to_string()),
            ("loss.w_pose", w.w_pose.to_string()),
            ("loss.w_joints3d", w.w_joints3d.to_string()),
            ("loss.w_transl", w.w_transl.to_string()),
            ("loss.w_world_transl", w.w_world_transl.to_string()),
            ("loss.w_cons", w.w_cons.to_string()),
            ("loss.w_proj_max", w.w_proj_max.to_string()),
            ("loss.w_vertices", w.w_vertices.to_string()),
            ("loss.w_kp2d", w.w_kp2d.to_string()),
            ("loss.r_proj", w.r_proj.to_string()),
            ("noise.sigma", self.sigma.to_string()),
            ("noise.sigma_joints", self.sigma_joints.to_string()),
            ("sample.steps", self.sampler.steps.to_string()),
            ("sample.cfg_scale", self.sampler.cfg_scale.to_string()),
            ("metrics.chunk", self.metrics.chunk.to_string()),
            ("metrics.world_scale", self.metrics.world_scale.to_string()),
            ("metrics.contact_speed", self.metrics.contact.speed.to_string()),
            ("metrics.contact_height", self.metrics.contact.height.to_string()),
            (
                "ablate.steps",
                self.ablate_steps.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            (
                "ablate.cfg_scales",
                self.ablate_cfg.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.n_train" => self.n_train = parse(key, v)?,
            "data.n_test" => self.n_test = parse(key, v)?,
            "data.frames" => self.frames = parse(key, v)?,
            "data.dropout" => self.dropout = parse(key, v)?,
            "data.pixel_noise" => self.pixel_noise = parse(key, v)?,
            "paths.train" => self.train_path = v.into(),
            "paths.test" => self.test_path = v.into(),
            "paths.stage1" => self.stage1_path = v.into(),
            "paths.stage2" => self.stage2_path = v.into(),
            "paths.pred" => self.pred_path = v.into(),
            "paths.out_dir" => self.out_dir = v.into(),
            "model.dim" => self.net.dim = parse(key, v)?,
            "model.blocks" => self.net.blocks = parse(key, v)?,
            "model.time_freqs" => self.net.time_freqs = parse(key, v)?,
            "train.stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "train.stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "train.batch" => self.batch = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.p_drop" => self.p_drop = parse(key, v)?,
            "train.gt_anchor" => self.gt_anchor = parse(key, v)?,
            "train.head" => {
                self.head = match v {
                    "velocity" => HeadKind::Velocity,
                    "direct" => HeadKind::Direct,
                    _ => return Err(Error::Config(format!("train.head: expected velocity or direct, got {v:?}"))),
                }
            }
            "loss.w_fm" => w.w_fm = parse(key, v)?,
            "loss.w_pose" => w.w_pose = parse(key, v)?,
            "loss.w_joints3d" => w.w_joints3d = parse(key, v)?,
            "loss.w_transl" => w.w_transl = parse(key, v)?,
            "loss.w_world_transl" => w.w_world_transl = parse(key, v)?,
            "loss.w_cons" => w.w_cons = parse(key, v)?,
            "loss.w_proj_max" => w.w_proj_max = parse(key, v)?,
            "loss.w_vertices" => w.w_vertices = parse(key, v)?,
            "loss.w_kp2d" => w.w_kp2d = parse(key, v)?,
            "loss.r_proj" => w.r_proj = parse(key, v)?,
            "noise.sigma" => self.sigma = parse(key, v)?,
            "noise.sigma_joints" => self.sigma_joints = parse(key, v)?,
            "sample.steps" => self.sampler.steps = parse(key, v)?,
            "sample.cfg_scale" => self.sampler.cfg_scale = parse(key, v)?,
            "metrics.chunk" => self.metrics.chunk = parse(key, v)?,
            "metrics.world_scale" => self.metrics.world_scale = parse(key, v)?,
            "metrics.contact_speed" => self.metrics.contact.speed = parse(key, v)?,
            "metrics.contact_height" => self.metrics.contact.height = parse(key, v)?,
            "ablate.steps" => {
                self.ablate_steps = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "ablate.cfg_scales" => {
                self.ablate_cfg = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        crate::flowmatch::hex_prefix(&Sha256::digest(self.to_text().as_bytes()), 16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("data.frames must be positive".into()));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        if self.metrics.chunk < 2 {
            return Err(Error::Config("metrics.chunk must be at least 2".into()));
        }
        if self.ablate_steps.contains(&0) {
            return Err(Error::Config("ablate.steps entries must be positive".into()));
        }
        self.motion_spec().validate()?;
        self.train_config(1).validate()?;
        self.train_config(2).validate()
    }

    pub fn motion_spec(&self) -> MotionSpec {
        let mut spec = MotionSpec {
            n_frames: self.frames,
            pixel_noise: self.pixel_noise,
            ..MotionSpec::default()
        };
        spec.occlusion.dropout = self.dropout;
        spec
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            sigma: Block::ALL
                .iter()
                .map(|&b| (b, if matches!(b, Block::JTorso | Block::JNon) { self.sigma_joints } else { self.sigma }))
                .collect(),
        }
    }

    pub fn train_config(&self, stage: u8) -> TrainConfig {
        TrainConfig {
            net: self.net,
            epochs: if stage == 1 { self.stage1_epochs } else { self.stage2_epochs },
            batch: self.batch,
            lr: self.lr,
            p_drop: self.p_drop,
            weights: self.weights,
            noise: self.noise(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse_str("# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("sample.cfg_scale", "1.25").unwrap();
        c.set("ablate.steps", "1, 3,9").unwrap();
        c.set("train.head", "direct").unwrap();
        let back = RunConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(matches!(RunConfig::parse_str("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("seed = x"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("seed"), Err(Error::Config(_))));
        assert!(RunConfig::parse_str("sample.steps = 0").is_err());
    }

    #[test]
    fn defaults_match_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.sampler.steps, 50);
        assert_eq!(c.sampler.cfg_scale, 1.5);
        assert_eq!(c.metrics.chunk, 100);
        assert!(c.ablate_steps.contains(&50));
        assert_eq!(c.noise(), NoiseSpec::default());
    }
}
