//! Checkpoint container.
//!
//! ```text
//! "FMKC" | version: u32 LE | header length: u32 LE | header (JSON)
//! parameters: f32 LE, in visit order, row-major
//! buffers:    f32 LE, in declaration order
//! CRC32 of all preceding bytes: u32 LE
//! ```
//!
//! The header records the network kind, its dimensions, the latent layout
//! hash, the run-config hash, the tool version and the name and shape of
//! every stored array.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Module;
use super::nets::{AnchorNet, Buffers, HeadKind, NetConfig, Standardizer, VelocityNet, ANCHOR_OUT};
use crate::error::{Error, Result};
use crate::flowmatch::{LatentLayout, NoiseSpec};
use crate::motion::CONDITION_DIM;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMKC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `anchor`, `velocity` or `direct`.
    pub kind: String,
    pub net: NetConfig,
    pub layout_hash: String,
    pub config_hash: String,
    pub tool_version: String,
    pub params: Vec<(String, Vec<usize>)>,
    pub buffers: Vec<(String, usize)>,
}

/// A trained network of either stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Anchor(AnchorNet),
    Velocity(VelocityNet),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Anchor(_) => "anchor",
            Model::Velocity(v) => v.kind.name(),
        }
    }

    fn net_config(&self) -> NetConfig {
        match self {
            Model::Anchor(a) => a.config,
            Model::Velocity(v) => v.config,
        }
    }

    fn module(&mut self) -> &mut dyn Module {
        match self {
            Model::Anchor(a) => a,
            Model::Velocity(v) => v,
        }
    }

    fn buffers(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        match self {
            Model::Anchor(a) => a.buffers_mut(),
            Model::Velocity(v) => v.buffers_mut(),
        }
    }
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

/// Serialize a model. Values are written as `f32`.
pub fn encode_checkpoint(model: &Model, layout: &LatentLayout, config_hash: &str) -> Result<Vec<u8>> {
    let mut m = model.clone();
    let mut params = Vec::new();
    let mut body = Vec::new();
    m.module().visit("", &mut |name, p| {
        params.push((name.to_string(), vec![p.value.nrows(), p.value.ncols()]));
        p.value.iter().for_each(|v| put_f32(&mut body, *v));
    });
    let mut bufs = Vec::new();
    for (name, b) in &m.buffers() {
        bufs.push((name.clone(), b.len()));
        b.iter().for_each(|v| put_f32(&mut body, *v));
    }
    let header = CheckpointHeader {
        kind: model.kind().to_string(),
        net: model.net_config(),
        layout_hash: layout.hash(),
        config_hash: config_hash.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        params,
        buffers: bufs,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(body.len() + json.len() + 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(data: &[u8], at: usize) -> Result<u32> {
    data.get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("checkpoint truncated".into()))
}

/// Parse a checkpoint, verifying magic, version, checksum, layout and
/// every array shape.
pub fn decode_checkpoint(data: &[u8]) -> Result<(CheckpointHeader, Model)> {
    if data.len() < 16 || &data[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32_at(data, 4)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (payload, tail) = data.split_at(data.len() - 4);
    if crc32fast::hash(payload) != u32_at(tail, 0)? {
        return Err(Error::Checksum { record: 0 });
    }
    let hlen = u32_at(data, 8)? as usize;
    let json = payload
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    let layout = LatentLayout::default();
    if header.layout_hash != layout.hash() {
        return Err(Error::LayoutMismatch {
            checkpoint: header.layout_hash.clone(),
            dataset: layout.hash(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = match header.kind.as_str() {
        "anchor" => Model::Anchor(AnchorNet::new(
            &mut rng,
            header.net,
            Standardizer::identity(CONDITION_DIM),
            Standardizer::identity(ANCHOR_OUT),
        )?),
        k @ ("velocity" | "direct") => {
            let kind = if k == "velocity" { HeadKind::Velocity } else { HeadKind::Direct };
            let w = layout.frame_width();
            Model::Velocity(VelocityNet::new(
                &mut rng,
                header.net,
                kind,
                &layout,
                &NoiseSpec::default(),
                Standardizer::identity(w),
                Standardizer::identity(CONDITION_DIM),
            )?)
        }
        other => return Err(Error::Format(format!("unknown model kind {other}"))),
    };
    let body = &payload[12 + hlen..];
    let mut pos = 0usize;
    let mut next = |n: usize| -> Result<Vec<f64>> {
        let bytes = body
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Format("checkpoint body truncated".into()))?;
        pos += 4 * n;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect())
    };
    {
        let mut err = None;
        let mut idx = 0;
        model.module().visit("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match header.params.get(idx) {
                Some((n, shape)) if n == name && shape[..] == [p.value.nrows(), p.value.ncols()] => {
                    match next(p.value.len()) {
                        Ok(vals) => p.value.iter_mut().zip(vals).for_each(|(d, v)| *d = v),
                        Err(e) => err = Some(e),
                    }
                }
                _ => err = Some(Error::Format(format!("parameter {name} does not match the header"))),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != header.params.len() {
            return Err(Error::Format("parameter count does not match the header".into()));
        }
        let buffers = model.buffers();
        if buffers.len() != header.buffers.len() {
            return Err(Error::Format("buffer count does not match the header".into()));
        }
        for ((name, b), (hn, len)) in buffers.into_iter().zip(&header.buffers) {
            if &name != hn {
                return Err(Error::Format(format!("buffer {hn} where {name} was expected")));
            }
            *b = next(*len)?;
        }
    }
    if pos != body.len() {
        return Err(Error::Format("trailing bytes after checkpoint body".into()));
    }
    if let Model::Velocity(v) = &model {
        if v.mask.len() != layout.frame_width() || v.sigma.len() != layout.frame_width() {
            return Err(Error::Format("velocity buffers do not match the layout".into()));
        }
    }
    if let Model::Anchor(a) = &model {
        if a.cond_stats.width() != CONDITION_DIM || a.out_stats.width() != ANCHOR_OUT {
            return Err(Error::Format("anchor buffers have unexpected widths".into()));
        }
    }
    Ok((header, model))
}

pub fn write_checkpoint(model: &Model, layout: &LatentLayout, config_hash: &str, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, layout, config_hash)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::train::quantize_f32;

    fn small() -> NetConfig {
        NetConfig {
            dim: 8,
            blocks: 1,
            time_freqs: 2,
        }
    }

    fn nets() -> Vec<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = LatentLayout::default();
        let mut a = AnchorNet::new(&mut rng, small(), Standardizer::identity(CONDITION_DIM), Standardizer::identity(ANCHOR_OUT)).unwrap();
        a.out_stats.mean[3] = 0.25;
        quantize_f32(&mut a);
        let mut out = vec![Model::Anchor(a)];
        for kind in [HeadKind::Velocity, HeadKind::Direct] {
            let mut v = VelocityNet::new(&mut rng, small(), kind, &layout, &NoiseSpec::default(), Standardizer::identity(148), Standardizer::identity(CONDITION_DIM)).unwrap();
            quantize_f32(&mut v);
            out.push(Model::Velocity(v));
        }
        out
    }

    #[test]
    fn round_trip_is_lossless() {
        let layout = LatentLayout::default();
        for m in nets() {
            let bytes = encode_checkpoint(&m, &layout, "abc").unwrap();
            let (h, back) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(h.config_hash, "abc");
            assert_eq!(encode_checkpoint(&back, &layout, "abc").unwrap(), bytes);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let layout = LatentLayout::default();
        let m = nets().remove(1);
        let mut bytes = encode_checkpoint(&m, &layout, "x").unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checksum { .. })));
        assert!(decode_checkpoint(&bytes[..n - 9]).is_err());
        let mut bytes = encode_checkpoint(&m, &layout, "x").unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
