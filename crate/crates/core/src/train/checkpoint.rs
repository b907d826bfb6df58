//! Versioned binary checkpoint of a trained model.
//!
//! Layout (little-endian): magic "UNCK", version u16, mode u8, dim u32,
//! config hash u64, text seed u64, image seed u64, text projection
//! dim×dim f64, image projection dim×dim f64, fusion projection dim×2·dim
//! f64, w1..w4 f64, logit scale f64, CRC32 of everything before it.

use std::path::Path;

use thiserror::Error;

use crate::encoders::{ImageEncoderParams, TextEncoderParams};
use crate::fusion::FusionWeights;
use crate::index::StoreMode;
use crate::linalg::Matrix;
use crate::model::ModelParams;

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint checksum mismatch (corrupt or truncated)")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config_hash: u64,
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let d = p.dim();
        let mut out = Vec::with_capacity(64 + 8 * 4 * d * d);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match p.mode {
            StoreMode::FeatureFusion => 0,
            StoreMode::ScoreFusion => 1,
        });
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&p.text.seed.to_le_bytes());
        out.extend_from_slice(&p.image.seed.to_le_bytes());
        put_matrix(&mut out, &p.text.projection);
        put_matrix(&mut out, &p.image.projection);
        put_matrix(&mut out, &p.fusion_proj);
        for w in [p.weights.w1, p.weights.w2, p.weights.w3, p.weights.w4, p.logit_scale] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 2 + 1 + 4 + 24 + 4 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            let s = body.get(pos..pos + n).ok_or_else(|| CheckpointError::Malformed("unexpected end".into()))?;
            pos += n;
            Ok(s)
        };
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mode = match take(1)?[0] {
            0 => StoreMode::FeatureFusion,
            1 => StoreMode::ScoreFusion,
            m => return Err(CheckpointError::Malformed(format!("mode byte {m}"))),
        };
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config_hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let text_seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let image_seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut matrix = |rows: usize, cols: usize| -> Result<Matrix, CheckpointError> {
            let raw = take(rows * cols * 8)?;
            Ok(Matrix::from_vec(rows, cols, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
        };
        let text_proj = matrix(d, d)?;
        let image_proj = matrix(d, d)?;
        let fusion_proj = matrix(d, 2 * d)?;
        let scalars = matrix(1, 5)?;
        let s = scalars.as_slice();
        if pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let params = ModelParams {
            mode,
            text: TextEncoderParams { projection: text_proj, hash_dim: d, seed: text_seed },
            image: ImageEncoderParams { projection: image_proj, seed: image_seed },
            weights: FusionWeights::new(s[0], s[1], s[2], s[3]),
            logit_scale: s[4],
            fusion_proj,
        };
        if !params.is_finite() {
            return Err(CheckpointError::Malformed("non-finite parameter".into()));
        }
        Ok(Self { params, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        for mode in [StoreMode::ScoreFusion, StoreMode::FeatureFusion] {
            let mut params = ModelParams::init(6, mode, 42);
            params.weights = FusionWeights::new(0.5, -1.0, 2.0, 0.25);
            let ck = Checkpoint { params, config_hash: 0xdead_beef };
            let bytes = ck.to_bytes();
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
            assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::ChecksumMismatch)));
            let mut bad = bytes.clone();
            bad[0] = 0;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        }
    }
}
