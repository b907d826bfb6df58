//! Embedding store and its binary file format.
//!
//! ```text
//! magic  "UNIR"             4 bytes
//! version u16 = 1
//! mode    u8   0 = feature fusion, 1 = score fusion
//! dim     u32
//! count   u64
//! ids     count × [len u16, utf-8 bytes]
//! feature mode: count × dim f32
//! score mode:   presence bitmask (2 bits per row: image, text; LSB first,
//!               byte padded), image matrix count × dim f32, text matrix
//!               count × dim f32
//! crc32   u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Absent modalities are stored as
//! zero rows with their presence bit cleared.

use std::collections::HashMap;
use std::path::Path;

use crate::encoders::{FeatureLookup, Vector};
use crate::fusion::{FeatureFusionEmbedding, ScoreFusionEmbedding};

use super::IndexError;

pub const MAGIC: &[u8; 4] = b"UNIR";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StoreMode {
    #[serde(alias = "feature")]
    FeatureFusion,
    #[serde(alias = "score")]
    ScoreFusion,
}

impl std::str::FromStr for StoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "score" | "scorefusion" | "score-fusion" => Ok(StoreMode::ScoreFusion),
            "feature" | "featurefusion" | "feature-fusion" => Ok(StoreMode::FeatureFusion),
            _ => Err(format!("unknown fusion mode {s:?} (expected score or feature)")),
        }
    }
}

impl StoreMode {
    fn code(self) -> u8 {
        match self {
            StoreMode::FeatureFusion => 0,
            StoreMode::ScoreFusion => 1,
        }
    }
}

const IMAGE_BIT: u8 = 0b01;
const TEXT_BIT: u8 = 0b10;

/// Contiguous `f32` embedding matrices keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    mode: StoreMode,
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
    /// Feature-mode rows, or image rows in score mode.
    primary: Vec<f32>,
    /// Text rows (score mode only).
    text: Vec<f32>,
    /// Per-row presence bits (score mode only).
    presence: Vec<u8>,
}

impl EmbeddingStore {
    pub fn new_feature(dim: usize) -> Self {
        Self::empty(dim, StoreMode::FeatureFusion)
    }

    pub fn new_score(dim: usize) -> Self {
        Self::empty(dim, StoreMode::ScoreFusion)
    }

    fn empty(dim: usize, mode: StoreMode) -> Self {
        Self { dim, mode, ids: Vec::new(), by_id: HashMap::new(), primary: Vec::new(), text: Vec::new(), presence: Vec::new() }
    }

    fn push_id(&mut self, id: &str) -> Result<(), IndexError> {
        if id.len() > usize::from(u16::MAX) {
            return Err(IndexError::Malformed(format!("id longer than 65535 bytes: {}...", &id[..32])));
        }
        if self.by_id.insert(id.to_string(), self.ids.len()).is_some() {
            return Err(IndexError::DuplicateId(id.to_string()));
        }
        self.ids.push(id.to_string());
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), IndexError> {
        if got != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got });
        }
        Ok(())
    }

    /// Appends one row to a feature-mode store.
    pub fn push_row(&mut self, id: &str, row: &[f32]) -> Result<(), IndexError> {
        if self.mode != StoreMode::FeatureFusion {
            return Err(IndexError::ModeMismatch);
        }
        self.check_dim(row.len())?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::Malformed(format!("non-finite entry in row {id:?}")));
        }
        self.push_id(id)?;
        self.primary.extend_from_slice(row);
        Ok(())
    }

    pub fn push_feature(&mut self, id: &str, e: &FeatureFusionEmbedding) -> Result<(), IndexError> {
        self.push_row(id, e.fused_vec.as_slice())
    }

    /// Appends one item to a score-mode store; absent vectors become zero
    /// rows with the presence bit off.
    pub fn push_score(&mut self, id: &str, e: &ScoreFusionEmbedding) -> Result<(), IndexError> {
        if self.mode != StoreMode::ScoreFusion {
            return Err(IndexError::ModeMismatch);
        }
        for v in [&e.image_vec, &e.text_vec].into_iter().flatten() {
            self.check_dim(v.dim())?;
        }
        self.push_id(id)?;
        let mut bits = 0u8;
        match &e.image_vec {
            Some(v) => {
                bits |= IMAGE_BIT;
                self.primary.extend_from_slice(v.as_slice());
            }
            None => self.primary.extend(std::iter::repeat_n(0.0, self.dim)),
        }
        match &e.text_vec {
            Some(v) => {
                bits |= TEXT_BIT;
                self.text.extend_from_slice(v.as_slice());
            }
            None => self.text.extend(std::iter::repeat_n(0.0, self.dim)),
        }
        self.presence.push(bits);
        Ok(())
    }

    /// New store holding the listed ids, in the given order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self, IndexError> {
        let mut out = Self::empty(self.dim, self.mode);
        let d = self.dim;
        for id in ids {
            let i = self.index_of(id).ok_or_else(|| IndexError::Malformed(format!("unknown id {id:?}")))?;
            out.push_id(id)?;
            out.primary.extend_from_slice(&self.primary[i * d..(i + 1) * d]);
            if self.mode == StoreMode::ScoreFusion {
                out.text.extend_from_slice(&self.text[i * d..(i + 1) * d]);
                out.presence.push(self.presence[i]);
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Feature-mode row, or image row in score mode.
    pub fn primary_row(&self, i: usize) -> &[f32] {
        &self.primary[i * self.dim..(i + 1) * self.dim]
    }

    /// Text row (score mode).
    pub fn text_row(&self, i: usize) -> &[f32] {
        &self.text[i * self.dim..(i + 1) * self.dim]
    }

    pub fn has_image(&self, i: usize) -> bool {
        self.presence.get(i).is_some_and(|b| b & IMAGE_BIT != 0)
    }

    pub fn has_text(&self, i: usize) -> bool {
        self.presence.get(i).is_some_and(|b| b & TEXT_BIT != 0)
    }

    /// Reconstructs the score-fusion embedding of row `i`.
    pub fn score_embedding(&self, i: usize) -> Option<ScoreFusionEmbedding> {
        if self.mode != StoreMode::ScoreFusion {
            return None;
        }
        let image = self.has_image(i).then(|| Vector::new(self.primary_row(i).to_vec()));
        let text = self.has_text(i).then(|| Vector::new(self.text_row(i).to_vec()));
        ScoreFusionEmbedding::new(image, text).ok()
    }

    /// Serializes to the binary format, CRC included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.primary.len() * 4 * 2 + self.ids.len() * 16 + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        match self.mode {
            StoreMode::FeatureFusion => put_f32s(&mut out, &self.primary),
            StoreMode::ScoreFusion => {
                let mut mask = vec![0u8; (self.ids.len() * 2).div_ceil(8)];
                for (r, &bits) in self.presence.iter().enumerate() {
                    for (k, flag) in [IMAGE_BIT, TEXT_BIT].into_iter().enumerate() {
                        if bits & flag != 0 {
                            let bit = 2 * r + k;
                            mask[bit / 8] |= 1 << (bit % 8);
                        }
                    }
                }
                out.extend_from_slice(&mask);
                put_f32s(&mut out, &self.primary);
                put_f32s(&mut out, &self.text);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(IndexError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(IndexError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(IndexError::ChecksumMismatch);
        }
        let mut cur = Cursor { buf: body, pos: 4 };
        let version = cur.u16()?;
        if version != VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let mode = match cur.u8()? {
            0 => StoreMode::FeatureFusion,
            1 => StoreMode::ScoreFusion,
            m => return Err(IndexError::Malformed(format!("unknown mode byte {m}"))),
        };
        let dim = cur.u32()? as usize;
        let count = usize::try_from(cur.u64()?).map_err(|_| IndexError::Malformed("count overflow".into()))?;
        let mut store = Self::empty(dim, mode);
        for _ in 0..count {
            let len = usize::from(cur.u16()?);
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| IndexError::Malformed("id is not utf-8".into()))?;
            store.push_id(id)?;
        }
        let cells = count.checked_mul(dim).ok_or_else(|| IndexError::Malformed("matrix size overflow".into()))?;
        match mode {
            StoreMode::FeatureFusion => store.primary = cur.f32s(cells)?,
            StoreMode::ScoreFusion => {
                let mask = cur.take((count * 2).div_ceil(8))?.to_vec();
                store.presence = (0..count)
                    .map(|r| {
                        let bit = |k: usize| (mask[(2 * r + k) / 8] >> ((2 * r + k) % 8)) & 1;
                        bit(0) * IMAGE_BIT | bit(1) * TEXT_BIT
                    })
                    .collect();
                store.primary = cur.f32s(cells)?;
                store.text = cur.f32s(cells)?;
            }
        }
        if cur.pos != body.len() {
            return Err(IndexError::DimMismatch { expected: cur.pos + 4, got: bytes.len() });
        }
        store.validate()?;
        Ok(store)
    }

    /// Checks finiteness and that absent-modality rows are zero placeholders.
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.primary.iter().chain(&self.text).any(|v| !v.is_finite()) {
            return Err(IndexError::Malformed("non-finite matrix entry".into()));
        }
        if self.mode == StoreMode::ScoreFusion {
            for r in 0..self.len() {
                if !self.has_image(r) && self.primary_row(r).iter().any(|&v| v != 0.0)
                    || !self.has_text(r) && self.text_row(r).iter().any(|&v| v != 0.0)
                {
                    return Err(IndexError::Malformed(format!("row {} has data under a cleared presence bit", self.ids[r])));
                }
                if self.presence[r] == 0 {
                    return Err(IndexError::Malformed(format!("row {} has no modality", self.ids[r])));
                }
            }
        }
        Ok(())
    }
}

impl FeatureLookup for EmbeddingStore {
    fn feature(&self, image_ref: &str) -> Option<&[f32]> {
        if self.mode != StoreMode::FeatureFusion {
            return None;
        }
        self.index_of(image_ref).map(|i| self.primary_row(i))
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(IndexError::DimMismatch { expected: self.pos.saturating_add(n), got: self.buf.len() })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IndexError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| IndexError::Malformed("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), IndexError> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore, IndexError> {
    EmbeddingStore::from_bytes(&std::fs::read(path)?)
}
