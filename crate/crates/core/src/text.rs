//! Caption embedders producing `[N, dim]` feature blocks for text conditions.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const TEXT_EMBED_MAGIC: &[u8; 4] = b"MMTE";

pub trait TextEmbedder {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    /// Row-major `[len, dim]` features for one caption.
    fn embed(&self, caption: &str) -> Result<Vec<f32>>;
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Deterministic stub: word `i` of the lower-cased caption fills slot `i`
/// with a unit-variance vector seeded by the word's hash; unused slots are
/// zero.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub len: usize,
    pub dim: usize,
}

impl TextEmbedder for HashEmbedder {
    fn len(&self) -> usize {
        self.len
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<Vec<f32>> {
        let mut out = vec![0f32; self.len * self.dim];
        let lower = caption.to_lowercase();
        for (slot, word) in lower.split_whitespace().take(self.len).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
            for v in &mut out[slot * self.dim..(slot + 1) * self.dim] {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        Ok(out)
    }
}

/// Precomputed embeddings keyed by exact caption text.
///
/// File layout: `MMTE`, then u32 LE record count, `len`, `dim`; each record is
/// a u32 LE byte length, UTF-8 caption, and `len·dim` f32 LE values.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    len: usize,
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl FileEmbedder {
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let u32_at = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format("text embedding file is truncated".into()))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("text embedding file is truncated".into()))?;
        if &magic != TEXT_EMBED_MAGIC {
            return Err(Error::Format("not a text embedding file (bad magic)".into()));
        }
        let count = u32_at(&mut r)? as usize;
        let len = u32_at(&mut r)? as usize;
        let dim = u32_at(&mut r)? as usize;
        let mut table = HashMap::with_capacity(count);
        for _ in 0..count {
            let n = u32_at(&mut r)? as usize;
            let mut text = vec![0u8; n];
            r.read_exact(&mut text).map_err(|_| Error::Format("caption is truncated".into()))?;
            let text = String::from_utf8(text).map_err(|_| Error::Format("caption is not UTF-8".into()))?;
            let mut raw = vec![0u8; len * dim * 4];
            r.read_exact(&mut raw).map_err(|_| Error::Format("embedding is truncated".into()))?;
            table.insert(text, raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        }
        Ok(Self { len, dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(records: &[(String, Vec<f32>)], len: usize, dim: usize) -> Result<Vec<u8>> {
        let mut out = TEXT_EMBED_MAGIC.to_vec();
        for v in [records.len(), len, dim] {
            out.extend((v as u32).to_le_bytes());
        }
        for (text, feats) in records {
            if feats.len() != len * dim {
                return Err(Error::shape("text embedding", &[len, dim], &[feats.len()]));
            }
            out.extend((text.len() as u32).to_le_bytes());
            out.extend(text.as_bytes());
            feats.iter().for_each(|v| out.extend(v.to_le_bytes()));
        }
        Ok(out)
    }
}

impl TextEmbedder for FileEmbedder {
    fn len(&self) -> usize {
        self.len
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<Vec<f32>> {
        self.table
            .get(caption)
            .cloned()
            .ok_or_else(|| Error::invalid("text embedding", format!("no entry for caption '{caption}'")))
    }
}
