//! Fixed-codebook patch quantizer standing in for a learned image tokenizer.
//!
//! Images are `[H, W, ch]` tensors with values in `[0, 1]`. Each `r × r`
//! patch, flattened row-major with channels innermost, maps to its nearest
//! code vector.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"MMCB";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    r: usize,
    channels: usize,
    entries: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub ids: Vec<usize>,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<usize>, h: usize, w: usize) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::shape("token grid", &[h, w], &[ids.len()]));
        }
        Ok(Self { ids, h, w })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Codebook {
    pub fn new(k: usize, r: usize, channels: usize, entries: Vec<f32>) -> Result<Self> {
        if k < 2 || r == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "codebook needs K >= 2, r >= 1, channels >= 1 (got {k}, {r}, {channels})"
            )));
        }
        if entries.len() != k * r * r * channels {
            return Err(Error::shape("codebook", &[k, r * r * channels], &[entries.len()]));
        }
        let cb = Self { k, r, channels, entries };
        for i in 0..k {
            for j in 0..i {
                if cb.entry(i) == cb.entry(j) {
                    return Err(Error::Config(format!("codebook entries {j} and {i} are identical")));
                }
            }
        }
        Ok(cb)
    }

    /// Seeded codebook with entries on the 8-bit grid, so decoded images
    /// survive a round trip through 8-bit image files exactly.
    pub fn random(k: usize, r: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = r * r * channels;
        let mut entries: Vec<f32> = Vec::with_capacity(k * dim);
        while entries.len() < k * dim {
            let cand: Vec<f32> = (0..dim).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect();
            if entries.chunks_exact(dim).all(|e| e != cand.as_slice()) {
                entries.extend(cand);
            }
        }
        Self::new(k, r, channels, entries)
    }

    /// Lloyd's k-means over flattened patches, seeded with distinct samples.
    pub fn kmeans(patches: &[Vec<f32>], k: usize, r: usize, channels: usize, iters: usize, seed: u64) -> Result<Self> {
        let dim = r * r * channels;
        if patches.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("kmeans", "patch length differs from r*r*channels"));
        }
        let mut distinct: Vec<&Vec<f32>> = Vec::new();
        for p in patches {
            if !distinct.contains(&p) {
                distinct.push(p);
            }
        }
        if distinct.len() < k {
            return Err(Error::invalid("kmeans", format!("{} distinct patches, need at least {k}", distinct.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..k {
            let j = rng.random_range(i..distinct.len());
            distinct.swap(i, j);
        }
        let mut centers: Vec<f32> = distinct[..k].iter().flat_map(|p| p.iter().copied()).collect();
        let mut assign = vec![0usize; patches.len()];
        for _ in 0..iters {
            let cb = Self { k, r, channels, entries: centers.clone() };
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(patches) {
                let best = cb.nearest(p);
                changed |= *a != best;
                *a = best;
            }
            let mut sums = vec![0f64; k * dim];
            let mut counts = vec![0usize; k];
            for (&a, p) in assign.iter().zip(patches) {
                counts[a] += 1;
                sums[a * dim..(a + 1) * dim].iter_mut().zip(p).for_each(|(s, &v)| *s += v as f64);
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for d in 0..dim {
                        centers[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Self::new(k, r, channels, centers)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.r * self.r * self.channels
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim()..(i + 1) * self.dim()]
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lower index.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.k {
            let d: f64 = self.entry(i).iter().zip(patch).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Smallest Euclidean distance between two entries.
    pub fn min_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.k {
            for j in 0..i {
                let d: f64 = self.entry(i).iter().zip(self.entry(j)).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                m = m.min(d.sqrt());
            }
        }
        m
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        for v in [self.k, self.r, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.entries {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|_| Error::Format("codebook file is truncated".into()))?;
        if &head[..4] != CODEBOOK_MAGIC {
            return Err(Error::Format("not a codebook file (bad magic)".into()));
        }
        let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (k, rr, ch) = (field(0), field(1), field(2));
        let n = k
            .checked_mul(rr * rr)
            .and_then(|v| v.checked_mul(ch))
            .ok_or_else(|| Error::Format("codebook header overflows".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| Error::Format("codebook payload is truncated".into()))?;
        let entries = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(k, rr, ch, entries)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn image_dims(image: &Tensor<f32>, cb: &Codebook) -> Result<(usize, usize)> {
    let &[hh, ww, ch] = image.shape() else {
        return Err(Error::invalid("encode", format!("expected [H, W, ch] image, got {:?}", image.shape())));
    };
    if ch != cb.channels {
        return Err(Error::invalid("encode", format!("image has {ch} channels, codebook {}", cb.channels)));
    }
    if hh % cb.r != 0 || ww % cb.r != 0 || hh == 0 || ww == 0 {
        return Err(Error::invalid("encode", format!("{hh}x{ww} image is not divisible by patch size {}", cb.r)));
    }
    Ok((hh / cb.r, ww / cb.r))
}

/// Flattened `r × r` patch at grid cell `(gy, gx)`.
pub fn patch(image: &Tensor<f32>, r: usize, gy: usize, gx: usize) -> Vec<f32> {
    let (ww, ch) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(r * r * ch);
    for y in gy * r..(gy + 1) * r {
        let start = (y * ww + gx * r) * ch;
        out.extend_from_slice(&image.data()[start..start + r * ch]);
    }
    out
}

pub fn encode(image: &Tensor<f32>, cb: &Codebook) -> Result<TokenGrid> {
    let (h, w) = image_dims(image, cb)?;
    let ids = (0..h * w).map(|i| cb.nearest(&patch(image, cb.r, i / w, i % w))).collect();
    TokenGrid::new(ids, h, w)
}

pub fn decode(grid: &TokenGrid, cb: &Codebook) -> Result<Tensor<f32>> {
    let (r, ch) = (cb.r, cb.channels);
    let ww = grid.w * r;
    let mut data = vec![0f32; grid.h * r * ww * ch];
    for (i, &id) in grid.ids.iter().enumerate() {
        if id >= cb.k {
            return Err(Error::TokenRange { id, limit: cb.k });
        }
        let (gy, gx) = (i / grid.w, i % grid.w);
        let e = cb.entry(id);
        for py in 0..r {
            let dst = ((gy * r + py) * ww + gx * r) * ch;
            data[dst..dst + r * ch].copy_from_slice(&e[py * r * ch..(py + 1) * r * ch]);
        }
    }
    Tensor::from_vec(&[grid.h * r, ww, ch], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_grid_arithmetic() {
        let cb = Codebook::random(8, 16, 3, 0).unwrap();
        let img = Tensor::full(&[256, 256, 3], 0.5f32);
        let g = encode(&img, &cb).unwrap();
        assert_eq!((g.h, g.w, g.len()), (16, 16, 256));
        assert!(encode(&Tensor::full(&[250, 256, 3], 0.5f32), &cb).is_err());
    }

    #[test]
    fn single_token_decodes_to_its_patch() {
        let cb = Codebook::random(4, 2, 1, 1).unwrap();
        let img = decode(&TokenGrid::new(vec![3], 1, 1).unwrap(), &cb).unwrap();
        assert_eq!(img.data(), cb.entry(3));
        assert!(decode(&TokenGrid::new(vec![4], 1, 1).unwrap(), &cb).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index_and_duplicates_are_rejected() {
        let cb = Codebook::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.5]), 0);
        assert!(Codebook::new(2, 1, 1, vec![0.3, 0.3]).is_err());
    }

    #[test]
    fn small_perturbation_keeps_the_token() {
        let cb = Codebook::random(16, 2, 3, 2).unwrap();
        let half = cb.min_distance() / 2.0;
        let grid = TokenGrid::new((0..16).collect(), 4, 4).unwrap();
        let mut img = decode(&grid, &cb).unwrap();
        // spread a perturbation of norm just under half the minimum distance over one patch
        let step = (0.99 * half / (cb.dim() as f64).sqrt()) as f32;
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    img.data_mut()[(y * 8 + x) * 3 + c] += step;
                }
            }
        }
        assert_eq!(encode(&img, &cb).unwrap(), grid);
    }

    #[test]
    fn permuted_codebook_breaks_the_round_trip() {
        let cb = Codebook::random(6, 2, 1, 3).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..6).map(|i| cb.entry(i).to_vec()).collect();
        rows.rotate_left(1);
        let permuted = Codebook::new(6, 2, 1, rows.concat()).unwrap();
        let grid = TokenGrid::new(vec![0, 1, 2, 3, 4, 5], 2, 3).unwrap();
        assert_ne!(encode(&decode(&grid, &cb).unwrap(), &permuted).unwrap(), grid);
    }

    #[test]
    fn file_round_trip_and_bad_magic() {
        let cb = Codebook::random(5, 2, 3, 4).unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 5 * 12 * 4);
        assert_eq!(Codebook::read_from(buf.as_slice()).unwrap(), cb);
        buf[0] = b'X';
        assert!(matches!(Codebook::read_from(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn kmeans_recovers_well_separated_clusters() {
        let centers = [[0.1f32, 0.1], [0.9, 0.9], [0.1, 0.9]];
        let mut patches = Vec::new();
        for (i, c) in centers.iter().enumerate() {
            for j in 0..10 {
                let e = (j as f32 - 4.5) * 0.001 + i as f32 * 0.0001;
                patches.push(vec![c[0] + e, c[1] - e]);
            }
        }
        let cb = Codebook::kmeans(&patches, 3, 1, 2, 50, 0).unwrap();
        for c in centers {
            let n = cb.nearest(&c);
            assert!(cb.entry(n).iter().zip(c).all(|(a, b)| (a - b).abs() < 0.01));
        }
    }

    proptest! {
        #[test]
        fn decode_then_encode_is_identity(seed in 0u64..500, h in 1usize..5, w in 1usize..5) {
            let cb = Codebook::random(7, 2, 3, seed).unwrap();
            let ids: Vec<usize> = (0..h * w).map(|i| (i * 5 + seed as usize) % 7).collect();
            let grid = TokenGrid::new(ids, h, w).unwrap();
            prop_assert_eq!(encode(&decode(&grid, &cb).unwrap(), &cb).unwrap(), grid);
        }
    }
}
