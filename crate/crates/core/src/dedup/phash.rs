//! 64-bit DCT perceptual hash.
//!
//! Recipe: 8-bit luma (0.299 R + 0.587 G + 0.114 B, rounded), bilinear
//! resample to 32x32 (triangle filter widened to the downscale factor,
//! output quantized to 1/256), mean-centering, 2-D DCT-II, top-left 8x8
//! block. Bit `i` (row-major over the block, MSB first) is set iff the
//! coefficient exceeds the median of the 63 AC coefficients; the DC bit is
//! always 0.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use image::DynamicImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const RESAMPLE_SIDE: usize = 32;
pub const BLOCK_SIDE: usize = 8;
/// Smallest accepted image side for hashing.
pub const MIN_HASH_SIDE: u32 = 8;
const QUANTUM: f64 = 256.0;

#[derive(Debug, Error)]
pub enum HashError {
    #[error("image could not be decoded: {0}")]
    DecodeError(String),
    #[error("image is {width}x{height}, below the {min} px minimum side")]
    TooSmall { width: u32, height: u32, min: u32 },
    #[error("invalid hash literal {0:?}")]
    BadHex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PHash(pub u64);

impl PHash {
    pub fn distance(self, other: PHash) -> u32 {
        hamming(self, other)
    }
}

/// Number of differing bits.
pub fn hamming(a: PHash, b: PHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

impl fmt::Display for PHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for PHash {
    type Err = HashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches("0x");
        if t.is_empty() || t.len() > 16 {
            return Err(HashError::BadHex(s.to_string()));
        }
        u64::from_str_radix(t, 16)
            .map(PHash)
            .map_err(|_| HashError::BadHex(s.to_string()))
    }
}

impl Serialize for PHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn luma_plane(img: &DynamicImage) -> Vec<f64> {
    img.to_rgb8()
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b))
                .round()
                .clamp(0.0, 255.0)
        })
        .collect()
}

/// Per-output-sample `(first source index, weights)` for a 1-D triangle
/// filter whose support grows with the downscale factor.
fn triangle_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5) - center).abs() / support;
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                // center falls between taps with zero weight; nearest sample
                let j = (center as usize).min(src - 1);
                return (j, vec![1.0]);
            }
            (lo, weights)
        })
        .collect()
}

fn resample(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let xs = triangle_taps(width, RESAMPLE_SIDE);
    let ys = triangle_taps(height, RESAMPLE_SIDE);
    let mut horizontal = vec![0.0; RESAMPLE_SIDE * height];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for (ox, (start, w)) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += row[start + k] * wk;
            }
            horizontal[y * RESAMPLE_SIDE + ox] = acc;
        }
    }
    let mut out = vec![0.0; RESAMPLE_SIDE * RESAMPLE_SIDE];
    for (oy, (start, w)) in ys.iter().enumerate() {
        for ox in 0..RESAMPLE_SIDE {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += horizontal[(start + k) * RESAMPLE_SIDE + ox] * wk;
            }
            out[oy * RESAMPLE_SIDE + ox] = (acc * QUANTUM).round() / QUANTUM;
        }
    }
    out
}

fn cos_table() -> &'static [[f64; RESAMPLE_SIDE]; BLOCK_SIDE] {
    static TABLE: OnceLock<[[f64; RESAMPLE_SIDE]; BLOCK_SIDE]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; RESAMPLE_SIDE]; BLOCK_SIDE];
        let n = RESAMPLE_SIDE as f64;
        for (u, row) in t.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (x, c) in row.iter_mut().enumerate() {
                *c = alpha * (PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos();
            }
        }
        t
    })
}

/// Orthonormal 2-D DCT-II of a 32x32 block, low-frequency 8x8 corner only.
/// Result is indexed `[v][u]` (vertical frequency, horizontal frequency).
pub fn dct_low_block(pixels: &[f64]) -> [[f64; BLOCK_SIDE]; BLOCK_SIDE] {
    assert_eq!(pixels.len(), RESAMPLE_SIDE * RESAMPLE_SIDE);
    let table = cos_table();
    let mut rows = [[0.0; BLOCK_SIDE]; RESAMPLE_SIDE];
    for y in 0..RESAMPLE_SIDE {
        for u in 0..BLOCK_SIDE {
            let mut acc = 0.0;
            for x in 0..RESAMPLE_SIDE {
                acc += pixels[y * RESAMPLE_SIDE + x] * table[u][x];
            }
            rows[y][u] = acc;
        }
    }
    let mut out = [[0.0; BLOCK_SIDE]; BLOCK_SIDE];
    for v in 0..BLOCK_SIDE {
        for u in 0..BLOCK_SIDE {
            let mut acc = 0.0;
            for (y, row) in rows.iter().enumerate() {
                acc += row[u] * table[v][y];
            }
            out[v][u] = acc;
        }
    }
    out
}

/// Hash of the low-frequency block, see the module docs for the bit layout.
pub fn hash_from_block(block: &[[f64; BLOCK_SIDE]; BLOCK_SIDE]) -> PHash {
    let flat: Vec<f64> = block.iter().flatten().copied().collect();
    let mut ac: Vec<f64> = flat[1..].to_vec();
    ac.sort_by(f64::total_cmp);
    let median = ac[ac.len() / 2];
    let mut bits = 0u64;
    for (i, &c) in flat.iter().enumerate().skip(1) {
        if c > median {
            bits |= 1u64 << (63 - i);
        }
    }
    PHash(bits)
}

pub fn phash64(img: &DynamicImage) -> Result<PHash, HashError> {
    let (width, height) = (img.width(), img.height());
    if width.min(height) < MIN_HASH_SIDE {
        return Err(HashError::TooSmall {
            width,
            height,
            min: MIN_HASH_SIDE,
        });
    }
    let luma = luma_plane(img);
    let mut small = resample(&luma, width as usize, height as usize);
    let mean = small.iter().sum::<f64>() / small.len() as f64;
    small.iter_mut().for_each(|p| *p -= mean);
    Ok(hash_from_block(&dct_low_block(&small)))
}

pub fn phash_bytes(bytes: &[u8]) -> Result<PHash, HashError> {
    let img = image::load_from_memory(bytes).map_err(|e| HashError::DecodeError(e.to_string()))?;
    phash64(&img)
}

pub fn phash_file(path: impl AsRef<Path>) -> Result<PHash, HashError> {
    phash_bytes(&std::fs::read(path)?)
}
