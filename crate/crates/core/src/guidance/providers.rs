//! Teacher provider interfaces and the hash/basis text encoder.
//!
//! Foundation models (a dense image-feature extractor, a region captioner and a
//! text encoder) sit behind these traits. The implementations shipped here are
//! deterministic stand-ins; real models plug in through the same traits.

use std::collections::HashMap;
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::tensor::{dot, norm};
use crate::{Error, Result};

/// Dense `dim × height × width` feature map stored cell-major (`(y * width + x) * dim + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(dim: usize, height: usize, width: usize) -> Self {
        Self {
            dim,
            height,
            width,
            data: vec![0.0; dim * height * width],
        }
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

pub trait PixelFeatureProvider: Send + Sync {
    fn features(&self, image: &RgbImage) -> std::result::Result<FeatureGrid, String>;
}

pub trait CaptionProvider: Send + Sync {
    /// Returns `(short, long)` captions for the masked region.
    fn caption(&self, image: &RgbImage, mask: &BinaryMask) -> std::result::Result<(String, String), String>;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

#[derive(Clone)]
pub struct TeacherProviders {
    pub pixel: Arc<dyn PixelFeatureProvider>,
    pub caption: Arc<dyn CaptionProvider>,
    pub text: Arc<dyn TextEncoder>,
}

/// 64-bit FNV-1a, used to derive stable per-string seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn gaussian_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Orthonormalizes `n` seeded Gaussian vectors with modified Gram-Schmidt.
pub fn orthonormal_basis(seed: u64, n: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if n > dim {
        return Err(Error::Config(format!(
            "cannot build {n} orthogonal class vectors in {dim} dimensions"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut k = 0u64;
    while basis.len() < n {
        let mut v = gaussian_vector(seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15)), dim);
        k += 1;
        for b in &basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = norm(&v);
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    Ok(basis)
}

/// Serializable description of a [`BasisTextEncoder`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderSpec {
    pub seed: u64,
    pub dim: usize,
    pub vocabulary: Vec<String>,
}

/// Vocabulary phrases map to orthonormal vectors; any other string is the
/// normalized mean of its word vectors, where out-of-vocabulary words get
/// seeded Gaussian directions.
#[derive(Debug, Clone)]
pub struct BasisTextEncoder {
    spec: TextEncoderSpec,
    table: HashMap<String, Vec<f64>>,
}

impl BasisTextEncoder {
    pub fn new(spec: TextEncoderSpec) -> Result<Self> {
        let basis = orthonormal_basis(spec.seed, spec.vocabulary.len(), spec.dim)?;
        let table = spec
            .vocabulary
            .iter()
            .map(|w| w.trim().to_lowercase())
            .zip(basis)
            .collect();
        Ok(Self { spec, table })
    }

    pub fn spec(&self) -> &TextEncoderSpec {
        &self.spec
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        match self.table.get(word) {
            Some(v) => v.clone(),
            None => {
                let mut v = gaussian_vector(self.spec.seed ^ fnv1a(word.as_bytes()), self.spec.dim);
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                v
            }
        }
    }
}

impl TextEncoder for BasisTextEncoder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let key = text.trim().to_lowercase();
        if let Some(v) = self.table.get(&key) {
            return v.clone();
        }
        let words: Vec<&str> = key
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return self.word_vector("");
        }
        let mut acc = vec![0.0; self.spec.dim];
        for w in &words {
            for (a, v) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += v;
            }
        }
        let n = norm(&acc);
        if n == 0.0 {
            return self.word_vector(&key);
        }
        acc.iter_mut().for_each(|x| *x /= n);
        acc
    }
}
