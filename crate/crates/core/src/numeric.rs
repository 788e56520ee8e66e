//! Dense numeric primitives and addressable seeded randomness.
//!
//! Everything here works on plain `f64` slices. Vector-valued results are
//! returned as fresh `Vec<f64>` so callers never share mutable buffers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered sequence of 64-bit reals; the carrier for vectors and logits.
pub type Vec64 = Vec<f64>;

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec64> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let exps: Vec64 = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln softmax(logits)` computed as `v - max - ln Σ exp(v - max)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec64> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("log_softmax of non-finite logits"));
    }
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&v| v - max - lse).collect())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("entropy of an empty distribution"));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("entropy: negative or non-finite probability"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "entropy: probabilities sum to {total}, expected 1"
        )));
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}

/// Elementwise `wa·a + wb·b`.
pub fn lincomb(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Result<Vec64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "lincomb length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| wa * x + wb * y).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the maximum when it is unique; `None` on ties or empty input.
pub fn strict_argmax(v: &[f64]) -> Option<usize> {
    if v.is_empty() {
        return None;
    }
    let best = argmax(v);
    let ties = v.iter().filter(|&&x| x == v[best]).count();
    (ties == 1).then_some(best)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Stable 64-bit digest of a float slice (first 8 bytes of SHA-256 over
/// the little-endian encoding).
pub fn digest_f64(values: &[f64]) -> u64 {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// First 8 bytes of SHA-256 over `bytes`, little-endian.
pub fn digest_bytes(bytes: &[u8]) -> u64 {
    let out = Sha256::digest(bytes);
    u64::from_le_bytes(out[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A seeded ChaCha8 stream addressed by `(seed, stream id)`.
///
/// Distinct stream ids select disjoint ChaCha keystreams for the same key,
/// so draws are independent. `substream` derives a child stream from a tag,
/// which lets any draw be addressed as `(seed, stream, tag, ...)` without
/// depending on the order in which other streams were consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Child stream for `tag`; independent of how much of `self` was consumed.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream ^ splitmix64(tag)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.rng, n, k).into_vec()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
