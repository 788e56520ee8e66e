//! Swappable encoder backbone.
//!
//! The trainer only talks to the [`Encoder`] trait: a forward pass from a
//! frame set to an embedding and class logits, and an analytic backward pass
//! that accumulates into a flat gradient with the same layout as the
//! parameters. [`SetEncoder`] is the default permutation-invariant backbone.

mod checkpoint;
mod optim;
mod set;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use set::{SetCache, SetEncoder};

use crate::error::{Error, Result};
use crate::numeric::{lincomb, RngStream, Vec64};

/// Layer sizes of the set encoder; doubles as the layout descriptor of a
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub classes: usize,
}

impl Default for LayerShape {
    fn default() -> Self {
        Self {
            d_in: 16,
            hidden: 64,
            d_emb: 32,
            classes: 40,
        }
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
}

impl LayerShape {
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    /// Segments in storage order: frame map, projection, classifier.
    pub fn segments(&self) -> [Segment; 6] {
        let LayerShape {
            d_in,
            hidden,
            d_emb,
            classes,
        } = *self;
        let pooled = 2 * hidden;
        let lens = [
            ("frame_w", hidden * d_in, d_in),
            ("frame_b", hidden, d_in),
            ("proj_w", d_emb * pooled, pooled),
            ("proj_b", d_emb, pooled),
            ("cls_w", classes * d_emb, d_emb),
            ("cls_b", classes, d_emb),
        ];
        let mut offset = 0;
        lens.map(|(name, len, fan_in)| {
            let seg = Segment {
                name,
                offset,
                len,
                fan_in,
            };
            offset += len;
            seg
        })
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|s| s.len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.d_emb == 0 || self.classes < 2 {
            return Err(Error::invalid(format!("degenerate layer shape {self:?}")));
        }
        Ok(())
    }
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector of one network.
///
/// Every distinct parameter value carries a generation id; activation
/// caches remember it so a backward pass against different parameters is
/// rejected.
#[derive(Debug, Clone)]
pub struct ModelParams {
    shape: LayerShape,
    values: Vec64,
    generation: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl ModelParams {
    pub fn from_values(shape: LayerShape, values: Vec64) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector of length {} does not match shape {:?} ({} entries)",
                values.len(),
                shape,
                shape.param_count()
            )));
        }
        Ok(Self {
            shape,
            values,
            generation: fresh_generation(),
        })
    }

    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_count()],
            generation: fresh_generation(),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every segment.
    pub fn init_uniform(shape: LayerShape, rng: &mut RngStream) -> Self {
        let mut values = Vec::with_capacity(shape.param_count());
        for seg in shape.segments() {
            let bound = 1.0 / (seg.fan_in as f64).sqrt();
            values.extend((0..seg.len).map(|_| rng.uniform_range(-bound, bound)));
        }
        Self {
            shape,
            values,
            generation: fresh_generation(),
        }
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; the value gets a new generation id.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation = fresh_generation();
        &mut self.values
    }

    pub fn into_values(self) -> Vec64 {
        self.values
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.shape
            .segments()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// `wa·self + wb·other`.
    pub fn combine(&self, other: &ModelParams, wa: f64, wb: f64) -> Result<ModelParams> {
        if self.shape != other.shape {
            return Err(Error::invalid("combining parameters of different shapes"));
        }
        ModelParams::from_values(self.shape, lincomb(&self.values, &other.values, wa, wb)?)
    }

    /// `self + delta`, elementwise.
    pub fn add_delta(&self, delta: &[f64]) -> Result<ModelParams> {
        if delta.len() != self.values.len() {
            return Err(Error::invalid("delta length does not match parameters"));
        }
        let values = self.values.iter().zip(delta).map(|(p, d)| p + d).collect();
        ModelParams::from_values(self.shape, values)
    }

    pub fn digest(&self) -> u64 {
        crate::numeric::digest_f64(&self.values)
    }
}

/// Gradient with the same layout as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    shape: LayerShape,
    values: Vec64,
}

impl GradVector {
    pub fn zeros(shape: LayerShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_count()],
        }
    }

    pub fn shape(&self) -> &LayerShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &GradVector) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Per-sample outputs of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutputs {
    /// Embedding, dimension `d_emb`.
    pub z: Vec64,
    /// Class logits, dimension `classes`.
    pub p: Vec64,
}

/// Forward/backward contract every backbone must satisfy.
pub trait Encoder: Send + Sync {
    type Cache;

    fn shape(&self) -> &LayerShape;

    fn init(&self, rng: &mut RngStream) -> ModelParams;

    fn forward(&self, params: &ModelParams, frames: &[Vec64]) -> Result<(NetOutputs, Self::Cache)>;

    /// Accumulates `∂L/∂θ` into `grad` given upstream `∂L/∂z` and `∂L/∂p`.
    fn backward(
        &self,
        params: &ModelParams,
        cache: &Self::Cache,
        grad_z: &[f64],
        grad_p: &[f64],
        grad: &mut GradVector,
    ) -> Result<()>;

    /// Inference-only forward.
    fn infer(&self, params: &ModelParams, frames: &[Vec64]) -> Result<NetOutputs> {
        self.forward(params, frames).map(|(out, _)| out)
    }
}

/// Backward over a batch, reduced in index order so results are bitwise
/// reproducible.
pub fn backward_batch<E: Encoder>(
    encoder: &E,
    params: &ModelParams,
    caches: &[E::Cache],
    grads_z: &[Vec64],
    grads_p: &[Vec64],
) -> Result<GradVector> {
    if caches.len() != grads_z.len() || caches.len() != grads_p.len() {
        return Err(Error::ContractViolation(format!(
            "backward over {} caches with {} / {} upstream gradients",
            caches.len(),
            grads_z.len(),
            grads_p.len()
        )));
    }
    let mut grad = GradVector::zeros(*params.shape());
    for ((cache, gz), gp) in caches.iter().zip(grads_z).zip(grads_p) {
        encoder.backward(params, cache, gz, gp, &mut grad)?;
    }
    Ok(grad)
}

/// EMA parameter transfer `m·θ_m + (1−m)·θ_f`.
pub fn ema_transfer(theta_m: &ModelParams, theta_f: &ModelParams, m: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA ratio {m} outside [0, 1]")));
    }
    theta_m.combine(theta_f, m, 1.0 - m)
}
