use super::{Encoder, GradVector, LayerShape, ModelParams, NetOutputs};
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Vec64};

/// Permutation-invariant set encoder.
///
/// Each frame goes through an affine map and a rectifier; the frame set is
/// pooled by concatenating the elementwise max and mean, projected to the
/// embedding `z`, and a linear classifier produces the logits `p`.
#[derive(Debug, Clone)]
pub struct SetEncoder {
    shape: LayerShape,
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct SetCache {
    generation: u64,
    frames: Vec64,
    n_frames: usize,
    pre: Vec64,
    arg_max: Vec<usize>,
    pooled: Vec64,
    z: Vec64,
}

impl SetEncoder {
    pub fn new(shape: LayerShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self { shape })
    }
}

impl Encoder for SetEncoder {
    type Cache = SetCache;

    fn shape(&self) -> &LayerShape {
        &self.shape
    }

    fn init(&self, rng: &mut RngStream) -> ModelParams {
        ModelParams::init_uniform(self.shape, rng)
    }

    fn forward(&self, params: &ModelParams, frames: &[Vec64]) -> Result<(NetOutputs, SetCache)> {
        let s = &self.shape;
        if params.shape() != s {
            return Err(Error::invalid("parameters do not match encoder shape"));
        }
        if frames.is_empty() {
            return Err(Error::invalid("empty frame set"));
        }
        if let Some(bad) = frames.iter().find(|f| f.len() != s.d_in) {
            return Err(Error::invalid(format!(
                "frame of dimension {} where {} was expected",
                bad.len(),
                s.d_in
            )));
        }
        let [fw, fb, pw, pb, cw, cb] = s.segments();
        let v = params.values();
        let (h, d_in, d_emb) = (s.hidden, s.d_in, s.d_emb);
        let n = frames.len();

        let mut flat = Vec::with_capacity(n * d_in);
        let mut pre = vec![0.0; n * h];
        let mut max = vec![f64::NEG_INFINITY; h];
        let mut arg_max = vec![0usize; h];
        let mut sum = vec![0.0; h];
        for (t, frame) in frames.iter().enumerate() {
            flat.extend_from_slice(frame);
            let row = &mut pre[t * h..(t + 1) * h];
            for (j, out) in row.iter_mut().enumerate() {
                let w = &v[fw.offset + j * d_in..fw.offset + (j + 1) * d_in];
                let mut acc = v[fb.offset + j];
                for (wi, xi) in w.iter().zip(frame) {
                    acc += wi * xi;
                }
                *out = acc;
                let act = acc.max(0.0);
                if act > max[j] {
                    max[j] = act;
                    arg_max[j] = t;
                }
                sum[j] += act;
            }
        }
        let mut pooled = max;
        pooled.extend(sum.iter().map(|s| s / n as f64));

        let pooled_len = 2 * h;
        let z: Vec64 = (0..d_emb)
            .map(|e| {
                let w = &v[pw.offset + e * pooled_len..pw.offset + (e + 1) * pooled_len];
                v[pb.offset + e] + w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let p: Vec64 = (0..s.classes)
            .map(|c| {
                let w = &v[cw.offset + c * d_emb..cw.offset + (c + 1) * d_emb];
                v[cb.offset + c] + w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();

        let cache = SetCache {
            generation: params.generation(),
            frames: flat,
            n_frames: n,
            pre,
            arg_max,
            pooled,
            z: z.clone(),
        };
        Ok((NetOutputs { z, p }, cache))
    }

    fn backward(
        &self,
        params: &ModelParams,
        cache: &SetCache,
        grad_z: &[f64],
        grad_p: &[f64],
        grad: &mut GradVector,
    ) -> Result<()> {
        let s = &self.shape;
        if cache.generation != params.generation() {
            return Err(Error::ContractViolation(
                "activation cache was produced by different parameters".into(),
            ));
        }
        if grad.shape() != s || grad_z.len() != s.d_emb || grad_p.len() != s.classes {
            return Err(Error::ContractViolation(
                "upstream gradient dimensions do not match the encoder".into(),
            ));
        }
        let [fw, fb, pw, pb, cw, cb] = s.segments();
        let v = params.values();
        let g = grad.values_mut();
        let (h, d_in, d_emb) = (s.hidden, s.d_in, s.d_emb);
        let pooled_len = 2 * h;

        // classifier
        let mut gz = grad_z.to_vec();
        for (c, &gp) in grad_p.iter().enumerate() {
            if gp == 0.0 {
                continue;
            }
            g[cb.offset + c] += gp;
            let row = cw.offset + c * d_emb;
            for e in 0..d_emb {
                g[row + e] += gp * cache.z[e];
                gz[e] += gp * v[row + e];
            }
        }

        // projection
        let mut g_pool = vec![0.0; pooled_len];
        for (e, &ge) in gz.iter().enumerate() {
            if ge == 0.0 {
                continue;
            }
            g[pb.offset + e] += ge;
            let row = pw.offset + e * pooled_len;
            for k in 0..pooled_len {
                g[row + k] += ge * cache.pooled[k];
                g_pool[k] += ge * v[row + k];
            }
        }

        // pooling and frame map
        let n = cache.n_frames;
        let inv_n = 1.0 / n as f64;
        for t in 0..n {
            let frame = &cache.frames[t * d_in..(t + 1) * d_in];
            for j in 0..h {
                if cache.pre[t * h + j] <= 0.0 {
                    continue;
                }
                let mut ga = g_pool[h + j] * inv_n;
                if cache.arg_max[j] == t {
                    ga += g_pool[j];
                }
                if ga == 0.0 {
                    continue;
                }
                g[fb.offset + j] += ga;
                let row = fw.offset + j * d_in;
                for (i, x) in frame.iter().enumerate() {
                    g[row + i] += ga * x;
                }
            }
        }
        Ok(())
    }
}
