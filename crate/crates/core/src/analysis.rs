//! Closed-form parameter-evolution check and the forward-pass cost model.

use serde::{Deserialize, Serialize};

use crate::encoder::{ema_transfer, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Vec64;
use crate::trainer::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eq5Report {
    pub iterations: usize,
    /// Max elementwise `|a − b| / max(|a|, |b|, 1e-12)` between replay and
    /// closed form.
    pub max_rel_deviation: f64,
    /// First iteration whose recorded pre-EMA digest disagrees with the
    /// replayed memory network.
    pub first_digest_mismatch: Option<u64>,
    pub replayed_m: Vec64,
}

struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn new() -> Self {
        Self { sum: 0.0, c: 0.0 }
    }

    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// `m^N θ_0^m + (1 − m^N) θ_0^f + Σ_k [m^{N−k} Δθ_k^m + (1 − m^{N−k}) Δθ_k^f]`.
pub fn closed_form(theta0_f: &[f64], theta0_m: &[f64], deltas: &[(&[f64], &[f64])], m: f64) -> Vec64 {
    let n_iter = deltas.len();
    let mn = m.powi(n_iter as i32);
    let weights: Vec<(f64, f64)> = (1..=n_iter)
        .map(|k| {
            let w = m.powi((n_iter - k) as i32);
            (w, 1.0 - w)
        })
        .collect();
    (0..theta0_f.len())
        .map(|j| {
            let mut acc = Neumaier::new();
            acc.add(mn * theta0_m[j]);
            acc.add((1.0 - mn) * theta0_f[j]);
            for ((dm, df), (wm, wf)) in deltas.iter().map(|(f, m)| (m, f)).zip(&weights) {
                acc.add(wm * dm[j]);
                acc.add(wf * df[j]);
            }
            acc.value()
        })
        .collect()
}

pub fn relative_deviation(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Reconstructs `θ_N^m` by replaying the recurrence and by the closed form
/// and compares them.
pub fn eq5_verify(trace: &Trace, theta0_f: &ModelParams, theta0_m: &ModelParams, m: f64) -> Result<Eq5Report> {
    let n = trace.records.len();
    if n as u64 != trace.header.iterations {
        return Err(Error::invalid(format!(
            "trace declares {} iterations but holds {n}",
            trace.header.iterations
        )));
    }
    if let Some((pos, rec)) = trace.records.iter().enumerate().find(|(i, r)| r.k != *i as u64 + 1) {
        return Err(Error::invalid(format!(
            "trace record {} carries iteration index {}",
            pos + 1,
            rec.k
        )));
    }
    if theta0_f.shape() != &trace.header.shape || theta0_m.shape() != &trace.header.shape {
        return Err(Error::invalid("initial parameters do not match the trace layout"));
    }

    let mut f = theta0_f.clone();
    let mut mem = theta0_m.clone();
    let mut first_digest_mismatch = None;
    for rec in &trace.records {
        if first_digest_mismatch.is_none() && mem.digest() != rec.pre_ema_m_digest {
            first_digest_mismatch = Some(rec.k);
        }
        mem = ema_transfer(&mem, &f, m)?.add_delta(&rec.delta_m)?;
        f = f.add_delta(&rec.delta_f)?;
    }

    let deltas: Vec<(&[f64], &[f64])> = trace
        .records
        .iter()
        .map(|r| (r.delta_f.as_slice(), r.delta_m.as_slice()))
        .collect();
    let closed = closed_form(theta0_f.values(), theta0_m.values(), &deltas, m);
    let max_rel_deviation = mem
        .values()
        .iter()
        .zip(&closed)
        .map(|(&a, &b)| relative_deviation(a, b))
        .fold(0.0, f64::max);
    Ok(Eq5Report {
        iterations: n,
        max_rel_deviation,
        first_digest_mismatch,
        replayed_m: mem.into_values(),
    })
}

/// Expected forward passes per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Small-loss co-teaching: `2N(2 − σ)`.
    pub coteach: f64,
    /// Cyclic scheme with augmentation: `2N`.
    pub cntn_aug: f64,
    /// Cyclic scheme without augmentation: `N`.
    pub cntn_plain: f64,
}

impl CostModel {
    /// Relative saving of the cyclic scheme, in percent, with and without
    /// augmentation.
    pub fn speedups(&self) -> (f64, f64) {
        (
            100.0 * (self.coteach / self.cntn_aug - 1.0),
            100.0 * (self.coteach / self.cntn_plain - 1.0),
        )
    }
}

pub fn cost_model(n: usize, sigma_r: f64) -> Result<CostModel> {
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(0.0..1.0).contains(&sigma_r) {
        return Err(Error::invalid(format!("noise rate {sigma_r} outside [0, 1)")));
    }
    let two_n = 2.0 * n as f64;
    Ok(CostModel {
        coteach: two_n * (2.0 - sigma_r),
        cntn_aug: two_n,
        cntn_plain: n as f64,
    })
}

/// Integer forward count of one baseline iteration: a selection pass of
/// both networks plus each peer's pass over its `⌈(1 − σ)N⌉` selection.
pub fn coteach_forwards(n: usize, sigma_r: f64) -> u64 {
    (2 * n + 2 * crate::trainer::selection_size(n, sigma_r)) as u64
}
