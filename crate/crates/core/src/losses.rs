//! Scalar losses with analytic gradients and the coefficient schedules that
//! weight them.
//!
//! * consistency loss `−Σ softmax(p_m)·ln softmax(p_f)` between the two
//!   networks' logits,
//! * cross entropy,
//! * batch-all triplet loss on raw embeddings,
//! * multi-positive InfoNCE on L2-normalised embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, euclidean, log_softmax, softmax, Vec64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    /// Stop the consistency gradient from reaching the teacher logits.
    pub detach_teacher: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            temperature: 1.0,
            detach_teacher: false,
        }
    }
}

/// Value and gradients of the consistency loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub loss: f64,
    /// `∂L/∂p_f`
    pub grad_f: Vec64,
    /// `∂L/∂p_m`
    pub grad_m: Vec64,
}

/// Cross entropy of the student distribution `softmax(p_f)` under the
/// teacher distribution `softmax(p_m)`.
pub fn coteach_loss(p_m: &[f64], p_f: &[f64]) -> Result<ConsistencyLoss> {
    if p_m.len() != p_f.len() {
        return Err(Error::invalid(format!(
            "consistency loss over {} and {} classes",
            p_m.len(),
            p_f.len()
        )));
    }
    if p_m.len() < 2 {
        return Err(Error::invalid("consistency loss needs at least two classes"));
    }
    let s_m = softmax(p_m)?;
    let s_f = softmax(p_f)?;
    let log_f = log_softmax(p_f)?;
    let loss = -dot(&s_m, &log_f);
    let grad_f = s_f.iter().zip(&s_m).map(|(f, m)| f - m).collect();
    // ∂L/∂p_m,j = −s_m,j (ln s_f,j + L)
    let grad_m = s_m
        .iter()
        .zip(&log_f)
        .map(|(m, lf)| -m * (lf + loss))
        .collect();
    Ok(ConsistencyLoss { loss, grad_f, grad_m })
}

/// `−ln softmax(p)_y` and its gradient `softmax(p) − onehot(y)`.
pub fn ce_loss(p: &[f64], y: usize) -> Result<(f64, Vec64)> {
    if y >= p.len() {
        return Err(Error::invalid(format!("label {y} outside 0..{}", p.len())));
    }
    let log_p = log_softmax(p)?;
    let mut grad = softmax(p)?;
    grad[y] -= 1.0;
    Ok((-log_p[y], grad))
}

/// True when the labels admit at least one (anchor, positive, negative).
pub fn has_valid_triplet(labels: &[usize]) -> bool {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.len() >= 2 && counts.values().any(|&c| c >= 2)
}

/// Batch-all triplet loss.
///
/// Averages `max(0, d(a,p) − d(a,n) + margin)` over every triplet with a
/// positive hinge, or returns zero when all hinges are inactive.
pub fn triplet_loss(embeddings: &[Vec64], labels: &[usize], margin: f64) -> Result<(f64, Vec<Vec64>)> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("triplet loss: embeddings and labels differ in length"));
    }
    if !has_valid_triplet(labels) {
        return Err(Error::Structural(
            "triplet loss: batch has no (anchor, positive, negative) triplet".into(),
        ));
    }
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // d(a,b) gradient w.r.t. a, zero when the points coincide.
    let unit = |a: usize, b: usize| -> Vec64 {
        let d = dist[a * n + b];
        if d == 0.0 {
            vec![0.0; dim]
        } else {
            embeddings[a]
                .iter()
                .zip(&embeddings[b])
                .map(|(x, y)| (x - y) / d)
                .collect()
        }
    };

    // coefficient on d(a,b) summed over active triplets
    let mut weight = vec![0.0; n * n];
    let mut active = 0usize;
    let mut total = 0.0;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let hinge = dist[a * n + p] - dist[a * n + neg] + margin;
                if hinge > 0.0 {
                    active += 1;
                    total += hinge;
                    weight[a * n + p] += 1.0;
                    weight[a * n + neg] -= 1.0;
                }
            }
        }
    }
    let mut grads = vec![vec![0.0; dim]; n];
    if active == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / active as f64;
    for a in 0..n {
        for b in 0..n {
            let w = weight[a * n + b];
            if w == 0.0 {
                continue;
            }
            let u = unit(a, b);
            for k in 0..dim {
                grads[a][k] += scale * w * u[k];
                grads[b][k] -= scale * w * u[k];
            }
        }
    }
    Ok((total * scale, grads))
}

/// One InfoNCE term with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MilTerm {
    pub loss: f64,
    pub grad_q: Vec64,
    pub grad_pos: Vec<Vec64>,
    pub grad_neg: Vec<Vec64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    max + v.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−ln(Σ₊ e^{q·k₊/τ} / (Σ₊ e^{q·k₊/τ} + Σ₋ e^{q·k₋/τ}))`.
pub fn mil_loss(q: &[f64], positives: &[Vec64], negatives: &[Vec64], temperature: f64) -> Result<MilTerm> {
    if positives.is_empty() {
        return Err(Error::Structural("InfoNCE query without positives".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let s_pos: Vec64 = positives.iter().map(|k| dot(q, k) / temperature).collect();
    let s_neg: Vec64 = negatives.iter().map(|k| dot(q, k) / temperature).collect();
    let lse_pos = log_sum_exp(s_pos.iter().copied());
    let lse_all = log_sum_exp(s_pos.iter().chain(&s_neg).copied());
    let loss = lse_all - lse_pos;

    // ∂L/∂s_j = softmax_all(s)_j − [j positive]·softmax_pos(s)_j
    let d_pos: Vec64 = s_pos
        .iter()
        .map(|&s| ((s - lse_all).exp() - (s - lse_pos).exp()) / temperature)
        .collect();
    let d_neg: Vec64 = s_neg.iter().map(|&s| (s - lse_all).exp() / temperature).collect();

    let mut grad_q = vec![0.0; q.len()];
    for (k, &d) in positives.iter().zip(&d_pos).chain(negatives.iter().zip(&d_neg)) {
        for (g, x) in grad_q.iter_mut().zip(k) {
            *g += d * x;
        }
    }
    let scaled = |d: f64| q.iter().map(|x| d * x).collect::<Vec64>();
    Ok(MilTerm {
        loss,
        grad_q,
        grad_pos: d_pos.iter().map(|&d| scaled(d)).collect(),
        grad_neg: d_neg.iter().map(|&d| scaled(d)).collect(),
    })
}

/// L2-normalised copy and the norm.
pub fn l2_normalize(v: &[f64]) -> (Vec64, f64) {
    let norm = dot(v, v).sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

/// Backpropagates `∂L/∂v̂` through `v̂ = v/‖v‖`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec64 {
    if norm == 0.0 {
        return vec![0.0; unit.len()];
    }
    let along = dot(unit, grad_unit);
    unit.iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - u * along) / norm)
        .collect()
}

/// In-batch InfoNCE: every sample with at least one same-label partner is a
/// query; the other same-label samples are its positives and every
/// different-label sample a negative. Returns the mean over queries and
/// gradients with respect to the raw (unnormalised) embeddings.
pub fn mil_batch(embeddings: &[Vec64], labels: &[usize], temperature: f64) -> Result<(f64, Vec<Vec64>)> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("InfoNCE: embeddings and labels differ in length"));
    }
    let n = embeddings.len();
    let normed: Vec<(Vec64, f64)> = embeddings.iter().map(|e| l2_normalize(e)).collect();
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut grad_unit = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut queries = 0usize;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let neg: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let gather = |idx: &[usize]| idx.iter().map(|&j| normed[j].0.clone()).collect::<Vec<_>>();
        let term = mil_loss(&normed[i].0, &gather(&pos), &gather(&neg), temperature)?;
        total += term.loss;
        queries += 1;
        add_into(&mut grad_unit[i], &term.grad_q);
        for (&j, g) in pos.iter().zip(&term.grad_pos) {
            add_into(&mut grad_unit[j], g);
        }
        for (&j, g) in neg.iter().zip(&term.grad_neg) {
            add_into(&mut grad_unit[j], g);
        }
    }
    if queries == 0 {
        return Err(Error::Structural("InfoNCE batch has no query with a positive".into()));
    }
    let scale = 1.0 / queries as f64;
    let grads = normed
        .iter()
        .zip(&grad_unit)
        .map(|((u, norm), g)| {
            let scaled: Vec64 = g.iter().map(|x| x * scale).collect();
            l2_normalize_backward(u, *norm, &scaled)
        })
        .collect();
    Ok((total * scale, grads))
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Piecewise-linear coefficient: `start` at iteration 0, `end` from
/// iteration `length` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RampDirection {
    Rising,
    Falling,
    Flat,
}

impl Ramp {
    pub fn constant(value: f64) -> Self {
        Self {
            start: value,
            end: value,
            length: 0,
        }
    }

    pub fn at(&self, iter: usize) -> f64 {
        if iter >= self.length {
            return self.end;
        }
        let t = iter as f64 / self.length as f64;
        self.start + (self.end - self.start) * t
    }

    pub fn direction(&self) -> RampDirection {
        match self.end.partial_cmp(&self.start) {
            Some(std::cmp::Ordering::Greater) => RampDirection::Rising,
            Some(std::cmp::Ordering::Less) => RampDirection::Falling,
            _ => RampDirection::Flat,
        }
    }
}

/// Schedules for the four loss weights (consistency, CE, triplet, InfoNCE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffSchedule {
    pub sigma0: Ramp,
    pub sigma1: Ramp,
    pub sigma2: Ramp,
    pub sigma3: Ramp,
}

impl CoeffSchedule {
    /// Constant weights used on clean data: 0.1, 1.0, 0.1, 0.1.
    pub fn clean() -> Self {
        Self::constant([0.1, 1.0, 0.1, 0.1])
    }

    pub fn constant(s: [f64; 4]) -> Self {
        Self {
            sigma0: Ramp::constant(s[0]),
            sigma1: Ramp::constant(s[1]),
            sigma2: Ramp::constant(s[2]),
            sigma3: Ramp::constant(s[3]),
        }
    }

    /// Noisy-data schedule: consistency and metric weights rise from 0.01
    /// to 0.1 and the CE weight falls from 1.0 to 0.1, linearly over the
    /// first half of training.
    pub fn noisy(total_iterations: usize) -> Self {
        let length = total_iterations / 2;
        let rise = Ramp {
            start: 0.01,
            end: 0.1,
            length,
        };
        Self {
            sigma0: rise,
            sigma1: Ramp {
                start: 1.0,
                end: 0.1,
                length,
            },
            sigma2: rise,
            sigma3: rise,
        }
    }

    pub fn at(&self, iter: usize) -> [f64; 4] {
        [
            self.sigma0.at(iter),
            self.sigma1.at(iter),
            self.sigma2.at(iter),
            self.sigma3.at(iter),
        ]
    }
}

/// Unweighted loss components of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_c: f64,
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_mil: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_mil: f64,
    pub l_crc: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
}

impl LossBreakdown {
    pub fn sigmas(&self) -> [f64; 4] {
        [self.sigma0, self.sigma1, self.sigma2, self.sigma3]
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_ce, self.l_tri, self.l_mil, self.l_crc]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum with explicit coefficients.
pub fn combine_with(parts: LossParts, s: [f64; 4]) -> LossBreakdown {
    LossBreakdown {
        l_c: parts.l_c,
        l_ce: parts.l_ce,
        l_tri: parts.l_tri,
        l_mil: parts.l_mil,
        l_crc: s[0] * parts.l_c + s[1] * parts.l_ce + s[2] * parts.l_tri + s[3] * parts.l_mil,
        sigma0: s[0],
        sigma1: s[1],
        sigma2: s[2],
        sigma3: s[3],
    }
}

/// Evaluates the schedule at `iter` and forms the weighted total.
pub fn crc_combine(parts: LossParts, schedule: &CoeffSchedule, iter: usize) -> LossBreakdown {
    combine_with(parts, schedule.at(iter))
}
