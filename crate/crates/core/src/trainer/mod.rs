//! The cyclic two-network training loop and its comparison modes.
//!
//! One iteration of the cyclic scheme:
//!
//! 1. EMA transfer `θ_m ← m·θ_m + (1−m)·θ_f`,
//! 2. an independent augmentation per network per sample,
//! 3. forward passes of both networks,
//! 4. the consistency loss between M's and F's logits,
//! 5. supervised losses on F's outputs, filtered by the noise sieve,
//! 6. the weighted combination,
//! 7. an optimizer step on F with the full loss and on M with the weighted
//!    consistency gradient only.

mod trace;

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use trace::{read_trace, write_trace, Trace, TraceHeader, TraceRecord, TraceWriter, TRACE_VERSION};

use crate::encoder::{backward_batch, ema_transfer, Encoder, ModelParams, NetOutputs, OptimizerConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{coteach_loss, combine_with, CoeffSchedule, LossBreakdown, LossConfig, LossParts, Ramp};
use crate::numeric::{RngStream, Vec64};
use crate::sieve::{adapt_mask, apply_mask, detection_quality, kept_fraction, score_batch, SieveConfig, SieveState};
use crate::synth::{sample_augmentation, AugSpec, Dataset, NoiseFlag, SequenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Supervised losses plus the consistency loss.
    Cntn,
    /// Supervised losses only.
    Supervised,
    /// Consistency loss only; labels unused.
    Selfsup,
    /// Two peers exchanging small-loss selections.
    CoteachBaseline,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Cntn => "cntn",
            Mode::Supervised => "supervised",
            Mode::Selfsup => "selfsup",
            Mode::CoteachBaseline => "coteach-baseline",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cntn" | "full" => Ok(Mode::Cntn),
            "supervised" => Ok(Mode::Supervised),
            "selfsup" => Ok(Mode::Selfsup),
            "coteach-baseline" | "coteach" => Ok(Mode::CoteachBaseline),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Which coefficient schedule to use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Noisy,
    Clean,
    Custom {
        sigma0: Ramp,
        sigma1: Ramp,
        sigma2: Ramp,
        sigma3: Ramp,
    },
}

impl ScheduleSpec {
    pub fn resolve(&self, iterations: usize) -> CoeffSchedule {
        match *self {
            ScheduleSpec::Noisy => CoeffSchedule::noisy(iterations),
            ScheduleSpec::Clean => CoeffSchedule::clean(),
            ScheduleSpec::Custom {
                sigma0,
                sigma1,
                sigma2,
                sigma3,
            } => CoeffSchedule {
                sigma0,
                sigma1,
                sigma2,
                sigma3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Sequences per identity.
    pub k: usize,
    /// EMA ratio m.
    pub ema: f64,
    pub iterations: usize,
    pub mode: Mode,
    /// Couple M to F through the EMA transfer.
    pub cyclic: bool,
    /// Filter supervised losses with the noise sieve.
    pub and_enabled: bool,
    pub hidden: usize,
    pub d_emb: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    pub loss: LossConfig,
    pub sieve: SieveConfig,
    pub augmentation: AugSpec,
    pub seed: u64,
    pub record_trace: bool,
    /// Keep a copy of θ_f every this many iterations (0 disables).
    pub snapshot_every: usize,
    /// Noise rate assumed by the small-loss baseline.
    pub coteach_noise_rate: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            ema: 0.99,
            iterations: 2000,
            mode: Mode::Cntn,
            cyclic: true,
            and_enabled: true,
            hidden: 64,
            d_emb: 32,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleSpec::Noisy,
            loss: LossConfig::default(),
            sieve: SieveConfig::default(),
            augmentation: AugSpec::Standard,
            seed: 1,
            record_trace: false,
            snapshot_every: 0,
            coteach_noise_rate: 0.2,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "batch shape {}x{} needs P >= 2 and K >= 2",
                self.p, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::invalid(format!("EMA ratio {} outside [0, 1]", self.ema)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if !(0.0..1.0).contains(&self.coteach_noise_rate) {
            return Err(Error::invalid(format!(
                "assumed noise rate {} outside [0, 1)",
                self.coteach_noise_rate
            )));
        }
        if !(self.loss.temperature > 0.0) || !(self.loss.margin >= 0.0) {
            return Err(Error::invalid("temperature must be positive and margin non-negative"));
        }
        self.optimizer.validate()?;
        self.sieve.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Whether a second network is allocated.
    pub fn has_memory_net(&self) -> bool {
        match self.mode {
            Mode::Cntn | Mode::Selfsup | Mode::CoteachBaseline => true,
            Mode::Supervised => self.cyclic || self.and_enabled,
        }
    }

    fn uses_consistency(&self) -> bool {
        matches!(self.mode, Mode::Cntn | Mode::Selfsup)
    }

    fn uses_supervised(&self) -> bool {
        !matches!(self.mode, Mode::Selfsup)
    }

    fn memory_trainable(&self) -> bool {
        self.uses_consistency() && !self.loss.detach_teacher
    }

    fn sieve_active(&self) -> bool {
        self.and_enabled && matches!(self.mode, Mode::Cntn | Mode::Supervised)
    }

    /// EMA ratio actually applied; 1 when M is not coupled to F.
    pub fn effective_ema(&self) -> f64 {
        if self.cyclic && self.mode != Mode::CoteachBaseline {
            self.ema
        } else {
            1.0
        }
    }

    /// Loss weights in force at `iter`, with unused terms zeroed.
    pub fn sigmas(&self, schedule: &CoeffSchedule, iter: usize) -> [f64; 4] {
        let mut s = schedule.at(iter);
        if !self.uses_consistency() {
            s[0] = 0.0;
        }
        if !self.uses_supervised() {
            s[1] = 0.0;
            s[2] = 0.0;
            s[3] = 0.0;
        }
        s
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

const SAMPLER_STREAM: u64 = 0x5a3b_0001;
const AUG_STREAM: u64 = 0x5a3b_0002;
const INIT_STREAM: u64 = 0x5a3b_0003;

/// Draws `P` distinct identities uniformly and `K` sequences of each:
/// without replacement when the identity has at least `K` sequences, with
/// replacement otherwise. Returns sample indices, identity-major.
pub fn pxk_sampler(data: &Dataset, p: usize, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let groups = data.by_identity();
    let ids: Vec<&Vec<usize>> = groups.values().collect();
    if ids.len() < p {
        return Err(Error::invalid(format!(
            "P x K sampling needs {p} identities, dataset has {}",
            ids.len()
        )));
    }
    let mut chosen = rng.sample_indices(ids.len(), p);
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(p * k);
    for c in chosen {
        let members = ids[c];
        if members.len() >= k {
            let mut picks = rng.sample_indices(members.len(), k);
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|j| members[j]));
        } else {
            out.extend((0..k).map(|_| members[rng.below(members.len())]));
        }
    }
    Ok(out)
}

/// Samples of one iteration together with the labels used for training.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub samples: Vec<&'a SequenceSample>,
    pub labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn from_indices(data: &'a Dataset, indices: Vec<usize>) -> Self {
        let samples: Vec<&SequenceSample> = indices.iter().map(|&i| &data.samples[i]).collect();
        let labels = samples.iter().map(|s| s.id).collect();
        Self {
            indices,
            samples,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mutable training state: both networks, their optimizers and the sieve.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub theta_f: ModelParams,
    pub theta_m: Option<ModelParams>,
    opt_f: OptimizerState,
    opt_m: Option<OptimizerState>,
    pub sieve: SieveState,
    /// Number of completed iterations.
    pub iter: usize,
}

impl TrainState {
    pub fn new<E: Encoder>(encoder: &E, config: &TrainerConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed, INIT_STREAM);
        let theta_f = encoder.init(&mut root.substream(0));
        let theta_m = config
            .has_memory_net()
            .then(|| encoder.init(&mut root.substream(1)));
        Self::from_params(config, theta_f, theta_m)
    }

    pub fn from_params(config: &TrainerConfig, theta_f: ModelParams, theta_m: Option<ModelParams>) -> Result<Self> {
        let n = theta_f.len();
        let opt_f = OptimizerState::new(config.optimizer.clone(), n)?;
        let opt_m = match &theta_m {
            Some(_) if config.memory_trainable() || config.mode == Mode::CoteachBaseline => {
                Some(OptimizerState::new(config.optimizer.clone(), n)?)
            }
            _ => None,
        };
        Ok(Self {
            theta_f,
            theta_m,
            opt_f,
            opt_m,
            sieve: SieveState::new(config.sieve),
            iter: 0,
        })
    }
}

/// What one iteration produced.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub breakdown: LossBreakdown,
    /// Present whenever a memory network exists (not for the baseline).
    pub trace: Option<TraceRecord>,
    pub mask: Vec<bool>,
    pub kept_fraction: f64,
    pub mean_entropy: Option<f64>,
    pub mean_ce: Option<f64>,
    pub lr: f64,
    /// Network forward passes executed.
    pub forwards: u64,
}

fn augmented(config: &TrainerConfig, iter: usize, slot: usize, net: u64, frames: &[Vec64]) -> Vec<Vec64> {
    if config.augmentation == AugSpec::None {
        return frames.to_vec();
    }
    let mut rng = RngStream::new(config.seed, AUG_STREAM)
        .substream(iter as u64)
        .substream(2 * slot as u64 + net);
    sample_augmentation(config.augmentation, &mut rng).apply(frames)
}

fn forward_all<E: Encoder>(
    encoder: &E,
    params: &ModelParams,
    views: &[Vec<Vec64>],
) -> Result<(Vec<NetOutputs>, Vec<E::Cache>)> {
    let mut outs = Vec::with_capacity(views.len());
    let mut caches = Vec::with_capacity(views.len());
    for v in views {
        let (o, c) = encoder.forward(params, v)?;
        outs.push(o);
        caches.push(c);
    }
    Ok((outs, caches))
}

fn non_finite(iter: usize, batch: &Batch, parts: &LossParts, outputs: &[NetOutputs]) -> Error {
    let diagnostic = serde_json::json!({
        "iteration": iter,
        "indices": batch.indices,
        "labels": batch.labels,
        "clean_ids": batch.samples.iter().map(|s| s.clean_id).collect::<Vec<_>>(),
        "losses": parts,
        "logits_f": outputs.iter().map(|o| o.p.iter().map(|x| x.to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    Error::NonFiniteLoss {
        iteration: iter,
        diagnostic: diagnostic.to_string(),
    }
}

/// Runs one training iteration on `batch`, advancing `state`.
pub fn train_iteration<E: Encoder>(
    encoder: &E,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainerConfig,
    schedule: &CoeffSchedule,
) -> Result<IterationOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !state.theta_f.values().iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite forgetting-network parameters"));
    }
    if config.mode == Mode::CoteachBaseline {
        return coteach_baseline_iteration(encoder, state, batch, config, schedule);
    }
    let iter = state.iter;
    let n = batch.len();
    let sig = config.sigmas(schedule, iter);

    let pre_ema_digest = state.theta_m.as_ref().map(|m| m.digest());
    if config.cyclic {
        if let Some(m) = state.theta_m.as_mut() {
            *m = ema_transfer(m, &state.theta_f, config.ema)?;
        }
    }

    let views_f: Vec<Vec<Vec64>> = batch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| augmented(config, iter, i, 0, &s.frames))
        .collect();
    let (out_f, cache_f) = forward_all(encoder, &state.theta_f, &views_f)?;
    let mut forwards = n as u64;
    let m_pass = match &state.theta_m {
        Some(theta_m) => {
            let views_m: Vec<Vec<Vec64>> = batch
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| augmented(config, iter, i, 1, &s.frames))
                .collect();
            forwards += n as u64;
            Some(forward_all(encoder, theta_m, &views_m)?)
        }
        None => None,
    };

    let all_outputs_finite = |outs: &[NetOutputs]| {
        outs.iter()
            .all(|o| o.p.iter().chain(&o.z).all(|v| v.is_finite()))
    };
    if !all_outputs_finite(&out_f) || !m_pass.as_ref().is_none_or(|(o, _)| all_outputs_finite(o)) {
        return Err(non_finite(iter, batch, &LossParts::default(), &out_f));
    }

    let inv_n = 1.0 / n as f64;
    let mut l_c = 0.0;
    let mut grad_c_f = vec![Vec::new(); n];
    let mut grad_c_m = vec![Vec::new(); n];
    if config.uses_consistency() {
        let (out_m, _) = m_pass.as_ref().expect("consistency modes allocate M");
        for i in 0..n {
            let c = coteach_loss(&out_m[i].p, &out_f[i].p)?;
            l_c += c.loss;
            grad_c_f[i] = c.grad_f;
            grad_c_m[i] = c.grad_m;
        }
        l_c *= inv_n;
    }

    let (mask, mean_entropy, mean_ce) = if config.sieve_active() {
        let (out_m, _) = m_pass.as_ref().expect("sieve needs M");
        let scores = score_batch(&out_f, out_m, &batch.labels)?;
        let (mask, next) = adapt_mask(&scores, &state.sieve);
        state.sieve = next;
        let h = scores.iter().map(|s| s.entropy).sum::<f64>() * inv_n;
        let ce = scores.iter().map(|s| s.ce).sum::<f64>() * inv_n;
        (mask, Some(h), Some(ce))
    } else {
        (vec![true; n], None, None)
    };

    let sup = if config.uses_supervised() {
        Some(apply_mask(&mask, &out_f, &batch.labels, &config.loss)?)
    } else {
        None
    };
    let parts = LossParts {
        l_c,
        l_ce: sup.as_ref().map_or(0.0, |s| s.l_ce),
        l_tri: sup.as_ref().map_or(0.0, |s| s.l_tri),
        l_mil: sup.as_ref().map_or(0.0, |s| s.l_mil),
    };
    let breakdown = combine_with(parts, sig);
    if !breakdown.is_finite() {
        return Err(non_finite(iter, batch, &parts, &out_f));
    }

    let shape = *state.theta_f.shape();
    let mut gp_f = vec![vec![0.0; shape.classes]; n];
    let mut gz_f = vec![vec![0.0; shape.d_emb]; n];
    for i in 0..n {
        if config.uses_consistency() {
            for (g, c) in gp_f[i].iter_mut().zip(&grad_c_f[i]) {
                *g += sig[0] * inv_n * c;
            }
        }
        if let Some(s) = &sup {
            for (g, c) in gp_f[i].iter_mut().zip(&s.grad_ce_p[i]) {
                *g += sig[1] * c;
            }
            for ((g, t), m) in gz_f[i].iter_mut().zip(&s.grad_tri_z[i]).zip(&s.grad_mil_z[i]) {
                *g += sig[2] * t + sig[3] * m;
            }
        }
    }
    let grad_f = backward_batch(encoder, &state.theta_f, &cache_f, &gz_f, &gp_f)?;
    let lr = config.optimizer.lr_at(iter);
    let (new_f, delta_f) = state.opt_f.step(&state.theta_f, &grad_f, iter)?;

    let mut trace = None;
    if let (Some(theta_m), Some(pre)) = (state.theta_m.as_mut(), pre_ema_digest) {
        let delta_m = match (state.opt_m.as_mut(), m_pass.as_ref()) {
            (Some(opt_m), Some((_, cache_m))) => {
                let gp_m: Vec<Vec64> = grad_c_m
                    .iter()
                    .map(|g| g.iter().map(|x| sig[0] * inv_n * x).collect())
                    .collect();
                let gz_m = vec![vec![0.0; shape.d_emb]; n];
                let grad_m = backward_batch(encoder, theta_m, cache_m, &gz_m, &gp_m)?;
                let (new_m, delta) = opt_m.step(theta_m, &grad_m, iter)?;
                *theta_m = new_m;
                delta
            }
            _ => vec![0.0; theta_m.len()],
        };
        trace = Some(TraceRecord {
            k: iter as u64 + 1,
            pre_ema_m_digest: pre,
            delta_f: delta_f.clone(),
            delta_m,
        });
    }
    state.theta_f = new_f;
    state.iter += 1;

    Ok(IterationOutput {
        breakdown,
        trace,
        kept_fraction: kept_fraction(&mask),
        mask,
        mean_entropy,
        mean_ce,
        lr,
        forwards,
    })
}

/// Size of the small-loss selection for an assumed noise rate.
pub fn selection_size(n: usize, noise_rate: f64) -> usize {
    let r = ((1.0 - noise_rate) * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

/// Indices of the `r` smallest losses, ties broken by index.
pub fn small_loss_selection(losses: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(r);
    order.sort_unstable();
    order
}

/// Classic small-loss exchange: each network ranks the batch by its own CE
/// and the peer trains on the selected fraction.
pub fn coteach_baseline_iteration<E: Encoder>(
    encoder: &E,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainerConfig,
    schedule: &CoeffSchedule,
) -> Result<IterationOutput> {
    let iter = state.iter;
    let n = batch.len();
    let sig = config.sigmas(schedule, iter);
    let theta_b = state
        .theta_m
        .clone()
        .ok_or_else(|| Error::ContractViolation("baseline needs two networks".into()))?;

    let views: [Vec<Vec<Vec64>>; 2] = [0, 1].map(|net| {
        batch
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| augmented(config, iter, i, net, &s.frames))
            .collect()
    });
    let params = [&state.theta_f, &theta_b];
    let mut selections = Vec::with_capacity(2);
    for net in 0..2 {
        let mut losses = Vec::with_capacity(n);
        for (v, &y) in views[net].iter().zip(&batch.labels) {
            let out = encoder.infer(params[net], v)?;
            losses.push(crate::losses::ce_loss(&out.p, y)?.0);
        }
        selections.push(small_loss_selection(&losses, selection_size(n, config.coteach_noise_rate)));
    }
    let mut forwards = 2 * n as u64;

    let mut updates = Vec::with_capacity(2);
    let mut first_parts = LossParts::default();
    for net in 0..2 {
        // the peer's selection
        let sel = &selections[1 - net];
        let sub_views: Vec<Vec<Vec64>> = sel.iter().map(|&i| views[net][i].clone()).collect();
        let labels: Vec<usize> = sel.iter().map(|&i| batch.labels[i]).collect();
        let (outs, caches) = forward_all(encoder, params[net], &sub_views)?;
        forwards += sel.len() as u64;
        let sup = apply_mask(&vec![true; sel.len()], &outs, &labels, &config.loss)?;
        let parts = LossParts {
            l_c: 0.0,
            l_ce: sup.l_ce,
            l_tri: sup.l_tri,
            l_mil: sup.l_mil,
        };
        if !combine_with(parts, sig).is_finite() {
            return Err(non_finite(iter, batch, &parts, &outs));
        }
        if net == 0 {
            first_parts = parts;
        }
        let gp: Vec<Vec64> = sup
            .grad_ce_p
            .iter()
            .map(|g| g.iter().map(|x| sig[1] * x).collect())
            .collect();
        let gz: Vec<Vec64> = sup
            .grad_tri_z
            .iter()
            .zip(&sup.grad_mil_z)
            .map(|(t, m)| t.iter().zip(m).map(|(a, b)| sig[2] * a + sig[3] * b).collect())
            .collect();
        updates.push(backward_batch(encoder, params[net], &caches, &gz, &gp)?);
    }
    let (new_a, _) = state.opt_f.step(&state.theta_f, &updates[0], iter)?;
    let opt_b = state
        .opt_m
        .as_mut()
        .ok_or_else(|| Error::ContractViolation("baseline needs two optimizers".into()))?;
    let (new_b, _) = opt_b.step(&theta_b, &updates[1], iter)?;
    state.theta_f = new_a;
    state.theta_m = Some(new_b);
    state.iter += 1;

    let mask: Vec<bool> = (0..n).map(|i| selections[1].binary_search(&i).is_ok()).collect();
    Ok(IterationOutput {
        breakdown: combine_with(first_parts, sig),
        trace: None,
        kept_fraction: kept_fraction(&mask),
        mask,
        mean_entropy: None,
        mean_ce: None,
        lr: config.optimizer.lr_at(iter),
        forwards,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub l_c: f64,
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_mil: f64,
    pub l_crc: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub kept_fraction: f64,
    pub lr: f64,
    pub mean_entropy: Option<f64>,
    pub mean_ce: Option<f64>,
    /// Fraction of masked-out samples that carry a noise flag.
    pub noisy_precision: Option<f64>,
    /// Fraction of flagged samples that were masked out.
    pub noisy_recall: Option<f64>,
    pub config_hash: String,
}

/// Optional output streams for [`run_training`].
pub struct RunSinks<'a> {
    pub trace: Option<&'a mut dyn Write>,
    pub metrics: Option<&'a mut dyn Write>,
    /// Hash embedded in the trace header and metrics lines.
    pub config_hash: [u8; 32],
}

impl RunSinks<'_> {
    pub fn none(config: &TrainerConfig) -> Self {
        Self {
            trace: None,
            metrics: None,
            config_hash: config.hash(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub theta_f: ModelParams,
    pub theta_m: Option<ModelParams>,
    pub init_f: ModelParams,
    pub init_m: Option<ModelParams>,
    pub metrics: Vec<MetricsRecord>,
    /// `(completed iterations, θ_f)` pairs.
    pub snapshots: Vec<(usize, ModelParams)>,
    pub forwards: u64,
}

fn io_err(what: &'static str, e: std::io::Error) -> Error {
    Error::format(what, e.to_string())
}

/// Trains for `config.iterations` iterations. F is the inference model.
pub fn run_training<E: Encoder>(
    encoder: &E,
    data: &Dataset,
    config: &TrainerConfig,
    sinks: RunSinks,
) -> Result<RunOutput> {
    config.validate()?;
    if encoder.shape().classes != data.n_ids {
        return Err(Error::invalid(format!(
            "encoder has {} classes but dataset has {} identities",
            encoder.shape().classes,
            data.n_ids
        )));
    }
    if data.by_identity().len() < config.p {
        return Err(Error::invalid(format!(
            "dataset has {} identities, batch needs {}",
            data.by_identity().len(),
            config.p
        )));
    }
    let schedule = config.schedule.resolve(config.iterations);
    let mut state = TrainState::new(encoder, config)?;
    let init_f = state.theta_f.clone();
    let init_m = state.theta_m.clone();
    let hash_hex: String = sinks.config_hash.iter().map(|b| format!("{b:02x}")).collect();

    let RunSinks {
        trace: trace_sink,
        metrics: mut metrics_sink,
        config_hash,
    } = sinks;
    let mut trace_writer = match (trace_sink, config.record_trace && state.theta_m.is_some()) {
        (Some(out), true) => {
            let header = TraceHeader {
                shape: *encoder.shape(),
                m: config.effective_ema(),
                iterations: config.iterations as u64,
                config_hash,
            };
            Some(TraceWriter::new(out, &header).map_err(|e| io_err("trace", e))?)
        }
        _ => None,
    };

    let mut snapshots = Vec::new();
    if config.snapshot_every > 0 {
        snapshots.push((0, init_f.clone()));
    }
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut forwards = 0;
    let sampler_root = RngStream::new(config.seed, SAMPLER_STREAM);
    for iter in 0..config.iterations {
        let mut rng = sampler_root.substream(iter as u64);
        let indices = pxk_sampler(data, config.p, config.k, &mut rng)?;
        let batch = Batch::from_indices(data, indices);
        let out = train_iteration(encoder, &mut state, &batch, config, &schedule)?;
        forwards += out.forwards;
        if let (Some(w), Some(rec)) = (trace_writer.as_mut(), out.trace.as_ref()) {
            w.append(rec).map_err(|e| io_err("trace", e))?;
        }
        let noisy: Vec<bool> = batch.samples.iter().map(|s| s.noise_flag != NoiseFlag::Clean).collect();
        let (noisy_precision, noisy_recall) = if config.sieve_active() {
            detection_quality(&out.mask, &noisy)
        } else {
            (None, None)
        };
        let b = out.breakdown;
        let rec = MetricsRecord {
            iter,
            l_c: b.l_c,
            l_ce: b.l_ce,
            l_tri: b.l_tri,
            l_mil: b.l_mil,
            l_crc: b.l_crc,
            sigma0: b.sigma0,
            sigma1: b.sigma1,
            sigma2: b.sigma2,
            sigma3: b.sigma3,
            kept_fraction: out.kept_fraction,
            lr: out.lr,
            mean_entropy: out.mean_entropy,
            mean_ce: out.mean_ce,
            noisy_precision,
            noisy_recall,
            config_hash: hash_hex.clone(),
        };
        if let Some(w) = metrics_sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::format("metrics", e.to_string()))?;
            w.write_all(b"\n").map_err(|e| io_err("metrics", e))?;
        }
        metrics.push(rec);
        let done = iter + 1;
        if config.snapshot_every > 0 && (done % config.snapshot_every == 0 || done == config.iterations) {
            snapshots.push((done, state.theta_f.clone()));
        }
    }
    if let Some(w) = trace_writer {
        w.finish().map_err(|e| io_err("trace", e))?;
    }
    if let Some(w) = metrics_sink {
        w.flush().map_err(|e| io_err("metrics", e))?;
    }
    Ok(RunOutput {
        theta_f: state.theta_f,
        theta_m: state.theta_m,
        init_f,
        init_m,
        metrics,
        snapshots,
        forwards,
    })
}
