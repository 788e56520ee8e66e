//! Adaptive noise detection: per-sample noisiness scores and an adaptive
//! mask that keeps probable noisy labels out of the supervised losses.

use serde::{Deserialize, Serialize};

use crate::encoder::NetOutputs;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, has_valid_triplet, mil_batch, triplet_loss, LossConfig};
use crate::numeric::{entropy, softmax, strict_argmax, Vec64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScore {
    pub index: usize,
    /// Entropy of M's predictive distribution, nats.
    pub entropy: f64,
    /// Cross-entropy of F against the assigned label.
    pub ce: f64,
    /// F and M share a unique argmax. Ties count as disagreement.
    pub agree: bool,
}

pub fn score_batch(outputs_f: &[NetOutputs], outputs_m: &[NetOutputs], labels: &[usize]) -> Result<Vec<NoiseScore>> {
    if outputs_f.len() != outputs_m.len() || outputs_f.len() != labels.len() {
        return Err(Error::invalid(format!(
            "score_batch: {} F outputs, {} M outputs, {} labels",
            outputs_f.len(),
            outputs_m.len(),
            labels.len()
        )));
    }
    outputs_f
        .iter()
        .zip(outputs_m)
        .zip(labels)
        .enumerate()
        .map(|(index, ((f, m), &y))| {
            let h = entropy(&softmax(&m.p)?)?;
            let (ce, _) = ce_loss(&f.p, y)?;
            let agree = match (strict_argmax(&f.p), strict_argmax(&m.p)) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            };
            Ok(NoiseScore {
                index,
                entropy: h,
                ce,
                agree,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveConfig {
    /// Smoothing factor of the running thresholds.
    pub beta: f64,
    /// Iterations during which every sample is kept.
    pub warmup: usize,
}

impl Default for SieveConfig {
    fn default() -> Self {
        Self { beta: 0.9, warmup: 200 }
    }
}

impl SieveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("sieve beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveState {
    pub config: SieveConfig,
    /// Running entropy threshold; `None` until the first batch.
    pub mean_entropy: Option<f64>,
    pub mean_ce: Option<f64>,
    pub iteration: usize,
}

impl SieveState {
    pub fn new(config: SieveConfig) -> Self {
        Self {
            config,
            mean_entropy: None,
            mean_ce: None,
            iteration: 0,
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.iteration < self.config.warmup
    }
}

/// Computes the keep mask for a batch and the advanced state.
///
/// Scores are compared against the thresholds in force before this batch
/// (the batch means themselves on the very first batch). The minimum-CE
/// sample, lowest index on ties, is always kept.
pub fn adapt_mask(scores: &[NoiseScore], state: &SieveState) -> (Vec<bool>, SieveState) {
    let n = scores.len();
    if n == 0 {
        let mut next = *state;
        next.iteration += 1;
        return (Vec::new(), next);
    }
    let batch_h = scores.iter().map(|s| s.entropy).sum::<f64>() / n as f64;
    let batch_ce = scores.iter().map(|s| s.ce).sum::<f64>() / n as f64;
    let th_h = state.mean_entropy.unwrap_or(batch_h);
    let th_ce = state.mean_ce.unwrap_or(batch_ce);

    let mut mask: Vec<bool> = if state.in_warmup() {
        vec![true; n]
    } else {
        scores
            .iter()
            .map(|s| s.entropy <= th_h && s.ce <= th_ce && s.agree)
            .collect()
    };
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if s.ce < scores[best].ce { i } else { best });
    mask[best] = true;

    let beta = state.config.beta;
    let next = SieveState {
        config: state.config,
        mean_entropy: Some(state.mean_entropy.map_or(batch_h, |m| beta * m + (1.0 - beta) * batch_h)),
        mean_ce: Some(state.mean_ce.map_or(batch_ce, |m| beta * m + (1.0 - beta) * batch_ce)),
        iteration: state.iteration + 1,
    };
    (mask, next)
}

pub fn kept_fraction(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&k| k).count() as f64 / mask.len() as f64
}

/// Supervised terms on the kept subset, with per-sample gradients that are
/// zero for masked samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSupervised {
    pub l_ce: f64,
    pub l_tri: f64,
    pub l_mil: f64,
    pub grad_ce_p: Vec<Vec64>,
    pub grad_tri_z: Vec<Vec64>,
    pub grad_mil_z: Vec<Vec64>,
}

/// CE (mean over kept samples), triplet and InfoNCE computed as if masked
/// samples were absent from the batch. A kept subset with no valid triplet
/// or no positive pair contributes zero for that term.
pub fn apply_mask(mask: &[bool], outputs: &[NetOutputs], labels: &[usize], cfg: &LossConfig) -> Result<MaskedSupervised> {
    let n = outputs.len();
    if mask.len() != n || labels.len() != n {
        return Err(Error::invalid(format!(
            "apply_mask: mask {}, outputs {n}, labels {}",
            mask.len(),
            labels.len()
        )));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return Err(Error::ContractViolation("apply_mask: all-zero mask".into()));
    }
    let d_emb = outputs[0].z.len();
    let classes = outputs[0].p.len();

    let mut grad_ce_p = vec![vec![0.0; classes]; n];
    let mut l_ce = 0.0;
    let inv = 1.0 / kept.len() as f64;
    for &i in &kept {
        let (l, g) = ce_loss(&outputs[i].p, labels[i])?;
        l_ce += l;
        grad_ce_p[i] = g.into_iter().map(|x| x * inv).collect();
    }
    l_ce *= inv;

    let sub_z: Vec<Vec64> = kept.iter().map(|&i| outputs[i].z.clone()).collect();
    let sub_y: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
    let scatter = |sub: Vec<Vec64>| {
        let mut full = vec![vec![0.0; d_emb]; n];
        for (&i, g) in kept.iter().zip(sub) {
            full[i] = g;
        }
        full
    };

    let (l_tri, grad_tri_z) = if has_valid_triplet(&sub_y) {
        let (l, g) = triplet_loss(&sub_z, &sub_y, cfg.margin)?;
        (l, scatter(g))
    } else {
        (0.0, vec![vec![0.0; d_emb]; n])
    };

    let has_pair = {
        let mut seen = std::collections::BTreeSet::new();
        sub_y.iter().any(|y| !seen.insert(*y))
    };
    let (l_mil, grad_mil_z) = if has_pair {
        let (l, g) = mil_batch(&sub_z, &sub_y, cfg.temperature)?;
        (l, scatter(g))
    } else {
        (0.0, vec![vec![0.0; d_emb]; n])
    };

    Ok(MaskedSupervised {
        l_ce,
        l_tri,
        l_mil,
        grad_ce_p,
        grad_tri_z,
        grad_mil_z,
    })
}

/// Precision and recall of the masked-out set for ground-truth-noisy
/// samples. Precision is `None` when nothing was masked, recall when no
/// sample is noisy.
pub fn detection_quality(mask: &[bool], noisy: &[bool]) -> (Option<f64>, Option<f64>) {
    let masked = mask.iter().filter(|&&k| !k).count();
    let truly = noisy.iter().filter(|&&x| x).count();
    let hit = mask.iter().zip(noisy).filter(|(&k, &x)| !k && x).count();
    let precision = (masked > 0).then(|| hit as f64 / masked as f64);
    let recall = (truly > 0).then(|| hit as f64 / truly as f64);
    (precision, recall)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(p: Vec64) -> NetOutputs {
        NetOutputs { z: vec![0.0; 2], p }
    }

    fn post_warmup() -> SieveState {
        SieveState::new(SieveConfig { beta: 0.9, warmup: 0 })
    }

    #[test]
    fn clean_confident_sample() {
        let sharp = out(vec![40.0, 0.0, 0.0]);
        let s = score_batch(&[sharp.clone()], &[sharp], &[0]).unwrap();
        assert!(s[0].entropy < 1e-12 && s[0].ce < 1e-12 && s[0].agree);
    }

    #[test]
    fn uniform_teacher_has_max_entropy() {
        let s = score_batch(&[out(vec![1.0, 0.0, 0.0, 0.0])], &[out(vec![0.0; 4])], &[0]).unwrap();
        assert!((s[0].entropy - 4f64.ln()).abs() < 1e-12);
        assert!(!s[0].agree);
    }

    #[test]
    fn argmax_disagreement() {
        let s = score_batch(&[out(vec![1.0, 0.0])], &[out(vec![0.0, 1.0])], &[0]).unwrap();
        assert!(!s[0].agree);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            score_batch(&[out(vec![1.0, 0.0])], &[], &[0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn warmup_keeps_everything() {
        let state = SieveState::new(SieveConfig { beta: 0.9, warmup: 5 });
        let scores: Vec<NoiseScore> = (0..4)
            .map(|i| NoiseScore {
                index: i,
                entropy: i as f64,
                ce: 10.0 * i as f64,
                agree: false,
            })
            .collect();
        let (mask, next) = adapt_mask(&scores, &state);
        assert_eq!(mask, vec![true; 4]);
        assert_eq!(next.iteration, 1);
        assert_eq!(next.mean_entropy, Some(1.5));
    }

    /// Two confident correct samples and two uniform ones; the thresholds
    /// are the batch means, strictly between the groups.
    #[test]
    fn splits_confident_from_uniform() {
        let c = 5usize;
        let sharp = out({
            let mut v = vec![0.0; c];
            v[0] = 50.0;
            v
        });
        let flat = out(vec![0.0; c]);
        let f = vec![sharp.clone(), sharp.clone(), flat.clone(), flat.clone()];
        let m = f.clone();
        let scores = score_batch(&f, &m, &[0, 0, 0, 0]).unwrap();
        let ln_c = (c as f64).ln();
        assert!((scores[2].entropy - ln_c).abs() < 1e-12 && (scores[2].ce - ln_c).abs() < 1e-12);
        let (mask, next) = adapt_mask(&scores, &post_warmup());
        assert_eq!(mask, vec![true, true, false, false]);
        let mean_h = scores.iter().map(|s| s.entropy).sum::<f64>() / 4.0;
        assert_eq!(next.mean_entropy, Some(mean_h));

        // thresholds remain between the groups on a second identical batch
        let (mask2, _) = adapt_mask(&scores, &next);
        assert_eq!(mask2, vec![true, true, false, false]);
    }

    #[test]
    fn equal_scores_are_all_kept() {
        let scores: Vec<NoiseScore> = (0..6)
            .map(|i| NoiseScore {
                index: i,
                entropy: 0.3,
                ce: 0.7,
                agree: true,
            })
            .collect();
        let (mask, _) = adapt_mask(&scores, &post_warmup());
        assert!(mask.iter().all(|&k| k));
    }

    #[test]
    fn minimum_ce_sample_is_always_kept() {
        let scores: Vec<NoiseScore> = [2.0, 0.5, 0.5, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &ce)| NoiseScore {
                index: i,
                entropy: 1.0,
                ce,
                agree: false,
            })
            .collect();
        let (mask, _) = adapt_mask(&scores, &post_warmup());
        assert_eq!(mask, vec![false, true, false, false]);
        assert!(kept_fraction(&mask) > 0.0);
    }

    #[test]
    fn mask_is_deterministic() {
        let scores: Vec<NoiseScore> = (0..8)
            .map(|i| NoiseScore {
                index: i,
                entropy: (i as f64 * 0.37).sin().abs(),
                ce: (i as f64 * 0.91).cos().abs(),
                agree: i % 3 != 0,
            })
            .collect();
        let state = SieveState {
            mean_entropy: Some(0.5),
            mean_ce: Some(0.5),
            ..post_warmup()
        };
        assert_eq!(adapt_mask(&scores, &state), adapt_mask(&scores, &state));
    }

    fn batch() -> (Vec<NetOutputs>, Vec<usize>) {
        let outputs = (0..6)
            .map(|i| {
                let t = i as f64;
                NetOutputs {
                    z: vec![(t * 0.7).sin(), (t * 1.3).cos(), 0.1 * t],
                    p: vec![(t * 0.5).cos(), 0.2 * t, -(t * 0.3).sin()],
                }
            })
            .collect();
        (outputs, vec![0, 0, 1, 1, 2, 2])
    }

    #[test]
    fn all_ones_mask_matches_unmasked_losses() {
        let (outputs, labels) = batch();
        let cfg = LossConfig::default();
        let got = apply_mask(&[true; 6], &outputs, &labels, &cfg).unwrap();
        let z: Vec<Vec64> = outputs.iter().map(|o| o.z.clone()).collect();
        let (tri, gtri) = triplet_loss(&z, &labels, cfg.margin).unwrap();
        let (mil, gmil) = mil_batch(&z, &labels, cfg.temperature).unwrap();
        let ce: f64 = outputs.iter().zip(&labels).map(|(o, &y)| ce_loss(&o.p, y).unwrap().0).sum::<f64>() / 6.0;
        assert_eq!(got.l_tri, tri);
        assert_eq!(got.grad_tri_z, gtri);
        assert_eq!(got.l_mil, mil);
        assert_eq!(got.grad_mil_z, gmil);
        assert!((got.l_ce - ce).abs() < 1e-15);
    }

    #[test]
    fn singleton_mask_reduces_to_singleton_batch() {
        let (outputs, labels) = batch();
        let mut mask = [false; 6];
        mask[3] = true;
        let got = apply_mask(&mask, &outputs, &labels, &LossConfig::default()).unwrap();
        let (ce, g) = ce_loss(&outputs[3].p, labels[3]).unwrap();
        assert_eq!(got.l_ce, ce);
        assert_eq!(got.grad_ce_p[3], g);
        assert_eq!((got.l_tri, got.l_mil), (0.0, 0.0));
        for i in (0..6).filter(|&i| i != 3) {
            assert!(got.grad_ce_p[i].iter().all(|&x| x == 0.0));
        }
        assert!(got.grad_tri_z.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_samples_do_not_act_as_negatives() {
        let (outputs, labels) = batch();
        let mask = [true, true, true, true, false, false];
        let got = apply_mask(&mask, &outputs, &labels, &LossConfig::default()).unwrap();
        let z: Vec<Vec64> = outputs[..4].iter().map(|o| o.z.clone()).collect();
        let (tri, _) = triplet_loss(&z, &labels[..4], 0.2).unwrap();
        assert_eq!(got.l_tri, tri);
        assert!(got.grad_mil_z[4].iter().chain(&got.grad_mil_z[5]).all(|&x| x == 0.0));
    }

    /// Dropping above-average-CE samples from a kept set lowers the CE term.
    #[test]
    fn nested_masks_order_ce() {
        let (outputs, labels) = batch();
        let ces: Vec<f64> = outputs.iter().zip(&labels).map(|(o, &y)| ce_loss(&o.p, y).unwrap().0).collect();
        let m2 = [true; 6];
        let avg = ces.iter().sum::<f64>() / 6.0;
        let m1: Vec<bool> = ces.iter().map(|&c| c <= avg).collect();
        assert!(m1.iter().any(|&k| !k));
        let cfg = LossConfig::default();
        let l1 = apply_mask(&m1, &outputs, &labels, &cfg).unwrap().l_ce;
        let l2 = apply_mask(&m2, &outputs, &labels, &cfg).unwrap().l_ce;
        let oracle = ces.iter().zip(&m1).filter(|(_, &k)| k).map(|(c, _)| c).sum::<f64>()
            / m1.iter().filter(|&&k| k).count() as f64;
        assert!((l1 - oracle).abs() < 1e-15);
        assert!(l1 <= l2);
    }

    #[test]
    fn all_zero_mask_is_a_contract_violation() {
        let (outputs, labels) = batch();
        assert!(matches!(
            apply_mask(&[false; 6], &outputs, &labels, &LossConfig::default()),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn detection_quality_counts() {
        let mask = [true, false, false, true];
        let noisy = [false, true, false, true];
        assert_eq!(detection_quality(&mask, &noisy), (Some(0.5), Some(0.5)));
        assert_eq!(detection_quality(&[true; 2], &[false; 2]), (None, None));
    }
}
