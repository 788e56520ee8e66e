//! An untrained model must score at chance: the evaluation paths may not
//! leak labels. Raw features at the default nuisance level still carry
//! identity, so retrieval uses a generator where the per-sequence nuisance
//! swamps it.

use cyclenoise::eval::{evaluate, memorization_curve};
use cyclenoise::experiment::{encoder_for, ExperimentConfig};
use cyclenoise::synth::{CorruptionDescriptor, CorruptionKind};
use cyclenoise::{Encoder, RngStream};

/// Three binomial standard errors around `p` for `n` trials, in percent.
fn band(p: f64, n: usize) -> f64 {
    300.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn untrained_rank1_is_chance_on_a_high_nuisance_generator() {
    for seed in 1..=5 {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.data.generator.nuisance = 10.0;
        let (train, test) = cfg.manifest().materialize().unwrap();
        let enc = encoder_for(&train, &cfg.trainer).unwrap();
        let params = enc.init(&mut RngStream::new(seed, 0));
        let report = evaluate(&enc, &params, &test, 4, true).unwrap();
        let chance = 1.0 / test.n_ids as f64;
        let tol = band(chance, report.probe_size);
        assert!(
            (report.overall_mean - 100.0 * chance).abs() < tol,
            "seed {seed}: {:.2}% vs chance {:.2}% ± {tol:.2}",
            report.overall_mean,
            100.0 * chance
        );
    }
}

#[test]
fn untrained_training_accuracy_is_chance_for_clean_and_noisy_subsets() {
    let mut cfg = ExperimentConfig::default();
    cfg.corruption = Some(CorruptionDescriptor {
        kind: CorruptionKind::Label,
        amount: 0.2,
        seed: 1,
    });
    let (train, _) = cfg.manifest().materialize().unwrap();
    let enc = encoder_for(&train, &cfg.trainer).unwrap();
    let chance = 1.0 / train.n_ids as f64;
    let noisy = train.noisy_count();
    for seed in 1..=5 {
        let snapshots = vec![(0, enc.init(&mut RngStream::new(seed, 0)))];
        let point = memorization_curve(&enc, &snapshots, &train).unwrap().points[0];
        let clean_tol = band(chance, train.len() - noisy) / 100.0;
        let noisy_tol = band(chance, noisy) / 100.0;
        assert!((point.clean_acc - chance).abs() < clean_tol, "seed {seed}: {point:?}");
        assert!((point.noisy_acc.unwrap() - chance).abs() < noisy_tol, "seed {seed}: {point:?}");
    }
}
