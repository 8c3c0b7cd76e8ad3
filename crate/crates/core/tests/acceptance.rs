//! Acceptance criteria, run in sequence so the runtime budgets are measured
//! without other tests competing for the CPU. One PASS/FAIL line per
//! criterion is written straight to stderr, bypassing output capture.

use std::io::Write;
use std::time::{Duration, Instant};

use audiotext_core::alignment::{
    adversarial_train, orthogonality_defect, procrustes_refine, svd, translation_precision, AlignmentConfig, LinearMap,
};
use audiotext_core::embeddings::{build_frequency_dictionary, gather, Side};
use audiotext_core::features::{
    extract_paralinguistic, resample_to_label_rate, ParalinguisticCnn, WaveformSegment, SEGMENT_SAMPLES,
};
use audiotext_core::fusion::{ccc, FusionMode};
use audiotext_core::harness::gradsuite;
use audiotext_core::harness::synthetic::random_orthogonal;
use audiotext_core::harness::{fallback_map, generate, FeatureBank, RunConfig, SyntheticSpec, TrainState, Trainer};
use audiotext_core::rng::SeedStream;
use audiotext_core::tensor::Tensor;
use rand::Rng as _;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn within(elapsed: Duration, budget_secs: u64) -> bool {
    elapsed < Duration::from_secs(budget_secs)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = match gradsuite::run_suite(gradsuite::DEFAULT_CASES, 0) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let enough = reports.iter().all(|r| r.cases >= 20) && reports.len() == 8;
    verdict(
        failing.is_empty() && enough && within(elapsed, 120),
        format!(
            "{} ops x {} cases, worst rel err {worst:.2e}, failing {failing:?}, {elapsed:.1?}",
            reports.len(),
            gradsuite::DEFAULT_CASES
        ),
    )
}

fn svd_suite() -> Verdict {
    let mut rng = SeedStream::new(0).fork("svd-acceptance");
    let (mut worst_rec, mut worst_orth): (f64, f64) = (0.0, 0.0);
    for case in 0..100 {
        let (m, n) = if case == 0 {
            (64, 64)
        } else {
            (rng.random_range(1..=64), rng.random_range(1..=64))
        };
        let a = Tensor::randn(&[m, n], 1.0, &mut rng);
        let s = match svd(&a) {
            Ok(s) => s,
            Err(e) => return verdict(false, format!("{m}x{n}: {e}")),
        };
        let r = s.sigma.len();
        let mut us = Tensor::zeros(&[m, r]);
        for i in 0..m {
            for k in 0..r {
                us.set(i, k, s.u.at(i, k) * s.sigma[k]);
            }
        }
        let mut vr = Tensor::zeros(&[n, r]);
        for j in 0..n {
            for k in 0..r {
                vr.set(j, k, s.v.at(j, k));
            }
        }
        let rec = us.matmul(&vr.transpose().unwrap()).unwrap();
        worst_rec = worst_rec.max(rec.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm());
        worst_orth = worst_orth
            .max(orthogonality_defect(&s.u))
            .max(orthogonality_defect(&s.v));
    }
    verdict(
        worst_rec < 1e-8 && worst_orth < 1e-8,
        format!("100 matrices up to 64x64, reconstruction {worst_rec:.2e}, orthogonality {worst_orth:.2e}"),
    )
}

fn procrustes_oracle() -> Verdict {
    let start = Instant::now();
    let (d, k) = (50, 200);
    let mut rng = SeedStream::new(1).fork("procrustes-acceptance");
    let r = random_orthogonal(d, &mut rng);
    let s = Tensor::randn(&[k, d], 1.0, &mut rng);
    let clean = s.matmul(&r.transpose().unwrap()).unwrap();
    let noisy = clean.add(&Tensor::randn(&[k, d], 0.01, &mut rng)).unwrap();
    let err = |t: &Tensor| {
        procrustes_refine(&s, t)
            .map(|w| w.matrix().sub(&r).unwrap().frobenius_norm())
            .unwrap_or(f64::INFINITY)
    };
    let (e0, e1) = (err(&clean), err(&noisy));
    let elapsed = start.elapsed();
    verdict(
        e0 < 1e-6 && e1 < 0.05 && within(elapsed, 10),
        format!("sigma=0: {e0:.2e}, sigma=0.01: {e1:.4}, {elapsed:.1?}"),
    )
}

fn alignment_end_to_end() -> Verdict {
    let start = Instant::now();
    let corpus = generate(&SyntheticSpec {
        vocab_size: 1000,
        speech_dim: 50,
        text_dim: 50,
        noise: 0.01,
        segments: 1,
        dev_fraction: 0.0,
        test_fraction: 0.0,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (speech, text) = (&corpus.speech, &corpus.text);
    let adversarial = match adversarial_train(speech, text, &AlignmentConfig::default()) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("adversarial phase: {e}")),
    };
    let full = build_frequency_dictionary(speech, text, 1000).unwrap().dictionary;
    let (seen, held_out) = full.split_at(800);
    let (seed_pairs, _) = seen.split_at(500);
    let refined = procrustes_refine(
        &gather(speech, &seed_pairs, Side::Speech).unwrap(),
        &gather(text, &seed_pairs, Side::Text).unwrap(),
    )
    .unwrap();
    let p = |m: &LinearMap| translation_precision(m, speech, text, &held_out, 1).unwrap();
    let (p_adv, p_ref) = (p(&adversarial.map), p(&refined));
    let random = LinearMap::new(random_orthogonal(50, &mut SeedStream::new(3).fork("random-w"))).unwrap();
    let p_rand = p(&random);
    let elapsed = start.elapsed();
    verdict(
        p_ref >= 0.95 && held_out.len() == 200 && within(elapsed, 300),
        format!(
            "{} steps, held-out {} pairs: p@1 refined {p_ref:.3}, adversarial only {p_adv:.3}, random W {p_rand:.3}, {elapsed:.1?}",
            AlignmentConfig::default().steps,
            held_out.len()
        ),
    )
}

fn ccc_values() -> Verdict {
    let one = ccc(&[0.3, -1.0, 2.0, 0.5], &[0.3, -1.0, 2.0, 0.5]).unwrap();
    let neg = ccc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
    let zero = ccc(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
    let mut rng = SeedStream::new(2).fork("ccc-acceptance");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(-10.0..10.0));
        let f = |v: &[f64]| v.iter().map(|t| a * t + b).collect::<Vec<_>>();
        worst = worst.max((ccc(&f(&x), &f(&y)).unwrap() - ccc(&x, &y).unwrap()).abs());
    }
    let ok = (one - 1.0).abs() < 1e-12 && (neg + 1.0).abs() < 1e-12 && zero.abs() < 1e-12 && worst < 1e-9;
    verdict(
        ok,
        format!("(x,x) {one}, reversed {neg}, zeros vs ones {zero}, affine deviation {worst:.1e}"),
    )
}

fn shape_contract() -> Verdict {
    let mut rng = SeedStream::new(3).fork("shape-acceptance");
    let samples: Vec<f64> = (0..SEGMENT_SAMPLES).map(|_| rng.random_range(-0.5..0.5)).collect();
    let n = samples.len();
    let segment = WaveformSegment::new(samples).unwrap();
    let cnn = ParalinguisticCnn::new(&mut rng);
    let frames = extract_paralinguistic(&segment, &cnn).unwrap();
    let resampled = resample_to_label_rate(&frames, 10.0).unwrap();
    let (a, b) = (frames.frames().shape().to_vec(), resampled.frames().shape().to_vec());
    verdict(
        n == 220_500 && a == [882, 125] && b == [100, 125],
        format!("{n} samples -> {}x{} -> {}x{} at 10 Hz", a[0], a[1], b[0], b[1]),
    )
}

fn overfit() -> Verdict {
    let start = Instant::now();
    let corpus = generate(&SyntheticSpec {
        segments: 4,
        dev_fraction: 0.0,
        test_fraction: 0.0,
        seed: 0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut config = RunConfig {
        epochs: 500,
        seed: 1,
        ..RunConfig::default()
    };
    config.model.fusion = FusionMode::Disentangled;
    let map = fallback_map(&corpus.speech, &corpus.text).unwrap();
    let mut trainer = Trainer::new(config, &corpus, map, None).unwrap();
    let logs = match trainer.train(None) {
        Ok(l) => l,
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let elapsed = start.elapsed();
    let last = logs.last().unwrap();
    let decreasing = logs[9].train_loss < logs[0].train_loss;
    verdict(
        last.train.mean >= 0.9 && decreasing && within(elapsed, 600),
        format!(
            "4 sequences, {} epochs, lr {}: mean train CCC {:.4} {:?}; loss epoch 1 {:.4} -> epoch 10 {:.4}; {elapsed:.1?}",
            logs.len(),
            RunConfig::default().learning_rate,
            last.train.mean,
            last.train.dims().map(|v| (v * 1e4).round() / 1e4),
            logs[0].train_loss,
            logs[9].train_loss
        ),
    )
}

fn fusion_trend() -> Verdict {
    let start = Instant::now();
    let corpus = generate(&SyntheticSpec {
        segments: 64,
        seed: 0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let map = fallback_map(&corpus.speech, &corpus.text).unwrap();
    let ids: Vec<String> = corpus
        .manifest
        .splits
        .train
        .iter()
        .chain(&corpus.manifest.splits.dev)
        .cloned()
        .collect();
    let bank = FeatureBank::build(&corpus, &ids, &map, 0, true, 10.0).unwrap();
    let mut means = [0.0; 2];
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        for (slot, fusion) in [FusionMode::Concat, FusionMode::Disentangled].into_iter().enumerate() {
            let mut config = RunConfig {
                learning_rate: 1e-3,
                epochs: 30,
                seed,
                cnn_seed: Some(0),
                ..RunConfig::default()
            };
            config.model.fusion = fusion;
            let mut trainer = Trainer::new(config, &corpus, map.clone(), Some(bank.clone())).unwrap();
            if let Err(e) = trainer.train(None) {
                return verdict(false, format!("seed {seed} {fusion:?}: {e}"));
            }
            let best = trainer.state().best_score.unwrap();
            means[slot] += best / 3.0;
            per_seed.push(format!("{fusion:?}/{seed} {best:.3}"));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        means[1] >= means[0] - 0.02,
        format!(
            "best dev mean CCC over 3 seeds: disentangled {:.4}, concat {:.4} [{}], {elapsed:.1?}",
            means[1],
            means[0],
            per_seed.join(", ")
        ),
    )
}

fn determinism() -> Verdict {
    let corpus = generate(&SyntheticSpec {
        vocab_size: 100,
        speech_dim: 10,
        text_dim: 10,
        segments: 8,
        seed: 21,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let map = fallback_map(&corpus.speech, &corpus.text).unwrap();
    let config = RunConfig {
        learning_rate: 1e-3,
        epochs: 4,
        seed: 3,
        ..RunConfig::default()
    };
    let log_of = |epochs: usize| {
        let mut t = Trainer::new(
            RunConfig {
                epochs,
                ..config.clone()
            },
            &corpus,
            map.clone(),
            None,
        )
        .unwrap();
        t.train(None).unwrap();
        t
    };
    let (a, b) = (log_of(4), log_of(4));
    let lines = |t: &Trainer| {
        t.state()
            .history
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect::<Vec<_>>()
    };
    let identical = lines(&a) == lines(&b);

    let half = log_of(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    half.state().save(&path).unwrap();
    let mut resumed = Trainer::resume(TrainState::load(&path).unwrap(), &corpus, None).unwrap();
    resumed.set_epochs(4);
    resumed.train(None).unwrap();
    let param_gap = a
        .state()
        .pipeline
        .model
        .params()
        .tensors()
        .iter()
        .zip(resumed.state().pipeline.model.params().tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    let loss_gap = a
        .state()
        .history
        .iter()
        .zip(&resumed.state().history)
        .map(|(x, y)| (x.train_loss - y.train_loss).abs())
        .fold(0.0, f64::max);
    verdict(
        identical && param_gap <= 1e-9 && loss_gap <= 1e-9,
        format!(
            "identical logs {identical}; resume vs uninterrupted: param gap {param_gap:.1e}, loss gap {loss_gap:.1e}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("svd", svd_suite),
        ("procrustes oracle", procrustes_oracle),
        ("alignment end-to-end", alignment_end_to_end),
        ("ccc unit values", ccc_values),
        ("shape contract", shape_contract),
        ("overfit smoke test", overfit),
        ("fusion comparison trend", fusion_trend),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let v = run();
        report(&format!(
            "[{}] {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        ));
        if !v.passed {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
