use audiotext_core::alignment::LinearMap;
use audiotext_core::harness::{
    evaluate, generate, Corpus, Pipeline, RunConfig, Split, SyntheticSpec, TrainState, Trainer,
};
use audiotext_core::Error;

fn corpus(seed: u64) -> Corpus {
    generate(&SyntheticSpec {
        vocab_size: 80,
        speech_dim: 8,
        text_dim: 8,
        segments: 6,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn config() -> RunConfig {
    let mut c = RunConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        sequence_length: 50,
        epochs: 3,
        seed: 5,
        ..RunConfig::default()
    };
    c.model.hidden = 12;
    c.model.shared_dim = 10;
    c
}

fn oracle_map(c: &Corpus) -> LinearMap {
    LinearMap::new(c.rotation().unwrap()).unwrap()
}

#[test]
fn seeded_runs_write_identical_logs() {
    let c = corpus(1);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Trainer::new(config(), &c, oracle_map(&c), None)
            .unwrap()
            .train(Some(d.path()))
            .unwrap();
    }
    let a = std::fs::read(dirs[0].path().join("metrics.jsonl")).unwrap();
    let b = std::fs::read(dirs[1].path().join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    let ca = std::fs::read(dirs[0].path().join("last.ckpt")).unwrap();
    let cb = std::fs::read(dirs[1].path().join("last.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn different_seeds_differ() {
    let c = corpus(1);
    let a = Trainer::new(config(), &c, oracle_map(&c), None)
        .unwrap()
        .train(None)
        .unwrap();
    let other = RunConfig { seed: 6, ..config() };
    let b = Trainer::new(other, &c, oracle_map(&c), None)
        .unwrap()
        .train(None)
        .unwrap();
    assert_ne!(a, b);
}

#[test]
fn resume_from_file_matches_uninterrupted_run() {
    let c = corpus(2);
    let full_cfg = RunConfig { epochs: 4, ..config() };
    let mut full = Trainer::new(full_cfg.clone(), &c, oracle_map(&c), None).unwrap();
    full.train(None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half_cfg = RunConfig { epochs: 2, ..full_cfg };
    let mut half = Trainer::new(half_cfg, &c, oracle_map(&c), None).unwrap();
    half.train(Some(dir.path())).unwrap();
    let state = TrainState::load(dir.path().join("last.ckpt")).unwrap();
    let mut resumed = Trainer::resume(state, &c, None).unwrap();
    resumed.set_epochs(4);
    resumed.train(Some(dir.path())).unwrap();

    let (a, b) = (full.state(), resumed.state());
    assert_eq!(a.history, b.history);
    for (x, y) in a
        .pipeline
        .model
        .params()
        .tensors()
        .iter()
        .zip(b.pipeline.model.params().tensors())
    {
        assert_eq!(x, y);
    }
    assert_eq!(a.model_adam, b.model_adam);
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn best_checkpoint_tracks_dev_score() {
    let c = corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(RunConfig { epochs: 4, ..config() }, &c, oracle_map(&c), None).unwrap();
    let logs = t.train(Some(dir.path())).unwrap();
    let best = logs
        .iter()
        .map(|m| m.dev.as_ref().unwrap().mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let saved = TrainState::load(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(saved.best_score, Some(best));
    let best_epoch = logs.iter().rposition(|m| m.best).unwrap() + 1;
    assert_eq!(saved.epoch, best_epoch);
    let pipeline = Pipeline::load(dir.path().join("best.ckpt")).unwrap();
    let s = evaluate(&pipeline, &c, Split::Dev).unwrap();
    assert_eq!(s.mean, best);
}

#[test]
fn exploding_updates_abort_with_batch_id() {
    let c = corpus(4);
    let cfg = RunConfig {
        learning_rate: 1e300,
        epochs: 5,
        ..config()
    };
    let mut t = Trainer::new(cfg, &c, oracle_map(&c), None).unwrap();
    match t.train(None) {
        Err(Error::Diverged(m)) => assert!(m.contains("batch"), "{m}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn evaluation_is_idempotent_and_rejects_missing_split() {
    let c = generate(&SyntheticSpec {
        vocab_size: 80,
        speech_dim: 8,
        text_dim: 8,
        segments: 5,
        test_fraction: 0.0,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut t = Trainer::new(RunConfig { epochs: 1, ..config() }, &c, oracle_map(&c), None).unwrap();
    t.train(None).unwrap();
    let p = &t.state().pipeline;
    assert_eq!(
        evaluate(p, &c, Split::Dev).unwrap(),
        evaluate(p, &c, Split::Dev).unwrap()
    );
    assert!(matches!(evaluate(p, &c, Split::Test), Err(Error::Io { .. })));
}

#[test]
fn synthetic_corpus_is_byte_identical_on_disk() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let spec = SyntheticSpec {
        vocab_size: 30,
        speech_dim: 3,
        text_dim: 3,
        segments: 2,
        seed: 8,
        ..SyntheticSpec::default()
    };
    for d in &dirs {
        generate(&spec).unwrap().write(d.path()).unwrap();
    }
    let mut names: Vec<_> = walk(dirs[0].path());
    names.sort();
    assert!(names.len() >= 8);
    for rel in names {
        let a = std::fs::read(dirs[0].path().join(&rel)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&rel)).unwrap();
        assert_eq!(a, b, "{}", rel.display());
    }
    let back = Corpus::load(dirs[0].path()).unwrap();
    assert_eq!(back, generate(&spec).unwrap());
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}
