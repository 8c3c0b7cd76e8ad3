//! `audiotext`: generate data, align embeddings, train and evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use audiotext_core::alignment::{adversarial_train, refine_from_frequent, AlignmentConfig, LinearMap};
use audiotext_core::embeddings::{load_table, EmbeddingTable};
use audiotext_core::fusion::FusionMode;
use audiotext_core::harness::config::load_config;
use audiotext_core::harness::gradsuite;
use audiotext_core::harness::{
    evaluate, fallback_map, generate, ClipScope, Corpus, Pipeline, RunConfig, Split, SyntheticSpec, TrainState, Trainer,
};

#[derive(Parser)]
#[command(
    name = "audiotext",
    version,
    about = "Speech emotion regression from aligned word embeddings and raw audio"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with known ground truth.
    GenData(GenData),
    /// Adversarially learn a speech-to-text embedding map.
    Align(Align),
    /// Orthogonal Procrustes over the most frequent shared tokens.
    Refine(Refine),
    /// Train the fusion model.
    Train(Train),
    /// Score a checkpoint on one split.
    Eval(Eval),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON synthetic spec; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Speech and text embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    segments: Option<usize>,
}

/// Embedding sources: a corpus directory or explicit word2vec files.
#[derive(Args)]
struct Tables {
    /// Corpus directory holding speech.vec and text.vec.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    speech: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
    /// `token count` lines for the speech table.
    #[arg(long)]
    speech_freq: Option<PathBuf>,
    #[arg(long)]
    text_freq: Option<PathBuf>,
}

#[derive(Args)]
struct Align {
    #[command(flatten)]
    tables: Tables,
    /// Where to write the learned map.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON alignment config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct Refine {
    #[command(flatten)]
    tables: Tables,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Map written instead when the dimensions differ and refinement is skipped.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Number of frequent shared tokens to pair.
    #[arg(long, default_value_t = 500)]
    dictionary_size: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for metrics.jsonl, last.ckpt and best.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Speech-to-text map; derived by refinement when absent.
    #[arg(long)]
    map: Option<PathBuf>,
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `concat` or `disentangled`.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// `lstm` or `global`.
    #[arg(long)]
    clip_scope: Option<ClipScope>,
    #[arg(long)]
    train_cnn: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `train`, `dev` or `test`.
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = gradsuite::DEFAULT_CASES)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(audiotext_core::Error),
    Check(String),
}

impl From<audiotext_core::Error> for Failure {
    fn from(e: audiotext_core::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn required<'a>(value: Option<&'a PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value
        .map(PathBuf::as_path)
        .ok_or_else(|| Failure::Usage(format!("missing required flag --{flag}")))
}

fn print_json(value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(audiotext_core::Error::from)?;
    println!("{text}");
    Ok(())
}

fn gen_data(args: &GenData) -> Outcome {
    let out = required(args.out.as_ref(), "out")?;
    let mut spec: SyntheticSpec = load_config(args.config.as_deref())?;
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = args.dim {
        spec.speech_dim = v;
        spec.text_dim = v;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.segments {
        spec.segments = v;
    }
    let corpus = generate(&spec)?;
    corpus.write(out)?;
    log::info!("wrote {} segments to {}", corpus.segments.len(), out.display());
    Ok(())
}

fn load_tables(t: &Tables) -> Result<(EmbeddingTable, EmbeddingTable), Failure> {
    if let Some(dir) = &t.data {
        let corpus = Corpus::load(dir)?;
        return Ok((corpus.speech, corpus.text));
    }
    let speech = required(t.speech.as_ref(), "speech (or --data)")?;
    let text = required(t.text.as_ref(), "text (or --data)")?;
    Ok((
        load_table(speech, t.speech_freq.as_deref())?,
        load_table(text, t.text_freq.as_deref())?,
    ))
}

fn align(args: &Align) -> Outcome {
    let out = required(args.out.as_ref(), "out")?;
    let mut config: AlignmentConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    config.validate()?;
    let (speech, text) = load_tables(&args.tables)?;
    let outcome = adversarial_train(&speech, &text, &config)?;
    outcome.map.save(out)?;
    print_json(&serde_json::json!({
        "steps": config.steps,
        "orthogonality_defect": outcome.map.orthogonality_defect(),
        "checkpoints": outcome.checkpoints,
    }))
}

fn refine(args: &Refine) -> Outcome {
    let out = required(args.out.as_ref(), "out")?;
    let (speech, text) = load_tables(&args.tables)?;
    if speech.dim() != text.dim() {
        log::warn!(
            "speech dim {} differs from text dim {}; refinement skipped",
            speech.dim(),
            text.dim()
        );
        let map = match &args.map {
            Some(p) => LinearMap::load(p)?,
            None => LinearMap::identity(text.dim(), speech.dim()),
        };
        map.save(out)?;
        return print_json(&serde_json::json!({ "refined": false }));
    }
    let (map, dict) = refine_from_frequent(&speech, &text, args.dictionary_size)?;
    map.save(out)?;
    print_json(&serde_json::json!({
        "refined": true,
        "pairs": dict.dictionary.len(),
        "shortfall": dict.shortfall,
        "orthogonality_defect": map.orthogonality_defect(),
    }))
}

fn train(args: &Train) -> Outcome {
    if let Some(ckpt) = &args.resume {
        let state = TrainState::load(ckpt)?;
        let data = args.data.clone().or_else(|| state.pipeline.config.data_dir.clone());
        let data = required(data.as_ref(), "data")?;
        let out = args.out.clone().or_else(|| state.pipeline.config.out_dir.clone());
        let out = required(out.as_ref(), "out")?;
        let corpus = Corpus::load(data)?;
        let mut trainer = Trainer::resume(state, &corpus, None)?;
        if let Some(e) = args.epochs {
            trainer.set_epochs(e);
        }
        trainer.train(Some(out))?;
        return report_best(trainer.state());
    }
    let mut config: RunConfig = load_config(args.config.as_deref())?;
    if let Some(v) = &args.data {
        config.data_dir = Some(v.clone());
    }
    if let Some(v) = &args.out {
        config.out_dir = Some(v.clone());
    }
    if let Some(v) = &args.map {
        config.map_path = Some(v.clone());
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.seq_len {
        config.sequence_length = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.fusion {
        config.model.fusion = v;
    }
    if let Some(v) = args.clip_scope {
        config.clip_scope = v;
    }
    if args.train_cnn {
        config.train_cnn = true;
    }
    let data = required(config.data_dir.as_ref(), "data")?.to_path_buf();
    let out = required(config.out_dir.as_ref(), "out")?.to_path_buf();
    config.validate()?;
    let corpus = Corpus::load(&data)?;
    let map = match &config.map_path {
        Some(p) => LinearMap::load(p)?,
        None => fallback_map(&corpus.speech, &corpus.text)?,
    };
    let mut trainer = Trainer::new(config, &corpus, map, None)?;
    trainer.train(Some(&out))?;
    report_best(trainer.state())
}

fn report_best(state: &TrainState) -> Outcome {
    print_json(&serde_json::json!({
        "epochs": state.epoch,
        "best_selection_score": state.best_score,
        "last": state.history.last(),
    }))
}

fn eval(args: &Eval) -> Outcome {
    let data = required(args.data.as_ref(), "data")?;
    let ckpt = required(args.checkpoint.as_ref(), "checkpoint")?;
    let pipeline = Pipeline::load(ckpt)?;
    let corpus = Corpus::load(data)?;
    let score = evaluate(&pipeline, &corpus, args.split)?;
    eprintln!(
        "{} arousal {:.4} valence {:.4} liking {:.4} mean {:.4}{}",
        args.split,
        score.arousal,
        score.valence,
        score.liking,
        score.mean,
        if score.degenerate.is_empty() {
            String::new()
        } else {
            format!(" (degenerate: {})", score.degenerate.join(", "))
        }
    );
    print_json(&serde_json::json!({ "split": args.split.to_string(), "score": score }))
}

fn grad_check(args: &GradCheck) -> Outcome {
    if args.cases == 0 {
        return Err(Failure::Usage("--cases must be positive".into()));
    }
    let reports = gradsuite::run_suite(args.cases, args.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{} {:<18} cases {:>3} max rel err {:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_rel_err,
            r.tolerance
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Align(a) => align(a),
        Command::Refine(a) => refine(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n");
            let mut cmd = <Cli as clap::CommandFactory>::command();
            let _ = cmd.write_help(&mut std::io::stderr());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("{m}");
            ExitCode::from(2)
        }
    }
}
