mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use caetf::cae::{finetune, pretrain, Cae, CaeConfig, FinetuneConfig, FreezePlan, PretrainConfig};
use caetf::checkpoint::{self, merge_prefixed, restore, split_prefix};
use caetf::data::{
    encode_sequence, load_case, preprocess_slice, write_synthetic, DatasetDir, SequenceFeatureMap, SynthConfig, MAX_SLICES,
};
use caetf::evaluation::{predict_labels, render_table, Aggregation};
use caetf::pipeline::{cross_validate, prepare_case, CvConfig, PreparedCase};
use caetf::rng::{derive_seed, stream};
use caetf::training::{history_jsonl, train_classifier, Example, TrainConfig};
use caetf::transformer::{Classifier, ModelKind, Pooling, TransformerConfig};
use caetf::{io, Tensor};

use manifest::{checksums, manifest_path, RunManifest};

#[derive(Parser)]
#[command(name = "caetf", version, about = "CT nodule classification with a convolutional auto-encoder and a transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train the auto-encoder on every slice of a dataset.
    PretrainCae(PretrainArgs),
    /// Continue auto-encoder training on nodule slices with the middle layers trainable.
    FinetuneCae(FinetuneArgs),
    /// Dump the padded feature sequence of every case.
    Encode(EncodeArgs),
    /// Train one classifier on a whole dataset.
    Train(TrainArgs),
    /// Cross-validate one or more classifiers.
    Eval(EvalArgs),
    /// Class probabilities for a single case directory.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synth-data")]
    out: PathBuf,
    #[arg(long, default_value_t = 114)]
    cases: usize,
    /// benign:malignant case counts.
    #[arg(long, default_value = "58:56", value_parser = parse_balance)]
    balance: (usize, usize),
    /// Side length of generated slices.
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cae.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Train on at most this many slices, drawn at random.
    #[arg(long)]
    max_slices: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Auto-encoder checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "cae-finetuned.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long)]
    max_slices: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Auto-encoder or trained-classifier checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "sequences.json")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct ClassifierArgs {
    /// Transformer pooling: gmp, gap or concat.
    #[arg(long, default_value = "gmp")]
    pool: Pooling,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Label smoothing factor.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// cae-transformer, gmp-fc, gap-fc or concat.
    #[arg(long, default_value = "cae-transformer")]
    model: ModelKind,
    /// Auto-encoder checkpoint used to encode slices.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[command(flatten)]
    clf: ClassifierArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated list of cae-transformer, gmp-fc, gap-fc, concat.
    #[arg(long, default_value = "cae-transformer", value_delimiter = ',')]
    model: Vec<ModelKind>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Auto-encoder checkpoint; a freshly initialized one is used if absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Fine-tuning epochs per fold.
    #[arg(long, default_value_t = 50)]
    finetune_epochs: usize,
    /// Fine-tune each fold on at most this many slices.
    #[arg(long)]
    max_slices: Option<usize>,
    /// Aggregate over the pooled test predictions instead of averaging folds.
    #[arg(long)]
    pooled: bool,
    #[command(flatten)]
    clf: ClassifierArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PredictArgs {
    /// A single case directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value = "prediction.json")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_balance(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected benign:malignant, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// What a finished command reports back for its manifest.
struct Run {
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Refuses outputs that would land inside an input directory.
fn ensure_outside(out: &Path, input: &Path) -> Result<()> {
    let Ok(input) = input.canonicalize() else {
        return Ok(());
    };
    let mut existing = out.to_path_buf();
    let mut rest = Vec::new();
    while !existing.as_os_str().is_empty() && !existing.exists() {
        rest.push(existing.file_name().map(|n| n.to_os_string()).unwrap_or_default());
        if !existing.pop() {
            break;
        }
    }
    let base = if existing.as_os_str().is_empty() { PathBuf::from(".") } else { existing };
    let mut resolved = base.canonicalize().with_context(|| format!("resolving {}", base.display()))?;
    resolved.extend(rest.iter().rev());
    if resolved.starts_with(&input) {
        bail!("output {} lies inside input {}", out.display(), input.display());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn print_config(enabled: bool, config: &Value) -> Result<bool> {
    if enabled {
        println!("{}", serde_json::to_string_pretty(config)?);
    }
    Ok(enabled)
}

fn open_dataset(data: &Path) -> Result<DatasetDir> {
    DatasetDir::open(data).with_context(|| format!("opening dataset {}", data.display()))
}

fn prepared_cases(dir: &DatasetDir) -> Result<Vec<PreparedCase>> {
    (0..dir.len())
        .map(|i| {
            let case = dir.load(i)?;
            Ok(prepare_case(&case)?)
        })
        .collect()
}

fn sample_slices(mut slices: Vec<Tensor>, cap: Option<usize>, seed: u64, label: &str) -> Vec<Tensor> {
    if let Some(cap) = cap {
        slices.shuffle(&mut stream(seed, label));
        slices.truncate(cap.max(1));
    }
    slices
}

#[derive(Serialize, Deserialize)]
struct CaeMeta {
    kind: String,
    cae: CaeConfig,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    model: ModelKind,
    cae: CaeConfig,
    transformer: TransformerConfig,
    train: TrainConfig,
}

fn save_cae(path: &Path, cae: &Cae, extra: Value) -> Result<()> {
    let mut meta = serde_json::to_value(CaeMeta {
        kind: "cae".into(),
        cae: cae.config.clone(),
    })?;
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    checkpoint::save(path, &cae.params, &meta)?;
    Ok(())
}

/// Loads an auto-encoder from either an auto-encoder checkpoint or the
/// `cae.` half of a classifier checkpoint.
fn load_cae(path: &Path) -> Result<Cae> {
    let ck = checkpoint::load::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let kind = ck.meta.get("kind").and_then(Value::as_str).unwrap_or_default();
    let config: CaeConfig = serde_json::from_value(ck.meta.get("cae").cloned().unwrap_or_default())
        .with_context(|| format!("{}: missing auto-encoder config", path.display()))?;
    let stored = match kind {
        "cae" => ck.params,
        "classifier" => split_prefix(&ck.params, "cae.")?,
        other => bail!("{}: unknown checkpoint kind {other:?}", path.display()),
    };
    let mut cae = Cae::build(config, 0)?;
    restore(&mut cae.params, &stored)?;
    Ok(cae)
}

fn synth(args: SynthArgs) -> Result<Option<Run>> {
    let cfg = SynthConfig {
        size: args.size,
        ..SynthConfig::with_cases(args.cases, args.balance)
    };
    let config = json!({"synth": cfg, "seed": args.common.seed, "out": args.out});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    cfg.validate()?;
    let ids = write_synthetic(&cfg, args.common.seed, &args.out)?;
    info!("wrote {} cases to {}", ids.len(), args.out.display());
    Ok(Some(Run {
        config,
        inputs: vec![],
        outputs: vec![args.out],
    }))
}

fn pretrain_cae(args: PretrainArgs) -> Result<Option<Run>> {
    let cfg = PretrainConfig {
        batch_size: args.batch,
        lr: args.lr,
        epochs: args.epochs,
        ..PretrainConfig::default()
    };
    let cae_cfg = CaeConfig::default();
    let config = json!({"pretrain": cfg, "cae": cae_cfg, "max_slices": args.max_slices, "seed": args.common.seed});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    let dir = open_dataset(&args.data)?;
    let mut corpus = Vec::new();
    for i in 0..dir.len() {
        let case = dir.load(i)?;
        for s in 0..case.meta.num_slices {
            corpus.push(preprocess_slice(&case.slice(s)?, case.slice_mask(s))?);
        }
    }
    let seed = args.common.seed;
    let corpus = sample_slices(corpus, args.max_slices, seed, "cli.pretrain.sample");
    info!("pretraining on {} slices", corpus.len());
    let cae = Cae::build(cae_cfg, derive_seed(seed, "cli.cae"))?;
    let outcome = pretrain(cae, &corpus, &cfg, seed)?;
    let history = sibling(&args.out, "history.jsonl");
    save_cae(
        &args.out,
        &outcome.cae,
        json!({"best_epoch": outcome.best_epoch, "best_holdout_mse": outcome.best_holdout_mse}),
    )?;
    io::write_atomic(&history, history_jsonl(&outcome.history)?.as_bytes())?;
    Ok(Some(Run {
        config,
        inputs: vec![args.data],
        outputs: vec![args.out, history],
    }))
}

fn finetune_cae(args: FinetuneArgs) -> Result<Option<Run>> {
    let cfg = FinetuneConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
    };
    let config = json!({"finetune": cfg, "max_slices": args.max_slices, "seed": args.common.seed});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    let cae = load_cae(&args.checkpoint)?;
    let cases = prepared_cases(&open_dataset(&args.data)?)?;
    let slices: Vec<Tensor> = cases.into_iter().flat_map(|c| c.images).collect();
    let seed = args.common.seed;
    let slices = sample_slices(slices, args.max_slices, seed, "cli.finetune.sample");
    let plan = FreezePlan::middle(&cae.config);
    let (cae, history) = finetune(cae, &slices, &cfg, &plan, seed)?;
    let history_path = sibling(&args.out, "history.jsonl");
    save_cae(&args.out, &cae, json!({}))?;
    io::write_atomic(&history_path, history_jsonl(&history)?.as_bytes())?;
    Ok(Some(Run {
        config,
        inputs: vec![args.data, args.checkpoint],
        outputs: vec![args.out, history_path],
    }))
}

#[derive(Serialize)]
struct EncodedCase<'a> {
    case_id: &'a str,
    label: u8,
    valid_len: usize,
    /// `[slots, dim]` row-major, zero past `valid_len`.
    shape: [usize; 2],
    features: &'a [f32],
}

fn encode(args: EncodeArgs) -> Result<Option<Run>> {
    let config = json!({"slots": MAX_SLICES, "checkpoint": args.checkpoint});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    let cae = load_cae(&args.checkpoint)?;
    let cases = prepared_cases(&open_dataset(&args.data)?)?;
    let seqs = cases
        .iter()
        .map(|c| encode_sequence(&c.images, &cae, MAX_SLICES))
        .collect::<caetf::Result<Vec<_>>>()?;
    let encoded: Vec<EncodedCase> = cases
        .iter()
        .zip(&seqs)
        .map(|(c, s)| EncodedCase {
            case_id: &c.case_id,
            label: c.label,
            valid_len: s.valid_len,
            shape: [s.slots(), s.dim()],
            features: s.features.data(),
        })
        .collect();
    write_json(&args.out, &encoded)?;
    Ok(Some(Run {
        config,
        inputs: vec![args.data, args.checkpoint],
        outputs: vec![args.out],
    }))
}

fn transformer_config(clf: &ClassifierArgs) -> TransformerConfig {
    TransformerConfig {
        pooling: clf.pool,
        ..TransformerConfig::default()
    }
}

fn train_config(clf: &ClassifierArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: clf.lr,
        batch_size: clf.batch,
        epochs: clf.epochs,
        label_smoothing_alpha: clf.alpha,
        seed,
        ..TrainConfig::default()
    }
}

fn train(args: TrainArgs) -> Result<Option<Run>> {
    let seed = args.common.seed;
    let tcfg = transformer_config(&args.clf);
    let train_cfg = train_config(&args.clf, derive_seed(seed, "cli.train"));
    let config = json!({"model": args.model, "transformer": tcfg, "train": train_cfg, "seed": seed});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    train_cfg.validate()?;
    let cae = load_cae(&args.checkpoint)?;
    let cases = prepared_cases(&open_dataset(&args.data)?)?;
    let seqs = cases
        .iter()
        .map(|c| encode_sequence(&c.images, &cae, MAX_SLICES))
        .collect::<caetf::Result<Vec<SequenceFeatureMap>>>()?;
    let examples: Vec<Example> = cases
        .iter()
        .zip(&seqs)
        .map(|(c, s)| Example {
            sequence: s,
            label: c.label,
        })
        .collect();
    let model = Classifier::build(args.model, &tcfg, derive_seed(seed, "cli.model"))?;
    let outcome = train_classifier(model, &examples, &train_cfg)?;
    let meta = serde_json::to_value(ClassifierMeta {
        kind: "classifier".into(),
        model: args.model,
        cae: cae.config.clone(),
        transformer: tcfg,
        train: train_cfg,
    })?;
    let merged = merge_prefixed(&[("cae.", &cae.params), ("clf.", outcome.model.params())])?;
    checkpoint::save(&args.out, &merged, &meta)?;
    let history = sibling(&args.out, "history.jsonl");
    io::write_atomic(&history, history_jsonl(&outcome.history)?.as_bytes())?;
    Ok(Some(Run {
        config,
        inputs: vec![args.data, args.checkpoint],
        outputs: vec![args.out, history],
    }))
}

fn eval(args: EvalArgs) -> Result<Option<Run>> {
    let seed = args.common.seed;
    let cfg = CvConfig {
        folds: args.folds,
        finetune: FinetuneConfig {
            epochs: args.finetune_epochs,
            ..FinetuneConfig::default()
        },
        finetune_max_slices: args.max_slices,
        transformer: transformer_config(&args.clf),
        train: train_config(&args.clf, 0),
        threshold: args.threshold,
        aggregation: if args.pooled { Aggregation::Pooled } else { Aggregation::Mean },
    };
    let config = json!({"models": args.model, "cv": cfg, "checkpoint": args.checkpoint, "seed": seed});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    if args.model.is_empty() {
        bail!("no model selected");
    }
    cfg.train.validate()?;
    let dir = open_dataset(&args.data)?;
    let cae = match &args.checkpoint {
        Some(path) => load_cae(path)?,
        None => {
            warn!("no auto-encoder checkpoint given; encoding with untrained weights");
            Cae::build(CaeConfig::default(), derive_seed(seed, "cli.cae"))?
        }
    };
    let cases = prepared_cases(&dir)?;
    let mut outcome = cross_validate(&cases, &cae, &args.model, &cfg, seed)?;
    if args.clf.pool != Pooling::Gmp {
        let pool = serde_json::to_value(args.clf.pool)?;
        for r in outcome.reports.iter_mut().filter(|r| r.model == ModelKind::CaeTransformer.name()) {
            r.model = format!("{} ({})", r.model, pool.as_str().unwrap_or_default());
        }
    }
    print!("{}", render_table(&outcome.reports));
    write_json(&args.out, &outcome.reports)?;
    let history = sibling(&args.out, "history.jsonl");
    let mut lines = String::new();
    for h in &outcome.histories {
        lines.push_str(&serde_json::to_string(h)?);
        lines.push('\n');
    }
    io::write_atomic(&history, lines.as_bytes())?;
    let mut inputs = vec![args.data];
    inputs.extend(args.checkpoint);
    Ok(Some(Run {
        config,
        inputs,
        outputs: vec![args.out, history],
    }))
}

#[derive(Serialize)]
struct Prediction {
    case_id: String,
    model: ModelKind,
    /// `[benign, malignant]`.
    probabilities: [f64; 2],
    threshold: f64,
    predicted_label: u8,
}

fn predict(args: PredictArgs) -> Result<Option<Run>> {
    let config = json!({"threshold": args.threshold, "checkpoint": args.checkpoint});
    if print_config(args.common.print_config, &config)? {
        return Ok(None);
    }
    ensure_outside(&args.out, &args.data)?;
    let ck = checkpoint::load::<f32>(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let meta: ClassifierMeta = serde_json::from_value(ck.meta.clone())
        .with_context(|| format!("{} is not a classifier checkpoint", args.checkpoint.display()))?;
    let cae = load_cae(&args.checkpoint)?;
    let mut model = Classifier::build(meta.model, &meta.transformer, 0)?;
    restore(model.params_mut(), &split_prefix(&ck.params, "clf.")?)?;

    let case = prepare_case(&load_case(&args.data)?)?;
    let seq = encode_sequence(&case.images, &cae, MAX_SLICES)?;
    let p = model.predict_proba(&[&seq])?;
    let probabilities = [p.data()[0] as f64, p.data()[1] as f64];
    let prediction = Prediction {
        case_id: case.case_id,
        model: meta.model,
        probabilities,
        threshold: args.threshold,
        predicted_label: predict_labels(&probabilities[1..], args.threshold)[0],
    };
    println!("{}", serde_json::to_string(&prediction)?);
    write_json(&args.out, &prediction)?;
    Ok(Some(Run {
        config,
        inputs: vec![args.data, args.checkpoint],
        outputs: vec![args.out],
    }))
}

fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (name, seed) = match &cli.command {
        Command::Synth(a) => ("synth", a.common.seed),
        Command::PretrainCae(a) => ("pretrain-cae", a.common.seed),
        Command::FinetuneCae(a) => ("finetune-cae", a.common.seed),
        Command::Encode(a) => ("encode", a.common.seed),
        Command::Train(a) => ("train", a.common.seed),
        Command::Eval(a) => ("eval", a.common.seed),
        Command::Predict(a) => ("predict", a.common.seed),
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let run = match cli.command {
        Command::Synth(a) => synth(a),
        Command::PretrainCae(a) => pretrain_cae(a),
        Command::FinetuneCae(a) => finetune_cae(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
    }?;
    let Some(run) = run else {
        return Ok(());
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config: json!({"argv": argv, "effective": run.config}),
        seed: Some(seed),
        checksums: checksums(&run.outputs)?,
        inputs: run.inputs,
        duration_secs: start.elapsed().as_secs_f64(),
        outputs: run.outputs,
    };
    write_json(&manifest_path(&manifest.outputs[0]), &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // sources often repeat the message that wraps them
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
