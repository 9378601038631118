//! Command-line harness: config resolution, artifact emission, and the
//! subcommands train-base, gen-data, tune, decode, verify-lossless, bench
//! and pipeline.
//!
//! Exit codes: 0 success, 1 verification or assertion failure, 2 config
//! error. Every artifact embeds the resolved config; wall-clock timing is
//! printed to stdout only, never written to metrics files, so reruns with
//! equal seeds produce byte-identical outputs.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{decode_ar, decode_streamlined_with_picker, DecodeMode, DecodeStats};
use crate::grammar;
use crate::model::{
    corpus_loss, pick_greedy, pick_greedy_inverted, train_base_lm, ModelConfig, ModelWeights, Picker,
    SoftParams, TrainConfig,
};
use crate::plan::Token;
use crate::store::{
    checkpoint_to_soft, checkpoint_to_weights, load, save, soft_to_checkpoint, weights_to_checkpoint,
};
use crate::tune::{self_generate, slice_dataset, tune_on_samples, PromptingMode, TuneConfig};

const TIMING_BANNER: &str =
    "note: desk-scale wall-clock is not bandwidth-bound; timings are informational only \
     and excluded from metrics files";

#[derive(Debug)]
pub enum HarnessError {
    /// Bad flags, unreadable config, missing inputs. Exit code 2.
    Config(String),
    /// A lossless/consistency check failed. Exit code 1.
    Verification(String),
    /// A pipeline stage failed. Exit code 1.
    Stage { stage: &'static str, message: String },
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Verification(m) => write!(f, "verification failure: {m}"),
            HarnessError::Stage { stage, message } => write!(f, "stage {stage}: {message}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage { stage: name, message: e.to_string() }
}

/// Every knob of every subcommand, resolved from defaults, then an optional
/// JSON config file, then command-line flags (flags win).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    // Model dimensions for the grammar pipeline.
    pub vocab: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    // Base-model training.
    pub train_seed: u64,
    pub train_lr: f64,
    pub train_steps: usize,
    pub train_threshold: f64,
    pub held_out_threshold: f64,
    // Data generation.
    pub data_seed: u64,
    pub corpus_size: usize,
    pub corpus: String,
    pub questions: String,
    // Tuning.
    pub tune_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub tune_seed: u64,
    pub p: usize,
    pub m: usize,
    pub prompting_mode: PromptingMode,
    pub slices_per_pair: usize,
    pub self_gen_max_new: usize,
    // Decoding / benchmarking.
    pub n: usize,
    pub k: usize,
    pub max_new: usize,
    pub eos: Token,
    pub bench_ks: Vec<usize>,
    // Lossless verification.
    pub trials: usize,
    pub verify_seed: u64,
    pub verify_vocab: usize,
    pub verify_dim: usize,
    pub verify_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab: grammar::VOCAB,
            dim: 32,
            n_layers: 2,
            n_heads: 4,
            hidden: 128,
            train_seed: 1,
            train_lr: 1e-2,
            train_steps: 1500,
            train_threshold: 0.16,
            held_out_threshold: 0.2,
            data_seed: 7,
            corpus_size: 64,
            corpus: "data/corpus.jsonl".into(),
            questions: "data/questions.jsonl".into(),
            tune_epochs: 6000,
            batch_size: 8,
            lr0: 0.3,
            tune_seed: 5,
            p: 16,
            m: 3,
            prompting_mode: PromptingMode::Deep,
            slices_per_pair: 8,
            self_gen_max_new: 16,
            n: 3,
            k: 5,
            max_new: 16,
            eos: grammar::EOS,
            bench_ks: vec![2, 5],
            trials: 200,
            verify_seed: 11,
            verify_vocab: 32,
            verify_dim: 32,
            verify_layers: 2,
        }
    }
}

impl RunConfig {
    fn model_cfg(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            hidden: self.hidden,
        }
    }

    fn tune_cfg(&self) -> TuneConfig {
        TuneConfig {
            epochs: self.tune_epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            seed: self.tune_seed,
            prompting_mode: self.prompting_mode,
            p: self.p,
            m: self.m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sartree", about = "Draft-and-verify decoding engine for a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $SARTREE_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the frozen base model on a JSONL corpus.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Sample the synthetic grammar into corpus and question files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Tune soft parameters on self-generated data.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        questions: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Decode a prompt with the base model and tuned soft parameters.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        soft: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// ar | straightforward | efficient | full
        #[arg(long, default_value = "efficient")]
        mode: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Randomized equality trials of streamlined vs plain AR decoding.
    VerifyLossless {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Test-only: break the streamlined tie-break to prove the check bites.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// Per-mode decode statistics over the evaluation prompts.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        soft: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// train-base, tune and bench chained over one output directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::TrainBase { common, corpus, seed, steps, lr, threshold } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.corpus, corpus);
            override_opt(&mut cfg.train_seed, seed);
            override_opt(&mut cfg.train_steps, steps);
            override_opt(&mut cfg.train_lr, lr);
            override_opt(&mut cfg.train_threshold, threshold);
            cmd_train_base(&cfg, &out).map(|_| ())
        }
        Command::GenData { common, seed, count } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.data_seed, seed);
            override_opt(&mut cfg.corpus_size, count);
            cmd_gen_data(&cfg, &out)
        }
        Command::Tune { common, weights, questions, epochs, batch_size, lr0, seed, p, m, mode } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.questions, questions);
            override_opt(&mut cfg.tune_epochs, epochs);
            override_opt(&mut cfg.batch_size, batch_size);
            override_opt(&mut cfg.lr0, lr0);
            override_opt(&mut cfg.tune_seed, seed);
            override_opt(&mut cfg.p, p);
            override_opt(&mut cfg.m, m);
            if let Some(mode) = mode {
                cfg.prompting_mode = parse_prompting_mode(&mode)?;
            }
            let weights = weights.unwrap_or_else(|| out.join("weights.json"));
            cmd_tune(&cfg, &out, &weights).map(|_| ())
        }
        Command::Decode { common, weights, soft, prompt, mode, n, k, max_new } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.n, n);
            override_opt(&mut cfg.k, k);
            override_opt(&mut cfg.max_new, max_new);
            let weights = weights.unwrap_or_else(|| out.join("weights.json"));
            let soft = soft.unwrap_or_else(|| out.join("soft.json"));
            cmd_decode(&cfg, &weights, &soft, &prompt, &mode)
        }
        Command::VerifyLossless { common, trials, seed, inject_fault } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.trials, trials);
            override_opt(&mut cfg.verify_seed, seed);
            cmd_verify_lossless(&cfg, &out, inject_fault)
        }
        Command::Bench { common, weights, soft, prompts, n, ks, max_new } => {
            let (mut cfg, out) = resolve(&common)?;
            override_opt(&mut cfg.questions, prompts);
            override_opt(&mut cfg.n, n);
            override_opt(&mut cfg.bench_ks, ks);
            override_opt(&mut cfg.max_new, max_new);
            let weights = weights.unwrap_or_else(|| out.join("weights.json"));
            let soft = soft.unwrap_or_else(|| out.join("soft.json"));
            cmd_bench(&cfg, &out, &weights, &soft).map(|_| ())
        }
        Command::Pipeline { common } => {
            let (cfg, out) = resolve(&common)?;
            cmd_pipeline(&cfg, &out)
        }
    }
}

fn override_opt<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_prompting_mode(s: &str) -> Result<PromptingMode, HarnessError> {
    match s {
        "mask_only" => Ok(PromptingMode::MaskOnly),
        "shallow" => Ok(PromptingMode::Shallow),
        "deep" => Ok(PromptingMode::Deep),
        _ => Err(HarnessError::Config(format!("unknown prompting mode {s:?}"))),
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), HarnessError> {
    let cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("bad config {}: {e}", path.display())))?
        }
    };
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("SARTREE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| HarnessError::Config(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Config(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, json + "\n")
        .map_err(|e| HarnessError::Config(format!("write {}: {e}", path.display())))?;
    Ok(())
}

fn read_jsonl_field(path: &Path, field: &str) -> Result<Vec<String>, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let s = v
            .get(field)
            .and_then(|f| f.as_str())
            .ok_or_else(|| HarnessError::Config(format!("{}:{}: missing field {field:?}", path.display(), i + 1)))?;
        out.push(s.to_string());
    }
    Ok(out)
}

// --- subcommands -----------------------------------------------------------

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    let pairs = grammar::sample_pairs(cfg.corpus_size, cfg.data_seed);
    let mut corpus = String::new();
    for (q, a) in &pairs {
        corpus.push_str(&serde_json::json!({ "text": format!("{q}{a}") }).to_string());
        corpus.push('\n');
    }
    let corpus_path = PathBuf::from(&cfg.corpus);
    if let Some(dir) = corpus_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(stage("gen-data"))?;
    }
    fs::write(&corpus_path, corpus).map_err(stage("gen-data"))?;

    let mut questions = String::new();
    for (q, _) in grammar::PAIRS {
        questions.push_str(&serde_json::json!({ "question": q }).to_string());
        questions.push('\n');
    }
    fs::write(&cfg.questions, questions).map_err(stage("gen-data"))?;
    write_json(&out.join("config.gen-data.json"), cfg)?;
    println!(
        "wrote {} sequences to {} and {} questions to {}",
        cfg.corpus_size,
        cfg.corpus,
        grammar::PAIRS.len(),
        cfg.questions
    );
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Vec<Token>>, HarnessError> {
    let texts = read_jsonl_field(Path::new(&cfg.corpus), "text")?;
    Ok(texts
        .iter()
        .map(|t| {
            let mut s = grammar::tokenize(t);
            s.push(cfg.eos);
            s
        })
        .collect())
}

pub fn cmd_train_base(cfg: &RunConfig, out: &Path) -> Result<ModelWeights, HarnessError> {
    let seqs = load_corpus(cfg)?;
    // Weighted duplicates carry no training signal at full batch; train on
    // the unique sequences and hold out every fourth raw line.
    let unique: Vec<Vec<Token>> = {
        let mut seen = BTreeSet::new();
        seqs.iter().filter(|s| seen.insert((*s).clone())).cloned().collect()
    };
    let held_out: Vec<Vec<Token>> = seqs.iter().skip(3).step_by(4).cloned().collect();
    let mut w = ModelWeights::random(cfg.model_cfg(), cfg.train_seed);
    let tc = TrainConfig {
        lr: cfg.train_lr,
        max_steps: cfg.train_steps,
        loss_threshold: cfg.train_threshold,
        log_every: 100,
    };
    let history = train_base_lm(&mut w, &unique, &tc, |step, loss| {
        println!("train-base step {step}: loss {loss:.4}");
    })
    .map_err(stage("train-base"))?;
    let held = corpus_loss(&w, if held_out.is_empty() { &unique } else { &held_out })
        .map_err(stage("train-base"))?;
    println!(
        "train-base: {} steps, final loss {:.4}, held-out {:.4} nats/token",
        history.len(),
        history.last().unwrap(),
        held
    );
    if held > cfg.held_out_threshold {
        return Err(HarnessError::Verification(format!(
            "held-out entropy {held:.4} exceeds threshold {}",
            cfg.held_out_threshold
        )));
    }
    save(&weights_to_checkpoint(&w, Some(cfg.train_seed)), &out.join("weights.json"))
        .map_err(stage("train-base"))?;
    write_json(&out.join("config.train-base.json"), cfg)?;
    Ok(w)
}

fn load_weights(path: &Path) -> Result<ModelWeights, HarnessError> {
    checkpoint_to_weights(&load(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn load_soft(path: &Path, cfg: &ModelConfig) -> Result<SoftParams, HarnessError> {
    checkpoint_to_soft(
        &load(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?,
        cfg,
    )
    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_tune(cfg: &RunConfig, out: &Path, weights_path: &Path) -> Result<SoftParams, HarnessError> {
    let w = load_weights(weights_path)?;
    let theta_before = weights_to_checkpoint(&w, None).checksum;
    let questions: Vec<Vec<Token>> = read_jsonl_field(Path::new(&cfg.questions), "question")?
        .iter()
        .map(|q| grammar::tokenize(q))
        .collect();
    if questions.is_empty() {
        return Err(HarnessError::Config(format!("no questions in {}", cfg.questions)));
    }
    let (pairs, dropped) =
        self_generate(&w, &questions, cfg.self_gen_max_new, cfg.eos, cfg.m).map_err(stage("tune"))?;
    println!("tune: {} self-generated pairs ({dropped} dropped as too short)", pairs.len());
    let samples = slice_dataset(&pairs, cfg.m, cfg.slices_per_pair, cfg.tune_seed.wrapping_add(100))
        .map_err(stage("tune"))?;
    let mut dataset = String::new();
    for s in &samples {
        dataset.push_str(&serde_json::to_string(s).map_err(stage("tune"))?);
        dataset.push('\n');
    }
    fs::write(out.join("dataset.jsonl"), dataset).map_err(stage("tune"))?;

    let mut csv = String::from("step,lr,loss\n");
    let (soft, history) = tune_on_samples(&w, &samples, &cfg.tune_cfg(), |step, lr, loss| {
        csv.push_str(&format!("{step},{lr},{loss}\n"));
    })
    .map_err(stage("tune"))?;
    fs::write(out.join("tune_log.csv"), csv).map_err(stage("tune"))?;
    println!(
        "tune: {} steps, loss {:.4} -> {:.4}",
        history.len(),
        history.first().unwrap(),
        history.last().unwrap()
    );
    let theta_after = weights_to_checkpoint(&w, None).checksum;
    assert_eq!(theta_before, theta_after, "frozen weights changed during tuning");
    save(&soft_to_checkpoint(&soft, Some(cfg.tune_seed)), &out.join("soft.json")).map_err(stage("tune"))?;
    write_json(&out.join("config.tune.json"), cfg)?;
    Ok(soft)
}

pub fn cmd_decode(
    cfg: &RunConfig,
    weights_path: &Path,
    soft_path: &Path,
    prompt: &str,
    mode: &str,
) -> Result<(), HarnessError> {
    let w = load_weights(weights_path)?;
    let query = grammar::tokenize(prompt);
    if query.is_empty() {
        return Err(HarnessError::Config("empty prompt".into()));
    }
    let (tokens, stats) = if mode == "ar" {
        decode_ar(&w, &query, cfg.max_new, cfg.eos).map_err(stage("decode"))?
    } else {
        let soft = load_soft(soft_path, &w.cfg)?;
        let dmode = parse_mode(mode)?;
        let n = if dmode == DecodeMode::Straightforward { soft.n_masks() } else { cfg.n };
        decode_streamlined_with_picker(&w, &soft, &query, cfg.max_new, cfg.eos, dmode, n, cfg.k, pick_greedy)
            .map_err(stage("decode"))?
    };
    println!("output: {:?}", grammar::detokenize(&tokens));
    println!(
        "passes: {}, tokens (raw): {}, pass_reduction: {:.3}, histogram: {:?}",
        stats.forward_passes,
        stats.tokens_emitted,
        stats.pass_reduction(),
        stats.histogram
    );
    Ok(())
}

fn parse_mode(s: &str) -> Result<DecodeMode, HarnessError> {
    match s {
        "straightforward" => Ok(DecodeMode::Straightforward),
        "efficient" => Ok(DecodeMode::Efficient),
        "full" => Ok(DecodeMode::Full),
        _ => Err(HarnessError::Config(format!("unknown mode {s:?}"))),
    }
}

#[derive(Debug, Serialize)]
struct TrialReport {
    trial: usize,
    weights_seed: u64,
    soft_seed: u64,
    query: Vec<Token>,
    n: usize,
    k: usize,
    m: usize,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    counterexample: Option<Counterexample>,
}

#[derive(Debug, Serialize)]
struct Counterexample {
    mode: String,
    first_divergent_index: usize,
    ar: Vec<Token>,
    streamlined: Vec<Token>,
}

pub fn cmd_verify_lossless(cfg: &RunConfig, out: &Path, inject_fault: bool) -> Result<(), HarnessError> {
    if cfg.trials == 0 {
        return Err(HarnessError::Config("trials must be at least 1".into()));
    }
    let mcfg = ModelConfig {
        vocab: cfg.verify_vocab,
        dim: cfg.verify_dim,
        n_layers: cfg.verify_layers,
        n_heads: 2,
        hidden: cfg.verify_dim * 2,
    };
    let picker: Picker = if inject_fault { pick_greedy_inverted } else { pick_greedy };
    let mut reports = Vec::with_capacity(cfg.trials);
    let mut failures = 0usize;
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.verify_seed.wrapping_add(trial as u64));
        let weights_seed: u64 = rng.gen();
        let soft_seed: u64 = rng.gen();
        let mut w = ModelWeights::random(mcfg, weights_seed);
        if inject_fault {
            // A tie-rich model: an all-zero head makes every logit row
            // constant, so the broken tie-break must diverge immediately.
            w.head.data.iter_mut().for_each(|v| *v = 0.0);
            w.head_b.iter_mut().for_each(|v| *v = 0.0);
        }
        let n = rng.gen_range(1..=4usize);
        let m = rng.gen_range(n..=4usize);
        let k = rng.gen_range(1..=3usize);
        let p = rng.gen_range(0..=4usize);
        let mode = if p == 0 { PromptingMode::MaskOnly } else { PromptingMode::Deep };
        let soft = crate::tune::init_soft(&w, p, m, soft_seed, mode);
        let qlen = rng.gen_range(1..=6usize);
        let query: Vec<Token> = (0..qlen).map(|_| rng.gen_range(0..mcfg.vocab as Token)).collect();
        let max_new = rng.gen_range(4..=16usize);
        let eos = (mcfg.vocab - 1) as Token;
        let (ar, _) = decode_ar(&w, &query, max_new, eos).map_err(stage("verify-lossless"))?;
        let mut counterexample = None;
        for (dmode, dn) in [
            (DecodeMode::Straightforward, m),
            (DecodeMode::Efficient, n),
            (DecodeMode::Full, n.min(3)),
        ] {
            let (got, _) =
                decode_streamlined_with_picker(&w, &soft, &query, max_new, eos, dmode, dn, k, picker)
                    .map_err(stage("verify-lossless"))?;
            if got != ar {
                let idx = ar.iter().zip(&got).position(|(a, b)| a != b).unwrap_or(ar.len().min(got.len()));
                counterexample = Some(Counterexample {
                    mode: dmode.name().to_string(),
                    first_divergent_index: idx,
                    ar: ar.clone(),
                    streamlined: got,
                });
                break;
            }
        }
        let pass = counterexample.is_none();
        if !pass {
            failures += 1;
        }
        reports.push(TrialReport {
            trial,
            weights_seed,
            soft_seed,
            query,
            n,
            k,
            m,
            pass,
            counterexample,
        });
    }
    let report = serde_json::json!({
        "config": cfg,
        "inject_fault": inject_fault,
        "passed": cfg.trials - failures,
        "failed": failures,
        "trials": reports,
    });
    write_json(&out.join("verify_report.json"), &report)?;
    println!("verify-lossless: {}/{} trials identical", cfg.trials - failures, cfg.trials);
    if failures > 0 {
        let first = reports.iter().find(|r| !r.pass).unwrap();
        return Err(HarnessError::Verification(format!(
            "{failures} trial(s) diverged; first: trial {} (weights_seed {}, soft_seed {}, mode {}, index {})",
            first.trial,
            first.weights_seed,
            first.soft_seed,
            first.counterexample.as_ref().unwrap().mode,
            first.counterexample.as_ref().unwrap().first_divergent_index
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub k: usize,
    pub forward_passes: usize,
    pub tokens_emitted: usize,
    pub mean_accepted_per_pass: f64,
    pub pass_reduction: f64,
    pub per_prompt: Vec<DecodeStatsOut>,
}

#[derive(Debug, Serialize)]
pub struct DecodeStatsOut {
    pub forward_passes: usize,
    pub tokens_emitted: usize,
    pub histogram: std::collections::BTreeMap<usize, usize>,
}

fn stats_out(s: &DecodeStats) -> DecodeStatsOut {
    DecodeStatsOut {
        forward_passes: s.forward_passes,
        tokens_emitted: s.tokens_emitted,
        histogram: s.histogram.clone(),
    }
}

pub fn cmd_bench(
    cfg: &RunConfig,
    out: &Path,
    weights_path: &Path,
    soft_path: &Path,
) -> Result<Vec<BenchRow>, HarnessError> {
    let w = load_weights(weights_path)?;
    let soft = load_soft(soft_path, &w.cfg)?;
    let prompts: Vec<Vec<Token>> = read_jsonl_field(Path::new(&cfg.questions), "question")?
        .iter()
        .map(|q| grammar::tokenize(q))
        .collect();
    if prompts.is_empty() {
        return Err(HarnessError::Config(format!("no prompts in {}", cfg.questions)));
    }

    // AR reference outputs first; every other mode must match them exactly
    // before its numbers are reported.
    let start = Instant::now();
    let mut ar_stats = Vec::new();
    let mut ar_outputs = Vec::new();
    for q in &prompts {
        let (toks, stats) = decode_ar(&w, q, cfg.max_new, cfg.eos).map_err(stage("bench"))?;
        ar_outputs.push(toks);
        ar_stats.push(stats);
    }
    let ar_elapsed = start.elapsed();

    let mut mode_specs: Vec<(DecodeMode, usize)> = vec![(DecodeMode::Straightforward, 1)];
    for &k in &cfg.bench_ks {
        mode_specs.push((DecodeMode::Efficient, k));
        mode_specs.push((DecodeMode::Full, k));
    }

    let mut rows = vec![aggregate_row("ar", 1, &ar_stats)];
    println!("{TIMING_BANNER}");
    println!("bench ar: {:?}", ar_elapsed);
    for (mode, k) in mode_specs {
        let n = if mode == DecodeMode::Straightforward { soft.n_masks() } else { cfg.n };
        let start = Instant::now();
        let mut stats_list = Vec::new();
        for (q, ar) in prompts.iter().zip(&ar_outputs) {
            let (toks, stats) =
                decode_streamlined_with_picker(&w, &soft, q, cfg.max_new, cfg.eos, mode, n, k, pick_greedy)
                    .map_err(stage("bench"))?;
            if &toks != ar {
                return Err(HarnessError::Verification(format!(
                    "bench: mode {} k={k} diverged from the AR output on prompt {:?}",
                    mode.name(),
                    grammar::detokenize(q)
                )));
            }
            stats_list.push(stats);
        }
        println!("bench {} k={k}: {:?}", mode.name(), start.elapsed());
        rows.push(aggregate_row(mode.name(), k, &stats_list));
    }

    let mut csv = String::from("mode,k,forward_passes,tokens_emitted,mean_accepted_per_pass,pass_reduction\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode, r.k, r.forward_passes, r.tokens_emitted, r.mean_accepted_per_pass, r.pass_reduction
        ));
    }
    fs::write(out.join("bench.csv"), csv).map_err(stage("bench"))?;
    write_json(&out.join("bench.json"), &serde_json::json!({ "config": cfg, "modes": rows }))?;
    for r in &rows {
        println!(
            "bench {} k={}: passes {}, tokens {}, pass_reduction {:.3}",
            r.mode, r.k, r.forward_passes, r.tokens_emitted, r.pass_reduction
        );
    }
    Ok(rows)
}

fn aggregate_row(mode: &str, k: usize, stats: &[DecodeStats]) -> BenchRow {
    let passes: usize = stats.iter().map(|s| s.forward_passes).sum();
    let tokens: usize = stats.iter().map(|s| s.tokens_emitted).sum();
    let accepted: usize = stats
        .iter()
        .flat_map(|s| s.histogram.iter())
        .map(|(&b, &c)| (b - 1) * c)
        .sum();
    BenchRow {
        mode: mode.to_string(),
        k,
        forward_passes: passes,
        tokens_emitted: tokens,
        mean_accepted_per_pass: if passes == 0 { 0.0 } else { accepted as f64 / passes as f64 },
        pass_reduction: if passes == 0 { 0.0 } else { tokens as f64 / passes as f64 },
        per_prompt: stats.iter().map(stats_out).collect(),
    }
}

pub fn cmd_pipeline(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    if !Path::new(&cfg.corpus).exists() {
        return Err(HarnessError::Stage {
            stage: "train-base",
            message: format!("corpus file {} does not exist", cfg.corpus),
        });
    }
    if !Path::new(&cfg.questions).exists() {
        return Err(HarnessError::Stage {
            stage: "tune",
            message: format!("questions file {} does not exist", cfg.questions),
        });
    }
    write_json(&out.join("config.json"), cfg)?;
    cmd_train_base(cfg, out)?;
    cmd_tune(cfg, out, &out.join("weights.json"))?;
    cmd_bench(cfg, out, &out.join("weights.json"), &out.join("soft.json"))?;
    println!("pipeline complete; artifacts in {}", out.display());
    Ok(())
}

// Keep stdout flushed when used as a library from tests.
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
