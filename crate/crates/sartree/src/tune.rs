//! Soft-parameter tuning: self-generated training pairs, sample slicing,
//! the summed mask-slot loss, and a plain gradient-descent loop with a
//! cosine learning-rate schedule. The base weights are never updated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode_ar, DecodeError};
use crate::model::{grad_soft, Mat, ModelError, ModelWeights, PromptKind, SoftParams};
use crate::plan::{build_training_plan, Token};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("continuation length {n} must exceed M + 1 = {}", m + 1)]
    TooShort { n: usize, m: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no usable samples (every pair was dropped)")]
    NoSamples,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

/// One tuning sample: the visible context `X ++ y_0..y_k` and the M label
/// tokens `y_{k+1}..y_{k+M}` that the masks must predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    pub context: Vec<Token>,
    pub labels: Vec<Token>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptingMode {
    MaskOnly,
    Shallow,
    Deep,
}

impl PromptingMode {
    pub fn name(&self) -> &'static str {
        match self {
            PromptingMode::MaskOnly => "mask_only",
            PromptingMode::Shallow => "shallow",
            PromptingMode::Deep => "deep",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub prompting_mode: PromptingMode,
    pub p: usize,
    pub m: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 4,
            batch_size: 8,
            lr0: 3e-2,
            seed: 0,
            prompting_mode: PromptingMode::Deep,
            p: 16,
            m: 3,
        }
    }
}

/// Greedy continuations of the questions under the base model. Pairs whose
/// continuation has M + 1 or fewer tokens cannot be sliced and are dropped;
/// the second return value counts them.
pub fn self_generate(
    w: &ModelWeights,
    questions: &[Vec<Token>],
    max_new: usize,
    eos: Token,
    m: usize,
) -> Result<(Vec<(Vec<Token>, Vec<Token>)>, usize), TuneError> {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for q in questions {
        let (y, _) = decode_ar(w, q, max_new, eos)?;
        if y.len() <= m + 1 {
            dropped += 1;
        } else {
            pairs.push((q.clone(), y));
        }
    }
    Ok((pairs, dropped))
}

/// Slices one (X, Y) pair at a uniformly drawn k in {0, ..., N-M-1}:
/// context = X ++ y_0..y_k, labels = y_{k+1}..y_{k+M}.
pub fn make_sample(
    x: &[Token],
    y: &[Token],
    m: usize,
    rng: &mut impl Rng,
) -> Result<TrainSample, TuneError> {
    let n = y.len();
    if n <= m + 1 {
        return Err(TuneError::TooShort { n, m });
    }
    let k = rng.gen_range(0..n - m);
    let mut context = x.to_vec();
    context.extend(&y[..=k]);
    Ok(TrainSample {
        context,
        labels: y[k + 1..=k + m].to_vec(),
        source: String::new(),
    })
}

/// Cosine schedule from lr0 down to zero.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    assert!(total_steps > 0 && step <= total_steps);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Fresh soft parameters, every entry i.i.d. N(0, 0.02^2).
pub fn init_soft(w: &ModelWeights, p: usize, m: usize, seed: u64, mode: PromptingMode) -> SoftParams {
    let dim = w.cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let mut fill = |mat: &mut Mat| {
        for v in &mut mat.data {
            *v = normal.sample(&mut rng);
        }
    };
    let mut mask_emb = Mat::zeros(m, dim);
    fill(&mut mask_emb);
    let prompt = match mode {
        PromptingMode::MaskOnly => PromptKind::MaskOnly,
        PromptingMode::Shallow => {
            let mut pm = Mat::zeros(p, dim);
            fill(&mut pm);
            PromptKind::Shallow { prompt: pm }
        }
        PromptingMode::Deep => PromptKind::Deep {
            kv: (0..w.cfg.n_layers)
                .map(|_| {
                    let mut k = Mat::zeros(p, dim);
                    let mut v = Mat::zeros(p, dim);
                    fill(&mut k);
                    fill(&mut v);
                    (k, v)
                })
                .collect(),
        },
    };
    SoftParams { mask_emb, prompt }
}

/// The training plan of a sample. The last context token occupies the slot
/// the owner's ordinary head covers at inference time, so it is withheld
/// from the attended context; mask j then sits at the real position of its
/// label and the training layout matches the decoding layout exactly.
fn sample_plan(sample: &TrainSample, m: usize) -> Result<crate::plan::FlatPlan, ModelError> {
    let visible = &sample.context[..sample.context.len() - 1];
    Ok(build_training_plan(visible, m)?)
}

/// One gradient-descent step on a batch: mean over samples of the summed
/// mask-slot loss, soft params updated in batch order, weights untouched.
pub fn sar_step(
    batch: &[TrainSample],
    w: &ModelWeights,
    soft: &SoftParams,
    lr: f64,
) -> Result<(f64, SoftParams), TuneError> {
    if batch.is_empty() {
        return Err(TuneError::EmptyBatch);
    }
    let m = soft.n_masks();
    let mut total_loss = 0.0;
    let mut grad_acc = soft.zeros_like();
    for sample in batch {
        let plan = sample_plan(sample, m)?;
        let targets: Vec<(usize, Token)> = plan.groups[0]
            .slots
            .iter()
            .zip(&sample.labels)
            .map(|(&s, &t)| (s, t))
            .collect();
        let (loss, gs) = grad_soft(w, soft, &plan, &targets)?;
        total_loss += loss;
        let mut gs_owned = gs;
        for (acc, g) in grad_acc.flat_parts().into_iter().zip(gs_owned.flat_parts()) {
            for (a, &gv) in acc.iter_mut().zip(g.iter()) {
                *a += gv;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut updated = soft.clone();
    for (p, g) in updated.flat_parts().into_iter().zip(grad_acc.flat_parts()) {
        for (pv, &gv) in p.iter_mut().zip(g.iter()) {
            *pv -= lr * scale * gv;
        }
    }
    Ok((total_loss * scale, updated))
}

/// Slices each usable (X, Y) pair into `slices_per_pair` training samples.
/// Pairs too short to slice are skipped. Deterministic in `seed`.
pub fn slice_dataset(
    pairs: &[(Vec<Token>, Vec<Token>)],
    m: usize,
    slices_per_pair: usize,
    seed: u64,
) -> Result<Vec<TrainSample>, TuneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (i, (x, y)) in pairs.iter().enumerate() {
        if y.len() <= m + 1 {
            continue;
        }
        for _ in 0..slices_per_pair {
            let mut s = make_sample(x, y, m, &mut rng)?;
            s.source = format!("pair{i}");
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err(TuneError::NoSamples);
    }
    Ok(samples)
}

/// Full tuning loop over a fixed sample set: epochs of shuffled batches,
/// `sar_step` under the cosine schedule, (step, lr, loss) reported through
/// the callback.
pub fn tune_on_samples(
    w: &ModelWeights,
    samples: &[TrainSample],
    cfg: &TuneConfig,
    mut log: impl FnMut(usize, f64, f64),
) -> Result<(SoftParams, Vec<f64>), TuneError> {
    if samples.is_empty() {
        return Err(TuneError::NoSamples);
    }
    let mut soft = init_soft(w, cfg.p, cfg.m, cfg.seed, cfg.prompting_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size).max(1);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = cosine_lr(step, total_steps, cfg.lr0);
            let (loss, updated) = sar_step(&batch, w, &soft, lr)?;
            if !loss.is_finite() {
                return Err(TuneError::NonFiniteLoss { step });
            }
            soft = updated;
            history.push(loss);
            log(step, lr, loss);
            step += 1;
        }
    }
    Ok((soft, history))
}
