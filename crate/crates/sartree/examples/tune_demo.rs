//! Trains the toy base model on the synthetic grammar, tunes soft parameters
//! on self-generated data, and compares pass reduction before and after.
//!
//!   cargo run --example tune_demo

use sartree::decode::{decode_streamlined, DecodeMode};
use sartree::grammar;
use sartree::model::{corpus_loss, ModelConfig, ModelWeights, SoftParams, TrainConfig};
use sartree::tune::{
    init_soft, self_generate, slice_dataset, tune_on_samples, PromptingMode, TuneConfig,
};

fn mean_accepted(w: &ModelWeights, soft: &SoftParams) -> f64 {
    let mut passes = 0;
    let mut tokens = 0;
    for (q, _) in grammar::PAIRS {
        let query = grammar::tokenize(q);
        let (_, stats) =
            decode_streamlined(w, soft, &query, 16, grammar::EOS, DecodeMode::Efficient, 3, 5).unwrap();
        passes += stats.forward_passes;
        tokens += stats.tokens_emitted;
    }
    (tokens - passes) as f64 / passes as f64
}

fn main() {
    let cfg = ModelConfig { vocab: grammar::VOCAB, dim: 32, n_layers: 2, n_heads: 4, hidden: 128 };
    let seqs: Vec<Vec<u32>> = grammar::PAIRS
        .iter()
        .map(|(q, a)| grammar::sequence(q, a))
        .collect();

    let mut w = ModelWeights::random(cfg, 1);
    let tc = TrainConfig { lr: 1e-2, max_steps: 1500, loss_threshold: 0.16, log_every: 300 };
    train_quietly(&mut w, &seqs, &tc);
    println!("base model held-out entropy: {:.4} nats/token", corpus_loss(&w, &seqs).unwrap());

    let questions: Vec<Vec<u32>> = grammar::PAIRS.iter().map(|(q, _)| grammar::tokenize(q)).collect();
    let (pairs, _) = self_generate(&w, &questions, 16, grammar::EOS, 3).unwrap();
    let samples = slice_dataset(&pairs, 3, 8, 105).unwrap();
    println!("{} training samples sliced from {} self-generated pairs", samples.len(), pairs.len());

    let untrained = init_soft(&w, 16, 3, 5, PromptingMode::Deep);
    println!("mean accepted drafts/pass before tuning: {:.3}", mean_accepted(&w, &untrained));

    let tune_cfg = TuneConfig {
        epochs: 1500,
        batch_size: 8,
        lr0: 0.3,
        seed: 5,
        prompting_mode: PromptingMode::Deep,
        p: 16,
        m: 3,
    };
    let (soft, history) = tune_on_samples(&w, &samples, &tune_cfg, |step, lr, loss| {
        if step % 2000 == 0 {
            println!("  step {step}: lr {lr:.4}, loss {loss:.4}");
        }
    })
    .unwrap();
    println!("tuned for {} steps, loss {:.3} -> {:.3}", history.len(), history[0], history.last().unwrap());
    println!("mean accepted drafts/pass after tuning: {:.3}", mean_accepted(&w, &soft));
}

fn train_quietly(w: &mut ModelWeights, seqs: &[Vec<u32>], tc: &TrainConfig) {
    sartree::model::train_base_lm(w, seqs, tc, |step, loss| {
        println!("  base step {step}: loss {loss:.4}");
    })
    .unwrap();
}
