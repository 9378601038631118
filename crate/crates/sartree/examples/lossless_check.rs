//! Shows that streamlined decoding reproduces plain greedy decoding exactly,
//! even with random weights and untrained soft parameters.
//!
//!   cargo run --example lossless_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sartree::decode::{decode_ar, decode_streamlined, DecodeMode};
use sartree::model::{ModelConfig, ModelWeights};
use sartree::tune::{init_soft, PromptingMode};

fn main() {
    let cfg = ModelConfig { vocab: 32, dim: 32, n_layers: 2, n_heads: 2, hidden: 64 };
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    for trial in 0..5 {
        let w = ModelWeights::random(cfg, rng.gen());
        let soft = init_soft(&w, 4, 3, rng.gen(), PromptingMode::Deep);
        let query: Vec<u32> = (0..4).map(|_| rng.gen_range(0..cfg.vocab as u32)).collect();
        let eos = (cfg.vocab - 1) as u32;

        let (ar, ar_stats) = decode_ar(&w, &query, 12, eos).unwrap();
        println!("trial {trial}: ar output {ar:?} ({} passes)", ar_stats.forward_passes);

        for mode in [DecodeMode::Straightforward, DecodeMode::Efficient, DecodeMode::Full] {
            let n = if mode == DecodeMode::Straightforward { 3 } else { 2 };
            let (out, stats) = decode_streamlined(&w, &soft, &query, 12, eos, mode, n, 2).unwrap();
            assert_eq!(out, ar, "{} output diverged", mode.name());
            println!(
                "  {:16} identical, {} passes, pass reduction {:.2}",
                mode.name(),
                stats.forward_passes,
                stats.pass_reduction()
            );
        }
    }
    println!("all streamlined outputs match plain greedy decoding");
}
