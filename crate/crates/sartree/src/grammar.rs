//! Synthetic question/answer grammar used for the demo pipeline: a byte
//! level vocabulary plus EOS, and eight fixed pairs with deterministic
//! answers so a small model can memorize them and the mask heads have
//! learnable multi-step structure to predict.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::plan::Token;

pub const EOS: Token = 256;
pub const VOCAB: usize = 257;

/// The fixed production rules: every question has 4 bytes, every answer 10,
/// and the answer is a deterministic function of the question.
pub const PAIRS: [(&str, &str); 8] = [
    ("Q:a;", "alfalfalfa"),
    ("Q:b;", "bobbobbobs"),
    ("Q:c;", "cedcedcede"),
    ("Q:d;", "dimdimdims"),
    ("Q:e;", "eeleeleels"),
    ("Q:f;", "figfigfigs"),
    ("Q:g;", "gumgumgums"),
    ("Q:h;", "huthuthuts"),
];

const WEIGHTS: [u32; 8] = [5, 4, 4, 3, 3, 2, 2, 1];

pub fn tokenize(s: &str) -> Vec<Token> {
    s.bytes().map(|b| b as Token).collect()
}

/// Byte decoding; EOS and any out-of-byte token render as '?'.
pub fn detokenize(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| if t < 256 { t as u8 as char } else { '?' })
        .collect()
}

/// Full training sequence for one pair: question, answer, EOS.
pub fn sequence(question: &str, answer: &str) -> Vec<Token> {
    let mut s = tokenize(question);
    s.extend(tokenize(answer));
    s.push(EOS);
    s
}

/// `n` weighted draws from the rule set, deterministic in `seed`.
pub fn sample_pairs(n: usize, seed: u64) -> Vec<(&'static str, &'static str)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(WEIGHTS).unwrap();
    (0..n).map(|_| PAIRS[dist.sample(&mut rng)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rules_are_fixed_length_and_in_vocab() {
        for (q, a) in PAIRS {
            assert_eq!(q.len(), 4);
            assert_eq!(a.len(), 10);
            assert!(sequence(q, a).iter().all(|&t| (t as usize) < VOCAB));
        }
    }

    #[test]
    fn answers_are_unique_per_question() {
        let qs: std::collections::BTreeSet<&str> = PAIRS.iter().map(|&(q, _)| q).collect();
        assert_eq!(qs.len(), PAIRS.len());
    }

    #[test]
    fn tokenize_roundtrip() {
        let s = "Q:a;alfalfalfa";
        assert_eq!(detokenize(&tokenize(s)), s);
        assert_eq!(*sequence("Q:a;", "x").last().unwrap(), EOS);
    }

    #[test]
    fn sampling_is_seeded_and_weighted() {
        let a = sample_pairs(64, 9);
        let b = sample_pairs(64, 9);
        assert_eq!(a, b);
        assert_ne!(a, sample_pairs(64, 10));
        // The heaviest rule appears; the sampler covers more than one rule.
        let firsts: std::collections::BTreeSet<&str> = a.iter().map(|&(q, _)| q).collect();
        assert!(firsts.len() > 2);
    }
}
