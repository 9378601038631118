//! Generation loops: the plain autoregressive baseline and the streamlined
//! draft-and-verify decoder in its three plan shapes.
//!
//! No KV cache: every pass recomputes the full sequence. The measured
//! quantity is the pass count, not per-pass cost.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{forward, pick_greedy, ModelError, Picker, SoftParams};
use crate::model::ModelWeights;
use crate::plan::{build_causal_plan, build_first_pass_plan, build_straightforward_plan, build_tree_plan, Token};
use crate::tree::{
    build_chain_tree, build_efficient_tree, build_full_tree, next_group, verify_with_picker, DraftTree,
    TreeError,
};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid decode parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Linear chain of drafts, one mask group.
    Straightforward,
    /// Spine-shaped token tree, per-node mask groups.
    Efficient,
    /// Fully branching token tree.
    Full,
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Straightforward => "straightforward",
            DecodeMode::Efficient => "efficient",
            DecodeMode::Full => "full",
        }
    }
}

/// Per-run accounting. `tokens_emitted` counts raw emissions before EOS and
/// overshoot truncation, so `sum(bucket * count) == tokens_emitted` holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub forward_passes: usize,
    pub tokens_emitted: usize,
    /// Bucket = tokens emitted in a pass (accepted + 1), value = pass count.
    pub histogram: BTreeMap<usize, usize>,
}

impl DecodeStats {
    fn record_pass(&mut self, emitted: usize) {
        self.forward_passes += 1;
        self.tokens_emitted += emitted;
        *self.histogram.entry(emitted).or_insert(0) += 1;
    }

    /// Mean accepted drafts per pass (the +1 AR token excluded).
    pub fn mean_accepted_per_pass(&self) -> f64 {
        if self.forward_passes == 0 {
            return 0.0;
        }
        let accepted: usize = self.histogram.iter().map(|(&b, &c)| (b - 1) * c).sum();
        accepted as f64 / self.forward_passes as f64
    }

    /// Raw tokens per forward pass; the desk-scale stand-in for speedup.
    pub fn pass_reduction(&self) -> f64 {
        if self.forward_passes == 0 {
            return 0.0;
        }
        self.tokens_emitted as f64 / self.forward_passes as f64
    }
}

/// Extra (non-context) slots one pass of each mode costs.
pub fn count_extra_slots(mode: DecodeMode, n: usize, k: usize, m: usize) -> usize {
    match mode {
        DecodeMode::Straightforward => n + m,
        DecodeMode::Efficient => n * k + (n * k + 1) * m,
        DecodeMode::Full => {
            let nodes: usize = (1..=n as u32).map(|i| k.pow(i)).sum();
            nodes + (nodes + 1) * m
        }
    }
}

/// Greedy token-by-token generation. Output is truncated at the first EOS
/// and to `max_new`; the pass that produced a truncated token still counts.
pub fn decode_ar(
    w: &ModelWeights,
    query: &[Token],
    max_new: usize,
    eos: Token,
) -> Result<(Vec<Token>, DecodeStats), DecodeError> {
    let soft = SoftParams::empty(w.cfg.dim);
    let mut seq = query.to_vec();
    let mut stats = DecodeStats::default();
    let mut emitted = Vec::new();
    while emitted.len() < max_new {
        let plan = build_causal_plan(&seq).map_err(ModelError::from)?;
        let logits = forward(w, &soft, &plan)?;
        let a = pick_greedy(logits.row(seq.len() - 1));
        stats.record_pass(1);
        emitted.push(a);
        if a == eos {
            break;
        }
        seq.push(a);
    }
    Ok((truncate_output(emitted, max_new, eos), stats))
}

fn truncate_output(mut emitted: Vec<Token>, max_new: usize, eos: Token) -> Vec<Token> {
    if let Some(i) = emitted.iter().position(|&t| t == eos) {
        emitted.truncate(i);
    }
    emitted.truncate(max_new);
    emitted
}

pub fn decode_streamlined(
    w: &ModelWeights,
    soft: &SoftParams,
    query: &[Token],
    max_new: usize,
    eos: Token,
    mode: DecodeMode,
    n: usize,
    k: usize,
) -> Result<(Vec<Token>, DecodeStats), DecodeError> {
    decode_streamlined_with_picker(w, soft, query, max_new, eos, mode, n, k, pick_greedy)
}

/// `decode_streamlined` with an explicit pick function; the fault-injection
/// harness passes a wrong tie-break here to prove the lossless check bites.
#[allow(clippy::too_many_arguments)]
pub fn decode_streamlined_with_picker(
    w: &ModelWeights,
    soft: &SoftParams,
    query: &[Token],
    max_new: usize,
    eos: Token,
    mode: DecodeMode,
    n: usize,
    k: usize,
    pick: Picker,
) -> Result<(Vec<Token>, DecodeStats), DecodeError> {
    let m = soft.n_masks();
    if query.is_empty() {
        return Err(DecodeError::BadParams("empty query".into()));
    }
    if n == 0 || n > m {
        return Err(DecodeError::BadParams(format!("need 1 <= n <= M, got n={n}, M={m}")));
    }
    if k == 0 && mode != DecodeMode::Straightforward {
        return Err(DecodeError::BadParams("k must be at least 1".into()));
    }
    if mode == DecodeMode::Straightforward && n != m {
        return Err(DecodeError::BadParams(format!(
            "straightforward mode drafts one chain per mask, so n must equal M (got n={n}, M={m})"
        )));
    }
    let mut stats = DecodeStats::default();
    if max_new == 0 {
        return Ok((Vec::new(), stats));
    }

    let mut seq = query.to_vec();
    let mut emitted: Vec<Token> = Vec::new();

    // Pass 1: ordinary next token plus the initial draft rows.
    let plan = build_first_pass_plan(&seq, m).map_err(ModelError::from)?;
    let logits = forward(w, soft, &plan)?;
    let a = pick(logits.row(seq.len() - 1));
    stats.record_pass(1);
    emitted.push(a);
    let mut draft_rows: Vec<Vec<f64>> = plan.groups[0]
        .slots
        .iter()
        .map(|&s| logits.row(s).to_vec())
        .collect();

    while a_continues(&emitted, max_new, eos) {
        seq = query.to_vec();
        seq.extend(&emitted);
        let tree = build_draft_tree(mode, &draft_rows, n, k)?;
        let plan = match mode {
            DecodeMode::Straightforward => {
                let chain: Vec<Token> = tree.nodes.iter().map(|nd| nd.token).collect();
                build_straightforward_plan(&seq, &chain, m).map_err(ModelError::from)?
            }
            _ => build_tree_plan(&seq, &tree, m).map_err(ModelError::from)?,
        };
        let logits = forward(w, soft, &plan)?;
        let outcome = verify_with_picker(&tree, &logits, &plan, pick)?;
        stats.record_pass(outcome.accepted.len() + 1);
        emitted.extend(&outcome.accepted);
        emitted.push(outcome.ar_token);
        // The straightforward plan has a single mask group; tree plans pick
        // the group owned by the last accepted node.
        let g = match mode {
            DecodeMode::Straightforward => 0,
            _ => next_group(&plan, &outcome)?,
        };
        draft_rows = plan.groups[g]
            .slots
            .iter()
            .map(|&s| logits.row(s).to_vec())
            .collect();
    }
    Ok((truncate_output(emitted, max_new, eos), stats))
}

fn a_continues(emitted: &[Token], max_new: usize, eos: Token) -> bool {
    emitted.len() < max_new && !emitted.contains(&eos)
}

fn build_draft_tree(mode: DecodeMode, rows: &[Vec<f64>], n: usize, k: usize) -> Result<DraftTree, TreeError> {
    match mode {
        DecodeMode::Straightforward => build_chain_tree(rows),
        DecodeMode::Efficient => build_efficient_tree(&rows[..n], k),
        DecodeMode::Full => build_full_tree(&rows[..n], k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mat, ModelConfig, PromptKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const EOS: Token = 10;

    fn cfg() -> ModelConfig {
        ModelConfig { vocab: 11, dim: 8, n_layers: 2, n_heads: 2, hidden: 16 }
    }

    fn random_soft(m: usize, p: usize, seed: u64) -> SoftParams {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut mask_emb = Mat::zeros(m, c.dim);
        for x in &mut mask_emb.data {
            *x = normal.sample(&mut rng);
        }
        let kv = (0..c.n_layers)
            .map(|_| {
                let mut kp = Mat::zeros(p, c.dim);
                let mut vp = Mat::zeros(p, c.dim);
                for x in kp.data.iter_mut().chain(vp.data.iter_mut()) {
                    *x = normal.sample(&mut rng);
                }
                (kp, vp)
            })
            .collect();
        SoftParams { mask_emb, prompt: PromptKind::Deep { kv } }
    }

    #[test]
    fn count_extra_slots_examples() {
        assert_eq!(count_extra_slots(DecodeMode::Efficient, 4, 3, 4), 12 + 52);
        assert_eq!(count_extra_slots(DecodeMode::Straightforward, 3, 1, 3), 6);
        assert_eq!(count_extra_slots(DecodeMode::Full, 2, 2, 2), 6 + 14);
    }

    #[test]
    fn max_new_zero_is_empty() {
        let w = ModelWeights::random(cfg(), 1);
        let (out, stats) = decode_ar(&w, &[1, 2], 0, EOS).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.forward_passes, 0);
        let soft = random_soft(3, 2, 2);
        let (out, stats) =
            decode_streamlined(&w, &soft, &[1, 2], 0, EOS, DecodeMode::Efficient, 2, 2).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.forward_passes, 0);
    }

    #[test]
    fn immediate_eos_counts_one_pass_and_empty_output() {
        // Head bias pushes every argmax to EOS.
        let mut w = ModelWeights::random(cfg(), 5);
        w.head_b[EOS as usize] = 50.0;
        let (out, stats) = decode_ar(&w, &[1], 8, EOS).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.forward_passes, 1);
        assert_eq!(stats.tokens_emitted, 1);
        let soft = random_soft(3, 2, 6);
        let (out, stats) =
            decode_streamlined(&w, &soft, &[1], 8, EOS, DecodeMode::Efficient, 2, 2).unwrap();
        assert!(out.is_empty());
        assert_eq!(stats.forward_passes, 1);
    }

    #[test]
    fn lossless_against_ar_for_all_modes() {
        let w = ModelWeights::random(cfg(), 42);
        let soft = random_soft(3, 4, 43);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for trial in 0..12 {
            let qlen = rng.gen_range(1..5);
            let query: Vec<Token> = (0..qlen).map(|_| rng.gen_range(0..10)).collect();
            let max_new = rng.gen_range(1..14);
            let (ar, ar_stats) = decode_ar(&w, &query, max_new, EOS).unwrap();
            for (mode, n) in [
                (DecodeMode::Straightforward, 3),
                (DecodeMode::Efficient, 2),
                (DecodeMode::Full, 2),
            ] {
                let (out, stats) =
                    decode_streamlined(&w, &soft, &query, max_new, EOS, mode, n, 2).unwrap();
                assert_eq!(out, ar, "trial {trial} mode {}", mode.name());
                assert!(stats.forward_passes <= ar_stats.forward_passes.max(1));
                // Stats invariants.
                let sum: usize = stats.histogram.iter().map(|(&b, &c)| b * c).sum();
                assert_eq!(sum, stats.tokens_emitted);
                assert!(stats.histogram.keys().all(|&b| b >= 1 && b <= n + 1));
                assert!((stats.pass_reduction() * stats.forward_passes as f64
                    - stats.tokens_emitted as f64)
                    .abs()
                    < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_soft_params_are_still_lossless() {
        // Losslessness must hold regardless of draft quality.
        let w = ModelWeights::random(cfg(), 7);
        let soft = random_soft(4, 0, 8);
        let query = vec![3, 1, 4];
        let (ar, _) = decode_ar(&w, &query, 12, EOS).unwrap();
        let (out, _) =
            decode_streamlined(&w, &soft, &query, 12, EOS, DecodeMode::Efficient, 3, 3).unwrap();
        assert_eq!(out, ar);
    }

    #[test]
    fn straightforward_and_efficient_agree_on_output() {
        let w = ModelWeights::random(cfg(), 9);
        let soft = random_soft(3, 2, 10);
        let query = vec![2, 5];
        let (a, _) =
            decode_streamlined(&w, &soft, &query, 10, EOS, DecodeMode::Straightforward, 3, 1).unwrap();
        let (b, _) = decode_streamlined(&w, &soft, &query, 10, EOS, DecodeMode::Efficient, 3, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_validation() {
        let w = ModelWeights::random(cfg(), 11);
        let soft = random_soft(2, 0, 12);
        assert!(matches!(
            decode_streamlined(&w, &soft, &[1], 4, EOS, DecodeMode::Efficient, 3, 2),
            Err(DecodeError::BadParams(_))
        ));
        assert!(matches!(
            decode_streamlined(&w, &soft, &[], 4, EOS, DecodeMode::Efficient, 2, 2),
            Err(DecodeError::BadParams(_))
        ));
        assert!(matches!(
            decode_streamlined(&w, &soft, &[1], 4, EOS, DecodeMode::Straightforward, 1, 1),
            Err(DecodeError::BadParams(_))
        ));
    }

    #[test]
    fn overshoot_is_truncated_to_max_new() {
        let w = ModelWeights::random(cfg(), 13);
        let soft = random_soft(3, 2, 14);
        let (out, stats) =
            decode_streamlined(&w, &soft, &[1, 2], 5, EOS, DecodeMode::Efficient, 3, 2).unwrap();
        assert!(out.len() <= 5);
        assert!(stats.tokens_emitted >= out.len());
    }
}
