//! Flattened input plans: slot layout, per-slot position indices, role tags
//! and the boolean attention matrix consumed by the model forward pass.
//!
//! A plan describes one forward pass. Context slots form an ordinary causal
//! block. Candidate slots hold draft tokens arranged as a flattened token
//! tree (level-major, rank order within each level). Mask slots are grouped;
//! each group is owned either by one candidate node or by the last confirmed
//! sequence token (the root-fallback group, always emitted first).
//!
//! Position convention: a mask token carries the position index of the token
//! it predicts, and its output head is read as the prediction for that same
//! index. The slot immediately after the owner is never assigned to a mask
//! because the owner's ordinary next-token head already covers it.

use thiserror::Error;

use crate::tree::{DraftTree, TreeError};

/// Token id in the model vocabulary.
pub type Token = u32;

/// Largest admissible per-slot position index.
pub const MAX_POSITION: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("chain length {got} does not match mask count {expected}")]
    ChainLength { got: usize, expected: usize },
    #[error("position index {0} exceeds maximum {MAX_POSITION}")]
    PositionOverflow(usize),
    #[error("malformed draft tree: {0}")]
    MalformedTree(#[from] TreeError),
    #[error("context must be non-empty")]
    EmptyContext,
    #[error("mask count must be at least 1")]
    NoMasks,
}

/// What a slot contributes to the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    /// Confirmed sequence token (query or previously generated).
    Context { token: Token },
    /// Draft token pending verification; `node` is its tree node id.
    Candidate { token: Token, node: usize },
    /// Learnable mask token. `mask_idx` selects the mask embedding,
    /// `group` indexes into [`FlatPlan::groups`].
    Mask {
        mask_idx: usize,
        group: usize,
        owner: Option<usize>,
    },
}

impl Role {
    pub fn is_mask(&self) -> bool {
        matches!(self, Role::Mask { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub role: Role,
    pub position: usize,
}

/// One group of mask tokens, attached to a candidate node (`owner = Some`)
/// or to the last confirmed token (`owner = None`, the root-fallback group).
#[derive(Debug, Clone)]
pub struct MaskGroup {
    pub owner: Option<usize>,
    /// Slot indices of the group's masks, in mask order 1..=M.
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FlatPlan {
    pub slots: Vec<Slot>,
    /// Row-major boolean attention matrix; row = query slot, column = key slot.
    attn: Vec<bool>,
    /// Whether the row's queries may attend to the prompt prefixes.
    pub prompt_visible: Vec<bool>,
    pub groups: Vec<MaskGroup>,
    pub ctx_len: usize,
    /// Slot index per tree node id, for candidate slots.
    node_slots: Vec<usize>,
}

impl FlatPlan {
    fn with_capacity(n: usize, ctx_len: usize) -> Self {
        FlatPlan {
            slots: Vec::with_capacity(n),
            attn: vec![false; n * n],
            prompt_visible: vec![false; n],
            groups: Vec::new(),
            ctx_len,
            node_slots: Vec::new(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    pub fn attends(&self, query: usize, key: usize) -> bool {
        self.attn[query * self.slots.len() + key]
    }

    fn allow(&mut self, query: usize, key: usize) {
        let n = self.prompt_visible.len();
        self.attn[query * n + key] = true;
    }

    /// Slot index of the candidate holding tree node `node`.
    pub fn candidate_slot(&self, node: usize) -> Option<usize> {
        self.node_slots.get(node).copied()
    }

    /// Deterministic text rendering of the attention matrix (rows of 0/1),
    /// for fixture comparison.
    pub fn render_attention(&self) -> String {
        let n = self.n_slots();
        let mut out = String::with_capacity(n * (n + 1));
        for q in 0..n {
            for kcol in 0..n {
                out.push(if self.attends(q, kcol) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Structural sanity check used by tests: self-attention on the diagonal,
    /// causal context block, prompt visibility confined to mask rows, and no
    /// context or candidate row attending to any mask column.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_slots();
        for i in 0..n {
            if !self.attends(i, i) {
                return Err(format!("slot {i} does not attend to itself"));
            }
            if self.prompt_visible[i] != self.slots[i].role.is_mask() {
                return Err(format!("prompt visibility wrong on slot {i}"));
            }
            if self.slots[i].position > MAX_POSITION {
                return Err(format!("slot {i} position overflow"));
            }
        }
        for q in 0..self.ctx_len {
            for kcol in 0..n {
                let causal = kcol <= q;
                if kcol < self.ctx_len && self.attends(q, kcol) != causal {
                    return Err(format!("context row {q} is not causal at {kcol}"));
                }
            }
        }
        for q in 0..n {
            if self.slots[q].role.is_mask() {
                continue;
            }
            for kcol in 0..n {
                if self.slots[kcol].role.is_mask() && self.attends(q, kcol) {
                    return Err(format!("non-mask row {q} attends to mask column {kcol}"));
                }
            }
        }
        Ok(())
    }
}

fn push_context(plan: &mut FlatPlan, ctx: &[Token]) {
    for (i, &t) in ctx.iter().enumerate() {
        plan.slots.push(Slot {
            role: Role::Context { token: t },
            position: i,
        });
        for kcol in 0..=i {
            plan.allow(i, kcol);
        }
    }
}

/// Appends one mask group. `attended` lists the non-group slots (context,
/// ancestors, owner) every mask of the group may see; masks additionally
/// attend causally to earlier masks of the same group and to themselves.
/// Mask j (1-based) is placed at position `base_pos + j`.
fn push_group(plan: &mut FlatPlan, owner: Option<usize>, attended: &[usize], base_pos: usize, m: usize) {
    let group = plan.groups.len();
    let mut slots = Vec::with_capacity(m);
    for j in 1..=m {
        let s = plan.slots.len();
        plan.slots.push(Slot {
            role: Role::Mask {
                mask_idx: j - 1,
                group,
                owner,
            },
            position: base_pos + j,
        });
        plan.prompt_visible[s] = true;
        for &a in attended {
            plan.allow(s, a);
        }
        for &earlier in &slots {
            plan.allow(s, earlier);
        }
        plan.allow(s, s);
        slots.push(s);
    }
    plan.groups.push(MaskGroup { owner, slots });
}

/// Training layout: a causal context block followed by one mask group of M
/// masks attached to the last context token. Mask j sits at position
/// `ctx_len + j`; its output head is trained on the token at that position.
pub fn build_training_plan(ctx: &[Token], m: usize) -> Result<FlatPlan, PlanError> {
    if ctx.is_empty() {
        return Err(PlanError::EmptyContext);
    }
    if m == 0 {
        return Err(PlanError::NoMasks);
    }
    let ctx_len = ctx.len();
    check_pos(ctx_len + m)?;
    let mut plan = FlatPlan::with_capacity(ctx_len + m, ctx_len);
    push_context(&mut plan, ctx);
    let attended: Vec<usize> = (0..ctx_len).collect();
    push_group(&mut plan, None, &attended, ctx_len, m);
    Ok(plan)
}

/// First inference pass: structurally identical to the training plan. The
/// last context slot's row yields the accepted next token for position
/// `ctx_len`; mask j's row is read as the draft for position `ctx_len + j`.
pub fn build_first_pass_plan(ctx: &[Token], m: usize) -> Result<FlatPlan, PlanError> {
    build_training_plan(ctx, m)
}

/// Context-only causal plan, used by the plain autoregressive decoder.
pub fn build_causal_plan(ctx: &[Token]) -> Result<FlatPlan, PlanError> {
    if ctx.is_empty() {
        return Err(PlanError::EmptyContext);
    }
    check_pos(ctx.len())?;
    let mut plan = FlatPlan::with_capacity(ctx.len(), ctx.len());
    push_context(&mut plan, ctx);
    Ok(plan)
}

/// Straightforward decoding layout: context, a linear chain of M draft
/// candidates, and a single mask group that sees the context only (drafts
/// for the next pass are generated without attending to the current chain).
pub fn build_straightforward_plan(ctx: &[Token], chain: &[Token], m: usize) -> Result<FlatPlan, PlanError> {
    if ctx.is_empty() {
        return Err(PlanError::EmptyContext);
    }
    if m == 0 {
        return Err(PlanError::NoMasks);
    }
    if chain.len() != m {
        return Err(PlanError::ChainLength {
            got: chain.len(),
            expected: m,
        });
    }
    let ctx_len = ctx.len();
    check_pos(ctx_len + 1 + 2 * m)?;
    let mut plan = FlatPlan::with_capacity(ctx_len + 2 * m, ctx_len);
    push_context(&mut plan, ctx);
    for (i, &t) in chain.iter().enumerate() {
        let s = plan.slots.len();
        plan.slots.push(Slot {
            role: Role::Candidate { token: t, node: i },
            position: ctx_len + i,
        });
        for kcol in 0..=s {
            plan.allow(s, kcol);
        }
        plan.node_slots.push(s);
    }
    let attended: Vec<usize> = (0..ctx_len).collect();
    push_group(&mut plan, None, &attended, ctx_len + 1, m);
    Ok(plan)
}

/// Tree decoding layout: context, candidates flattened level-major (level 1
/// ranks 1..k, level 2 ranks 1..k, ...), then mask groups: root-fallback
/// first, then one group per candidate in candidate layout order.
///
/// A level-i candidate carries position index `ctx_len + i - 1`; mask j of
/// the group owned by node v sits at `pos(v) + 1 + j`, and mask j of the
/// root-fallback group at `ctx_len + j`.
pub fn build_tree_plan(ctx: &[Token], tree: &DraftTree, m: usize) -> Result<FlatPlan, PlanError> {
    if ctx.is_empty() {
        return Err(PlanError::EmptyContext);
    }
    if m == 0 {
        return Err(PlanError::NoMasks);
    }
    tree.validate()?;
    let ctx_len = ctx.len();
    let n_nodes = tree.nodes.len();
    check_pos(ctx_len + tree.n_levels + m)?;
    let total = ctx_len + n_nodes + (n_nodes + 1) * m;
    let mut plan = FlatPlan::with_capacity(total, ctx_len);
    push_context(&mut plan, ctx);

    // Candidates: `tree.nodes` is already stored level-major in rank order,
    // with node ids equal to layout order (validated above).
    plan.node_slots = vec![usize::MAX; n_nodes];
    for node in &tree.nodes {
        let s = plan.slots.len();
        plan.slots.push(Slot {
            role: Role::Candidate {
                token: node.token,
                node: node.id,
            },
            position: ctx_len + node.level - 1,
        });
        for kcol in 0..ctx_len {
            plan.allow(s, kcol);
        }
        for anc in tree.ancestors(node.id) {
            plan.allow(s, plan.node_slots[anc]);
        }
        plan.allow(s, s);
        plan.node_slots[node.id] = s;
    }

    // Root-fallback group: sees the context only.
    let ctx_cols: Vec<usize> = (0..ctx_len).collect();
    push_group(&mut plan, None, &ctx_cols, ctx_len, m);

    // One group per candidate, in candidate layout order.
    for node in &tree.nodes {
        let mut attended = ctx_cols.clone();
        for anc in tree.ancestors(node.id) {
            attended.push(plan.node_slots[anc]);
        }
        attended.push(plan.node_slots[node.id]);
        let base_pos = plan.slots[plan.node_slots[node.id]].position + 1;
        push_group(&mut plan, Some(node.id), &attended, base_pos, m);
    }
    Ok(plan)
}

fn check_pos(max_needed: usize) -> Result<(), PlanError> {
    if max_needed > MAX_POSITION {
        Err(PlanError::PositionOverflow(max_needed))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_efficient_tree, DraftTree, TreeNode, TreeShape};

    fn toks(n: usize) -> Vec<Token> {
        (0..n as u32).collect()
    }

    #[test]
    fn training_plan_smallest_case() {
        let plan = build_training_plan(&[5], 1).unwrap();
        assert_eq!(plan.n_slots(), 2);
        assert_eq!(plan.render_attention(), "10\n11\n");
        assert_eq!(plan.prompt_visible, vec![false, true]);
        assert_eq!(plan.slots[1].position, 2);
        plan.validate().unwrap();
    }

    #[test]
    fn training_plan_positions() {
        // ctx_len=5, M=3: masks at positions 6,7,8; the slot at position 5
        // is covered by the ordinary head of context slot 4.
        let plan = build_training_plan(&toks(5), 3).unwrap();
        let mask_pos: Vec<usize> = plan.groups[0].slots.iter().map(|&s| plan.slots[s].position).collect();
        assert_eq!(mask_pos, vec![6, 7, 8]);
        plan.validate().unwrap();
    }

    #[test]
    fn context_rows_never_see_masks_exhaustive() {
        for ctx_len in 1..=8 {
            for m in 1..=4 {
                let plan = build_training_plan(&toks(ctx_len), m).unwrap();
                plan.validate().unwrap();
                for q in 0..ctx_len {
                    assert!(!plan.prompt_visible[q]);
                    for s in ctx_len..plan.n_slots() {
                        assert!(!plan.attends(q, s));
                    }
                }
                // Mask j attends to all context, earlier masks, itself.
                for (jm, &s) in plan.groups[0].slots.iter().enumerate() {
                    for c in 0..ctx_len {
                        assert!(plan.attends(s, c));
                    }
                    for (je, &e) in plan.groups[0].slots.iter().enumerate() {
                        assert_eq!(plan.attends(s, e), je <= jm);
                    }
                }
            }
        }
    }

    #[test]
    fn first_pass_equals_training_plan() {
        let a = build_training_plan(&toks(6), 3).unwrap();
        let b = build_first_pass_plan(&toks(6), 3).unwrap();
        assert_eq!(a.render_attention(), b.render_attention());
        assert_eq!(a.prompt_visible, b.prompt_visible);
    }

    #[test]
    fn straightforward_masks_never_see_chain() {
        let plan = build_straightforward_plan(&toks(4), &[9, 8, 7], 3).unwrap();
        assert_eq!(plan.n_slots(), 4 + 3 + 3);
        plan.validate().unwrap();
        for &s in &plan.groups[0].slots {
            for chain_slot in 4..7 {
                assert!(!plan.attends(s, chain_slot));
            }
        }
        // Mask positions ctx_len + 1 + j.
        let mask_pos: Vec<usize> = plan.groups[0].slots.iter().map(|&s| plan.slots[s].position).collect();
        assert_eq!(mask_pos, vec![6, 7, 8]);
        // Chain is a linear tree.
        for i in 0..3usize {
            let s = plan.candidate_slot(i).unwrap();
            for e in 0..3usize {
                assert_eq!(plan.attends(s, plan.candidate_slot(e).unwrap()), e <= i);
            }
        }
    }

    #[test]
    fn straightforward_single_mask() {
        let plan = build_straightforward_plan(&toks(3), &[1], 1).unwrap();
        let s = plan.groups[0].slots[0];
        let attended: Vec<usize> = (0..plan.n_slots()).filter(|&c| plan.attends(s, c)).collect();
        assert_eq!(attended, vec![0, 1, 2, s]);
    }

    #[test]
    fn straightforward_chain_length_mismatch() {
        assert!(matches!(
            build_straightforward_plan(&toks(3), &[1, 2], 3),
            Err(PlanError::ChainLength { got: 2, expected: 3 })
        ));
    }

    fn demo_rows(n: usize, vocab: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..vocab).map(|v| ((i * 7 + v * 3) % 11) as f64 / 11.0).collect())
            .collect()
    }

    #[test]
    fn tree_plan_slot_counts() {
        // n=4, k=3: 12 candidate slots and 13 mask groups of 4 = 52 mask slots.
        let tree = build_efficient_tree(&demo_rows(4, 32), 3).unwrap();
        let plan = build_tree_plan(&toks(6), &tree, 4).unwrap();
        assert_eq!(plan.n_slots(), 6 + 12 + 13 * 4);
        assert_eq!(plan.groups.len(), 13);
        plan.validate().unwrap();
    }

    #[test]
    fn tree_plan_candidate_and_mask_attention_sets() {
        let tree = build_efficient_tree(&demo_rows(3, 16), 2).unwrap();
        let ctx_len = 5;
        let plan = build_tree_plan(&toks(ctx_len), &tree, 3).unwrap();
        plan.validate().unwrap();
        for node in &tree.nodes {
            let s = plan.candidate_slot(node.id).unwrap();
            let mut expected: Vec<usize> = (0..ctx_len).collect();
            expected.extend(tree.ancestors(node.id).iter().map(|&a| plan.candidate_slot(a).unwrap()));
            expected.push(s);
            expected.sort_unstable();
            let got: Vec<usize> = (0..plan.n_slots()).filter(|&c| plan.attends(s, c)).collect();
            assert_eq!(got, expected, "candidate row {s}");
            assert_eq!(plan.slots[s].position, ctx_len + node.level - 1);
        }
        for g in &plan.groups {
            let owner_cols: Vec<usize> = match g.owner {
                None => vec![],
                Some(owner) => {
                    let mut v: Vec<usize> =
                        tree.ancestors(owner).iter().map(|&a| plan.candidate_slot(a).unwrap()).collect();
                    v.push(plan.candidate_slot(owner).unwrap());
                    v
                }
            };
            for (jm, &s) in g.slots.iter().enumerate() {
                let mut expected: Vec<usize> = (0..ctx_len).collect();
                expected.extend(&owner_cols);
                expected.extend(g.slots[..=jm].iter());
                expected.sort_unstable();
                let got: Vec<usize> = (0..plan.n_slots()).filter(|&c| plan.attends(s, c)).collect();
                assert_eq!(got, expected, "mask row {s}");
            }
            // Group position bases: root-fallback at ctx_len + j, otherwise pos(owner) + 1 + j.
            let base = match g.owner {
                None => ctx_len,
                Some(owner) => plan.slots[plan.candidate_slot(owner).unwrap()].position + 1,
            };
            for (jm, &s) in g.slots.iter().enumerate() {
                assert_eq!(plan.slots[s].position, base + jm + 1);
            }
        }
    }

    #[test]
    fn tree_plan_matches_hand_written_fixture() {
        // n=2, k=2, ctx_len=5: 4 candidates + 5 groups x 2 masks = 14 extra slots.
        let tree = build_efficient_tree(&demo_rows(2, 8), 2).unwrap();
        let plan = build_tree_plan(&toks(5), &tree, 2).unwrap();
        assert_eq!(plan.n_slots(), 19);
        // Hand-constructed 19x19 matrix. Layout:
        //   0-4   context (causal)
        //   5,6   level-1 candidates (ranks 1,2)
        //   7,8   level-2 candidates (children of slot 5)
        //   9,10  root-fallback masks
        //   11..  per-candidate groups in candidate order
        let ctx = "11111";
        let row = |cols: &[usize]| {
            let mut r = vec!['0'; 19];
            for &c in cols {
                r[c] = '1';
            }
            r.into_iter().collect::<String>()
        };
        let mut expected = String::new();
        for q in 0..5 {
            expected.push_str(&row(&(0..=q).collect::<Vec<_>>()));
            expected.push('\n');
        }
        for line in [
            row(&[0, 1, 2, 3, 4, 5]),          // cand level1 rank1
            row(&[0, 1, 2, 3, 4, 6]),          // cand level1 rank2
            row(&[0, 1, 2, 3, 4, 5, 7]),       // cand level2 rank1 (child of 5)
            row(&[0, 1, 2, 3, 4, 5, 8]),       // cand level2 rank2 (child of 5)
            row(&[0, 1, 2, 3, 4, 9]),          // root group mask 1
            row(&[0, 1, 2, 3, 4, 9, 10]),      // root group mask 2
            row(&[0, 1, 2, 3, 4, 5, 11]),      // group(node0) mask 1
            row(&[0, 1, 2, 3, 4, 5, 11, 12]),  // group(node0) mask 2
            row(&[0, 1, 2, 3, 4, 6, 13]),      // group(node1) mask 1
            row(&[0, 1, 2, 3, 4, 6, 13, 14]),  // group(node1) mask 2
            row(&[0, 1, 2, 3, 4, 5, 7, 15]),   // group(node2) mask 1
            row(&[0, 1, 2, 3, 4, 5, 7, 15, 16]),
            row(&[0, 1, 2, 3, 4, 5, 8, 17]),   // group(node3) mask 1
            row(&[0, 1, 2, 3, 4, 5, 8, 17, 18]),
        ] {
            expected.push_str(&line);
            expected.push('\n');
        }
        let _ = ctx;
        assert_eq!(plan.render_attention(), expected);
    }

    #[test]
    fn tree_plan_rejects_malformed_tree() {
        let tree = DraftTree {
            n_levels: 1,
            k: 2,
            shape: TreeShape::Efficient,
            nodes: vec![TreeNode {
                id: 0,
                level: 1,
                rank: 1,
                token: 3,
                parent: Some(7), // dangling parent
                score: 0.0,
            }],
        };
        assert!(matches!(
            build_tree_plan(&toks(3), &tree, 2),
            Err(PlanError::MalformedTree(_))
        ));
    }
}
