//! Draft candidate token trees: construction (efficient spine, fully
//! branching, and linear chain variants), flattening order, and the
//! verification walk that turns one forward pass into accepted tokens.

use thiserror::Error;

use crate::model::{greedy_pick, Logits, Picker};
use crate::plan::{FlatPlan, Token};

/// Hard cap on tree size, mostly relevant for fully branching trees.
pub const MAX_TREE_NODES: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("k = {k} exceeds vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no logit rows supplied")]
    EmptyRows,
    #[error("non-finite score in logit row {0}")]
    NonFinite(usize),
    #[error("tree would exceed {MAX_TREE_NODES} nodes")]
    TooLarge,
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("logits have {got} rows but plan has {expected} slots")]
    LogitsMismatch { got: usize, expected: usize },
    #[error("no mask group owned by node {0:?}")]
    UnknownNode(Option<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeShape {
    /// Only the rank-1 node of each level has children (the spine tree).
    Efficient,
    /// Every node at level < n has k children.
    Full,
    /// One node per level; straightforward decoding's linear chain.
    Chain,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    /// 1-based level.
    pub level: usize,
    /// 1-based rank within the sibling set; rank 1 is the top score.
    pub rank: usize,
    pub token: Token,
    pub parent: Option<usize>,
    /// Raw logit score (greedy ranking is softmax-invariant).
    pub score: f64,
}

/// A draft candidate token tree. Nodes are stored level-major in rank order
/// and node ids equal storage order, which is also the flattened slot order
/// used by `build_tree_plan`.
#[derive(Debug, Clone)]
pub struct DraftTree {
    pub n_levels: usize,
    pub k: usize,
    pub nodes: Vec<TreeNode>,
    pub shape: TreeShape,
}

/// The result of verifying one forward pass against a draft tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    /// Draft tokens confirmed this pass, in sequence order.
    pub accepted: Vec<Token>,
    /// Node of the last accepted candidate; `None` is the root fallback.
    pub last_node: Option<usize>,
    /// The ordinary next-token output following the accepted path.
    pub ar_token: Token,
}

impl DraftTree {
    /// Strict ancestors of `id`, ordered root-side first.
    pub fn ancestors(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[id].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out.reverse();
        out
    }

    /// Children of `parent` (or level-1 nodes for the root), in rank order.
    pub fn children(&self, parent: Option<usize>) -> Vec<&TreeNode> {
        self.nodes.iter().filter(|n| n.parent == parent).collect()
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |msg: String| Err(TreeError::Malformed(msg));
        if self.n_levels == 0 || self.k == 0 {
            return bad("empty dimensions".into());
        }
        // Layout order: level-major, sibling sets in parent order, ranks
        // ascending within a sibling set.
        let key = |n: &TreeNode| (n.level, n.parent.map_or(0, |p| p + 1), n.rank);
        let mut prev = (0usize, 0usize, 0usize);
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node id {} at index {i}", n.id));
            }
            if n.level == 0 || n.level > self.n_levels {
                return bad(format!("node {i} level {}", n.level));
            }
            if key(n) <= prev {
                return bad(format!("node {i} breaks level-major layout order"));
            }
            prev = key(n);
            match n.parent {
                None => {
                    if n.level != 1 {
                        return bad(format!("node {i} has no parent at level {}", n.level));
                    }
                }
                Some(p) => {
                    if p >= self.nodes.len() {
                        return bad(format!("node {i} parent {p} out of range"));
                    }
                    if self.nodes[p].level + 1 != n.level {
                        return bad(format!("node {i} parent at wrong level"));
                    }
                }
            }
        }
        for level in 1..=self.n_levels {
            let level_nodes: Vec<&TreeNode> = self.nodes.iter().filter(|n| n.level == level).collect();
            let expected = match self.shape {
                TreeShape::Efficient => self.k,
                TreeShape::Chain => 1,
                TreeShape::Full => self.k.pow(level as u32),
            };
            if level_nodes.is_empty() || level_nodes.len() != expected {
                return bad(format!("level {level} has {} nodes, expected {expected}", level_nodes.len()));
            }
            // Sibling sets: unique ranks 1..=len, scores non-increasing.
            let mut parents: Vec<Option<usize>> = level_nodes.iter().map(|n| n.parent).collect();
            parents.dedup();
            for p in parents {
                let sibs: Vec<&&TreeNode> = level_nodes.iter().filter(|n| n.parent == p).collect();
                for (j, s) in sibs.iter().enumerate() {
                    if s.rank != j + 1 {
                        return bad(format!("sibling rank {} where {} expected", s.rank, j + 1));
                    }
                    if j > 0 && sibs[j - 1].score < s.score {
                        return bad("sibling scores increase with rank".into());
                    }
                }
                if let TreeShape::Efficient = self.shape {
                    if let Some(pid) = p {
                        if self.nodes[pid].rank != 1 {
                            return bad("efficient tree has children under rank > 1".into());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Deterministic text rendering, one `level: rank: token` line per node.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("{}: {}: {}\n", n.level, n.rank, n.token));
        }
        out
    }
}

/// Top-k token/score pairs of a logits row, ranked by score with ties broken
/// toward the lower token id.
fn top_k(row: &[f64], k: usize, row_idx: usize) -> Result<Vec<(Token, f64)>, TreeError> {
    if k == 0 {
        return Err(TreeError::ZeroK);
    }
    if k > row.len() {
        return Err(TreeError::KTooLarge { k, vocab: row.len() });
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(TreeError::NonFinite(row_idx));
    }
    let mut scored: Vec<(Token, f64)> = row.iter().enumerate().map(|(t, &s)| (t as Token, s)).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Efficient spine tree: level i holds the top-k tokens of row i, and every
/// level-(i+1) node is a child of level i's rank-1 node.
pub fn build_efficient_tree(level_rows: &[Vec<f64>], k: usize) -> Result<DraftTree, TreeError> {
    if level_rows.is_empty() {
        return Err(TreeError::EmptyRows);
    }
    let n = level_rows.len();
    let mut nodes = Vec::with_capacity(n * k);
    let mut prev_top: Option<usize> = None;
    for (i, row) in level_rows.iter().enumerate() {
        let level_top = nodes.len();
        for (rank0, (token, score)) in top_k(row, k, i)?.into_iter().enumerate() {
            nodes.push(TreeNode {
                id: nodes.len(),
                level: i + 1,
                rank: rank0 + 1,
                token,
                parent: prev_top,
                score,
            });
        }
        prev_top = Some(level_top);
    }
    Ok(DraftTree {
        n_levels: n,
        k,
        nodes,
        shape: TreeShape::Efficient,
    })
}

/// Linear chain (straightforward decoding): the top-1 token of each row.
pub fn build_chain_tree(level_rows: &[Vec<f64>]) -> Result<DraftTree, TreeError> {
    let tree = build_efficient_tree(level_rows, 1)?;
    Ok(DraftTree {
        shape: TreeShape::Chain,
        ..tree
    })
}

/// Fully branching tree: every node at level < n has k children drawn from
/// the next level's logits row, giving k^i nodes at level i.
pub fn build_full_tree(level_rows: &[Vec<f64>], k: usize) -> Result<DraftTree, TreeError> {
    if level_rows.is_empty() {
        return Err(TreeError::EmptyRows);
    }
    let n = level_rows.len();
    let mut total = 0usize;
    for i in 1..=n as u32 {
        total = total.saturating_add(k.saturating_pow(i));
        if total > MAX_TREE_NODES {
            return Err(TreeError::TooLarge);
        }
    }
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(total);
    let mut prev_level: Vec<usize> = Vec::new();
    for (i, row) in level_rows.iter().enumerate() {
        let picks = top_k(row, k, i)?;
        let mut this_level = Vec::new();
        let parents: Vec<Option<usize>> = if i == 0 {
            vec![None]
        } else {
            prev_level.iter().map(|&p| Some(p)).collect()
        };
        for parent in parents {
            for (rank0, &(token, score)) in picks.iter().enumerate() {
                let id = nodes.len();
                nodes.push(TreeNode {
                    id,
                    level: i + 1,
                    rank: rank0 + 1,
                    token,
                    parent,
                    score,
                });
                this_level.push(id);
            }
        }
        prev_level = this_level;
    }
    Ok(DraftTree {
        n_levels: n,
        k,
        nodes,
        shape: TreeShape::Full,
    })
}

/// Verifies the drafts of `tree` against the logits of its own tree plan.
///
/// Starting from the ordinary next-token pick at the last context slot, the
/// walk scans each level's available candidates in rank order; a match is
/// accepted and the next pick is read at that candidate's slot. In the
/// efficient shape only rank-1 acceptances can continue (deeper levels hang
/// off the spine); in the full shape the walk descends into the matched
/// node's own children regardless of rank.
pub fn verify(tree: &DraftTree, logits: &Logits, plan: &FlatPlan) -> Result<CandidateOutcome, TreeError> {
    verify_with_picker(tree, logits, plan, greedy_pick_checked)
}

fn greedy_pick_checked(row: &[f64]) -> Token {
    greedy_pick(row).expect("logit row validated non-empty")
}

/// `verify` with an explicit pick function (used by the fault-injection
/// harness; production callers want [`verify`]).
pub fn verify_with_picker(
    tree: &DraftTree,
    logits: &Logits,
    plan: &FlatPlan,
    pick: Picker,
) -> Result<CandidateOutcome, TreeError> {
    if logits.n_slots() != plan.n_slots() {
        return Err(TreeError::LogitsMismatch {
            got: logits.n_slots(),
            expected: plan.n_slots(),
        });
    }
    let mut a = pick(logits.row(plan.ctx_len - 1));
    let mut accepted = Vec::new();
    let mut last_node: Option<usize> = None;
    let mut parent: Option<usize> = None;
    for _level in 1..=tree.n_levels {
        let candidates = tree.children(parent);
        if candidates.is_empty() {
            break;
        }
        let Some(hit) = candidates.iter().find(|c| c.token == a) else {
            break;
        };
        accepted.push(a);
        let slot = plan
            .candidate_slot(hit.id)
            .ok_or(TreeError::Malformed(format!("node {} has no slot", hit.id)))?;
        a = pick(logits.row(slot));
        last_node = Some(hit.id);
        parent = Some(hit.id);
    }
    Ok(CandidateOutcome {
        accepted,
        last_node,
        ar_token: a,
    })
}

/// The index of the mask group that seeds the next pass: the group owned by
/// the last accepted candidate, or the root-fallback group when nothing was
/// accepted.
pub fn next_group(plan: &FlatPlan, outcome: &CandidateOutcome) -> Result<usize, TreeError> {
    plan.groups
        .iter()
        .position(|g| g.owner == outcome.last_node)
        .ok_or(TreeError::UnknownNode(outcome.last_node))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::build_tree_plan;

    fn row_with(vocab: usize, pairs: &[(Token, f64)]) -> Vec<f64> {
        let mut r = vec![-10.0; vocab];
        for &(t, s) in pairs {
            r[t as usize] = s;
        }
        r
    }

    #[test]
    fn efficient_tree_structure() {
        // Level 1: A=1 (0.6), B=2 (0.3); level 2: C=3, D=4 children of A.
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.nodes.len(), 4);
        assert_eq!(tree.nodes[0].token, 1);
        assert_eq!(tree.nodes[1].token, 2);
        assert_eq!(tree.nodes[2].parent, Some(0));
        assert_eq!(tree.nodes[3].parent, Some(0));
        assert_eq!(tree.render(), "1: 1: 1\n1: 2: 2\n2: 1: 3\n2: 2: 4\n");
    }

    #[test]
    fn efficient_tree_fig5_shape() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..16).map(|v| ((v * 5 + i * 3) % 13) as f64).collect())
            .collect();
        let tree = build_efficient_tree(&rows, 3).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.nodes.len(), 12);
        for level in 1..4 {
            let with_children: Vec<usize> = tree
                .nodes
                .iter()
                .filter(|n| n.level == level && !tree.children(Some(n.id)).is_empty())
                .map(|n| n.rank)
                .collect();
            assert_eq!(with_children, vec![1]);
        }
    }

    #[test]
    fn tie_at_kth_place_prefers_lower_token_id() {
        let rows = vec![row_with(8, &[(5, 1.0), (6, 0.5), (2, 0.5)])];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        assert_eq!(tree.nodes[1].token, 2);
    }

    #[test]
    fn full_tree_node_counts() {
        let rows: Vec<Vec<f64>> = (0..2).map(|i| row_with(8, &[(i, 1.0), (i + 3, 0.5)])).collect();
        let tree = build_full_tree(&rows, 2).unwrap();
        tree.validate().unwrap();
        assert_eq!(tree.nodes.len(), 6);

        let rows3: Vec<Vec<f64>> = (0..3).map(|i| row_with(8, &[(i, 1.0), (i + 3, 0.5)])).collect();
        let tree3 = build_full_tree(&rows3, 2).unwrap();
        tree3.validate().unwrap();
        assert_eq!(tree3.nodes.len(), 2 + 4 + 8);
    }

    #[test]
    fn full_tree_level1_matches_efficient() {
        let rows = vec![row_with(8, &[(1, 0.9), (4, 0.2)])];
        let full = build_full_tree(&rows, 2).unwrap();
        let eff = build_efficient_tree(&rows, 2).unwrap();
        assert_eq!(full.nodes.len(), eff.nodes.len());
        for (a, b) in full.nodes.iter().zip(&eff.nodes) {
            assert_eq!((a.token, a.level, a.rank, a.parent), (b.token, b.level, b.rank, b.parent));
        }
    }

    /// Synthetic logits for a tree plan: the last context slot and every
    /// candidate slot get a chosen argmax token; everything else is flat.
    fn plan_logits(plan: &FlatPlan, vocab: usize, picks: &[(usize, Token)]) -> Logits {
        let mut rows = vec![vec![0.0; vocab]; plan.n_slots()];
        for &(slot, tok) in picks {
            rows[slot][tok as usize] = 5.0;
        }
        Logits::from_rows(rows)
    }

    // Hand-traced acceptance walk: level1 = [A=1, B=2], level2 = [C=3, D=4]
    // under A. Last-slot pick = A, pick at A's slot = D, D matches rank 2 at
    // level 2, pick at D's slot = F=6: accepted [A, D], ar_token F.
    #[test]
    fn verify_three_token_acceptance() {
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let ctx: Vec<Token> = vec![7, 7, 7];
        let plan = build_tree_plan(&ctx, &tree, 2).unwrap();
        let a_slot = plan.candidate_slot(0).unwrap();
        let d_slot = plan.candidate_slot(3).unwrap();
        let logits = plan_logits(&plan, 8, &[(2, 1), (a_slot, 4), (d_slot, 6)]);
        let outcome = verify(&tree, &logits, &plan).unwrap();
        assert_eq!(outcome.accepted, vec![1, 4]);
        assert_eq!(outcome.ar_token, 6);
        assert_eq!(outcome.last_node, Some(3));
        assert_eq!(outcome.accepted.len() + 1, 3); // n + 1 max this pass
        assert_eq!(next_group(&plan, &outcome).unwrap(), plan.groups.iter().position(|g| g.owner == Some(3)).unwrap());
    }

    #[test]
    fn verify_zero_acceptance_falls_back_to_root() {
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let ctx: Vec<Token> = vec![7, 7];
        let plan = build_tree_plan(&ctx, &tree, 2).unwrap();
        let logits = plan_logits(&plan, 8, &[(1, 5)]); // Z = 5, not in level 1
        let outcome = verify(&tree, &logits, &plan).unwrap();
        assert!(outcome.accepted.is_empty());
        assert_eq!(outcome.ar_token, 5);
        assert_eq!(outcome.last_node, None);
        assert_eq!(next_group(&plan, &outcome).unwrap(), 0); // root-fallback group
    }

    #[test]
    fn verify_rank2_acceptance_is_terminal_in_efficient_shape() {
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let ctx: Vec<Token> = vec![7];
        let plan = build_tree_plan(&ctx, &tree, 2).unwrap();
        let b_slot = plan.candidate_slot(1).unwrap();
        // Last-slot pick = B (rank 2); pick at B's slot = 3, which exists at
        // level 2 but only as a child of A, so the walk must stop.
        let logits = plan_logits(&plan, 8, &[(0, 2), (b_slot, 3)]);
        let outcome = verify(&tree, &logits, &plan).unwrap();
        assert_eq!(outcome.accepted, vec![2]);
        assert_eq!(outcome.ar_token, 3);
        assert_eq!(outcome.last_node, Some(1));
    }

    #[test]
    fn verify_full_shape_descends_under_any_rank() {
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_full_tree(&rows, 2).unwrap();
        let ctx: Vec<Token> = vec![7];
        let plan = build_tree_plan(&ctx, &tree, 2).unwrap();
        // Accept B (rank 2 at level 1) then its own child 4.
        let b = tree.nodes.iter().find(|n| n.level == 1 && n.token == 2).unwrap().id;
        let b_child_4 = tree
            .nodes
            .iter()
            .find(|n| n.parent == Some(b) && n.token == 4)
            .unwrap()
            .id;
        let logits = plan_logits(
            &plan,
            8,
            &[
                (0, 2),
                (plan.candidate_slot(b).unwrap(), 4),
                (plan.candidate_slot(b_child_4).unwrap(), 7),
            ],
        );
        let outcome = verify(&tree, &logits, &plan).unwrap();
        assert_eq!(outcome.accepted, vec![2, 4]);
        assert_eq!(outcome.ar_token, 7);
        assert_eq!(outcome.last_node, Some(b_child_4));
    }

    #[test]
    fn verify_all_rank1_chain_selects_deepest_group() {
        let rows = vec![
            row_with(8, &[(1, 0.6), (2, 0.3)]),
            row_with(8, &[(3, 0.9), (4, 0.5)]),
        ];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let ctx: Vec<Token> = vec![7];
        let plan = build_tree_plan(&ctx, &tree, 2).unwrap();
        let logits = plan_logits(
            &plan,
            8,
            &[
                (0, 1),
                (plan.candidate_slot(0).unwrap(), 3),
                (plan.candidate_slot(2).unwrap(), 6),
            ],
        );
        let outcome = verify(&tree, &logits, &plan).unwrap();
        assert_eq!(outcome.accepted, vec![1, 3]);
        assert_eq!(outcome.last_node, Some(2)); // deepest rank-1 node
        let g = next_group(&plan, &outcome).unwrap();
        assert_eq!(plan.groups[g].owner, Some(2));
    }

    #[test]
    fn next_group_rejects_unknown_node() {
        let rows = vec![row_with(8, &[(1, 0.6), (2, 0.3)])];
        let tree = build_efficient_tree(&rows, 2).unwrap();
        let plan = build_tree_plan(&[7], &tree, 1).unwrap();
        let outcome = CandidateOutcome {
            accepted: vec![1],
            last_node: Some(99),
            ar_token: 0,
        };
        assert!(matches!(next_group(&plan, &outcome), Err(TreeError::UnknownNode(Some(99)))));
    }
}
