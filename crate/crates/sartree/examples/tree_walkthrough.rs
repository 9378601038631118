//! Builds draft trees from mask logits and walks one verification pass.
//!
//!   cargo run --example tree_walkthrough

use sartree::model::Logits;
use sartree::plan::build_tree_plan;
use sartree::tree::{build_efficient_tree, build_full_tree, next_group, verify};

fn peaked(vocab: usize, peaks: &[(usize, f64)]) -> Vec<f64> {
    let mut r = vec![0.0; vocab];
    for &(i, v) in peaks {
        r[i] = v;
    }
    r
}

fn main() {
    // Mask logits for two future positions: level 1 favors tokens 1 then 2,
    // level 2 favors 3 then 4.
    let rows = vec![peaked(8, &[(1, 0.6), (2, 0.3)]), peaked(8, &[(3, 0.9), (4, 0.5)])];

    let efficient = build_efficient_tree(&rows, 2).unwrap();
    println!("efficient tree (only rank-1 nodes branch):");
    println!("{}", efficient.render());

    let full = build_full_tree(&rows, 2).unwrap();
    println!("full tree (every node branches):");
    println!("{}", full.render());

    // Verification against synthetic per-slot argmaxes: the sequence row
    // picks token 1 (node 0), node 0's row picks 4 (its rank-2 child),
    // node 3's row picks 6, which no child matches.
    let ctx = vec![7, 7, 7];
    let plan = build_tree_plan(&ctx, &efficient, 2).unwrap();
    let mut logit_rows = vec![vec![0.0; 8]; plan.n_slots()];
    logit_rows[ctx.len() - 1][1] = 5.0;
    logit_rows[plan.candidate_slot(0).unwrap()][4] = 5.0;
    logit_rows[plan.candidate_slot(3).unwrap()][6] = 5.0;
    let outcome = verify(&efficient, &Logits::from_rows(logit_rows), &plan).unwrap();

    println!("accepted tokens: {:?}", outcome.accepted);
    println!("bonus token from the deepest accepted row: {}", outcome.ar_token);
    println!("tokens emitted this pass: {}", outcome.accepted.len() + 1);
    println!(
        "next pass drafts come from mask group {} (owned by node {:?})",
        next_group(&plan, &outcome).unwrap(),
        outcome.last_node
    );
}
