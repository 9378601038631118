//! Renders the attention layout of every plan kind for a small context.
//!
//!   cargo run --example plan_gallery

use sartree::plan::{build_straightforward_plan, build_training_plan, build_tree_plan};
use sartree::tree::build_efficient_tree;

fn main() {
    let ctx = vec![10, 11, 12, 13];
    let m = 2;

    let training = build_training_plan(&ctx, m).unwrap();
    println!("training plan (4 context tokens, {m} masks):");
    println!("{}", training.render_attention());

    let chain = vec![20, 21];
    let straightforward = build_straightforward_plan(&ctx, &chain, m).unwrap();
    println!("straightforward plan (chain of {m} drafts, masks see context only):");
    println!("{}", straightforward.render_attention());

    // Two levels of drafts, two candidates per level; only the rank-1 node
    // of each level has children in the efficient shape.
    let rows = vec![
        vec![0.0, 0.9, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.8, 0.0, 0.3, 0.0, 0.0, 0.0],
    ];
    let tree = build_efficient_tree(&rows, 2).unwrap();
    let plan = build_tree_plan(&ctx, &tree, m).unwrap();
    println!("efficient tree plan ({} candidates, {} mask groups):", tree.nodes.len(), plan.groups.len());
    println!("{}", plan.render_attention());
}
