#![allow(dead_code)]

use hiercut_core::{ClassTree, LabelSet, NodeId, NodeSpec, ProbField, Target, TargetField};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// root -> {K -> {a, b}, c}
pub fn abc_tree() -> ClassTree {
    ClassTree::from_spec(&NodeSpec::branch(
        "root",
        vec![NodeSpec::branch("K", vec![NodeSpec::leaf("a"), NodeSpec::leaf("b")]), NodeSpec::leaf("c")],
    ))
    .unwrap()
}

/// Four branches of 3, 3, 3 and 2 leaves.
pub fn nucleus_tree() -> ClassTree {
    let branch = |name: &str, leaves: &[&str]| {
        NodeSpec::branch(name, leaves.iter().map(|l| NodeSpec::leaf(*l)).collect())
    };
    ClassTree::from_spec(&NodeSpec::branch(
        "nucleus",
        vec![
            branch("epithelial", &["normal", "dysplastic", "neoplastic"]),
            branch("inflammatory", &["lymphocyte", "macrophage", "neutrophil"]),
            branch("connective", &["fibroblast", "muscle", "endothelial"]),
            branch("other", &["dead", "miscellaneous"]),
        ],
    ))
    .unwrap()
}

/// Random tree of depth at most 3 with at least two leaves.
pub fn random_tree(rng: &mut ChaCha8Rng) -> ClassTree {
    fn grow(rng: &mut ChaCha8Rng, depth: usize, counter: &mut usize) -> NodeSpec {
        *counter += 1;
        let name = format!("n{counter}");
        if depth == 0 || rng.gen_bool(0.35) {
            return NodeSpec::leaf(name);
        }
        let k = rng.gen_range(1..=3);
        NodeSpec::branch(name, (0..k).map(|_| grow(rng, depth - 1, counter)).collect())
    }
    loop {
        let mut counter = 0;
        let k = rng.gen_range(2..=4);
        let children = (0..k).map(|_| grow(rng, 2, &mut counter)).collect();
        let tree = ClassTree::from_spec(&NodeSpec::branch("root", children)).unwrap();
        if tree.leaf_count() >= 2 {
            return tree;
        }
    }
}

/// Random antichain of non-root nodes, possibly non-exhaustive.
pub fn random_cut(tree: &ClassTree, rng: &mut ChaCha8Rng) -> LabelSet {
    let mut nodes: Vec<NodeId> = (0..tree.node_count()).map(NodeId).filter(|&n| n != tree.root()).collect();
    nodes.shuffle(rng);
    let mut chosen: Vec<NodeId> = Vec::new();
    for n in nodes {
        if rng.gen_bool(0.6) && chosen.iter().all(|&c| !tree.is_ancestor(c, n) && !tree.is_ancestor(n, c)) {
            chosen.push(n);
        }
    }
    if chosen.is_empty() {
        chosen.push(tree.leaf_order()[0]);
    }
    let names: Vec<&str> = chosen.iter().map(|&n| tree.name(n)).collect();
    LabelSet::new(tree, &names).unwrap()
}

/// Random non-empty subset of leaves.
pub fn random_leaf_cut(tree: &ClassTree, rng: &mut ChaCha8Rng) -> LabelSet {
    let mut leaves: Vec<&str> = tree.leaf_order().iter().filter(|_| rng.gen_bool(0.6)).map(|&n| tree.name(n)).collect();
    if leaves.is_empty() {
        leaves.push(tree.name(tree.leaf_order()[0]));
    }
    leaves.shuffle(rng);
    LabelSet::new(tree, &leaves).unwrap()
}

pub fn random_scores(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * width).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

pub fn random_probs(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> ProbField {
    ProbField::softmax(width, &random_scores(rows, width, rng)).unwrap()
}

/// Targets with roughly 20% background and 10% ignore.
pub fn random_targets(rows: usize, cut: &LabelSet, rng: &mut ChaCha8Rng) -> TargetField {
    let labels = (0..rows)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < 0.2 {
                Target::Background
            } else if u < 0.3 {
                Target::Ignore
            } else {
                Target::Member(rng.gen_range(0..cut.len()))
            }
        })
        .collect();
    TargetField::new(labels, cut.clone()).unwrap()
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tolerance {tol})");
}
