//! Randomized finite-difference checks of the four losses and of the
//! network under the combined loss.

use hiercut_core::diffnet::{MicroUNet, UNetConfig};
use hiercut_core::losses::finite_diff_check;
use hiercut_core::seed::{derive_seed, rng};
use hiercut_core::train::{network_gradient_check, random_patch};
use hiercut_core::{ClassTree, CombinedLossParams, LabelSet, LossKind, NodeId, Target, TargetField};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub batches: usize,
    pub max_pixels: usize,
    pub losses: Vec<LossKind>,
    pub loss_tolerance: f64,
    /// Skip the network check when `None`.
    pub network_params: Option<usize>,
    pub network_tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            batches: 100,
            max_pixels: 50,
            losses: vec![LossKind::Ce, LossKind::Mce, LossKind::Ft, LossKind::Mft],
            loss_tolerance: 1e-4,
            network_params: Some(50),
            network_tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Worst relative error per loss over all batches.
    pub losses: Vec<(LossKind, f64)>,
    pub network: Option<f64>,
}

impl GradcheckReport {
    pub fn passed(&self, opts: &GradcheckOptions) -> bool {
        self.losses.iter().all(|(_, e)| *e <= opts.loss_tolerance)
            && self.network.is_none_or(|e| e <= opts.network_tolerance)
    }
}

/// A random antichain of `tree`. Each subtree is skipped, taken whole, or
/// split further; the result is never empty.
pub fn random_cut(tree: &ClassTree, rng: &mut ChaCha8Rng) -> LabelSet {
    fn pick(tree: &ClassTree, node: NodeId, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        if tree.is_leaf(node) {
            if rng.gen_bool(0.8) {
                out.push(tree.name(node).into());
            }
            return;
        }
        match rng.gen_range(0..3) {
            0 => {}
            1 => out.push(tree.name(node).into()),
            _ => {
                for &c in tree.children(node) {
                    pick(tree, c, rng, out);
                }
            }
        }
    }
    let mut names = Vec::new();
    for &c in tree.children(tree.root()) {
        pick(tree, c, rng, &mut names);
    }
    if names.is_empty() {
        names.push(tree.name(tree.leaf_order()[0]).into());
    }
    LabelSet::new(tree, &names).expect("picked nodes form an antichain")
}

/// A random non-empty subset of the leaves.
pub fn random_leaf_cut(tree: &ClassTree, rng: &mut ChaCha8Rng) -> LabelSet {
    let mut names: Vec<&str> = tree.leaf_order().iter().filter(|_| rng.gen_bool(0.6)).map(|&l| tree.name(l)).collect();
    if names.is_empty() {
        names.push(tree.name(tree.leaf_order()[rng.gen_range(0..tree.leaf_count())]));
    }
    LabelSet::new(tree, &names).expect("leaves form an antichain")
}

/// Random labels: about 20% background, 10% ignored, the rest members.
pub fn random_targets(n: usize, cut: &LabelSet, rng: &mut ChaCha8Rng) -> TargetField {
    let labels = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0 | 1 => Target::Background,
            2 => Target::Ignore,
            _ => Target::Member(rng.gen_range(0..cut.len())),
        })
        .collect();
    TargetField::new(labels, cut.clone()).expect("members in range")
}

pub fn run_gradcheck(tree: &ClassTree, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::Usage(format!("step {} must be positive", opts.h)));
    }
    let width = tree.leaf_count() + 1;
    let params = CombinedLossParams::default();
    let mut losses = Vec::new();
    for (slot, &kind) in opts.losses.iter().enumerate() {
        let mut r = rng(derive_seed(opts.seed, slot as u64 + 1));
        let mut worst: f64 = 0.0;
        for _ in 0..opts.batches {
            let n = r.gen_range(1..=opts.max_pixels.max(1));
            let cut = match kind {
                LossKind::Ce | LossKind::Ft => random_leaf_cut(tree, &mut r),
                _ => random_cut(tree, &mut r),
            };
            let targets = random_targets(n, &cut, &mut r);
            let scores: Vec<f64> = (0..n * width).map(|_| r.gen_range(-4.0..4.0)).collect();
            let err = finite_diff_check(kind, &scores, &targets, tree, &params, opts.h).map_err(|e| Error::Runtime(e.to_string()))?;
            worst = worst.max(err);
        }
        losses.push((kind, worst));
    }
    let network = match opts.network_params {
        None => None,
        Some(samples) => {
            let mut r = rng(derive_seed(opts.seed, 0x4E45_5400));
            let net = MicroUNet::init(UNetConfig::new(width), r.gen()).map_err(|e| Error::Runtime(e.to_string()))?;
            let patch = random_patch(3, 8, 8, r.gen());
            let cut = random_cut(tree, &mut r);
            let targets = random_targets(64, &cut, &mut r);
            Some(network_gradient_check(&net, tree, &patch, &targets, &params, opts.h, samples, r.gen())?)
        }
    };
    Ok(GradcheckReport { losses, network })
}
