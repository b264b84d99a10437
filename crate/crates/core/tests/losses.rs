mod common;

use common::{abc_tree, assert_close, nucleus_tree, random_cut, random_leaf_cut, random_probs, random_scores, random_targets, random_tree, rng};
use hiercut_core::losses::{ce_loss, combined_loss, evaluate_loss, finite_diff_check, ft_loss, mce_loss, mft_loss};
use hiercut_core::{
    ClassTree, CombinedLossParams, LabelSet, LossError, LossKind, ProbField, Target, TargetField, TverskyParams,
};
use proptest::prelude::*;
use rand::Rng;

fn no_eps() -> TverskyParams {
    TverskyParams { epsilon: 0.0, ..TverskyParams::default() }
}

fn one_pixel(tree: &ClassTree, cut: &[&str], target: Target, y: &[f64]) -> (ProbField, TargetField) {
    let cut = LabelSet::new(tree, cut).unwrap();
    (ProbField::new(y.len(), y.to_vec()).unwrap(), TargetField::new(vec![target], cut).unwrap())
}

/// Scalar MCE written straight from the definition.
fn mce_oracle(tree: &ClassTree, probs: &ProbField, targets: &TargetField) -> f64 {
    let bg = tree.leaf_count();
    let cut = targets.cut();
    let (mut total, mut n) = (0.0, 0);
    for (i, t) in targets.labels().iter().enumerate() {
        let y = probs.row(i);
        let p: f64 = match *t {
            Target::Ignore => continue,
            Target::Background => y[bg],
            Target::Member(k) => tree.leaves_under(cut.members()[k]).map(|j| y[j]).sum(),
        };
        total -= p.max(1e-12).ln();
        n += 1;
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

/// Scalar MFT written straight from the definition.
fn mft_oracle(tree: &ClassTree, probs: &ProbField, targets: &TargetField, p: &TverskyParams) -> f64 {
    let bg = tree.leaf_count();
    let cut = targets.cut();
    let term = |hit: f64, all: f64| (1.0 - (hit + p.epsilon) / (p.alpha + (1.0 - p.alpha) * all + p.epsilon)).max(0.0).powf(p.gamma);
    let (mut total, mut n) = (0.0, 0);
    for (i, t) in targets.labels().iter().enumerate() {
        let y = probs.row(i);
        let mass = |k: usize| -> f64 { tree.leaves_under(cut.members()[k]).map(|j| y[j]).sum() };
        total += match *t {
            Target::Ignore => continue,
            Target::Background => term(y[bg], y[bg]),
            Target::Member(k) => term(mass(k), (0..cut.len()).map(mass).sum()),
        };
        n += 1;
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

#[test]
fn hand_values() {
    let tree = abc_tree();
    let y = [0.3, 0.2, 0.4, 0.1];
    let (probs, t) = one_pixel(&tree, &["K", "c"], Target::Member(0), &y);
    let mce = mce_loss(&probs, &t, &tree).unwrap().value;
    assert_close(mce, -(0.5f64).ln(), 1e-15);
    assert_close(mce, 0.693147, 1e-6);

    let mft = mft_loss(&probs, &t, &tree, &no_eps()).unwrap().value;
    let expected = (1.0f64 - 0.5 / (0.7 * 1.0 + 0.3 * 0.9)).powf(4.0 / 3.0);
    assert_close(mft, expected, 1e-15);
    assert_close(mft, 0.3805, 1e-4);

    let params = CombinedLossParams { tversky: no_eps(), ..CombinedLossParams::default() };
    let both = combined_loss(&probs, &t, &tree, &params).unwrap().value;
    assert_close(both, -(0.5f64).ln() + expected, 1e-15);

    let (probs, t) = one_pixel(&tree, &["a", "b", "c"], Target::Member(0), &y);
    assert_close(ce_loss(&probs, &t).unwrap().value, -(0.3f64).ln(), 1e-15);
    assert_close(ce_loss(&probs, &t).unwrap().value, 1.203973, 1e-6);

    let (probs, t) = one_pixel(&tree, &["a", "c"], Target::Member(0), &[0.6, 0.2, 0.1, 0.1]);
    let ft = ft_loss(&probs, &t, &no_eps()).unwrap().value;
    assert_close(ft, (1.0f64 - 0.6 / (0.7 + 0.3 * 0.7)).powf(4.0 / 3.0), 1e-15);
}

#[test]
fn redistribution_example_and_perfect_predictions() {
    let tree = abc_tree();
    let (p1, t) = one_pixel(&tree, &["K", "c"], Target::Member(0), &[0.3, 0.2, 0.4, 0.1]);
    let (p2, _) = one_pixel(&tree, &["K", "c"], Target::Member(0), &[0.5, 0.0, 0.4, 0.1]);
    assert_eq!(mce_loss(&p1, &t, &tree).unwrap().value, mce_loss(&p2, &t, &tree).unwrap().value);

    let (p, t) = one_pixel(&tree, &["K"], Target::Member(0), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(mce_loss(&p, &t, &tree).unwrap().value, 0.0);
    let (p, t) = one_pixel(&tree, &["K", "c"], Target::Member(0), &[0.25, 0.75, 0.0, 0.0]);
    assert_eq!(mft_loss(&p, &t, &tree, &no_eps()).unwrap().value, 0.0);
    let (p, t) = one_pixel(&tree, &["a", "c"], Target::Member(1), &[0.0, 0.0, 1.0, 0.0]);
    assert_eq!(ce_loss(&p, &t).unwrap().value, 0.0);
    assert_eq!(ft_loss(&p, &t, &no_eps()).unwrap().value, 0.0);
}

#[test]
fn degenerate_weights_reduce_to_one_term() {
    let mut r = rng(11);
    let tree = nucleus_tree();
    let cut = random_cut(&tree, &mut r);
    let probs = random_probs(30, tree.leaf_count() + 1, &mut r);
    let t = random_targets(30, &cut, &mut r);
    let tv = TverskyParams::default();
    let mce = mce_loss(&probs, &t, &tree).unwrap();
    let mft = mft_loss(&probs, &t, &tree, &tv).unwrap();
    let only_ce = combined_loss(&probs, &t, &tree, &CombinedLossParams { lambda_ce: 2.0, lambda_ft: 0.0, tversky: tv }).unwrap();
    let only_ft = combined_loss(&probs, &t, &tree, &CombinedLossParams { lambda_ce: 0.0, lambda_ft: 3.0, tversky: tv }).unwrap();
    assert_close(only_ce.value, 2.0 * mce.value, 1e-15);
    assert_close(only_ft.value, 3.0 * mft.value, 1e-15);
}

#[test]
fn all_ignore_batch_has_zero_gradient() {
    let mut r = rng(3);
    let tree = nucleus_tree();
    let cut = random_cut(&tree, &mut r);
    let scores = random_scores(12, tree.leaf_count() + 1, &mut r);
    let probs = ProbField::softmax(tree.leaf_count() + 1, &scores).unwrap();
    let t = TargetField::new(vec![Target::Ignore; 12], cut).unwrap();
    for kind in [LossKind::Mce, LossKind::Mft, LossKind::Combined] {
        let out = evaluate_loss(kind, &probs, &t, &tree, &CombinedLossParams::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.score_grad.iter().all(|g| *g == 0.0));
        assert!(out.prob_grad.iter().all(|g| *g == 0.0));
    }
}

#[test]
fn leaf_only_losses_reject_coarse_cuts() {
    let tree = abc_tree();
    let (p, t) = one_pixel(&tree, &["K", "c"], Target::Member(0), &[0.3, 0.2, 0.4, 0.1]);
    assert_eq!(ce_loss(&p, &t).unwrap_err(), LossError::NonLeafCut);
    assert_eq!(ft_loss(&p, &t, &TverskyParams::default()).unwrap_err(), LossError::NonLeafCut);
}

#[test]
fn mismatched_inputs_are_errors() {
    let tree = abc_tree();
    let other = nucleus_tree();
    let (p, t) = one_pixel(&tree, &["K", "c"], Target::Member(0), &[0.3, 0.2, 0.4, 0.1]);
    assert!(matches!(mce_loss(&p, &t, &other), Err(LossError::Hierarchy(_))));
    let t2 = TargetField::new(vec![Target::Background; 2], LabelSet::new(&tree, &["K"]).unwrap()).unwrap();
    assert!(matches!(mce_loss(&p, &t2, &tree), Err(LossError::RowMismatch { .. })));
    assert!(matches!(
        TargetField::new(vec![Target::Member(2)], LabelSet::new(&tree, &["K", "c"]).unwrap()),
        Err(LossError::MemberOutOfRange { .. })
    ));
    assert!(ProbField::new(4, vec![0.5, 0.5, 0.5, 0.5]).is_err());
}

#[test]
fn finite_differences_on_the_small_example() {
    // Twenty random pixels over five leaves.
    let tree = ClassTree::from_spec(&hiercut_core::NodeSpec::branch(
        "r",
        vec![
            hiercut_core::NodeSpec::branch("P", vec![hiercut_core::NodeSpec::leaf("p1"), hiercut_core::NodeSpec::leaf("p2")]),
            hiercut_core::NodeSpec::branch("Q", vec![hiercut_core::NodeSpec::leaf("q1"), hiercut_core::NodeSpec::leaf("q2")]),
            hiercut_core::NodeSpec::leaf("s"),
        ],
    ))
    .unwrap();
    let mut r = rng(5);
    let cut = LabelSet::new(&tree, &["P", "q2", "s"]).unwrap();
    let scores = random_scores(20, 6, &mut r);
    let t = random_targets(20, &cut, &mut r);
    let params = CombinedLossParams::default();
    for kind in [LossKind::Mce, LossKind::Mft] {
        let err = finite_diff_check(kind, &scores, &t, &tree, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "{} {err}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn singleton_cuts_reduce_exactly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_leaf_cut(&tree, &mut r);
        let n = r.gen_range(1..=20);
        let probs = random_probs(n, tree.leaf_count() + 1, &mut r);
        let t = random_targets(n, &cut, &mut r);
        let tv = TverskyParams::default();
        let (ce, mce) = (ce_loss(&probs, &t).unwrap(), mce_loss(&probs, &t, &tree).unwrap());
        prop_assert!((ce.value - mce.value).abs() <= 1e-12);
        let (ft, mft) = (ft_loss(&probs, &t, &tv).unwrap(), mft_loss(&probs, &t, &tree, &tv).unwrap());
        prop_assert!((ft.value - mft.value).abs() <= 1e-12);
        for (a, b) in ce.score_grad.iter().zip(&mce.score_grad).chain(ft.score_grad.iter().zip(&mft.score_grad)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn redistribution_within_a_member_is_invisible(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_cut(&tree, &mut r);
        let n = r.gen_range(1..=20);
        let w = tree.leaf_count() + 1;
        let probs = random_probs(n, w, &mut r);
        let t = random_targets(n, &cut, &mut r);
        let mut moved = probs.as_slice().to_vec();
        for i in 0..n {
            for k in 0..cut.len() {
                let set = cut.leaves(k);
                let mass: f64 = set.iter().map(|&j| moved[i * w + j]).sum();
                let weights: Vec<f64> = set.iter().map(|_| r.gen_range(0.0..1.0)).collect();
                let total: f64 = weights.iter().sum();
                for (&j, wt) in set.iter().zip(&weights) {
                    moved[i * w + j] = mass * wt / total;
                }
            }
        }
        let moved = ProbField::new(w, moved).unwrap();
        let tv = TverskyParams::default();
        let d_mce = mce_loss(&probs, &t, &tree).unwrap().value - mce_loss(&moved, &t, &tree).unwrap().value;
        let d_mft = mft_loss(&probs, &t, &tree, &tv).unwrap().value - mft_loss(&moved, &t, &tree, &tv).unwrap().value;
        prop_assert!(d_mce.abs() <= 1e-12, "mce moved by {}", d_mce);
        prop_assert!(d_mft.abs() <= 1e-12, "mft moved by {}", d_mft);
    }

    #[test]
    fn gradients_are_equal_within_a_member(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_cut(&tree, &mut r);
        let n = r.gen_range(1..=20);
        let w = tree.leaf_count() + 1;
        let probs = random_probs(n, w, &mut r);
        let t = random_targets(n, &cut, &mut r);
        let params = CombinedLossParams::default();
        for kind in [LossKind::Mce, LossKind::Mft, LossKind::Combined] {
            let g = evaluate_loss(kind, &probs, &t, &tree, &params).unwrap().prob_grad;
            for i in 0..n {
                for k in 0..cut.len() {
                    let set = cut.leaves(k);
                    for &j in set {
                        prop_assert!((g[i * w + j] - g[i * w + set[0]]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn values_match_scalar_oracles(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_cut(&tree, &mut r);
        let n = r.gen_range(1..=20);
        let probs = random_probs(n, tree.leaf_count() + 1, &mut r);
        let t = random_targets(n, &cut, &mut r);
        let tv = TverskyParams { alpha: r.gen_range(0.05..0.95), gamma: r.gen_range(0.5..3.0), epsilon: 1e-6 };
        prop_assert!((mce_loss(&probs, &t, &tree).unwrap().value - mce_oracle(&tree, &probs, &t)).abs() <= 1e-12);
        prop_assert!((mft_loss(&probs, &t, &tree, &tv).unwrap().value - mft_oracle(&tree, &probs, &t, &tv)).abs() <= 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_cut(&tree, &mut r);
        let probs = random_probs(10, tree.leaf_count() + 1, &mut r);
        let t = random_targets(10, &cut, &mut r);
        for kind in [LossKind::Mce, LossKind::Mft, LossKind::Combined] {
            prop_assert!(evaluate_loss(kind, &probs, &t, &tree, &CombinedLossParams::default()).unwrap().value >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn moving_background_mass_into_the_target_lowers_the_loss(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let cut = random_cut(&tree, &mut r);
        let w = tree.leaf_count() + 1;
        let probs = random_probs(1, w, &mut r);
        let k = r.gen_range(0..cut.len());
        let t = TargetField::new(vec![Target::Member(k)], cut.clone()).unwrap();
        let mut y = probs.as_slice().to_vec();
        let delta = y[w - 1] * 0.5;
        y[w - 1] -= delta;
        y[cut.leaves(k)[0]] += delta;
        let better = ProbField::new(w, y).unwrap();
        let tv = TverskyParams::default();
        prop_assert!(mce_loss(&better, &t, &tree).unwrap().value < mce_loss(&probs, &t, &tree).unwrap().value);
        prop_assert!(mft_loss(&better, &t, &tree, &tv).unwrap().value < mft_loss(&probs, &t, &tree, &tv).unwrap().value);
    }

    #[test]
    fn score_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tree = random_tree(&mut r);
        let n = r.gen_range(1..=12);
        let w = tree.leaf_count() + 1;
        let scores = random_scores(n, w, &mut r);
        let params = CombinedLossParams::default();
        let coarse = random_targets(n, &random_cut(&tree, &mut r), &mut r);
        let leafy = random_targets(n, &random_leaf_cut(&tree, &mut r), &mut r);
        for kind in [LossKind::Mce, LossKind::Mft, LossKind::Combined] {
            let err = finite_diff_check(kind, &scores, &coarse, &tree, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{} {}", kind.name(), err);
        }
        for kind in [LossKind::Ce, LossKind::Ft] {
            let err = finite_diff_check(kind, &scores, &leafy, &tree, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-4, "{} {}", kind.name(), err);
        }
    }
}
