//! Cross entropy and focal Tversky losses, plain and cut-aware.
//!
//! All losses take per-pixel softmax outputs over `c` leaf classes plus one
//! trailing background channel. The cut-aware variants sum the predicted leaf
//! probabilities over each `S_k` before applying the usual formula, so a
//! dataset labelled at a coarse level still trains every leaf output: the
//! gradient of a sum reaches each of its terms unchanged.
//!
//! Every loss is a mean over the non-ignored pixels and returns its gradient
//! both with respect to the probabilities and with respect to the pre-softmax
//! scores.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{ClassTree, HierarchyError, LabelSet};
use crate::math;

/// Lower bound applied to a probability before taking its logarithm.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("probability field has {found} channels, tree needs {expected} (leaves + background)")]
    Channels { expected: usize, found: usize },
    #[error("{probs} probability rows but {targets} targets")]
    RowMismatch { probs: usize, targets: usize },
    #[error("probability data length {len} is not a multiple of row width {width}")]
    Ragged { len: usize, width: usize },
    #[error("row {row} is not a distribution (sum {sum}, or a negative entry)")]
    NotADistribution { row: usize, sum: f64 },
    #[error("target member index {index} out of range for a cut with {members} members")]
    MemberOutOfRange { index: usize, members: usize },
    #[error("this loss needs a cut made only of leaves")]
    NonLeafCut,
    #[error("invalid Tversky parameters: alpha must lie in (0,1), gamma > 0 and epsilon >= 0")]
    BadTversky,
    #[error("combination weights must be nonnegative and finite")]
    BadWeights,
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Per-pixel probabilities: `rows` × (`c` + 1), background last.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    width: usize,
    data: Vec<f64>,
}

impl ProbField {
    /// Wraps row-major probabilities, checking every row is a distribution.
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if width == 0 || data.len() % width != 0 {
            return Err(LossError::Ragged { len: data.len(), width });
        }
        for (row, chunk) in data.chunks_exact(width).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(LossError::NotADistribution { row, sum });
            }
        }
        Ok(Self { width, data })
    }

    /// Row-wise softmax of pre-softmax scores.
    pub fn softmax(width: usize, scores: &[f64]) -> Result<Self, LossError> {
        if width == 0 || scores.len() % width != 0 {
            return Err(LossError::Ragged { len: scores.len(), width });
        }
        let mut data = vec![0.0; scores.len()];
        for (z, y) in scores.chunks_exact(width).zip(data.chunks_exact_mut(width)) {
            softmax_row(z, y);
        }
        Ok(Self { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn softmax_row(z: &[f64], y: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (yi, &zi) in y.iter_mut().zip(z) {
        *yi = math::exp(zi - max);
        sum += *yi;
    }
    for yi in y.iter_mut() {
        *yi /= sum;
    }
}

/// Ground truth for one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Background,
    /// Contributes nothing to any loss.
    Ignore,
    /// Index into the batch's [`LabelSet`].
    Member(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetField {
    labels: Vec<Target>,
    cut: LabelSet,
}

impl TargetField {
    pub fn new(labels: Vec<Target>, cut: LabelSet) -> Result<Self, LossError> {
        for t in &labels {
            if let Target::Member(k) = *t {
                if k >= cut.len() {
                    return Err(LossError::MemberOutOfRange { index: k, members: cut.len() });
                }
            }
        }
        Ok(Self { labels, cut })
    }

    pub fn labels(&self) -> &[Target] {
        &self.labels
    }

    pub fn cut(&self) -> &LabelSet {
        &self.cut
    }

    fn counted(&self) -> usize {
        self.labels.iter().filter(|t| **t != Target::Ignore).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self { alpha: 0.7, gamma: 4.0 / 3.0, epsilon: 1e-6 }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.alpha > 0.0
            && self.alpha < 1.0
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && self.epsilon >= 0.0
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LossError::BadTversky)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossParams {
    pub lambda_ce: f64,
    pub lambda_ft: f64,
    #[serde(default)]
    pub tversky: TverskyParams,
}

impl Default for CombinedLossParams {
    fn default() -> Self {
        Self { lambda_ce: 1.0, lambda_ft: 1.0, tversky: TverskyParams::default() }
    }
}

impl CombinedLossParams {
    /// Weights must be nonnegative here so the degenerate single-loss cases
    /// can be expressed; training configs reject zero weights separately.
    pub fn validate(&self) -> Result<(), LossError> {
        let w_ok = |w: f64| w >= 0.0 && w.is_finite();
        if !w_ok(self.lambda_ce) || !w_ok(self.lambda_ft) {
            return Err(LossError::BadWeights);
        }
        self.tversky.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Mce,
    Ft,
    Mft,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Ce, LossKind::Mce, LossKind::Ft, LossKind::Mft, LossKind::Combined];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Mce => "mce",
            LossKind::Ft => "ft",
            LossKind::Mft => "mft",
            LossKind::Combined => "combined",
        }
    }
}

/// Loss value with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// dL/dy, laid out like the probability field.
    pub prob_grad: Vec<f64>,
    /// dL/dz with the softmax Jacobian applied.
    pub score_grad: Vec<f64>,
}

impl LossOutput {
    fn from_prob_grad(value: f64, probs: &ProbField, prob_grad: Vec<f64>) -> Self {
        let score_grad = softmax_backward(probs, &prob_grad);
        Self { value, prob_grad, score_grad }
    }
}

/// dL/dz_j = y_j (g_j - sum_l y_l g_l), row by row.
pub fn softmax_backward(probs: &ProbField, prob_grad: &[f64]) -> Vec<f64> {
    let w = probs.width;
    let mut out = vec![0.0; prob_grad.len()];
    for ((y, g), dz) in probs.data.chunks_exact(w).zip(prob_grad.chunks_exact(w)).zip(out.chunks_exact_mut(w)) {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..w {
            dz[j] = y[j] * (g[j] - dot);
        }
    }
    out
}

fn check_shapes(probs: &ProbField, targets: &TargetField, leaves: usize) -> Result<(), LossError> {
    if probs.width != leaves + 1 {
        return Err(LossError::Channels { expected: leaves + 1, found: probs.width });
    }
    if probs.rows() != targets.labels.len() {
        return Err(LossError::RowMismatch { probs: probs.rows(), targets: targets.labels.len() });
    }
    Ok(())
}

fn check_leaf_cut(probs: &ProbField, targets: &TargetField) -> Result<(), LossError> {
    if !targets.cut.is_leaf_cut() {
        return Err(LossError::NonLeafCut);
    }
    // Leaf cuts carry no tree; their largest leaf index bounds the width.
    let widest = (0..targets.cut.len()).map(|k| targets.cut.leaves(k)[0]).max().unwrap_or(0);
    if widest + 1 >= probs.width {
        return Err(LossError::Channels { expected: widest + 2, found: probs.width });
    }
    if probs.rows() != targets.labels.len() {
        return Err(LossError::RowMismatch { probs: probs.rows(), targets: targets.labels.len() });
    }
    Ok(())
}

fn mean_scale(targets: &TargetField) -> f64 {
    match targets.counted() {
        0 => 0.0,
        n => 1.0 / n as f64,
    }
}

/// Plain cross entropy on a leaf cut.
pub fn ce_loss(probs: &ProbField, targets: &TargetField) -> Result<LossOutput, LossError> {
    check_leaf_cut(probs, targets)?;
    let w = probs.width;
    let bg = w - 1;
    let scale = mean_scale(targets);
    let mut total = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, t) in targets.labels.iter().enumerate() {
        let y = probs.row(i);
        let j = match *t {
            Target::Ignore => continue,
            Target::Background => bg,
            Target::Member(k) => targets.cut.leaves(k)[0],
        };
        let p = y[j];
        total += -math::ln(p.max(LOG_GUARD));
        if p > LOG_GUARD {
            grad[i * w + j] = -scale / p;
        }
    }
    Ok(LossOutput::from_prob_grad(total * scale, probs, grad))
}

/// Cross entropy on cut-level probabilities `sum_{j in S_k} y_j`.
pub fn mce_loss(probs: &ProbField, targets: &TargetField, tree: &ClassTree) -> Result<LossOutput, LossError> {
    targets.cut.check_tree(tree)?;
    check_shapes(probs, targets, tree.leaf_count())?;
    let w = probs.width;
    let bg = w - 1;
    let scale = mean_scale(targets);
    let mut total = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, t) in targets.labels.iter().enumerate() {
        let y = probs.row(i);
        let g = &mut grad[i * w..(i + 1) * w];
        match *t {
            Target::Ignore => {}
            Target::Background => {
                let p = y[bg];
                total += -math::ln(p.max(LOG_GUARD));
                if p > LOG_GUARD {
                    g[bg] = -scale / p;
                }
            }
            Target::Member(k) => {
                let set = targets.cut.leaves(k);
                let mut p = 0.0;
                for &j in set {
                    p += y[j];
                }
                total += -math::ln(p.max(LOG_GUARD));
                if p > LOG_GUARD {
                    // The sum node hands the same upstream gradient to every term.
                    let d = -scale / p;
                    for &j in set {
                        g[j] = d;
                    }
                }
            }
        }
    }
    Ok(LossOutput::from_prob_grad(total * scale, probs, grad))
}

/// One focal Tversky term and its derivatives with respect to the target mass
/// `hit` and the total mass `all`:
/// `(1 - (hit + eps) / (alpha + (1 - alpha) all + eps))^gamma`.
fn tversky_term(hit: f64, all: f64, p: &TverskyParams) -> (f64, f64, f64) {
    let denom = p.alpha + (1.0 - p.alpha) * all + p.epsilon;
    let ratio = (hit + p.epsilon) / denom;
    let base = (1.0 - ratio).max(0.0);
    let value = math::powf(base, p.gamma);
    if base == 0.0 && p.gamma <= 1.0 {
        // The derivative is unbounded at the optimum for gamma <= 1.
        return (value, 0.0, 0.0);
    }
    let d_ratio = if base == 0.0 { 0.0 } else { -p.gamma * math::powf(base, p.gamma - 1.0) };
    let d_hit = d_ratio / denom;
    let d_all = -d_ratio * (hit + p.epsilon) * (1.0 - p.alpha) / (denom * denom);
    (value, d_hit, d_all)
}

/// Focal Tversky loss on a leaf cut. Sums over classes run over the cut's
/// leaves; a background pixel is scored against the background channel alone.
pub fn ft_loss(probs: &ProbField, targets: &TargetField, params: &TverskyParams) -> Result<LossOutput, LossError> {
    params.validate()?;
    check_leaf_cut(probs, targets)?;
    let w = probs.width;
    let bg = w - 1;
    let scale = mean_scale(targets);
    let cut = &targets.cut;
    let mut total = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, t) in targets.labels.iter().enumerate() {
        let y = probs.row(i);
        let g = &mut grad[i * w..(i + 1) * w];
        match *t {
            Target::Ignore => {}
            Target::Background => {
                let (v, d_hit, d_all) = tversky_term(y[bg], y[bg], params);
                total += v;
                g[bg] = scale * (d_hit + d_all);
            }
            Target::Member(k) => {
                let target = cut.leaves(k)[0];
                let mut all = 0.0;
                for m in 0..cut.len() {
                    all += y[cut.leaves(m)[0]];
                }
                let (v, d_hit, d_all) = tversky_term(y[target], all, params);
                total += v;
                for m in 0..cut.len() {
                    g[cut.leaves(m)[0]] = scale * d_all;
                }
                g[target] += scale * d_hit;
            }
        }
    }
    Ok(LossOutput::from_prob_grad(total * scale, probs, grad))
}

/// Focal Tversky loss on cut-level probabilities. The total mass runs over
/// the cut members only, so uncovered leaves and background are excluded.
pub fn mft_loss(
    probs: &ProbField,
    targets: &TargetField,
    tree: &ClassTree,
    params: &TverskyParams,
) -> Result<LossOutput, LossError> {
    params.validate()?;
    targets.cut.check_tree(tree)?;
    check_shapes(probs, targets, tree.leaf_count())?;
    let w = probs.width;
    let bg = w - 1;
    let scale = mean_scale(targets);
    let cut = &targets.cut;
    let mut member_mass = vec![0.0; cut.len()];
    let mut total = 0.0;
    let mut grad = vec![0.0; probs.data.len()];
    for (i, t) in targets.labels.iter().enumerate() {
        let y = probs.row(i);
        let g = &mut grad[i * w..(i + 1) * w];
        match *t {
            Target::Ignore => {}
            Target::Background => {
                let (v, d_hit, d_all) = tversky_term(y[bg], y[bg], params);
                total += v;
                g[bg] = scale * (d_hit + d_all);
            }
            Target::Member(k) => {
                cut.project_into(y, &mut member_mass);
                let mut all = 0.0;
                for &mass in &member_mass {
                    all += mass;
                }
                let (v, d_hit, d_all) = tversky_term(member_mass[k], all, params);
                total += v;
                for m in 0..cut.len() {
                    let d = if m == k { scale * d_all + scale * d_hit } else { scale * d_all };
                    for &j in cut.leaves(m) {
                        g[j] = d;
                    }
                }
            }
        }
    }
    Ok(LossOutput::from_prob_grad(total * scale, probs, grad))
}

/// `lambda_ce * mce + lambda_ft * mft`.
pub fn combined_loss(
    probs: &ProbField,
    targets: &TargetField,
    tree: &ClassTree,
    params: &CombinedLossParams,
) -> Result<LossOutput, LossError> {
    params.validate()?;
    let ce = mce_loss(probs, targets, tree)?;
    let ft = mft_loss(probs, targets, tree, &params.tversky)?;
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| params.lambda_ce * x + params.lambda_ft * y).collect()
    };
    Ok(LossOutput {
        value: params.lambda_ce * ce.value + params.lambda_ft * ft.value,
        prob_grad: mix(&ce.prob_grad, &ft.prob_grad),
        score_grad: mix(&ce.score_grad, &ft.score_grad),
    })
}

pub fn evaluate_loss(
    kind: LossKind,
    probs: &ProbField,
    targets: &TargetField,
    tree: &ClassTree,
    params: &CombinedLossParams,
) -> Result<LossOutput, LossError> {
    match kind {
        LossKind::Ce => ce_loss(probs, targets),
        LossKind::Mce => mce_loss(probs, targets, tree),
        LossKind::Ft => ft_loss(probs, targets, &params.tversky),
        LossKind::Mft => mft_loss(probs, targets, tree, &params.tversky),
        LossKind::Combined => combined_loss(probs, targets, tree, params),
    }
}

/// Compares the analytic score gradient of `kind` against central differences
/// with step `h` on every score entry. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(
    kind: LossKind,
    scores: &[f64],
    targets: &TargetField,
    tree: &ClassTree,
    params: &CombinedLossParams,
    h: f64,
) -> Result<f64, LossError> {
    let width = tree.leaf_count() + 1;
    let probs = ProbField::softmax(width, scores)?;
    let analytic = evaluate_loss(kind, &probs, targets, tree, params)?.score_grad;
    let mut shifted = scores.to_vec();
    let mut worst: f64 = 0.0;
    for idx in 0..scores.len() {
        // Only the row holding `idx` changes; the other rows cancel exactly.
        shifted[idx] = scores[idx] + h;
        let plus = evaluate_loss(kind, &ProbField::softmax(width, &shifted)?, targets, tree, params)?.value;
        shifted[idx] = scores[idx] - h;
        let minus = evaluate_loss(kind, &ProbField::softmax(width, &shifted)?, targets, tree, params)?.value;
        shifted[idx] = scores[idx];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
