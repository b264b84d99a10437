//! Instance matching and panoptic quality.
//!
//! A predicted and a ground-truth instance form a true positive when they
//! carry the same class and their IoU is strictly above the threshold
//! (0.5 by default, which makes matches unique). Per class,
//!
//! ```text
//! PQ = sum_{(p,g) in TP} IoU(p, g) / (|TP| + |FP|/2 + |FN|/2)
//! ```
//!
//! and the summary is the mean PQ over classes with at least one
//! ground-truth instance.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::hierarchy::{ClassTree, HierarchyError, LabelSet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("map has {found} pixels, expected {expected}")]
    Size { expected: usize, found: usize },
    #[error("maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("pixel {pixel} belongs to instance {instance} but has background class")]
    UnclassedInstance { pixel: usize, instance: u32 },
    #[error("instance {instance} has pixels of class {first} and {second}")]
    MixedClasses { instance: u32, first: u32, second: u32 },
    #[error("class value {value} exceeds the {members} members of the cut")]
    ClassOutOfRange { value: u32, members: usize },
    #[error("empty instance")]
    EmptyInstance,
    #[error("IoU threshold {0} is below 0.5; matches would not be unique")]
    Threshold(f64),
    #[error("probability field has {found} values, expected {expected}")]
    ProbShape { expected: usize, found: usize },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

/// Two-channel ground truth (or prediction): instance ids and cut classes.
///
/// Instance 0 is "no instance"; class 0 is background and class `v >= 1`
/// means cut member `v - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    height: usize,
    width: usize,
    instances: Vec<u32>,
    classes: Vec<u32>,
}

impl MaskPair {
    pub fn new(height: usize, width: usize, instances: Vec<u32>, classes: Vec<u32>) -> Result<Self, MetricsError> {
        let n = height * width;
        for len in [instances.len(), classes.len()] {
            if len != n {
                return Err(MetricsError::Size { expected: n, found: len });
            }
        }
        let mut seen: BTreeMap<u32, u32> = BTreeMap::new();
        for (pixel, (&inst, &class)) in instances.iter().zip(&classes).enumerate() {
            if inst == 0 {
                continue;
            }
            if class == 0 {
                return Err(MetricsError::UnclassedInstance { pixel, instance: inst });
            }
            match seen.get(&inst) {
                Some(&first) if first != class => {
                    return Err(MetricsError::MixedClasses { instance: inst, first, second: class })
                }
                Some(_) => {}
                None => {
                    seen.insert(inst, class);
                }
            }
        }
        Ok(Self { height, width, instances, classes })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, instances: vec![0; height * width], classes: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn instances(&self) -> &[u32] {
        &self.instances
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    /// Checks that every class value names a member of an `m`-member cut.
    pub fn check_members(&self, m: usize) -> Result<(), MetricsError> {
        match self.classes.iter().find(|&&c| c as usize > m) {
            Some(&value) => Err(MetricsError::ClassOutOfRange { value, members: m }),
            None => Ok(()),
        }
    }

    /// Instance id → (class, pixel count), ascending by id.
    pub fn instance_table(&self) -> BTreeMap<u32, (u32, usize)> {
        let mut table = BTreeMap::new();
        for (&inst, &class) in self.instances.iter().zip(&self.classes) {
            if inst != 0 {
                table.entry(inst).or_insert((class, 0)).1 += 1;
            }
        }
        table
    }
}

/// IoU of two pixel sets given as ascending, duplicate-free index lists.
pub fn iou(a: &[usize], b: &[usize]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyInstance);
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// Matching outcome for one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatches {
    /// `(pred id, truth id, IoU)`, ascending by pred id.
    pub tp: Vec<(u32, u32, f64)>,
    pub fp: Vec<u32>,
    pub fn_: Vec<u32>,
}

/// Per-class matches, keyed by class value (1-based cut member).
pub type MatchResult = BTreeMap<u32, ClassMatches>;

fn same_shape(a: &MaskPair, b: &MaskPair) -> Result<(), MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::ShapeMismatch((a.height, a.width), (b.height, b.width)));
    }
    Ok(())
}

pub fn match_instances(pred: &MaskPair, truth: &MaskPair, threshold: f64) -> Result<MatchResult, MetricsError> {
    if !(threshold >= 0.5) {
        return Err(MetricsError::Threshold(threshold));
    }
    same_shape(pred, truth)?;
    let pred_table = pred.instance_table();
    let truth_table = truth.instance_table();
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.instances.iter().zip(&truth.instances) {
        if p != 0 && g != 0 {
            *overlap.entry((p, g)).or_insert(0) += 1;
        }
    }
    let mut result = MatchResult::new();
    let mut pred_matched = BTreeMap::new();
    let mut truth_matched = BTreeMap::new();
    for (&(p, g), &inter) in &overlap {
        let (pc, pa) = pred_table[&p];
        let (gc, ga) = truth_table[&g];
        if pc != gc {
            continue;
        }
        let value = inter as f64 / (pa + ga - inter) as f64;
        if value > threshold {
            result.entry(pc).or_default().tp.push((p, g, value));
            pred_matched.insert(p, g);
            truth_matched.insert(g, p);
        }
    }
    for (&p, &(class, _)) in &pred_table {
        if !pred_matched.contains_key(&p) {
            result.entry(class).or_default().fp.push(p);
        }
    }
    for (&g, &(class, _)) in &truth_table {
        if !truth_matched.contains_key(&g) {
            result.entry(class).or_default().fn_.push(g);
        }
    }
    for m in result.values_mut() {
        m.tp.sort_by_key(|t| t.0);
    }
    Ok(result)
}

/// Counts and PQ for one class.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassPq {
    /// 1-based cut member.
    pub class: u32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub sum_iou: f64,
}

impl ClassPq {
    /// `None` when the class has no TP, FP or FN at all.
    pub fn pq(&self) -> Option<f64> {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            None
        } else {
            Some(self.sum_iou / denom)
        }
    }

    /// Number of ground-truth instances of this class.
    pub fn truth_count(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PqReport {
    /// Ascending by class.
    pub classes: Vec<ClassPq>,
}

impl PqReport {
    pub fn from_matches(matches: &MatchResult) -> Self {
        let classes = matches
            .iter()
            .map(|(&class, m)| {
                let mut sum_iou = 0.0;
                for t in &m.tp {
                    sum_iou += t.2;
                }
                ClassPq { class, tp: m.tp.len(), fp: m.fp.len(), fn_: m.fn_.len(), sum_iou }
            })
            .collect();
        Self { classes }
    }

    pub fn class(&self, class: u32) -> Option<&ClassPq> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// Mean PQ over classes with at least one ground-truth instance.
    pub fn mean_pq(&self) -> Option<f64> {
        let present: Vec<f64> = self.classes.iter().filter(|c| c.truth_count() > 0).filter_map(ClassPq::pq).collect();
        if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        }
    }

    /// Adds another report's counts class by class (dataset-level PQ).
    pub fn merge(&mut self, other: &PqReport) {
        for c in &other.classes {
            match self.classes.iter_mut().find(|x| x.class == c.class) {
                Some(x) => {
                    x.tp += c.tp;
                    x.fp += c.fp;
                    x.fn_ += c.fn_;
                    x.sum_iou += c.sum_iou;
                }
                None => self.classes.push(*c),
            }
        }
        self.classes.sort_by_key(|c| c.class);
    }
}

pub fn panoptic_quality(pred: &MaskPair, truth: &MaskPair) -> Result<PqReport, MetricsError> {
    let matches = match_instances(pred, truth, DEFAULT_IOU_THRESHOLD)?;
    Ok(PqReport::from_matches(&matches))
}

/// 4-connected components of the `true` pixels, numbered from 1 in raster
/// order of their first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<u32> {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
    }
    labels
}

/// Assigns each instance the cut member with the largest summed projected
/// probability over its pixels (ties go to the lowest member). `leaf_probs`
/// is pixel-major with `c + 1` channels per pixel.
pub fn classify_instances(
    instance_map: &[u32],
    leaf_probs: &[f64],
    tree: &ClassTree,
    cut: &LabelSet,
) -> Result<Vec<u32>, MetricsError> {
    cut.check_tree(tree)?;
    let width = tree.leaf_count() + 1;
    if leaf_probs.len() != instance_map.len() * width {
        return Err(MetricsError::ProbShape { expected: instance_map.len() * width, found: leaf_probs.len() });
    }
    let mut votes: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut projected = vec![0.0; cut.len()];
    for (p, &inst) in instance_map.iter().enumerate() {
        if inst == 0 {
            continue;
        }
        cut.project_into(&leaf_probs[p * width..(p + 1) * width], &mut projected);
        let acc = votes.entry(inst).or_insert_with(|| vec![0.0; cut.len()]);
        for (a, v) in acc.iter_mut().zip(&projected) {
            *a += v;
        }
    }
    let winner: BTreeMap<u32, u32> = votes
        .into_iter()
        .map(|(inst, acc)| {
            let mut best = 0;
            for k in 1..acc.len() {
                if acc[k] > acc[best] {
                    best = k;
                }
            }
            (inst, best as u32 + 1)
        })
        .collect();
    Ok(instance_map.iter().map(|inst| if *inst == 0 { 0 } else { winner[inst] }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{validate_cut, NodeSpec};

    fn rect(map: &mut [u32], width: usize, rows: core::ops::RangeInclusive<usize>, cols: core::ops::RangeInclusive<usize>, v: u32) {
        for y in rows {
            for x in cols.clone() {
                map[y * width + x] = v;
            }
        }
    }

    /// truth g1: rows 0-1 x cols 0-4 (class 1), g2: rows 5-6 x cols 5-7 (class 1);
    /// pred p1: rows 0-1 x cols 0-2 (class 1), p3: rows 4-7 x cols 0-1 (class 2).
    fn example_maps() -> (MaskPair, MaskPair) {
        let mut ti = vec![0; 64];
        rect(&mut ti, 8, 0..=1, 0..=4, 1);
        rect(&mut ti, 8, 5..=6, 5..=7, 2);
        let tc: Vec<u32> = ti.iter().map(|&i| u32::from(i != 0)).collect();
        let mut pi = vec![0; 64];
        let mut pc = vec![0; 64];
        rect(&mut pi, 8, 0..=1, 0..=2, 1);
        rect(&mut pc, 8, 0..=1, 0..=2, 1);
        rect(&mut pi, 8, 4..=7, 0..=1, 3);
        rect(&mut pc, 8, 4..=7, 0..=1, 2);
        (MaskPair::new(8, 8, pi, pc).unwrap(), MaskPair::new(8, 8, ti, tc).unwrap())
    }

    #[test]
    fn iou_examples() {
        let a: Vec<usize> = (0..10).collect();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[0, 1], &[2, 3]).unwrap(), 0.0);
        let b: Vec<usize> = (0..6).collect();
        assert_eq!(iou(&a, &b).unwrap(), 0.6);
        assert_eq!(iou(&[], &b), Err(MetricsError::EmptyInstance));
    }

    #[test]
    fn hand_checked_match() {
        let (pred, truth) = example_maps();
        let m = match_instances(&pred, &truth, 0.5).unwrap();
        assert_eq!(m[&1].tp, vec![(1, 1, 0.6)]);
        assert_eq!(m[&1].fn_, vec![2]);
        assert_eq!(m[&2].fp, vec![3]);
        let report = panoptic_quality(&pred, &truth).unwrap();
        // class 1: 0.6 / (1 + 0 + 0.5); the FP lives in class 2
        assert_eq!(report.class(1).unwrap().pq(), Some(0.6 / 1.5));
    }

    #[test]
    fn single_class_hand_value() {
        // Same geometry with the FP relabelled to class 1: PQ = 0.6 / (1 + 0.5 + 0.5) = 0.3.
        let (pred, truth) = example_maps();
        let pc: Vec<u32> = pred.instances().iter().map(|&i| u32::from(i != 0)).collect();
        let pred = MaskPair::new(8, 8, pred.instances().to_vec(), pc).unwrap();
        let report = panoptic_quality(&pred, &truth).unwrap();
        assert_eq!(report.classes.len(), 1);
        assert_eq!(report.class(1).unwrap().pq(), Some(0.3));
        assert_eq!(report.mean_pq(), Some(0.3));
    }

    #[test]
    fn half_iou_is_not_a_match() {
        let truth = MaskPair::new(1, 4, vec![1, 1, 0, 0], vec![1, 1, 0, 0]).unwrap();
        let pred = MaskPair::new(1, 4, vec![0, 1, 0, 0], vec![0, 1, 0, 0]).unwrap();
        let m = match_instances(&pred, &truth, 0.5).unwrap();
        assert!(m[&1].tp.is_empty());
        assert_eq!(m[&1].fp, vec![1]);
        assert_eq!(m[&1].fn_, vec![1]);
    }

    #[test]
    fn identical_and_empty_predictions() {
        let (_, truth) = example_maps();
        let report = panoptic_quality(&truth, &truth).unwrap();
        assert_eq!(report.mean_pq(), Some(1.0));
        let empty = MaskPair::empty(8, 8);
        assert_eq!(panoptic_quality(&empty, &truth).unwrap().mean_pq(), Some(0.0));
        assert_eq!(panoptic_quality(&empty, &empty).unwrap().mean_pq(), None);
    }

    #[test]
    fn mask_pair_invariants() {
        assert!(matches!(MaskPair::new(1, 2, vec![1, 0], vec![0, 0]), Err(MetricsError::UnclassedInstance { .. })));
        assert!(matches!(MaskPair::new(1, 2, vec![1, 1], vec![1, 2]), Err(MetricsError::MixedClasses { .. })));
        assert!(MaskPair::new(1, 2, vec![7, 0], vec![2, 0]).unwrap().check_members(1).is_err());
        assert!(matches!(match_instances(&MaskPair::empty(1, 1), &MaskPair::empty(1, 1), 0.4), Err(MetricsError::Threshold(_))));
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours stay separate
        let mask = [true, false, false, false, true, true];
        assert_eq!(connected_components(&mask, 2, 3), vec![1, 0, 0, 0, 2, 2]);
        let mask = [true, false, true, true, true, false];
        assert_eq!(connected_components(&mask, 2, 3), vec![1, 0, 2, 1, 1, 0]);
    }

    fn kc_tree() -> ClassTree {
        ClassTree::from_spec(&NodeSpec::branch(
            "root",
            vec![NodeSpec::branch("K", vec![NodeSpec::leaf("a"), NodeSpec::leaf("b")]), NodeSpec::leaf("c")],
        ))
        .unwrap()
    }

    #[test]
    fn instance_vote() {
        let tree = kc_tree();
        let cut = validate_cut(&tree, &["K", "c"]).unwrap();
        let inst = [1, 1, 0];
        let probs = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(classify_instances(&inst, &probs, &tree, &cut).unwrap(), vec![1, 1, 0]);
        // uniform leaf mass: S_K holds two leaves, S_c one
        let uniform = [0.25; 12];
        assert_eq!(classify_instances(&inst, &uniform, &tree, &cut).unwrap(), vec![1, 1, 0]);
        assert_eq!(classify_instances(&[0, 0, 0], &uniform, &tree, &cut).unwrap(), vec![0, 0, 0]);
    }
}
