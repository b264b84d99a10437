//! Synthetic nucleus patches.
//!
//! Each image holds non-overlapping elliptical blobs on a noisy background.
//! A blob's leaf class is drawn uniformly from all leaves of the tree and
//! decides its colour, size, elongation and texture. Generation never looks
//! at the cut: the cut only decides what ends up in the class map, so two
//! datasets generated with the same seed and different cuts share their
//! images and instance maps exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::Tensor;
use crate::hierarchy::{ClassTree, Fingerprint, LabelSet};
use crate::math;
use crate::metrics::MaskPair;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("could not place blob {blob} of image {image_seed:#x} after {attempts} attempts; lower the blob count or raise the patch size")]
    Infeasible { image_seed: u64, blob: usize, attempts: usize },
    #[error("patch size {0} must be a positive multiple of 4")]
    PatchSize(usize),
    #[error("appearance describes {found} leaves, tree has {expected}")]
    LeafCount { expected: usize, found: usize },
    #[error("invalid appearance: {0}")]
    Appearance(&'static str),
    #[error("blob range {0}..={1} is empty")]
    BlobRange(usize, usize),
    #[error("label set belongs to another tree")]
    ForeignCut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafAppearance {
    /// Mean RGB in [0, 1].
    pub color: [f64; 3],
    /// Per-blob colour jitter amplitude.
    pub jitter: f64,
    /// Equivalent-circle radius range in pixels.
    pub radius: (f64, f64),
    /// Axis ratio range (>= 1).
    pub eccentricity: (f64, f64),
    /// Per-pixel noise amplitude inside the blob.
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    /// One entry per leaf, in canonical leaf order.
    pub leaves: Vec<LeafAppearance>,
    pub background: [f64; 3],
    pub background_noise: f64,
    /// Global colour offset applied to every pixel (a stain-like domain shift).
    pub shift: [f64; 3],
}

// Base colours of the top-level branches; later branches cycle with an offset.
const BRANCH_COLORS: [[f64; 3]; 4] = [[0.42, 0.16, 0.52], [0.16, 0.22, 0.58], [0.62, 0.20, 0.40], [0.45, 0.34, 0.18]];

impl AppearanceSpec {
    /// Default appearance for any tree: leaves under the same top-level
    /// branch share a hue family and differ in shade, size and texture.
    pub fn for_tree(tree: &ClassTree) -> Self {
        let root_children = tree.children(tree.root());
        let leaves = tree
            .leaf_order()
            .iter()
            .map(|&leaf| {
                let branch = tree.top_branch(leaf);
                let b = root_children.iter().position(|&c| c == branch).unwrap_or(0);
                let group = tree.leaves_under(branch);
                let size = group.len().max(1) as f64;
                let rank = tree.leaf_index(leaf).unwrap_or(0) - group.start;
                let base = BRANCH_COLORS[b % BRANCH_COLORS.len()];
                let cycle = (b / BRANCH_COLORS.len()) as f64 * 0.07;
                // position within the branch, centred on 0 and spanning about ±1
                let t = if size > 1.0 { 2.0 * rank as f64 / (size - 1.0) - 1.0 } else { 0.0 };
                let color = [
                    (base[0] + cycle + 0.10 * t).clamp(0.05, 0.95),
                    (base[1] + 0.12 * t).clamp(0.05, 0.95),
                    (base[2] - cycle - 0.06 * t).clamp(0.05, 0.95),
                ];
                let r0 = 3.0 + 1.5 * (t + 1.0);
                LeafAppearance {
                    color,
                    jitter: 0.04,
                    radius: (r0, r0 + 1.5),
                    eccentricity: (1.0, 1.3 + 0.3 * (t + 1.0)),
                    texture: 0.03 + 0.03 * (t + 1.0),
                }
            })
            .collect();
        Self { leaves, background: [0.92, 0.78, 0.86], background_noise: 0.04, shift: [0.0; 3] }
    }

    pub fn with_shift(mut self, shift: [f64; 3]) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self, tree: &ClassTree) -> Result<(), SynthError> {
        if self.leaves.len() != tree.leaf_count() {
            return Err(SynthError::LeafCount { expected: tree.leaf_count(), found: self.leaves.len() });
        }
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        for leaf in &self.leaves {
            if !unit(&leaf.color) {
                return Err(SynthError::Appearance("leaf colours must lie in [0, 1]"));
            }
            if leaf.radius.0 < 2.0 || leaf.radius.1 < leaf.radius.0 {
                return Err(SynthError::Appearance("radii must be >= 2 px and ordered"));
            }
            if leaf.eccentricity.0 < 1.0 || leaf.eccentricity.1 < leaf.eccentricity.0 {
                return Err(SynthError::Appearance("eccentricity range must be >= 1 and ordered"));
            }
            if leaf.jitter < 0.0 || leaf.texture < 0.0 {
                return Err(SynthError::Appearance("jitter and texture must be nonnegative"));
            }
        }
        if !unit(&self.background) || self.background_noise < 0.0 {
            return Err(SynthError::Appearance("background colour must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Content hash over the bit patterns of every field.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut bytes = Vec::new();
        let mut put = |v: f64| bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        for leaf in &self.leaves {
            leaf.color.iter().for_each(|v| put(*v));
            put(leaf.jitter);
            put(leaf.radius.0);
            put(leaf.radius.1);
            put(leaf.eccentricity.0);
            put(leaf.eccentricity.1);
            put(leaf.texture);
        }
        self.background.iter().for_each(|v| put(*v));
        put(self.background_noise);
        self.shift.iter().for_each(|v| put(*v));
        Fingerprint::of_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub patch_size: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Minimum background pixels between two blobs.
    pub gap: usize,
    pub max_attempts: usize,
}

impl GenerateParams {
    pub fn new(patch_size: usize) -> Self {
        // 4..=6 blobs on a 64 px patch, at least one on small patches
        let area = patch_size * patch_size;
        let max_blobs = (area / 650).clamp(1, 12);
        let min_blobs = (area / 1000).clamp(1, max_blobs);
        Self { patch_size, min_blobs, max_blobs, gap: 2, max_attempts: 1000 }
    }
}

/// One generated patch. `rgb` is interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub masks: MaskPair,
    /// Leaf index of instance `i + 1`.
    pub instance_leaves: Vec<usize>,
}

struct Blob {
    pixels: Vec<usize>,
    leaf: usize,
}

fn place_blob(
    rng: &mut ChaCha8Rng,
    appearance: &LeafAppearance,
    leaf: usize,
    size: usize,
    blocked: &[bool],
) -> Option<Blob> {
    let r = rng.gen_range(appearance.radius.0..=appearance.radius.1);
    let e = rng.gen_range(appearance.eccentricity.0..=appearance.eccentricity.1);
    let theta = rng.gen_range(0.0..core::f64::consts::PI);
    let (a, b) = (r * math::sqrt(e), r / math::sqrt(e));
    let margin = a + 1.0;
    if 2.0 * margin >= size as f64 {
        return None;
    }
    let cx = rng.gen_range(margin..size as f64 - margin);
    let cy = rng.gen_range(margin..size as f64 - margin);
    let (ct, st) = (math::cos(theta), math::sin(theta));
    let lo = |c: f64| (c - a).max(0.0) as usize;
    let hi = |c: f64| ((c + a) as usize + 1).min(size - 1);
    let mut pixels = Vec::new();
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * ct + dy * st) / a;
            let v = (-dx * st + dy * ct) / b;
            if u * u + v * v <= 1.0 {
                let p = y * size + x;
                if blocked[p] {
                    return None;
                }
                pixels.push(p);
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    Some(Blob { pixels, leaf })
}

fn block(blocked: &mut [bool], size: usize, pixels: &[usize], gap: usize) {
    for &p in pixels {
        let (y, x) = (p / size, p % size);
        for yy in y.saturating_sub(gap)..=(y + gap).min(size - 1) {
            for xx in x.saturating_sub(gap)..=(x + gap).min(size - 1) {
                blocked[yy * size + xx] = true;
            }
        }
    }
}

fn quantize(v: f64) -> u8 {
    math::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Generates one patch from its own seed.
pub fn generate_image(
    tree: &ClassTree,
    cut: &LabelSet,
    appearance: &AppearanceSpec,
    params: &GenerateParams,
    image_seed: u64,
) -> Result<SynthImage, SynthError> {
    if cut.check_tree(tree).is_err() {
        return Err(SynthError::ForeignCut);
    }
    appearance.validate(tree)?;
    let size = params.patch_size;
    if size == 0 || size % 4 != 0 {
        return Err(SynthError::PatchSize(size));
    }
    if params.min_blobs > params.max_blobs {
        return Err(SynthError::BlobRange(params.min_blobs, params.max_blobs));
    }
    let mut rng = seed::rng(image_seed);
    let n = size * size;
    let count = rng.gen_range(params.min_blobs..=params.max_blobs);
    let mut blocked = vec![false; n];
    let mut blobs = Vec::with_capacity(count);
    for blob in 0..count {
        let leaf = rng.gen_range(0..tree.leaf_count());
        let placed = (0..params.max_attempts).find_map(|_| place_blob(&mut rng, &appearance.leaves[leaf], leaf, size, &blocked));
        match placed {
            Some(b) => {
                block(&mut blocked, size, &b.pixels, params.gap);
                blobs.push(b);
            }
            None => return Err(SynthError::Infeasible { image_seed, blob, attempts: params.max_attempts }),
        }
    }

    let mut color = vec![0.0f64; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let noise = rng.gen_range(-1.0..=1.0) * appearance.background_noise;
            color[3 * p + c] = appearance.background[c] + noise;
        }
    }
    let mut instances = vec![0u32; n];
    let mut classes = vec![0u32; n];
    let mut instance_leaves = Vec::with_capacity(blobs.len());
    for (i, blob) in blobs.iter().enumerate() {
        let look = &appearance.leaves[blob.leaf];
        let mut base = look.color;
        for v in base.iter_mut() {
            *v += rng.gen_range(-1.0..=1.0) * look.jitter;
        }
        let class = cut.member_of_leaf(blob.leaf).map_or(0, |k| k as u32 + 1);
        for &p in &blob.pixels {
            // Uncovered leaves are drawn but stay background in the masks.
            if class != 0 {
                instances[p] = i as u32 + 1;
                classes[p] = class;
            }
            let grain = rng.gen_range(-1.0..=1.0) * look.texture;
            for c in 0..3 {
                color[3 * p + c] = base[c] + grain;
            }
        }
        instance_leaves.push(blob.leaf);
    }
    let rgb = color.iter().enumerate().map(|(i, v)| quantize(v + appearance.shift[i % 3])).collect();
    // Instance ids stay tied to blob order so they match across cuts; ids of
    // uncovered blobs are simply absent.
    let masks = MaskPair::new(size, size, instances, classes).expect("generator keeps mask invariants");
    Ok(SynthImage { size, rgb, masks, instance_leaves })
}

/// Seed of image `index` under `master_seed`.
pub fn image_seed(master_seed: u64, index: usize) -> u64 {
    seed::derive_seed(master_seed, index as u64)
}

/// Converts interleaved 8-bit RGB to a `3 × H × W` tensor in [0, 1].
pub fn rgb_to_tensor(rgb: &[u8], height: usize, width: usize) -> Tensor {
    let n = height * width;
    assert_eq!(rgb.len(), 3 * n, "rgb buffer size");
    let mut t = Tensor::zeros(3, height, width);
    for c in 0..3 {
        let plane = t.plane_mut(c);
        for (p, v) in plane.iter_mut().enumerate() {
            *v = rgb[3 * p + c] as f64 / 255.0;
        }
    }
    t
}

/// Train/validation/test sizes: `floor(0.7 n)`, `floor(0.15 n)`, remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut by [`split_counts`].
pub fn split_indices(n: usize, seed_value: u64) -> Split {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive_seed(seed_value, seed::stream::SPLIT)));
    let (train, val, _) = split_counts(n);
    let test = idx.split_off(train + val);
    let val = idx.split_off(train);
    Split { train: idx, val, test }
}

/// A dihedral transform plus photometric jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// Mirror left-right before rotating.
    pub flip: bool,
    pub brightness: f64,
    /// Hue rotation about the grey axis, radians.
    pub hue: f64,
    pub saturation: f64,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { quarter_turns: 0, flip: false, brightness: 1.0, hue: 0.0, saturation: 1.0 };

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            quarter_turns: rng.gen_range(0..4u8),
            flip: rng.gen_bool(0.5),
            brightness: rng.gen_range(0.8..=1.2),
            hue: rng.gen_range(-0.2..=0.2),
            saturation: rng.gen_range(0.8..=1.2),
        }
    }

    fn geometric_identity(&self) -> bool {
        self.quarter_turns % 4 == 0 && !self.flip
    }

    /// Destination of source pixel `(y, x)` in an `n × n` patch.
    fn map(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = if self.flip { (y, n - 1 - x) } else { (y, x) };
        for _ in 0..self.quarter_turns % 4 {
            (y, x) = (n - 1 - x, y);
        }
        (y, x)
    }
}

/// Draws a plan from `seed` and applies it.
pub fn augment(image: &Tensor, masks: &MaskPair, seed_value: u64) -> (Tensor, MaskPair) {
    let plan = AugmentPlan::draw(&mut seed::rng(seed_value));
    apply_plan(image, masks, &plan)
}

/// Applies `plan`; masks follow the geometric part only. Panics on
/// non-square input.
pub fn apply_plan(image: &Tensor, masks: &MaskPair, plan: &AugmentPlan) -> (Tensor, MaskPair) {
    let n = image.height();
    assert!(image.width() == n && masks.height() == n && masks.width() == n, "augmentation needs square patches");
    let (mut out, out_masks) = if plan.geometric_identity() {
        (image.clone(), masks.clone())
    } else {
        let mut out = Tensor::zeros(image.channels(), n, n);
        let mut inst = vec![0u32; n * n];
        let mut cls = vec![0u32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = plan.map(y, x, n);
                for c in 0..image.channels() {
                    out.set(c, dy, dx, image.at(c, y, x));
                }
                inst[dy * n + dx] = masks.instances()[y * n + x];
                cls[dy * n + dx] = masks.classes()[y * n + x];
            }
        }
        (out, MaskPair::new(n, n, inst, cls).expect("permuted masks keep their invariants"))
    };
    if image.channels() == 3 {
        photometric(&mut out, plan);
    }
    (out, out_masks)
}

fn photometric(t: &mut Tensor, plan: &AugmentPlan) {
    let identity = plan.brightness == 1.0 && plan.hue == 0.0 && plan.saturation == 1.0;
    if identity {
        return;
    }
    // Rodrigues rotation about (1,1,1)/sqrt(3).
    let (c, s) = (math::cos(plan.hue), math::sin(plan.hue));
    let k = (1.0 - c) / 3.0;
    let q = s / math::sqrt(3.0);
    let rot = [[c + k, k - q, k + q], [k + q, c + k, k - q], [k - q, k + q, c + k]];
    let n = t.plane_len();
    let data = t.data_mut();
    for p in 0..n {
        let px = [data[p] * plan.brightness, data[n + p] * plan.brightness, data[2 * n + p] * plan.brightness];
        let mut rgb = [0.0; 3];
        for (i, row) in rot.iter().enumerate() {
            rgb[i] = row[0] * px[0] + row[1] * px[1] + row[2] * px[2];
        }
        let grey = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
        for (i, v) in rgb.iter().enumerate() {
            data[i * n + p] = (grey + plan.saturation * (v - grey)).clamp(0.0, 1.0);
        }
    }
}
