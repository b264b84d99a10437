//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The training criteria run the bundled desk-scale experiment for
//! seeds 1 to 3 and take several minutes on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hiercut::core::losses::{ce_loss, evaluate_loss, ft_loss, mce_loss, mft_loss};
use hiercut::core::metrics::panoptic_quality;
use hiercut::core::seed::rng;
use hiercut::core::{ClassTree, CombinedLossParams, LossKind, MaskPair, ProbField, TverskyParams};
use hiercut::experiment::{run_seed, ExperimentConfig, SeedResult, ARM_A_ONLY, ARM_A_THEN_B, ARM_B_ONLY};
use hiercut::gradcheck::{random_cut, random_leaf_cut, random_targets, run_gradcheck, GradcheckOptions};
use hiercut::hierarchy_io::bundled_tree;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_probs(rows: usize, width: usize, r: &mut ChaCha8Rng) -> ProbField {
    let scores: Vec<f64> = (0..rows * width).map(|_| r.gen_range(-4.0..4.0)).collect();
    ProbField::softmax(width, &scores).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let opts = GradcheckOptions::default();
    let report = run_gradcheck(&bundled_tree(), &opts).unwrap();
    let elapsed = start.elapsed();
    let mut parts: Vec<String> = report.losses.iter().map(|(k, e)| format!("{} {e:.2e}", k.name())).collect();
    parts.push(format!("network {:.2e}", report.network.unwrap()));
    let pass = report.passed(&opts) && elapsed < Duration::from_secs(120);
    outcome(pass, format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn reductions() -> Outcome {
    let tree = bundled_tree();
    let mut r = rng(2);
    let tv = TverskyParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=50);
        let cut = random_leaf_cut(&tree, &mut r);
        let probs = random_probs(n, tree.leaf_count() + 1, &mut r);
        let t = random_targets(n, &cut, &mut r);
        let (ce, mce) = (ce_loss(&probs, &t).unwrap(), mce_loss(&probs, &t, &tree).unwrap());
        let (ft, mft) = (ft_loss(&probs, &t, &tv).unwrap(), mft_loss(&probs, &t, &tree, &tv).unwrap());
        worst = worst
            .max((ce.value - mce.value).abs())
            .max((ft.value - mft.value).abs())
            .max(max_diff(&ce.score_grad, &mce.score_grad))
            .max(max_diff(&ft.score_grad, &mft.score_grad));
    }
    outcome(worst <= 1e-12, format!("max |difference| {worst:e} over 1000 inputs"))
}

fn invariance() -> Outcome {
    let tree = bundled_tree();
    let w = tree.leaf_count() + 1;
    let mut r = rng(3);
    let tv = TverskyParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=50);
        let cut = random_cut(&tree, &mut r);
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
        worst = worst
            .max((mce_loss(&probs, &t, &tree).unwrap().value - mce_loss(&moved, &t, &tree).unwrap().value).abs())
            .max((mft_loss(&probs, &t, &tree, &tv).unwrap().value - mft_loss(&moved, &t, &tree, &tv).unwrap().value).abs());
    }
    outcome(worst <= 1e-12, format!("max change {worst:e} over 1000 trials"))
}

fn equal_gradients() -> Outcome {
    let tree = bundled_tree();
    let w = tree.leaf_count() + 1;
    let mut r = rng(4);
    let params = CombinedLossParams::default();
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for _ in 0..1000 {
        let n = r.gen_range(1..=50);
        let cut = random_cut(&tree, &mut r);
        let probs = random_probs(n, w, &mut r);
        let t = random_targets(n, &cut, &mut r);
        for kind in [LossKind::Mce, LossKind::Mft] {
            let g = evaluate_loss(kind, &probs, &t, &tree, &params).unwrap().prob_grad;
            for i in 0..n {
                for k in 0..cut.len() {
                    let set = cut.leaves(k);
                    for &j in &set[1..] {
                        worst = worst.max((g[i * w + j] - g[i * w + set[0]]).abs());
                        compared += 1;
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-12 && compared > 0, format!("max spread {worst:e} over {compared} pairs"))
}

/// Random instance map of at most five rectangles with classes 1..=3.
fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, base: Option<&MaskPair>) -> MaskPair {
    let mut inst = vec![0u32; h * w];
    let mut class_of = BTreeMap::new();
    let mut ids: Vec<u32> = (1..=5).collect();
    ids.shuffle(r);
    let count = r.gen_range(0..=5);
    for &id in &ids[..count] {
        let (y0, x0) = (r.gen_range(0..h), r.gen_range(0..w));
        let (y1, x1) = (r.gen_range(y0..h.min(y0 + 6)), r.gen_range(x0..w.min(x0 + 6)));
        for y in y0..=y1 {
            for x in x0..=x1 {
                inst[y * w + x] = id;
            }
        }
        class_of.insert(id, r.gen_range(1..=3u32));
    }
    if let Some(base) = base {
        // Start from a perturbed copy of the truth so that matches occur.
        for (p, (&i, &c)) in base.instances().iter().zip(base.classes()).enumerate() {
            if i != 0 && inst[p] == 0 && r.gen_bool(0.85) {
                inst[p] = i + 10;
                let flip = r.gen_bool(0.1);
                class_of.entry(i + 10).or_insert(if flip { 1 + c % 3 } else { c });
            }
        }
    }
    let classes = inst.iter().map(|i| if *i == 0 { 0 } else { class_of[i] }).collect();
    MaskPair::new(h, w, inst, classes).unwrap()
}

/// All-pairs matcher plus direct PQ per class, then the mean over classes
/// that have ground-truth instances.
fn brute_force_pq(pred: &MaskPair, truth: &MaskPair) -> (BTreeMap<u32, f64>, Option<f64>) {
    let table = |m: &MaskPair| -> BTreeMap<u32, u32> {
        m.instances().iter().zip(m.classes()).filter(|(i, _)| **i != 0).map(|(i, c)| (*i, *c)).collect()
    };
    let (pt, tt) = (table(pred), table(truth));
    let mut classes: Vec<u32> = pt.values().chain(tt.values()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    let mut present = Vec::new();
    for c in classes {
        let ps: Vec<u32> = pt.iter().filter(|e| *e.1 == c).map(|e| *e.0).collect();
        let ts: Vec<u32> = tt.iter().filter(|e| *e.1 == c).map(|e| *e.0).collect();
        let (mut tp, mut sum) = (0usize, 0.0);
        for &p in &ps {
            for &g in &ts {
                let (mut inter, mut union) = (0usize, 0usize);
                for (&x, &y) in pred.instances().iter().zip(truth.instances()) {
                    inter += usize::from(x == p && y == g);
                    union += usize::from(x == p || y == g);
                }
                let v = inter as f64 / union as f64;
                if v > 0.5 {
                    tp += 1;
                    sum += v;
                }
            }
        }
        let (fp, fn_) = (ps.len() - tp, ts.len() - tp);
        let pq = sum / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
        per_class.insert(c, pq);
        if !ts.is_empty() {
            present.push(pq);
        }
    }
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per_class, mean)
}

fn pq_oracle() -> Outcome {
    let mut r = rng(5);
    let mut mismatches = 0;
    let mut matched_pairs = 0;
    for _ in 0..500 {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let truth = random_map(&mut r, h, w, None);
        let pred = random_map(&mut r, h, w, Some(&truth));
        let report = panoptic_quality(&pred, &truth).unwrap();
        let (per_class, mean) = brute_force_pq(&pred, &truth);
        let ours: BTreeMap<u32, f64> = report.classes.iter().map(|c| (c.class, c.pq().unwrap())).collect();
        matched_pairs += report.classes.iter().map(|c| c.tp).sum::<usize>();
        if ours != per_class || report.mean_pq() != mean {
            mismatches += 1;
        }
    }
    let mut self_fail = 0;
    for _ in 0..100 {
        let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
        let x = random_map(&mut r, h, w, None);
        let report = panoptic_quality(&x, &x).unwrap();
        let ok = report.classes.iter().all(|c| c.pq() == Some(1.0))
            && (x.instances().iter().all(|i| *i == 0) || report.mean_pq() == Some(1.0));
        self_fail += usize::from(!ok);
    }
    outcome(
        mismatches == 0 && self_fail == 0,
        format!("{mismatches}/500 oracle mismatches ({matched_pairs} true positives seen), {self_fail}/100 PQ(X,X) != 1"),
    )
}

fn hand_pq() -> Outcome {
    let mut ti = vec![0u32; 64];
    let mut pi = vec![0u32; 64];
    let fill = |map: &mut [u32], rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>, v: u32| {
        for y in rows {
            for x in cols.clone() {
                map[y * 8 + x] = v;
            }
        }
    };
    fill(&mut ti, 0..=1, 0..=4, 1);
    fill(&mut ti, 5..=6, 5..=7, 2);
    fill(&mut pi, 0..=1, 0..=2, 1);
    fill(&mut pi, 4..=7, 0..=1, 3);
    let one_class = |m: &[u32]| m.iter().map(|&i| u32::from(i != 0)).collect::<Vec<_>>();
    let truth = MaskPair::new(8, 8, ti.clone(), one_class(&ti)).unwrap();
    let pred = MaskPair::new(8, 8, pi.clone(), one_class(&pi)).unwrap();
    let pq = panoptic_quality(&pred, &truth).unwrap().mean_pq();
    outcome(pq == Some(0.3), format!("PQ {pq:?}"))
}

fn count_wins(results: &[SeedResult], rows: impl Fn(&SeedResult) -> &[hiercut::experiment::ComparisonRow], a: &str, b: &str, set: &str) -> (usize, f64, f64, Vec<String>) {
    let mut wins = 0;
    let (mut sa, mut sb) = (0.0, 0.0);
    let mut lines = Vec::new();
    for res in results {
        let get = |arm: &str| rows(res).iter().find(|r| r.arm == arm && r.test_dataset == set).and_then(|r| r.mean_pq).unwrap_or(0.0);
        let (pa, pb) = (get(a), get(b));
        wins += usize::from(pa >= pb);
        sa += pa;
        sb += pb;
        lines.push(format!("seed {}: {a} {pa:.4} vs {b} {pb:.4}", res.seed));
    }
    let n = results.len() as f64;
    (wins, sa / n, sb / n, lines)
}

#[derive(Debug)]
struct EpochRow {
    episode: usize,
    epoch: usize,
    val: f64,
}

fn epoch_rows(path: &Path) -> Vec<EpochRow> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[6] == "epoch_end")
        .map(|r| EpochRow { episode: r[0].parse().unwrap(), epoch: r[1].parse().unwrap(), val: r[5].parse().unwrap() })
        .collect()
}

fn loss_signature(results: &[SeedResult]) -> (Outcome, Vec<String>) {
    let mut holds = 0;
    let mut info = Vec::new();
    for res in results {
        let ab = epoch_rows(&res.dir.join("runs").join(ARM_A_THEN_B).join("metrics.csv"));
        let b = epoch_rows(&res.dir.join("runs").join(ARM_B_ONLY).join("metrics.csv"));
        let first_b = ab.iter().find(|r| r.episode == 1 && r.epoch == 1).unwrap().val;
        let scratch_1 = b.iter().find(|r| r.epoch == 1).unwrap().val;
        let scratch_final = b.last().unwrap();
        holds += usize::from(first_b < scratch_1);
        info.push(format!(
            "seed {}: A->B first B epoch {first_b:.4} vs B-only epoch 1 {scratch_1:.4}; B-only final (epoch {}) {:.4}",
            res.seed, scratch_final.epoch, scratch_final.val
        ));
    }
    let detail = format!("{holds}/{} seeds lower at matched epoch", results.len());
    (outcome(holds == results.len(), detail), info)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(config: &ExperimentConfig, tree: &ClassTree, first: &SeedResult) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let again = run_seed(config, tree, first.seed, tmp.path()).unwrap();
    let (a, b) = (snapshot(&first.dir), snapshot(&again.dir));
    let differing: Vec<String> =
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect();
    let kinds = ["manifest.json", ".hlnet", "metrics.csv"];
    let covered = kinds.iter().all(|k| a.keys().any(|p| p.to_string_lossy().ends_with(k)));
    let detail = if differing.is_empty() {
        format!("{} files byte-identical", a.len())
    } else {
        format!("differing: {}", differing.join(", "))
    };
    outcome(differing.is_empty() && covered, detail)
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} {name:<22} {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failures += usize::from(!o.pass);
    };
    report(1, "gradient check", gradients());
    report(2, "reduction identities", reductions());
    report(3, "sub-class invariance", invariance());
    report(4, "equal gradients", equal_gradients());
    report(5, "PQ oracle", pq_oracle());
    report(6, "hand PQ case", hand_pq());

    let tree = bundled_tree();
    let config = ExperimentConfig::desk_default();
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let results: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(&config, &tree, s, tmp.path()).unwrap()).collect();
    let elapsed = start.elapsed();
    let in_budget = elapsed < Duration::from_secs(30 * 60);
    println!("  experiment: {} seeds in {:.0}s", SEEDS.len(), elapsed.as_secs_f64());

    let (wins, mean_ab, mean_b, lines) = count_wins(&results, |r| &r.finetune, ARM_A_THEN_B, ARM_B_ONLY, "B:test");
    for l in &lines {
        println!("  {l}");
    }
    report(
        7,
        "fine-tune direction",
        outcome(wins >= 2 && mean_ab >= mean_b && in_budget, format!("{wins}/3 seeds, means {mean_ab:.4} vs {mean_b:.4}")),
    );

    let (wins, mean_ab, mean_a, lines) = count_wins(&results, |r| &r.generalize, ARM_A_THEN_B, ARM_A_ONLY, "C:all");
    for l in &lines {
        println!("  {l}");
    }
    let (_, _, mean_b_on_c, _) = count_wins(&results, |r| &r.generalize, ARM_A_THEN_B, ARM_B_ONLY, "C:all");
    let (_, ctrl_ab, ctrl_a, _) = count_wins(&results, |r| &r.generalize, ARM_A_THEN_B, ARM_A_ONLY, "A_control:all");
    println!("  B-only on C: mean {mean_b_on_c:.4}; control on A's distribution: A->B {ctrl_ab:.4} vs A-only {ctrl_a:.4}");
    report(
        8,
        "generalization direction",
        outcome(wins >= 2 && in_budget, format!("{wins}/3 seeds, means {mean_ab:.4} vs {mean_a:.4}")),
    );

    let (o, info) = loss_signature(&results);
    for l in &info {
        println!("  {l}");
    }
    report(9, "loss drop at switch", o);

    report(10, "determinism", determinism(&config, &tree, &results[0]));

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
