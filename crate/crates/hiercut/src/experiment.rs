//! The two comparison protocols on synthetic data.
//!
//! Per seed, four datasets are generated from one tree: A (coarse cut,
//! many images), B (fine cut, few images), C (another cut under a shifted
//! appearance, never trained on) and a control drawn like A. Two schedules
//! are trained, `[A, B]` and `[B]`; the A-only network is the checkpoint the
//! first schedule writes after its A episode. Every network is scored from
//! its saved checkpoint.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use hiercut_core::seed::derive_seed;
use hiercut_core::synth::AppearanceSpec;
use hiercut_core::train::EpisodeConfig;
use hiercut_core::{ClassTree, CombinedLossParams, LabelSet};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{generate_dataset, load_dataset, GenerateRequest, SplitName};
use crate::error::{read_text, write, Error, Result};
use crate::evaluate::{evaluate_checkpoint, report_csv};
use crate::hierarchy_io::{bundled_tree, load_hierarchy};
use crate::schedule::{load_schedule, run_schedule, EpisodeSpec, ScheduleConfig, CHECKPOINT_FILE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub cut: Vec<String>,
    pub images: usize,
    /// Colour offset added to every pixel.
    #[serde(default)]
    pub shift: [f64; 3],
}

fn default_patch() -> usize {
    64
}

fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Hierarchy file relative to the config; the bundled tree if absent.
    #[serde(default)]
    pub tree: Option<PathBuf>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    pub a: DataSpec,
    pub b: DataSpec,
    pub c: DataSpec,
    /// Images in the control set drawn like A (0 skips it).
    #[serde(default)]
    pub control_images: usize,
    pub train_a: EpisodeConfig,
    pub train_b: EpisodeConfig,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub loss: CombinedLossParams,
}

/// Desk-scale configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../data/experiment.json");

impl ExperimentConfig {
    pub fn desk_default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("bundled experiment config parses")
    }

    pub fn load(path: &Path) -> Result<(Self, ClassTree)> {
        let text = read_text(path)?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: malformed experiment config: {e}", path.display())))?;
        let tree = match &config.tree {
            Some(p) => load_hierarchy(&path.parent().unwrap_or(Path::new(".")).join(p))?,
            None => bundled_tree(),
        };
        config.validate(&tree).map_err(|e| e.context(path.display()))?;
        Ok((config, tree))
    }

    pub fn validate(&self, tree: &ClassTree) -> Result<()> {
        for (name, spec) in [("a", &self.a), ("b", &self.b), ("c", &self.c)] {
            LabelSet::new(tree, &spec.cut).map_err(|e| Error::data(format!("cut {name}: {e}")))?;
            if spec.images < 7 {
                return Err(Error::data(format!("dataset {name} needs at least 7 images for a 70/15/15 split")));
            }
        }
        for (name, e) in [("train_a", &self.train_a), ("train_b", &self.train_b)] {
            e.validate().map_err(|m| Error::data(format!("{name}: {m}")))?;
        }
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(Error::data("patch_size must be a positive multiple of 4"));
        }
        self.loss.validate().map_err(|e| Error::data(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Finetune,
    Generalize,
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "finetune" => Ok(Kind::Finetune),
            "generalize" => Ok(Kind::Generalize),
            _ => Err(format!("unknown experiment kind {s:?} (expected finetune or generalize)")),
        }
    }
}

pub const ARM_A_ONLY: &str = "a_only";
pub const ARM_A_THEN_B: &str = "a_then_b";
pub const ARM_B_ONLY: &str = "b_only";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub seed: u64,
    pub test_dataset: String,
    pub mean_pq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub finetune: Vec<ComparisonRow>,
    pub generalize: Vec<ComparisonRow>,
}

impl SeedResult {
    pub fn rows(&self, kind: Kind) -> &[ComparisonRow] {
        match kind {
            Kind::Finetune => &self.finetune,
            Kind::Generalize => &self.generalize,
        }
    }
}

/// Seed of dataset `slot` under experiment seed `seed`.
fn data_seed(seed: u64, slot: u64) -> u64 {
    derive_seed(seed, 0xDA7A_0000 + slot)
}

fn episode(data: &str, config: &EpisodeConfig) -> EpisodeSpec {
    EpisodeSpec {
        data: PathBuf::from(data),
        max_epochs: config.max_epochs,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        augment: config.augment,
    }
}

/// Generates the data, trains both schedules and scores every arm for one
/// seed under `out/seed_<seed>`.
pub fn run_seed(config: &ExperimentConfig, tree: &ClassTree, seed: u64, out: &Path) -> Result<SeedResult> {
    config.validate(tree)?;
    let dir = out.join(format!("seed_{seed}"));
    let look = AppearanceSpec::for_tree(tree);
    let cut = |spec: &DataSpec| LabelSet::new(tree, &spec.cut).map_err(|e| Error::data(e.to_string()));
    let (cut_a, cut_b, cut_c) = (cut(&config.a)?, cut(&config.b)?, cut(&config.c)?);
    let shifted = look.clone().with_shift(config.c.shift);
    let mut plan = vec![
        ("A", &cut_a, &look, config.a.images, 0),
        ("B", &cut_b, &look, config.b.images, 1),
        ("C", &cut_c, &shifted, config.c.images, 2),
    ];
    if config.control_images > 0 {
        plan.push(("A_control", &cut_a, &look, config.control_images, 3));
    }
    for (name, cut, appearance, images, slot) in plan {
        let req = GenerateRequest { name, tree, cut, appearance, seed: data_seed(seed, slot), images, patch_size: config.patch_size };
        generate_dataset(&req, &dir.join("data").join(name))?;
    }

    let schedule = |episodes: Vec<EpisodeSpec>| ScheduleConfig {
        seed,
        patience: config.patience,
        loss: config.loss,
        widths: [8, 16, 32],
        episodes,
        evaluate: Vec::new(),
    };
    let sched_dir = dir.join("schedules");
    let arms = [
        (ARM_A_THEN_B, schedule(vec![episode("../data/A", &config.train_a), episode("../data/B", &config.train_b)])),
        (ARM_B_ONLY, schedule(vec![episode("../data/B", &config.train_b)])),
    ];
    for (arm, sched) in &arms {
        let path = sched_dir.join(format!("{arm}.json"));
        write(&path, sched.to_json().as_bytes())?;
        // Run from the file so the experiment exercises the same path as `train`.
        let loaded = load_schedule(&path)?;
        run_schedule(&loaded, &sched_dir, None, &dir.join("runs").join(arm))?;
    }

    let runs = dir.join("runs");
    let ck_a = Checkpoint::load(&runs.join(ARM_A_THEN_B).join("episode_0.hlnet"))?;
    let ck_ab = Checkpoint::load(&runs.join(ARM_A_THEN_B).join(CHECKPOINT_FILE))?;
    let ck_b = Checkpoint::load(&runs.join(ARM_B_ONLY).join(CHECKPOINT_FILE))?;
    let data = |name: &str| load_dataset(&dir.join("data").join(name));
    let (data_b, data_c) = (data("B")?, data("C")?);
    let score = |arm: &str, ck: &Checkpoint, set: &crate::dataset::Dataset, split: SplitName, label: &str| -> Result<ComparisonRow> {
        let eval = evaluate_checkpoint(ck, set, split)?;
        write(&dir.join("eval").join(format!("{arm}_{label}.csv")), report_csv(&eval).as_bytes())?;
        Ok(ComparisonRow { arm: arm.into(), seed, test_dataset: label.into(), mean_pq: eval.mean_pq() })
    };
    let finetune = vec![
        score(ARM_A_THEN_B, &ck_ab, &data_b, SplitName::Test, "B:test")?,
        score(ARM_B_ONLY, &ck_b, &data_b, SplitName::Test, "B:test")?,
    ];
    let mut generalize = vec![
        score(ARM_A_THEN_B, &ck_ab, &data_c, SplitName::All, "C:all")?,
        score(ARM_A_ONLY, &ck_a, &data_c, SplitName::All, "C:all")?,
        score(ARM_B_ONLY, &ck_b, &data_c, SplitName::All, "C:all")?,
    ];
    if config.control_images > 0 {
        let control = data("A_control")?;
        generalize.push(score(ARM_A_THEN_B, &ck_ab, &control, SplitName::All, "A_control:all")?);
        generalize.push(score(ARM_A_ONLY, &ck_a, &control, SplitName::All, "A_control:all")?);
    }
    Ok(SeedResult { seed, dir, finetune, generalize })
}

/// Rows as CSV with columns arm, seed, test_dataset, mean_pq.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arm", "seed", "test_dataset", "mean_pq"]).expect("in-memory write");
    for r in rows {
        let pq = r.mean_pq.map_or_else(|| "n/a".into(), |v| v.to_string());
        w.write_record([r.arm.clone(), r.seed.to_string(), r.test_dataset.clone(), pq]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Mean of `arm`'s PQ on `dataset` over all rows that have one.
pub fn arm_mean(rows: &[ComparisonRow], arm: &str, dataset: &str) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.arm == arm && r.test_dataset == dataset).filter_map(|r| r.mean_pq).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// The arms a kind compares, challenger first, and the dataset label.
pub fn compared_arms(kind: Kind) -> (&'static str, &'static str, &'static str) {
    match kind {
        Kind::Finetune => (ARM_A_THEN_B, ARM_B_ONLY, "B:test"),
        Kind::Generalize => (ARM_A_THEN_B, ARM_A_ONLY, "C:all"),
    }
}

/// Runs seeds `1..=seeds` and writes `<kind>.csv` into `out`.
pub fn run_experiment(kind: Kind, config: &ExperimentConfig, tree: &ClassTree, seeds: u64, out: &Path) -> Result<Vec<ComparisonRow>> {
    if seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    config.validate(tree)?;
    let mut rows = Vec::new();
    for seed in 1..=seeds {
        rows.extend(run_seed(config, tree, seed, out)?.rows(kind).iter().cloned());
    }
    let name = match kind {
        Kind::Finetune => "finetune.csv",
        Kind::Generalize => "generalize.csv",
    };
    write(&out.join(name), comparison_csv(&rows).as_bytes())?;
    Ok(rows)
}
