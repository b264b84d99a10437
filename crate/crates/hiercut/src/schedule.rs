//! Training schedules: a JSON list of episodes over dataset manifests, run
//! in order on one network.

use std::path::{Path, PathBuf};

use hiercut_core::diffnet::{MicroUNet, UNetConfig};
use hiercut_core::seed::{derive_seed, stream};
use hiercut_core::train::{EpisodeConfig, EpisodeData, LogRecord, TrainSettings, Trainer};
use hiercut_core::CombinedLossParams;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_dataset, Dataset, SplitName};
use crate::error::{read_text, write, Error, Result};
use crate::evaluate::{evaluate_net, report_csv, Evaluation};

pub const CHECKPOINT_FILE: &str = "checkpoint.hlnet";
pub const METRICS_FILE: &str = "metrics.csv";

fn default_learning_rate() -> f64 {
    3e-3
}

fn default_batch_size() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_patience() -> usize {
    5
}

fn default_widths() -> [usize; 3] {
    [8, 16, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    /// Manifest path, relative to the schedule file.
    pub data: PathBuf,
    pub max_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
}

impl EpisodeSpec {
    pub fn config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            augment: self.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub loss: CombinedLossParams,
    #[serde(default = "default_widths")]
    pub widths: [usize; 3],
    pub episodes: Vec<EpisodeSpec>,
    /// Manifests whose test split is scored after training.
    #[serde(default)]
    pub evaluate: Vec<PathBuf>,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::data("schedule has no episodes"));
        }
        if self.patience == 0 {
            return Err(Error::data("patience must be at least 1"));
        }
        for (i, e) in self.episodes.iter().enumerate() {
            e.config().validate().map_err(|m| Error::data(format!("episode {i}: {m}")))?;
        }
        self.loss.validate().map_err(|e| Error::data(e.to_string()))?;
        if !(self.loss.lambda_ce > 0.0 && self.loss.lambda_ft > 0.0) {
            return Err(Error::data("both loss weights must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }
}

pub fn load_schedule(path: &Path) -> Result<ScheduleConfig> {
    let text = read_text(path)?;
    let config: ScheduleConfig =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: malformed schedule: {e}", path.display())))?;
    config.validate().map_err(|e| e.context(path.display()))?;
    Ok(config)
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub checkpoint: Checkpoint,
    /// Checkpoint written after each episode.
    pub episode_checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRecord>,
    pub evaluations: Vec<Evaluation>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with columns episode, epoch, step, dataset, train_loss, val_loss,
/// event; missing losses are empty cells.
pub fn metrics_csv(log: &[LogRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "epoch", "step", "dataset", "train_loss", "val_loss", "event"]).expect("in-memory write");
    for r in log {
        w.write_record([
            r.episode.to_string(),
            r.epoch.to_string(),
            r.step.to_string(),
            r.dataset.clone(),
            fmt_opt(r.train_loss),
            fmt_opt(r.val_loss),
            r.event.name().into(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Loads every dataset the schedule names and checks they share one tree.
fn load_all(config: &ScheduleConfig, base: &Path) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    let train = config.episodes.iter().map(|e| load_dataset(&base.join(&e.data))).collect::<Result<Vec<_>>>()?;
    let eval = config.evaluate.iter().map(|p| load_dataset(&base.join(p))).collect::<Result<Vec<_>>>()?;
    let fp = train[0].tree.fingerprint();
    for d in train.iter().chain(&eval) {
        if d.tree.fingerprint() != fp {
            return Err(Error::data(format!(
                "tree fingerprint mismatch: {} uses {}, {} uses {}",
                train[0].manifest.name,
                fp,
                d.manifest.name,
                d.tree.fingerprint()
            )));
        }
    }
    Ok((train, eval))
}

/// Runs every episode in order, then scores the final network on the test
/// split of each evaluation dataset. `base` resolves relative paths in the
/// schedule. Returns without touching `out_dir` if any input is invalid.
pub fn run_schedule(config: &ScheduleConfig, base: &Path, resume: Option<Checkpoint>, out_dir: &Path) -> Result<ScheduleOutcome> {
    config.validate()?;
    let (datasets, eval_sets) = load_all(config, base)?;
    let tree = &datasets[0].tree;
    let (net, step) = match resume {
        Some(ck) => {
            ck.check_tree(tree)?;
            let step = ck.header.step;
            (ck.net, step)
        }
        None => {
            let arch = UNetConfig { in_channels: 3, widths: config.widths, classes: tree.leaf_count() + 1 };
            let net = MicroUNet::init(arch, derive_seed(config.seed, stream::INIT)).map_err(|e| Error::data(e.to_string()))?;
            (net, 0)
        }
    };
    let settings = TrainSettings { patience: config.patience, seed: config.seed, loss: config.loss, ..TrainSettings::new(config.seed) };
    let mut trainer = Trainer::resume(tree, net, settings, step)?;
    let mut episode_checkpoints = Vec::new();
    for (i, (spec, data)) in config.episodes.iter().zip(&datasets).enumerate() {
        let train = data.subset(SplitName::Train);
        let val = data.subset(SplitName::Val);
        let episode = EpisodeData { name: &data.manifest.name, cut: &data.cut, train: &train, val: &val };
        trainer.run_episode(&episode, &spec.config()).map_err(|e| Error::from(e).context(format!("episode {i}")))?;
        let ck = Checkpoint::new(trainer.net().clone(), tree, trainer.steps());
        ck.save(&out_dir.join(format!("episode_{i}.hlnet")))?;
        episode_checkpoints.push(ck);
    }
    let (net, log, steps) = trainer.into_parts();
    let checkpoint = Checkpoint::new(net, tree, steps);
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    write(&out_dir.join(METRICS_FILE), metrics_csv(&log).as_bytes())?;

    // Score what was saved, so results match a later evaluation of the file.
    let saved = Checkpoint::from_bytes(&checkpoint.to_bytes())?;
    let mut evaluations = Vec::new();
    for (i, data) in eval_sets.iter().enumerate() {
        let eval = evaluate_net(&saved.net, data, SplitName::Test)?;
        write(&out_dir.join(format!("eval_{i}_{}.csv", data.manifest.name)), report_csv(&eval).as_bytes())?;
        evaluations.push(eval);
    }
    Ok(ScheduleOutcome { checkpoint, episode_checkpoints, log, evaluations })
}
