//! Episode training, early stopping and PQ evaluation.
//!
//! One network is carried through a sequence of episodes. Each episode uses
//! exactly one dataset and that dataset's cut; nothing in the network is
//! reset between episodes.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::{AdamConfig, AdamState, MicroUNet, NetError, Tensor};
use crate::hierarchy::{ClassTree, Fingerprint, HierarchyError, LabelSet};
use crate::losses::{combined_loss, CombinedLossParams, LossError, ProbField, Target, TargetField};
use crate::metrics::{classify_instances, connected_components, panoptic_quality, MaskPair, MetricsError, PqReport};
use crate::seed;
use crate::synth::{apply_plan, AugmentPlan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("non-finite loss in episode {episode}, epoch {epoch}, step {step}")]
    NonFiniteLoss { episode: usize, epoch: usize, step: u64 },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("network emits {found} channels, tree needs {expected}")]
    OutputChannels { expected: usize, found: usize },
    #[error("invalid episode: {0}")]
    Episode(&'static str),
}

/// An image with its two-channel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub masks: MaskPair,
}

impl Sample {
    /// Per-pixel loss targets under `cut`.
    pub fn targets(&self, cut: &LabelSet) -> Result<TargetField, TrainError> {
        masks_to_targets(&self.masks, cut)
    }
}

pub fn masks_to_targets(masks: &MaskPair, cut: &LabelSet) -> Result<TargetField, TrainError> {
    masks.check_members(cut.len())?;
    let labels = masks
        .classes()
        .iter()
        .map(|&v| if v == 0 { Target::Background } else { Target::Member(v as usize - 1) })
        .collect();
    Ok(TargetField::new(labels, cut.clone())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub augment: bool,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return Err(TrainError::Episode("max_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Episode("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Episode("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub patience: usize,
    pub seed: u64,
    pub loss: CombinedLossParams,
    pub adam: AdamConfig,
}

impl TrainSettings {
    pub fn new(seed: u64) -> Self {
        Self { patience: 5, seed, loss: CombinedLossParams::default(), adam: AdamConfig::default() }
    }
}

/// The data of one episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeData<'a> {
    pub name: &'a str,
    pub cut: &'a LabelSet,
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    /// Validation loss of the incoming network, before any update.
    EpisodeStart,
    Step,
    EpochEnd,
    EarlyStop,
    RestoreBest,
}

impl Event {
    pub fn name(self) -> &'static str {
        match self {
            Event::EpisodeStart => "episode_start",
            Event::Step => "step",
            Event::EpochEnd => "epoch_end",
            Event::EarlyStop => "early_stop",
            Event::RestoreBest => "restore_best",
        }
    }
}

/// One row of the metrics log. Epochs count from 1; `epoch` 0 marks the
/// episode start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub epoch: usize,
    /// Global optimizer step count after this event.
    pub step: u64,
    pub dataset: String,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub event: Event,
    /// Cut the loss values were computed against.
    pub cut: Fingerprint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stale,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(f64, usize)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Progress {
        match self.best {
            Some((best, _)) if val_loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Stale
                }
            }
            _ => {
                self.best = Some((val_loss, epoch));
                self.stale = 0;
                Progress::Improved
            }
        }
    }

    /// `(loss, epoch)` of the best epoch so far.
    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Forward pass plus loss for one sample; returns the loss and dL/dscores.
fn sample_loss_grad(
    net: &MicroUNet,
    tree: &ClassTree,
    image: &Tensor,
    targets: &TargetField,
    params: &CombinedLossParams,
) -> Result<(f64, crate::diffnet::Tape, crate::diffnet::Var, Tensor), TrainError> {
    let (tape, out) = net.trace(image)?;
    let scores = tape.value(out);
    let probs = ProbField::softmax(scores.channels(), &scores.to_pixel_rows())?;
    let loss = combined_loss(&probs, targets, tree, params)?;
    let grad = Tensor::from_pixel_rows(scores.channels(), scores.height(), scores.width(), &loss.score_grad);
    Ok((loss.value, tape, out, grad))
}

/// Combined loss of `net` on one sample, no gradients.
pub fn sample_loss(
    net: &MicroUNet,
    tree: &ClassTree,
    cut: &LabelSet,
    sample: &Sample,
    params: &CombinedLossParams,
) -> Result<f64, TrainError> {
    let scores = net.forward(&sample.image)?;
    let probs = ProbField::softmax(scores.channels(), &scores.to_pixel_rows())?;
    Ok(combined_loss(&probs, &sample.targets(cut)?, tree, params)?.value)
}

/// Mean per-image loss over `samples`.
pub fn mean_loss(
    net: &MicroUNet,
    tree: &ClassTree,
    cut: &LabelSet,
    samples: &[Sample],
    params: &CombinedLossParams,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(net, tree, cut, s, params)?;
    }
    Ok(total / samples.len() as f64)
}

/// Carries one network through a sequence of episodes.
#[derive(Debug, Clone)]
pub struct Trainer<'t> {
    tree: &'t ClassTree,
    net: MicroUNet,
    settings: TrainSettings,
    step: u64,
    episodes: usize,
    log: Vec<LogRecord>,
}

impl<'t> Trainer<'t> {
    pub fn new(tree: &'t ClassTree, net: MicroUNet, settings: TrainSettings) -> Result<Self, TrainError> {
        Self::resume(tree, net, settings, 0)
    }

    /// Continues from a network that has already taken `step` updates.
    pub fn resume(tree: &'t ClassTree, net: MicroUNet, settings: TrainSettings, step: u64) -> Result<Self, TrainError> {
        let expected = tree.leaf_count() + 1;
        if net.config().classes != expected {
            return Err(TrainError::OutputChannels { expected, found: net.config().classes });
        }
        settings.loss.validate()?;
        if !(settings.loss.lambda_ce > 0.0 && settings.loss.lambda_ft > 0.0) {
            return Err(TrainError::Episode("both loss weights must be positive for training"));
        }
        Ok(Self { tree, net, settings, step, episodes: 0, log: Vec::new() })
    }

    pub fn net(&self) -> &MicroUNet {
        &self.net
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (MicroUNet, Vec<LogRecord>, u64) {
        (self.net, self.log, self.step)
    }

    fn record(&mut self, epoch: usize, data: &EpisodeData, train: Option<f64>, val: Option<f64>, event: Event) {
        self.log.push(LogRecord {
            episode: self.episodes,
            epoch,
            step: self.step,
            dataset: data.name.into(),
            train_loss: train,
            val_loss: val,
            event,
            cut: data.cut.fingerprint(),
        });
    }

    /// Runs one episode: shuffled mini-batches, an Adam update per batch, a
    /// validation pass per epoch, early stopping with restore-best. Adam
    /// moments start fresh with the episode's learning rate.
    pub fn run_episode(&mut self, data: &EpisodeData, config: &EpisodeConfig) -> Result<EpisodeSummary, TrainError> {
        config.validate()?;
        data.cut.check_tree(self.tree)?;
        if data.train.is_empty() {
            return Err(TrainError::EmptySplit("training"));
        }
        if data.val.is_empty() {
            return Err(TrainError::EmptySplit("validation"));
        }
        let episode = self.episodes;
        let loss_params = self.settings.loss;
        let stream = (episode as u64) << 16;
        let mut shuffle_rng = seed::rng(seed::derive_seed(self.settings.seed, seed::stream::SHUFFLE + stream));
        let mut augment_rng = seed::rng(seed::derive_seed(self.settings.seed, seed::stream::AUGMENT + stream));
        let targets: Vec<TargetField> = data.train.iter().map(|s| s.targets(data.cut)).collect::<Result<_, _>>()?;
        let mut adam = AdamState::new(AdamConfig { learning_rate: config.learning_rate, ..self.settings.adam }, self.net.params());

        let start_val = mean_loss(&self.net, self.tree, data.cut, data.val, &loss_params)?;
        self.record(0, data, None, Some(start_val), Event::EpisodeStart);

        let mut stopper = EarlyStopping::new(self.settings.patience);
        let mut best_params = self.net.params().flat_values();
        let mut epochs_run = 0;
        let mut stopped_early = false;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut epoch_total = 0.0;
            for batch in order.chunks(config.batch_size) {
                self.net.zero_grad();
                let scale = 1.0 / batch.len() as f64;
                let mut batch_total = 0.0;
                for &idx in batch {
                    let sample = &data.train[idx];
                    let (value, tape, out, mut grad) = if config.augment {
                        let plan = AugmentPlan::draw(&mut augment_rng);
                        let (image, masks) = apply_plan(&sample.image, &sample.masks, &plan);
                        let t = masks_to_targets(&masks, data.cut)?;
                        sample_loss_grad(&self.net, self.tree, &image, &t, &loss_params)?
                    } else {
                        sample_loss_grad(&self.net, self.tree, &sample.image, &targets[idx], &loss_params)?
                    };
                    if !value.is_finite() {
                        return Err(TrainError::NonFiniteLoss { episode, epoch, step: self.step });
                    }
                    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
                    self.net.backward(&tape, out, &grad)?;
                    batch_total += value;
                }
                adam.step(self.net.params_mut())?;
                self.step += 1;
                epoch_total += batch_total;
                self.record(epoch, data, Some(batch_total * scale), None, Event::Step);
            }
            epochs_run = epoch;
            let val = mean_loss(&self.net, self.tree, data.cut, data.val, &loss_params)?;
            if !val.is_finite() {
                return Err(TrainError::NonFiniteLoss { episode, epoch, step: self.step });
            }
            self.record(epoch, data, Some(epoch_total / data.train.len() as f64), Some(val), Event::EpochEnd);
            match stopper.observe(epoch, val) {
                Progress::Improved => best_params = self.net.params().flat_values(),
                Progress::Stale => {}
                Progress::Stop => {
                    stopped_early = true;
                    self.record(epoch, data, None, Some(val), Event::EarlyStop);
                    break;
                }
            }
        }
        let (best_val_loss, best_epoch) = stopper.best().expect("at least one epoch ran");
        self.net.params_mut().load_flat(&best_params);
        self.record(best_epoch, data, None, Some(best_val_loss), Event::RestoreBest);
        self.episodes += 1;
        Ok(EpisodeSummary { epochs_run, best_epoch, best_val_loss, stopped_early })
    }
}

/// Softmax probabilities, pixel-major with `c + 1` channels per pixel.
pub fn predict_probs(net: &MicroUNet, image: &Tensor) -> Result<Vec<f64>, TrainError> {
    let scores = net.forward(image)?;
    Ok(ProbField::softmax(scores.channels(), &scores.to_pixel_rows())?.as_slice().to_vec())
}

/// Predicted instances at `cut`: pixels whose background probability is
/// below one half form the foreground, its 4-connected components are the
/// instances, and each instance takes the class of its projected mass vote.
pub fn predict_masks(net: &MicroUNet, tree: &ClassTree, cut: &LabelSet, image: &Tensor) -> Result<MaskPair, TrainError> {
    let probs = predict_probs(net, image)?;
    masks_from_probs(&probs, image.height(), image.width(), tree, cut)
}

pub fn masks_from_probs(
    probs: &[f64],
    height: usize,
    width: usize,
    tree: &ClassTree,
    cut: &LabelSet,
) -> Result<MaskPair, TrainError> {
    let c1 = tree.leaf_count() + 1;
    let foreground: Vec<bool> = probs.chunks_exact(c1).map(|row| row[c1 - 1] < 0.5).collect();
    let instances = connected_components(&foreground, height, width);
    let classes = classify_instances(&instances, probs, tree, cut)?;
    Ok(MaskPair::new(height, width, instances, classes)?)
}

/// Per-image reports and their dataset-level merge (counts and IoU sums are
/// pooled over images before PQ is formed).
pub fn evaluate_samples(
    net: &MicroUNet,
    tree: &ClassTree,
    cut: &LabelSet,
    samples: &[Sample],
) -> Result<(Vec<PqReport>, PqReport), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut total = PqReport::default();
    for s in samples {
        s.masks.check_members(cut.len())?;
        let pred = predict_masks(net, tree, cut, &s.image)?;
        let report = panoptic_quality(&pred, &s.masks)?;
        total.merge(&report);
        per_image.push(report);
    }
    Ok((per_image, total))
}

/// Finite-difference check of the whole network under the combined loss:
/// `samples` parameters are drawn at random and their analytic gradients
/// compared against central differences with step `h`. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn network_gradient_check(
    net: &MicroUNet,
    tree: &ClassTree,
    image: &Tensor,
    targets: &TargetField,
    params: &CombinedLossParams,
    h: f64,
    samples: usize,
    seed_value: u64,
) -> Result<f64, TrainError> {
    let mut work = net.clone();
    work.zero_grad();
    let (_, tape, out, grad) = sample_loss_grad(&work, tree, image, targets, params)?;
    work.backward(&tape, out, &grad)?;
    let analytic = work.params().flat_grads();
    let base = work.params().flat_values();
    let mut rng = seed::rng(seed_value);
    let loss_at = |values: &[f64]| -> Result<f64, TrainError> {
        let probe = MicroUNet::from_flat(*net.config(), values)?;
        let scores = probe.forward(image)?;
        let probs = ProbField::softmax(scores.channels(), &scores.to_pixel_rows())?;
        Ok(combined_loss(&probs, targets, tree, params)?.value)
    };
    let mut worst: f64 = 0.0;
    let mut values = base.clone();
    for _ in 0..samples {
        let i = rng.gen_range(0..base.len());
        values[i] = base[i] + h;
        let plus = loss_at(&values)?;
        values[i] = base[i] - h;
        let minus = loss_at(&values)?;
        values[i] = base[i];
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Seeded patch of 8-bit-like intensities in [0, 1].
pub fn random_patch(channels: usize, height: usize, width: usize, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let data = (0..channels * height * width).map(|_| rng.gen_range(0..=255u32) as f64 / 255.0).collect();
    Tensor::from_vec(channels, height, width, data)
}
