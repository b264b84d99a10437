//! PQ evaluation of a network or of given predictions on a dataset split.

use hiercut_core::diffnet::MicroUNet;
use hiercut_core::metrics::panoptic_quality;
use hiercut_core::train::predict_masks;
use hiercut_core::{MaskPair, PqReport};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, SplitName};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub image: String,
    pub report: PqReport,
}

/// Per-image reports and the dataset-level report, which pools TP/FP/FN
/// counts and IoU sums over all images before forming PQ.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub images: Vec<ImageReport>,
    pub total: PqReport,
}

impl Evaluation {
    pub fn mean_pq(&self) -> Option<f64> {
        self.total.mean_pq()
    }
}

fn split_indices(dataset: &Dataset, split: SplitName) -> Result<Vec<usize>> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::data(format!("{:?} split of {} is empty", split, dataset.manifest.name)));
    }
    Ok(idx)
}

/// Scores `predictions` (one per image of `split`, in split order) against
/// the dataset's ground truth.
pub fn evaluate_predictions(dataset: &Dataset, split: SplitName, predictions: &[MaskPair]) -> Result<Evaluation> {
    let idx = split_indices(dataset, split)?;
    if predictions.len() != idx.len() {
        return Err(Error::data(format!("{} predictions for {} images", predictions.len(), idx.len())));
    }
    let mut images = Vec::with_capacity(idx.len());
    let mut total = PqReport::default();
    for (pred, &i) in predictions.iter().zip(&idx) {
        let report = panoptic_quality(pred, &dataset.samples[i].masks).map_err(|e| Error::data(format!("{}: {e}", dataset.image_name(i))))?;
        total.merge(&report);
        images.push(ImageReport { image: dataset.image_name(i).into(), report });
    }
    Ok(Evaluation { dataset: dataset.manifest.name.clone(), class_names: dataset.cut.names().to_vec(), images, total })
}

/// Runs `net` over the split and scores its instances at the dataset's cut.
pub fn evaluate_net(net: &MicroUNet, dataset: &Dataset, split: SplitName) -> Result<Evaluation> {
    let idx = split_indices(dataset, split)?;
    let mut preds = Vec::with_capacity(idx.len());
    for &i in &idx {
        preds.push(predict_masks(net, &dataset.tree, &dataset.cut, &dataset.samples[i].image)?);
    }
    evaluate_predictions(dataset, split, &preds)
}

pub fn evaluate_checkpoint(checkpoint: &Checkpoint, dataset: &Dataset, split: SplitName) -> Result<Evaluation> {
    checkpoint.check_tree(&dataset.tree)?;
    evaluate_net(&checkpoint.net, dataset, split)
}

fn fmt_pq(pq: Option<f64>) -> String {
    pq.map_or_else(|| "n/a".into(), |v| v.to_string())
}

/// CSV with columns image, class_name, tp, fp, fn, sum_iou, pq: one row per
/// image and class seen in that image, one `ALL` row per cut member, and a
/// final `ALL,mean` row carrying the mean PQ.
pub fn report_csv(eval: &Evaluation) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "class_name", "tp", "fp", "fn", "sum_iou", "pq"]).expect("in-memory write");
    let name = |class: u32| eval.class_names.get(class as usize - 1).cloned().unwrap_or_else(|| class.to_string());
    for img in &eval.images {
        for c in &img.report.classes {
            w.write_record([
                img.image.clone(),
                name(c.class),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
                c.sum_iou.to_string(),
                fmt_pq(c.pq()),
            ])
            .expect("in-memory write");
        }
    }
    let (mut tp, mut fp, mut fn_, mut sum) = (0, 0, 0, 0.0);
    for (k, class_name) in eval.class_names.iter().enumerate() {
        let c = eval.total.class(k as u32 + 1).copied().unwrap_or_default();
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
        sum += c.sum_iou;
        let pq = if c.truth_count() > 0 { c.pq() } else { None };
        w.write_record(["ALL".into(), class_name.clone(), c.tp.to_string(), c.fp.to_string(), c.fn_.to_string(), c.sum_iou.to_string(), fmt_pq(pq)])
            .expect("in-memory write");
    }
    w.write_record(["ALL".into(), "mean".into(), tp.to_string(), fp.to_string(), fn_.to_string(), sum.to_string(), fmt_pq(eval.mean_pq())])
        .expect("in-memory write");
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
