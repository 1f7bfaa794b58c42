//! Omission rate, filter recall and a small AP over toy detections.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::cost::TimingRecord;
use crate::episode::{BoundingBox, ClassId, Episode};
use crate::selector::{run_inference, score_all, select, Detection, InferenceParams, SelectionStrategy};
use crate::tpf::{TpfError, TpfModel};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("omission rate undefined for full-loop AP {0}")]
    UndefinedOmission(f64),
    #[error("iou threshold {0} outside (0, 1)")]
    IouThreshold(f64),
    #[error(transparent)]
    Tpf(#[from] TpfError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Signed percentage change of the minor-loop AP relative to the full loop.
pub fn omission_rate(ap_full: f64, ap_minor: f64) -> Result<f64> {
    if !(ap_full > 0.0) || !ap_full.is_finite() {
        return Err(MetricsError::UndefinedOmission(ap_full));
    }
    // Adding 0.0 maps -0.0 to 0.0 so equal APs print as 0.
    Ok(-(ap_full - ap_minor) / ap_full * 100.0 + 0.0)
}

/// Fraction of present classes that were selected; 1 when nothing is present.
pub fn tpf_recall(selected: &[ClassId], present: &BTreeSet<ClassId>) -> f64 {
    if present.is_empty() {
        return 1.0;
    }
    let selected: BTreeSet<ClassId> = selected.iter().copied().collect();
    present.intersection(&selected).count() as f64 / present.len() as f64
}

/// AP of one class. None when there is no ground truth.
pub fn class_average_precision(
    detections: &[Detection],
    gt: &[BoundingBox],
    iou_threshold: f64,
) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut matched = vec![false; gt.len()];
    let mut hits = Vec::with_capacity(order.len());
    for d in order {
        let best = gt
            .iter()
            .enumerate()
            .filter(|&(i, _)| !matched[i])
            .map(|(i, g)| (i, f64::from(d.bbox.iou(g))))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((i, _)) => {
                matched[i] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }

    let n_gt = gt.len() as f64;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Mean class AP over the classes that have ground truth.
pub fn average_precision(
    per_class: &[(&[Detection], &[BoundingBox])],
    iou_threshold: f64,
) -> Option<f64> {
    let aps: Vec<f64> = per_class
        .iter()
        .filter_map(|(d, g)| class_average_precision(d, g, iou_threshold))
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassRecall {
    pub selected: usize,
    pub present: usize,
}

impl ClassRecall {
    pub fn recall(&self) -> Option<f64> {
        (self.present > 0).then(|| self.selected as f64 / self.present as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecallReport {
    pub per_class: BTreeMap<ClassId, ClassRecall>,
}

impl RecallReport {
    fn record(&mut self, candidates: impl Iterator<Item = ClassId>, selected: &[ClassId], present: &BTreeSet<ClassId>) {
        let selected: BTreeSet<ClassId> = selected.iter().copied().collect();
        for c in candidates {
            let e = self.per_class.entry(c).or_insert(ClassRecall { selected: 0, present: 0 });
            if present.contains(&c) {
                e.present += 1;
                e.selected += usize::from(selected.contains(&c));
            }
        }
    }

    /// Recall of every class that was present at least once.
    pub fn recalls(&self) -> BTreeMap<ClassId, f64> {
        self.per_class.iter().filter_map(|(&c, r)| Some((c, r.recall()?))).collect()
    }

    /// Unweighted mean over classes with defined recall.
    pub fn mean_recall(&self) -> Option<f64> {
        let r = self.recalls();
        (!r.is_empty()).then(|| r.values().sum::<f64>() / r.len() as f64)
    }
}

/// Per-class filter recall over a set of episodes, from scores alone.
pub fn class_recall_report(
    episodes: &[Episode],
    model: &TpfModel,
    strategy: SelectionStrategy,
) -> Result<RecallReport> {
    strategy.validate()?;
    let mut report = RecallReport::default();
    for ep in episodes {
        let selected = match strategy {
            SelectionStrategy::All => ep.classes().collect(),
            _ => select(&score_all(model, ep)?, strategy),
        };
        report.record(ep.classes(), &selected, ep.present());
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub inference: InferenceParams,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_IOU_THRESHOLD, inference: InferenceParams::default() }
    }
}

/// Wall-clock totals in seconds. Not reproducible across runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TimingSummary {
    pub full_total_s: f64,
    pub full_heavy_s: f64,
    pub minor_total_s: f64,
    pub minor_heavy_s: f64,
    pub minor_scoring_s: f64,
    /// minor heavy / full heavy
    pub heavy_ratio: f64,
    /// minor scoring / full total
    pub scoring_overhead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub strategy: SelectionStrategy,
    pub episodes: usize,
    pub ap_full: f64,
    pub ap_minor: f64,
    /// None when the full-loop AP is zero.
    pub omission_rate: Option<f64>,
    pub recall: RecallReport,
    pub mean_selected: f64,
    pub timing: TimingSummary,
    /// One record per episode and loop, for cost fitting.
    pub runs: Vec<TimingRecord>,
}

impl EvalReport {
    pub fn class_recall(&self) -> BTreeMap<ClassId, f64> {
        self.recall.recalls()
    }

    pub fn mean_recall(&self) -> Option<f64> {
        self.recall.mean_recall()
    }

    /// `class,selected,present,recall` rows for classes seen at least once.
    pub fn recall_csv(&self) -> String {
        let mut out = String::from("class,selected,present,recall\n");
        for (c, r) in &self.recall.per_class {
            if let Some(v) = r.recall() {
                let _ = writeln!(out, "{},{},{},{:.4}", c, r.selected, r.present, v);
            }
        }
        out
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Run the full loop and the `strategy` loop on every episode and compare.
///
/// AP is computed per (episode, class) pair with ground truth and averaged,
/// so a class dropped by the selector scores 0 on that episode and the
/// minor-loop AP can never exceed the full-loop AP.
pub fn evaluate(
    ckpt: &Checkpoint,
    episodes: &[Episode],
    strategy: SelectionStrategy,
    params: &EvalParams,
) -> Result<EvalReport> {
    if !(params.iou_threshold > 0.0 && params.iou_threshold < 1.0) {
        return Err(MetricsError::IouThreshold(params.iou_threshold));
    }
    strategy.validate()?;
    let mut full_aps = Vec::new();
    let mut minor_aps = Vec::new();
    let mut recall = RecallReport::default();
    let mut timing = TimingSummary::default();
    let mut runs = Vec::with_capacity(2 * episodes.len());
    let mut selected_total = 0usize;

    for ep in episodes {
        let full = run_inference(ckpt, ep, SelectionStrategy::All, &params.inference)?;
        let minor = run_inference(ckpt, ep, strategy, &params.inference)?;
        for (class, gt) in ep.gt_boxes() {
            let ap = |dets: &BTreeMap<ClassId, Vec<Detection>>| {
                class_average_precision(&dets[class], gt, params.iou_threshold)
            };
            full_aps.extend(ap(&full.detections));
            minor_aps.extend(ap(&minor.detections));
        }
        recall.record(ep.classes(), &minor.selected, ep.present());
        selected_total += minor.selected.len();

        timing.full_total_s += secs(full.timings.total);
        timing.full_heavy_s += secs(full.timings.heavy());
        timing.minor_total_s += secs(minor.timings.total);
        timing.minor_heavy_s += secs(minor.timings.heavy());
        timing.minor_scoring_s += secs(minor.timings.scoring);
        runs.push(TimingRecord::from_output(&full, ep.num_classes(), false));
        runs.push(TimingRecord::from_output(&minor, ep.num_classes(), strategy != SelectionStrategy::All));
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap_full = mean(&full_aps);
    let ap_minor = mean(&minor_aps);
    if timing.full_heavy_s > 0.0 {
        timing.heavy_ratio = timing.minor_heavy_s / timing.full_heavy_s;
    }
    if timing.full_total_s > 0.0 {
        timing.scoring_overhead = timing.minor_scoring_s / timing.full_total_s;
    }
    Ok(EvalReport {
        strategy,
        episodes: episodes.len(),
        ap_full,
        ap_minor,
        omission_rate: omission_rate(ap_full, ap_minor).ok(),
        recall,
        mean_selected: if episodes.is_empty() { 0.0 } else { selected_total as f64 / episodes.len() as f64 },
        timing,
        runs,
    })
}
