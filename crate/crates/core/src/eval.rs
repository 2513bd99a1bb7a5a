//! Inference post-processing and multi-threshold average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Error, Result};
use crate::head::{candidate_detections, Detection, PredictionLayout};
use crate::matching::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub nms_iou: f64,
    pub score_floor: f64,
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.45,
            score_floor: 0.01,
            top_k: 200,
        }
    }
}

/// Orders by descending score; equal scores keep their input order.
fn rank<T>(items: &mut [T], score: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

/// Greedy non-maximum suppression for detections of a single class.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    rank(&mut sorted, |d| d.score);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Full decode path for one image: candidates, per-class NMS, top-k, clip.
pub fn postprocess(rows: &[f64], defaults: &[BBox], layout: PredictionLayout, config: &PostprocessConfig) -> Vec<Detection> {
    let candidates = candidate_detections(rows, defaults, layout, config.score_floor);
    let mut out = Vec::new();
    for class_id in 1..layout.classes {
        let of_class: Vec<Detection> = candidates.iter().filter(|d| d.class_id == class_id).copied().collect();
        out.extend(nms(&of_class, config.nms_iou));
    }
    rank(&mut out, |d| d.score);
    out.truncate(config.top_k);
    out.into_iter()
        .map(|d| Detection {
            bbox: d.bbox.clipped(),
            ..d
        })
        .filter(|d| d.bbox.is_valid())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Cumulative precision/recall after each ranked detection that counts.
/// Each detection is compared against its best-IoU ground truth in the same
/// image: a true positive if that overlap reaches `iou_thr` and the ground
/// truth is still unclaimed, otherwise a false positive. Detections whose
/// best ground truth is flagged in `ignore` (and overlaps enough) are
/// dropped from the curve. Returns `(recall, precision, n_counted_gt)`.
pub fn precision_recall(
    dets: &[RankedDetection],
    gts: &[Vec<BBox>],
    ignore: Option<&[Vec<bool>]>,
    iou_thr: f64,
) -> (Vec<f64>, Vec<f64>, usize) {
    let mut sorted = dets.to_vec();
    rank(&mut sorted, |d| d.score);
    let is_ignored = |img: usize, g: usize| ignore.is_some_and(|ig| ig[img][g]);
    let n_gt = gts
        .iter()
        .enumerate()
        .map(|(i, img)| (0..img.len()).filter(|&g| !is_ignored(i, g)).count())
        .sum::<usize>();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    for d in &sorted {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[d.image].iter().enumerate() {
            let v = iou_unchecked(&d.bbox, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= iou_thr => {
                if is_ignored(d.image, g) {
                    continue;
                }
                if claimed[d.image][g] {
                    fp += 1;
                } else {
                    claimed[d.image][g] = true;
                    tp += 1;
                }
            }
            _ => fp += 1,
        }
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    (recall, precision, n_gt)
}

/// Area under the precision envelope.
pub fn area_under_curve(recall: &[f64], precision: &[f64], interpolation: Interpolation) -> f64 {
    match interpolation {
        Interpolation::AllPoint => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            let mut mpre = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            mrec.extend_from_slice(recall);
            mpre.extend_from_slice(precision);
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).filter(|&i| mrec[i] != mrec[i - 1]).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(rc, _)| **rc >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class. With no ground truth the result is 1.0 when nothing was
/// detected and 0.0 otherwise.
pub fn average_precision(
    dets: &[RankedDetection],
    gts: &[Vec<BBox>],
    ignore: Option<&[Vec<bool>]>,
    iou_thr: f64,
    interpolation: Interpolation,
) -> f64 {
    let (recall, precision, n_gt) = precision_recall(dets, gts, ignore, iou_thr);
    if n_gt == 0 {
        return if recall.is_empty() { 1.0 } else { 0.0 };
    }
    area_under_curve(&recall, &precision, interpolation)
}

/// `0.50, 0.55, ..., 0.80`.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..=6).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Per-class AP and mAP, keyed by threshold formatted with two decimals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApResult {
    #[serde(flatten)]
    pub per_class: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(rename = "mAP")]
    pub map: BTreeMap<String, f64>,
}

impl ApResult {
    pub fn map_at(&self, thr: f64) -> Option<f64> {
        self.map.get(&threshold_key(thr)).copied()
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: default_iou_thresholds(),
            interpolation: Interpolation::AllPoint,
        }
    }
}

/// `class_names[i]` names class id `i + 1`.
pub fn evaluate(images: &[ImageEval], class_names: &[String], config: &EvalConfig) -> Result<ApResult> {
    evaluate_masked(images, None, class_names, config)
}

fn evaluate_masked(
    images: &[ImageEval],
    ignore: Option<&[Vec<bool>]>,
    class_names: &[String],
    config: &EvalConfig,
) -> Result<ApResult> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut result = ApResult::default();
    for thr in &config.iou_thresholds {
        let key = threshold_key(*thr);
        let mut sum = 0.0;
        for (ci, name) in class_names.iter().enumerate() {
            let class_id = ci + 1;
            let mut dets = Vec::new();
            let mut gts = Vec::with_capacity(images.len());
            let mut masks = Vec::with_capacity(images.len());
            for (i, img) in images.iter().enumerate() {
                dets.extend(img.detections.iter().filter(|d| d.class_id == class_id).map(|d| RankedDetection {
                    image: i,
                    bbox: d.bbox,
                    score: d.score,
                }));
                let mut boxes = Vec::new();
                let mut mask = Vec::new();
                for (g, gt) in img.ground_truths.iter().enumerate() {
                    if gt.class_id == class_id {
                        boxes.push(gt.bbox);
                        mask.push(ignore.is_some_and(|ig| ig[i][g]));
                    }
                }
                gts.push(boxes);
                masks.push(mask);
            }
            let ap = average_precision(&dets, &gts, ignore.map(|_| masks.as_slice()), *thr, config.interpolation);
            sum += ap;
            result.per_class.entry(name.clone()).or_default().insert(key.clone(), ap);
        }
        let map = if class_names.is_empty() { 0.0 } else { sum / class_names.len() as f64 };
        result.map.insert(key, map);
    }
    Ok(result)
}

/// Object size and visibility buckets. "Small" means a box covering less
/// than 5% of the image; "occluded" means more than 30% of it is hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    SmallClear,
    SmallOccluded,
    LargeClear,
    LargeOccluded,
}

pub const SMALL_AREA: f64 = 0.05;
pub const OCCLUDED_FRACTION: f64 = 0.3;

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::SmallClear, Stratum::SmallOccluded, Stratum::LargeClear, Stratum::LargeOccluded];

    pub fn of(area: f64, occluded_fraction: f64) -> Self {
        match (area < SMALL_AREA, occluded_fraction > OCCLUDED_FRACTION) {
            (true, false) => Stratum::SmallClear,
            (true, true) => Stratum::SmallOccluded,
            (false, false) => Stratum::LargeClear,
            (false, true) => Stratum::LargeOccluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: Stratum,
    pub objects: usize,
    pub ap: ApResult,
}

/// AP restricted to one stratum at a time: ground truths outside it are
/// ignored, along with any detection that lands on them.
pub fn evaluate_strata(
    images: &[ImageEval],
    labels: &[Vec<Stratum>],
    class_names: &[String],
    config: &EvalConfig,
) -> Result<Vec<StratumReport>> {
    if labels.len() != images.len() || labels.iter().zip(images).any(|(l, i)| l.len() != i.ground_truths.len()) {
        return Err(Error::Dataset("stratum labels do not line up with ground truths".into()));
    }
    Stratum::ALL
        .iter()
        .map(|&s| {
            let ignore: Vec<Vec<bool>> = labels.iter().map(|l| l.iter().map(|x| *x != s).collect()).collect();
            let objects = ignore.iter().flatten().filter(|x| !**x).count();
            let ap = evaluate_masked(images, Some(&ignore), class_names, config)?;
            Ok(StratumReport { stratum: s, objects, ap })
        })
        .collect()
}
