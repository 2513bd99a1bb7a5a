//! Joint confidence + localization objective with hard-negative mining.
//!
//! `total = (L_conf + alpha * L_loc) / N` where `N` is the number of matched
//! default boxes in the batch. `L_conf` is the summed softmax cross-entropy
//! over positives and the mined negatives, `L_loc` the summed smooth-L1
//! over the positives' encoded offsets.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode, BBox};
use crate::engine::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::head::{PredictionLayout, BACKGROUND};
use crate::matching::{match_boxes, GroundTruth, MatchAssignment};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub neg_pos_ratio: f64,
    pub match_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            neg_pos_ratio: 3.0,
            match_threshold: crate::matching::DEFAULT_MATCH_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub conf: f64,
    pub loc: f64,
    pub n_matched: usize,
    pub n_negatives_used: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub report: LossReport,
}

/// Matches every image of a batch against the same default boxes.
pub fn assign_batch(defaults: &[BBox], gts: &[Vec<GroundTruth>], threshold: f64) -> Vec<MatchAssignment> {
    gts.iter()
        .map(|img| {
            let boxes: Vec<BBox> = img.iter().map(|g| g.bbox).collect();
            match_boxes(defaults, &boxes, threshold)
        })
        .collect()
}

/// Background cross-entropy `-ln softmax(row)[0]` of one logit row.
pub fn background_loss(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[BACKGROUND]
}

/// Picks the `limit` highest-loss candidates; equal losses prefer the lower
/// index. Returns indices in selection order.
pub fn mine_hard_negatives(losses: &[(usize, f64)], limit: usize) -> Vec<usize> {
    let mut ranked = losses.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(limit).map(|(i, _)| i).collect()
}

/// Builds the loss over per-tap head outputs. `assignments[b]` and `gts[b]`
/// describe image `b`; mining runs per image, keeping at most
/// `floor(neg_pos_ratio * N_b)` negatives.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var],
    layout: PredictionLayout,
    defaults: &[BBox],
    assignments: &[MatchAssignment],
    gts: &[Vec<GroundTruth>],
    config: &LossConfig,
) -> Result<LossOutput> {
    let width = layout.width();
    let c = layout.classes;
    let flat = tape.flatten_heads(preds, layout.boxes_per_cell, width)?;
    let rows_total = tape.shape(flat)[0];
    let batch = assignments.len();
    if gts.len() != batch || rows_total != batch * defaults.len() {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            lhs: vec![rows_total, gts.len()],
            rhs: vec![batch * defaults.len(), batch],
        });
    }
    let nd = defaults.len();

    let mut conf_rows = Vec::new();
    let mut conf_targets = Vec::new();
    let mut pos_rows = Vec::new();
    let mut loc_targets = Vec::new();
    let mut n_neg = 0;
    {
        let values = tape.value(flat).data();
        for (b, (assign, img)) in assignments.iter().zip(gts).enumerate() {
            if assign.len() != nd {
                return Err(Error::ShapeMismatch {
                    op: "detection_loss assignment",
                    lhs: vec![assign.len()],
                    rhs: vec![nd],
                });
            }
            let mut n_pos = 0;
            let mut candidates = Vec::new();
            for (d, m) in assign.matches.iter().enumerate() {
                let row = b * nd + d;
                match m {
                    Some(m) => {
                        let gt = img.get(m.gt).ok_or_else(|| Error::Config(format!("match refers to missing ground truth {}", m.gt)))?;
                        if gt.class_id == BACKGROUND || gt.class_id >= c {
                            return Err(Error::TargetOutOfRange {
                                target: gt.class_id,
                                classes: c,
                            });
                        }
                        n_pos += 1;
                        conf_rows.push(row);
                        conf_targets.push(gt.class_id);
                        pos_rows.push(row);
                        loc_targets.extend(encode(&defaults[d], &gt.bbox)?);
                    }
                    None => {
                        let logits: Vec<f64> = values[row * width..row * width + c].iter().map(|v| v.as_f64()).collect();
                        candidates.push((row, background_loss(&logits)));
                    }
                }
            }
            let limit = ((config.neg_pos_ratio * n_pos as f64).floor() as usize).min(candidates.len());
            for row in mine_hard_negatives(&candidates, limit) {
                conf_rows.push(row);
                conf_targets.push(BACKGROUND);
                n_neg += 1;
            }
        }
    }

    let n = pos_rows.len();
    if n == 0 {
        let loss = tape.input(Tensor::scalar(T::zero()));
        return Ok(LossOutput {
            loss,
            report: LossReport::default(),
        });
    }

    let conf_sel = tape.select_rows(flat, &conf_rows)?;
    let logits = tape.slice_cols(conf_sel, 0, c)?;
    let conf = tape.softmax_cross_entropy(logits, &conf_targets, Reduction::Sum)?;

    let pos_sel = tape.select_rows(flat, &pos_rows)?;
    let offsets = tape.slice_cols(pos_sel, c, c + 4)?;
    let target = Tensor::new(vec![n, 4], loc_targets.into_iter().map(T::from_f64_lossy).collect())?;
    let loc = tape.smooth_l1(offsets, &target)?;

    let weighted_loc = tape.scale(loc, T::from_f64_lossy(config.alpha))?;
    let sum = tape.add(conf, weighted_loc)?;
    let loss = tape.scale(sum, T::from_f64_lossy(1.0 / n as f64))?;

    let report = LossReport {
        total: tape.value(loss).data()[0].as_f64(),
        conf: tape.value(conf).data()[0].as_f64(),
        loc: tape.value(loc).data()[0].as_f64(),
        n_matched: n,
        n_negatives_used: n_neg,
    };
    Ok(LossOutput { loss, report })
}
