//! Default-box to ground-truth assignment.
//!
//! Two passes over the IoU matrix:
//!
//! 1. every ground truth claims one default box, greedily by global best
//!    IoU among unclaimed pairs, so each ground truth is supervised even
//!    when no default box clears the threshold;
//! 2. every remaining default box whose best IoU exceeds the threshold is
//!    matched to that ground truth.
//!
//! Ties prefer the lower default-box index, then the lower ground-truth
//! index.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};

/// A labelled ground-truth box; `class_id` is never background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchSource {
    Forced,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxMatch {
    pub gt: usize,
    pub iou: f64,
    pub source: MatchSource,
}

/// Per default box: the matched ground truth, or `None` for a negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub matches: Vec<Option<BoxMatch>>,
}

impl MatchAssignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, &BoxMatch)> {
        self.matches.iter().enumerate().filter_map(|(d, m)| m.as_ref().map(|m| (d, m)))
    }

    pub fn num_positive(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

pub fn match_boxes(defaults: &[BBox], gts: &[BBox], threshold: f64) -> MatchAssignment {
    let (nd, ng) = (defaults.len(), gts.len());
    let mut matches: Vec<Option<BoxMatch>> = vec![None; nd];
    if ng == 0 || nd == 0 {
        return MatchAssignment { matches };
    }
    // row-major over defaults
    let overlaps: Vec<f64> = defaults
        .iter()
        .flat_map(|d| gts.iter().map(move |g| iou_unchecked(d, g)))
        .collect();

    let mut gt_done = vec![false; ng];
    for _ in 0..ng.min(nd) {
        let mut best: Option<(usize, usize, f64)> = None;
        for d in 0..nd {
            if matches[d].is_some() {
                continue;
            }
            for g in 0..ng {
                if gt_done[g] {
                    continue;
                }
                let v = overlaps[d * ng + g];
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((d, g, v));
                }
            }
        }
        let Some((d, g, v)) = best else { break };
        gt_done[g] = true;
        matches[d] = Some(BoxMatch {
            gt: g,
            iou: v,
            source: MatchSource::Forced,
        });
    }

    for d in 0..nd {
        if matches[d].is_some() {
            continue;
        }
        let row = &overlaps[d * ng..(d + 1) * ng];
        let (g, &v) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (g, v)| if *v > *acc.1 { (g, v) } else { acc });
        if v > threshold {
            matches[d] = Some(BoxMatch {
                gt: g,
                iou: v,
                source: MatchSource::Threshold,
            });
        }
    }
    MatchAssignment { matches }
}
