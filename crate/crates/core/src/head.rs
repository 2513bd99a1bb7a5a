//! Multibox prediction layers: one 3x3 convolution per tapped feature map,
//! emitting `k * (c + 4)` channels per location (`c` class logits including
//! background, then 4 box offsets, for each of the `k` default boxes).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{decode, BBox};
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ConvParams, ParamStore};
use crate::scalar::Scalar;

/// Class index reserved for background.
pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLayout {
    pub boxes_per_cell: usize,
    /// Class count including background.
    pub classes: usize,
}

impl PredictionLayout {
    /// Values per default box: class logits then 4 offsets.
    pub fn width(&self) -> usize {
        self.classes + 4
    }

    pub fn channels(&self) -> usize {
        self.boxes_per_cell * self.width()
    }

    pub fn boxes_for(&self, rows: usize, cols: usize) -> usize {
        self.boxes_per_cell * rows * cols
    }
}

pub fn build_heads<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    tap_channels: &[usize],
    layout: PredictionLayout,
    rng: &mut R,
) -> Result<Vec<ConvParams>> {
    tap_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| ConvParams::new(store, &format!("head{i}"), c, layout.channels(), 3, 1, 1, rng))
        .collect()
}

/// Applies each head to its tap; outputs are `[B, k(c+4), m, n]`.
pub fn predict<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    taps: &[Var],
    heads: &[ConvParams],
    layout: PredictionLayout,
) -> Result<Vec<Var>> {
    if taps.len() != heads.len() {
        return Err(Error::Config(format!("{} taps for {} heads", taps.len(), heads.len())));
    }
    taps.iter()
        .zip(heads)
        .map(|(&tap, head)| {
            if head.out_channels != layout.channels() {
                return Err(Error::ShapeMismatch {
                    op: "prediction head",
                    lhs: vec![head.out_channels],
                    rhs: vec![layout.channels()],
                });
            }
            tape.conv2d_with(tap, head, store)
        })
        .collect()
}

/// Class-specific box with its softmax score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Softmax over one box's class logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Turns one image's flattened predictions (`D` rows of `c + 4`) into
/// per-class candidate detections above `score_floor`. Boxes are decoded
/// against `defaults` but not clipped.
pub fn candidate_detections(rows: &[f64], defaults: &[BBox], layout: PredictionLayout, score_floor: f64) -> Vec<Detection> {
    let w = layout.width();
    let c = layout.classes;
    let mut out = Vec::new();
    for (d, row) in rows.chunks_exact(w).enumerate() {
        let probs = softmax(&row[..c]);
        let offsets = [row[c], row[c + 1], row[c + 2], row[c + 3]];
        let bbox = decode(&defaults[d], &offsets);
        if !bbox.is_valid() {
            continue;
        }
        for (class_id, &p) in probs.iter().enumerate().skip(1) {
            if p > score_floor {
                out.push(Detection {
                    bbox,
                    class_id,
                    score: p,
                });
            }
        }
    }
    out
}
