//! Box geometry in normalised image coordinates and default-box grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in center-size form, coordinates in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite() && self.cx.is_finite() && self.cy.is_finite()
    }

    pub fn clipped(&self) -> Self {
        let [x1, y1, x2, y2] = self.corners();
        Self::from_corners(x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }

    /// Mirror across the vertical center line of the image.
    pub fn flipped_horizontally(&self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    fn check(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox(format!("{self:?}")))
        }
    }
}

/// Intersection area without validity checks.
pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Jaccard overlap without validity checks; callers guarantee positive areas.
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Jaccard overlap; zero-area boxes are an error.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

/// Center-size log offsets of `gt` relative to `default`:
/// `(dcx / w_d, dcy / h_d, ln(w_g / w_d), ln(h_g / h_d))`.
pub fn encode(default: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    default.check()?;
    gt.check()?;
    Ok([
        (gt.cx - default.cx) / default.w,
        (gt.cy - default.cy) / default.h,
        (gt.w / default.w).ln(),
        (gt.h / default.h).ln(),
    ])
}

/// Inverse of [`encode`]; no clipping.
pub fn decode(default: &BBox, offsets: &[f64; 4]) -> BBox {
    BBox {
        cx: default.cx + offsets[0] * default.w,
        cy: default.cy + offsets[1] * default.h,
        w: default.w * offsets[2].exp(),
        h: default.h * offsets[3].exp(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultBoxConfig {
    pub s_min: f64,
    pub s_max: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for DefaultBoxConfig {
    fn default() -> Self {
        Self {
            s_min: 0.2,
            s_max: 0.9,
            aspect_ratios: vec![1.0, 2.0, 3.0, 0.5, 1.0 / 3.0],
        }
    }
}

impl DefaultBoxConfig {
    /// One box per ratio plus the extra square box.
    pub fn boxes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + 1
    }

    /// Per-tap scales, linear from `s_min` to `s_max`, followed by the scale
    /// used for the last tap's extra box (1.0, or `s_max` for a single tap).
    pub fn scales(&self, taps: usize) -> Vec<f64> {
        match taps {
            0 => Vec::new(),
            1 => vec![self.s_min, self.s_max],
            m => {
                let mut s: Vec<f64> = (0..m)
                    .map(|k| self.s_min + (self.s_max - self.s_min) * k as f64 / (m - 1) as f64)
                    .collect();
                s.push(1.0);
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapBoxes {
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub boxes: Vec<BBox>,
}

/// Default boxes ordered tap by tap (shallow first), then row-major cell,
/// then box within the cell; the same order the prediction head emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultBoxGrid {
    pub boxes_per_cell: usize,
    pub taps: Vec<TapBoxes>,
}

impl DefaultBoxGrid {
    pub fn len(&self) -> usize {
        self.taps.iter().map(|t| t.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> Vec<BBox> {
        self.taps.iter().flat_map(|t| t.boxes.iter().copied()).collect()
    }

    /// Index range of each tap within [`DefaultBoxGrid::all`].
    pub fn tap_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.taps
            .iter()
            .map(|t| {
                let r = start..start + t.boxes.len();
                start = r.end;
                r
            })
            .collect()
    }
}

pub fn generate_default_boxes(tap_shapes: &[(usize, usize)], config: &DefaultBoxConfig) -> Result<DefaultBoxGrid> {
    if config.aspect_ratios.is_empty() {
        return Err(Error::Config("default boxes need at least one aspect ratio".into()));
    }
    if config.aspect_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config("aspect ratios must be positive".into()));
    }
    let scales = config.scales(tap_shapes.len());
    let mut taps = Vec::with_capacity(tap_shapes.len());
    for (k, &(rows, cols)) in tap_shapes.iter().enumerate() {
        let (s, s_next) = (scales[k], scales[k + 1]);
        let extra = (s * s_next).sqrt();
        let mut boxes = Vec::with_capacity(rows * cols * config.boxes_per_cell());
        for y in 0..rows {
            for x in 0..cols {
                let cx = (x as f64 + 0.5) / cols as f64;
                let cy = (y as f64 + 0.5) / rows as f64;
                for &r in &config.aspect_ratios {
                    boxes.push(BBox::new(cx, cy, s * r.sqrt(), s / r.sqrt()).clipped());
                }
                boxes.push(BBox::new(cx, cy, extra, extra).clipped());
            }
        }
        taps.push(TapBoxes {
            rows,
            cols,
            scale: s,
            boxes,
        });
    }
    Ok(DefaultBoxGrid {
        boxes_per_cell: config.boxes_per_cell(),
        taps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        let flat = BBox::new(0.5, 0.5, 0.0, 0.2);
        assert!(matches!(iou(&a, &flat), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn encode_decode_examples() {
        let d = BBox::new(0.5, 0.5, 0.2, 0.3);
        assert_eq!(encode(&d, &d).unwrap(), [0.0; 4]);
        let wide = BBox::new(0.5, 0.5, 0.4, 0.3);
        let o = encode(&d, &wide).unwrap();
        assert_eq!(o[..2], [0.0, 0.0]);
        assert!((o[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(o[3], 0.0);
        assert_eq!(decode(&d, &[0.0; 4]), d);
        let half = decode(&d, &[0.0, 0.0, 0.0, 0.5f64.ln()]);
        assert!((half.h - 0.15).abs() < 1e-15);
        assert!(encode(&d, &BBox::new(0.5, 0.5, -0.1, 0.2)).is_err());
    }

    #[test]
    fn grid_counts() {
        let one = generate_default_boxes(
            &[(1, 1)],
            &DefaultBoxConfig {
                aspect_ratios: vec![1.0],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one.len(), 2);
        assert!(one.all().iter().all(|b| b.cx == 0.5 && b.cy == 0.5));

        let cfg = DefaultBoxConfig::default();
        assert_eq!(cfg.boxes_per_cell(), 6);
        let two = generate_default_boxes(&[(4, 4), (2, 2)], &cfg).unwrap();
        assert_eq!(two.len(), 120);
        assert!(two.all().iter().all(|b| {
            let [x1, y1, x2, y2] = b.corners();
            x1 >= -1e-12 && y1 >= -1e-12 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12
        }));

        let empty = DefaultBoxConfig {
            aspect_ratios: vec![],
            ..Default::default()
        };
        assert!(generate_default_boxes(&[(1, 1)], &empty).is_err());
    }

    #[test]
    fn scales_interpolate() {
        let s = DefaultBoxConfig::default().scales(5);
        assert_eq!(s.len(), 6);
        assert!((s[0] - 0.2).abs() < 1e-15 && (s[4] - 0.9).abs() < 1e-15);
        assert!((s[2] - 0.55).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.8, 0.01f64..0.8).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(d in arb_box(), g in arb_box()) {
            let back = decode(&d, &encode(&d, &g).unwrap());
            prop_assert!((back.cx - g.cx).abs() < 1e-10);
            prop_assert!((back.cy - g.cy).abs() < 1e-10);
            prop_assert!((back.w - g.w).abs() < 1e-10);
            prop_assert!((back.h - g.h).abs() < 1e-10);
        }

        #[test]
        fn decode_encode_round_trip(d in arb_box(), o in proptest::array::uniform4(-1.0f64..1.0)) {
            let again = encode(&d, &decode(&d, &o)).unwrap();
            for k in 0..4 {
                prop_assert!((again[k] - o[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let union = a.area() + b.area() - intersection(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ab <= a.area().min(b.area()) / union + 1e-12);
        }
    }
}
