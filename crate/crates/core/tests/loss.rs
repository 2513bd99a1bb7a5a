mod common;

use common::*;
use mdfn::boxes::{generate_default_boxes, BBox, DefaultBoxConfig};
use mdfn::head::PredictionLayout;
use mdfn::loss::{assign_batch, detection_loss, LossConfig};
use mdfn::matching::GroundTruth;
use mdfn::tensor::Tensor;
use mdfn::{ConvParams, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYOUT: PredictionLayout = PredictionLayout {
    boxes_per_cell: 1,
    classes: 3,
};

/// A 1 x `rows.len()` tap whose cell `d` holds `rows[d]`.
fn tap(tape: &mut Tape<f64>, rows: &[[f64; 7]]) -> Var {
    let n = rows.len();
    let mut data = vec![0.0; 7 * n];
    for (cell, row) in rows.iter().enumerate() {
        for (ch, v) in row.iter().enumerate() {
            data[ch * n + cell] = *v;
        }
    }
    tape.input(Tensor::new(vec![1, 7, 1, n], data).unwrap())
}

fn ce(logits: &[f64], target: usize) -> f64 {
    logits.iter().map(|v| v.exp()).sum::<f64>().ln() - logits[target]
}

fn sl1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn three_defaults() -> Vec<BBox> {
    vec![
        BBox::new(0.2, 0.5, 0.3, 0.6),
        BBox::new(0.5, 0.5, 0.3, 0.6),
        BBox::new(0.8, 0.5, 0.3, 0.6),
    ]
}

#[test]
fn two_matched_boxes_by_hand() {
    let defaults = three_defaults();
    let gts = vec![
        GroundTruth {
            class_id: 1,
            bbox: BBox::new(0.22, 0.48, 0.33, 0.6),
        },
        GroundTruth {
            class_id: 2,
            bbox: BBox::new(0.5, 0.55, 0.3, 0.5),
        },
    ];
    let rows = [
        [0.3, 1.2, -0.4, 0.1, -0.2, 0.05, 0.3],
        [0.5, -0.1, 0.9, 0.0, 1.5, -0.3, 0.2],
        [-0.7, 0.4, 0.6, 0.2, 0.2, 0.2, 0.2],
    ];
    // offsets toward each gt
    let enc = |d: &BBox, g: &BBox| [(g.cx - d.cx) / d.w, (g.cy - d.cy) / d.h, (g.w / d.w).ln(), (g.h / d.h).ln()];
    let t0 = enc(&defaults[0], &gts[0].bbox);
    let t1 = enc(&defaults[1], &gts[1].bbox);
    let conf = ce(&rows[0][..3], 1) + ce(&rows[1][..3], 2) + ce(&rows[2][..3], 0);
    let loc: f64 = (0..4).map(|i| sl1(rows[0][3 + i] - t0[i]) + sl1(rows[1][3 + i] - t1[i])).sum();
    for alpha in [1.0, 0.5] {
        let expected = (conf + alpha * loc) / 2.0;
        let mut tape = Tape::new();
        let p = tap(&mut tape, &rows);
        let img = vec![gts.clone()];
        let assign = assign_batch(&defaults, &img, 0.5);
        let cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        let out = detection_loss(&mut tape, &[p], LAYOUT, &defaults, &assign, &img, &cfg).unwrap();
        assert_eq!(out.report.n_matched, 2);
        assert_eq!(out.report.n_negatives_used, 1);
        assert!((out.report.total - expected).abs() < 1e-10);
        assert!((out.report.conf - conf).abs() < 1e-10);
        assert!((out.report.loc - loc).abs() < 1e-10);
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<GroundTruth>, Tensor<f64>, (usize, usize)) {
    let (m, n) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let cfg = DefaultBoxConfig {
        aspect_ratios: vec![1.0, 2.0],
        ..DefaultBoxConfig::default()
    };
    let defaults = generate_default_boxes(&[(m, n)], &cfg).unwrap().all();
    let gts: Vec<GroundTruth> = (0..rng.gen_range(1..=2))
        .map(|_| GroundTruth {
            class_id: rng.gen_range(1..3),
            bbox: random_box(rng),
        })
        .collect();
    let values = rand_tensor(rng, &[1, 3 * 7, m, n], -2.0, 2.0);
    (defaults, gts, values, (m, n))
}

fn layout3() -> PredictionLayout {
    PredictionLayout {
        boxes_per_cell: 3,
        classes: 3,
    }
}

#[test]
fn alpha_scales_only_the_localisation_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let (defaults, gts, values, _) = random_problem(&mut rng);
        let img = vec![gts];
        let assign = assign_batch(&defaults, &img, 0.5);
        let run = |alpha: f64| {
            let mut tape = Tape::new();
            let p = tape.input(values.clone());
            let cfg = LossConfig {
                alpha,
                ..LossConfig::default()
            };
            detection_loss(&mut tape, &[p], layout3(), &defaults, &assign, &img, &cfg).unwrap().report
        };
        let (a, b) = (run(0.7), run(1.4));
        let n = a.n_matched as f64;
        let loc_a = a.total * n - a.conf;
        let loc_b = b.total * n - b.conf;
        assert!((loc_b - 2.0 * loc_a).abs() < 1e-10 * loc_a.abs().max(1.0));
        assert!((loc_a - 0.7 * a.loc).abs() < 1e-10 * loc_a.abs().max(1.0));
    }
}

#[test]
fn mined_negatives_match_a_sorted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let (defaults, gts, values, (m, n)) = random_problem(&mut rng);
        let img = vec![gts];
        let assign = assign_batch(&defaults, &img, 0.5);
        let ratio = rng.gen_range(0.5..4.0);
        let cfg = LossConfig {
            neg_pos_ratio: ratio,
            ..LossConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.add("p", values.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let out = detection_loss(&mut tape, &[p], layout3(), &defaults, &assign, &img, &cfg).unwrap();
        tape.backward(out.loss, &mut store).unwrap();

        // oracle: background CE of every unmatched box, highest first,
        // lower index on ties, capped at floor(ratio * positives)
        let cells = m * n;
        let row = |d: usize| -> Vec<f64> {
            let (cell, k) = (d / 3, d % 3);
            (0..7).map(|ch| values.data()[(k * 7 + ch) * cells + cell]).collect()
        };
        let positives: Vec<usize> = (0..defaults.len()).filter(|&d| assign[0].matches[d].is_some()).collect();
        let mut negatives: Vec<(usize, f64)> = (0..defaults.len())
            .filter(|&d| assign[0].matches[d].is_none())
            .map(|d| (d, ce(&row(d)[..3], 0)))
            .collect();
        negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let limit = ((ratio * positives.len() as f64).floor() as usize).min(negatives.len());
        let mut expected: Vec<usize> = negatives[..limit].iter().map(|(d, _)| *d).collect();
        expected.sort();
        assert!(out.report.n_negatives_used <= (ratio * out.report.n_matched as f64).floor() as usize);
        assert_eq!(out.report.n_negatives_used, limit);

        // the boxes whose class logits receive gradient are exactly the
        // positives plus the mined negatives
        let grad = store.get(id).grad().unwrap();
        let touched: Vec<usize> = (0..defaults.len())
            .filter(|&d| {
                let (cell, k) = (d / 3, d % 3);
                (0..3).any(|ch| grad[(k * 7 + ch) * cells + cell] != 0.0)
            })
            .filter(|d| !positives.contains(d))
            .collect();
        assert_eq!(touched, expected);
    }
}

#[test]
fn head_parameters_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..5 {
        let (defaults, gts, _, (m, n)) = random_problem(&mut rng);
        let img = vec![gts];
        let assign = assign_batch(&defaults, &img, 0.5);
        let mut store = ParamStore::new();
        let cin = rng.gen_range(1..=3);
        let head = ConvParams::new(&mut store, "head0", cin, layout3().channels(), 3, 1, 1, &mut rng).unwrap();
        let features = rand_tensor(&mut rng, &[1, cin, m, n], -1.0, 1.0);
        let mut case = GradCase {
            op: "detection_loss",
            store,
            build: Box::new(move |tape, store| {
                let x = tape.input(features.clone());
                let p = tape.conv2d_with(x, &head, store).unwrap();
                detection_loss(tape, &[p], layout3(), &defaults, &assign, &img, &LossConfig::default()).unwrap().loss
            }),
        };
        let report = fd_check(&mut case, 1e-5);
        assert!(report.checked > 0);
        assert!(report.rel_error < 1e-6, "relative error {:e}", report.rel_error);
    }
}
