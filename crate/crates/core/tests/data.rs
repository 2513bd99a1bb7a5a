use mdfn::data::{augment, dataset_stats, flip, generate, render_scene, Dataset, SceneSpec, Shape, ShapeKind};
use mdfn::ppm::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn statistics_track_the_spec() {
    let spec = SceneSpec {
        seed: 11,
        ..SceneSpec::default()
    };
    let anns: Vec<_> = (0..1000).map(|i| generate(&spec, i).unwrap().annotation).collect();
    let stats = dataset_stats(&anns, 3);
    println!("{stats:?}");
    assert!((stats.small_fraction - spec.small_fraction).abs() <= 0.05);
    assert!((stats.occluded_fraction - spec.occlusion_fraction).abs() <= 0.05);
    for a in &anns {
        for o in &a.objects {
            let [x1, y1, x2, y2] = o.bbox.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0);
            assert!((0.0..=1.0).contains(&o.occluded_fraction));
        }
    }
}

#[test]
fn other_fractions_are_tracked_too() {
    for (small, occ) in [(0.0, 0.0), (0.8, 0.4), (0.2, 0.1)] {
        let spec = SceneSpec {
            small_fraction: small,
            occlusion_fraction: occ,
            seed: 5,
            ..SceneSpec::default()
        };
        let anns: Vec<_> = (0..1000).map(|i| generate(&spec, i).unwrap().annotation).collect();
        let stats = dataset_stats(&anns, 3);
        assert!((stats.small_fraction - small).abs() <= 0.05, "{stats:?}");
        assert!((stats.occluded_fraction - occ).abs() <= 0.05, "{stats:?}");
    }
}

/// Counts disc pixels whose centres also fall inside the rectangle, using
/// only the closed-form shape formulas.
fn covered_fraction(cx: f64, cy: f64, r: f64, rect: (f64, f64, f64, f64), size: usize) -> f64 {
    let (mut inside, mut hidden) = (0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                inside += 1;
                if px >= rect.0 && px < rect.2 && py >= rect.1 && py < rect.3 {
                    hidden += 1;
                }
            }
        }
    }
    hidden as f64 / inside as f64
}

#[test]
fn half_covered_disc() {
    let disc = Shape {
        kind: ShapeKind::Disc,
        x: 12,
        y: 12,
        w: 20,
        h: 20,
        color: [200, 0, 0],
    };
    let rect = Shape {
        kind: ShapeKind::Rect,
        x: 22,
        y: 4,
        w: 30,
        h: 40,
        color: [0, 200, 0],
    };
    let classes = [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle];
    let s = render_scene(&RgbImage::new(64, 64), &[disc, rect], &classes, 0).unwrap();
    let measured = s.annotation.objects[0].occluded_fraction;
    let oracle = covered_fraction(22.0, 22.0, 10.0, (22.0, 4.0, 52.0, 44.0), 64);
    assert_eq!(measured, oracle);
    assert!((measured - 0.5).abs() <= 0.02, "{measured}");
    assert_eq!(s.annotation.objects[1].occluded_fraction, 0.0);
    assert_eq!(s.annotation.objects[0].class_id, 2);
    // visible pixels keep the disc colour, hidden ones take the rect colour
    assert_eq!(s.image.get(15, 22), [200, 0, 0]);
    assert_eq!(s.image.get(25, 22), [0, 200, 0]);
}

#[test]
fn boxes_are_tight_around_drawn_pixels() {
    let spec = SceneSpec {
        occlusion_fraction: 0.0,
        ..SceneSpec::default()
    };
    // objects always carry one channel above 0.85, backgrounds stay below 0.5
    let is_object = |p: [u8; 3]| p.iter().any(|c| *c >= 200);
    for i in 0..50 {
        let s = generate(&spec, i).unwrap();
        for o in &s.annotation.objects {
            let [x1, y1, x2, y2] = o.bbox.corners().map(|v| (v * 64.0).round() as usize);
            assert!(x2 > x1 && y2 > y1);
            assert!((x1..x2).any(|x| is_object(s.image.get(x, y1))));
            assert!((x1..x2).any(|x| is_object(s.image.get(x, y2 - 1))));
            assert!((y1..y2).any(|y| is_object(s.image.get(x1, y))));
            assert!((y1..y2).any(|y| is_object(s.image.get(x2 - 1, y))));
        }
    }
}

#[test]
fn augmentation_mirrors_boxes() {
    let s = generate(&SceneSpec::default(), 1).unwrap();
    let f = flip(&s);
    for (a, b) in s.annotation.objects.iter().zip(&f.annotation.objects) {
        assert!((a.bbox.cx + b.bbox.cx - 1.0).abs() < 1e-12);
        assert!(b.bbox.is_valid());
        let [x1, _, x2, _] = b.bbox.corners();
        assert!(x1 >= -1e-12 && x2 <= 1.0 + 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flips = 0;
    for _ in 0..400 {
        let (out, flipped) = augment(&s, &mut rng);
        if flipped {
            flips += 1;
            assert_eq!(out, f);
        } else {
            assert_eq!(out, s);
        }
    }
    assert!((150..250).contains(&flips));
}

#[test]
fn disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        seed: 3,
        ..SceneSpec::default()
    };
    let ds = Dataset::generate(&spec, 0, 12).unwrap();
    ds.write(dir.path(), false).unwrap();
    assert!(ds.write(dir.path(), false).is_err());
    ds.write(dir.path(), true).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    let m = Dataset::read_manifest(dir.path()).unwrap();
    let regenerated = Dataset::generate(&m.spec, m.start, m.count).unwrap();
    assert_eq!(regenerated.stats(), m.stats);
}
