//! Seeded synthetic detection scenes: flat-coloured rectangles, discs and
//! triangles over smooth noise backgrounds, with controlled object sizes and
//! pairwise occlusion.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::eval::{Stratum, OCCLUDED_FRACTION, SMALL_AREA};
use crate::matching::GroundTruth;
use crate::ppm::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rect => "rect",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Class id `i + 1` draws `classes[i]`; 0 is background.
    pub classes: Vec<ShapeKind>,
    /// Inclusive object count range.
    pub objects_per_image: (usize, usize),
    /// Probability that an object is small (box under 5% of the image).
    pub small_fraction: f64,
    /// Target fraction of objects more than 30% hidden by a later object.
    pub occlusion_fraction: f64,
    pub seed: u64,
    /// Layout attempts per object count before falling back to fewer objects.
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            classes: vec![ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle],
            objects_per_image: (2, 4),
            small_fraction: 0.4,
            occlusion_fraction: 0.25,
            seed: 0,
            max_attempts: 20,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.objects_per_image;
        let bad = |m: String| Err(Error::Config(m));
        if h < 32 || w < 32 {
            return bad(format!("image size {h}x{w} is below 32x32"));
        }
        if self.classes.is_empty() {
            return bad("scene needs at least one class".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!("invalid objects_per_image range {lo}..={hi}"));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) || !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|k| k.name().to_string()).collect()
    }

    /// Prediction classes including background.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    fn side_range(&self, small: bool) -> (usize, usize) {
        let m = self.image_size.0.min(self.image_size.1) as f64;
        if small {
            ((0.125 * m).round() as usize, (SMALL_AREA.sqrt() * m).floor() as usize)
        } else {
            ((0.25 * m).ceil() as usize, (0.47 * m).floor() as usize)
        }
    }
}

/// A shape inscribed in the integer pixel frame `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [u8; 3],
}

impl Shape {
    /// Whether the pixel centred at `(px + 0.5, py + 0.5)` is inside.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let (x0, y0, w, h) = (self.x as f64, self.y as f64, self.w as f64, self.h as f64);
        match self.kind {
            ShapeKind::Rect => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            ShapeKind::Disc => {
                let (dx, dy) = ((x - x0 - w / 2.0) / (w / 2.0), (y - y0 - h / 2.0) / (h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle => {
                // apex up: (x0 + w/2, y0), base from (x0, y0 + h) to (x0 + w, y0 + h)
                if y < y0 || y > y0 + h {
                    return false;
                }
                let half = 0.5 * w * (y - y0) / h;
                (x - (x0 + 0.5 * w)).abs() <= half
            }
        }
    }

    pub fn mask(&self, width: usize, height: usize) -> Vec<bool> {
        let mut m = vec![false; width * height];
        for py in self.y..(self.y + self.h).min(height) {
            for px in self.x..(self.x + self.w).min(width) {
                m[py * width + px] = self.covers(px, py);
            }
        }
        m
    }
}

/// Tight normalised box around a mask, or `None` if the mask is empty.
pub fn mask_box(mask: &[bool], width: usize, height: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x0 != usize::MAX).then(|| {
        BBox::from_corners(x0 as f64 / width as f64, y0 as f64 / height as f64, x1 as f64 / width as f64, y1 as f64 / height as f64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub occluded_fraction: f64,
}

impl AnnotatedObject {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            bbox: self.bbox,
        }
    }

    pub fn stratum(&self) -> Stratum {
        Stratum::of(self.bbox.area(), self.occluded_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: usize,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(AnnotatedObject::ground_truth).collect()
    }

    pub fn flipped_horizontally(&self) -> Self {
        Self {
            image_id: self.image_id,
            objects: self
                .objects
                .iter()
                .map(|o| AnnotatedObject {
                    bbox: o.bbox.flipped_horizontally(),
                    ..*o
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub annotation: Annotation,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear blend of a coarse random colour lattice plus a linear ramp.
fn background<R: Rng>(width: usize, height: usize, rng: &mut R) -> RgbImage {
    const GRID: usize = 4;
    let lattice: Vec<[f64; 3]> = (0..GRID * GRID).map(|_| [0; 3].map(|_| rng.gen_range(0.1..0.4))).collect();
    let ramp = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let gx = x as f64 / (width - 1) as f64 * (GRID - 1) as f64;
            let gy = y as f64 / (height - 1) as f64 * (GRID - 1) as f64;
            let (ix, iy) = ((gx as usize).min(GRID - 2), (gy as usize).min(GRID - 2));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * GRID + i];
            let shift = ramp[0] * (x as f64 / width as f64 - 0.5) + ramp[1] * (y as f64 / height as f64 - 0.5);
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let top = at(ix, iy)[c] * (1.0 - fx) + at(ix + 1, iy)[c] * fx;
                let bottom = at(ix, iy + 1)[c] * (1.0 - fx) + at(ix + 1, iy + 1)[c] * fx;
                *out = quantize(top * (1.0 - fy) + bottom * fy + shift);
            }
            img.set(x, y, rgb);
        }
    }
    img
}

fn object_color<R: Rng>(rng: &mut R) -> [u8; 3] {
    let mut c = [0; 3].map(|_| rng.gen_range(0.45..1.0));
    c[rng.gen_range(0..3)] = rng.gen_range(0.85..1.0);
    c.map(quantize)
}

const PLACEMENT_TRIES: usize = 200;

/// Designated occluders must hide this much of their target.
const COVERAGE: (f64, f64) = (0.35, 0.65);

fn overlap(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| **x && **y).count()
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|x| **x).count()
}

#[derive(Debug, Clone, Copy)]
struct PlannedObject {
    kind: ShapeKind,
    small: bool,
    /// Hidden in part by the next object.
    occluded: bool,
    color: [u8; 3],
}

fn plan_objects<R: Rng>(spec: &SceneSpec, n: usize, rng: &mut R) -> Vec<PlannedObject> {
    // chance per eligible object, so that the expected occluded share of all
    // `n` objects equals the requested fraction
    let p = if n > 1 {
        (spec.occlusion_fraction * n as f64 / (n - 1) as f64).min(1.0)
    } else {
        0.0
    };
    (0..n)
        .map(|i| PlannedObject {
            occluded: i + 1 < n && rng.gen_bool(p),
            small: rng.gen_bool(spec.small_fraction),
            kind: spec.classes[rng.gen_range(0..spec.classes.len())],
            color: object_color(rng),
        })
        .collect()
}

/// Places the planned shapes. Object `i + 1` hides part of object `i` when
/// `plan[i].occluded`; every other pair is disjoint.
fn try_layout<R: Rng>(spec: &SceneSpec, plan: &[PlannedObject], rng: &mut R) -> Option<Vec<Shape>> {
    let (height, width) = spec.image_size;
    let m = height.min(width) as f64;
    let mut shapes: Vec<Shape> = Vec::with_capacity(plan.len());
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(plan.len());
    for (i, obj) in plan.iter().enumerate() {
        let (mut lo, mut hi) = spec.side_range(obj.small);
        // a large object hidden by a small one must stay small enough for the
        // coverage band to be reachable
        if obj.occluded && !obj.small && plan[i + 1].small {
            hi = hi.min((0.31 * m).floor() as usize).max(lo);
        }
        let target = (i > 0 && plan[i - 1].occluded).then(|| i - 1);
        if let Some(t) = target {
            let need = (0.6 * shapes[t].w.min(shapes[t].h) as f64).ceil() as usize;
            lo = lo.max(need.min(hi));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.gen_range(lo..=hi);
            let h = if obj.kind == ShapeKind::Disc { w } else { rng.gen_range(lo..=hi) };
            let (x, y) = match target {
                Some(t) => {
                    let s = shapes[t];
                    let cx = rng.gen_range(s.x..s.x + s.w) as i64 - (w / 2) as i64;
                    let cy = rng.gen_range(s.y..s.y + s.h) as i64 - (h / 2) as i64;
                    (cx.clamp(0, (width - w) as i64) as usize, cy.clamp(0, (height - h) as i64) as usize)
                }
                None => (rng.gen_range(0..=width - w), rng.gen_range(0..=height - h)),
            };
            let shape = Shape {
                kind: obj.kind,
                x,
                y,
                w,
                h,
                color: obj.color,
            };
            let mask = shape.mask(width, height);
            let ok = masks.iter().enumerate().all(|(j, m)| {
                let shared = overlap(&mask, m);
                if Some(j) == target {
                    let f = shared as f64 / count(m) as f64;
                    (COVERAGE.0..=COVERAGE.1).contains(&f)
                } else {
                    shared == 0
                }
            });
            if ok {
                placed = Some((shape, mask));
                break;
            }
        }
        let (shape, mask) = placed?;
        shapes.push(shape);
        masks.push(mask);
    }
    Some(shapes)
}

/// Rasterises `shapes` in order over `base` and annotates them. Class ids
/// come from the position of each shape's kind in `classes`.
pub fn render_scene(base: &RgbImage, shapes: &[Shape], classes: &[ShapeKind], image_id: usize) -> Result<Sample> {
    let (width, height) = (base.width, base.height);
    let mut image = base.clone();
    let masks: Vec<Vec<bool>> = shapes.iter().map(|s| s.mask(width, height)).collect();
    let mut objects = Vec::with_capacity(shapes.len());
    for (i, (shape, mask)) in shapes.iter().zip(&masks).enumerate() {
        let class = classes
            .iter()
            .position(|k| *k == shape.kind)
            .ok_or_else(|| Error::Dataset(format!("shape kind {:?} is not a configured class", shape.kind)))?;
        let bbox = mask_box(mask, width, height).ok_or_else(|| Error::Dataset(format!("shape {i} covers no pixel")))?;
        let hidden = (0..mask.len()).filter(|&p| mask[p] && masks[i + 1..].iter().any(|m| m[p])).count();
        objects.push(AnnotatedObject {
            class_id: class + 1,
            bbox,
            occluded_fraction: hidden as f64 / count(mask) as f64,
        });
        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            image.set(p % width, p / width, shape.color);
        }
    }
    Ok(Sample {
        image,
        annotation: Annotation { image_id, objects },
    })
}

/// Deterministic scene number `index` of `spec`.
pub fn generate(spec: &SceneSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (height, width) = spec.image_size;
    let base = background(width, height, &mut rng);
    let (lo, hi) = spec.objects_per_image;
    let mut n = rng.gen_range(lo..=hi);
    let mut attempts = 0;
    while n > 0 {
        // the plan stays fixed across attempts so retries do not bias the
        // size and occlusion statistics
        let plan = plan_objects(spec, n, &mut rng);
        for _ in 0..spec.max_attempts {
            attempts += 1;
            if let Some(shapes) = try_layout(spec, &plan, &mut rng) {
                return render_scene(&base, &shapes, &spec.classes, index);
            }
        }
        n -= 1;
    }
    Err(Error::GenerationFailed { attempts })
}

/// Mirrors the image and its boxes left to right.
pub fn flip(sample: &Sample) -> Sample {
    Sample {
        image: sample.image.flipped_horizontally(),
        annotation: sample.annotation.flipped_horizontally(),
    }
}

/// Horizontal flip with probability one half; returns whether it flipped.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> (Sample, bool) {
    if rng.gen_bool(0.5) {
        (flip(sample), true)
    } else {
        (sample.clone(), false)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub objects: usize,
    pub small: usize,
    pub occluded: usize,
    pub per_class: Vec<usize>,
    pub small_fraction: f64,
    pub occluded_fraction: f64,
}

pub fn dataset_stats(annotations: &[Annotation], num_classes: usize) -> DatasetStats {
    let mut s = DatasetStats {
        images: annotations.len(),
        per_class: vec![0; num_classes],
        ..Default::default()
    };
    for o in annotations.iter().flat_map(|a| &a.objects) {
        s.objects += 1;
        s.small += (o.bbox.area() < SMALL_AREA) as usize;
        s.occluded += (o.occluded_fraction > OCCLUDED_FRACTION) as usize;
        if let Some(c) = s.per_class.get_mut(o.class_id.wrapping_sub(1)) {
            *c += 1;
        }
    }
    if s.objects > 0 {
        s.small_fraction = s.small as f64 / s.objects as f64;
        s.occluded_fraction = s.occluded as f64 / s.objects as f64;
    }
    s
}

pub const DATASET_FORMAT: &str = "mdfn-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: SceneSpec,
    /// Scenes `start .. start + count` generated from `spec`.
    pub start: usize,
    pub count: usize,
    pub classes: Vec<String>,
    pub stats: DatasetStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub start: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, start: usize, count: usize) -> Result<Self> {
        let samples = (start..start + count).map(|i| generate(spec, i)).collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            start,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.samples.iter().map(|s| s.annotation.clone()).collect()
    }

    pub fn stats(&self) -> DatasetStats {
        dataset_stats(&self.annotations(), self.spec.classes.len())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            spec: self.spec.clone(),
            start: self.start,
            count: self.len(),
            classes: self.spec.class_names(),
            stats: self.stats(),
        }
    }

    pub fn image_file(image_id: usize) -> String {
        format!("images/{image_id:06}.ppm")
    }

    /// Writes `manifest.json`, `annotations.jsonl` and `images/*.ppm`.
    /// A non-empty `dir` is refused unless `force`, in which case the
    /// previous `images/` directory is replaced.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            if !force {
                return Err(Error::Dataset(format!("output directory {} is not empty (use --force)", dir.display())));
            }
            let images = dir.join("images");
            if images.exists() {
                fs::remove_dir_all(&images)?;
            }
        }
        fs::create_dir_all(dir.join("images"))?;
        let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
        for s in &self.samples {
            s.image.save(&dir.join(Self::image_file(s.annotation.image_id)))?;
            serde_json::to_writer(&mut ann, &s.annotation)?;
            ann.write_all(b"\n")?;
        }
        ann.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!("unknown dataset format {:?}", manifest.format)));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let reader = BufReader::new(fs::File::open(dir.join("annotations.jsonl"))?);
        let mut samples = Vec::with_capacity(manifest.count);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let annotation: Annotation = serde_json::from_str(&line)?;
            let image = RgbImage::load(&dir.join(Self::image_file(annotation.image_id)))?;
            if (image.height, image.width) != manifest.spec.image_size {
                return Err(Error::Dataset(format!("image {} has size {}x{}", annotation.image_id, image.height, image.width)));
            }
            samples.push(Sample { image, annotation });
        }
        if samples.len() != manifest.count {
            return Err(Error::Dataset(format!("manifest lists {} images, found {}", manifest.count, samples.len())));
        }
        Ok(Self {
            spec: manifest.spec,
            start: manifest.start,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_index_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(generate(&spec, 3).unwrap(), generate(&spec, 3).unwrap());
        assert_ne!(generate(&spec, 3).unwrap().image, generate(&spec, 4).unwrap().image);
    }

    #[test]
    fn all_small_scenes() {
        let spec = SceneSpec {
            small_fraction: 1.0,
            ..SceneSpec::default()
        };
        for i in 0..50 {
            for o in generate(&spec, i).unwrap().annotation.objects {
                assert!(o.bbox.area() < 0.05, "{o:?}");
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate(&SceneSpec::default(), 0).unwrap();
        let back = flip(&flip(&s));
        assert_eq!(back.image, s.image);
        for (a, b) in back.annotation.objects.iter().zip(&s.annotation.objects) {
            assert!((a.bbox.cx - b.bbox.cx).abs() < 1e-12);
        }
    }

    #[test]
    fn rect_mask_box_is_its_frame() {
        let r = Shape {
            kind: ShapeKind::Rect,
            x: 4,
            y: 8,
            w: 16,
            h: 8,
            color: [255; 3],
        };
        let b = mask_box(&r.mask(64, 64), 64, 64).unwrap();
        assert_eq!(b.corners(), [4.0 / 64.0, 8.0 / 64.0, 20.0 / 64.0, 16.0 / 64.0]);
    }

    #[test]
    fn impossible_packing_errors_out() {
        let spec = SceneSpec {
            objects_per_image: (40, 40),
            small_fraction: 0.0,
            max_attempts: 1,
            ..SceneSpec::default()
        };
        // falls back to fewer objects rather than looping forever
        let s = generate(&spec, 0).unwrap();
        assert!(s.annotation.objects.len() < 40);
        assert!(spec.validate().is_ok());
        let bad = SceneSpec {
            objects_per_image: (3, 2),
            ..SceneSpec::default()
        };
        assert!(generate(&bad, 0).is_err());
    }
}
