use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use mdfn::boxes::BBox;
use mdfn::checkpoint;
use mdfn::data::Dataset;
use mdfn::eval::{evaluate, evaluate_strata, EvalConfig, ImageEval, StratumReport};
use mdfn::head::Detection;
use mdfn::inception::cascade_weight_ratio;
use mdfn::network::{CostReport, NetworkSpec, Variant};
use mdfn::ppm::{class_color, RgbImage};
use mdfn::train::{detect_dataset, evaluate_model, RunConfig};
use mdfn::{Model64, Tensor64, Trainer64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{read_config, DatasetSettings, DetectionSource, EvalSettings, InferSettings};
use crate::{CliError, DatasetArgs, EvalArgs, InferArgs, ReportArgs, TrainArgs};

fn ensure_empty(dir: &Path, force: bool) -> Result<(), CliError> {
    let occupied = dir.is_file() || (dir.is_dir() && fs::read_dir(dir)?.next().is_some());
    if occupied && !force {
        return Err(CliError::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_model(path: &Path, expected: Option<Variant>) -> Result<Model64, CliError> {
    check_variant(path, expected)?;
    Ok(Model64::load(path)?.0)
}

fn check_variant(path: &Path, expected: Option<Variant>) -> Result<(), CliError> {
    let manifest = checkpoint::load_manifest(path)?;
    let spec: NetworkSpec = serde_json::from_value(manifest.meta["spec"].clone())
        .map_err(|e| mdfn::Error::Checkpoint(format!("{}: no usable network spec ({e})", path.display())))?;
    match expected {
        Some(v) if v != spec.variant => Err(CliError::VariantMismatch {
            expected: v,
            found: spec.variant,
        }),
        _ => Ok(()),
    }
}

pub fn dataset(a: DatasetArgs) -> Result<(), CliError> {
    let mut s: DatasetSettings = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        s.spec.seed = seed;
    }
    s.spec.validate()?;
    ensure_empty(&a.out, a.force)?;
    let data = Dataset::generate(&s.spec, s.start, s.count)?;
    data.write(&a.out, true)?;
    println!("{}", json!({ "command": "dataset", "out": a.out, "stats": data.stats() }));
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: RunConfig = match (&a.config, &a.checkpoint) {
        (Some(path), _) => read_config(Some(path))?,
        (None, Some(ckpt)) => {
            let manifest = checkpoint::load_manifest(ckpt)?;
            serde_json::from_value(manifest.meta["config"].clone())
                .map_err(|e| mdfn::Error::Checkpoint(format!("{} is not a training checkpoint ({e})", ckpt.display())))?
        }
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(d) = a.data {
        cfg.data_dir = Some(d);
    }

    let (mut trainer, log) = match &a.checkpoint {
        Some(ckpt) => {
            fs::create_dir_all(&a.out)?;
            let trainer = Trainer64::resume(ckpt, Some(cfg))?;
            let log = OpenOptions::new().create(true).append(true).open(a.out.join("train.jsonl"))?;
            (trainer, log)
        }
        None => {
            ensure_empty(&a.out, a.force)?;
            let trainer = Trainer64::new(cfg)?;
            (trainer, File::create(a.out.join("train.jsonl"))?)
        }
    };
    trainer.run(BufWriter::new(log), Some(&a.out))?;

    let eval = EvalConfig::default();
    let (ap, strata) = evaluate_model(&trainer.model, &trainer.data, &trainer.config.postprocess, &eval, 16)?;
    let summary = json!({
        "variant": trainer.config.variant,
        "iterations": trainer.iteration,
        "params": trainer.model.param_count(),
        "checkpoint": a.out.join("final.ckpt"),
        "train_ap": ap,
        "train_strata": strata,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "{}",
        json!({ "command": "train", "iterations": trainer.iteration, "train_map_50": ap.map_at(0.5) })
    );
    Ok(())
}

fn oracle_detections(gts: &[mdfn::matching::GroundTruth]) -> Vec<Detection> {
    gts.iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
        })
        .collect()
}

/// Ground truth perturbed by up to `amount` of each box's size, with
/// random scores so that ranking matters.
fn jittered_detections(gts: &[mdfn::matching::GroundTruth], amount: f64, seed: u64, image: usize) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image as u64);
    gts.iter()
        .map(|g| {
            let b = g.bbox;
            let mut u = || rng.gen_range(-1.0..=1.0) * amount;
            let bbox = BBox::new(b.cx + u() * b.w, b.cy + u() * b.h, b.w * u().exp(), b.h * u().exp());
            Detection {
                bbox: bbox.clipped(),
                class_id: g.class_id,
                score: rng.gen_range(0.5..1.0),
            }
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut s: EvalSettings = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        s.jitter_seed = seed;
    }
    if let Some(d) = a.data {
        s.data_dir = Some(d);
    }
    let expected = a.variant.or(s.variant);
    if let Some(ckpt) = &a.checkpoint {
        check_variant(ckpt, expected)?;
    } else if s.detections == DetectionSource::Model {
        return Err(CliError::Usage("--checkpoint is required when detections come from the model".into()));
    }
    ensure_empty(&a.out, a.force)?;
    let data = match &s.data_dir {
        Some(dir) => Dataset::load(dir)?,
        None => {
            s.dataset.validate()?;
            Dataset::generate(&s.dataset, s.start, s.count)?
        }
    };

    let images: Vec<ImageEval> = match s.detections {
        DetectionSource::Model => {
            let ckpt = a.checkpoint.as_ref().expect("checked above");
            let model = load_model(ckpt, expected)?;
            if model.spec.input_size != data.spec.image_size || model.spec.num_classes != data.spec.num_classes() {
                return Err(CliError::Config(format!(
                    "model takes {:?} images with {} classes, dataset has {:?} with {}",
                    model.spec.input_size,
                    model.spec.num_classes,
                    data.spec.image_size,
                    data.spec.num_classes()
                )));
            }
            detect_dataset(&model, &data, &s.postprocess, s.batch_size)?
        }
        source => data
            .samples
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let gts = sample.annotation.ground_truths();
                let detections = match source {
                    DetectionSource::Jitter => jittered_detections(&gts, s.jitter, s.jitter_seed, i),
                    _ => oracle_detections(&gts),
                };
                ImageEval {
                    detections,
                    ground_truths: gts,
                }
            })
            .collect(),
    };

    let names = data.spec.class_names();
    let cfg = EvalConfig {
        iou_thresholds: s.iou_thresholds.clone(),
        interpolation: s.interpolation,
    };
    let ap = evaluate(&images, &names, &cfg)?;
    write_json(&a.out.join("ap.json"), &ap)?;
    if s.strata {
        let labels: Vec<_> = data
            .samples
            .iter()
            .map(|s| s.annotation.objects.iter().map(|o| o.stratum()).collect())
            .collect();
        let strata: Vec<StratumReport> = evaluate_strata(&images, &labels, &names, &cfg)?;
        write_json(&a.out.join("strata.json"), &strata)?;
    }
    println!("{}", json!({ "command": "eval", "images": data.len(), "mAP": ap.map }));
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    image: &'a Path,
    width: usize,
    height: usize,
    detections: &'a [Detection],
}

pub fn infer(a: InferArgs) -> Result<(), CliError> {
    let s: InferSettings = read_config(a.config.as_deref())?;
    let image = RgbImage::load(&a.image)?;
    let expected = a.variant.or(s.variant);
    if let Some(ckpt) = &a.checkpoint {
        check_variant(ckpt, expected)?;
    }
    ensure_empty(&a.out, a.force)?;
    let detections: Vec<Detection> = match (&a.inject, &a.checkpoint) {
        (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        (None, Some(ckpt)) => {
            let model = load_model(ckpt, expected)?;
            if model.spec.input_size != (image.height, image.width) {
                return Err(CliError::Config(format!(
                    "model takes {:?} images, {} is {}x{}",
                    model.spec.input_size,
                    a.image.display(),
                    image.height,
                    image.width
                )));
            }
            let x: Tensor64 = image.to_tensor::<f64>().reshape(&[1, 3, image.height, image.width])?;
            model.detect(x, &s.postprocess)?.pop().unwrap_or_default()
        }
        (None, None) => return Err(CliError::Usage("either --checkpoint or --inject is required".into())),
    };

    let mut render = image.clone();
    for d in &detections {
        render.draw_rect(&d.bbox, class_color(d.class_id));
    }
    render.save(&a.out.join("render.ppm"))?;
    let out = InferOutput {
        image: &a.image,
        width: image.width,
        height: image.height,
        detections: &detections,
    };
    write_json(&a.out.join("detections.json"), &out)?;
    println!("{}", json!({ "command": "infer", "detections": detections.len() }));
    Ok(())
}

fn percent_increase(from: usize, to: usize) -> f64 {
    100.0 * (to as f64 - from as f64) / from as f64
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        ensure_empty(out, a.force)?;
    }
    let mut costs: Vec<CostReport> = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        costs.push(Model64::build(&NetworkSpec::for_variant(v), 0)?.cost_report()?);
    }
    let params = |v: Variant| costs.iter().find(|c| c.variant == v).map_or(0, |c| c.total_params);
    let main = costs.iter().find(|c| c.variant == a.variant).expect("every variant is costed");

    println!("{}", a.variant);
    println!("{:<18} {:>10} {:>12}", "component", "params", "mult-adds");
    for row in &main.rows {
        println!("{:<18} {:>10} {:>12}", row.name, row.params, row.mult_adds);
    }
    println!("{:<18} {:>10} {:>12}", "total", main.total_params, main.total_mult_adds);
    println!();

    let (i1, i2, base) = (params(Variant::MdfnI1), params(Variant::MdfnI2), params(Variant::Baseline));
    let ratio = cascade_weight_ratio(2, 64);
    let ratio_value = *ratio.numer() as f64 / *ratio.denom() as f64;
    println!("{:<34} {:>10}", "mdfn-i1 params", i1);
    println!("{:<34} {:>10}", "mdfn-i2 params", i2);
    println!("{:<34} {:>+10}", "mdfn-i2 - mdfn-i1", i2 as i64 - i1 as i64);
    println!("{:<34} {:>10}", "baseline params", base);
    println!("{:<34} {:>+9.2}%", "mdfn-i1 vs baseline", percent_increase(base, i1));
    println!("{:<34} {:>+9.2}%", "mdfn-i2 vs baseline", percent_increase(base, i2));
    println!("{:<34} {:>10.2}", format!("cascaded 3x3 pair / 5x5 ({ratio})"), ratio_value);

    if let Some(out) = &a.out {
        let report = json!({
            "variant": a.variant,
            "rows": main.rows,
            "total_params": main.total_params,
            "total_mult_adds": main.total_mult_adds,
            "params": {
                "mdfn-i1": i1,
                "mdfn-i2": i2,
                "baseline": base,
            },
            "mult_adds": costs.iter().map(|c| (c.variant.to_string(), c.total_mult_adds)).collect::<std::collections::BTreeMap<_, _>>(),
            "deltas": {
                "mdfn_i2_minus_mdfn_i1": i2 as i64 - i1 as i64,
                "mdfn_i1_vs_baseline_pct": percent_increase(base, i1),
                "mdfn_i2_vs_baseline_pct": percent_increase(base, i2),
            },
            "cascade_ratio": {
                "numerator": *ratio.numer(),
                "denominator": *ratio.denom(),
                "value": ratio_value,
            },
        });
        write_json(&out.join("report.json"), &report)?;
    }
    Ok(())
}
