//! SGD training loop with step-decay schedule, JSON-lines logging,
//! checkpoints and exact resume.
//!
//! Everything random in iteration `t` (batch composition and flips) is drawn
//! from a generator keyed by `(seed, t)`, so a resumed run replays exactly
//! the batches a straight run would have seen.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{flip, Dataset, Sample, SceneSpec};
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_strata, EvalConfig, ImageEval, PostprocessConfig, StratumReport};
use crate::eval::ApResult;
use crate::loss::{assign_batch, detection_loss, LossConfig, LossReport};
use crate::matching::GroundTruth;
use crate::network::{Model, NetworkSpec, Variant};
use crate::optim::SgdState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Constant rate, multiplied by `gamma` at each milestone, with an optional
/// linear warm-up over the first iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            milestones: vec![1400, 1800],
            gamma: 0.1,
            warmup: 100,
        }
    }
}

impl Schedule {
    /// Rate used for iteration `t` (1-based).
    pub fn rate(&self, t: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| t > m).count();
        let lr = self.base_lr * self.gamma.powi(decays as i32);
        if t <= self.warmup {
            lr * t as f64 / (self.warmup + 1) as f64
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Train on a dataset written to disk instead of generating one; its
    /// manifest then replaces `dataset`, `dataset_start` and `dataset_count`.
    pub data_dir: Option<PathBuf>,
    /// Scenes `dataset_start .. dataset_start + dataset_count` of this spec.
    pub dataset: SceneSpec,
    pub dataset_start: usize,
    pub dataset_count: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    /// Random horizontal flips.
    pub augment: bool,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Evaluate on the training set every this many iterations (0: never).
    pub eval_every: usize,
    /// Stop once training mAP@0.5 reaches this value at an evaluation.
    pub target_map: Option<f64>,
    pub postprocess: PostprocessConfig,
    /// Overrides the variant's default network.
    pub network: Option<NetworkSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MdfnI2,
            seed: 42,
            data_dir: None,
            dataset: SceneSpec {
                seed: 42,
                ..SceneSpec::default()
            },
            dataset_start: 0,
            dataset_count: 64,
            iterations: 2000,
            batch_size: 8,
            schedule: Schedule::default(),
            momentum: 0.9,
            weight_decay: 0.0005,
            loss: LossConfig::default(),
            augment: true,
            checkpoint_every: 0,
            eval_every: 0,
            target_map: None,
            postprocess: PostprocessConfig::default(),
            network: None,
        }
    }
}

impl RunConfig {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = match &self.network {
            Some(n) if n.variant != self.variant => {
                return Err(Error::Config(format!("network spec is {} but the run asks for {}", n.variant, self.variant)))
            }
            Some(n) => n.clone(),
            None => NetworkSpec::for_variant(self.variant),
        };
        if spec.num_classes != self.dataset.num_classes() || spec.input_size != self.dataset.image_size {
            return Err(Error::Config(format!(
                "network expects {} classes at {:?}, dataset has {} at {:?}",
                spec.num_classes,
                spec.input_size,
                self.dataset.num_classes(),
                self.dataset.image_size
            )));
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.dataset_count == 0 {
            return Err(Error::Config("batch size and dataset count must be positive".into()));
        }
        self.dataset.validate()?;
        self.network_spec()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub learning_rate: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// An evaluation line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub iteration: usize,
    pub map_50: f64,
}

/// Images as a `[B, 3, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Dataset("images in a batch differ in size".into()));
        }
        data.extend_from_slice(s.image.to_tensor::<T>().data());
    }
    Tensor::new(vec![samples.len(), 3, h, w], data)
}

/// Batch indices and flip flags of iteration `t`.
pub fn batch_plan(seed: u64, t: usize, dataset_len: usize, batch_size: usize, augment: bool) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    let picks: Vec<usize> = if batch_size <= dataset_len {
        sample(&mut rng, dataset_len, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..dataset_len)).collect()
    };
    picks.into_iter().map(|i| (i, augment && rng.gen_bool(0.5))).collect()
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub sgd: SgdState<T>,
    pub data: Dataset,
    /// Iterations completed.
    pub iteration: usize,
}

const VELOCITY_PREFIX: &str = "velocity/";

impl<T: Scalar> Trainer<T> {
    pub fn new(mut config: RunConfig) -> Result<Self> {
        let data = match &config.data_dir {
            Some(dir) => {
                let data = Dataset::load(dir)?;
                config.dataset = data.spec.clone();
                config.dataset_start = data.start;
                config.dataset_count = data.len();
                data
            }
            None => {
                config.validate()?;
                Dataset::generate(&config.dataset, config.dataset_start, config.dataset_count)?
            }
        };
        Self::with_data(config, data)
    }

    pub fn with_data(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let model = Model::build(&config.network_spec()?, config.seed)?;
        let sgd = SgdState::with_hyper(config.schedule.rate(1), config.momentum, config.weight_decay);
        Ok(Self {
            config,
            model,
            sgd,
            data,
            iteration: 0,
        })
    }

    /// Runs iteration `self.iteration + 1`.
    pub fn step(&mut self) -> Result<LogEntry> {
        let t = self.iteration + 1;
        let plan = batch_plan(self.config.seed, t, self.data.len(), self.config.batch_size, self.config.augment);
        let flipped: Vec<Option<Sample>> = plan.iter().map(|&(i, f)| f.then(|| flip(&self.data.samples[i]))).collect();
        let batch: Vec<&Sample> = plan
            .iter()
            .zip(&flipped)
            .map(|(&(i, _), f)| f.as_ref().unwrap_or(&self.data.samples[i]))
            .collect();
        let gts: Vec<Vec<GroundTruth>> = batch.iter().map(|s| s.annotation.ground_truths()).collect();
        let images = batch_tensor::<T>(&batch)?;

        let defaults = self.model.default_boxes();
        let assignments = assign_batch(&defaults, &gts, self.config.loss.match_threshold);
        let mut tape = Tape::new();
        let x = tape.input(images);
        let out = self.model.forward(&mut tape, x)?;
        let loss = detection_loss(&mut tape, &out.predictions, self.model.layout(), &defaults, &assignments, &gts, &self.config.loss)?;
        tape.backward(loss.loss, &mut self.model.store)?;
        let grad_norm = self.model.store.grad_norm();
        let lr = self.config.schedule.rate(t);
        if !loss.report.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                loss: loss.report.total,
                learning_rate: lr,
                grad_norm,
            });
        }
        self.sgd.learning_rate = lr;
        self.sgd.step(&mut self.model.store)?;
        self.iteration = t;
        Ok(LogEntry {
            iteration: t,
            learning_rate: lr,
            grad_norm,
            loss: loss.report,
        })
    }

    /// Trains until `config.iterations`, writing one JSON line per
    /// iteration (and per evaluation) to `log`. Checkpoints go to
    /// `checkpoint_dir/iter_<t>.ckpt` and `checkpoint_dir/final.ckpt`.
    pub fn run<W: Write>(&mut self, mut log: W, checkpoint_dir: Option<&Path>) -> Result<Option<f64>> {
        let mut last_map = None;
        while self.iteration < self.config.iterations {
            let entry = self.step()?;
            serde_json::to_writer(&mut log, &entry)?;
            log.write_all(b"\n")?;
            let t = self.iteration;
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && t.is_multiple_of(every) && t < self.config.iterations {
                    self.save(&dir.join(format!("iter_{t:06}.ckpt")))?;
                }
            }
            if self.config.eval_every > 0 && t.is_multiple_of(self.config.eval_every) {
                let map = self.evaluate_training_set()?.map_at(0.5).unwrap_or(0.0);
                serde_json::to_writer(&mut log, &EvalEntry { iteration: t, map_50: map })?;
                log.write_all(b"\n")?;
                last_map = Some(map);
                if self.config.target_map.is_some_and(|target| map >= target) {
                    break;
                }
            }
        }
        log.flush()?;
        if let Some(dir) = checkpoint_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(last_map)
    }

    pub fn evaluate_training_set(&self) -> Result<ApResult> {
        let eval = EvalConfig {
            iou_thresholds: vec![0.5],
            ..EvalConfig::default()
        };
        evaluate_model(&self.model, &self.data, &self.config.postprocess, &eval, 16).map(|(r, _)| r)
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        json!({
            "variant": self.config.variant,
            "iteration": self.iteration,
            "seed": self.config.seed,
            "config": self.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let velocity: Vec<(String, Tensor<T>)> = self
            .model
            .store
            .ids()
            .zip(self.sgd.velocity())
            .map(|(id, v)| (format!("{VELOCITY_PREFIX}{}", self.model.store.name(id)), v.clone()))
            .collect();
        self.model.save(path, self.checkpoint_meta(), &velocity)
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    /// `config` may extend `iterations`; everything else must match.
    pub fn resume(path: &Path, config: Option<RunConfig>) -> Result<Self> {
        let (model, meta, extra) = Model::<T>::load(path)?;
        let saved: RunConfig = serde_json::from_value(meta["config"].clone())?;
        let config = match config {
            Some(c) => {
                let mut same = RunConfig {
                    iterations: saved.iterations,
                    ..c.clone()
                };
                // an on-disk dataset fills these in from its manifest
                if same.data_dir.is_some() {
                    same.dataset = saved.dataset.clone();
                    same.dataset_start = saved.dataset_start;
                    same.dataset_count = saved.dataset_count;
                }
                if same != saved {
                    return Err(Error::Config("resume config differs from the checkpointed run beyond `iterations`".into()));
                }
                c
            }
            None => saved,
        };
        let iteration = meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata has no iteration".into()))? as usize;
        let mut trainer = Self::new(config)?;
        trainer.model = model;
        trainer.iteration = iteration;
        if !extra.is_empty() {
            let mut velocity = Vec::with_capacity(extra.len());
            for id in trainer.model.store.ids() {
                let name = format!("{VELOCITY_PREFIX}{}", trainer.model.store.name(id));
                let (_, v) = extra
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
                velocity.push(v.clone());
            }
            trainer.sgd.set_velocity(velocity, &trainer.model.store)?;
        }
        Ok(trainer)
    }
}

/// Runs the detector over `data` in batches and scores it.
pub fn detect_dataset<T: Scalar>(model: &Model<T>, data: &Dataset, post: &PostprocessConfig, batch: usize) -> Result<Vec<ImageEval>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let dets = model.detect(batch_tensor::<T>(&refs)?, post)?;
        for (s, d) in chunk.iter().zip(dets) {
            out.push(ImageEval {
                detections: d,
                ground_truths: s.annotation.ground_truths(),
            });
        }
    }
    Ok(out)
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    post: &PostprocessConfig,
    eval: &EvalConfig,
    batch: usize,
) -> Result<(ApResult, Vec<StratumReport>)> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let images = detect_dataset(model, data, post, batch)?;
    let names = data.spec.class_names();
    let ap = evaluate(&images, &names, eval)?;
    let labels: Vec<_> = data
        .samples
        .iter()
        .map(|s| s.annotation.objects.iter().map(|o| o.stratum()).collect())
        .collect();
    let strata = evaluate_strata(&images, &labels, &names, eval)?;
    Ok((ap, strata))
}
