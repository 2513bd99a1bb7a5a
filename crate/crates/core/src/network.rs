//! Backbone, deep multi-scale units and prediction taps.
//!
//! Layout at the default 64x64 input:
//!
//! ```text
//! conv3x3 3->32 @64 | pool | conv 32->64 @32 | pool | conv 64->128 @16 (tap 0)
//!   | pool | conv 128->128 @8
//!   -> unit1 @8 (tap 1) -> unit2 @4 (tap 2) -> unit3 @2 (tap 3) -> unit4 @1 (tap 4)
//! ```
//!
//! Every deep unit starts with a plain layer (1x1 reduction to half the
//! unit width, then a possibly strided 3x3). Inception units then add a
//! square or cubic module on top at the same width, so an inception unit
//! costs exactly the plain layer plus its module.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::boxes::{generate_default_boxes, BBox, DefaultBoxConfig, DefaultBoxGrid};
use crate::checkpoint;
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{postprocess, PostprocessConfig};
use crate::head::{build_heads, predict, Detection, PredictionLayout};
use crate::inception::{InceptionKind, InceptionModule, InceptionSpec, ModuleSummary};
use crate::params::{conv_output_size, ConvParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mdfn-i1")]
    MdfnI1,
    #[serde(rename = "mdfn-i2")]
    MdfnI2,
    #[serde(rename = "baseline")]
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MdfnI1, Variant::MdfnI2, Variant::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MdfnI1 => "mdfn-i1",
            Variant::MdfnI2 => "mdfn-i2",
            Variant::Baseline => "baseline",
        }
    }

    pub fn unit_kinds(self) -> [UnitKind; 4] {
        use UnitKind::*;
        match self {
            Variant::MdfnI1 => [Cubic, Cubic, Square, Plain],
            Variant::MdfnI2 => [Cubic, Cubic, Square, Square],
            Variant::Baseline => [Plain; 4],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected mdfn-i1, mdfn-i2 or baseline")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Plain,
    Square,
    Cubic,
}

impl UnitKind {
    fn inception(self) -> Option<InceptionKind> {
        match self {
            UnitKind::Plain => None,
            UnitKind::Square => Some(InceptionKind::Square),
            UnitKind::Cubic => Some(InceptionKind::Cubic),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub kind: UnitKind,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// `(height, width)`.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    /// One 3x3 conv per stage; stages after the first start with a 2x2 pool.
    pub backbone: Vec<usize>,
    /// Backbone stage whose output is the shallow tap.
    pub shallow_tap: usize,
    pub deep_units: Vec<UnitSpec>,
    /// Including background.
    pub num_classes: usize,
    pub default_boxes: DefaultBoxConfig,
    pub cascade_relu: bool,
    pub cubic_middle_multiplicity: usize,
}

impl NetworkSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let widths = [256, 128, 64, 64];
        let strides = [1, 2, 2, 2];
        let deep_units = variant
            .unit_kinds()
            .iter()
            .zip(widths.iter().zip(strides))
            .map(|(&kind, (&out_channels, stride))| UnitSpec {
                kind,
                out_channels,
                stride,
            })
            .collect();
        Self {
            variant,
            input_size: (64, 64),
            input_channels: 3,
            backbone: vec![32, 64, 128, 128],
            shallow_tap: 2,
            deep_units,
            num_classes: 4,
            default_boxes: DefaultBoxConfig::default(),
            cascade_relu: true,
            cubic_middle_multiplicity: 3,
        }
    }

    pub fn layout(&self) -> PredictionLayout {
        PredictionLayout {
            boxes_per_cell: self.default_boxes.boxes_per_cell(),
            classes: self.num_classes,
        }
    }

    /// Consecutive inception units at the start of the deep stack.
    pub fn multi_scale_feature_depth(&self) -> usize {
        self.deep_units.iter().take_while(|u| u.kind != UnitKind::Plain).count()
    }

    fn module_spec(&self, unit: &UnitSpec) -> Option<InceptionSpec> {
        unit.kind.inception().map(|kind| InceptionSpec {
            cascade_relu: self.cascade_relu,
            cubic_middle_multiplicity: self.cubic_middle_multiplicity,
            ..InceptionSpec::with_defaults(kind, unit.out_channels, 1)
        })
    }

    /// Spatial size after each backbone stage, then after each deep unit.
    fn trace(&self) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        let (mut h, mut w) = self.input_size;
        let mut stages = Vec::new();
        for i in 0..self.backbone.len() {
            if i > 0 {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("backbone stage {i} pools the input away")));
            }
            stages.push((h, w));
        }
        let mut units = Vec::new();
        for (i, u) in self.deep_units.iter().enumerate() {
            let size = |s| conv_output_size(s, 3, u.stride, 1);
            match (size(h), size(w)) {
                (Some(a), Some(b)) => {
                    h = a;
                    w = b;
                }
                _ => return Err(Error::Config(format!("deep unit {i} has no spatial extent left"))),
            }
            units.push((h, w));
        }
        Ok((stages, units))
    }

    pub fn tap_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let (stages, units) = self.trace()?;
        let mut taps = vec![stages[self.shallow_tap]];
        taps.extend(units);
        Ok(taps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone.is_empty() || self.deep_units.is_empty() {
            return bad("network needs backbone stages and deep units".into());
        }
        if self.shallow_tap >= self.backbone.len() {
            return bad(format!("shallow tap {} is outside the {}-stage backbone", self.shallow_tap, self.backbone.len()));
        }
        if self.num_classes < 2 {
            return bad("need background plus at least one class".into());
        }
        if self.input_channels == 0 || self.backbone.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        for (i, u) in self.deep_units.iter().enumerate() {
            if u.out_channels < 2 || u.stride == 0 {
                return bad(format!("deep unit {i} needs at least 2 channels and a positive stride"));
            }
            if let Some(m) = self.module_spec(u) {
                if m.out_channels() != u.out_channels {
                    return bad(format!(
                        "deep unit {i}: {:?} module at width {} produces {} channels",
                        u.kind,
                        u.out_channels,
                        m.out_channels()
                    ));
                }
            }
        }
        let taps = self.tap_shapes()?;
        if taps.windows(2).any(|p| p[1].0 >= p[0].0 || p[1].1 >= p[0].1) {
            return bad(format!("tap sizes must strictly decrease, got {taps:?}"));
        }
        if self.default_boxes.aspect_ratios.is_empty() {
            return bad("default boxes need at least one aspect ratio".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeepUnit {
    pub name: String,
    pub spec: UnitSpec,
    pub in_channels: usize,
    pub reduce: ConvParams,
    pub conv: ConvParams,
    pub module: Option<InceptionModule>,
}

impl DeepUnit {
    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.reduce, &self.conv];
        if let Some(m) = &self.module {
            v.extend(m.convs());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn plain_param_count(&self) -> usize {
        self.reduce.param_count() + self.conv.param_count()
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Shallow tap first, then one per deep unit.
    pub taps: Vec<Var>,
    /// Head output per tap, `[B, k(c+4), m, n]`.
    pub predictions: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub store: ParamStore<T>,
    pub backbone: Vec<ConvParams>,
    pub units: Vec<DeepUnit>,
    pub heads: Vec<ConvParams>,
    pub defaults: DefaultBoxGrid,
}

impl<T: Scalar> Model<T> {
    /// Builds and initialises the network. All widths are checked here.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut backbone = Vec::new();
        let mut c = spec.input_channels;
        for (i, &w) in spec.backbone.iter().enumerate() {
            backbone.push(ConvParams::new(&mut store, &format!("backbone{i}"), c, w, 3, 1, 1, &mut rng)?);
            c = w;
        }
        let mut tap_channels = vec![spec.backbone[spec.shallow_tap]];
        let mut units = Vec::new();
        for (i, u) in spec.deep_units.iter().enumerate() {
            let name = format!("unit{}", i + 1);
            let mid = u.out_channels / 2;
            let reduce = ConvParams::new(&mut store, &format!("{name}.reduce"), c, mid, 1, 1, 0, &mut rng)?;
            let conv = ConvParams::new(&mut store, &format!("{name}.conv"), mid, u.out_channels, 3, u.stride, 1, &mut rng)?;
            let module = match spec.module_spec(u) {
                Some(m) => Some(InceptionModule::new(&mut store, &format!("{name}.{:?}", u.kind).to_lowercase(), m, &mut rng)?),
                None => None,
            };
            units.push(DeepUnit {
                name,
                spec: u.clone(),
                in_channels: c,
                reduce,
                conv,
                module,
            });
            c = u.out_channels;
            tap_channels.push(c);
        }
        let heads = build_heads(&mut store, &tap_channels, spec.layout(), &mut rng)?;
        let defaults = generate_default_boxes(&spec.tap_shapes()?, &spec.default_boxes)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            units,
            heads,
            defaults,
        })
    }

    pub fn layout(&self) -> PredictionLayout {
        self.spec.layout()
    }

    pub fn default_boxes(&self) -> Vec<BBox> {
        self.defaults.all()
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<ForwardPass> {
        let expect = [self.spec.input_channels, self.spec.input_size.0, self.spec.input_size.1];
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: shape,
                rhs: [&[0][..], &expect[..]].concat(),
            });
        }
        let mut x = input;
        let mut taps = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool2d(x, 2, 2)?;
            }
            x = tape.conv2d_with(x, conv, &self.store)?;
            x = tape.relu(x)?;
            if i == self.spec.shallow_tap {
                taps.push(x);
            }
        }
        for unit in &self.units {
            x = tape.conv2d_with(x, &unit.reduce, &self.store)?;
            x = tape.relu(x)?;
            x = tape.conv2d_with(x, &unit.conv, &self.store)?;
            x = tape.relu(x)?;
            if let Some(m) = &unit.module {
                x = m.forward(tape, &self.store, x)?;
            }
            taps.push(x);
        }
        let predictions = predict(tape, &self.store, &taps, &self.heads, self.layout())?;
        Ok(ForwardPass { taps, predictions })
    }

    /// Flattened predictions per image: `D` rows of `c + 4` values.
    pub fn predict_rows(&self, batch: Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let b = batch.shape()[0];
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let out = self.forward(&mut tape, x)?;
        let layout = self.layout();
        let flat = tape.flatten_heads(&out.predictions, layout.boxes_per_cell, layout.width())?;
        let per_image = self.defaults.len() * layout.width();
        let data = tape.value(flat).data();
        Ok((0..b).map(|i| data[i * per_image..(i + 1) * per_image].iter().map(|v| v.as_f64()).collect()).collect())
    }

    pub fn detect(&self, batch: Tensor<T>, config: &PostprocessConfig) -> Result<Vec<Vec<Detection>>> {
        let defaults = self.default_boxes();
        let layout = self.layout();
        Ok(self
            .predict_rows(batch)?
            .iter()
            .map(|rows| postprocess(rows, &defaults, layout, config))
            .collect())
    }

    /// Owning component of every parameter, for per-module reporting.
    fn owners(&self) -> BTreeMap<ParamId, String> {
        let mut owners = BTreeMap::new();
        let mut claim = |convs: Vec<&ConvParams>, name: &str| {
            for c in convs {
                owners.insert(c.weight, name.to_string());
                owners.insert(c.bias, name.to_string());
            }
        };
        for (i, c) in self.backbone.iter().enumerate() {
            claim(vec![c], &format!("backbone{i}"));
        }
        for u in &self.units {
            claim(vec![&u.reduce, &u.conv], &format!("{}.plain", u.name));
            if let Some(m) = &u.module {
                claim(m.convs(), &m.name);
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            claim(vec![h], &format!("head{i}"));
        }
        owners
    }

    /// Parameters and per-image multiply-adds of each component, measured
    /// on a recorded forward pass.
    pub fn cost_report(&self) -> Result<CostReport> {
        let mut tape = Tape::new();
        let (h, w) = self.spec.input_size;
        let x = tape.input(Tensor::zeros(&[1, self.spec.input_channels, h, w]));
        self.forward(&mut tape, x)?;
        let owners = self.owners();
        let mut rows: Vec<CostRow> = Vec::new();
        for (weight, _, out) in tape.conv_nodes() {
            let name = &owners[&weight];
            let shape = self.store.get(weight).shape();
            let params = self.store.get(weight).numel() + shape[0];
            let mult_adds = out[1] * out[2] * out[3] * shape[1] * shape[2] * shape[3];
            match rows.iter_mut().find(|r| &r.name == name) {
                Some(r) => {
                    r.params += params;
                    r.mult_adds += mult_adds;
                }
                None => rows.push(CostRow {
                    name: name.clone(),
                    params,
                    mult_adds,
                }),
            }
        }
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_mult_adds = rows.iter().map(|r| r.mult_adds).sum();
        Ok(CostReport {
            variant: self.spec.variant,
            rows,
            total_params,
            total_mult_adds,
        })
    }

    pub fn summary(&self) -> NetworkSummary {
        let (stages, unit_sizes) = self.spec.trace().expect("validated at build");
        let mut c = self.spec.input_channels;
        let backbone = self
            .backbone
            .iter()
            .zip(&stages)
            .enumerate()
            .map(|(i, (conv, &(h, w)))| {
                let s = StageSummary {
                    name: format!("backbone{i}"),
                    in_channels: c,
                    out_channels: conv.out_channels,
                    height: h,
                    width: w,
                    pooled: i > 0,
                    params: conv.param_count(),
                };
                c = conv.out_channels;
                s
            })
            .collect();
        let units = self
            .units
            .iter()
            .zip(&unit_sizes)
            .map(|(u, &(h, w))| UnitSummary {
                name: u.name.clone(),
                kind: u.spec.kind,
                in_channels: u.in_channels,
                reduce_channels: u.reduce.out_channels,
                out_channels: u.spec.out_channels,
                stride: u.spec.stride,
                height: h,
                width: w,
                params: u.param_count(),
                module: u.module.as_ref().map(InceptionModule::summary),
            })
            .collect();
        let layout = self.layout();
        let taps = self
            .spec
            .tap_shapes()
            .expect("validated at build")
            .iter()
            .zip(&self.heads)
            .enumerate()
            .map(|(i, (&(rows, cols), head))| TapSummary {
                name: if i == 0 {
                    format!("backbone{}", self.spec.shallow_tap)
                } else {
                    self.units[i - 1].name.clone()
                },
                channels: head.in_channels,
                rows,
                cols,
                head_channels: head.out_channels,
                boxes: layout.boxes_for(rows, cols),
            })
            .collect();
        NetworkSummary {
            variant: self.spec.variant,
            input_size: self.spec.input_size,
            multi_scale_feature_depth: self.spec.multi_scale_feature_depth(),
            backbone,
            units,
            taps,
            boxes_per_cell: layout.boxes_per_cell,
            num_classes: layout.classes,
            total_boxes: self.defaults.len(),
            params: self.param_count(),
        }
    }

    /// Writes every parameter plus `meta` (which gains a `spec` entry).
    pub fn save(&self, path: &Path, mut meta: serde_json::Value, extra: &[(String, Tensor<T>)]) -> Result<()> {
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("spec".into(), serde_json::to_value(&self.spec)?);
        } else {
            meta = json!({ "spec": self.spec });
        }
        let entries = self.store.iter().chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::save(path, meta, entries)
    }

    /// Restores a model saved by [`Model::save`]. Entries not belonging to
    /// the network are returned alongside the manifest metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value, Vec<(String, Tensor<T>)>)> {
        let (manifest, tensors) = checkpoint::load::<T>(path)?;
        let spec: NetworkSpec = serde_json::from_value(
            manifest
                .meta
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint metadata has no network spec".into()))?,
        )?;
        let mut model = Self::build(&spec, 0)?;
        let mut extra = Vec::new();
        let mut seen = 0;
        for (name, t) in tensors {
            match model.store.find(&name) {
                Some(id) => {
                    let slot = model.store.get_mut(id);
                    if slot.shape() != t.shape() {
                        return Err(Error::Checkpoint(format!("{name}: shape {:?} does not match {:?}", t.shape(), slot.shape())));
                    }
                    slot.data_mut().copy_from_slice(t.data());
                    seen += 1;
                }
                None => extra.push((name, t)),
            }
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {} parameters", model.store.len())));
        }
        Ok((model, manifest.meta, extra))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub params: usize,
    pub mult_adds: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub rows: Vec<CostRow>,
    pub total_params: usize,
    pub total_mult_adds: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub pooled: bool,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub name: String,
    pub kind: UnitKind,
    pub in_channels: usize,
    pub reduce_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub module: Option<ModuleSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSummary {
    pub name: String,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub head_channels: usize,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub variant: Variant,
    pub input_size: (usize, usize),
    pub multi_scale_feature_depth: usize,
    pub backbone: Vec<StageSummary>,
    pub units: Vec<UnitSummary>,
    pub taps: Vec<TapSummary>,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    pub total_boxes: usize,
    pub params: usize,
}
