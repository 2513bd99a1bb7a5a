//! Multi-scale inception modules over deep feature maps.
//!
//! All three kinds start with a 1x1 bottleneck and build 5x5 / 7x7
//! receptive fields from cascaded 3x3 stages. The square and cubic kinds
//! evaluate each 3x3 stage once and reuse its activation, so the output is
//! the channel concatenation
//!
//! ```text
//! square: [ f(f(b)),  f(b) x2,                 pass(b) ]   (f + 1)^2
//! cubic:  [ g(g(g(b))), g(g(b)) x3, g(b) x3,   pass(b) ]   (g + 1)^3
//! ```
//!
//! where `b` is the bottlenecked input and `pass` is `b` itself, max-pooled
//! when the module is strided. Integer coefficients are realised by
//! concatenating the same activation that many times.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ConvParams, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InceptionKind {
    Basic,
    Square,
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub kind: InceptionKind,
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub branch_channels: usize,
    pub stride: usize,
    /// ReLU between cascaded 3x3 stages.
    #[serde(default = "yes")]
    pub cascade_relu: bool,
    /// Copies of the two-stage activation in a cubic module.
    #[serde(default = "three")]
    pub cubic_middle_multiplicity: usize,
}

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

impl InceptionSpec {
    /// Bottleneck of about `in / 2` and a branch width such that the output
    /// width equals `in_channels`. For square and cubic modules the
    /// bottleneck (which doubles as the passthrough block) absorbs the
    /// integer remainder; basic modules use four branches of `in / 4`.
    pub fn with_defaults(kind: InceptionKind, in_channels: usize, stride: usize) -> Self {
        let mut spec = Self {
            kind,
            in_channels,
            bottleneck_channels: (in_channels / 2).max(1),
            branch_channels: 1,
            stride,
            cascade_relu: true,
            cubic_middle_multiplicity: 3,
        };
        let copies: usize = spec.branch_multiplicities().iter().sum();
        if kind == InceptionKind::Basic {
            spec.branch_channels = (in_channels / copies).max(1);
        } else {
            spec.branch_channels = ((in_channels - in_channels / 2) / copies).max(1);
            spec.bottleneck_channels = in_channels.saturating_sub(copies * spec.branch_channels).max(1);
        }
        spec
    }

    /// Copies of each conv branch in output order, deepest cascade first
    /// for square/cubic, `[1x1, 3x3, 5x5, 7x7]` for basic.
    pub fn branch_multiplicities(&self) -> Vec<usize> {
        match self.kind {
            InceptionKind::Basic => vec![1, 1, 1, 1],
            InceptionKind::Square => vec![1, 2],
            InceptionKind::Cubic => vec![1, self.cubic_middle_multiplicity, 3],
        }
    }

    /// Multiplicities including the passthrough term.
    pub fn multiplicities(&self) -> Vec<usize> {
        let mut m = self.branch_multiplicities();
        if self.kind != InceptionKind::Basic {
            m.push(1);
        }
        m
    }

    pub fn passthrough_channels(&self) -> usize {
        match self.kind {
            InceptionKind::Basic => 0,
            _ => self.bottleneck_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branch_multiplicities().iter().sum::<usize>() * self.branch_channels + self.passthrough_channels()
    }

    /// Output channel block widths in concatenation order.
    pub fn channel_blocks(&self) -> Vec<usize> {
        let mut blocks: Vec<usize> = self
            .branch_multiplicities()
            .iter()
            .map(|m| m * self.branch_channels)
            .collect();
        if self.kind != InceptionKind::Basic {
            blocks.push(self.passthrough_channels());
        }
        blocks
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.bottleneck_channels == 0 || self.branch_channels == 0 || self.stride == 0 {
            return Err(Error::Config(format!("inception widths and stride must be positive: {self:?}")));
        }
        if self.kind == InceptionKind::Cubic && self.cubic_middle_multiplicity == 0 {
            return Err(Error::Config("cubic middle multiplicity must be positive".into()));
        }
        Ok(())
    }
}

/// Bottleneck plus the chain of 3x3 stages whose activations are shared
/// across output branches. `stage1` carries the module stride.
#[derive(Debug, Clone)]
pub struct SharedBranchSet {
    pub bottleneck: ConvParams,
    pub stage1: ConvParams,
    pub stage2: ConvParams,
    pub stage3: Option<ConvParams>,
}

#[derive(Debug, Clone)]
pub struct BasicBranches {
    pub bottleneck: ConvParams,
    pub pointwise: ConvParams,
    pub conv3: ConvParams,
    pub conv5: [ConvParams; 2],
    pub conv7: [ConvParams; 3],
}

#[derive(Debug, Clone)]
pub enum Branches {
    Basic(BasicBranches),
    Shared(SharedBranchSet),
}

#[derive(Debug, Clone)]
pub struct InceptionModule {
    pub name: String,
    pub spec: InceptionSpec,
    pub branches: Branches,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub name: String,
    /// Number of cascaded 3x3 stages (0 for 1x1 and passthrough branches).
    pub depth: usize,
    pub receptive_field: usize,
    pub multiplicity: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSummary {
    pub name: String,
    pub kind: InceptionKind,
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub branches: Vec<BranchSummary>,
    pub params: usize,
}

impl InceptionModule {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: InceptionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (cin, cb, c, s) = (spec.in_channels, spec.bottleneck_channels, spec.branch_channels, spec.stride);
        let bottleneck = ConvParams::new(store, &format!("{name}.bottleneck"), cin, cb, 1, 1, 0, rng)?;
        let mut conv3 = |store: &mut ParamStore<T>, label: &str, cin: usize, stride: usize| {
            ConvParams::new(store, &format!("{name}.{label}"), cin, c, 3, stride, 1, rng)
        };
        let branches = match spec.kind {
            InceptionKind::Basic => {
                let conv3x3 = conv3(store, "b3", cb, s)?;
                let conv5 = [conv3(store, "b5.0", cb, s)?, conv3(store, "b5.1", c, 1)?];
                let conv7 = [
                    conv3(store, "b7.0", cb, s)?,
                    conv3(store, "b7.1", c, 1)?,
                    conv3(store, "b7.2", c, 1)?,
                ];
                let pointwise = ConvParams::new(store, &format!("{name}.b1"), cb, c, 1, s, 0, rng)?;
                Branches::Basic(BasicBranches {
                    bottleneck,
                    pointwise,
                    conv3: conv3x3,
                    conv5,
                    conv7,
                })
            }
            InceptionKind::Square | InceptionKind::Cubic => {
                let stage1 = conv3(store, "stage1", cb, s)?;
                let stage2 = conv3(store, "stage2", c, 1)?;
                let stage3 = if spec.kind == InceptionKind::Cubic {
                    Some(conv3(store, "stage3", c, 1)?)
                } else {
                    None
                };
                Branches::Shared(SharedBranchSet {
                    bottleneck,
                    stage1,
                    stage2,
                    stage3,
                })
            }
        };
        Ok(Self {
            name: name.to_string(),
            spec,
            branches,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn convs(&self) -> Vec<&ConvParams> {
        match &self.branches {
            Branches::Basic(b) => {
                let mut v = vec![&b.bottleneck, &b.pointwise, &b.conv3];
                v.extend(b.conv5.iter());
                v.extend(b.conv7.iter());
                v
            }
            Branches::Shared(s) => {
                let mut v = vec![&s.bottleneck, &s.stage1, &s.stage2];
                v.extend(s.stage3.iter());
                v
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.convs().iter().flat_map(|c| [c.weight, c.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(input).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "inception input",
                lhs: tape.shape(input).to_vec(),
                rhs: vec![self.spec.in_channels],
            });
        }
        // The pooled passthrough floors while the padded 3x3 rounds up, so
        // they only line up on extents divisible by the stride.
        let (_, _, h, w) = tape.value(input).dims4()?;
        let s = self.spec.stride;
        if self.spec.kind != InceptionKind::Basic && (h % s != 0 || w % s != 0) {
            return Err(Error::ShapeMismatch {
                op: "strided inception input",
                lhs: tape.shape(input).to_vec(),
                rhs: vec![s],
            });
        }
        let cascade_relu = self.spec.cascade_relu;
        // Returns (activated output, input for the next cascaded stage).
        let stage = |tape: &mut Tape<T>, x: Var, conv: &ConvParams| -> Result<(Var, Var)> {
            let pre = tape.conv2d_with(x, conv, store)?;
            let act = tape.relu(pre)?;
            Ok((act, if cascade_relu { act } else { pre }))
        };
        match &self.branches {
            Branches::Basic(b) => {
                let (mid, _) = stage(tape, input, &b.bottleneck)?;
                let (p1, _) = stage(tape, mid, &b.pointwise)?;
                let (p3, _) = stage(tape, mid, &b.conv3)?;
                let mut x = mid;
                let mut p5 = mid;
                for conv in &b.conv5 {
                    let (act, next) = stage(tape, x, conv)?;
                    p5 = act;
                    x = next;
                }
                let mut x = mid;
                let mut p7 = mid;
                for conv in &b.conv7 {
                    let (act, next) = stage(tape, x, conv)?;
                    p7 = act;
                    x = next;
                }
                tape.concat_channels(&[p1, p3, p5, p7])
            }
            Branches::Shared(s) => {
                let (mid, _) = stage(tape, input, &s.bottleneck)?;
                let (f1, n1) = stage(tape, mid, &s.stage1)?;
                let (f2, n2) = stage(tape, n1, &s.stage2)?;
                let pass = if self.spec.stride > 1 {
                    tape.max_pool2d(mid, self.spec.stride, self.spec.stride)?
                } else {
                    mid
                };
                let mut blocks = Vec::new();
                match &s.stage3 {
                    None => {
                        blocks.push(f2);
                        blocks.extend([f1; 2]);
                    }
                    Some(conv) => {
                        let (f3, _) = stage(tape, n2, conv)?;
                        blocks.push(f3);
                        blocks.extend(std::iter::repeat_n(f2, self.spec.cubic_middle_multiplicity));
                        blocks.extend([f1; 3]);
                    }
                }
                blocks.push(pass);
                tape.concat_channels(&blocks)
            }
        }
    }

    pub fn summary(&self) -> ModuleSummary {
        let s = &self.spec;
        let c = s.branch_channels;
        let branch = |name: &str, depth: usize, multiplicity: usize, channels: usize| BranchSummary {
            name: name.to_string(),
            depth,
            receptive_field: 2 * depth + 1,
            multiplicity,
            channels,
        };
        let branches = match s.kind {
            InceptionKind::Basic => vec![
                branch("1x1", 0, 1, c),
                branch("3x3", 1, 1, c),
                branch("5x5", 2, 1, c),
                branch("7x7", 3, 1, c),
            ],
            InceptionKind::Square => vec![
                branch("f^2", 2, 1, c),
                branch("f", 1, 2, c),
                branch("identity", 0, 1, s.passthrough_channels()),
            ],
            InceptionKind::Cubic => vec![
                branch("g^3", 3, 1, c),
                branch("g^2", 2, s.cubic_middle_multiplicity, c),
                branch("g", 1, 3, c),
                branch("identity", 0, 1, s.passthrough_channels()),
            ],
        };
        ModuleSummary {
            name: self.name.clone(),
            kind: s.kind,
            in_channels: s.in_channels,
            bottleneck_channels: s.bottleneck_channels,
            out_channels: s.out_channels(),
            stride: s.stride,
            branches,
            params: self.param_count(),
        }
    }
}

/// Parameter and multiply-add totals of a recorded graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCost {
    /// Convolution parameters, each distinct weight/bias counted once.
    pub params: usize,
    /// `Cout * Ho * Wo * Cin * k^2` summed over conv nodes, per image.
    pub mult_adds: usize,
}

pub fn graph_cost<T: Scalar>(tape: &Tape<T>, store: &ParamStore<T>) -> GraphCost {
    let nodes = tape.conv_nodes();
    let mut weights: Vec<ParamId> = nodes.iter().map(|(w, _, _)| *w).collect();
    weights.sort();
    weights.dedup();
    let params = weights
        .iter()
        .map(|&w| {
            let cout = store.get(w).shape()[0];
            store.get(w).numel() + cout
        })
        .sum();
    let mult_adds = nodes
        .iter()
        .map(|(w, _, out)| {
            let shape = store.get(*w).shape();
            out[1] * out[2] * out[3] * shape[1] * shape[2] * shape[3]
        })
        .sum();
    GraphCost { params, mult_adds }
}

/// Builds the module in a scratch store and measures one forward pass on
/// a `1 x in_channels x height x width` input.
pub fn count_params_and_flops(spec: &InceptionSpec, height: usize, width: usize) -> Result<GraphCost> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let module = InceptionModule::new(&mut store, "probe", spec.clone(), &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[1, spec.in_channels, height, width]));
    module.forward(&mut tape, &store, x)?;
    Ok(graph_cost(&tape, &store))
}

/// Weight count of `depth` cascaded `channels -> channels` 3x3 convolutions
/// over that of the single square kernel with the same receptive field.
pub fn cascade_weight_ratio(depth: usize, channels: usize) -> Ratio<u64> {
    let cascaded = depth * channels * channels * 9;
    let k = 2 * depth + 1;
    let single = channels * channels * k * k;
    Ratio::new(cascaded as u64, single as u64)
}
