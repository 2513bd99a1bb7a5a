//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code under test except to read
//! tensors and record graphs.
#![allow(dead_code)]

use mdfn::boxes::BBox;
use mdfn::inception::{Branches, InceptionKind, InceptionModule, InceptionSpec};
use mdfn::tensor::Tensor;
use mdfn::{ConvParams, ParamId, ParamStore, Reduction, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- tensors

/// Direct nested-loop cross-correlation, `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (bs, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0; bs * co * ho * wo];
    for n in 0..bs {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * ci + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ci + c) * k + ky) * k + kx;
                                acc += xv[xi] * wv[wi];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bs, co, ho, wo], out).unwrap()
}

/// Window maxima by brute force.
pub fn naive_max_pool(x: &Tensor<f64>, window: usize, stride: usize) -> Tensor<f64> {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(bs * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for y in 0..ho {
            for xo in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..window {
                    for dx in 0..window {
                        m = m.max(plane[(y * stride + dy) * w + xo * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![bs, c, ho, wo], out).unwrap()
}

// ------------------------------------------------------ finite differences

pub type Builder = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var>;

/// A scalar function of everything in `store`.
pub struct GradCase {
    pub op: &'static str,
    pub store: ParamStore<f64>,
    pub build: Builder,
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// `max |analytic - numeric| / max(max |numeric|, 1e-12)`.
    pub rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
}

/// Central differences over every coordinate of every tensor in the store.
/// A perturbation that changes the graph's branch pattern (ReLU sign, pool
/// argmax, smooth-L1 side) straddles a kink and is skipped.
pub fn fd_check(case: &mut GradCase, eps: f64) -> FdReport {
    let build = &case.build;
    let store = &mut case.store;
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let pattern = tape.branch_pattern();
    tape.backward(loss, store).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.get(id).grad().unwrap().to_vec()).collect();

    let eval = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let l = build(&mut t, store);
        (t.value(l).data()[0], t.branch_pattern())
    };
    let (mut max_diff, mut max_num) = (0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for (p, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let (lp, pp) = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let (lm, pm) = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            if pp != pattern || pm != pattern {
                skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * eps);
            max_diff = max_diff.max((analytic[p][i] - num).abs());
            max_num = max_num.max(num.abs());
            checked += 1;
        }
    }
    FdReport {
        rel_error: max_diff / max_num.max(1e-12),
        checked,
        skipped,
    }
}

fn add_param(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> ParamId {
    store.add(name, t).unwrap()
}

/// Builder ending in a random linear read-out of `f`'s output.
fn readout(ids: Vec<ParamId>, weights: Vec<f64>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> Builder {
    Box::new(move |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = f(tape, &vars);
        if tape.shape(out).iter().product::<usize>() == 1 && weights.is_empty() {
            out
        } else {
            tape.weighted_sum(out, &weights).unwrap()
        }
    })
}

fn out_len(build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, store: &ParamStore<f64>, ids: &[ParamId]) -> usize {
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).numel()
}

fn case(
    rng: &mut ChaCha8Rng,
    op: &'static str,
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
) -> GradCase {
    let n = out_len(&f, &store, &ids);
    let weights = rand_vec(rng, n);
    GradCase {
        op,
        store,
        build: readout(ids, weights, f),
    }
}

pub const PRIMITIVES: [&str; 14] = [
    "conv2d",
    "relu",
    "max_pool2d",
    "concat_channels",
    "flatten_heads",
    "select_rows",
    "slice_cols",
    "softmax_cross_entropy_mean",
    "softmax_cross_entropy_sum",
    "smooth_l1",
    "add",
    "scale",
    "weighted_sum",
    "sum",
];

/// One random instance of primitive `op`.
pub fn primitive_case(rng: &mut ChaCha8Rng, op: &'static str) -> GradCase {
    let mut store = ParamStore::new();
    match op {
        "conv2d" => {
            let k = if rng.gen_bool(0.5) { 3 } else { 1 };
            let pad = rng.gen_range(0..=1);
            let stride = rng.gen_range(1..=2);
            let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
            let x = add_param(&mut store, "x", rand_tensor(rng, &[b, ci, h, w], -1.0, 1.0));
            let wt = add_param(&mut store, "w", rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0));
            let bias = add_param(&mut store, "b", rand_tensor(rng, &[co], -1.0, 1.0));
            case(rng, op, store, vec![x, wt, bias], move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap())
        }
        "relu" => {
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
            let x = add_param(&mut store, "x", rand_tensor(rng, &shape, -1.0, 1.0));
            case(rng, op, store, vec![x], |t, v| t.relu(v[0]).unwrap())
        }
        "max_pool2d" => {
            let window = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=window);
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(window..=6), rng.gen_range(window..=6)];
            let x = add_param(&mut store, "x", rand_tensor(rng, &shape, -1.0, 1.0));
            case(rng, op, store, vec![x], move |t, v| t.max_pool2d(v[0], window, stride).unwrap())
        }
        "concat_channels" => {
            let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let n = rng.gen_range(1..=3);
            let ids: Vec<ParamId> = (0..n)
                .map(|i| {
                    let c = rng.gen_range(1..=3);
                    let t = rand_tensor(rng, &[b, c, h, w], -1.0, 1.0);
                    add_param(&mut store, &format!("x{i}"), t)
                })
                .collect();
            case(rng, op, store, ids, |t, v| t.concat_channels(v).unwrap())
        }
        "flatten_heads" => {
            let (k, width, b) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=2));
            let n = rng.gen_range(1..=3);
            let ids: Vec<ParamId> = (0..n)
                .map(|i| {
                    let (m, nn) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                    let t = rand_tensor(rng, &[b, k * width, m, nn], -1.0, 1.0);
                    add_param(&mut store, &format!("x{i}"), t)
                })
                .collect();
            case(rng, op, store, ids, move |t, v| t.flatten_heads(v, k, width).unwrap())
        }
        "select_rows" => {
            let (n, w) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
            let x = add_param(&mut store, "x", rand_tensor(rng, &[n, w], -1.0, 1.0));
            let rows: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..n)).collect();
            case(rng, op, store, vec![x], move |t, v| t.select_rows(v[0], &rows).unwrap())
        }
        "slice_cols" => {
            let (n, w) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let start = rng.gen_range(0..w);
            let end = rng.gen_range(start + 1..=w);
            let x = add_param(&mut store, "x", rand_tensor(rng, &[n, w], -1.0, 1.0));
            case(rng, op, store, vec![x], move |t, v| t.slice_cols(v[0], start, end).unwrap())
        }
        "softmax_cross_entropy_mean" | "softmax_cross_entropy_sum" => {
            let (n, c) = (rng.gen_range(1..=6), rng.gen_range(2..=5));
            let x = add_param(&mut store, "x", rand_tensor(rng, &[n, c], -3.0, 3.0));
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let reduction = if op.ends_with("mean") { Reduction::Mean } else { Reduction::Sum };
            GradCase {
                op,
                store,
                build: readout(vec![x], Vec::new(), move |t, v| t.softmax_cross_entropy(v[0], &targets, reduction).unwrap()),
            }
        }
        "smooth_l1" => {
            let n = rng.gen_range(1..=6);
            let x = add_param(&mut store, "x", rand_tensor(rng, &[n, 4], -3.0, 3.0));
            let target = rand_tensor(rng, &[n, 4], -1.0, 1.0);
            GradCase {
                op,
                store,
                build: readout(vec![x], Vec::new(), move |t, v| t.smooth_l1(v[0], &target).unwrap()),
            }
        }
        "add" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let a = add_param(&mut store, "a", rand_tensor(rng, &shape, -1.0, 1.0));
            let b = add_param(&mut store, "b", rand_tensor(rng, &shape, -1.0, 1.0));
            case(rng, op, store, vec![a, b], |t, v| t.add(v[0], v[1]).unwrap())
        }
        "scale" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let factor = rng.gen_range(-2.0..2.0);
            let a = add_param(&mut store, "a", rand_tensor(rng, &shape, -1.0, 1.0));
            case(rng, op, store, vec![a], move |t, v| t.scale(v[0], factor).unwrap())
        }
        "weighted_sum" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let a = add_param(&mut store, "a", rand_tensor(rng, &shape, -1.0, 1.0));
            let weights = rand_vec(rng, shape[0] * shape[1]);
            GradCase {
                op,
                store,
                build: readout(vec![a], Vec::new(), move |t, v| t.weighted_sum(v[0], &weights).unwrap()),
            }
        }
        "sum" => {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let a = add_param(&mut store, "a", rand_tensor(rng, &shape, -1.0, 1.0));
            // square it first so the gradient depends on the input
            GradCase {
                op,
                store,
                build: readout(vec![a], Vec::new(), |t, v| {
                    let sq = t.relu(v[0]).unwrap();
                    let both = t.add(sq, v[0]).unwrap();
                    t.sum(both).unwrap()
                }),
            }
        }
        other => panic!("unknown primitive {other}"),
    }
}

pub fn random_module_spec(rng: &mut ChaCha8Rng, kind: InceptionKind) -> InceptionSpec {
    InceptionSpec {
        kind,
        in_channels: rng.gen_range(1..=4),
        bottleneck_channels: rng.gen_range(1..=3),
        branch_channels: rng.gen_range(1..=2),
        stride: rng.gen_range(1..=2),
        cascade_relu: rng.gen_bool(0.7),
        cubic_middle_multiplicity: if rng.gen_bool(0.8) { 3 } else { 2 },
    }
}

/// A random module with its input as a parameter.
pub fn module_case(rng: &mut ChaCha8Rng, kind: InceptionKind) -> GradCase {
    let spec = random_module_spec(rng, kind);
    let mut store = ParamStore::new();
    let module = InceptionModule::new(&mut store, "m", spec.clone(), rng).unwrap();
    // lift the biases so that most units are active
    for conv in module.convs() {
        store.get_mut(conv.bias).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.3));
    }
    let (mut h, mut w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    if spec.stride == 2 {
        h += h % 2;
        w += w % 2;
    }
    let x = add_param(&mut store, "x", rand_tensor(rng, &[1, spec.in_channels, h, w], -1.0, 1.0));
    let out_numel = {
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let out = module.forward(&mut tape, &store, xv).unwrap();
        tape.value(out).numel()
    };
    let weights = rand_vec(rng, out_numel);
    let op = match kind {
        InceptionKind::Basic => "basic_module",
        InceptionKind::Square => "square_module",
        InceptionKind::Cubic => "cubic_module",
    };
    GradCase {
        op,
        store,
        build: Box::new(move |tape, store| {
            let xv = tape.param(store, x);
            let out = module.forward(tape, store, xv).unwrap();
            tape.weighted_sum(out, &weights).unwrap()
        }),
    }
}

// ------------------------------------------------- tied-weight references

/// Unshared rendition of a square or cubic module: every consumer of a
/// shared activation recomputes it with its own copy of the weights.
pub struct TiedReference {
    pub store: ParamStore<f64>,
    /// For every parameter of the shared module, the ids of its copies.
    pub copies: Vec<(ParamId, Vec<ParamId>)>,
    spec: InceptionSpec,
    paths: Vec<Vec<(ConvParams, usize)>>,
}

impl TiedReference {
    pub fn new(module: &InceptionModule, shared: &ParamStore<f64>) -> Self {
        let Branches::Shared(s) = &module.branches else {
            panic!("tied reference needs a square or cubic module");
        };
        let chain: Vec<&ConvParams> = [Some(&s.stage1), Some(&s.stage2), s.stage3.as_ref()].into_iter().flatten().collect();
        let spec = module.spec.clone();
        // (depth, count): depth 0 is the passthrough
        let mut blocks: Vec<usize> = vec![chain.len()];
        if chain.len() == 2 {
            blocks.extend([1, 1]);
        } else {
            blocks.extend(std::iter::repeat_n(2, spec.cubic_middle_multiplicity));
            blocks.extend([1, 1, 1]);
        }
        blocks.push(0);

        let mut store = ParamStore::new();
        let mut copies: Vec<(ParamId, Vec<ParamId>)> = Vec::new();
        let mut record = |orig: ParamId, copy: ParamId| match copies.iter_mut().find(|(o, _)| *o == orig) {
            Some((_, v)) => v.push(copy),
            None => copies.push((orig, vec![copy])),
        };
        let mut paths = Vec::new();
        for (b, &depth) in blocks.iter().enumerate() {
            let mut path = Vec::new();
            for (level, conv) in std::iter::once(&s.bottleneck).chain(chain.iter().copied().take(depth)).enumerate() {
                let w = store.add(format!("p{b}.l{level}.w"), shared.get(conv.weight).clone()).unwrap();
                let bias = store.add(format!("p{b}.l{level}.b"), shared.get(conv.bias).clone()).unwrap();
                record(conv.weight, w);
                record(conv.bias, bias);
                let copy = ConvParams {
                    weight: w,
                    bias,
                    ..conv.clone()
                };
                path.push((copy, level));
            }
            paths.push(path);
        }
        Self { store, copies, spec, paths }
    }

    pub fn forward(&self, tape: &mut Tape<f64>, input: Var) -> Var {
        let mut blocks = Vec::new();
        for path in &self.paths {
            let mut x = input;
            let mut act = input;
            for (conv, level) in path {
                let pre = tape.conv2d_with(x, conv, &self.store).unwrap();
                act = tape.relu(pre).unwrap();
                // the bottleneck output always feeds on activated
                x = if self.spec.cascade_relu || *level == 0 { act } else { pre };
            }
            if path.len() == 1 && self.spec.stride > 1 {
                act = tape.max_pool2d(act, self.spec.stride, self.spec.stride).unwrap();
            }
            blocks.push(act);
        }
        tape.concat_channels(&blocks).unwrap()
    }
}

// --------------------------------------------------------- impulse probe

/// Width of the nonzero support of each output channel block when the
/// module (all weights positive, biases zero) sees a single centred impulse.
pub fn impulse_support(module: &InceptionModule, store: &mut ParamStore<f64>, size: usize) -> Vec<usize> {
    for conv in module.convs() {
        store.get_mut(conv.weight).data_mut().fill(0.1);
        store.get_mut(conv.bias).data_mut().fill(0.0);
    }
    let c = module.spec.in_channels;
    let mut x = vec![0.0; c * size * size];
    for ch in 0..c {
        x[ch * size * size + (size / 2) * size + size / 2] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.input(Tensor::new(vec![1, c, size, size], x).unwrap());
    let out = module.forward(&mut tape, store, xv).unwrap();
    let (_, _, h, w) = tape.value(out).dims4().unwrap();
    let data = tape.value(out).data().to_vec();
    let mut start = 0;
    module
        .spec
        .channel_blocks()
        .iter()
        .map(|&width| {
            let cols: Vec<usize> = (start..start + width)
                .flat_map(|ch| {
                    let plane = &data[ch * h * w..(ch + 1) * h * w];
                    (0..h * w).filter(move |&i| plane[i] != 0.0).map(move |i| i % w)
                })
                .collect();
            start += width;
            let lo = cols.iter().min().copied().unwrap_or(0);
            let hi = cols.iter().max().copied().unwrap_or(0);
            if cols.is_empty() {
                0
            } else {
                hi - lo + 1
            }
        })
        .collect()
}

// ------------------------------------------------------------- geometry

fn corners(b: &BBox) -> (f64, f64, f64, f64) {
    (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)
}

/// Jaccard overlap from corner form.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Box with corners on a coarse grid, so that exact IoU ties are common.
pub fn grid_box(rng: &mut ChaCha8Rng, cells: u32) -> BBox {
    let g = cells as f64;
    let x1 = rng.gen_range(0..cells) as f64;
    let y1 = rng.gen_range(0..cells) as f64;
    let x2 = rng.gen_range(x1 as u32 + 1..=cells) as f64;
    let y2 = rng.gen_range(y1 as u32 + 1..=cells) as f64;
    BBox::from_corners(x1 / g, y1 / g, x2 / g, y2 / g)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.05..0.6);
    let h = rng.gen_range(0.05..0.6);
    BBox::new(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h)
}

/// `(gt, forced)` per default box, or `None`.
pub type OracleMatch = Vec<Option<(usize, bool)>>;

/// Exhaustive matcher: sort every (default, gt) pair by IoU, descending,
/// ties by default index then gt index, and hand each gt its first free
/// pair; then give every other default its best gt if that clears
/// `threshold` (ties to the lower gt index).
pub fn brute_force_match(defaults: &[BBox], gts: &[BBox], threshold: f64) -> OracleMatch {
    let mut out: OracleMatch = vec![None; defaults.len()];
    if gts.is_empty() {
        return out;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (d, db) in defaults.iter().enumerate() {
        for (g, gb) in gts.iter().enumerate() {
            pairs.push((ref_iou(db, gb), d, g));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    for &(_, d, g) in &pairs {
        if out[d].is_none() && !gt_used[g] {
            out[d] = Some((g, true));
            gt_used[g] = true;
        }
    }
    for (d, db) in defaults.iter().enumerate() {
        if out[d].is_some() {
            continue;
        }
        let mut best = (0, ref_iou(db, &gts[0]));
        for (g, gb) in gts.iter().enumerate().skip(1) {
            let v = ref_iou(db, gb);
            if v > best.1 {
                best = (g, v);
            }
        }
        if best.1 > threshold {
            out[d] = Some((best.0, false));
        }
    }
    out
}

/// Suppression by an explicit pairwise matrix over the score order.
pub fn brute_force_nms(boxes: &[(BBox, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1));
    let n = boxes.len();
    let mut overlaps = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            overlaps[i][j] = ref_iou(&boxes[i].0, &boxes[j].0) > threshold;
        }
    }
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if overlaps[i][j] {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// AP from the enumerated ranking: the precision envelope at each true
/// positive's rank, weighted by its recall step `1 / n_gt`.
pub fn brute_force_ap(dets: &[(usize, BBox, f64)], gts: &[Vec<BBox>], threshold: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for &i in &order {
        let (img, bbox, _) = &dets[i];
        let best = gts[*img]
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, ref_iou(bbox, gt)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((g, v)),
            });
        let hit = match best {
            Some((g, v)) if v >= threshold && !claimed[*img][g] => {
                claimed[*img][g] = true;
                true
            }
            _ => false,
        };
        hits.push(hit);
    }
    let mut tp = 0;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            tp += h as usize;
            tp as f64 / (k + 1) as f64
        })
        .collect();
    (0..hits.len())
        .filter(|&k| hits[k])
        .map(|k| precision[k..].iter().copied().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}
