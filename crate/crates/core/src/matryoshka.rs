//! Nested bidirectional state-space block.
//!
//! For every scale `o` the sequence is cut into fragments of `o` frames.
//! Each fragment goes through an inner bidirectional scan with independent
//! forward/backward parameters, is fused back to the feature width and added
//! to its input. The enhanced sequence then passes through one outer
//! bidirectional scan whose two directions share parameters. A convolutional
//! gate computed from the enhanced sequence and the raw input weights the
//! outer output, and the per-scale results are averaged uniformly.
//!
//! Batches are stacked along the time axis: `[batch * frames, width]`.
//! Fragment and sample boundaries coincide because every scale divides the
//! frame count, so one segmented scan processes the whole batch.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, RowPlan, Var};
use crate::error::{invalid, shape_err, MantaError, Result};
use crate::params::{join, Binder, Linear, Parameterized};
use crate::ssm::{bidirectional_var, SsmParams};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_CONV_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSet {
    scales: Vec<usize>,
}

impl ScaleSet {
    /// Sorted, distinct powers of two (1 included), each dividing and
    /// strictly smaller than `frames`.
    pub fn new(mut scales: Vec<usize>, frames: usize) -> Result<Self> {
        if scales.is_empty() {
            return invalid("scale set is empty");
        }
        scales.sort_unstable();
        if scales.windows(2).any(|w| w[0] == w[1]) {
            return invalid(format!("duplicate scale in {scales:?}"));
        }
        for &o in &scales {
            if o == 0 || !o.is_power_of_two() {
                return invalid(format!("scale {o} is not a power of two"));
            }
            if o >= frames || frames % o != 0 {
                return invalid(format!("scale {o} must divide and be smaller than {frames} frames"));
            }
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fragmenting {
    #[default]
    NonOverlapping,
    /// Stride-1 windows of `o` frames; each frame averages the enhanced
    /// values of every window covering it.
    Sliding,
}

impl FromStr for Fragmenting {
    type Err = MantaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_overlapping" | "nonoverlapping" | "main" => Ok(Self::NonOverlapping),
            "sliding" => Ok(Self::Sliding),
            other => Err(MantaError::Config(format!("unknown fragmenting mode `{other}`"))),
        }
    }
}

impl fmt::Display for Fragmenting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NonOverlapping => "non_overlapping",
            Self::Sliding => "sliding",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerParams {
    pub fw: SsmParams,
    pub bw: SsmParams,
    /// `2 * width -> width`
    pub fuse: Linear,
}

impl InnerParams {
    pub fn init<R: Rng + ?Sized>(width: usize, n_state: usize, selective: bool, rng: &mut R) -> Self {
        Self {
            fw: SsmParams::init(width, n_state, selective, rng),
            bw: SsmParams::init(width, n_state, selective, rng),
            fuse: Linear::init(2 * width, width, rng),
        }
    }
}

impl Parameterized for InnerParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.fw.visit(&join(prefix, "fw"), f);
        self.bw.visit(&join(prefix, "bw"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fw.visit_mut(&join(prefix, "fw"), f);
        self.bw.visit_mut(&join(prefix, "bw"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Three 3x3 convolutions (`1 -> c -> c -> 1`, SiLU between them) followed
/// by batch normalization over the whole single-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[c, 1, 3, 3]`
    pub k1: Tensor,
    /// `[c, c, 3, 3]`
    pub k2: Tensor,
    /// `[1, c, 3, 3]`
    pub k3: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: f64,
    pub running_var: f64,
}

impl ConvBlock {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let b1 = 1.0 / 3.0;
        let b2 = 1.0 / (9.0 * channels as f64).sqrt();
        Self {
            k1: Tensor::uniform(&[channels, 1, 3, 3], b1, rng),
            k2: Tensor::uniform(&[channels, channels, 3, 3], b2, rng),
            k3: Tensor::uniform(&[1, channels, 3, 3], b2, rng),
            gamma: Tensor::scalar(1.0),
            beta: Tensor::scalar(0.0),
            running_mean: 0.0,
            running_var: 1.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.k1.shape()[0]
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        if stats.is_empty() {
            return;
        }
        let n = stats.len() as f64;
        let mean = stats.iter().map(|s| s.mean).sum::<f64>() / n;
        let var = stats.iter().map(|s| s.var).sum::<f64>() / n;
        self.running_mean = (1.0 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean;
        self.running_var = (1.0 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var;
    }
}

impl Parameterized for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "k1"), &self.k1);
        f(join(prefix, "k2"), &self.k2);
        f(join(prefix, "k3"), &self.k3);
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "k1"), &mut self.k1);
        f(join(prefix, "k2"), &mut self.k2);
        f(join(prefix, "k3"), &mut self.k3);
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatryoshkaParams {
    pub inner: Vec<(usize, InnerParams)>,
    /// Used for both scan directions.
    pub outer: SsmParams,
    pub outer_fuse: Linear,
    pub conv: ConvBlock,
}

impl MatryoshkaParams {
    pub fn init<R: Rng + ?Sized>(
        width: usize,
        n_state: usize,
        scales: &ScaleSet,
        conv_channels: usize,
        selective: bool,
        rng: &mut R,
    ) -> Self {
        let inner = scales
            .scales()
            .iter()
            .map(|&o| (o, InnerParams::init(width, n_state, selective, rng)))
            .collect();
        Self {
            inner,
            outer: SsmParams::init(width, n_state, selective, rng),
            outer_fuse: Linear::init(2 * width, width, rng),
            conv: ConvBlock::init(conv_channels, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.outer.width()
    }

    pub fn inner_for(&self, o: usize) -> Result<&InnerParams> {
        self.inner
            .iter()
            .find(|(s, _)| *s == o)
            .map(|(_, p)| p)
            .ok_or_else(|| MantaError::Invalid(format!("no inner parameters for scale {o}")))
    }
}

impl Parameterized for MatryoshkaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (o, p) in &self.inner {
            p.visit(&join(prefix, &format!("inner{o}")), f);
        }
        self.outer.visit(&join(prefix, "outer"), f);
        self.outer_fuse.visit(&join(prefix, "outer_fuse"), f);
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (o, p) in &mut self.inner {
            p.visit_mut(&join(prefix, &format!("inner{o}")), f);
        }
        self.outer.visit_mut(&join(prefix, "outer"), f);
        self.outer_fuse.visit_mut(&join(prefix, "outer_fuse"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockOptions {
    pub disable_inner: bool,
    pub disable_outer: bool,
    pub fragmenting: Fragmenting,
    /// Batch statistics (training) or running statistics (inference) in the
    /// gate's normalization.
    pub batch_stats: bool,
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub output: Var,
    /// Per-scale weighted outer outputs, in scale order.
    pub per_scale: Vec<Var>,
    pub enhanced: Vec<Var>,
    pub gates: Vec<Var>,
    /// Batch-norm nodes, for running-statistic updates.
    pub norms: Vec<Var>,
}

/// `fuse(concat(scan_fw(x), scan_bw(x)))` over independent fragments of
/// `segment` rows.
fn inner_var(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    p: &InnerParams,
    x: Var,
    segment: usize,
) -> Result<Var> {
    let fw = p.fw.bind(g, binder, &join(prefix, "fw"));
    let bw = p.bw.bind(g, binder, &join(prefix, "bw"));
    let (y_fw, y_bw) = bidirectional_var(g, &fw, &bw, x, segment)?;
    let cat = g.concat(&[y_fw, y_bw], 1)?;
    p.fuse.forward(g, binder, &join(prefix, "fuse"), cat)
}

fn sliding_plans(batch: usize, frames: usize, o: usize) -> (RowPlan, RowPlan) {
    let windows = frames - o + 1;
    let mut gather = Vec::with_capacity(batch * windows * o);
    let mut scatter = vec![Vec::new(); batch * frames];
    for b in 0..batch {
        for i in 0..windows {
            for k in 0..o {
                let src = b * frames + i + k;
                scatter[src].push(gather.len());
                gather.push(src);
            }
        }
    }
    let scatter = scatter
        .into_iter()
        .map(|rows| {
            let w = 1.0 / rows.len() as f64;
            rows.into_iter().map(|j| (j, w)).collect()
        })
        .collect();
    (RowPlan::gather(gather), RowPlan { rows: scatter })
}

fn enhance_var(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    p: &InnerParams,
    x: Var,
    frames: usize,
    o: usize,
    mode: Fragmenting,
) -> Result<Var> {
    let rows = g.shape(x)[0];
    if o == 0 || frames % o != 0 || rows % frames != 0 {
        return invalid(format!("scale {o} does not divide {frames} frames"));
    }
    let enhanced = match mode {
        Fragmenting::NonOverlapping => inner_var(g, binder, prefix, p, x, o)?,
        Fragmenting::Sliding => {
            let (gather, scatter) = sliding_plans(rows / frames, frames, o);
            let windows = g.row_combine(x, Arc::new(gather))?;
            let out = inner_var(g, binder, prefix, p, windows, o)?;
            g.row_combine(out, Arc::new(scatter))?
        }
    };
    g.add(enhanced, x)
}

/// Outer module: shared-parameter bidirectional scan over whole samples.
fn outer_var(
    g: &mut Graph,
    outer: &crate::ssm::SsmVars,
    fuse: (Var, Var),
    x: Var,
    frames: usize,
) -> Result<Var> {
    let (y_fw, y_bw) = bidirectional_var(g, outer, outer, x, frames)?;
    let cat = g.concat(&[y_fw, y_bw], 1)?;
    g.linear(cat, fuse.0, fuse.1)
}

struct ConvVars {
    k1: Var,
    k2: Var,
    k3: Var,
    gamma: Var,
    beta: Var,
}

fn bind_conv(g: &mut Graph, binder: &mut Binder, prefix: &str, c: &ConvBlock) -> ConvVars {
    ConvVars {
        k1: binder.bind(g, join(prefix, "k1"), &c.k1),
        k2: binder.bind(g, join(prefix, "k2"), &c.k2),
        k3: binder.bind(g, join(prefix, "k3"), &c.k3),
        gamma: binder.bind(g, join(prefix, "gamma"), &c.gamma),
        beta: binder.bind(g, join(prefix, "beta"), &c.beta),
    }
}

fn conv_var(g: &mut Graph, cv: &ConvVars, x: Var, frames: usize, fixed: Option<(f64, f64)>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let img = g.reshape(x, &[1, s[0], s[1]])?;
    let h = g.conv2d(img, cv.k1, frames)?;
    let h = g.silu(h);
    let h = g.conv2d(h, cv.k2, frames)?;
    let h = g.silu(h);
    let h = g.conv2d(h, cv.k3, frames)?;
    let h = g.reshape(h, &s)?;
    g.batch_norm(h, cv.gamma, cv.beta, BN_EPS, fixed)
}

/// Full block over `x: [batch * frames, width]`.
pub fn forward(
    g: &mut Graph,
    binder: &mut Binder,
    params: &MatryoshkaParams,
    scales: &ScaleSet,
    x: Var,
    frames: usize,
    opts: BlockOptions,
) -> Result<BlockOutput> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[1] != params.width() || s[0] % frames != 0 {
        return shape_err("matryoshka", &s, &[frames, params.width()]);
    }
    if scales.scales().iter().any(|&o| o >= frames || frames % o != 0) {
        return invalid(format!("scale set {:?} is invalid for {frames} frames", scales.scales()));
    }
    let outer = (!opts.disable_outer).then(|| {
        let vars = params.outer.bind(g, binder, "outer");
        let w = binder.bind(g, "outer_fuse.weight".into(), &params.outer_fuse.weight);
        let b = binder.bind(g, "outer_fuse.bias".into(), &params.outer_fuse.bias);
        (vars, (w, b))
    });
    let cv = bind_conv(g, binder, "conv", &params.conv);
    let fixed = (!opts.batch_stats).then_some((params.conv.running_mean, params.conv.running_var));

    let mut out = BlockOutput {
        output: x,
        per_scale: Vec::new(),
        enhanced: Vec::new(),
        gates: Vec::new(),
        norms: Vec::new(),
    };
    for &o in scales.scales() {
        let enhanced = if opts.disable_inner {
            x
        } else {
            let p = params.inner_for(o)?;
            enhance_var(g, binder, &format!("inner{o}"), p, x, frames, o, opts.fragmenting)?
        };
        let om = match &outer {
            Some((vars, fuse)) => outer_var(g, vars, *fuse, enhanced, frames)?,
            None => enhanced,
        };
        let cb = conv_var(g, &cv, enhanced, frames, fixed)?;
        let pre = g.add(cb, x)?;
        let gate = g.sigmoid(pre);
        let weighted = g.mul(gate, om)?;
        out.per_scale.push(weighted);
        out.enhanced.push(enhanced);
        out.gates.push(gate);
        out.norms.push(cb);
    }
    let mut acc = out.per_scale[0];
    for &v in &out.per_scale[1..] {
        acc = g.add(acc, v)?;
    }
    out.output = g.scale(acc, 1.0 / scales.len() as f64);
    Ok(out)
}

// ---- tensor-level entry points (inference statistics) ---------------------

fn frozen_graph() -> (Graph, Binder) {
    (Graph::new(), Binder::frozen())
}

/// Inner module on one fragment of exactly `o` rows.
pub fn inner_module(fragment: &Tensor, o: usize, p: &InnerParams) -> Result<Tensor> {
    if fragment.rows() != o {
        return invalid(format!("fragment has {} rows, expected {o}", fragment.rows()));
    }
    let (mut g, mut b) = frozen_graph();
    let x = g.constant(fragment);
    let y = inner_var(&mut g, &mut b, "inner", p, x, o)?;
    Ok(g.tensor(y))
}

pub fn fragment_and_enhance(x: &Tensor, o: usize, p: &InnerParams, mode: Fragmenting) -> Result<Tensor> {
    if o == 0 || o >= x.rows() || x.rows() % o != 0 {
        return invalid(format!("scale {o} must divide and be smaller than {} frames", x.rows()));
    }
    let (mut g, mut b) = frozen_graph();
    let xv = g.constant(x);
    let y = enhance_var(&mut g, &mut b, "inner", p, xv, x.rows(), o, mode)?;
    Ok(g.tensor(y))
}

/// Conv block on one `frames x width` map using running statistics.
pub fn conv_block(x: &Tensor, c: &ConvBlock) -> Result<Tensor> {
    let (mut g, mut b) = frozen_graph();
    let xv = g.constant(x);
    let cv = bind_conv(&mut g, &mut b, "conv", c);
    let y = conv_var(&mut g, &cv, xv, x.rows(), Some((c.running_mean, c.running_var)))?;
    Ok(g.tensor(y))
}

/// `sigmoid(conv_block(enhanced) + raw)`.
pub fn scale_weight(enhanced: &Tensor, raw: &Tensor, c: &ConvBlock) -> Result<Tensor> {
    if enhanced.shape() != raw.shape() {
        return shape_err("scale_weight", enhanced.shape(), raw.shape());
    }
    let cb = conv_block(enhanced, c)?;
    let (mut g, _) = frozen_graph();
    let a = g.constant(&cb);
    let r = g.constant(raw);
    let s = g.add(a, r)?;
    let w = g.sigmoid(s);
    Ok(g.tensor(w))
}

/// One sample `[frames, width]` through the block with running statistics.
pub fn matryoshka_forward(x: &Tensor, scales: &ScaleSet, p: &MatryoshkaParams) -> Result<Tensor> {
    let (mut g, mut b) = frozen_graph();
    let xv = g.constant(x);
    let out = forward(&mut g, &mut b, p, scales, xv, x.rows(), BlockOptions::default())?;
    Ok(g.tensor(out.output))
}
