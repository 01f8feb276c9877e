//! Full episode model: Matryoshka block and prototype head on one branch,
//! projection head and hybrid contrastive loss on the other.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::contrastive::{embed_var, hybrid_loss_var, ContrastiveConfig, Origin, DEFAULT_EMBED_DIM};
use crate::error::{invalid, Result};
use crate::head::{argmin, classification_loss_var, distances_var, prototype_var, Oriented};
use crate::matryoshka::{self, BlockOptions, MatryoshkaParams, ScaleSet, DEFAULT_CONV_CHANNELS};
use crate::params::{join, Binder, Linear, Parameterized};
use crate::ssm::DEFAULT_N_STATE;
use crate::taskgen::EpisodeBatch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub width: usize,
    pub n_state: usize,
    pub conv_channels: usize,
    pub embed_dim: usize,
    pub selective: bool,
}

impl ModelDims {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            n_state: DEFAULT_N_STATE,
            conv_channels: DEFAULT_CONV_CHANNELS,
            embed_dim: DEFAULT_EMBED_DIM,
            selective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MantaParams {
    pub block: MatryoshkaParams,
    pub proj: Linear,
}

impl MantaParams {
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, scales: &ScaleSet, rng: &mut R) -> Self {
        Self {
            block: MatryoshkaParams::init(dims.width, dims.n_state, scales, dims.conv_channels, dims.selective, rng),
            proj: Linear::init(dims.width, dims.embed_dim, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.block.width()
    }

    /// One-line-per-group summary of `(name, shape)`.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t.shape().to_vec())));
        out
    }

    /// `p -= lr * grad` for every named gradient.
    pub fn sgd_step(&mut self, grads: &[(String, Vec<f64>)], lr: f64) {
        self.visit_mut("", &mut |name, t| {
            for (n, g) in grads {
                if *n == name {
                    for (p, g) in t.data_mut().iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
        });
    }
}

impl Parameterized for MantaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.block.visit(prefix, f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.block.visit_mut(prefix, f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Sums gradients of parameters bound more than once, keeping first-bind
/// order.
pub fn merge_gradients(grads: Vec<(String, Vec<f64>)>) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, g) in grads {
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => out.push((name, g)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    pub block: BlockOptions,
    pub contrastive: ContrastiveConfig,
    pub lambda: f64,
    /// Leave out the contrastive branch entirely.
    pub disable_hc: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            block: BlockOptions::default(),
            contrastive: ContrastiveConfig::default(),
            lambda: 4.0,
            disable_hc: false,
        }
    }
}

/// Graph handles of one episode's forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeGraph {
    pub loss_ce: Var,
    pub loss_hc: Option<Var>,
    pub total: Var,
    /// `[n_way]` distances per query.
    pub distances: Vec<Var>,
    /// Per scale, per sample (supports then queries) weighted outputs.
    pub per_scale: Vec<Vec<Var>>,
    pub norms: Vec<Var>,
}

impl EpisodeGraph {
    pub fn predictions(&self, g: &Graph) -> Vec<usize> {
        self.distances
            .iter()
            .map(|&d| argmin(g.value(d)).expect("non-empty distances"))
            .collect()
    }
}

pub fn stack_samples(batch: &EpisodeBatch) -> Result<Tensor> {
    let (f, d) = (batch.spec.frames, batch.spec.feat_dim);
    let mut data = Vec::with_capacity(batch.sample_count() * f * d);
    for t in batch.support.iter().chain(&batch.query) {
        if t.shape() != [f, d] {
            return invalid(format!("sample shape {:?} does not match [{f}, {d}]", t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[batch.sample_count() * f, d], data)
}

/// Builds the episode loss. `with_hc` adds the contrastive branch (training
/// and gradient checks); evaluation leaves it out.
pub fn episode_graph(
    g: &mut Graph,
    binder: &mut Binder,
    params: &MantaParams,
    scales: &ScaleSet,
    batch: &EpisodeBatch,
    opts: &ModelOptions,
    with_hc: bool,
) -> Result<EpisodeGraph> {
    let spec = &batch.spec;
    let f = spec.frames;
    if params.width() != spec.feat_dim {
        return invalid(format!(
            "model width {} does not match feature dim {}",
            params.width(),
            spec.feat_dim
        ));
    }
    let x = g.constant(&stack_samples(batch)?);
    let out = matryoshka::forward(g, binder, &params.block, scales, x, f, opts.block)?;
    let n_s = batch.support.len();
    let n_total = batch.sample_count();
    let feats = (0..n_total)
        .map(|i| g.slice(out.output, 0, i * f, f))
        .collect::<Result<Vec<_>>>()?;

    let mut protos = Vec::with_capacity(spec.n_way);
    for c in 0..spec.n_way {
        let members: Vec<Var> = (0..n_s).filter(|&i| batch.support_labels[i] == c).map(|i| feats[i]).collect();
        let p = prototype_var(g, &members)?;
        protos.push(Oriented::new(g, p)?);
    }
    let mut distances = Vec::with_capacity(batch.query.len());
    let mut losses = Vec::with_capacity(batch.query.len());
    for (j, &label) in batch.query_labels.iter().enumerate() {
        let q = Oriented::new(g, feats[n_s + j])?;
        let d = distances_var(g, &protos, q)?;
        losses.push(classification_loss_var(g, d, label)?);
        distances.push(d);
    }
    let cat = g.concat(&losses, 0)?;
    let loss_ce = g.mean(cat, 0)?;

    let loss_hc = if with_hc && !opts.disable_hc {
        let mut emb = Vec::with_capacity(n_total);
        for i in 0..n_total {
            let raw = g.slice(x, 0, i * f, f)?;
            emb.push(embed_var(g, binder, &params.proj, raw)?);
        }
        let groups: Vec<usize> = batch.support_labels.iter().chain(&batch.query_labels).copied().collect();
        let origins: Vec<Origin> = (0..n_total).map(|i| if i < n_s { Origin::Support } else { Origin::Query }).collect();
        hybrid_loss_var(g, &emb, &groups, &origins, &opts.contrastive)?.total
    } else {
        None
    };
    let weighted = g.scale(loss_ce, opts.lambda);
    let total = match loss_hc {
        Some(hc) => g.add(weighted, hc)?,
        None => weighted,
    };

    let mut per_scale = Vec::with_capacity(out.per_scale.len());
    for &s in &out.per_scale {
        per_scale.push((0..n_total).map(|i| g.slice(s, 0, i * f, f)).collect::<Result<Vec<_>>>()?);
    }
    Ok(EpisodeGraph {
        loss_ce,
        loss_hc,
        total,
        distances,
        per_scale,
        norms: out.norms,
    })
}
