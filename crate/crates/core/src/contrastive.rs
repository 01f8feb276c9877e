//! Hybrid contrastive objective.
//!
//! Every term is an InfoNCE average over anchors: same-group members are
//! positives, everything else in the set is a negative. The support term
//! groups by support label, the query term by episode class over the
//! queries, and the joint term over the union of both sets. Anchors without
//! any positive are skipped; a term with no usable anchor contributes zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::params::{Binder, Linear};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_EMBED_DIM: usize = 64;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridTerms {
    pub support: bool,
    pub query: bool,
    pub joint: bool,
}

impl Default for HybridTerms {
    fn default() -> Self {
        Self {
            support: true,
            query: true,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorPolicy {
    #[default]
    All,
    /// One anchor drawn uniformly (among anchors with positives) per term.
    SingleRandom(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub terms: HybridTerms,
    pub anchors: AnchorPolicy,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            terms: HybridTerms::default(),
            anchors: AnchorPolicy::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Support,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Tensor>,
    pub groups: Vec<usize>,
    pub origins: Vec<Origin>,
}

/// Temporal mean, projection, unit normalization.
pub fn embed_var(g: &mut Graph, binder: &mut Binder, proj: &Linear, features: Var) -> Result<Var> {
    let d = g.shape(features)[1];
    let m = g.mean(features, 0)?;
    let m = g.reshape(m, &[1, d])?;
    let z = proj.forward(g, binder, "proj", m)?;
    let z = g.reshape(z, &[proj.fan_out()])?;
    Ok(normalize(g, z))
}

fn normalize(g: &mut Graph, z: Var) -> Var {
    let n = g.frobenius(z);
    if g.scalar(n) > NORM_FLOOR {
        let inv = g.recip(n);
        g.mul(z, inv).expect("scalar broadcast")
    } else {
        z
    }
}

/// Symmetric matrix of cosine similarities (diagonal unused).
pub fn similarity_matrix(g: &mut Graph, emb: &[Var]) -> Result<Vec<Vec<Option<Var>>>> {
    let m = emb.len();
    let mut sims = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let s = g.cosine(emb[i], emb[j])?;
            sims[i][j] = Some(s);
            sims[j][i] = Some(s);
        }
    }
    Ok(sims)
}

/// Mean over positives of `-log(e^{s_p/t} / (e^{s_p/t} + sum_n e^{s_n/t}))`.
pub fn info_nce_from_sims(g: &mut Graph, pos: &[Var], neg: &[Var], tau: f64) -> Result<Var> {
    if pos.is_empty() {
        return invalid("info_nce needs at least one positive");
    }
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let neg_sum = if neg.is_empty() {
        None
    } else {
        let cat = g.concat(neg, 0)?;
        let scaled = g.scale(cat, 1.0 / tau);
        let e = g.exp(scaled);
        Some(g.sum(e))
    };
    let mut terms = Vec::with_capacity(pos.len());
    for &p in pos {
        let logit = g.scale(p, 1.0 / tau);
        let e = g.exp(logit);
        let denom = match neg_sum {
            Some(n) => g.add(e, n)?,
            None => e,
        };
        let lse = g.log(denom);
        terms.push(g.sub(lse, logit)?);
    }
    let cat = g.concat(&terms, 0)?;
    g.mean(cat, 0)
}

pub fn info_nce_var(g: &mut Graph, anchor: Var, positives: &[Var], negatives: &[Var], tau: f64) -> Result<Var> {
    let pos = positives.iter().map(|&p| g.cosine(anchor, p)).collect::<Result<Vec<_>>>()?;
    let neg = negatives.iter().map(|&n| g.cosine(anchor, n)).collect::<Result<Vec<_>>>()?;
    info_nce_from_sims(g, &pos, &neg, tau)
}

/// Grouped InfoNCE over `members` (indices into `sims`). `None` when no
/// anchor has a positive.
pub fn grouped_loss_var(
    g: &mut Graph,
    sims: &[Vec<Option<Var>>],
    members: &[usize],
    groups: &[usize],
    tau: f64,
    anchors: AnchorPolicy,
) -> Result<Option<Var>> {
    let mut eligible = Vec::new();
    for a in 0..members.len() {
        let has_pos = (0..members.len()).any(|b| b != a && groups[b] == groups[a]);
        if has_pos {
            eligible.push(a);
        }
    }
    if eligible.is_empty() {
        return Ok(None);
    }
    if let AnchorPolicy::SingleRandom(seed) = anchors {
        let pick = ChaCha8Rng::seed_from_u64(seed).gen_range(0..eligible.len());
        eligible = vec![eligible[pick]];
    }
    let mut per_anchor = Vec::with_capacity(eligible.len());
    for a in eligible {
        let i = members[a];
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (b, &j) in members.iter().enumerate() {
            if b == a {
                continue;
            }
            let s = sims[i][j].expect("off-diagonal similarity");
            if groups[b] == groups[a] {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        per_anchor.push(info_nce_from_sims(g, &pos, &neg, tau)?);
    }
    let cat = g.concat(&per_anchor, 0)?;
    Ok(Some(g.mean(cat, 0)?))
}

/// Graph handles of the three terms and their sum; skipped terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct HybridVars {
    pub support: Option<Var>,
    pub query: Option<Var>,
    pub joint: Option<Var>,
    pub total: Option<Var>,
}

/// `emb` holds supports first, then queries; `groups[i]` is the episode class.
pub fn hybrid_loss_var(
    g: &mut Graph,
    emb: &[Var],
    groups: &[usize],
    origins: &[Origin],
    cfg: &ContrastiveConfig,
) -> Result<HybridVars> {
    if emb.len() != groups.len() || emb.len() != origins.len() {
        return invalid("embedding, group and origin counts differ");
    }
    let sims = similarity_matrix(g, emb)?;
    let select = |want: Option<Origin>| -> (Vec<usize>, Vec<usize>) {
        (0..emb.len())
            .filter(|&i| want.map_or(true, |o| origins[i] == o))
            .map(|i| (i, groups[i]))
            .unzip()
    };
    // distinct seeds per term under the single-anchor policy
    let policy = |k: u64| match cfg.anchors {
        AnchorPolicy::All => AnchorPolicy::All,
        AnchorPolicy::SingleRandom(s) => AnchorPolicy::SingleRandom(s.wrapping_add(k)),
    };
    let term = |g: &mut Graph, on: bool, want: Option<Origin>, k: u64| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let (members, grp) = select(want);
        grouped_loss_var(g, &sims, &members, &grp, cfg.tau, policy(k))
    };
    let support = term(g, cfg.terms.support, Some(Origin::Support), 0)?;
    let query = term(g, cfg.terms.query, Some(Origin::Query), 1)?;
    let joint = term(g, cfg.terms.joint, None, 2)?;
    let mut total: Option<Var> = None;
    for v in [support, query, joint].into_iter().flatten() {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    Ok(HybridVars {
        support,
        query,
        joint,
        total,
    })
}

// ---- tensor-level entry points ---------------------------------------------

pub fn embed(features: &Tensor, proj: &Linear) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(features);
    let z = embed_var(&mut g, &mut Binder::frozen(), proj, x)?;
    Ok(g.tensor(z))
}

pub fn info_nce(anchor: &Tensor, positives: &[Tensor], negatives: &[Tensor], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(anchor);
    let p: Vec<Var> = positives.iter().map(|t| g.constant(t)).collect();
    let n: Vec<Var> = negatives.iter().map(|t| g.constant(t)).collect();
    let l = info_nce_var(&mut g, a, &p, &n, tau)?;
    Ok(g.scalar(l))
}

fn grouped(embeddings: &[Tensor], labels: &[usize], tau: f64) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return invalid("embedding and label counts differ");
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = embeddings.iter().map(|t| g.constant(t)).collect();
    let sims = similarity_matrix(&mut g, &vars)?;
    let members: Vec<usize> = (0..vars.len()).collect();
    let l = grouped_loss_var(&mut g, &sims, &members, labels, tau, AnchorPolicy::All)?;
    Ok(l.map_or(0.0, |v| g.scalar(v)))
}

pub fn support_contrastive(embeddings: &[Tensor], labels: &[usize], tau: f64) -> Result<f64> {
    grouped(embeddings, labels, tau)
}

pub fn query_contrastive(embeddings: &[Tensor], classes: &[usize], tau: f64) -> Result<f64> {
    grouped(embeddings, classes, tau)
}

pub fn joint_contrastive(embeddings: &[Tensor], classes: &[usize], tau: f64) -> Result<f64> {
    grouped(embeddings, classes, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridLoss {
    pub support: f64,
    pub query: f64,
    pub joint: f64,
    pub total: f64,
}

pub fn hybrid_loss(set: &EmbeddingSet, cfg: &ContrastiveConfig) -> Result<HybridLoss> {
    let mut g = Graph::new();
    let vars: Vec<Var> = set.vectors.iter().map(|t| g.constant(t)).collect();
    let h = hybrid_loss_var(&mut g, &vars, &set.groups, &set.origins, cfg)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
    Ok(HybridLoss {
        support: val(h.support),
        query: val(h.query),
        joint: val(h.joint),
        total: val(h.total),
    })
}
