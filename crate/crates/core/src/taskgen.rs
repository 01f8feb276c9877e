//! Synthetic N-way K-shot episodes with planted class motifs.
//!
//! Every class owns one random motif of `motif_len` frames. A sample is
//! Gaussian background noise with its class motif added at a random temporal
//! offset and a random amplitude, so samples of one class share a short local
//! pattern while the rest of the timeline is unrelated.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub mod fixture;

const MOTIF_MIN_DISTANCE: f64 = 0.5;
const MOTIF_REDRAWS: usize = 100;
/// Share of samples that receive the additive Gaussian background.
pub const GAUSSIAN_SHARE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub frames: usize,
    pub feat_dim: usize,
    pub motif_len: usize,
    pub noise_std: f64,
    /// Motif amplitude factor drawn uniformly from `[lo, hi]`.
    pub jitter: (f64, f64),
    pub seed: u64,
    /// Plant every motif at this offset instead of a random one.
    pub fixed_offset: Option<usize>,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_per_class: 1,
            frames: 32,
            feat_dim: 16,
            motif_len: 6,
            noise_std: 0.8,
            jitter: (0.8, 1.2),
            seed: 0,
            fixed_offset: None,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return invalid(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot < 1 || self.q_per_class < 1 {
            return invalid("k_shot and q_per_class must be at least 1");
        }
        if self.frames == 0 || self.frames % 2 != 0 {
            return invalid(format!("frames must be even and positive, got {}", self.frames));
        }
        if self.feat_dim == 0 {
            return invalid("feat_dim must be positive");
        }
        if self.motif_len < 1 || self.motif_len * 4 > self.frames {
            return invalid(format!(
                "motif_len must lie in [1, frames/4], got {} for {} frames",
                self.motif_len, self.frames
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return invalid(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        let (lo, hi) = self.jitter;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return invalid(format!("bad jitter range ({lo}, {hi})"));
        }
        if let Some(o) = self.fixed_offset {
            if o + self.motif_len > self.frames {
                return invalid(format!("fixed offset {o} leaves no room for the motif"));
            }
        }
        Ok(())
    }

    /// Seed of the `index`-th episode of a stream.
    pub fn episode_seed(base: u64, index: u64) -> u64 {
        base ^ index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    pub frame_noise: usize,
    pub sample_noise_ratio: f64,
    pub gaussian_bg_std: f64,
    pub reverse_support: bool,
}

impl NoiseConfig {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

/// What the perturbation stages did, sample by sample. Sample indices run
/// over supports first, then queries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseManifest {
    pub support_reversed: bool,
    pub gaussian: Vec<usize>,
    pub frame_noise: Vec<Vec<usize>>,
    /// (support index, class whose motif it now carries)
    pub swaps: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub spec: EpisodeSpec,
    /// `n_way * k_shot` samples of shape `[frames, feat_dim]`, class-major.
    pub support: Vec<Tensor>,
    /// `n_way * q_per_class` samples, class-major.
    pub query: Vec<Tensor>,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    /// Class whose motif each support actually carries.
    pub support_source: Vec<usize>,
    pub motifs: Vec<Tensor>,
    pub manifest: NoiseManifest,
}

impl EpisodeBatch {
    pub fn sample_count(&self) -> usize {
        self.support.len() + self.query.len()
    }

    fn sample_mut(&mut self, i: usize) -> &mut Tensor {
        let s = self.support.len();
        if i < s {
            &mut self.support[i]
        } else {
            &mut self.query[i - s]
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

fn cosine_distance(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    1.0 - dot / (a.frobenius() * b.frobenius()).max(1e-300)
}

/// Draws `n` motifs with pairwise cosine distance at least 0.5.
pub fn draw_motifs<R: Rng + ?Sized>(n: usize, len: usize, dim: usize, seed: u64, rng: &mut R) -> Result<Vec<Tensor>> {
    let unit = normal(1.0);
    let mut worst = f64::INFINITY;
    for _ in 0..MOTIF_REDRAWS {
        let motifs: Vec<Tensor> = (0..n)
            .map(|_| {
                let data = (0..len * dim).map(|_| unit.sample(rng)).collect();
                Tensor::new(&[len, dim], data).expect("positive extents")
            })
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                min = min.min(cosine_distance(&motifs[i], &motifs[j]));
            }
        }
        if min >= MOTIF_MIN_DISTANCE {
            return Ok(motifs);
        }
        worst = worst.min(min);
    }
    invalid(format!(
        "seed {seed}: no motif set with cosine distance >= {MOTIF_MIN_DISTANCE} after {MOTIF_REDRAWS} redraws (closest pair {worst:.4})"
    ))
}

/// One sample: background noise plus the motif at `offset` scaled by `amp`.
fn plant(spec: &EpisodeSpec, motif: &Tensor, offset: usize, amp: f64, noise: &Normal<f64>, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let d = spec.feat_dim;
    let mut data: Vec<f64> = if spec.noise_std > 0.0 {
        (0..spec.frames * d).map(|_| noise.sample(rng)).collect()
    } else {
        vec![0.0; spec.frames * d]
    };
    for (t, row) in data[offset * d..(offset + spec.motif_len) * d].chunks_mut(d).enumerate() {
        for (v, m) in row.iter_mut().zip(motif.row(t)) {
            *v += amp * m;
        }
    }
    Tensor::new(&[spec.frames, d], data).expect("positive extents")
}

fn draw_sample<R: Rng + ?Sized>(spec: &EpisodeSpec, motif: &Tensor, rng: &mut R) -> Tensor {
    let offset = match spec.fixed_offset {
        Some(o) => o,
        None => rng.gen_range(0..=spec.frames - spec.motif_len),
    };
    let (lo, hi) = spec.jitter;
    let amp = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    plant(spec, motif, offset, amp, &normal(spec.noise_std), rng)
}

pub fn gen_episode<R: Rng + ?Sized>(spec: &EpisodeSpec, rng: &mut R) -> Result<EpisodeBatch> {
    spec.validate()?;
    let motifs = draw_motifs(spec.n_way, spec.motif_len, spec.feat_dim, spec.seed, rng)?;
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut support_labels = Vec::with_capacity(spec.n_way * spec.k_shot);
    for (c, m) in motifs.iter().enumerate() {
        for _ in 0..spec.k_shot {
            support.push(draw_sample(spec, m, rng));
            support_labels.push(c);
        }
    }
    let mut query = Vec::with_capacity(spec.n_way * spec.q_per_class);
    let mut query_labels = Vec::with_capacity(spec.n_way * spec.q_per_class);
    for (c, m) in motifs.iter().enumerate() {
        for _ in 0..spec.q_per_class {
            query.push(draw_sample(spec, m, rng));
            query_labels.push(c);
        }
    }
    Ok(EpisodeBatch {
        spec: *spec,
        support_source: support_labels.clone(),
        support,
        query,
        support_labels,
        query_labels,
        motifs,
        manifest: NoiseManifest::default(),
    })
}

/// Replaces `count` distinct frames of every sample with pure noise frames.
pub fn inject_frame_noise<R: Rng + ?Sized>(batch: &mut EpisodeBatch, count: usize, rng: &mut R) -> Result<()> {
    let (f, d) = (batch.spec.frames, batch.spec.feat_dim);
    if count > f {
        return invalid(format!("frame noise count {count} exceeds {f} frames"));
    }
    if count == 0 {
        return Ok(());
    }
    let std = if batch.spec.noise_std > 0.0 { batch.spec.noise_std } else { 1.0 };
    let noise = normal(std);
    let mut record = Vec::with_capacity(batch.sample_count());
    for i in 0..batch.sample_count() {
        let mut frames = sample_indices(rng, f, count).into_vec();
        frames.sort_unstable();
        let s = batch.sample_mut(i).data_mut();
        for &t in &frames {
            for v in &mut s[t * d..(t + 1) * d] {
                *v = noise.sample(rng);
            }
        }
        record.push(frames);
    }
    batch.manifest.frame_noise = record;
    Ok(())
}

/// Swaps `floor(ratio * k_shot)` supports per class for samples of another
/// class, keeping the original label.
pub fn inject_sample_noise<R: Rng + ?Sized>(batch: &mut EpisodeBatch, ratio: f64, rng: &mut R) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return invalid(format!("sample noise ratio must lie in [0, 1], got {ratio}"));
    }
    let spec = batch.spec;
    let per_class = (ratio * spec.k_shot as f64).floor() as usize;
    if per_class == 0 {
        return Ok(());
    }
    for c in 0..spec.n_way {
        let mut picks = sample_indices(rng, spec.k_shot, per_class).into_vec();
        picks.sort_unstable();
        for k in picks {
            let other = (c + rng.gen_range(1..spec.n_way)) % spec.n_way;
            let idx = c * spec.k_shot + k;
            batch.support[idx] = draw_sample(&spec, &batch.motifs[other], rng);
            batch.support_source[idx] = other;
            batch.manifest.swaps.push((idx, other));
        }
    }
    Ok(())
}

/// Support reversal, Gaussian background on a quarter of the samples, frame
/// noise, then sample noise.
pub fn apply_perturbations<R: Rng + ?Sized>(batch: &mut EpisodeBatch, cfg: &NoiseConfig, rng: &mut R) -> Result<()> {
    if cfg.frame_noise > batch.spec.frames {
        return invalid(format!("frame noise count {} exceeds {} frames", cfg.frame_noise, batch.spec.frames));
    }
    if cfg.reverse_support {
        for s in &mut batch.support {
            *s = s.time_reversed();
        }
        batch.manifest.support_reversed = true;
    }
    if cfg.gaussian_bg_std > 0.0 {
        let total = batch.sample_count();
        let n = (GAUSSIAN_SHARE * total as f64).floor() as usize;
        let mut picks = sample_indices(rng, total, n).into_vec();
        picks.sort_unstable();
        let noise = normal(cfg.gaussian_bg_std);
        for &i in &picks {
            for v in batch.sample_mut(i).data_mut() {
                *v += noise.sample(rng);
            }
        }
        batch.manifest.gaussian = picks;
    }
    inject_frame_noise(batch, cfg.frame_noise, rng)?;
    inject_sample_noise(batch, cfg.sample_noise_ratio, rng)
}

#[cfg(test)]
mod tests;
