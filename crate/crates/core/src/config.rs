//! Run configuration as line-oriented `key = value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::contrastive::{ContrastiveConfig, HybridTerms};
use crate::error::{MantaError, Result};
use crate::matryoshka::{BlockOptions, Fragmenting, ScaleSet};
use crate::model::{ModelDims, ModelOptions};
use crate::taskgen::{EpisodeSpec, NoiseConfig};

pub const KEYS: [&str; 24] = [
    "n_way",
    "k_shot",
    "q_per_class",
    "frames",
    "feat_dim",
    "motif_len",
    "noise_std",
    "scales",
    "n_state",
    "tau",
    "lambda",
    "lr",
    "episodes",
    "eval_every",
    "seed",
    "frame_noise",
    "sample_noise_ratio",
    "gaussian_bg_std",
    "reverse_support",
    "disable_inner",
    "disable_outer",
    "disable_hc",
    "fragmenting",
    "selective",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub frames: usize,
    pub feat_dim: usize,
    pub motif_len: usize,
    pub noise_std: f64,
    pub scales: Vec<usize>,
    pub n_state: usize,
    pub tau: f64,
    pub lambda: f64,
    pub lr: f64,
    pub episodes: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub frame_noise: usize,
    pub sample_noise_ratio: f64,
    pub gaussian_bg_std: f64,
    pub reverse_support: bool,
    pub disable_inner: bool,
    pub disable_outer: bool,
    pub disable_hc: bool,
    pub fragmenting: Fragmenting,
    pub selective: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_per_class: 1,
            frames: 32,
            feat_dim: 16,
            motif_len: 6,
            noise_std: 0.8,
            scales: vec![1, 2, 4],
            n_state: 16,
            tau: 0.07,
            lambda: 4.0,
            lr: 1e-3,
            episodes: 3000,
            eval_every: 0,
            seed: 0,
            frame_noise: 0,
            sample_noise_ratio: 0.0,
            gaussian_bg_std: 0.0,
            reverse_support: false,
            disable_inner: false,
            disable_outer: false,
            disable_hc: false,
            fragmenting: Fragmenting::NonOverlapping,
            selective: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| MantaError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(MantaError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    /// Sets one key from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n_way" => self.n_way = parse(key, v)?,
            "k_shot" => self.k_shot = parse(key, v)?,
            "q_per_class" => self.q_per_class = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "motif_len" => self.motif_len = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "scales" => {
                self.scales = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "n_state" => self.n_state = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "frame_noise" => self.frame_noise = parse(key, v)?,
            "sample_noise_ratio" => self.sample_noise_ratio = parse(key, v)?,
            "gaussian_bg_std" => self.gaussian_bg_std = parse(key, v)?,
            "reverse_support" => self.reverse_support = parse_bool(key, v)?,
            "disable_inner" => self.disable_inner = parse_bool(key, v)?,
            "disable_outer" => self.disable_outer = parse_bool(key, v)?,
            "disable_hc" => self.disable_hc = parse_bool(key, v)?,
            "fragmenting" => self.fragmenting = v.parse().map_err(|e: MantaError| MantaError::Config(e.to_string()))?,
            "selective" => self.selective = parse_bool(key, v)?,
            _ => return Err(MantaError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MantaError::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                MantaError::Config(m) => MantaError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_way" => self.n_way.to_string(),
            "k_shot" => self.k_shot.to_string(),
            "q_per_class" => self.q_per_class.to_string(),
            "frames" => self.frames.to_string(),
            "feat_dim" => self.feat_dim.to_string(),
            "motif_len" => self.motif_len.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "scales" => self.scales.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "n_state" => self.n_state.to_string(),
            "tau" => self.tau.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "episodes" => self.episodes.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "seed" => self.seed.to_string(),
            "frame_noise" => self.frame_noise.to_string(),
            "sample_noise_ratio" => self.sample_noise_ratio.to_string(),
            "gaussian_bg_std" => self.gaussian_bg_std.to_string(),
            "reverse_support" => self.reverse_support.to_string(),
            "disable_inner" => self.disable_inner.to_string(),
            "disable_outer" => self.disable_outer.to_string(),
            "disable_hc" => self.disable_hc.to_string(),
            "fragmenting" => self.fragmenting.to_string(),
            "selective" => self.selective.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MantaError::Config(m));
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_state == 0 {
            return bad("n_state must be positive".into());
        }
        if self.frame_noise > self.frames {
            return bad(format!("frame_noise {} exceeds frames {}", self.frame_noise, self.frames));
        }
        if !(0.0..=1.0).contains(&self.sample_noise_ratio) {
            return bad(format!("sample_noise_ratio must lie in [0, 1], got {}", self.sample_noise_ratio));
        }
        if !(self.gaussian_bg_std >= 0.0) {
            return bad(format!("gaussian_bg_std must be >= 0, got {}", self.gaussian_bg_std));
        }
        self.episode_spec(0).validate().map_err(|e| MantaError::Config(e.to_string()))?;
        self.scale_set().map_err(|e| MantaError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn episode_spec(&self, seed: u64) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
            frames: self.frames,
            feat_dim: self.feat_dim,
            motif_len: self.motif_len,
            noise_std: self.noise_std,
            seed,
            ..EpisodeSpec::default()
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            frame_noise: self.frame_noise,
            sample_noise_ratio: self.sample_noise_ratio,
            gaussian_bg_std: self.gaussian_bg_std,
            reverse_support: self.reverse_support,
        }
    }

    pub fn scale_set(&self) -> Result<ScaleSet> {
        ScaleSet::new(self.scales.clone(), self.frames)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_state: self.n_state,
            selective: self.selective,
            ..ModelDims::new(self.feat_dim)
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            block: BlockOptions {
                disable_inner: self.disable_inner,
                disable_outer: self.disable_outer,
                fragmenting: self.fragmenting,
                batch_stats: false,
            },
            contrastive: ContrastiveConfig {
                tau: self.tau,
                terms: HybridTerms::default(),
                ..ContrastiveConfig::default()
            },
            lambda: self.lambda,
            disable_hc: self.disable_hc,
        }
    }
}
