//! Training loop, evaluation and the alignment probe.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::dtw::dtw_score;
use crate::error::{invalid, MantaError, Result};
use crate::exec::Exec;
use crate::head::build_prototype;
use crate::matryoshka::ScaleSet;
use crate::model::{episode_graph, merge_gradients, EpisodeGraph, MantaParams, ModelOptions};
use crate::params::Binder;
use crate::taskgen::{apply_perturbations, gen_episode, EpisodeBatch, EpisodeSpec};

/// Stream tags xor-ed into the run seed so training, evaluation and probe
/// episodes never coincide.
pub const EVAL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
pub const PROBE_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;
/// Episodes in the periodic validation pass and in the DTW probe set.
pub const VALIDATION_EPISODES: usize = 100;
pub const PROBE_EPISODES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub episode: usize,
    pub seed: u64,
    pub loss_ce: f64,
    pub loss_hc: f64,
    pub loss_total: f64,
    pub accuracy: f64,
    /// Mean query-to-true-prototype DTW score per scale on this episode.
    pub dtw: Vec<f64>,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_accuracy: Option<f64>,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }

    /// The record without its wall-clock field, for reproducibility checks.
    pub fn timeless(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Probe DTW per scale at one point of training.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwPoint {
    pub episode: usize,
    pub per_scale: Vec<f64>,
}

impl DtwPoint {
    pub fn mean(&self) -> f64 {
        self.per_scale.iter().sum::<f64>() / self.per_scale.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MantaParams,
    pub records: Vec<MetricRecord>,
    pub probe_dtw: Vec<DtwPoint>,
}

/// Episode `index` of the stream tagged `stream` (0 for training).
pub fn stream_episode(cfg: &RunConfig, stream: u64, index: usize) -> Result<EpisodeBatch> {
    let seed = EpisodeSpec::episode_seed(cfg.seed ^ stream, index as u64);
    let spec = cfg.episode_spec(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = gen_episode(&spec, &mut rng)?;
    apply_perturbations(&mut batch, &cfg.noise(), &mut rng)?;
    Ok(batch)
}

pub fn init_params(cfg: &RunConfig) -> Result<MantaParams> {
    let scales = cfg.scale_set()?;
    Ok(MantaParams::init(&cfg.dims(), &scales, &mut ChaCha8Rng::seed_from_u64(cfg.seed)))
}

/// Rejects parameters whose groups or shapes differ from what `cfg` builds.
pub fn check_dims(params: &MantaParams, cfg: &RunConfig) -> Result<()> {
    let want = init_params(cfg)?.shapes();
    let have = params.shapes();
    if want.len() != have.len() {
        return invalid(format!(
            "checkpoint has {} parameter groups, config expects {}",
            have.len(),
            want.len()
        ));
    }
    for ((wn, ws), (hn, hs)) in want.iter().zip(&have) {
        if wn != hn || ws != hs {
            return invalid(format!("checkpoint {hn} has shape {hs:?}, config expects {wn} with shape {ws:?}"));
        }
    }
    Ok(())
}

fn training_options(cfg: &RunConfig) -> ModelOptions {
    let mut o = cfg.model_options();
    o.block.batch_stats = true;
    o
}

/// Mean DTW per scale between each query's per-scale output and the
/// per-scale prototype of its true class.
fn episode_dtw(g: &Graph, eg: &EpisodeGraph, batch: &EpisodeBatch) -> Result<Vec<f64>> {
    let n_s = batch.support.len();
    eg.per_scale
        .iter()
        .map(|samples| {
            let protos = (0..batch.spec.n_way)
                .map(|c| {
                    let members: Vec<_> = (0..n_s)
                        .filter(|&i| batch.support_labels[i] == c)
                        .map(|i| g.tensor(samples[i]))
                        .collect();
                    build_prototype(&members)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = 0.0;
            for (j, &label) in batch.query_labels.iter().enumerate() {
                total += dtw_score(&g.tensor(samples[n_s + j]), &protos[label])?;
            }
            Ok(total / batch.query_labels.len() as f64)
        })
        .collect()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Mean per-scale DTW over the fixed probe set, with inference statistics.
pub fn probe_dtw(params: &MantaParams, cfg: &RunConfig, scales: &ScaleSet, exec: Exec) -> Result<Vec<f64>> {
    let opts = cfg.model_options();
    let per_episode = exec.map_range(PROBE_EPISODES, |i| -> Result<Vec<f64>> {
        let batch = stream_episode(cfg, PROBE_STREAM, i)?;
        let mut g = Graph::new();
        let eg = episode_graph(&mut g, &mut Binder::frozen(), params, scales, &batch, &opts, false)?;
        episode_dtw(&g, &eg, &batch)
    });
    let mut sums = vec![0.0; scales.len()];
    for r in per_episode {
        for (s, v) in sums.iter_mut().zip(r?) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / PROBE_EPISODES as f64).collect())
}

/// One SGD step on one episode. Returns the record without timing.
pub fn train_step(params: &mut MantaParams, cfg: &RunConfig, scales: &ScaleSet, index: usize) -> Result<MetricRecord> {
    let seed = EpisodeSpec::episode_seed(cfg.seed, index as u64);
    let batch = stream_episode(cfg, 0, index)?;
    let opts = training_options(cfg);
    let mut g = Graph::new();
    let mut binder = Binder::trainable();
    let eg = episode_graph(&mut g, &mut binder, params, scales, &batch, &opts, true)?;
    let loss_total = g.scalar(eg.total);
    if !loss_total.is_finite() {
        return Err(MantaError::Diverged { episode: index, seed });
    }
    g.backward(eg.total)?;
    let grads = merge_gradients(binder.gradients(&g));
    if grads.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(MantaError::Diverged { episode: index, seed });
    }
    params.sgd_step(&grads, cfg.lr);
    let stats: Vec<_> = eg.norms.iter().filter_map(|&n| g.batch_stats(n)).collect();
    params.block.conv.update_running(&stats);

    Ok(MetricRecord {
        episode: index,
        seed,
        loss_ce: g.scalar(eg.loss_ce),
        loss_hc: eg.loss_hc.map_or(0.0, |v| g.scalar(v)),
        loss_total,
        accuracy: accuracy(&eg.predictions(&g), &batch.query_labels),
        dtw: episode_dtw(&g, &eg, &batch)?,
        wall_ms: 0.0,
        eval_accuracy: None,
    })
}

/// Trains from the configured initialization. `sink` sees every record as
/// it is produced.
pub fn train(cfg: &RunConfig, exec: Exec, sink: &mut dyn FnMut(&MetricRecord) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(init_params(cfg)?, cfg, exec, sink)
}

/// Trains starting from `params` instead of the configured initialization.
pub fn train_from(
    mut params: MantaParams,
    cfg: &RunConfig,
    exec: Exec,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(&params, cfg)?;
    let scales = cfg.scale_set()?;
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut probe = vec![DtwPoint {
        episode: 0,
        per_scale: probe_dtw(&params, cfg, &scales, exec)?,
    }];
    for i in 0..cfg.episodes {
        let start = Instant::now();
        let mut rec = train_step(&mut params, cfg, &scales, i)?;
        let done = i + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            rec.eval_accuracy = Some(evaluate(&params, cfg, VALIDATION_EPISODES, exec)?.mean);
            if done < cfg.episodes {
                probe.push(DtwPoint {
                    episode: done,
                    per_scale: probe_dtw(&params, cfg, &scales, exec)?,
                });
            }
        }
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        sink(&rec)?;
        records.push(rec);
    }
    if cfg.episodes > 0 {
        probe.push(DtwPoint {
            episode: cfg.episodes,
            per_scale: probe_dtw(&params, cfg, &scales, exec)?,
        });
    }
    Ok(TrainOutcome {
        params,
        records,
        probe_dtw: probe,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// Half-width of the normal 95% interval over episode accuracies.
    pub ci95: f64,
    pub episode_accuracy: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut s = String::from("truth");
        for c in 0..n {
            s.push_str(&format!(",pred_{c}"));
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            s.push_str(&t.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Classifies `episodes` evaluation episodes with frozen parameters and
/// inference statistics.
pub fn evaluate(params: &MantaParams, cfg: &RunConfig, episodes: usize, exec: Exec) -> Result<EvalReport> {
    cfg.validate()?;
    check_dims(params, cfg)?;
    if episodes == 0 {
        return invalid("evaluation needs at least one episode");
    }
    let scales = cfg.scale_set()?;
    let opts = cfg.model_options();
    let results = exec.map_range(episodes, |i| -> Result<(Vec<usize>, Vec<usize>)> {
        let batch = stream_episode(cfg, EVAL_STREAM, i)?;
        let mut g = Graph::new();
        let eg = episode_graph(&mut g, &mut Binder::frozen(), params, &scales, &batch, &opts, false)?;
        Ok((eg.predictions(&g), batch.query_labels))
    });
    let n = cfg.n_way;
    let mut confusion = vec![vec![0; n]; n];
    let mut episode_accuracy = Vec::with_capacity(episodes);
    for r in results {
        let (pred, truth) = r?;
        for (&p, &t) in pred.iter().zip(&truth) {
            confusion[t][p] += 1;
        }
        episode_accuracy.push(accuracy(&pred, &truth));
    }
    let m = episodes as f64;
    let mean = episode_accuracy.iter().sum::<f64>() / m;
    let var = if episodes > 1 {
        episode_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(EvalReport {
        mean,
        ci95: 1.96 * var.sqrt() / m.sqrt(),
        episode_accuracy,
        confusion,
    })
}

pub fn dtw_csv(points: &[DtwPoint], scales: &ScaleSet) -> String {
    let mut s = String::from("episode,scale,dtw\n");
    for p in points {
        for (o, v) in scales.scales().iter().zip(&p.per_scale) {
            s.push_str(&format!("{},{o},{v}\n", p.episode));
        }
    }
    s
}
