//! Whole-model gradient check, one report line per parameter group.

use crate::autodiff::{compare_gradients, Graph, PrimitiveKind};
use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::model::{episode_graph, merge_gradients, MantaParams};
use crate::params::{Binder, Parameterized};
use crate::taskgen::EpisodeBatch;
use crate::train::{init_params, stream_episode, PROBE_STREAM};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const MAX_FRAMES: usize = 8;
pub const MAX_FEAT_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GroupCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

fn total_loss(params: &MantaParams, cfg: &RunConfig, batch: &EpisodeBatch, g: &mut Graph, binder: &mut Binder) -> Result<crate::Var> {
    let mut opts = cfg.model_options();
    opts.block.batch_stats = true;
    let scales = cfg.scale_set()?;
    Ok(episode_graph(g, binder, params, &scales, batch, &opts, true)?.total)
}

/// Checks the training loss of one fixed episode against central
/// differences, group by group. `fault` corrupts one backward rule.
pub fn gradcheck_groups(cfg: &RunConfig, fault: Option<PrimitiveKind>, exec: Exec) -> Result<Vec<GroupCheck>> {
    cfg.validate()?;
    if cfg.frames > MAX_FRAMES || cfg.feat_dim > MAX_FEAT_DIM {
        return invalid(format!(
            "gradcheck needs frames <= {MAX_FRAMES} and feat_dim <= {MAX_FEAT_DIM}, got {} and {}",
            cfg.frames, cfg.feat_dim
        ));
    }
    let params = init_params(cfg)?;
    let batch = stream_episode(cfg, PROBE_STREAM, 0)?;

    let mut g = Graph::new();
    g.set_fault(fault);
    let mut binder = Binder::trainable();
    let loss = total_loss(&params, cfg, &batch, &mut g, &mut binder)?;
    g.backward(loss)?;
    let grads = merge_gradients(binder.gradients(&g));

    let mut report = Vec::new();
    for (name, point) in params.named_params() {
        let analytic = grads
            .iter()
            .find(|(n, _)| *n == name)
            .map_or_else(|| vec![0.0; point.len()], |(_, v)| v.clone());
        let f = |data: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.visit_mut("", &mut |n, t| {
                if n == name {
                    t.data_mut().copy_from_slice(data);
                }
            });
            let mut g = Graph::new();
            let l = total_loss(&p, cfg, &batch, &mut g, &mut Binder::frozen())?;
            Ok(g.scalar(l))
        };
        let c = compare_gradients(f, point.data(), &analytic, GRADCHECK_EPS, exec)?;
        report.push(GroupCheck {
            name,
            size: point.len(),
            max_rel_error: c.max_rel_error,
            worst_index: c.worst_index,
        });
    }
    Ok(report)
}
