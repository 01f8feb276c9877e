//! Discretized diagonal state-space recurrence and its bidirectional wrapper.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h` are discretized with a
//! zero-order hold on the diagonal transition and an Euler step on the input
//! projection:
//!
//! ```text
//! a_bar = exp(delta * A)      b_bar = delta * B
//! h_t   = a_bar * h_{t-1} + b_bar * x_t
//! y_t   = C h_t + skip * x_t,         h_0 = 0
//! ```
//!
//! `A = -exp(a_log)` keeps every transition entry strictly inside `(0, 1)`.
//! Each channel owns an independent `n_state`-dimensional state.

use rand::Rng;

use crate::autodiff::{Graph, ScanConfig, Var};
use crate::error::{invalid, shape_err, MantaError, Result};
use crate::params::{join, Binder, Parameterized};
use crate::tensor::Tensor;

/// Default state size per channel.
pub const DEFAULT_N_STATE: usize = 16;

/// Input-dependent projections for the selective variant: per step
/// `delta_t = exp(x_t W_delta + delta_log)`, `B_t = x_t W_b`, `C_t = x_t W_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProj {
    pub w_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `[n_state]`, `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[n_state, width]`
    pub b_proj: Tensor,
    /// `[width, n_state]`
    pub c_proj: Tensor,
    /// `[width]`, `delta = exp(delta_log)`.
    pub delta_log: Tensor,
    /// `[width]`
    pub skip_gain: Tensor,
    pub selective: Option<SelectiveProj>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    /// `[len, width]`
    pub y: Tensor,
    /// `[n_state, width]`
    pub final_state: Tensor,
}

impl SsmParams {
    /// `A_n = -(n + 1)`, step sizes log-uniform in `[1e-3, 1e-1]`, B and C
    /// uniform in `[-1, 1]`, skip gain 1.
    pub fn init<R: Rng + ?Sized>(width: usize, n_state: usize, selective: bool, rng: &mut R) -> Self {
        let a_log = (0..n_state).map(|n| ((n + 1) as f64).ln()).collect();
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let delta_log = (0..width).map(|_| rng.gen_range(lo..hi)).collect();
        let selective = selective.then(|| {
            let wb = 1.0 / (width as f64).sqrt();
            SelectiveProj {
                w_delta: Tensor::uniform(&[width, width], 0.1 * wb, rng),
                w_b: Tensor::uniform(&[width, n_state], wb, rng),
                w_c: Tensor::uniform(&[width, n_state], wb, rng),
            }
        });
        Self {
            a_log: Tensor::new(&[n_state], a_log).unwrap(),
            b_proj: Tensor::uniform(&[n_state, width], 1.0, rng),
            c_proj: Tensor::uniform(&[width, n_state], 1.0, rng),
            delta_log: Tensor::new(&[width], delta_log).unwrap(),
            skip_gain: Tensor::full(&[width], 1.0),
            selective,
        }
    }

    pub fn width(&self) -> usize {
        self.delta_log.len()
    }

    pub fn n_state(&self) -> usize {
        self.a_log.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, w) = (self.n_state(), self.width());
        let checks: [(&str, &Tensor, Vec<usize>); 5] = [
            ("a_log", &self.a_log, vec![n]),
            ("b_proj", &self.b_proj, vec![n, w]),
            ("c_proj", &self.c_proj, vec![w, n]),
            ("delta_log", &self.delta_log, vec![w]),
            ("skip_gain", &self.skip_gain, vec![w]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want.as_slice() {
                return shape_err("ssm params", t.shape(), &want);
            }
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(MantaError::NonFinite {
                    what: name.into(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// `(a_bar, b_bar)`, both `[n_state, width]`.
    pub fn discretize(&self) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        let (n_state, width) = (self.n_state(), self.width());
        let mut a_bar = Tensor::zeros(&[n_state, width]);
        let mut b_bar = Tensor::zeros(&[n_state, width]);
        for n in 0..n_state {
            let a = -self.a_log.data()[n].exp();
            for w in 0..width {
                let dt = self.delta_log.data()[w].exp();
                a_bar.data_mut()[n * width + w] = (dt * a).exp();
                b_bar.data_mut()[n * width + w] = dt * self.b_proj.data()[n * width + w];
            }
        }
        Ok((a_bar, b_bar))
    }

    pub fn bind(&self, g: &mut Graph, binder: &mut Binder, prefix: &str) -> SsmVars {
        let mut b = |name: &str, t: &Tensor| binder.bind(g, join(prefix, name), t);
        let a_log = b("a_log", &self.a_log);
        let b_proj = b("b_proj", &self.b_proj);
        let c_proj = b("c_proj", &self.c_proj);
        let delta_log = b("delta_log", &self.delta_log);
        let skip_gain = b("skip_gain", &self.skip_gain);
        let selective = self.selective.as_ref().map(|s| {
            (
                b("w_delta", &s.w_delta),
                b("w_b", &s.w_b),
                b("w_c", &s.w_c),
            )
        });
        SsmVars {
            a_log,
            b_proj,
            c_proj,
            delta_log,
            skip_gain,
            selective,
        }
    }

    /// Exact sequential scan from a zero state.
    pub fn scan(&self, x: &Tensor) -> Result<ScanOutput> {
        self.validate()?;
        if x.shape().len() != 2 || x.cols() != self.width() {
            return shape_err("ssm_scan", x.shape(), &[x.rows(), self.width()]);
        }
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let vars = self.bind(&mut g, &mut binder, "");
        let xv = g.constant(x);
        let y = scan_var(&mut g, &vars, xv, x.rows(), false)?;
        let (n, w) = (self.n_state(), self.width());
        let states = g.scan_states(y).expect("scan node");
        let last = x.rows() - 1;
        let final_state = Tensor::new(&[n, w], states[last * n * w..].to_vec())?;
        Ok(ScanOutput {
            y: g.tensor(y),
            final_state,
        })
    }

    pub fn same_dims(&self, other: &SsmParams) -> bool {
        self.width() == other.width()
            && self.n_state() == other.n_state()
            && self.selective.is_some() == other.selective.is_some()
    }
}

impl Parameterized for SsmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "a_log"), &self.a_log);
        f(join(prefix, "b_proj"), &self.b_proj);
        f(join(prefix, "c_proj"), &self.c_proj);
        f(join(prefix, "delta_log"), &self.delta_log);
        f(join(prefix, "skip_gain"), &self.skip_gain);
        if let Some(s) = &self.selective {
            f(join(prefix, "w_delta"), &s.w_delta);
            f(join(prefix, "w_b"), &s.w_b);
            f(join(prefix, "w_c"), &s.w_c);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "a_log"), &mut self.a_log);
        f(join(prefix, "b_proj"), &mut self.b_proj);
        f(join(prefix, "c_proj"), &mut self.c_proj);
        f(join(prefix, "delta_log"), &mut self.delta_log);
        f(join(prefix, "skip_gain"), &mut self.skip_gain);
        if let Some(s) = &mut self.selective {
            f(join(prefix, "w_delta"), &mut s.w_delta);
            f(join(prefix, "w_b"), &mut s.w_b);
            f(join(prefix, "w_c"), &mut s.w_c);
        }
    }
}

/// Graph handles for one bound [`SsmParams`].
#[derive(Debug, Clone, Copy)]
pub struct SsmVars {
    pub a_log: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub delta_log: Var,
    pub skip_gain: Var,
    pub selective: Option<(Var, Var, Var)>,
}

/// Scans `x: [len, width]` in independent segments of `segment` rows,
/// optionally back to front within each segment.
pub fn scan_var(g: &mut Graph, p: &SsmVars, x: Var, segment: usize, reverse: bool) -> Result<Var> {
    let cfg = ScanConfig {
        segment,
        reverse,
        selective: p.selective.is_some(),
    };
    match p.selective {
        None => {
            let delta = g.exp(p.delta_log);
            g.scan(x, p.a_log, delta, p.b_proj, p.c_proj, p.skip_gain, cfg)
        }
        Some((w_delta, w_b, w_c)) => {
            let pre = g.linear(x, w_delta, p.delta_log)?;
            let delta = g.exp(pre);
            let b = g.matmul(x, w_b)?;
            let c = g.matmul(x, w_c)?;
            g.scan(x, p.a_log, delta, b, c, p.skip_gain, cfg)
        }
    }
}

/// `(y_fw, y_bw)` with `y_bw = reverse(scan(bwd, reverse(x)))` per segment.
/// Passing the same parameters twice gives the shared-parameter variant.
pub fn bidirectional_var(
    g: &mut Graph,
    fwd: &SsmVars,
    bwd: &SsmVars,
    x: Var,
    segment: usize,
) -> Result<(Var, Var)> {
    let y_fw = scan_var(g, fwd, x, segment, false)?;
    let y_bw = scan_var(g, bwd, x, segment, true)?;
    Ok((y_fw, y_bw))
}

pub fn bidirectional_scan(fwd: &SsmParams, bwd: &SsmParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if !fwd.same_dims(bwd) {
        return invalid(format!(
            "bidirectional scan: forward is {}x{} but backward is {}x{}",
            fwd.n_state(),
            fwd.width(),
            bwd.n_state(),
            bwd.width()
        ));
    }
    fwd.validate()?;
    bwd.validate()?;
    if x.shape().len() != 2 || x.cols() != fwd.width() {
        return shape_err("bidirectional_scan", x.shape(), &[x.rows(), fwd.width()]);
    }
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let fv = fwd.bind(&mut g, &mut binder, "fw");
    let bv = bwd.bind(&mut g, &mut binder, "bw");
    let xv = g.constant(x);
    let (a, b) = bidirectional_var(&mut g, &fv, &bv, xv, x.rows())?;
    Ok((g.tensor(a), g.tensor(b)))
}
