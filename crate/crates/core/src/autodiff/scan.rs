//! Fused diagonal state-space recurrence.
//!
//! Per channel `w` and state `n`:
//!
//! ```text
//! h[n,w] <- exp(delta[w] * A[n]) * h[n,w] + delta[w] * B[n,w] * x[t,w]
//! y[t,w]  = sum_n C[w,n] * h[n,w] + skip[w] * x[t,w]
//! ```
//!
//! with `A = -exp(a_log)`. In selective mode `delta`, `B` and `C` vary per
//! step (`delta: L x W`, `B: L x N`, `C: L x N`). The time axis is split into
//! independent segments of `segment` steps; the state resets to zero at the
//! start of each one, and `reverse` walks every segment back to front.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanConfig {
    pub segment: usize,
    pub reverse: bool,
    pub selective: bool,
}

impl ScanConfig {
    pub fn full(len: usize) -> Self {
        Self {
            segment: len,
            reverse: false,
            selective: false,
        }
    }
}

pub(crate) struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub a_log: &'a [f64],
    pub delta: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub skip: &'a [f64],
    pub len: usize,
    pub width: usize,
    pub n_state: usize,
    pub cfg: ScanConfig,
}

impl ScanInputs<'_> {
    #[inline]
    fn time(&self, seg_start: usize, k: usize) -> usize {
        if self.cfg.reverse {
            seg_start + self.cfg.segment - 1 - k
        } else {
            seg_start + k
        }
    }

    #[inline]
    fn di(&self, t: usize, w: usize) -> usize {
        if self.cfg.selective {
            t * self.width + w
        } else {
            w
        }
    }

    #[inline]
    fn bi(&self, t: usize, n: usize, w: usize) -> usize {
        if self.cfg.selective {
            t * self.n_state + n
        } else {
            n * self.width + w
        }
    }

    #[inline]
    fn ci(&self, t: usize, n: usize, w: usize) -> usize {
        if self.cfg.selective {
            t * self.n_state + n
        } else {
            w * self.n_state + n
        }
    }

    fn transition(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }

    fn static_decay(&self, a: &[f64]) -> Option<Vec<f64>> {
        if self.cfg.selective {
            return None;
        }
        let w_ = self.width;
        let mut d = vec![0.0; self.n_state * w_];
        for (n, an) in a.iter().enumerate() {
            for w in 0..w_ {
                d[n * w_ + w] = (self.delta[w] * an).exp();
            }
        }
        Some(d)
    }
}

/// Returns `(y, states)`; `states[t]` is the hidden state right after step `t`.
pub(crate) fn scan_forward(s: &ScanInputs) -> (Vec<f64>, Vec<f64>) {
    let (l, wd, ns) = (s.len, s.width, s.n_state);
    let a = s.transition();
    let decay = s.static_decay(&a);
    let mut y = vec![0.0; l * wd];
    let mut states = vec![0.0; l * ns * wd];
    let mut h = vec![0.0; ns * wd];
    for s0 in (0..l).step_by(s.cfg.segment) {
        h.fill(0.0);
        for k in 0..s.cfg.segment {
            let t = s.time(s0, k);
            for w in 0..wd {
                let dt = s.delta[s.di(t, w)];
                let xv = s.x[t * wd + w];
                let mut acc = 0.0;
                for (n, an) in a.iter().enumerate() {
                    let idx = n * wd + w;
                    let dec = match &decay {
                        Some(d) => d[idx],
                        None => (dt * an).exp(),
                    };
                    let hv = dec * h[idx] + dt * s.b[s.bi(t, n, w)] * xv;
                    h[idx] = hv;
                    acc += s.c[s.ci(t, n, w)] * hv;
                }
                y[t * wd + w] = acc + s.skip[w] * xv;
            }
            states[t * ns * wd..(t + 1) * ns * wd].copy_from_slice(&h);
        }
    }
    (y, states)
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub a_log: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub skip: Vec<f64>,
}

pub(crate) fn scan_backward(s: &ScanInputs, states: &[f64], gy: &[f64]) -> ScanGrads {
    let (l, wd, ns) = (s.len, s.width, s.n_state);
    let a = s.transition();
    let decay = s.static_decay(&a);
    let mut g = ScanGrads {
        x: vec![0.0; s.x.len()],
        a_log: vec![0.0; ns],
        delta: vec![0.0; s.delta.len()],
        b: vec![0.0; s.b.len()],
        c: vec![0.0; s.c.len()],
        skip: vec![0.0; wd],
    };
    let mut da = vec![0.0; ns];
    let mut gh = vec![0.0; ns * wd];
    let block = ns * wd;
    for s0 in (0..l).step_by(s.cfg.segment) {
        gh.fill(0.0);
        for k in (0..s.cfg.segment).rev() {
            let t = s.time(s0, k);
            let prev = (k > 0).then(|| s.time(s0, k - 1));
            let h_cur = &states[t * block..(t + 1) * block];
            for w in 0..wd {
                let gyt = gy[t * wd + w];
                let xv = s.x[t * wd + w];
                let di = s.di(t, w);
                let dt = s.delta[di];
                g.skip[w] += gyt * xv;
                g.x[t * wd + w] += gyt * s.skip[w];
                for (n, an) in a.iter().enumerate() {
                    let idx = n * wd + w;
                    let ci = s.ci(t, n, w);
                    let bi = s.bi(t, n, w);
                    g.c[ci] += gyt * h_cur[idx];
                    gh[idx] += s.c[ci] * gyt;
                    let gcur = gh[idx];
                    let hp = prev.map_or(0.0, |p| states[p * block + idx]);
                    let dec = match &decay {
                        Some(d) => d[idx],
                        None => (dt * an).exp(),
                    };
                    let gdec = gcur * hp * dec;
                    let bv = s.b[bi];
                    g.delta[di] += gdec * an + gcur * bv * xv;
                    da[n] += gdec * dt;
                    g.b[bi] += gcur * dt * xv;
                    g.x[t * wd + w] += gcur * dt * bv;
                    gh[idx] = gcur * dec;
                }
            }
        }
    }
    for n in 0..ns {
        g.a_log[n] = da[n] * a[n];
    }
    g
}
