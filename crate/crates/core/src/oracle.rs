//! Direct loop implementations used only as test oracles. Nothing here
//! touches the graph.

use crate::params::Linear;
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.concat()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn reverse(m: &Mat) -> Mat {
    m.iter().rev().cloned().collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

/// Static-mode scan, one explicit state vector per channel.
pub fn scan(p: &SsmParams, x: &Mat) -> Mat {
    let (n, w) = (p.n_state(), p.width());
    let mut y = vec![vec![0.0; w]; x.len()];
    for ch in 0..w {
        let dt = p.delta_log.data()[ch].exp();
        let mut h = vec![0.0; n];
        for t in 0..x.len() {
            let xt = x[t][ch];
            let mut out = p.skip_gain.data()[ch] * xt;
            for k in 0..n {
                let a = -p.a_log.data()[k].exp();
                h[k] = (dt * a).exp() * h[k] + dt * p.b_proj.data()[k * w + ch] * xt;
                out += p.c_proj.data()[ch * n + k] * h[k];
            }
            y[t][ch] = out;
        }
    }
    y
}

pub fn linear(l: &Linear, x: &Mat) -> Mat {
    let (fi, fo) = (l.fan_in(), l.fan_out());
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|j| l.bias.data()[j] + (0..fi).map(|i| row[i] * l.weight.data()[i * fo + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn concat_cols(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| [x.as_slice(), y.as_slice()].concat()).collect()
}

/// 3x3 zero-padded cross-correlation, channels-first maps.
pub fn conv(input: &[Mat], kernel: &Tensor) -> Vec<Mat> {
    let (c_out, c_in) = (kernel.shape()[0], kernel.shape()[1]);
    let (h, w) = (input[0].len(), input[0][0].len());
    let k = kernel.data();
    (0..c_out)
        .map(|co| {
            let mut out = vec![vec![0.0; w]; h];
            for (r, row) in out.iter_mut().enumerate() {
                for (c, cell) in row.iter_mut().enumerate() {
                    for (ci, plane) in input.iter().enumerate().take(c_in) {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let rr = r as isize + di as isize - 1;
                                let cc = c as isize + dj as isize - 1;
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                *cell += k[((co * c_in + ci) * 3 + di) * 3 + dj] * plane[rr as usize][cc as usize];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}
