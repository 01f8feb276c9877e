//! 3x3 same-padded cross-correlation over a vertical stack of images.
//!
//! Input is `[c_in, rows, cols]` where `rows` is a multiple of the image
//! height; padding never reads across an image boundary.

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
}

#[inline]
fn taps(d: &ConvDims, r: usize, c: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let top = (r / d.height) * d.height;
    let bottom = top + d.height;
    let cols = d.cols;
    (0..3usize).flat_map(move |di| {
        (0..3usize).filter_map(move |dj| {
            let rr = (r + di).checked_sub(1)?;
            let cc = (c + dj).checked_sub(1)?;
            (rr >= top && rr < bottom && cc < cols).then_some((di * 3 + dj, rr, cc))
        })
    })
}

pub(crate) fn conv_forward(d: &ConvDims, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane = d.rows * d.cols;
    let mut out = vec![0.0; d.c_out * plane];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let k = &kernel[(co * d.c_in + ci) * 9..(co * d.c_in + ci + 1) * 9];
            let src = &input[ci * plane..(ci + 1) * plane];
            let dst = &mut out[co * plane..(co + 1) * plane];
            for r in 0..d.rows {
                for c in 0..d.cols {
                    let mut acc = 0.0;
                    for (tap, rr, cc) in taps(d, r, c) {
                        acc += k[tap] * src[rr * d.cols + cc];
                    }
                    dst[r * d.cols + c] += acc;
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv_backward(
    d: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = d.rows * d.cols;
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for co in 0..d.c_out {
        let go = &g_out[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let kbase = (co * d.c_in + ci) * 9;
            let src = &input[ci * plane..(ci + 1) * plane];
            for r in 0..d.rows {
                for c in 0..d.cols {
                    let gv = go[r * d.cols + c];
                    if gv == 0.0 {
                        continue;
                    }
                    for (tap, rr, cc) in taps(d, r, c) {
                        gk[kbase + tap] += gv * src[rr * d.cols + cc];
                        gi[ci * plane + rr * d.cols + cc] += gv * kernel[kbase + tap];
                    }
                }
            }
        }
    }
    (gi, gk)
}
