//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass; a
//! [`Var`] is a handle to one recorded node. [`Graph::backward`] walks the
//! tape once in reverse and leaves `d loss / d leaf` on every leaf that was
//! created with `requires_grad`.
//!
//! Operands of `add`, `sub` and `mul` must have equal shapes, except that a
//! one-element operand broadcasts against any shape.

mod conv;
pub mod gradcheck;
mod scan;

use std::sync::Arc;

use crate::error::{invalid, shape_err, MantaError, Result};
use crate::tensor::Tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheck};
pub use scan::ScanConfig;

pub(crate) use conv::ConvDims;
pub(crate) use scan::{scan_forward, ScanInputs};

/// Denominator floor for the cosine-similarity primitive.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Concat,
    Slice,
    Reverse,
    Mean,
    Sum,
    Sigmoid,
    Silu,
    Exp,
    Log,
    Square,
    Sqrt,
    FrobeniusNorm,
    Cosine,
    Softmax,
    Scale,
    AddScalar,
    Recip,
    Reshape,
    RowCombine,
    Scan,
    Conv2d,
    BatchNorm,
}

impl PrimitiveKind {
    pub fn parse(s: &str) -> Option<Self> {
        use PrimitiveKind::*;
        Some(match s {
            "matmul" => MatMul,
            "add" => Add,
            "sub" => Sub,
            "mul" => Mul,
            "concat" => Concat,
            "slice" => Slice,
            "reverse" => Reverse,
            "mean" => Mean,
            "sum" => Sum,
            "sigmoid" => Sigmoid,
            "silu" => Silu,
            "exp" => Exp,
            "log" => Log,
            "square" => Square,
            "sqrt" => Sqrt,
            "frobenius" => FrobeniusNorm,
            "cosine" => Cosine,
            "softmax" => Softmax,
            "scale" => Scale,
            "add_scalar" => AddScalar,
            "recip" => Recip,
            "reshape" => Reshape,
            "row_combine" => RowCombine,
            "scan" => Scan,
            "conv2d" => Conv2d,
            "batch_norm" => BatchNorm,
            _ => return None,
        })
    }
}

/// Sparse row mixing: output row `i` is `sum_(j, w) in rows[i]` of `w * x[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPlan {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowPlan {
    pub fn gather(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            rows: indices.into_iter().map(|j| vec![(j, 1.0)]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reverse { axis: usize },
    Mean { axis: usize },
    Sum,
    Sigmoid,
    Silu,
    Exp,
    Log,
    Square,
    Sqrt,
    FrobeniusNorm,
    Cosine,
    Softmax { axis: usize },
    Scale(f64),
    AddScalar,
    Recip,
    Reshape,
    RowCombine(Arc<RowPlan>),
    Scan(ScanConfig),
    Conv2d { height: usize },
    BatchNorm { fixed: bool },
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        use PrimitiveKind as K;
        match self {
            Op::Leaf => K::Leaf,
            Op::MatMul => K::MatMul,
            Op::Add => K::Add,
            Op::Sub => K::Sub,
            Op::Mul => K::Mul,
            Op::Concat { .. } => K::Concat,
            Op::Slice { .. } => K::Slice,
            Op::Reverse { .. } => K::Reverse,
            Op::Mean { .. } => K::Mean,
            Op::Sum => K::Sum,
            Op::Sigmoid => K::Sigmoid,
            Op::Silu => K::Silu,
            Op::Exp => K::Exp,
            Op::Log => K::Log,
            Op::Square => K::Square,
            Op::Sqrt => K::Sqrt,
            Op::FrobeniusNorm => K::FrobeniusNorm,
            Op::Cosine => K::Cosine,
            Op::Softmax { .. } => K::Softmax,
            Op::Scale(_) => K::Scale,
            Op::AddScalar => K::AddScalar,
            Op::Recip => K::Recip,
            Op::Reshape => K::Reshape,
            Op::RowCombine(_) => K::RowCombine,
            Op::Scan(_) => K::Scan,
            Op::Conv2d { .. } => K::Conv2d,
            Op::BatchNorm { .. } => K::BatchNorm,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    parents: Vec<usize>,
    saved: Vec<f64>,
    requires_grad: bool,
}

/// Statistics observed by a batch-normalization node in training mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<PrimitiveKind>,
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every backward contribution of `kind` by 1.5. Only useful for
    /// checking that gradient verification catches a broken rule.
    pub fn with_fault(kind: PrimitiveKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn set_fault(&mut self, kind: Option<PrimitiveKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: Vec<usize>, saved: Vec<f64>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            parents,
            saved,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, vec![], vec![]);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].parents.iter().map(|&p| Var(p)).collect()
    }

    /// Batch statistics computed by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        let n = &self.nodes[v.0];
        match n.op {
            Op::BatchNorm { fixed: false, .. } => {
                let len = n.value.len();
                Some(BatchStats {
                    mean: n.saved[len + 1],
                    var: n.saved[len + 2],
                })
            }
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul, vec![a.0, b.0], vec![]))
    }

    fn binary(&mut self, name: &'static str, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out): (Vec<usize>, Vec<f64>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect())
        } else if vb.len() == 1 {
            (sa, va.iter().map(|x| f(*x, vb[0])).collect())
        } else if va.len() == 1 {
            (sb, vb.iter().map(|y| f(va[0], *y)).collect())
        } else {
            return shape_err(name, &sa, &sb);
        };
        Ok(self.push(shape, out, op, vec![a.0, b.0], vec![]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return invalid("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return invalid(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let chunk = ext * inner;
                out.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { axis }, xs.iter().map(|v| v.0).collect(), vec![]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return shape_err("slice", &s, &[axis, start, len]);
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&v[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Slice { axis, start }, vec![x.0], vec![]))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("reverse", &s, &[axis]);
        }
        let out = reverse_raw(self.value(x), &s, axis);
        Ok(self.push(s, out, Op::Reverse { axis }, vec![x.0], vec![]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("mean", &s, &[axis]);
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * ext + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= ext as f64);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(shape, out, Op::Mean { axis }, vec![x.0], vec![]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum, vec![x.0], vec![])
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, vec![x.0], vec![])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu, |v| v * sigmoid(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log, f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt, f64::sqrt)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar, |v| v + c)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip, f64::recip)
    }

    pub fn frobenius(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(vec![1], vec![n], Op::FrobeniusNorm, vec![x.0], vec![])
    }

    /// Cosine similarity of two equally sized tensors, read as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
            return shape_err("cosine", &sa, &sb);
        }
        let (dot, na, nb) = dot_norms(va, vb);
        let c = dot / (na * nb).max(COSINE_EPS);
        Ok(self.push(vec![1], vec![c], Op::Cosine, vec![a.0, b.0], vec![]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return shape_err("softmax", &s, &[axis]);
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * ext + a) * inner + i;
                let m = (0..ext).map(|a| v[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..ext).map(|a| (v[at(a)] - m).exp()).sum();
                for a in 0..ext {
                    out[at(a)] = (v[at(a)] - m).exp() / z;
                }
            }
        }
        Ok(self.push(s, out, Op::Softmax { axis }, vec![x.0], vec![]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if numel(shape) != numel(s) || shape.iter().any(|&e| e == 0) {
            let s = s.to_vec();
            return shape_err("reshape", &s, shape);
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape, vec![x.0], vec![]))
    }

    /// Mixes rows of a 2-D tensor according to `plan`.
    pub fn row_combine(&mut self, x: Var, plan: Arc<RowPlan>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("row_combine", &s, &[2]);
        }
        let (rows, cols) = (s[0], s[1]);
        if plan.rows.iter().flatten().any(|&(j, _)| j >= rows) {
            return invalid(format!("row_combine: plan references a row outside 0..{rows}"));
        }
        let v = self.value(x);
        let mut out = vec![0.0; plan.rows.len() * cols];
        for (i, entries) in plan.rows.iter().enumerate() {
            for &(j, w) in entries {
                for c in 0..cols {
                    out[i * cols + c] += w * v[j * cols + c];
                }
            }
        }
        let shape = vec![plan.rows.len(), cols];
        Ok(self.push(shape, out, Op::RowCombine(plan), vec![x.0], vec![]))
    }

    /// Fused diagonal state-space scan; see [`ScanConfig`] for the layout of
    /// `delta`, `b` and `c` in static and selective modes.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        x: Var,
        a_log: Var,
        delta: Var,
        b: Var,
        c: Var,
        skip: Var,
        cfg: ScanConfig,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return shape_err("scan", &sx, &[2]);
        }
        let (len, width) = (sx[0], sx[1]);
        let n_state = self.value(a_log).len();
        let expect = |g: &Graph, v: Var, want: &[usize]| -> Result<()> {
            if g.shape(v) != want {
                return shape_err("scan", g.shape(v), want);
            }
            Ok(())
        };
        expect(self, a_log, &[n_state])?;
        expect(self, skip, &[width])?;
        if cfg.selective {
            expect(self, delta, &[len, width])?;
            expect(self, b, &[len, n_state])?;
            expect(self, c, &[len, n_state])?;
        } else {
            expect(self, delta, &[width])?;
            expect(self, b, &[n_state, width])?;
            expect(self, c, &[width, n_state])?;
        }
        if cfg.segment == 0 || len % cfg.segment != 0 {
            return invalid(format!("scan: segment {} does not divide length {len}", cfg.segment));
        }
        let inputs = ScanInputs {
            x: self.value(x),
            a_log: self.value(a_log),
            delta: self.value(delta),
            b: self.value(b),
            c: self.value(c),
            skip: self.value(skip),
            len,
            width,
            n_state,
            cfg,
        };
        let (y, states) = scan_forward(&inputs);
        Ok(self.push(
            sx,
            y,
            Op::Scan(cfg),
            vec![x.0, a_log.0, delta.0, b.0, c.0, skip.0],
            states,
        ))
    }

    /// Hidden states recorded by a scan node, `[len, n_state, width]` row-major.
    pub fn scan_states(&self, v: Var) -> Option<&[f64]> {
        matches!(self.nodes[v.0].op, Op::Scan(_)).then(|| self.nodes[v.0].saved.as_slice())
    }

    /// 3x3 same-padded convolution of `[c_in, rows, cols]` with
    /// `[c_out, c_in, 3, 3]`; images of `height` rows are stacked vertically.
    pub fn conv2d(&mut self, x: Var, kernel: Var, height: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != 3 || sk[3] != 3 {
            return shape_err("conv2d", &sx, &sk);
        }
        if height == 0 || sx[1] % height != 0 {
            return invalid(format!("conv2d: image height {height} does not divide {} rows", sx[1]));
        }
        let dims = ConvDims {
            c_in: sx[0],
            c_out: sk[0],
            rows: sx[1],
            cols: sx[2],
            height,
        };
        let out = conv::conv_forward(&dims, self.value(x), self.value(kernel));
        let shape = vec![dims.c_out, dims.rows, dims.cols];
        Ok(self.push(shape, out, Op::Conv2d { height }, vec![x.0, kernel.0], vec![]))
    }

    /// Normalizes every entry of `x` with one mean/variance pair, then applies
    /// the scalar affine `gamma, beta`. With `fixed = Some((mean, var))` the
    /// given statistics are used instead of the batch's own.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, fixed: Option<(f64, f64)>) -> Result<Var> {
        for p in [gamma, beta] {
            if self.value(p).len() != 1 {
                let s = self.shape(p).to_vec();
                return shape_err("batch_norm", &s, &[1]);
            }
        }
        let v = self.value(x);
        let n = v.len() as f64;
        let (mean, var) = match fixed {
            Some(stats) => stats,
            None => {
                let m = v.iter().sum::<f64>() / n;
                (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
            }
        };
        let inv_std = 1.0 / (var + eps).sqrt();
        let (g, b) = (self.value(gamma)[0], self.value(beta)[0]);
        let xhat: Vec<f64> = v.iter().map(|x| (x - mean) * inv_std).collect();
        let out = xhat.iter().map(|h| g * h + b).collect();
        let mut saved = xhat;
        saved.extend([inv_std, mean, var]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm { fixed: fixed.is_some() },
            vec![x.0, gamma.0, beta.0],
            saved,
        ))
    }

    // ---- composites -------------------------------------------------------

    /// `x @ w + 1 b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(x)[0];
        let out = self.shape(w)[1];
        if self.shape(b) != [out] {
            let s = self.shape(b).to_vec();
            return shape_err("linear", &s, &[out]);
        }
        let ones = self.constant(&Tensor::full(&[rows, 1], 1.0));
        let brow = self.reshape(b, &[1, out])?;
        let bias = self.matmul(ones, brow)?;
        self.add(xw, bias)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    /// Gradients of interior nodes are recomputed on every call; leaf
    /// gradients add up across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(MantaError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut contribs = self.node_backward(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (p, c) in contribs {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut self.grads[p] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let pv = |k: usize| self.nodes[p[k]].value.as_slice();
        let y = &node.value;
        let map1 = |f: &dyn Fn(usize) -> f64| vec![(p[0], (0..g.len()).map(f).collect::<Vec<_>>())];
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (sa, sb) = (&self.nodes[p[0]].shape, &self.nodes[p[1]].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (a, b) = (pv(0), pv(1));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for r in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0;
                        let av = a[r * k + kk];
                        for c in 0..n {
                            let gv = g[r * n + c];
                            acc += gv * b[kk * n + c];
                            gb[kk * n + c] += av * gv;
                        }
                        ga[r * k + kk] = acc;
                    }
                }
                vec![(p[0], ga), (p[1], gb)]
            }
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                let bcast = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match node.op {
                    Op::Mul => (0..g.len())
                        .map(|k| (g[k] * bcast(b, k), g[k] * bcast(a, k)))
                        .unzip(),
                    _ => g.iter().map(|&v| (v, sign * v)).unzip(),
                };
                let reduce = |full: Vec<f64>, n: usize| {
                    if n == 1 && full.len() != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                vec![(p[0], reduce(ga, a.len())), (p[1], reduce(gb, b.len()))]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(p.len());
                for &pi in p {
                    let ext = self.nodes[pi].shape[*axis];
                    let mut gp = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    out.push((pi, gp));
                }
                out
            }
            Op::Slice { axis, start } => {
                let ps = &self.nodes[p[0]].shape;
                let (outer, ext, inner) = split_axis(ps, *axis);
                let len = node.shape[*axis];
                let mut gp = vec![0.0; numel(ps)];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(p[0], gp)]
            }
            Op::Reverse { axis } => vec![(p[0], reverse_raw(g, &node.shape, *axis))],
            Op::Mean { axis } => {
                let ps = &self.nodes[p[0]].shape;
                let (outer, ext, inner) = split_axis(ps, *axis);
                let mut gp = vec![0.0; numel(ps)];
                for o in 0..outer {
                    for a in 0..ext {
                        for k in 0..inner {
                            gp[(o * ext + a) * inner + k] = g[o * inner + k] / ext as f64;
                        }
                    }
                }
                vec![(p[0], gp)]
            }
            Op::Sum => vec![(p[0], vec![g[0]; pv(0).len()])],
            Op::Sigmoid => map1(&|k| g[k] * y[k] * (1.0 - y[k])),
            Op::Silu => {
                let x = pv(0);
                map1(&|k| {
                    let s = sigmoid(x[k]);
                    g[k] * (s + x[k] * s * (1.0 - s))
                })
            }
            Op::Exp => map1(&|k| g[k] * y[k]),
            Op::Log => {
                let x = pv(0);
                map1(&|k| g[k] / x[k])
            }
            Op::Square => {
                let x = pv(0);
                map1(&|k| 2.0 * g[k] * x[k])
            }
            Op::Sqrt => map1(&|k| g[k] * 0.5 / y[k]),
            Op::Scale(c) => map1(&|k| g[k] * c),
            Op::AddScalar | Op::Reshape => vec![(p[0], g.to_vec())],
            Op::Recip => map1(&|k| -g[k] * y[k] * y[k]),
            Op::FrobeniusNorm => {
                let x = pv(0);
                let n = y[0];
                let s = if n > 0.0 { g[0] / n } else { 0.0 };
                vec![(p[0], x.iter().map(|v| v * s).collect())]
            }
            Op::Cosine => {
                let (a, b) = (pv(0), pv(1));
                let (_, na, nb) = dot_norms(a, b);
                let c = y[0];
                let den = na * nb;
                let (ga, gb) = if den > COSINE_EPS {
                    (
                        a.iter().zip(b).map(|(x, z)| g[0] * (z / den - c * x / (na * na))).collect(),
                        a.iter().zip(b).map(|(x, z)| g[0] * (x / den - c * z / (nb * nb))).collect(),
                    )
                } else {
                    (
                        b.iter().map(|z| g[0] * z / COSINE_EPS).collect(),
                        a.iter().map(|x| g[0] * x / COSINE_EPS).collect(),
                    )
                };
                vec![(p[0], ga), (p[1], gb)]
            }
            Op::Softmax { axis } => {
                let (outer, ext, inner) = split_axis(&node.shape, *axis);
                let mut gp = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |a: usize| (o * ext + a) * inner + k;
                        let dot: f64 = (0..ext).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..ext {
                            gp[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![(p[0], gp)]
            }
            Op::RowCombine(plan) => {
                let cols = node.shape[1];
                let mut gp = vec![0.0; pv(0).len()];
                for (r, entries) in plan.rows.iter().enumerate() {
                    for &(j, w) in entries {
                        for c in 0..cols {
                            gp[j * cols + c] += w * g[r * cols + c];
                        }
                    }
                }
                vec![(p[0], gp)]
            }
            Op::Scan(cfg) => {
                let inputs = ScanInputs {
                    x: pv(0),
                    a_log: pv(1),
                    delta: pv(2),
                    b: pv(3),
                    c: pv(4),
                    skip: pv(5),
                    len: node.shape[0],
                    width: node.shape[1],
                    n_state: pv(1).len(),
                    cfg: *cfg,
                };
                let sg = scan::scan_backward(&inputs, &node.saved, g);
                vec![
                    (p[0], sg.x),
                    (p[1], sg.a_log),
                    (p[2], sg.delta),
                    (p[3], sg.b),
                    (p[4], sg.c),
                    (p[5], sg.skip),
                ]
            }
            Op::Conv2d { height } => {
                let (sx, sk) = (&self.nodes[p[0]].shape, &self.nodes[p[1]].shape);
                let dims = ConvDims {
                    c_in: sx[0],
                    c_out: sk[0],
                    rows: sx[1],
                    cols: sx[2],
                    height: *height,
                };
                let (gi, gk) = conv::conv_backward(&dims, pv(0), pv(1), g);
                vec![(p[0], gi), (p[1], gk)]
            }
            Op::BatchNorm { fixed, .. } => {
                let len = y.len();
                let xhat = &node.saved[..len];
                let inv_std = node.saved[len];
                let gamma = pv(1)[0];
                let gsum: f64 = g.iter().sum();
                let gxsum: f64 = g.iter().zip(xhat).map(|(a, b)| a * b).sum();
                let gx = if *fixed {
                    g.iter().map(|v| gamma * inv_std * v).collect()
                } else {
                    let n = len as f64;
                    g.iter()
                        .zip(xhat)
                        .map(|(v, h)| gamma * inv_std * (v - gsum / n - h * gxsum / n))
                        .collect()
                };
                vec![(p[0], gx), (p[1], vec![gxsum]), (p[2], vec![gsum])]
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn reverse_raw(v: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, ext, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; v.len()];
    for o in 0..outer {
        for a in 0..ext {
            let src = (o * ext + a) * inner;
            let dst = (o * ext + ext - 1 - a) * inner;
            out[dst..dst + inner].copy_from_slice(&v[src..src + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests;
