//! Dense row-major `f64` arrays.

use crate::error::{invalid, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient accumulator, same shape as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return invalid(format!("tensor extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("positive extents")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("positive extents")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v]).unwrap()
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.len() / self.rows();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return invalid(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Rows in reverse order (axis 0).
    pub fn time_reversed(&self) -> Self {
        let r = self.rows();
        let c = self.len() / r;
        let mut data = Vec::with_capacity(self.len());
        for i in (0..r).rev() {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Self::new(&self.shape, data).unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
