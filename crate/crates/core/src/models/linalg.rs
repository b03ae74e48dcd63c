use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage element of a parameter tensor. Training stores `f32`; gradient
/// checks run the same code with `f64` weights.
pub trait Scalar: Copy + Send + Sync + std::fmt::Debug + PartialEq + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major dense matrix. A projection `x·W` maps a `rows`-dim input to a
/// `cols`-dim output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::from_f64(0.0); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(T::from_f64(f(r, c)));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

/// `x·W` with f64 accumulation.
pub fn project<T: Scalar>(x: &[f32], w: &Matrix<T>) -> Result<Vec<f64>> {
    if x.len() != w.rows {
        return Err(Error::DimensionMismatch { expected: w.rows, actual: x.len() });
    }
    let mut out = vec![0.0; w.cols];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let xi = f64::from(xi);
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij.to_f64();
        }
    }
    Ok(out)
}

/// Unit vector and the original norm.
pub fn normalize(v: Vec<f64>, what: &'static str) -> Result<(Vec<f64>, f64)> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm(what));
    }
    Ok((v.into_iter().map(|x| x / n).collect(), n))
}

pub fn normalize_input(x: &[f32], what: &'static str) -> Result<Vec<f64>> {
    Ok(normalize(x.iter().map(|&v| f64::from(v)).collect(), what)?.0)
}

/// Pull a gradient on `u/‖u‖` back to `u`.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let along = dot64(grad_unit, unit);
    grad_unit.iter().zip(unit).map(|(g, u)| (g - along * u) / norm).collect()
}

#[inline]
pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad += x ⊗ d` for a `len(x) × len(d)` row-major gradient.
pub fn add_outer(grad: &mut Matrix<f64>, x: &[f32], d: &[f64]) {
    debug_assert_eq!(grad.rows, x.len());
    debug_assert_eq!(grad.cols, d.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let xi = f64::from(xi);
        let row = &mut grad.data[i * d.len()..(i + 1) * d.len()];
        for (g, dj) in row.iter_mut().zip(d) {
            *g += xi * dj;
        }
    }
}

pub fn add_assign(dst: &mut Matrix<f64>, src: &Matrix<f64>) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

pub fn scale(m: &mut Matrix<f64>, k: f64) {
    for v in &mut m.data {
        *v *= k;
    }
}

/// Fixed number of shards a batch is cut into for parallel gradient
/// computation. Shard boundaries depend only on the batch length, and shard
/// results are summed in shard order, so the result is bitwise independent of
/// the thread count.
const SHARDS: usize = 8;

pub(crate) fn batch_reduce<G, Z, F, A>(n: usize, zero: Z, example: F, add: A) -> Result<(f64, G)>
where
    G: Send,
    Z: Fn() -> G + Sync,
    F: Fn(usize, &mut G) -> Result<f64> + Sync,
    A: Fn(&mut G, &G),
{
    let shard = n.div_ceil(SHARDS).max(1);
    let starts: Vec<usize> = (0..n).step_by(shard).collect();
    let parts: Vec<Result<(f64, G)>> = starts
        .into_par_iter()
        .map(|start| {
            let mut g = zero();
            let mut loss = 0.0;
            for i in start..(start + shard).min(n) {
                loss += example(i, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = zero();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        add(&mut total, &g);
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_matches_manual() {
        let w = Matrix::<f64>::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        // [1, 2, 3] · [[0,1],[2,3],[4,5]] = [16, 22]
        assert_eq!(project(&[1.0, 2.0, 3.0], &w).unwrap(), vec![16.0, 22.0]);
        assert!(project(&[1.0], &w).is_err());
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_unit() {
        let (u, n) = normalize(vec![1.0, 2.0, -2.0], "t").unwrap();
        assert_eq!(n, 3.0);
        let g = normalize_backward(&u, n, &[0.3, -1.0, 0.5]);
        assert!(dot64(&g, &u).abs() < 1e-15);
    }

    #[test]
    fn batch_reduce_sums_in_order() {
        let (loss, g) = batch_reduce(
            37,
            || 0.0f64,
            |i, acc| {
                *acc += i as f64;
                Ok(1.0)
            },
            |a, b| *a += *b,
        )
        .unwrap();
        assert_eq!(loss, 37.0);
        assert_eq!(g, (0..37).sum::<usize>() as f64);
    }
}
