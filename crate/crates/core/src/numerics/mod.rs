//! Dense numeric primitives used by the model.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; [`Matrix`] is a row-major dense
//! matrix. All arithmetic is 64-bit. The reverse-mode [`Tape`] lives in
//! [`tape`], and the central-difference oracle in [`gradcheck`].

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, relative_error};
pub use tape::{Gradients, ParamBlock, ParamId, ParamStore, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matrix with {} columns applied to vector of length {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot_unchecked(self.row(r), x)).collect())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dot product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax input contains a non-finite value".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the `selected` positions only, zero elsewhere.
pub(crate) fn masked_softmax(logits: &[f64], selected: &[usize]) -> Vec<f64> {
    let picked: Vec<f64> = selected.iter().map(|&i| logits[i]).collect();
    let probs = softmax_unchecked(&picked);
    let mut out = vec![0.0; logits.len()];
    for (&i, p) in selected.iter().zip(probs) {
        out[i] = p;
    }
    out
}

/// Indices of the `k` largest values, ties to the lower index, returned in
/// ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut picked = order[..k.min(values.len())].to_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Selected positions, ascending.
    pub indices: Vec<usize>,
    /// Softmax over the selected logits, zero elsewhere.
    pub weights: Vec<f64>,
    /// Softmax over all logits.
    pub dense_probs: Vec<f64>,
}

pub fn top_k_renormalized(logits: &[f64], k: usize) -> Result<TopK> {
    if k < 1 || k > logits.len() {
        return Err(Error::Parameter(format!(
            "top-k with k = {k} over {} logits",
            logits.len()
        )));
    }
    let dense_probs = softmax(logits)?;
    let indices = top_k_indices(logits, k);
    let weights = masked_softmax(logits, &indices);
    Ok(TopK {
        indices,
        weights,
        dense_probs,
    })
}

/// `KL(p ‖ uniform)` with `0 · ln 0 = 0`.
pub fn kl_to_uniform(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Dimension("KL of an empty distribution".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!("distribution has invalid entry {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("distribution sums to {total}, expected 1")));
    }
    Ok(kl_to_uniform_unchecked(p))
}

pub(crate) fn kl_to_uniform_unchecked(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|&v| v * (v.max(LOG_CLAMP) * n).ln()).sum()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise mean of equal-length vectors.
pub fn mean_of(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Parameter("mean over an empty batch".into()))?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != acc.len() {
            return Err(Error::Shape(format!(
                "batch mixes vectors of length {} and {}",
                acc.len(),
                v.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(&softmax(&[3f64.ln(), 0.0]).unwrap(), &[0.75, 0.25], 1e-15));
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(&big, &[1.0, 0.0], 1e-12));
        assert!(big.iter().all(|v| v.is_finite()));
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_k_examples() {
        let t = top_k_renormalized(&[2.0, 1.0, 0.5, -1.0], 2).unwrap();
        assert_eq!(t.indices, vec![0, 1]);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        let expected = [e2 / (e2 + e1), e1 / (e2 + e1), 0.0, 0.0];
        assert!(close(&t.weights, &expected, 1e-15));
        assert!((t.weights[0] - 0.7311).abs() < 1e-4);
        assert_eq!(t.weights[2], 0.0);
        assert_eq!(t.weights[3], 0.0);

        let u = top_k_renormalized(&[5.0; 4], 4).unwrap();
        assert!(close(&u.weights, &[0.25; 4], 1e-15));

        let tie = top_k_renormalized(&[1.0, 1.0], 1).unwrap();
        assert_eq!(tie.indices, vec![0]);
        assert_eq!(tie.weights, vec![1.0, 0.0]);

        assert!(matches!(top_k_renormalized(&[1.0, 2.0], 0), Err(Error::Parameter(_))));
        assert!(matches!(top_k_renormalized(&[1.0, 2.0], 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_uniform(&[0.5, 0.5]).unwrap(), 0.0);
        assert!((kl_to_uniform(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(kl_to_uniform(&[0.25; 4]).unwrap().abs() < 1e-15);
        assert!(matches!(kl_to_uniform(&[1.2, -0.2]), Err(Error::Domain(_))));
        assert!(matches!(kl_to_uniform(&[0.3, 0.3]), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn matvec_shape_error() {
        let m = Matrix::identity(3);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(m.matvec(&[1.0]), Err(Error::Shape(_))));
    }

    fn logits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_is_probability_and_shift_invariant(x in logits(), shift in -100.0f64..100.0) {
            let p = softmax(&x).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            prop_assert!(close(&p, &q, 1e-12));
        }

        #[test]
        fn top_k_weights_have_k_nonzeros(x in logits(), k_frac in 0.0f64..1.0) {
            let k = 1 + ((x.len() - 1) as f64 * k_frac) as usize;
            let t = top_k_renormalized(&x, k).unwrap();
            let nonzero = t.weights.iter().filter(|w| **w != 0.0).count();
            prop_assert_eq!(nonzero, k);
            let total: f64 = t.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let argmax = top_k_indices(&t.dense_probs, 1)[0];
            prop_assert!(t.indices.contains(&argmax));
        }

        #[test]
        fn kl_mixing_toward_uniform_never_increases(raw in prop::collection::vec(0.0f64..1.0, 2..10), lambda in 0.0f64..1.0) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let n = p.len() as f64;
            let mixed: Vec<f64> = p.iter().map(|v| lambda * v + (1.0 - lambda) / n).collect();
            let kp = kl_to_uniform(&p).unwrap();
            let km = kl_to_uniform(&mixed).unwrap();
            prop_assert!(kp >= 0.0);
            prop_assert!(km <= kp + 1e-12);
        }
    }
}
