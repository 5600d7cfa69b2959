//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! Activation maps are stored tokens-major: a `[tokens, channels]` tensor keeps
//! all channels of token 0 first, then token 1, and so on. Pooling reduces over
//! tokens for each channel, so reductions walk a channel with stride
//! `channels`; the kernels here gather a column into a scratch buffer once and
//! then reduce it contiguously.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor applied before any power operation.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape mismatches and non-finite scalars.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "dims {dims:?} need {expected} scalars, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("Tensor::new", format!("non-finite value at index {i}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Elementwise `max(x, eps)`.
pub fn clamp_min(x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("clamp floor must be positive, got {eps}")));
    }
    Ok(x.map(|v| v.max(eps)))
}

/// Pairwise summation in ascending index order. The split points depend only
/// on the length, so the same slice always sums the same way.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if xs.len() <= BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

/// `out[m×n] = aᵀ · b` with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    out
}

/// `out[m×n] = a · bᵀ` with `a` stored as `[m×k]` and `b` as `[n×k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamp_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 0.5]).unwrap();
        assert_eq!(clamp_min(&x, 1e-6).unwrap().data(), &[1e-6, 1e-6, 0.5]);
        let x = Tensor::vector(vec![2.0, 3.0]).unwrap();
        assert_eq!(clamp_min(&x, 1e-6).unwrap().data(), &[2.0, 3.0]);
        let x = Tensor::vector(vec![1e-7]).unwrap();
        assert_eq!(clamp_min(&x, 1e-6).unwrap().data(), &[1e-6]);
    }

    #[test]
    fn clamp_rejects_bad_floor() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(clamp_min(&x, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(clamp_min(&x, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(clamp_min(&x, f64::NAN), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn new_checks_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::INFINITY]),
            Err(Error::NumericFailure { .. })
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_integers() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(xs in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let t = Tensor::vector(xs).unwrap();
            let once = clamp_min(&t, 1e-6).unwrap();
            let twice = clamp_min(&once, 1e-6).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn clamp_is_monotone(pairs in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..40)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let cx = clamp_min(&Tensor::vector(x).unwrap(), 1e-6).unwrap();
            let cy = clamp_min(&Tensor::vector(y).unwrap(), 1e-6).unwrap();
            for (a, b) in cx.data().iter().zip(cy.data()) {
                prop_assert!(a <= b);
            }
        }
    }
}
