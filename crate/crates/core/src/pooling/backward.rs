//! Gradients of GeM/GGeM with respect to the activations and the exponents.
//!
//! For `v = ((1/n) Σ xᵢᵖ)^(1/p)`:
//!
//! ```text
//! ∂v/∂xᵢ = (1/n) · v^(1−p) · xᵢ^(p−1)
//! ∂v/∂p  = (v/p) · Σᵢ wᵢ (ln xᵢ − ln v),   wᵢ = xᵢᵖ / Σⱼ xⱼᵖ
//! ```
//!
//! The second line is the logarithmic derivative
//! `(Σ xᵖ ln x)/(p Σ xᵖ) − ln((1/n) Σ xᵖ)/p²` multiplied by `v`, rewritten so
//! that `wᵢ` is a softmax of `p ln xᵢ` and equal inputs give exactly zero.

use log::warn;

use super::{log_sum_exp, ActivationMaps, PoolingConfig, PooledVector};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor, DEFAULT_CLAMP_EPS};

/// Input gradient of GeM with per-channel exponents `exponents[d]`.
///
/// For `p < 1` the factor `xᵢ^(p−1)` is capped at `1/ε` before use.
pub fn gem_backward_x(
    x: &ActivationMaps,
    exponents: &[f64],
    v: &PooledVector,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, channels) = (x.n_tokens(), x.channels());
    if exponents.len() != channels || v.len() != channels || grad_out.len() != channels {
        return Err(Error::invalid(format!(
            "gem_backward_x shape mismatch: {channels} channels, {} exponents, {} pooled values, {} upstream gradients",
            exponents.len(),
            v.len(),
            grad_out.len()
        )));
    }
    let cap = 1.0 / DEFAULT_CLAMP_EPS;
    let inv_n = 1.0 / n as f64;
    let xs = x.values().data();
    let mut grad = vec![0.0; n * channels];
    let mut capped = 0usize;
    for d in 0..channels {
        let p = exponents[d];
        let g = grad_out.data()[d];
        let ln_v = v.as_slice()[d].ln();
        for i in 0..n {
            let ln_x = xs[i * channels + d].ln();
            let factor = if p < 1.0 {
                let x_pow = ((p - 1.0) * ln_x).exp();
                let x_pow = if x_pow > cap {
                    capped += 1;
                    cap
                } else {
                    x_pow
                };
                x_pow * ((1.0 - p) * ln_v).exp()
            } else {
                ((p - 1.0) * (ln_x - ln_v)).exp()
            };
            grad[i * channels + d] = g * factor * inv_n;
        }
    }
    if capped > 0 {
        warn!("gem_backward_x: capped x^(p-1) at 1/eps for {capped} activations with p < 1");
    }
    Tensor::new(vec![n, channels], grad)
        .map_err(|_| Error::numeric("gem_backward_x", "non-finite input gradient"))
}

/// Exponent gradient, one entry per group, for a GeM or GGeM config with
/// trainable exponents.
pub fn gem_backward_p(
    x: &ActivationMaps,
    cfg: &PoolingConfig,
    v: &PooledVector,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if !cfg.strategy.uses_exponents() {
        return Err(Error::invalid(format!("{} pooling has no exponent gradient", cfg.strategy)));
    }
    if !cfg.exponents_trainable {
        return Err(Error::InvalidState("pooling exponents are not trainable".into()));
    }
    let channels = x.channels();
    let exponents = cfg.channel_exponents(channels)?;
    if v.len() != channels || grad_out.len() != channels {
        return Err(Error::invalid(format!(
            "gem_backward_p shape mismatch: {channels} channels, {} pooled values, {} upstream gradients",
            v.len(),
            grad_out.len()
        )));
    }
    let width = channels / cfg.groups;
    let mut grad = vec![0.0; cfg.groups];
    let mut col = Vec::with_capacity(x.n_tokens());
    for d in 0..channels {
        let g = grad_out.data()[d];
        if g == 0.0 {
            continue;
        }
        x.gather_channel(d, &mut col);
        grad[d / width] += g * exponent_derivative(&col, exponents[d], v.as_slice()[d]);
    }
    Tensor::new(vec![cfg.groups], grad)
        .map_err(|_| Error::numeric("gem_backward_p", "non-finite exponent gradient"))
}

/// `∂v/∂p` for one channel.
fn exponent_derivative(col: &[f64], p: f64, v: f64) -> f64 {
    let ln_v = v.ln();
    let ln_x: Vec<f64> = col.iter().map(|x| x.ln()).collect();
    let scaled: Vec<f64> = ln_x.iter().map(|l| p * l).collect();
    let lse = log_sum_exp(&scaled);
    let terms: Vec<f64> = scaled
        .iter()
        .zip(&ln_x)
        .map(|(s, l)| (s - lse).exp() * (l - ln_v))
        .collect();
    v / p * pairwise_sum(&terms)
}
