//! Hand-derived backward pass through the whole model, cross-entropy on top.

use crate::error::{Error, Result};
use crate::pooling::{gem_backward_p, gem_backward_x, PoolingStrategy};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use super::forward::{forward_cached, ForwardCache};
use super::layers::{
    add_columns, gelu_grad, layer_norm_backward, linear_backward, softmax_rows_backward, take_columns,
};
use super::model::ToyVitModel;

/// Cross-entropy of one sample and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() + m - logits[label];
    let mut grad: Vec<f64> = exp.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Mean cross-entropy over `samples`.
pub fn loss(model: &ToyVitModel, samples: &[(&Tensor, usize)]) -> Result<f64> {
    check_batch(model, samples)?;
    let mut total = 0.0;
    for &(image, label) in samples {
        let cache = forward_cached(model, image)?;
        total += cross_entropy(&cache.logits, label).0;
    }
    Ok(total / samples.len() as f64)
}

/// Mean cross-entropy over `samples` and its gradient for every parameter,
/// returned in a model-shaped buffer. Non-trainable exponents get zero.
pub fn loss_and_gradients(model: &ToyVitModel, samples: &[(&Tensor, usize)]) -> Result<(f64, ToyVitModel)> {
    check_batch(model, samples)?;
    let mut grads = model.zeros_like();
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for &(image, label) in samples {
        let cache = forward_cached(model, image)?;
        let (l, mut dlogits) = cross_entropy(&cache.logits, label);
        total += l;
        dlogits.iter_mut().for_each(|g| *g *= scale);
        backward(model, &cache, &dlogits, &mut grads)?;
    }
    if !grads.is_finite() {
        let name = grads
            .named_params()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
            .unwrap_or_default();
        return Err(Error::numeric(name, "non-finite gradient"));
    }
    Ok((total * scale, grads))
}

fn check_batch(model: &ToyVitModel, samples: &[(&Tensor, usize)]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some((_, label)) = samples.iter().find(|(_, l)| *l >= model.config.classes) {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            model.config.classes
        )));
    }
    Ok(())
}

fn backward(model: &ToyVitModel, cache: &ForwardCache, dlogits: &[f64], grads: &mut ToyVitModel) -> Result<()> {
    let cfg = &model.config;
    let (t, d, dh) = (cfg.seq_len(), cfg.embed_dim, cfg.head_dim());
    let n = cfg.n_patches();
    let scale = 1.0 / (dh as f64).sqrt();

    let dpooled = linear_backward(&model.classifier, &mut grads.classifier, cache.pooled.as_slice(), dlogits, 1);

    // Pooling head.
    let mut dnormed = vec![0.0; t * d];
    let pooling = model.pooling();
    match pooling.strategy {
        PoolingStrategy::ClassToken => dnormed[..d].copy_from_slice(&dpooled),
        PoolingStrategy::Average => {
            let inv_n = 1.0 / n as f64;
            for i in 0..n {
                for c in 0..d {
                    dnormed[(i + 1) * d + c] = dpooled[c] * inv_n;
                }
            }
        }
        PoolingStrategy::Max => {
            let maps = cache.pool_input.values().data();
            for c in 0..d {
                let winner = (0..n)
                    .reduce(|best, i| if maps[i * d + c] > maps[best * d + c] { i } else { best })
                    .expect("at least one patch");
                dnormed[(winner + 1) * d + c] = dpooled[c];
            }
        }
        PoolingStrategy::Gem | PoolingStrategy::Ggem => {
            let upstream = Tensor::vector(dpooled.clone())?;
            let exponents = pooling.channel_exponents(d)?;
            let dmaps = gem_backward_x(&cache.pool_input, &exponents, &cache.pooled, &upstream)?;
            for i in 0..n {
                for c in 0..d {
                    let idx = (i + 1) * d + c;
                    // clamp_min passes gradient only where the raw value was above the floor
                    if cache.normed[idx] > pooling.clamp_eps {
                        dnormed[idx] = dmaps.data()[i * d + c];
                    }
                }
            }
            if model.exponents_trainable() {
                let dp = gem_backward_p(&cache.pool_input, &pooling, &cache.pooled, &upstream)?;
                for (g, v) in grads.exponents.data_mut().iter_mut().zip(dp.data()) {
                    *g += v;
                }
            }
        }
    }

    let mut dx = layer_norm_backward(&model.final_norm, &mut grads.final_norm, &cache.lnf, &dnormed, d);

    for (b, block) in model.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[b];
        let gb = &mut grads.blocks[b];

        // MLP branch.
        let dact = linear_backward(&block.fc2, &mut gb.fc2, &bc.act, &dx, t);
        let dpre: Vec<f64> = dact.iter().zip(&bc.pre).map(|(g, &z)| g * gelu_grad(z)).collect();
        let dh2 = linear_backward(&block.fc1, &mut gb.fc1, &bc.h2, &dpre, t);
        let dln2 = layer_norm_backward(&block.norm2, &mut gb.norm2, &bc.ln2, &dh2, d);
        let dmid: Vec<f64> = dx.iter().zip(&dln2).map(|(a, b)| a + b).collect();

        // Attention branch.
        let dctx = linear_backward(&block.output, &mut gb.output, &bc.ctx, &dmid, t);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        for (h, a) in bc.attn.iter().enumerate() {
            let off = h * dh;
            let dctx_h = take_columns(&dctx, d, off, dh);
            let qh = take_columns(&bc.q, d, off, dh);
            let kh = take_columns(&bc.k, d, off, dh);
            let vh = take_columns(&bc.v, d, off, dh);
            let da = matmul_nt(&dctx_h, &vh, t, dh, t);
            let dvh = matmul_tn(a, &dctx_h, t, t, dh);
            let mut ds = softmax_rows_backward(a, &da, t);
            ds.iter_mut().for_each(|s| *s *= scale);
            let dqh = matmul(&ds, &kh, t, t, dh);
            let dkh = matmul_tn(&ds, &qh, t, t, dh);
            add_columns(&mut dq, d, off, &dqh, dh);
            add_columns(&mut dk, d, off, &dkh, dh);
            add_columns(&mut dv, d, off, &dvh, dh);
        }
        let mut dh1 = linear_backward(&block.query, &mut gb.query, &bc.h1, &dq, t);
        let dh1_k = linear_backward(&block.key, &mut gb.key, &bc.h1, &dk, t);
        let dh1_v = linear_backward(&block.value, &mut gb.value, &bc.h1, &dv, t);
        for ((a, b), c) in dh1.iter_mut().zip(&dh1_k).zip(&dh1_v) {
            *a += b + c;
        }
        let dln1 = layer_norm_backward(&block.norm1, &mut gb.norm1, &bc.ln1, &dh1, d);
        dx = dmid.iter().zip(&dln1).map(|(a, b)| a + b).collect();
        debug_assert_eq!(bc.input.len(), dx.len());
    }

    // Embedding.
    for (g, v) in grads.pos_embed.data_mut().iter_mut().zip(&dx) {
        *g += v;
    }
    for (g, v) in grads.class_token.data_mut().iter_mut().zip(&dx[..d]) {
        *g += v;
    }
    linear_backward(&model.patch_embed, &mut grads.patch_embed, &cache.patches, &dx[d..], n);
    debug_assert_eq!(cache.final_input.len(), t * d);
    Ok(())
}
