use crate::error::{Error, Result};
use crate::pooling::{
    avg_pool, ggem_pool, gem_pool, max_pool, ActivationMaps, PooledVector, PoolingStrategy,
};
use crate::tensor::{matmul, matmul_nt, Tensor};

use super::layers::{
    gelu, layer_norm_forward, linear_forward, softmax_rows, take_columns, LayerNormCache,
};
use super::model::ToyVitModel;

/// Attention captured for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention {
    /// Per head, the `[T, T]` row-stochastic attention matrix.
    pub attention: Vec<Tensor>,
    /// Per head, the `[T, d_head]` attention output `A · V_h` before the
    /// output projection.
    pub head_outputs: Vec<Tensor>,
}

/// Attention of every block and head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub blocks: Vec<BlockAttention>,
    /// Side `N` of the patch grid.
    pub grid_side: usize,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.attention.len())
    }

    pub fn seq_len(&self) -> usize {
        self.grid_side * self.grid_side + 1
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub pooled: PooledVector,
    pub record: Option<AttentionRecord>,
}

pub(crate) struct BlockCache {
    pub input: Vec<f64>,
    pub ln1: LayerNormCache,
    pub h1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub attn: Vec<Vec<f64>>,
    pub ctx: Vec<f64>,
    pub ln2: LayerNormCache,
    pub h2: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    pub patches: Vec<f64>,
    pub blocks: Vec<BlockCache>,
    pub final_input: Vec<f64>,
    pub lnf: LayerNormCache,
    pub normed: Vec<f64>,
    /// Patch maps as seen by the pooling op (clamped for GeM/GGeM).
    pub pool_input: ActivationMaps,
    pub pooled: PooledVector,
    pub logits: Vec<f64>,
}

/// Cuts an `[H, W, C]` image into `N²` row-major patches of `R·R·C` values.
pub fn extract_patches(image: &Tensor, model: &ToyVitModel) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let expected = [cfg.image_size, cfg.image_size, cfg.channels_in];
    if image.dims() != expected {
        return Err(Error::invalid(format!(
            "image dims {:?} do not match model input {expected:?}",
            image.dims()
        )));
    }
    let (r, c, n, size) = (cfg.patch_size, cfg.channels_in, cfg.grid_side(), cfg.image_size);
    let px = image.data();
    let mut out = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for pr in 0..n {
        for pc in 0..n {
            for dy in 0..r {
                let row = pr * r + dy;
                let start = (row * size + pc * r) * c;
                out.extend_from_slice(&px[start..start + r * c]);
            }
        }
    }
    Ok(out)
}

fn embed(model: &ToyVitModel, patches: &[f64]) -> Vec<f64> {
    let d = model.config.embed_dim;
    let projected = linear_forward(&model.patch_embed, patches, model.config.n_patches());
    let mut tokens = Vec::with_capacity(model.config.seq_len() * d);
    tokens.extend_from_slice(model.class_token.data());
    tokens.extend_from_slice(&projected);
    for (t, p) in tokens.iter_mut().zip(model.pos_embed.data()) {
        *t += p;
    }
    tokens
}

/// Token sequence `[N² + 1, D]` entering the first block: class token at
/// index 0, projected patches after it, positional table added.
pub fn patch_embed(image: &Tensor, model: &ToyVitModel) -> Result<Tensor> {
    let patches = extract_patches(image, model)?;
    Tensor::new(
        vec![model.config.seq_len(), model.config.embed_dim],
        embed(model, &patches),
    )
}

pub fn vit_forward(image: &Tensor, model: &ToyVitModel, capture: bool) -> Result<ForwardOutput> {
    let cache = forward_cached(model, image)?;
    let record = capture.then(|| attention_record(model, &cache));
    Ok(ForwardOutput {
        logits: cache.logits,
        pooled: cache.pooled,
        record,
    })
}

fn attention_record(model: &ToyVitModel, cache: &ForwardCache) -> AttentionRecord {
    let cfg = &model.config;
    let (t, d, dh) = (cfg.seq_len(), cfg.embed_dim, cfg.head_dim());
    let blocks = cache
        .blocks
        .iter()
        .map(|b| BlockAttention {
            attention: b
                .attn
                .iter()
                .map(|a| Tensor::new(vec![t, t], a.clone()).expect("finite attention"))
                .collect(),
            head_outputs: (0..cfg.heads)
                .map(|h| {
                    Tensor::new(vec![t, dh], take_columns(&b.ctx, d, h * dh, dh)).expect("finite outputs")
                })
                .collect(),
        })
        .collect();
    AttentionRecord {
        blocks,
        grid_side: cfg.grid_side(),
    }
}

pub(crate) fn forward_cached(model: &ToyVitModel, image: &Tensor) -> Result<ForwardCache> {
    let cfg = &model.config;
    let (t, d, heads, dh) = (cfg.seq_len(), cfg.embed_dim, cfg.heads, cfg.head_dim());
    let hidden = cfg.mlp_hidden();
    let scale = 1.0 / (dh as f64).sqrt();

    let patches = extract_patches(image, model)?;
    let mut x = embed(model, &patches);
    check_finite(&x, "patch embedding")?;

    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, block) in model.blocks.iter().enumerate() {
        let (h1, ln1) = layer_norm_forward(&block.norm1, &x, d);
        let q = linear_forward(&block.query, &h1, t);
        let k = linear_forward(&block.key, &h1, t);
        let v = linear_forward(&block.value, &h1, t);
        let mut ctx = vec![0.0; t * d];
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = take_columns(&q, d, h * dh, dh);
            let kh = take_columns(&k, d, h * dh, dh);
            let vh = take_columns(&v, d, h * dh, dh);
            let mut a = matmul_nt(&qh, &kh, t, dh, t);
            a.iter_mut().for_each(|s| *s *= scale);
            softmax_rows(&mut a, t);
            let out = matmul(&a, &vh, t, t, dh);
            super::layers::add_columns(&mut ctx, d, h * dh, &out, dh);
            attn.push(a);
        }
        let projected = linear_forward(&block.output, &ctx, t);
        let mid: Vec<f64> = x.iter().zip(&projected).map(|(a, b)| a + b).collect();
        let (h2, ln2) = layer_norm_forward(&block.norm2, &mid, d);
        let pre = linear_forward(&block.fc1, &h2, t);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mlp = linear_forward(&block.fc2, &act, t);
        debug_assert_eq!(act.len(), t * hidden);
        let out: Vec<f64> = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        check_finite(&out, &format!("block {b}"))?;
        blocks.push(BlockCache {
            input: std::mem::replace(&mut x, out),
            ln1,
            h1,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            h2,
            pre,
            act,
        });
    }

    let (normed, lnf) = layer_norm_forward(&model.final_norm, &x, d);
    let sequence = Tensor::new(vec![t, d], normed.clone())
        .map_err(|_| Error::numeric("final norm", "non-finite activations"))?;
    let maps = ActivationMaps::from_sequence(&sequence)?;
    let pooling = model.pooling();
    let (pool_input, pooled) = match pooling.strategy {
        PoolingStrategy::ClassToken => {
            let v = PooledVector::from_vec(maps.class_token().expect("sequence has class token").to_vec());
            (maps, v)
        }
        PoolingStrategy::Average => {
            let v = avg_pool(&maps);
            (maps, v)
        }
        PoolingStrategy::Max => {
            let v = max_pool(&maps);
            (maps, v)
        }
        PoolingStrategy::Gem => {
            let clamped = maps.clamped(pooling.clamp_eps)?;
            let v = gem_pool(&clamped, pooling.exponents[0])?;
            (clamped, v)
        }
        PoolingStrategy::Ggem => {
            let clamped = maps.clamped(pooling.clamp_eps)?;
            let v = ggem_pool(&clamped, &pooling)?;
            (clamped, v)
        }
    };
    let logits = linear_forward(&model.classifier, pooled.as_slice(), 1);
    check_finite(&logits, "classifier")?;

    Ok(ForwardCache {
        patches,
        blocks,
        final_input: x,
        lnf,
        normed,
        pool_input,
        pooled,
        logits,
    })
}

fn check_finite(values: &[f64], location: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(location, format!("non-finite activation at index {i}"))),
        None => Ok(()),
    }
}
