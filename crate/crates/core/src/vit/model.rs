use crate::error::Result;
use crate::pooling::{PoolingConfig, MIN_EXPONENT};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::ToyVitConfig;

/// Half-width of the uniform init for the class token and positional table.
pub const EMBED_INIT_BOUND: f64 = 0.05;

/// Linear weights start from `U(−a, a)` with `a = INIT_GAIN / √fan_in`.
pub const INIT_GAIN: f64 = 1.0;

/// `y = x · W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = INIT_GAIN / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("finite init"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVitModel {
    pub config: ToyVitConfig,
    pub patch_embed: Linear,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
    /// Current pooling exponents, one per group.
    pub exponents: Tensor,
}

impl ToyVitModel {
    /// Fresh model. Draw order: patch projection, class token, positional
    /// table, then per block query/key/value/output/fc1/fc2, then the
    /// classifier.
    pub fn new(config: ToyVitConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_embed = Linear::init(config.patch_dim(), d, rng);
        let class_token = uniform_tensor(&[d], EMBED_INIT_BOUND, rng);
        let pos_embed = uniform_tensor(&[config.seq_len(), d], EMBED_INIT_BOUND, rng);
        let hidden = config.mlp_hidden();
        let blocks = (0..config.blocks)
            .map(|_| Block {
                norm1: LayerNorm::init(d),
                query: Linear::init(d, d, rng),
                key: Linear::init(d, d, rng),
                value: Linear::init(d, d, rng),
                output: Linear::init(d, d, rng),
                norm2: LayerNorm::init(d),
                fc1: Linear::init(d, hidden, rng),
                fc2: Linear::init(hidden, d, rng),
            })
            .collect();
        let classifier = Linear::init(d, config.classes, rng);
        let exponents = Tensor::vector(config.pooling.exponents.clone())?;
        Ok(ToyVitModel {
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            final_norm: LayerNorm::init(d),
            classifier,
            exponents,
            config,
        })
    }

    /// Pooling config carrying the current exponents.
    pub fn pooling(&self) -> PoolingConfig {
        let mut cfg = self.config.pooling.clone();
        cfg.exponents = self.exponents.data().to_vec();
        cfg
    }

    pub fn exponents_trainable(&self) -> bool {
        self.config.pooling.exponents_trainable && self.config.pooling.strategy.uses_exponents()
    }

    /// Same structure with every parameter zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_params_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_embed.weight),
            ("patch_embed.bias".to_string(), &self.patch_embed.bias),
            ("class_token".to_string(), &self.class_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("norm1.gamma"), &block.norm1.gamma),
                (p("norm1.beta"), &block.norm1.beta),
                (p("query.weight"), &block.query.weight),
                (p("query.bias"), &block.query.bias),
                (p("key.weight"), &block.key.weight),
                (p("key.bias"), &block.key.bias),
                (p("value.weight"), &block.value.weight),
                (p("value.bias"), &block.value.bias),
                (p("output.weight"), &block.output.weight),
                (p("output.bias"), &block.output.bias),
                (p("norm2.gamma"), &block.norm2.gamma),
                (p("norm2.beta"), &block.norm2.beta),
                (p("fc1.weight"), &block.fc1.weight),
                (p("fc1.bias"), &block.fc1.bias),
                (p("fc2.weight"), &block.fc2.weight),
                (p("fc2.bias"), &block.fc2.bias),
            ]);
        }
        out.extend([
            ("final_norm.gamma".to_string(), &self.final_norm.gamma),
            ("final_norm.beta".to_string(), &self.final_norm.beta),
            ("classifier.weight".to_string(), &self.classifier.weight),
            ("classifier.bias".to_string(), &self.classifier.bias),
            ("pool.exponents".to_string(), &self.exponents),
        ]);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let ToyVitModel {
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            final_norm,
            classifier,
            exponents,
            ..
        } = self;
        let mut out = vec![
            ("patch_embed.weight".to_string(), &mut patch_embed.weight),
            ("patch_embed.bias".to_string(), &mut patch_embed.bias),
            ("class_token".to_string(), class_token),
            ("pos_embed".to_string(), pos_embed),
        ];
        for (b, block) in blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (p("norm1.gamma"), &mut block.norm1.gamma),
                (p("norm1.beta"), &mut block.norm1.beta),
                (p("query.weight"), &mut block.query.weight),
                (p("query.bias"), &mut block.query.bias),
                (p("key.weight"), &mut block.key.weight),
                (p("key.bias"), &mut block.key.bias),
                (p("value.weight"), &mut block.value.weight),
                (p("value.bias"), &mut block.value.bias),
                (p("output.weight"), &mut block.output.weight),
                (p("output.bias"), &mut block.output.bias),
                (p("norm2.gamma"), &mut block.norm2.gamma),
                (p("norm2.beta"), &mut block.norm2.beta),
                (p("fc1.weight"), &mut block.fc1.weight),
                (p("fc1.bias"), &mut block.fc1.bias),
                (p("fc2.weight"), &mut block.fc2.weight),
                (p("fc2.bias"), &mut block.fc2.bias),
            ]);
        }
        out.extend([
            ("final_norm.gamma".to_string(), &mut final_norm.gamma),
            ("final_norm.beta".to_string(), &mut final_norm.beta),
            ("classifier.weight".to_string(), &mut classifier.weight),
            ("classifier.bias".to_string(), &mut classifier.bias),
            ("pool.exponents".to_string(), exponents),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    /// Projects every exponent back onto `[MIN_EXPONENT, ∞)`.
    pub fn project_exponents(&mut self) {
        for p in self.exponents.data_mut() {
            if *p < MIN_EXPONENT {
                *p = MIN_EXPONENT;
            }
        }
    }

    /// Rounds every parameter to the nearest `f32`, as a checkpoint does.
    pub fn quantize_f32(&mut self) {
        for (_, t) in self.named_params_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn uniform_tensor(dims: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(dims);
    for v in t.data_mut() {
        *v = rng.uniform_range(-bound, bound);
    }
    t
}
