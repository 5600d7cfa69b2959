//! Model checkpoints in the GGEM container. Parameters are stored under their
//! `named_params` names; the architecture and the RNG identity are stored as
//! extra scalar tensors so a checkpoint is self-describing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_container, encode_container, read_container, write_container};
use crate::pooling::{PoolingConfig, PoolingStrategy};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::model::ToyVitModel;
use super::ToyVitConfig;

/// RNG identity saved alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngInfo {
    pub algorithm: u32,
    pub seed: u64,
}

impl From<&Rng> for RngInfo {
    fn from(rng: &Rng) -> Self {
        RngInfo {
            algorithm: rng.algorithm(),
            seed: rng.seed(),
        }
    }
}

fn scalar(name: &str, v: f64) -> (String, Tensor) {
    (name.to_string(), Tensor::new(vec![], vec![v]).expect("finite scalar"))
}

pub fn checkpoint_tensors(model: &ToyVitModel, rng: RngInfo) -> Vec<(String, Tensor)> {
    let c = &model.config;
    let mut out = vec![
        scalar("config.image_size", c.image_size as f64),
        scalar("config.patch_size", c.patch_size as f64),
        scalar("config.channels_in", c.channels_in as f64),
        scalar("config.embed_dim", c.embed_dim as f64),
        scalar("config.heads", c.heads as f64),
        scalar("config.blocks", c.blocks as f64),
        scalar("config.mlp_ratio", c.mlp_ratio),
        scalar("config.classes", c.classes as f64),
        scalar("config.pool.strategy", f64::from(c.pooling.strategy.id())),
        scalar("config.pool.groups", c.pooling.groups as f64),
        scalar("config.pool.trainable", f64::from(u8::from(c.pooling.exponents_trainable))),
        scalar("config.pool.clamp_eps", c.pooling.clamp_eps),
        scalar("rng.algorithm", f64::from(rng.algorithm)),
    ];
    // Four 16-bit chunks, least significant first; each is exact in f32.
    let chunks = (0..4).map(|i| ((rng.seed >> (16 * i)) & 0xffff) as f64).collect();
    out.push(("rng.seed".to_string(), Tensor::vector(chunks).expect("finite seed")));
    out.extend(model.named_params().into_iter().map(|(n, t)| (n, t.clone())));
    out
}

pub fn encode_checkpoint(model: &ToyVitModel, rng: RngInfo) -> Result<Vec<u8>> {
    encode_container(&checkpoint_tensors(model, rng))
}

pub fn save_checkpoint(path: &Path, model: &ToyVitModel, rng: RngInfo) -> Result<()> {
    write_container(path, &checkpoint_tensors(model, rng))
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyVitModel, RngInfo)> {
    let tensors = read_container(path)?;
    from_tensors(tensors).map_err(|m| Error::format(path, m))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(ToyVitModel, RngInfo), String> {
    from_tensors(decode_container(bytes)?)
}

struct Lookup(Vec<(String, Option<Tensor>)>);

impl Lookup {
    fn take(&mut self, name: &str) -> std::result::Result<Tensor, String> {
        self.0
            .iter_mut()
            .find(|(n, _)| n == name)
            .and_then(|(_, t)| t.take())
            .ok_or_else(|| format!("checkpoint is missing tensor {name}"))
    }

    fn float(&mut self, name: &str) -> std::result::Result<f64, String> {
        let t = self.take(name)?;
        if t.len() != 1 {
            return Err(format!("{name} should be a scalar, has dims {:?}", t.dims()));
        }
        // Stored as f32; recover the decimal value that was written.
        let v = t.data()[0] as f32;
        v.to_string().parse().map_err(|_| format!("{name}: bad value"))
    }

    fn count(&mut self, name: &str) -> std::result::Result<usize, String> {
        let v = self.float(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(format!("{name} should be a non-negative integer, got {v}"));
        }
        Ok(v as usize)
    }
}

fn from_tensors(tensors: Vec<(String, Tensor)>) -> std::result::Result<(ToyVitModel, RngInfo), String> {
    let mut lookup = Lookup(tensors.into_iter().map(|(n, t)| (n, Some(t))).collect());
    let strategy_id = lookup.count("config.pool.strategy")?;
    let strategy = PoolingStrategy::from_id(strategy_id as u32)
        .ok_or_else(|| format!("unknown pooling strategy id {strategy_id}"))?;
    let exponents = lookup.take("pool.exponents")?;
    let pooling = PoolingConfig {
        strategy,
        groups: lookup.count("config.pool.groups")?,
        exponents: exponents.data().to_vec(),
        exponents_trainable: lookup.count("config.pool.trainable")? != 0,
        clamp_eps: lookup.float("config.pool.clamp_eps")?,
    };
    let config = ToyVitConfig {
        image_size: lookup.count("config.image_size")?,
        patch_size: lookup.count("config.patch_size")?,
        channels_in: lookup.count("config.channels_in")?,
        embed_dim: lookup.count("config.embed_dim")?,
        heads: lookup.count("config.heads")?,
        blocks: lookup.count("config.blocks")?,
        mlp_ratio: lookup.float("config.mlp_ratio")?,
        classes: lookup.count("config.classes")?,
        pooling,
    };
    config.validate().map_err(|e| format!("stored config is invalid: {e}"))?;
    let algorithm = lookup.count("rng.algorithm")? as u32;
    let seed_chunks = lookup.take("rng.seed")?;
    if seed_chunks.len() != 4 {
        return Err("rng.seed should hold four 16-bit chunks".into());
    }
    let seed = seed_chunks
        .data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i)));

    // Shapes come from a freshly built model; values are overwritten.
    let mut model = ToyVitModel::new(config, &mut Rng::new(0)).map_err(|e| e.to_string())?;
    model.exponents = exponents;
    for (name, param) in model.named_params_mut() {
        if name == "pool.exponents" {
            continue;
        }
        let stored = lookup.take(&name)?;
        if stored.dims() != param.dims() {
            return Err(format!(
                "tensor {name} has dims {:?}, architecture needs {:?}",
                stored.dims(),
                param.dims()
            ));
        }
        *param = stored;
    }
    if model.exponents.dims() != [model.config.pooling.exponents.len()] {
        return Err("pool.exponents has the wrong shape".into());
    }
    if let Some((name, _)) = lookup.0.iter().find(|(_, t)| t.is_some()) {
        return Err(format!("unexpected tensor {name} in checkpoint"));
    }
    Ok((model, RngInfo { algorithm, seed }))
}
