//! Experiment configuration: UTF-8 `key = value` lines, `#` starts a comment.
//! Every key has a default, so an empty file is a valid config. Unknown and
//! repeated keys are errors.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::BlobSpec;
use crate::error::{Error, Result};
use crate::pooling::{PoolingConfig, PoolingStrategy};
use crate::tensor::DEFAULT_CLAMP_EPS;
use crate::vit::{ToyVitConfig, TrainConfig};

/// Where training and analysis images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic,
    /// IDX image file; the label file is given separately.
    Idx(PathBuf),
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetSource::Synthetic => f.write_str("synthetic"),
            DatasetSource::Idx(p) => write!(f, "{}", p.display()),
        }
    }
}

impl From<&str> for DatasetSource {
    fn from(s: &str) -> Self {
        if s == "synthetic" {
            DatasetSource::Synthetic
        } else {
            DatasetSource::Idx(PathBuf::from(s))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels_in: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub pooling: PoolingStrategy,
    /// `None` means one group per attention head.
    pub groups: Option<usize>,
    /// One value for every group, or one per group.
    pub p_init: Vec<f64>,
    pub p_trainable: bool,
    pub clamp_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub labels: Option<PathBuf>,
    pub synthetic_samples: usize,
    pub synthetic_noise: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ToyVitConfig::default();
        let train = TrainConfig::default();
        let blobs = BlobSpec::default();
        ExperimentConfig {
            image_size: model.image_size,
            patch_size: model.patch_size,
            channels_in: model.channels_in,
            embed_dim: model.embed_dim,
            heads: model.heads,
            blocks: model.blocks,
            mlp_ratio: model.mlp_ratio,
            classes: model.classes,
            pooling: PoolingStrategy::Ggem,
            groups: None,
            p_init: vec![3.0],
            p_trainable: true,
            clamp_eps: DEFAULT_CLAMP_EPS,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            seed: train.seed,
            dataset: DatasetSource::Synthetic,
            labels: None,
            synthetic_samples: blobs.samples,
            synthetic_noise: blobs.noise,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels_in",
    "embed_dim",
    "heads",
    "blocks",
    "mlp_ratio",
    "classes",
    "pooling",
    "groups",
    "p_init",
    "p_trainable",
    "clamp_eps",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "seed",
    "dataset",
    "labels",
    "synthetic_samples",
    "synthetic_noise",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<f64>, String> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "image_size" => self.image_size = parse_value(key, v)?,
            "patch_size" => self.patch_size = parse_value(key, v)?,
            "channels_in" => self.channels_in = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "blocks" => self.blocks = parse_value(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "pooling" => self.pooling = v.parse().map_err(|e: Error| e.to_string())?,
            "groups" => {
                self.groups = if v == "heads" {
                    None
                } else {
                    Some(parse_value(key, v)?)
                }
            }
            "p_init" => self.p_init = parse_list(key, v)?,
            "p_trainable" => self.p_trainable = parse_value(key, v)?,
            "clamp_eps" => self.clamp_eps = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "dataset" => self.dataset = DatasetSource::from(v),
            "labels" => self.labels = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synthetic_samples" => self.synthetic_samples = parse_value(key, v)?,
            "synthetic_noise" => self.synthetic_noise = parse_value(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "image_size" => self.image_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "channels_in" => self.channels_in.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "heads" => self.heads.to_string(),
            "blocks" => self.blocks.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "classes" => self.classes.to_string(),
            "pooling" => self.pooling.to_string(),
            "groups" => self.groups.map_or("heads".to_string(), |g| g.to_string()),
            "p_init" => join(&self.p_init),
            "p_trainable" => self.p_trainable.to_string(),
            "clamp_eps" => self.clamp_eps.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.to_string(),
            "labels" => self.labels.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "synthetic_samples" => self.synthetic_samples.to_string(),
            "synthetic_noise" => self.synthetic_noise.to_string(),
            _ => return None,
        })
    }

    /// `source` names the input in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let canonical = CONFIG_KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| err(format!("unknown key {key:?}")))?;
            if seen.contains(canonical) {
                return Err(err(format!("key {key:?} given twice")));
            }
            seen.push(canonical);
            cfg.set(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every key, one per line, in a form [`ExperimentConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn group_count(&self) -> usize {
        self.groups.unwrap_or(self.heads)
    }

    pub fn pooling_config(&self) -> Result<PoolingConfig> {
        let cfg = match self.pooling {
            PoolingStrategy::ClassToken => PoolingConfig::class_token(),
            PoolingStrategy::Average => PoolingConfig::average(),
            PoolingStrategy::Max => PoolingConfig::max(),
            PoolingStrategy::Gem => {
                if self.p_init.len() != 1 {
                    return Err(Error::invalid("gem pooling takes a single p_init value"));
                }
                PoolingConfig::gem(self.p_init[0])
            }
            PoolingStrategy::Ggem => {
                let g = self.group_count();
                let p = match self.p_init.len() {
                    1 => vec![self.p_init[0]; g],
                    n if n == g => self.p_init.clone(),
                    n => {
                        return Err(Error::invalid(format!(
                            "p_init has {n} values for {g} groups"
                        )))
                    }
                };
                PoolingConfig::ggem(p)
            }
        };
        let cfg = if self.pooling.uses_exponents() {
            cfg.trainable(self.p_trainable)
        } else {
            cfg
        };
        Ok(cfg.with_clamp_eps(self.clamp_eps))
    }

    pub fn model_config(&self) -> Result<ToyVitConfig> {
        let cfg = ToyVitConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels_in: self.channels_in,
            embed_dim: self.embed_dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_ratio: self.mlp_ratio,
            classes: self.classes,
            pooling: self.pooling_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
        }
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            samples: self.synthetic_samples,
            classes: self.classes,
            image_size: self.image_size,
            noise: self.synthetic_noise,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("# nothing\n\n", "mem").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let model = cfg.model_config().unwrap();
        assert_eq!(model.pooling, PoolingConfig::ggem_uniform(4, 3.0));
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn parses_values_and_comments() {
        let text = "heads = 2   # fewer heads\nembed_dim=16\npooling = gem\np_init = 2.5\np_trainable = false\ndataset = data/train.idx\nlabels = data/labels.idx\n";
        let cfg = ExperimentConfig::parse(text, "mem").unwrap();
        assert_eq!(cfg.heads, 2);
        assert_eq!(cfg.embed_dim, 16);
        assert_eq!(cfg.dataset, DatasetSource::Idx("data/train.idx".into()));
        let pool = cfg.pooling_config().unwrap();
        assert_eq!(pool.exponents, vec![2.5]);
        assert!(!pool.exponents_trainable);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("heads = 2\nhaeds = 3\n", 2),
            ("heads = 2\n\nheads = 3\n", 3),
            ("heads 2\n", 1),
            ("# c\nepochs = many\n", 2),
        ] {
            match ExperimentConfig::parse(text, "exp.cfg") {
                Err(Error::Parse { line: l, path, .. }) => {
                    assert_eq!(l, line, "{text}");
                    assert_eq!(path, "exp.cfg");
                }
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn groups_follow_heads_unless_set() {
        let mut cfg = ExperimentConfig::parse("heads = 2\nembed_dim = 16\n", "mem").unwrap();
        assert_eq!(cfg.pooling_config().unwrap().groups, 2);
        cfg.set("groups", "16").unwrap();
        assert_eq!(cfg.pooling_config().unwrap().groups, 16);
        cfg.set("p_init", "1,2").unwrap();
        assert!(cfg.pooling_config().is_err());
        cfg.set("groups", "3").unwrap();
        cfg.set("p_init", "3").unwrap();
        assert!(cfg.model_config().is_err());
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            1usize..64,
            prop::sample::select(vec!["cls", "average", "max", "gem", "ggem"]),
            prop::option::of(1usize..8),
            prop::collection::vec(0.001f64..100.0, 1..4),
            any::<bool>(),
            any::<u64>(),
            0.0f64..1.0,
            prop::option::of("[a-z]{1,8}\\.idx"),
        )
            .prop_map(|(image_size, pooling, groups, p_init, trainable, seed, lr, labels)| ExperimentConfig {
                image_size,
                pooling: pooling.parse().unwrap(),
                groups,
                p_init,
                p_trainable: trainable,
                seed,
                learning_rate: lr,
                labels: labels.map(PathBuf::from),
                ..ExperimentConfig::default()
            })
    }

    proptest! {
        #[test]
        fn text_round_trip(cfg in arb_config()) {
            let text = cfg.to_text();
            let parsed = ExperimentConfig::parse(&text, "mem").unwrap();
            prop_assert_eq!(&parsed, &cfg);
            prop_assert_eq!(parsed.to_text(), text);
        }
    }
}
