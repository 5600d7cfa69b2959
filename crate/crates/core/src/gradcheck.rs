//! Gradient-check matrix: every analytic gradient in the crate against
//! central finite differences, summarized as the worst relative error per
//! parameter tensor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite_diff::{finite_diff_slice, max_relative_error};
use crate::pooling::{gem_backward_p, gem_backward_x, pool, ActivationMaps, PoolingConfig};
use crate::rng::Rng;
use crate::tensor::{pairwise_sum, Tensor};
use crate::vit::{loss, loss_and_gradients, ToyVitConfig, ToyVitModel};

/// Tolerance every entry must meet.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Step for model-level central differences.
pub const MODEL_STEP: f64 = 1e-5;

/// Step for pooling-level central differences. Pooled values are O(1-10),
/// so a larger step keeps rounding noise well under the floor.
pub const POOLING_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_relative_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub config: ToyVitConfig,
    pub seed: u64,
    /// Images in the loss batch.
    pub images: usize,
    /// Negative-control hook: multiplies the analytic gradient of the first
    /// block's query weights by this factor before comparing.
    pub corrupt_backward: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            config: ToyVitConfig::gradcheck(),
            seed: 0,
            images: 2,
            corrupt_backward: None,
        }
    }
}

/// Runs the pooling checks and the end-to-end model check.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut entries = check_pooling(opts.seed, opts.config.pooling.exponents_trainable)?;
    entries.extend(check_model(opts)?);
    Ok(GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        entries,
    })
}

/// GeM for several fixed exponents and a two-group GGeM, on random positive
/// maps with a random linear readout. Exponent entries are included only
/// when `with_exponents` is set.
pub fn check_pooling(seed: u64, with_exponents: bool) -> Result<Vec<GradCheckEntry>> {
    let mut rng = Rng::new(seed).split(7);
    let (tokens, channels) = (16, 8);
    let data: Vec<f64> = (0..tokens * channels).map(|_| rng.uniform_range(0.1, 10.0)).collect();
    let x = ActivationMaps::new(Tensor::new(vec![tokens, channels], data)?)?;
    let weights = Tensor::vector((0..channels).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;

    let mut configs: Vec<(String, PoolingConfig)> = [1.0, 2.0, 3.0, 5.0, 8.0]
        .iter()
        .map(|&p| (format!("pool.gem(p={p})"), PoolingConfig::gem(p)))
        .collect();
    configs.push(("pool.ggem(p=[2,3])".to_string(), PoolingConfig::ggem(vec![2.0, 3.0])));

    let readout = |maps: &ActivationMaps, cfg: &PoolingConfig| -> f64 {
        let v = pool(maps, cfg).expect("valid pooling");
        let terms: Vec<f64> = v.as_slice().iter().zip(weights.data()).map(|(a, b)| a * b).collect();
        pairwise_sum(&terms)
    };

    let mut out = Vec::new();
    for (name, cfg) in configs {
        let v = pool(&x, &cfg)?;
        let exps = cfg.channel_exponents(channels)?;
        let analytic = gem_backward_x(&x, &exps, &v, &weights)?;
        let numeric = finite_diff_slice(
            |vals| {
                let maps = ActivationMaps::new(Tensor::new(vec![tokens, channels], vals.to_vec()).unwrap()).unwrap();
                readout(&maps, &cfg)
            },
            x.values().data(),
            POOLING_STEP,
        )?;
        out.push(GradCheckEntry {
            name: format!("{name}.x"),
            elements: numeric.len(),
            max_relative_error: max_relative_error(analytic.data(), &numeric),
        });
        if with_exponents {
            let analytic = gem_backward_p(&x, &cfg, &v, &weights)?;
            let numeric = finite_diff_slice(
                |ps| {
                    let mut c = cfg.clone();
                    c.exponents = ps.to_vec();
                    readout(&x, &c)
                },
                &cfg.exponents,
                POOLING_STEP,
            )?;
            out.push(GradCheckEntry {
                name: format!("{name}.p"),
                elements: numeric.len(),
                max_relative_error: max_relative_error(analytic.data(), &numeric),
            });
        }
    }
    Ok(out)
}

/// Builds a model whose parameters are all generic: the default init has
/// zero biases and unit norms, which would leave some gradients untested.
pub fn jittered_model(config: &ToyVitConfig, seed: u64) -> Result<ToyVitModel> {
    let root = Rng::new(seed);
    let mut model = ToyVitModel::new(config.clone(), &mut root.split(0))?;
    let mut rng = root.split(2);
    for (name, t) in model.named_params_mut() {
        if name == "pool.exponents" {
            continue;
        }
        for v in t.data_mut() {
            *v += rng.uniform_range(-0.1, 0.1);
        }
    }
    Ok(model)
}

/// Random `[H, W, C]` images in `[0, 1]`.
pub fn random_images(config: &ToyVitConfig, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = Rng::new(seed).split(3);
    let dims = vec![config.image_size, config.image_size, config.channels_in];
    let len = dims.iter().product::<usize>();
    (0..count)
        .map(|_| Tensor::new(dims.clone(), (0..len).map(|_| rng.uniform()).collect()))
        .collect()
}

/// Every model parameter against central differences of the mean
/// cross-entropy. Frozen exponents are left out of the report.
pub fn check_model(opts: &GradCheckOptions) -> Result<Vec<GradCheckEntry>> {
    let model = jittered_model(&opts.config, opts.seed)?;
    let images = random_images(&opts.config, opts.images.max(1), opts.seed)?;
    let samples: Vec<(&Tensor, usize)> = images
        .iter()
        .enumerate()
        .map(|(i, im)| (im, i % opts.config.classes))
        .collect();
    let (_, mut grads) = loss_and_gradients(&model, &samples)?;
    if let Some(factor) = opts.corrupt_backward {
        for v in grads.blocks[0].query.weight.data_mut() {
            *v *= factor;
        }
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.named_params().into_iter().map(|(_, t)| t.data().to_vec()).collect();

    names
        .par_iter()
        .enumerate()
        .filter(|(_, name)| *name != "pool.exponents" || model.exponents_trainable())
        .map(|(k, name)| {
            let mut probe = model.clone();
            let values = model.named_params()[k].1.data().to_vec();
            let numeric = finite_diff_slice(
                |vals| {
                    probe.named_params_mut()[k].1.data_mut().copy_from_slice(vals);
                    loss(&probe, &samples).unwrap_or(f64::NAN)
                },
                &values,
                MODEL_STEP,
            )
            .map_err(|e| match e {
                Error::NumericFailure { detail, .. } => Error::numeric(name.clone(), detail),
                other => other,
            })?;
            Ok(GradCheckEntry {
                name: name.clone(),
                elements: values.len(),
                max_relative_error: max_relative_error(&analytic[k], &numeric),
            })
        })
        .collect()
}
