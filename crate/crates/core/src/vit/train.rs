use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::format_float;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::backward::{cross_entropy, loss_and_gradients};
use super::forward::forward_cached;
use super::model::ToyVitModel;
use super::ToyVitConfig;

/// Momentum SGD with a cosine learning-rate decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 20,
            learning_rate: 0.05,
            momentum: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let progress = step as f64 / total.max(1) as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Full-dataset evaluation after an epoch. Epoch 0 is the untrained model.
/// `exponents` is empty for strategies without exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub exponents: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Trajectory of exponent `g` across epochs.
    pub fn exponent_trajectory(&self, g: usize) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.exponents.get(g).copied()).collect()
    }

    /// `epoch,loss,acc,p_1..p_G`.
    pub fn to_csv(&self) -> String {
        let groups = self.records.first().map_or(0, |r| r.exponents.len());
        let mut out = String::from("epoch,loss,acc");
        for g in 1..=groups {
            out.push_str(&format!(",p_{g}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{}", r.epoch, format_float(r.loss), format_float(r.accuracy)));
            for &p in &r.exponents {
                out.push(',');
                out.push_str(&format_float(p));
            }
            out.push('\n');
        }
        out
    }
}

/// Mean loss and accuracy over `samples`. Images are evaluated in parallel;
/// the reduction runs in sample order so the result is deterministic.
pub fn evaluate(model: &ToyVitModel, samples: &[(&Tensor, usize)]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let per_sample: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|&(image, label)| {
            let cache = forward_cached(model, image)?;
            let predicted = argmax(&cache.logits);
            Ok((cross_entropy(&cache.logits, label).0, predicted == label))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() / n;
    let correct = per_sample.iter().filter(|(_, c)| *c).count() as f64;
    Ok((loss, correct / n))
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len())
        .reduce(|best, i| if xs[i] > xs[best] { i } else { best })
        .unwrap_or(0)
}

/// Trains a fresh model. Initialization draws from stream 0 of `seed`, batch
/// shuffling from stream 1. Optimizer steps run on one thread in a fixed
/// order, so the same inputs give bitwise-identical results.
pub fn train(dataset: &Dataset, config: &ToyVitConfig, opts: &TrainConfig) -> Result<(ToyVitModel, TrainingTrace)> {
    opts.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if dataset.classes > config.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the model has {}",
            dataset.classes, config.classes
        )));
    }
    let expected = [config.image_size, config.image_size, config.channels_in];
    if dataset.images[0].dims() != expected {
        return Err(Error::invalid(format!(
            "dataset images are {:?}, model expects {expected:?}",
            dataset.images[0].dims()
        )));
    }

    let root = Rng::new(opts.seed);
    let mut model = ToyVitModel::new(config.clone(), &mut root.split(0))?;
    let mut order_rng = root.split(1);
    let trainable = model.exponents_trainable();
    let uses_exponents = config.pooling.strategy.uses_exponents();
    let exponents = |m: &ToyVitModel| if uses_exponents { m.exponents.data().to_vec() } else { Vec::new() };
    let mut velocity = model.zeros_like();

    let all = dataset.all_samples();
    let mut trace = TrainingTrace::default();
    let (loss, accuracy) = evaluate(&model, &all)?;
    trace.records.push(EpochRecord {
        epoch: 0,
        loss,
        accuracy,
        exponents: exponents(&model),
    });

    let batches_per_epoch = dataset.len().div_ceil(opts.batch_size);
    let total_steps = batches_per_epoch * opts.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 1..=opts.epochs {
        order_rng.shuffle(&mut order);
        for batch in order.chunks(opts.batch_size) {
            let samples = dataset.samples(batch);
            let diverged = |model: &ToyVitModel| Error::Diverged {
                epoch,
                step,
                last_good: Box::new(model.clone()),
            };
            let (loss, grads) = match loss_and_gradients(&model, &samples) {
                Ok(r) => r,
                Err(Error::NumericFailure { location, detail }) => {
                    log::error!("numeric failure in {location}: {detail}");
                    return Err(diverged(&model));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(&model));
            }
            let lr = opts.learning_rate_at(step, total_steps);
            let previous = model.clone();
            let grad_params = grads.named_params();
            for (((name, param), (_, vel)), (_, grad)) in
                model.named_params_mut().into_iter().zip(velocity.named_params_mut()).zip(grad_params)
            {
                if name == "pool.exponents" && !trainable {
                    continue;
                }
                for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                    *v = opts.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            model.project_exponents();
            if !model.is_finite() {
                return Err(diverged(&previous));
            }
            step += 1;
        }
        let (loss, accuracy) = evaluate(&model, &all)?;
        log::info!("epoch {epoch}: loss {loss:.4} acc {accuracy:.3}");
        trace.records.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            exponents: exponents(&model),
        });
    }
    Ok((model, trace))
}
