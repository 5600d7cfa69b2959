//! Average, max, GeM and group GeM pooling over ViT patch tokens.
//!
//! GeM pools channel `d` as the power mean `((1/n) Σ xᵖ)^(1/p)` over the `n`
//! patch tokens. GGeM splits the `D` channels into `G` contiguous groups of
//! `D/G` channels and gives each group its own exponent, so with `G` equal to
//! the attention head count every head's slice of the embedding shares one
//! exponent. `G = 1` is GeM; `G = 1, p = 1` is average pooling.

mod backward;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{clamp_min, pairwise_sum, Tensor, DEFAULT_CLAMP_EPS};

pub use backward::{gem_backward_p, gem_backward_x};

/// Floor kept on every exponent after each optimizer step.
pub const MIN_EXPONENT: f64 = 1e-3;

/// Above this exponent the power mean is evaluated through log-sum-exp.
pub const LOG_DOMAIN_THRESHOLD: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    ClassToken,
    Average,
    Max,
    Gem,
    Ggem,
}

impl PoolingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingStrategy::ClassToken => "class_token",
            PoolingStrategy::Average => "average",
            PoolingStrategy::Max => "max",
            PoolingStrategy::Gem => "gem",
            PoolingStrategy::Ggem => "ggem",
        }
    }

    pub(crate) fn id(self) -> u32 {
        match self {
            PoolingStrategy::ClassToken => 0,
            PoolingStrategy::Average => 1,
            PoolingStrategy::Max => 2,
            PoolingStrategy::Gem => 3,
            PoolingStrategy::Ggem => 4,
        }
    }

    pub(crate) fn from_id(id: u32) -> Option<Self> {
        Some(match id {
            0 => PoolingStrategy::ClassToken,
            1 => PoolingStrategy::Average,
            2 => PoolingStrategy::Max,
            3 => PoolingStrategy::Gem,
            4 => PoolingStrategy::Ggem,
            _ => return None,
        })
    }

    /// Whether the strategy raises activations to a power (and so clamps).
    pub fn uses_exponents(self) -> bool {
        matches!(self, PoolingStrategy::Gem | PoolingStrategy::Ggem)
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "class_token" | "cls" => PoolingStrategy::ClassToken,
            "average" | "avg" => PoolingStrategy::Average,
            "max" => PoolingStrategy::Max,
            "gem" => PoolingStrategy::Gem,
            "ggem" => PoolingStrategy::Ggem,
            other => {
                return Err(Error::invalid(format!(
                    "unknown pooling strategy `{other}` (expected class_token, average, max, gem or ggem)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub strategy: PoolingStrategy,
    pub groups: usize,
    pub exponents: Vec<f64>,
    pub exponents_trainable: bool,
    pub clamp_eps: f64,
}

impl PoolingConfig {
    pub fn class_token() -> Self {
        Self::fixed(PoolingStrategy::ClassToken, vec![1.0])
    }

    pub fn average() -> Self {
        Self::fixed(PoolingStrategy::Average, vec![1.0])
    }

    pub fn max() -> Self {
        Self::fixed(PoolingStrategy::Max, vec![1.0])
    }

    /// GeM with one shared exponent, trainable by default.
    pub fn gem(p: f64) -> Self {
        PoolingConfig {
            strategy: PoolingStrategy::Gem,
            groups: 1,
            exponents: vec![p],
            exponents_trainable: true,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// GGeM with one exponent per group, trainable by default.
    pub fn ggem(exponents: Vec<f64>) -> Self {
        PoolingConfig {
            strategy: PoolingStrategy::Ggem,
            groups: exponents.len(),
            exponents,
            exponents_trainable: true,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    /// GGeM with every group starting from the same exponent.
    pub fn ggem_uniform(groups: usize, p: f64) -> Self {
        Self::ggem(vec![p; groups])
    }

    fn fixed(strategy: PoolingStrategy, exponents: Vec<f64>) -> Self {
        PoolingConfig {
            strategy,
            groups: 1,
            exponents,
            exponents_trainable: false,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn trainable(mut self, trainable: bool) -> Self {
        self.exponents_trainable = trainable;
        self
    }

    pub fn with_clamp_eps(mut self, eps: f64) -> Self {
        self.clamp_eps = eps;
        self
    }

    /// Checks the config on its own and, when given, against a channel count.
    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        if !(self.clamp_eps > 0.0) || !self.clamp_eps.is_finite() {
            return Err(Error::invalid(format!("clamp_eps must be positive, got {}", self.clamp_eps)));
        }
        if self.groups == 0 {
            return Err(Error::invalid("groups must be at least 1"));
        }
        if self.exponents.len() != self.groups {
            return Err(Error::invalid(format!(
                "{} exponents given for {} groups",
                self.exponents.len(),
                self.groups
            )));
        }
        match self.strategy {
            PoolingStrategy::Gem | PoolingStrategy::Ggem => {
                if self.strategy == PoolingStrategy::Gem && self.groups != 1 {
                    return Err(Error::invalid("gem pooling uses a single group; use ggem for more"));
                }
                if let Some(p) = self.exponents.iter().find(|p| !p.is_finite() || **p < MIN_EXPONENT) {
                    return Err(Error::invalid(format!(
                        "pooling exponent {p} is below the floor {MIN_EXPONENT}"
                    )));
                }
            }
            _ => {
                if self.groups != 1 {
                    return Err(Error::invalid(format!("{} pooling takes no groups", self.strategy)));
                }
                if self.exponents_trainable {
                    return Err(Error::invalid(format!("{} pooling has no trainable exponent", self.strategy)));
                }
            }
        }
        if let Some(d) = channels {
            if d % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "channels must divide evenly into groups: D mod G == 0 fails for D={d}, G={}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Exponent applied to each of `channels` channels.
    pub fn channel_exponents(&self, channels: usize) -> Result<Vec<f64>> {
        self.validate(Some(channels))?;
        let width = channels / self.groups;
        Ok((0..channels).map(|d| self.exponents[d / width]).collect())
    }
}

/// The `n = N²` patch tokens of one image, `[n, D]`, plus the class token when
/// the maps were cut from a full sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMaps {
    side: usize,
    channels: usize,
    values: Tensor,
    class_token: Option<Vec<f64>>,
}

impl ActivationMaps {
    /// Accepts `[N², D]` or `[N, N, D]`.
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, d) = match *values.dims() {
            [n, d] => (n, d),
            [a, b, d] if a == b => (a * b, d),
            ref dims => {
                return Err(Error::invalid(format!(
                    "activation maps must be [N², D] or [N, N, D], got {dims:?}"
                )))
            }
        };
        let side = integer_sqrt(n).ok_or_else(|| {
            Error::invalid(format!("token count {n} is not a perfect square N²"))
        })?;
        Ok(ActivationMaps {
            side,
            channels: d,
            values: values.reshape(vec![n, d])?,
            class_token: None,
        })
    }

    /// Splits a `[N² + 1, D]` token sequence into class token and patch maps.
    pub fn from_sequence(sequence: &Tensor) -> Result<Self> {
        let [t, d] = *sequence.dims() else {
            return Err(Error::invalid(format!(
                "token sequence must be [N² + 1, D], got {:?}",
                sequence.dims()
            )));
        };
        if t < 2 {
            return Err(Error::invalid("token sequence needs a class token and at least one patch"));
        }
        let patches = Tensor::new(vec![t - 1, d], sequence.data()[d..].to_vec())?;
        let mut maps = ActivationMaps::new(patches)?;
        maps.class_token = Some(sequence.row(0).to_vec());
        Ok(maps)
    }

    pub fn n_tokens(&self) -> usize {
        self.side * self.side
    }

    /// `N`, the patch grid side.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn class_token(&self) -> Option<&[f64]> {
        self.class_token.as_deref()
    }

    /// Activations of channel `d` in token order.
    pub fn channel(&self, d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_tokens());
        self.gather_channel(d, &mut out);
        out
    }

    fn gather_channel(&self, d: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.values.data().iter().skip(d).step_by(self.channels).copied());
    }

    pub fn clamped(&self, eps: f64) -> Result<Self> {
        Ok(ActivationMaps {
            side: self.side,
            channels: self.channels,
            values: clamp_min(&self.values, eps)?,
            class_token: self.class_token.clone(),
        })
    }

    fn map_channels(&self, mut f: impl FnMut(usize, &[f64]) -> f64) -> PooledVector {
        let mut scratch = Vec::with_capacity(self.n_tokens());
        let values = (0..self.channels)
            .map(|d| {
                self.gather_channel(d, &mut scratch);
                f(d, &scratch)
            })
            .collect();
        PooledVector::from_vec(values)
    }

    fn require_positive(&self) -> Result<()> {
        if let Some(i) = self.values.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::invalid(format!(
                "power pooling needs positive activations; token {} channel {} is {} (clamp first)",
                i / self.channels,
                i % self.channels,
                self.values.data()[i]
            )));
        }
        Ok(())
    }
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// A pooled `D`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector {
    values: Tensor,
}

impl PooledVector {
    pub(crate) fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        let values = Tensor::new(vec![n], values).expect("pooled values are finite");
        PooledVector { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn avg_pool(x: &ActivationMaps) -> PooledVector {
    let n = x.n_tokens() as f64;
    x.map_channels(|_, col| {
        if is_constant(col) {
            col[0]
        } else {
            pairwise_sum(col) / n
        }
    })
}

pub fn max_pool(x: &ActivationMaps) -> PooledVector {
    x.map_channels(|_, col| col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Group of 1-based channel `i` under sequential grouping: `⌈i / (D/G)⌉`.
pub fn group_index(i: usize, channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::invalid(format!(
            "channels must divide evenly into groups: D mod G == 0 fails for D={channels}, G={groups}"
        )));
    }
    if i == 0 || i > channels {
        return Err(Error::invalid(format!("channel index {i} outside 1..={channels}")));
    }
    let width = channels / groups;
    Ok(i.div_ceil(width))
}

/// GeM with one exponent shared by every channel.
pub fn gem_pool(x: &ActivationMaps, p: f64) -> Result<PooledVector> {
    check_exponent(p)?;
    x.require_positive()?;
    Ok(x.map_channels(|_, col| power_mean(col, p)))
}

/// GeM with exponent `p_{y(d)}` on channel `d`.
pub fn ggem_pool(x: &ActivationMaps, cfg: &PoolingConfig) -> Result<PooledVector> {
    if cfg.strategy != PoolingStrategy::Ggem {
        return Err(Error::invalid(format!("ggem_pool called with {} config", cfg.strategy)));
    }
    let exponents = cfg.channel_exponents(x.channels())?;
    x.require_positive()?;
    Ok(x.map_channels(|d, col| power_mean(col, exponents[d])))
}

/// Applies `cfg` to `x`, clamping first for GeM/GGeM. The class-token
/// strategy needs maps built with [`ActivationMaps::from_sequence`].
pub fn pool(x: &ActivationMaps, cfg: &PoolingConfig) -> Result<PooledVector> {
    cfg.validate(Some(x.channels()))?;
    match cfg.strategy {
        PoolingStrategy::ClassToken => x
            .class_token()
            .map(|row| PooledVector::from_vec(row.to_vec()))
            .ok_or_else(|| {
                Error::invalid("class_token pooling needs the full token sequence including position 0")
            }),
        PoolingStrategy::Average => Ok(avg_pool(x)),
        PoolingStrategy::Max => Ok(max_pool(x)),
        PoolingStrategy::Gem => gem_pool(&x.clamped(cfg.clamp_eps)?, cfg.exponents[0]),
        PoolingStrategy::Ggem => ggem_pool(&x.clamped(cfg.clamp_eps)?, cfg),
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::invalid(format!("pooling exponent must be positive, got {p}")));
    }
    Ok(())
}

/// `((1/n) Σ xᵖ)^(1/p)` for positive `xs`.
pub(crate) fn power_mean(xs: &[f64], p: f64) -> f64 {
    if is_constant(xs) {
        return xs[0];
    }
    let n = xs.len() as f64;
    if p <= LOG_DOMAIN_THRESHOLD {
        let powered: Vec<f64> = xs.iter().map(|&x| x.powf(p)).collect();
        let mean = pairwise_sum(&powered) / n;
        if mean.is_finite() && mean > 0.0 {
            return mean.powf(1.0 / p);
        }
    }
    let scaled: Vec<f64> = xs.iter().map(|&x| p * x.ln()).collect();
    let v = ((log_sum_exp(&scaled) - n.ln()) / p).exp();
    // The power mean lies in [max·n^(−1/p), max]. At large p it sits on the
    // lower end to within far less than an ulp, so rounding can land just
    // outside; the lower end is padded by a few ulps to stay on the safe side.
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower = max * (-n.ln() / p).exp() * (1.0 + 8.0 * f64::EPSILON);
    v.max(lower).min(max)
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    m + pairwise_sum(&shifted).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn maps(tokens: usize, channels: usize, data: Vec<f64>) -> ActivationMaps {
        ActivationMaps::new(Tensor::new(vec![tokens, channels], data).unwrap()).unwrap()
    }

    /// Each channel gets the same column `col`.
    fn replicated(col: &[f64], channels: usize) -> ActivationMaps {
        let data = col.iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
        maps(col.len(), channels, data)
    }

    fn random_maps(rng: &mut Rng, side: usize, channels: usize, lo: f64, hi: f64) -> ActivationMaps {
        let n = side * side;
        let data = (0..n * channels).map(|_| rng.uniform_range(lo, hi)).collect();
        maps(n, channels, data)
    }

    #[test]
    fn average_examples() {
        // [2, 4, 6] is not a square token count, so pad with the mean.
        let x = maps(4, 1, vec![2.0, 4.0, 6.0, 4.0]);
        assert_eq!(avg_pool(&x).as_slice(), &[4.0]);
        let x = replicated(&[1.0, 3.0, 1.0, 3.0], 2);
        assert_eq!(avg_pool(&x).as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn constant_field_is_reproduced_by_every_strategy() {
        let row = [0.3, 1.7, 5.0];
        let data: Vec<f64> = (0..9).flat_map(|_| row).collect();
        let x = maps(9, 3, data);
        assert_eq!(avg_pool(&x).as_slice(), &row);
        assert_eq!(max_pool(&x).as_slice(), &row);
        assert_eq!(gem_pool(&x, 3.0).unwrap().as_slice(), &row);
        assert_eq!(gem_pool(&x, 50.0).unwrap().as_slice(), &row);
    }

    #[test]
    fn max_examples() {
        let x = maps(4, 1, vec![2.0, 4.0, 6.0, 2.0]);
        assert_eq!(max_pool(&x).as_slice(), &[6.0]);
        let x = maps(4, 1, vec![0.1, 0.9, 0.5, 0.5]);
        assert_eq!(max_pool(&x).as_slice(), &[0.9]);
    }

    #[test]
    fn group_index_examples() {
        assert_eq!(group_index(1, 768, 12).unwrap(), 1);
        assert_eq!(group_index(64, 768, 12).unwrap(), 1);
        assert_eq!(group_index(65, 768, 12).unwrap(), 2);
        for g in [1, 2, 3, 4, 6, 8, 12, 768] {
            assert_eq!(group_index(768, 768, g).unwrap(), g);
        }
        assert!(matches!(group_index(1, 10, 3), Err(Error::InvalidArgument(_))));
        assert!(group_index(0, 8, 2).is_err());
    }

    #[test]
    fn gem_examples() {
        let x = replicated(&[1.0, 3.0, 1.0, 3.0], 1);
        let v = gem_pool(&x, 2.0).unwrap();
        assert!((v.as_slice()[0] - 5f64.sqrt()).abs() < 1e-12);
        assert!((v.as_slice()[0] - 2.2360680).abs() < 1e-7);
    }

    #[test]
    fn gem_p100_close_to_max() {
        // [1, 2, 4] padded to four tokens with a duplicate 1.
        let col = [1.0, 2.0, 4.0, 1.0];
        let x = replicated(&col, 1);
        let v = gem_pool(&x, 100.0).unwrap().as_slice()[0];
        // Independent evaluation: 4 · ((1 + (1/4)^100 · 2 + (1/2)^100) / 4)^(1/100).
        let expected = 4.0 * ((1.0 + 2.0 * 0.25f64.powi(100) + 0.5f64.powi(100)) / 4.0).powf(0.01);
        assert!((v - expected).abs() < 1e-12);
        let bound = 4.0 * (1.0 - 4f64.powf(-0.01));
        assert!(4.0 - v <= bound);
        assert!(v < 4.0);
    }

    #[test]
    fn gem_rejects_bad_exponent_and_non_positive_input() {
        let x = replicated(&[1.0, 3.0, 1.0, 3.0], 1);
        assert!(matches!(gem_pool(&x, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(gem_pool(&x, -2.0), Err(Error::InvalidArgument(_))));
        let neg = replicated(&[1.0, -3.0, 1.0, 3.0], 1);
        assert!(gem_pool(&neg, 2.0).is_err());
    }

    #[test]
    fn ggem_hand_example() {
        let x = replicated(&[1.0, 3.0, 1.0, 3.0], 4);
        let cfg = PoolingConfig::ggem(vec![1.0, 2.0]);
        let v = ggem_pool(&x, &cfg).unwrap();
        let s5 = 5f64.sqrt();
        let expected = [2.0, 2.0, s5, s5];
        for (a, b) in v.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ggem_degenerate_group_counts() {
        let mut rng = Rng::new(5);
        let x = random_maps(&mut rng, 3, 8, 0.1, 10.0);
        for p in [0.5, 1.0, 2.5, 7.0, 42.0] {
            let gem = gem_pool(&x, p).unwrap();
            let one = ggem_pool(&x, &PoolingConfig::ggem(vec![p])).unwrap();
            let all = ggem_pool(&x, &PoolingConfig::ggem(vec![p; 8])).unwrap();
            assert!(gem.tensor().max_abs_diff(one.tensor()) <= 1e-12);
            assert!(gem.tensor().max_abs_diff(all.tensor()) <= 1e-12);
        }
    }

    #[test]
    fn ggem_rejects_indivisible_groups() {
        let x = replicated(&[1.0, 3.0, 1.0, 3.0], 4);
        let err = ggem_pool(&x, &PoolingConfig::ggem(vec![1.0, 2.0, 3.0])).unwrap_err();
        assert!(err.to_string().contains("D mod G"), "{err}");
    }

    #[test]
    fn pool_dispatch_degeneracies() {
        let mut rng = Rng::new(9);
        let x = random_maps(&mut rng, 4, 6, 0.1, 10.0);
        let avg = pool(&x, &PoolingConfig::average()).unwrap();
        let as_ggem = pool(&x, &PoolingConfig::ggem(vec![1.0]).trainable(false)).unwrap();
        assert!(avg.tensor().max_abs_diff(as_ggem.tensor()) <= 1e-12);
        let gem = pool(&x, &PoolingConfig::gem(3.0)).unwrap();
        let as_ggem = pool(&x, &PoolingConfig::ggem(vec![3.0])).unwrap();
        assert!(gem.tensor().max_abs_diff(as_ggem.tensor()) <= 1e-12);
    }

    #[test]
    fn pool_class_token_selects_position_zero() {
        let r = [0.25, -1.5, 9.0];
        let mut data = r.to_vec();
        data.extend((0..4 * 3).map(|i| i as f64));
        let seq = Tensor::new(vec![5, 3], data).unwrap();
        let x = ActivationMaps::from_sequence(&seq).unwrap();
        assert_eq!(pool(&x, &PoolingConfig::class_token()).unwrap().as_slice(), &r);
        // Plain maps carry no class token.
        let bare = ActivationMaps::new(x.values().clone()).unwrap();
        assert!(pool(&bare, &PoolingConfig::class_token()).is_err());
    }

    #[test]
    fn pool_clamps_before_power() {
        let x = replicated(&[-1.0, 4.0, 4.0, 4.0], 1);
        let v = pool(&x, &PoolingConfig::gem(1.0)).unwrap().as_slice()[0];
        assert!((v - (3.0 * 4.0 + 1e-6) / 4.0).abs() < 1e-12);
        // Average pooling sees raw values.
        let v = pool(&x, &PoolingConfig::average()).unwrap().as_slice()[0];
        assert_eq!(v, 11.0 / 4.0);
    }

    #[test]
    fn maps_shape_validation() {
        assert!(ActivationMaps::new(Tensor::zeros(&[3, 2])).is_err());
        let cube = ActivationMaps::new(Tensor::zeros(&[2, 2, 5])).unwrap();
        assert_eq!((cube.side(), cube.n_tokens(), cube.channels()), (2, 4, 5));
    }

    #[test]
    fn config_validation() {
        assert!(PoolingConfig::gem(3.0).validate(Some(7)).is_ok());
        assert!(PoolingConfig::gem(1e-4).validate(None).is_err());
        assert!(PoolingConfig::ggem(vec![3.0; 3]).validate(Some(8)).is_err());
        assert!(PoolingConfig::average().trainable(true).validate(None).is_err());
        let mut cfg = PoolingConfig::gem(3.0);
        cfg.groups = 2;
        cfg.exponents = vec![3.0, 3.0];
        assert!(cfg.validate(Some(8)).is_err());
    }

    #[test]
    fn large_exponent_uses_log_domain_without_overflow() {
        let x = replicated(&[10.0, 1.0, 5.0, 10.0], 1);
        let v = gem_pool(&x, 500.0).unwrap().as_slice()[0];
        assert!(v.is_finite());
        assert!(v <= 10.0 && v > 9.98);
    }

    fn channel_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.1f64..10.0, 9)
    }

    proptest! {
        #[test]
        fn sandwich(col in channel_strategy(), p in 1e-3f64..100.0) {
            let x = replicated(&col, 1);
            let v = gem_pool(&x, p).unwrap().as_slice()[0];
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= v && v <= hi, "{} not in [{}, {}]", v, lo, hi);
        }

        #[test]
        fn monotone_in_exponent(col in channel_strategy(), p1 in 0.01f64..50.0, dp in 0.01f64..50.0) {
            let x = replicated(&col, 1);
            let a = gem_pool(&x, p1).unwrap().as_slice()[0];
            let b = gem_pool(&x, p1 + dp).unwrap().as_slice()[0];
            prop_assert!(a <= b, "p={} gives {} > p={} gives {}", p1, a, p1 + dp, b);
        }

        #[test]
        fn positively_homogeneous(col in channel_strategy(), p in 0.5f64..30.0) {
            let x = replicated(&col, 1);
            let v = gem_pool(&x, p).unwrap().as_slice()[0];
            for c in [0.5, 2.0, 10.0] {
                let scaled: Vec<f64> = col.iter().map(|x| x * c).collect();
                let w = gem_pool(&replicated(&scaled, 1), p).unwrap().as_slice()[0];
                prop_assert!((w - c * v).abs() <= 1e-10 * (c * v));
            }
        }

        #[test]
        fn token_permutation_invariance(seed in any::<u64>(), p in 0.5f64..30.0) {
            let mut rng = Rng::new(seed);
            let x = random_maps(&mut rng, 4, 3, 0.1, 10.0);
            let mut order: Vec<usize> = (0..16).collect();
            rng.shuffle(&mut order);
            let shuffled: Vec<f64> = order.iter().flat_map(|&t| x.values().row(t).to_vec()).collect();
            let y = maps(16, 3, shuffled);
            for cfg in [PoolingConfig::average(), PoolingConfig::max(), PoolingConfig::gem(p), PoolingConfig::ggem(vec![p, 1.0 + p, 2.0])] {
                let a = pool(&x, &cfg).unwrap();
                let b = pool(&y, &cfg).unwrap();
                for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
                }
            }
        }
    }
}
