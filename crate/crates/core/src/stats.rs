//! Variance of the mean-absolute-value scale estimate, per-step tracking during
//! training, and the quantize/grow accuracy decomposition.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_2_PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::LayerRole;
use crate::error::{Error, Result};
use crate::nn::model::{Model, WeightView};
use crate::nn::train::{StepInfo, TrainHook};

/// Cross moment `E|w_i||w_j| / sigma^2` of independent Gaussians.
pub const INDEPENDENT_RHO: f64 = FRAC_2_PI;

pub const MIN_TRIALS: usize = 1_000;

/// `Var(mean|w|) = sigma^2/d + (d-1) rho sigma^2/d - 2 sigma^2/pi` for `d`
/// zero-mean Gaussian weights with cross moment `rho`.
pub fn variance_formula(d: usize, sigma: f64, rho: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be at least 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma {sigma} / rho {rho} out of range")));
    }
    let s2 = sigma * sigma;
    let d = d as f64;
    Ok(s2 / d + (d - 1.0) * rho * s2 / d - FRAC_2_PI * s2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorrelationModel {
    Independent,
    /// Every pair of weights has Pearson correlation `r`, `0 <= r < 1`.
    Equicorrelated {
        r: f64,
    },
}

/// How to read the formula's `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RhoReading {
    /// Normalised cross moment `E|w_i||w_j| / sigma^2`; `2/pi` under independence.
    #[default]
    CrossMoment,
    /// Pearson correlation of the signed weights; `0` under independence.
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McVariance {
    /// Sample variance of `mean|w|` across trials.
    pub variance: f64,
    /// Standard error of `variance`.
    pub std_error: f64,
    /// Measured cross moment (`2/pi` reported for `d = 1`, where it does not enter).
    pub cross_moment_rho: f64,
    pub pearson_rho: f64,
    pub trials: usize,
}

impl McVariance {
    pub fn rho(&self, reading: RhoReading) -> f64 {
        match reading {
            RhoReading::CrossMoment => self.cross_moment_rho,
            RhoReading::Pearson => self.pearson_rho,
        }
    }
}

const MC_CHUNKS: usize = 16;

struct ChunkStats {
    means: Vec<f64>,
    cross: f64,
    pearson: f64,
}

/// Monte-Carlo estimate of `Var(mean|w|)`. Trials are split into a fixed
/// number of independently seeded chunks, so results do not depend on the
/// thread count.
pub fn variance_monte_carlo(
    d: usize,
    sigma: f64,
    model: CorrelationModel,
    n_trials: usize,
    seed: u64,
) -> Result<McVariance> {
    if n_trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!("{n_trials} trials (need at least {MIN_TRIALS})")));
    }
    if d == 0 || !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("d {d} / sigma {sigma} out of range")));
    }
    let r = match model {
        CorrelationModel::Independent => 0.0,
        CorrelationModel::Equicorrelated { r } if (0.0..1.0).contains(&r) => r,
        CorrelationModel::Equicorrelated { r } => {
            return Err(Error::InvalidArgument(format!("equicorrelation {r} outside [0, 1)")));
        }
    };
    let (shared, own) = (r.sqrt(), (1.0 - r).sqrt());
    let chunk_ids: Vec<usize> = (0..MC_CHUNKS).collect();
    let chunks: Vec<ChunkStats> = crate::par_map(&chunk_ids, |&chunk| {
        let lo = n_trials * chunk / MC_CHUNKS;
        let hi = n_trials * (chunk + 1) / MC_CHUNKS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        let mut w = vec![0.0; d];
        let mut stats = ChunkStats { means: Vec::with_capacity(hi - lo), cross: 0.0, pearson: 0.0 };
        for _ in lo..hi {
            let z0: f64 = StandardNormal.sample(&mut rng);
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sigma * (shared * z0 + own * z);
            }
            let (sum_abs, sum, sum_sq) =
                w.iter().fold((0.0, 0.0, 0.0), |(a, s, q), &v| (a + v.abs(), s + v, q + v * v));
            stats.means.push(sum_abs / d as f64);
            if d > 1 {
                let pairs = (d * (d - 1)) as f64;
                stats.cross += (sum_abs * sum_abs - sum_sq) / pairs;
                stats.pearson += (sum * sum - sum_sq) / pairs;
            }
        }
        stats
    });
    let n = n_trials as f64;
    let means: Vec<f64> = chunks.iter().flat_map(|c| c.means.iter().copied()).collect();
    let mu = means.iter().sum::<f64>() / n;
    let (m2, m4) = means.iter().fold((0.0, 0.0), |(a, b), &m| {
        let e = (m - mu) * (m - mu);
        (a + e, b + e * e)
    });
    let variance = m2 / (n - 1.0);
    let (pop2, pop4) = (m2 / n, m4 / n);
    let s2 = sigma * sigma;
    let (cross_moment_rho, pearson_rho) = if d > 1 {
        (
            chunks.iter().map(|c| c.cross).sum::<f64>() / (n * s2),
            chunks.iter().map(|c| c.pearson).sum::<f64>() / (n * s2),
        )
    } else {
        (INDEPENDENT_RHO, 0.0)
    };
    Ok(McVariance {
        variance,
        std_error: ((pop4 - pop2 * pop2).max(0.0) / n).sqrt(),
        cross_moment_rho,
        pearson_rho,
        trials: n_trials,
    })
}

/// Which layers a [`VarianceTracker`] follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerFilter {
    All,
    /// Convolutions with more than one group.
    Grouped,
    Role(LayerRole),
    Names(Vec<String>),
}

impl LayerFilter {
    pub fn accepts(&self, view: &WeightView<'_>) -> bool {
        match self {
            LayerFilter::All => true,
            LayerFilter::Grouped => view.groups > 1,
            LayerFilter::Role(r) => view.role == *r,
            LayerFilter::Names(names) => names.iter().any(|n| n == view.name),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub fan_in: usize,
    kernels: Vec<Welford>,
    /// Layer-average `mean|w|` at every recorded step.
    pub trace: Vec<f64>,
}

impl LayerTrace {
    /// Mean over kernels of the per-kernel sample variance of `mean|w|` across steps.
    pub fn variance(&self) -> f64 {
        if self.kernels.is_empty() {
            return 0.0;
        }
        self.kernels.iter().map(Welford::sample_variance).sum::<f64>() / self.kernels.len() as f64
    }

    pub fn steps(&self) -> usize {
        self.trace.len()
    }
}

/// Training hook recording every kernel's `mean|w|` after each optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTracker {
    pub filter: LayerFilter,
    pub skip_warmup: bool,
    pub layers: BTreeMap<String, LayerTrace>,
}

impl VarianceTracker {
    pub fn new(filter: LayerFilter) -> Self {
        Self { filter, skip_warmup: true, layers: BTreeMap::new() }
    }

    pub fn record(&mut self, model: &Model) {
        for view in model.weight_views() {
            if !self.filter.accepts(&view) {
                continue;
            }
            let layer = self.layers.entry(view.name.to_string()).or_default();
            layer.fan_in = view.fan_in;
            let rows = view.weights.chunks(view.fan_in);
            layer.kernels.resize(rows.len(), Welford::default());
            let mut total = 0.0;
            for (acc, row) in layer.kernels.iter_mut().zip(rows) {
                let m = row.iter().map(|w| w.abs()).sum::<f64>() / row.len() as f64;
                acc.push(m);
                total += m;
            }
            layer.trace.push(total / layer.kernels.len() as f64);
        }
    }

    pub fn layer_variance(&self, name: &str) -> Option<f64> {
        self.layers.get(name).map(LayerTrace::variance)
    }

    /// `layer,fan_in,steps,variance` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,fan_in,steps,variance\n");
        for (name, t) in &self.layers {
            out.push_str(&format!("{name},{},{},{:e}\n", t.fan_in, t.steps(), t.variance()));
        }
        out
    }
}

impl TrainHook for VarianceTracker {
    fn after_step(&mut self, info: &StepInfo, model: &Model) {
        if !(self.skip_warmup && info.in_warmup) {
            self.record(model);
        }
    }
}

/// Accuracies in integer micro-percent so the telescoping identity is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccDecomposition {
    pub high_micro: i64,
    pub low_micro: i64,
    pub grown_micro: i64,
}

/// One run's accuracy plus the fields that must agree across a triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccRun {
    pub family: String,
    pub dataset: String,
    /// Percent.
    pub accuracy: f64,
}

pub fn to_micro_percent(acc: f64) -> i64 {
    (acc * 1e6).round() as i64
}

pub fn from_micro_percent(micro: i64) -> f64 {
    micro as f64 / 1e6
}

impl AccDecomposition {
    /// `Acc_low - Acc_high`.
    pub fn delta_q_micro(&self) -> i64 {
        self.low_micro - self.high_micro
    }

    /// `Acc_grown - Acc_low`.
    pub fn delta_g_micro(&self) -> i64 {
        self.grown_micro - self.low_micro
    }

    pub fn total_micro(&self) -> i64 {
        self.grown_micro - self.high_micro
    }

    pub fn delta_q(&self) -> f64 {
        from_micro_percent(self.delta_q_micro())
    }

    pub fn delta_g(&self) -> f64 {
        from_micro_percent(self.delta_g_micro())
    }

    pub fn total(&self) -> f64 {
        from_micro_percent(self.total_micro())
    }
}

pub fn decompose_accuracy(high: &AccRun, low: &AccRun, grown: &AccRun) -> Result<AccDecomposition> {
    for other in [low, grown] {
        if other.family != high.family || other.dataset != high.dataset {
            return Err(Error::MismatchedRuns(format!(
                "{}/{} vs {}/{}",
                high.family, high.dataset, other.family, other.dataset
            )));
        }
    }
    for r in [high, low, grown] {
        if !r.accuracy.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite accuracy for {}", r.family)));
        }
    }
    Ok(AccDecomposition {
        high_micro: to_micro_percent(high.accuracy),
        low_micro: to_micro_percent(low.accuracy),
        grown_micro: to_micro_percent(grown.accuracy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_element_is_half_normal_variance() {
        for rho in [0.0, 0.3, FRAC_2_PI, 0.9] {
            let v = variance_formula(1, 1.0, rho).unwrap();
            assert!((v - (1.0 - FRAC_2_PI)).abs() < 1e-15);
        }
    }

    #[test]
    fn nine_independent_elements() {
        let v = variance_formula(9, 1.0, INDEPENDENT_RHO).unwrap();
        assert!((v - 0.040_37).abs() < 1e-5);
    }

    #[test]
    fn homogeneous_in_sigma_squared() {
        for d in [1, 9, 27, 144] {
            let a = variance_formula(d, 0.7, 0.5).unwrap();
            let b = variance_formula(d, 1.4, 0.5).unwrap();
            assert!((b / a - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_too_few_trials() {
        assert!(variance_monte_carlo(9, 1.0, CorrelationModel::Independent, 999, 0).is_err());
    }

    #[test]
    fn equicorrelated_agrees_with_measured_cross_moment() {
        let mc = variance_monte_carlo(9, 1.0, CorrelationModel::Equicorrelated { r: 0.5 }, 200_000, 4).unwrap();
        let f = variance_formula(9, 1.0, mc.rho(RhoReading::CrossMoment)).unwrap();
        assert!((f - mc.variance).abs() <= 3.0 * mc.std_error, "{f} vs {mc:?}");
        assert!((mc.pearson_rho - 0.5).abs() < 0.01);
    }

    #[test]
    fn independent_hundred() {
        let mc = variance_monte_carlo(100, 1.0, CorrelationModel::Independent, 100_000, 2).unwrap();
        let f = variance_formula(100, 1.0, INDEPENDENT_RHO).unwrap();
        assert!((f - mc.variance).abs() <= 3.0 * mc.std_error);
    }

    #[test]
    fn decomposition_example() {
        let run = |acc| AccRun { family: "mobilenet".into(), dataset: "cifar100".into(), accuracy: acc };
        let d = decompose_accuracy(&run(70.0), &run(68.46), &run(71.07)).unwrap();
        assert_eq!(d.delta_q_micro(), -1_540_000);
        assert_eq!(d.delta_g_micro(), 2_610_000);
        assert_eq!(d.delta_q_micro() + d.delta_g_micro(), d.total_micro());
        let same = decompose_accuracy(&run(55.5), &run(55.5), &run(55.5)).unwrap();
        assert_eq!((same.delta_q(), same.delta_g()), (0.0, 0.0));
        let mut other = run(60.0);
        other.dataset = "cifar10".into();
        assert!(matches!(decompose_accuracy(&run(70.0), &other, &run(71.0)), Err(Error::MismatchedRuns(_))));
    }

    proptest! {
        #[test]
        fn formula_decreases_in_d(rho in 0.0f64..0.999, sigma in 0.01f64..10.0, d in 1usize..500) {
            let a = variance_formula(d, sigma, rho).unwrap();
            let b = variance_formula(d + 1, sigma, rho).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn telescoping_is_exact(h in 0.0f64..100.0, l in 0.0f64..100.0, g in 0.0f64..100.0) {
            let run = |acc| AccRun { family: "f".into(), dataset: "d".into(), accuracy: acc };
            let d = decompose_accuracy(&run(h), &run(l), &run(g)).unwrap();
            prop_assert_eq!(d.delta_q_micro() + d.delta_g_micro(), d.total_micro());
        }
    }
}
