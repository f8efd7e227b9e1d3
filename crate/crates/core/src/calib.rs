//! Clipping-ratio calibration for the uniform quantizer.
//!
//! For Gaussian weights the MSE-optimal clip `a*` is proportional to `sigma`,
//! and so is `mean|w|`. The ratio `c = mean|w| / a*` therefore depends only on
//! the bitwidth, which lets training derive `a = mean|W[i,:]| / c` per filter
//! without re-running any search.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{max_level, uniform_scalar, TieBreak};

pub const MIN_SAMPLES: usize = 100_000;
pub const MIN_GRID_POINTS: usize = 50;

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (ll, lh) = (lo.ln(), hi.ln());
    (0..n).map(|i| (ll + (lh - ll) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Squared-error objective over a fixed Gaussian sample.
#[derive(Debug, Clone)]
pub struct ClipObjective {
    samples: Vec<f64>,
    sigma: f64,
}

impl ClipObjective {
    /// Draws `n` values from `N(0, sigma^2)`. Standard normals are drawn from
    /// `seed` and then scaled, so two sigmas with one seed share the same shape.
    pub fn sample(n: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sigma
            })
            .collect();
        Self { samples, sigma }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean_abs(&self) -> f64 {
        self.samples.iter().map(|w| w.abs()).sum::<f64>() / self.samples.len() as f64
    }

    /// `||Q_a(W) - W||^2` for a `bits`-bit uniform quantizer clipped at `clip`.
    pub fn sq_error(&self, bits: u8, clip: f64) -> f64 {
        let levels = max_level(bits) as f64;
        let (step, inv_step) = (clip / levels, levels / clip);
        let tie = TieBreak::HalfAwayFromZero;
        let sq = |w: f64| {
            let e = uniform_scalar(w, clip, inv_step, step, tie) - w;
            e * e
        };
        // Four independent partial sums keep the adds from serializing.
        let chunks = self.samples.chunks_exact(4);
        let tail: f64 = chunks.remainder().iter().map(|&w| sq(w)).sum();
        let mut acc = [0.0f64; 4];
        for c in chunks {
            for k in 0..4 {
                acc[k] += sq(c[k]);
            }
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// Objective at every grid point.
    pub fn curve(&self, bits: u8, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&a| self.sq_error(bits, a)).collect()
    }

    /// Grid argmin (first minimum on ties).
    pub fn argmin(&self, bits: u8, grid: &[f64]) -> (usize, Vec<f64>) {
        let curve = self.curve(bits, grid);
        let idx = curve.iter().enumerate().fold(0, |best, (i, &v)| if v < curve[best] { i } else { best });
        (idx, curve)
    }
}

/// Outcome of one clip search.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSearch {
    pub a_star: f64,
    pub c: f64,
    pub mean_abs: f64,
    pub index: usize,
    /// Objective values over the whole candidate grid.
    pub objective: Vec<f64>,
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        0..=2 => Err(Error::WrongScheme(bits)),
        3..=8 => Ok(()),
        _ => Err(Error::UnsupportedBitwidth(bits)),
    }
}

/// Finds `a* = argmin_a ||Q_a(W) - W||^2` over `candidates` for one Gaussian draw.
pub fn simulate_clip_search(
    bits: u8,
    sigma: f64,
    n_samples: usize,
    candidates: &[f64],
    seed: u64,
) -> Result<ClipSearch> {
    check_bits(bits)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("{n_samples} samples is below the minimum of {MIN_SAMPLES}")));
    }
    if candidates.len() < MIN_GRID_POINTS {
        return Err(Error::GridTooCoarse(candidates.len()));
    }
    if candidates.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidArgument("candidate clips must be positive".into()));
    }
    let objective = ClipObjective::sample(n_samples, sigma, seed);
    let (index, curve) = objective.argmin(bits, candidates);
    let a_star = candidates[index];
    let mean_abs = objective.mean_abs();
    Ok(ClipSearch { a_star, c: mean_abs / a_star, mean_abs, index, objective: curve })
}

/// Simulation settings recorded with every table entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub samples: usize,
    pub sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub grid_points: usize,
    /// Grid bounds in units of sigma.
    pub grid_lo: f64,
    pub grid_hi: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            sigmas: vec![0.5, 1.0, 2.0],
            seeds: vec![0, 1, 2],
            grid_points: 400,
            grid_lo: 0.25,
            grid_hi: 8.0,
        }
    }
}

impl CalibConfig {
    pub fn grid(&self, sigma: f64) -> Vec<f64> {
        log_grid(self.grid_lo * sigma, self.grid_hi * sigma, self.grid_points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(flatten)]
    pub config: CalibConfig,
    /// `a*/sigma` for every (sigma, seed) run, sigma-major.
    pub a_star_over_sigma: Vec<f64>,
    /// `c` for every (sigma, seed) run, same order.
    pub c_runs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibEntry {
    pub bitwidth: u8,
    pub c: f64,
    pub provenance: Provenance,
}

/// Clip ratio `c` per uniform bitwidth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibTable {
    entries: Vec<CalibEntry>,
}

const BUILTIN_TABLE: &str = include_str!("../data/calib_default.json");

impl CalibTable {
    /// The table shipped with the crate, produced by `qat calibrate` with
    /// [`CalibConfig::default`] for bitwidths 3 through 8.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_TABLE).expect("bundled calibration table is valid JSON")
    }

    pub fn from_entries(mut entries: Vec<CalibEntry>) -> Self {
        entries.sort_by_key(|e| e.bitwidth);
        Self { entries }
    }

    pub fn entries(&self) -> &[CalibEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ratio(&self, bits: u8) -> Result<f64> {
        self.entries.iter().find(|e| e.bitwidth == bits).map(|e| e.c).ok_or(Error::MissingCalibration(bits))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration table serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        for e in &table.entries {
            if !(e.c > 0.0 && e.c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{}: entry for {}-bit has non-positive c {}",
                    path.display(),
                    e.bitwidth,
                    e.c
                )));
            }
        }
        Ok(Self::from_entries(table.entries))
    }
}

/// Runs the clip search for every `(bits, sigma, seed)` triple and averages
/// `c` over sigmas and seeds.
pub fn build_calib_table(bit_list: &[u8], config: &CalibConfig) -> Result<CalibTable> {
    for &b in bit_list {
        check_bits(b)?;
    }
    if config.sigmas.is_empty() || config.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one sigma and one seed".into()));
    }
    let jobs: Vec<(u8, f64, u64)> = bit_list
        .iter()
        .flat_map(|&b| config.sigmas.iter().flat_map(move |&s| config.seeds.iter().map(move |&seed| (b, s, seed))))
        .collect();
    let results: Vec<Result<(u8, f64, ClipSearch)>> = crate::par_map(&jobs, |&(b, sigma, seed)| {
        let grid = config.grid(sigma);
        simulate_clip_search(b, sigma, config.samples, &grid, seed).map(|r| (b, sigma, r))
    });

    let mut entries = Vec::with_capacity(bit_list.len());
    for &b in bit_list {
        let mut a_over_sigma = Vec::new();
        let mut c_runs = Vec::new();
        for r in &results {
            let (rb, sigma, search) = r.as_ref().map_err(|e| Error::InvalidArgument(e.to_string()))?;
            if *rb == b {
                a_over_sigma.push(search.a_star / sigma);
                c_runs.push(search.c);
            }
        }
        let c = c_runs.iter().sum::<f64>() / c_runs.len() as f64;
        entries.push(CalibEntry {
            bitwidth: b,
            c,
            provenance: Provenance { config: config.clone(), a_star_over_sigma: a_over_sigma, c_runs },
        });
    }
    Ok(CalibTable::from_entries(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> CalibConfig {
        CalibConfig { samples: MIN_SAMPLES, ..CalibConfig::default() }
    }

    #[test]
    fn grid_validation() {
        let coarse = log_grid(0.5, 6.0, 49);
        assert!(matches!(simulate_clip_search(4, 1.0, MIN_SAMPLES, &coarse, 0), Err(Error::GridTooCoarse(49))));
        let grid = log_grid(0.25, 8.0, 400);
        assert!(simulate_clip_search(4, 1.0, 10, &grid, 0).is_err());
        assert!(matches!(simulate_clip_search(2, 1.0, MIN_SAMPLES, &grid, 0), Err(Error::WrongScheme(2))));
        assert!(simulate_clip_search(4, -1.0, MIN_SAMPLES, &grid, 0).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.25, 8.0, 400);
        assert_eq!(g.len(), 400);
        assert!((g[0] - 0.25).abs() < 1e-12 && (g[399] - 8.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn search_is_deterministic_and_locally_minimal() {
        let grid = log_grid(0.25, 8.0, 400);
        let a = simulate_clip_search(4, 1.0, MIN_SAMPLES, &grid, 7).unwrap();
        let b = simulate_clip_search(4, 1.0, MIN_SAMPLES, &grid, 7).unwrap();
        assert_eq!(a, b);
        let i = a.index;
        assert!(i > 0 && i + 1 < grid.len());
        assert!(a.objective[i] <= a.objective[i - 1] && a.objective[i] <= a.objective[i + 1]);
    }

    #[test]
    fn half_normal_mean() {
        let obj = ClipObjective::sample(MIN_SAMPLES, 1.0, 3);
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((obj.mean_abs() / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn c_is_sigma_invariant() {
        let cfg = quick_config();
        let c: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&s| simulate_clip_search(3, s, cfg.samples, &cfg.grid(s), 11).unwrap().c)
            .collect();
        let (lo, hi) = c.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!((hi - lo) / lo < 0.01, "{c:?}");
    }

    #[test]
    fn more_levels_push_clip_outward() {
        let grid = log_grid(0.25, 8.0, 400);
        let a4 = simulate_clip_search(4, 1.0, MIN_SAMPLES, &grid, 5).unwrap().a_star;
        let a8 = simulate_clip_search(8, 1.0, MIN_SAMPLES, &grid, 5).unwrap().a_star;
        assert!(a8 >= a4, "a8={a8} a4={a4}");
    }

    #[test]
    fn table_cardinality_and_roundtrip() {
        let cfg = CalibConfig { samples: MIN_SAMPLES, sigmas: vec![1.0], seeds: vec![0], ..CalibConfig::default() };
        let table = build_calib_table(&[4, 8], &cfg).unwrap();
        assert_eq!(table.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.json");
        table.save(&path).unwrap();
        assert_eq!(CalibTable::load(&path).unwrap(), table);
    }

    #[test]
    fn load_reports_path() {
        let err = CalibTable::load(Path::new("/nonexistent/calib.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/calib.json"));
    }

    #[test]
    fn builtin_covers_uniform_bitwidths() {
        let t = CalibTable::builtin();
        for b in 3..=8 {
            let c = t.ratio(b).unwrap();
            assert!(c > 0.0 && c < 1.0, "c({b}) = {c}");
        }
    }
}
