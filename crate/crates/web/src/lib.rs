//! wasm-bindgen entry points for the static page in `www/`. Every export
//! returns a JSON string so the page needs no generated bindings beyond
//! plain functions.

use qat_core::calib::{log_grid, CalibTable, ClipObjective};
use qat_core::quant::{mean_abs, quantize_uniform, sign, TernaryParams, TieBreak, DEFAULT_TERNARY_THRESHOLD};
use qat_core::stats::{variance_formula, variance_monte_carlo, CorrelationModel, INDEPENDENT_RHO};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Standard-normal weights that define the row statistics (mean |w|) for the transfer curve.
const ROW_LEN: usize = 4096;

#[derive(Debug, Serialize)]
pub struct TransferCurve {
    pub scheme: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Distinct output levels.
    pub levels: Vec<f64>,
}

/// Output of the `bits`-bit weight quantizer for inputs on `[-range, range]`,
/// with scale taken from a standard-normal row.
pub fn transfer_curve(bits: u8, points: usize, range: f64, seed: u64) -> Result<TransferCurve, String> {
    if points < 2 || !(range > 0.0 && range.is_finite()) {
        return Err(format!("need at least 2 points and a positive range (got {points}, {range})"));
    }
    let row = ClipObjective::sample(ROW_LEN, 1.0, seed);
    let scale = mean_abs(row.samples()).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..points).map(|i| -range + 2.0 * range * i as f64 / (points - 1) as f64).collect();
    let (scheme, y) = match bits {
        1 => ("binary", x.iter().map(|&v| sign(v) * scale).collect()),
        2 => {
            let p = TernaryParams::from_row(row.samples(), DEFAULT_TERNARY_THRESHOLD, Default::default())
                .map_err(|e| e.to_string())?;
            ("ternary", x.iter().map(|&v| p.project(v)).collect())
        }
        _ => {
            let c = CalibTable::builtin().ratio(bits).map_err(|e| e.to_string())?;
            let y = quantize_uniform(&x, bits, scale / c, TieBreak::HalfAwayFromZero).map_err(|e| e.to_string())?;
            ("uniform", y)
        }
    };
    let mut levels: Vec<f64> = y.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    Ok(TransferCurve { scheme: scheme.into(), x, y, levels })
}

#[derive(Debug, Serialize)]
pub struct ClipCurve {
    pub clip: Vec<f64>,
    /// Mean squared quantization error per weight.
    pub mse: Vec<f64>,
    pub a_star: f64,
    pub c: f64,
}

/// Quantization error against the clipping threshold for a Gaussian draw.
pub fn clip_curve(bits: u8, samples: usize, seed: u64) -> Result<ClipCurve, String> {
    if !(3..=8).contains(&bits) {
        return Err(format!("clip search needs 3 to 8 bits, got {bits}"));
    }
    if samples < 100 {
        return Err(format!("{samples} samples is too few"));
    }
    let obj = ClipObjective::sample(samples, 1.0, seed);
    let clip = log_grid(0.5, 6.0, 200);
    let (i, curve) = obj.argmin(bits, &clip);
    let n = samples as f64;
    Ok(ClipCurve { a_star: clip[i], c: obj.mean_abs() / clip[i], mse: curve.iter().map(|e| e / n).collect(), clip })
}

#[derive(Debug, Serialize)]
pub struct VariancePoint {
    pub d: usize,
    pub formula: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
}

/// Variance of `mean|w|` for `d` independent unit Gaussians, formula and simulation.
pub fn variance_curve(ds: &[usize], trials: usize, seed: u64) -> Result<Vec<VariancePoint>, String> {
    ds.iter()
        .map(|&d| {
            let formula = variance_formula(d, 1.0, INDEPENDENT_RHO).map_err(|e| e.to_string())?;
            let mc =
                variance_monte_carlo(d, 1.0, CorrelationModel::Independent, trials, seed).map_err(|e| e.to_string())?;
            Ok(VariancePoint { d, formula, monte_carlo: mc.variance, std_error: mc.std_error })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = transferCurve)]
pub fn transfer_curve_js(bits: u8, points: usize, range: f64, seed: u32) -> Result<String, JsError> {
    to_js(transfer_curve(bits, points, range, seed.into()))
}

#[wasm_bindgen(js_name = clipCurve)]
pub fn clip_curve_js(bits: u8, samples: usize, seed: u32) -> Result<String, JsError> {
    to_js(clip_curve(bits, samples, seed.into()))
}

#[wasm_bindgen(js_name = varianceCurve)]
pub fn variance_curve_js(ds: Vec<u32>, trials: usize, seed: u32) -> Result<String, JsError> {
    let ds: Vec<usize> = ds.into_iter().map(|d| d as usize).collect();
    to_js(variance_curve(&ds, trials, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_counts_match_bitwidth() {
        assert_eq!(transfer_curve(1, 401, 4.0, 0).unwrap().levels.len(), 2);
        assert_eq!(transfer_curve(2, 401, 4.0, 0).unwrap().levels.len(), 3);
        for b in 3..=5u8 {
            let t = transfer_curve(b, 4001, 8.0, 0).unwrap();
            assert_eq!(t.levels.len(), 2 * ((1usize << (b - 1)) - 1) + 1, "{b} bits");
        }
    }

    #[test]
    fn transfer_is_monotone_and_odd() {
        let t = transfer_curve(4, 201, 3.0, 1).unwrap();
        assert!(t.y.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in t.y.iter().zip(t.y.iter().rev()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn clip_minimum_is_interior() {
        let c = clip_curve(4, 20_000, 3).unwrap();
        let i = c.clip.iter().position(|&a| a == c.a_star).unwrap();
        assert!(i > 0 && i + 1 < c.clip.len());
        assert!(c.mse.iter().all(|&m| m >= c.mse[i]));
    }

    #[test]
    fn variance_tracks_formula() {
        for p in variance_curve(&[1, 9], 20_000, 5).unwrap() {
            assert!((p.monte_carlo - p.formula).abs() < 4.0 * p.std_error, "{p:?}");
        }
    }

    #[test]
    fn bad_arguments_are_errors() {
        assert!(transfer_curve(9, 10, 1.0, 0).is_err());
        assert!(transfer_curve(4, 1, 1.0, 0).is_err());
        assert!(clip_curve(2, 1000, 0).is_err());
        assert!(variance_curve(&[0], 1000, 0).is_err());
    }
}
