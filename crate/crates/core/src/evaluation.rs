//! Verification metrics: normalized RMSE, coefficient of determination and
//! credible-interval calibration error, each computed per component and then
//! averaged.

use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, WindowedDataset};
use crate::diff::Array;
use crate::error::{Error, Result};
use crate::models::{Forecaster, LatentSampler};

/// Fewer members than this make the extreme quantiles meaningless.
pub const MIN_CALIBRATION_MEMBERS: usize = 20;
pub const DEFAULT_EVAL_MEMBERS: usize = 200;
pub const ALPHA_GRID_SIZE: usize = 100;
pub const ALPHA_GRID_DESCRIPTION: &str = "alpha_i = i/101, i = 1..100";
/// Central interval level of the per-window forecast summary.
pub const SUMMARY_LEVEL: f64 = 0.99;
/// Upper bound on `windows · members` per evaluation chunk.
const EVAL_CHUNK_ROWS: usize = 200_000;

/// 100 equally spaced levels strictly inside (0, 1).
pub fn alpha_grid() -> Vec<f64> {
    (1..=ALPHA_GRID_SIZE).map(|i| i as f64 / (ALPHA_GRID_SIZE + 1) as f64).collect()
}

/// Linear interpolation between order statistics (`h = (m − 1) q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn check_pair(op: &'static str, a: &Array, b: &Array) -> Result<(usize, usize)> {
    let (n, d) = b.dims2()?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("{op} needs at least 2 cases, got {n}")));
    }
    Ok((n, d))
}

fn column(a: &Array, c: usize, d: usize) -> impl Iterator<Item = f64> + '_ {
    a.data().iter().skip(c).step_by(d).copied()
}

/// Per component `RMSE / (max − min)` of the verifications.
pub fn nrmse_components(forecasts: &Array, verifications: &Array) -> Result<Vec<f64>> {
    let (n, d) = check_pair("nrmse", forecasts, verifications)?;
    (0..d)
        .map(|c| {
            let (lo, hi) = column(verifications, c, d)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let range = hi - lo;
            if !(range > 0.0) {
                return Err(Error::invalid(format!("component {c} has zero verification range")));
            }
            let sse: f64 = column(forecasts, c, d)
                .zip(column(verifications, c, d))
                .map(|(f, y)| (f - y).powi(2))
                .sum();
            Ok((sse / n as f64).sqrt() / range)
        })
        .collect()
}

pub fn nrmse(forecasts: &Array, verifications: &Array) -> Result<f64> {
    Ok(mean(&nrmse_components(forecasts, verifications)?))
}

/// Per component `1 − SS_res / SS_tot` with the verification mean.
pub fn r_squared_components(forecasts: &Array, verifications: &Array) -> Result<Vec<f64>> {
    let (n, d) = check_pair("r_squared", forecasts, verifications)?;
    (0..d)
        .map(|c| {
            let ybar = column(verifications, c, d).sum::<f64>() / n as f64;
            let ss_tot: f64 = column(verifications, c, d).map(|y| (y - ybar).powi(2)).sum();
            if !(ss_tot > 0.0) {
                return Err(Error::invalid(format!("component {c} has zero verification variance")));
            }
            let ss_res: f64 = column(forecasts, c, d)
                .zip(column(verifications, c, d))
                .map(|(f, y)| (f - y).powi(2))
                .sum();
            Ok(1.0 - ss_res / ss_tot)
        })
        .collect()
}

pub fn r_squared(forecasts: &Array, verifications: &Array) -> Result<f64> {
    Ok(mean(&r_squared_components(forecasts, verifications)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Empirical coverage of the central `α` intervals, per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub alphas: Vec<f64>,
    /// `coverage[c][i]`: fraction of cases whose verification lies in the
    /// central `alphas[i]` interval of component `c`.
    pub coverage: Vec<Vec<f64>>,
}

impl CalibrationCurve {
    /// `median_i |coverage[c][i] − α_i|` per component.
    pub fn component_errors(&self) -> Vec<f64> {
        self.coverage
            .iter()
            .map(|cov| {
                let mut dev: Vec<f64> = cov.iter().zip(&self.alphas).map(|(a, b)| (a - b).abs()).collect();
                crate::scoring::median(&mut dev)
            })
            .collect()
    }

    pub fn error(&self) -> f64 {
        mean(&self.component_errors())
    }
}

/// Coverage counts accumulated over chunks of cases.
#[derive(Debug, Clone)]
pub struct CalibrationAccumulator {
    alphas: Vec<f64>,
    hits: Vec<Vec<u64>>,
    cases: u64,
    dim: usize,
}

impl CalibrationAccumulator {
    pub fn new(dim: usize) -> Self {
        let alphas = alpha_grid();
        Self { hits: vec![vec![0; alphas.len()]; dim], alphas, cases: 0, dim }
    }

    /// Adds cases from `ensembles: [n · m, d]` (grouped by case) and
    /// `verifications: [n, d]`.
    pub fn add(&mut self, ensembles: &Array, members: usize, verifications: &Array) -> Result<()> {
        let (n, d) = check_ensemble(ensembles, members, verifications)?;
        if d != self.dim {
            return Err(Error::shape("calibration", &[self.dim], &[d]));
        }
        if members < MIN_CALIBRATION_MEMBERS {
            return Err(Error::invalid(format!(
                "calibration needs at least {MIN_CALIBRATION_MEMBERS} ensemble members, got {members}"
            )));
        }
        let mut buf = vec![0.0; members];
        for w in 0..n {
            for c in 0..d {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = ensembles.data()[(w * members + j) * d + c];
                }
                buf.sort_by(f64::total_cmp);
                let y = verifications.data()[w * d + c];
                for (i, &a) in self.alphas.iter().enumerate() {
                    let lo = quantile_sorted(&buf, (1.0 - a) / 2.0);
                    let hi = quantile_sorted(&buf, (1.0 + a) / 2.0);
                    if lo <= y && y <= hi {
                        self.hits[c][i] += 1;
                    }
                }
            }
        }
        self.cases += n as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<CalibrationCurve> {
        if self.cases == 0 {
            return Err(Error::InsufficientData("calibration needs at least one case".into()));
        }
        let total = self.cases as f64;
        Ok(CalibrationCurve {
            alphas: self.alphas.clone(),
            coverage: self
                .hits
                .iter()
                .map(|h| h.iter().map(|&k| k as f64 / total).collect())
                .collect(),
        })
    }
}

fn check_ensemble(ensembles: &Array, members: usize, verifications: &Array) -> Result<(usize, usize)> {
    let (n, d) = verifications.dims2()?;
    if members == 0 || ensembles.shape() != [n * members, d] {
        return Err(Error::shape("ensemble vs verifications", ensembles.shape(), &[n * members.max(1), d]));
    }
    Ok((n, d))
}

/// Component-averaged median calibration error and the coverage curve.
pub fn calibration_error(
    ensembles: &Array,
    members: usize,
    verifications: &Array,
) -> Result<(f64, CalibrationCurve)> {
    let (_, d) = verifications.dims2()?;
    let mut acc = CalibrationAccumulator::new(d);
    acc.add(ensembles, members, verifications)?;
    let curve = acc.finish()?;
    Ok((curve.error(), curve))
}

/// Per-case ensemble summaries, each `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Array,
    pub median: Array,
    pub lower: Array,
    pub upper: Array,
    pub level: f64,
}

/// Mean, median and central `level` interval per case and component.
pub fn ensemble_stats(ensembles: &Array, members: usize, level: f64) -> Result<EnsembleStats> {
    let (rows, d) = ensembles.dims2()?;
    if members == 0 || rows % members != 0 {
        return Err(Error::invalid(format!("{rows} ensemble rows are not a multiple of {members} members")));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid(format!("interval level must lie in [0, 1], got {level}")));
    }
    let n = rows / members;
    let mut out = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];
    let mut buf = vec![0.0; members];
    for w in 0..n {
        for c in 0..d {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = ensembles.data()[(w * members + j) * d + c];
            }
            let at = w * d + c;
            out[0][at] = buf.iter().sum::<f64>() / members as f64;
            buf.sort_by(f64::total_cmp);
            out[1][at] = quantile_sorted(&buf, 0.5);
            out[2][at] = quantile_sorted(&buf, (1.0 - level) / 2.0);
            out[3][at] = quantile_sorted(&buf, (1.0 + level) / 2.0);
        }
    }
    let [mean, median, lower, upper] = out.map(|v| Array::matrix(n, d, v).expect("consistent sizes"));
    Ok(EnsembleStats { mean, median, lower, upper, level })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMetrics {
    pub calibration_error: f64,
    pub nrmse: f64,
    pub r_squared: f64,
}

/// Component-averaged metrics of one model on one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub calibration_error: f64,
    pub nrmse: f64,
    pub r_squared: f64,
    pub per_component: Vec<ComponentMetrics>,
    pub members: usize,
    pub cases: usize,
    pub alpha_grid: String,
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str = "method,cal_error,nrmse,r2";

    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{:.4},{:.4}", self.method, self.calibration_error, self.nrmse, self.r_squared)
    }
}

/// Report plus the per-case summaries and verifications in physical units.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub verifications: Array,
    pub stats: EnsembleStats,
}

/// Samples `members` forecasts per test window, maps forecasts and
/// verifications back through `normalizer` and computes all metrics.
pub fn evaluate_model(
    model: &dyn Forecaster,
    method: &str,
    test: &WindowedDataset,
    normalizer: &Normalizer,
    members: usize,
    seed: u64,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InsufficientData("test split has no windows".into()));
    }
    if model.dim() != test.dim() || normalizer.dim() != test.dim() {
        return Err(Error::shape("model vs test data", &[model.dim(), normalizer.dim()], &[test.dim()]));
    }
    if members < MIN_CALIBRATION_MEMBERS {
        return Err(Error::invalid(format!(
            "evaluation needs at least {MIN_CALIBRATION_MEMBERS} ensemble members, got {members}"
        )));
    }
    let d = test.dim();
    let mut sampler = LatentSampler::new(model.latent_dim(), seed);
    let mut acc = CalibrationAccumulator::new(d);
    let chunk = (EVAL_CHUNK_ROWS / members).clamp(1, test.len());
    let mut parts: [Vec<f64>; 5] = Default::default();
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(chunk) {
        let ens = normalizer.invert_array(&model.forecast(test, idx, members, &mut sampler)?)?;
        if !ens.all_finite() {
            return Err(Error::Numerical("forecast ensemble contains non-finite values".into()));
        }
        let ver = normalizer.invert_array(&test.gather_targets(idx))?;
        acc.add(&ens, members, &ver)?;
        let s = ensemble_stats(&ens, members, SUMMARY_LEVEL)?;
        for (dst, src) in parts.iter_mut().zip([&ver, &s.mean, &s.median, &s.lower, &s.upper]) {
            dst.extend_from_slice(src.data());
        }
    }
    let n = test.len();
    let [ver, mean_f, median, lower, upper] = parts.map(|v| Array::matrix(n, d, v).expect("consistent sizes"));
    let curve = acc.finish()?;
    let cal = curve.component_errors();
    let nr = nrmse_components(&mean_f, &ver)?;
    let r2 = r_squared_components(&mean_f, &ver)?;
    let per_component = (0..d)
        .map(|c| ComponentMetrics { calibration_error: cal[c], nrmse: nr[c], r_squared: r2[c] })
        .collect();
    let report = EvaluationReport {
        method: method.to_string(),
        calibration_error: mean(&cal),
        nrmse: mean(&nr),
        r_squared: mean(&r2),
        per_component,
        members,
        cases: n,
        alpha_grid: ALPHA_GRID_DESCRIPTION.to_string(),
    };
    Ok(Evaluation {
        report,
        verifications: ver,
        stats: EnsembleStats { mean: mean_f, median, lower, upper, level: SUMMARY_LEVEL },
    })
}
