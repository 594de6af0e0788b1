//! Statistical model of the overtaken driver's response.
//!
//! The acceleration of an overtaken vehicle is modelled as Gaussian with a
//! variance that depends on the headway time of the overtaker. The variance
//! rises over a smoothing spline up to its peak at 0.5 s, decays
//! exponentially until 3 s and is held constant beyond both ends.

mod spline;
pub mod synthetic;
mod tracks;

pub use spline::{smoothing_spline, PiecewiseCubic};
pub use tracks::{ingest_reader, ingest_tracks, IngestOptions, Ingested, Sample, TrackSchema};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal};
use statrs::statistics::{Data, OrderStatistics, Statistics};
use thiserror::Error;

/// Left end of the interaction band, s.
pub const LEFT_EDGE: f64 = -0.6;
/// Headway time of peak variance, s.
pub const PEAK: f64 = 0.5;
/// Right end of the interaction band, s.
pub const RIGHT_EDGE: f64 = 3.0;
/// Overtaken-vehicle speeds below this are treated as standstill, m/s.
pub const MIN_OV_SPEED: f64 = 0.1;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("column `{0}` not found in the track header")]
    MissingColumn(String),
    #[error("no overtaking samples found")]
    NoSamples,
    #[error("every bin holds fewer than {min} samples")]
    Underpopulated { min: usize },
    #[error("need at least {need} bins on each side of the peak, got {left} and {right}")]
    Coverage { left: usize, right: usize, need: usize },
    #[error("fit rejected: {0}")]
    FitRejected(String),
    #[error("invalid variance curve: {0}")]
    InvalidCurve(String),
}

/// Headway time `rel_x / ov_speed`; infinite when the overtaken vehicle is
/// nearly at rest, which selects the right plateau of the curve.
pub fn headway_time(rel_x: f64, ov_speed: f64) -> f64 {
    if ov_speed > MIN_OV_SPEED {
        rel_x / ov_speed
    } else {
        f64::INFINITY
    }
}

/// `amplitude · exp(−rate · t) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponential {
    pub amplitude: f64,
    pub rate: f64,
    pub offset: f64,
}

impl Exponential {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (-self.rate * t).exp() + self.offset
    }
}

/// Goodness of fit of the two branches on their bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub spline_r_squared: f64,
    pub exponential_r_squared: f64,
    pub smoothing: f64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub spline: PiecewiseCubic,
    pub exponential: Exponential,
    pub left_plateau: f64,
    pub right_plateau: f64,
    #[serde(default)]
    pub fit: Option<FitReport>,
}

impl Default for VarianceCurve {
    /// Cubic rise from 0.04 to a flat peak of 0.49 and exponential decay back to 0.04.
    fn default() -> Self {
        let (low, peak): (f64, f64) = (0.04, 0.49);
        let width = PEAK - LEFT_EDGE;
        let rise = peak - low;
        let rate = (peak / low).ln() / (RIGHT_EDGE - PEAK);
        let exponential = Exponential { amplitude: peak * (rate * PEAK).exp(), rate, offset: 0.0 };
        Self {
            spline: PiecewiseCubic {
                knots: vec![LEFT_EDGE, PEAK],
                coefficients: vec![[low, 1.5 * rise / width, 0.0, -0.5 * rise / width.powi(3)]],
            },
            left_plateau: low,
            right_plateau: exponential.eval(RIGHT_EDGE),
            exponential,
            fit: None,
        }
    }
}

impl VarianceCurve {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let bad = |m: &str| Err(UncertaintyError::InvalidCurve(m.into()));
        if !self.spline.is_valid() {
            return bad("spline knots must increase and coefficients match them");
        }
        let e = &self.exponential;
        if ![e.amplitude, e.rate, e.offset, self.left_plateau, self.right_plateau].iter().all(|v| v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.left_plateau < 0.0 || self.right_plateau < 0.0 {
            return bad("negative plateau");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, UncertaintyError> {
        let curve: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        curve.validate()?;
        Ok(curve)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), UncertaintyError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Variance of the overtaken vehicle's acceleration at headway `t`, (m/s²)².
    pub fn lookup(&self, t: f64) -> f64 {
        let v = if t.is_nan() || t > RIGHT_EDGE {
            self.right_plateau
        } else if t < LEFT_EDGE {
            self.left_plateau
        } else if t < PEAK {
            self.spline.eval(t)
        } else {
            self.exponential.eval(t)
        };
        v.max(0.0)
    }
}

pub fn variance_lookup(t: f64, curve: &VarianceCurve) -> f64 {
    curve.lookup(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub center: f64,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    /// `None` when the samples carry no spread to fit.
    pub r_squared: Option<f64>,
}

impl BinStats {
    pub fn is_degenerate(&self) -> bool {
        self.r_squared.is_none()
    }
}

/// Coefficient of determination between the Freedman–Diaconis histogram
/// density of `values` and the normal density with the given moments.
pub fn gaussian_r_squared(values: &[f64], mean: f64, variance: f64) -> Option<f64> {
    let n = values.len();
    if n < 2 || !(variance > 0.0) {
        return None;
    }
    let mut data = Data::new(values.to_vec());
    let iqr = data.interquartile_range();
    let (lo, hi) = (Statistics::min(values), Statistics::max(values));
    if !(iqr > 0.0) || !(hi > lo) {
        return None;
    }
    let width = 2.0 * iqr / (n as f64).cbrt();
    let bins = ((hi - lo) / width).ceil().max(1.0) as usize;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let normal = Normal::new(mean, variance.sqrt()).ok()?;
    let density: Vec<f64> = counts.iter().map(|c| *c as f64 / (n as f64 * width)).collect();
    let fitted: Vec<f64> = (0..bins).map(|i| normal.pdf(lo + (i as f64 + 0.5) * width)).collect();
    let avg = density.iter().mean();
    let ss_tot: f64 = density.iter().map(|d| (d - avg).powi(2)).sum();
    let ss_res: f64 = density.iter().zip(&fitted).map(|(d, f)| (d - f).powi(2)).sum();
    (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot)
}

/// Groups samples into headway bins over the interaction band.
pub fn fit_bins(samples: &[Sample], bin_width: f64, min_count: usize) -> Result<Vec<BinStats>, UncertaintyError> {
    if !(bin_width > 0.0) {
        return Err(UncertaintyError::FitRejected(format!("bin width {bin_width}")));
    }
    let count = ((RIGHT_EDGE - LEFT_EDGE) / bin_width - 1e-9).ceil() as usize;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); count];
    for s in samples {
        if (LEFT_EDGE..=RIGHT_EDGE).contains(&s.headway) && s.accel.is_finite() {
            let i = (((s.headway - LEFT_EDGE) / bin_width) as usize).min(count - 1);
            groups[i].push(s.accel);
        }
    }
    let min = min_count.max(2);
    let bins: Vec<BinStats> = groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.len() >= min)
        .map(|(i, g)| {
            let mean = g.iter().mean();
            let variance = g.iter().variance().max(0.0);
            BinStats {
                center: LEFT_EDGE + (i as f64 + 0.5) * bin_width,
                count: g.len(),
                mean,
                variance,
                r_squared: gaussian_r_squared(g, mean, variance),
            }
        })
        .collect();
    if bins.is_empty() {
        return Err(UncertaintyError::Underpopulated { min });
    }
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveFitOptions {
    /// Roughness penalty of the rising branch.
    pub smoothing: f64,
    pub max_rate: f64,
    pub min_bins_per_side: usize,
}

impl Default for CurveFitOptions {
    fn default() -> Self {
        Self { smoothing: 1e-4, max_rate: 20.0, min_bins_per_side: 4 }
    }
}

fn r_squared(y: &[f64], fitted: impl Iterator<Item = f64>) -> f64 {
    let avg = y.iter().mean();
    let ss_tot: f64 = y.iter().map(|v| (v - avg).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted).map(|(v, f)| (v - f).powi(2)).sum();
    if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    }
}

/// Weighted least squares of `a·exp(−b t) + c` for a fixed rate.
fn exp_lsq(t: &[f64], y: &[f64], w: &[f64], rate: f64) -> (Exponential, f64) {
    let n = t.len();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(n, 2, |i, j| sw[i] * if j == 0 { (-rate * t[i]).exp() } else { 1.0 });
    let b = DVector::from_fn(n, |i, _| sw[i] * y[i]);
    let coef = a.clone().svd(true, true).solve(&b, 1e-12).unwrap_or_else(|_| DVector::zeros(2));
    let e = Exponential { amplitude: coef[0], rate, offset: coef[1] };
    let sse = t.iter().zip(y).zip(w).map(|((ti, yi), wi)| wi * (yi - e.eval(*ti)).powi(2)).sum();
    (e, sse)
}

fn fit_exponential(t: &[f64], y: &[f64], w: &[f64], max_rate: f64) -> Exponential {
    let steps = 2000;
    let h = max_rate / steps as f64;
    let floor = 1e-12 * y.iter().zip(w).map(|(v, wi)| wi * v * v).sum::<f64>();
    let mut best = exp_lsq(t, y, w, 0.0);
    let mut best_rate = 0.0;
    for i in 1..=steps {
        let cand = exp_lsq(t, y, w, i as f64 * h);
        if cand.1 < best.1 - floor {
            best = cand;
            best_rate = i as f64 * h;
        }
    }
    // Golden-section refinement inside the bracketing grid cell pair.
    let (mut lo, mut hi) = ((best_rate - h).max(0.0), (best_rate + h).min(max_rate));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if exp_lsq(t, y, w, m1).1 <= exp_lsq(t, y, w, m2).1 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = exp_lsq(t, y, w, 0.5 * (lo + hi));
    if refined.1 < best.1 - floor {
        refined.0
    } else {
        best.0
    }
}

/// Fits the two branches, pinning the spline to the exponential at the peak.
pub fn fit_variance_curve(bins: &[BinStats], opts: &CurveFitOptions) -> Result<VarianceCurve, UncertaintyError> {
    let (left, right): (Vec<&BinStats>, Vec<&BinStats>) = bins.iter().partition(|b| b.center < PEAK);
    let left: Vec<&BinStats> = left.into_iter().filter(|b| b.center >= LEFT_EDGE).collect();
    let right: Vec<&BinStats> = right.into_iter().filter(|b| b.center <= RIGHT_EDGE).collect();
    if left.len() < opts.min_bins_per_side || right.len() < opts.min_bins_per_side {
        return Err(UncertaintyError::Coverage { left: left.len(), right: right.len(), need: opts.min_bins_per_side });
    }
    let mean_count = bins.iter().map(|b| b.count as f64).sum::<f64>() / bins.len() as f64;
    let weight = |b: &BinStats| b.count as f64 / mean_count;

    let rt: Vec<f64> = right.iter().map(|b| b.center).collect();
    let ry: Vec<f64> = right.iter().map(|b| b.variance).collect();
    let rw: Vec<f64> = right.iter().map(|b| weight(b)).collect();
    let exponential = fit_exponential(&rt, &ry, &rw, opts.max_rate);
    if exponential.amplitude < -1e-12 {
        return Err(UncertaintyError::FitRejected("decaying branch increases with headway".into()));
    }
    let peak = exponential.eval(PEAK);

    let mut lt: Vec<f64> = left.iter().map(|b| b.center).collect();
    let mut ly: Vec<f64> = left.iter().map(|b| b.variance).collect();
    let mut lw: Vec<f64> = left.iter().map(|b| weight(b)).collect();
    lt.push(PEAK);
    ly.push(peak);
    lw.push(1e12);
    let spline = smoothing_spline(&lt, &ly, &lw, opts.smoothing)
        .ok_or_else(|| UncertaintyError::FitRejected("spline system singular".into()))?;
    if (spline.eval(PEAK) - peak).abs() > 1e-6 {
        return Err(UncertaintyError::FitRejected("branches do not meet at the peak".into()));
    }
    let spline_r2 = r_squared(&ly[..ly.len() - 1], lt[..lt.len() - 1].iter().map(|t| spline.eval(*t)));
    let exp_r2 = r_squared(&ry, rt.iter().map(|t| exponential.eval(*t)));

    let curve = VarianceCurve {
        left_plateau: spline.eval(LEFT_EDGE).max(0.0),
        right_plateau: exponential.eval(RIGHT_EDGE).max(0.0),
        spline,
        exponential,
        fit: Some(FitReport {
            spline_r_squared: spline_r2,
            exponential_r_squared: exp_r2,
            smoothing: opts.smoothing,
            bins: bins.len(),
        }),
    };
    let top = curve.lookup(PEAK);
    let tol = 1e-9 * top.abs().max(1.0);
    let grid = (0..=3600).map(|i| LEFT_EDGE + i as f64 * (RIGHT_EDGE - LEFT_EDGE) / 3600.0);
    if let Some(t) = grid.into_iter().find(|t| curve.lookup(*t) > top + tol) {
        return Err(UncertaintyError::FitRejected(format!("variance at {t:.3} s exceeds the peak value")));
    }
    curve.validate()?;
    Ok(curve)
}
