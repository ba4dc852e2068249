//! Error metrics, ratio analysis, slice predictions with uncertainty bands, multi-run
//! statistics and CSV/SVG report export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_slice_grid, DataError, Dataset, Feature, SliceSpec, FEATURE_COUNT, FEATURE_NAMES};
use crate::ensemble::{interval, Ensemble, EnsembleError};
use crate::stats::two_sided_z;

/// Two-sigma central probability, the default band level.
pub const TWO_SIGMA_LEVEL: f64 = 0.954_499_736_103_642;
pub const RATIO_RANGE: [f64; 2] = [0.5, 2.0];

/// Ratio histogram: 30 bins of width 0.1 over [0, 3]; values outside land in the end bins.
pub const RATIO_BINS: (f64, f64, usize) = (0.0, 3.0, 30);
/// Relative-error histogram (percent): 20 bins of width 5 over [-50, 50], end bins absorb
/// the tails.
pub const RELATIVE_ERROR_BINS: (f64, f64, usize) = (-50.0, 50.0, 20);

pub const METRICS_HEADER: &str = "split,n,rmse_kw_m2,mape_pct,rmspe_pct,ratio_mean,ratio_std,ratio_inside_frac";
pub const POINTS_HEADER: &str = "D,L,P,G,X,y_true,y_pred,aleatory_var,epistemic_var,total_var";
pub const SLICE_HEADER: &str = "slice_id,varying_feature,varying_value,y_pred,total_std,band_lo,band_hi";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} targets vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("target at index {0} is zero")]
    ZeroTarget(usize),
    #[error("dataset has no targets")]
    MissingTargets,
    #[error("{0}")]
    Ensemble(#[from] EnsembleError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("reference curve: {0}")]
    Reference(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<(), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

fn check_nonzero(y: &[f64]) -> Result<(), EvalError> {
    match y.iter().position(|v| *v == 0.0) {
        Some(i) => Err(EvalError::ZeroTarget(i)),
        None => Ok(()),
    }
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, yhat)?;
    let ss: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Mean absolute percentage error, in percent.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, yhat)?;
    check_nonzero(y)?;
    let s: f64 = y.iter().zip(yhat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Ok(100.0 * s / y.len() as f64)
}

/// Root mean square percentage error, in percent.
pub fn rmspe(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, yhat)?;
    check_nonzero(y)?;
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let r = (a - b) / a;
            r * r
        })
        .sum();
    Ok(100.0 * (s / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Fraction of ratios in the closed interval [0.5, 2.0].
    pub inside_frac: f64,
}

/// Predicted-to-measured ratio against one input, rescaled to [0, 1] over the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSeries {
    pub feature: Feature,
    pub normalized_feature: Vec<f64>,
    pub ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioAnalysis {
    pub stats: RatioStats,
    pub series: Vec<RatioSeries>,
}

pub fn ratio_stats(y: &[f64], yhat: &[f64]) -> Result<RatioStats, EvalError> {
    check_lengths(y, yhat)?;
    check_nonzero(y)?;
    let n = y.len() as f64;
    let ratios: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p / t).collect();
    let mean = ratios.iter().sum::<f64>() / n;
    let std = (ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let inside = ratios
        .iter()
        .filter(|r| **r >= RATIO_RANGE[0] && **r <= RATIO_RANGE[1])
        .count();
    Ok(RatioStats { mean, std, inside_frac: inside as f64 / n })
}

pub fn ratio_analysis(
    y: &[f64],
    yhat: &[f64],
    features: &[[f64; FEATURE_COUNT]],
) -> Result<RatioAnalysis, EvalError> {
    let stats = ratio_stats(y, yhat)?;
    if features.len() != y.len() {
        return Err(EvalError::LengthMismatch { left: y.len(), right: features.len() });
    }
    let ratio: Vec<f64> = yhat.iter().zip(y).map(|(p, t)| p / t).collect();
    let series = Feature::ALL
        .iter()
        .map(|&f| {
            let col: Vec<f64> = features.iter().map(|x| x[f.index()]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            RatioSeries {
                feature: f,
                normalized_feature: col
                    .iter()
                    .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                    .collect(),
                ratio: ratio.clone(),
            }
        })
        .collect();
    Ok(RatioAnalysis { stats, series })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub n: usize,
    pub rmse_kw_m2: f64,
    pub mape_pct: f64,
    pub rmspe_pct: f64,
    pub ratio_mean: f64,
    pub ratio_std: f64,
    pub ratio_inside_frac: f64,
}

pub fn metrics_report(split: &str, y: &[f64], yhat: &[f64]) -> Result<MetricsReport, EvalError> {
    let r = ratio_stats(y, yhat)?;
    Ok(MetricsReport {
        split: split.to_string(),
        n: y.len(),
        rmse_kw_m2: rmse(y, yhat)?,
        mape_pct: mape(y, yhat)?,
        rmspe_pct: rmspe(y, yhat)?,
        ratio_mean: r.mean,
        ratio_std: r.std,
        ratio_inside_frac: r.inside_frac,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub inputs: [f64; FEATURE_COUNT],
    pub y_true: f64,
    pub y_pred: f64,
    pub aleatory_var: f64,
    pub epistemic_var: f64,
    pub total_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub metrics: MetricsReport,
    pub points: Vec<PointRecord>,
}

pub fn evaluate_model(ens: &Ensemble, ds: &Dataset, split: &str) -> Result<ModelEvaluation, EvalError> {
    if !ds.has_targets() {
        return Err(EvalError::MissingTargets);
    }
    let inputs = ds.inputs();
    let y = ds.targets();
    let preds = ens.predict(&inputs)?;
    let yhat: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let metrics = metrics_report(split, &y, &yhat)?;
    let points = inputs
        .iter()
        .zip(&y)
        .zip(&preds)
        .map(|((x, t), p)| PointRecord {
            inputs: *x,
            y_true: *t,
            y_pred: p.mean,
            aleatory_var: p.aleatory_var,
            epistemic_var: p.epistemic_var,
            total_var: p.total_var,
        })
        .collect();
    Ok(ModelEvaluation { metrics, points })
}

/// Fraction of points whose target lies inside the Gaussian interval at `level`.
pub fn interval_coverage(points: &[PointRecord], level: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let z = two_sided_z(level);
    let inside = points
        .iter()
        .filter(|p| (p.y_true - p.y_pred).abs() <= z * p.total_var.sqrt())
        .count();
    inside as f64 / points.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResult {
    pub spec: SliceSpec,
    pub grid: Vec<[f64; FEATURE_COUNT]>,
    pub varying_values: Vec<f64>,
    pub y_pred: Vec<f64>,
    pub total_std: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
    pub reference: Option<Vec<Option<f64>>>,
}

impl SliceResult {
    /// Attaches a reference curve, linearly interpolated onto the grid; grid values
    /// outside the curve's range get no reference.
    pub fn with_reference(mut self, curve: &[(f64, f64)]) -> Result<Self, EvalError> {
        if curve.len() < 2 || curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(EvalError::Reference("need >= 2 points with increasing x".into()));
        }
        let interp = |x: f64| -> Option<f64> {
            let i = curve.windows(2).position(|w| x >= w[0].0 && x <= w[1].0)?;
            let (a, b) = (curve[i], curve[i + 1]);
            Some(a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1))
        };
        self.reference = Some(self.varying_values.iter().map(|&x| interp(x)).collect());
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub level: f64,
    pub slices: Vec<SliceResult>,
}

impl SliceReport {
    pub fn prediction_count(&self) -> usize {
        self.slices.iter().map(|s| s.y_pred.len()).sum()
    }
}

pub fn evaluate_slices(ens: &Ensemble, specs: &[SliceSpec], level: f64) -> Result<SliceReport, EvalError> {
    let mut slices = Vec::with_capacity(specs.len());
    for spec in specs {
        let grid_ds = build_slice_grid(spec)?;
        let grid = grid_ds.inputs();
        let preds = ens.predict(&grid)?;
        let mut s = SliceResult {
            spec: spec.clone(),
            varying_values: grid.iter().map(|x| x[spec.varying.index()]).collect(),
            grid,
            y_pred: Vec::with_capacity(preds.len()),
            total_std: Vec::with_capacity(preds.len()),
            band_lo: Vec::with_capacity(preds.len()),
            band_hi: Vec::with_capacity(preds.len()),
            reference: None,
        };
        for p in &preds {
            let (lo, hi) = interval(p, level);
            s.y_pred.push(p.mean);
            s.total_std.push(p.total_std());
            s.band_lo.push(lo);
            s.band_hi.push(hi);
        }
        slices.push(s);
    }
    Ok(SliceReport { level, slices })
}

/// Two-column CSV (varying value, reference CHF), header optional.
pub fn load_reference_curve(path: &Path) -> Result<Vec<(f64, f64)>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(a), Some(b)) = (parts.next(), parts.next()) else {
            return Err(EvalError::Reference(format!("line {}: expected two columns", i + 1)));
        };
        match (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => out.push((x, y)),
            _ if i == 0 => continue,
            _ => return Err(EvalError::Reference(format!("line {}: not numeric", i + 1))),
        }
    }
    Ok(out)
}

/// Outcome of one end-to-end run as needed for multi-run statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: bool,
    pub error_count: u32,
    pub test_rmse: Option<f64>,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub runs: usize,
    pub avg_rmse: Option<f64>,
    pub min_rmse: Option<f64>,
    pub max_rmse: Option<f64>,
    pub completed_without_error: usize,
    pub completed_with_one_error: usize,
    pub completed_with_two_or_more_errors: usize,
    pub failed: usize,
    pub avg_tokens: f64,
    pub total_tokens: u64,
}

pub fn aggregate_trials(runs: &[RunSummary]) -> TrialStats {
    let rmses: Vec<f64> = runs
        .iter()
        .filter(|r| r.completed)
        .filter_map(|r| r.test_rmse)
        .collect();
    let count = |pred: &dyn Fn(&RunSummary) -> bool| runs.iter().filter(|r| pred(r)).count();
    let total_tokens: u64 = runs.iter().map(|r| r.total_tokens).sum();
    TrialStats {
        runs: runs.len(),
        avg_rmse: (!rmses.is_empty()).then(|| rmses.iter().sum::<f64>() / rmses.len() as f64),
        min_rmse: rmses.iter().cloned().reduce(f64::min),
        max_rmse: rmses.iter().cloned().reduce(f64::max),
        completed_without_error: count(&|r| r.completed && r.error_count == 0),
        completed_with_one_error: count(&|r| r.completed && r.error_count == 1),
        completed_with_two_or_more_errors: count(&|r| r.completed && r.error_count >= 2),
        failed: count(&|r| !r.completed),
        avg_tokens: if runs.is_empty() { 0.0 } else { total_tokens as f64 / runs.len() as f64 },
        total_tokens,
    }
}

/// Row labels of the robustness table, in order.
pub const ROBUSTNESS_ROWS: [&str; 8] = [
    "Average CHF RMSE on testing data",
    "Minimum CHF RMSE on testing data",
    "Maximum CHF RMSE on testing data",
    "Completed without error",
    "Completed with one error",
    "Completed with >= 2 error",
    "Fail to complete",
    "Average token usage",
];

impl TrialStats {
    /// Values for `ROBUSTNESS_ROWS`, formatted for the robustness table (RMSE to 0.1,
    /// tokens with thousands separators).
    pub fn robustness_values(&self) -> [String; 8] {
        let r = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.1}"));
        [
            r(self.avg_rmse),
            r(self.min_rmse),
            r(self.max_rmse),
            self.completed_without_error.to_string(),
            self.completed_with_one_error.to_string(),
            self.completed_with_two_or_more_errors.to_string(),
            self.failed.to_string(),
            thousands(self.avg_tokens.round() as u64),
        ]
    }
}

fn thousands(v: u64) -> String {
    let s = v.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Renders the robustness table with one column per system.
pub fn render_robustness_table(columns: &[(&str, &TrialStats)]) -> String {
    let values: Vec<[String; 8]> = columns.iter().map(|(_, s)| s.robustness_values()).collect();
    let w0 = ROBUSTNESS_ROWS.iter().map(|r| r.len()).max().unwrap_or(0).max("Metric".len());
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(c, (name, _))| values[c].iter().map(|v| v.len()).max().unwrap_or(0).max(name.len()))
        .collect();
    let mut out = format!("{:<w0$}", "Metric");
    for ((name, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, " | {name:>w$}");
    }
    out.push('\n');
    for (i, row) in ROBUSTNESS_ROWS.iter().enumerate() {
        let _ = write!(out, "{row:<w0$}");
        for (c, w) in widths.iter().enumerate() {
            let _ = write!(out, " | {:>w$}", values[c][i]);
        }
        out.push('\n');
    }
    out
}

/// Everything `export_report` writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub metrics: Vec<MetricsReport>,
    /// Per-point records for the parity plot and histograms (usually the test split).
    pub points: Vec<PointRecord>,
    pub slices: Option<SliceReport>,
}

/// 17 significant digits, scientific notation.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn export_report(report: &EvaluationReport, dir: &Path) -> Result<Vec<String>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), EvalError> {
        std::fs::write(dir.join(&name), body)?;
        written.push(name);
        Ok(())
    };

    let mut csv = format!("{METRICS_HEADER}\n");
    for m in &report.metrics {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            m.split,
            m.n,
            fmt17(m.rmse_kw_m2),
            fmt17(m.mape_pct),
            fmt17(m.rmspe_pct),
            fmt17(m.ratio_mean),
            fmt17(m.ratio_std),
            fmt17(m.ratio_inside_frac)
        );
    }
    put("metrics.csv".into(), csv)?;

    let mut csv = format!("{POINTS_HEADER}\n");
    for p in &report.points {
        let mut fields: Vec<String> = p.inputs.iter().map(|v| fmt17(*v)).collect();
        fields.extend(
            [p.y_true, p.y_pred, p.aleatory_var, p.epistemic_var, p.total_var]
                .iter()
                .map(|v| fmt17(*v)),
        );
        let _ = writeln!(csv, "{}", fields.join(","));
    }
    put("predictions.csv".into(), csv)?;

    put("parity.svg".into(), parity_svg(&report.points))?;
    let ratios: Vec<f64> = report.points.iter().map(|p| p.y_pred / p.y_true).collect();
    put(
        "hist_ratio.svg".into(),
        histogram_svg("Predicted / measured CHF", &ratios, RATIO_BINS),
    )?;
    let rel: Vec<f64> = report
        .points
        .iter()
        .map(|p| 100.0 * (p.y_pred - p.y_true) / p.y_true)
        .collect();
    put(
        "hist_relative_error.svg".into(),
        histogram_svg("Relative error (%)", &rel, RELATIVE_ERROR_BINS),
    )?;

    if let Some(sr) = &report.slices {
        for s in &sr.slices {
            let mut csv = String::from(SLICE_HEADER);
            if s.reference.is_some() {
                csv.push_str(",reference");
            }
            csv.push('\n');
            for i in 0..s.y_pred.len() {
                let _ = write!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    s.spec.id,
                    s.spec.varying.name(),
                    fmt17(s.varying_values[i]),
                    fmt17(s.y_pred[i]),
                    fmt17(s.total_std[i]),
                    fmt17(s.band_lo[i]),
                    fmt17(s.band_hi[i])
                );
                if let Some(r) = &s.reference {
                    csv.push(',');
                    if let Some(v) = r[i] {
                        csv.push_str(&fmt17(v));
                    }
                }
                csv.push('\n');
            }
            put(format!("slice_{}.csv", s.spec.id), csv)?;
            put(format!("slice_{}.svg", s.spec.id), slice_svg(s))?;
        }
    }
    Ok(written)
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            let pad = lo.abs().max(1.0) * 0.5;
            return Self { lo: lo - pad, hi: hi + pad };
        }
        let pad = 0.05 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.lo) / (self.hi - self.lo) * (W - 2.0 * PAD)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.lo) / (self.hi - self.lo) * (H - 2.0 * PAD)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn axis_ticks(s: &mut String, xa: &Axis, ya: &Axis) {
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\">{:.4}</text><text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.4}</text>",
        H - PAD + 14.0,
        xa.lo,
        W - PAD,
        H - PAD + 14.0,
        xa.hi
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.4}</text><text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.4}</text>",
        PAD - 4.0,
        H - PAD,
        ya.lo,
        PAD - 4.0,
        PAD + 8.0,
        ya.hi
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Predicted vs measured scatter with the y = x line.
pub fn parity_svg(points: &[PointRecord]) -> String {
    let axis = Axis::fit(points.iter().flat_map(|p| [p.y_true, p.y_pred]));
    let mut s = svg_open("Parity", "Measured CHF (kW/m2)", "Predicted CHF (kW/m2)");
    axis_ticks(&mut s, &axis, &axis);
    let _ = writeln!(
        s,
        "<line class=\"identity\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
        axis.x(axis.lo),
        axis.y(axis.lo),
        axis.x(axis.hi),
        axis.y(axis.hi)
    );
    for p in points {
        let _ = writeln!(
            s,
            "<circle class=\"point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"steelblue\"/>",
            axis.x(p.y_true),
            axis.y(p.y_pred)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Counts per fixed bin; under/overflow go to the first/last bin.
pub fn histogram_counts(values: &[f64], (lo, hi, bins): (f64, f64, usize)) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values.iter().filter(|v| v.is_finite()) {
        let i = ((v - lo) / width).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
        counts[i] += 1;
    }
    counts
}

pub fn histogram_svg(title: &str, values: &[f64], bins: (f64, f64, usize)) -> String {
    let counts = histogram_counts(values, bins);
    let (lo, hi, n) = bins;
    let xa = Axis { lo, hi };
    let ya = Axis { lo: 0.0, hi: counts.iter().copied().max().unwrap_or(0).max(1) as f64 };
    let mut s = svg_open(title, title, "Count");
    axis_ticks(&mut s, &xa, &ya);
    let width = (hi - lo) / n as f64;
    for (i, c) in counts.iter().enumerate() {
        let x0 = xa.x(lo + i as f64 * width);
        let x1 = xa.x(lo + (i + 1) as f64 * width);
        let y = ya.y(*c as f64);
        let _ = writeln!(
            s,
            "<rect class=\"bin\" x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\" stroke=\"white\"/>",
            x1 - x0,
            ya.y(0.0) - y
        );
    }
    s.push_str("</svg>\n");
    s
}

fn polyline(xs: &[f64], ys: &[f64], xa: &Axis, ya: &Axis) -> String {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.2},{:.2}", xa.x(*x), ya.y(*y)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn slice_svg(s: &SliceResult) -> String {
    let xa = Axis::fit(s.varying_values.iter().copied());
    let refs: Vec<f64> = s.reference.iter().flatten().flatten().copied().collect();
    let ya = Axis::fit(s.band_lo.iter().chain(&s.band_hi).chain(&refs).copied());
    let title = format!("Slice {} ({} varying)", s.spec.id, s.spec.varying.name());
    let mut out = svg_open(&title, FEATURE_NAMES[s.spec.varying.index()], "CHF (kW/m2)");
    axis_ticks(&mut out, &xa, &ya);
    let mut band: Vec<String> = s
        .varying_values
        .iter()
        .zip(&s.band_hi)
        .map(|(x, y)| format!("{:.2},{:.2}", xa.x(*x), ya.y(*y)))
        .collect();
    band.extend(
        s.varying_values
            .iter()
            .zip(&s.band_lo)
            .rev()
            .map(|(x, y)| format!("{:.2},{:.2}", xa.x(*x), ya.y(*y))),
    );
    let _ = writeln!(
        out,
        "<polygon class=\"band\" points=\"{}\" fill=\"lightsteelblue\" fill-opacity=\"0.6\"/>",
        band.join(" ")
    );
    let _ = writeln!(
        out,
        "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"navy\"/>",
        polyline(&s.varying_values, &s.y_pred, &xa, &ya)
    );
    if let Some(r) = &s.reference {
        for (x, y) in s.varying_values.iter().zip(r) {
            if let Some(y) = y {
                let _ = writeln!(
                    out,
                    "<circle class=\"reference\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"darkred\"/>",
                    xa.x(*x),
                    ya.y(*y)
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
