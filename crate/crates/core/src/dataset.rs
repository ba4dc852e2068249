//! Tabular CHF-style data: CSV ingestion, envelope checks, seeded splits,
//! z-score normalization, a synthetic generator and the blind slice grids.
//!
//! Units are fixed: D and L in meters, P in kPa, G in kg/m²/s, X dimensionless,
//! CHF in kW/m².

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Prng, PRNG_NAME};

pub const FEATURE_COUNT: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = ["D", "L", "P", "G", "X"];
pub const TARGET_NAME: &str = "CHF";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("non-finite value at row {row}, column {column:?}")]
    NonFiniteValue { row: usize, column: String },
    #[error("unparseable value {value:?} at row {row}, column {column:?}")]
    InvalidValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split fractions must be non-negative and sum to 1 (got {0:?})")]
    FractionSumInvalid([f64; 3]),
    #[error("feature {0:?} is constant on the training split")]
    DegenerateFeature(String),
    #[error("invalid slice spec: {0}")]
    InvalidSlice(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthetic(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    D,
    L,
    P,
    G,
    X,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] =
        [Feature::D, Feature::L, Feature::P, Feature::G, Feature::X];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        FEATURE_NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One observation. `chf` is absent for input-only grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub inputs: [f64; FEATURE_COUNT],
    pub chf: Option<f64>,
}

impl DataPoint {
    pub fn new(d: f64, l: f64, p: f64, g: f64, x: f64, chf: Option<f64>) -> Self {
        Self {
            inputs: [d, l, p, g, x],
            chf,
        }
    }

    pub fn get(&self, f: Feature) -> f64 {
        self.inputs[f.index()]
    }
}

/// Closed per-variable ranges of the reference CHF database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub lo: [f64; FEATURE_COUNT],
    pub hi: [f64; FEATURE_COUNT],
    pub target_lo: f64,
    pub target_hi: f64,
}

/// Variable ranges of the reference CHF database (D, L, P, G, X, then CHF).
pub const REFERENCE_ENVELOPE: Envelope = Envelope {
    lo: [2e-3, 0.05, 100.0, 8.2, -0.497],
    hi: [16e-3, 20.0, 20000.0, 7964.0, 0.999],
    target_lo: 50.0,
    target_hi: 16339.3,
};

impl Default for Envelope {
    fn default() -> Self {
        REFERENCE_ENVELOPE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<DataPoint>,
    pub feature_names: [String; FEATURE_COUNT],
    pub provenance: String,
}

impl Dataset {
    /// Builds a dataset; rejects empty input.
    pub fn new(points: Vec<DataPoint>, provenance: impl Into<String>) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(Self::from_parts(points, provenance))
    }

    /// Split parts may legitimately be empty (e.g. fractions (1, 0, 0)).
    pub(crate) fn from_parts(points: Vec<DataPoint>, provenance: impl Into<String>) -> Self {
        Self {
            points,
            feature_names: FEATURE_NAMES.map(String::from),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        self.points.iter().all(|p| p.chf.is_some())
    }

    pub fn inputs(&self) -> Vec<[f64; FEATURE_COUNT]> {
        self.points.iter().map(|p| p.inputs).collect()
    }

    /// Target column; panics on input-only data.
    pub fn targets(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.chf.expect("dataset has no targets"))
            .collect()
    }

    /// Writes `D,L,P,G,X,CHF` (or `D,L,P,G,X` when no point carries a target).
    /// Values use the shortest decimal that parses back to the same double.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let with_target = self.has_targets();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = FEATURE_NAMES.join(",");
        if with_target {
            header.push(',');
            header.push_str(TARGET_NAME);
        }
        writeln!(out, "{header}")?;
        for p in &self.points {
            let mut line = p
                .inputs
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",");
            if with_target {
                line.push_str(&format!(",{:?}", p.chf.unwrap_or(f64::NAN)));
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loads a CSV with the five features and the CHF target.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    read_csv(path, true)
}

/// Loads a CSV where the CHF column is optional (input-only grids).
pub fn load_inputs_csv(path: &Path) -> Result<Dataset, DataError> {
    read_csv(path, false)
}

fn read_csv(path: &Path, require_target: bool) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(std::fs::File::open(path)?);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let mut cols = [0usize; FEATURE_COUNT];
    for (slot, name) in cols.iter_mut().zip(FEATURE_NAMES) {
        *slot = find(name).ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    let target_col = find(TARGET_NAME);
    if require_target && target_col.is_none() {
        return Err(DataError::MissingColumn(TARGET_NAME.to_string()));
    }

    let parse = |rec: &csv::StringRecord, col: usize, row: usize, name: &str| {
        let raw = rec.get(col).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| DataError::InvalidValue {
            row,
            column: name.to_string(),
            value: raw.to_string(),
        })?;
        if !v.is_finite() {
            return Err(DataError::NonFiniteValue {
                row,
                column: name.to_string(),
            });
        }
        Ok(v)
    };

    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let mut inputs = [0.0; FEATURE_COUNT];
        for (k, name) in FEATURE_NAMES.iter().enumerate() {
            inputs[k] = parse(&rec, cols[k], row, name)?;
        }
        let chf = match target_col {
            Some(c) => Some(parse(&rec, c, row, TARGET_NAME)?),
            None => None,
        };
        points.push(DataPoint { inputs, chf });
    }
    if points.is_empty() {
        return Err(DataError::EmptyFile);
    }
    Ok(Dataset::from_parts(points, path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRange {
    pub name: String,
    pub outside: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub n: usize,
    pub variables: Vec<VariableRange>,
}

impl RangeReport {
    pub fn violations(&self, name: &str) -> usize {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .map_or(0, |v| v.outside)
    }

    pub fn total_violations(&self) -> usize {
        self.variables.iter().map(|v| v.outside).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.total_violations() == 0
    }
}

impl fmt::Display for RangeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6}{:>10}{:>16}{:>16}", "var", "outside", "min", "max")?;
        for v in &self.variables {
            writeln!(f, "{:<6}{:>10}{:>16.6}{:>16.6}", v.name, v.outside, v.min, v.max)?;
        }
        Ok(())
    }
}

/// Counts points outside the reference envelope. Never rejects data.
pub fn validate_ranges(ds: &Dataset) -> RangeReport {
    validate_against(ds, &REFERENCE_ENVELOPE)
}

pub fn validate_against(ds: &Dataset, env: &Envelope) -> RangeReport {
    let mut variables = Vec::with_capacity(FEATURE_COUNT + 1);
    for f in Feature::ALL {
        let k = f.index();
        let vals = ds.points.iter().map(|p| p.inputs[k]);
        variables.push(range_of(f.name(), vals, env.lo[k], env.hi[k]));
    }
    if ds.points.iter().any(|p| p.chf.is_some()) {
        let vals = ds.points.iter().filter_map(|p| p.chf);
        variables.push(range_of(TARGET_NAME, vals, env.target_lo, env.target_hi));
    }
    RangeReport {
        n: ds.len(),
        variables,
    }
}

fn range_of(name: &str, vals: impl Iterator<Item = f64>, lo: f64, hi: f64) -> VariableRange {
    let mut r = VariableRange {
        name: name.to_string(),
        outside: 0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
    for v in vals {
        if v < lo || v > hi {
            r.outside += 1;
        }
        r.min = r.min.min(v);
        r.max = r.max.max(v);
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// Default train/validation/test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.72, 0.18, 0.10];

/// Seeded Fisher-Yates shuffle, then cut into floor(n·f_train), floor(n·f_val) and the
/// remainder. A 1e-9 guard absorbs representation error in products like 100 × 0.29.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitDataset, DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::FractionSumInvalid(fractions));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    Prng::new(seed).shuffle(&mut order);

    let n_train = ((n as f64) * fractions[0] + 1e-9).floor() as usize;
    let n_val = (((n as f64) * fractions[1] + 1e-9).floor() as usize).min(n - n_train);

    let take = |idx: &[usize], tag: &str| {
        Dataset::from_parts(
            idx.iter().map(|&i| ds.points[i]).collect(),
            format!("{} [{tag} split seed={seed} prng={PRNG_NAME}]", ds.provenance),
        )
    };
    Ok(SplitDataset {
        train: take(&order[..n_train], "train"),
        validation: take(&order[n_train..n_train + n_val], "validation"),
        test: take(&order[n_train + n_val..], "test"),
        fractions,
        seed,
    })
}

/// Per-feature z-score transform for the five inputs and the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_shift: [f64; FEATURE_COUNT],
    pub input_scale: [f64; FEATURE_COUNT],
    pub target_shift: f64,
    pub target_scale: f64,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            input_shift: [0.0; FEATURE_COUNT],
            input_scale: [1.0; FEATURE_COUNT],
            target_shift: 0.0,
            target_scale: 1.0,
        }
    }

    pub fn normalize_inputs(&self, x: &[f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|k| (x[k] - self.input_shift[k]) / self.input_scale[k])
    }

    pub fn denormalize_inputs(&self, z: &[f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|k| z[k] * self.input_scale[k] + self.input_shift[k])
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_shift) / self.target_scale
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_scale + self.target_shift
    }

    /// Variance in physical units from variance on the normalized scale.
    pub fn denormalize_variance(&self, v: f64) -> f64 {
        v * self.target_scale * self.target_scale
    }

    pub fn is_valid(&self) -> bool {
        self.input_scale
            .iter()
            .chain(std::iter::once(&self.target_scale))
            .all(|s| s.is_finite() && *s > 0.0)
            && self
                .input_shift
                .iter()
                .chain(std::iter::once(&self.target_shift))
                .all(|s| s.is_finite())
    }
}

/// Fits shift = mean and scale = population standard deviation on the training split.
pub fn fit_normalizer(train: &Dataset) -> Result<Normalizer, DataError> {
    if train.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut norm = Normalizer::identity();
    for f in Feature::ALL {
        let k = f.index();
        let (m, s) = mean_std(train.points.iter().map(|p| p.inputs[k]));
        if !is_spread(m, s) {
            return Err(DataError::DegenerateFeature(f.name().to_string()));
        }
        norm.input_shift[k] = m;
        norm.input_scale[k] = s;
    }
    if !train.has_targets() {
        return Err(DataError::MissingColumn(TARGET_NAME.to_string()));
    }
    let (m, s) = mean_std(train.points.iter().filter_map(|p| p.chf));
    if !is_spread(m, s) {
        return Err(DataError::DegenerateFeature(TARGET_NAME.to_string()));
    }
    norm.target_shift = m;
    norm.target_scale = s;
    Ok(norm)
}

// Summation error leaves a constant column with a tiny non-zero spread.
fn is_spread(mean: f64, std: f64) -> bool {
    std.is_finite() && std > 1e-12 * mean.abs().max(f64::MIN_POSITIVE)
}

fn mean_std(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count() as f64;
    let mean = vals.clone().sum::<f64>() / n;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Configuration of the synthetic stand-in for the reference CHF corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    /// Multiplier on the heteroscedastic noise law; 0 gives noiseless targets.
    pub noise_scale: f64,
    pub seed: u64,
    pub ranges: Envelope,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            noise_scale: 1.0,
            seed: 0,
            ranges: REFERENCE_ENVELOPE,
        }
    }
}

pub const SYNTHETIC_ORACLE_DOC: &str = "q = 2000 * (G/1000)^0.35 * (P/10000)^-0.12 * (1.3 - X)/1.3 \
     * (1 + L/2)^-0.2 * (D/0.008)^-0.3";
pub const SYNTHETIC_NOISE_DOC: &str = "sd = noise_scale * q * (0.04 + 0.08 * (X + 0.5)/1.5); \
     target = clamp(q + sd * N(0,1), CHF envelope)";

/// Smooth CHF-like reference surface used by the synthetic generator: power laws in
/// G and P, decreasing in X, L and D.
pub fn synthetic_oracle(x: &[f64; FEATURE_COUNT]) -> f64 {
    let [d, l, p, g, q] = *x;
    2000.0
        * (g / 1000.0).powf(0.35)
        * (p / 10000.0).powf(-0.12)
        * ((1.3 - q) / 1.3)
        * (1.0 + l / 2.0).powf(-0.2)
        * (d / 0.008).powf(-0.3)
}

/// Input-dependent noise standard deviation (relative noise of 4 % to 12 % growing with X).
pub fn synthetic_noise_sd(x: &[f64; FEATURE_COUNT], noise_scale: f64) -> f64 {
    let q = x[Feature::X.index()];
    noise_scale * synthetic_oracle(x) * (0.04 + 0.08 * (q + 0.5) / 1.5)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    if cfg.n == 0 {
        return Err(DataError::InvalidSynthetic("sample count must be >= 1".into()));
    }
    if !(cfg.noise_scale.is_finite() && cfg.noise_scale >= 0.0) {
        return Err(DataError::InvalidSynthetic("noise scale must be >= 0".into()));
    }
    let env = &cfg.ranges;
    for k in 0..FEATURE_COUNT {
        if !(env.lo[k] < env.hi[k]) {
            return Err(DataError::InvalidSynthetic(format!(
                "empty range for {}",
                FEATURE_NAMES[k]
            )));
        }
    }
    if env.lo[Feature::P.index()] <= 0.0 || env.lo[Feature::G.index()] <= 0.0 {
        return Err(DataError::InvalidSynthetic(
            "P and G ranges must be positive for log-uniform sampling".into(),
        ));
    }

    let mut rng = Prng::new(cfg.seed);
    let mut points = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let mut inputs = [0.0; FEATURE_COUNT];
        for f in Feature::ALL {
            let k = f.index();
            let u = rng.uniform();
            inputs[k] = match f {
                Feature::P | Feature::G => {
                    let (a, b) = (env.lo[k].ln(), env.hi[k].ln());
                    (a + u * (b - a)).exp().clamp(env.lo[k], env.hi[k])
                }
                _ => env.lo[k] + u * (env.hi[k] - env.lo[k]),
            };
        }
        let z = rng.normal();
        let mean = synthetic_oracle(&inputs);
        let y = if cfg.noise_scale == 0.0 {
            mean
        } else {
            (mean + synthetic_noise_sd(&inputs, cfg.noise_scale) * z)
                .clamp(env.target_lo, env.target_hi)
        };
        points.push(DataPoint {
            inputs,
            chf: Some(y),
        });
    }
    let provenance = format!(
        "synthetic:v1 seed={} n={} noise_scale={} prng={PRNG_NAME} oracle=[{SYNTHETIC_ORACLE_DOC}] noise=[{SYNTHETIC_NOISE_DOC}]",
        cfg.seed, cfg.n, cfg.noise_scale
    );
    Dataset::new(points, provenance)
}

/// One blind evaluation grid: four features held fixed, one swept over `range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub id: u32,
    pub varying: Feature,
    pub range: [f64; 2],
    pub points: usize,
    pub constants: BTreeMap<Feature, f64>,
}

impl SliceSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let [lo, hi] = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DataError::InvalidSlice(format!(
                "slice {}: range must satisfy lo < hi",
                self.id
            )));
        }
        if self.points < 2 {
            return Err(DataError::InvalidSlice(format!(
                "slice {}: point count must be >= 2",
                self.id
            )));
        }
        for f in Feature::ALL {
            if f == self.varying {
                if self.constants.contains_key(&f) {
                    return Err(DataError::InvalidSlice(format!(
                        "slice {}: varying feature {f} also given as constant",
                        self.id
                    )));
                }
                continue;
            }
            match self.constants.get(&f) {
                Some(v) if v.is_finite() => {}
                Some(_) => {
                    return Err(DataError::InvalidSlice(format!(
                        "slice {}: constant {f} is not finite",
                        self.id
                    )))
                }
                None => {
                    return Err(DataError::InvalidSlice(format!(
                        "slice {}: missing constant {f}",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }

    /// The swept values; both endpoints are reproduced exactly.
    pub fn grid_values(&self) -> Vec<f64> {
        let [lo, hi] = self.range;
        let last = self.points - 1;
        (0..self.points)
            .map(|i| {
                if i == last {
                    hi
                } else {
                    lo + (hi - lo) * (i as f64) / (last as f64)
                }
            })
            .collect()
    }
}

pub fn load_slice_specs(path: &Path) -> Result<Vec<SliceSpec>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let specs: Vec<SliceSpec> = serde_json::from_str(&text)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Builds the input-only grid for one slice.
pub fn build_slice_grid(spec: &SliceSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let k = spec.varying.index();
    let mut base = [0.0; FEATURE_COUNT];
    for (f, v) in &spec.constants {
        base[f.index()] = *v;
    }
    let points = spec
        .grid_values()
        .into_iter()
        .map(|v| {
            let mut inputs = base;
            inputs[k] = v;
            DataPoint { inputs, chf: None }
        })
        .collect();
    Ok(Dataset::from_parts(points, format!("slice:{}", spec.id)))
}

/// The eight tabulated blind slices, in SI units (D in meters).
pub fn standard_slices(points: usize) -> Vec<SliceSpec> {
    use Feature::*;
    let row = |id: u32, varying: Feature, range: [f64; 2], consts: [(Feature, f64); 4]| SliceSpec {
        id,
        varying,
        range,
        points,
        constants: consts.into_iter().collect(),
    };
    vec![
        row(1, L, [0.0, 20.0], [(D, 8.01e-3), (P, 9806.0), (G, 1000.0), (X, 0.587)]),
        row(2, L, [0.0, 20.0], [(D, 8.11e-3), (P, 2009.0), (G, 752.2), (X, 0.756)]),
        row(3, P, [0.0, 20000.0], [(D, 8.00e-3), (L, 0.998), (G, 2006.0), (X, 0.140)]),
        row(4, P, [0.0, 20000.0], [(D, 13.40e-3), (L, 3.658), (G, 2040.2), (X, 0.378)]),
        row(5, X, [-0.5, 1.0], [(D, 8.14e-3), (L, 1.943), (P, 9831.0), (G, 1519.5)]),
        row(6, D, [0.0, 16e-3], [(L, 6.000), (P, 9807.0), (G, 1003.3), (X, 0.529)]),
        row(7, G, [0.0, 8000.0], [(D, 8.00e-3), (L, 1.570), (P, 12750.0), (X, 0.144)]),
        row(8, G, [0.0, 8000.0], [(D, 10.00e-3), (L, 4.966), (P, 16000.0), (X, 0.343)]),
    ]
}
