//! C ABI over the autoduct library.
//!
//! Objects are opaque handles created by the `ad_dataset_*` and `ad_ensemble_*`
//! constructors and released with the matching `ad_*_free`. Every fallible call returns an [`AdStatus`]; on failure
//! the message is kept per thread and can be read with [`ad_last_error`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use autoduct::dataset::{self, DataPoint, Dataset, SyntheticConfig, DEFAULT_FRACTIONS, FEATURE_COUNT};
use autoduct::ensemble::{self, Ensemble, MemberSpec};
use autoduct::evaluation;
use autoduct::neural_net::{Activation, MlpConfig, TrainConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument is out of range or not valid UTF-8.
    InvalidArgument = 2,
    /// File system failure.
    Io = 3,
    /// Malformed or inconsistent data.
    Data = 4,
    /// Training, prediction or model artifact failure.
    Model = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque dataset handle.
pub struct AdDataset(Dataset);

/// Opaque trained-ensemble handle.
pub struct AdEnsemble(Ensemble);

/// Architecture and optimizer settings shared by every member trained through
/// [`ad_ensemble_train`]. Obtain defaults with [`ad_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdTrainOptions {
    pub members: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// 0 ReLU, 1 LeakyReLU, 2 GELU, 3 SELU, 4 ELU, 5 Softplus.
    pub activation: u32,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Member `i` trains with seed `seed + i`.
    pub seed: u64,
    /// Seed of the 72/18/10 train/validation/test split.
    pub split_seed: u64,
}

/// Accuracy metrics of a prediction against targets.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdMetrics {
    pub n: usize,
    pub rmse: f64,
    pub mape_pct: f64,
    pub rmspe_pct: f64,
    pub ratio_mean: f64,
    pub ratio_std: f64,
    pub ratio_inside_frac: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Failure(AdStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(AdStatus::InvalidArgument, msg.into())
    }
}

impl From<dataset::DataError> for Failure {
    fn from(e: dataset::DataError) -> Self {
        let status = match e {
            dataset::DataError::Io(_) => AdStatus::Io,
            _ => AdStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<ensemble::EnsembleError> for Failure {
    fn from(e: ensemble::EnsembleError) -> Self {
        let status = match e {
            ensemble::EnsembleError::Io(_) => AdStatus::Io,
            _ => AdStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

impl From<evaluation::EvalError> for Failure {
    fn from(e: evaluation::EvalError) -> Self {
        Failure(AdStatus::Data, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(AdStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated) and
/// returns its length without the terminator; 0 when there is no error. A message
/// longer than `len - 1` bytes is truncated.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ad_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Synthetic heteroscedastic dataset of `n` rows.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a handle to free with
/// [`ad_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_generate(n: usize, seed: u64, noise_scale: f64, out: *mut *mut AdDataset) -> AdStatus {
    guard(|| {
        non_null(out, "out")?;
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(Failure::invalid("noise_scale must be finite and non-negative"));
        }
        let ds = dataset::generate_synthetic(&SyntheticConfig { n, seed, noise_scale, ..SyntheticConfig::default() })?;
        put(out, AdDataset(ds));
        Ok(())
    })
}

/// Loads a CSV with header `D,L,P,G,X,CHF`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_load_csv(path: *const c_char, out: *mut *mut AdDataset) -> AdStatus {
    guard(|| {
        non_null(out, "out")?;
        let ds = dataset::load_csv(&path_arg(path, "path")?)?;
        put(out, AdDataset(ds));
        Ok(())
    })
}

/// Builds a dataset from row-major inputs (`n` rows of D, L, P, G, X) and optional targets.
///
/// # Safety
/// `inputs` must point to `5 * n` doubles; `targets` must be null or point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_from_arrays(
    inputs: *const f64,
    targets: *const f64,
    n: usize,
    out: *mut *mut AdDataset,
) -> AdStatus {
    guard(|| {
        non_null(inputs, "inputs")?;
        non_null(out, "out")?;
        let x = std::slice::from_raw_parts(inputs, n * FEATURE_COUNT);
        let y = (!targets.is_null()).then(|| std::slice::from_raw_parts(targets, n));
        let points = x
            .chunks_exact(FEATURE_COUNT)
            .enumerate()
            .map(|(i, row)| {
                let chf = y.map(|y| y[i]);
                if row.iter().chain(chf.iter()).any(|v| !v.is_finite()) {
                    return Err(Failure(AdStatus::Data, format!("non-finite value in row {i}")));
                }
                Ok(DataPoint { inputs: row.try_into().unwrap(), chf })
            })
            .collect::<Result<Vec<_>, _>>()?;
        put(out, AdDataset(Dataset::new(points, "ffi")?));
        Ok(())
    })
}

/// Writes the dataset as CSV.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_write_csv(ds: *const AdDataset, path: *const c_char) -> AdStatus {
    guard(|| {
        non_null(ds, "ds")?;
        (*ds).0.write_csv(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of rows; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_len(ds: *const AdDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).0.len()
    }
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ad_dataset_free(ds: *mut AdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Defaults: 5 members of 6 x 32 GELU, dropout 0.05, learning rate 2e-3, weight decay
/// 1e-4, batch 128, 300 epochs with patience 30, seed 0.
#[no_mangle]
pub extern "C" fn ad_train_options_default() -> AdTrainOptions {
    let t = TrainConfig::default();
    AdTrainOptions {
        members: ensemble::FAST_ENSEMBLE_SIZE,
        hidden_layers: 6,
        hidden_units: 32,
        activation: 2,
        dropout_rate: 0.05,
        learning_rate: 2e-3,
        weight_decay: t.weight_decay,
        batch_size: t.batch_size,
        epochs: t.epochs,
        patience: t.patience,
        seed: 0,
        split_seed: 0,
    }
}

fn member_specs(o: &AdTrainOptions) -> Result<Vec<MemberSpec>, Failure> {
    if o.members == 0 {
        return Err(Failure::invalid("members must be at least 1"));
    }
    let activation = *Activation::ALL
        .get(o.activation as usize)
        .ok_or_else(|| Failure::invalid(format!("activation code {} is not defined", o.activation)))?;
    let mlp = MlpConfig {
        input_dim: FEATURE_COUNT,
        hidden_layers: o.hidden_layers,
        hidden_units: o.hidden_units,
        activation,
        dropout_rate: o.dropout_rate,
    };
    mlp.validate().map_err(|e| Failure::invalid(e.to_string()))?;
    (0..o.members)
        .map(|i| {
            let train = TrainConfig {
                learning_rate: o.learning_rate,
                weight_decay: o.weight_decay,
                batch_size: o.batch_size,
                epochs: o.epochs,
                patience: o.patience,
                seed: o.seed.wrapping_add(i as u64),
            };
            train.validate().map_err(|e| Failure::invalid(e.to_string()))?;
            Ok(MemberSpec { mlp, train, trial_id: None })
        })
        .collect()
}

/// Splits `ds`, fits the normalizer on the training part and trains the ensemble.
///
/// # Safety
/// `ds` must be a live handle, `opts` null (defaults) or valid, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_train(
    ds: *const AdDataset,
    opts: *const AdTrainOptions,
    out: *mut *mut AdEnsemble,
) -> AdStatus {
    guard(|| {
        non_null(ds, "ds")?;
        non_null(out, "out")?;
        let o = if opts.is_null() { ad_train_options_default() } else { *opts };
        let specs = member_specs(&o)?;
        let data = &(*ds).0;
        if !data.has_targets() {
            return Err(Failure(AdStatus::Data, "training data has no CHF column".into()));
        }
        let splits = dataset::split(data, DEFAULT_FRACTIONS, o.split_seed)?;
        let norm = dataset::fit_normalizer(&splits.train)?;
        let ens = ensemble::train_ensemble(&splits, &norm, &specs)?;
        put(out, AdEnsemble(ens));
        Ok(())
    })
}

/// Loads an ensemble directory written by [`ad_ensemble_save`] or the command-line tool.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_load(dir: *const c_char, out: *mut *mut AdEnsemble) -> AdStatus {
    guard(|| {
        non_null(out, "out")?;
        let ens = Ensemble::load(&path_arg(dir, "dir")?)?;
        put(out, AdEnsemble(ens));
        Ok(())
    })
}

/// # Safety
/// `ens` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_save(ens: *const AdEnsemble, dir: *const c_char) -> AdStatus {
    guard(|| {
        non_null(ens, "ens")?;
        (*ens).0.save(&path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// Number of members; 0 for a null handle.
///
/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_len(ens: *const AdEnsemble) -> usize {
    if ens.is_null() {
        0
    } else {
        (*ens).0.len()
    }
}

/// Predicts `n` rows of row-major inputs. Each output array receives `n` values; any of
/// them may be null to skip it. `total_var = aleatory_var + epistemic_var`.
///
/// # Safety
/// `inputs` must point to `5 * n` doubles and each non-null output to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_predict(
    ens: *const AdEnsemble,
    inputs: *const f64,
    n: usize,
    mean: *mut f64,
    aleatory_var: *mut f64,
    epistemic_var: *mut f64,
) -> AdStatus {
    guard(|| {
        non_null(ens, "ens")?;
        non_null(inputs, "inputs")?;
        let rows: Vec<[f64; FEATURE_COUNT]> = std::slice::from_raw_parts(inputs, n * FEATURE_COUNT)
            .chunks_exact(FEATURE_COUNT)
            .map(|r| r.try_into().unwrap())
            .collect();
        let preds = (*ens).0.predict(&rows)?;
        for (i, p) in preds.iter().enumerate() {
            if !mean.is_null() {
                *mean.add(i) = p.mean;
            }
            if !aleatory_var.is_null() {
                *aleatory_var.add(i) = p.aleatory_var;
            }
            if !epistemic_var.is_null() {
                *epistemic_var.add(i) = p.epistemic_var;
            }
        }
        Ok(())
    })
}

/// Predicts every row of `ds` and scores the predictions against its targets.
///
/// # Safety
/// `ens` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_evaluate(ens: *const AdEnsemble, ds: *const AdDataset, out: *mut AdMetrics) -> AdStatus {
    guard(|| {
        non_null(ens, "ens")?;
        non_null(ds, "ds")?;
        non_null(out, "out")?;
        let data = &(*ds).0;
        if !data.has_targets() {
            return Err(Failure(AdStatus::Data, "dataset has no CHF column".into()));
        }
        let yhat: Vec<f64> = (*ens).0.predict(&data.inputs())?.iter().map(|p| p.mean).collect();
        *out = metrics(&data.targets(), &yhat)?;
        Ok(())
    })
}

fn metrics(y: &[f64], yhat: &[f64]) -> Result<AdMetrics, Failure> {
    let m = evaluation::metrics_report("ffi", y, yhat)?;
    Ok(AdMetrics {
        n: m.n,
        rmse: m.rmse_kw_m2,
        mape_pct: m.mape_pct,
        rmspe_pct: m.rmspe_pct,
        ratio_mean: m.ratio_mean,
        ratio_std: m.ratio_std,
        ratio_inside_frac: m.ratio_inside_frac,
    })
}

/// Scores `n` predictions against targets.
///
/// # Safety
/// `y` and `yhat` must point to `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ad_metrics(y: *const f64, yhat: *const f64, n: usize, out: *mut AdMetrics) -> AdStatus {
    guard(|| {
        non_null(y, "y")?;
        non_null(yhat, "yhat")?;
        non_null(out, "out")?;
        *out = metrics(std::slice::from_raw_parts(y, n), std::slice::from_raw_parts(yhat, n))?;
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ad_ensemble_free(ens: *mut AdEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}
