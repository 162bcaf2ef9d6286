//! C ABI for sced.
//!
//! Every function returns a `ScedStatus`; on failure the message is available
//! from `sced_last_error_message` on the same thread. Handles are opaque and
//! must be released with their `_free` function. Matrices are row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sced::error::ScedError;
use sced::model::{Dataset, FitConfig, Objective, Partition};
use sced::pipeline::{fit_once, FitReport};
use sced::rng::stream;
use sced::selection::{select_k, SpicCurve};
use sced::sim::{generate_dataset, Generator, RadialSampler, SimDesign};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScedStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    Data = -3,
    Numerical = -4,
    BufferTooSmall = -5,
    Panic = -6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScedObjective {
    Pl1 = 1,
    Pl2 = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScedGenerator {
    M1 = 1,
    M2 = 2,
}

/// Fit settings. Start from `sced_fit_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ScedFitOptions {
    /// Inclusive cluster-count range; equal bounds fit a single k.
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub objective: ScedObjective,
    pub d0: f64,
    pub lambda_grid_size: usize,
    pub optimizer_evals_per_dim: usize,
}

/// Opaque numeric dataset.
pub struct ScedDataset {
    inner: Dataset,
}

/// Opaque fit result.
pub struct ScedFit {
    report: FitReport,
    spic: Option<SpicCurve>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &ScedError) -> ScedStatus {
    match e.root() {
        ScedError::InvalidInput(_) | ScedError::InvalidDesign(_) | ScedError::LengthMismatch { .. } => {
            ScedStatus::InvalidArgument
        }
        ScedError::ConstantColumn(_)
        | ScedError::Parse { .. }
        | ScedError::TooFewPoints(_)
        | ScedError::EmptyCluster(_)
        | ScedError::DegenerateGrid
        | ScedError::FlatCv => ScedStatus::Data,
        _ => ScedStatus::Numerical,
    }
}

struct Fail(ScedStatus, String);

impl From<ScedError> for Fail {
    fn from(e: ScedError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null() -> Fail {
    Fail(ScedStatus::NullPointer, "null pointer argument".into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScedStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ScedStatus::Panic
        }
    }
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    if len < src.len() {
        return Err(Fail(ScedStatus::BufferTooSmall, format!("buffer holds {len}, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn fit_ref<'a>(fit: *const ScedFit) -> Result<&'a ScedFit, Fail> {
    fit.as_ref().ok_or_else(null)
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sced_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Message of the last failed call on this thread; valid until the next call
/// that fails.
#[no_mangle]
pub extern "C" fn sced_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn sced_fit_options_default() -> ScedFitOptions {
    let c = FitConfig::default();
    ScedFitOptions {
        k_min: 2,
        k_max: 2,
        seed: c.seed,
        objective: ScedObjective::Pl2,
        d0: c.d0,
        lambda_grid_size: c.lambda_grid_size,
        optimizer_evals_per_dim: c.optimizer_evals_per_dim,
    }
}

/// Copy an n×p row-major buffer into a new dataset.
///
/// # Safety
/// `values` must point to n·p doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sced_dataset_new(values: *const f64, n: usize, p: usize, out: *mut *mut ScedDataset) -> ScedStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return Err(null());
        }
        let len = n.checked_mul(p).ok_or_else(|| Fail(ScedStatus::InvalidArgument, "n·p overflows".into()))?;
        let data = Dataset::new(std::slice::from_raw_parts(values, len).to_vec(), n, p)?;
        *out = Box::into_raw(Box::new(ScedDataset { inner: data }));
        Ok(())
    })
}

/// Column-standardized copy of a dataset.
///
/// # Safety
/// `data` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sced_dataset_standardize(data: *const ScedDataset, out: *mut *mut ScedDataset) -> ScedStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = Box::into_raw(Box::new(ScedDataset { inner: d.inner.standardize()? }));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn sced_dataset_n(data: *const ScedDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.n())
}

/// # Safety
/// `data` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn sced_dataset_p(data: *const ScedDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.p())
}

/// # Safety
/// `data` must be a live dataset handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn sced_dataset_free(data: *mut ScedDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Draw n points from a simulation design. When `labels_out` is not null it
/// receives the n one-based true labels.
///
/// # Safety
/// `out` must be writable; `labels_out` must be null or hold n entries.
#[no_mangle]
pub unsafe extern "C" fn sced_simulate(
    generator: ScedGenerator,
    p: usize,
    k: usize,
    n: usize,
    sigma: f64,
    seed: u64,
    out: *mut *mut ScedDataset,
    labels_out: *mut usize,
) -> ScedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let g = match generator {
            ScedGenerator::M1 => Generator::M1,
            ScedGenerator::M2 => Generator::M2,
        };
        let design = SimDesign::new(g, p, k, n, sigma, seed)?;
        let sampler = RadialSampler::new(g, p)?;
        let sample = generate_dataset(&design, &sampler, &mut stream(seed, &[0x5157]))?;
        if !labels_out.is_null() {
            let labels = sample.truth.one_based();
            ptr::copy_nonoverlapping(labels.as_ptr(), labels_out, labels.len());
        }
        *out = Box::into_raw(Box::new(ScedDataset { inner: sample.data }));
        Ok(())
    })
}

/// Fit one k, or select k by SPIC when `k_min < k_max`.
///
/// # Safety
/// `data` must be a live dataset handle; `options` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sced_fit(data: *const ScedDataset, options: *const ScedFitOptions, out: *mut *mut ScedFit) -> ScedStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(null)?;
        let o = options.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let config = FitConfig {
            k_range: (o.k_min, o.k_max),
            seed: o.seed,
            objective: match o.objective {
                ScedObjective::Pl1 => Objective::Pl1,
                ScedObjective::Pl2 => Objective::Pl2,
            },
            d0: o.d0,
            lambda_grid_size: o.lambda_grid_size,
            optimizer_evals_per_dim: o.optimizer_evals_per_dim,
            ..FitConfig::default()
        };
        config.validate()?;
        let fit = if o.k_min == o.k_max {
            ScedFit { report: fit_once(&d.inner, o.k_min, &config)?, spic: None }
        } else {
            let (curve, reports) = select_k(&d.inner, &config)?;
            let report = reports
                .into_iter()
                .find(|r| r.k == curve.selected)
                .ok_or_else(|| Fail(ScedStatus::Numerical, "selected fit missing".into()))?;
            ScedFit { report, spic: Some(curve) }
        };
        *out = Box::into_raw(Box::new(fit));
        Ok(())
    })
}

/// # Safety
/// `fit` must be a live fit handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_free(fit: *mut ScedFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of clusters in the reported fit; 0 for a null handle.
///
/// # Safety
/// `fit` must be a live fit handle or null.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_k(fit: *const ScedFit) -> usize {
    fit.as_ref().map_or(0, |f| f.report.k)
}

/// # Safety
/// `fit` must be a live fit handle or null.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_n(fit: *const ScedFit) -> usize {
    fit.as_ref().map_or(0, |f| f.report.n)
}

/// # Safety
/// `fit` must be a live fit handle or null.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_p(fit: *const ScedFit) -> usize {
    fit.as_ref().map_or(0, |f| f.report.p)
}

/// One-based final labels into a buffer of at least n entries.
///
/// # Safety
/// `out` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_labels(fit: *const ScedFit, out: *mut usize, len: usize) -> ScedStatus {
    guard(|| {
        let labels = &fit_ref(fit)?.report.final_stage().labels;
        if out.is_null() {
            return Err(null());
        }
        if len < labels.len() {
            return Err(Fail(ScedStatus::BufferTooSmall, format!("buffer holds {len}, need {}", labels.len())));
        }
        ptr::copy_nonoverlapping(labels.as_ptr(), out, labels.len());
        Ok(())
    })
}

/// Final cluster means, k×p.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_means(fit: *const ScedFit, out: *mut f64, len: usize) -> ScedStatus {
    guard(|| copy_out(&fit_ref(fit)?.report.final_stage().params.means.concat(), out, len))
}

/// Final variance matrix Σₓ, p×p.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_variance(fit: *const ScedFit, out: *mut f64, len: usize) -> ScedStatus {
    guard(|| copy_out(&fit_ref(fit)?.report.final_stage().params.variance.concat(), out, len))
}

/// Final mixing proportions, k entries.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_probs(fit: *const ScedFit, out: *mut f64, len: usize) -> ScedStatus {
    guard(|| copy_out(&fit_ref(fit)?.report.final_stage().params.probs, out, len))
}

/// Posterior cluster probabilities, n×k.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_posteriors(fit: *const ScedFit, out: *mut f64, len: usize) -> ScedStatus {
    guard(|| copy_out(&fit_ref(fit)?.report.posteriors.concat(), out, len))
}

/// Leave-one-out marginal log-likelihood of the final fit.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_loo_loglik(fit: *const ScedFit, out: *mut f64) -> ScedStatus {
    guard(|| copy_out(&[fit_ref(fit)?.report.loo_loglik], out, 1))
}

/// Full fit report, with the SPIC curve when k was selected, as a JSON
/// string to be released with `sced_string_free`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sced_fit_report_json(fit: *const ScedFit, out: *mut *mut c_char) -> ScedStatus {
    guard(|| {
        let f = fit_ref(fit)?;
        if out.is_null() {
            return Err(null());
        }
        let json = serde_json::json!({ "fit": f.report, "spic": f.spic });
        let text = serde_json::to_string(&json).map_err(ScedError::from)?;
        *out = CString::new(text).map_err(|e| Fail(ScedStatus::Numerical, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sced_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Rand index of two labelings of n points. Labels are arbitrary
/// non-negative integers.
///
/// # Safety
/// `a` and `b` must hold n entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sced_rand_index(a: *const usize, b: *const usize, n: usize, out: *mut f64) -> ScedStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null());
        }
        let part = |labels: &[usize]| {
            let mut seen = std::collections::BTreeMap::new();
            let dense: Vec<usize> = labels
                .iter()
                .map(|l| {
                    let next = seen.len();
                    *seen.entry(*l).or_insert(next)
                })
                .collect();
            Partition::new(dense, seen.len().max(1))
        };
        let pa = part(std::slice::from_raw_parts(a, n))?;
        let pb = part(std::slice::from_raw_parts(b, n))?;
        *out = sced::sim::rand_index(&pa, &pb)?;
        Ok(())
    })
}
