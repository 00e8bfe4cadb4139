//! C ABI over `sphpr`.
//!
//! Every fallible call returns a [`SphprStatus`]. On failure the message is
//! available from [`sphpr_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and owned by the caller, who
//! releases them with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sphpr::cluster::{cluster, ClusterConfig, DEFAULT_LAMBDA_SUBSAMPLE, DEFAULT_REL_THRESHOLD};
use sphpr::em::{em_fit, select_bic, EmConfig, EmInit, FiniteMixture};
use sphpr::gof::{bayes_factor, GammaPrior, GofConfig, Verdict};
use sphpr::io::read_dataset;
use sphpr::marginal::{fit_structural, OptimizerConfig};
use sphpr::pr::{mixture_density_on, permutation_average, uniform_prior};
use sphpr::{Error, KernelFamily, KernelSpec, PrEstimate, UnitVector, WeightSchedule};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SphprStatus {
    Ok = 0,
    InvalidArgument = 1,
    DataError = 2,
    NumericalError = 3,
    NullPointer = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SphprFamily {
    VonMisesFisher = 0,
    Schladitz = 1,
}

impl From<SphprFamily> for KernelFamily {
    fn from(f: SphprFamily) -> Self {
        match f {
            SphprFamily::VonMisesFisher => KernelFamily::VonMisesFisher,
            SphprFamily::Schladitz => KernelFamily::Schladitz,
        }
    }
}

/// Observations on S².
pub struct SphprDataset(Vec<UnitVector>);

/// A PR mixing-density estimate.
pub struct SphprEstimate(PrEstimate);

/// A finite mixture fitted by EM.
pub struct SphprEmFit(FiniteMixture);

/// Modes and labels from mode-based clustering.
pub struct SphprClustering {
    modes: Vec<UnitVector>,
    masses: Vec<f64>,
    labels: Vec<usize>,
    lambda: f64,
}

/// Options for [`sphpr_estimate`]. Obtain defaults from
/// [`sphpr_estimate_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SphprEstimateOptions {
    pub grid_theta: usize,
    pub grid_phi: usize,
    pub gamma: f64,
    pub n_perms: usize,
    pub seed: u64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_tol: f64,
    pub opt_budget: usize,
    /// Fixed λ; NaN searches [lambda_min, lambda_max].
    pub lambda: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SphprGofResult {
    pub log10_bf: f64,
    pub lambda_hat_h0: f64,
    pub lambda_hat_h1: f64,
    /// 1 when the single kernel is favoured, 0 otherwise.
    pub favors_h0: i32,
    /// 1 when either λ̂ lies on the search boundary.
    pub boundary: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SphprStatus {
    match e.exit_code() {
        1 => SphprStatus::InvalidArgument,
        2 => SphprStatus::DataError,
        _ => SphprStatus::NumericalError,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SphprStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SphprStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SphprStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SphprStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn points(xyz: &[f64]) -> Result<Vec<UnitVector>, Error> {
    xyz.chunks_exact(3)
        .map(|c| UnitVector::normalize(c[0], c[1], c[2]))
        .collect()
}

fn length_check(expected: usize, got: usize) -> Result<(), Fail> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got }.into());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sphpr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sphpr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from `n` Cartesian triples, normalizing each.
///
/// # Safety
/// `xyz` must point to `3 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_dataset_from_xyz(xyz: *const f64, n: usize, out: *mut *mut SphprDataset) -> SphprStatus {
    guard(|| {
        let v = slice(xyz, 3 * n, "xyz")?;
        put(out, SphprDataset(points(v)?))
    })
}

/// Reads a dataset from a CSV file (x1,x2,x3 or theta,phi rows).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_dataset_from_csv(path: *const c_char, out: *mut *mut SphprDataset) -> SphprStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Error::InvalidArgument(format!("path is not UTF-8: {e}")))?;
        put(out, SphprDataset(read_dataset(p)?.points))
    })
}

/// Number of observations, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_dataset_len(ds: *const SphprDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sphpr_dataset_free(ds: *mut SphprDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub extern "C" fn sphpr_estimate_options_default(family: SphprFamily) -> SphprEstimateOptions {
    let f = KernelFamily::from(family);
    let (lo, hi) = f.default_lambda_range();
    let opt = OptimizerConfig::default();
    SphprEstimateOptions {
        grid_theta: f.default_n_theta(),
        grid_phi: 120,
        gamma: opt.schedule.gamma(),
        n_perms: opt.n_perms,
        seed: 0,
        lambda_min: lo,
        lambda_max: hi,
        lambda_tol: opt.tol,
        opt_budget: opt.budget,
        lambda: f64::NAN,
    }
}

fn optimizer(o: &SphprEstimateOptions) -> Result<OptimizerConfig, Error> {
    Ok(OptimizerConfig {
        tol: o.lambda_tol,
        budget: o.opt_budget,
        n_perms: o.n_perms,
        seed: o.seed,
        schedule: WeightSchedule::new(o.gamma)?,
    })
}

/// Estimates λ by PR marginal likelihood (unless fixed) and the mixing
/// density at λ.
///
/// # Safety
/// `ds` must be a live dataset; `options` NULL or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate(
    ds: *const SphprDataset,
    family: SphprFamily,
    options: *const SphprEstimateOptions,
    out: *mut *mut SphprEstimate,
) -> SphprStatus {
    guard(|| {
        let data = &deref(ds, "dataset")?.0;
        let o = options.as_ref().copied().unwrap_or_else(|| sphpr_estimate_options_default(family));
        let family = KernelFamily::from(family);
        let range = (o.lambda_min, o.lambda_max);
        let psi0 = uniform_prior(family, o.grid_theta, o.grid_phi)?;
        let opt = optimizer(&o)?;
        let est = if o.lambda.is_nan() {
            fit_structural(data, family, range, &psi0, &opt)?.1
        } else {
            let spec = KernelSpec::with_range(family, o.lambda, range)?;
            permutation_average(data, &spec, &psi0, opt.schedule, opt.n_perms, opt.seed)?
        };
        put(out, SphprEstimate(est))
    })
}

/// # Safety
/// `est` must be a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_lambda(est: *const SphprEstimate) -> f64 {
    est.as_ref().map_or(f64::NAN, |e| e.0.kernel.lambda)
}

/// # Safety
/// `est` must be a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_log_marginal(est: *const SphprEstimate) -> f64 {
    est.as_ref().map_or(f64::NAN, |e| e.0.log_marginal)
}

/// Number of support-grid nodes, or 0 for NULL.
///
/// # Safety
/// `est` must be NULL or a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_len(est: *const SphprEstimate) -> usize {
    est.as_ref().map_or(0, |e| e.0.psi.grid().len())
}

/// Copies node θ, φ and ψ̂ values (θ-major) into caller buffers of length
/// `len`, which must equal [`sphpr_estimate_len`]. Any buffer may be NULL.
///
/// # Safety
/// Non-NULL buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_grid(
    est: *const SphprEstimate,
    theta: *mut f64,
    phi: *mut f64,
    psi: *mut f64,
    len: usize,
) -> SphprStatus {
    guard(|| {
        let e = &deref(est, "estimate")?.0;
        let g = e.psi.grid();
        length_check(g.len(), len)?;
        if !theta.is_null() {
            for (o, c) in slice_mut(theta, len, "theta")?.iter_mut().zip(g.nodes()) {
                *o = c.theta();
            }
        }
        if !phi.is_null() {
            for (o, c) in slice_mut(phi, len, "phi")?.iter_mut().zip(g.nodes()) {
                *o = c.phi();
            }
        }
        if !psi.is_null() {
            slice_mut(psi, len, "psi")?.copy_from_slice(e.psi.values());
        }
        Ok(())
    })
}

/// Mixture density f̂(y) at `n` Cartesian points.
///
/// # Safety
/// `xyz` must hold `3 * n` doubles and `out` `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_density(
    est: *const SphprEstimate,
    xyz: *const f64,
    n: usize,
    out: *mut f64,
) -> SphprStatus {
    guard(|| {
        let e = &deref(est, "estimate")?.0;
        let pts = points(slice(xyz, 3 * n, "xyz")?)?;
        let f = mixture_density_on(&e.psi, &e.kernel, &pts);
        slice_mut(out, n, "out")?.copy_from_slice(&f);
        Ok(())
    })
}

/// # Safety
/// `est` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sphpr_estimate_free(est: *mut SphprEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Fits `components` kernels by EM, or selects J ≤ `j_max` by BIC over
/// `restarts` seeded starts when `components` is 0.
///
/// # Safety
/// `ds` must be a live dataset; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_fit_em(
    ds: *const SphprDataset,
    family: SphprFamily,
    components: usize,
    j_max: usize,
    restarts: usize,
    seed: u64,
    out: *mut *mut SphprEmFit,
) -> SphprStatus {
    guard(|| {
        let data = &deref(ds, "dataset")?.0;
        let family = KernelFamily::from(family);
        let cfg = EmConfig::for_family(family);
        let fit = if components > 0 {
            em_fit(data, family, components, &EmInit::Seeded(seed), &cfg)?
        } else {
            select_bic(data, family, j_max, restarts, seed, &cfg)?
        };
        put(out, SphprEmFit(fit))
    })
}

/// # Safety
/// `fit` must be NULL or a live EM handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_components(fit: *const SphprEmFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.components())
}

/// # Safety
/// `fit` must be a live EM handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_lambda(fit: *const SphprEmFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.lambda)
}

/// # Safety
/// `fit` must be a live EM handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_log_lik(fit: *const SphprEmFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.log_lik)
}

/// # Safety
/// `fit` must be a live EM handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_bic(fit: *const SphprEmFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.bic)
}

/// Weight and mean direction of component `k`.
///
/// # Safety
/// `weight` must be writable and `mu` hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_component(fit: *const SphprEmFit, k: usize, weight: *mut f64, mu: *mut f64) -> SphprStatus {
    guard(|| {
        let f = &deref(fit, "fit")?.0;
        if k >= f.components() {
            return Err(Error::InvalidArgument(format!("component {k} out of range")).into());
        }
        if weight.is_null() {
            return Err(Fail::Null("weight"));
        }
        *weight = f.weights[k];
        slice_mut(mu, 3, "mu")?.copy_from_slice(f.mus[k].as_array());
        Ok(())
    })
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sphpr_em_free(fit: *mut SphprEmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Bayes factor of a single kernel against a PR mixture of it, with a
/// Gamma(`prior_shape`, `prior_scale`) prior on λ.
///
/// # Safety
/// `ds` must be a live dataset; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_bayes_factor(
    ds: *const SphprDataset,
    family: SphprFamily,
    prior_shape: f64,
    prior_scale: f64,
    seed: u64,
    out: *mut SphprGofResult,
) -> SphprStatus {
    guard(|| {
        let data = &deref(ds, "dataset")?.0;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let family = KernelFamily::from(family);
        let mut cfg = GofConfig::for_family(family);
        cfg.optimizer.seed = seed;
        let r = bayes_factor(data, family, &GammaPrior::new(prior_shape, prior_scale)?, &cfg)?;
        *out = SphprGofResult {
            log10_bf: r.log10_bf,
            lambda_hat_h0: r.lambda_hat_h0,
            lambda_hat_h1: r.lambda_hat_h1,
            favors_h0: i32::from(r.verdict == Verdict::FavorsH0),
            boundary: i32::from(r.boundary_h0 || r.boundary_h1),
        };
        Ok(())
    })
}

/// Clusters observations by the modes of the PR estimate. `options` may be
/// NULL for defaults; `rel_threshold` ≤ 0 and `lambda_subsample` = 0 also
/// select defaults.
///
/// # Safety
/// `ds` must be a live dataset; `options` NULL or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sphpr_cluster(
    ds: *const SphprDataset,
    family: SphprFamily,
    options: *const SphprEstimateOptions,
    lambda_subsample: usize,
    rel_threshold: f64,
    out: *mut *mut SphprClustering,
) -> SphprStatus {
    guard(|| {
        let data = &deref(ds, "dataset")?.0;
        let o = options.as_ref().copied().unwrap_or_else(|| sphpr_estimate_options_default(family));
        let cfg = ClusterConfig {
            family: family.into(),
            grid: (o.grid_theta, o.grid_phi),
            lambda_range: (o.lambda_min, o.lambda_max),
            lambda_subsample: if lambda_subsample == 0 { DEFAULT_LAMBDA_SUBSAMPLE } else { lambda_subsample },
            rel_threshold: if rel_threshold > 0.0 { rel_threshold } else { DEFAULT_REL_THRESHOLD },
            optimizer: optimizer(&o)?,
        };
        let c = cluster(data, &cfg)?;
        put(
            out,
            SphprClustering {
                modes: c.model.modes,
                masses: c.model.mode_masses,
                labels: c.labels,
                lambda: c.model.kernel.lambda,
            },
        )
    })
}

/// # Safety
/// `c` must be NULL or a live clustering handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_clustering_modes(c: *const SphprClustering) -> usize {
    c.as_ref().map_or(0, |c| c.modes.len())
}

/// # Safety
/// `c` must be NULL or a live clustering handle.
#[no_mangle]
pub unsafe extern "C" fn sphpr_clustering_lambda(c: *const SphprClustering) -> f64 {
    c.as_ref().map_or(f64::NAN, |c| c.lambda)
}

/// Location and attributed mass of mode `k`.
///
/// # Safety
/// `mass` must be writable and `mu` hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn sphpr_clustering_mode(c: *const SphprClustering, k: usize, mass: *mut f64, mu: *mut f64) -> SphprStatus {
    guard(|| {
        let c = deref(c, "clustering")?;
        if k >= c.modes.len() {
            return Err(Error::InvalidArgument(format!("mode {k} out of range")).into());
        }
        if mass.is_null() {
            return Err(Fail::Null("mass"));
        }
        *mass = c.masses[k];
        slice_mut(mu, 3, "mu")?.copy_from_slice(c.modes[k].as_array());
        Ok(())
    })
}

/// Copies one label per observation into `labels` (length `len`).
///
/// # Safety
/// `labels` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn sphpr_clustering_labels(c: *const SphprClustering, labels: *mut usize, len: usize) -> SphprStatus {
    guard(|| {
        let c = deref(c, "clustering")?;
        length_check(c.labels.len(), len)?;
        slice_mut(labels, len, "labels")?.copy_from_slice(&c.labels);
        Ok(())
    })
}

/// # Safety
/// `c` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sphpr_clustering_free(c: *mut SphprClustering) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}
