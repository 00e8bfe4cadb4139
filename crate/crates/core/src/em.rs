//! Finite-mixture maximum likelihood by EM, with BIC selection of the
//! number of components. This is the discrete-mixing baseline PR is
//! compared against.
//!
//! All components share the structural parameter λ. For vMF the M-step is
//! exact: locations are normalized resultants and κ solves
//! A(κ) = coth κ − 1/κ = r̄, the pooled mean resultant length. For the axial
//! Schladitz kernel each location is the dominant eigenvector of the
//! responsibility-weighted Tyler scatter Σ_i r_ij y_i y_iᵀ / q_ij, a
//! minorize–maximize step, and β is updated by a bounded 1-D Newton search on
//! the expected complete-data log-likelihood. Both updates never decrease the
//! observed log-likelihood.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastexp;
use crate::kernels::{Kernel, KernelFamily};
use crate::seed::derive_seed;
use crate::sphere::{SphericalCoord, UnitVector};

/// Components whose total responsibility falls below this are pruned.
const PRUNE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMixture {
    pub family: KernelFamily,
    pub mus: Vec<UnitVector>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub log_lik: f64,
    /// −2 log L + 3J log n.
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Observed log-likelihood after each parameter update, starting with the
    /// initial parameters.
    pub log_lik_trace: Vec<f64>,
    pub pruned: usize,
}

impl FiniteMixture {
    pub fn components(&self) -> usize {
        self.mus.len()
    }

    pub fn density(&self, y: &UnitVector) -> f64 {
        finite_mixture_density(self, y)
    }

    /// Component locations in (θ, φ) with their weights, axial locations
    /// folded into the upper hemisphere.
    pub fn point_masses(&self) -> Vec<(SphericalCoord, f64)> {
        self.mus
            .iter()
            .zip(&self.weights)
            .map(|(mu, w)| {
                let m = if self.family.is_axial() { upper(mu) } else { *mu };
                (m.to_spherical(), *w)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub lambda_range: (f64, f64),
}

impl EmConfig {
    pub fn for_family(family: KernelFamily) -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-8,
            lambda_range: family.default_lambda_range(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum EmInit {
    /// k-means++ seeding on the sphere (axial distance for Schladitz).
    Seeded(u64),
    Locations(Vec<UnitVector>),
}

pub const DEFAULT_RESTARTS: usize = 5;
pub const DEFAULT_J_MAX: usize = 10;

pub fn finite_mixture_density(fit: &FiniteMixture, y: &UnitVector) -> f64 {
    let k = Kernel::new(fit.family, fit.lambda);
    fit.mus.iter().zip(&fit.weights).map(|(mu, w)| w * k.density(y, mu)).sum()
}

fn upper(v: &UnitVector) -> UnitVector {
    if v.x3() < 0.0 {
        -*v
    } else {
        *v
    }
}

fn dissimilarity(family: KernelFamily, a: &UnitVector, b: &UnitVector) -> f64 {
    let t = a.dot(b);
    if family.is_axial() {
        1.0 - t.abs()
    } else {
        1.0 - t
    }
}

fn kmeanspp(data: &[UnitVector], family: KernelFamily, j: usize, rng: &mut ChaCha8Rng) -> Vec<UnitVector> {
    let mut seeds = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|y| dissimilarity(family, y, &seeds[0]).powi(2)).collect();
    while seeds.len() < j {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        let c = data[next];
        seeds.push(c);
        for (d, y) in d2.iter_mut().zip(data) {
            *d = d.min(dissimilarity(family, y, &c).powi(2));
        }
    }
    seeds
}

/// Inverse of A(κ) = coth κ − 1/κ on [lo, hi].
pub fn vmf_kappa_from_resultant(rbar: f64, lo: f64, hi: f64) -> f64 {
    let a = |k: f64| -> f64 {
        if k < 1e-3 {
            k / 3.0 - k.powi(3) / 45.0
        } else {
            1.0 / k.tanh() - 1.0 / k
        }
    };
    if !(rbar > a(lo)) {
        return lo;
    }
    if rbar >= a(hi) {
        return hi;
    }
    // Banerjee et al. approximation as the Newton start, bisection as the safeguard.
    let mut k = (rbar * (3.0 - rbar * rbar) / (1.0 - rbar * rbar)).clamp(lo, hi);
    let (mut a_lo, mut a_hi) = (lo, hi);
    for _ in 0..100 {
        let g = a(k) - rbar;
        if g > 0.0 {
            a_hi = k;
        } else {
            a_lo = k;
        }
        let dk = 1.0 / (k * k) - 1.0 / k.sinh().powi(2);
        let mut next = k - g / dk;
        if !(next > a_lo && next < a_hi) || !next.is_finite() {
            next = 0.5 * (a_lo + a_hi);
        }
        if (next - k).abs() <= 1e-13 * k {
            return next;
        }
        k = next;
    }
    k
}

struct State {
    mus: Vec<UnitVector>,
    weights: Vec<f64>,
    lambda: f64,
}

/// Observations as coordinate columns.
struct Columns {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Columns {
    fn new(data: &[UnitVector]) -> Self {
        Columns {
            x: data.iter().map(|v| v.x1()).collect(),
            y: data.iter().map(|v| v.x2()).collect(),
            z: data.iter().map(|v| v.x3()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.x.len()
    }

    /// out_i = μᵀy_i
    fn project(&self, mu: &UnitVector, out: &mut [f64]) {
        let [a, b, c] = *mu.as_array();
        for (((o, x), y), z) in out.iter_mut().zip(&self.x).zip(&self.y).zip(&self.z) {
            *o = a * x + b * y + c * z;
        }
    }
}

/// Responsibilities stored component-major: row k holds r_1k … r_nk.
struct Work {
    resp: Vec<f64>,
    max: Vec<f64>,
    sum: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            resp: Vec::new(),
            max: vec![0.0; n],
            sum: vec![0.0; n],
        }
    }
}

/// E-step: fills responsibilities and returns the observed log-likelihood.
fn e_step(cols: &Columns, family: KernelFamily, s: &State, w: &mut Work) -> f64 {
    let n = cols.len();
    let j = s.mus.len();
    let kernel = Kernel::new(family, s.lambda);
    w.resp.resize(n * j, 0.0);
    w.sum.iter_mut().for_each(|v| *v = 0.0);
    let mut ll = 0.0;
    match kernel {
        Kernel::VonMisesFisher { kappa, log_norm } => {
            w.max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
            for ((row, mu), weight) in w.resp.chunks_mut(n).zip(&s.mus).zip(&s.weights) {
                cols.project(mu, row);
                let c = weight.ln() + log_norm;
                for (r, m) in row.iter_mut().zip(w.max.iter_mut()) {
                    *r = c + kappa * *r;
                    *m = if *r > *m { *r } else { *m };
                }
            }
            for row in w.resp.chunks_mut(n) {
                for ((r, m), t) in row.iter_mut().zip(&w.max).zip(w.sum.iter_mut()) {
                    *r = fastexp::exp(*r - m);
                    *t += *r;
                }
            }
            for (m, t) in w.max.iter().zip(w.sum.iter_mut()) {
                ll += m + t.ln();
                *t = 1.0 / *t;
            }
        }
        Kernel::Schladitz { norm, shrink, .. } => {
            // q ∈ [β², 1] keeps every density within a bounded ratio of the
            // others, so no log-domain shift is needed.
            for ((row, mu), weight) in w.resp.chunks_mut(n).zip(&s.mus).zip(&s.weights) {
                cols.project(mu, row);
                let c = weight * norm;
                for (r, t) in row.iter_mut().zip(w.sum.iter_mut()) {
                    let q = 1.0 - shrink * *r * *r;
                    *r = c / (q * q.sqrt());
                    *t += *r;
                }
            }
            for t in w.sum.iter_mut() {
                ll += t.ln();
                *t = 1.0 / *t;
            }
        }
    }
    for row in w.resp.chunks_mut(n) {
        row.iter_mut().zip(&w.sum).for_each(|(r, inv)| *r *= inv);
    }
    ll
}

fn component_masses(resp: &[f64], n: usize) -> Vec<f64> {
    resp.chunks(n).map(|row| row.iter().sum()).collect()
}

fn m_step_vmf(cols: &Columns, resp: &[f64], s: &mut State, range: (f64, f64)) {
    let n = cols.len();
    let mut total_len = 0.0;
    for (k, row) in resp.chunks(n).enumerate() {
        let (mut a, mut b, mut c, mut m) = (0.0, 0.0, 0.0, 0.0);
        for (((r, x), y), z) in row.iter().zip(&cols.x).zip(&cols.y).zip(&cols.z) {
            a += r * x;
            b += r * y;
            c += r * z;
            m += r;
        }
        let len = (a * a + b * b + c * c).sqrt();
        if len > 0.0 {
            s.mus[k] = UnitVector::new_unchecked([a / len, b / len, c / len]);
        }
        total_len += len;
        s.weights[k] = m / n as f64;
    }
    s.lambda = vmf_kappa_from_resultant(total_len / n as f64, range.0, range.1);
}

/// First two derivatives in β of the expected complete-data log-likelihood
/// for fixed locations.
fn schladitz_dq(beta: f64, t2: &[f64], w: &[f64], total: f64) -> (f64, f64) {
    let b2 = beta * beta;
    let (mut s1, mut s2) = (0.0, 0.0);
    for (t, r) in t2.iter().zip(w) {
        let v = t / (1.0 - (1.0 - b2) * t);
        s1 += r * v;
        s2 += r * v * v;
    }
    // u = 2βv, ∂u/∂β = 2v − u²
    let d1 = total / beta - 3.0 * beta * s1;
    let d2 = -total / b2 - 3.0 * s1 + 6.0 * b2 * s2;
    (d1, d2)
}

/// Q(β) − Q(β₀).
fn schladitz_dq_gain(beta: f64, beta0: f64, t2: &[f64], w: &[f64], total: f64) -> f64 {
    let (g, g0) = (1.0 - beta * beta, 1.0 - beta0 * beta0);
    let s: f64 = t2.iter().zip(w).map(|(t, r)| r * ((1.0 - g * t) / (1.0 - g0 * t)).ln()).sum();
    total * (beta / beta0).ln() - 1.5 * s
}

fn m_step_schladitz(cols: &Columns, resp: &[f64], s: &mut State, range: (f64, f64), t2: &mut Vec<f64>) {
    let n = cols.len();
    let shrink = 1.0 - s.lambda * s.lambda;
    t2.resize(resp.len(), 0.0);
    for (k, (row, tk)) in resp.chunks(n).zip(t2.chunks_mut(n)).enumerate() {
        cols.project(&s.mus[k], tk);
        // Tyler-weighted scatter Σ_i r_i y_i y_iᵀ / q_i
        let mut acc = [0.0f64; 7];
        for (i, (r, t)) in row.iter().zip(tk.iter()).enumerate() {
            let wgt = r / (1.0 - shrink * t * t);
            let (x, y, z) = (cols.x[i], cols.y[i], cols.z[i]);
            acc[0] += wgt * x * x;
            acc[1] += wgt * x * y;
            acc[2] += wgt * x * z;
            acc[3] += wgt * y * y;
            acc[4] += wgt * y * z;
            acc[5] += wgt * z * z;
            acc[6] += r;
        }
        s.weights[k] = acc[6] / n as f64;
        let m = Matrix3::new(acc[0], acc[1], acc[2], acc[1], acc[3], acc[4], acc[2], acc[4], acc[5]);
        let eig = SymmetricEigen::new(m);
        let v = eig.eigenvectors.column(eig.eigenvalues.imax());
        if let Ok(mu) = UnitVector::normalize(v[0], v[1], v[2]) {
            s.mus[k] = upper(&mu);
        }
        cols.project(&s.mus[k], tk);
        tk.iter_mut().for_each(|t| *t *= *t);
    }

    // Shared β given the new locations.
    let total = n as f64;
    let (lo, hi) = range;
    let current = s.lambda.clamp(lo, hi);
    let (mut a, mut b) = (lo, hi);
    let mut beta = current;
    for _ in 0..60 {
        let (d1, d2) = schladitz_dq(beta, t2, resp, total);
        if d1 > 0.0 {
            a = beta;
        } else {
            b = beta;
        }
        let mut next = if d2 < 0.0 { beta - d1 / d2 } else { f64::NAN };
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if (next - beta).abs() <= 1e-12 * beta || (b - a) <= 1e-12 * beta {
            beta = next;
            break;
        }
        beta = next;
    }
    // An endpoint can beat the interior stationary point when Q is not
    // concave, but only if it is itself a local maximum.
    let mut cands = vec![beta];
    if schladitz_dq(lo, t2, resp, total).0 < 0.0 {
        cands.push(lo);
    }
    if schladitz_dq(hi, t2, resp, total).0 > 0.0 {
        cands.push(hi);
    }
    let best = cands
        .into_iter()
        .map(|x| (x, schladitz_dq_gain(x, current, t2, resp, total)))
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty");
    if best.1 >= 0.0 {
        s.lambda = best.0;
    }
}

fn initial_lambda(data: &[UnitVector], cols: &Columns, family: KernelFamily, seeds: &[UnitVector], range: (f64, f64)) -> f64 {
    let j = seeds.len();
    let n = data.len();
    let mut resp = vec![0.0; n * j];
    for (i, y) in data.iter().enumerate() {
        let best = (0..j)
            .min_by(|&a, &b| dissimilarity(family, y, &seeds[a]).total_cmp(&dissimilarity(family, y, &seeds[b])))
            .expect("at least one seed");
        resp[best * n + i] = 1.0;
    }
    match family {
        KernelFamily::VonMisesFisher => {
            let mut s = State {
                mus: seeds.to_vec(),
                weights: vec![1.0 / j as f64; j],
                lambda: range.0,
            };
            m_step_vmf(cols, &resp, &mut s, range);
            s.lambda
        }
        KernelFamily::Schladitz => {
            // Pooled eigenvalue ratio of the per-cluster second moments.
            let mut num = 0.0;
            let mut total = 0.0;
            for row in resp.chunks(n) {
                let mut m = Matrix3::<f64>::zeros();
                let mut mass = 0.0;
                for (y, r) in data.iter().zip(row) {
                    if *r > 0.0 {
                        let v = y.to_vector3();
                        m += v * v.transpose();
                        mass += 1.0;
                    }
                }
                if mass == 0.0 {
                    continue;
                }
                let mut ev: Vec<f64> = SymmetricEigen::new(m / mass).eigenvalues.iter().copied().collect();
                ev.sort_by(|a, b| b.total_cmp(a));
                let ratio = (0.5 * (ev[1] + ev[2]) / ev[0]).max(0.0).sqrt();
                num += mass * ratio;
                total += mass;
            }
            (num / total).clamp(range.0, range.1)
        }
    }
}

/// Fits a `j`-component mixture by EM.
pub fn em_fit(
    data: &[UnitVector],
    family: KernelFamily,
    j: usize,
    init: &EmInit,
    config: &EmConfig,
) -> Result<FiniteMixture> {
    if j == 0 {
        return Err(Error::invalid("EM needs at least one component"));
    }
    if data.len() < j {
        return Err(Error::invalid(format!("{} observations cannot support {j} components", data.len())));
    }
    let (lo, hi) = config.lambda_range;
    family.validate_lambda(lo)?;
    family.validate_lambda(hi)?;
    if !(lo < hi) {
        return Err(Error::invalid(format!("empty lambda range [{lo}, {hi}]")));
    }
    let seeds = match init {
        EmInit::Seeded(seed) => kmeanspp(data, family, j, &mut ChaCha8Rng::seed_from_u64(*seed)),
        EmInit::Locations(locs) => {
            if locs.len() != j {
                return Err(Error::LengthMismatch {
                    expected: j,
                    got: locs.len(),
                });
            }
            locs.clone()
        }
    };
    let cols = Columns::new(data);
    let n = data.len();
    let mut state = State {
        lambda: initial_lambda(data, &cols, family, &seeds, config.lambda_range),
        mus: seeds,
        weights: vec![1.0 / j as f64; j],
    };

    let mut work = Work::new(n);
    let mut t2 = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut pruned = 0;
    let mut iterations = 0;
    let mut ll = e_step(&cols, family, &state, &mut work);
    trace.push(ll);
    while iterations < config.max_iter {
        iterations += 1;
        let jn = state.mus.len();
        let mass = component_masses(&work.resp, n);
        if jn > 1 && mass.iter().any(|m| *m < PRUNE_MASS) {
            let keep: Vec<usize> = (0..jn).filter(|k| mass[*k] >= PRUNE_MASS).collect();
            log::warn!("EM: pruning {} empty component(s)", jn - keep.len());
            pruned += jn - keep.len();
            state.mus = keep.iter().map(|k| state.mus[*k]).collect();
            let w: Vec<f64> = keep.iter().map(|k| state.weights[*k]).collect();
            let tw: f64 = w.iter().sum();
            state.weights = w.into_iter().map(|x| x / tw).collect();
            ll = e_step(&cols, family, &state, &mut work);
            trace.push(ll);
        }
        match family {
            KernelFamily::VonMisesFisher => m_step_vmf(&cols, &work.resp, &mut state, config.lambda_range),
            KernelFamily::Schladitz => m_step_schladitz(&cols, &work.resp, &mut state, config.lambda_range, &mut t2),
        }
        let next = e_step(&cols, family, &state, &mut work);
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain.abs() < config.tol {
            converged = true;
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::Numerical("EM log-likelihood is not finite".into()));
    }

    let mut order: Vec<usize> = (0..state.mus.len()).collect();
    order.sort_by(|a, b| state.weights[*b].total_cmp(&state.weights[*a]));
    let mus: Vec<UnitVector> = order
        .iter()
        .map(|k| if family.is_axial() { upper(&state.mus[*k]) } else { state.mus[*k] })
        .collect();
    let weights: Vec<f64> = order.iter().map(|k| state.weights[*k]).collect();
    let p = 3 * mus.len();
    Ok(FiniteMixture {
        family,
        bic: -2.0 * ll + p as f64 * (data.len() as f64).ln(),
        mus,
        weights,
        lambda: state.lambda,
        log_lik: ll,
        iterations,
        converged,
        log_lik_trace: trace,
        pruned,
    })
}

/// Every (J, restart) cell of a BIC search, J = 1..=j_max. Cell (j, r) is
/// seeded from `seed`, j and r only, so results do not depend on scheduling.
pub fn bic_cells(
    data: &[UnitVector],
    family: KernelFamily,
    j_max: usize,
    restarts: usize,
    seed: u64,
    config: &EmConfig,
) -> Result<Vec<(usize, usize, Result<FiniteMixture>)>> {
    if j_max == 0 || restarts == 0 {
        return Err(Error::invalid("j_max and restarts must be at least 1"));
    }
    let cells: Vec<(usize, usize)> = (1..=j_max).flat_map(|j| (0..restarts).map(move |r| (j, r))).collect();
    Ok(cells
        .par_iter()
        .map(|&(j, r)| {
            let init = EmInit::Seeded(derive_seed(seed, ((j as u64) << 32) | r as u64));
            (j, r, em_fit(data, family, j, &init, config))
        })
        .collect())
}

/// Fits J = 1..=j_max with `restarts` seeded initializations each and keeps
/// the fit with the smallest BIC. Failed cells are skipped.
pub fn select_bic(
    data: &[UnitVector],
    family: KernelFamily,
    j_max: usize,
    restarts: usize,
    seed: u64,
    config: &EmConfig,
) -> Result<FiniteMixture> {
    best_bic(bic_cells(data, family, j_max, restarts, seed, config)?)
}

/// The smallest-BIC fit among `cells`, logging failed ones.
pub fn best_bic(cells: Vec<(usize, usize, Result<FiniteMixture>)>) -> Result<FiniteMixture> {
    let mut best: Option<FiniteMixture> = None;
    let mut last_err = None;
    for (j, r, fit) in cells {
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.bic < b.bic) {
                    best = Some(f);
                }
            }
            Err(e) => {
                log::warn!("EM cell J={j} restart={r} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("no EM fit succeeded".into())))
}
