//! Predictive recursion (PR) for a mixing density on the sphere.
//!
//! Starting from ψ₀, each observation Y_i updates the density by a convex
//! combination of the current guess and its one-observation Bayes update:
//!
//! ```text
//! ψ_i(x) = (1 − w_i) ψ_{i−1}(x) + w_i k(Y_i | x) ψ_{i−1}(x) / f_{i−1}(Y_i),
//! f_{i−1}(y) = ∫ k(y | x) ψ_{i−1}(x) σ(dx),
//! ```
//!
//! with weights w_i = (i + 1)^{−γ}. The integral is the grid quadrature of
//! [`crate::sphere`], and Σ_i log f_{i−1}(Y_i) is accumulated along the way
//! as the PR marginal likelihood of the kernel's structural parameter.
//!
//! The sweep works on node masses m_j = ψ(x_j)·w_j rather than on ψ itself.
//! The running total of the masses is tracked and divided out at every step,
//! so each ψ_i is exactly normalized under the quadrature rule.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{fill_kernel_row, Kernel, KernelFamily, KernelSpec};
use crate::sphere::{MixingDensityGrid, SphereGrid, UnitVector};

pub const DEFAULT_GAMMA: f64 = 2.0 / 3.0;
pub const DEFAULT_PERMUTATIONS: usize = 25;

/// Kernel tables larger than this many entries are evaluated row by row
/// instead of being cached (64M entries = 512 MiB).
const MAX_CACHED_ENTRIES: usize = 1 << 26;

/// w_i = (i + 1)^{−γ} for γ ∈ (1/2, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    gamma: f64,
}

impl WeightSchedule {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.5 && gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (1/2, 1], got {gamma}")));
        }
        Ok(WeightSchedule { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Weight for the i-th observation, i ≥ 1.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        ((i + 1) as f64).powf(-self.gamma)
    }
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule { gamma: DEFAULT_GAMMA }
    }
}

pub fn weight(i: usize, gamma: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::invalid("weights are indexed from i = 1"));
    }
    Ok(WeightSchedule::new(gamma)?.weight(i))
}

/// Output of a PR sweep or of a permutation average of sweeps.
#[derive(Debug, Clone)]
pub struct PrEstimate {
    pub psi: MixingDensityGrid,
    pub kernel: KernelSpec,
    /// Σ_i log f_{i−1}(Y_i), averaged over permutations.
    pub log_marginal: f64,
    /// log f_{i−1}(Y_i) by processing position i, averaged over permutations.
    pub predictive_log_densities: Vec<f64>,
    pub n: usize,
    pub permutations: usize,
}

impl PrEstimate {
    pub fn mixture_density(&self, y: &UnitVector) -> f64 {
        mixture_density(&self.psi, &self.kernel, y)
    }
}

/// Grid covering the mixing support of `family`.
pub fn support_grid(family: KernelFamily, n_theta: usize, n_phi: usize) -> Result<Arc<SphereGrid>> {
    Ok(Arc::new(SphereGrid::new(family.support_theta_max(), n_theta, n_phi)?))
}

/// Uniform ψ₀ on the support of `family`: 1/(4π) on the sphere, 1/(2π) on the hemisphere.
pub fn uniform_prior(family: KernelFamily, n_theta: usize, n_phi: usize) -> Result<MixingDensityGrid> {
    Ok(MixingDensityGrid::uniform(support_grid(family, n_theta, n_phi)?))
}

fn check_support(spec: &KernelSpec, psi0: &MixingDensityGrid) -> Result<()> {
    let want = spec.family.support_theta_max();
    if (psi0.grid().theta_max() - want).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "{} mixing densities live on θ ∈ [0, {want}], but ψ₀ covers [0, {}]",
            spec.family,
            psi0.grid().theta_max()
        )));
    }
    Ok(())
}

/// k(Y_i | x_j) for all observations and nodes, either tabulated or computed on demand.
pub(crate) enum KernelRows<'a> {
    Cached { table: Vec<f64>, width: usize },
    OnDemand { kernel: Kernel, data: &'a [UnitVector], points: &'a [UnitVector] },
}

impl<'a> KernelRows<'a> {
    /// Tabulates when the rows will be read by more than one sweep and the
    /// table fits under the cache limit.
    pub(crate) fn new(kernel: Kernel, data: &'a [UnitVector], grid: &'a SphereGrid, sweeps: usize) -> Self {
        let width = grid.len();
        if sweeps < 2 || data.len().saturating_mul(width) > MAX_CACHED_ENTRIES {
            return KernelRows::OnDemand {
                kernel,
                data,
                points: grid.points(),
            };
        }
        let mut table = vec![0.0; data.len() * width];
        table
            .par_chunks_mut(width.max(1))
            .zip(data.par_iter())
            .for_each(|(row, y)| fill_kernel_row(&kernel, y, grid.points(), row));
        KernelRows::Cached { table, width }
    }

    #[inline]
    fn row<'b>(&'b self, i: usize, scratch: &'b mut [f64]) -> &'b [f64] {
        match self {
            KernelRows::Cached { table, width } => &table[i * width..(i + 1) * width],
            KernelRows::OnDemand { kernel, data, points } => {
                fill_kernel_row(kernel, &data[i], points, scratch);
                scratch
            }
        }
    }
}

const LANES: usize = 8;

/// Σ a_j b_j with a fixed lane-wise summation order, so it vectorizes.
#[inline]
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (ca, ra) = (a.chunks_exact(LANES), a.chunks_exact(LANES).remainder());
    let rb = b.chunks_exact(LANES).remainder();
    for (x, y) in ca.zip(b.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

/// m_j ← m_j (keep + gain k_j); returns Σ m_j.
#[inline]
fn scale_and_sum(m: &mut [f64], k: &[f64], keep: f64, gain: f64) -> f64 {
    let mut acc = [0.0; LANES];
    let split = m.len() - m.len() % LANES;
    let (mh, mt) = m.split_at_mut(split);
    for (x, y) in mh.chunks_exact_mut(LANES).zip(k.chunks_exact(LANES)) {
        for l in 0..LANES {
            x[l] *= keep + gain * y[l];
            acc[l] += x[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in mt.iter_mut().zip(&k[split..]) {
        *x *= keep + gain * y;
        tail += *x;
    }
    acc.iter().sum::<f64>() + tail
}

struct SweepOutput {
    masses: Vec<f64>,
    log_f: Vec<f64>,
}

type Observer<'a> = dyn FnMut(usize, &[f64], f64) + 'a;

/// One pass of PR over `order`. `masses0` must sum to one.
fn sweep_masses(
    rows: &KernelRows<'_>,
    order: &[usize],
    masses0: &[f64],
    schedule: WeightSchedule,
    mut observe: Option<&mut Observer<'_>>,
) -> Result<SweepOutput> {
    let mut m = masses0.to_vec();
    let mut total = 1.0;
    let mut scratch = vec![0.0; m.len()];
    let mut log_f = Vec::with_capacity(order.len());
    for (step, &idx) in order.iter().enumerate() {
        let k = rows.row(idx, &mut scratch);
        let dot = dot_lanes(k, &m);
        let f = dot / total;
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::PredictiveDensityZero { index: idx });
        }
        log_f.push(f.ln());
        let w = schedule.weight(step + 1);
        let keep = (1.0 - w) / total;
        let gain = w / dot;
        total = scale_and_sum(&mut m, k, keep, gain);
        if let Some(cb) = observe.as_mut() {
            cb(step + 1, &m, total);
        }
    }
    m.iter_mut().for_each(|v| *v /= total);
    Ok(SweepOutput { masses: m, log_f })
}

fn masses_to_density(grid: &Arc<SphereGrid>, masses: &[f64]) -> MixingDensityGrid {
    let values = masses
        .iter()
        .zip(grid.weights())
        .map(|(m, w)| m / w)
        .collect();
    MixingDensityGrid::from_parts_unchecked(grid.clone(), values)
}

/// A single PR pass over `data` in the given order.
pub fn pr_sweep(
    data: &[UnitVector],
    spec: &KernelSpec,
    psi0: &MixingDensityGrid,
    schedule: WeightSchedule,
) -> Result<PrEstimate> {
    pr_sweep_observed(data, spec, psi0, schedule, |_, _| {})
}

/// Like [`pr_sweep`], calling `observe(i, ψ_i)` after every update with the
/// normalized density values at the grid nodes.
pub fn pr_sweep_observed(
    data: &[UnitVector],
    spec: &KernelSpec,
    psi0: &MixingDensityGrid,
    schedule: WeightSchedule,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<PrEstimate> {
    check_support(spec, psi0)?;
    let grid = psi0.grid_arc();
    let rows = KernelRows::OnDemand {
        kernel: spec.kernel(),
        data,
        points: grid.points(),
    };
    let order: Vec<usize> = (0..data.len()).collect();
    let weights = grid.weights().to_vec();
    let mut psi_buf = vec![0.0; grid.len()];
    let mut cb = |i: usize, m: &[f64], total: f64| {
        for ((p, mj), w) in psi_buf.iter_mut().zip(m).zip(&weights) {
            *p = mj / (total * w);
        }
        observe(i, &psi_buf);
    };
    let out = sweep_masses(&rows, &order, &psi0.masses(), schedule, Some(&mut cb))?;
    Ok(PrEstimate {
        psi: masses_to_density(grid, &out.masses),
        kernel: *spec,
        log_marginal: out.log_f.iter().sum(),
        predictive_log_densities: out.log_f,
        n: data.len(),
        permutations: 1,
    })
}

/// Processing orders for permutation averaging: the identity first, then
/// uniformly random shuffles, each drawn from its own ChaCha stream so the
/// p-th permutation does not depend on how many others are requested.
pub fn permutation_orders(n: usize, n_perms: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..n_perms)
        .map(|p| {
            let mut order: Vec<usize> = (0..n).collect();
            if p > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                order.shuffle(&mut rng);
            }
            order
        })
        .collect()
}

/// Pointwise average of PR estimates over `n_perms` orderings of `data`.
pub fn permutation_average(
    data: &[UnitVector],
    spec: &KernelSpec,
    psi0: &MixingDensityGrid,
    schedule: WeightSchedule,
    n_perms: usize,
    seed: u64,
) -> Result<PrEstimate> {
    if n_perms == 0 {
        return Err(Error::invalid("n_perms must be at least 1"));
    }
    check_support(spec, psi0)?;
    let grid = psi0.grid_arc();
    let rows = KernelRows::new(spec.kernel(), data, grid, n_perms);
    let masses0 = psi0.masses();
    let orders = permutation_orders(data.len(), n_perms, seed);
    let runs: Vec<SweepOutput> = orders
        .par_iter()
        .map(|order| sweep_masses(&rows, order, &masses0, schedule, None))
        .collect::<Result<_>>()?;

    // Averaged in permutation-index order, independent of scheduling.
    let scale = 1.0 / n_perms as f64;
    let mut masses = vec![0.0; grid.len()];
    let mut log_f = vec![0.0; data.len()];
    let mut log_marginal = 0.0;
    for run in &runs {
        masses.iter_mut().zip(&run.masses).for_each(|(a, b)| *a += b);
        log_f.iter_mut().zip(&run.log_f).for_each(|(a, b)| *a += b);
        log_marginal += run.log_f.iter().sum::<f64>();
    }
    masses.iter_mut().for_each(|v| *v *= scale);
    log_f.iter_mut().for_each(|v| *v *= scale);
    log_marginal *= scale;
    Ok(PrEstimate {
        psi: masses_to_density(grid, &masses),
        kernel: *spec,
        log_marginal,
        predictive_log_densities: log_f,
        n: data.len(),
        permutations: n_perms,
    })
}

/// f(y) = ∫ k(y | x) ψ(x) σ(dx) by grid quadrature.
pub fn mixture_density(psi: &MixingDensityGrid, spec: &KernelSpec, y: &UnitVector) -> f64 {
    let kernel = spec.kernel();
    let grid = psi.grid();
    psi.values()
        .iter()
        .zip(grid.weights())
        .zip(grid.points())
        .map(|((v, w), x)| v * w * kernel.density(y, x))
        .sum()
}

/// [`mixture_density`] at every node of `at`, in node order.
pub fn mixture_density_on(psi: &MixingDensityGrid, spec: &KernelSpec, at: &[UnitVector]) -> Vec<f64> {
    let kernel = spec.kernel();
    let grid = psi.grid();
    let masses = psi.masses();
    let points = grid.points();
    at.par_iter()
        .map(|y| {
            let [y1, y2, y3] = *y.as_array();
            masses
                .iter()
                .zip(points)
                .map(|(m, x)| {
                    let [x1, x2, x3] = *x.as_array();
                    m * kernel.density_at_cos(y1 * x1 + y2 * x2 + y3 * x3)
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::vmf_density;
    use crate::sphere::{quadrature, SphericalCoord};
    use std::f64::consts::PI;

    fn pts(coords: &[(f64, f64)]) -> Vec<UnitVector> {
        coords
            .iter()
            .map(|&(t, p)| SphericalCoord::new(t, p).unwrap().to_unit_vector())
            .collect()
    }

    #[test]
    fn weights_follow_schedule() {
        assert!((weight(1, 2.0 / 3.0).unwrap() - 0.62996).abs() < 1e-5);
        assert!((weight(1, 2.0 / 3.0).unwrap() - 2f64.powf(-2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(weight(1, 1.0).unwrap(), 0.5);
        for g in [0.51, 2.0 / 3.0, 0.8, 1.0] {
            let s = WeightSchedule::new(g).unwrap();
            assert!(s.weight(1) > s.weight(2) && s.weight(2) > s.weight(3));
            assert!(s.weight(1) < 1.0 && s.weight(1000) > 0.0);
        }
    }

    #[test]
    fn weight_rejects_bad_gamma() {
        assert!(weight(1, 0.5).is_err());
        assert!(weight(1, 1.01).is_err());
        assert!(weight(0, 0.7).is_err());
    }

    #[test]
    fn empty_sweep_returns_prior() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let spec = KernelSpec::vmf(10.0).unwrap();
        let est = pr_sweep(&[], &spec, &psi0, WeightSchedule::default()).unwrap();
        assert_eq!(est.psi.values(), psi0.values());
        assert_eq!(est.log_marginal, 0.0);
        assert_eq!(est.n, 0);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 60, 120).unwrap();
        let spec = KernelSpec::vmf(10.0).unwrap();
        let y = pts(&[(1.0, 2.0)]);
        let schedule = WeightSchedule::default();
        let est = pr_sweep(&y, &spec, &psi0, schedule).unwrap();
        let grid = psi0.grid();
        let w1 = schedule.weight(1);
        let u = psi0.values()[0];
        // Independent one-step oracle from the scalar density.
        let k: Vec<f64> = grid.points().iter().map(|x| vmf_density(&y[0], x, 10.0).unwrap()).collect();
        let f0 = quadrature(grid, &k).unwrap() * u;
        assert!((f0 - 1.0 / (4.0 * PI)).abs() < 2e-3);
        let raw: Vec<f64> = k.iter().map(|kj| (1.0 - w1) * u + w1 * kj * u / f0).collect();
        let norm = quadrature(grid, &raw).unwrap();
        let mut worst: f64 = 0.0;
        for (a, b) in est.psi.values().iter().zip(&raw) {
            worst = worst.max((a - b / norm).abs() / (b / norm));
        }
        assert!(worst < 1e-12, "max relative error {worst}");
        assert!((est.log_marginal - f0.ln()).abs() < 1e-12);
    }

    #[test]
    fn every_iterate_is_normalized_and_positive() {
        let psi0 = uniform_prior(KernelFamily::Schladitz, 15, 40).unwrap();
        let spec = KernelSpec::schladitz(0.1).unwrap();
        let data: Vec<UnitVector> = (0..50)
            .map(|i| {
                let t = 0.3 + 0.02 * i as f64;
                SphericalCoord::new(t, (i as f64 * 0.7) % 6.0).unwrap().to_unit_vector()
            })
            .collect();
        let grid = psi0.grid().clone();
        let mut seen = 0;
        pr_sweep_observed(&data, &spec, &psi0, WeightSchedule::default(), |_, psi| {
            seen += 1;
            assert!(psi.iter().all(|v| *v > 0.0));
            assert!((quadrature(&grid, psi).unwrap() - 1.0).abs() < 1e-10);
        })
        .unwrap();
        assert_eq!(seen, 50);
    }

    #[test]
    fn order_changes_the_estimate() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 12, 24).unwrap();
        let spec = KernelSpec::vmf(5.0).unwrap();
        let data = pts(&[(0.3, 0.1), (1.5, 2.0), (2.8, 4.0)]);
        let rev: Vec<UnitVector> = data.iter().rev().copied().collect();
        let a = pr_sweep(&data, &spec, &psi0, WeightSchedule::default()).unwrap();
        let b = pr_sweep(&rev, &spec, &psi0, WeightSchedule::default()).unwrap();
        assert_ne!(a.psi.values(), b.psi.values());
    }

    #[test]
    fn single_permutation_equals_sweep() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let spec = KernelSpec::vmf(4.0).unwrap();
        let data = pts(&[(0.3, 0.1), (1.5, 2.0), (2.8, 4.0), (1.0, 1.0)]);
        let s = pr_sweep(&data, &spec, &psi0, WeightSchedule::default()).unwrap();
        let p = permutation_average(&data, &spec, &psi0, WeightSchedule::default(), 1, 99).unwrap();
        assert_eq!(s.psi.values(), p.psi.values());
        assert_eq!(s.log_marginal, p.log_marginal);
    }

    #[test]
    fn permutation_average_is_normalized_and_deterministic() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let spec = KernelSpec::vmf(4.0).unwrap();
        let data = pts(&[(0.3, 0.1), (1.5, 2.0), (2.8, 4.0), (1.0, 1.0), (2.0, 5.0)]);
        let a = permutation_average(&data, &spec, &psi0, WeightSchedule::default(), 7, 3).unwrap();
        let b = permutation_average(&data, &spec, &psi0, WeightSchedule::default(), 7, 3).unwrap();
        assert!((a.psi.integral() - 1.0).abs() < 1e-10);
        assert_eq!(a.psi.values(), b.psi.values());
        assert_eq!(a.log_marginal.to_bits(), b.log_marginal.to_bits());
        let c = permutation_average(&data, &spec, &psi0, WeightSchedule::default(), 7, 4).unwrap();
        assert_ne!(a.psi.values(), c.psi.values());
    }

    #[test]
    fn permutation_orders_are_prefix_stable() {
        let a = permutation_orders(20, 3, 5);
        let b = permutation_orders(20, 6, 5);
        assert_eq!(a[..], b[..3]);
        assert_eq!(a[0], (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_zero_permutations_and_wrong_support() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let data = pts(&[(0.3, 0.1)]);
        let spec = KernelSpec::vmf(4.0).unwrap();
        assert!(permutation_average(&data, &spec, &psi0, WeightSchedule::default(), 0, 1).is_err());
        let sch = KernelSpec::schladitz(0.3).unwrap();
        assert!(pr_sweep(&data, &sch, &psi0, WeightSchedule::default()).is_err());
    }

    #[test]
    fn collapsed_density_is_reported() {
        // All mass on one node and a kernel that vanishes there.
        let grid = support_grid(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let mut values = vec![0.0; grid.len()];
        values[0] = 1.0 / grid.weights()[0];
        let psi0 = MixingDensityGrid::new(grid.clone(), values).unwrap();
        let spec = KernelSpec::vmf(5000.0).unwrap();
        let far = -grid.points()[0];
        let err = pr_sweep(&[far], &spec, &psi0, WeightSchedule::default()).unwrap_err();
        assert!(matches!(err, Error::PredictiveDensityZero { index: 0 }));
    }

    #[test]
    fn mixture_density_of_uniform_is_uniform() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 60, 120).unwrap();
        let spec = KernelSpec::vmf(10.0).unwrap();
        for y in pts(&[(0.4, 0.2), (1.57, 3.0), (2.5, 6.0)]) {
            assert!((mixture_density(&psi0, &spec, &y) - 1.0 / (4.0 * PI)).abs() < 2e-3);
        }
    }

    #[test]
    fn near_point_mass_reproduces_kernel() {
        let spec = KernelSpec::vmf(10.0).unwrap();
        let y = pts(&[(1.2, 1.0)])[0];
        let mut last_err = f64::INFINITY;
        for (nt, np) in [(30, 60), (60, 120), (120, 240)] {
            let grid = support_grid(KernelFamily::VonMisesFisher, nt, np).unwrap();
            let star = grid.index(nt / 3, np / 5);
            let mut values = vec![0.0; grid.len()];
            values[star] = 1.0 / grid.weights()[star];
            let psi = MixingDensityGrid::new(grid.clone(), values).unwrap();
            let err = (mixture_density(&psi, &spec, &y) - spec.density(&y, &grid.points()[star])).abs();
            assert!(err < 1e-12);
            last_err = err;
        }
        assert!(last_err < 1e-12);
    }
}
