//! PR marginal likelihood of the kernel's structural parameter λ and its
//! bounded one-dimensional maximization.
//!
//! L_n(λ) = Π_i ∫ k_λ(Y_i | x) Ψ_{i−1,λ}(dx) is a by-product of a PR sweep at
//! fixed λ. All λ evaluations share one permutation seed, so the objective is
//! a deterministic function of λ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::pr::{permutation_average, PrEstimate, WeightSchedule, DEFAULT_PERMUTATIONS};
use crate::sphere::{MixingDensityGrid, UnitVector};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Relative tolerance on λ̂.
    pub tol: f64,
    /// Maximum number of objective evaluations.
    pub budget: usize,
    pub n_perms: usize,
    pub seed: u64,
    pub schedule: WeightSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            tol: 1e-3,
            budget: 40,
            n_perms: DEFAULT_PERMUTATIONS,
            seed: 0,
            schedule: WeightSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihoodCurve {
    /// Evaluated λ values, in evaluation order.
    pub lambdas: Vec<f64>,
    pub log_liks: Vec<f64>,
    pub argmax: f64,
    pub argmax_log_lik: f64,
    /// λ̂ lies within tolerance of an end of the search range.
    pub boundary_solution: bool,
    pub lambda_range: (f64, f64),
}

impl MarginalLikelihoodCurve {
    /// (λ, log L) pairs sorted by λ.
    pub fn sorted(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.lambdas.iter().copied().zip(self.log_liks.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

/// Result of [`golden_section_max`].
#[derive(Debug, Clone)]
pub struct GoldenTrace {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub best: usize,
    pub boundary: bool,
}

/// Maximizes `f` on `[lo, hi]` by golden-section search until the bracket is
/// narrower than `tol` or `budget` evaluations are spent. Both ends are
/// evaluated last; the returned optimum is the best point ever evaluated.
pub fn golden_section_max(
    mut f: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    tol: f64,
    budget: usize,
) -> Result<GoldenTrace> {
    if !(lo < hi) || !(tol > 0.0) {
        return Err(Error::invalid(format!("bad search interval [{lo}, {hi}] / tol {tol}")));
    }
    if budget < 4 {
        return Err(Error::invalid("optimizer budget must allow at least 4 evaluations"));
    }
    let mut xs = Vec::new();
    let mut values = Vec::new();
    let mut eval = |x: f64, xs: &mut Vec<f64>, values: &mut Vec<f64>| -> Result<f64> {
        let v = f(x)?;
        if v.is_nan() {
            return Err(Error::NonFinite { at: x });
        }
        xs.push(x);
        values.push(v);
        Ok(v)
    };

    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut xs, &mut values)?;
    let mut fd = eval(d, &mut xs, &mut values)?;
    while (b - a) > tol && xs.len() + 2 < budget {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut xs, &mut values)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut xs, &mut values)?;
        }
    }
    eval(lo, &mut xs, &mut values)?;
    eval(hi, &mut xs, &mut values)?;

    let best = values
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .expect("at least four evaluations");
    let x = xs[best];
    let boundary = (x - lo) <= tol || (hi - x) <= tol;
    Ok(GoldenTrace {
        xs,
        values,
        best,
        boundary,
    })
}

/// log L_n(λ) at `spec.lambda`: the log-marginal of [`permutation_average`].
pub fn pr_marginal_loglik(
    data: &[UnitVector],
    spec: &KernelSpec,
    psi0: &MixingDensityGrid,
    schedule: WeightSchedule,
    n_perms: usize,
    seed: u64,
) -> Result<f64> {
    Ok(permutation_average(data, spec, psi0, schedule, n_perms, seed)?.log_marginal)
}

fn check_range(family: KernelFamily, range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    family.validate_lambda(lo)?;
    family.validate_lambda(hi)?;
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::invalid(format!("lambda range [{lo}, {hi}] must satisfy 0 < min < max")));
    }
    Ok(())
}

/// λ̂ = argmax log L_n(λ) over `lambda_range`.
///
/// The search runs on log λ, so `config.tol` is a relative tolerance.
pub fn maximize_marginal(
    data: &[UnitVector],
    family: KernelFamily,
    lambda_range: (f64, f64),
    psi0: &MixingDensityGrid,
    config: &OptimizerConfig,
) -> Result<MarginalLikelihoodCurve> {
    Ok(fit_structural(data, family, lambda_range, psi0, config)?.0)
}

/// [`maximize_marginal`] that also returns the PR estimate at λ̂.
pub fn fit_structural(
    data: &[UnitVector],
    family: KernelFamily,
    lambda_range: (f64, f64),
    psi0: &MixingDensityGrid,
    config: &OptimizerConfig,
) -> Result<(MarginalLikelihoodCurve, PrEstimate)> {
    check_range(family, lambda_range)?;
    let base = KernelSpec::with_range(family, lambda_range.0, lambda_range)?;
    let mut best: Option<PrEstimate> = None;
    let trace = golden_section_max(
        |log_lambda| {
            let spec = base.at(log_lambda.exp())?;
            let est = permutation_average(data, &spec, psi0, config.schedule, config.n_perms, config.seed)?;
            let ll = est.log_marginal;
            if best.as_ref().is_none_or(|b| ll > b.log_marginal) {
                best = Some(est);
            }
            Ok(ll)
        },
        lambda_range.0.ln(),
        lambda_range.1.ln(),
        config.tol.ln_1p(),
        config.budget,
    )?;
    let est = best.expect("golden section evaluates the objective");
    let lambdas: Vec<f64> = trace.xs.iter().map(|x| x.exp()).collect();
    let curve = MarginalLikelihoodCurve {
        argmax: lambdas[trace.best],
        argmax_log_lik: trace.values[trace.best],
        lambdas,
        log_liks: trace.values,
        boundary_solution: trace.boundary,
        lambda_range,
    };
    if curve.boundary_solution {
        log::warn!(
            "{family}: marginal likelihood maximized at the range boundary (λ̂ = {})",
            curve.argmax
        );
    }
    Ok((curve, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pr::uniform_prior;
    use crate::sphere::SphericalCoord;
    use std::f64::consts::PI;

    #[test]
    fn golden_section_finds_quadratic_peak() {
        let t = golden_section_max(|x| Ok(-(x - 1.3) * (x - 1.3)), -2.0, 5.0, 1e-6, 100).unwrap();
        assert!((t.xs[t.best] - 1.3).abs() < 1e-5);
        assert!(!t.boundary);
        assert!(t.values.iter().all(|v| *v <= t.values[t.best]));
    }

    #[test]
    fn golden_section_flags_boundary() {
        let t = golden_section_max(Ok, 0.0, 1.0, 1e-4, 60).unwrap();
        assert_eq!(t.xs[t.best], 1.0);
        assert!(t.boundary);
    }

    #[test]
    fn golden_section_respects_budget() {
        let mut calls = 0;
        golden_section_max(
            |x| {
                calls += 1;
                Ok(-x * x)
            },
            -1.0,
            1.0,
            1e-12,
            12,
        )
        .unwrap();
        assert!(calls <= 12);
    }

    #[test]
    fn empty_data_has_zero_marginal() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let spec = KernelSpec::vmf(10.0).unwrap();
        assert_eq!(pr_marginal_loglik(&[], &spec, &psi0, WeightSchedule::default(), 3, 1).unwrap(), 0.0);
    }

    #[test]
    fn single_observation_marginal_is_uniform_density() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 60, 120).unwrap();
        let y = [SphericalCoord::new(1.0, 1.0).unwrap().to_unit_vector()];
        for kappa in [0.5, 5.0, 20.0] {
            let spec = KernelSpec::vmf(kappa).unwrap();
            let ll = pr_marginal_loglik(&y, &spec, &psi0, WeightSchedule::default(), 4, 2).unwrap();
            assert!((ll - (1.0 / (4.0 * PI)).ln()).abs() < 2e-3, "κ={kappa}: {ll}");
        }
    }

    #[test]
    fn objective_is_deterministic_and_matches_permutation_average() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 20, 40).unwrap();
        let data: Vec<UnitVector> = (0..30)
            .map(|i| SphericalCoord::new(0.5 + 0.03 * i as f64, 0.2 * i as f64).unwrap().to_unit_vector())
            .collect();
        let spec = KernelSpec::vmf(8.0).unwrap();
        let s = WeightSchedule::default();
        let a = pr_marginal_loglik(&data, &spec, &psi0, s, 5, 11).unwrap();
        let b = pr_marginal_loglik(&data, &spec, &psi0, s, 5, 11).unwrap();
        let c = permutation_average(&data, &spec, &psi0, s, 5, 11).unwrap().log_marginal;
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn rejects_invalid_range() {
        let psi0 = uniform_prior(KernelFamily::VonMisesFisher, 10, 20).unwrap();
        let cfg = OptimizerConfig::default();
        assert!(maximize_marginal(&[], KernelFamily::VonMisesFisher, (5.0, 1.0), &psi0, &cfg).is_err());
        assert!(maximize_marginal(&[], KernelFamily::VonMisesFisher, (0.0, 1.0), &psi0, &cfg).is_err());
    }
}
