//! Goodness-of-fit Bayes factor: a single kernel (H0) against a PR mixture
//! of kernels (H1).
//!
//! Under H0 the location has a uniform prior on S², so
//! L⁰(λ) = (4π)⁻¹ ∫ Π_i k_λ(y_i | x) σ(dx). Under H1 the PR marginal
//! likelihood with uniform ψ₀ stands in for the Dirichlet-process marginal.
//! Both are integrated against the same prior g(λ) by a Laplace
//! approximation at their respective maximizers:
//!
//! ```text
//! log m ≈ log g(λ̂) + log L(λ̂) + ½ log 2π − ½ log(−log L)''(λ̂)
//! ```

use std::f64::consts::{LN_10, PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::marginal::{fit_structural, golden_section_max, OptimizerConfig};
use crate::pr::{permutation_average, uniform_prior};
use crate::sphere::{SphereGrid, UnitVector};

pub trait LogPrior {
    fn log_density(&self, x: f64) -> f64;
}

/// Gamma(shape, scale) prior on λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma prior needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(GammaPrior { shape, scale })
    }
}

impl Default for GammaPrior {
    fn default() -> Self {
        GammaPrior { shape: 2.0, scale: 0.5 }
    }
}

impl LogPrior for GammaPrior {
    fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * x.ln() - x / self.scale - ln_gamma(self.shape) - self.shape * self.scale.ln()
    }
}

/// Improper g ≡ 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlatPrior;

impl LogPrior for FlatPrior {
    fn log_density(&self, _x: f64) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    FavorsH0,
    FavorsH1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactorReport {
    pub family: KernelFamily,
    pub n: usize,
    /// log₁₀ B = log₁₀ m₀ − log₁₀ m₁.
    pub log10_bf: f64,
    pub lambda_hat_h0: f64,
    pub lambda_hat_h1: f64,
    pub log_lik_h0: f64,
    pub log_lik_h1: f64,
    pub log_m0: f64,
    pub log_m1: f64,
    /// (−log L⁰)'' at λ̂⁰ and (−log L¹)'' at λ̂¹.
    pub second_derivs: [f64; 2],
    pub boundary_h0: bool,
    pub boundary_h1: bool,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofConfig {
    pub lambda_range: (f64, f64),
    /// Full-sphere grid used for the H0 location integral.
    pub h0_grid: (usize, usize),
    /// Support grid for the H1 PR runs.
    pub h1_grid: (usize, usize),
    pub optimizer: OptimizerConfig,
}

impl GofConfig {
    pub fn for_family(family: KernelFamily) -> Self {
        GofConfig {
            lambda_range: family.default_lambda_range(),
            h0_grid: (60, 120),
            h1_grid: (family.default_n_theta(), 120),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// log L⁰(λ) = log[(4π)⁻¹ ∫ Π_i k_λ(y_i | x) σ(dx)], evaluated by
/// log-sum-exp over the nodes of a full-sphere grid.
pub fn h0_marginal_loglik(data: &[UnitVector], spec: &KernelSpec, grid: &SphereGrid) -> Result<f64> {
    let kernel = spec.kernel();
    let log_terms: Vec<f64> = grid
        .points()
        .par_iter()
        .zip(grid.weights().par_iter())
        .map(|(x, w)| w.ln() + data.iter().map(|y| kernel.log_density(y, x)).sum::<f64>())
        .collect();
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::H0Underflow);
    }
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    Ok(max + sum.ln() - (4.0 * PI).ln())
}

/// Richardson-extrapolated central second difference,
/// (4 D(h₀/2) − D(h₀)) / 3 with D(h) = (f(x+h) − 2f(x) + f(x−h)) / h².
pub fn richardson_second_derivative(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h0: f64) -> Result<f64> {
    if !(h0 > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {h0}")));
    }
    let mut eval = |t: f64| -> Result<f64> {
        let v = f(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { at: t })
        }
    };
    let f0 = eval(x)?;
    let d = |fp: f64, fm: f64, h: f64| (fp - 2.0 * f0 + fm) / (h * h);
    let d_full = d(eval(x + h0)?, eval(x - h0)?, h0);
    let h = 0.5 * h0;
    let d_half = d(eval(x + h)?, eval(x - h)?, h);
    Ok((4.0 * d_half - d_full) / 3.0)
}

/// Scalar Laplace approximation of log ∫ L(λ) g(λ) dλ around λ̂, where
/// `curvature` = (−log L)''(λ̂).
pub fn laplace_log_marginal(
    log_lik: impl Fn(f64) -> f64,
    prior: &impl LogPrior,
    lambda_hat: f64,
    curvature: f64,
) -> Result<f64> {
    if !(curvature > 0.0) {
        return Err(Error::NoInteriorMaximum { curvature });
    }
    Ok(prior.log_density(lambda_hat) + log_lik(lambda_hat) + 0.5 * TAU.ln() - 0.5 * curvature.ln())
}

/// Richardson step for the curvature at λ̂.
pub fn curvature_step(lambda_hat: f64) -> f64 {
    (1e-2 * lambda_hat.abs()).max(1e-3)
}

/// Bayes factor of a single `family` kernel against a PR mixture of it.
pub fn bayes_factor(
    data: &[UnitVector],
    family: KernelFamily,
    prior: &GammaPrior,
    config: &GofConfig,
) -> Result<BayesFactorReport> {
    if data.is_empty() {
        return Err(Error::invalid("goodness-of-fit test needs at least one observation"));
    }
    let (lo, hi) = config.lambda_range;
    let base = KernelSpec::with_range(family, lo, config.lambda_range)?;
    let opt = config.optimizer;

    // H0: single kernel, uniform prior on the location.
    let h0_grid = SphereGrid::full(config.h0_grid.0, config.h0_grid.1)?;
    let log_l0 = |lambda: f64| h0_marginal_loglik(data, &base.at(lambda)?, &h0_grid);
    let trace = golden_section_max(|t| log_l0(t.exp()), lo.ln(), hi.ln(), opt.tol.ln_1p(), opt.budget)?;
    let lambda0 = trace.xs[trace.best].exp();
    let ll0 = trace.values[trace.best];
    let c0 = -richardson_second_derivative(&log_l0, lambda0, curvature_step(lambda0))?;

    // H1: PR mixture with uniform ψ₀.
    let psi0 = uniform_prior(family, config.h1_grid.0, config.h1_grid.1)?;
    let (curve, _) = fit_structural(data, family, config.lambda_range, &psi0, &opt)?;
    let lambda1 = curve.argmax;
    let ll1 = curve.argmax_log_lik;
    let log_l1 = |lambda: f64| -> Result<f64> {
        Ok(permutation_average(data, &base.at(lambda)?, &psi0, opt.schedule, opt.n_perms, opt.seed)?.log_marginal)
    };
    let c1 = -richardson_second_derivative(log_l1, lambda1, curvature_step(lambda1))?;

    let log_m0 = laplace_log_marginal(|_| ll0, prior, lambda0, c0)?;
    let log_m1 = laplace_log_marginal(|_| ll1, prior, lambda1, c1)?;
    let log10_bf = (log_m0 - log_m1) / LN_10;
    Ok(BayesFactorReport {
        family,
        n: data.len(),
        log10_bf,
        lambda_hat_h0: lambda0,
        lambda_hat_h1: lambda1,
        log_lik_h0: ll0,
        log_lik_h1: ll1,
        log_m0,
        log_m1,
        second_derivs: [c0, c1],
        boundary_h0: trace.boundary,
        boundary_h1: curve.boundary_solution,
        verdict: if log10_bf >= 0.0 { Verdict::FavorsH0 } else { Verdict::FavorsH1 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::SphericalCoord;

    #[test]
    fn richardson_exact_on_quadratic() {
        for x in [-3.0, 0.0, 2.5] {
            let d = richardson_second_derivative(|t| Ok(t * t), x, 0.1).unwrap();
            assert!((d - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn richardson_sin_and_exp() {
        let d = richardson_second_derivative(|t: f64| Ok(t.sin()), 0.0, 0.1).unwrap();
        assert!(d.abs() < 1e-8);
        let d = richardson_second_derivative(|t: f64| Ok(t.exp()), 1.0, 1e-2).unwrap();
        assert!((d - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn richardson_rejects_non_finite() {
        let r = richardson_second_derivative(|t: f64| Ok(t.ln()), 0.0, 0.1);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert!(richardson_second_derivative(Ok, 0.0, 0.0).is_err());
    }

    #[test]
    fn laplace_is_exact_for_gaussian_shape() {
        let log_l = |l: f64| -(l - 1.0) * (l - 1.0) / 2.0;
        let m = laplace_log_marginal(log_l, &FlatPrior, 1.0, 1.0).unwrap();
        assert!((m - 0.5 * TAU.ln()).abs() < 1e-12);
        // Against the analytic integral of exp(a − (λ−c)²/(2s²)) = e^a √(2π) s.
        let (a, c, s) = (-3.7, 2.0, 0.3);
        let log_l = move |l: f64| a - (l - c) * (l - c) / (2.0 * s * s);
        let m = laplace_log_marginal(log_l, &FlatPrior, c, 1.0 / (s * s)).unwrap();
        let exact = a + (TAU.sqrt() * s).ln();
        assert!(((m - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn laplace_rejects_nonpositive_curvature() {
        let r = laplace_log_marginal(|_| 0.0, &FlatPrior, 1.0, -2.0);
        assert!(matches!(r, Err(Error::NoInteriorMaximum { .. })));
    }

    #[test]
    fn identical_hypotheses_give_unit_bayes_factor() {
        let prior = GammaPrior::default();
        let m0 = laplace_log_marginal(|_| -10.0, &prior, 3.0, 4.0).unwrap();
        let m1 = laplace_log_marginal(|_| -10.0, &prior, 3.0, 4.0).unwrap();
        assert_eq!(m0 - m1, 0.0);
    }

    #[test]
    fn gamma_prior_density() {
        let g = GammaPrior::default();
        // shape 2, scale 1/2: g(x) = 4 x e^{−2x}
        for x in [0.1f64, 1.0, 7.5] {
            let expected = (4.0 * x * (-2.0 * x).exp()).ln();
            assert!((g.log_density(x) - expected).abs() < 1e-12);
        }
        assert_eq!(g.log_density(0.0), f64::NEG_INFINITY);
        assert!(GammaPrior::new(0.0, 1.0).is_err());
    }

    #[test]
    fn h0_single_observation_is_uniform() {
        let grid = SphereGrid::full(60, 120).unwrap();
        let y = [SphericalCoord::new(0.7, 4.0).unwrap().to_unit_vector()];
        for spec in [KernelSpec::vmf(10.0).unwrap(), KernelSpec::schladitz(0.3).unwrap()] {
            let l = h0_marginal_loglik(&y, &spec, &grid).unwrap();
            assert!((l - (1.0 / (4.0 * PI)).ln()).abs() < 2e-3, "{l}");
        }
    }

    #[test]
    fn h0_two_identical_observations_match_direct_quadrature() {
        let y = SphericalCoord::new(1.1, 2.2).unwrap().to_unit_vector();
        let spec = KernelSpec::vmf(6.0).unwrap();
        let grid = SphereGrid::full(60, 120).unwrap();
        let got = h0_marginal_loglik(&[y, y], &spec, &grid).unwrap();
        // Brute-force oracle on a much finer grid, in linear domain.
        let fine = SphereGrid::full(400, 800).unwrap();
        let integral: f64 = fine
            .points()
            .iter()
            .zip(fine.weights())
            .map(|(x, w)| w * spec.density(&y, x).powi(2))
            .sum();
        let expected = (integral / (4.0 * PI)).ln();
        assert!(((got - expected) / expected).abs() < 1e-3, "{got} vs {expected}");
    }

    #[test]
    fn bayes_factor_rejects_empty_data() {
        let r = bayes_factor(&[], KernelFamily::VonMisesFisher, &GammaPrior::default(), &GofConfig::for_family(KernelFamily::VonMisesFisher));
        assert!(r.is_err());
    }
}
