//! Data-generating processes for the simulation studies, the comparison
//! metrics and the replication engine.

mod experiment;
mod metrics;

pub use experiment::{
    preset, preset_names, run_experiment, run_replication, ExperimentConfig, ExperimentRow, ReplicationResult, Summary,
};
pub use metrics::{empirical_kl_diagnostic, kl_mixture, mixing_l1_distance, Partition};

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelFamily};
use crate::sphere::{rotation_to, SphereGrid, SphericalCoord, UnitVector};

/// Minimum acceptance rate tolerated by the truncated-normal rejection sampler.
const MIN_ACCEPTANCE: f64 = 1e-3;

/// Bivariate normal on (θ, φ) truncated to [0, θ_max] × [0, 2π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub theta_max: f64,
}

impl TruncatedNormal2 {
    fn cholesky(&self) -> Result<[f64; 3]> {
        let [[a, b], [c, d]] = self.cov;
        if (b - c).abs() > 1e-12 * (b.abs() + c.abs()).max(1e-300) {
            return Err(Error::invalid("covariance must be symmetric"));
        }
        if !(a > 0.0) || !(a * d - b * c > 0.0) {
            return Err(Error::invalid("covariance must be positive definite"));
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        Ok([l11, l21, (d - l21 * l21).sqrt()])
    }

    /// Untruncated normal density at (θ, φ); zero outside the rectangle.
    pub fn pdf(&self, theta: f64, phi: f64) -> f64 {
        if !(0.0..=self.theta_max).contains(&theta) || !(0.0..TAU).contains(&phi) {
            return 0.0;
        }
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let (u, v) = (theta - self.mean[0], phi - self.mean[1]);
        let q = (d * u * u - 2.0 * b * u * v + a * v * v) / det;
        (-0.5 * q).exp() / (TAU * det.sqrt())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SphericalCoord> {
        let [l11, l21, l22] = self.cholesky()?;
        let mut tries = 0u64;
        loop {
            tries += 1;
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            let theta = self.mean[0] + l11 * z1;
            let phi = self.mean[1] + l21 * z1 + l22 * z2;
            if (0.0..=self.theta_max).contains(&theta) && (0.0..TAU).contains(&phi) {
                return SphericalCoord::new(theta, phi);
            }
            if tries >= 10_000 && 1.0 / (tries as f64) < MIN_ACCEPTANCE {
                return Err(Error::RejectionRate {
                    rate: 1.0 / tries as f64,
                });
            }
        }
    }
}

/// True mixing distribution on the (θ, φ) rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingSpec {
    /// `weight` on the first location, `1 − weight` on the second.
    TwoPoint { locations: [[f64; 2]; 2], weight: f64 },
    TruncatedNormal(TruncatedNormal2),
    /// θ = θ_max·Beta(a, b), φ = 2π·Beta(c, d), independent.
    BetaProduct { theta: [f64; 2], phi: [f64; 2], theta_max: f64 },
    /// `weight`·first + (1 − weight)·second, each truncated separately.
    Bimodal { components: [TruncatedNormal2; 2], weight: f64 },
    /// θ = θ_max·Beta(a, b), φ uniform.
    BetaUniform { theta: [f64; 2], theta_max: f64 },
    /// θ uniform on [0, θ_max], φ = 2π·Beta(a, b).
    UniformBeta { phi: [f64; 2], theta_max: f64 },
}

fn check_beta(p: [f64; 2]) -> Result<()> {
    if p.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("Beta parameters must be positive, got {p:?}")))
    }
}

fn check_theta_max(t: f64) -> Result<()> {
    if t > 0.0 && t <= PI {
        Ok(())
    } else {
        Err(Error::invalid(format!("theta_max must lie in (0, π], got {t}")))
    }
}

fn beta_pdf(x: f64, p: [f64; 2]) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    let ln_b = statrs::function::beta::ln_beta(p[0], p[1]);
    ((p[0] - 1.0) * x.ln() + (p[1] - 1.0) * (1.0 - x).ln() - ln_b).exp()
}

fn draw_beta<R: Rng + ?Sized>(p: [f64; 2], rng: &mut R) -> Result<f64> {
    Ok(Beta::new(p[0], p[1]).map_err(|e| Error::invalid(e.to_string()))?.sample(rng))
}

impl MixingSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            MixingSpec::TwoPoint { locations, weight } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::invalid(format!("mixing weight must be in [0, 1], got {weight}")));
                }
                for [t, p] in locations {
                    SphericalCoord::new(*t, *p)?;
                }
                Ok(())
            }
            MixingSpec::TruncatedNormal(t) => {
                check_theta_max(t.theta_max)?;
                t.cholesky().map(|_| ())
            }
            MixingSpec::BetaProduct { theta, phi, theta_max } => {
                check_theta_max(*theta_max)?;
                check_beta(*theta)?;
                check_beta(*phi)
            }
            MixingSpec::Bimodal { components, weight } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::invalid(format!("mixing weight must be in [0, 1], got {weight}")));
                }
                for c in components {
                    check_theta_max(c.theta_max)?;
                    c.cholesky()?;
                }
                Ok(())
            }
            MixingSpec::BetaUniform { theta, theta_max } => {
                check_theta_max(*theta_max)?;
                check_beta(*theta)
            }
            MixingSpec::UniformBeta { phi, theta_max } => {
                check_theta_max(*theta_max)?;
                check_beta(*phi)
            }
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, MixingSpec::TwoPoint { .. })
    }

    /// Mixing density on the (θ, φ) rectangle, up to a constant; `None` for
    /// discrete specs.
    pub fn density(&self, theta: f64, phi: f64) -> Option<f64> {
        Some(match self {
            MixingSpec::TwoPoint { .. } => return None,
            MixingSpec::TruncatedNormal(t) => t.pdf(theta, phi),
            MixingSpec::BetaProduct { theta: a, phi: b, theta_max } => {
                beta_pdf(theta / theta_max, *a) / theta_max * beta_pdf(phi / TAU, *b) / TAU
            }
            MixingSpec::Bimodal { components, weight } => {
                weight * components[0].pdf(theta, phi) + (1.0 - weight) * components[1].pdf(theta, phi)
            }
            MixingSpec::BetaUniform { theta: a, theta_max } => beta_pdf(theta / theta_max, *a) / theta_max / TAU,
            MixingSpec::UniformBeta { phi: b, theta_max } => {
                if theta <= *theta_max {
                    beta_pdf(phi / TAU, *b) / TAU / theta_max
                } else {
                    0.0
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SphericalCoord> {
        match self {
            MixingSpec::TwoPoint { locations, weight } => {
                let [t, p] = if rng.random::<f64>() < *weight { locations[0] } else { locations[1] };
                SphericalCoord::new(t, p)
            }
            MixingSpec::TruncatedNormal(t) => t.sample(rng),
            MixingSpec::BetaProduct { theta, phi, theta_max } => {
                let t = theta_max * draw_beta(*theta, rng)?;
                let p = TAU * draw_beta(*phi, rng)?;
                SphericalCoord::wrapped(t, p)
            }
            MixingSpec::Bimodal { components, weight } => {
                let c = if rng.random::<f64>() < *weight { &components[0] } else { &components[1] };
                c.sample(rng)
            }
            MixingSpec::BetaUniform { theta, theta_max } => {
                let t = theta_max * draw_beta(*theta, rng)?;
                SphericalCoord::wrapped(t, TAU * rng.random::<f64>())
            }
            MixingSpec::UniformBeta { phi, theta_max } => {
                let t = theta_max * rng.random::<f64>();
                SphericalCoord::wrapped(t, TAU * draw_beta(*phi, rng)?)
            }
        }
    }

    /// Discretization of the mixing distribution as weighted atoms. Discrete
    /// specs give their locations; continuous ones give the nodes of `grid`
    /// with masses ∝ ψ(θ_j, φ_j)·Δθ·Δφ, each truncated normal normalized on
    /// its own.
    pub fn atoms(&self, grid: &SphereGrid) -> Result<Atoms> {
        self.validate()?;
        let normalize = |mut m: Vec<f64>| -> Result<Vec<f64>> {
            let total: f64 = m.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Numerical("mixing density has no mass on the grid".into()));
            }
            m.iter_mut().for_each(|v| *v /= total);
            Ok(m)
        };
        let on_grid = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            grid.nodes().iter().map(|c| f(c.theta(), c.phi())).collect()
        };
        let masses = match self {
            MixingSpec::TwoPoint { locations, weight } => {
                return Ok(Atoms {
                    coords: locations.iter().map(|[t, p]| SphericalCoord::new(*t, *p)).collect::<Result<_>>()?,
                    masses: vec![*weight, 1.0 - weight],
                })
            }
            MixingSpec::Bimodal { components, weight } => {
                let a = normalize(on_grid(&|t, p| components[0].pdf(t, p)))?;
                let b = normalize(on_grid(&|t, p| components[1].pdf(t, p)))?;
                a.iter().zip(&b).map(|(x, y)| weight * x + (1.0 - weight) * y).collect()
            }
            _ => normalize(on_grid(&|t, p| self.density(t, p).unwrap_or(0.0)))?,
        };
        Ok(Atoms {
            coords: grid.nodes().to_vec(),
            masses,
        })
    }
}

/// A mixing distribution as weighted locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms {
    pub coords: Vec<SphericalCoord>,
    pub masses: Vec<f64>,
}

impl Atoms {
    /// f(y) = Σ_j m_j k(y | x_j) at each point of `at`.
    pub fn mixture_density_on(&self, kernel: &Kernel, at: &[UnitVector]) -> Vec<f64> {
        use rayon::prelude::*;
        let pts: Vec<(UnitVector, f64)> = self
            .coords
            .iter()
            .zip(&self.masses)
            .filter(|(_, m)| **m > 0.0)
            .map(|(c, m)| (c.to_unit_vector(), *m))
            .collect();
        at.par_iter()
            .map(|y| pts.iter().map(|(x, m)| m * kernel.density(y, x)).sum())
            .collect()
    }
}

/// One vMF draw by the exact inverse CDF of W = μᵀY on S², with a uniform
/// tangent direction.
fn draw_vmf_frame<R: Rng + ?Sized>(frame: &nalgebra::Matrix3<f64>, kappa: f64, rng: &mut R) -> UnitVector {
    let u: f64 = 1.0 - rng.random::<f64>();
    let w = if kappa < 1e-8 {
        2.0 * u - 1.0
    } else {
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    };
    let s = (1.0 - w * w).max(0.0).sqrt();
    let a = TAU * rng.random::<f64>();
    let local = nalgebra::Vector3::new(s * a.cos(), s * a.sin(), w);
    let v = frame * local;
    UnitVector::normalize(v[0], v[1], v[2]).expect("rotation preserves norm")
}

/// One Schladitz draw: a N(0, Σ) vector with Σ = Q diag(1, 1, β⁻²) Qᵀ, normalized.
fn draw_schladitz_frame<R: Rng + ?Sized>(frame: &nalgebra::Matrix3<f64>, beta: f64, rng: &mut R) -> UnitVector {
    loop {
        let g: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let v = frame * nalgebra::Vector3::new(g[0], g[1], g[2] / beta);
        if let Ok(u) = UnitVector::normalize(v[0], v[1], v[2]) {
            return u;
        }
    }
}

pub fn sample_vmf<R: Rng + ?Sized>(mu: &UnitVector, kappa: f64, n: usize, rng: &mut R) -> Result<Vec<UnitVector>> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("kappa must be finite and nonnegative, got {kappa}")));
    }
    let frame = rotation_to(mu);
    Ok((0..n).map(|_| draw_vmf_frame(&frame, kappa, rng)).collect())
}

pub fn sample_schladitz<R: Rng + ?Sized>(mu: &UnitVector, beta: f64, n: usize, rng: &mut R) -> Result<Vec<UnitVector>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be finite and positive, got {beta}")));
    }
    let frame = rotation_to(mu);
    Ok((0..n).map(|_| draw_schladitz_frame(&frame, beta, rng)).collect())
}

/// One draw from the kernel k_λ(· | mu).
pub fn sample_kernel<R: Rng + ?Sized>(family: KernelFamily, lambda: f64, mu: &UnitVector, rng: &mut R) -> UnitVector {
    let frame = rotation_to(mu);
    match family {
        KernelFamily::VonMisesFisher => draw_vmf_frame(&frame, lambda, rng),
        KernelFamily::Schladitz => draw_schladitz_frame(&frame, lambda, rng),
    }
}

pub fn sample_mixing<R: Rng + ?Sized>(spec: &MixingSpec, n: usize, rng: &mut R) -> Result<Vec<SphericalCoord>> {
    spec.validate()?;
    (0..n).map(|_| spec.sample(rng)).collect()
}

/// n observations from the mixture: a location from `spec`, then a kernel draw.
/// Returns (locations, observations).
pub fn sample_mixture<R: Rng + ?Sized>(
    spec: &MixingSpec,
    family: KernelFamily,
    lambda: f64,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<SphericalCoord>, Vec<UnitVector>)> {
    family.validate_lambda(lambda)?;
    spec.validate()?;
    let mut locs = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let x = spec.sample(rng)?;
        data.push(sample_kernel(family, lambda, &x.to_unit_vector(), rng));
        locs.push(x);
    }
    Ok((locs, data))
}
