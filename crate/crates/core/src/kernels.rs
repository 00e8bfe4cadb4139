//! Spherical kernels k_λ(y | x): the von Mises–Fisher density (vectorial)
//! and the Schladitz density, an axial angular central Gaussian.
//!
//! Both kernels depend on y and x only through t = xᵀy, which is what the
//! evaluator in [`Kernel`] exploits:
//!
//! ```text
//! vMF:       k_κ(y | μ) = κ / (4π sinh κ) · exp(κ t)
//! Schladitz: k_β(y | μ) = β / (4π) · (1 − (1 − β²) t²)^{-3/2}
//! ```
//!
//! The Schladitz form is (4π|Σ|^{1/2})⁻¹ (yᵀΣ⁻¹y)^{-3/2} with scatter
//! Σ = Q diag(1, 1, β⁻²) Qᵀ, Q = [`rotation_to`]\(μ), so that
//! Σ⁻¹ = I − (1 − β²) μμᵀ and |Σ| = β⁻².

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::fastexp;
use crate::error::{Error, Result};
use crate::sphere::{rotation_to, SphereGrid, UnitVector};

const FOUR_PI: f64 = 4.0 * PI;

/// Below this concentration the vMF density is replaced by its uniform limit.
pub const KAPPA_UNIFORM_CUTOFF: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[serde(rename = "vmf")]
    VonMisesFisher,
    Schladitz,
}

impl KernelFamily {
    /// Polar extent of the mixing support: the full sphere for vMF, the
    /// upper hemisphere for the axial Schladitz kernel.
    pub fn support_theta_max(self) -> f64 {
        match self {
            KernelFamily::VonMisesFisher => PI,
            KernelFamily::Schladitz => PI / 2.0,
        }
    }

    pub fn is_axial(self) -> bool {
        matches!(self, KernelFamily::Schladitz)
    }

    pub fn default_lambda_range(self) -> (f64, f64) {
        match self {
            KernelFamily::VonMisesFisher => (0.1, 500.0),
            KernelFamily::Schladitz => (0.01, 0.99),
        }
    }

    /// θ cell count giving the default 3° resolution on the support.
    pub fn default_n_theta(self) -> usize {
        match self {
            KernelFamily::VonMisesFisher => 60,
            KernelFamily::Schladitz => 30,
        }
    }

    pub fn validate_lambda(self, lambda: f64) -> Result<()> {
        let ok = match self {
            KernelFamily::VonMisesFisher => lambda.is_finite() && lambda >= 0.0,
            KernelFamily::Schladitz => lambda.is_finite() && lambda > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{lambda} is not a valid structural parameter for {self}"
            )))
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::VonMisesFisher => "vmf",
            KernelFamily::Schladitz => "schladitz",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vmf" | "von-mises-fisher" | "vonmisesfisher" => Ok(KernelFamily::VonMisesFisher),
            "schladitz" | "acg" => Ok(KernelFamily::Schladitz),
            other => Err(Error::invalid(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// Kernel family, structural parameter λ (κ or β) and the closed interval
/// λ is searched over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lambda: f64,
    pub lambda_range: (f64, f64),
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lambda: f64) -> Result<Self> {
        Self::with_range(family, lambda, family.default_lambda_range())
    }

    pub fn with_range(family: KernelFamily, lambda: f64, range: (f64, f64)) -> Result<Self> {
        family.validate_lambda(lambda)?;
        let (lo, hi) = range;
        if !(lo < hi) {
            return Err(Error::invalid(format!("empty lambda range [{lo}, {hi}]")));
        }
        family.validate_lambda(lo)?;
        family.validate_lambda(hi)?;
        Ok(KernelSpec {
            family,
            lambda,
            lambda_range: range,
        })
    }

    pub fn vmf(kappa: f64) -> Result<Self> {
        Self::new(KernelFamily::VonMisesFisher, kappa)
    }

    pub fn schladitz(beta: f64) -> Result<Self> {
        Self::new(KernelFamily::Schladitz, beta)
    }

    /// Same family and range at a different λ.
    pub fn at(&self, lambda: f64) -> Result<Self> {
        self.family.validate_lambda(lambda)?;
        Ok(KernelSpec { lambda, ..*self })
    }

    pub fn kernel(&self) -> Kernel {
        Kernel::new(self.family, self.lambda)
    }

    pub fn density(&self, y: &UnitVector, x: &UnitVector) -> f64 {
        self.kernel().density(y, x)
    }
}

/// Precomputed constants for fast evaluation of k_λ(y | x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    VonMisesFisher { kappa: f64, log_norm: f64 },
    Schladitz { norm: f64, log_norm: f64, shrink: f64 },
}

impl Kernel {
    /// λ must already be valid for `family`.
    pub fn new(family: KernelFamily, lambda: f64) -> Self {
        match family {
            KernelFamily::VonMisesFisher => Kernel::VonMisesFisher {
                kappa: lambda,
                log_norm: vmf_log_normalizer(lambda),
            },
            KernelFamily::Schladitz => Kernel::Schladitz {
                norm: lambda / FOUR_PI,
                log_norm: (lambda / FOUR_PI).ln(),
                shrink: 1.0 - lambda * lambda,
            },
        }
    }

    /// Density as a function of t = xᵀy.
    #[inline]
    pub fn density_at_cos(&self, t: f64) -> f64 {
        match *self {
            Kernel::VonMisesFisher { kappa, log_norm } => fastexp::exp(log_norm + kappa * t),
            Kernel::Schladitz { norm, shrink, .. } => {
                let q = 1.0 - shrink * t * t;
                norm / (q * q.sqrt())
            }
        }
    }

    #[inline]
    pub fn log_density_at_cos(&self, t: f64) -> f64 {
        match *self {
            Kernel::VonMisesFisher { kappa, log_norm } => log_norm + kappa * t,
            Kernel::Schladitz {
                log_norm, shrink, ..
            } => log_norm - 1.5 * (1.0 - shrink * t * t).ln(),
        }
    }

    #[inline]
    pub fn density(&self, y: &UnitVector, x: &UnitVector) -> f64 {
        self.density_at_cos(y.dot(x))
    }

    #[inline]
    pub fn log_density(&self, y: &UnitVector, x: &UnitVector) -> f64 {
        self.log_density_at_cos(y.dot(x))
    }
}

/// log C(κ) with C(κ) = κ / (4π sinh κ), and C(0) = 1/(4π).
pub fn vmf_log_normalizer(kappa: f64) -> f64 {
    if kappa < KAPPA_UNIFORM_CUTOFF {
        return -FOUR_PI.ln();
    }
    // ln sinh κ = κ + ln(1 − e^{−2κ}) − ln 2, stable for every κ > 0.
    let ln_sinh = kappa + (-(-2.0 * kappa).exp_m1()).ln() - LN_2;
    kappa.ln() - FOUR_PI.ln() - ln_sinh
}

pub fn vmf_density(y: &UnitVector, mu: &UnitVector, kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("vMF concentration must be ≥ 0, got {kappa}")));
    }
    Ok(Kernel::new(KernelFamily::VonMisesFisher, kappa).density(y, mu))
}

pub fn schladitz_density(y: &UnitVector, mu: &UnitVector, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("Schladitz β must be > 0, got {beta}")));
    }
    Ok(Kernel::new(KernelFamily::Schladitz, beta).density(y, mu))
}

/// Σ⁻¹ = Q diag(1, 1, β²) Qᵀ for the Schladitz scatter located at `mu`.
pub fn schladitz_inverse_scatter(mu: &UnitVector, beta: f64) -> Matrix3<f64> {
    let q = rotation_to(mu);
    q * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, beta * beta)) * q.transpose()
}

/// k(y | x) for every grid node x, in node order.
pub fn kernel_row(spec: &KernelSpec, y: &UnitVector, grid: &SphereGrid) -> Vec<f64> {
    let mut row = vec![0.0; grid.len()];
    fill_kernel_row(&spec.kernel(), y, grid.points(), &mut row);
    row
}

#[inline]
pub(crate) fn fill_kernel_row(kernel: &Kernel, y: &UnitVector, points: &[UnitVector], out: &mut [f64]) {
    let [y1, y2, y3] = *y.as_array();
    let dot = |x: &UnitVector| {
        let [x1, x2, x3] = *x.as_array();
        y1 * x1 + y2 * x2 + y3 * x3
    };
    match *kernel {
        Kernel::VonMisesFisher { kappa, log_norm } => {
            for (o, x) in out.iter_mut().zip(points) {
                *o = fastexp::exp(log_norm + kappa * dot(x));
            }
        }
        Kernel::Schladitz { norm, shrink, .. } => {
            for (o, x) in out.iter_mut().zip(points) {
                let t = dot(x);
                let q = 1.0 - shrink * t * t;
                *o = norm / (q * q.sqrt());
            }
        }
    }
}

/// {k(y|x₁) / k(y|x₂)}², the integrand factor of the PR integrability condition.
pub fn squared_kernel_ratio(spec: &KernelSpec, y: &UnitVector, x1: &UnitVector, x2: &UnitVector) -> f64 {
    let k = spec.kernel();
    (2.0 * (k.log_density(y, x1) - k.log_density(y, x2))).exp()
}

/// Uniform upper bound on [`squared_kernel_ratio`] over all y, x₁, x₂:
/// exp(4κ) for vMF and max(β, 1/β)⁶ for Schladitz.
pub fn squared_ratio_bound(spec: &KernelSpec) -> f64 {
    match spec.family {
        KernelFamily::VonMisesFisher => (4.0 * spec.lambda).exp(),
        KernelFamily::Schladitz => {
            let b = spec.lambda.max(1.0 / spec.lambda);
            b.powi(6)
        }
    }
}
