use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::sphere::{SphereGrid, SphericalCoord, UnitVector};

const MASS_TOL: f64 = 1e-6;

/// ∫ f_true log(f_true / f_hat) dσ by grid quadrature.
pub fn kl_mixture(f_true: &[f64], f_hat: &[f64], grid: &SphereGrid) -> Result<f64> {
    for v in [f_true, f_hat] {
        if v.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: v.len(),
            });
        }
    }
    if let Some(j) = f_hat.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Numerical(format!("estimated density is not positive at node {j}")));
    }
    let mut kl = 0.0;
    for ((p, q), w) in f_true.iter().zip(f_hat).zip(grid.weights()) {
        if *p > 0.0 {
            kl += w * p * (p / q).max(1e-300).ln();
        }
    }
    Ok(kl)
}

/// Partition of [0, θ_max] × [0, 2π) into k_theta rows of k_phi cells.
///
/// Rows touching a pole are single cap cells, so point masses at a pole fall
/// in one cell whatever their φ. Cells are centred on φ = 2πk/k_phi, so φ = 0
/// is interior. With `axial`, the last row of a hemisphere identifies φ with
/// φ + π and holds k_phi/2 cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub theta_max: f64,
    pub k_theta: usize,
    pub k_phi: usize,
    #[serde(default)]
    pub axial: bool,
}

impl Partition {
    pub fn new(theta_max: f64, k_theta: usize, k_phi: usize, axial: bool) -> Result<Self> {
        if k_theta == 0 || k_phi == 0 || !(theta_max > 0.0 && theta_max <= PI) {
            return Err(Error::invalid("partition needs positive dimensions and θ_max in (0, π]"));
        }
        if axial && k_phi % 2 != 0 {
            return Err(Error::invalid("axial partition needs an even k_phi"));
        }
        Ok(Partition {
            theta_max,
            k_theta,
            k_phi,
            axial,
        })
    }

    /// Partition of the family's support.
    pub fn for_family(family: KernelFamily, k_theta: usize, k_phi: usize) -> Result<Self> {
        Self::new(family.support_theta_max(), k_theta, k_phi, family.is_axial())
    }

    fn row_len(&self, it: usize) -> usize {
        let last = it + 1 == self.k_theta;
        if it == 0 || (last && self.theta_max >= PI) {
            1
        } else if last && self.axial {
            self.k_phi / 2
        } else {
            self.k_phi
        }
    }

    pub fn len(&self) -> usize {
        (0..self.k_theta).map(|it| self.row_len(it)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell index, θ-major. θ beyond θ_max is clamped into the last row.
    pub fn cell_of(&self, c: &SphericalCoord) -> usize {
        let it = ((c.theta() / self.theta_max * self.k_theta as f64) as usize).min(self.k_theta - 1);
        let offset: usize = (0..it).map(|r| self.row_len(r)).sum();
        let k = self.row_len(it);
        if k == 1 {
            return offset;
        }
        let period = if k == self.k_phi { TAU } else { PI };
        let ip = ((c.phi().rem_euclid(period) / period * k as f64 + 0.5) as usize) % k;
        offset + ip
    }

    /// Per-cell sums of point masses.
    pub fn masses<'a>(&self, points: impl IntoIterator<Item = (&'a SphericalCoord, f64)>) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (c, m) in points {
            out[self.cell_of(c)] += m;
        }
        out
    }

    /// Per-cell masses of a grid density (node masses ψ_j w_j).
    pub fn grid_masses(&self, psi: &crate::sphere::MixingDensityGrid) -> Vec<f64> {
        let m = psi.masses();
        self.masses(psi.grid().nodes().iter().zip(m))
    }
}

/// Σ_k |a_k − b_k| over the cells of a partition.
pub fn mixing_l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    for v in [a, b] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL || v.iter().any(|x| *x < 0.0) {
            return Err(Error::MassNotNormalized { sum });
        }
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

/// K_n = (1/n) Σ_i log{f*(Y_i) / f_{i−1}(Y_i)} from predictive log densities.
pub fn empirical_kl_diagnostic(
    data: &[UnitVector],
    f_true: impl Fn(&UnitVector) -> f64,
    predictive_log_densities: &[f64],
) -> Result<f64> {
    if data.len() != predictive_log_densities.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            got: predictive_log_densities.len(),
        });
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = data
        .iter()
        .zip(predictive_log_densities)
        .map(|(y, lf)| f_true(y).ln() - lf)
        .sum();
    Ok(s / data.len() as f64)
}
