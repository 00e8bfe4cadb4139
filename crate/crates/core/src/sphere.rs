//! Geometry on the unit sphere S²: coordinates, rotations and the
//! latitude–longitude midpoint quadrature used by every estimator.
//!
//! Integrals over the sphere are taken in spherical coordinates,
//!
//! ```text
//! ∫_S h(x) σ(dx) = ∫_0^{2π} ∫_0^{π} h(x_{θ,φ}) sin θ dθ dφ,
//! ```
//!
//! discretized by the midpoint rule on an `n_theta × n_phi` rectangle of
//! cells. Nodes never sit on a pole, so `sin θ` is strictly positive at
//! every node.

use std::f64::consts::{PI, TAU};
use std::ops::Neg;
use std::sync::Arc;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `‖v‖² − 1` accepted by [`UnitVector::try_new`].
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// A point on S² in Cartesian coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVector([f64; 3]);

impl UnitVector {
    pub const NORTH: UnitVector = UnitVector([0.0, 0.0, 1.0]);

    /// Accepts components whose squared norm is 1 within [`UNIT_NORM_TOL`].
    pub fn try_new(x1: f64, x2: f64, x3: f64) -> Result<Self> {
        let n2 = x1 * x1 + x2 * x2 + x3 * x3;
        if !n2.is_finite() || (n2 - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "({x1}, {x2}, {x3}) is not a unit vector (squared norm {n2})"
            )));
        }
        Ok(UnitVector([x1, x2, x3]))
    }

    /// Projects a nonzero finite vector onto the sphere.
    pub fn normalize(x1: f64, x2: f64, x3: f64) -> Result<Self> {
        let n = (x1 * x1 + x2 * x2 + x3 * x3).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid(format!(
                "cannot normalize ({x1}, {x2}, {x3})"
            )));
        }
        Ok(UnitVector([x1 / n, x2 / n, x3 / n]))
    }

    pub(crate) fn new_unchecked(v: [f64; 3]) -> Self {
        UnitVector(v)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.0[0]
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.0[1]
    }
    #[inline]
    pub fn x3(&self) -> f64 {
        self.0[2]
    }

    #[inline]
    pub fn as_array(&self) -> &[f64; 3] {
        &self.0
    }

    #[inline]
    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    /// Great-circle distance in radians.
    pub fn angle_to(&self, other: &UnitVector) -> f64 {
        // atan2 form stays accurate for nearly parallel vectors.
        let c = self.cross(other);
        let s = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        s.atan2(self.dot(other))
    }

    pub(crate) fn cross(&self, o: &UnitVector) -> [f64; 3] {
        let a = &self.0;
        let b = &o.0;
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn to_spherical(&self) -> SphericalCoord {
        cartesian_to_spherical(self)
    }

    pub fn to_vector3(&self) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.0[0], self.0[1], self.0[2])
    }
}

impl Neg for UnitVector {
    type Output = UnitVector;
    fn neg(self) -> UnitVector {
        UnitVector([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl TryFrom<[f64; 3]> for UnitVector {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        UnitVector::try_new(v[0], v[1], v[2])
    }
}

impl From<UnitVector> for [f64; 3] {
    fn from(v: UnitVector) -> [f64; 3] {
        v.0
    }
}

/// Polar angle θ ∈ [0, π] and azimuth φ ∈ [0, 2π), ISO convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalCoord {
    theta: f64,
    phi: f64,
}

impl SphericalCoord {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !(0.0..TAU).contains(&phi) {
            return Err(Error::invalid(format!(
                "spherical coordinate (θ={theta}, φ={phi}) outside [0,π]×[0,2π)"
            )));
        }
        Ok(SphericalCoord { theta, phi })
    }

    /// Like [`SphericalCoord::new`] but reduces φ modulo 2π first.
    pub fn wrapped(theta: f64, phi: f64) -> Result<Self> {
        SphericalCoord::new(theta, wrap_phi(phi))
    }

    #[inline]
    pub fn theta(&self) -> f64 {
        self.theta
    }
    #[inline]
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn to_unit_vector(&self) -> UnitVector {
        spherical_to_cartesian(self)
    }
}

pub(crate) fn wrap_phi(phi: f64) -> f64 {
    let p = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if p >= TAU {
        0.0
    } else {
        p
    }
}

pub fn spherical_to_cartesian(c: &SphericalCoord) -> UnitVector {
    let (st, ct) = c.theta.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    UnitVector([st * cp, st * sp, ct])
}

/// Inverse of [`spherical_to_cartesian`]. At the poles φ is set to 0.
pub fn cartesian_to_spherical(v: &UnitVector) -> SphericalCoord {
    let [x1, x2, x3] = v.0;
    let rho = x1.hypot(x2);
    // Equal to arccos(x3) on the sphere, without its loss of precision near the poles.
    let theta = rho.atan2(x3);
    let phi = if rho == 0.0 { 0.0 } else { wrap_phi(x2.atan2(x1)) };
    SphericalCoord { theta, phi }
}

/// Rotation matrix taking (0,0,1)ᵀ onto `mu`, in the explicit
/// (θ₀, φ₀) parameterization:
///
/// ```text
/// ⎡ cosθ₀cosφ₀  −sinφ₀  sinθ₀cosφ₀ ⎤
/// ⎢ cosθ₀sinφ₀   cosφ₀  sinθ₀sinφ₀ ⎥
/// ⎣   −sinθ₀       0      cosθ₀    ⎦
/// ```
pub fn rotation_to(mu: &UnitVector) -> Matrix3<f64> {
    let c = cartesian_to_spherical(mu);
    let (st, ct) = c.theta.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    Matrix3::new(
        ct * cp, -sp, st * cp, //
        ct * sp, cp, st * sp, //
        -st, 0.0, ct,
    )
}

/// Midpoint quadrature nodes over `[0, theta_max] × [0, 2π)`.
///
/// Nodes are stored θ-major: node `i_theta * n_phi + i_phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    theta_max: f64,
    n_theta: usize,
    n_phi: usize,
    nodes: Vec<SphericalCoord>,
    points: Vec<UnitVector>,
    weights: Vec<f64>,
}

impl SphereGrid {
    pub fn new(theta_max: f64, n_theta: usize, n_phi: usize) -> Result<Self> {
        build_grid(theta_max, n_theta, n_phi)
    }

    pub fn full(n_theta: usize, n_phi: usize) -> Result<Self> {
        build_grid(PI, n_theta, n_phi)
    }

    pub fn hemisphere(n_theta: usize, n_phi: usize) -> Result<Self> {
        build_grid(PI / 2.0, n_theta, n_phi)
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }
    pub fn n_phi(&self) -> usize {
        self.n_phi
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn d_theta(&self) -> f64 {
        self.theta_max / self.n_theta as f64
    }
    pub fn d_phi(&self) -> f64 {
        TAU / self.n_phi as f64
    }
    pub fn nodes(&self) -> &[SphericalCoord] {
        &self.nodes
    }
    /// Nodes as Cartesian unit vectors, same order as [`SphereGrid::nodes`].
    pub fn points(&self) -> &[UnitVector] {
        &self.points
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn index(&self, i_theta: usize, i_phi: usize) -> usize {
        i_theta * self.n_phi + i_phi
    }

    /// Analytic area of the covered region, 2π(1 − cos θ_max).
    pub fn region_area(&self) -> f64 {
        TAU * (1.0 - self.theta_max.cos())
    }

    pub fn quadrature(&self, values: &[f64]) -> Result<f64> {
        quadrature(self, values)
    }
}

pub fn build_grid(theta_max: f64, n_theta: usize, n_phi: usize) -> Result<SphereGrid> {
    if n_theta < 2 || n_phi < 2 {
        return Err(Error::invalid(format!(
            "grid needs at least 2 cells per axis, got {n_theta}×{n_phi}"
        )));
    }
    if !(theta_max > 0.0 && theta_max <= PI) {
        return Err(Error::invalid(format!(
            "theta_max must lie in (0, π], got {theta_max}"
        )));
    }
    let d_theta = theta_max / n_theta as f64;
    let d_phi = TAU / n_phi as f64;
    let n = n_theta * n_phi;
    let mut nodes = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n_theta {
        let theta = (i as f64 + 0.5) * d_theta;
        let w = theta.sin() * d_theta * d_phi;
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * d_phi;
            let c = SphericalCoord { theta, phi };
            points.push(spherical_to_cartesian(&c));
            nodes.push(c);
            weights.push(w);
        }
    }
    Ok(SphereGrid {
        theta_max,
        n_theta,
        n_phi,
        nodes,
        points,
        weights,
    })
}

/// Σ values_i · weight_i.
pub fn quadrature(grid: &SphereGrid, values: &[f64]) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            got: values.len(),
        });
    }
    Ok(values
        .iter()
        .zip(&grid.weights)
        .map(|(v, w)| v * w)
        .sum())
}

/// Normalization tolerance enforced by [`MixingDensityGrid::new`].
pub const DENSITY_NORM_TOL: f64 = 1e-9;

/// A mixing density ψ = dΨ/dσ tabulated at the nodes of a grid and
/// normalized under that grid's quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDensityGrid {
    grid: Arc<SphereGrid>,
    values: Vec<f64>,
}

impl MixingDensityGrid {
    /// Validates nonnegativity and normalization (within [`DENSITY_NORM_TOL`]).
    pub fn new(grid: Arc<SphereGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!(
                "mixing density values must be finite and nonnegative, found {bad}"
            )));
        }
        let total = quadrature(&grid, &values)?;
        if (total - 1.0).abs() > DENSITY_NORM_TOL {
            return Err(Error::MassNotNormalized { sum: total });
        }
        Ok(MixingDensityGrid { grid, values })
    }

    /// Rescales nonnegative values so they integrate to one.
    pub fn normalized(grid: Arc<SphereGrid>, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        let total = quadrature(&grid, &values)?;
        if !(total.is_finite() && total > 0.0) || values.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid(format!(
                "cannot normalize values with integral {total}"
            )));
        }
        values.iter_mut().for_each(|v| *v /= total);
        MixingDensityGrid::new(grid, values)
    }

    /// The uniform density on the grid's region.
    pub fn uniform(grid: Arc<SphereGrid>) -> Self {
        let total: f64 = grid.weights().iter().sum();
        let values = vec![1.0 / total; grid.len()];
        MixingDensityGrid { grid, values }
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<SphereGrid>, values: Vec<f64>) -> Self {
        MixingDensityGrid { grid, values }
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }
    pub fn grid_arc(&self) -> &Arc<SphereGrid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .zip(self.grid.weights())
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Probability mass carried by each node, ψ(x_j)·w_j.
    pub fn masses(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.grid.weights())
            .map(|(v, w)| v * w)
            .collect()
    }

    /// Density on the (θ, φ) rectangle, ψ†(θ, φ) = ψ(x_{θ,φ}) sin θ.
    pub fn psi_dagger(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.grid.nodes())
            .map(|(v, c)| v * c.theta().sin())
            .collect()
    }
}
