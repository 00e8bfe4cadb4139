//! Mode extraction from a PR mixing-density estimate and maximum-posterior
//! cluster assignment.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelFamily, KernelSpec};
use crate::marginal::{fit_structural, MarginalLikelihoodCurve, OptimizerConfig};
use crate::pr::{permutation_average, uniform_prior};
use crate::seed::derive_seed;
use crate::sphere::{MixingDensityGrid, UnitVector};

pub const DEFAULT_REL_THRESHOLD: f64 = 0.2;
pub const DEFAULT_LAMBDA_SUBSAMPLE: usize = 500;

/// Modes of ψ̂ treated as pseudo-components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub modes: Vec<UnitVector>,
    /// Node indices of the modes in the support grid.
    pub mode_nodes: Vec<usize>,
    pub mode_masses: Vec<f64>,
    pub kernel: KernelSpec,
}

fn distance(family: KernelFamily, a: &UnitVector, b: &UnitVector) -> f64 {
    let t = a.dot(b);
    if family.is_axial() {
        1.0 - t.abs()
    } else {
        1.0 - t
    }
}

/// Strict local maxima of ψ̂ over the 8-neighbourhood (φ wraps, θ does not)
/// that exceed `rel_threshold` × max ψ̂. Each node's mass goes to its
/// nearest mode.
pub fn find_modes(psi: &MixingDensityGrid, kernel: KernelSpec, rel_threshold: f64) -> Result<ClusterModel> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::invalid(format!("rel_threshold must lie in (0, 1), got {rel_threshold}")));
    }
    let grid = psi.grid();
    let v = psi.values();
    let (nt, np) = (grid.n_theta(), grid.n_phi());
    let cut = rel_threshold * v.iter().copied().fold(0.0, f64::max);

    let mut mode_nodes = Vec::new();
    for it in 0..nt {
        for ip in 0..np {
            let here = v[grid.index(it, ip)];
            if !(here > cut) {
                continue;
            }
            let mut is_max = true;
            'nb: for dt in [-1isize, 0, 1] {
                let jt = it as isize + dt;
                if jt < 0 || jt >= nt as isize {
                    continue;
                }
                for dp in [-1isize, 0, 1] {
                    if dt == 0 && dp == 0 {
                        continue;
                    }
                    let jp = (ip as isize + dp).rem_euclid(np as isize) as usize;
                    if v[grid.index(jt as usize, jp)] >= here {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                mode_nodes.push(grid.index(it, ip));
            }
        }
    }
    if mode_nodes.is_empty() {
        return Err(Error::NoModes);
    }
    let modes: Vec<UnitVector> = mode_nodes.iter().map(|&j| grid.points()[j]).collect();

    let mut mode_masses = vec![0.0; modes.len()];
    for (x, m) in grid.points().iter().zip(psi.masses()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, mu) in modes.iter().enumerate() {
            let d = distance(kernel.family, x, mu);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        mode_masses[best] += m;
    }
    Ok(ClusterModel {
        modes,
        mode_nodes,
        mode_masses,
        kernel,
    })
}

/// label(y) = argmax_j m_j · k_λ(y | mode_j), ties to the lowest index.
pub fn assign_clusters(data: &[UnitVector], model: &ClusterModel, lambda: f64) -> Result<Vec<usize>> {
    model.kernel.family.validate_lambda(lambda)?;
    if model.modes.is_empty() || model.modes.len() != model.mode_masses.len() {
        return Err(Error::invalid("cluster model needs one mass per mode"));
    }
    let kernel = Kernel::new(model.kernel.family, lambda);
    let log_m: Vec<f64> = model.mode_masses.iter().map(|m| m.ln()).collect();
    Ok(data
        .par_iter()
        .map(|y| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (k, (mu, lm)) in model.modes.iter().zip(&log_m).enumerate() {
                let s = lm + kernel.log_density(y, mu);
                if s > best_s {
                    best = k;
                    best_s = s;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub family: KernelFamily,
    pub grid: (usize, usize),
    pub lambda_range: (f64, f64),
    /// Observations used to estimate λ; all are used when the data are smaller.
    pub lambda_subsample: usize,
    pub rel_threshold: f64,
    pub optimizer: OptimizerConfig,
}

impl ClusterConfig {
    pub fn for_family(family: KernelFamily) -> Self {
        ClusterConfig {
            family,
            grid: (family.default_n_theta(), 120),
            lambda_range: family.default_lambda_range(),
            lambda_subsample: DEFAULT_LAMBDA_SUBSAMPLE,
            rel_threshold: DEFAULT_REL_THRESHOLD,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    pub curve: MarginalLikelihoodCurve,
}

/// λ̂ from a seeded subsample, ψ̂ from all data at λ̂, then modes and labels.
pub fn cluster(data: &[UnitVector], config: &ClusterConfig) -> Result<Clustering> {
    if data.is_empty() {
        return Err(Error::Data("no observations to cluster".into()));
    }
    let psi0 = uniform_prior(config.family, config.grid.0, config.grid.1)?;
    let sub: Vec<UnitVector> = if data.len() > config.lambda_subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.optimizer.seed, 3));
        let mut idx = sample(&mut rng, data.len(), config.lambda_subsample).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| data[i]).collect()
    } else {
        data.to_vec()
    };
    let (curve, _) = fit_structural(&sub, config.family, config.lambda_range, &psi0, &config.optimizer)?;
    let spec = KernelSpec::with_range(config.family, curve.argmax, config.lambda_range)?;
    let opt = &config.optimizer;
    let est = permutation_average(data, &spec, &psi0, opt.schedule, opt.n_perms, opt.seed)?;
    let model = find_modes(&est.psi, spec, config.rel_threshold)?;
    let labels = assign_clusters(data, &model, spec.lambda)?;
    Ok(Clustering { model, labels, curve })
}
