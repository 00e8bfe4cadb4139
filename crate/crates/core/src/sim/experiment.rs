use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{kl_mixture, mixing_l1_distance, Partition};
use super::{sample_mixture, Atoms, MixingSpec, TruncatedNormal2};
use crate::em::{select_bic, EmConfig};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, KernelFamily, KernelSpec};
use crate::marginal::{fit_structural, OptimizerConfig};
use crate::pr::{mixture_density_on, permutation_average, support_grid, WeightSchedule, DEFAULT_GAMMA};
use crate::seed::derive_seed;
use crate::sphere::{MixingDensityGrid, SphereGrid, UnitVector};

fn default_n() -> usize {
    2000
}
fn default_reps() -> usize {
    10
}
fn default_perms() -> usize {
    10
}
fn default_search_perms() -> usize {
    1
}
fn default_kl_grid() -> [usize; 2] {
    [60, 120]
}
fn default_partition() -> [usize; 2] {
    [9, 12]
}
fn default_tol() -> f64 {
    1e-3
}
fn default_budget() -> usize {
    40
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_j_max() -> usize {
    crate::em::DEFAULT_J_MAX
}
fn default_restarts() -> usize {
    crate::em::DEFAULT_RESTARTS
}

/// One simulation design, replicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    pub family: KernelFamily,
    /// True structural parameter.
    pub lambda: f64,
    pub mixing: MixingSpec,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_perms")]
    pub n_perms: usize,
    /// Orderings per objective evaluation during the λ search.
    #[serde(default = "default_search_perms")]
    pub search_perms: usize,
    #[serde(default)]
    pub seed: u64,
    /// PR support grid (n_theta, n_phi); defaults to the family's default × 120.
    #[serde(default)]
    pub grid: Option<[usize; 2]>,
    /// Full-sphere grid on which KL is evaluated.
    #[serde(default = "default_kl_grid")]
    pub kl_grid: [usize; 2],
    #[serde(default = "default_partition")]
    pub partition: [usize; 2],
    #[serde(default)]
    pub lambda_range: Option<[f64; 2]>,
    #[serde(default = "default_tol")]
    pub lambda_tol: f64,
    #[serde(default = "default_budget")]
    pub opt_budget: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_j_max")]
    pub em_j_max: usize,
    #[serde(default = "default_restarts")]
    pub em_restarts: usize,
}

impl ExperimentConfig {
    pub fn new(label: impl Into<String>, family: KernelFamily, lambda: f64, mixing: MixingSpec) -> Self {
        ExperimentConfig {
            label: label.into(),
            family,
            lambda,
            mixing,
            n: default_n(),
            replications: default_reps(),
            n_perms: default_perms(),
            search_perms: default_search_perms(),
            seed: 0,
            grid: None,
            kl_grid: default_kl_grid(),
            partition: default_partition(),
            lambda_range: None,
            lambda_tol: default_tol(),
            opt_budget: default_budget(),
            gamma: default_gamma(),
            em_j_max: default_j_max(),
            em_restarts: default_restarts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate_lambda(self.lambda)?;
        self.mixing.validate()?;
        if self.n == 0 || self.replications == 0 || self.n_perms == 0 || self.search_perms == 0 {
            return Err(Error::invalid("n, replications, n_perms and search_perms must be at least 1"));
        }
        if self.partition.contains(&0) {
            return Err(Error::invalid("partition dimensions must be positive"));
        }
        WeightSchedule::new(self.gamma)?;
        Ok(())
    }

    pub fn support_dims(&self) -> (usize, usize) {
        match self.grid {
            Some([t, p]) => (t, p),
            None => (self.family.default_n_theta(), 120),
        }
    }

    pub fn true_kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.family, self.lambda)
    }

    pub fn range(&self) -> (f64, f64) {
        match self.lambda_range {
            Some([a, b]) => (a, b),
            None => self.family.default_lambda_range(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub kl_pr: f64,
    pub kl_ml: f64,
    pub d_pr: f64,
    pub d_ml: f64,
    pub lambda_hat: f64,
    pub lambda_boundary: bool,
    pub em_lambda: f64,
    pub em_components: usize,
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Summary {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Summary { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub label: String,
    pub family: KernelFamily,
    pub lambda: f64,
    pub n: usize,
    pub replications: usize,
    pub completed: usize,
    pub failures: Vec<String>,
    pub kl_pr: Summary,
    pub kl_ml: Summary,
    pub d_pr: Summary,
    pub d_ml: Summary,
    pub lambda_hat: Summary,
    pub em_components: Summary,
    pub results: Vec<ReplicationResult>,
}

/// Quantities shared by all replications of one design.
struct Truth {
    support: std::sync::Arc<SphereGrid>,
    eval: SphereGrid,
    f_true: Vec<f64>,
    partition: Partition,
    cells: Vec<f64>,
}

impl Truth {
    fn new(config: &ExperimentConfig) -> Result<Truth> {
        let (nt, np) = config.support_dims();
        let support = support_grid(config.family, nt, np)?;
        let atoms: Atoms = config.mixing.atoms(&support)?;
        let eval = SphereGrid::full(config.kl_grid[0], config.kl_grid[1])?;
        let kernel = Kernel::new(config.family, config.lambda);
        let f_true = atoms.mixture_density_on(&kernel, eval.points());
        let partition = Partition::for_family(config.family, config.partition[0], config.partition[1])?;
        let cells = partition.masses(atoms.coords.iter().zip(atoms.masses.iter().copied()));
        Ok(Truth {
            support,
            eval,
            f_true,
            partition,
            cells,
        })
    }
}

fn replicate(config: &ExperimentConfig, truth: &Truth, r: usize) -> Result<ReplicationResult> {
    let seed = derive_seed(config.seed, r as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, data) = sample_mixture(&config.mixing, config.family, config.lambda, config.n, &mut rng)?;
    let psi0 = MixingDensityGrid::uniform(truth.support.clone());
    let opt = OptimizerConfig {
        tol: config.lambda_tol,
        budget: config.opt_budget,
        n_perms: config.search_perms,
        seed: derive_seed(seed, 1),
        schedule: WeightSchedule::new(config.gamma)?,
    };
    let range = config.range();
    let (curve, mut est) = fit_structural(&data, config.family, range, &psi0, &opt)?;
    if config.search_perms != config.n_perms {
        let spec = KernelSpec::with_range(config.family, curve.argmax, range)?;
        est = permutation_average(&data, &spec, &psi0, opt.schedule, config.n_perms, opt.seed)?;
    }
    let em_cfg = EmConfig {
        lambda_range: range,
        ..EmConfig::for_family(config.family)
    };
    let em = select_bic(&data, config.family, config.em_j_max, config.em_restarts, derive_seed(seed, 2), &em_cfg)?;

    let pts: &[UnitVector] = truth.eval.points();
    let f_pr = mixture_density_on(&est.psi, &est.kernel, pts);
    let f_ml: Vec<f64> = pts.par_iter().map(|y| em.density(y)).collect();
    let pm = em.point_masses();
    let ml_cells = truth.partition.masses(pm.iter().map(|(c, m)| (c, *m)));
    Ok(ReplicationResult {
        kl_pr: kl_mixture(&truth.f_true, &f_pr, &truth.eval)?,
        kl_ml: kl_mixture(&truth.f_true, &f_ml, &truth.eval)?,
        d_pr: mixing_l1_distance(&truth.cells, &truth.partition.grid_masses(&est.psi))?,
        d_ml: mixing_l1_distance(&truth.cells, &ml_cells)?,
        lambda_hat: curve.argmax,
        lambda_boundary: curve.boundary_solution,
        em_lambda: em.lambda,
        em_components: em.components(),
    })
}

/// A single replication `r` of `config`, reproducible on its own.
pub fn run_replication(config: &ExperimentConfig, r: usize) -> Result<ReplicationResult> {
    config.validate()?;
    replicate(config, &Truth::new(config)?, r)
}

/// Runs all replications and summarizes them. Failed replications are
/// excluded and listed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRow> {
    config.validate()?;
    let truth = Truth::new(config)?;
    let outcomes: Vec<Result<ReplicationResult>> =
        (0..config.replications).into_par_iter().map(|r| replicate(config, &truth, r)).collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => results.push(v),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push(format!("replication {r}: {e}"));
            }
        }
    }
    if results.is_empty() {
        return Err(Error::Numerical(format!("all {} replications failed", config.replications)));
    }
    let col = |f: fn(&ReplicationResult) -> f64| Summary::of(&results.iter().map(f).collect::<Vec<_>>());
    Ok(ExperimentRow {
        label: config.label.clone(),
        family: config.family,
        lambda: config.lambda,
        n: config.n,
        replications: config.replications,
        completed: results.len(),
        failures,
        kl_pr: col(|r| r.kl_pr),
        kl_ml: col(|r| r.kl_ml),
        d_pr: col(|r| r.d_pr),
        d_ml: col(|r| r.d_ml),
        lambda_hat: col(|r| r.lambda_hat),
        em_components: col(|r| r.em_components as f64),
        results,
    })
}

fn trn(mean: [f64; 2], cov: [[f64; 2]; 2], theta_max: f64) -> TruncatedNormal2 {
    TruncatedNormal2 { mean, cov, theta_max }
}

/// Built-in designs: `schladitz-1a` … `schladitz-1d`, `schladitz-2` …
/// `schladitz-4` (β = 0.1, hemisphere support) and `vmf-1` … `vmf-4`,
/// `vmf-5a`, `vmf-5b` (κ = 10, full sphere).
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let s = (PI / 12.0).powi(2);
    let unimodal_cov = [[s, s], [s, (PI / 3.0).powi(2)]];
    let bimodal_cov = [[s, 0.0], [0.0, (PI / 6.0).powi(2)]];
    let (family, lambda, tmax) = if name.starts_with("schladitz-") {
        (KernelFamily::Schladitz, 0.1, FRAC_PI_2)
    } else if name.starts_with("vmf-") {
        (KernelFamily::VonMisesFisher, 10.0, PI)
    } else {
        return Err(Error::invalid(format!("unknown preset '{name}'")));
    };
    let case = name.split_once('-').map(|x| x.1).unwrap_or_default();
    let bimodal = MixingSpec::Bimodal {
        components: [
            trn([FRAC_PI_4, FRAC_PI_2], bimodal_cov, tmax),
            trn([FRAC_PI_4, 5.0 * FRAC_PI_4], bimodal_cov, tmax),
        ],
        weight: 0.5,
    };
    let mixing = match (family, case) {
        (KernelFamily::Schladitz, "1a" | "1b" | "1c" | "1d") => MixingSpec::TwoPoint {
            locations: [[FRAC_PI_2, 0.0], [0.0, 0.0]],
            weight: match case {
                "1a" => 0.5,
                "1b" => 0.25,
                "1c" => 0.2,
                _ => 0.1,
            },
        },
        (KernelFamily::VonMisesFisher, "1") => MixingSpec::TwoPoint {
            locations: [[FRAC_PI_2, 0.0], [FRAC_PI_2, FRAC_PI_2]],
            weight: 0.5,
        },
        (_, "2") => MixingSpec::TruncatedNormal(trn([FRAC_PI_4, PI], unimodal_cov, tmax)),
        (_, "3") => MixingSpec::BetaProduct {
            theta: [2.0, 5.0],
            phi: [2.0, 2.0],
            theta_max: tmax,
        },
        (_, "4") => bimodal,
        (KernelFamily::VonMisesFisher, "5a") => MixingSpec::BetaUniform {
            theta: [4.0, 4.0],
            theta_max: PI,
        },
        (KernelFamily::VonMisesFisher, "5b") => MixingSpec::UniformBeta {
            phi: [4.0, 4.0],
            theta_max: PI,
        },
        _ => return Err(Error::invalid(format!("unknown preset '{name}'"))),
    };
    Ok(ExperimentConfig::new(name, family, lambda, mixing))
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "schladitz-1a",
        "schladitz-1b",
        "schladitz-1c",
        "schladitz-1d",
        "schladitz-2",
        "schladitz-3",
        "schladitz-4",
        "vmf-1",
        "vmf-2",
        "vmf-3",
        "vmf-4",
        "vmf-5a",
        "vmf-5b",
    ]
}
