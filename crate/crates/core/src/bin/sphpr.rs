use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use sphpr::cluster::{cluster, ClusterConfig, DEFAULT_LAMBDA_SUBSAMPLE, DEFAULT_REL_THRESHOLD};
use sphpr::em::{em_fit, select_bic, EmConfig, EmInit, DEFAULT_J_MAX, DEFAULT_RESTARTS};
use sphpr::gof::{bayes_factor, GammaPrior, GofConfig};
use sphpr::io::{
    read_dataset, read_experiment_config, read_grid_csv, write_contour_csv, write_dataset, write_grid_csv, write_json,
    write_spherical, RunReport,
};
use sphpr::marginal::{fit_structural, OptimizerConfig};
use sphpr::pr::{mixture_density_on, permutation_average, uniform_prior, DEFAULT_PERMUTATIONS};
use sphpr::sim::{preset, run_experiment, sample_mixture, ExperimentConfig};
use sphpr::{Error, KernelFamily, KernelSpec, MixingDensityGrid, Result, SphereGrid, UnitVector, WeightSchedule};

#[derive(Parser, Debug)]
#[command(name = "sphpr", version, about = "Predictive recursion for mixing densities on the sphere")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate λ by PR marginal likelihood, then the mixing density at λ̂.
    Estimate(EstimateArgs),
    /// Fit a finite mixture by EM, choosing J by BIC unless given.
    FitEm(FitEmArgs),
    /// Bayes factor of a single kernel against a PR mixture.
    Gof(GofArgs),
    /// Cluster observations by the modes of the estimated mixing density.
    Cluster(ClusterArgs),
    /// Run a simulation design, or draw one dataset from it.
    Simulate(SimulateArgs),
    /// Contour-ready CSVs from an estimate file.
    PlotData(PlotDataArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Output {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Model {
    /// CSV of observations: x1,x2,x3 or theta,phi per row.
    #[arg(long)]
    data: PathBuf,
    /// Kernel family: vmf or schladitz.
    #[arg(long, default_value = "vmf")]
    family: KernelFamily,
    #[arg(long)]
    grid_theta: Option<usize>,
    #[arg(long, default_value_t = 120)]
    grid_phi: usize,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    perms: usize,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Relative tolerance of the λ search.
    #[arg(long, default_value_t = 1e-3)]
    lambda_tol: f64,
    /// Maximum marginal-likelihood evaluations in the λ search.
    #[arg(long, default_value_t = 40)]
    opt_budget: usize,
    #[command(flatten)]
    out: Output,
}

impl Model {
    fn grid(&self) -> (usize, usize) {
        (self.grid_theta.unwrap_or(self.family.default_n_theta()), self.grid_phi)
    }

    fn range(&self) -> (f64, f64) {
        let (lo, hi) = self.family.default_lambda_range();
        (self.lambda_min.unwrap_or(lo), self.lambda_max.unwrap_or(hi))
    }

    fn optimizer(&self) -> Result<OptimizerConfig> {
        Ok(OptimizerConfig {
            tol: self.lambda_tol,
            budget: self.opt_budget,
            n_perms: self.perms,
            seed: self.out.seed,
            schedule: WeightSchedule::new(self.gamma)?,
        })
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    model: Model,
    /// Use this λ instead of searching for it.
    #[arg(long)]
    lambda: Option<f64>,
    /// Full-sphere grid for the mixture density output.
    #[arg(long, default_value_t = 60)]
    eval_theta: usize,
    #[arg(long, default_value_t = 120)]
    eval_phi: usize,
}

#[derive(Args, Debug, Serialize)]
struct FitEmArgs {
    #[command(flatten)]
    model: Model,
    /// Number of components; chosen by BIC over 1..=j-max when absent.
    #[arg(long)]
    components: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_J_MAX)]
    j_max: usize,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
}

#[derive(Args, Debug, Serialize)]
struct GofArgs {
    #[command(flatten)]
    model: Model,
    #[arg(long, default_value_t = GammaPrior::default().shape)]
    prior_shape: f64,
    #[arg(long, default_value_t = GammaPrior::default().scale)]
    prior_scale: f64,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    #[command(flatten)]
    model: Model,
    /// Observations used to estimate λ.
    #[arg(long, default_value_t = DEFAULT_LAMBDA_SUBSAMPLE)]
    lambda_subsample: usize,
    /// Modes below this fraction of the maximum density are ignored.
    #[arg(long, default_value_t = DEFAULT_REL_THRESHOLD)]
    rel_threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// TOML simulation config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in design, e.g. vmf-1 or schladitz-2.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    perms: Option<usize>,
    /// Write one sampled dataset here instead of running the design.
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PlotDataArgs {
    /// Grid CSV written by `estimate`.
    #[arg(long)]
    estimate: PathBuf,
    /// With --lambda, also write the mixture density on a full-sphere grid.
    #[arg(long, default_value = "vmf")]
    family: KernelFamily,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 60)]
    eval_theta: usize,
    #[arg(long, default_value_t = 120)]
    eval_phi: usize,
    /// Observations to emit as (theta, phi) scatter points.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

struct Run {
    report: RunReport,
    out_dir: PathBuf,
    started: Instant,
}

impl Run {
    fn new(command: &str, config: &impl Serialize, seed: u64, out_dir: &Path) -> Result<Run> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
            path: out_dir.to_path_buf(),
            source: e,
        })?;
        let config = serde_json::to_value(config).map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(Run {
            report: RunReport::new(command, config, seed),
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out_dir.join(name);
        self.report.outputs.push(p.clone());
        p
    }

    fn finish(mut self, results: serde_json::Value) -> Result<()> {
        self.report.elapsed_seconds = self.started.elapsed().as_secs_f64();
        self.report.results = results;
        let p = self.path("report.json");
        write_json(&p, &self.report)?;
        for o in &self.report.outputs {
            println!("{}", o.display());
        }
        Ok(())
    }
}

fn load(model: &Model, run: &mut Run) -> Result<Vec<UnitVector>> {
    let ds = read_dataset(&model.data)?;
    run.report.warnings.extend(ds.warnings);
    Ok(ds.points)
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let m = &a.model;
    let mut run = Run::new("estimate", a, m.out.seed, &m.out.out_dir)?;
    let data = load(m, &mut run)?;
    let (nt, np) = m.grid();
    let psi0 = uniform_prior(m.family, nt, np)?;
    let opt = m.optimizer()?;
    let (est, curve) = match a.lambda {
        Some(l) => {
            let spec = KernelSpec::with_range(m.family, l, m.range())?;
            (permutation_average(&data, &spec, &psi0, opt.schedule, opt.n_perms, opt.seed)?, None)
        }
        None => {
            let (curve, est) = fit_structural(&data, m.family, m.range(), &psi0, &opt)?;
            if curve.boundary_solution {
                run.report.warnings.push(format!("λ̂ = {} lies on the search boundary", curve.argmax));
            }
            (est, Some(curve))
        }
    };
    write_grid_csv(run.path("psi.csv"), est.psi.grid(), est.psi.values(), "psi")?;
    let eval = SphereGrid::full(a.eval_theta, a.eval_phi)?;
    let f = mixture_density_on(&est.psi, &est.kernel, eval.points());
    write_grid_csv(run.path("mixture_density.csv"), &eval, &f, "density")?;
    if let Some(c) = &curve {
        let p = run.path("marginal_likelihood.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["lambda", "log_marginal"]).map_err(|e| Error::Data(e.to_string()))?;
        for (l, v) in c.sorted() {
            w.write_record([l.to_string(), v.to_string()]).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io { path: p, source: e })?;
    }
    run.finish(json!({
        "lambda_hat": est.kernel.lambda,
        "log_marginal": est.log_marginal,
        "n": est.n,
        "permutations": est.permutations,
        "curve": curve,
    }))
}

fn fit_em(a: &FitEmArgs) -> Result<()> {
    let m = &a.model;
    let mut run = Run::new("fit-em", a, m.out.seed, &m.out.out_dir)?;
    let data = load(m, &mut run)?;
    let cfg = EmConfig {
        lambda_range: m.range(),
        ..EmConfig::for_family(m.family)
    };
    let fit = match a.components {
        Some(j) => em_fit(&data, m.family, j, &EmInit::Seeded(m.out.seed), &cfg)?,
        None => select_bic(&data, m.family, a.j_max, a.restarts, m.out.seed, &cfg)?,
    };
    write_json(run.path("em_fit.json"), &fit)?;
    run.finish(json!({
        "components": fit.components(),
        "lambda": fit.lambda,
        "log_lik": fit.log_lik,
        "bic": fit.bic,
        "converged": fit.converged,
    }))
}

fn gof(a: &GofArgs) -> Result<()> {
    let m = &a.model;
    let mut run = Run::new("gof", a, m.out.seed, &m.out.out_dir)?;
    let data = load(m, &mut run)?;
    let prior = GammaPrior::new(a.prior_shape, a.prior_scale)?;
    let cfg = GofConfig {
        lambda_range: m.range(),
        h1_grid: m.grid(),
        optimizer: m.optimizer()?,
        ..GofConfig::for_family(m.family)
    };
    let bf = bayes_factor(&data, m.family, &prior, &cfg)?;
    eprintln!("log10 BF = {:.3} ({:?})", bf.log10_bf, bf.verdict);
    write_json(run.path("gof.json"), &bf)?;
    run.finish(serde_json::to_value(&bf).map_err(|e| Error::Numerical(e.to_string()))?)
}

fn cluster_cmd(a: &ClusterArgs) -> Result<()> {
    let m = &a.model;
    let mut run = Run::new("cluster", a, m.out.seed, &m.out.out_dir)?;
    let data = load(m, &mut run)?;
    let cfg = ClusterConfig {
        family: m.family,
        grid: m.grid(),
        lambda_range: m.range(),
        lambda_subsample: a.lambda_subsample,
        rel_threshold: a.rel_threshold,
        optimizer: m.optimizer()?,
    };
    let out = cluster(&data, &cfg)?;
    let p = run.path("labels.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["row", "label"]).map_err(|e| Error::Data(e.to_string()))?;
    for (i, l) in out.labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io { path: p, source: e })?;
    let modes: Vec<_> = out
        .model
        .modes
        .iter()
        .zip(&out.model.mode_masses)
        .map(|(y, w)| {
            let c = y.to_spherical();
            json!({"x": y.as_array(), "theta": c.theta(), "phi": c.phi(), "mass": w})
        })
        .collect();
    let summary = json!({"lambda_hat": out.model.kernel.lambda, "modes": modes});
    write_json(run.path("modes.json"), &summary)?;
    run.finish(summary)
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = match (&a.config, &a.preset) {
        (Some(p), _) => read_experiment_config(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => return Err(Error::InvalidArgument("--config or --preset is required".into())),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(p) = a.perms {
        cfg.n_perms = p;
    }
    cfg.validate()?;
    let mut run = Run::new("simulate", &cfg, cfg.seed, &a.out_dir)?;
    if let Some(target) = &a.sample {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, data) = sample_mixture(&cfg.mixing, cfg.family, cfg.lambda, cfg.n, &mut rng)?;
        write_dataset(target, &data)?;
        run.report.outputs.push(target.clone());
        return run.finish(json!({"n": data.len()}));
    }
    let row = run_experiment(&cfg)?;
    eprintln!(
        "{}: KL_PR {:.4} ({:.4})  KL_ML {:.4} ({:.4})  d_PR {:.3} ({:.3})  d_ML {:.3} ({:.3})  [{}/{} replications]",
        row.label,
        row.kl_pr.mean,
        row.kl_pr.se,
        row.kl_ml.mean,
        row.kl_ml.se,
        row.d_pr.mean,
        row.d_pr.se,
        row.d_ml.mean,
        row.d_ml.se,
        row.completed,
        row.replications
    );
    write_json(run.path("simulation.json"), &row)?;
    run.finish(serde_json::to_value(&row).map_err(|e| Error::Numerical(e.to_string()))?)
}

fn plot_data(a: &PlotDataArgs) -> Result<()> {
    let mut run = Run::new("plot-data", a, a.out.seed, &a.out.out_dir)?;
    let (grid, values) = read_grid_csv(&a.estimate)?;
    write_contour_csv(run.path("psi_contour.csv"), &grid, &values)?;
    let mut results = json!({"nodes": grid.len(), "n_theta": grid.n_theta(), "n_phi": grid.n_phi()});
    if let Some(l) = a.lambda {
        let psi = MixingDensityGrid::new(grid.clone(), values)?;
        let spec = KernelSpec::new(a.family, l)?;
        let eval = SphereGrid::full(a.eval_theta, a.eval_phi)?;
        let f = mixture_density_on(&psi, &spec, eval.points());
        write_contour_csv(run.path("density_contour.csv"), &eval, &f)?;
        results["density_nodes"] = json!(eval.len());
    }
    if let Some(d) = &a.data {
        let ds = read_dataset(d)?;
        run.report.warnings.extend(ds.warnings);
        write_spherical(run.path("data_points.csv"), &ds.points)?;
    }
    run.finish(results)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::FitEm(a) => fit_em(a),
        Command::Gof(a) => gof(a),
        Command::Cluster(a) => cluster_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::PlotData(a) => plot_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
