mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fvsim::coupling::{sweep_kappa, write_sweep_csv, KappaConfig};
use fvsim::experiments::{run_experiment, Check, Experiment, Preset, RunConfig};
use fvsim::gridref::{build_grid_kernel, nonlinear_flow, qsd_power_iteration, GridKernel, DEFAULT_CELLS, DEFAULT_TOL};
use fvsim::particles::{run_chain, TraceObserver};
use fvsim::{CosineFamily, CouplingMode, GridDensity, InitialLaw, ModelSpec, ParticleConfiguration, RngStream, StepParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use output::{read_manifest, Run, RECORDS};

#[derive(Parser)]
#[command(name = "fvsim", version, about = "Fleming-Viot particle approximation of quasi-stationary distributions on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML file (keys merged over the defaults) or the manifest.json of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Model preset: demo, zero-kill, constant-kill, drift-free, stress.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle system and record a trace and the final configuration.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        /// `uniform` or `dirac:x0,x1,...`.
        #[arg(long)]
        initial: Option<String>,
    },
    /// Grid law of the killed chain conditioned on survival after `steps` steps.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        initial: Option<String>,
    },
    /// Quasi-stationary distribution of the time-discretized chain on the grid.
    Qsd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        cells: Option<usize>,
        /// Directory for cached grid kernels.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Contraction rate from coupled particle systems over N and eps.
    Kappa {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        particles: Option<Vec<usize>>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run a named experiment: propagation_of_chaos, gamma_bias, long_time, theorem_main.
    Experiment {
        name: String,
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "paper")]
        quick: bool,
        #[arg(long)]
        paper: bool,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        particles: Option<Vec<usize>>,
        /// Step count; replaces the time ladder by `steps * gamma`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Run the property suite; exits nonzero if any property fails.
    Validate {
        #[arg(long, default_value_t = 20_240_601)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelChoice {
    preset: String,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self { preset: "demo".into(), dim: 1, drift: None, lambda0: None, eps: None }
    }
}

impl ModelChoice {
    fn apply(&mut self, args: &ModelArgs, eps: Option<f64>) {
        if let Some(m) = &args.model {
            self.preset = m.clone();
        }
        self.dim = args.dim.unwrap_or(self.dim);
        self.drift = args.drift.or(self.drift);
        self.lambda0 = args.lambda0.or(self.lambda0);
        self.eps = eps.or(self.eps);
    }

    fn family(&self) -> Result<CosineFamily> {
        let base = CosineFamily::preset(&self.preset)?;
        let f = CosineFamily {
            dim: self.dim,
            drift: self.drift.unwrap_or(base.drift),
            lambda0: self.lambda0.unwrap_or(base.lambda0),
            eps: self.eps.unwrap_or(base.eps),
        };
        f.validate()?;
        Ok(f)
    }

    fn params(&self, gamma: f64) -> Result<StepParams> {
        Ok(StepParams::new(ModelSpec::builtin(self.family()?)?, gamma)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateParams {
    model: ModelChoice,
    gamma: f64,
    particles: usize,
    steps: u64,
    initial: InitialLaw,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleParams {
    model: ModelChoice,
    gamma: f64,
    steps: u64,
    cells: usize,
    initial: InitialLaw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QsdParams {
    model: ModelChoice,
    gamma: f64,
    cells: usize,
    tol: f64,
    max_iter: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KappaParams {
    model: ModelChoice,
    gamma: f64,
    particles: Vec<usize>,
    eps: Vec<f64>,
    replicates: usize,
    steps: u64,
    mode: CouplingMode,
    bootstrap: usize,
    seed: u64,
}

const DEFAULT_SEED: u64 = 20_240_601;

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Defaults, then the config file (TOML keys or a manifest's full config).
fn load<T: Serialize + DeserializeOwned>(command: &str, defaults: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(defaults) };
    let over = if path.extension().is_some_and(|e| e == "json") {
        let m = read_manifest(path)?;
        if m.command != command {
            bail!("manifest {} belongs to command '{}', not '{command}'", path.display(), m.command);
        }
        m.config
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(table)?
    };
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, over);
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

fn parse_initial(s: &str) -> Result<InitialLaw> {
    if s == "uniform" {
        return Ok(InitialLaw::Uniform);
    }
    if let Some(rest) = s.strip_prefix("dirac:") {
        let at = rest.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        return Ok(InitialLaw::Dirac { at });
    }
    bail!("initial law must be 'uniform' or 'dirac:x0,x1,...', got '{s}'")
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn finish(run: Run, out: &Path, force: bool) -> Result<()> {
    let manifest = run.commit(out, force)?;
    for c in &manifest.checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &manifest.files {
        println!("wrote {} ({} bytes)", out.join(&f.name).display(), f.bytes);
    }
    println!("wrote {} (config {})", out.join(output::MANIFEST).display(), &manifest.config_hash[..16]);
    Ok(())
}

fn simulate(common: Common, model: ModelArgs, eps: Option<f64>, gamma: Option<f64>, particles: Option<usize>, steps: Option<u64>, initial: Option<String>) -> Result<()> {
    let defaults = SimulateParams {
        model: ModelChoice::default(),
        gamma: 0.05,
        particles: 1000,
        steps: 40,
        initial: InitialLaw::Uniform,
        seed: DEFAULT_SEED,
    };
    let mut p = load("simulate", defaults, common.config.as_deref())?;
    p.model.apply(&model, eps);
    p.gamma = gamma.unwrap_or(p.gamma);
    p.particles = particles.unwrap_or(p.particles);
    p.steps = steps.unwrap_or(p.steps);
    p.seed = common.seed.unwrap_or(p.seed);
    if let Some(s) = &initial {
        p.initial = parse_initial(s)?;
    }
    let params = p.model.params(p.gamma)?;
    let stream = RngStream::new(p.seed);
    let x0 = ParticleConfiguration::sample(&p.initial, p.particles, params.dim(), &stream)?;
    let mut trace = TraceObserver::new()
        .with("mean_cos", |c, _| {
            c.coords().iter().map(|v| (std::f64::consts::TAU * v).cos()).sum::<f64>() / c.coords().len() as f64
        })
        .with("deaths", |_, s| s.deaths as f64)
        .with("resurrections", |_, s| s.resurrections as f64);
    let summary = run_chain(x0, &params, p.steps, &stream, &mut [&mut trace])?;
    let mut records = Vec::new();
    trace.write_csv(&mut records)?;
    let mut snapshot = Vec::new();
    summary.last.write_csv(&mut snapshot)?;
    let mut run = Run::new("simulate", &p, p.seed)?;
    run.metrics.insert("total_deaths".into(), summary.total_deaths() as f64);
    run.metrics.insert("total_resurrections".into(), summary.total_resurrections() as f64);
    run.add_file(RECORDS, records);
    run.add_file("snapshot.csv", snapshot);
    finish(run, &out_dir(&common, "simulate"), common.force)
}

fn oracle(common: Common, model: ModelArgs, eps: Option<f64>, gamma: Option<f64>, steps: Option<u64>, cells: Option<usize>, initial: Option<String>) -> Result<()> {
    let defaults = OracleParams { model: ModelChoice::default(), gamma: 0.05, steps: 40, cells: DEFAULT_CELLS, initial: InitialLaw::Uniform };
    let mut p = load("oracle", defaults, common.config.as_deref())?;
    p.model.apply(&model, eps);
    p.gamma = gamma.unwrap_or(p.gamma);
    p.steps = steps.unwrap_or(p.steps);
    p.cells = cells.unwrap_or(p.cells);
    if let Some(s) = &initial {
        p.initial = parse_initial(s)?;
    }
    let kern = build_grid_kernel(&p.model.params(p.gamma)?, p.cells)?;
    let eta0 = GridDensity::from_initial_law(&p.initial, p.cells)?;
    let eta = nonlinear_flow(&eta0, &kern, p.steps as usize)?.pop().expect("nonempty flow");
    let mut records = Vec::new();
    eta.write_csv(&mut records)?;
    let mut run = Run::new("oracle", &p, 0)?;
    run.add_file(RECORDS, records);
    finish(run, &out_dir(&common, "oracle"), common.force)
}

fn qsd(common: Common, model: ModelArgs, eps: Option<f64>, gamma: Option<f64>, cells: Option<usize>, cache: Option<PathBuf>) -> Result<()> {
    let defaults = QsdParams { model: ModelChoice::default(), gamma: 0.05, cells: DEFAULT_CELLS, tol: DEFAULT_TOL, max_iter: 1_000_000 };
    let mut p = load("qsd", defaults, common.config.as_deref())?;
    p.model.apply(&model, eps);
    p.gamma = gamma.unwrap_or(p.gamma);
    p.cells = cells.unwrap_or(p.cells);
    let params = p.model.params(p.gamma)?;
    let kern = match &cache {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            GridKernel::load_or_build(&params, p.cells, dir)?
        }
        None => build_grid_kernel(&params, p.cells)?,
    };
    let sol = qsd_power_iteration(&kern, None, p.tol, p.max_iter)?;
    if !sol.converged {
        bail!("power iteration did not converge (residual {:e} after {} iterations)", sol.residual, sol.iterations);
    }
    let mut records = Vec::new();
    sol.density.write_csv(&mut records)?;
    let mut run = Run::new("qsd", &p, 0)?;
    run.metrics.insert("survival".into(), sol.survival);
    run.metrics.insert("iterations".into(), sol.iterations as f64);
    run.metrics.insert("residual".into(), sol.residual);
    run.add_file(RECORDS, records);
    finish(run, &out_dir(&common, "qsd"), common.force)
}

#[allow(clippy::too_many_arguments)]
fn kappa(common: Common, model: ModelArgs, eps: Option<Vec<f64>>, gamma: Option<f64>, particles: Option<Vec<usize>>, replicates: Option<usize>, steps: Option<u64>) -> Result<()> {
    let defaults = KappaParams {
        model: ModelChoice::default(),
        gamma: 0.05,
        particles: vec![100, 1000],
        eps: vec![0.0, 0.25, 0.5, 1.0],
        replicates: fvsim::coupling::DEFAULT_REPLICATES,
        steps: 20,
        mode: CouplingMode::Reflection,
        bootstrap: fvsim::coupling::DEFAULT_BOOTSTRAP,
        seed: DEFAULT_SEED,
    };
    let mut p = load("kappa", defaults, common.config.as_deref())?;
    p.model.apply(&model, None);
    p.gamma = gamma.unwrap_or(p.gamma);
    p.particles = particles.unwrap_or(p.particles);
    p.eps = eps.unwrap_or(p.eps);
    p.replicates = replicates.unwrap_or(p.replicates);
    p.steps = steps.unwrap_or(p.steps);
    p.seed = common.seed.unwrap_or(p.seed);
    let base = p.model.family()?;
    let mut template = KappaConfig::new(0, p.gamma, base.dim);
    template.replicates = p.replicates;
    template.horizon = p.steps;
    template.mode = p.mode;
    template.bootstrap = p.bootstrap;
    let rows = sweep_kappa(&base, p.gamma, &p.particles, &p.eps, &template, &RngStream::new(p.seed))?;
    let mut records = Vec::new();
    write_sweep_csv(&rows, &mut records)?;
    let mut run = Run::new("kappa", &p, p.seed)?;
    run.add_file(RECORDS, records);
    finish(run, &out_dir(&common, "kappa"), common.force)
}

#[allow(clippy::too_many_arguments)]
fn experiment(name: String, common: Common, paper: bool, model: Option<String>, gamma: Option<Vec<f64>>, particles: Option<Vec<usize>>, steps: Option<u64>, replicates: Option<usize>) -> Result<()> {
    let which = Experiment::parse(&name)?;
    let preset = if paper { Preset::Paper } else { Preset::Quick };
    let mut cfg = load("experiment", RunConfig::preset(which, preset), common.config.as_deref())?;
    if cfg.experiment != which {
        bail!("config is for experiment '{}', not '{which}'", cfg.experiment);
    }
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(g) = gamma {
        cfg.gammas = g;
    }
    if let Some(n) = particles {
        cfg.particles = n;
    }
    if let Some(s) = steps {
        cfg.times = vec![s as f64 * cfg.gammas[0]];
    }
    cfg.replicates = replicates.unwrap_or(cfg.replicates);
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out));
    let report = run_experiment(&cfg)?;
    let mut records = Vec::new();
    report.write_csv(&mut records)?;
    let mut run = Run::new("experiment", &cfg, cfg.seed)?;
    run.metrics = report.metrics;
    run.checks = report.checks;
    run.add_file(RECORDS, records);
    finish(run, &out, common.force)
}

fn validate(seed: u64) -> Result<bool> {
    let checks: Vec<Check> = fvsim::validate::run_suite(seed)?;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} properties hold", checks.len() - failed, checks.len());
    Ok(failed == 0)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, model, eps, gamma, particles, steps, initial } => {
            simulate(common, model, eps, gamma, particles, steps, initial)?
        }
        Command::Oracle { common, model, eps, gamma, steps, cells, initial } => {
            oracle(common, model, eps, gamma, steps, cells, initial)?
        }
        Command::Qsd { common, model, eps, gamma, cells, cache } => qsd(common, model, eps, gamma, cells, cache)?,
        Command::Kappa { common, model, eps, gamma, particles, replicates, steps } => {
            kappa(common, model, eps, gamma, particles, replicates, steps)?
        }
        Command::Experiment { name, common, quick: _, paper, model, gamma, particles, steps, replicates } => {
            experiment(name, common, paper, model, gamma, particles, steps, replicates)?
        }
        Command::Validate { seed } => return validate(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
