//! Empirical contraction rate of the particle kernel from coupled systems.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RhoMetric;
use crate::kernel::StepParams;
use crate::model::{CosineFamily, ModelSpec};
use crate::particles::{coupled_step, csv_err, CoupledPair, CouplingMode, InitialLaw, ParticleConfiguration};
use crate::rng::{domain, RngStream};
use crate::stats::{fit_line, quantile_sorted, Summary};

pub const DEFAULT_REPLICATES: usize = 200;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Fraction of the horizon discarded before fitting.
pub const BURN_IN_FRACTION: f64 = 0.1;
/// The window closes once the mean falls below this many standard errors.
pub const NOISE_FLOOR_SE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaConfig {
    pub particles: usize,
    pub replicates: usize,
    /// Number of coupled steps.
    pub horizon: u64,
    pub mode: CouplingMode,
    pub start_x: InitialLaw,
    pub start_y: InitialLaw,
    /// Parameter `a` of the rho metric.
    pub metric_a: f64,
    pub bootstrap: usize,
}

impl KappaConfig {
    /// Defaults: all particles at 0 against i.i.d. uniform, reflection coupling,
    /// horizon of one time unit.
    pub fn new(particles: usize, gamma: f64, dim: usize) -> Self {
        Self {
            particles,
            replicates: DEFAULT_REPLICATES,
            horizon: (1.0 / gamma).ceil() as u64,
            mode: CouplingMode::Reflection,
            start_x: InitialLaw::Dirac { at: vec![0.0; dim] },
            start_y: InitialLaw::Uniform,
            metric_a: 1.0,
            bootstrap: DEFAULT_BOOTSTRAP,
        }
    }

    pub fn swapped(&self) -> Self {
        Self { start_x: self.start_y.clone(), start_y: self.start_x.clone(), ..self.clone() }
    }
}

/// Mean over replicates of `rho_N / N` at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub time: f64,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `(t, value)` over the whole horizon.
    pub points: Vec<(f64, f64)>,
    pub curve: Vec<CurvePoint>,
    /// Fitted decay rate per unit time.
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Half-width of the 95% bootstrap interval of `rate`.
    pub ci_half_width: f64,
    /// Steps `[start, end)` used by the fit.
    pub window: (u64, u64),
    pub replicates: usize,
    pub seed: u64,
}

impl RateFit {
    pub fn ci(&self) -> (f64, f64) {
        (self.rate - self.ci_half_width, self.rate + self.ci_half_width)
    }

    pub fn overlaps(&self, other: &RateFit) -> bool {
        let (a, b) = (self.ci(), other.ci());
        a.0 <= b.1 && b.0 <= a.1
    }
}

/// Per-replicate trajectories of `rho_N / N`, indexed `[replicate][step]`.
pub fn coupled_distances(params: &StepParams, cfg: &KappaConfig, stream: &RngStream) -> Result<Vec<Vec<f64>>> {
    if cfg.particles == 0 || cfg.replicates == 0 {
        return Err(Error::InvalidParameter("need at least one particle and one replicate".into()));
    }
    let metric = RhoMetric::new(cfg.metric_a, params.dim())?;
    let n = cfg.particles as f64;
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let rs = stream.replicate(r);
            let x = ParticleConfiguration::sample(&cfg.start_x, cfg.particles, params.dim(), &rs.replicate(0))?;
            let y = ParticleConfiguration::sample(&cfg.start_y, cfg.particles, params.dim(), &rs.replicate(1))?;
            let mut pair = CoupledPair::new(x, y, cfg.mode)?;
            let mut out = Vec::with_capacity(cfg.horizon as usize + 1);
            out.push(metric.rho_n(&pair.x, &pair.y)? / n);
            for _ in 0..cfg.horizon {
                pair = coupled_step(&pair, params, &rs)?.0;
                out.push(metric.rho_n(&pair.x, &pair.y)? / n);
            }
            Ok(out)
        })
        .collect()
}

fn mean_curve(paths: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let len = paths[0].len();
    let mut m = vec![0.0; len];
    for &i in idx {
        for (a, b) in m.iter_mut().zip(&paths[i]) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= idx.len() as f64);
    m
}

fn fit_window(curve: &[f64], gamma: f64, window: (u64, u64)) -> (f64, f64, f64) {
    let (t, y): (Vec<f64>, Vec<f64>) = (window.0..window.1)
        .map(|k| (k as f64 * gamma, curve[k as usize].ln()))
        .unzip();
    let f = fit_line(&t, &y);
    (-f.slope, f.intercept, f.r_squared)
}

/// Fits the geometric decay rate of `E[rho_N]/N` from coupled replicates.
pub fn estimate_kappa(params: &StepParams, cfg: &KappaConfig, stream: &RngStream) -> Result<RateFit> {
    let paths = coupled_distances(params, cfg, stream)?;
    fit_paths(&paths, params.gamma(), cfg.bootstrap, stream)
}

/// The fit part of `estimate_kappa`, for externally produced trajectories.
pub fn fit_paths(paths: &[Vec<f64>], gamma: f64, bootstrap: usize, stream: &RngStream) -> Result<RateFit> {
    let steps = paths.first().map(Vec::len).unwrap_or(0);
    if steps < 2 {
        return Err(Error::FitRefused("no trajectory to fit".into()));
    }
    let curve: Vec<CurvePoint> = (0..steps)
        .map(|k| {
            let col: Vec<f64> = paths.iter().map(|p| p[k]).collect();
            let s = Summary::of(&col);
            CurvePoint { step: k as u64, time: k as f64 * gamma, mean: s.mean, std_err: s.std_err }
        })
        .collect();
    if curve[0].mean <= 0.0 {
        return Err(Error::FitRefused("initial configurations already coincide".into()));
    }
    let horizon = (steps - 1) as u64;
    let start = (BURN_IN_FRACTION * horizon as f64).round() as u64;
    let mut end = start;
    while end <= horizon {
        let c = &curve[end as usize];
        if c.mean <= 0.0 || c.mean <= NOISE_FLOOR_SE * c.std_err {
            break;
        }
        end += 1;
    }
    if end < start + 3 {
        return Err(Error::FitRefused(format!(
            "fit window [{start}, {end}) has fewer than 3 points; shorten the horizon or add replicates"
        )));
    }
    let window = (start, end);
    let means: Vec<f64> = curve.iter().map(|c| c.mean).collect();
    let (rate, intercept, r_squared) = fit_window(&means, gamma, window);

    let r = paths.len();
    let mut boot: Vec<f64> = (0..bootstrap as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream.draws(domain::BOOTSTRAP, 0, b, 0);
            let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..r)).collect();
            let m = mean_curve(paths, &idx);
            if m[start as usize..end as usize].iter().any(|&v| v <= 0.0) {
                return f64::NAN;
            }
            fit_window(&m, gamma, window).0
        })
        .collect();
    boot.retain(|v| v.is_finite());
    boot.sort_by(f64::total_cmp);
    let ci_half_width = if boot.len() >= 2 {
        0.5 * (quantile_sorted(&boot, 0.975) - quantile_sorted(&boot, 0.025))
    } else {
        f64::NAN
    };
    Ok(RateFit {
        points: curve.iter().map(|c| (c.time, c.mean)).collect(),
        curve,
        rate,
        intercept,
        r_squared,
        ci_half_width,
        window,
        replicates: r,
        seed: stream.seed(),
    })
}

/// One row of a `sweep_kappa` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub particles: usize,
    pub eps: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub ci_half_width: f64,
    pub r_squared: f64,
    pub window_start: u64,
    pub window_end: u64,
    pub replicates: usize,
    pub seed: u64,
}

/// `kappa` over a grid of particle numbers and killing variations. Every cell
/// uses the same seed (common random numbers), so neighbouring cells differ
/// only through the model and `N`.
pub fn sweep_kappa(
    base: &CosineFamily,
    gamma: f64,
    particles: &[usize],
    eps: &[f64],
    template: &KappaConfig,
    stream: &RngStream,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(particles.len() * eps.len());
    for &n in particles {
        for &e in eps {
            let family = CosineFamily { eps: e, ..*base };
            let params = StepParams::new(ModelSpec::builtin(family)?, gamma)?;
            let cfg = KappaConfig { particles: n, ..template.clone() };
            let fit = estimate_kappa(&params, &cfg, stream)?;
            rows.push(SweepRow {
                particles: n,
                eps: e,
                gamma,
                kappa: fit.rate,
                ci_half_width: fit.ci_half_width,
                r_squared: fit.r_squared,
                window_start: fit.window.0,
                window_end: fit.window.1,
                replicates: fit.replicates,
                seed: fit.seed,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One-sided test of "the curve does not increase": the least-squares slope of
/// value against time, divided by its standard error. Returns `(slope, z)`.
pub fn trend_statistic(points: &[(f64, f64)]) -> (f64, f64) {
    let (t, y): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let f = fit_line(&t, &y);
    (f.slope, f.slope / f.slope_se)
}
