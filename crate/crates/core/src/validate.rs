//! Fast property suite: exactness of the transport routines, degenerate
//! reductions of the particle system and the grid oracle, and determinism.

use rand::Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::experiments::Check;
use crate::geometry::{torus_dist_raw, RhoMetric, TorusPoint};
use crate::gridref::{build_grid_kernel, nonlinear_flow, qsd_power_iteration, GridDensity, DEFAULT_TOL};
use crate::kernel::{euler_step, StepParams};
use crate::model::{CosineFamily, ModelSpec, DEMO_DRIFT};
use crate::particles::{particle_step, run_chain, InitialLaw, ParticleConfiguration};
use crate::rng::{domain, RngStream};
use crate::stats::ks_two_sample;
use crate::transport::{lp_oracle, w1_circle, DiscreteMeasure};

fn params(drift: f64, lambda0: f64, eps: f64, gamma: f64) -> Result<StepParams> {
    StepParams::new(ModelSpec::builtin(CosineFamily { dim: 1, drift, lambda0, eps })?, gamma)
}

fn random_measure<R: Rng>(rng: &mut R, max_atoms: usize) -> Result<DiscreteMeasure> {
    let n = rng.random_range(1..=max_atoms);
    let coords: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    DiscreteMeasure::normalized(1, coords, weights)
}

/// Largest gap between the circular W1 formula and the LP oracle over random
/// pairs of measures with at most `max_atoms` atoms each.
pub fn transport_gap(pairs: usize, max_atoms: usize, seed: u64) -> Result<f64> {
    let stream = RngStream::new(seed);
    let gaps: Vec<f64> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.draws(domain::SAMPLING, 0, i, 0);
            let mu = random_measure(&mut rng, max_atoms)?;
            let nu = random_measure(&mut rng, max_atoms)?;
            Ok((w1_circle(&mu, &nu)? - lp_oracle(&mu, &nu)?).abs())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

pub fn check_transport_exactness(pairs: usize, max_atoms: usize, seed: u64) -> Result<Check> {
    let gap = transport_gap(pairs, max_atoms, seed)?;
    Ok(Check {
        name: "w1_circle_equals_lp".into(),
        passed: gap <= 1e-9,
        detail: format!("max |w1_circle - lp| over {pairs} pairs of <= {max_atoms} atoms: {gap:.2e}"),
    })
}

/// Metric axioms for the torus distance, `rho` and the circular W1, on random samples.
pub fn check_metric_axioms(samples: usize, seed: u64) -> Result<Check> {
    let stream = RngStream::new(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for i in 0..samples as u64 {
        let mut rng = stream.draws(domain::SAMPLING, 1, i, 0);
        let d = rng.random_range(1..=3usize);
        let pts: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random()).collect()).collect();
        let rho = RhoMetric::new([0.5, 1.0, 2.0][i as usize % 3], d)?;
        let rho_fn = |a: &[f64], b: &[f64]| rho.rho_raw(a, b);
        let dists: [&dyn Fn(&[f64], &[f64]) -> f64; 2] = [&torus_dist_raw, &rho_fn];
        for f in dists {
            let (x, y, z) = (&pts[0], &pts[1], &pts[2]);
            let sym = (f(x, y) - f(y, x)).abs();
            let tri = f(x, z) - f(x, y) - f(y, z);
            worst = worst.max(sym).max(tri).max(f(x, x));
            failures += usize::from(sym > 1e-15 || tri > 1e-12 || f(x, x) != 0.0 || f(x, y) < 0.0);
        }
        let ms: Vec<DiscreteMeasure> = (0..3).map(|_| random_measure(&mut rng, 12)).collect::<Result<_>>()?;
        let w = |a: usize, b: usize| w1_circle(&ms[a], &ms[b]);
        let tri = w(0, 2)? - w(0, 1)? - w(1, 2)?;
        let sym = (w(0, 1)? - w(1, 0)?).abs();
        let id = w(0, 0)?;
        worst = worst.max(tri).max(sym).max(id);
        failures += usize::from(tri > 1e-12 || sym > 1e-12 || id > 1e-12);
    }
    Ok(Check {
        name: "metric_axioms".into(),
        passed: failures == 0,
        detail: format!("{failures} violations over {samples} triples (largest defect {worst:.2e})"),
    })
}

/// Without killing, one step of the particle system is `K` applied to every slot
/// independently: each marginal is compared with direct Euler draws by KS.
pub fn zero_kill_ks_pvalues(samples: usize, seed: u64) -> Result<Vec<f64>> {
    let p = params(DEMO_DRIFT, 0.0, 0.0, 0.05)?;
    let start = ParticleConfiguration::from_coords(1, vec![0.1, 0.35, 0.6, 0.85])?;
    let stream = RngStream::new(seed);
    let steps: Vec<ParticleConfiguration> = (0..samples as u64)
        .into_par_iter()
        .map(|r| particle_step(&start, &p, &stream.replicate(r)).map(|s| s.0))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (slot, x) in start.points().enumerate() {
        let x = TorusPoint::wrap(x)?;
        let mut a: Vec<f64> = steps.iter().map(|c| c.point(slot)[0]).collect();
        let mut b: Vec<f64> = (0..samples as u64)
            .map(|r| {
                let mut rng = stream.draws(domain::SAMPLING, 2, slot as u64, r);
                euler_step(&x, &p, &mut rng).coords()[0]
            })
            .collect();
        out.push(ks_two_sample(&mut a, &mut b).p_value);
    }
    Ok(out)
}

pub fn check_zero_kill_ks(samples: usize, seed: u64) -> Result<Check> {
    let pv = zero_kill_ks_pvalues(samples, seed)?;
    Ok(Check {
        name: "zero_kill_marginals_are_euler".into(),
        passed: pv.iter().all(|v| *v > 0.01),
        detail: format!("per-marginal KS p-values {pv:?} (level 0.01)"),
    })
}

/// L1 gap between the grid flows with constant killing and without killing.
pub fn constant_kill_flow_gap(cells: usize, steps: usize) -> Result<f64> {
    let killed = build_grid_kernel(&params(DEMO_DRIFT, 2.0, 0.0, 0.05)?, cells)?;
    let free = build_grid_kernel(&params(DEMO_DRIFT, 0.0, 0.0, 0.05)?, cells)?;
    let eta0 = GridDensity::from_initial_law(&InitialLaw::Dirac { at: vec![0.3] }, cells)?;
    let a = nonlinear_flow(&eta0, &killed, steps)?;
    let b = nonlinear_flow(&eta0, &free, steps)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x.l1_distance(y)).fold(0.0, f64::max))
}

pub fn check_constant_kill_flow(cells: usize) -> Result<Check> {
    let gap = constant_kill_flow_gap(cells, 40)?;
    Ok(Check {
        name: "constant_kill_flow_is_free_flow".into(),
        passed: gap <= 1e-12,
        detail: format!("max L1 gap over 40 steps: {gap:.2e}"),
    })
}

/// L1 distance of the drift-free, constant-killing QSD from the uniform law.
pub fn driftless_qsd_gap(cells: usize) -> Result<f64> {
    let kern = build_grid_kernel(&params(0.0, 2.0, 0.0, 0.05)?, cells)?;
    let start = GridDensity::from_initial_law(&InitialLaw::Dirac { at: vec![0.3] }, cells)?;
    let sol = qsd_power_iteration(&kern, Some(&start), DEFAULT_TOL, 1_000_000)?;
    Ok(sol.density.l1_distance(&GridDensity::uniform(cells)))
}

pub fn check_driftless_qsd(cells: usize) -> Result<Check> {
    let gap = driftless_qsd_gap(cells)?;
    Ok(Check {
        name: "driftless_constant_kill_qsd_is_uniform".into(),
        passed: gap <= 1e-10,
        detail: format!("L1 distance to uniform {gap:.2e}"),
    })
}

/// Runs the same chain on pools of 1 and `threads` workers.
pub fn worker_count_outputs(threads: usize, seed: u64) -> Result<(Vec<u8>, Vec<u8>)> {
    let p = StepParams::new(ModelSpec::builtin(CosineFamily::demo())?, 0.05)?;
    let run = |k: usize| -> Result<Vec<u8>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(k).build().expect("thread pool");
        pool.install(|| {
            let stream = RngStream::new(seed);
            let x0 = ParticleConfiguration::sample(&InitialLaw::Uniform, 500, 1, &stream)?;
            let out = run_chain(x0, &p, 20, &stream, &mut [])?;
            let mut buf = Vec::new();
            out.last.write_csv(&mut buf)?;
            Ok(buf)
        })
    };
    Ok((run(1)?, run(threads)?))
}

pub fn check_worker_determinism(seed: u64) -> Result<Check> {
    let (a, b) = worker_count_outputs(4, seed)?;
    Ok(Check {
        name: "worker_count_determinism".into(),
        passed: a == b,
        detail: format!("snapshot CSV with 1 vs 4 workers: {} vs {} bytes, identical: {}", a.len(), b.len(), a == b),
    })
}

pub fn check_model_bounds(seed: u64) -> Result<Check> {
    let mut bad = Vec::new();
    for name in ["demo", "zero-kill", "constant-kill", "drift-free", "stress"] {
        for dim in [1, 2, 3] {
            let family = CosineFamily { dim, ..CosineFamily::preset(name)? };
            let model = ModelSpec::builtin(family)?;
            if !model.sample_bounds(2000, seed).consistent_with(&model.bounds()) {
                bad.push(format!("{name}/d{dim}"));
            }
        }
    }
    Ok(Check {
        name: "model_bounds_dominate_samples".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() { "all presets in d=1,2,3".into() } else { format!("violations: {bad:?}") },
    })
}

/// The whole suite at its default sizes.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_transport_exactness(200, 40, seed)?,
        check_metric_axioms(500, seed)?,
        check_zero_kill_ks(2000, seed)?,
        check_constant_kill_flow(256)?,
        check_driftless_qsd(256)?,
        check_worker_determinism(seed)?,
        check_model_bounds(seed)?,
    ])
}
