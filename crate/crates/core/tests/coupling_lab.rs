//! Statistical properties of the contraction-rate estimates.

use fvsim::coupling::{coupled_distances, estimate_kappa, sweep_kappa, trend_statistic, KappaConfig};
use fvsim::{CosineFamily, CouplingMode, ModelSpec, RngStream, StepParams};

const GAMMA: f64 = 0.05;

fn params(name: &str) -> StepParams {
    StepParams::new(ModelSpec::builtin(CosineFamily::preset(name).unwrap()).unwrap(), GAMMA).unwrap()
}

#[test]
fn synchronous_coupling_without_killing_does_not_expand() {
    let mut cfg = KappaConfig::new(100, GAMMA, 1);
    cfg.mode = CouplingMode::Synchronous;
    let paths = coupled_distances(&params("zero-kill"), &cfg, &RngStream::new(12)).unwrap();
    let points: Vec<(f64, f64)> = (0..paths[0].len())
        .map(|k| (k as f64 * GAMMA, paths.iter().map(|p| p[k]).sum::<f64>() / paths.len() as f64))
        .collect();
    let (slope, z) = trend_statistic(&points);
    assert!(z < 1.645, "increasing trend: slope {slope}, z {z}");
}

#[test]
fn kappa_is_invariant_under_swapping_starts() {
    let p = params("demo");
    let cfg = KappaConfig::new(100, GAMMA, 1);
    let a = estimate_kappa(&p, &cfg, &RngStream::new(13)).unwrap();
    let b = estimate_kappa(&p, &cfg.swapped(), &RngStream::new(14)).unwrap();
    assert!(a.overlaps(&b), "{} +- {} vs {} +- {}", a.rate, a.ci_half_width, b.rate, b.ci_half_width);
}

#[test]
fn constant_killing_matches_pure_diffusion() {
    let cfg = KappaConfig::new(100, GAMMA, 1);
    let a = estimate_kappa(&params("constant-kill"), &cfg, &RngStream::new(15)).unwrap();
    let b = estimate_kappa(&params("zero-kill"), &cfg, &RngStream::new(16)).unwrap();
    assert!(a.overlaps(&b), "{} +- {} vs {} +- {}", a.rate, a.ci_half_width, b.rate, b.ci_half_width);
}

#[test]
fn kappa_does_not_grow_with_killing_variation() {
    let cfg = KappaConfig::new(100, GAMMA, 1);
    let rows = sweep_kappa(&CosineFamily::demo(), GAMMA, &[100], &[0.0, 0.25, 0.5, 1.0], &cfg, &RngStream::new(17)).unwrap();
    for w in rows.windows(2) {
        assert!(
            w[1].kappa <= w[0].kappa + w[0].ci_half_width + w[1].ci_half_width,
            "eps {} -> {}: {} -> {}",
            w[0].eps,
            w[1].eps,
            w[0].kappa,
            w[1].kappa
        );
    }
    assert!(rows.iter().all(|r| r.kappa > 0.0 && r.r_squared > 0.9));
}
