//! The grid flow against independent killed chains (the law of the killed
//! chain conditioned on survival is `eta_m`).

use fvsim::gridref::{build_grid_kernel, nonlinear_flow, simulate_killed_chains};
use fvsim::transport::w1_circle_points;
use fvsim::{CosineFamily, GridDensity, InitialLaw, ModelSpec, RngStream, StepParams};

fn check(law: InitialLaw, steps: usize, seed: u64) {
    let p = StepParams::new(ModelSpec::builtin(CosineFamily::demo()).unwrap(), 0.05).unwrap();
    let cells = 512;
    let kern = build_grid_kernel(&p, cells).unwrap();
    let eta0 = GridDensity::from_initial_law(&law, cells).unwrap();
    let eta = nonlinear_flow(&eta0, &kern, steps).unwrap().pop().unwrap().to_measure();
    let survivors = simulate_killed_chains(&p, &law, 400_000, steps as u64, &RngStream::new(seed)).unwrap();
    let w = w1_circle_points(&survivors, &eta).unwrap();
    // Monte Carlo scale: mean batch distance shrunk to the full sample size
    let batches = 10;
    let size = survivors.len() / batches;
    let batch_w: f64 = survivors
        .chunks_exact(size)
        .map(|c| w1_circle_points(c, &eta).unwrap())
        .sum::<f64>()
        / batches as f64;
    let mc = batch_w / (batches as f64).sqrt();
    let bound = 2.0 * (mc + 1.0 / cells as f64);
    assert!(w <= bound, "W1 {w} > {bound} ({} survivors)", survivors.len());
}

#[test]
fn killed_chains_match_flow_from_uniform() {
    check(InitialLaw::Uniform, 40, 1);
}

#[test]
fn killed_chains_match_flow_from_point() {
    check(InitialLaw::Dirac { at: vec![0.5] }, 10, 2);
}
