//! The rebirth kernel and the grid kernel against independent formulas built
//! directly from wrapped Gaussian cell masses.

use fvsim::gridref::{build_grid_kernel, wrapped_gaussian_cell_masses};
use fvsim::kernel::{euler_step, sample_q};
use fvsim::rng::domain;
use fvsim::{CosineFamily, DiscreteMeasure, ModelSpec, RngStream, StepParams, TorusPoint};
use rand::Rng;
use rayon::prelude::*;

const FINE: usize = 4096;
const BINS: usize = 64;

fn params(lambda0: f64, eps: f64, gamma: f64) -> StepParams {
    let family = CosineFamily { lambda0, eps, ..CosineFamily::demo() };
    StepParams::new(ModelSpec::builtin(family).unwrap(), gamma).unwrap()
}

/// Fine-cell masses of `K(y, .) * weight(.)`.
fn moved_mass(p: &StepParams, y: f64, weight: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut b = [0.0];
    p.model().drift(&[y], &mut b);
    let mut m = vec![0.0; FINE];
    wrapped_gaussian_cell_masses(y + p.gamma() * b[0], p.sqrt_gamma(), &mut m);
    m.iter_mut().enumerate().for_each(|(j, v)| *v *= weight((j as f64 + 0.5) / FINE as f64));
    m
}

fn coarse(fine: &[f64]) -> Vec<f64> {
    let total: f64 = fine.iter().sum();
    fine.chunks(FINE / BINS).map(|c| c.iter().sum::<f64>() / total).collect()
}

fn histogram(xs: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    xs.iter().for_each(|&x| h[((x * BINS as f64) as usize).min(BINS - 1)] += 1.0);
    h.iter_mut().for_each(|v| *v /= xs.len() as f64);
    h
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// `Q_mu(x, f) = K(x, f(1-p)) + K(x, p) mu K(f(1-p)) / mu K(1-p)`.
fn q_mu_bins(p: &StepParams, x: f64, mu: &[(f64, f64)]) -> Vec<f64> {
    let surv = |z: f64| 1.0 - p.kill_prob_raw(&[z]);
    let direct = moved_mass(p, x, surv);
    let k_p: f64 = moved_mass(p, x, |z| 1.0 - surv(z)).iter().sum();
    let mut reborn = vec![0.0; FINE];
    for &(a, w) in mu {
        moved_mass(p, a, surv).iter().zip(reborn.iter_mut()).for_each(|(m, r)| *r += w * m);
    }
    let mu_surv: f64 = reborn.iter().sum();
    let total: Vec<f64> = direct.iter().zip(&reborn).map(|(d, r)| d + k_p * r / mu_surv).collect();
    coarse(&total)
}

#[test]
fn rebirth_kernel_matches_closed_form() {
    let p = params(2.0, 2.0, 0.1);
    let atoms = [(0.05, 0.2), (0.3, 0.5), (0.55, 0.1), (0.8, 0.2)];
    let mu = DiscreteMeasure::new(1, atoms.iter().map(|a| a.0).collect(), atoms.iter().map(|a| a.1).collect()).unwrap();
    let x = TorusPoint::wrap(&[0.5]).unwrap();
    let stream = RngStream::new(77);
    let samples: Vec<f64> = (0..1_000_000u64)
        .into_par_iter()
        .map(|i| sample_q(&x, &mu, &p, &stream, 0, i).unwrap().0.coords()[0])
        .collect();
    let d = tv(&histogram(&samples), &q_mu_bins(&p, 0.5, &atoms));
    assert!(d <= 0.01, "TV {d}");
}

#[test]
fn mu_q_mu_is_conditioned_move() {
    // x ~ mu: mu Q_mu = mu K[f (1-p)] / mu K[1-p]
    let p = params(1.0, 1.0, 0.2);
    let atoms = [(0.1, 0.25), (0.4, 0.25), (0.7, 0.5)];
    let mu = DiscreteMeasure::new(1, atoms.iter().map(|a| a.0).collect(), atoms.iter().map(|a| a.1).collect()).unwrap();
    let stream = RngStream::new(5);
    let samples: Vec<f64> = (0..1_000_000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.draws(domain::SAMPLING, 0, i, 0);
            let u: f64 = rng.random();
            let a = if u < 0.25 { 0.1 } else if u < 0.5 { 0.4 } else { 0.7 };
            sample_q(&TorusPoint::wrap(&[a]).unwrap(), &mu, &p, &stream, 0, i).unwrap().0.coords()[0]
        })
        .collect();
    let mut expected = vec![0.0; FINE];
    for &(a, w) in &atoms {
        moved_mass(&p, a, |z| 1.0 - p.kill_prob_raw(&[z])).iter().zip(expected.iter_mut()).for_each(|(m, e)| *e += w * m);
    }
    let d = tv(&histogram(&samples), &coarse(&expected));
    assert!(d <= 0.01, "TV {d}");
}

#[test]
fn grid_kernel_row_matches_euler_histogram() {
    let p = params(2.0, 0.25, 0.05);
    let cells = 512;
    let kern = build_grid_kernel(&p, cells).unwrap();
    let i = 100;
    let x = TorusPoint::wrap(&[(i as f64 + 0.5) / cells as f64]).unwrap();
    let stream = RngStream::new(11);
    let samples: Vec<f64> = (0..1_000_000u64)
        .into_par_iter()
        .map(|k| euler_step(&x, &p, &mut stream.draws(domain::SAMPLING, 0, k, 0)).coords()[0])
        .collect();
    let row: Vec<f64> = kern.row(i).chunks(cells / BINS).map(|c| c.iter().sum()).collect();
    let d = tv(&histogram(&samples), &row);
    assert!(d <= 0.01, "TV {d}");
}
