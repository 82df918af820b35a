//! Deterministic d=1 reference solutions on a uniform grid over `[0,1)`.
//!
//! The Euler kernel is discretized cell-center to cell (wrapped Gaussian masses),
//! the conditional laws `eta_n` follow the normalized sub-Markov recursion
//! `eta_{n+1} f = eta_n K[f (1-p)] / eta_n K[1-p]`, its fixed point is the
//! discrete-time QSD `nu_gamma`, and Richardson extrapolation in `sqrt(gamma)`
//! over a geometric ladder stands in for the continuous-time QSD.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use libm::erfc;

use crate::error::{Error, Result};
use crate::geometry::wrap_coord;
use crate::kernel::StepParams;
use crate::particles::{csv_err, InitialLaw};
use crate::rng::{domain, RngStream};
use crate::transport::{w1_circle, DiscreteMeasure};

pub const DEFAULT_CELLS: usize = 512;
pub const MIN_CELLS: usize = 64;
pub const DEFAULT_TOL: f64 = 1e-12;
/// Gaussian images are kept up to this many standard deviations from the mean.
pub const IMAGE_RADIUS_SIGMAS: f64 = 9.0;

/// Cell masses of a probability density on the uniform grid over `[0,1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDensity {
    weights: Vec<f64>,
}

impl GridDensity {
    pub fn uniform(n_cells: usize) -> Self {
        Self { weights: vec![1.0 / n_cells as f64; n_cells] }
    }

    /// Nonnegative weights; rescaled to total mass one.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty grid".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMeasure("grid weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidMeasure("grid density has zero mass".into()));
        }
        Ok(Self { weights: weights.into_iter().map(|w| w / total).collect() })
    }

    /// Grid version of an initial law: a Dirac mass goes to the cell containing it.
    pub fn from_initial_law(law: &InitialLaw, n_cells: usize) -> Result<Self> {
        match law {
            InitialLaw::Uniform => Ok(Self::uniform(n_cells)),
            InitialLaw::Dirac { at } => {
                if at.len() != 1 {
                    return Err(Error::Dimension("grid densities are one-dimensional".into()));
                }
                let mut w = vec![0.0; n_cells];
                let cell = ((wrap_coord(at[0]) * n_cells as f64) as usize).min(n_cells - 1);
                w[cell] = 1.0;
                Ok(Self { weights: w })
            }
        }
    }

    pub fn n_cells(&self) -> usize {
        self.weights.len()
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.n_cells() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n_cells() as f64
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Atoms at the cell centers.
    pub fn to_measure(&self) -> DiscreteMeasure {
        let n = self.n_cells();
        let centers = (0..n).map(|i| self.center(i)).collect();
        DiscreteMeasure::normalized(1, centers, self.weights.clone()).expect("valid grid density")
    }

    pub fn w1(&self, other: &GridDensity) -> Result<f64> {
        w1_circle(&self.to_measure(), &other.to_measure())
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| w * f(self.center(i))).sum()
    }

    /// `cell_center,weight` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell_center", "weight"]).map_err(csv_err)?;
        for (i, v) in self.weights.iter().enumerate() {
            w.write_record([format!("{:?}", self.center(i)), format!("{v:?}")]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Standard normal mass of `[a, b]`, evaluated on the tail side for accuracy.
fn gauss_mass(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (erfc(a * s) - erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (erfc(-b * s) - erfc(-a * s))
    } else {
        1.0 - 0.5 * (erfc(-a * s) + erfc(b * s))
    }
}

/// Masses of the `n` grid cells under `N(mean, sigma^2)` wrapped onto `[0,1)`,
/// summing the integer images that meet `[mean - 9 sigma, mean + 9 sigma]`
/// (and at least one image on each side of the central one).
pub fn wrapped_gaussian_cell_masses(mean: f64, sigma: f64, out: &mut [f64]) {
    let n = out.len();
    out.fill(0.0);
    let lo = ((mean - IMAGE_RADIUS_SIGMAS * sigma).floor() as i64).min(-1);
    let hi = ((mean + IMAGE_RADIUS_SIGMAS * sigma).floor() as i64).max(1);
    for k in lo..=hi {
        let shift = k as f64 - mean;
        let mut left = shift / sigma;
        for (j, o) in out.iter_mut().enumerate() {
            let right = ((j + 1) as f64 / n as f64 + shift) / sigma;
            *o += gauss_mass(left, right);
            left = right;
        }
    }
}

/// Row-stochastic discretization of the Euler kernel from cell centers.
#[derive(Debug, Clone)]
pub struct GridKernel {
    n: usize,
    gamma: f64,
    model_label: String,
    matrix: Vec<f64>,
    survival: Vec<f64>,
}

pub fn build_grid_kernel(params: &StepParams, n_cells: usize) -> Result<GridKernel> {
    if params.dim() != 1 {
        return Err(Error::Dimension(format!("grid reference needs d=1, got d={}", params.dim())));
    }
    if n_cells < MIN_CELLS {
        return Err(Error::InvalidParameter(format!("n_cells must be >= {MIN_CELLS}, got {n_cells}")));
    }
    let h = 1.0 / n_cells as f64;
    let sigma = params.sqrt_gamma();
    if sigma < 2.0 * h {
        return Err(Error::Undersampled { sigma, cell_width: h });
    }
    let mut matrix = vec![0.0; n_cells * n_cells];
    matrix.par_chunks_mut(n_cells).enumerate().for_each(|(i, row)| {
        let mut mean = [0.0];
        params.drift_mean(&[(i as f64 + 0.5) * h], &mut mean);
        wrapped_gaussian_cell_masses(mean[0], sigma, row);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    });
    let survival = (0..n_cells).map(|j| 1.0 - params.kill_prob_raw(&[(j as f64 + 0.5) * h])).collect();
    Ok(GridKernel { n: n_cells, gamma: params.gamma(), model_label: params.model().name().to_string(), matrix, survival })
}

impl GridKernel {
    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.n..(i + 1) * self.n]
    }

    /// `1 - p` at the cell centers.
    pub fn survival(&self) -> &[f64] {
        &self.survival
    }

    /// `eta K` (no killing).
    pub fn propagate(&self, eta: &GridDensity) -> Result<Vec<f64>> {
        self.check(eta)?;
        let mut out = vec![0.0; self.n];
        for (i, &w) in eta.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, k) in out.iter_mut().zip(self.row(i)) {
                *o += w * k;
            }
        }
        Ok(out)
    }

    fn check(&self, eta: &GridDensity) -> Result<()> {
        if eta.n_cells() != self.n {
            return Err(Error::Dimension(format!("density has {} cells, kernel {}", eta.n_cells(), self.n)));
        }
        Ok(())
    }

    /// Expected kill probability of a particle distributed as `eta` after one Euler move.
    pub fn arrival_kill_prob(&self, eta: &GridDensity) -> Result<f64> {
        let moved = self.propagate(eta)?;
        Ok(moved.iter().zip(&self.survival).map(|(m, s)| m * (1.0 - s)).sum())
    }

    /// Cache file name keyed by model, timestep and resolution.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model_label.as_bytes());
        let digest = h.finalize();
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("kernel-{hex}-g{:016x}-n{}.bin", self.gamma.to_bits(), self.n)
    }

    /// Writes the kernel as little-endian binary into `dir` and returns the path.
    pub fn write_cache(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.cache_key());
        let mut buf = Vec::with_capacity(16 + 8 * (self.matrix.len() + self.n) + self.model_label.len());
        buf.extend_from_slice(b"FVGK");
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&self.gamma.to_le_bytes());
        buf.extend_from_slice(&(self.model_label.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.model_label.as_bytes());
        for v in self.matrix.iter().chain(&self.survival) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, buf)?;
        Ok(path)
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, "malformed kernel cache"));
        let mut cur = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes.get(cur..cur + len).ok_or_else(bad)?;
            cur += len;
            Ok(s)
        };
        if take(4)? != b"FVGK" {
            return Err(bad());
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let n = u64_at(take(8)?) as usize;
        let gamma = f64::from_bits(u64_at(take(8)?));
        let label_len = u64_at(take(8)?) as usize;
        let model_label = String::from_utf8(take(label_len)?.to_vec()).map_err(|_| bad())?;
        let mut values = Vec::with_capacity(n * n + n);
        for _ in 0..n * n + n {
            values.push(f64::from_bits(u64_at(take(8)?)));
        }
        let survival = values.split_off(n * n);
        Ok(Self { n, gamma, model_label, matrix: values, survival })
    }

    /// Loads the cached kernel for these parameters from `dir`, building and caching it if absent.
    pub fn load_or_build(params: &StepParams, n_cells: usize, dir: &Path) -> Result<Self> {
        let fresh = build_grid_kernel(params, n_cells)?;
        let path = dir.join(fresh.cache_key());
        if path.exists() {
            return Self::read_cache(&path);
        }
        fresh.write_cache(dir)?;
        Ok(fresh)
    }
}

/// One step of the conditional-law recursion: move by `K`, weight by `1 - p`, renormalize.
/// Also returns the surviving mass before renormalization.
pub fn nonlinear_step_with_mass(eta: &GridDensity, kern: &GridKernel) -> Result<(GridDensity, f64)> {
    let mut v = kern.propagate(eta)?;
    v.iter_mut().zip(&kern.survival).for_each(|(a, s)| *a *= s);
    let mass: f64 = v.iter().sum();
    if mass < 1e-300 {
        return Err(Error::MassUnderflow(mass));
    }
    v.iter_mut().for_each(|a| *a /= mass);
    Ok((GridDensity { weights: v }, mass))
}

pub fn nonlinear_step(eta: &GridDensity, kern: &GridKernel) -> Result<GridDensity> {
    nonlinear_step_with_mass(eta, kern).map(|r| r.0)
}

/// `eta_0, eta_1, ..., eta_steps`.
pub fn nonlinear_flow(eta0: &GridDensity, kern: &GridKernel, steps: usize) -> Result<Vec<GridDensity>> {
    let mut flow = Vec::with_capacity(steps + 1);
    flow.push(eta0.clone());
    for _ in 0..steps {
        let next = nonlinear_step(flow.last().expect("nonempty"), kern)?;
        flow.push(next);
    }
    Ok(flow)
}

#[derive(Debug, Clone, Serialize)]
pub struct QsdSolution {
    pub density: GridDensity,
    /// Principal eigenvalue of `K (1-p)`: per-step survival probability under the QSD.
    pub survival: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 change of the last iteration.
    pub residual: f64,
}

/// Iterates the conditional-law recursion from `start` (uniform if `None`) until the
/// L1 change drops below `tol`.
pub fn qsd_power_iteration(kern: &GridKernel, start: Option<&GridDensity>, tol: f64, max_iter: usize) -> Result<QsdSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let mut eta = start.cloned().unwrap_or_else(|| GridDensity::uniform(kern.n));
    kern.check(&eta)?;
    let mut residual = f64::INFINITY;
    let mut survival = f64::NAN;
    for it in 1..=max_iter {
        let (next, mass) = nonlinear_step_with_mass(&eta, kern)?;
        residual = next.l1_distance(&eta);
        survival = mass;
        eta = next;
        if residual < tol {
            return Ok(QsdSolution { density: eta, survival, iterations: it, converged: true, residual });
        }
    }
    Ok(QsdSolution { density: eta, survival, iterations: max_iter, converged: false, residual })
}

#[derive(Debug, Clone, Serialize)]
pub struct Extrapolation {
    pub density: GridDensity,
    /// W1 distance between the last two extrapolation levels.
    pub error_bar: f64,
    /// Negative mass clipped from the extrapolated weights.
    pub clipped_mass: f64,
}

const LADDER_RTOL: f64 = 1e-9;

/// Richardson extrapolation to `gamma -> 0` in powers of `sqrt(gamma)` over a
/// geometric ladder of at least three timesteps.
pub fn extrapolate_qsd(ladder: &[(f64, GridDensity)]) -> Result<Extrapolation> {
    if ladder.len() < 3 {
        return Err(Error::InvalidParameter("extrapolation needs at least three timesteps".into()));
    }
    let mut rungs: Vec<&(f64, GridDensity)> = ladder.iter().collect();
    rungs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = rungs[0].1.n_cells();
    if rungs.iter().any(|r| r.1.n_cells() != n) {
        return Err(Error::Dimension("all densities must share one grid".into()));
    }
    let ratio = rungs[0].0 / rungs[1].0;
    if !(ratio > 1.0) {
        return Err(Error::InvalidParameter("timesteps must be distinct".into()));
    }
    for w in rungs.windows(2) {
        let r = w[0].0 / w[1].0;
        if (r / ratio - 1.0).abs() > LADDER_RTOL {
            return Err(Error::InvalidParameter(format!("timestep ladder is not geometric (ratios {ratio} and {r})")));
        }
    }
    let step = ratio.sqrt();
    let mut level: Vec<Vec<f64>> = rungs.iter().map(|r| r.1.weights.clone()).collect();
    let mut previous = level.clone();
    let mut order = 1;
    while level.len() > 1 {
        let f = step.powi(order);
        let next: Vec<Vec<f64>> = level
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(coarse, fine)| (f * fine - coarse) / (f - 1.0)).collect())
            .collect();
        previous = level;
        level = next;
        order += 1;
    }
    let (density, clipped_mass) = clip(&level[0])?;
    let (prior, _) = clip(previous.last().expect("nonempty level"))?;
    let error_bar = density.w1(&prior)?;
    Ok(Extrapolation { density, error_bar, clipped_mass })
}

fn clip(w: &[f64]) -> Result<(GridDensity, f64)> {
    let negative: f64 = w.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    Ok((GridDensity::from_weights(w.iter().map(|v| v.max(0.0)).collect())?, negative))
}

/// Positions at step `steps` of the independent killed chains (no rebirth) that
/// are still alive, started i.i.d. from `law`. Monte Carlo estimate of `eta_steps`.
pub fn simulate_killed_chains(params: &StepParams, law: &InitialLaw, chains: usize, steps: u64, stream: &RngStream) -> Result<Vec<f64>> {
    if params.dim() != 1 {
        return Err(Error::Dimension("killed-chain oracle is one-dimensional".into()));
    }
    let survivors: Vec<Option<f64>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.draws(domain::KILLED_CHAIN, 0, c as u64, 0);
            let mut x = match law {
                InitialLaw::Uniform => rng.random::<f64>(),
                InitialLaw::Dirac { at } => wrap_coord(at[0]),
            };
            let mut out = [0.0];
            for _ in 0..steps {
                let g: f64 = rng.sample(StandardNormal);
                params.euler_proposal(&[x], &[g], &mut out);
                x = wrap_coord(out[0]);
                if rng.random::<f64>() < params.kill_prob_raw(&[x]) {
                    return None;
                }
            }
            Some(x)
        })
        .collect();
    Ok(survivors.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CosineFamily, ModelSpec, DEMO_DRIFT};

    fn params(drift: f64, lambda0: f64, eps: f64, gamma: f64) -> StepParams {
        StepParams::new(ModelSpec::builtin(CosineFamily { dim: 1, drift, lambda0, eps }).unwrap(), gamma).unwrap()
    }

    #[test]
    fn gauss_mass_matches_complement() {
        assert!((gauss_mass(-1.0, 1.0) - 0.682_689_492_137_085_9).abs() < 1e-15);
        assert!((gauss_mass(1.0, f64::INFINITY) - 0.158_655_253_931_457_05).abs() < 1e-15);
        assert!((gauss_mass(-f64::INFINITY, -1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn driftless_kernel_is_circulant_and_stochastic() {
        let k = build_grid_kernel(&params(0.0, 0.0, 0.0, 0.05), 128).unwrap();
        for i in 0..128 {
            let row = k.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|v| *v >= 0.0));
            for j in 0..128 {
                assert!((row[j] - k.row(0)[(j + 128 - i) % 128]).abs() < 1e-14);
            }
        }
        let u = GridDensity::uniform(128);
        let next = nonlinear_step(&u, &k).unwrap();
        assert!(next.l1_distance(&u) < 1e-13);
    }

    #[test]
    fn kernel_guards() {
        assert!(build_grid_kernel(&params(0.0, 0.0, 0.0, 0.05), 32).is_err());
        // sigma = 0.1 needs cells no wider than 0.05
        assert!(matches!(
            build_grid_kernel(&params(0.0, 0.0, 0.0, 0.0001), 64),
            Err(Error::Undersampled { .. })
        ));
        let m2 = ModelSpec::builtin(CosineFamily { dim: 2, drift: 0.0, lambda0: 0.0, eps: 0.0 }).unwrap();
        assert!(build_grid_kernel(&StepParams::new(m2, 0.05).unwrap(), 128).is_err());
    }

    #[test]
    fn constant_killing_cancels() {
        let k0 = build_grid_kernel(&params(DEMO_DRIFT, 0.0, 0.0, 0.05), 256).unwrap();
        let k1 = build_grid_kernel(&params(DEMO_DRIFT, 2.0, 0.0, 0.05), 256).unwrap();
        let eta0 = GridDensity::from_initial_law(&InitialLaw::Dirac { at: vec![0.3] }, 256).unwrap();
        let a = nonlinear_flow(&eta0, &k0, 20).unwrap();
        let b = nonlinear_flow(&eta0, &k1, 20).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.l1_distance(y) <= 1e-12);
            assert!((y.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // with lambda = 0 the step is plain propagation
        let moved = k0.propagate(&a[3]).unwrap();
        let l1: f64 = moved.iter().zip(a[4].weights()).map(|(p, q)| (p - q).abs()).sum();
        assert!(l1 < 1e-13);
    }

    #[test]
    fn qsd_of_driftless_constant_killing_is_uniform() {
        let gamma = 0.05;
        let k = build_grid_kernel(&params(0.0, 2.0, 0.0, gamma), 512).unwrap();
        let q = qsd_power_iteration(&k, None, DEFAULT_TOL, 10_000).unwrap();
        assert!(q.converged);
        assert!(q.density.l1_distance(&GridDensity::uniform(512)) < 1e-10);
        assert!((q.survival - (-gamma * 2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn qsd_without_killing_is_stationary_law() {
        let k = build_grid_kernel(&params(DEMO_DRIFT, 0.0, 0.0, 0.05), 256).unwrap();
        let q = qsd_power_iteration(&k, None, 1e-12, 10_000).unwrap();
        assert!(q.converged);
        let moved = k.propagate(&q.density).unwrap();
        let res: f64 = moved.iter().zip(q.density.weights()).map(|(a, b)| (a - b).abs()).sum();
        assert!(res < 1e-11, "{res}");
        assert!((q.survival - 1.0).abs() < 1e-14);
    }

    #[test]
    fn qsd_is_independent_of_start() {
        let k = build_grid_kernel(&params(DEMO_DRIFT, 2.0, 0.25, 0.05), 256).unwrap();
        let tol = 1e-12;
        let a = qsd_power_iteration(&k, None, tol, 10_000).unwrap();
        let start = GridDensity::from_initial_law(&InitialLaw::Dirac { at: vec![0.5] }, 256).unwrap();
        let b = qsd_power_iteration(&k, Some(&start), tol, 10_000).unwrap();
        assert!(a.converged && b.converged);
        assert!(a.density.l1_distance(&b.density) < 2.0 * tol);
        assert!(a.survival > 0.0 && a.survival <= 1.0);
    }

    #[test]
    fn non_convergence_flagged() {
        let k = build_grid_kernel(&params(DEMO_DRIFT, 2.0, 0.25, 0.05), 128).unwrap();
        let q = qsd_power_iteration(&k, None, 1e-14, 2).unwrap();
        assert!(!q.converged);
        assert_eq!(q.iterations, 2);
        assert!(qsd_power_iteration(&k, None, 0.0, 2).is_err());
    }

    #[test]
    fn extrapolation_basics() {
        let d = GridDensity::from_weights((0..128).map(|i| 1.0 + (i as f64 / 20.0).sin().abs()).collect()).unwrap();
        let same = [(0.16, d.clone()), (0.08, d.clone()), (0.04, d.clone())];
        let e = extrapolate_qsd(&same).unwrap();
        assert!(e.density.l1_distance(&d) < 1e-12);
        assert!(e.error_bar < 1e-12);
        assert!(extrapolate_qsd(&same[..2]).is_err());
        let bent = [(0.16, d.clone()), (0.08, d.clone()), (0.03, d.clone())];
        assert!(extrapolate_qsd(&bent).is_err());
        let u = GridDensity::uniform(128);
        let mixed = [(0.16, d.clone()), (0.08, u), (0.04, d)];
        assert!(extrapolate_qsd(&mixed).is_ok());
    }

    #[test]
    fn extrapolation_of_uniform_ladder_is_uniform() {
        let ladder: Vec<(f64, GridDensity)> = [0.16, 0.08, 0.04, 0.02]
            .iter()
            .map(|&g| {
                let k = build_grid_kernel(&params(0.0, 2.0, 0.0, g), 256).unwrap();
                (g, qsd_power_iteration(&k, None, 1e-12, 10_000).unwrap().density)
            })
            .collect();
        let e = extrapolate_qsd(&ladder).unwrap();
        assert!(e.density.l1_distance(&GridDensity::uniform(256)) < 1e-9);
    }

    #[test]
    fn cache_round_trip() {
        let p = params(DEMO_DRIFT, 2.0, 0.25, 0.05);
        let dir = std::env::temp_dir().join(format!("fvsim-cache-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let k = GridKernel::load_or_build(&p, 64, &dir).unwrap();
        let again = GridKernel::load_or_build(&p, 64, &dir).unwrap();
        assert_eq!(k.matrix, again.matrix);
        assert_eq!(k.survival, again.survival);
        assert_eq!(k.gamma.to_bits(), again.gamma.to_bits());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn density_csv() {
        let d = GridDensity::uniform(64);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cell_center,weight\n0.0078125,0.015625\n"));
        assert_eq!(text.lines().count(), 65);
    }
}
