//! The interacting particle kernel `R_{N,gamma}`: every slot draws independently
//! from `Q_{pi(x)}(x_i, .)`, where `pi(x)` is the frozen empirical measure of the
//! configuration before the step.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_image, wrap_coord, TorusPoint, MAX_DIM};
use crate::kernel::{sample_q_into, RebirthSource, StepParams, REBIRTH_LOOP_CAP};
use crate::rng::{domain, RngStream};
use crate::transport::DiscreteMeasure;

/// `N` points of `T^d` plus the number of steps already taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfiguration {
    dim: usize,
    coords: Vec<f64>,
    step: u64,
}

impl ParticleConfiguration {
    /// Builds a configuration from flat coordinates, wrapping them onto the torus.
    pub fn from_coords(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Dimension(format!("unsupported dimension {dim}")));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} coordinates do not form points of dimension {dim}", coords.len())));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("particle coordinate".into()));
        }
        Ok(Self { dim, coords: coords.into_iter().map(wrap_coord).collect(), step: 0 })
    }

    pub fn from_points(points: &[TorusPoint]) -> Result<Self> {
        let dim = points.first().map(TorusPoint::dim).unwrap_or(0);
        if points.iter().any(|p| p.dim() != dim) {
            return Err(Error::Dimension("points of mixed dimension".into()));
        }
        Self::from_coords(dim, points.iter().flat_map(|p| p.coords().iter().copied()).collect())
    }

    /// `n` i.i.d. draws from `law`.
    pub fn sample(law: &InitialLaw, n: usize, dim: usize, stream: &RngStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one particle".into()));
        }
        let mut coords = vec![0.0; n * dim];
        for (slot, c) in coords.chunks_exact_mut(dim).enumerate() {
            let mut rng = stream.draws(domain::INITIAL, 0, slot as u64, 0);
            law.draw(&mut rng, c)?;
        }
        Self::from_coords(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    /// `pi(x) = (1/N) sum delta_{x_i}`.
    pub fn empirical_measure(&self) -> DiscreteMeasure {
        DiscreteMeasure::uniform_atoms(self.dim, self.coords.clone()).expect("valid configuration")
    }

    /// Writes one row per particle with its coordinates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        w.write_record(&header).map_err(csv_err)?;
        for p in self.points() {
            w.write_record(p.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

impl RebirthSource for ParticleConfiguration {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn atom(&self, index: usize) -> &[f64] {
        self.point(index)
    }

    /// The resurrection index is uniform on all slots, the dying slot included.
    #[inline]
    fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.len())
    }
}

/// Law of the initial particle positions (i.i.d. across slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialLaw {
    Uniform,
    Dirac { at: Vec<f64> },
}

impl InitialLaw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> Result<()> {
        match self {
            InitialLaw::Uniform => out.iter_mut().for_each(|v| *v = rng.random()),
            InitialLaw::Dirac { at } => {
                if at.len() != out.len() {
                    return Err(Error::Dimension(format!("Dirac location has dimension {}", at.len())));
                }
                out.iter_mut().zip(at).for_each(|(o, a)| *o = wrap_coord(*a));
            }
        }
        Ok(())
    }
}

/// Per-step bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    /// Slots that died at least once during the step.
    pub deaths: u64,
    /// Total resurrections over all slots.
    pub resurrections: u64,
}

/// One transition of `R_{N,gamma}`. Slots are processed in parallel; the result
/// does not depend on the number of workers.
pub fn particle_step(cfg: &ParticleConfiguration, p: &StepParams, stream: &RngStream) -> Result<(ParticleConfiguration, StepStats)> {
    if cfg.dim != p.dim() {
        return Err(Error::Dimension(format!("configuration d={} vs model d={}", cfg.dim, p.dim())));
    }
    let d = cfg.dim;
    let mut next = vec![0.0; cfg.coords.len()];
    let counts: Vec<u64> = next
        .par_chunks_mut(d)
        .enumerate()
        .map(|(slot, out)| {
            sample_q_into(cfg.point(slot), cfg, p, stream, cfg.step, slot as u64, out).map(|r| r.resurrections)
        })
        .collect::<Result<_>>()?;
    let stats = StepStats {
        deaths: counts.iter().filter(|&&c| c > 0).count() as u64,
        resurrections: counts.iter().sum(),
    };
    Ok((ParticleConfiguration { dim: d, coords: next, step: cfg.step + 1 }, stats))
}

/// Receives every configuration of a trajectory, the initial one included
/// (with zero statistics).
pub trait Observer {
    fn observe(&mut self, cfg: &ParticleConfiguration, stats: &StepStats, params: &StepParams);
}

#[derive(Debug, Clone)]
pub struct ChainSummary {
    pub last: ParticleConfiguration,
    pub per_step: Vec<StepStats>,
}

impl ChainSummary {
    pub fn total_resurrections(&self) -> u64 {
        self.per_step.iter().map(|s| s.resurrections).sum()
    }

    pub fn total_deaths(&self) -> u64 {
        self.per_step.iter().map(|s| s.deaths).sum()
    }
}

/// Applies `particle_step` `steps` times.
pub fn run_chain(
    initial: ParticleConfiguration,
    p: &StepParams,
    steps: u64,
    stream: &RngStream,
    observers: &mut [&mut dyn Observer],
) -> Result<ChainSummary> {
    let mut cfg = initial;
    let zero = StepStats::default();
    observers.iter_mut().for_each(|o| o.observe(&cfg, &zero, p));
    let mut per_step = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let (next, stats) = particle_step(&cfg, p, stream)?;
        cfg = next;
        observers.iter_mut().for_each(|o| o.observe(&cfg, &stats, p));
        per_step.push(stats);
    }
    Ok(ChainSummary { last: cfg, per_step })
}

type Observable = Box<dyn Fn(&ParticleConfiguration, &StepStats) -> f64 + Send>;

/// Records named scalar observables as `(step, time, observable, value)` rows.
#[derive(Default)]
pub struct TraceObserver {
    observables: Vec<(String, Observable)>,
    rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub observable: String,
    pub value: f64,
}

impl TraceObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, f: impl Fn(&ParticleConfiguration, &StepStats) -> f64 + Send + 'static) -> Self {
        self.observables.push((name.to_string(), Box::new(f)));
        self
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl Observer for TraceObserver {
    fn observe(&mut self, cfg: &ParticleConfiguration, stats: &StepStats, params: &StepParams) {
        let time = cfg.step as f64 * params.gamma();
        for (name, f) in &self.observables {
            self.rows.push(TraceRow { step: cfg.step, time, observable: name.clone(), value: f(cfg, stats) });
        }
    }
}

/// How the Gaussian increments of two coupled systems are tied together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    /// Both systems use the same increment.
    Synchronous,
    /// Maximal reflection coupling: the second system lands exactly on the first
    /// with the largest possible probability, and otherwise uses the increment
    /// reflected across the hyperplane orthogonal to the mean displacement.
    Reflection,
}

/// Two particle systems of equal size evolved with shared randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub x: ParticleConfiguration,
    pub y: ParticleConfiguration,
    pub mode: CouplingMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CoupledStats {
    pub x: StepStats,
    pub y: StepStats,
    /// Slots whose two particles coincide after the step.
    pub matched: u64,
}

impl CoupledPair {
    pub fn new(x: ParticleConfiguration, y: ParticleConfiguration, mode: CouplingMode) -> Result<Self> {
        if x.dim != y.dim || x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "coupled systems differ in shape: {}x{} vs {}x{}",
                x.len(),
                x.dim,
                y.len(),
                y.dim
            )));
        }
        Ok(Self { x, y, mode })
    }
}

const COINCIDENCE_TOL: f64 = 1e-12;

/// Advances both systems by one step of `R_{N,gamma}`.
///
/// For every slot and attempt index `k` the two systems share the key
/// `(step, slot, k)`: the same resurrection index, Gaussian and kill uniform.
/// The first system consumes exactly the draws an uncoupled `particle_step`
/// would, so its marginal trajectory is the uncoupled one.
pub fn coupled_step(pair: &CoupledPair, p: &StepParams, stream: &RngStream) -> Result<(CoupledPair, CoupledStats)> {
    let (x, y) = (&pair.x, &pair.y);
    if x.dim != p.dim() {
        return Err(Error::Dimension(format!("configuration d={} vs model d={}", x.dim, p.dim())));
    }
    let d = x.dim;
    let step = x.step;
    let mut nx = vec![0.0; x.coords.len()];
    let mut ny = vec![0.0; y.coords.len()];
    let slots: Vec<(u64, u64)> = nx
        .par_chunks_mut(d)
        .zip(ny.par_chunks_mut(d))
        .enumerate()
        .map(|(slot, (ox, oy))| coupled_slot(pair, p, stream, step, slot, ox, oy))
        .collect::<Result<_>>()?;
    let mut stats = CoupledStats::default();
    for &(hx, hy) in &slots {
        stats.x.deaths += u64::from(hx > 0);
        stats.x.resurrections += hx;
        stats.y.deaths += u64::from(hy > 0);
        stats.y.resurrections += hy;
    }
    stats.matched = nx.chunks_exact(d).zip(ny.chunks_exact(d)).filter(|(a, b)| a == b).count() as u64;
    let next = CoupledPair {
        x: ParticleConfiguration { dim: d, coords: nx, step: step + 1 },
        y: ParticleConfiguration { dim: d, coords: ny, step: y.step + 1 },
        mode: pair.mode,
    };
    Ok((next, stats))
}

fn coupled_slot(
    pair: &CoupledPair,
    p: &StepParams,
    stream: &RngStream,
    step: u64,
    slot: usize,
    out_x: &mut [f64],
    out_y: &mut [f64],
) -> Result<(u64, u64)> {
    let (x, y) = (&pair.x, &pair.y);
    let d = x.dim;
    let sg = p.sqrt_gamma();
    let (mut mx, mut my) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
    let (mut g, mut gy, mut z) = ([0.0; MAX_DIM], [0.0; MAX_DIM], [0.0; MAX_DIM]);
    let (mut cand_x, mut cand_y) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
    let mut hx: Option<u64> = None;
    let mut hy: Option<u64> = None;
    for attempt in 0..REBIRTH_LOOP_CAP {
        let mut rng = stream.draws(domain::DYNAMICS, step, slot as u64, attempt);
        let (sx, sy) = if attempt == 0 {
            (x.point(slot), y.point(slot))
        } else {
            let j = x.draw_index(&mut rng);
            (x.point(j), y.point(j))
        };
        for gi in &mut g[..d] {
            *gi = rng.sample(StandardNormal);
        }
        let u: f64 = rng.random();
        p.drift_mean(sx, &mut mx[..d]);
        p.drift_mean(sy, &mut my[..d]);
        for k in 0..d {
            cand_x[k] = wrap_coord(mx[k] + sg * g[k]);
        }
        let mut coincide = false;
        match pair.mode {
            CouplingMode::Synchronous => gy[..d].copy_from_slice(&g[..d]),
            CouplingMode::Reflection => {
                let mut norm2 = 0.0;
                for k in 0..d {
                    z[k] = min_image(mx[k], my[k]);
                    norm2 += z[k] * z[k];
                }
                if norm2.sqrt() < COINCIDENCE_TOL {
                    gy[..d].copy_from_slice(&g[..d]);
                } else {
                    let uc: f64 = rng.random();
                    // scaled displacement z / sqrt(gamma)
                    let (mut gg, mut gz, mut ez) = (0.0, 0.0, 0.0);
                    for k in 0..d {
                        z[k] /= sg;
                        gg += g[k] * g[k];
                        let s = g[k] + z[k];
                        gz += s * s;
                        ez += z[k] * g[k];
                    }
                    if uc.ln() <= 0.5 * (gg - gz) {
                        coincide = true;
                    } else {
                        let zz: f64 = z[..d].iter().map(|v| v * v).sum();
                        for k in 0..d {
                            gy[k] = g[k] - 2.0 * ez / zz * z[k];
                        }
                    }
                }
            }
        }
        if coincide {
            cand_y[..d].copy_from_slice(&cand_x[..d]);
        } else {
            for k in 0..d {
                cand_y[k] = wrap_coord(my[k] + sg * gy[k]);
            }
        }
        if hx.is_none() && u >= p.kill_prob_raw(&cand_x[..d]) {
            out_x.copy_from_slice(&cand_x[..d]);
            hx = Some(attempt);
        }
        if hy.is_none() && u >= p.kill_prob_raw(&cand_y[..d]) {
            out_y.copy_from_slice(&cand_y[..d]);
            hy = Some(attempt);
        }
        if let (Some(a), Some(b)) = (hx, hy) {
            return Ok((a, b));
        }
    }
    Err(Error::RebirthLoopCap { cap: REBIRTH_LOOP_CAP, step, slot: slot as u64 })
}
