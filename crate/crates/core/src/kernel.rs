//! Single-particle building blocks: the Euler kernel `K`, the arrival kill
//! probability `p(z) = 1 - exp(-gamma lambda(z))`, and the rebirth kernel `Q_mu`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{wrap_coord, TorusPoint, MAX_DIM};
use crate::model::ModelSpec;
use crate::rng::{domain, RngStream};

pub const DEFAULT_GAMMA_MAX: f64 = 0.25;

/// Hard cap on attempts inside one rebirth loop.
pub const REBIRTH_LOOP_CAP: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct StepParams {
    gamma: f64,
    sqrt_gamma: f64,
    model: ModelSpec,
}

impl StepParams {
    pub fn new(model: ModelSpec, gamma: f64) -> Result<Self> {
        Self::with_gamma_max(model, gamma, DEFAULT_GAMMA_MAX)
    }

    pub fn with_gamma_max(model: ModelSpec, gamma: f64, gamma_max: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0 && gamma <= gamma_max) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0, {gamma_max}], got {gamma}")));
        }
        Ok(Self { gamma, sqrt_gamma: gamma.sqrt(), model })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sqrt_gamma(&self) -> f64 {
        self.sqrt_gamma
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Upper bound on the kill probability over the torus.
    pub fn max_kill_prob(&self) -> f64 {
        -(-self.gamma * self.model.bounds().sup_lambda).exp_m1()
    }

    /// Whether a particle survives one step with probability at least one half everywhere.
    pub fn survival_is_comfortable(&self) -> bool {
        self.max_kill_prob() <= 0.5
    }

    /// Unwrapped Euler mean `x + gamma b(x)`.
    #[inline]
    pub fn drift_mean(&self, x: &[f64], out: &mut [f64]) {
        self.model.drift(x, out);
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = xi + self.gamma * *o;
        }
    }

    /// Unwrapped Euler proposal `x + gamma b(x) + sqrt(gamma) g` for a given increment `g`.
    #[inline]
    pub fn euler_proposal(&self, x: &[f64], g: &[f64], out: &mut [f64]) {
        self.drift_mean(x, out);
        for (o, &gi) in out.iter_mut().zip(g) {
            *o += self.sqrt_gamma * gi;
        }
    }

    /// `p(z) = 1 - exp(-gamma lambda(z))`.
    #[inline]
    pub fn kill_prob_raw(&self, z: &[f64]) -> f64 {
        -(-self.gamma * self.model.kill_rate(z)).exp_m1()
    }

    pub fn kill_prob(&self, z: &TorusPoint) -> f64 {
        self.kill_prob_raw(z.coords())
    }
}

/// One Euler step from `x`, drawing a fresh standard Gaussian increment from `rng`.
pub fn euler_step<R: Rng + ?Sized>(x: &TorusPoint, p: &StepParams, rng: &mut R) -> TorusPoint {
    let d = x.dim();
    let mut g = [0.0; MAX_DIM];
    for gi in &mut g[..d] {
        *gi = rng.sample(StandardNormal);
    }
    let mut out = vec![0.0; d];
    p.euler_proposal(x.coords(), &g[..d], &mut out);
    out.iter_mut().for_each(|v| *v = wrap_coord(*v));
    TorusPoint::from_wrapped(out)
}

/// A measure from which resurrected particles are drawn.
pub trait RebirthSource: Sync {
    fn dim(&self) -> usize;
    fn atom(&self, index: usize) -> &[f64];
    fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize;
}

/// Result of one draw from `Q_mu(x, .)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rebirth {
    /// Number of deaths before the first survival.
    pub resurrections: u64,
    /// The uniform that accepted the returned point.
    pub accept_uniform: f64,
}

/// Draws from `Q_mu(x, .)` into `out` (wrapped).
///
/// Attempt `k` reads its randomness from the key `(step, slot, k)`: attempt 0 draws the
/// Gaussian then the kill uniform; later attempts first draw a rebirth atom from
/// `source`, then the Gaussian and the uniform. The loop stops at the first
/// attempt whose uniform is at least the kill probability of the arrival point.
pub fn sample_q_into<S: RebirthSource + ?Sized>(
    x: &[f64],
    source: &S,
    p: &StepParams,
    stream: &RngStream,
    step: u64,
    slot: u64,
    out: &mut [f64],
) -> Result<Rebirth> {
    let d = x.len();
    let mut g = [0.0; MAX_DIM];
    for attempt in 0..REBIRTH_LOOP_CAP {
        let mut rng = stream.draws(domain::DYNAMICS, step, slot, attempt);
        let start = if attempt == 0 { x } else { source.atom(source.draw_index(&mut rng)) };
        for gi in &mut g[..d] {
            *gi = rng.sample(StandardNormal);
        }
        p.euler_proposal(start, &g[..d], out);
        out.iter_mut().for_each(|v| *v = wrap_coord(*v));
        let u: f64 = rng.random();
        if u >= p.kill_prob_raw(out) {
            return Ok(Rebirth { resurrections: attempt, accept_uniform: u });
        }
    }
    Err(Error::RebirthLoopCap { cap: REBIRTH_LOOP_CAP, step, slot })
}

/// Draws one point from `Q_mu(x, .)` and reports how many resurrections it took.
pub fn sample_q<S: RebirthSource + ?Sized>(
    x: &TorusPoint,
    mu: &S,
    p: &StepParams,
    stream: &RngStream,
    step: u64,
    slot: u64,
) -> Result<(TorusPoint, Rebirth)> {
    if x.dim() != p.dim() || mu.dim() != p.dim() {
        return Err(Error::Dimension("point, rebirth measure and model must share a dimension".into()));
    }
    let mut out = vec![0.0; x.dim()];
    let r = sample_q_into(x.coords(), mu, p, stream, step, slot, &mut out)?;
    Ok((TorusPoint::from_wrapped(out), r))
}
