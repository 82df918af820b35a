//! Problem instances: drift `b`, killing rate `lambda`, and their declared bounds.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{torus_dist_raw, wrap_coord, MAX_DIM};
use crate::rng::{domain, RngStream};

/// Drift and killing rate of a killed diffusion on the torus. Implementations
/// must be period-1 in every coordinate and pure.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn kill_rate(&self, x: &[f64]) -> f64;
}

/// Declared global bounds. Sampled checks can refute them but never certify them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub sup_lambda: f64,
    pub lip_lambda: f64,
    pub sup_drift: f64,
    pub lip_drift: f64,
}

#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    bounds: ModelBounds,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl ModelSpec {
    /// Wraps user-supplied dynamics together with the bounds it claims.
    pub fn new(name: impl Into<String>, dynamics: Arc<dyn Dynamics>, bounds: ModelBounds) -> Result<Self> {
        let d = dynamics.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::Dimension(format!("model dimension {d} unsupported")));
        }
        let b = bounds;
        for (label, v) in [
            ("sup_lambda", b.sup_lambda),
            ("lip_lambda", b.lip_lambda),
            ("sup_drift", b.sup_drift),
            ("lip_drift", b.lip_drift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{label} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(Self { name: name.into(), dynamics, bounds })
    }

    pub fn builtin(family: CosineFamily) -> Result<Self> {
        family.validate()?;
        Self::new(family.label(), Arc::new(family), family.bounds())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn bounds(&self) -> ModelBounds {
        self.bounds
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.dynamics.drift(x, out)
    }

    #[inline]
    pub fn kill_rate(&self, x: &[f64]) -> f64 {
        self.dynamics.kill_rate(x)
    }

    /// Spot-checks the declared bounds on random points and pairs.
    pub fn sample_bounds(&self, pairs: usize, seed: u64) -> SampledBounds {
        let d = self.dim();
        let stream = RngStream::new(seed);
        let mut rng = stream.draws(domain::SAMPLING, 0, 0, 0);
        let mut out = SampledBounds::default();
        let (mut x, mut y) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        let (mut bx, mut by) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        out.min_lambda = f64::INFINITY;
        for k in 0..pairs {
            // half the pairs are close together so slopes approach the local derivative
            let spread = if k % 2 == 0 { 1.0 } else { 1e-3 };
            for i in 0..d {
                x[i] = rng.random::<f64>();
                y[i] = wrap_coord(x[i] + spread * (rng.random::<f64>() - 0.5));
            }
            let (x, y) = (&x[..d], &y[..d]);
            let (lx, ly) = (self.kill_rate(x), self.kill_rate(y));
            self.drift(x, &mut bx[..d]);
            self.drift(y, &mut by[..d]);
            out.max_lambda = out.max_lambda.max(lx).max(ly);
            out.min_lambda = out.min_lambda.min(lx).min(ly);
            let nb = bx[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            out.max_drift = out.max_drift.max(nb);
            let r = torus_dist_raw(x, y);
            if r > 0.0 {
                out.max_lambda_slope = out.max_lambda_slope.max((lx - ly).abs() / r);
                let db = bx[..d].iter().zip(&by[..d]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                out.max_drift_slope = out.max_drift_slope.max(db / r);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SampledBounds {
    pub min_lambda: f64,
    pub max_lambda: f64,
    pub max_lambda_slope: f64,
    pub max_drift: f64,
    pub max_drift_slope: f64,
}

impl SampledBounds {
    /// True when no sample contradicts the declared bounds.
    pub fn consistent_with(&self, b: &ModelBounds) -> bool {
        let slack = 1e-9;
        self.min_lambda >= -slack
            && self.max_lambda <= b.sup_lambda + slack
            && self.max_lambda_slope <= b.lip_lambda + slack
            && self.max_drift <= b.sup_drift + slack
            && self.max_drift_slope <= b.lip_drift + slack
    }
}

/// Built-in analytic family on `T^d`:
/// `b_k(x) = -drift * sin(2 pi x_k)` and
/// `lambda(x) = lambda0 + (eps / d) * sum_k cos(2 pi x_k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineFamily {
    pub dim: usize,
    pub drift: f64,
    pub lambda0: f64,
    pub eps: f64,
}

/// Drift amplitude of the demonstration model, `2 pi * 0.3`.
pub const DEMO_DRIFT: f64 = TAU * 0.3;

impl CosineFamily {
    /// The default demonstration model: d=1, `b = -2 pi 0.3 sin(2 pi x)`, `lambda = 2 + 0.25 cos(2 pi x)`.
    pub fn demo() -> Self {
        Self { dim: 1, drift: DEMO_DRIFT, lambda0: 2.0, eps: 0.25 }
    }

    /// Named presets accepted by run configurations.
    pub fn preset(name: &str) -> Result<Self> {
        let demo = Self::demo();
        Ok(match name {
            "demo" => demo,
            "zero-kill" => Self { lambda0: 0.0, eps: 0.0, ..demo },
            "constant-kill" => Self { eps: 0.0, ..demo },
            "drift-free" => Self { drift: 0.0, eps: 0.0, ..demo },
            "stress" => Self { lambda0: 100.0, eps: 0.0, ..demo },
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::Dimension(format!("model dimension {} unsupported", self.dim)));
        }
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda0 must be >= 0, got {}", self.lambda0)));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.eps > self.lambda0 {
            return Err(Error::InvalidParameter(format!(
                "eps ({}) > lambda0 ({}) makes the killing rate negative",
                self.eps, self.lambda0
            )));
        }
        if !self.drift.is_finite() {
            return Err(Error::NonFinite("drift amplitude".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> ModelBounds {
        let d = self.dim as f64;
        ModelBounds {
            sup_lambda: self.lambda0 + self.eps,
            lip_lambda: TAU * self.eps / d.sqrt(),
            sup_drift: self.drift.abs() * d.sqrt(),
            lip_drift: TAU * self.drift.abs(),
        }
    }

    fn label(&self) -> String {
        format!("cosine(d={},drift={},lambda0={},eps={})", self.dim, self.drift, self.lambda0, self.eps)
    }
}

impl Dynamics for CosineFamily {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = -self.drift * (TAU * v).sin();
        }
    }

    #[inline]
    fn kill_rate(&self, x: &[f64]) -> f64 {
        if self.eps == 0.0 {
            return self.lambda0;
        }
        let s: f64 = x.iter().map(|&v| (2.0 * PI * v).cos()).sum();
        self.lambda0 + self.eps * s / self.dim as f64
    }
}

/// What the declared bounds say about the perturbative contraction condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContractionStatus {
    /// `lambda == 0`: the particles are independent diffusions.
    PureDiffusion,
    /// `lambda` constant: the perturbation term vanishes.
    ConstantKilling,
    /// The sign of `kappa` depends on unknown constants and can only be estimated.
    EmpiricalOnly,
}

impl fmt::Display for ContractionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PureDiffusion => "contraction expected (pure diffusion)",
            Self::ConstantKilling => "contraction expected (constant killing, no perturbation)",
            Self::EmpiricalOnly => "empirical-only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub gamma: f64,
    /// `L_lambda * exp(gamma * sup lambda)`, the factor multiplying the unknown `c2`.
    pub term: f64,
    pub status: ContractionStatus,
}

pub fn perturbation_report(model: &ModelSpec, gamma: f64) -> Result<PerturbationReport> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let b = model.bounds();
    let term = b.lip_lambda * (gamma * b.sup_lambda).exp();
    let status = if b.sup_lambda == 0.0 {
        ContractionStatus::PureDiffusion
    } else if b.lip_lambda == 0.0 {
        ContractionStatus::ConstantKilling
    } else {
        ContractionStatus::EmpiricalOnly
    };
    Ok(PerturbationReport { gamma, term, status })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(lambda0: f64, eps: f64) -> CosineFamily {
        CosineFamily { dim: 1, drift: DEMO_DRIFT, lambda0, eps }
    }

    #[test]
    fn builtin_bounds() {
        let zero = ModelSpec::builtin(CosineFamily::preset("zero-kill").unwrap()).unwrap();
        assert_eq!(zero.bounds().sup_lambda, 0.0);
        assert_eq!(zero.bounds().lip_lambda, 0.0);
        let cst = ModelSpec::builtin(fam(2.0, 0.0)).unwrap();
        assert_eq!(cst.bounds().lip_lambda, 0.0);
        let demo = ModelSpec::builtin(fam(2.0, 0.25)).unwrap();
        assert!((demo.bounds().lip_lambda - 1.570_796_326_794_896_6).abs() < 1e-12);
        assert!((demo.bounds().sup_lambda - 2.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ModelSpec::builtin(fam(-1.0, 0.0)).is_err());
        assert!(ModelSpec::builtin(fam(1.0, -0.1)).is_err());
        assert!(ModelSpec::builtin(fam(0.1, 0.2)).is_err());
        assert!(CosineFamily::preset("nope").is_err());
        assert!(ModelSpec::builtin(CosineFamily { dim: 0, ..fam(1.0, 0.0) }).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let zero = ModelSpec::builtin(fam(0.0, 0.0)).unwrap();
        let r = perturbation_report(&zero, 0.05).unwrap();
        assert_eq!(r.term, 0.0);
        assert_eq!(r.status, ContractionStatus::PureDiffusion);
        assert_eq!(r.status.to_string(), "contraction expected (pure diffusion)");

        let demo = ModelSpec::builtin(fam(2.0, 0.25)).unwrap();
        let r = perturbation_report(&demo, 0.05).unwrap();
        // 2 pi 0.25 exp(0.1125), evaluated in extended precision
        assert!((r.term - 1.757_834_590_576_670_5).abs() < 1e-12, "{}", r.term);
        assert_eq!(r.status, ContractionStatus::EmpiricalOnly);

        for lambda0 in [0.5, 2.0, 50.0] {
            let cst = ModelSpec::builtin(fam(lambda0, 0.0)).unwrap();
            let r = perturbation_report(&cst, 0.1).unwrap();
            assert_eq!(r.term, 0.0);
            assert_eq!(r.status, ContractionStatus::ConstantKilling);
        }
        assert!(perturbation_report(&demo, 0.0).is_err());
    }

    #[test]
    fn sampled_bounds_never_exceed_declared() {
        for d in 1..=3 {
            for (lambda0, eps) in [(0.0, 0.0), (2.0, 0.0), (2.0, 0.25), (1.0, 1.0)] {
                let model = ModelSpec::builtin(CosineFamily { dim: d, drift: DEMO_DRIFT, lambda0, eps }).unwrap();
                let s = model.sample_bounds(100_000, 11);
                assert!(s.consistent_with(&model.bounds()), "d={d} {s:?} vs {:?}", model.bounds());
                // the close pairs make the slope estimate nearly sharp in d=1
                if d == 1 && eps > 0.0 {
                    assert!(s.max_lambda_slope > 0.99 * model.bounds().lip_lambda);
                }
            }
        }
    }
}
