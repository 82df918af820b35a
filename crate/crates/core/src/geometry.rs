//! Flat unit torus `[0,1)^d`: wrapping, minimal-image distance and the
//! concave metric `rho(x, y) = (1 - exp(-a |x - y|)) / a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported torus dimension. Hot loops keep per-point scratch on the stack.
pub const MAX_DIM: usize = 8;

/// Reduces one coordinate into `[0, 1)`.
#[inline]
pub fn wrap_coord(v: f64) -> f64 {
    let r = v - v.floor();
    // `v - floor(v)` rounds up to exactly 1.0 for tiny negative inputs.
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed minimal-image difference `a - b` in `[-1/2, 1/2)`.
#[inline]
pub fn min_image(a: f64, b: f64) -> f64 {
    let d = a - b;
    d - (d + 0.5).floor()
}

/// Minimal-image Euclidean distance between two coordinate slices of equal length.
#[inline]
pub fn torus_dist_raw(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    if x.len() == 1 {
        return min_image(x[0], y[0]).abs();
    }
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = min_image(a, b);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// A point of the flat torus, every coordinate in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    /// Wraps raw coordinates onto the torus.
    pub fn wrap(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() || raw.len() > MAX_DIM {
            return Err(Error::Dimension(format!(
                "torus dimension must lie in 1..={MAX_DIM}, got {}",
                raw.len()
            )));
        }
        if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate {bad}")));
        }
        Ok(Self(raw.iter().map(|&v| wrap_coord(v)).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn from_wrapped(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|v| (0.0..1.0).contains(v)));
        Self(coords)
    }
}

/// Euclidean length of the coordinatewise minimal-image difference.
pub fn torus_dist(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    check_dims(x.dim(), y.dim())?;
    Ok(torus_dist_raw(x.coords(), y.coords()))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// The concave reshaping of the torus distance under which the Euler kernel contracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoMetric {
    a: f64,
    beta: f64,
}

impl RhoMetric {
    pub fn new(a: f64, dim: usize) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidParameter(format!("rho parameter a must be positive, got {a}")));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Dimension(format!("unsupported dimension {dim}")));
        }
        let s = a * (dim as f64).sqrt();
        let beta = 2.0 * (-(-s / 2.0).exp_m1()) / s;
        Ok(Self { a, beta })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Equivalence constant: `beta * |x - y| <= rho(x, y) <= |x - y|`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `rho` as a function of the torus distance.
    #[inline]
    pub fn of_dist(&self, r: f64) -> f64 {
        -(-self.a * r).exp_m1() / self.a
    }

    #[inline]
    pub fn rho_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        self.of_dist(torus_dist_raw(x, y))
    }

    pub fn rho(&self, x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
        Ok(self.of_dist(torus_dist(x, y)?))
    }

    /// Sum of per-slot `rho` distances between two configurations of equal size.
    pub fn rho_n(&self, x: &crate::ParticleConfiguration, y: &crate::ParticleConfiguration) -> Result<f64> {
        check_dims(x.dim(), y.dim())?;
        if x.len() != y.len() {
            return Err(Error::Dimension(format!(
                "particle count mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        Ok(x.points().zip(y.points()).map(|(p, q)| self.rho_raw(p, q)).sum())
    }
}

impl Default for RhoMetric {
    fn default() -> Self {
        Self::new(1.0, 1).expect("default rho metric")
    }
}
