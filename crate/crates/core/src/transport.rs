//! Wasserstein distances between discrete measures on the torus.
//!
//! Two independent routes are provided: the closed-form circular `W1` (a CDF
//! reduction, `O(n log n)`) and an exact min-cost-flow solve of the transport
//! linear program for small supports with any ground cost.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{torus_dist_raw, wrap_coord, RhoMetric, MAX_DIM};
use crate::kernel::RebirthSource;

const NORMALIZATION_TOL: f64 = 1e-12;

/// Largest combined atom count accepted by the exact solver.
pub const LP_ATOM_LIMIT: usize = 200;

/// Weighted atoms on `T^d`, weights positive and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl DiscreteMeasure {
    /// Atoms with weights that already sum to one.
    pub fn new(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, expected 1")));
        }
        Self::build(dim, coords, weights)
    }

    /// Atoms with arbitrary nonnegative weights, rescaled to mass one. Zero-weight atoms are dropped.
    pub fn normalized(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() != dim * weights.len() {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidMeasure("total mass is zero".into()));
        }
        let mut kept_coords = Vec::with_capacity(coords.len());
        let mut kept = Vec::with_capacity(weights.len());
        for (w, c) in weights.iter().zip(coords.chunks_exact(dim)) {
            if *w > 0.0 {
                kept.push(w / total);
                kept_coords.extend_from_slice(c);
            }
        }
        Self::build(dim, kept_coords, kept)
    }

    /// Empirical measure: equal weights on the given points.
    pub fn uniform_atoms(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.is_empty() || coords.len() % dim != 0 {
            return Err(Error::Dimension(format!("{} coordinates do not form points of dimension {dim}", coords.len())));
        }
        let n = coords.len() / dim;
        Self::build(dim, coords, vec![1.0 / n as f64; n])
    }

    fn build(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Dimension(format!("unsupported dimension {dim}")));
        }
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("a measure needs at least one atom".into()));
        }
        if coords.len() != dim * weights.len() {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                coords.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidMeasure("atom weights must be positive".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("atom coordinate".into()));
        }
        let coords: Vec<f64> = coords.into_iter().map(wrap_coord).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { dim, coords, weights, cumulative })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.coords.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// Integral of `f` against the measure.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms().map(|(x, w)| w * f(x)).sum()
    }
}

impl RebirthSource for DiscreteMeasure {
    fn dim(&self) -> usize {
        self.dim
    }

    fn atom(&self, index: usize) -> &[f64] {
        &self.coords[index * self.dim..(index + 1) * self.dim]
    }

    fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty measure");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1)
    }
}

fn require_circle(m: &DiscreteMeasure) -> Result<()> {
    if m.dim != 1 {
        return Err(Error::Dimension(format!("circular W1 needs d=1, got d={}", m.dim)));
    }
    Ok(())
}

/// Exact `W1` on the unit circle.
///
/// With `D = F - G` the difference of the two CDFs on `[0,1)`,
/// `W1 = min_s int_0^1 |D(t) - s| dt`, attained at a median of `D` under Lebesgue measure.
pub fn w1_circle(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    require_circle(mu)?;
    require_circle(nu)?;
    let events = mu
        .coords
        .iter()
        .zip(&mu.weights)
        .map(|(&x, &w)| (x, w))
        .chain(nu.coords.iter().zip(&nu.weights).map(|(&x, &w)| (x, -w)))
        .collect();
    Ok(circle_cost(events))
}

/// Circular `W1` between equally weighted points and a measure.
pub fn w1_circle_points(points: &[f64], nu: &DiscreteMeasure) -> Result<f64> {
    require_circle(nu)?;
    if points.is_empty() {
        return Err(Error::InvalidMeasure("empty point set".into()));
    }
    let w = 1.0 / points.len() as f64;
    let events = points
        .iter()
        .map(|&x| (x, w))
        .chain(nu.coords.iter().zip(&nu.weights).map(|(&x, &w)| (x, -w)))
        .collect();
    Ok(circle_cost(events))
}

fn circle_cost(mut events: Vec<(f64, f64)>) -> f64 {
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (value of D, length of the interval where D takes it)
    let mut pieces: Vec<(f64, f64)> = Vec::with_capacity(events.len() + 1);
    let mut level = 0.0;
    let mut left = 0.0;
    let mut i = 0;
    while i < events.len() {
        let x = events[i].0;
        if x > left {
            pieces.push((level, x - left));
        }
        while i < events.len() && events[i].0 == x {
            level += events[i].1;
            i += 1;
        }
        left = x;
    }
    if left < 1.0 {
        pieces.push((level, 1.0 - left));
    }
    let shift = weighted_median(&mut pieces);
    pieces.iter().map(|(v, len)| (v - shift).abs() * len).sum()
}

fn weighted_median(pieces: &mut [(f64, f64)]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = pieces.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (v, len) in &sorted {
        acc += len;
        if acc >= total / 2.0 {
            return *v;
        }
    }
    sorted.last().map_or(0.0, |p| p.0)
}

/// Exact optimal transport cost between two small discrete measures for an
/// arbitrary nonnegative ground cost, by successive shortest paths on the
/// transportation network.
pub fn transport_cost(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    if mu.dim != nu.dim {
        return Err(Error::Dimension(format!("dimension mismatch: {} vs {}", mu.dim, nu.dim)));
    }
    let (n, m) = (mu.len(), nu.len());
    if n + m > LP_ATOM_LIMIT {
        return Err(Error::SizeGuard { size: n + m, limit: LP_ATOM_LIMIT });
    }
    let c: Vec<f64> = mu
        .coords
        .chunks_exact(mu.dim)
        .flat_map(|x| nu.coords.chunks_exact(nu.dim).map(|y| cost(x, y)).collect::<Vec<_>>())
        .collect();
    Ok(min_cost_flow(n, m, &c, &mu.weights, &nu.weights))
}

fn min_cost_flow(n: usize, m: usize, cost: &[f64], supply: &[f64], demand: &[f64]) -> f64 {
    const EPS: f64 = 1e-15;
    let v = n + m;
    let mut flow = vec![0.0; n * m];
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let mut potential = vec![0.0; v];
    let mut dist = vec![0.0; v];
    let mut pred = vec![usize::MAX; v];
    let mut done = vec![false; v];

    loop {
        let remaining: f64 = supply.iter().filter(|s| **s > EPS).sum();
        if remaining <= 1e-13 || !demand.iter().any(|d| *d > EPS) {
            break;
        }
        dist.fill(f64::INFINITY);
        pred.fill(usize::MAX);
        done.fill(false);
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        // dense Dijkstra on reduced costs
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for k in 0..v {
                if !done[k] && dist[k] < best {
                    best = dist[k];
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let t = n + j;
                    let rc = (cost[u * m + j] + potential[u] - potential[t]).max(0.0);
                    if dist[u] + rc < dist[t] {
                        dist[t] = dist[u] + rc;
                        pred[t] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[i * m + j] > EPS {
                        let rc = (-cost[i * m + j] + potential[u] - potential[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            pred[i] = u;
                        }
                    }
                }
            }
        }
        let target = (0..m)
            .filter(|&j| demand[j] > EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(j_star) = target else { break };
        let reach = dist.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        for k in 0..v {
            potential[k] += if dist[k].is_finite() { dist[k] } else { reach };
        }
        // walk back to the originating source to find the bottleneck
        let mut amount = demand[j_star];
        let mut node = n + j_star;
        loop {
            let p = pred[node];
            if p == usize::MAX {
                amount = amount.min(supply[node]);
                break;
            }
            if node < n {
                // reverse edge p (sink) -> node (source) carries existing flow
                amount = amount.min(flow[node * m + (p - n)]);
            }
            node = p;
        }
        let origin = node;
        let mut node = n + j_star;
        while pred[node] != usize::MAX {
            let p = pred[node];
            if node >= n {
                flow[p * m + (node - n)] += amount;
            } else {
                flow[node * m + (p - n)] -= amount;
            }
            node = p;
        }
        supply[origin] -= amount;
        demand[j_star] -= amount;
    }
    flow.iter().zip(cost).map(|(f, c)| f.max(0.0) * c).sum()
}

/// Exact `W1` with the torus ground metric (small supports, any dimension).
pub fn lp_oracle(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    transport_cost(mu, nu, torus_dist_raw)
}

/// Value of `W_rho`: exact when the supports are small enough for the solver,
/// otherwise (d=1 only) the certified interval `[beta W1, W1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WRho {
    Exact(f64),
    Bounds { lower: f64, upper: f64 },
}

impl WRho {
    pub fn lower(&self) -> f64 {
        match *self {
            WRho::Exact(v) => v,
            WRho::Bounds { lower, .. } => lower,
        }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            WRho::Exact(v) => v,
            WRho::Bounds { upper, .. } => upper,
        }
    }
}

pub fn w_rho(metric: &RhoMetric, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<WRho> {
    if mu.len() + nu.len() <= LP_ATOM_LIMIT {
        return Ok(WRho::Exact(transport_cost(mu, nu, |x, y| metric.rho_raw(x, y))?));
    }
    if mu.dim == 1 && nu.dim == 1 {
        let w1 = w1_circle(mu, nu)?;
        return Ok(WRho::Bounds { lower: metric.beta() * w1, upper: w1 });
    }
    Err(Error::SizeGuard { size: mu.len() + nu.len(), limit: LP_ATOM_LIMIT })
}

/// Rate at which an `n`-sample empirical measure approaches its law in `W1` on `T^d`.
pub fn alpha(n: usize, d: usize) -> f64 {
    let nf = n.max(1) as f64;
    match d {
        0 | 1 => nf.powf(-0.5),
        2 => nf.powf(-0.5) * (1.0 + nf).ln(),
        _ => nf.powf(-1.0 / d as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, RngStream};
    use rand::Rng;

    fn point(x: f64) -> DiscreteMeasure {
        DiscreteMeasure::uniform_atoms(1, vec![x]).unwrap()
    }

    fn random_measure<R: Rng>(rng: &mut R, atoms: usize, dim: usize) -> DiscreteMeasure {
        let coords = (0..atoms * dim).map(|_| rng.random::<f64>()).collect();
        let weights = (0..atoms).map(|_| rng.random::<f64>() + 0.01).collect();
        DiscreteMeasure::normalized(dim, coords, weights).unwrap()
    }

    #[test]
    fn circle_examples() {
        let a = random_measure(&mut RngStream::new(1).draws(domain::SAMPLING, 0, 0, 0), 7, 1);
        assert!(w1_circle(&a, &a).unwrap().abs() < 1e-15);
        assert!((w1_circle(&point(0.0), &point(0.9)).unwrap() - 0.1).abs() < 1e-15);
        assert!((w1_circle(&point(0.25), &point(0.5)).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn circle_matches_lp_on_small_measures() {
        let mut rng = RngStream::new(2).draws(domain::SAMPLING, 0, 0, 0);
        for _ in 0..200 {
            let a = random_measure(&mut rng, 8, 1);
            let b = random_measure(&mut rng, 8, 1);
            let w = w1_circle(&a, &b).unwrap();
            let lp = lp_oracle(&a, &b).unwrap();
            assert!((w - lp).abs() < 1e-9, "{w} vs {lp}");
        }
    }

    #[test]
    fn lp_examples() {
        let a = DiscreteMeasure::uniform_atoms(2, vec![0.1, 0.2]).unwrap();
        let b = DiscreteMeasure::uniform_atoms(2, vec![0.9, 0.6]).unwrap();
        let expected = torus_dist_raw(&[0.1, 0.2], &[0.9, 0.6]);
        assert!((lp_oracle(&a, &b).unwrap() - expected).abs() < 1e-15);

        let c = DiscreteMeasure::new(1, vec![0.1, 0.5, 0.7], vec![0.2, 0.3, 0.5]).unwrap();
        let d = DiscreteMeasure::new(1, vec![0.7, 0.1, 0.5], vec![0.5, 0.2, 0.3]).unwrap();
        assert!(lp_oracle(&c, &d).unwrap().abs() < 1e-15);
    }

    #[test]
    fn lp_triangle_inequality() {
        let mut rng = RngStream::new(3).draws(domain::SAMPLING, 0, 0, 0);
        for d in 1..=2 {
            for _ in 0..100 {
                let a = random_measure(&mut rng, 5, d);
                let b = random_measure(&mut rng, 5, d);
                let c = random_measure(&mut rng, 5, d);
                let ab = lp_oracle(&a, &b).unwrap();
                let bc = lp_oracle(&b, &c).unwrap();
                let ac = lp_oracle(&a, &c).unwrap();
                assert!(ac <= ab + bc + 1e-9);
            }
        }
    }

    #[test]
    fn size_guard() {
        let big = DiscreteMeasure::uniform_atoms(1, (0..150).map(|i| i as f64 / 150.0).collect()).unwrap();
        assert!(matches!(lp_oracle(&big, &big), Err(Error::SizeGuard { .. })));
        let m = RhoMetric::new(1.0, 1).unwrap();
        assert!(matches!(w_rho(&m, &big, &big).unwrap(), WRho::Bounds { .. }));
    }

    #[test]
    fn w_rho_examples_and_sandwich() {
        let m = RhoMetric::new(1.0, 1).unwrap();
        let a = point(0.1);
        assert_eq!(w_rho(&m, &a, &a).unwrap(), WRho::Exact(0.0));
        let b = point(0.45);
        let expect = m.of_dist(0.35);
        assert!((w_rho(&m, &a, &b).unwrap().lower() - expect).abs() < 1e-15);

        let mut rng = RngStream::new(4).draws(domain::SAMPLING, 0, 0, 0);
        for &a_param in &[0.5, 1.0, 2.0, 5.0] {
            let m = RhoMetric::new(a_param, 1).unwrap();
            for _ in 0..50 {
                let x = random_measure(&mut rng, 8, 1);
                let y = random_measure(&mut rng, 8, 1);
                let exact = w_rho(&m, &x, &y).unwrap().lower();
                let w1 = w1_circle(&x, &y).unwrap();
                assert!(m.beta() * w1 <= exact + 1e-12 && exact <= w1 + 1e-12);
            }
        }
    }

    #[test]
    fn alpha_table() {
        assert!((alpha(10_000, 1) - 0.01).abs() < 1e-15);
        assert!((alpha(1, 2) - 2f64.ln()).abs() < 1e-15);
        assert!((alpha(1000, 3) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn draw_index_follows_weights() {
        let m = DiscreteMeasure::new(1, vec![0.1, 0.5, 0.7], vec![0.2, 0.3, 0.5]).unwrap();
        let mut rng = RngStream::new(5).draws(domain::SAMPLING, 0, 0, 0);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[m.draw_index(&mut rng)] += 1;
        }
        for (c, w) in counts.iter().zip(m.weights()) {
            assert!((*c as f64 / 1e5 - w).abs() < 0.01);
        }
    }

    #[test]
    fn invalid_measures_rejected() {
        assert!(DiscreteMeasure::new(1, vec![0.1, 0.2], vec![0.5, 0.4]).is_err());
        assert!(DiscreteMeasure::uniform_atoms(1, vec![]).is_err());
        assert!(DiscreteMeasure::normalized(1, vec![0.1], vec![0.0]).is_err());
        assert!(DiscreteMeasure::new(1, vec![0.1, 0.2], vec![1.0, 0.0]).is_err());
        assert!(w1_circle(&DiscreteMeasure::uniform_atoms(2, vec![0.1, 0.2]).unwrap(), &point(0.1)).is_err());
    }
}
