//! Shared brute-force and linear-programming oracles.
#![allow(dead_code)]

use concavity_core::convexity::EndpointSet;
use concavity_core::domain::{ConvexDomain, DomainMask, GridSpec};
use concavity_core::fields::{GridField, ScalarField};
use concavity_core::geometry::{BBox, Point};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use std::sync::Arc;

pub fn grid_mask(domain: &ConvexDomain, n: usize, half: f64) -> Arc<DomainMask> {
    let grid = GridSpec::new(n, n, BBox { xmin: -half, xmax: half, ymin: -half, ymax: half }).unwrap();
    Arc::new(DomainMask::build(domain, grid).unwrap())
}

/// Every ordered endpoint pair, including coincident ones, times the λ-grid.
pub fn brute_force_sup(u: &GridField, steps: usize) -> f64 {
    let set = EndpointSet::of(u);
    let mut best = f64::NEG_INFINITY;
    for i in 0..set.len() {
        for j in 0..set.len() {
            for k in 0..=steps {
                let lam = k as f64 / steps as f64;
                let y2 = set.points[i].mix(set.points[j], lam);
                let v = u.eval(y2) - (lam * set.values[i] + (1.0 - lam) * set.values[j]);
                best = best.max(v);
            }
        }
    }
    best
}

/// Least concave majorant as the LP `min Σ e` subject to `e ≥ u` and decreasing slopes.
pub fn lp_majorant(xs: &[f64], us: &[f64]) -> Vec<f64> {
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let e: Vec<_> = (0..xs.len()).map(|i| pb.add_var(1.0, (us[i], f64::INFINITY))).collect();
    for i in 1..xs.len() - 1 {
        let (dl, dr) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        // (e[i+1] − e[i]) / dr ≤ (e[i] − e[i−1]) / dl
        pb.add_constraint([(e[i + 1], 1.0 / dr), (e[i], -1.0 / dr - 1.0 / dl), (e[i - 1], 1.0 / dl)], ComparisonOp::Le, 0.0);
    }
    let sol = pb.solve().unwrap();
    e.iter().map(|&v| sol[v]).collect()
}

/// Minimal sup distance from `us` to a concave sequence.
pub fn lp_nearest_concave(xs: &[f64], us: &[f64]) -> f64 {
    let mut pb = Problem::new(OptimizationDirection::Minimize);
    let t = pb.add_var(1.0, (0.0, f64::INFINITY));
    let f: Vec<_> = (0..xs.len()).map(|_| pb.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for i in 0..xs.len() {
        pb.add_constraint([(f[i], 1.0), (t, -1.0)], ComparisonOp::Le, us[i]);
        pb.add_constraint([(f[i], 1.0), (t, 1.0)], ComparisonOp::Ge, us[i]);
    }
    for i in 1..xs.len() - 1 {
        let (dl, dr) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        pb.add_constraint([(f[i + 1], 1.0 / dr), (f[i], -1.0 / dr - 1.0 / dl), (f[i - 1], 1.0 / dl)], ComparisonOp::Le, 0.0);
    }
    pb.solve().unwrap()[t]
}

/// Envelope at one location: the best convex combination of samples that reproduces it.
pub fn lp_envelope_at(points: &[Point], values: &[f64], m: Point) -> f64 {
    let mut pb = Problem::new(OptimizationDirection::Maximize);
    let w: Vec<_> = values.iter().map(|&v| pb.add_var(v, (0.0, f64::INFINITY))).collect();
    pb.add_constraint(w.iter().map(|&v| (v, 1.0)), ComparisonOp::Eq, 1.0);
    pb.add_constraint(w.iter().zip(points).map(|(&v, p)| (v, p.x)), ComparisonOp::Eq, m.x);
    pb.add_constraint(w.iter().zip(points).map(|(&v, p)| (v, p.y)), ComparisonOp::Eq, m.y);
    pb.solve().unwrap().objective()
}

