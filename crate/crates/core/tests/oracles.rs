//! Independent re-computations of the sweep and envelope results.

use concavity_core::convexity::{defect, defect_sup, EndpointSet, SearchOptions};
use concavity_core::domain::{ConvexDomain, DomainMask, Loc};
use concavity_core::envelope::{concave_envelope_1d, concave_envelope_2d, concave_envelope_points};
use concavity_core::fields::{GridField, ScalarField};
use concavity_core::geometry::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn exhaustive_sweep_matches_brute_force_on_33_grid() {
    let mask = grid_mask(&ConvexDomain::unit_disk(), 33, 1.2);
    let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()) * (0.3 + 0.5 * p.x - 0.2 * p.y * p.y * p.x));
    let opts = SearchOptions { max_points: usize::MAX, ..SearchOptions::default() };
    let rep = defect_sup(&u, &opts).unwrap();
    assert!(rep.search.exhaustive);
    let oracle = brute_force_sup(&u, opts.lambda_steps);
    assert_eq!(rep.sup_value.to_bits(), oracle.to_bits(), "{} vs {}", rep.sup_value, oracle);
    let t = rep.argmax.unwrap();
    let again = u.eval(t.y2()) - (t.lambda * u.eval(t.y1) + (1.0 - t.lambda) * u.eval(t.y3));
    assert_eq!(again, rep.sup_value);
}

#[test]
fn exhaustive_sweep_matches_brute_force_on_square() {
    let mask = grid_mask(&ConvexDomain::centered_square(1.0), 33, 1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise: Vec<f64> = (0..mask.grid.node_count()).map(|_| rng.random::<f64>()).collect();
    let g = mask.grid;
    let u = GridField::from_fn(&mask, |p| {
        let (i, j) = g.cell_of(p);
        -p.norm2() + 0.01 * noise[g.index(i, j)]
    });
    let opts = SearchOptions { max_points: usize::MAX, lambda_steps: 8, ..SearchOptions::default() };
    let rep = defect_sup(&u, &opts).unwrap();
    assert_eq!(rep.sup_value.to_bits(), brute_force_sup(&u, 8).to_bits());
}

#[test]
fn one_dimensional_envelope_matches_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let mut xs: Vec<f64> = Vec::with_capacity(64);
        let mut x = 0.0;
        for _ in 0..64 {
            x += 0.05 + rng.random::<f64>();
            xs.push(x);
        }
        let us: Vec<f64> = xs.iter().map(|x| -0.1 * (x - 16.0) * (x - 16.0) / 16.0 + 2.0 * rng.random::<f64>() - 1.0).collect();
        let env = concave_envelope_1d(&xs, &us).unwrap();
        let lp = lp_majorant(&xs, &us);
        for i in 0..64 {
            assert!((env.envelope[i] - lp[i]).abs() <= 1e-9, "trial {trial} node {i}: {} vs {}", env.envelope[i], lp[i]);
        }
        let nearest = lp_nearest_concave(&xs, &us);
        assert!((env.witness_distance - nearest).abs() <= 1e-9, "trial {trial}: {} vs {nearest}", env.witness_distance);
    }
}

#[test]
fn sawtooth_ratio_is_at_most_one() {
    // A concave base plus δ times a sawtooth of amplitude one half is δ-concave.
    let xs: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
    for delta in [1e-1, 1e-2, 1e-3] {
        let us: Vec<f64> = xs.iter().enumerate().map(|(i, x)| -x * x + delta * if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let env = concave_envelope_1d(&xs, &us).unwrap();
        assert!(env.witness_distance / delta <= 1.0);
        assert!((env.witness_distance - lp_nearest_concave(&xs, &us)).abs() < 1e-9);
    }
}

/// Repeated `v(m) ← max(v(m), v on the chord)` over lattice segments until nothing changes.
/// Every update is a convex combination, so the fixed point never exceeds the envelope.
fn sweep_lower_bound(idx: &[(i64, i64)], values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    let pos: std::collections::HashMap<(i64, i64), usize> = idx.iter().enumerate().map(|(n, &ij)| (ij, n)).collect();
    loop {
        let mut changed = false;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let (di, dj) = (idx[b].0 - idx[a].0, idx[b].1 - idx[a].1);
                let g = gcd(di.abs(), dj.abs());
                for s in 1..g {
                    let m = (idx[a].0 + di / g * s, idx[a].1 + dj / g * s);
                    if let Some(&k) = pos.get(&m) {
                        let t = s as f64 / g as f64;
                        let chord = (1.0 - t) * v[a] + t * v[b];
                        if chord > v[k] + 1e-15 {
                            v[k] = chord;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return v;
        }
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lattice_samples(mask: &DomainMask, u: &GridField) -> (Vec<Point>, Vec<f64>, Vec<(i64, i64)>) {
    let set = EndpointSet::of(u);
    let idx = set
        .points
        .iter()
        .map(|p| (((p.x - mask.grid.bbox.xmin) / mask.h()).round() as i64, ((p.y - mask.grid.bbox.ymin) / mask.h()).round() as i64))
        .collect();
    (set.points, set.values, idx)
}

#[test]
fn two_dimensional_envelope_matches_lp_on_17_grid() {
    // Square [-1, 1]² with h = 1/8: 17 × 17 nodes on the closed square.
    let mask = grid_mask(&ConvexDomain::centered_square(1.0), 21, 1.25);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise: Vec<f64> = (0..mask.grid.node_count()).map(|_| rng.random::<f64>() - 0.5).collect();
    let g = mask.grid;
    let u = GridField::from_fn(&mask, |p| {
        let k = g.index(((p.x - g.bbox.xmin) / g.h).round() as usize, ((p.y - g.bbox.ymin) / g.h).round() as usize);
        0.5 - p.norm2() * 0.3 + 0.2 * noise[k]
    });
    let (points, values, idx) = lattice_samples(&mask, &u);
    assert_eq!(points.len(), 17 * 17);
    let env = concave_envelope_points(&points, &values).unwrap();
    let lower = sweep_lower_bound(&idx, &values);
    for n in 0..points.len() {
        let lp = lp_envelope_at(&points, &values, points[n]);
        assert!((env.envelope[n] - lp).abs() <= 1e-8, "node {n}: {} vs {lp}", env.envelope[n]);
        assert!(lower[n] <= env.envelope[n] + 1e-12);
    }
}

#[test]
fn bowl_tent_matches_the_sweep() {
    let mask = grid_mask(&ConvexDomain::centered_square(1.0), 21, 1.25);
    let u = GridField::from_fn(&mask, |p| p.norm2());
    let (points, values, idx) = lattice_samples(&mask, &u);
    let env = concave_envelope_points(&points, &values).unwrap();
    let lower = sweep_lower_bound(&idx, &values);
    for n in 0..points.len() {
        assert!((env.envelope[n] - lower[n]).abs() <= 1e-8);
        assert!((env.envelope[n] - 2.0).abs() <= 1e-12);
    }
}

#[test]
fn envelope_is_discretely_concave_on_node_triples() {
    let mask = grid_mask(&ConvexDomain::unit_disk(), 33, 1.2);
    let u = GridField::from_fn(&mask, |p| 1.0 - p.norm2() + 0.05 * (37.0 * p.x + 91.0 * p.y).sin());
    let env = concave_envelope_2d(&u).unwrap();
    let nodes: Vec<(usize, usize, f64)> = mask
        .interior
        .iter()
        .map(|&k| {
            let (i, j) = mask.grid.ij(k);
            (i, j, env.envelope.loc_value(Loc::Node(k)))
        })
        .collect();
    let value: std::collections::HashMap<(usize, usize), f64> = nodes.iter().map(|&(i, j, v)| ((i, j), v)).collect();
    let mut worst = f64::NEG_INFINITY;
    for a in &nodes {
        for b in &nodes {
            let (di, dj) = (b.0 as i64 - a.0 as i64, b.1 as i64 - a.1 as i64);
            let g = gcd(di.abs(), dj.abs());
            for s in 1..g {
                let m = ((a.0 as i64 + di / g * s) as usize, (a.1 as i64 + dj / g * s) as usize);
                if let Some(&vm) = value.get(&m) {
                    let lam = 1.0 - s as f64 / g as f64;
                    worst = worst.max(defect(-a.2, -vm, -b.2, lam));
                }
            }
        }
    }
    assert!(worst <= 1e-10, "{worst}");
}
