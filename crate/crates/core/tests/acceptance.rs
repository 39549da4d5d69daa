//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every line is printed whatever the outcome;
//! the process exits non-zero when any criterion fails.

use concavity_core::convexity::{
    boundary_growth_check, concavity_defect, convexity_value, defect_sup, normal_sign_check, SearchOptions, Triple,
};
use concavity_core::domain::{ConvexDomain, DomainMask};
use concavity_core::envelope::{concave_envelope_1d, concave_envelope_points};
use concavity_core::experiments::{
    run_experiment, sweep_ratio_spread, verify_calculus_properties, ExperimentOutcome, ExperimentSpec, Preset, ScalarSpec, SpatialSpec,
};
use concavity_core::fields::{GridField, ScalarField, Transform};
use concavity_core::geometry::Point;
use concavity_core::solver::{solve_eigen_first, torsion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::{Duration, Instant};

mod common;
use common::*;

const TIME_LIMIT: Duration = Duration::from_secs(60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(spec: ExperimentSpec) -> ExperimentOutcome {
    run_experiment(&spec).expect("experiment runs")
}

fn spec(preset: Preset, n: usize) -> ExperimentSpec {
    let mut s = ExperimentSpec::new(preset);
    s.grid.n = n;
    s
}

fn disk_mask(n: usize) -> Arc<DomainMask> {
    Arc::new(DomainMask::with_spacing(&ConvexDomain::unit_disk(), 1.0 / n as f64).unwrap())
}

fn torsion_disk() -> Outcome {
    let n = 128;
    let h = 1.0 / n as f64;
    let out = run(spec(Preset::Torsion, n));
    let r = &out.report;
    let residual = r.solve.as_ref().unwrap().residual;
    let center = out.field("u").unwrap().eval(Point::ORIGIN);
    let d = r.defect.as_ref().unwrap().sup_value;
    let gap = r.envelope.as_ref().unwrap().gap;
    let pass = residual <= 1e-10 && (center - 0.25).abs() <= 2.0 * h * h && d <= 2e-3 && gap <= 2e-3;
    outcome(pass, format!("residual {residual:.2e}, u(0) = {center:.8}, defect {d:.2e}, gap {gap:.2e}"))
}

fn eigen_disk() -> Outcome {
    let mask = disk_mask(64);
    let (lambda, u, _) = solve_eigen_first(&mask, 1e-10).unwrap();
    let rel = (lambda - 5.7832).abs() / 5.7832;
    let positive = u.interior_values().iter().all(|&v| v > 0.0);
    let d = concavity_defect(&u, &Transform::Log, Some(1e-6), &SearchOptions::default()).unwrap().sup_value;
    let pass = rel <= 0.01 && positive && d <= 5e-3;
    outcome(pass, format!("lambda {lambda:.5} (rel. error {rel:.2e}), positive {positive}, log defect {d:.2e}"))
}

fn kennington_sharpness() -> Outcome {
    let out = run(spec(Preset::KenningtonPower { gamma: 0.5 }, 128));
    let u = out.field("u").unwrap();
    let opts = SearchOptions::default();
    let quarter = concavity_defect(u, &Transform::Power(0.25), None, &opts).unwrap().sup_value;
    let above = concavity_defect(u, &Transform::Power(0.6), None, &opts).unwrap().sup_value;
    let pass = quarter <= 2e-3 && above > 10.0 * quarter;
    outcome(pass, format!("defect u^0.25 {quarter:.3e}, defect u^0.6 {above:.3e}"))
}

fn perturbation_scaling() -> Outcome {
    let out = run(spec(
        Preset::PowerPerturbed {
            gamma: 0.5,
            g: ScalarSpec::Power { coef: 1.0, exponent: 0.5 },
            scales: vec![0.1, 0.01],
            expected_delta: None,
        },
        64,
    ));
    let r = &out.report;
    let spread = sweep_ratio_spread(&r.sweep);
    let rows: Vec<String> = r.sweep.iter().map(|e| format!("eps {} delta {:.3e} wd {:.3e}", e.parameter, e.delta, e.witness_distance)).collect();
    outcome(spread < 3.0, format!("verdict {:?}, ratio spread {spread:.3e}; {}", r.verdict, rows.join("; ")))
}

fn perturbation_rate() -> Outcome {
    let out = run(spec(
        Preset::PerturbationRate {
            deltas: vec![1e-2, 1e-3, 1e-4],
            source: 1.0,
            perturbation: SpatialSpec::Ripple { value: 0.0, amp: 1.0, freq: 3.0 },
        },
        64,
    ));
    let rate = out.report.rate.clone().unwrap();
    let in_range = rate.exponent.is_some_and(|e| (0.4..=0.6).contains(&e));
    let floor_documented = rate.floor_dominated && rate.floor.is_finite();
    let gaps: Vec<String> = out.report.sweep.iter().map(|e| format!("{:.0e}: {:.3e}", e.parameter, e.gap)).collect();
    outcome(
        in_range || floor_documented,
        format!(
            "exponent {:?}, floor {:.3e}, floor dominated {}, gaps [{}]",
            rate.exponent,
            rate.floor,
            rate.floor_dominated,
            gaps.join(", ")
        ),
    )
}

fn calculus_properties() -> Outcome {
    let r = verify_calculus_properties(100_000, 2024).unwrap();
    outcome(
        r.pass(),
        format!(
            "subadd violation {:.2e}/{:.2e}, ratio excess {:.2e} (bound {:.3e}), inverse margin {:.3e} (floor -{:.2e}), HC - C min {:.2e} over {} admissible",
            r.subadd.sum_violation,
            r.subadd.diff_violation,
            r.ratio.max_excess,
            r.ratio.bound,
            r.inverse.worst_margin,
            r.inverse_bound,
            r.dominance.min_gap,
            r.dominance.admissible
        ),
    )
}

fn oracles() -> Outcome {
    // Exhaustive sweep against the brute force on a 33 × 33 grid.
    let mask = grid_mask(&ConvexDomain::unit_disk(), 33, 1.2);
    let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()) * (0.3 + 0.5 * p.x - 0.2 * p.y * p.y * p.x));
    let opts = SearchOptions { max_points: usize::MAX, ..SearchOptions::default() };
    let swept = defect_sup(&u, &opts).unwrap().sup_value;
    let brute = brute_force_sup(&u, opts.lambda_steps);
    let sweep_ok = swept.to_bits() == brute.to_bits();

    // One-dimensional envelope against the majorant LP on 64 points.
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut x = 0.0;
    let xs: Vec<f64> = (0..64)
        .map(|_| {
            x += 0.05 + rng.random::<f64>();
            x
        })
        .collect();
    let us: Vec<f64> = xs.iter().map(|x| -0.1 * (x - 16.0) * (x - 16.0) / 16.0 + 2.0 * rng.random::<f64>() - 1.0).collect();
    let env1 = concave_envelope_1d(&xs, &us).unwrap();
    let err1 = lp_majorant(&xs, &us).iter().zip(&env1.envelope).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // Two-dimensional envelope against the per-node LP on a 17 × 17 lattice.
    let points: Vec<Point> = (0..17 * 17).map(|k| Point::new((k % 17) as f64 / 8.0 - 1.0, (k / 17) as f64 / 8.0 - 1.0)).collect();
    let values: Vec<f64> = points.iter().map(|p| 0.5 - 0.3 * p.norm2() + 0.2 * (rng.random::<f64>() - 0.5)).collect();
    let env2 = concave_envelope_points(&points, &values).unwrap();
    let err2 = points.iter().enumerate().map(|(n, &p)| (lp_envelope_at(&points, &values, p) - env2.envelope[n]).abs()).fold(0.0, f64::max);

    outcome(
        sweep_ok && err1 <= 1e-9 && err2 <= 1e-8,
        format!("sweep {swept:e} vs brute force {brute:e}, 1-D max error {err1:.2e}, 2-D max error {err2:.2e}"),
    )
}

fn boundary_checks() -> Outcome {
    let mask = disk_mask(64);
    let t = torsion(&mask).unwrap();
    let (_, e, _) = solve_eigen_first(&mask, 1e-10).unwrap();
    let zero = GridField::zeros(&mask);
    let sign_t = normal_sign_check(&t, None).unwrap().pass;
    let sign_e = normal_sign_check(&e, None).unwrap().pass;
    let sign_0 = normal_sign_check(&zero, None).unwrap().pass;
    let (y, z) = (Point::new(1.0, 0.0), Point::ORIGIN);
    let grow_t = boundary_growth_check(&t, 0.5, y, z, None).unwrap();
    // Quadratic decay in the distance d to the boundary: u = d² (1 + d).
    let quad = GridField::from_fn(&mask, |p| {
        let d = (1.0 - p.norm2().sqrt()).max(0.0);
        d * d * (1.0 + d)
    });
    let grow_q = boundary_growth_check(&quad, 0.5, y, z, None).unwrap();
    let pass = sign_t && sign_e && !sign_0 && grow_t.pass && !grow_q.pass;
    outcome(
        pass,
        format!(
            "normal sign torsion {sign_t}, eigen {sign_e}, zero {sign_0}; growth torsion {:.3e} vs {:.3e}, quadratic {:.3e} vs {:.3e}",
            grow_t.surrogate, grow_t.u_z, grow_q.surrogate, grow_q.u_z
        ),
    )
}

fn consistency() -> Outcome {
    let mask = disk_mask(32);
    let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()) * 0.25 + 0.02 * (7.0 * p.x + 3.0 * p.y).sin());
    let neg = u.map(|v| -v);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut point = || loop {
        let p = Point::new(2.0 * rng.random::<f64>() - 1.0, 2.0 * rng.random::<f64>() - 1.0);
        if p.norm2() < 1.0 {
            return p;
        }
    };
    let mut odd = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (point(), point());
        let t = Triple::new(a, b, (a.x + 1.0) / 2.0).unwrap();
        odd = odd.max((convexity_value(&neg, &t).unwrap() + convexity_value(&u, &t).unwrap()).abs());
    }
    let opts = SearchOptions::default();
    let d1 = defect_sup(&u, &opts).unwrap().sup_value;
    let d2 = defect_sup(&u.map(|v| 2.0 * v), &opts).unwrap().sup_value;
    let scale = (d2 - 2.0 * d1).abs();
    let errors: Vec<f64> = [16usize, 32, 64].iter().map(|&n| (torsion(&disk_mask(n)).unwrap().eval(Point::ORIGIN) - 0.25).abs()).collect();
    let order = (errors[1] / errors[2]).log2();
    let pass = odd <= 1e-12 && scale <= 1e-12 && order >= 1.9;
    outcome(
        pass,
        format!("odd symmetry {odd:.1e}, scaling {scale:.1e} (defect {d1:.3e}), refinement order {order:.3} from center errors {errors:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("torsion disk", torsion_disk),
        ("eigenfunction disk", eigen_disk),
        ("power solution sharpness", kennington_sharpness),
        ("witness distance scaling", perturbation_scaling),
        ("perturbation rate", perturbation_rate),
        ("harmonic calculus properties", calculus_properties),
        ("oracles", oracles),
        ("boundary checks", boundary_checks),
        ("consistency", consistency),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed < TIME_LIMIT;
        if !pass {
            failed.push(k + 1);
        }
        println!(
            "criterion {}: {} {} [{:.1}s] {}",
            k + 1,
            if pass { "PASS" } else { "FAIL" },
            name,
            elapsed.as_secs_f64(),
            result.detail
        );
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
