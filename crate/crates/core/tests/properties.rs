use concavity_core::convexity::{
    convexity_value, defect, defect_sup, defect_sup_on, harmonic_defect, hc_dominance_check, EndpointSet, SampleRegion,
    SearchOptions, Triple,
};
use concavity_core::domain::{ConvexDomain, DomainMask, Loc};
use concavity_core::envelope::concave_envelope_points;
use concavity_core::fields::GridField;
use concavity_core::geometry::Point;
use concavity_core::solver::Nonlinearity;
use proptest::prelude::*;
use std::sync::{Arc, OnceLock};

fn disk() -> &'static Arc<DomainMask> {
    static MASK: OnceLock<Arc<DomainMask>> = OnceLock::new();
    MASK.get_or_init(|| Arc::new(DomainMask::with_spacing(&ConvexDomain::unit_disk(), 1.0 / 8.0).unwrap()))
}

fn cubic(c: [f64; 6]) -> impl Fn(Point) -> f64 {
    move |p| c[0] + c[1] * p.x + c[2] * p.y + c[3] * p.x * p.y + c[4] * p.x * p.x * p.y + c[5] * (p.y * p.y * p.y - p.x)
}

fn coeffs() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(-2.0..2.0f64)
}

fn point_in_disk() -> impl Strategy<Value = Point> {
    (0.0..0.999f64, 0.0..std::f64::consts::TAU).prop_map(|(r, t)| Point::new(r.sqrt() * t.cos(), r.sqrt() * t.sin()))
}

fn exhaustive() -> SearchOptions {
    SearchOptions { lambda_steps: 8, max_points: usize::MAX, ..SearchOptions::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn convexity_value_is_odd(c in coeffs(), y1 in point_in_disk(), y3 in point_in_disk(), lam in 0.0..=1.0f64) {
        let u = GridField::from_fn(disk(), cubic(c));
        let t = Triple::new(y1, y3, lam).unwrap();
        let a = convexity_value(&u, &t).unwrap();
        let b = convexity_value(&u.map(|v| -v), &t).unwrap();
        prop_assert!((a + b).abs() <= 1e-12, "{a} {b}");
    }

    #[test]
    fn convexity_value_is_symmetric_under_swap(c in coeffs(), y1 in point_in_disk(), y3 in point_in_disk(), k in 0u32..=64) {
        let u = GridField::from_fn(disk(), cubic(c));
        let lam = k as f64 / 64.0;
        let a = convexity_value(&u, &Triple::new(y1, y3, lam).unwrap()).unwrap();
        let b = convexity_value(&u, &Triple::new(y3, y1, 1.0 - lam).unwrap()).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn harmonic_value_dominates(g1 in 0.0..10.0f64, g2 in -10.0..10.0f64, g3 in 0.0..10.0f64, lam in 0.0..=1.0f64) {
        if let Some(hc) = harmonic_defect(g1, g2, g3, lam) {
            prop_assert!(hc >= defect(g1, g2, g3, lam) - 1e-12 * (1.0 + g1 + g3));
        }
    }

    #[test]
    fn defect_sup_scales(c in coeffs(), scale in 0.01..100.0f64) {
        let u = GridField::from_fn(disk(), cubic(c));
        let a = defect_sup(&u, &exhaustive()).unwrap().sup_value;
        let b = defect_sup(&u.map(|v| scale * v), &exhaustive()).unwrap().sup_value;
        prop_assert!((b - scale * a).abs() <= 1e-12 * scale.max(1.0) * (1.0 + a.abs()), "{a} {b}");
    }

    #[test]
    fn defect_sup_is_monotone_in_the_endpoint_set(c in coeffs(), keep in 2u64..7) {
        let u = GridField::from_fn(disk(), cubic(c));
        let full = EndpointSet::of(&u);
        let part = EndpointSet::of(&u).retain(|loc, _| match loc {
            Loc::Node(k) => (k as u64 * 2654435761) % keep != 0,
            Loc::Sample(s) => (s as u64 * 40503) % keep != 0,
        });
        let a = defect_sup_on(&u, &part, &exhaustive()).unwrap().sup_value;
        let b = defect_sup_on(&u, &full, &exhaustive()).unwrap().sup_value;
        prop_assert!(a <= b);
    }

    #[test]
    fn envelope_is_idempotent_monotone_and_translation_equivariant(
        values in prop::collection::vec(-1.0..1.0f64, 49),
        bump in prop::collection::vec(0.0..0.5f64, 49),
        shift in -5.0..5.0f64,
    ) {
        let points: Vec<Point> = (0..49).map(|k| Point::new((k % 7) as f64, (k / 7) as f64 + 0.1 * (k % 7) as f64 * (k % 7) as f64)).collect();
        let env = concave_envelope_points(&points, &values).unwrap().envelope;
        for k in 0..49 {
            prop_assert!(env[k] >= values[k]);
        }
        let again = concave_envelope_points(&points, &env).unwrap().envelope;
        for k in 0..49 {
            prop_assert!((again[k] - env[k]).abs() <= 1e-12);
        }
        let above: Vec<f64> = values.iter().zip(&bump).map(|(v, b)| v + b).collect();
        let env_above = concave_envelope_points(&points, &above).unwrap().envelope;
        for k in 0..49 {
            prop_assert!(env_above[k] >= env[k] - 1e-12);
        }
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let env_shifted = concave_envelope_points(&points, &shifted).unwrap().envelope;
        for k in 0..49 {
            prop_assert!((env_shifted[k] - env[k] - shift).abs() <= 1e-12);
        }
    }
}

#[test]
fn dominance_holds_for_a_nonnegative_nonlinearity() {
    let g = Nonlinearity::without_derivative("mixed", |p, s| (1.0 + p.x * p.x) * s * s + s.abs().sqrt());
    let region = SampleRegion::new(Point::new(-1.0, -1.0), Point::new(1.0, 1.0), [0.0, 3.0]);
    let rep = hc_dominance_check(&g, &region, 20_000, 9);
    assert!(rep.admissible > 0);
    assert!(rep.min_gap >= -1e-12, "{}", rep.min_gap);
}
