//! Convexity defect functionals and the triple search engine.
//!
//! For a field `u` and a triple `(y1, y3, λ)` with `y2 = λ y1 + (1 − λ) y3`
//! the convexity value is `u(y2) − (λ u(y1) + (1 − λ) u(y3))`. It is
//! nonpositive for every triple exactly when `u` is convex, so concavity
//! defects are measured on negated fields. The weighted sum is evaluated as
//! one commutative expression, which makes the value bitwise symmetric
//! under `(y1, y3, λ) ↦ (y3, y1, 1 − λ)` and odd under `u ↦ −u`.
//!
//! The supremum over triples is searched on a set of endpoints (interior
//! nodes and boundary samples) times a uniform λ-grid. Small sets are swept
//! exhaustively; large ones on a strided sub-lattice followed, when asked
//! for, by a local coordinate ascent over the full set with golden-section
//! search in λ. Rows of the sweep run in parallel and are reduced with a
//! strict preference (value first, then the lexicographic order of the
//! triple), so the result does not depend on how the work is split.

use crate::domain::{Loc, NodeClass};
use crate::fields::{field_stats, FieldError, GridField, ScalarField, Transform, TransformedField};
use crate::geometry::Point;
use crate::par::{self, Execution};
use crate::serde_ext::ext_f64;
use crate::solver::Nonlinearity;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConvexityError {
    #[error("invalid triple: {0}")]
    BadTriple(String),
    #[error("point ({x}, {y}) lies outside the closed domain")]
    OutsideDomain { x: f64, y: f64 },
    #[error("field value at ({x}, {y}) is not finite")]
    Undefined { x: f64, y: f64 },
    #[error("value {s} at ({x}, {y}) is outside the validity range of {name}")]
    Validity { name: String, x: f64, y: f64, s: f64 },
    #[error("harmonic query is inadmissible: g1 = {g1}, g3 = {g3}, mix = {mix}")]
    Inadmissible { g1: f64, g3: f64, mix: f64 },
    #[error("asserted bound violated: {what} at ({x}, {y}), s = {s}")]
    BoundsViolated { what: String, x: f64, y: f64, s: f64 },
    #[error("invalid option: {0}")]
    BadOption(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Endpoints `y1`, `y3` and weight `λ` on `y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub y1: Point,
    pub y3: Point,
    pub lambda: f64,
}

impl Triple {
    pub fn new(y1: Point, y3: Point, lambda: f64) -> Result<Self, ConvexityError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ConvexityError::BadTriple(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(y1.is_finite() && y3.is_finite()) {
            return Err(ConvexityError::BadTriple("non-finite endpoint".into()));
        }
        Ok(Triple { y1, y3, lambda })
    }

    pub fn y2(&self) -> Point {
        self.y1.mix(self.y3, self.lambda)
    }
}

/// Which definition of the harmonic convexity value applies to a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HcCase {
    PositiveMix,
    BothZero,
    Inadmissible,
}

/// Two argument pairs `(y1, s1)`, `(y3, s3)` and the weight `λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HcQuery {
    pub y1: Point,
    pub s1: f64,
    pub y3: Point,
    pub s3: f64,
    pub lambda: f64,
}

impl HcQuery {
    pub fn y2(&self) -> Point {
        self.y1.mix(self.y3, self.lambda)
    }

    pub fn s2(&self) -> f64 {
        self.lambda * self.s1 + (1.0 - self.lambda) * self.s3
    }

    pub fn case(&self, g: &Nonlinearity) -> HcCase {
        hc_case(g.eval(self.y1, self.s1), g.eval(self.y3, self.s3), self.lambda)
    }
}

fn hc_case(g1: f64, g3: f64, lambda: f64) -> HcCase {
    if g1 == 0.0 && g3 == 0.0 {
        HcCase::BothZero
    } else if (1.0 - lambda) * g1 + lambda * g3 > 0.0 {
        HcCase::PositiveMix
    } else {
        HcCase::Inadmissible
    }
}

/// `g2 − (λ g1 + (1 − λ) g3)`.
#[inline]
pub fn defect(g1: f64, g2: f64, g3: f64, lambda: f64) -> f64 {
    g2 - (lambda * g1 + (1.0 - lambda) * g3)
}

/// Harmonic convexity value from the three values, `None` when inadmissible.
#[inline]
pub fn harmonic_defect(g1: f64, g2: f64, g3: f64, lambda: f64) -> Option<f64> {
    match hc_case(g1, g3, lambda) {
        HcCase::BothZero => Some(g2),
        HcCase::PositiveMix => Some(g2 - g1 * g3 / ((1.0 - lambda) * g1 + lambda * g3)),
        HcCase::Inadmissible => None,
    }
}

/// Convexity value of a field at a triple.
pub fn convexity_value(u: &dyn ScalarField, t: &Triple) -> Result<f64, ConvexityError> {
    let mask = u.mask();
    let slack = 1e-8 * mask.h();
    let y2 = t.y2();
    for p in [t.y1, t.y3, y2] {
        if !mask.domain.contains_closed(p, slack) {
            return Err(ConvexityError::OutsideDomain { x: p.x, y: p.y });
        }
    }
    let v1 = u.eval(t.y1);
    let v3 = u.eval(t.y3);
    let v2 = u.eval(y2);
    for (p, v) in [(t.y1, v1), (t.y3, v3), (y2, v2)] {
        if !v.is_finite() {
            return Err(ConvexityError::Undefined { x: p.x, y: p.y });
        }
    }
    Ok(defect(v1, v2, v3, t.lambda))
}

fn check_valid(g: &Nonlinearity, y: Point, s: f64) -> Result<(), ConvexityError> {
    if g.valid(s) {
        Ok(())
    } else {
        Err(ConvexityError::Validity { name: g.name.clone(), x: y.x, y: y.y, s })
    }
}

/// Joint convexity value of `g` in `(y, s)`.
pub fn joint_convexity_value(g: &Nonlinearity, q: &HcQuery) -> Result<f64, ConvexityError> {
    let (y2, s2) = (q.y2(), q.s2());
    check_valid(g, q.y1, q.s1)?;
    check_valid(g, q.y3, q.s3)?;
    check_valid(g, y2, s2)?;
    Ok(defect(g.eval(q.y1, q.s1), g.eval(y2, s2), g.eval(q.y3, q.s3), q.lambda))
}

/// Harmonic convexity value of `g`; an error when the query is inadmissible.
pub fn harmonic_convexity_value(g: &Nonlinearity, q: &HcQuery) -> Result<f64, ConvexityError> {
    let (y2, s2) = (q.y2(), q.s2());
    check_valid(g, q.y1, q.s1)?;
    check_valid(g, q.y3, q.s3)?;
    check_valid(g, y2, s2)?;
    let (g1, g3) = (g.eval(q.y1, q.s1), g.eval(q.y3, q.s3));
    harmonic_defect(g1, g.eval(y2, s2), g3, q.lambda).ok_or(ConvexityError::Inadmissible {
        g1,
        g3,
        mix: (1.0 - q.lambda) * g1 + q.lambda * g3,
    })
}

// ---------------------------------------------------------------------------
// Endpoint sets

/// Candidate triple endpoints with their stored values.
#[derive(Clone, Debug)]
pub struct EndpointSet {
    pub locs: Vec<Loc>,
    pub points: Vec<Point>,
    pub values: Vec<f64>,
    /// Whether the endpoint is an interior node.
    pub interior: Vec<bool>,
}

impl EndpointSet {
    /// Interior nodes and boundary samples with finite values.
    pub fn of(field: &dyn ScalarField) -> Self {
        let mask = field.mask();
        let mut set = EndpointSet { locs: Vec::new(), points: Vec::new(), values: Vec::new(), interior: Vec::new() };
        let locs = mask.interior.iter().map(|&k| Loc::Node(k)).chain((0..mask.samples.len()).map(Loc::Sample));
        for loc in locs {
            let v = field.loc_value(loc);
            if v.is_finite() {
                set.locs.push(loc);
                set.points.push(mask.loc_point(loc));
                set.values.push(v);
                set.interior.push(matches!(loc, Loc::Node(k) if mask.class[k] == NodeClass::Interior));
            }
        }
        set
    }

    /// Keeps the endpoints for which `keep(loc, value)` holds.
    pub fn retain(mut self, keep: impl Fn(Loc, f64) -> bool) -> Self {
        let mut w = 0;
        for r in 0..self.locs.len() {
            if keep(self.locs[r], self.values[r]) {
                self.locs.swap(w, r);
                self.points.swap(w, r);
                self.values.swap(w, r);
                self.interior.swap(w, r);
                w += 1;
            }
        }
        self.locs.truncate(w);
        self.points.truncate(w);
        self.values.truncate(w);
        self.interior.truncate(w);
        self
    }

    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Search engine

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Number of λ intervals; the grid is `{0, 1/n, ..., 1}`.
    pub lambda_steps: usize,
    /// Local refinement after the grid sweep.
    pub refine: bool,
    /// Largest endpoint count swept exhaustively; larger sets are strided.
    pub max_points: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { lambda_steps: 16, refine: false, max_points: 2000, exec: Execution::default() }
    }
}

impl SearchOptions {
    fn validate(&self) -> Result<(), ConvexityError> {
        if self.lambda_steps == 0 {
            return Err(ConvexityError::BadOption("lambda_steps must be positive".into()));
        }
        if self.max_points < 2 {
            return Err(ConvexityError::BadOption("max_points must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    value: f64,
    i: usize,
    j: usize,
    lambda: f64,
}

struct Engine<'a, F> {
    set: &'a EndpointSet,
    value: F,
    h: f64,
    bucket_origin: Point,
    bucket_dims: (usize, usize),
    buckets: Vec<Vec<usize>>,
}

/// Result of a sweep before it is dressed up as a report.
struct SweepOutcome {
    best: Option<Cand>,
    evaluations: u64,
    skipped: u64,
    rows: Vec<Cand>,
    searched: usize,
    stride: usize,
}

impl<'a, F> Engine<'a, F>
where
    F: Fn(usize, usize, f64) -> Option<f64> + Sync,
{
    fn new(set: &'a EndpointSet, h: f64, value: F) -> Self {
        let (mut lo, mut hi) = (Point::new(f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in &set.points {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let dims = if set.is_empty() {
            (1, 1)
        } else {
            (((hi.x - lo.x) / h) as usize + 1, ((hi.y - lo.y) / h) as usize + 1)
        };
        let mut buckets = vec![Vec::new(); dims.0 * dims.1];
        for (n, p) in set.points.iter().enumerate() {
            let bx = (((p.x - lo.x) / h) as usize).min(dims.0 - 1);
            let by = (((p.y - lo.y) / h) as usize).min(dims.1 - 1);
            buckets[by * dims.0 + bx].push(n);
        }
        Engine { set, value, h, bucket_origin: lo, bucket_dims: dims, buckets }
    }

    /// Canonical form: `y1` precedes `y3` lexicographically.
    fn canonical(&self, c: Cand) -> Cand {
        if point_cmp(self.set.points[c.j], self.set.points[c.i]) == Ordering::Less {
            Cand { value: c.value, i: c.j, j: c.i, lambda: 1.0 - c.lambda }
        } else {
            c
        }
    }

    fn key_cmp(&self, a: &Cand, b: &Cand) -> Ordering {
        let (pa1, pa3, pb1, pb3) = (self.set.points[a.i], self.set.points[a.j], self.set.points[b.i], self.set.points[b.j]);
        point_cmp(pa1, pb1).then(point_cmp(pa3, pb3)).then(a.lambda.total_cmp(&b.lambda))
    }

    /// Strict preference: larger value, then the lexicographically smaller triple.
    fn better(&self, a: &Cand, b: &Cand) -> bool {
        match a.value.total_cmp(&b.value) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.key_cmp(a, b) == Ordering::Less,
        }
    }

    fn eval(&self, i: usize, j: usize, lambda: f64) -> Option<Cand> {
        (self.value)(i, j, lambda).filter(|v| !v.is_nan()).map(|value| self.canonical(Cand { value, i, j, lambda }))
    }

    fn sweep(&self, subset: &[usize], steps: usize, exec: Execution) -> (Option<Cand>, Vec<Option<Cand>>, u64, u64) {
        let n = subset.len();
        let lams: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        let rows = par::map_collect(exec, n, |a| {
            let i = subset[a];
            let (mut best, mut evals, mut skipped) = (None::<Cand>, 0u64, 0u64);
            let mut offer = |c: Option<Cand>, best: &mut Option<Cand>| match c {
                Some(c) => {
                    if best.as_ref().is_none_or(|b| self.better(&c, b)) {
                        *best = Some(c);
                    }
                }
                None => skipped += 1,
            };
            // Degenerate triple y1 = y3.
            evals += 1;
            offer(self.eval(i, i, 0.0), &mut best);
            for &j in &subset[a + 1..] {
                for &lam in &lams {
                    evals += 1;
                    offer(self.eval(i, j, lam), &mut best);
                }
            }
            (best, evals, skipped)
        });
        let mut best: Option<Cand> = None;
        let (mut evals, mut skipped) = (0, 0);
        let mut per_row = Vec::with_capacity(n);
        for (b, e, s) in rows {
            evals += e;
            skipped += s;
            if let Some(c) = b {
                if best.as_ref().is_none_or(|x| self.better(&c, x)) {
                    best = Some(c);
                }
            }
            per_row.push(b);
        }
        (best, per_row, evals, skipped)
    }

    fn neighbours(&self, i: usize, radius: f64) -> Vec<usize> {
        let p = self.set.points[i];
        let r = (radius / self.h).ceil() as i64;
        let bx = ((p.x - self.bucket_origin.x) / self.h) as i64;
        let by = ((p.y - self.bucket_origin.y) / self.h) as i64;
        let mut out = Vec::new();
        for cy in (by - r).max(0)..=(by + r).min(self.bucket_dims.1 as i64 - 1) {
            for cx in (bx - r).max(0)..=(bx + r).min(self.bucket_dims.0 as i64 - 1) {
                for &n in &self.buckets[cy as usize * self.bucket_dims.0 + cx as usize] {
                    if self.set.points[n].dist(p) <= radius {
                        out.push(n);
                    }
                }
            }
        }
        out
    }

    /// Coordinate ascent over nearby endpoints and golden-section search in λ.
    fn refine(&self, start: Cand, radius: f64, lambda_width: f64) -> (Cand, u64) {
        let mut cur = start;
        let mut evals = 0u64;
        for _ in 0..8 {
            let before = cur;
            for moving_first in [true, false] {
                let anchor = if moving_first { cur.i } else { cur.j };
                for n in self.neighbours(anchor, radius) {
                    let (i, j) = if moving_first { (n, cur.j) } else { (cur.i, n) };
                    evals += 1;
                    if let Some(c) = self.eval(i, j, cur.lambda) {
                        if self.better(&c, &cur) {
                            cur = c;
                        }
                    }
                }
            }
            let (c, e) = self.golden(cur, lambda_width);
            evals += e;
            cur = c;
            if cur.i == before.i && cur.j == before.j && cur.lambda == before.lambda {
                break;
            }
        }
        (cur, evals)
    }

    fn golden(&self, cur: Cand, width: f64) -> (Cand, u64) {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let (i, j) = (cur.i, cur.j);
        let phi = |l: f64| (self.value)(i, j, l).filter(|v| !v.is_nan()).unwrap_or(f64::NEG_INFINITY);
        let (mut a, mut b) = ((cur.lambda - width).max(0.0), (cur.lambda + width).min(1.0));
        let mut c = b - INV_PHI * (b - a);
        let mut d = a + INV_PHI * (b - a);
        let (mut fc, mut fd) = (phi(c), phi(d));
        let mut evals = 2;
        for _ in 0..40 {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - INV_PHI * (b - a);
                fc = phi(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + INV_PHI * (b - a);
                fd = phi(d);
            }
            evals += 1;
        }
        let mut best = cur;
        for l in [c, d] {
            evals += 1;
            if let Some(cand) = self.eval(i, j, l) {
                if self.better(&cand, &best) {
                    best = cand;
                }
            }
        }
        (best, evals)
    }

    fn run(&self, subset: &[usize], stride: usize, opts: &SearchOptions) -> SweepOutcome {
        let (mut best, per_row, mut evaluations, skipped) = self.sweep(subset, opts.lambda_steps, opts.exec);
        let rows: Vec<Cand> = per_row.iter().flatten().copied().collect();
        if opts.refine && best.is_some() {
            let mut starts = rows.clone();
            starts.sort_by(|a, b| if self.better(a, b) { Ordering::Less } else if self.better(b, a) { Ordering::Greater } else { Ordering::Equal });
            starts.truncate(8);
            let radius = 1.5 * stride.max(1) as f64 * self.h * (1.0 + 1e-9);
            let width = 1.0 / opts.lambda_steps as f64;
            let refined = par::map_collect(opts.exec, starts.len(), |k| self.refine(starts[k], radius, width));
            for (c, e) in refined {
                evaluations += e;
                if best.as_ref().is_none_or(|b| self.better(&c, b)) {
                    best = Some(c);
                }
            }
        }
        SweepOutcome { best, evaluations, skipped, rows, searched: subset.len(), stride }
    }
}

fn point_cmp(a: Point, b: Point) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Endpoint indices swept on the first pass and the stride used.
fn coarse_subset(field_mask: &crate::domain::DomainMask, set: &EndpointSet, max_points: usize) -> (Vec<usize>, usize) {
    if set.len() <= max_points {
        return ((0..set.len()).collect(), 1);
    }
    let g = &field_mask.grid;
    let (ic, jc) = (g.nx / 2, g.ny / 2);
    let center = field_mask.domain.center();
    let mut boundary: Vec<usize> = (0..set.len()).filter(|&n| !matches!(set.locs[n], Loc::Node(k) if field_mask.class[k] == NodeClass::Interior)).collect();
    boundary.sort_by(|&a, &b| {
        let (pa, pb) = (set.points[a] - center, set.points[b] - center);
        pa.y.atan2(pa.x).total_cmp(&pb.y.atan2(pb.x)).then(a.cmp(&b))
    });
    for stride in 2.. {
        let mut subset: Vec<usize> = (0..set.len())
            .filter(|&n| match set.locs[n] {
                Loc::Node(k) if field_mask.class[k] == NodeClass::Interior => {
                    let (i, j) = g.ij(k);
                    (i as i64 - ic as i64).rem_euclid(stride as i64) == 0 && (j as i64 - jc as i64).rem_euclid(stride as i64) == 0
                }
                _ => false,
            })
            .collect();
        subset.extend(boundary.iter().step_by(stride).copied());
        if subset.len() <= max_points {
            subset.sort_unstable();
            return (subset, stride);
        }
    }
    unreachable!()
}

// ---------------------------------------------------------------------------
// Defect reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationClass {
    Interior,
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchInfo {
    pub lambda_steps: usize,
    /// Endpoints available after filtering.
    pub endpoints: usize,
    /// Endpoints swept on the grid pass.
    pub searched: usize,
    pub stride: usize,
    pub exhaustive: bool,
    pub refined: bool,
    /// Evaluations that produced no value (undefined or inadmissible).
    pub skipped: u64,
}

/// Best triple found from one endpoint on the grid pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub y1: Point,
    pub y3: Point,
    pub lambda: f64,
    #[serde(with = "ext_f64")]
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    /// Supremum found; minus infinity when there was nothing to search.
    #[serde(with = "ext_f64")]
    pub sup_value: f64,
    pub argmax: Option<Triple>,
    pub location_class: Option<LocationClass>,
    pub evaluations: u64,
    pub search: SearchInfo,
    #[serde(default)]
    pub profile: Vec<ProfileRow>,
}

fn location_of(mask: &crate::domain::DomainMask, t: &Triple) -> LocationClass {
    if [t.y1, t.y2(), t.y3].iter().all(|&p| mask.domain.contains(p)) {
        LocationClass::Interior
    } else {
        LocationClass::Boundary
    }
}

fn to_triple(set: &EndpointSet, c: &Cand) -> Triple {
    Triple { y1: set.points[c.i], y3: set.points[c.j], lambda: c.lambda }
}

fn build_report(mask: &crate::domain::DomainMask, set: &EndpointSet, out: SweepOutcome, opts: &SearchOptions) -> DefectReport {
    let argmax = out.best.map(|c| to_triple(set, &c));
    let profile = out
        .rows
        .iter()
        .map(|c| ProfileRow { y1: set.points[c.i], y3: set.points[c.j], lambda: c.lambda, value: c.value })
        .collect();
    DefectReport {
        sup_value: out.best.map_or(f64::NEG_INFINITY, |c| c.value),
        location_class: argmax.as_ref().map(|t| location_of(mask, t)),
        argmax,
        evaluations: out.evaluations,
        search: SearchInfo {
            lambda_steps: opts.lambda_steps,
            endpoints: set.len(),
            searched: out.searched,
            stride: out.stride,
            exhaustive: out.stride == 1,
            refined: opts.refine,
            skipped: out.skipped,
        },
        profile,
    }
}

/// Supremum of the convexity value of `field` over triples with endpoints in `set`.
pub fn defect_sup_on(field: &dyn ScalarField, set: &EndpointSet, opts: &SearchOptions) -> Result<DefectReport, ConvexityError> {
    opts.validate()?;
    let mask = field.mask();
    let value = |i: usize, j: usize, lam: f64| {
        let y2 = set.points[i].mix(set.points[j], lam);
        let v2 = field.eval(y2);
        v2.is_finite().then(|| defect(set.values[i], v2, set.values[j], lam))
    };
    let engine = Engine::new(set, mask.h(), value);
    let (subset, stride) = coarse_subset(mask, set, opts.max_points);
    let out = engine.run(&subset, stride, opts);
    Ok(build_report(mask, set, out, opts))
}

/// Supremum of the convexity value over interior nodes and boundary samples with finite values.
pub fn defect_sup(field: &dyn ScalarField, opts: &SearchOptions) -> Result<DefectReport, ConvexityError> {
    defect_sup_on(field, &EndpointSet::of(field), opts)
}

/// The transform `−T`, so that concavity of `T(u)` is convexity of the result.
pub fn negated(t: &Transform) -> Transform {
    match t {
        Transform::Power(a) => Transform::NegPower(*a),
        Transform::NegPower(a) => Transform::Power(*a),
        Transform::Log => Transform::NegLog,
        Transform::NegLog => Transform::Log,
        Transform::Custom(c) => {
            let mut n = c.clone();
            let (f, df, d2f) = (c.f.clone(), c.df.clone(), c.d2f.clone());
            n.name = format!("-{}", c.name);
            n.f = Arc::new(move |s| -f(s));
            n.df = Arc::new(move |s| -df(s));
            n.d2f = Arc::new(move |s| -d2f(s));
            Transform::Custom(n)
        }
    }
}

/// Concavity defect of `T(u)`: the convexity defect of `−T(u)`.
///
/// With `min_base`, only endpoints where `u` is at least that value are used.
pub fn concavity_defect(
    u: &GridField,
    transform: &Transform,
    min_base: Option<f64>,
    opts: &SearchOptions,
) -> Result<DefectReport, ConvexityError> {
    let view = TransformedField::new(u, negated(transform))?;
    let mut set = EndpointSet::of(&view);
    if let Some(floor) = min_base {
        set = set.retain(|loc, _| u.loc_value(loc) >= floor);
    }
    defect_sup_on(&view, &set, opts)
}

// ---------------------------------------------------------------------------
// δ- and β-estimates

/// Polar sample grid of a closed ball, used for gradient-dependent terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZGrid {
    pub radius: f64,
    pub angles: usize,
    pub radii: usize,
}

impl ZGrid {
    pub fn new(radius: f64) -> Self {
        ZGrid { radius, angles: 8, radii: 4 }
    }

    /// The centre followed by `angles × radii` points.
    pub fn points(&self) -> Vec<Point> {
        let mut out = vec![Point::ORIGIN];
        for r in 1..=self.radii {
            let rho = self.radius * r as f64 / self.radii as f64;
            for a in 0..self.angles {
                let th = std::f64::consts::TAU * a as f64 / self.angles as f64;
                out.push(Point::new(rho * th.cos(), rho * th.sin()));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Nonnegative estimate.
    pub delta: f64,
    /// Signed supremum before clamping.
    #[serde(with = "ext_f64")]
    pub raw: f64,
    pub argmax: Option<Triple>,
    /// Gradient sample attaining the supremum, for gradient-dependent terms.
    pub z: Option<Point>,
    pub evaluations: u64,
    pub search: SearchInfo,
}

fn endpoint_values_valid(b: &Nonlinearity, set: &EndpointSet) -> Result<(), ConvexityError> {
    match (0..set.len()).find(|&n| !b.valid(set.values[n])) {
        Some(n) => Err(ConvexityError::Validity { name: b.name.clone(), x: set.points[n].x, y: set.points[n].y, s: set.values[n] }),
        None => Ok(()),
    }
}

fn delta_from(
    mask: &crate::domain::DomainMask,
    set: &EndpointSet,
    opts: &SearchOptions,
    value: impl Fn(usize, usize, f64) -> Option<f64> + Sync,
) -> DefectReport {
    let engine = Engine::new(set, mask.h(), value);
    let (subset, stride) = coarse_subset(mask, set, opts.max_points);
    let out = engine.run(&subset, stride, opts);
    build_report(mask, set, SweepOutcome { rows: Vec::new(), ..out }, opts)
}

/// Supremum over triples of the convexity value of `−b(·, u(·))` taken jointly,
/// with `s2` the same convex combination of the endpoint values as `y2`.
///
/// For gradient-dependent `b` the supremum also runs over `z_grid`.
pub fn delta_estimate_concavity(
    b: &Nonlinearity,
    u: &GridField,
    z_grid: Option<&ZGrid>,
    opts: &SearchOptions,
) -> Result<DeltaReport, ConvexityError> {
    opts.validate()?;
    let set = EndpointSet::of(u);
    endpoint_values_valid(b, &set)?;
    let mask = u.mask();
    let zs: Vec<Option<Point>> = match (b.is_z_dependent(), z_grid) {
        (true, Some(g)) => g.points().into_iter().map(Some).collect(),
        (true, None) => ZGrid::new(field_stats(u).gradient_bound).points().into_iter().map(Some).collect(),
        _ => vec![None],
    };
    let mut best: Option<(f64, DefectReport, Option<Point>)> = None;
    let mut evaluations = 0;
    for z in zs {
        let g = |y: Point, s: f64| match z {
            Some(z) => -b.eval_z(y, s, z),
            None => -b.eval(y, s),
        };
        let g_end: Vec<f64> = (0..set.len()).map(|n| g(set.points[n], set.values[n])).collect();
        let value = |i: usize, j: usize, lam: f64| {
            let y2 = set.points[i].mix(set.points[j], lam);
            let s2 = lam * set.values[i] + (1.0 - lam) * set.values[j];
            Some(defect(g_end[i], g(y2, s2), g_end[j], lam))
        };
        let rep = delta_from(mask, &set, opts, value);
        evaluations += rep.evaluations;
        if best.as_ref().is_none_or(|(v, _, _)| rep.sup_value > *v) {
            best = Some((rep.sup_value, rep, z));
        }
    }
    let (raw, rep, z) = best.expect("at least one gradient sample");
    Ok(DeltaReport { delta: raw.max(0.0), raw, argmax: rep.argmax, z, evaluations, search: rep.search })
}

/// Supremum over admissible triples of `−HC` of `b(·, u(·))` taken jointly;
/// inadmissible triples are skipped and counted.
pub fn delta_estimate_harmonic(b: &Nonlinearity, u: &GridField, opts: &SearchOptions) -> Result<DeltaReport, ConvexityError> {
    opts.validate()?;
    let set = EndpointSet::of(u);
    endpoint_values_valid(b, &set)?;
    let g_end: Vec<f64> = (0..set.len()).map(|n| b.eval(set.points[n], set.values[n])).collect();
    let value = |i: usize, j: usize, lam: f64| {
        let y2 = set.points[i].mix(set.points[j], lam);
        let s2 = lam * set.values[i] + (1.0 - lam) * set.values[j];
        harmonic_defect(g_end[i], b.eval(y2, s2), g_end[j], lam).map(|hc| -hc)
    };
    let rep = delta_from(u.mask(), &set, opts, value);
    Ok(DeltaReport {
        delta: rep.sup_value.max(0.0),
        raw: rep.sup_value,
        argmax: rep.argmax,
        z: None,
        evaluations: rep.evaluations,
        search: rep.search,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub beta: f64,
    pub at_x: Point,
    pub at_s: f64,
    pub x_samples: usize,
    pub s_samples: usize,
}

/// Infimum of `∂_s b` over `x_samples × {n_s equispaced values of s_range}`.
pub fn beta_estimate(b: &Nonlinearity, s_range: [f64; 2], x_samples: &[Point], n_s: usize) -> Result<BetaReport, ConvexityError> {
    if x_samples.is_empty() || n_s < 2 || !(s_range[0] <= s_range[1]) {
        return Err(ConvexityError::BadOption("beta estimate needs points, two s values and an ordered range".into()));
    }
    let mut rep = BetaReport { beta: f64::INFINITY, at_x: x_samples[0], at_s: s_range[0], x_samples: x_samples.len(), s_samples: n_s };
    for &x in x_samples {
        for k in 0..n_s {
            let s = s_range[0] + (s_range[1] - s_range[0]) * k as f64 / (n_s - 1) as f64;
            let d = b.ds(x, s);
            if d < rep.beta {
                rep.beta = d;
                rep.at_x = x;
                rep.at_s = s;
            }
        }
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Boundary checks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    /// Max of `t^(-1/α) u(y + t (z − y))` over the smallest decade of `t`.
    pub surrogate: f64,
    pub u_z: f64,
    pub pass: bool,
    pub t_min: f64,
    pub t_count: usize,
}

/// Boundary growth diagnostic along the segment from the boundary point `y` to `z`.
///
/// The default grid is geometric from 1 down to two grid spacings away from `y`.
pub fn boundary_growth_check(
    u: &GridField,
    alpha: f64,
    y: Point,
    z: Point,
    t_grid: Option<&[f64]>,
) -> Result<GrowthReport, ConvexityError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConvexityError::BadOption(format!("exponent {alpha} must lie in (0, 1)")));
    }
    let len = z.dist(y);
    if len == 0.0 {
        return Err(ConvexityError::BadOption("z must differ from y".into()));
    }
    let default_grid: Vec<f64>;
    let ts: &[f64] = match t_grid {
        Some(g) => {
            if g.is_empty() || g.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || g.windows(2).any(|w| w[1] >= w[0]) {
                return Err(ConvexityError::BadOption("t grid must be decreasing in (0, 1]".into()));
            }
            g
        }
        None => {
            let t_min = (2.0 * u.mask().h() / len).min(1.0);
            let n = 60;
            default_grid = (0..n).map(|k| t_min.powf(k as f64 / (n - 1) as f64)).collect();
            &default_grid
        }
    };
    let t_min = *ts.last().expect("nonempty");
    let u_z = u.interpolate(z)?;
    let mut surrogate = f64::NEG_INFINITY;
    for &t in ts.iter().filter(|&&t| t <= 10.0 * t_min) {
        let v = u.interpolate(y + (z - y) * t)?;
        surrogate = surrogate.max(t.powf(-1.0 / alpha) * v);
    }
    Ok(GrowthReport { surrogate, u_z, pass: surrogate > u_z, t_min, t_count: ts.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalSignReport {
    pub pass: bool,
    pub threshold: f64,
    /// Largest normal derivative over the samples.
    pub worst_value: f64,
    pub worst_sample: usize,
    pub worst_point: Point,
    pub samples: usize,
}

/// Whether the outward normal derivative is below `−τ` at every boundary sample.
///
/// The default `τ` is `10 h M` with `M` the estimated C² norm of `u`.
pub fn normal_sign_check(u: &GridField, tau: Option<f64>) -> Result<NormalSignReport, ConvexityError> {
    let mask = u.mask();
    let threshold = tau.unwrap_or_else(|| 10.0 * mask.h() * field_stats(u).big_m);
    let mut rep = NormalSignReport {
        pass: true,
        threshold,
        worst_value: f64::NEG_INFINITY,
        worst_sample: 0,
        worst_point: Point::ORIGIN,
        samples: mask.samples.len(),
    };
    for s in 0..mask.samples.len() {
        let d = u.normal_derivative(s)?;
        if d > rep.worst_value || d.is_nan() {
            rep.worst_value = d;
            rep.worst_sample = s;
            rep.worst_point = mask.samples[s].point;
        }
        if !(d < -threshold) {
            rep.pass = false;
        }
    }
    if mask.samples.is_empty() {
        rep.pass = false;
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Randomized property checks

/// Box of points and range of scalar arguments for random queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRegion {
    pub lo: Point,
    pub hi: Point,
    pub s_lo: f64,
    pub s_hi: f64,
}

impl SampleRegion {
    pub fn new(lo: Point, hi: Point, s_range: [f64; 2]) -> Self {
        SampleRegion { lo, hi, s_lo: s_range[0], s_hi: s_range[1] }
    }

    fn point(&self, rng: &mut ChaCha8Rng) -> Point {
        Point::new(self.lo.x + (self.hi.x - self.lo.x) * rng.random::<f64>(), self.lo.y + (self.hi.y - self.lo.y) * rng.random::<f64>())
    }

    fn scalar(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.s_lo + (self.s_hi - self.s_lo) * rng.random::<f64>()
    }

    /// The `k`-th query of a seeded stream; every 16th query pins `λ` to 0 or 1.
    fn query(&self, rng: &mut ChaCha8Rng, k: usize) -> HcQuery {
        let (y1, s1, y3, s3) = (self.point(rng), self.scalar(rng), self.point(rng), self.scalar(rng));
        let r: f64 = rng.random();
        let lambda = match k % 16 {
            0 => 0.0,
            8 => 1.0,
            _ => r,
        };
        HcQuery { y1, s1, y3, s3, lambda }
    }

    /// `n` seeded queries.
    pub fn queries(&self, n: usize, seed: u64) -> Vec<HcQuery> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|k| self.query(&mut rng, k)).collect()
    }
}

fn values3(g: &Nonlinearity, q: &HcQuery) -> (f64, f64, f64) {
    (g.eval(q.y1, q.s1), g.eval(q.y2(), q.s2()), g.eval(q.y3, q.s3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubaddReport {
    /// Max of `HC(f+g) − HC(f) − HC(g)`.
    #[serde(with = "ext_f64")]
    pub sum_violation: f64,
    /// Max of `HC(f) − HC(g) − HC(f−g)`.
    #[serde(with = "ext_f64")]
    pub diff_violation: f64,
    pub sum_admissible: usize,
    pub diff_admissible: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Sub-additivity of the harmonic convexity value on seeded queries where all
/// terms involved are admissible.
pub fn hc_subadd_check(f: &Nonlinearity, g: &Nonlinearity, region: &SampleRegion, samples: usize, seed: u64) -> SubaddReport {
    let qs = region.queries(samples, seed);
    let mut rep = SubaddReport {
        sum_violation: f64::NEG_INFINITY,
        diff_violation: f64::NEG_INFINITY,
        sum_admissible: 0,
        diff_admissible: 0,
        samples,
        seed,
    };
    for q in &qs {
        let (f1, f2, f3) = values3(f, q);
        let (g1, g2, g3) = values3(g, q);
        let hf = harmonic_defect(f1, f2, f3, q.lambda);
        let hg = harmonic_defect(g1, g2, g3, q.lambda);
        let hsum = harmonic_defect(f1 + g1, f2 + g2, f3 + g3, q.lambda);
        let hdiff = harmonic_defect(f1 - g1, f2 - g2, f3 - g3, q.lambda);
        if let (Some(a), Some(b), Some(c)) = (hsum, hf, hg) {
            rep.sum_admissible += 1;
            rep.sum_violation = rep.sum_violation.max(a - b - c);
        }
        if let (Some(a), Some(b), Some(c)) = (hf, hg, hdiff) {
            rep.diff_admissible += 1;
            rep.diff_violation = rep.diff_violation.max(a - b - c);
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Min of `HC − C` over positive-mix queries.
    #[serde(with = "ext_f64")]
    pub min_gap: f64,
    pub admissible: usize,
    pub samples: usize,
}

/// `HC ≥ C` on seeded positive-mix queries.
pub fn hc_dominance_check(g: &Nonlinearity, region: &SampleRegion, samples: usize, seed: u64) -> DominanceReport {
    let mut rep = DominanceReport { min_gap: f64::INFINITY, admissible: 0, samples };
    for q in region.queries(samples, seed) {
        let (g1, g2, g3) = values3(g, &q);
        if hc_case(g1, g3, q.lambda) != HcCase::PositiveMix {
            continue;
        }
        let hc = harmonic_defect(g1, g2, g3, q.lambda).expect("positive mix");
        rep.admissible += 1;
        rep.min_gap = rep.min_gap.min(hc - defect(g1, g2, g3, q.lambda));
    }
    rep
}

/// Asserted bounds for the ratio check: `2δ ≤ c < g ≤ C` on the box times `[−m, m]`,
/// and `g` δ-concave.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBounds {
    pub c: f64,
    pub big_c: f64,
    pub m: f64,
    pub delta: f64,
}

impl RatioBounds {
    /// `2 m² C / c³`.
    pub fn constant(&self) -> f64 {
        2.0 * self.m * self.m * self.big_c / self.c.powi(3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    /// Max of the joint convexity value of `s²/g`.
    #[serde(with = "ext_f64")]
    pub max_value: f64,
    /// `C1 δ`.
    pub bound: f64,
    /// Max of `value − C1 δ`.
    #[serde(with = "ext_f64")]
    pub max_excess: f64,
    pub probes: usize,
    pub samples: usize,
}

/// Checks that `s²/g` is `C1 δ`-convex jointly, after spot-verifying the asserted bounds.
pub fn ratio_convexity_check(
    g: &Nonlinearity,
    bounds: &RatioBounds,
    lo: Point,
    hi: Point,
    samples: usize,
    seed: u64,
) -> Result<RatioReport, ConvexityError> {
    let RatioBounds { c, big_c, m, delta } = *bounds;
    if !(2.0 * delta <= c && c > 0.0 && c < big_c && m >= 0.0) {
        return Err(ConvexityError::BadOption(format!("inconsistent bounds c = {c}, C = {big_c}, m = {m}, delta = {delta}")));
    }
    let region = SampleRegion::new(lo, hi, [-m, m]);
    let probes = samples.min(10_000);
    for q in region.queries(probes, seed ^ 0x9e37_79b9_7f4a_7c15) {
        for (y, s) in [(q.y1, q.s1), (q.y3, q.s3)] {
            let v = g.eval(y, s);
            if !(v > c && v <= big_c) {
                return Err(ConvexityError::BoundsViolated { what: format!("c < g <= C fails with g = {v}"), x: y.x, y: y.y, s });
            }
        }
        let (g1, g2, g3) = values3(g, &q);
        let concavity = -defect(g1, g2, g3, q.lambda);
        if concavity > delta + 1e-12 {
            return Err(ConvexityError::BoundsViolated {
                what: format!("delta-concavity fails with defect {concavity}"),
                x: q.y2().x,
                y: q.y2().y,
                s: q.s2(),
            });
        }
    }
    let bound = bounds.constant() * delta;
    let ratio = |y: Point, s: f64| s * s / g.eval(y, s);
    let mut rep = RatioReport { max_value: f64::NEG_INFINITY, bound, max_excess: f64::NEG_INFINITY, probes, samples };
    for q in region.queries(samples, seed) {
        let v = defect(ratio(q.y1, q.s1), ratio(q.y2(), q.s2()), ratio(q.y3, q.s3), q.lambda);
        rep.max_value = rep.max_value.max(v);
        rep.max_excess = rep.max_excess.max(v - bound);
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseReport {
    /// Min of `HC + C² δ` over admissible queries.
    #[serde(with = "ext_f64")]
    pub worst_margin: f64,
    #[serde(with = "ext_f64")]
    pub min_hc: f64,
    /// Max joint convexity value of `1/g` on the probes.
    #[serde(with = "ext_f64")]
    pub inverse_defect: f64,
    /// Whether the probes confirmed `0 < g < C` and `1/g` δ-convex.
    pub preconditions_hold: bool,
    pub admissible: usize,
    pub samples: usize,
}

/// Checks `HC_g ≥ −C² δ` on seeded queries.
pub fn inverse_convexity_check(g: &Nonlinearity, big_c: f64, delta: f64, region: &SampleRegion, samples: usize, seed: u64) -> InverseReport {
    let probes = samples.min(10_000);
    let mut pre = true;
    let mut inverse_defect = f64::NEG_INFINITY;
    for q in region.queries(probes, seed ^ 0x9e37_79b9_7f4a_7c15) {
        let (g1, g2, g3) = values3(g, &q);
        if [g1, g2, g3].iter().any(|&v| !(v > 0.0 && v < big_c)) {
            pre = false;
            continue;
        }
        let d = defect(1.0 / g1, 1.0 / g2, 1.0 / g3, q.lambda);
        inverse_defect = inverse_defect.max(d);
    }
    if inverse_defect > delta + 1e-12 {
        pre = false;
    }
    let mut rep = InverseReport {
        worst_margin: f64::INFINITY,
        min_hc: f64::INFINITY,
        inverse_defect,
        preconditions_hold: pre,
        admissible: 0,
        samples,
    };
    for q in region.queries(samples, seed) {
        let (g1, g2, g3) = values3(g, &q);
        if let Some(hc) = harmonic_defect(g1, g2, g3, q.lambda) {
            rep.admissible += 1;
            rep.min_hc = rep.min_hc.min(hc);
            rep.worst_margin = rep.worst_margin.min(hc + big_c * big_c * delta);
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConvexDomain, DomainMask};

    fn square_mask(h: f64) -> Arc<DomainMask> {
        Arc::new(DomainMask::with_spacing(&ConvexDomain::centered_square(1.0), h).unwrap())
    }

    fn exhaustive() -> SearchOptions {
        SearchOptions { max_points: usize::MAX, ..SearchOptions::default() }
    }

    #[test]
    fn pointwise_examples() {
        let mask = square_mask(0.25);
        let u = GridField::from_fn(&mask, |p| -p.x * p.x);
        let t = Triple::new(Point::new(-1.0, 0.0), Point::new(1.0, 0.0), 0.5).unwrap();
        assert!((convexity_value(&u, &t).unwrap() - 1.0).abs() < 1e-15);
        let sq = Nonlinearity::new("s^2", |_, s| s * s, |_, s| 2.0 * s);
        let q = HcQuery { y1: Point::ORIGIN, s1: 0.0, y3: Point::ORIGIN, s3: 2.0, lambda: 0.5 };
        assert_eq!(joint_convexity_value(&sq, &q).unwrap(), -1.0);
        let id = Nonlinearity::new("s", |_, s| s, |_, _| 1.0);
        let q = HcQuery { s1: 1.0, s3: 2.0, ..q };
        assert!((harmonic_convexity_value(&id, &q).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let c = Nonlinearity::constant(3.0);
        assert!(harmonic_convexity_value(&c, &HcQuery { lambda: 0.3, ..q }).unwrap().abs() < 1e-15);
        let zero_ends = HcQuery { s1: 0.0, s3: 0.0, ..q };
        assert_eq!(harmonic_convexity_value(&id, &zero_ends).unwrap(), 0.0);
        assert_eq!(zero_ends.case(&id), HcCase::BothZero);
        let neg = HcQuery { s1: -1.0, s3: -2.0, ..q };
        assert!(matches!(harmonic_convexity_value(&id, &neg), Err(ConvexityError::Inadmissible { .. })));
    }

    #[test]
    fn triple_rejects_bad_weight() {
        assert!(Triple::new(Point::ORIGIN, Point::ORIGIN, 1.5).is_err());
        assert!(Triple::new(Point::new(f64::NAN, 0.0), Point::ORIGIN, 0.5).is_err());
    }

    #[test]
    fn outside_point_is_an_error() {
        let mask = square_mask(0.25);
        let u = GridField::zeros(&mask);
        let t = Triple::new(Point::new(2.0, 0.0), Point::ORIGIN, 0.5).unwrap();
        assert!(matches!(convexity_value(&u, &t), Err(ConvexityError::OutsideDomain { .. })));
    }

    #[test]
    fn convex_field_has_zero_sup_at_degenerate_triple() {
        let mask = square_mask(0.25);
        let u = GridField::from_fn(&mask, |p| p.norm2());
        let rep = defect_sup(&u, &exhaustive()).unwrap();
        assert!(rep.sup_value.abs() <= 1e-14, "{:?}", rep.argmax);
        let t = rep.argmax.unwrap();
        assert!(t.y1 == t.y3 || t.lambda == 0.0 || t.lambda == 1.0);
    }

    #[test]
    fn negative_paraboloid_on_square() {
        let mask = square_mask(0.25);
        let u = GridField::from_fn(&mask, |p| -p.norm2());
        let rep = defect_sup(&u, &exhaustive()).unwrap();
        assert!((rep.sup_value - 2.0).abs() < 1e-12);
        let t = rep.argmax.unwrap();
        assert_eq!(t.lambda, 0.5);
        assert!((t.y1.dist(t.y3) - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.location_class, Some(LocationClass::Boundary));
    }

    #[test]
    fn empty_search_reports_sentinel() {
        let mask = square_mask(0.25);
        let u = GridField::zeros(&mask);
        let set = EndpointSet::of(&u).retain(|_, _| false);
        let rep = defect_sup_on(&u, &set, &exhaustive()).unwrap();
        assert_eq!(rep.sup_value, f64::NEG_INFINITY);
        assert!(rep.argmax.is_none());
        let json = serde_json::to_string(&rep).unwrap();
        assert_eq!(serde_json::from_str::<DefectReport>(&json).unwrap(), rep);
    }

    #[test]
    fn strided_sweep_with_refinement_finds_the_sup() {
        let mask = square_mask(1.0 / 16.0);
        let u = GridField::from_fn(&mask, |p| -(p.x * p.x) - 0.5 * p.y * p.y);
        let opts = SearchOptions { max_points: 200, refine: true, ..SearchOptions::default() };
        let rep = defect_sup(&u, &opts).unwrap();
        assert!(rep.search.stride > 1);
        assert!((rep.sup_value - 1.5).abs() < 1e-9, "{}", rep.sup_value);
    }

    #[test]
    fn sweep_paths_agree() {
        let mask = square_mask(0.125);
        let u = GridField::from_fn(&mask, |p| (3.0 * p.x).sin() * p.y + p.x * p.x * p.y);
        let s = defect_sup(&u, &SearchOptions { exec: Execution::Sequential, refine: true, max_points: 120, ..SearchOptions::default() }).unwrap();
        let p = defect_sup(&u, &SearchOptions { exec: Execution::Parallel, refine: true, max_points: 120, ..SearchOptions::default() }).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn delta_examples() {
        let mask = square_mask(0.25);
        let u = GridField::from_fn(&mask, |p| 0.5 + 0.25 * p.x * p.y);
        let lin = Nonlinearity::new("s", |_, s| s, |_, _| 1.0);
        let d = delta_estimate_concavity(&lin, &u, None, &exhaustive()).unwrap();
        assert!(d.delta.abs() <= 1e-15);
        let concave = Nonlinearity::new("s-s^2", |_, s| s - s * s, |_, s| 1.0 - 2.0 * s);
        let d = delta_estimate_concavity(&concave, &u, None, &exhaustive()).unwrap();
        assert_eq!(d.delta, 0.0);
        assert!(d.raw <= 1e-15);
        let convex = Nonlinearity::new("s^2", |_, s| s * s, |_, s| 2.0 * s);
        let d = delta_estimate_concavity(&convex, &u, None, &exhaustive()).unwrap();
        assert!(d.delta > 0.0);
        let c = Nonlinearity::constant(2.0);
        assert_eq!(delta_estimate_harmonic(&c, &u, &exhaustive()).unwrap().delta, 0.0);
        let positive_concave = Nonlinearity::new("1+s-s^2", |_, s| 1.0 + s - s * s, |_, s| 1.0 - 2.0 * s);
        assert!(delta_estimate_harmonic(&positive_concave, &u, &exhaustive()).unwrap().delta <= 1e-15);
        let restricted = Nonlinearity::power(0.5);
        let neg = GridField::from_fn(&mask, |p| p.x);
        assert!(matches!(delta_estimate_concavity(&restricted, &neg, None, &exhaustive()), Err(ConvexityError::Validity { .. })));
    }

    #[test]
    fn gradient_dependent_term_uses_the_ball() {
        let mask = square_mask(0.25);
        let u = GridField::from_fn(&mask, |p| 0.5 + 0.1 * p.x);
        let b = Nonlinearity::new("s", |_, s| s, |_, _| 1.0).with_z(|_, s, z| s + z.norm2() * s * s);
        let d = delta_estimate_concavity(&b, &u, Some(&ZGrid::new(1.0)), &exhaustive()).unwrap();
        assert!(d.delta > 0.0);
        assert!((d.z.unwrap().norm() - 1.0).abs() < 1e-12);
        assert_eq!(ZGrid::new(1.0).points().len(), 33);
    }

    #[test]
    fn beta_examples() {
        let xs = [Point::ORIGIN, Point::new(0.5, 0.5)];
        let lin = Nonlinearity::new("s", |_, s| s, |_, _| 1.0);
        assert_eq!(beta_estimate(&lin, [-1.0, 1.0], &xs, 11).unwrap().beta, 1.0);
        let exp = Nonlinearity::new("exp", |_, s: f64| s.exp(), |_, s: f64| s.exp());
        let r = beta_estimate(&exp, [-1.0, 1.0], &xs, 11).unwrap();
        assert!((r.beta - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(r.at_s, -1.0);
    }

    #[test]
    fn growth_check_flags_edge_value() {
        let mask = square_mask(0.125);
        let u = GridField::from_fn(&mask, |p| (1.0 - p.x.abs()) * (1.0 - p.y.abs()));
        let rep = boundary_growth_check(&u, 0.5, Point::new(1.0, 0.0), Point::ORIGIN, None).unwrap();
        assert!(rep.pass);
        assert!(boundary_growth_check(&u, 1.5, Point::new(1.0, 0.0), Point::ORIGIN, None).is_err());
        assert!(boundary_growth_check(&u, 0.5, Point::new(1.0, 0.0), Point::ORIGIN, Some(&[0.1, 0.5])).is_err());
    }

    #[test]
    fn zero_field_fails_normal_sign() {
        let mask = square_mask(0.125);
        assert!(!normal_sign_check(&GridField::zeros(&mask), None).unwrap().pass);
    }

    #[test]
    fn constant_subadditivity_is_exact_at_endpoints() {
        let c = Nonlinearity::constant(1.5);
        let region = SampleRegion::new(Point::new(-1.0, -1.0), Point::new(1.0, 1.0), [0.0, 1.0]);
        let rep = hc_subadd_check(&c, &c, &region, 64, 3);
        assert_eq!(rep.sum_violation, 0.0);
        assert!(rep.sum_admissible == 64);
        // f − g vanishes identically, so every difference query is a both-zero case.
        assert_eq!(rep.diff_violation, 0.0);
    }

    #[test]
    fn ratio_rejects_false_bounds() {
        let g = Nonlinearity::constant(1.0);
        let lo = Point::new(-1.0, -1.0);
        let hi = Point::new(1.0, 1.0);
        let ok = ratio_convexity_check(&g, &RatioBounds { c: 0.5, big_c: 1.0, m: 1.0, delta: 0.0 }, lo, hi, 1000, 1).unwrap();
        assert!(ok.max_excess <= 0.0);
        let bad = ratio_convexity_check(&g, &RatioBounds { c: 1.0, big_c: 2.0, m: 1.0, delta: 0.0 }, lo, hi, 1000, 1);
        assert!(matches!(bad, Err(ConvexityError::BoundsViolated { .. })));
    }
}
