//! Least concave majorants of sampled functions.
//!
//! In one dimension the envelope is the upper hull of the graph, built by a
//! monotone chain. In two dimensions the sample points are lifted to
//! `(x, y, u)` and the upper facets of their 3-D convex hull are located
//! above every sample; the hull is built by quickhull with adaptive-precision
//! orientation predicates. Envelopes are defined on the sample set only.
//!
//! The witness `envelope − gap/2` is the vertical shift of the envelope
//! closest to the input in the sup norm.

use crate::domain::Loc;
use crate::fields::{GridField, ScalarField};
use crate::geometry::Point;
use crate::serde_ext::ext_f64;
use robust::{orient2d, orient3d, Coord, Coord3D};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvelopeError {
    #[error("abscissae must be strictly increasing (index {0})")]
    Unsorted(usize),
    #[error("need at least {need} usable points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("all sample points are collinear")]
    Collinear,
    #[error("input lengths differ: {0} points and {1} values")]
    LengthMismatch(usize, usize),
}

/// Envelope of a 1-D sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope1d {
    pub envelope: Vec<f64>,
    pub witness: Vec<f64>,
    pub gap: f64,
    pub witness_distance: f64,
    pub argmax: usize,
}

/// Least concave majorant of `(xs, values)` evaluated at `xs`.
pub fn concave_envelope_1d(xs: &[f64], values: &[f64]) -> Result<Envelope1d, EnvelopeError> {
    if xs.len() != values.len() {
        return Err(EnvelopeError::LengthMismatch(xs.len(), values.len()));
    }
    if xs.len() < 2 {
        return Err(EnvelopeError::TooFewPoints { need: 2, got: xs.len() });
    }
    if let Some(i) = (0..xs.len()).find(|&i| !(xs[i].is_finite() && values[i].is_finite())) {
        return Err(EnvelopeError::NonFinite(i));
    }
    if let Some(i) = (1..xs.len()).find(|&i| !(xs[i] > xs[i - 1])) {
        return Err(EnvelopeError::Unsorted(i));
    }
    let pt = |i: usize| Coord { x: xs[i], y: values[i] };
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..xs.len() {
        // Drop the last vertex while it does not make a strict right turn.
        while hull.len() >= 2 && orient2d(pt(hull[hull.len() - 2]), pt(hull[hull.len() - 1]), pt(i)) >= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    let mut envelope = values.to_vec();
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for k in a + 1..b {
            let t = (xs[k] - xs[a]) / (xs[b] - xs[a]);
            envelope[k] = ((1.0 - t) * values[a] + t * values[b]).max(values[k]);
        }
    }
    let (gap, argmax) = gap_of(&envelope, values);
    let witness = envelope.iter().map(|e| e - 0.5 * gap).collect();
    Ok(Envelope1d { envelope, witness, gap, witness_distance: 0.5 * gap, argmax })
}

fn gap_of(envelope: &[f64], values: &[f64]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (i, (e, v)) in envelope.iter().zip(values).enumerate() {
        if v.is_finite() && e - v > best.0 {
            best = (e - v, i);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Lifted convex hull

#[derive(Clone, Debug)]
struct Face {
    v: [usize; 3],
    /// `nbr[k]` shares the edge `v[k] → v[k+1]`.
    nbr: [usize; 3],
    outside: Vec<usize>,
    alive: bool,
}

enum Hull {
    Faces(Vec<Face>),
    Coplanar,
}

fn c3(p: &[f64; 3]) -> Coord3D<f64> {
    Coord3D { x: p[0], y: p[1], z: p[2] }
}

fn c2(p: &[f64; 3]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

/// Positive when `d` lies strictly outside the face `(a, b, c)` oriented counterclockwise from outside.
fn above(pts: &[[f64; 3]], f: &[usize; 3], d: usize) -> f64 {
    -orient3d(c3(&pts[f[0]]), c3(&pts[f[1]]), c3(&pts[f[2]]), c3(&pts[d]))
}

fn initial_simplex(pts: &[[f64; 3]]) -> Result<Option<[usize; 4]>, EnvelopeError> {
    let n = pts.len();
    let lex = |a: usize, b: usize| pts[a][0].total_cmp(&pts[b][0]).then(pts[a][1].total_cmp(&pts[b][1]));
    let i0 = (0..n).min_by(|&a, &b| lex(a, b)).expect("nonempty");
    let i1 = (0..n).max_by(|&a, &b| lex(a, b)).expect("nonempty");
    if i0 == i1 {
        return Err(EnvelopeError::Collinear);
    }
    let i2 = (0..n)
        .map(|k| (orient2d(c2(&pts[i0]), c2(&pts[i1]), c2(&pts[k])).abs(), k))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .filter(|(a, _)| *a > 0.0)
        .map(|(_, k)| k)
        .ok_or(EnvelopeError::Collinear)?;
    let best = (0..n)
        .map(|k| (orient3d(c3(&pts[i0]), c3(&pts[i1]), c3(&pts[i2]), c3(&pts[k])).abs(), k))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("nonempty");
    Ok((best.0 > 0.0).then_some([i0, i1, i2, best.1]))
}

fn quickhull(pts: &[[f64; 3]]) -> Result<Hull, EnvelopeError> {
    let Some([a, b, c, d]) = initial_simplex(pts)? else {
        return Ok(Hull::Coplanar);
    };
    // Orient the base so that d is on the inner side.
    let (b, c) = if above(pts, &[a, b, c], d) > 0.0 { (c, b) } else { (b, c) };
    let mut faces = vec![
        Face { v: [a, b, c], nbr: [0; 3], outside: Vec::new(), alive: true },
        Face { v: [a, d, b], nbr: [0; 3], outside: Vec::new(), alive: true },
        Face { v: [b, d, c], nbr: [0; 3], outside: Vec::new(), alive: true },
        Face { v: [c, d, a], nbr: [0; 3], outside: Vec::new(), alive: true },
    ];
    link_all(&mut faces);
    let simplex = [a, b, c, d];
    for p in 0..pts.len() {
        if simplex.contains(&p) {
            continue;
        }
        if let Some(f) = (0..4).find(|&f| above(pts, &faces[f].v, p) > 0.0) {
            faces[f].outside.push(p);
        }
    }
    let mut stack: Vec<usize> = (0..4).collect();
    let mut visible_mark: Vec<u32> = vec![0; 4];
    let mut stamp = 0u32;
    while let Some(f0) = stack.pop() {
        if !faces[f0].alive || faces[f0].outside.is_empty() {
            continue;
        }
        stamp += 1;
        let apex = *faces[f0]
            .outside
            .iter()
            .max_by(|&&x, &&y| above(pts, &faces[f0].v, x).total_cmp(&above(pts, &faces[f0].v, y)).then(y.cmp(&x)))
            .expect("nonempty");
        // Visible region by flood fill from f0.
        let mut visible = vec![f0];
        visible_mark[f0] = stamp;
        let mut k = 0;
        while k < visible.len() {
            let f = visible[k];
            k += 1;
            for &g in &faces[f].nbr {
                if visible_mark[g] != stamp && above(pts, &faces[g].v, apex) > 0.0 {
                    visible_mark[g] = stamp;
                    visible.push(g);
                }
            }
        }
        // Horizon edges, each with the hidden face across it.
        let mut horizon: Vec<(usize, usize, usize)> = Vec::new();
        for &f in &visible {
            for e in 0..3 {
                let g = faces[f].nbr[e];
                if visible_mark[g] != stamp {
                    horizon.push((faces[f].v[e], faces[f].v[(e + 1) % 3], g));
                }
            }
        }
        let mut orphans: Vec<usize> = Vec::new();
        for &f in &visible {
            faces[f].alive = false;
            orphans.append(&mut faces[f].outside);
        }
        let first = faces.len();
        let mut by_start: HashMap<usize, usize> = HashMap::with_capacity(horizon.len());
        for (n, &(u, v, g)) in horizon.iter().enumerate() {
            let id = first + n;
            faces.push(Face { v: [u, v, apex], nbr: [g, usize::MAX, usize::MAX], outside: Vec::new(), alive: true });
            visible_mark.push(0);
            let slot = faces[g].v.iter().position(|&x| x == v).expect("shared edge");
            debug_assert_eq!(faces[g].v[(slot + 1) % 3], u);
            faces[g].nbr[slot] = id;
            by_start.insert(u, id);
        }
        for n in 0..horizon.len() {
            let id = first + n;
            let (u, v, _) = horizon[n];
            // Edge v → apex is shared with the face starting at v; apex → u with the face ending at u.
            let next = by_start[&v];
            faces[id].nbr[1] = next;
            faces[next].nbr[2] = id;
            let _ = u;
        }
        for q in orphans {
            if q == apex {
                continue;
            }
            if let Some(f) = (first..faces.len()).find(|&f| above(pts, &faces[f].v, q) > 0.0) {
                faces[f].outside.push(q);
            }
        }
        stack.extend(first..faces.len());
    }
    Ok(Hull::Faces(faces.into_iter().filter(|f| f.alive).collect()))
}

fn link_all(faces: &mut [Face]) {
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for (f, face) in faces.iter().enumerate() {
        for e in 0..3 {
            edges.insert((face.v[e], face.v[(e + 1) % 3]), f);
        }
    }
    for face in faces.iter_mut() {
        for e in 0..3 {
            face.nbr[e] = edges[&(face.v[(e + 1) % 3], face.v[e])];
        }
    }
}

// ---------------------------------------------------------------------------
// Scattered 2-D envelopes

/// Envelope of scattered samples `(points, values)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEnvelope {
    pub envelope: Vec<f64>,
    pub gap: f64,
    pub witness_distance: f64,
    pub argmax: usize,
    /// Number of upper facets of the lifted hull (0 when the samples are coplanar).
    pub facets: usize,
}

/// Least concave majorant over the finite samples; non-finite inputs are
/// assigned the envelope value where their location is covered, and kept otherwise.
pub fn concave_envelope_points(points: &[Point], values: &[f64]) -> Result<PointEnvelope, EnvelopeError> {
    if points.len() != values.len() {
        return Err(EnvelopeError::LengthMismatch(points.len(), values.len()));
    }
    if let Some(i) = (0..points.len()).find(|&i| !points[i].is_finite() || values[i].is_nan()) {
        return Err(EnvelopeError::NonFinite(i));
    }
    // Distinct locations keep their largest finite value.
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let mut lifted: Vec<[f64; 3]> = Vec::new();
    let mut owner = vec![usize::MAX; points.len()];
    for (i, (p, &v)) in points.iter().zip(values).enumerate() {
        if !v.is_finite() {
            continue;
        }
        let key = ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits());
        let slot = *index.entry(key).or_insert_with(|| {
            lifted.push([p.x, p.y, f64::NEG_INFINITY]);
            lifted.len() - 1
        });
        lifted[slot][2] = lifted[slot][2].max(v);
        owner[i] = slot;
    }
    if lifted.len() < 3 {
        return Err(EnvelopeError::TooFewPoints { need: 3, got: lifted.len() });
    }
    let faces = match quickhull(&lifted)? {
        Hull::Coplanar => {
            let envelope: Vec<f64> = (0..points.len()).map(|i| if owner[i] == usize::MAX { values[i] } else { lifted[owner[i]][2] }).collect();
            let (gap, argmax) = gap_of(&envelope, values);
            return Ok(PointEnvelope { envelope, gap, witness_distance: 0.5 * gap, argmax, facets: 0 });
        }
        Hull::Faces(f) => f,
    };
    let upper: Vec<[usize; 3]> =
        faces.iter().map(|f| f.v).filter(|v| orient2d(c2(&lifted[v[0]]), c2(&lifted[v[1]]), c2(&lifted[v[2]])) > 0.0).collect();
    let locator = Locator::new(&lifted, &upper);
    let envelope: Vec<f64> = (0..points.len())
        .map(|i| match locator.value_at(points[i]) {
            // The plane lies above every sample; the max only absorbs round-off.
            Some(e) if values[i].is_finite() => e.max(values[i]),
            Some(e) => e,
            None => values[i],
        })
        .collect();
    let (gap, argmax) = gap_of(&envelope, values);
    Ok(PointEnvelope { envelope, gap, witness_distance: 0.5 * gap, argmax, facets: upper.len() })
}

/// Bucketed lookup of the projected upper facets.
struct Locator<'a> {
    pts: &'a [[f64; 3]],
    tris: &'a [[usize; 3]],
    origin: Point,
    cell: f64,
    dims: (usize, usize),
    buckets: Vec<Vec<u32>>,
}

impl<'a> Locator<'a> {
    fn new(pts: &'a [[f64; 3]], tris: &'a [[usize; 3]]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            lo = [lo[0].min(p[0]), lo[1].min(p[1])];
            hi = [hi[0].max(p[0]), hi[1].max(p[1])];
        }
        let side = ((pts.len() as f64).sqrt().ceil() as usize).max(1);
        let cell = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / side as f64).max(f64::MIN_POSITIVE);
        let dims = (((hi[0] - lo[0]) / cell) as usize + 1, ((hi[1] - lo[1]) / cell) as usize + 1);
        let mut loc = Locator { pts, tris, origin: Point::new(lo[0], lo[1]), cell, dims, buckets: vec![Vec::new(); dims.0 * dims.1] };
        for (t, tri) in tris.iter().enumerate() {
            let xs = tri.map(|v| pts[v][0]);
            let ys = tri.map(|v| pts[v][1]);
            let (bx0, by0) = loc.bucket(xs.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::INFINITY, f64::min));
            let (bx1, by1) = loc.bucket(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    loc.buckets[by * dims.0 + bx].push(t as u32);
                }
            }
        }
        loc
    }

    fn bucket(&self, x: f64, y: f64) -> (usize, usize) {
        let bx = (((x - self.origin.x) / self.cell).max(0.0) as usize).min(self.dims.0 - 1);
        let by = (((y - self.origin.y) / self.cell).max(0.0) as usize).min(self.dims.1 - 1);
        (bx, by)
    }

    /// Height of the upper hull above `p`, if `p` is covered.
    fn value_at(&self, p: Point) -> Option<f64> {
        let (bx, by) = self.bucket(p.x, p.y);
        let q = Coord { x: p.x, y: p.y };
        let mut best: Option<f64> = None;
        for &t in &self.buckets[by * self.dims.0 + bx] {
            let [a, b, c] = self.tris[t as usize];
            let (pa, pb, pc) = (c2(&self.pts[a]), c2(&self.pts[b]), c2(&self.pts[c]));
            let wa = orient2d(pb, pc, q);
            let wb = orient2d(pc, pa, q);
            let wc = orient2d(pa, pb, q);
            if wa >= 0.0 && wb >= 0.0 && wc >= 0.0 {
                let s = wa + wb + wc;
                let z = (wa * self.pts[a][2] + wb * self.pts[b][2] + wc * self.pts[c][2]) / s;
                best = Some(best.map_or(z, |x: f64| x.max(z)));
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Grid fields

/// Envelope of a grid field over its interior nodes and boundary samples.
#[derive(Clone, Debug)]
pub struct EnvelopeResult {
    pub envelope: GridField,
    pub witness: GridField,
    pub gap: f64,
    pub witness_distance: f64,
    /// Location where the gap is attained.
    pub argmax: Point,
    pub facets: usize,
}

/// JSON summary of an envelope computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSummary {
    pub gap: f64,
    pub witness_distance: f64,
    pub argmax: Point,
}

impl EnvelopeResult {
    pub fn summary(&self) -> EnvelopeSummary {
        EnvelopeSummary { gap: self.gap, witness_distance: self.witness_distance, argmax: self.argmax }
    }
}

/// Least concave majorant of `u` on the node set of its mask.
pub fn concave_envelope_2d(u: &GridField) -> Result<EnvelopeResult, EnvelopeError> {
    let mask = u.mask_arc().clone();
    let locs: Vec<Loc> = mask.interior.iter().map(|&k| Loc::Node(k)).chain((0..mask.samples.len()).map(Loc::Sample)).collect();
    let points: Vec<Point> = locs.iter().map(|&l| mask.loc_point(l)).collect();
    let values: Vec<f64> = locs.iter().map(|&l| u.loc_value(l)).collect();
    let env = concave_envelope_points(&points, &values)?;
    let mut nodes = vec![f64::NAN; mask.grid.node_count()];
    let mut samples = vec![f64::NAN; mask.samples.len()];
    for (l, e) in locs.iter().zip(&env.envelope) {
        match *l {
            Loc::Node(k) => nodes[k] = *e,
            Loc::Sample(s) => {
                samples[s] = *e;
                if let crate::domain::SampleKind::Node(k) = mask.samples[s].kind {
                    nodes[k] = *e;
                }
            }
        }
    }
    let extended = u.is_extended();
    let envelope = GridField::from_parts(&mask, nodes, samples, extended).expect("lengths match");
    let shift = 0.5 * env.gap;
    let witness = envelope.map(|v| v - shift);
    Ok(EnvelopeResult {
        envelope,
        witness,
        gap: env.gap,
        witness_distance: env.witness_distance,
        argmax: points[env.argmax],
        facets: env.facets,
    })
}

/// Empirical constant `witness_distance / δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyersUlamRatio {
    #[serde(with = "ext_f64")]
    pub ratio: f64,
    pub witness_distance: f64,
    pub delta: f64,
    pub diagnostic: Option<String>,
}

/// Ratio of a witness distance to a δ-estimate; `δ = 0` yields infinity (or 0 for a zero gap).
pub fn ratio_from(witness_distance: f64, delta: f64) -> HyersUlamRatio {
    let (ratio, diagnostic) = if delta > 0.0 {
        (witness_distance / delta, None)
    } else if witness_distance > 0.0 {
        (f64::INFINITY, Some("zero delta with a positive gap: the gap is discretization dominated".to_string()))
    } else {
        (0.0, Some("zero delta and zero gap".to_string()))
    };
    HyersUlamRatio { ratio, witness_distance, delta, diagnostic }
}

/// Envelope witness distance of `u` divided by `delta`.
pub fn hyers_ulam_ratio(u: &GridField, delta: f64) -> Result<HyersUlamRatio, EnvelopeError> {
    Ok(ratio_from(concave_envelope_2d(u)?.witness_distance, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConvexDomain, DomainMask};
    use std::sync::Arc;

    #[test]
    fn one_dimensional_examples() {
        let xs = [0.0, 0.5, 1.0];
        let hat = concave_envelope_1d(&xs, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(hat.envelope, vec![0.0, 1.0, 0.0]);
        assert_eq!(hat.gap, 0.0);
        let dip = concave_envelope_1d(&xs, &[0.0, -1.0, 0.0]).unwrap();
        assert_eq!(dip.envelope, vec![0.0, 0.0, 0.0]);
        assert_eq!(dip.gap, 1.0);
        assert_eq!(dip.witness_distance, 0.5);
        assert_eq!(dip.argmax, 1);
        assert_eq!(dip.witness, vec![-0.5, -0.5, -0.5]);
        assert_eq!(concave_envelope_1d(&[0.0, 0.0], &[1.0, 2.0]), Err(EnvelopeError::Unsorted(1)));
        assert!(concave_envelope_1d(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn plane_is_its_own_envelope() {
        let pts: Vec<Point> = (0..25).map(|k| Point::new((k % 5) as f64, (k / 5) as f64)).collect();
        let vals: Vec<f64> = pts.iter().map(|p| 1.0 + 2.0 * p.x - p.y).collect();
        let env = concave_envelope_points(&pts, &vals).unwrap();
        assert_eq!(env.envelope, vals);
        assert_eq!(env.facets, 0);
        let line: Vec<Point> = (0..5).map(|k| Point::new(k as f64, k as f64)).collect();
        assert_eq!(concave_envelope_points(&line, &[0.0; 5]), Err(EnvelopeError::Collinear));
    }

    #[test]
    fn tent_of_a_convex_bowl() {
        let mask = Arc::new(DomainMask::with_spacing(&ConvexDomain::centered_square(1.0), 0.25).unwrap());
        let u = GridField::from_fn(&mask, |p| p.norm2());
        let env = concave_envelope_2d(&u).unwrap();
        // Corners carry 2; the envelope over the square is the constant 2.
        for &k in &mask.interior {
            assert!((env.envelope.node(k) - 2.0).abs() < 1e-12);
        }
        assert!((env.gap - 2.0).abs() < 1e-12);
        assert_eq!(env.argmax, Point::ORIGIN);
        assert!((env.witness_distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concave_paraboloid_has_no_gap() {
        let mask = Arc::new(DomainMask::with_spacing(&ConvexDomain::unit_disk(), 1.0 / 16.0).unwrap());
        let u = GridField::from_fn(&mask, |p| 1.0 - p.norm2());
        let env = concave_envelope_2d(&u).unwrap();
        assert!(env.gap <= 1e-10, "{}", env.gap);
    }

    #[test]
    fn ratio_sentinels() {
        assert_eq!(ratio_from(0.5, 0.25).ratio, 2.0);
        let r = ratio_from(0.5, 0.0);
        assert_eq!(r.ratio, f64::INFINITY);
        assert!(r.diagnostic.is_some());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<HyersUlamRatio>(&json).unwrap(), r);
    }
}
