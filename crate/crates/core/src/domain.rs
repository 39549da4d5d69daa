//! Convex planar domains, uniform grids and the node masks built from them.
//!
//! A [`DomainMask`] classifies every grid node as interior, boundary or
//! exterior, records for each interior node the distance to the boundary
//! along the four grid axes, and collects the boundary samples (boundary
//! nodes plus axis cut points) together with their outward unit normals.
//! Cells crossed by the boundary carry a precomputed fan triangulation so
//! that fields can be evaluated anywhere in the closed domain.

use crate::geometry::{BBox, Point};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not strictly convex and counter-clockwise at vertex {0}")]
    NotConvex(usize),
    #[error("invalid domain parameter: {0}")]
    BadParameter(String),
    #[error("grid needs at least 3 nodes per axis, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("grid spacing differs between axes: hx={hx}, hy={hy}")]
    AnisotropicGrid { hx: f64, hy: f64 },
    #[error("grid bounding box does not strictly contain the domain")]
    BBoxTooSmall,
    #[error("grid too coarse: no interior node")]
    NoInteriorNode,
    #[error("interior nodes split into {0} disconnected components")]
    Disconnected(usize),
}

/// Analytic description of a bounded convex region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexDomain {
    Disk { center: Point, radius: f64 },
    /// Axis-aligned ellipse with semi-axes `[a, b]` along x and y.
    Ellipse { center: Point, semi_axes: [f64; 2] },
    /// Vertices in counter-clockwise order.
    Polygon { vertices: Vec<Point> },
}

impl ConvexDomain {
    pub fn unit_disk() -> Self {
        ConvexDomain::Disk { center: Point::ORIGIN, radius: 1.0 }
    }

    pub fn unit_square() -> Self {
        ConvexDomain::Polygon {
            vertices: vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
        }
    }

    /// Square `[-r, r]^2`.
    pub fn centered_square(r: f64) -> Self {
        ConvexDomain::Polygon {
            vertices: vec![
                Point::new(-r, -r),
                Point::new(r, -r),
                Point::new(r, r),
                Point::new(-r, r),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        match self {
            ConvexDomain::Disk { center, radius } => {
                if !(radius.is_finite() && *radius > 0.0 && center.is_finite()) {
                    return Err(DomainError::BadParameter(format!("disk radius {radius}")));
                }
            }
            ConvexDomain::Ellipse { center, semi_axes } => {
                if !(semi_axes.iter().all(|a| a.is_finite() && *a > 0.0) && center.is_finite()) {
                    return Err(DomainError::BadParameter(format!("ellipse semi-axes {semi_axes:?}")));
                }
            }
            ConvexDomain::Polygon { vertices } => {
                let n = vertices.len();
                if n < 3 {
                    return Err(DomainError::TooFewVertices(n));
                }
                for i in 0..n {
                    let a = vertices[(i + n - 1) % n];
                    let b = vertices[i];
                    let c = vertices[(i + 1) % n];
                    if !b.is_finite() || (b - a).cross(c - b) <= 0.0 {
                        return Err(DomainError::NotConvex(i));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn strictly_convex(&self) -> bool {
        !matches!(self, ConvexDomain::Polygon { .. })
    }

    pub fn bbox(&self) -> BBox {
        match self {
            ConvexDomain::Disk { center, radius } => BBox {
                xmin: center.x - radius,
                xmax: center.x + radius,
                ymin: center.y - radius,
                ymax: center.y + radius,
            },
            ConvexDomain::Ellipse { center, semi_axes: [a, b] } => BBox {
                xmin: center.x - a,
                xmax: center.x + a,
                ymin: center.y - b,
                ymax: center.y + b,
            },
            ConvexDomain::Polygon { vertices } => {
                let mut bb = BBox {
                    xmin: f64::INFINITY,
                    xmax: f64::NEG_INFINITY,
                    ymin: f64::INFINITY,
                    ymax: f64::NEG_INFINITY,
                };
                for v in vertices {
                    bb.xmin = bb.xmin.min(v.x);
                    bb.xmax = bb.xmax.max(v.x);
                    bb.ymin = bb.ymin.min(v.y);
                    bb.ymax = bb.ymax.max(v.y);
                }
                bb
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            ConvexDomain::Disk { radius, .. } => 2.0 * radius,
            ConvexDomain::Ellipse { semi_axes: [a, b], .. } => 2.0 * a.max(*b),
            ConvexDomain::Polygon { vertices } => {
                let mut d: f64 = 0.0;
                for (i, p) in vertices.iter().enumerate() {
                    for q in &vertices[i + 1..] {
                        d = d.max(p.dist(*q));
                    }
                }
                d
            }
        }
    }

    /// Membership tolerance used for boundary classification.
    pub fn tolerance(&self) -> f64 {
        1e-12 * self.diameter()
    }

    /// Signed distance-like level: negative inside, zero on the boundary.
    /// Exact signed distance for disks and ellipses, and inside polygons.
    pub fn level(&self, p: Point) -> f64 {
        match self {
            ConvexDomain::Disk { center, radius } => (p - *center).norm() - radius,
            ConvexDomain::Ellipse { center, semi_axes: [a, b] } => {
                let q = p - *center;
                let (c, _) = ellipse_closest(*a, *b, q);
                let d = q.dist(c);
                let f = (q.x / a).powi(2) + (q.y / b).powi(2) - 1.0;
                if f < 0.0 {
                    -d
                } else {
                    d
                }
            }
            ConvexDomain::Polygon { vertices } => {
                let n = vertices.len();
                let mut worst = f64::NEG_INFINITY;
                for i in 0..n {
                    let (v, nrm) = edge_normal(vertices, i);
                    worst = worst.max((p - v).dot(nrm));
                }
                worst
            }
        }
    }

    /// True iff `p` lies in the open interior.
    pub fn contains(&self, p: Point) -> bool {
        self.level(p) < -self.tolerance()
    }

    /// True iff `p` lies in the closure, up to `slack` (absolute length).
    pub fn contains_closed(&self, p: Point, slack: f64) -> bool {
        self.level(p) <= slack
    }

    /// Nearest boundary point and the outward unit normal there.
    ///
    /// The centre of a disk projects to `center + (radius, 0)` with normal `(1, 0)`.
    pub fn boundary_projection(&self, p: Point) -> (Point, Point) {
        match self {
            ConvexDomain::Disk { center, radius } => {
                let d = p - *center;
                let n = d.normalized();
                (*center + n * *radius, n)
            }
            ConvexDomain::Ellipse { center, semi_axes: [a, b] } => {
                let (c, n) = ellipse_closest(*a, *b, p - *center);
                (*center + c, n)
            }
            ConvexDomain::Polygon { vertices } => {
                let n = vertices.len();
                let mut best = (f64::INFINITY, Point::ORIGIN, Point::ORIGIN);
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let e = b - a;
                    let t = ((p - a).dot(e) / e.norm2()).clamp(0.0, 1.0);
                    let q = a + e * t;
                    let d = p.dist(q);
                    if d < best.0 {
                        let normal = if t > 0.0 && t < 1.0 {
                            edge_normal(vertices, i).1
                        } else {
                            let vi = if t <= 0.0 { i } else { (i + 1) % n };
                            vertex_normal(vertices, vi, p)
                        };
                        best = (d, q, normal);
                    }
                }
                (best.1, best.2)
            }
        }
    }

    /// Outward unit normal at a boundary point.
    pub fn outward_normal(&self, b: Point) -> Point {
        self.boundary_projection(b).1
    }

    /// Distance from an interior point along the unit direction `dir` to the boundary.
    pub fn ray_exit(&self, p: Point, dir: Point) -> f64 {
        match self {
            ConvexDomain::Disk { center, radius } => {
                let q = p - *center;
                let b = q.dot(dir);
                let c = q.norm2() - radius * radius;
                let disc = (b * b - c).max(0.0);
                (-b + disc.sqrt()).max(0.0)
            }
            ConvexDomain::Ellipse { center, semi_axes: [a, b] } => {
                let q = p - *center;
                let qs = Point::new(q.x / a, q.y / b);
                let ds = Point::new(dir.x / a, dir.y / b);
                let aa = ds.norm2();
                let bb = qs.dot(ds);
                let cc = qs.norm2() - 1.0;
                let disc = (bb * bb - aa * cc).max(0.0);
                ((-bb + disc.sqrt()) / aa).max(0.0)
            }
            ConvexDomain::Polygon { vertices } => {
                let mut t = f64::INFINITY;
                for i in 0..vertices.len() {
                    let (v, nrm) = edge_normal(vertices, i);
                    let rate = nrm.dot(dir);
                    if rate > 0.0 {
                        let sd = (p - v).dot(nrm);
                        t = t.min((-sd / rate).max(0.0));
                    }
                }
                t
            }
        }
    }

    /// Boundary point at parameter `t` in `[0, 1)`, traversed counter-clockwise.
    pub fn boundary_point(&self, t: f64) -> Point {
        let ang = 2.0 * std::f64::consts::PI * t;
        match self {
            ConvexDomain::Disk { center, radius } => {
                *center + Point::new(ang.cos(), ang.sin()) * *radius
            }
            ConvexDomain::Ellipse { center, semi_axes: [a, b] } => {
                *center + Point::new(a * ang.cos(), b * ang.sin())
            }
            ConvexDomain::Polygon { vertices } => {
                let n = vertices.len();
                let lens: Vec<f64> =
                    (0..n).map(|i| vertices[i].dist(vertices[(i + 1) % n])).collect();
                let total: f64 = lens.iter().sum();
                let mut s = t.rem_euclid(1.0) * total;
                for i in 0..n {
                    if s <= lens[i] || i == n - 1 {
                        let f = (s / lens[i]).min(1.0);
                        return vertices[(i + 1) % n].mix(vertices[i], f);
                    }
                    s -= lens[i];
                }
                vertices[0]
            }
        }
    }

    /// Samples `n_samples` boundary points and checks that every pairwise
    /// midpoint of distinct samples is interior.
    pub fn strict_convexity_check(&self, n_samples: usize) -> bool {
        let n = n_samples.max(2);
        let pts: Vec<Point> = (0..n).map(|k| self.boundary_point(k as f64 / n as f64)).collect();
        for i in 0..n {
            for j in i + 1..n {
                if pts[i].dist(pts[j]) <= self.tolerance() {
                    continue;
                }
                if !self.contains(pts[i].mix(pts[j], 0.5)) {
                    return false;
                }
            }
        }
        true
    }

    /// A point well inside the domain.
    pub fn center(&self) -> Point {
        match self {
            ConvexDomain::Disk { center, .. } | ConvexDomain::Ellipse { center, .. } => *center,
            ConvexDomain::Polygon { vertices } => {
                let n = vertices.len() as f64;
                let s = vertices.iter().fold(Point::ORIGIN, |acc, v| acc + *v);
                s * (1.0 / n)
            }
        }
    }
}

fn edge_normal(vertices: &[Point], i: usize) -> (Point, Point) {
    let a = vertices[i];
    let b = vertices[(i + 1) % vertices.len()];
    let e = b - a;
    (a, Point::new(e.y, -e.x).normalized())
}

fn vertex_normal(vertices: &[Point], i: usize, p: Point) -> Point {
    let n = vertices.len();
    let v = vertices[i];
    let d = p - v;
    let n_prev = edge_normal(vertices, (i + n - 1) % n).1;
    let n_next = edge_normal(vertices, i).1;
    if d.norm() > 0.0 && d.dot(n_prev) >= 0.0 && d.dot(n_next) >= 0.0 {
        d.normalized()
    } else {
        (n_prev + n_next).normalized()
    }
}

/// Closest point on the ellipse `(x/a)^2 + (y/b)^2 = 1` to `q`, with the outward normal there.
fn ellipse_closest(a: f64, b: f64, q: Point) -> (Point, Point) {
    let (qx, qy) = (q.x.abs(), q.y.abs());
    let swap = a < b;
    let (e0, e1, y0, y1) = if swap { (b, a, qy, qx) } else { (a, b, qx, qy) };
    let (x0, x1) = if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1) * (e0 / e1);
                let sbar = ellipse_root(r0, z0, z1, g);
                (r0 * y0 / (sbar + r0), y1 / (sbar + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xde0 = numer / denom;
            (e0 * xde0, e1 * (1.0 - xde0 * xde0).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    };
    let (px, py) = if swap { (x1, x0) } else { (x0, x1) };
    let cx = if q.x < 0.0 { -px } else { px };
    let cy = if q.y < 0.0 { -py } else { py };
    let pt = Point::new(cx, cy);
    let n = Point::new(cx / (a * a), cy / (b * b)).normalized();
    (pt, n)
}

fn ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let gv = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if gv > 0.0 {
            s0 = s;
        } else if gv < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Uniform node lattice on an axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub bbox: BBox,
    pub h: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, bbox: BBox) -> Result<Self, DomainError> {
        if nx < 3 || ny < 3 {
            return Err(DomainError::GridTooSmall { nx, ny });
        }
        let hx = bbox.width() / (nx - 1) as f64;
        let hy = bbox.height() / (ny - 1) as f64;
        if !(hx > 0.0 && hy > 0.0) || (hx - hy).abs() > 1e-9 * hx.max(hy) {
            return Err(DomainError::AnisotropicGrid { hx, hy });
        }
        Ok(GridSpec { nx, ny, bbox, h: hx })
    }

    /// Square-celled grid of spacing `h` around `domain`, centred on the
    /// domain's bounding-box centre with `margin` extra nodes on each side.
    pub fn covering(domain: &ConvexDomain, h: f64, margin: usize) -> Result<Self, DomainError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(DomainError::BadParameter(format!("grid spacing {h}")));
        }
        let bb = domain.bbox();
        let cx = 0.5 * (bb.xmin + bb.xmax);
        let cy = 0.5 * (bb.ymin + bb.ymax);
        let kx = (0.5 * bb.width() / h - 1e-9).ceil() as usize + margin.max(1);
        let ky = (0.5 * bb.height() / h - 1e-9).ceil() as usize + margin.max(1);
        let bbox = BBox {
            xmin: cx - kx as f64 * h,
            xmax: cx + kx as f64 * h,
            ymin: cy - ky as f64 * h,
            ymax: cy + ky as f64 * h,
        };
        Ok(GridSpec { nx: 2 * kx + 1, ny: 2 * ky + 1, bbox, h })
    }

    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node % self.nx, node / self.nx)
    }

    pub fn node_point(&self, node: usize) -> Point {
        let (i, j) = self.ij(node);
        Point::new(self.bbox.xmin + i as f64 * self.h, self.bbox.ymin + j as f64 * self.h)
    }

    /// Lower-left corner indices of the cell containing `p` (clamped to the grid).
    pub fn cell_of(&self, p: Point) -> (usize, usize) {
        let fx = ((p.x - self.bbox.xmin) / self.h).floor();
        let fy = ((p.y - self.bbox.ymin) / self.h).floor();
        let i = (fx.max(0.0) as usize).min(self.nx - 2);
        let j = (fy.max(0.0) as usize).min(self.ny - 2);
        (i, j)
    }

    pub fn cell_index(&self, ci: usize, cj: usize) -> usize {
        cj * (self.nx - 1) + ci
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Interior,
    Boundary,
    Exterior,
}

impl NodeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeClass::Interior => "interior",
            NodeClass::Boundary => "boundary",
            NodeClass::Exterior => "exterior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "interior" => Some(NodeClass::Interior),
            "boundary" => Some(NodeClass::Boundary),
            "exterior" => Some(NodeClass::Exterior),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != NodeClass::Exterior
    }
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grid axis directions: east, west, north, south.
pub const DIRS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

pub fn dir_vector(d: usize) -> Point {
    Point::new(DIRS[d].0 as f64, DIRS[d].1 as f64)
}

pub fn opposite(d: usize) -> usize {
    d ^ 1
}

/// What lies at the end of an interior node's stencil arm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Arm {
    /// Neighbouring interior node (full spacing).
    Interior(usize),
    /// Boundary sample at the given distance (boundary node or cut point).
    Boundary { sample: usize, dist: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SampleKind {
    /// A grid node classified as boundary.
    Node(usize),
    /// Cut point on the axis arm of an interior node.
    Cut { node: usize, dir: usize },
}

/// A point on the boundary carrying an outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySample {
    pub point: Point,
    pub normal: Point,
    pub kind: SampleKind,
    /// Axis direction pointing from the sample into the domain, if any
    /// interior node is adjacent along an axis.
    pub inward_dir: Option<usize>,
    /// Distance from the sample to the first interior node along `inward_dir`.
    pub inward_dist: f64,
}

/// A value location: a grid node or a boundary sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Node(usize),
    Sample(usize),
}

/// Precomputed evaluation recipe for one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub enum CellRecipe {
    /// All four corners known: bilinear interpolation.
    Full,
    /// Cut cell: fan triangulation over known corners and cut points.
    Cut { locs: Vec<Loc>, tris: Vec<[usize; 3]> },
    /// Too few known points inside the cell: least-squares affine fit over nearby locations.
    Fit { locs: Vec<Loc> },
}

#[derive(Clone, Debug)]
pub struct DomainMask {
    pub domain: ConvexDomain,
    pub grid: GridSpec,
    pub class: Vec<NodeClass>,
    /// Interior node ids in row-major order; position is the unknown index.
    pub interior: Vec<usize>,
    unknown: Vec<u32>,
    /// Stencil arms of each interior node, indexed by unknown.
    pub arms: Vec<[Arm; 4]>,
    pub samples: Vec<BoundarySample>,
    node_sample: Vec<u32>,
    cells: Vec<CellRecipe>,
}

const NONE: u32 = u32::MAX;

impl DomainMask {
    pub fn build(domain: &ConvexDomain, grid: GridSpec) -> Result<Self, DomainError> {
        domain.validate()?;
        let bb = domain.bbox();
        if bb.xmin <= grid.bbox.xmin
            || bb.xmax >= grid.bbox.xmax
            || bb.ymin <= grid.bbox.ymin
            || bb.ymax >= grid.bbox.ymax
        {
            return Err(DomainError::BBoxTooSmall);
        }
        let tol = domain.tolerance();
        let n = grid.node_count();
        let class: Vec<NodeClass> = (0..n)
            .map(|k| {
                let lv = domain.level(grid.node_point(k));
                if lv < -tol {
                    NodeClass::Interior
                } else if lv <= tol {
                    NodeClass::Boundary
                } else {
                    NodeClass::Exterior
                }
            })
            .collect();
        let interior: Vec<usize> = (0..n).filter(|&k| class[k] == NodeClass::Interior).collect();
        if interior.is_empty() {
            return Err(DomainError::NoInteriorNode);
        }
        let mut unknown = vec![NONE; n];
        for (u, &k) in interior.iter().enumerate() {
            unknown[k] = u as u32;
        }

        let mut samples = Vec::new();
        let mut node_sample = vec![NONE; n];
        for k in 0..n {
            if class[k] == NodeClass::Boundary {
                let p = grid.node_point(k);
                let normal = domain.outward_normal(p);
                let inward = (0..4)
                    .filter(|&d| {
                        neighbor(&grid, k, d).is_some_and(|m| class[m] == NodeClass::Interior)
                    })
                    .max_by(|&a, &b| {
                        let sa = -normal.dot(dir_vector(a));
                        let sb = -normal.dot(dir_vector(b));
                        sa.total_cmp(&sb).then(b.cmp(&a))
                    });
                node_sample[k] = samples.len() as u32;
                samples.push(BoundarySample {
                    point: p,
                    normal,
                    kind: SampleKind::Node(k),
                    inward_dir: inward,
                    inward_dist: grid.h,
                });
            }
        }

        let mut arms = Vec::with_capacity(interior.len());
        for &k in &interior {
            let p = grid.node_point(k);
            let mut a = [Arm::Interior(0); 4];
            for (d, slot) in a.iter_mut().enumerate() {
                let m = neighbor(&grid, k, d).expect("interior node has all neighbours");
                *slot = match class[m] {
                    NodeClass::Interior => Arm::Interior(m),
                    NodeClass::Boundary => Arm::Boundary { sample: node_sample[m] as usize, dist: grid.h },
                    NodeClass::Exterior => {
                        let t = domain.ray_exit(p, dir_vector(d)).clamp(tol.max(1e-300), grid.h);
                        let q = p + dir_vector(d) * t;
                        let (_, normal) = domain.boundary_projection(q);
                        let s = samples.len();
                        samples.push(BoundarySample {
                            point: q,
                            normal,
                            kind: SampleKind::Cut { node: k, dir: d },
                            inward_dir: Some(opposite(d)),
                            inward_dist: t,
                        });
                        Arm::Boundary { sample: s, dist: t }
                    }
                };
            }
            arms.push(a);
        }

        let components = count_components(&grid, &class, &interior, &unknown);
        if components > 1 {
            return Err(DomainError::Disconnected(components));
        }

        let mut mask = DomainMask {
            domain: domain.clone(),
            grid,
            class,
            interior,
            unknown,
            arms,
            samples,
            node_sample,
            cells: Vec::new(),
        };
        mask.cells = build_cells(&mask);
        Ok(mask)
    }

    /// Grid of spacing `h` around the domain with a two-node margin.
    pub fn with_spacing(domain: &ConvexDomain, h: f64) -> Result<Self, DomainError> {
        Self::build(domain, GridSpec::covering(domain, h, 2)?)
    }

    pub fn h(&self) -> f64 {
        self.grid.h
    }

    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    pub fn unknown_of(&self, node: usize) -> Option<usize> {
        let u = self.unknown[node];
        (u != NONE).then_some(u as usize)
    }

    pub fn sample_of_node(&self, node: usize) -> Option<usize> {
        let s = self.node_sample[node];
        (s != NONE).then_some(s as usize)
    }

    pub fn neighbor(&self, node: usize, d: usize) -> Option<usize> {
        neighbor(&self.grid, node, d)
    }

    pub fn cell_recipe(&self, ci: usize, cj: usize) -> &CellRecipe {
        &self.cells[self.grid.cell_index(ci, cj)]
    }

    pub fn loc_point(&self, loc: Loc) -> Point {
        match loc {
            Loc::Node(k) => self.grid.node_point(k),
            Loc::Sample(s) => self.samples[s].point,
        }
    }

    /// Number of interior nodes whose four axis neighbours are all interior.
    pub fn full_stencil_count(&self) -> usize {
        self.arms.iter().filter(|a| a.iter().all(|x| matches!(x, Arm::Interior(_)))).count()
    }

    /// Distance from a node to the boundary, as a lower bound from the level function.
    pub fn depth(&self, p: Point) -> f64 {
        -self.domain.level(p)
    }

    /// CSV export: `node,x,y,class` for every grid node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,x,y,class\n");
        for k in 0..self.grid.node_count() {
            let p = self.grid.node_point(k);
            out.push_str(&format!("{},{},{},{}\n", k, p.x, p.y, self.class[k]));
        }
        out
    }
}

fn neighbor(grid: &GridSpec, node: usize, d: usize) -> Option<usize> {
    let (i, j) = grid.ij(node);
    let ni = i as i64 + DIRS[d].0;
    let nj = j as i64 + DIRS[d].1;
    if ni < 0 || nj < 0 || ni >= grid.nx as i64 || nj >= grid.ny as i64 {
        None
    } else {
        Some(grid.index(ni as usize, nj as usize))
    }
}

fn count_components(grid: &GridSpec, class: &[NodeClass], interior: &[usize], unknown: &[u32]) -> usize {
    let mut seen = vec![false; interior.len()];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..interior.len() {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(interior[start]);
        while let Some(k) = queue.pop_front() {
            for d in 0..4 {
                if let Some(m) = neighbor(grid, k, d) {
                    if class[m] == NodeClass::Interior {
                        let u = unknown[m] as usize;
                        if !seen[u] {
                            seen[u] = true;
                            queue.push_back(m);
                        }
                    }
                }
            }
        }
    }
    components
}

fn build_cells(mask: &DomainMask) -> Vec<CellRecipe> {
    let g = &mask.grid;
    let ncx = g.nx - 1;
    let ncy = g.ny - 1;
    let mut cut_lists: Vec<Vec<usize>> = vec![Vec::new(); ncx * ncy];
    for (s, smp) in mask.samples.iter().enumerate() {
        if let SampleKind::Cut { .. } = smp.kind {
            for (ci, cj) in cells_touching(g, smp.point) {
                cut_lists[g.cell_index(ci, cj)].push(s);
            }
        }
    }
    let mut cells = Vec::with_capacity(ncx * ncy);
    for cj in 0..ncy {
        for ci in 0..ncx {
            let corners = [g.index(ci, cj), g.index(ci + 1, cj), g.index(ci + 1, cj + 1), g.index(ci, cj + 1)];
            let known: Vec<usize> = corners.iter().copied().filter(|&k| mask.class[k].is_known()).collect();
            if known.len() == 4 {
                cells.push(CellRecipe::Full);
                continue;
            }
            let mut locs: Vec<Loc> = known.iter().map(|&k| Loc::Node(k)).collect();
            locs.extend(cut_lists[g.cell_index(ci, cj)].iter().map(|&s| Loc::Sample(s)));
            dedupe_locs(mask, &mut locs);
            if let Some(tris) = fan_triangulation(mask, &mut locs) {
                cells.push(CellRecipe::Cut { locs, tris });
            } else {
                cells.push(CellRecipe::Fit { locs: nearby_locs(mask, ci, cj) });
            }
        }
    }
    cells
}

fn cells_touching(g: &GridSpec, p: Point) -> Vec<(usize, usize)> {
    let fx = (p.x - g.bbox.xmin) / g.h;
    let fy = (p.y - g.bbox.ymin) / g.h;
    let eps = 1e-9;
    let mut out = Vec::new();
    let ilo = (fx - eps).floor().max(0.0) as usize;
    let ihi = ((fx + eps).floor().max(0.0) as usize).min(g.nx - 2);
    let jlo = (fy - eps).floor().max(0.0) as usize;
    let jhi = ((fy + eps).floor().max(0.0) as usize).min(g.ny - 2);
    for cj in jlo.min(g.ny - 2)..=jhi {
        for ci in ilo.min(g.nx - 2)..=ihi {
            out.push((ci, cj));
        }
    }
    out
}

fn dedupe_locs(mask: &DomainMask, locs: &mut Vec<Loc>) {
    let tol = 1e-12 * mask.grid.h;
    let mut kept: Vec<Loc> = Vec::with_capacity(locs.len());
    for &l in locs.iter() {
        let p = mask.loc_point(l);
        if kept.iter().all(|&k| mask.loc_point(k).dist(p) > tol) {
            kept.push(l);
        }
    }
    *locs = kept;
}

/// Sorts `locs` by angle around their centroid and fans triangles from the first one.
fn fan_triangulation(mask: &DomainMask, locs: &mut [Loc]) -> Option<Vec<[usize; 3]>> {
    if locs.len() < 3 {
        return None;
    }
    let pts: Vec<Point> = locs.iter().map(|&l| mask.loc_point(l)).collect();
    let c = pts.iter().fold(Point::ORIGIN, |a, p| a + *p) * (1.0 / pts.len() as f64);
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by(|&a, &b| {
        let aa = (pts[a].y - c.y).atan2(pts[a].x - c.x);
        let ab = (pts[b].y - c.y).atan2(pts[b].x - c.x);
        aa.total_cmp(&ab)
    });
    let sorted: Vec<Loc> = order.iter().map(|&i| locs[i]).collect();
    locs.copy_from_slice(&sorted);
    let sp: Vec<Point> = order.iter().map(|&i| pts[i]).collect();
    let h2 = mask.grid.h * mask.grid.h;
    let mut tris = Vec::new();
    for k in 1..sp.len() - 1 {
        let area = (sp[k] - sp[0]).cross(sp[k + 1] - sp[0]);
        if area > 1e-10 * h2 {
            tris.push([0, k, k + 1]);
        }
    }
    (!tris.is_empty()).then_some(tris)
}

fn nearby_locs(mask: &DomainMask, ci: usize, cj: usize) -> Vec<Loc> {
    let g = &mask.grid;
    let mut locs = Vec::new();
    for r in 1..=4i64 {
        locs.clear();
        let i0 = (ci as i64 - r).max(0) as usize;
        let i1 = ((ci as i64 + 1 + r) as usize).min(g.nx - 1);
        let j0 = (cj as i64 - r).max(0) as usize;
        let j1 = ((cj as i64 + 1 + r) as usize).min(g.ny - 1);
        let lo = Point::new(g.bbox.xmin + i0 as f64 * g.h, g.bbox.ymin + j0 as f64 * g.h);
        let hi = Point::new(g.bbox.xmin + i1 as f64 * g.h, g.bbox.ymin + j1 as f64 * g.h);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let k = g.index(i, j);
                if mask.class[k] == NodeClass::Interior {
                    locs.push(Loc::Node(k));
                }
            }
        }
        for (s, smp) in mask.samples.iter().enumerate() {
            let p = smp.point;
            if p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y {
                locs.push(Loc::Sample(s));
            }
        }
        if locs.len() >= 3 {
            break;
        }
    }
    locs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox(l: f64, r: f64) -> BBox {
        BBox { xmin: l, xmax: r, ymin: l, ymax: r }
    }

    #[test]
    fn contains_examples() {
        let disk = ConvexDomain::unit_disk();
        assert!(disk.contains(Point::new(0.0, 0.0)));
        assert!(!disk.contains(Point::new(1.0, 0.0)));
        assert!(ConvexDomain::unit_square().contains(Point::new(0.5, 0.5)));
    }

    #[test]
    fn projection_examples() {
        let disk = ConvexDomain::unit_disk();
        assert_eq!(disk.boundary_projection(Point::new(2.0, 0.0)), (Point::new(1.0, 0.0), Point::new(1.0, 0.0)));
        let ell = ConvexDomain::Ellipse { center: Point::ORIGIN, semi_axes: [2.0, 1.0] };
        let (b, n) = ell.boundary_projection(Point::new(3.0, 0.0));
        assert!(b.dist(Point::new(2.0, 0.0)) < 1e-14);
        assert!(n.dist(Point::new(1.0, 0.0)) < 1e-14);
        let sq = ConvexDomain::unit_square();
        assert_eq!(sq.boundary_projection(Point::new(0.5, -1.0)), (Point::new(0.5, 0.0), Point::new(0.0, -1.0)));
        assert_eq!(disk.boundary_projection(Point::ORIGIN).1, Point::new(1.0, 0.0));
    }

    #[test]
    fn ellipse_projection_is_nearest() {
        let ell = ConvexDomain::Ellipse { center: Point::new(0.3, -0.2), semi_axes: [1.5, 0.7] };
        for k in 0..50 {
            let a = k as f64 * 0.37;
            let p = Point::new(0.3 + 2.0 * a.cos() * (0.2 + (k % 7) as f64 * 0.2), -0.2 + a.sin());
            let (b, n) = ell.boundary_projection(p);
            assert!(ell.level(b).abs() < 1e-12);
            let brute = (0..20000)
                .map(|i| p.dist(ell.boundary_point(i as f64 / 20000.0)))
                .fold(f64::INFINITY, f64::min);
            assert!(p.dist(b) <= brute + 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_convexity_examples() {
        assert!(ConvexDomain::unit_disk().strict_convexity_check(40));
        assert!(!ConvexDomain::unit_square().strict_convexity_check(40));
        let ell = ConvexDomain::Ellipse { center: Point::ORIGIN, semi_axes: [2.0, 1.0] };
        assert!(ell.strict_convexity_check(40));
    }

    #[test]
    fn polygon_validation() {
        let cw = ConvexDomain::Polygon {
            vertices: vec![Point::new(0.0, 0.0), Point::new(0.0, 1.0), Point::new(1.0, 0.0)],
        };
        assert_eq!(cw.validate(), Err(DomainError::NotConvex(0)));
        let two = ConvexDomain::Polygon { vertices: vec![Point::ORIGIN, Point::new(1.0, 0.0)] };
        assert_eq!(two.validate(), Err(DomainError::TooFewVertices(2)));
    }

    #[test]
    fn coarse_disk_mask() {
        let grid = GridSpec::new(5, 5, bbox(-1.2, 1.2)).unwrap();
        let mask = DomainMask::build(&ConvexDomain::unit_disk(), grid).unwrap();
        // Nodes at (0,0), (±0.6,0), (0,±0.6) and (±0.6,±0.6) are inside the disk.
        assert_eq!(mask.interior_count(), 9);
        assert_eq!(mask.full_stencil_count(), 1);
        let centre = grid.index(2, 2);
        assert_eq!(mask.class[centre], NodeClass::Interior);
        assert!(mask.arms[mask.unknown_of(centre).unwrap()].iter().all(|a| matches!(a, Arm::Interior(_))));
    }

    #[test]
    fn disk_mask_is_mirror_symmetric() {
        let mask = DomainMask::with_spacing(&ConvexDomain::unit_disk(), 1.0 / 24.0).unwrap();
        let g = mask.grid;
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert_eq!(mask.class[g.index(i, j)], mask.class[g.index(g.nx - 1 - i, j)]);
            }
        }
    }

    #[test]
    fn square_interior_count_matches_membership() {
        let grid = GridSpec::new(65, 65, bbox(-0.1, 1.1)).unwrap();
        let sq = ConvexDomain::unit_square();
        let mask = DomainMask::build(&sq, grid).unwrap();
        let count = (0..grid.node_count())
            .filter(|&k| {
                let p = grid.node_point(k);
                let t = 1e-9;
                p.x > t && p.x < 1.0 - t && p.y > t && p.y < 1.0 - t
            })
            .count();
        assert_eq!(mask.interior_count(), count);
    }

    #[test]
    fn build_errors() {
        let grid = GridSpec::new(5, 5, bbox(-1.0, 1.0)).unwrap();
        assert_eq!(DomainMask::build(&ConvexDomain::unit_disk(), grid).unwrap_err(), DomainError::BBoxTooSmall);
        let tiny = ConvexDomain::Disk { center: Point::new(0.3, 0.3), radius: 0.05 };
        let grid = GridSpec::new(5, 5, bbox(-1.0, 1.0)).unwrap();
        assert_eq!(DomainMask::build(&tiny, grid).unwrap_err(), DomainError::NoInteriorNode);
        assert!(matches!(GridSpec::new(2, 5, bbox(0.0, 1.0)), Err(DomainError::GridTooSmall { .. })));
    }

    #[test]
    fn samples_have_unit_normals_and_correct_sides() {
        for domain in [
            ConvexDomain::unit_disk(),
            ConvexDomain::unit_square(),
            ConvexDomain::Ellipse { center: Point::new(0.1, 0.0), semi_axes: [1.3, 0.8] },
        ] {
            let mask = DomainMask::with_spacing(&domain, 1.0 / 20.0).unwrap();
            let eps = mask.h() / 10.0;
            for s in &mask.samples {
                assert!((s.normal.norm() - 1.0).abs() < 1e-12);
                assert!(domain.level(s.point).abs() < 1e-9);
                let is_corner = matches!(domain, ConvexDomain::Polygon { .. })
                    && [0.0, 1.0].iter().any(|&a| (s.point.x - a).abs() < 1e-12)
                    && [0.0, 1.0].iter().any(|&a| (s.point.y - a).abs() < 1e-12);
                if !is_corner {
                    assert!(domain.contains(s.point - s.normal * eps));
                }
                assert!(!domain.contains(s.point + s.normal * eps));
            }
            for a in &mask.arms {
                for arm in a {
                    if let Arm::Boundary { dist, .. } = arm {
                        assert!(*dist > 0.0 && *dist <= mask.h());
                    }
                }
            }
        }
    }

    #[test]
    fn refinement_keeps_interior_nodes_interior() {
        let dom = ConvexDomain::Ellipse { center: Point::ORIGIN, semi_axes: [1.0, 0.6] };
        let coarse = DomainMask::with_spacing(&dom, 0.1).unwrap();
        let fine = DomainMask::with_spacing(&dom, 0.05).unwrap();
        for &k in &coarse.interior {
            let p = coarse.grid.node_point(k);
            let (ci, cj) = fine.grid.cell_of(p + Point::new(1e-9, 1e-9));
            let kf = fine.grid.index(ci, cj);
            assert!(fine.grid.node_point(kf).dist(p) < 1e-9);
            assert_eq!(fine.class[kf], NodeClass::Interior);
        }
    }

    #[test]
    fn mask_csv_has_one_row_per_node() {
        let mask = DomainMask::with_spacing(&ConvexDomain::unit_disk(), 0.25).unwrap();
        let csv = mask.to_csv();
        assert_eq!(csv.lines().count(), mask.grid.node_count() + 1);
        assert!(csv.starts_with("node,x,y,class\n"));
    }
}
