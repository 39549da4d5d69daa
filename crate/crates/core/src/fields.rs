//! Scalar fields on masked grids.
//!
//! A [`GridField`] stores one value per known grid node (interior or
//! boundary class) and one per boundary sample. Off-grid evaluation is
//! bilinear in full cells and piecewise linear over the precomputed fan
//! triangulation in cut cells; both are exact on affine functions.

use crate::domain::{Arm, CellRecipe, DomainMask, Loc, NodeClass, SampleKind};
use crate::geometry::{BBox, Point};
use crate::domain::{dir_vector, GridSpec};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("point ({x}, {y}) lies outside the closed domain")]
    OutsideDomain { x: f64, y: f64 },
    #[error("value {value} at node {node} is outside the validity domain of {transform}")]
    InvalidValue { node: usize, value: f64, transform: String },
    #[error("value {value} at boundary sample {sample} is outside the validity domain of {transform}")]
    InvalidSampleValue { sample: usize, value: f64, transform: String },
    #[error("non-finite value at interior node {0} in a field without extended values")]
    NonFinite(usize),
    #[error("insufficient stencil depth at boundary sample {0}")]
    InsufficientStencil(usize),
    #[error("field length {got} does not match the mask ({expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid transform parameter: {0}")]
    BadTransform(String),
    #[error("malformed field CSV: {0}")]
    Csv(String),
}

/// Anything that can be evaluated at stored locations and at arbitrary points of the closed domain.
pub trait ScalarField: Sync {
    fn mask(&self) -> &DomainMask;
    /// Value at a node or boundary sample.
    fn loc_value(&self, loc: Loc) -> f64;
    /// Value at a point of the closed domain; no membership check.
    fn eval(&self, p: Point) -> f64;
}

#[derive(Clone, Debug)]
pub struct GridField {
    mask: Arc<DomainMask>,
    nodes: Vec<f64>,
    samples: Vec<f64>,
    extended: bool,
}

impl PartialEq for GridField {
    fn eq(&self, other: &Self) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        Arc::ptr_eq(&self.mask, &other.mask)
            && self.extended == other.extended
            && same(&self.nodes, &other.nodes)
            && same(&self.samples, &other.samples)
    }
}

impl GridField {
    /// Samples `f` at every known node and boundary sample.
    pub fn from_fn(mask: &Arc<DomainMask>, f: impl Fn(Point) -> f64) -> Self {
        let g = &mask.grid;
        let nodes = (0..g.node_count())
            .map(|k| if mask.class[k].is_known() { f(g.node_point(k)) } else { f64::NAN })
            .collect();
        let samples = mask
            .samples
            .iter()
            .map(|s| match s.kind {
                SampleKind::Node(k) => f(g.node_point(k)),
                SampleKind::Cut { .. } => f(s.point),
            })
            .collect();
        GridField { mask: mask.clone(), nodes, samples, extended: false }
    }

    pub fn constant(mask: &Arc<DomainMask>, c: f64) -> Self {
        Self::from_fn(mask, |_| c)
    }

    pub fn zeros(mask: &Arc<DomainMask>) -> Self {
        Self::constant(mask, 0.0)
    }

    /// Interior values from an unknown vector plus Dirichlet data on the boundary.
    pub fn from_unknowns(
        mask: &Arc<DomainMask>,
        values: &[f64],
        boundary: impl Fn(Point) -> f64,
    ) -> Result<Self, FieldError> {
        if values.len() != mask.interior_count() {
            return Err(FieldError::LengthMismatch { expected: mask.interior_count(), got: values.len() });
        }
        let mut f = Self::from_fn(mask, boundary);
        for (u, &k) in mask.interior.iter().enumerate() {
            f.nodes[k] = values[u];
        }
        Ok(f)
    }

    /// Builds a field from raw node and sample arrays.
    pub fn from_parts(
        mask: &Arc<DomainMask>,
        nodes: Vec<f64>,
        samples: Vec<f64>,
        extended: bool,
    ) -> Result<Self, FieldError> {
        if nodes.len() != mask.grid.node_count() {
            return Err(FieldError::LengthMismatch { expected: mask.grid.node_count(), got: nodes.len() });
        }
        if samples.len() != mask.samples.len() {
            return Err(FieldError::LengthMismatch { expected: mask.samples.len(), got: samples.len() });
        }
        if !extended {
            if let Some(&k) = mask.interior.iter().find(|&&k| !nodes[k].is_finite()) {
                return Err(FieldError::NonFinite(k));
            }
        }
        Ok(GridField { mask: mask.clone(), nodes, samples, extended })
    }

    pub fn mask_arc(&self) -> &Arc<DomainMask> {
        &self.mask
    }

    pub fn is_extended(&self) -> bool {
        self.extended
    }

    pub fn node_values(&self) -> &[f64] {
        &self.nodes
    }

    pub fn sample_values(&self) -> &[f64] {
        &self.samples
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn sample(&self, s: usize) -> f64 {
        self.samples[s]
    }

    /// Values at interior nodes in unknown order.
    pub fn interior_values(&self) -> Vec<f64> {
        self.mask.interior.iter().map(|&k| self.nodes[k]).collect()
    }

    /// Applies `f` pointwise to all stored values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        GridField {
            mask: self.mask.clone(),
            nodes: self.nodes.iter().map(|&v| if v.is_nan() { v } else { f(v) }).collect(),
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            extended: self.extended,
        }
    }

    /// Pointwise combination of two fields on the same mask.
    pub fn zip_with(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> GridField {
        assert!(Arc::ptr_eq(&self.mask, &other.mask), "fields live on different masks");
        GridField {
            mask: self.mask.clone(),
            nodes: self.nodes.iter().zip(&other.nodes).map(|(&a, &b)| f(a, b)).collect(),
            samples: self.samples.iter().zip(&other.samples).map(|(&a, &b)| f(a, b)).collect(),
            extended: self.extended || other.extended,
        }
    }

    pub fn scale(&self, c: f64) -> GridField {
        self.map(|v| c * v)
    }

    /// Largest absolute difference over known nodes and samples.
    pub fn max_abs_diff(&self, other: &GridField) -> f64 {
        let mut d: f64 = 0.0;
        for (k, (&a, &b)) in self.nodes.iter().zip(&other.nodes).enumerate() {
            if self.mask.class[k].is_known() {
                d = d.max((a - b).abs());
            }
        }
        for (&a, &b) in self.samples.iter().zip(&other.samples) {
            d = d.max((a - b).abs());
        }
        d
    }

    /// Off-grid evaluation with a closed-domain membership check.
    pub fn interpolate(&self, p: Point) -> Result<f64, FieldError> {
        if !self.mask.domain.contains_closed(p, 1e-8 * self.mask.h()) {
            return Err(FieldError::OutsideDomain { x: p.x, y: p.y });
        }
        Ok(interpolate_raw(&self.mask, |l| self.loc_value(l), p))
    }

    /// Outward normal derivative at boundary sample `s`.
    ///
    /// Uses a one-sided quadratic along the grid axis through the sample
    /// when that axis makes an angle of at most 60 degrees with the normal
    /// (this assumes constant boundary data), otherwise the gradient of a
    /// local least-squares quadratic, and as a last resort a one-sided
    /// quadratic along the inward normal through interpolated values.
    pub fn normal_derivative(&self, s: usize) -> Result<f64, FieldError> {
        let mask = &*self.mask;
        let h = mask.h();
        let smp = &mask.samples[s];
        let u0 = self.samples[s];
        if let Some(d) = smp.inward_dir {
            let axis_out = -dir_vector(d);
            let align = smp.normal.dot(axis_out);
            if align >= 0.5 {
                let first = match smp.kind {
                    SampleKind::Cut { node, .. } => Some(node),
                    SampleKind::Node(k) => mask.neighbor(k, d),
                };
                let mut chain = Vec::with_capacity(3);
                let mut cur = first;
                for _ in 0..3 {
                    match cur {
                        Some(k) if mask.class[k] == NodeClass::Interior => {
                            chain.push(k);
                            cur = mask.neighbor(k, d);
                        }
                        _ => break,
                    }
                }
                let d1 = smp.inward_dist;
                let skip = usize::from(d1 < 0.1 * h);
                if chain.len() >= 2 + skip {
                    let a = d1 + skip as f64 * h;
                    let b = a + h;
                    let ua = self.nodes[chain[skip]];
                    let ub = self.nodes[chain[skip + 1]];
                    let slope_in = quad_slope_at_zero(u0, a, ua, b, ub);
                    return Ok(-slope_in / align);
                }
            }
        }
        if let Some(grad) = quadratic_fit_gradient(self, smp.point) {
            return Ok(grad.dot(smp.normal));
        }
        let n = smp.normal;
        let pa = smp.point - n * h;
        let pb = smp.point - n * (2.0 * h);
        let dom = &mask.domain;
        if !(dom.contains(pa) && dom.contains(pb)) {
            return Err(FieldError::InsufficientStencil(s));
        }
        let ua = interpolate_raw(mask, |l| self.loc_value(l), pa);
        let ub = interpolate_raw(mask, |l| self.loc_value(l), pb);
        Ok(-quad_slope_at_zero(u0, h, ua, 2.0 * h, ub))
    }
}

/// Gradient at `p` of the least-squares quadratic through known values within 2.5h.
fn quadratic_fit_gradient(u: &GridField, p: Point) -> Option<Point> {
    let mask = &*u.mask;
    let h = mask.h();
    let radius = 2.5 * h;
    let g = &mask.grid;
    let (ci, cj) = g.cell_of(p);
    let mut pts: Vec<(Point, f64)> = Vec::new();
    let lo_i = ci.saturating_sub(3);
    let lo_j = cj.saturating_sub(3);
    for j in lo_j..=(cj + 4).min(g.ny - 1) {
        for i in lo_i..=(ci + 4).min(g.nx - 1) {
            let k = g.index(i, j);
            let q = g.node_point(k);
            if mask.class[k] == NodeClass::Interior && q.dist(p) <= radius && u.nodes[k].is_finite() {
                pts.push((q, u.nodes[k]));
            }
        }
    }
    for (s, smp) in mask.samples.iter().enumerate() {
        if smp.point.dist(p) <= radius && u.samples[s].is_finite() {
            pts.push((smp.point, u.samples[s]));
        }
    }
    if pts.len() < 9 {
        return None;
    }
    let mut ata = [[0.0f64; 6]; 6];
    let mut atb = [0.0f64; 6];
    for &(q, v) in &pts {
        let x = (q.x - p.x) / h;
        let y = (q.y - p.y) / h;
        let r = [1.0, x, y, x * x, x * y, y * y];
        for i in 0..6 {
            for j in 0..6 {
                ata[i][j] += r[i] * r[j];
            }
            atb[i] += r[i] * v;
        }
    }
    let c = solve_dense(ata, atb)?;
    Some(Point::new(c[1] / h, c[2] / h))
}

/// Gaussian elimination with partial pivoting; `None` when nearly singular.
fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[piv][col].abs() > 1e-10 * scale) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..N {
            let f = a[r][col] / a[col][col];
            for c in col..N {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for r in (0..N).rev() {
        let mut acc = b[r];
        for c in r + 1..N {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}

/// Derivative at 0 of the quadratic through (0, u0), (a, ua), (b, ub).
fn quad_slope_at_zero(u0: f64, a: f64, ua: f64, b: f64, ub: f64) -> f64 {
    -(a + b) / (a * b) * u0 + b / (a * (b - a)) * ua - a / (b * (b - a)) * ub
}

impl ScalarField for GridField {
    fn mask(&self) -> &DomainMask {
        &self.mask
    }

    fn loc_value(&self, loc: Loc) -> f64 {
        match loc {
            Loc::Node(k) => self.nodes[k],
            Loc::Sample(s) => self.samples[s],
        }
    }

    fn eval(&self, p: Point) -> f64 {
        interpolate_raw(&self.mask, |l| self.loc_value(l), p)
    }
}

/// Sum of `w_i * v_i` skipping zero weights, so that infinite values only
/// propagate from locations that actually contribute.
#[inline]
fn weighted<const N: usize>(ws: [f64; N], vs: [f64; N]) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        if ws[i] != 0.0 {
            acc += ws[i] * vs[i];
        }
    }
    acc
}

/// Evaluates stored values at `p` using the cell recipes of `mask`.
pub fn interpolate_raw(mask: &DomainMask, value: impl Fn(Loc) -> f64, p: Point) -> f64 {
    let g = &mask.grid;
    // A point on a cell edge belongs to every cell sharing it; prefer a full
    // cell (the one with the point on its lower-left side, so that nodes get
    // exact weights), then the cut cell that contains it best.
    let fx = (p.x - g.bbox.xmin) / g.h;
    let fy = (p.y - g.bbox.ymin) / g.h;
    let eps = 1e-9;
    let clamp_i = |f: f64| (f.max(0.0) as usize).min(g.nx - 2);
    let clamp_j = |f: f64| (f.max(0.0) as usize).min(g.ny - 2);
    let (i_lo, i_hi) = (clamp_i((fx - eps).floor()), clamp_i((fx + eps).floor()));
    let (j_lo, j_hi) = (clamp_j((fy - eps).floor()), clamp_j((fy + eps).floor()));
    let mut cut: Option<(f64, usize, usize)> = None;
    let mut fallback = None;
    for cj in (j_lo..=j_hi).rev() {
        for ci in (i_lo..=i_hi).rev() {
            match mask.cell_recipe(ci, cj) {
                CellRecipe::Full => return bilinear(mask, &value, ci, cj, p),
                CellRecipe::Cut { locs, tris } => {
                    let (m, _, _) = best_triangle(mask, locs, tris, p);
                    if cut.is_none_or(|(b, _, _)| m > b) {
                        cut = Some((m, ci, cj));
                    }
                }
                CellRecipe::Fit { .. } => {
                    fallback.get_or_insert((ci, cj));
                }
            }
        }
    }
    if let Some((m, ci, cj)) = cut {
        if m >= -1e-9 || fallback.is_none() {
            let CellRecipe::Cut { locs, tris } = mask.cell_recipe(ci, cj) else { unreachable!() };
            let (_, ws, t) = best_triangle(mask, locs, tris, p);
            let vs = [value(locs[t[0]]), value(locs[t[1]]), value(locs[t[2]])];
            if vs.iter().any(|v| v.is_infinite()) {
                return vs.iter().copied().find(|v| v.is_infinite()).unwrap();
            }
            return weighted(ws, vs);
        }
    }
    let (ci, cj) = fallback.expect("some cell recipe applies");
    let CellRecipe::Fit { locs } = mask.cell_recipe(ci, cj) else { unreachable!() };
    affine_fit_eval(mask, locs, &value, p)
}

fn bilinear(mask: &DomainMask, value: &impl Fn(Loc) -> f64, ci: usize, cj: usize, p: Point) -> f64 {
    let g = &mask.grid;
    let x0 = g.bbox.xmin + ci as f64 * g.h;
    let y0 = g.bbox.ymin + cj as f64 * g.h;
    let tx = (p.x - x0) / g.h;
    let ty = (p.y - y0) / g.h;
    let k00 = g.index(ci, cj);
    let vs = [value(Loc::Node(k00)), value(Loc::Node(k00 + 1)), value(Loc::Node(k00 + g.nx)), value(Loc::Node(k00 + g.nx + 1))];
    let ws = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
    weighted(ws, vs)
}

/// Triangle of the fan with the largest minimum barycentric coordinate at `p`.
fn best_triangle(mask: &DomainMask, locs: &[Loc], tris: &[[usize; 3]], p: Point) -> (f64, [f64; 3], [usize; 3]) {
    let mut best = (f64::NEG_INFINITY, [0.0; 3], [0usize; 3]);
    for t in tris {
        let a = mask.loc_point(locs[t[0]]);
        let b = mask.loc_point(locs[t[1]]);
        let c = mask.loc_point(locs[t[2]]);
        let area = (b - a).cross(c - a);
        let wb = (p - a).cross(c - a) / area;
        let wc = (b - a).cross(p - a) / area;
        let wa = 1.0 - wb - wc;
        let m = wa.min(wb).min(wc);
        if m > best.0 {
            best = (m, [wa, wb, wc], *t);
        }
    }
    best
}

fn affine_fit_eval(mask: &DomainMask, locs: &[Loc], value: &impl Fn(Loc) -> f64, p: Point) -> f64 {
    // Least squares for v ≈ c0 + c1 (x - px) + c2 (y - py).
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    let mut nearest = (f64::INFINITY, f64::NAN);
    for &l in locs {
        let v = value(l);
        let q = mask.loc_point(l);
        let d = q.dist(p);
        if d < nearest.0 {
            nearest = (d, v);
        }
        if !v.is_finite() {
            continue;
        }
        let r = [1.0, q.x - p.x, q.y - p.y];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
            atb[i] += r[i] * v;
        }
    }
    match solve3(ata, atb) {
        Some(c) => c[0],
        None => nearest.1,
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let scale = a[0][0] * a[1][1] * a[2][2];
    if !(d.abs() > 1e-12 * scale.abs()) {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        *o = det(m) / d;
    }
    Some(out)
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied transform with its first two derivatives and validity interval `(lo, hi)`.
#[derive(Clone)]
pub struct CustomTransform {
    pub name: String,
    pub f: ScalarFn,
    pub df: ScalarFn,
    pub d2f: ScalarFn,
    pub lo: f64,
    pub hi: f64,
}

impl fmt::Debug for CustomTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTransform").field("name", &self.name).field("lo", &self.lo).field("hi", &self.hi).finish()
    }
}

impl CustomTransform {
    /// Checks `f' < 0` on `n` samples of the validity interval and that `f'`
    /// blows up to minus infinity as the argument tends to zero.
    pub fn kawcond_check(&self, n: usize) -> bool {
        let hi = if self.hi.is_finite() { self.hi } else { self.lo.max(0.0) + 10.0 };
        let lo = self.lo.max(0.0);
        let decreasing = (1..n.max(2)).all(|i| {
            let s = lo + (hi - lo) * i as f64 / n as f64;
            (self.df)(s) < 0.0
        });
        let blow_up = (self.df)(1e-12) < -1e6 && (self.df)(1e-12) < (self.df)(1e-6);
        decreasing && blow_up
    }
}

#[derive(Clone, Debug)]
pub enum Transform {
    /// `s -> s^a` on `s >= 0`.
    Power(f64),
    /// `s -> -s^a` on `s >= 0`.
    NegPower(f64),
    /// `s -> ln s` on `s > 0`; zeros map to minus infinity.
    Log,
    /// `s -> -ln s` on `s > 0`; zeros map to plus infinity.
    NegLog,
    Custom(CustomTransform),
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Power(a) => write!(f, "power({a})"),
            Transform::NegPower(a) => write!(f, "neg_power({a})"),
            Transform::Log => f.write_str("log"),
            Transform::NegLog => f.write_str("neg_log"),
            Transform::Custom(c) => write!(f, "custom({})", c.name),
        }
    }
}

impl Transform {
    pub fn validate(&self) -> Result<(), FieldError> {
        match self {
            Transform::Power(a) | Transform::NegPower(a) if !(a.is_finite() && *a > 0.0) => {
                Err(FieldError::BadTransform(format!("exponent {a} must be positive")))
            }
            _ => Ok(()),
        }
    }

    /// Image of one value, with `floor` the threshold below which log maps to an infinite marker.
    /// Returns `None` outside the validity domain.
    pub fn apply(&self, s: f64, floor: f64) -> Option<f64> {
        match self {
            Transform::Power(a) => (s >= 0.0).then(|| s.powf(*a)),
            Transform::NegPower(a) => (s >= 0.0).then(|| -s.powf(*a)),
            Transform::Log => (s >= 0.0).then(|| if s <= floor { f64::NEG_INFINITY } else { s.ln() }),
            Transform::NegLog => (s >= 0.0).then(|| if s <= floor { f64::INFINITY } else { -s.ln() }),
            Transform::Custom(c) => (s > c.lo && s < c.hi).then(|| (c.f)(s)),
        }
    }

    /// Image of an interpolated value; small negative excursions are clamped to zero.
    pub fn apply_clamped(&self, s: f64, floor: f64) -> f64 {
        match self {
            Transform::Custom(c) => {
                if s > c.lo && s < c.hi {
                    (c.f)(s)
                } else {
                    f64::NAN
                }
            }
            _ => self.apply(s.max(0.0), floor).unwrap_or(f64::NAN),
        }
    }

    fn marks_zero(&self) -> bool {
        matches!(self, Transform::Log | Transform::NegLog)
    }
}

/// Threshold below which log transforms flag a value as infinite.
pub fn log_floor(u: &GridField) -> f64 {
    1e-12 * field_sup(u)
}

fn field_sup(u: &GridField) -> f64 {
    let mut m: f64 = 0.0;
    for (k, &v) in u.nodes.iter().enumerate() {
        if u.mask.class[k].is_known() && v.is_finite() {
            m = m.max(v.abs());
        }
    }
    for &v in &u.samples {
        if v.is_finite() {
            m = m.max(v.abs());
        }
    }
    m
}

/// Pointwise image of `u` under `t`.
pub fn apply_transform(u: &GridField, t: &Transform) -> Result<GridField, FieldError> {
    t.validate()?;
    let floor = log_floor(u);
    let mask = &u.mask;
    let mut nodes = vec![f64::NAN; u.nodes.len()];
    let mut extended = u.extended;
    for (k, out) in nodes.iter_mut().enumerate() {
        if !mask.class[k].is_known() {
            continue;
        }
        let v = u.nodes[k];
        *out = t.apply(v, floor).ok_or_else(|| FieldError::InvalidValue { node: k, value: v, transform: t.to_string() })?;
        if out.is_infinite() {
            extended = true;
        }
    }
    let mut samples = Vec::with_capacity(u.samples.len());
    for (s, &v) in u.samples.iter().enumerate() {
        let w = t
            .apply(v, floor)
            .ok_or_else(|| FieldError::InvalidSampleValue { sample: s, value: v, transform: t.to_string() })?;
        if w.is_infinite() {
            extended = true;
        }
        samples.push(w);
    }
    Ok(GridField { mask: mask.clone(), nodes, samples, extended: extended || (t.marks_zero() && floor == 0.0) })
}

/// Lazy view `T(u)`: stored locations use the exact image, off-grid points
/// interpolate `u` first and transform afterwards.
pub struct TransformedField<'a> {
    base: &'a GridField,
    transform: Transform,
    floor: f64,
    image: GridField,
}

impl<'a> TransformedField<'a> {
    pub fn new(base: &'a GridField, transform: Transform) -> Result<Self, FieldError> {
        let image = apply_transform(base, &transform)?;
        let floor = log_floor(base);
        Ok(TransformedField { base, transform, floor, image })
    }

    pub fn image(&self) -> &GridField {
        &self.image
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }
}

impl ScalarField for TransformedField<'_> {
    fn mask(&self) -> &DomainMask {
        &self.base.mask
    }

    fn loc_value(&self, loc: Loc) -> f64 {
        self.image.loc_value(loc)
    }

    fn eval(&self, p: Point) -> f64 {
        self.transform.apply_clamped(self.base.eval(p), self.floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    /// Sup norm over stored values.
    pub m: f64,
    /// Estimated C² norm: max of sup |u|, |Du| and |D²u| over the sampled nodes.
    pub big_m: f64,
    /// Radius of the gradient ball used for z-sampling.
    pub gradient_bound: f64,
    pub grad_sup: f64,
    pub hess_sup: f64,
    /// Finite-difference spacing.
    pub spacing: f64,
    /// Minimum distance to the boundary of the nodes used for derivatives.
    pub cutoff: f64,
    pub nodes_used: usize,
}

/// Norm estimates with central differences on interior nodes at depth ≥ 2h.
pub fn field_stats(u: &GridField) -> FieldStats {
    let mask = &*u.mask;
    let h = mask.h();
    let g = &mask.grid;
    let m = field_sup(u);
    let stencil_ok = |k: usize| {
        let (i, j) = g.ij(k);
        (-1i64..=1).all(|dj| {
            (-1i64..=1).all(|di| {
                let kk = g.index((i as i64 + di) as usize, (j as i64 + dj) as usize);
                mask.class[kk].is_known() && u.nodes[kk].is_finite()
            })
        })
    };
    let mut cutoff = 2.0 * h;
    let mut chosen: Vec<usize> =
        mask.interior.iter().copied().filter(|&k| mask.depth(g.node_point(k)) >= cutoff - 1e-12 * h && stencil_ok(k)).collect();
    if chosen.is_empty() {
        cutoff = 0.0;
        chosen = mask.interior.iter().copied().filter(|&k| stencil_ok(k)).collect();
    }
    let (mut grad_sup, mut hess_sup, mut val_sup) = (0.0f64, 0.0f64, 0.0f64);
    for &k in &chosen {
        let v = |di: i64, dj: i64| {
            let (i, j) = g.ij(k);
            u.nodes[g.index((i as i64 + di) as usize, (j as i64 + dj) as usize)]
        };
        let ux = (v(1, 0) - v(-1, 0)) / (2.0 * h);
        let uy = (v(0, 1) - v(0, -1)) / (2.0 * h);
        let uxx = (v(1, 0) - 2.0 * v(0, 0) + v(-1, 0)) / (h * h);
        let uyy = (v(0, 1) - 2.0 * v(0, 0) + v(0, -1)) / (h * h);
        let uxy = (v(1, 1) - v(1, -1) - v(-1, 1) + v(-1, -1)) / (4.0 * h * h);
        let mean = 0.5 * (uxx + uyy);
        let rad = (0.25 * (uxx - uyy) * (uxx - uyy) + uxy * uxy).sqrt();
        grad_sup = grad_sup.max(ux.hypot(uy));
        hess_sup = hess_sup.max(mean.abs() + rad);
        val_sup = val_sup.max(v(0, 0).abs());
    }
    let big_m = m.max(val_sup).max(grad_sup).max(hess_sup);
    FieldStats { m, big_m, gradient_bound: big_m, grad_sup, hess_sup, spacing: h, cutoff, nodes_used: chosen.len() }
}

/// Interior nodes adjacent to a cut arm, useful for reporting.
pub fn boundary_adjacent_nodes(mask: &DomainMask) -> Vec<usize> {
    mask.interior
        .iter()
        .zip(&mask.arms)
        .filter(|(_, a)| a.iter().any(|x| matches!(x, Arm::Boundary { .. })))
        .map(|(&k, _)| k)
        .collect()
}

fn fmt_value(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "NEG_INF".into()
    } else if v == f64::INFINITY {
        "POS_INF".into()
    } else if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn parse_value(s: &str) -> Result<f64, FieldError> {
    match s.trim() {
        "NEG_INF" => Ok(f64::NEG_INFINITY),
        "POS_INF" => Ok(f64::INFINITY),
        "NaN" | "" => Ok(f64::NAN),
        t => t.parse().map_err(|_| FieldError::Csv(format!("bad number {t:?}"))),
    }
}

/// Parsed contents of a field CSV, independent of any domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    pub grid: GridSpec,
    pub nodes: Vec<(Point, NodeClass, f64)>,
    pub samples: Vec<(Point, f64)>,
}

impl FieldTable {
    pub fn parse(text: &str) -> Result<Self, FieldError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut records = rdr.records();
        let mut next = || -> Result<Option<csv::StringRecord>, FieldError> {
            records.next().transpose().map_err(|e| FieldError::Csv(e.to_string()))
        };
        let head = next()?.ok_or_else(|| FieldError::Csv("empty file".into()))?;
        if head.iter().collect::<Vec<_>>() != ["nx", "ny", "xmin", "xmax", "ymin", "ymax", "h"] {
            return Err(FieldError::Csv("missing grid header".into()));
        }
        let vals = next()?.ok_or_else(|| FieldError::Csv("missing grid values".into()))?;
        if vals.len() != 7 {
            return Err(FieldError::Csv("grid values need 7 columns".into()));
        }
        let num = |i: usize| parse_value(&vals[i]);
        let nx: usize = vals[0].trim().parse().map_err(|_| FieldError::Csv("bad nx".into()))?;
        let ny: usize = vals[1].trim().parse().map_err(|_| FieldError::Csv("bad ny".into()))?;
        let bbox = BBox { xmin: num(2)?, xmax: num(3)?, ymin: num(4)?, ymax: num(5)? };
        let h = num(6)?;
        let grid = GridSpec::new(nx, ny, bbox).map_err(|e| FieldError::Csv(e.to_string()))?;
        if (grid.h - h).abs() > 1e-9 * h {
            return Err(FieldError::Csv(format!("spacing {h} disagrees with bbox")));
        }
        let cols = next()?.ok_or_else(|| FieldError::Csv("missing column header".into()))?;
        if cols.iter().collect::<Vec<_>>() != ["x", "y", "class", "value"] {
            return Err(FieldError::Csv("expected columns x,y,class,value".into()));
        }
        let mut nodes = Vec::with_capacity(nx * ny);
        let mut samples = Vec::new();
        while let Some(r) = next()? {
            if r.len() != 4 {
                return Err(FieldError::Csv(format!("row with {} columns", r.len())));
            }
            let p = Point::new(parse_value(&r[0])?, parse_value(&r[1])?);
            let v = parse_value(&r[3])?;
            match r[2].trim() {
                "sample" => samples.push((p, v)),
                c => {
                    let class = NodeClass::parse(c).ok_or_else(|| FieldError::Csv(format!("unknown class {c:?}")))?;
                    if !samples.is_empty() {
                        return Err(FieldError::Csv("node row after sample rows".into()));
                    }
                    nodes.push((p, class, v));
                }
            }
        }
        if nodes.len() != nx * ny {
            return Err(FieldError::Csv(format!("expected {} node rows, found {}", nx * ny, nodes.len())));
        }
        Ok(FieldTable { grid, nodes, samples })
    }

    /// Known locations (non-exterior nodes and samples) with finite values.
    pub fn finite_points(&self) -> (Vec<Point>, Vec<f64>) {
        let mut pts = Vec::new();
        let mut vals = Vec::new();
        for &(p, c, v) in &self.nodes {
            if c.is_known() && v.is_finite() {
                pts.push(p);
                vals.push(v);
            }
        }
        for &(p, v) in &self.samples {
            if v.is_finite() {
                pts.push(p);
                vals.push(v);
            }
        }
        (pts, vals)
    }
}

impl GridField {
    /// CSV dump: grid header, then one row per node in row-major order,
    /// then one row per non-node boundary sample with class `sample`.
    pub fn to_csv(&self) -> String {
        let g = &self.mask.grid;
        let mut out = String::new();
        out.push_str("nx,ny,xmin,xmax,ymin,ymax,h\n");
        out.push_str(&format!("{},{},{},{},{},{},{}\n", g.nx, g.ny, g.bbox.xmin, g.bbox.xmax, g.bbox.ymin, g.bbox.ymax, g.h));
        out.push_str("x,y,class,value\n");
        for k in 0..g.node_count() {
            let p = g.node_point(k);
            out.push_str(&format!("{},{},{},{}\n", p.x, p.y, self.mask.class[k], fmt_value(self.nodes[k])));
        }
        for (s, smp) in self.mask.samples.iter().enumerate() {
            if let SampleKind::Cut { .. } = smp.kind {
                out.push_str(&format!("{},{},sample,{}\n", smp.point.x, smp.point.y, fmt_value(self.samples[s])));
            }
        }
        out
    }

    /// Rebuilds a field on `mask` from a parsed table; the grid and node classes must match.
    pub fn from_table(mask: &Arc<DomainMask>, table: &FieldTable) -> Result<Self, FieldError> {
        let g = &mask.grid;
        if table.grid.nx != g.nx || table.grid.ny != g.ny || (table.grid.h - g.h).abs() > 1e-12 * g.h {
            return Err(FieldError::Csv("grid does not match the mask".into()));
        }
        let mut nodes = vec![f64::NAN; g.node_count()];
        for (k, &(_, c, v)) in table.nodes.iter().enumerate() {
            if c != mask.class[k] {
                return Err(FieldError::Csv(format!("class mismatch at node {k}")));
            }
            nodes[k] = v;
        }
        let cuts: Vec<usize> =
            (0..mask.samples.len()).filter(|&s| matches!(mask.samples[s].kind, SampleKind::Cut { .. })).collect();
        if cuts.len() != table.samples.len() {
            return Err(FieldError::Csv("sample count does not match the mask".into()));
        }
        let mut samples = vec![f64::NAN; mask.samples.len()];
        for (&s, &(_, v)) in cuts.iter().zip(&table.samples) {
            samples[s] = v;
        }
        for (s, smp) in mask.samples.iter().enumerate() {
            if let SampleKind::Node(k) = smp.kind {
                samples[s] = nodes[k];
            }
        }
        let extended = nodes.iter().chain(&samples).any(|v| v.is_infinite());
        GridField::from_parts(mask, nodes, samples, extended)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ConvexDomain;

    fn disk(h: f64) -> Arc<DomainMask> {
        Arc::new(DomainMask::with_spacing(&ConvexDomain::unit_disk(), h).unwrap())
    }

    fn square(h: f64) -> Arc<DomainMask> {
        Arc::new(DomainMask::with_spacing(&ConvexDomain::unit_square(), h).unwrap())
    }

    #[test]
    fn transform_examples() {
        let mask = disk(1.0 / 16.0);
        let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()) / 4.0);
        assert_eq!(apply_transform(&u, &Transform::Power(1.0)).unwrap(), u);
        let e = GridField::constant(&mask, std::f64::consts::E);
        let l = apply_transform(&e, &Transform::Log).unwrap();
        assert!(l.node_values().iter().filter(|v| !v.is_nan()).all(|&v| (v - 1.0).abs() < 1e-15));
        let r = apply_transform(&u, &Transform::Power(0.5)).unwrap();
        for &k in &mask.interior {
            let p = mask.grid.node_point(k);
            assert!((r.node(k) - (1.0 - p.norm2()).sqrt() / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_marks_boundary_zeros() {
        let mask = disk(0.125);
        let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()).max(0.0));
        let l = apply_transform(&u, &Transform::Log).unwrap();
        assert!(l.is_extended());
        assert!(l.sample_values().iter().all(|&v| v == f64::NEG_INFINITY));
        let nl = apply_transform(&u, &Transform::NegLog).unwrap();
        assert!(nl.sample_values().iter().all(|&v| v == f64::INFINITY));
    }

    #[test]
    fn negative_value_rejected_with_node() {
        let mask = disk(0.25);
        let u = GridField::from_fn(&mask, |p| p.x);
        let err = apply_transform(&u, &Transform::Power(0.5)).unwrap_err();
        match err {
            FieldError::InvalidValue { node, value, .. } => {
                assert!(value < 0.0);
                assert_eq!(u.node(node), value);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interpolation_examples() {
        let mask = square(1.0 / 10.0);
        let u = GridField::from_fn(&mask, |p| p.x + 2.0 * p.y);
        assert!((u.interpolate(Point::new(0.3, 0.4)).unwrap() - 1.1).abs() < 1e-12);
        let k = mask.grid.index(5, 7);
        let p = mask.grid.node_point(k);
        assert_eq!(u.interpolate(p).unwrap(), u.node(k));
        let q = GridField::from_fn(&mask, |p| p.x * p.x);
        let (x0, x1) = (mask.grid.node_point(k).x, mask.grid.node_point(k).x + mask.h());
        let mid = mask.grid.node_point(k) + Point::new(0.5 * mask.h(), 0.5 * mask.h());
        assert!((q.interpolate(mid).unwrap() - 0.5 * (x0 * x0 + x1 * x1)).abs() < 1e-15);
        assert!(matches!(u.interpolate(Point::new(1.5, 0.5)), Err(FieldError::OutsideDomain { .. })));
    }

    #[test]
    fn interpolation_exact_on_affine_in_cut_cells() {
        let mask = disk(1.0 / 12.0);
        let u = GridField::from_fn(&mask, |p| 0.3 - 1.7 * p.x + 0.9 * p.y);
        for k in 0..400 {
            let a = k as f64 * 0.731;
            let r = 1.0 - (k % 13) as f64 * 0.004;
            let p = Point::new(r * a.cos(), r * a.sin());
            let v = u.interpolate(p).unwrap();
            assert!((v - (0.3 - 1.7 * p.x + 0.9 * p.y)).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn normal_derivative_examples() {
        let mask = disk(1.0 / 32.0);
        let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()) / 4.0);
        for s in 0..mask.samples.len() {
            assert!((u.normal_derivative(s).unwrap() + 0.5).abs() < 1e-9, "sample {s}");
        }
        let c = GridField::constant(&mask, 3.0);
        for s in 0..mask.samples.len() {
            assert!(c.normal_derivative(s).unwrap().abs() < 1e-9);
        }
        let d = GridField::from_fn(&mask, |p| 1.0 - p.norm());
        for s in 0..mask.samples.len() {
            assert!((d.normal_derivative(s).unwrap() + 1.0).abs() < 2.0 * mask.h());
        }
    }

    #[test]
    fn field_stats_examples() {
        let mask = square(1.0 / 32.0);
        let z = field_stats(&GridField::zeros(&mask));
        assert_eq!((z.m, z.big_m), (0.0, 0.0));
        let x = field_stats(&GridField::from_fn(&mask, |p| p.x));
        assert_eq!(x.m, 1.0);
        assert!((x.grad_sup - 1.0).abs() < 1e-10);
        let d = disk(1.0 / 32.0);
        let t = field_stats(&GridField::from_fn(&d, |p| (1.0 - p.norm2()) / 4.0));
        assert_eq!(t.m, 0.25);
        assert!(t.m <= t.big_m);
    }

    #[test]
    fn csv_round_trip() {
        let mask = disk(0.2);
        let u = GridField::from_fn(&mask, |p| (1.0 - p.norm2()).max(0.0));
        let l = apply_transform(&u, &Transform::Log).unwrap();
        let text = l.to_csv();
        assert!(text.contains("NEG_INF"));
        let table = FieldTable::parse(&text).unwrap();
        let back = GridField::from_table(&mask, &table).unwrap();
        assert_eq!(back, l);
    }
}
