//! Planar geometry for features: points, polygons, boundary segments and
//! the clipping routines that cut mesh triangles against included features.
//!
//! Clipping works on convex pieces. A triangle minus a convex part is split
//! by walking the part's edges, so every output piece is convex and the
//! pieces are pairwise disjoint.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::GeometryError;

/// Relative tolerance for on-boundary classification.
pub const TOL_REL: f64 = 1e-12;

/// Pieces smaller than this fraction of the clipped triangle are dropped.
pub const SLIVER_REL: f64 = 1e-14;

/// A point (or vector) in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    /// Counter-clockwise rotation by 90 degrees.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + t * (o.x - self.x), self.y + t * (o.y - self.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Signed area of a triangle, positive when counter-clockwise.
pub fn triangle_signed_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * (b - a).cross(c - a)
}

/// Shoelace signed area of a closed vertex loop.
pub fn signed_area(pts: &[Point2]) -> f64 {
    let n = pts.len();
    if n < 3 {
        return 0.0;
    }
    let o = pts[0];
    let mut s = 0.0;
    for i in 1..n - 1 {
        s += (pts[i] - o).cross(pts[i + 1] - o);
    }
    0.5 * s
}

fn scale_of(pts: &[Point2]) -> f64 {
    pts.iter().fold(1.0f64, |m, p| m.max(p.x.abs()).max(p.y.abs()))
}

/// Axis-aligned rectangle, used for the background domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Point2,
    pub max: Point2,
}

impl Rect {
    pub fn new(min: Point2, max: Point2) -> Self {
        Self { min, max }
    }

    pub fn unit_square() -> Self {
        Self::new(Point2::new(0.0, 0.0), Point2::new(1.0, 1.0))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Geometric tolerance scaled by the domain diameter.
    pub fn tol(&self) -> f64 {
        TOL_REL * self.diameter().max(1.0)
    }

    pub fn as_polygon(&self) -> Polygon {
        Polygon {
            vertices: vec![
                self.min,
                Point2::new(self.max.x, self.min.y),
                self.max,
                Point2::new(self.min.x, self.max.y),
            ],
        }
    }

    /// Which sides of the rectangle `p` lies on, as `[left, right, bottom, top]`.
    pub fn sides_of(&self, p: Point2) -> [bool; 4] {
        let t = self.tol();
        [
            (p.x - self.min.x).abs() <= t,
            (p.x - self.max.x).abs() <= t,
            (p.y - self.min.y).abs() <= t,
            (p.y - self.max.y).abs() <= t,
        ]
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    pub fn bounding(pts: &[Point2]) -> Rect {
        let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Rect { min, max }
    }
}

/// Result of a point-membership query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

/// A simple counter-clockwise polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point2>,
}

impl Polygon {
    /// Validates orientation, vertex count and finiteness.
    pub fn new(vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon("fewer than three vertices".into()));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidPolygon("non-finite coordinate".into()));
        }
        let a = signed_area(&vertices);
        if !(a > 0.0) {
            return Err(GeometryError::InvalidPolygon(format!(
                "signed area {a} is not positive (clockwise or degenerate)"
            )));
        }
        let poly = Polygon { vertices };
        if !poly.is_simple() {
            return Err(GeometryError::InvalidPolygon("self-intersecting boundary".into()));
        }
        Ok(poly)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point2 {
        let o = self.vertices[0];
        let mut c = Point2::default();
        let mut area = 0.0;
        for i in 1..self.len() - 1 {
            let (b, d) = (self.vertices[i], self.vertices[i + 1]);
            let w = (b - o).cross(d - o);
            area += w;
            c = c + (o + b + d) * (w / 3.0);
        }
        c * (1.0 / area)
    }

    /// Largest distance between two vertices.
    pub fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for (i, p) in self.vertices.iter().enumerate() {
            for q in &self.vertices[i + 1..] {
                d = d.max(p.dist(*q));
            }
        }
        d
    }

    pub fn bbox(&self) -> Rect {
        Rect::bounding(&self.vertices)
    }

    /// Directed edges `(v_i, v_{i+1})`.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn is_convex(&self) -> bool {
        let n = self.len();
        let tol = TOL_REL * scale_of(&self.vertices).powi(2);
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            (b - a).cross(c - b) >= -tol
        })
    }

    fn is_simple(&self) -> bool {
        let n = self.len();
        if n <= 3 {
            return true;
        }
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Splits into convex parts: the polygon itself when convex, otherwise
    /// an ear-clipping triangulation.
    pub fn convex_parts(&self) -> Vec<Polygon> {
        if self.is_convex() {
            return vec![self.clone()];
        }
        ear_clip(&self.vertices)
            .into_iter()
            .map(|t| Polygon { vertices: t.to_vec() })
            .collect()
    }
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Ear-clipping triangulation of a simple counter-clockwise loop.
pub fn ear_clip(pts: &[Point2]) -> Vec<[Point2; 3]> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let mut out = Vec::with_capacity(pts.len().saturating_sub(2));
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * pts.len() * pts.len() {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for k in 0..n {
            let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (pts[ia], pts[ib], pts[ic]);
            if triangle_signed_area(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia && j != ib && j != ic && {
                    let p = pts[j];
                    (b - a).cross(p - a) >= 0.0 && (c - b).cross(p - b) >= 0.0 && (a - c).cross(p - c) >= 0.0
                }
            });
            if !blocked {
                out.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        out.push([pts[idx[0]], pts[idx[1]], pts[idx[2]]]);
    }
    out
}

/// Regular polygon inscribed in a circle. Vertex `k` sits at angle
/// `theta_deg + 360 k / n_edges` degrees.
pub fn regular_polygon(center: Point2, radius: f64, n_edges: usize, theta_deg: f64) -> Result<Polygon, GeometryError> {
    if n_edges < 3 || !(radius > 0.0) || !radius.is_finite() {
        return Err(GeometryError::InvalidRegularPolygon { n_edges, radius });
    }
    let theta = theta_deg.to_radians();
    let vertices = (0..n_edges)
        .map(|k| {
            let phi = theta + std::f64::consts::TAU * k as f64 / n_edges as f64;
            Point2::new(center.x + radius * phi.cos(), center.y + radius * phi.sin())
        })
        .collect();
    Polygon::new(vertices)
}

/// Shoelace area of a valid polygon.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

/// Classifies `p` against `poly` with a boundary band of relative width [`TOL_REL`].
pub fn point_in_polygon(p: Point2, poly: &Polygon) -> Location {
    let tol = TOL_REL * scale_of(&poly.vertices).max(p.x.abs()).max(p.y.abs());
    let mut inside = false;
    for (a, b) in poly.edges() {
        let e = b - a;
        let len = e.norm();
        let t = ((p - a).dot(e) / (len * len)).clamp(0.0, 1.0);
        if p.dist(a.lerp(b, t)) <= tol {
            return Location::Boundary;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    if inside {
        Location::Inside
    } else {
        Location::Outside
    }
}

/// Clips a convex loop against the half-plane to the left (`keep_left`) or
/// right of the directed line `a -> b`. Points on the line belong to both
/// sides, and both sides share the same computed intersection points.
pub fn clip_halfplane(poly: &[Point2], a: Point2, b: Point2, keep_left: bool) -> Vec<Point2> {
    let dir = b - a;
    let sign = if keep_left { 1.0 } else { -1.0 };
    let d: Vec<f64> = poly.iter().map(|p| sign * dir.cross(*p - a)).collect();
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let j = (i + 1) % n;
        let (pi, pj) = (poly[i], poly[j]);
        if d[i] >= 0.0 {
            out.push(pi);
        }
        if (d[i] > 0.0 && d[j] < 0.0) || (d[i] < 0.0 && d[j] > 0.0) {
            // Parametrize from the lexicographically smaller endpoint so that
            // both half-plane calls produce bit-identical crossing points.
            let (p, q, dp, dq) = if (pi.x, pi.y) <= (pj.x, pj.y) {
                (pi, pj, d[i], d[j])
            } else {
                (pj, pi, d[j], d[i])
            };
            out.push(p.lerp(q, dp / (dp - dq)));
        }
    }
    dedup_loop(out)
}

fn dedup_loop(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.dedup();
    while pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        pts.clear();
    }
    pts
}

/// Pieces of the convex loop `piece` lying outside the convex polygon `part`.
fn convex_difference(piece: Vec<Point2>, part: &Polygon, min_area: f64, out: &mut Vec<Vec<Point2>>) {
    let mut remaining = piece;
    for (a, b) in part.edges() {
        if remaining.is_empty() {
            return;
        }
        let outside = clip_halfplane(&remaining, a, b, false);
        if signed_area(&outside) > min_area {
            out.push(outside);
        }
        remaining = clip_halfplane(&remaining, a, b, true);
    }
}

/// Status of a feature in the current geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureStatus {
    Neglected,
    Included,
}

/// A straight piece of a feature boundary. `normal` points out of the
/// physical domain, i.e. into the feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
    pub owner: usize,
    pub normal: Point2,
}

impl Segment {
    /// Segment of a counter-clockwise feature edge; the normal is the left normal.
    pub fn of_feature_edge(a: Point2, b: Point2, owner: usize) -> Self {
        let t = b - a;
        let normal = t.perp() * (1.0 / t.norm());
        Segment { a, b, owner, normal }
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    pub fn midpoint(&self) -> Point2 {
        self.a.lerp(self.b, 0.5)
    }
}

/// A negative feature: a polygonal hole cut from the background domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub id: usize,
    /// Feature polygon after clipping to the domain.
    pub shape: Polygon,
    /// Convex decomposition of `shape`.
    pub parts: Vec<Polygon>,
    pub status: FeatureStatus,
    /// Boundary pieces inside the domain.
    pub gamma_tilde: Vec<Segment>,
    /// Boundary pieces on the domain boundary.
    pub gamma_zero: Vec<Segment>,
}

impl Feature {
    /// Clips `shape` to `domain` and splits its boundary.
    pub fn new(id: usize, shape: Polygon, domain: &Rect) -> Result<Self, GeometryError> {
        let mut pts = shape.vertices.clone();
        for p in pts.iter_mut() {
            snap_to_rect(p, domain);
        }
        let ring = domain.as_polygon();
        let mut clipped = pts;
        for (a, b) in ring.edges() {
            clipped = clip_halfplane(&clipped, a, b, true);
        }
        for p in clipped.iter_mut() {
            snap_to_rect(p, domain);
        }
        let clipped = dedup_loop(clipped);
        if signed_area(&clipped) <= 0.0 {
            return Err(GeometryError::FeatureOutsideDomain { id });
        }
        let shape = Polygon::new(clipped)?;
        let mut gamma_tilde = Vec::new();
        let mut gamma_zero = Vec::new();
        for (a, b) in shape.edges() {
            if a.dist(b) <= domain.tol() {
                continue;
            }
            let (sa, sb) = (domain.sides_of(a), domain.sides_of(b));
            let seg = Segment::of_feature_edge(a, b, id);
            if (0..4).any(|k| sa[k] && sb[k]) {
                gamma_zero.push(seg);
            } else {
                gamma_tilde.push(seg);
            }
        }
        if gamma_tilde.is_empty() {
            return Err(GeometryError::EmptyFeatureBoundary { id });
        }
        let parts = shape.convex_parts();
        Ok(Feature {
            id,
            shape,
            parts,
            status: FeatureStatus::Neglected,
            gamma_tilde,
            gamma_zero,
        })
    }

    pub fn is_included(&self) -> bool {
        self.status == FeatureStatus::Included
    }

    pub fn area(&self) -> f64 {
        self.shape.area()
    }

    pub fn diameter(&self) -> f64 {
        self.shape.diameter()
    }

    /// Length of the boundary part inside the domain.
    pub fn gamma_tilde_length(&self) -> f64 {
        self.gamma_tilde.iter().map(Segment::length).sum()
    }

    pub fn gamma_zero_length(&self) -> f64 {
        self.gamma_zero.iter().map(Segment::length).sum()
    }

    pub fn bbox(&self) -> Rect {
        self.shape.bbox()
    }

    pub fn is_boundary_feature(&self) -> bool {
        !self.gamma_zero.is_empty()
    }
}

fn snap_to_rect(p: &mut Point2, r: &Rect) {
    let t = r.tol();
    for (v, lo, hi) in [(&mut p.x, r.min.x, r.max.x), (&mut p.y, r.min.y, r.max.y)] {
        if (*v - lo).abs() <= t {
            *v = lo;
        } else if (*v - hi).abs() <= t {
            *v = hi;
        }
    }
}

/// True when the closures of two features are disjoint (with tolerance).
pub fn features_disjoint(f: &Feature, g: &Feature) -> bool {
    let tol = TOL_REL * scale_of(&f.shape.vertices).max(scale_of(&g.shape.vertices));
    let (bf, bg) = (f.bbox(), g.bbox());
    if bf.max.x + tol < bg.min.x || bg.max.x + tol < bf.min.x || bf.max.y + tol < bg.min.y || bg.max.y + tol < bf.min.y {
        return true;
    }
    f.parts.iter().all(|p| g.parts.iter().all(|q| convex_separated(p, q, tol)))
}

fn convex_separated(p: &Polygon, q: &Polygon, tol: f64) -> bool {
    for poly in [p, q] {
        for (a, b) in poly.edges() {
            let n = (b - a).perp();
            let n = n * (1.0 / n.norm());
            let (pmin, pmax) = project(p, n);
            let (qmin, qmax) = project(q, n);
            if pmax + tol < qmin || qmax + tol < pmin {
                return true;
            }
        }
    }
    false
}

fn project(p: &Polygon, n: Point2) -> (f64, f64) {
    p.vertices
        .iter()
        .map(|v| v.dot(n))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)))
}

/// Active pieces of triangle `tri` outside all `included` features.
///
/// Returns disjoint convex polygons whose areas sum to `|K| - sum |K n F|`.
pub fn clip_triangle(tri: [Point2; 3], included: &[&Feature]) -> Result<Vec<Polygon>, GeometryError> {
    let area = triangle_signed_area(tri[0], tri[1], tri[2]);
    let diam = tri[0].dist(tri[1]).max(tri[1].dist(tri[2])).max(tri[2].dist(tri[0]));
    if !(area > SLIVER_REL * diam * diam) {
        return Err(GeometryError::DegenerateTriangle { area });
    }
    let min_area = SLIVER_REL * area;
    let bbox = Rect::bounding(&tri);
    let mut pieces = vec![tri.to_vec()];
    for f in included {
        for part in &f.parts {
            if !part.bbox().overlaps(&bbox) {
                continue;
            }
            let mut next = Vec::with_capacity(pieces.len() + 2);
            for piece in pieces {
                convex_difference(piece, part, min_area, &mut next);
            }
            pieces = next;
        }
    }
    Ok(pieces.into_iter().map(|vertices| Polygon { vertices }).collect())
}

/// Parts of the in-domain boundary of `feature` within the closed triangle.
///
/// A segment lying on a triangle edge goes only to the triangle on the
/// physical side of the feature, so every boundary point is counted once.
pub fn feature_segments_in_triangle(tri: [Point2; 3], feature: &Feature) -> Vec<Segment> {
    let bbox = Rect::bounding(&tri);
    let fb = feature.bbox();
    let tol = TOL_REL * scale_of(&tri);
    let grown = Rect::new(
        Point2::new(bbox.min.x - tol, bbox.min.y - tol),
        Point2::new(bbox.max.x + tol, bbox.max.y + tol),
    );
    if !grown.overlaps(&fb) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for seg in &feature.gamma_tilde {
        clip_segment(tri, seg, tol, &mut out);
    }
    out
}

fn clip_segment(tri: [Point2; 3], seg: &Segment, tol: f64, out: &mut Vec<Segment>) {
    let centroid = (tri[0] + tri[1] + tri[2]) * (1.0 / 3.0);
    let dir = seg.b - seg.a;
    let mut skip_edge = None;
    for i in 0..3 {
        let (p, q) = (tri[i], tri[(i + 1) % 3]);
        let e = q - p;
        let len = e.norm();
        let da = e.cross(seg.a - p) / len;
        let db = e.cross(seg.b - p) / len;
        if da.abs() <= tol && db.abs() <= tol {
            // Segment on the supporting line of this edge.
            if seg.normal.dot(centroid - seg.a) > 0.0 {
                return;
            }
            skip_edge = Some(i);
        }
    }
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for i in 0..3 {
        if skip_edge == Some(i) {
            continue;
        }
        let (p, q) = (tri[i], tri[(i + 1) % 3]);
        let e = q - p;
        let fa = e.cross(seg.a - p);
        let fd = e.cross(dir);
        if fd == 0.0 {
            if fa < 0.0 {
                return;
            }
            continue;
        }
        let t = -fa / fd;
        if fd > 0.0 {
            t0 = t0.max(t);
        } else {
            t1 = t1.min(t);
        }
        if t0 >= t1 {
            return;
        }
    }
    if (t1 - t0) * dir.norm() <= tol {
        return;
    }
    let a = if t0 == 0.0 { seg.a } else { seg.a + dir * t0 };
    let b = if t1 == 1.0 { seg.b } else { seg.a + dir * t1 };
    out.push(Segment { a, b, owner: seg.owner, normal: seg.normal });
}
