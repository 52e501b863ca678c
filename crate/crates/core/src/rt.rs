//! Lowest-order-plus-one Raviart–Thomas element on a triangle.
//!
//! The local space is `P1^2 + x P1_hom`, spanned by eight monomials in the
//! scaled coordinates `xi = (x - c) / h`. Degrees of freedom are two normal
//! moments per edge, against the orthonormal Legendre pair on `[0, 1]`, plus
//! the two interior means. Edge parameters run from the lower-index vertex to
//! the higher one and normals follow the global edge orientation, so shared
//! edges carry identical functionals on both sides and the summed field is
//! H(div)-conforming.

use crate::error::LinalgError;
use crate::geometry::Point2;
use crate::linalg::DenseMatrix;
use crate::mesh::Mesh;
use crate::quadrature::{triangle_rule, unit_gauss};

/// Number of local degrees of freedom.
pub const RT_LOCAL_DOFS: usize = 8;

/// Orthonormal Legendre polynomials on `[0, 1]` (degree 0 and 1).
pub fn legendre(m: usize, s: f64) -> f64 {
    match m {
        0 => 1.0,
        _ => 3f64.sqrt() * (2.0 * s - 1.0),
    }
}

/// Geometry of one element edge as seen by the degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFrame {
    /// Start point (lower global vertex index).
    pub a: Point2,
    pub b: Point2,
    /// Globally fixed unit normal.
    pub normal: Point2,
}

/// Local basis of one element.
#[derive(Debug, Clone, PartialEq)]
pub struct RtElement {
    pub center: Point2,
    pub h: f64,
    /// `basis[i][k]`: coefficient of monomial `k` in basis function `i`.
    basis: [[f64; 8]; 8],
}

fn monomials(xi: Point2) -> [Point2; 8] {
    let (x, y) = (xi.x, xi.y);
    [
        Point2::new(1.0, 0.0),
        Point2::new(x, 0.0),
        Point2::new(y, 0.0),
        Point2::new(0.0, 1.0),
        Point2::new(0.0, x),
        Point2::new(0.0, y),
        Point2::new(x * x, x * y),
        Point2::new(x * y, y * y),
    ]
}

/// Applies the eight degrees of freedom to a vector field.
fn apply_dofs(tri: [Point2; 3], edges: &[EdgeFrame; 3], mut f: impl FnMut(Point2) -> Point2) -> [f64; 8] {
    let mut out = [0.0; 8];
    let gauss = unit_gauss(3).expect("degree 3 supported");
    for (i, e) in edges.iter().enumerate() {
        for &(s, w) in gauss {
            let vn = f(e.a.lerp(e.b, s)).dot(e.normal);
            out[2 * i] += w * vn * legendre(0, s);
            out[2 * i + 1] += w * vn * legendre(1, s);
        }
    }
    let rule = triangle_rule(tri, 2).expect("degree 2 supported");
    let area = rule.measure();
    for (p, w) in rule.iter() {
        let v = f(p);
        out[6] += w * v.x / area;
        out[7] += w * v.y / area;
    }
    out
}

impl RtElement {
    /// Builds the nodal basis. `edges[i]` is the edge opposite vertex `i`.
    pub fn new(tri: [Point2; 3], edges: [EdgeFrame; 3]) -> Result<Self, LinalgError> {
        let center = Point2::new((tri[0].x + tri[1].x + tri[2].x) / 3.0, (tri[0].y + tri[1].y + tri[2].y) / 3.0);
        let h = tri[0].dist(tri[1]).max(tri[1].dist(tri[2])).max(tri[2].dist(tri[0]));
        let mut d = DenseMatrix::zeros(8, 8);
        for k in 0..8 {
            let col = apply_dofs(tri, &edges, |p| monomials((p - center) * (1.0 / h))[k]);
            for (j, v) in col.iter().enumerate() {
                d[(j, k)] = *v;
            }
        }
        let c = d.inverse()?;
        let mut basis = [[0.0; 8]; 8];
        for (i, row) in basis.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = c[(k, i)];
            }
        }
        Ok(Self { center, h, basis })
    }

    /// Element `t` of `mesh` with the mesh's global edge orientation.
    pub fn on_mesh(mesh: &Mesh, t: usize) -> Result<Self, LinalgError> {
        Self::new(mesh.points(t), Self::frames(mesh, t))
    }

    pub fn frames(mesh: &Mesh, t: usize) -> [EdgeFrame; 3] {
        std::array::from_fn(|i| {
            let e = mesh.tri_edges[t][i];
            let [a, b] = mesh.edges[e].v;
            EdgeFrame { a: mesh.vertices[a], b: mesh.vertices[b], normal: mesh.edge_normal(e) }
        })
    }

    pub fn xi(&self, p: Point2) -> Point2 {
        (p - self.center) * (1.0 / self.h)
    }

    /// Values of all basis functions at `p`.
    pub fn values(&self, p: Point2) -> [Point2; 8] {
        let m = monomials(self.xi(p));
        std::array::from_fn(|i| {
            let c = &self.basis[i];
            let mut v = Point2::new(0.0, 0.0);
            for k in 0..8 {
                v = v + m[k] * c[k];
            }
            v
        })
    }

    /// Divergences of all basis functions at `p`.
    pub fn divergences(&self, p: Point2) -> [f64; 8] {
        let xi = self.xi(p);
        let inv = 1.0 / self.h;
        std::array::from_fn(|i| {
            let c = &self.basis[i];
            inv * (c[1] + c[5] + 3.0 * c[6] * xi.x + 3.0 * c[7] * xi.y)
        })
    }

    /// Directional derivatives `(n . grad) psi_i` at `p`.
    pub fn normal_derivatives(&self, p: Point2, n: Point2) -> [Point2; 8] {
        let xi = self.xi(p);
        let inv = 1.0 / self.h;
        // Derivatives of each monomial along x and y (scaled by 1/h below).
        let dx = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, 0.0),
            Point2::new(2.0 * xi.x, xi.y),
            Point2::new(xi.y, 0.0),
        ];
        let dy = [
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, xi.x),
            Point2::new(xi.x, 2.0 * xi.y),
        ];
        std::array::from_fn(|i| {
            let c = &self.basis[i];
            let mut v = Point2::new(0.0, 0.0);
            for k in 0..8 {
                v = v + (dx[k] * n.x + dy[k] * n.y) * (c[k] * inv);
            }
            v
        })
    }

    pub fn eval(&self, coeffs: &[f64; 8], p: Point2) -> Point2 {
        self.values(p).iter().zip(coeffs).fold(Point2::new(0.0, 0.0), |acc, (v, c)| acc + *v * *c)
    }

    pub fn div(&self, coeffs: &[f64; 8], p: Point2) -> f64 {
        self.divergences(p).iter().zip(coeffs).map(|(d, c)| d * c).sum()
    }

    /// Canonical interpolant of `f` (the degrees of freedom of `f`).
    pub fn interpolate(tri: [Point2; 3], edges: &[EdgeFrame; 3], f: impl FnMut(Point2) -> Point2) -> [f64; 8] {
        apply_dofs(tri, edges, f)
    }
}
