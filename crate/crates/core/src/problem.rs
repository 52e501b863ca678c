//! Problem data: domain, boundary conditions, source, boundary data and
//! the diffusion coefficient, plus the built-in benchmark problems.

use crate::geometry::{point_in_polygon, Feature, Location, Point2, Rect};
use crate::mesh::{BoundarySpec, SideKind};

/// Scalar field used for the source term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarField {
    Zero,
    Constant(f64),
    /// `a x + b y + c`
    Affine { a: f64, b: f64, c: f64 },
}

impl ScalarField {
    pub fn eval(&self, p: Point2) -> f64 {
        match *self {
            ScalarField::Zero => 0.0,
            ScalarField::Constant(c) => c,
            ScalarField::Affine { a, b, c } => a * p.x + b * p.y + c,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match *self {
            ScalarField::Zero => ScalarField::Zero,
            ScalarField::Constant(c) => ScalarField::Constant(s * c),
            ScalarField::Affine { a, b, c } => ScalarField::Affine { a: s * a, b: s * b, c: s * c },
        }
    }
}

/// Normal-flux datum, evaluated with the outward normal of the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FluxData {
    Zero,
    Constant(f64),
    /// `(gx, gy) . n`, the flux of a fixed vector field.
    Vector { gx: f64, gy: f64 },
}

impl FluxData {
    pub fn eval(&self, _p: Point2, n: Point2) -> f64 {
        match *self {
            FluxData::Zero => 0.0,
            FluxData::Constant(c) => c,
            FluxData::Vector { gx, gy } => gx * n.x + gy * n.y,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match *self {
            FluxData::Zero => FluxData::Zero,
            FluxData::Constant(c) => FluxData::Constant(s * c),
            FluxData::Vector { gx, gy } => FluxData::Vector { gx: s * gx, gy: s * gy },
        }
    }
}

/// Dirichlet datum, evaluated at boundary vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DirichletData {
    Zero,
    /// `a x + b y + c`
    Affine { a: f64, b: f64, c: f64 },
    /// `exp(-8(x+y))` on the sides `x = xmin` or `y = ymin`, zero elsewhere.
    ExpCorner { scale: f64 },
    /// `exp(-8(x+y))` on `y = ymin`, zero elsewhere.
    ExpBottom { scale: f64 },
    /// Piecewise-linear data on `(-1,1)^2` built from two ramp profiles.
    RampSquare { scale: f64 },
}

fn ramp_high(t: f64) -> f64 {
    if t < -0.5 {
        2.0
    } else if t < 0.0 {
        -t + 1.5
    } else if t < 0.5 {
        1.5
    } else {
        -t + 2.0
    }
}

fn ramp_low(t: f64) -> f64 {
    if t < -0.5 {
        -t
    } else if t < 0.0 {
        0.5
    } else if t < 0.5 {
        -t + 0.5
    } else {
        0.0
    }
}

impl DirichletData {
    pub fn eval(&self, p: Point2, domain: &Rect) -> f64 {
        let tol = domain.tol();
        let on_left = (p.x - domain.min.x).abs() <= tol;
        let on_bottom = (p.y - domain.min.y).abs() <= tol;
        match *self {
            DirichletData::Zero => 0.0,
            DirichletData::Affine { a, b, c } => a * p.x + b * p.y + c,
            DirichletData::ExpCorner { scale } => {
                if on_left || on_bottom {
                    scale * (-8.0 * (p.x + p.y)).exp()
                } else {
                    0.0
                }
            }
            DirichletData::ExpBottom { scale } => {
                if on_bottom {
                    scale * (-8.0 * (p.x + p.y)).exp()
                } else {
                    0.0
                }
            }
            DirichletData::RampSquare { scale } => {
                let v = if on_bottom {
                    ramp_low(p.x)
                } else if on_left {
                    ramp_high(-p.y)
                } else if (p.y - domain.max.y).abs() <= tol {
                    ramp_high(p.x)
                } else {
                    ramp_low(-p.y)
                };
                scale * v
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match *self {
            DirichletData::Zero => DirichletData::Zero,
            DirichletData::Affine { a, b, c } => DirichletData::Affine { a: s * a, b: s * b, c: s * c },
            DirichletData::ExpCorner { scale } => DirichletData::ExpCorner { scale: s * scale },
            DirichletData::ExpBottom { scale } => DirichletData::ExpBottom { scale: s * scale },
            DirichletData::RampSquare { scale } => DirichletData::RampSquare { scale: s * scale },
        }
    }
}

/// Piecewise-constant diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    /// `n x n` chessboard over the domain; the cell at the lower-left
    /// corner takes `first`, its neighbours `second`.
    Chessboard { n: usize, first: f64, second: f64 },
}

impl Coefficient {
    pub fn eval(&self, p: Point2, domain: &Rect) -> f64 {
        match *self {
            Coefficient::Constant(k) => k,
            Coefficient::Chessboard { n, first, second } => {
                let cell = |v: f64, lo: f64, w: f64| (((v - lo) / w * n as f64).floor().max(0.0) as usize).min(n - 1);
                let i = cell(p.x, domain.min.x, domain.width());
                let j = cell(p.y, domain.min.y, domain.height());
                if (i + j) % 2 == 0 {
                    first
                } else {
                    second
                }
            }
        }
    }

    pub fn is_positive(&self) -> bool {
        match *self {
            Coefficient::Constant(k) => k > 0.0,
            Coefficient::Chessboard { n, first, second } => n > 0 && first > 0.0 && second > 0.0,
        }
    }
}

/// Complete description of a boundary value problem on a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub domain: Rect,
    pub bc: BoundarySpec,
    pub source: ScalarField,
    pub dirichlet: DirichletData,
    /// Neumann datum on the Neumann sides away from feature boundaries.
    pub neumann: FluxData,
    /// Neumann datum on feature boundaries inside the domain.
    pub feature_flux: FluxData,
    /// Neumann datum on the parts of the domain boundary covered by features.
    pub feature_flux_zero: FluxData,
    pub kappa: Coefficient,
}

impl ProblemSpec {
    /// Single internal feature in the unit square, Dirichlet everywhere.
    pub fn test1() -> Self {
        Self {
            domain: Rect::unit_square(),
            bc: BoundarySpec::all_dirichlet(),
            source: ScalarField::Zero,
            dirichlet: DirichletData::ExpCorner { scale: 1.0 },
            neumann: FluxData::Zero,
            feature_flux: FluxData::Zero,
            feature_flux_zero: FluxData::Zero,
            kappa: Coefficient::Constant(1.0),
        }
    }

    /// Unit square, Dirichlet at the bottom and top, Neumann on the sides.
    pub fn test2() -> Self {
        Self {
            bc: BoundarySpec {
                left: SideKind::Neumann,
                right: SideKind::Neumann,
                bottom: SideKind::Dirichlet,
                top: SideKind::Dirichlet,
            },
            dirichlet: DirichletData::ExpBottom { scale: 1.0 },
            ..Self::test1()
        }
    }

    /// `(-1,1)^2` with a 4x4 chessboard coefficient (1 and 100).
    pub fn test3() -> Self {
        Self {
            domain: Rect::new(Point2::new(-1.0, -1.0), Point2::new(1.0, 1.0)),
            bc: BoundarySpec::all_dirichlet(),
            source: ScalarField::Zero,
            dirichlet: DirichletData::RampSquare { scale: 1.0 },
            neumann: FluxData::Zero,
            feature_flux: FluxData::Zero,
            feature_flux_zero: FluxData::Zero,
            kappa: Coefficient::Chessboard { n: 4, first: 1.0, second: 100.0 },
        }
    }

    pub fn kappa_at(&self, p: Point2) -> f64 {
        self.kappa.eval(p, &self.domain)
    }

    pub fn dirichlet_at(&self, p: Point2) -> f64 {
        self.dirichlet.eval(p, &self.domain)
    }

    /// Neumann datum on the outer boundary at `p` with outward normal `n`:
    /// the feature datum where a feature covers the boundary, the side datum otherwise.
    pub fn boundary_flux(&self, p: Point2, n: Point2, features: &[Feature]) -> f64 {
        let covered = features
            .iter()
            .filter(|f| f.is_boundary_feature())
            .any(|f| point_in_polygon(p, &f.shape) != Location::Outside);
        if covered {
            self.feature_flux_zero.eval(p, n)
        } else {
            self.neumann.eval(p, n)
        }
    }

    /// Multiplies all data by `s` (the solution scales linearly).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            source: self.source.scaled(s),
            dirichlet: self.dirichlet.scaled(s),
            neumann: self.neumann.scaled(s),
            feature_flux: self.feature_flux.scaled(s),
            feature_flux_zero: self.feature_flux_zero.scaled(s),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_data_continuous_at_corners() {
        let s = ProblemSpec::test3();
        // Corner values from the two adjacent side formulas.
        let corners = [
            ((-1.0, -1.0), ramp_low(-1.0), ramp_high(1.0)),
            ((-1.0, 1.0), ramp_high(-1.0), ramp_high(-1.0)),
            ((1.0, 1.0), ramp_high(1.0), ramp_low(-1.0)),
            ((1.0, -1.0), ramp_low(1.0), ramp_low(1.0)),
        ];
        for ((x, y), a, b) in corners {
            assert_eq!(a, b);
            assert_eq!(s.dirichlet_at(Point2::new(x, y)), a);
        }
        for t in [-0.5f64, 0.0, 0.5] {
            let e = 1e-12;
            assert!((ramp_high(t - e) - ramp_high(t + e)).abs() < 1e-9);
            assert!((ramp_low(t - e) - ramp_low(t + e)).abs() < 1e-9);
        }
    }

    #[test]
    fn chessboard_pattern() {
        let s = ProblemSpec::test3();
        assert_eq!(s.kappa_at(Point2::new(-0.9, -0.9)), 1.0);
        assert_eq!(s.kappa_at(Point2::new(-0.4, -0.9)), 100.0);
        assert_eq!(s.kappa_at(Point2::new(-0.4, -0.4)), 1.0);
        assert_eq!(s.kappa_at(Point2::new(0.9, 0.9)), 1.0);
    }

    #[test]
    fn exponential_data() {
        let s = ProblemSpec::test1();
        assert_eq!(s.dirichlet_at(Point2::new(0.0, 0.5)), (-4.0f64).exp());
        assert_eq!(s.dirichlet_at(Point2::new(1.0, 0.5)), 0.0);
        let t2 = ProblemSpec::test2();
        assert_eq!(t2.dirichlet_at(Point2::new(0.25, 0.0)), (-2.0f64).exp());
        assert_eq!(t2.dirichlet_at(Point2::new(0.25, 1.0)), 0.0);
    }
}
