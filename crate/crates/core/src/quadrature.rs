//! Quadrature on triangles, clipped polygons and straight segments.
//!
//! Triangle rules are the symmetric Dunavant rules; segment rules are
//! Gauss–Legendre. All rules are returned in physical coordinates with
//! weights summing to the measure of the region.

use std::sync::OnceLock;

use crate::error::QuadratureError;
use crate::geometry::{triangle_signed_area, Point2, Polygon};

/// Highest supported triangle degree.
pub const MAX_TRIANGLE_DEGREE: usize = 6;
/// Highest supported segment degree (five Gauss points).
pub const MAX_SEGMENT_DEGREE: usize = 9;

/// Volume degree used for products of two flux basis functions.
pub const VOLUME_DEGREE: usize = 4;
/// Segment degree: traces of the flux are quadratic along a segment, and
/// the squared residuals in the estimator reach degree four.
pub const SEGMENT_DEGREE: usize = 5;

/// Points and positive weights in physical coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<Point2>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of weights, i.e. the measure of the region.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, mut f: impl FnMut(Point2) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(*p)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Point2, f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn extend(&mut self, other: QuadratureRule) {
        self.points.extend(other.points);
        self.weights.extend(other.weights);
    }
}

/// Barycentric point `(l0, l1, l2)` and weight normalised to unit area.
type BaryPoint = ([f64; 3], f64);

fn orbit3(a: f64, w: f64, out: &mut Vec<BaryPoint>) {
    let b = 1.0 - 2.0 * a;
    out.push(([a, a, b], w));
    out.push(([a, b, a], w));
    out.push(([b, a, a], w));
}

fn orbit6(a: f64, b: f64, w: f64, out: &mut Vec<BaryPoint>) {
    let c = 1.0 - a - b;
    for l in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
        out.push((l, w));
    }
}

fn reference_rules() -> &'static [Vec<BaryPoint>; 5] {
    static RULES: OnceLock<[Vec<BaryPoint>; 5]> = OnceLock::new();
    RULES.get_or_init(|| {
        let third = 1.0 / 3.0;
        let d1 = vec![([third; 3], 1.0)];

        let mut d2 = Vec::new();
        orbit3(1.0 / 6.0, third, &mut d2);

        let mut d4 = Vec::new();
        let s10 = 10f64.sqrt();
        let r = (38.0 - 44.0 * (0.4f64).sqrt()).sqrt();
        let q = (213125.0 - 53320.0 * s10).sqrt();
        orbit3((8.0 - s10 + r) / 18.0, (620.0 + q) / 3720.0, &mut d4);
        orbit3((8.0 - s10 - r) / 18.0, (620.0 - q) / 3720.0, &mut d4);

        let mut d5 = vec![([third; 3], 9.0 / 40.0)];
        let s15 = 15f64.sqrt();
        orbit3((6.0 - s15) / 21.0, (155.0 - s15) / 1200.0, &mut d5);
        orbit3((6.0 + s15) / 21.0, (155.0 + s15) / 1200.0, &mut d5);

        let mut d6 = Vec::new();
        orbit3(0.063089014491502228340331602870819, 0.050844906370206816920936809106869, &mut d6);
        orbit3(0.24928674517091042129163855310702, 0.11678627572637936602528961138558, &mut d6);
        orbit6(
            0.053145049844816947353249671631398,
            0.31035245103378440541660773395655,
            0.082851075618373575193553456420442,
            &mut d6,
        );
        [d1, d2, d4, d5, d6]
    })
}

fn reference_rule(degree: usize) -> Result<&'static [BaryPoint], QuadratureError> {
    let rules = reference_rules();
    let idx = match degree {
        0 | 1 => 0,
        2 => 1,
        3 | 4 => 2,
        5 => 3,
        6 => 4,
        _ => {
            return Err(QuadratureError::UnsupportedDegree { degree, min: 1, max: MAX_TRIANGLE_DEGREE });
        }
    };
    Ok(&rules[idx])
}

fn push_triangle(tri: [Point2; 3], rule: &[BaryPoint], out: &mut QuadratureRule) {
    let area = triangle_signed_area(tri[0], tri[1], tri[2]).abs();
    for (l, w) in rule {
        out.points.push(Point2::new(
            l[0] * tri[0].x + l[1] * tri[1].x + l[2] * tri[2].x,
            l[0] * tri[0].y + l[1] * tri[1].y + l[2] * tri[2].y,
        ));
        out.weights.push(w * area);
    }
}

/// Rule exact for polynomials of total degree `degree` on `tri`.
pub fn triangle_rule(tri: [Point2; 3], degree: usize) -> Result<QuadratureRule, QuadratureError> {
    let rule = reference_rule(degree)?;
    let mut out = QuadratureRule::default();
    push_triangle(tri, rule, &mut out);
    Ok(out)
}

/// Rule on a union of polygons. Triangles use the base rule; larger
/// polygons are fanned from their centroid.
pub fn cut_rule(polygons: &[Polygon], degree: usize) -> Result<QuadratureRule, QuadratureError> {
    let rule = reference_rule(degree)?;
    let mut out = QuadratureRule::default();
    for poly in polygons {
        let v = &poly.vertices;
        if v.len() == 3 {
            push_triangle([v[0], v[1], v[2]], rule, &mut out);
            continue;
        }
        let c = poly.centroid();
        for i in 0..v.len() {
            let tri = [c, v[i], v[(i + 1) % v.len()]];
            if triangle_signed_area(tri[0], tri[1], tri[2]) > 0.0 {
                push_triangle(tri, rule, &mut out);
            }
        }
    }
    Ok(out)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(n: usize) -> &'static [(f64, f64)] {
    static RULES: OnceLock<Vec<Vec<(f64, f64)>>> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        let sym = |pairs: &[(f64, f64)]| -> Vec<(f64, f64)> {
            let mut out = Vec::new();
            for &(x, w) in pairs {
                if x == 0.0 {
                    out.push((0.5, 0.5 * w));
                } else {
                    out.push((0.5 - 0.5 * x, 0.5 * w));
                    out.push((0.5 + 0.5 * x, 0.5 * w));
                }
            }
            out.sort_by(|a, b| a.0.total_cmp(&b.0));
            out
        };
        let s = |x: f64| x.sqrt();
        vec![
            sym(&[(0.0, 2.0)]),
            sym(&[(1.0 / s(3.0), 1.0)]),
            sym(&[(0.0, 8.0 / 9.0), (s(0.6), 5.0 / 9.0)]),
            sym(&[
                (s(3.0 / 7.0 - 2.0 / 7.0 * s(1.2)), (18.0 + s(30.0)) / 36.0),
                (s(3.0 / 7.0 + 2.0 / 7.0 * s(1.2)), (18.0 - s(30.0)) / 36.0),
            ]),
            sym(&[
                (0.0, 128.0 / 225.0),
                (s(5.0 - 2.0 * s(10.0 / 7.0)) / 3.0, (322.0 + 13.0 * s(70.0)) / 900.0),
                (s(5.0 + 2.0 * s(10.0 / 7.0)) / 3.0, (322.0 - 13.0 * s(70.0)) / 900.0),
            ]),
        ]
    });
    &rules[n - 1]
}

/// Number of Gauss points needed for exactness of degree `degree`.
pub fn gauss_points_for(degree: usize) -> Result<usize, QuadratureError> {
    if degree > MAX_SEGMENT_DEGREE {
        return Err(QuadratureError::UnsupportedDegree { degree, min: 0, max: MAX_SEGMENT_DEGREE });
    }
    Ok(degree / 2 + 1)
}

/// Gauss rule on the straight segment `a -> b`, exact up to `degree`.
pub fn segment_rule(a: Point2, b: Point2, degree: usize) -> Result<QuadratureRule, QuadratureError> {
    let n = gauss_points_for(degree)?;
    let len = a.dist(b);
    let rule = gauss_legendre(n);
    Ok(QuadratureRule {
        points: rule.iter().map(|&(t, _)| a.lerp(b, t)).collect(),
        weights: rule.iter().map(|&(_, w)| w * len).collect(),
    })
}

/// Gauss nodes `t` in `[0, 1]` with weights summing to one.
pub fn unit_gauss(degree: usize) -> Result<&'static [(f64, f64)], QuadratureError> {
    Ok(gauss_legendre(gauss_points_for(degree)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> [Point2; 3] {
        [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)]
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(f64::from).product()
    }

    /// Exact moment of x^m y^n over the reference triangle.
    fn moment(m: u32, n: u32) -> f64 {
        factorial(m) * factorial(n) / factorial(m + n + 2)
    }

    #[test]
    fn basic_moments() {
        let r = triangle_rule(reference(), 1).unwrap();
        assert!((r.measure() - 0.5).abs() < 1e-16);
        assert!((r.integrate(|p| p.x) - 1.0 / 6.0).abs() < 1e-16);
        let r4 = triangle_rule(reference(), 4).unwrap();
        assert!((r4.integrate(|p| p.x * p.x * p.y * p.y) - 1.0 / 180.0).abs() < 1e-16);
    }

    #[test]
    fn exact_to_declared_degree() {
        for degree in 1..=MAX_TRIANGLE_DEGREE {
            let r = triangle_rule(reference(), degree).unwrap();
            assert!(r.weights.iter().all(|&w| w > 0.0));
            for m in 0..=degree as u32 {
                for n in 0..=(degree as u32 - m) {
                    let q = r.integrate(|p| p.x.powi(m as i32) * p.y.powi(n as i32));
                    let e = moment(m, n);
                    assert!((q - e).abs() < 2e-15, "degree {degree}: x^{m} y^{n}: {q} vs {e}");
                }
            }
        }
    }

    #[test]
    fn unsupported_degree() {
        assert!(triangle_rule(reference(), 7).is_err());
        assert!(segment_rule(Point2::default(), Point2::new(1.0, 0.0), 10).is_err());
    }

    #[test]
    fn cut_rule_cases() {
        let t = reference();
        let full = cut_rule(&[Polygon { vertices: t.to_vec() }], 4).unwrap();
        assert_eq!(full, triangle_rule(t, 4).unwrap());
        assert!(cut_rule(&[], 4).unwrap().is_empty());
        let half = Polygon {
            vertices: vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(1.0, 0.5), Point2::new(0.0, 0.5)],
        };
        let r = cut_rule(std::slice::from_ref(&half), 4).unwrap();
        assert!((r.measure() - half.area()).abs() < 1e-14);
        // x^2 y over [0,1]x[0,0.5] = (1/3)(1/8)
        assert!((r.integrate(|p| p.x * p.x * p.y) - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn segment_rules() {
        let (a, b) = (Point2::new(0.0, 0.0), Point2::new(1.0, 0.0));
        let r = segment_rule(a, b, 1).unwrap();
        assert!((r.measure() - 1.0).abs() < 1e-16);
        assert!((r.integrate(|p| p.x) - 0.5).abs() < 1e-16);
        let r2 = segment_rule(a, b, 3).unwrap();
        assert_eq!(r2.len(), 2);
        assert!((r2.integrate(|p| p.x.powi(3)) - 0.25).abs() < 1e-16);
        for degree in 0..=MAX_SEGMENT_DEGREE {
            let r = segment_rule(a, b, degree).unwrap();
            for k in 0..=degree as i32 {
                assert!((r.integrate(|p| p.x.powi(k)) - 1.0 / (k as f64 + 1.0)).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn measure_consistency(ax in -2.0f64..2.0, ay in -2.0f64..2.0, bx in -2.0f64..2.0, by in -2.0f64..2.0, n in 4usize..12) {
            let (a, b) = (Point2::new(ax, ay), Point2::new(bx, by));
            let r = segment_rule(a, b, SEGMENT_DEGREE).unwrap();
            prop_assert!((r.measure() - a.dist(b)).abs() <= 1e-13 * a.dist(b).max(1e-300));
            let poly = crate::geometry::regular_polygon(a, 0.5, n, bx * 50.0).unwrap();
            let c = cut_rule(std::slice::from_ref(&poly), VOLUME_DEGREE).unwrap();
            prop_assert!((c.measure() - poly.area()).abs() <= 1e-13 * poly.area());
        }
    }
}
