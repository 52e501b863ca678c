//! Unfitted P1 discretisation of the partially defeatured problem.
//!
//! Integrals run over the active part of each element only. Dirichlet data
//! is interpolated at boundary vertices. Vertices whose active support is
//! negligible are dropped from the system and given the mean of their
//! neighbours afterwards.

use crate::error::{Error, MeshError};
use crate::geometry::{clip_triangle, Feature, Point2};
use crate::linalg::{solve_spd, SparseMatrix};
use crate::mesh::{barycentric, barycentric_gradients, ActiveClassification, BoundaryTag, Mesh, PointLocator};
use crate::problem::ProblemSpec;
use crate::quadrature::{cut_rule, segment_rule, SEGMENT_DEGREE, VOLUME_DEGREE};

/// Relative active support below which a vertex is removed from the system.
pub const SMALL_CUT_RATIO: f64 = 1e-10;

/// Role of a mesh vertex in the primal system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexRole {
    /// Unknown with the given index.
    Free(usize),
    Dirichlet,
    /// Active but with negligible support.
    Removed,
    Inactive,
}

/// Assembled global system.
#[derive(Debug, Clone)]
pub struct PrimalSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub roles: Vec<VertexRole>,
    /// Interpolated Dirichlet values (zero elsewhere).
    pub lifting: Vec<f64>,
    pub n_dofs: usize,
}

/// P1 solution on the active mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSolution {
    pub values: Vec<f64>,
    pub roles: Vec<VertexRole>,
    pub n_dofs: usize,
    /// Constant gradient per triangle.
    pub gradients: Vec<Point2>,
    pub residual: f64,
}

impl DiscreteSolution {
    pub fn value_at(&self, mesh: &Mesh, t: usize, p: Point2) -> f64 {
        let l = barycentric(mesh, t, p);
        let [a, b, c] = mesh.triangles[t];
        l[0] * self.values[a] + l[1] * self.values[b] + l[2] * self.values[c]
    }
}

fn roles(mesh: &Mesh, cls: &ActiveClassification) -> (Vec<VertexRole>, usize) {
    let nv = mesh.n_vertices();
    let on_dirichlet = mesh.vertices_with_tag(BoundaryTag::Dirichlet);
    let mut support = vec![0.0; nv];
    let mut total = vec![0.0; nv];
    for t in 0..mesh.n_triangles() {
        let area = mesh.area(t);
        for &v in &mesh.triangles[t] {
            total[v] += area;
            if cls.is_active(t) {
                support[v] += cls.active_area[t];
            }
        }
    }
    let active = cls.active_vertices(mesh);
    let mut n = 0;
    let roles = (0..nv)
        .map(|v| {
            if !active[v] {
                VertexRole::Inactive
            } else if on_dirichlet[v] {
                VertexRole::Dirichlet
            } else if support[v] < SMALL_CUT_RATIO * total[v] {
                VertexRole::Removed
            } else {
                n += 1;
                VertexRole::Free(n - 1)
            }
        })
        .collect();
    (roles, n)
}

/// Parameter intervals of `a -> b` outside all convex parts of `features`.
pub(crate) fn outside_intervals(a: Point2, b: Point2, features: &[&Feature]) -> Vec<(f64, f64)> {
    let mut keep = vec![(0.0, 1.0)];
    let d = b - a;
    for f in features {
        for part in &f.parts {
            let (mut t0, mut t1) = (0.0f64, 1.0f64);
            let mut hit = true;
            for (p, q) in part.edges() {
                let e = q - p;
                let fa = e.cross(a - p);
                let fd = e.cross(d);
                if fd == 0.0 {
                    if fa < 0.0 {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let t = -fa / fd;
                if fd > 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
            }
            if !hit || t1 <= t0 {
                continue;
            }
            keep = keep
                .into_iter()
                .flat_map(|(s0, s1)| {
                    let mut out = Vec::with_capacity(2);
                    if t0 > s0 {
                        out.push((s0, t0.min(s1)));
                    }
                    if t1 < s1 {
                        out.push((t1.max(s0), s1));
                    }
                    out.into_iter().filter(|(x, y)| y > x)
                })
                .collect();
        }
    }
    keep
}

/// Assembles the reduced stiffness system.
pub fn assemble_primal(
    mesh: &Mesh,
    cls: &ActiveClassification,
    spec: &ProblemSpec,
    features: &[Feature],
) -> Result<PrimalSystem, Error> {
    let (roles, n) = roles(mesh, cls);
    let lifting: Vec<f64> = (0..mesh.n_vertices())
        .map(|v| if roles[v] == VertexRole::Dirichlet { spec.dirichlet_at(mesh.vertices[v]) } else { 0.0 })
        .collect();
    let included: Vec<&Feature> = features.iter().filter(|f| f.is_included()).collect();
    let mut triplets = Vec::with_capacity(cls.active.len() * 9);
    let mut rhs = vec![0.0; n];
    for &t in &cls.active {
        let tri = mesh.triangles[t];
        let g = barycentric_gradients(mesh, t);
        let kappa = spec.kappa_at(mesh.centroid(t));
        let area = cls.active_area[t];
        let mut load = [0.0; 3];
        if spec.source != crate::problem::ScalarField::Zero {
            let rule = cut_rule(&cls.pieces[t], VOLUME_DEGREE)?;
            for (p, w) in rule.iter() {
                let f = spec.source.eval(p);
                let l = barycentric(mesh, t, p);
                for i in 0..3 {
                    load[i] += w * f * l[i];
                }
            }
        }
        for seg in &cls.segments[t] {
            let rule = segment_rule(seg.a, seg.b, SEGMENT_DEGREE)?;
            for (p, w) in rule.iter() {
                let gv = spec.feature_flux.eval(p, seg.normal);
                let l = barycentric(mesh, t, p);
                for i in 0..3 {
                    load[i] += w * gv * l[i];
                }
            }
        }
        for i in 0..3 {
            let e = mesh.tri_edges[t][i];
            let edge = &mesh.edges[e];
            if !(edge.is_boundary() && edge.tag == BoundaryTag::Neumann) {
                continue;
            }
            let (pa, pb) = (mesh.vertices[edge.v[0]], mesh.vertices[edge.v[1]]);
            let outward = outward_normal(mesh, t, e);
            for (s0, s1) in outside_intervals(pa, pb, &included) {
                let rule = segment_rule(pa.lerp(pb, s0), pa.lerp(pb, s1), SEGMENT_DEGREE)?;
                for (p, w) in rule.iter() {
                    let gv = spec.boundary_flux(p, outward, features);
                    let l = barycentric(mesh, t, p);
                    for k in 0..3 {
                        load[k] += w * gv * l[k];
                    }
                }
            }
        }
        for i in 0..3 {
            let VertexRole::Free(r) = roles[tri[i]] else { continue };
            rhs[r] += load[i];
            for j in 0..3 {
                let a = kappa * area * g[i].dot(g[j]);
                match roles[tri[j]] {
                    VertexRole::Free(c) => triplets.push((r, c, a)),
                    VertexRole::Dirichlet => rhs[r] -= a * lifting[tri[j]],
                    _ => {}
                }
            }
        }
    }
    Ok(PrimalSystem { matrix: SparseMatrix::from_triplets(n, n, &triplets), rhs, roles, lifting, n_dofs: n })
}

/// Outward unit normal of the domain on boundary edge `e` of triangle `t`.
pub fn outward_normal(mesh: &Mesh, t: usize, e: usize) -> Point2 {
    let n = mesh.edge_normal(e);
    let [a, _] = mesh.edges[e].v;
    if n.dot(mesh.centroid(t) - mesh.vertices[a]) > 0.0 {
        -n
    } else {
        n
    }
}

/// Assembles, solves and extends the solution to removed vertices.
pub fn solve_primal(
    spec: &ProblemSpec,
    mesh: &Mesh,
    cls: &ActiveClassification,
    features: &[Feature],
) -> Result<DiscreteSolution, Error> {
    let sys = assemble_primal(mesh, cls, spec, features)?;
    let x = solve_spd(&sys.matrix, &sys.rhs)?;
    let residual = {
        let ax = sys.matrix.matvec(&x);
        let r: f64 = ax.iter().zip(&sys.rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = sys.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb > 0.0 {
            r / nb
        } else {
            r
        }
    };
    let mut values = sys.lifting.clone();
    for (v, role) in sys.roles.iter().enumerate() {
        if let VertexRole::Free(i) = role {
            values[v] = x[*i];
        }
    }
    for v in 0..mesh.n_vertices() {
        if sys.roles[v] != VertexRole::Removed {
            continue;
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for &t in mesh.vertex_triangles(v) {
            if !cls.is_active(t) {
                continue;
            }
            for &w in &mesh.triangles[t] {
                if matches!(sys.roles[w], VertexRole::Free(_) | VertexRole::Dirichlet) {
                    sum += values[w];
                    count += 1;
                }
            }
        }
        values[v] = if count > 0 { sum / count as f64 } else { 0.0 };
    }
    let gradients = gradients(mesh, &values);
    Ok(DiscreteSolution { values, roles: sys.roles, n_dofs: sys.n_dofs, gradients, residual })
}

fn gradients(mesh: &Mesh, values: &[f64]) -> Vec<Point2> {
    (0..mesh.n_triangles())
        .map(|t| {
            let g = barycentric_gradients(mesh, t);
            let [a, b, c] = mesh.triangles[t];
            g[0] * values[a] + g[1] * values[b] + g[2] * values[c]
        })
        .collect()
}

/// Weighted energy norm of `u - u_ref` over the physical domain (all
/// features removed). Both meshes must be refinements of the same initial
/// mesh; the integral runs over the common refinement.
pub fn energy_error(
    mesh: &Mesh,
    u: &DiscreteSolution,
    ref_mesh: &Mesh,
    ref_cls: &ActiveClassification,
    u_ref: &DiscreteSolution,
    all_features: &[Feature],
    spec: &ProblemSpec,
) -> Result<f64, MeshError> {
    let n_roots = |m: &Mesh| m.root.iter().copied().max().map_or(0, |r| r + 1);
    if mesh.domain != ref_mesh.domain || n_roots(mesh) != n_roots(ref_mesh) {
        return Err(MeshError::NotNested);
    }
    let loc = PointLocator::new(mesh);
    let ref_loc = PointLocator::new(ref_mesh);
    let contains = |m: &Mesh, outer: usize, pts: [Point2; 3]| {
        pts.iter().all(|&p| barycentric(m, outer, p).iter().all(|&l| l >= -1e-9))
    };
    let mut sum = 0.0;
    for r in 0..ref_mesh.n_triangles() {
        let area = ref_cls.active_area[r];
        let c = ref_mesh.centroid(r);
        let a = loc.locate(mesh, c).ok_or(MeshError::NotNested)?;
        if mesh.root[a] != ref_mesh.root[r] {
            return Err(MeshError::NotNested);
        }
        if mesh.generation[a] > ref_mesh.generation[r] {
            continue;
        }
        if !contains(mesh, a, ref_mesh.points(r)) {
            return Err(MeshError::NotNested);
        }
        if area > 0.0 {
            let d = u.gradients[a] - u_ref.gradients[r];
            sum += spec.kappa_at(c) * d.dot(d) * area;
        }
    }
    let everything: Vec<&Feature> = all_features.iter().collect();
    for a in 0..mesh.n_triangles() {
        let c = mesh.centroid(a);
        let r = ref_loc.locate(ref_mesh, c).ok_or(MeshError::NotNested)?;
        if mesh.generation[a] <= ref_mesh.generation[r] {
            continue;
        }
        if !contains(ref_mesh, r, mesh.points(a)) {
            return Err(MeshError::NotNested);
        }
        let area: f64 = clip_triangle(mesh.points(a), &everything)?.iter().map(|p| p.area()).sum();
        if area > 0.0 {
            let d = u.gradients[a] - u_ref.gradients[r];
            sum += spec.kappa_at(c) * d.dot(d) * area;
        }
    }
    Ok(sum.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{regular_polygon, FeatureStatus, Polygon, Rect};
    use crate::mesh::{build_structured_mesh, classify_active, BoundarySpec, SideKind};
    use crate::problem::{DirichletData, FluxData};
    use crate::quadrature::triangle_rule;

    fn affine_spec() -> ProblemSpec {
        ProblemSpec { dirichlet: DirichletData::Affine { a: 1.0, b: 1.0, c: 0.0 }, ..ProblemSpec::test1() }
    }

    #[test]
    fn reproduces_affine() {
        let m = build_structured_mesh(Rect::unit_square(), 0.2, BoundarySpec::all_dirichlet()).unwrap();
        let cls = classify_active(&m, &[]).unwrap();
        let u = solve_primal(&affine_spec(), &m, &cls, &[]).unwrap();
        for (p, v) in m.vertices.iter().zip(&u.values) {
            assert!((v - (p.x + p.y)).abs() < 1e-13);
        }
        let sys = assemble_primal(&m, &cls, &affine_spec(), &[]).unwrap();
        assert!(sys.matrix.asymmetry() < 1e-14);
        assert!(u.residual < 1e-10);
    }

    #[test]
    fn zero_data_zero_solution() {
        let spec = ProblemSpec { dirichlet: DirichletData::Zero, ..ProblemSpec::test1() };
        let m = build_structured_mesh(Rect::unit_square(), 0.2, BoundarySpec::all_dirichlet()).unwrap();
        let cls = classify_active(&m, &[]).unwrap();
        let u = solve_primal(&spec, &m, &cls, &[]).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_with_feature_and_neumann_sides() {
        // u = 2x - y: flux datum grad(u).n on every Neumann part.
        let bc = BoundarySpec { left: SideKind::Neumann, right: SideKind::Dirichlet, bottom: SideKind::Neumann, top: SideKind::Dirichlet };
        let spec = ProblemSpec {
            bc,
            dirichlet: DirichletData::Affine { a: 2.0, b: -1.0, c: 0.5 },
            neumann: FluxData::Vector { gx: 2.0, gy: -1.0 },
            feature_flux: FluxData::Vector { gx: 2.0, gy: -1.0 },
            feature_flux_zero: FluxData::Vector { gx: 2.0, gy: -1.0 },
            ..ProblemSpec::test1()
        };
        let m = build_structured_mesh(Rect::unit_square(), 0.15, bc).unwrap();
        let mut inner = Feature::new(0, regular_polygon(Point2::new(0.43, 0.52), 0.13, 7, 10.0).unwrap(), &spec.domain).unwrap();
        inner.status = FeatureStatus::Included;
        let mut edge = Feature::new(1, regular_polygon(Point2::new(0.0, 0.2), 0.08, 6, 3.0).unwrap(), &spec.domain).unwrap();
        edge.status = FeatureStatus::Included;
        let feats = vec![inner, edge];
        let cls = classify_active(&m, &feats).unwrap();
        let u = solve_primal(&spec, &m, &cls, &feats).unwrap();
        for t in &cls.active {
            let g = u.gradients[*t];
            assert!((g.x - 2.0).abs() < 1e-10 && (g.y + 1.0).abs() < 1e-10, "triangle {t}: {g:?}");
        }
    }

    #[test]
    fn cut_stiffness_matches_dense_reassembly() {
        let m = build_structured_mesh(Rect::unit_square(), std::f64::consts::SQRT_2 / 2.0, BoundarySpec::all_dirichlet()).unwrap();
        // The rectangle leaves a quarter of the lower triangle of the first cell.
        let mut f = Feature::new(0, Rect::new(Point2::new(0.0, 0.0), Point2::new(0.5, 0.25)).as_polygon(), &Rect::unit_square()).unwrap();
        f.status = FeatureStatus::Included;
        let t = 0;
        let cls = classify_active(&m, std::slice::from_ref(&f)).unwrap();
        assert!(cls.is_cut(t));
        let frac = cls.active_area[t] / m.area(t);
        assert!((frac - 0.25).abs() < 1e-14);
        // Independent oracle: integrate grad phi_i . grad phi_j with a triangle
        // rule over an ear-clipped triangulation of each clip piece.
        let g = barycentric_gradients(&m, t);
        let mut k = [[0.0; 3]; 3];
        for piece in &cls.pieces[t] {
            for tri in crate::geometry::ear_clip(&piece.vertices) {
                let r = triangle_rule(tri, 2).unwrap();
                for i in 0..3 {
                    for j in 0..3 {
                        k[i][j] += r.integrate(|_| g[i].dot(g[j]));
                    }
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let assembled = cls.active_area[t] * g[i].dot(g[j]);
                assert!((assembled - k[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn neumann_portion_excludes_features() {
        let mut f = Feature::new(0, Rect::new(Point2::new(-1.0, 0.2), Point2::new(0.1, 0.5)).as_polygon(), &Rect::unit_square()).unwrap();
        f.status = FeatureStatus::Included;
        let iv = outside_intervals(Point2::new(0.0, 0.0), Point2::new(0.0, 1.0), &[&f]);
        assert_eq!(iv.len(), 2);
        assert!((iv[0].1 - 0.2).abs() < 1e-15 && (iv[1].0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn energy_error_cases() {
        let spec = ProblemSpec { dirichlet: DirichletData::Affine { a: 1.0, b: 1.0, c: 0.0 }, ..ProblemSpec::test1() };
        let coarse = build_structured_mesh(Rect::unit_square(), 0.3, BoundarySpec::all_dirichlet()).unwrap();
        let fine = coarse.refine_uniform(2);
        let (cc, cf) = (classify_active(&coarse, &[]).unwrap(), classify_active(&fine, &[]).unwrap());
        let uc = solve_primal(&spec, &coarse, &cc, &[]).unwrap();
        let uf = solve_primal(&spec, &fine, &cf, &[]).unwrap();
        assert_eq!(energy_error(&coarse, &uc, &coarse, &cc, &uc, &[], &spec).unwrap(), 0.0);
        assert!(energy_error(&coarse, &uc, &fine, &cf, &uf, &[], &spec).unwrap() < 1e-12);

        // Interpolants of x^2 on one element versus its uniform refinements.
        let one = build_structured_mesh(Rect::unit_square(), 1.5, BoundarySpec::all_dirichlet()).unwrap();
        let four = one.refine_uniform(2);
        let interp = |m: &Mesh| {
            let values: Vec<f64> = m.vertices.iter().map(|p| p.x * p.x).collect();
            DiscreteSolution { gradients: gradients(m, &values), values, roles: vec![], n_dofs: 0, residual: 0.0 }
        };
        let (u1, u4) = (interp(&one), interp(&four));
        let c4 = classify_active(&four, &[]).unwrap();
        let e = energy_error(&one, &u1, &four, &c4, &u4, &[], &spec).unwrap();
        // Hand computation: the coarse interpolant of x^2 has gradient (1, 0).
        // After two bisections the unit square is split into 8 triangles on a
        // 2x2 grid; the fine gradients are (0.5,0) on x<1/2 and (1.5,0) on x>1/2.
        assert!((e - 0.5).abs() < 1e-14);
    }

    #[test]
    fn non_nested_rejected() {
        let spec = ProblemSpec::test1();
        let a = build_structured_mesh(Rect::unit_square(), 0.3, BoundarySpec::all_dirichlet()).unwrap();
        let b = build_structured_mesh(Rect::unit_square(), 0.2, BoundarySpec::all_dirichlet()).unwrap();
        let (ca, cb) = (classify_active(&a, &[]).unwrap(), classify_active(&b, &[]).unwrap());
        let ua = solve_primal(&spec, &a, &ca, &[]).unwrap();
        let ub = solve_primal(&spec, &b, &cb, &[]).unwrap();
        assert_eq!(energy_error(&a, &ua, &b, &cb, &ub, &[], &spec), Err(MeshError::NotNested));
    }

    #[test]
    fn small_cut_vertex_removed() {
        let m = build_structured_mesh(Rect::unit_square(), std::f64::consts::SQRT_2 / 4.0, BoundarySpec::all_dirichlet()).unwrap();
        // A feature covering the support of vertex (0.5,0.5) except a sliver.
        let s = 1e-13;
        let mut f = Feature::new(
            0,
            Polygon::new(vec![
                Point2::new(0.25 + s, 0.25 + s),
                Point2::new(0.75 - s, 0.25 + s),
                Point2::new(0.75 - s, 0.75 - s),
                Point2::new(0.25 + s, 0.75 - s),
            ])
            .unwrap(),
            &Rect::unit_square(),
        )
        .unwrap();
        f.status = FeatureStatus::Included;
        let cls = classify_active(&m, std::slice::from_ref(&f)).unwrap();
        let spec = affine_spec();
        let u = solve_primal(&spec, &m, &cls, std::slice::from_ref(&f)).unwrap();
        let v = m.vertices.iter().position(|p| p.dist(Point2::new(0.5, 0.5)) < 1e-12).unwrap();
        assert_eq!(u.roles[v], VertexRole::Removed);
        assert!(u.values[v].is_finite());
    }
}
