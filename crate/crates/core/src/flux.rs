//! Patch-local reconstruction of a weakly equilibrated flux.
//!
//! For every vertex `a` of the active mesh a small mixed problem is solved
//! on the patch `omega_a` in RT1 x broken P1, with the immersed Neumann
//! condition imposed through a Nitsche penalty. The local fluxes are summed
//! into one H(div)-conforming field.

use rayon::prelude::*;

use crate::error::FluxError;
use crate::geometry::{Feature, Point2, Rect, TOL_REL};
use crate::linalg::{condition_estimate, solve_dense, DenseMatrix};
use crate::mesh::{barycentric, barycentric_gradients, patch, ActiveClassification, BoundaryTag, Mesh, PatchKind};
use crate::primal::{outside_intervals, outward_normal, DiscreteSolution, VertexRole};
use crate::problem::ProblemSpec;
use crate::quadrature::{cut_rule, segment_rule, triangle_rule, unit_gauss, SEGMENT_DEGREE, VOLUME_DEGREE};
use crate::rt::{legendre, RtElement};

/// Default active fraction below which a patch is dropped.
pub const DISCARD_THRESHOLD: f64 = 1e-3;

/// Treatment of badly cut patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stabilization {
    /// Plain Nitsche patch problems.
    None,
    /// Ghost-penalty jumps on interior patch edges touching cut elements.
    Ghost { beta1: f64, beta2: f64 },
    /// Skip patches whose active fraction is below `threshold`.
    Discard { threshold: f64 },
}

impl Default for Stabilization {
    fn default() -> Self {
        Stabilization::Discard { threshold: DISCARD_THRESHOLD }
    }
}

/// Which mass-balance row the patch problems use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchVariant {
    #[default]
    Symmetric,
    /// Drops the immersed-boundary terms from the mass-balance row.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FluxOptions {
    pub stabilization: Stabilization,
    pub variant: PatchVariant,
}

/// Everything the patch problems read.
#[derive(Debug, Clone, Copy)]
pub struct FluxContext<'a> {
    pub mesh: &'a Mesh,
    pub cls: &'a ActiveClassification,
    pub spec: &'a ProblemSpec,
    /// All features, used for the boundary data.
    pub features: &'a [Feature],
    pub u: &'a DiscreteSolution,
}

/// Patch-independent element integrals. Vertex-dependent terms are stored
/// per local vertex; the pressure basis is `{1, xi_x, xi_y}`.
#[derive(Debug, Clone)]
pub struct ElementData {
    pub rt: RtElement,
    pub kappa: f64,
    /// `(k^-1 psi_i, psi_j)` over the active part.
    pub mass: [[f64; 8]; 8],
    /// `sum_seg <k^-1 psi_i.n, psi_j.n>` over immersed boundary segments.
    pub gram: [[f64; 8]; 8],
    /// `(q, div psi_j)` over the active part.
    pub bvol: [[f64; 8]; 3],
    /// `<q, psi_j.n>` on immersed segments.
    pub bseg: [[f64; 8]; 3],
    pub lvol: [[f64; 8]; 3],
    /// Nitsche load without the `1/h_a` factor.
    pub lseg: [[f64; 8]; 3],
    pub rvol: [[f64; 3]; 3],
    pub rseg: [[f64; 3]; 3],
    /// Integral of each pressure basis function over the whole element.
    pub mean: [f64; 3],
}

/// Pressure basis values at `p`.
pub fn pressure_basis(rt: &RtElement, p: Point2) -> [f64; 3] {
    let xi = rt.xi(p);
    [1.0, xi.x, xi.y]
}

fn element_data(ctx: &FluxContext, t: usize) -> Result<ElementData, FluxError> {
    let (mesh, cls, spec) = (ctx.mesh, ctx.cls, ctx.spec);
    let rt = RtElement::on_mesh(mesh, t).map_err(|source| FluxError::Element { triangle: t, source })?;
    let kappa = spec.kappa_at(mesh.centroid(t));
    let grad_u = ctx.u.gradients[t];
    let grad_l = barycentric_gradients(mesh, t);
    let mut d = ElementData {
        rt,
        kappa,
        mass: [[0.0; 8]; 8],
        gram: [[0.0; 8]; 8],
        bvol: [[0.0; 8]; 3],
        bseg: [[0.0; 8]; 3],
        lvol: [[0.0; 8]; 3],
        lseg: [[0.0; 8]; 3],
        rvol: [[0.0; 3]; 3],
        rseg: [[0.0; 3]; 3],
        mean: [0.0; 3],
    };
    let inv_k = 1.0 / kappa;
    for (p, w) in cut_rule(&cls.pieces[t], VOLUME_DEGREE)?.iter() {
        let psi = d.rt.values(p);
        let div = d.rt.divergences(p);
        let q = pressure_basis(&d.rt, p);
        let lam = barycentric(mesh, t, p);
        let f = spec.source.eval(p);
        for i in 0..8 {
            for j in i..8 {
                d.mass[i][j] += w * inv_k * psi[i].dot(psi[j]);
            }
        }
        for (a, qa) in q.iter().enumerate() {
            for j in 0..8 {
                d.bvol[a][j] += w * qa * div[j];
            }
        }
        for l in 0..3 {
            for j in 0..8 {
                d.lvol[l][j] -= w * lam[l] * grad_u.dot(psi[j]);
            }
            let src = lam[l] * f - kappa * grad_l[l].dot(grad_u);
            for (a, qa) in q.iter().enumerate() {
                d.rvol[l][a] += w * src * qa;
            }
        }
    }
    for seg in &cls.segments[t] {
        for (p, w) in segment_rule(seg.a, seg.b, SEGMENT_DEGREE)?.iter() {
            let psi = d.rt.values(p);
            let pn: [f64; 8] = std::array::from_fn(|i| psi[i].dot(seg.normal));
            let q = pressure_basis(&d.rt, p);
            let lam = barycentric(mesh, t, p);
            let g = spec.feature_flux.eval(p, seg.normal);
            for i in 0..8 {
                for j in i..8 {
                    d.gram[i][j] += w * inv_k * pn[i] * pn[j];
                }
            }
            for (a, qa) in q.iter().enumerate() {
                for j in 0..8 {
                    d.bseg[a][j] += w * qa * pn[j];
                }
            }
            for l in 0..3 {
                for j in 0..8 {
                    d.lseg[l][j] -= w * inv_k * lam[l] * g * pn[j];
                }
                for (a, qa) in q.iter().enumerate() {
                    d.rseg[l][a] += w * lam[l] * g * qa;
                }
            }
        }
    }
    for i in 0..8 {
        for j in 0..i {
            d.mass[i][j] = d.mass[j][i];
            d.gram[i][j] = d.gram[j][i];
        }
    }
    for (p, w) in triangle_rule(mesh.points(t), 2)?.iter() {
        let q = pressure_basis(&d.rt, p);
        for a in 0..3 {
            d.mean[a] += w * q[a];
        }
    }
    Ok(d)
}

/// Element integrals for every active triangle (`None` elsewhere).
pub fn element_cache(ctx: &FluxContext) -> Result<Vec<Option<ElementData>>, FluxError> {
    (0..ctx.mesh.n_triangles())
        .into_par_iter()
        .map(|t| if ctx.cls.is_active(t) { element_data(ctx, t).map(Some) } else { Ok(None) })
        .collect()
}

/// Assembled patch saddle-point system with essential conditions eliminated.
#[derive(Debug, Clone)]
pub struct PatchProblem {
    pub vertex: usize,
    pub kind: PatchKind,
    pub matrix: DenseMatrix,
    pub rhs: Vec<f64>,
    pub n_free: usize,
    pub n_pressure: usize,
    /// Connected pieces of the active part of the patch.
    pub n_components: usize,
    /// Zero-mean constraints, one per component without a Dirichlet edge.
    pub n_means: usize,
    pub h_a: f64,
    pub active_fraction: f64,
    pub is_cut: bool,
    /// `R_a(1)`, zero for interior patches of free vertices when the primal
    /// system is solved exactly.
    pub compatibility: f64,
    /// Patch RT unknown to global RT unknown.
    pub global_dofs: Vec<usize>,
    free: Vec<usize>,
    fixed: Vec<Option<f64>>,
}

impl PatchProblem {
    pub fn condition_estimate(&self) -> f64 {
        condition_estimate(&self.matrix)
    }
}

/// Local flux of one patch in global numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSolution {
    pub vertex: usize,
    pub global_dofs: Vec<usize>,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Multipliers of the zero-mean constraints.
    pub multipliers: Vec<f64>,
}

/// Global RT unknowns of triangle `t`: two per edge, then two interior.
pub fn element_dofs(mesh: &Mesh, t: usize) -> [usize; 8] {
    let te = mesh.tri_edges[t];
    let base = 2 * mesh.n_edges() + 2 * t;
    [2 * te[0], 2 * te[0] + 1, 2 * te[1], 2 * te[1] + 1, 2 * te[2], 2 * te[2] + 1, base, base + 1]
}

/// Prescribed edge moments of `-psi_a g_N` on a Neumann edge.
fn neumann_moments(ctx: &FluxContext, e: usize, vertex: usize) -> [f64; 2] {
    let mesh = ctx.mesh;
    let edge = &mesh.edges[e];
    let t = edge.tris[0];
    let n_out = outward_normal(mesh, t, e);
    let sign = mesh.edge_normal(e).dot(n_out);
    let [lo, hi] = edge.v;
    let (a, b) = (mesh.vertices[lo], mesh.vertices[hi]);
    let mut out = [0.0; 2];
    for &(s, w) in unit_gauss(SEGMENT_DEGREE).expect("supported degree") {
        let psi = if vertex == lo { 1.0 - s } else { s };
        let g = ctx.spec.boundary_flux(a.lerp(b, s), n_out, ctx.features);
        for (m, o) in out.iter_mut().enumerate() {
            *o -= sign * w * psi * g * legendre(m, s);
        }
    }
    out
}

/// Builds the patch problem of `vertex`, or `None` if the patch is discarded.
pub fn build_patch_problem(
    ctx: &FluxContext,
    cache: &[Option<ElementData>],
    vertex: usize,
    options: &FluxOptions,
) -> Result<Option<PatchProblem>, FluxError> {
    let (mesh, cls) = (ctx.mesh, ctx.cls);
    let p = patch(mesh, cls, vertex)?;
    let full: f64 = p.elements.iter().map(|&t| mesh.area(t)).sum();
    let active: f64 = p.elements.iter().map(|&t| cls.active_area[t]).sum();
    let active_fraction = active / full;
    if !(active > 0.0) {
        return Err(FluxError::EmptyPatch { vertex });
    }
    if let Stabilization::Discard { threshold } = options.stabilization {
        if active_fraction < threshold {
            return Ok(None);
        }
    }
    let h_a = p.elements.iter().map(|&t| mesh.diameter(t)).fold(0.0, f64::max);
    let nk = p.elements.len();

    let mut edges: Vec<usize> = Vec::with_capacity(2 * nk + 2);
    for &t in &p.elements {
        for &e in &mesh.tri_edges[t] {
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
    }
    let ne = edges.len();
    let n_rt = 2 * ne + 2 * nk;
    let local: Vec<[usize; 8]> = p
        .elements
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let te = mesh.tri_edges[t];
            let pos = |i: usize| edges.iter().position(|&e| e == te[i]).expect("edge collected");
            let (a, b, c) = (pos(0), pos(1), pos(2));
            [2 * a, 2 * a + 1, 2 * b, 2 * b + 1, 2 * c, 2 * c + 1, 2 * ne + 2 * k, 2 * ne + 2 * k + 1]
        })
        .collect();
    let mut global_dofs = vec![0usize; n_rt];
    for (k, &t) in p.elements.iter().enumerate() {
        for (l, g) in local[k].iter().zip(element_dofs(mesh, t)) {
            global_dofs[*l] = g;
        }
    }

    let mut fixed: Vec<Option<f64>> = vec![None; n_rt];
    for &e in &p.boundary_zero {
        let i = edges.iter().position(|&x| x == e).expect("patch edge");
        fixed[2 * i] = Some(0.0);
        fixed[2 * i + 1] = Some(0.0);
    }
    let included: Vec<&Feature> = ctx.features.iter().filter(|f| f.is_included()).collect();
    let component = patch_components(mesh, cls, &p.elements, &included);
    let n_components = component.iter().max().map_or(0, |c| c + 1);
    let mut touches_dirichlet = vec![false; n_components];
    for &e in &p.boundary_psi {
        let edge = &mesh.edges[e];
        if !edge.is_boundary() {
            continue;
        }
        match edge.tag {
            BoundaryTag::Neumann => {
                let i = edges.iter().position(|&x| x == e).expect("patch edge");
                let m = neumann_moments(ctx, e, vertex);
                fixed[2 * i] = Some(m[0]);
                fixed[2 * i + 1] = Some(m[1]);
            }
            BoundaryTag::Dirichlet => {
                if active_length(mesh, e, &included) > 0.0 {
                    let k = p.elements.iter().position(|&t| t == edge.tris[0]).expect("boundary edge of a patch element");
                    touches_dirichlet[component[k]] = true;
                }
            }
            BoundaryTag::Interior => {}
        }
    }
    // One zero-mean constraint per floating component of the active patch.
    let mean_rows: Vec<usize> = (0..n_components).filter(|&c| !touches_dirichlet[c]).collect();
    let n_means = mean_rows.len();

    let nq = 3 * nk;
    let mut a = DenseMatrix::zeros(n_rt, n_rt);
    let mut b_first = DenseMatrix::zeros(nq, n_rt);
    let mut b_second = DenseMatrix::zeros(nq, n_rt);
    let mut load = vec![0.0; n_rt];
    let mut r = vec![0.0; nq];
    let mut mean = vec![0.0; nq];
    let mut j2 = DenseMatrix::zeros(nq, nq);
    let symmetric = options.variant == PatchVariant::Symmetric;
    let mut is_cut = false;
    for (k, &t) in p.elements.iter().enumerate() {
        let d = cache[t].as_ref().expect("active element cached");
        is_cut |= cls.is_cut(t);
        let l = mesh.local_index(t, vertex).expect("patch element contains vertex");
        let map = &local[k];
        for i in 0..8 {
            for j in 0..8 {
                a[(map[i], map[j])] += d.mass[i][j] + d.gram[i][j] / h_a;
            }
            load[map[i]] += d.lvol[l][i] + d.lseg[l][i] / h_a;
        }
        for q in 0..3 {
            for j in 0..8 {
                b_first[(3 * k + q, map[j])] += d.bvol[q][j] - d.bseg[q][j];
                b_second[(3 * k + q, map[j])] += if symmetric { d.bvol[q][j] - d.bseg[q][j] } else { d.bvol[q][j] };
            }
            r[3 * k + q] = d.rvol[l][q] + if symmetric { d.rseg[l][q] } else { 0.0 };
            mean[3 * k + q] = d.mean[q];
        }
    }
    if let Stabilization::Ghost { beta1, beta2 } = options.stabilization {
        if beta1 != 0.0 || beta2 != 0.0 {
            add_ghost_penalty(ctx, cache, &p.elements, &local, &edges, h_a, beta1, beta2, &mut a, &mut j2)?;
        }
    }

    let free: Vec<usize> = (0..n_rt).filter(|&i| fixed[i].is_none()).collect();
    let nf = free.len();
    let n = nf + nq + n_means;
    let mut m = DenseMatrix::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for (fi, &i) in free.iter().enumerate() {
        for (fj, &j) in free.iter().enumerate() {
            m[(fi, fj)] = a[(i, j)];
        }
        let mut v = load[i];
        for (j, val) in fixed.iter().enumerate() {
            if let Some(val) = val {
                v -= a[(i, j)] * val;
            }
        }
        rhs[fi] = v;
        for q in 0..nq {
            m[(fi, nf + q)] = -b_first[(q, i)];
            m[(nf + q, fi)] = b_second[(q, i)];
        }
    }
    for q in 0..nq {
        let mut v = r[q];
        for (j, val) in fixed.iter().enumerate() {
            if let Some(val) = val {
                v -= b_second[(q, j)] * val;
            }
        }
        rhs[nf + q] = v;
        for s in 0..nq {
            m[(nf + q, nf + s)] = j2[(q, s)];
        }
        if let Some(row) = mean_rows.iter().position(|&c| c == component[q / 3]) {
            m[(nf + q, nf + nq + row)] = mean[q];
            m[(nf + nq + row, nf + q)] = mean[q];
        }
    }
    let compatibility = (0..nk).map(|k| r[3 * k]).sum();
    Ok(Some(PatchProblem {
        vertex,
        kind: p.kind,
        matrix: m,
        rhs,
        n_free: nf,
        n_pressure: nq,
        n_components,
        n_means,
        h_a,
        active_fraction,
        is_cut,
        compatibility,
        global_dofs,
        free,
        fixed,
    }))
}

/// Length of the part of edge `e` outside the included features.
fn active_length(mesh: &Mesh, e: usize, included: &[&Feature]) -> f64 {
    let [va, vb] = mesh.edges[e].v;
    let (a, b) = (mesh.vertices[va], mesh.vertices[vb]);
    let eb = Rect::bounding(&[a, b]);
    let near: Vec<&Feature> = included.iter().copied().filter(|f| f.bbox().overlaps(&eb)).collect();
    let fraction: f64 = outside_intervals(a, b, &near).iter().map(|(s0, s1)| s1 - s0).sum();
    fraction * a.dist(b)
}

/// Component index of each patch element. Elements are joined across a
/// shared edge whose active part has positive length.
fn patch_components(mesh: &Mesh, cls: &ActiveClassification, elements: &[usize], included: &[&Feature]) -> Vec<usize> {
    let nk = elements.len();
    let mut parent: Vec<usize> = (0..nk).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let any_cut = elements.iter().any(|&t| cls.is_cut(t));
    for k in 0..nk {
        for &e in &mesh.tri_edges[elements[k]] {
            let Some(other) = mesh.edges[e].other_tri(elements[k]) else { continue };
            let Some(j) = elements.iter().position(|&t| t == other) else { continue };
            if j < k {
                continue;
            }
            let touches_cut = cls.is_cut(elements[k]) || cls.is_cut(other);
            let linked = !any_cut || !touches_cut || active_length(mesh, e, included) > TOL_REL * mesh.edge_length(e);
            if linked {
                let (rk, rj) = (find(&mut parent, k), find(&mut parent, j));
                parent[rk] = rj;
            }
        }
    }
    let mut ids = vec![usize::MAX; nk];
    let mut next = 0;
    (0..nk)
        .map(|k| {
            let r = find(&mut parent, k);
            if ids[r] == usize::MAX {
                ids[r] = next;
                next += 1;
            }
            ids[r]
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn add_ghost_penalty(
    ctx: &FluxContext,
    cache: &[Option<ElementData>],
    elements: &[usize],
    local: &[[usize; 8]],
    edges: &[usize],
    h_a: f64,
    beta1: f64,
    beta2: f64,
    a: &mut DenseMatrix,
    j2: &mut DenseMatrix,
) -> Result<(), FluxError> {
    let (mesh, cls) = (ctx.mesh, ctx.cls);
    for &e in edges {
        let edge = &mesh.edges[e];
        if edge.is_boundary() {
            continue;
        }
        let [t1, t2] = edge.tris;
        let (Some(k1), Some(k2)) = (elements.iter().position(|&t| t == t1), elements.iter().position(|&t| t == t2)) else {
            continue;
        };
        if !cls.is_cut(t1) && !cls.is_cut(t2) {
            continue;
        }
        let (d1, d2) = (cache[t1].as_ref().expect("cached"), cache[t2].as_ref().expect("cached"));
        let n = mesh.edge_normal(e);
        let [va, vb] = edge.v;
        for (p, w) in segment_rule(mesh.vertices[va], mesh.vertices[vb], SEGMENT_DEGREE)?.iter() {
            let (v1, v2) = (d1.rt.values(p), d2.rt.values(p));
            let (g1, g2) = (d1.rt.normal_derivatives(p, n), d2.rt.normal_derivatives(p, n));
            let jump: Vec<(usize, Point2, Point2)> = (0..8)
                .map(|i| (local[k1][i], v1[i], g1[i]))
                .chain((0..8).map(|i| (local[k2][i], -v2[i], -g2[i])))
                .collect();
            for &(r, jr, dr) in &jump {
                for &(c, jc, dc) in &jump {
                    a[(r, c)] += w * beta1 * (h_a * jr.dot(jc) + h_a.powi(3) * dr.dot(dc));
                }
            }
            let (q1, q2) = (pressure_basis(&d1.rt, p), pressure_basis(&d2.rt, p));
            let dq = |d: &ElementData| [0.0, n.x / d.rt.h, n.y / d.rt.h];
            let (dq1, dq2) = (dq(d1), dq(d2));
            let qj: Vec<(usize, f64, f64)> = (0..3)
                .map(|i| (3 * k1 + i, q1[i], dq1[i]))
                .chain((0..3).map(|i| (3 * k2 + i, -q2[i], -dq2[i])))
                .collect();
            for &(r, jr, dr) in &qj {
                for &(c, jc, dc) in &qj {
                    j2[(r, c)] += w * beta2 * (jr * jc / h_a + h_a * dr * dc);
                }
            }
        }
    }
    Ok(())
}

/// Solves a patch problem and reinserts the prescribed unknowns.
pub fn solve_patch(problem: &PatchProblem) -> Result<PatchSolution, FluxError> {
    let x = solve_dense(&problem.matrix, &problem.rhs, Some(problem.vertex))
        .map_err(|source| FluxError::Solve { vertex: problem.vertex, source })?;
    let mut sigma: Vec<f64> = problem.fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
    for (fi, &i) in problem.free.iter().enumerate() {
        sigma[i] = x[fi];
    }
    let nf = problem.n_free;
    Ok(PatchSolution {
        vertex: problem.vertex,
        global_dofs: problem.global_dofs.clone(),
        sigma,
        lambda: x[nf..nf + problem.n_pressure].to_vec(),
        multipliers: x[nf + problem.n_pressure..].to_vec(),
    })
}

/// Summed RT1 field over the active mesh.
#[derive(Debug, Clone)]
pub struct GlobalFlux {
    pub coeffs: Vec<f64>,
    pub elements: Vec<Option<RtElement>>,
    pub n_edges: usize,
    /// Vertices whose patches were skipped.
    pub discarded: Vec<usize>,
    /// Largest `|R_a(1)|` over uncut interior patches of free vertices.
    pub max_compatibility_residual: f64,
}

impl GlobalFlux {
    pub fn local(&self, mesh: &Mesh, t: usize) -> [f64; 8] {
        element_dofs(mesh, t).map(|g| self.coeffs[g])
    }

    /// Value on triangle `t` (zero on inactive triangles).
    pub fn eval(&self, mesh: &Mesh, t: usize, p: Point2) -> Point2 {
        match &self.elements[t] {
            Some(rt) => rt.eval(&self.local(mesh, t), p),
            None => Point2::new(0.0, 0.0),
        }
    }

    pub fn div(&self, mesh: &Mesh, t: usize, p: Point2) -> f64 {
        match &self.elements[t] {
            Some(rt) => rt.div(&self.local(mesh, t), p),
            None => 0.0,
        }
    }
}

/// Adds local solutions into a global coefficient vector.
pub fn accumulate(n_dofs: usize, solutions: &[PatchSolution]) -> Vec<f64> {
    let mut coeffs = vec![0.0; n_dofs];
    for s in solutions {
        for (g, v) in s.global_dofs.iter().zip(&s.sigma) {
            coeffs[*g] += v;
        }
    }
    coeffs
}

/// Solves all patch problems and sums them.
pub fn reconstruct_flux(ctx: &FluxContext, options: &FluxOptions) -> Result<GlobalFlux, FluxError> {
    let mesh = ctx.mesh;
    let cache = element_cache(ctx)?;
    let active = ctx.cls.active_vertices(mesh);
    let vertices: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| active[v]).collect();
    let outcomes: Vec<Result<Option<(PatchSolution, f64)>, FluxError>> = vertices
        .par_iter()
        .map(|&v| {
            let Some(problem) = build_patch_problem(ctx, &cache, v, options)? else { return Ok(None) };
            let check = problem.kind == PatchKind::Interior
                && !problem.is_cut
                && matches!(ctx.u.roles.get(v), Some(VertexRole::Free(_)));
            let compat = if check { problem.compatibility.abs() } else { 0.0 };
            Ok(Some((solve_patch(&problem)?, compat)))
        })
        .collect();
    let mut solutions = Vec::with_capacity(vertices.len());
    let mut discarded = Vec::new();
    let mut max_compat = 0.0f64;
    for (v, o) in vertices.iter().zip(outcomes) {
        match o? {
            Some((s, c)) => {
                max_compat = max_compat.max(c);
                solutions.push(s);
            }
            None => discarded.push(*v),
        }
    }
    if !discarded.is_empty() {
        log::debug!("discarded {} badly cut patches", discarded.len());
    }
    if max_compat > 1e-8 {
        log::warn!("patch compatibility residual {max_compat:e} on uncut interior patches");
    }
    let n_dofs = 2 * mesh.n_edges() + 2 * mesh.n_triangles();
    Ok(GlobalFlux {
        coeffs: accumulate(n_dofs, &solutions),
        elements: cache.into_iter().map(|d| d.map(|d| d.rt)).collect(),
        n_edges: mesh.n_edges(),
        discarded,
        max_compatibility_residual: max_compat,
    })
}

/// `||f - div sigma||` over the active part of each triangle (zero if inactive).
pub fn divergence_misfit(flux: &GlobalFlux, mesh: &Mesh, cls: &ActiveClassification, spec: &ProblemSpec) -> Result<Vec<f64>, FluxError> {
    (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            if !cls.is_active(t) {
                return Ok(0.0);
            }
            let rule = cut_rule(&cls.pieces[t], VOLUME_DEGREE)?;
            Ok(rule.integrate(|p| (spec.source.eval(p) - flux.div(mesh, t, p)).powi(2)).sqrt())
        })
        .collect()
}

/// Largest edge-L2 jump of the normal component over interior edges
/// between active triangles.
pub fn max_normal_jump(flux: &GlobalFlux, mesh: &Mesh, cls: &ActiveClassification) -> f64 {
    let mut worst = 0.0f64;
    for (e, edge) in mesh.edges.iter().enumerate() {
        if edge.is_boundary() || !cls.is_active(edge.tris[0]) || !cls.is_active(edge.tris[1]) {
            continue;
        }
        let n = mesh.edge_normal(e);
        let [a, b] = edge.v;
        let rule = segment_rule(mesh.vertices[a], mesh.vertices[b], SEGMENT_DEGREE).expect("supported degree");
        let jump = rule.integrate(|p| {
            let d = flux.eval(mesh, edge.tris[0], p) - flux.eval(mesh, edge.tris[1], p);
            d.dot(n).powi(2)
        });
        worst = worst.max(jump.sqrt());
    }
    worst
}

/// Largest `||sigma.n + g_N||` over Neumann edges of active triangles that
/// no included feature touches.
pub fn neumann_trace_error(flux: &GlobalFlux, ctx: &FluxContext) -> f64 {
    let mesh = ctx.mesh;
    let included: Vec<&Feature> = ctx.features.iter().filter(|f| f.is_included()).collect();
    let mut worst = 0.0f64;
    for (e, edge) in mesh.edges.iter().enumerate() {
        let t = edge.tris[0];
        if !edge.is_boundary() || edge.tag != BoundaryTag::Neumann || !ctx.cls.is_active(t) {
            continue;
        }
        let (pa, pb) = (mesh.vertices[edge.v[0]], mesh.vertices[edge.v[1]]);
        if outside_intervals(pa, pb, &included) != [(0.0, 1.0)] {
            continue;
        }
        let n = outward_normal(mesh, t, e);
        let rule = segment_rule(pa, pb, SEGMENT_DEGREE).expect("supported degree");
        let err = rule.integrate(|p| (flux.eval(mesh, t, p).dot(n) + ctx.spec.boundary_flux(p, n, ctx.features)).powi(2));
        worst = worst.max(err.sqrt());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{regular_polygon, FeatureStatus, Polygon, Rect};
    use crate::mesh::{build_structured_mesh, classify_active, BoundarySpec, SideKind};
    use crate::primal::solve_primal;
    use crate::problem::{DirichletData, FluxData, ScalarField};

    struct Setup {
        mesh: Mesh,
        cls: ActiveClassification,
        spec: ProblemSpec,
        features: Vec<Feature>,
        u: DiscreteSolution,
    }

    impl Setup {
        fn new(spec: ProblemSpec, h: f64, features: Vec<Feature>) -> Self {
            let mesh = build_structured_mesh(spec.domain, h, spec.bc).unwrap();
            let cls = classify_active(&mesh, &features).unwrap();
            let u = solve_primal(&spec, &mesh, &cls, &features).unwrap();
            Self { mesh, cls, spec, features, u }
        }

        fn ctx(&self) -> FluxContext<'_> {
            FluxContext { mesh: &self.mesh, cls: &self.cls, spec: &self.spec, features: &self.features, u: &self.u }
        }
    }

    fn included(shape: Polygon, domain: &Rect) -> Feature {
        let mut f = Feature::new(0, shape, domain).unwrap();
        f.status = FeatureStatus::Included;
        f
    }

    fn test1_feature() -> Feature {
        included(regular_polygon(Point2::new(0.2, 0.2), 0.04, 20, 0.0).unwrap(), &Rect::unit_square())
    }

    fn affine() -> ProblemSpec {
        ProblemSpec { dirichlet: DirichletData::Affine { a: 1.0, b: 2.0, c: -0.5 }, ..ProblemSpec::test1() }
    }

    fn interior_vertex(m: &Mesh, p: Point2) -> usize {
        m.vertices.iter().position(|v| v.dist(p) < 1e-12).unwrap()
    }

    #[test]
    fn affine_patch_reproduces_scaled_gradient() {
        let s = Setup::new(affine(), 0.25, vec![]);
        let ctx = s.ctx();
        let cache = element_cache(&ctx).unwrap();
        let v = interior_vertex(&s.mesh, Point2::new(0.5, 0.5));
        let prob = build_patch_problem(&ctx, &cache, v, &FluxOptions::default()).unwrap().unwrap();
        assert_eq!((prob.n_components, prob.n_means), (1, 1));
        assert!(prob.compatibility.abs() < 1e-14);
        let sol = solve_patch(&prob).unwrap();
        let mut coeffs = vec![0.0; 2 * s.mesh.n_edges() + 2 * s.mesh.n_triangles()];
        for (g, val) in sol.global_dofs.iter().zip(&sol.sigma) {
            coeffs[*g] = *val;
        }
        for &t in s.mesh.vertex_triangles(v) {
            let rt = RtElement::on_mesh(&s.mesh, t).unwrap();
            let c = element_dofs(&s.mesh, t).map(|g| coeffs[g]);
            let l = s.mesh.local_index(t, v).unwrap();
            for (p, _) in triangle_rule(s.mesh.points(t), 4).unwrap().iter() {
                let expect = s.u.gradients[t] * (-barycentric(&s.mesh, t, p)[l]);
                assert!((rt.eval(&c, p) - expect).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn affine_global_flux_is_minus_gradient() {
        let s = Setup::new(affine(), 0.2, vec![]);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        for t in 0..s.mesh.n_triangles() {
            let c = s.mesh.centroid(t);
            assert!((flux.eval(&s.mesh, t, c) + s.u.gradients[t]).norm() < 1e-10);
        }
        assert!(flux.max_compatibility_residual < 1e-12);
    }

    #[test]
    fn homogeneous_data_gives_zero_flux() {
        let spec = ProblemSpec { dirichlet: DirichletData::Zero, ..ProblemSpec::test1() };
        let s = Setup::new(spec, 0.25, vec![test1_feature()]);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        assert!(flux.coeffs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn variants_coincide_without_immersed_boundary() {
        let s = Setup::new(ProblemSpec::test1(), 0.1, vec![test1_feature()]);
        let ctx = s.ctx();
        let cache = element_cache(&ctx).unwrap();
        let v = interior_vertex(&s.mesh, Point2::new(0.8, 0.6));
        let sym = build_patch_problem(&ctx, &cache, v, &FluxOptions::default()).unwrap().unwrap();
        let asym_opts = FluxOptions { variant: PatchVariant::Asymmetric, ..Default::default() };
        let asym = build_patch_problem(&ctx, &cache, v, &asym_opts).unwrap().unwrap();
        assert!(!sym.is_cut);
        assert_eq!(sym.matrix, asym.matrix);
        assert_eq!(sym.rhs, asym.rhs);
        let (a, b) = (solve_patch(&sym).unwrap(), solve_patch(&asym).unwrap());
        assert!(a.sigma.iter().zip(&b.sigma).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn nitsche_gram_symmetric_psd() {
        let s = Setup::new(ProblemSpec::test1(), 0.1, vec![test1_feature()]);
        let cache = element_cache(&s.ctx()).unwrap();
        let mut rng = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for &t in &s.cls.cut {
            let g = cache[t].as_ref().unwrap().gram;
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(g[i][j], g[j][i]);
                }
            }
            for _ in 0..20 {
                let x: Vec<f64> = (0..8).map(|_| next()).collect();
                let q: f64 = (0..8).map(|i| (0..8).map(|j| x[i] * g[i][j] * x[j]).sum::<f64>()).sum();
                let scale: f64 = (0..8).map(|i| g[i][i]).sum::<f64>() * x.iter().map(|v| v * v).sum::<f64>();
                assert!(q >= -1e-14 * scale);
            }
        }
    }

    #[test]
    fn zero_ghost_penalty_is_bitwise_inert() {
        let s = Setup::new(ProblemSpec::test1(), 0.1, vec![test1_feature()]);
        let plain = reconstruct_flux(&s.ctx(), &FluxOptions { stabilization: Stabilization::None, ..Default::default() }).unwrap();
        let ghost0 = FluxOptions { stabilization: Stabilization::Ghost { beta1: 0.0, beta2: 0.0 }, ..Default::default() };
        assert_eq!(plain.coeffs, reconstruct_flux(&s.ctx(), &ghost0).unwrap().coeffs);
    }

    #[test]
    fn equilibration_off_cut_elements() {
        let s = Setup::new(ProblemSpec::test1(), 0.1, vec![test1_feature()]);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        let mis = divergence_misfit(&flux, &s.mesh, &s.cls, &s.spec).unwrap();
        let worst_uncut = s.cls.active.iter().filter(|&&t| !s.cls.is_cut(t)).map(|&t| mis[t]).fold(0.0, f64::max);
        assert!(worst_uncut <= 1e-10, "{worst_uncut:e}");
        assert!(s.cls.cut.iter().any(|&t| mis[t] > 1e-8));
        assert!(max_normal_jump(&flux, &s.mesh, &s.cls) <= 1e-10);

        let free = Setup::new(ProblemSpec::test1(), 0.1, vec![]);
        let flux = reconstruct_flux(&free.ctx(), &FluxOptions::default()).unwrap();
        let mis = divergence_misfit(&flux, &free.mesh, &free.cls, &free.spec).unwrap();
        assert!(mis.iter().all(|&m| m <= 1e-10));
    }

    #[test]
    fn source_term_equilibrated() {
        let spec = ProblemSpec { source: ScalarField::Affine { a: 3.0, b: -1.0, c: 2.0 }, ..ProblemSpec::test1() };
        let s = Setup::new(spec, 0.15, vec![]);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        let mis = divergence_misfit(&flux, &s.mesh, &s.cls, &s.spec).unwrap();
        assert!(mis.iter().all(|&m| m <= 1e-10), "{:e}", mis.iter().fold(0.0f64, |a, &b| a.max(b)));
    }

    #[test]
    fn neumann_trace_is_strong() {
        let bc = BoundarySpec { left: SideKind::Neumann, right: SideKind::Neumann, bottom: SideKind::Dirichlet, top: SideKind::Neumann };
        let spec = ProblemSpec {
            bc,
            neumann: FluxData::Vector { gx: 0.4, gy: -0.3 },
            feature_flux: FluxData::Constant(0.2),
            ..ProblemSpec::test2()
        };
        let s = Setup::new(spec, 0.1, vec![test1_feature()]);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        let err = neumann_trace_error(&flux, &s.ctx());
        assert!(err <= 1e-10, "{err:e}");
        assert!(max_normal_jump(&flux, &s.mesh, &s.cls) <= 1e-10);
        let mis = divergence_misfit(&flux, &s.mesh, &s.cls, &s.spec).unwrap();
        let worst_uncut = s.cls.active.iter().filter(|&&t| !s.cls.is_cut(t)).map(|&t| mis[t]).fold(0.0, f64::max);
        assert!(worst_uncut <= 1e-10, "{worst_uncut:e}");
    }

    #[test]
    fn asymmetric_variant_spreads_imbalance() {
        let s = Setup::new(ProblemSpec::test1(), 0.1, vec![test1_feature()]);
        let ctx = s.ctx();
        let asym = reconstruct_flux(&ctx, &FluxOptions { variant: PatchVariant::Asymmetric, ..Default::default() }).unwrap();
        let sym = reconstruct_flux(&ctx, &FluxOptions::default()).unwrap();
        let ma = divergence_misfit(&asym, &s.mesh, &s.cls, &s.spec).unwrap();
        let ms = divergence_misfit(&sym, &s.mesh, &s.cls, &s.spec).unwrap();
        let uncut_near: Vec<usize> = s
            .cls
            .active
            .iter()
            .copied()
            .filter(|&t| !s.cls.is_cut(t) && s.mesh.triangles[t].iter().any(|&v| s.mesh.vertex_triangles(v).iter().any(|&k| s.cls.is_cut(k))))
            .collect();
        assert!(!uncut_near.is_empty());
        assert!(uncut_near.iter().any(|&t| ma[t] > 1e-6));
        assert!(uncut_near.iter().all(|&t| ms[t] <= 1e-10));
    }

    /// Rectangle feature whose top edge sits `delta` below the line y = 0.75,
    /// leaving thin slivers of the elements under that line active. The
    /// patch of (0.5, 0.5) keeps only slivers.
    fn sliver_setup(delta: f64) -> Setup {
        let f = included(Rect::new(Point2::new(0.15, 0.15), Point2::new(0.85, 0.75 - delta)).as_polygon(), &Rect::unit_square());
        Setup::new(ProblemSpec::test1(), std::f64::consts::SQRT_2 / 4.0, vec![f])
    }

    #[test]
    fn ghost_penalty_controls_small_cuts() {
        let ghost = FluxOptions { stabilization: Stabilization::Ghost { beta1: 0.1, beta2: 0.1 }, ..Default::default() };
        let none = FluxOptions { stabilization: Stabilization::None, ..Default::default() };
        let mut norms = Vec::new();
        let mut conds = Vec::new();
        for delta in [1e-2, 1e-4, 1e-6, 1e-8] {
            let s = sliver_setup(delta);
            let ctx = s.ctx();
            let flux = reconstruct_flux(&ctx, &ghost).unwrap();
            norms.push(flux.coeffs.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            let cache = element_cache(&ctx).unwrap();
            let v = interior_vertex(&s.mesh, Point2::new(0.5, 0.75));
            let plain = build_patch_problem(&ctx, &cache, v, &none).unwrap().unwrap();
            let stab = build_patch_problem(&ctx, &cache, v, &ghost).unwrap().unwrap();
            conds.push((plain.condition_estimate(), stab.condition_estimate()));
        }
        assert!(norms.iter().all(|&n| n.is_finite() && n < 10.0 * norms[0]), "{norms:?}");
        assert!(conds[3].0 > 1e3 * conds[0].0, "{conds:?}");
        assert!(conds[3].1 < 1e3 * conds[0].1, "{conds:?}");
    }

    /// Eliminating the flux leaves `B A^-1 B^T + J` on the multipliers; the
    /// penalty must not make it indefinite.
    #[test]
    fn ghost_penalty_keeps_pressure_operator_semidefinite() {
        let s = sliver_setup(1e-2);
        let ctx = s.ctx();
        let cache = element_cache(&ctx).unwrap();
        let v = interior_vertex(&s.mesh, Point2::new(0.5, 0.75));
        for beta in [0.1, 1.0, 10.0] {
            let opts = FluxOptions { stabilization: Stabilization::Ghost { beta1: beta, beta2: beta }, ..Default::default() };
            let p = build_patch_problem(&ctx, &cache, v, &opts).unwrap().unwrap();
            let (nf, nq) = (p.n_free, p.n_pressure);
            let a = DenseMatrix::from_rows(&(0..nf).map(|i| (0..nf).map(|j| p.matrix[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>().iter().map(Vec::as_slice).collect::<Vec<_>>());
            let a_inv = a.inverse().unwrap();
            let k = faer::Mat::<f64>::from_fn(nq, nq, |r, c| {
                let mut v = p.matrix[(nf + r, nf + c)];
                for i in 0..nf {
                    for j in 0..nf {
                        v -= p.matrix[(nf + r, i)] * a_inv[(i, j)] * p.matrix[(j, nf + c)];
                    }
                }
                0.5 * v
            });
            let k = &k + k.transpose();
            let eig = k.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            let scale = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min > -1e-10 * scale, "beta {beta}: min eigenvalue {min}, scale {scale}");
        }
    }

    #[test]
    fn discard_skips_badly_cut_patches() {
        let s = sliver_setup(1e-6);
        let flux = reconstruct_flux(&s.ctx(), &FluxOptions::default()).unwrap();
        assert!(!flux.discarded.is_empty());
        let none = reconstruct_flux(&s.ctx(), &FluxOptions { stabilization: Stabilization::None, ..Default::default() }).unwrap();
        assert!(none.discarded.is_empty());
    }
}
