//! Conforming triangulations of a rectangle with newest-vertex bisection.
//!
//! Triangles are stored as `[newest, r1, r2]` in counter-clockwise order;
//! the refinement edge is `(r1, r2)`, i.e. local edge 0. Local edge `i` is
//! the edge opposite local vertex `i`. Global edges are oriented from the
//! lower to the higher vertex index.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::MeshError;
use crate::geometry::{
    clip_triangle, feature_segments_in_triangle, triangle_signed_area, Feature, Point2, Polygon, Rect, Segment,
};

/// Relative slack when deriving the cell count from a target diameter, so
/// that rounded inputs such as `h = 7.07e-2` select the intended grid.
pub const H_TARGET_SLACK: f64 = 1.005;

/// Tag of a triangle edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Interior,
    Dirichlet,
    Neumann,
}

/// Boundary condition type of one rectangle side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SideKind {
    Dirichlet,
    Neumann,
}

/// Side conditions of the rectangular domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundarySpec {
    pub left: SideKind,
    pub right: SideKind,
    pub bottom: SideKind,
    pub top: SideKind,
}

impl BoundarySpec {
    pub fn all_dirichlet() -> Self {
        Self { left: SideKind::Dirichlet, right: SideKind::Dirichlet, bottom: SideKind::Dirichlet, top: SideKind::Dirichlet }
    }

    /// Side kinds in `[left, right, bottom, top]` order.
    pub fn as_array(&self) -> [SideKind; 4] {
        [self.left, self.right, self.bottom, self.top]
    }
}

/// A mesh edge with its incident triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Endpoints, ascending.
    pub v: [usize; 2],
    /// First and (for interior edges) second incident triangle.
    pub tris: [usize; 2],
    pub n_tris: u8,
    pub tag: BoundaryTag,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.n_tris == 1
    }

    pub fn other_tri(&self, t: usize) -> Option<usize> {
        if self.n_tris < 2 {
            None
        } else if self.tris[0] == t {
            Some(self.tris[1])
        } else {
            Some(self.tris[0])
        }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.v[0] == v || self.v[1] == v
    }
}

/// Conforming triangulation with refinement bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub domain: Rect,
    pub bc: BoundarySpec,
    pub vertices: Vec<Point2>,
    /// `[newest, r1, r2]`, counter-clockwise.
    pub triangles: Vec<[usize; 3]>,
    /// Tag of local edge `i` (opposite vertex `i`).
    pub tri_tags: Vec<[BoundaryTag; 3]>,
    /// Bisection depth from the initial mesh.
    pub generation: Vec<u32>,
    /// Index of the initial triangle each triangle descends from.
    pub root: Vec<usize>,
    pub edges: Vec<Edge>,
    /// Global edge of local edge `i`.
    pub tri_edges: Vec<[usize; 3]>,
    vertex_tri_offsets: Vec<usize>,
    vertex_tri_list: Vec<usize>,
}

impl Mesh {
    /// Assembles a mesh and its derived adjacency.
    pub fn from_parts(
        domain: Rect,
        bc: BoundarySpec,
        vertices: Vec<Point2>,
        triangles: Vec<[usize; 3]>,
        tri_tags: Vec<[BoundaryTag; 3]>,
        generation: Vec<u32>,
        root: Vec<usize>,
    ) -> Self {
        let mut mesh = Mesh {
            domain,
            bc,
            vertices,
            triangles,
            tri_tags,
            generation,
            root,
            edges: Vec::new(),
            tri_edges: Vec::new(),
            vertex_tri_offsets: Vec::new(),
            vertex_tri_list: Vec::new(),
        };
        mesh.build_adjacency();
        mesh
    }

    fn build_adjacency(&mut self) {
        let nt = self.triangles.len();
        let mut map: HashMap<(usize, usize), usize> = HashMap::with_capacity(nt * 2);
        let mut edges: Vec<Edge> = Vec::with_capacity(nt * 2);
        let mut tri_edges = Vec::with_capacity(nt);
        for (t, tri) in self.triangles.iter().enumerate() {
            let mut te = [0usize; 3];
            for i in 0..3 {
                let (a, b) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                let key = (a.min(b), a.max(b));
                let tag = self.tri_tags[t][i];
                let e = *map.entry(key).or_insert_with(|| {
                    edges.push(Edge { v: [key.0, key.1], tris: [t, usize::MAX], n_tris: 0, tag });
                    edges.len() - 1
                });
                let edge = &mut edges[e];
                if edge.n_tris == 0 {
                    edge.tris[0] = t;
                } else {
                    edge.tris[1] = t;
                }
                edge.n_tris += 1;
                if tag != BoundaryTag::Interior {
                    edge.tag = tag;
                }
                te[i] = e;
            }
            tri_edges.push(te);
        }
        let nv = self.vertices.len();
        let mut counts = vec![0usize; nv + 1];
        for tri in &self.triangles {
            for &v in tri {
                counts[v + 1] += 1;
            }
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; counts[nv]];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                list[fill[v]] = t;
                fill[v] += 1;
            }
        }
        self.edges = edges;
        self.tri_edges = tri_edges;
        self.vertex_tri_offsets = counts;
        self.vertex_tri_list = list;
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn points(&self, t: usize) -> [Point2; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.points(t);
        triangle_signed_area(a, b, c)
    }

    /// Longest edge length.
    pub fn diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.points(t);
        a.dist(b).max(b.dist(c)).max(c.dist(a))
    }

    pub fn centroid(&self, t: usize) -> Point2 {
        let [a, b, c] = self.points(t);
        (a + b + c) * (1.0 / 3.0)
    }

    /// Triangles incident to vertex `v`.
    pub fn vertex_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_tri_list[self.vertex_tri_offsets[v]..self.vertex_tri_offsets[v + 1]]
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].v;
        self.vertices[a].dist(self.vertices[b])
    }

    /// Unit normal of edge `e` in its global orientation: the direction
    /// `b - a` rotated clockwise.
    pub fn edge_normal(&self, e: usize) -> Point2 {
        let [a, b] = self.edges[e].v;
        let d = self.vertices[b] - self.vertices[a];
        Point2::new(d.y, -d.x) * (1.0 / d.norm())
    }

    /// Local index of vertex `v` in triangle `t`.
    pub fn local_index(&self, t: usize, v: usize) -> Option<usize> {
        self.triangles[t].iter().position(|&w| w == v)
    }

    /// Vertices lying on a boundary edge with the given tag.
    pub fn vertices_with_tag(&self, tag: BoundaryTag) -> Vec<bool> {
        let mut on = vec![false; self.n_vertices()];
        for e in &self.edges {
            if e.is_boundary() && e.tag == tag {
                on[e.v[0]] = true;
                on[e.v[1]] = true;
            }
        }
        on
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        (0..self.n_triangles())
            .map(|t| {
                let p = self.points(t);
                (0..3)
                    .map(|i| {
                        let u = p[(i + 1) % 3] - p[i];
                        let w = p[(i + 2) % 3] - p[i];
                        (u.dot(w) / (u.norm() * w.norm())).clamp(-1.0, 1.0).acos().to_degrees()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks conformity and orientation; returns a description of the first defect.
    pub fn audit(&self) -> Result<(), String> {
        for (t, _) in self.triangles.iter().enumerate() {
            if !(self.area(t) > 0.0) {
                return Err(format!("triangle {t} is not positively oriented"));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            let [a, b] = e.v;
            let (pa, pb) = (self.vertices[a], self.vertices[b]);
            let on_boundary = {
                let (sa, sb) = (self.domain.sides_of(pa), self.domain.sides_of(pb));
                (0..4).any(|k| sa[k] && sb[k])
            };
            match (e.n_tris, on_boundary) {
                (2, false) => {
                    if e.tag != BoundaryTag::Interior {
                        return Err(format!("interior edge {i} carries boundary tag {:?}", e.tag));
                    }
                }
                (1, true) => {
                    if e.tag == BoundaryTag::Interior {
                        return Err(format!("boundary edge {i} is untagged"));
                    }
                }
                (n, _) => return Err(format!("edge {i} ({a},{b}) has {n} incident triangles (hanging node)")),
            }
        }
        let covered: f64 = (0..self.n_triangles()).map(|t| self.area(t)).sum();
        let expected = self.domain.width() * self.domain.height();
        if (covered - expected).abs() > 1e-12 * expected {
            return Err(format!("triangles cover area {covered}, domain has {expected}"));
        }
        Ok(())
    }

    /// Bisects every marked triangle at least once and restores conformity.
    pub fn refine(&self, marked: &[usize]) -> Result<Mesh, MeshError> {
        if let Some(&t) = marked.iter().find(|&&t| t >= self.n_triangles()) {
            return Err(MeshError::TriangleOutOfRange(t));
        }
        if marked.is_empty() {
            return Ok(self.clone());
        }
        let mut edge_marked = vec![false; self.n_edges()];
        let mut queue: Vec<usize> = Vec::new();
        for &t in marked {
            let e = self.tri_edges[t][0];
            if !edge_marked[e] {
                edge_marked[e] = true;
                queue.push(e);
            }
        }
        // Closure: a triangle with any marked edge must bisect its refinement edge.
        while let Some(e) = queue.pop() {
            let edge = &self.edges[e];
            for k in 0..edge.n_tris as usize {
                let t = edge.tris[k];
                let r = self.tri_edges[t][0];
                if !edge_marked[r] {
                    edge_marked[r] = true;
                    queue.push(r);
                }
            }
        }
        let mut vertices = self.vertices.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        for (e, &m) in edge_marked.iter().enumerate() {
            if m {
                let [a, b] = self.edges[e].v;
                let mut p = self.vertices[a].lerp(self.vertices[b], 0.5);
                snap_to_domain(&mut p, &self.domain);
                midpoint.insert((a, b), vertices.len());
                vertices.push(p);
            }
        }
        let mut triangles = Vec::with_capacity(self.n_triangles() * 2);
        let mut tri_tags = Vec::with_capacity(self.n_triangles() * 2);
        let mut generation = Vec::with_capacity(self.n_triangles() * 2);
        let mut root = Vec::with_capacity(self.n_triangles() * 2);
        let mut stack = Vec::new();
        for t in 0..self.n_triangles() {
            stack.push((self.triangles[t], self.tri_tags[t], self.generation[t]));
            while let Some((tri, tags, gen)) = stack.pop() {
                let key = (tri[1].min(tri[2]), tri[1].max(tri[2]));
                match midpoint.get(&key) {
                    Some(&m) => {
                        let [t0, t1, t2] = tri;
                        let c2 = ([m, t2, t0], [tags[1], BoundaryTag::Interior, tags[0]], gen + 1);
                        let c1 = ([m, t0, t1], [tags[2], tags[0], BoundaryTag::Interior], gen + 1);
                        stack.push(c2);
                        stack.push(c1);
                    }
                    None => {
                        triangles.push(tri);
                        tri_tags.push(tags);
                        generation.push(gen);
                        root.push(self.root[t]);
                    }
                }
            }
        }
        Ok(Mesh::from_parts(self.domain, self.bc, vertices, triangles, tri_tags, generation, root))
    }

    /// Refines every triangle `rounds` times.
    pub fn refine_uniform(&self, rounds: usize) -> Mesh {
        let mut m = self.clone();
        for _ in 0..rounds {
            let all: Vec<usize> = (0..m.n_triangles()).collect();
            m = m.refine(&all).expect("all indices are in range");
        }
        m
    }
}

fn snap_to_domain(p: &mut Point2, r: &Rect) {
    let t = r.tol();
    for (v, lo, hi) in [(&mut p.x, r.min.x, r.max.x), (&mut p.y, r.min.y, r.max.y)] {
        if (*v - lo).abs() <= t {
            *v = lo;
        } else if (*v - hi).abs() <= t {
            *v = hi;
        }
    }
}

/// Number of cells along a side of length `len` for a target element diameter.
pub fn cells_for(len: f64, h_target: f64) -> usize {
    let side = h_target / std::f64::consts::SQRT_2;
    ((len / side / H_TARGET_SLACK).ceil() as usize).max(1)
}

/// Uniform right-triangle mesh: each grid cell is split along its
/// `(x0,y0)-(x1,y1)` diagonal, with the right-angle vertex as newest vertex.
pub fn build_structured_mesh(domain: Rect, h_target: f64, bc: BoundarySpec) -> Result<Mesh, MeshError> {
    if !(h_target > 0.0) || !h_target.is_finite() {
        return Err(MeshError::InvalidSize(h_target));
    }
    let nx = cells_for(domain.width(), h_target);
    let ny = cells_for(domain.height(), h_target);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { domain.max.x } else { domain.min.x + domain.width() * i as f64 / nx as f64 };
            let y = if j == ny { domain.max.y } else { domain.min.y + domain.height() * j as f64 / ny as f64 };
            vertices.push(Point2::new(x, y));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let side_tag = |k: SideKind| match k {
        SideKind::Dirichlet => BoundaryTag::Dirichlet,
        SideKind::Neumann => BoundaryTag::Neumann,
    };
    let interior = BoundaryTag::Interior;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    let mut tri_tags = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (p00, p10, p01, p11) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            // Lower: [p10, p11, p00]; edge 1 = (p00,p10) bottom, edge 2 = (p10,p11) right.
            let bottom = if j == 0 { side_tag(bc.bottom) } else { interior };
            let right = if i == nx - 1 { side_tag(bc.right) } else { interior };
            triangles.push([p10, p11, p00]);
            tri_tags.push([interior, bottom, right]);
            // Upper: [p01, p00, p11]; edge 1 = (p11,p01) top, edge 2 = (p01,p00) left.
            let top = if j == ny - 1 { side_tag(bc.top) } else { interior };
            let left = if i == 0 { side_tag(bc.left) } else { interior };
            triangles.push([p01, p00, p11]);
            tri_tags.push([interior, top, left]);
        }
    }
    let nt = triangles.len();
    Ok(Mesh::from_parts(domain, bc, vertices, triangles, tri_tags, vec![0; nt], (0..nt).collect()))
}

/// Status of an element relative to the included features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementStatus {
    UncutActive,
    Cut,
    Inactive,
}

/// Element classification against the included features.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveClassification {
    pub status: Vec<ElementStatus>,
    /// Active pieces per triangle (the triangle itself when untouched).
    pub pieces: Vec<Vec<Polygon>>,
    /// Included-feature boundary segments per triangle.
    pub segments: Vec<Vec<Segment>>,
    pub active_area: Vec<f64>,
    /// Active triangles.
    pub active: Vec<usize>,
    /// Cut triangles.
    pub cut: Vec<usize>,
    /// Ids of the features treated as included.
    pub included: Vec<usize>,
}

impl ActiveClassification {
    pub fn is_active(&self, t: usize) -> bool {
        self.status[t] != ElementStatus::Inactive
    }

    pub fn is_cut(&self, t: usize) -> bool {
        self.status[t] == ElementStatus::Cut
    }

    /// Vertices of at least one active triangle.
    pub fn active_vertices(&self, mesh: &Mesh) -> Vec<bool> {
        let mut on = vec![false; mesh.n_vertices()];
        for &t in &self.active {
            for &v in &mesh.triangles[t] {
                on[v] = true;
            }
        }
        on
    }
}

/// Classifies all triangles against the included features in `features`.
pub fn classify_active(mesh: &Mesh, features: &[Feature]) -> Result<ActiveClassification, MeshError> {
    let included: Vec<&Feature> = features.iter().filter(|f| f.is_included()).collect();
    let boxes: Vec<Rect> = included.iter().map(|f| f.bbox()).collect();
    type Classified = (ElementStatus, Vec<Polygon>, Vec<Segment>, f64);
    let per_tri: Vec<Result<Classified, MeshError>> = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let tri = mesh.points(t);
            let area = mesh.area(t);
            let tb = Rect::bounding(&tri);
            let tol = crate::geometry::TOL_REL * mesh.domain.diameter().max(1.0);
            let grown = Rect::new(Point2::new(tb.min.x - tol, tb.min.y - tol), Point2::new(tb.max.x + tol, tb.max.y + tol));
            let near: Vec<&Feature> =
                included.iter().zip(&boxes).filter(|(_, b)| b.overlaps(&grown)).map(|(f, _)| *f).collect();
            if near.is_empty() {
                return Ok((ElementStatus::UncutActive, vec![Polygon { vertices: tri.to_vec() }], Vec::new(), area));
            }
            let pieces = clip_triangle(tri, &near)?;
            let active_area: f64 = pieces.iter().map(Polygon::area).sum();
            if active_area < crate::geometry::SLIVER_REL * area {
                return Ok((ElementStatus::Inactive, Vec::new(), Vec::new(), 0.0));
            }
            let segments: Vec<Segment> = near.iter().flat_map(|f| feature_segments_in_triangle(tri, f)).collect();
            let status = if segments.is_empty() { ElementStatus::UncutActive } else { ElementStatus::Cut };
            Ok((status, pieces, segments, active_area))
        })
        .collect();
    let nt = mesh.n_triangles();
    let mut out = ActiveClassification {
        status: Vec::with_capacity(nt),
        pieces: Vec::with_capacity(nt),
        segments: Vec::with_capacity(nt),
        active_area: Vec::with_capacity(nt),
        active: Vec::new(),
        cut: Vec::new(),
        included: included.iter().map(|f| f.id).collect(),
    };
    for (t, r) in per_tri.into_iter().enumerate() {
        let (status, pieces, segments, area) = r?;
        match status {
            ElementStatus::Inactive => {}
            ElementStatus::Cut => {
                out.active.push(t);
                out.cut.push(t);
            }
            ElementStatus::UncutActive => out.active.push(t),
        }
        out.status.push(status);
        out.pieces.push(pieces);
        out.segments.push(segments);
        out.active_area.push(area);
    }
    Ok(out)
}

/// Patch type of a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchKind {
    Interior,
    NeumannExterior,
    NeumannCorner,
    Dirichlet,
}

/// Active elements sharing a vertex and the split of the patch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: usize,
    pub elements: Vec<usize>,
    /// Patch boundary edges not containing the center.
    pub boundary_zero: Vec<usize>,
    /// Patch boundary edges containing the center.
    pub boundary_psi: Vec<usize>,
    pub kind: PatchKind,
}

/// Builds the patch of `vertex` over the active triangles.
pub fn patch(mesh: &Mesh, cls: &ActiveClassification, vertex: usize) -> Result<Patch, MeshError> {
    let elements: Vec<usize> = mesh.vertex_triangles(vertex).iter().copied().filter(|&t| cls.is_active(t)).collect();
    if elements.is_empty() {
        return Err(MeshError::FullyTrimmedVertex(vertex));
    }
    let mut boundary_zero = Vec::new();
    let mut boundary_psi = Vec::new();
    let mut on_dirichlet = false;
    let mut on_neumann = false;
    for &t in &elements {
        for &e in &mesh.tri_edges[t] {
            let edge = &mesh.edges[e];
            let interior_to_patch = edge.other_tri(t).is_some_and(|o| elements.contains(&o));
            if interior_to_patch {
                continue;
            }
            if edge.contains(vertex) {
                boundary_psi.push(e);
                if edge.is_boundary() {
                    match edge.tag {
                        BoundaryTag::Dirichlet => on_dirichlet = true,
                        BoundaryTag::Neumann => on_neumann = true,
                        BoundaryTag::Interior => {}
                    }
                }
            } else {
                boundary_zero.push(e);
            }
        }
    }
    // Boundary status also counts through inactive neighbours.
    for &t in mesh.vertex_triangles(vertex) {
        for &e in &mesh.tri_edges[t] {
            let edge = &mesh.edges[e];
            if edge.is_boundary() && edge.contains(vertex) {
                match edge.tag {
                    BoundaryTag::Dirichlet => on_dirichlet = true,
                    BoundaryTag::Neumann => on_neumann = true,
                    BoundaryTag::Interior => {}
                }
            }
        }
    }
    let kind = if on_dirichlet {
        PatchKind::Dirichlet
    } else if on_neumann {
        let s = mesh.domain.sides_of(mesh.vertices[vertex]);
        if s.iter().filter(|&&b| b).count() >= 2 {
            PatchKind::NeumannCorner
        } else {
            PatchKind::NeumannExterior
        }
    } else {
        PatchKind::Interior
    };
    Ok(Patch { center: vertex, elements, boundary_zero, boundary_psi, kind })
}

/// Barycentric coordinates of `p` in triangle `t`.
pub fn barycentric(mesh: &Mesh, t: usize, p: Point2) -> [f64; 3] {
    let [a, b, c] = mesh.points(t);
    let area = triangle_signed_area(a, b, c);
    [
        triangle_signed_area(p, b, c) / area,
        triangle_signed_area(a, p, c) / area,
        triangle_signed_area(a, b, p) / area,
    ]
}

/// Gradients of the three barycentric coordinates of triangle `t`.
pub fn barycentric_gradients(mesh: &Mesh, t: usize) -> [Point2; 3] {
    let p = mesh.points(t);
    let twice = 2.0 * triangle_signed_area(p[0], p[1], p[2]);
    let mut g = [Point2::default(); 3];
    for i in 0..3 {
        let e = p[(i + 2) % 3] - p[(i + 1) % 3];
        g[i] = Point2::new(-e.y, e.x) * (1.0 / twice);
    }
    g
}

/// Value and gradient of the hat function of `vertex` at `point`.
pub fn hat_function(mesh: &Mesh, vertex: usize, point: Point2) -> Result<(f64, Point2), MeshError> {
    let tol = 1e-12;
    for &t in mesh.vertex_triangles(vertex) {
        let l = barycentric(mesh, t, point);
        if l.iter().all(|&x| x >= -tol) {
            let i = mesh.local_index(t, vertex).expect("incident triangle contains the vertex");
            return Ok((l[i].clamp(0.0, 1.0), barycentric_gradients(mesh, t)[i]));
        }
    }
    Err(MeshError::OutsidePatch { vertex, x: point.x, y: point.y })
}

/// Bucket grid for point location.
#[derive(Debug, Clone)]
pub struct PointLocator {
    bbox: Rect,
    nx: usize,
    ny: usize,
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl PointLocator {
    pub fn new(mesh: &Mesh) -> Self {
        let bbox = mesh.domain;
        let n = ((mesh.n_triangles() as f64).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (n, n);
        let cell = |p: Point2| -> (usize, usize) {
            let i = (((p.x - bbox.min.x) / bbox.width() * nx as f64).floor().max(0.0) as usize).min(nx - 1);
            let j = (((p.y - bbox.min.y) / bbox.height() * ny as f64).floor().max(0.0) as usize).min(ny - 1);
            (i, j)
        };
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
        for t in 0..mesh.n_triangles() {
            let r = Rect::bounding(&mesh.points(t));
            let (i0, j0) = cell(r.min);
            let (i1, j1) = cell(r.max);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(t);
                }
            }
        }
        let mut offsets = vec![0];
        let mut items = Vec::new();
        for b in buckets {
            items.extend(b);
            offsets.push(items.len());
        }
        Self { bbox, nx, ny, offsets, items }
    }

    /// A triangle containing `p`, preferring the one with the largest
    /// minimal barycentric coordinate.
    pub fn locate(&self, mesh: &Mesh, p: Point2) -> Option<usize> {
        let i = (((p.x - self.bbox.min.x) / self.bbox.width() * self.nx as f64).floor().max(0.0) as usize).min(self.nx - 1);
        let j = (((p.y - self.bbox.min.y) / self.bbox.height() * self.ny as f64).floor().max(0.0) as usize).min(self.ny - 1);
        let b = j * self.nx + i;
        let mut best: Option<(usize, f64)> = None;
        for &t in &self.items[self.offsets[b]..self.offsets[b + 1]] {
            let m = barycentric(mesh, t, p).into_iter().fold(f64::INFINITY, f64::min);
            if m >= -1e-12 && best.is_none_or(|(_, bm)| m > bm) {
                best = Some((t, m));
            }
        }
        best.map(|(t, _)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{regular_polygon, FeatureStatus};
    use proptest::prelude::*;

    fn unit(h: f64) -> Mesh {
        build_structured_mesh(Rect::unit_square(), h, BoundarySpec::all_dirichlet()).unwrap()
    }

    #[test]
    fn structured_counts() {
        let m = unit(std::f64::consts::SQRT_2 / 2.0);
        assert_eq!((m.n_vertices(), m.n_triangles()), (9, 8));
        let m = unit(7.07e-2);
        assert_eq!((m.n_vertices(), m.n_triangles()), (441, 800));
        let interior = m.vertices_with_tag(BoundaryTag::Dirichlet).iter().filter(|&&b| !b).count();
        assert_eq!(interior, 361);
        let big = build_structured_mesh(
            Rect::new(Point2::new(-1.0, -1.0), Point2::new(1.0, 1.0)),
            1.41e-1,
            BoundarySpec::all_dirichlet(),
        )
        .unwrap();
        assert_eq!(big.n_triangles(), 800);
        m.audit().unwrap();
        assert!((m.min_angle_deg() - 45.0).abs() < 1e-9);
        for t in 0..m.n_triangles() {
            assert!((m.diameter(t) - std::f64::consts::SQRT_2 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn refine_empty_is_identity() {
        let m = unit(0.5);
        assert_eq!(m.refine(&[]).unwrap(), m);
    }

    #[test]
    fn refine_one_stays_conforming() {
        let m = unit(std::f64::consts::SQRT_2 / 2.0);
        for t in 0..m.n_triangles() {
            let r = m.refine(&[t]).unwrap();
            r.audit().unwrap();
            assert!(r.n_triangles() > m.n_triangles());
        }
    }

    #[test]
    fn refine_all_doubles() {
        let m = unit(0.3);
        let r = m.refine(&(0..m.n_triangles()).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.n_triangles(), 2 * m.n_triangles());
        r.audit().unwrap();
    }

    #[test]
    fn shape_regularity_over_rounds() {
        let mut m = unit(0.5);
        let mut rng = 12345u64;
        for _ in 0..10 {
            let marked: Vec<usize> = (0..m.n_triangles())
                .filter(|_| {
                    rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (rng >> 33).is_multiple_of(3)
                })
                .collect();
            m = m.refine(&marked).unwrap();
            m.audit().unwrap();
            assert!(m.min_angle_deg() >= 20.0);
        }
    }

    #[test]
    fn boundary_tags_inherited() {
        let bc = BoundarySpec { left: SideKind::Neumann, right: SideKind::Neumann, bottom: SideKind::Dirichlet, top: SideKind::Dirichlet };
        let m = build_structured_mesh(Rect::unit_square(), 0.5, bc).unwrap().refine_uniform(3);
        m.audit().unwrap();
        for e in m.edges.iter().filter(|e| e.is_boundary()) {
            let mid = m.vertices[e.v[0]].lerp(m.vertices[e.v[1]], 0.5);
            let expect = if mid.x == 0.0 || mid.x == 1.0 { BoundaryTag::Neumann } else { BoundaryTag::Dirichlet };
            assert_eq!(e.tag, expect);
        }
    }

    #[test]
    fn patches() {
        let m = unit(7.07e-2);
        let cls = classify_active(&m, &[]).unwrap();
        let center = 10 * 21 + 10;
        let p = patch(&m, &cls, center).unwrap();
        assert_eq!(p.elements.len(), 6);
        assert_eq!(p.boundary_zero.len(), 6);
        assert!(p.boundary_psi.is_empty());
        assert_eq!(p.kind, PatchKind::Interior);
        let corner = patch(&m, &cls, 0).unwrap();
        assert!(corner.elements.len() <= 2);
        assert_eq!(corner.boundary_psi.len(), 2);
        assert_eq!(corner.kind, PatchKind::Dirichlet);
    }

    #[test]
    fn neumann_patch_kinds() {
        let bc = BoundarySpec { left: SideKind::Neumann, right: SideKind::Neumann, bottom: SideKind::Neumann, top: SideKind::Dirichlet };
        let m = build_structured_mesh(Rect::unit_square(), std::f64::consts::SQRT_2 / 2.0, bc).unwrap();
        let cls = classify_active(&m, &[]).unwrap();
        assert_eq!(patch(&m, &cls, 0).unwrap().kind, PatchKind::NeumannCorner);
        assert_eq!(patch(&m, &cls, 1).unwrap().kind, PatchKind::NeumannExterior);
        assert_eq!(patch(&m, &cls, 6).unwrap().kind, PatchKind::Dirichlet);
        assert_eq!(patch(&m, &cls, 4).unwrap().kind, PatchKind::Interior);
    }

    fn included(p: Polygon, id: usize) -> Feature {
        let mut f = Feature::new(id, p, &Rect::unit_square()).unwrap();
        f.status = FeatureStatus::Included;
        f
    }

    #[test]
    fn classify_test1_feature() {
        let m = unit(7.07e-2);
        let f = included(regular_polygon(Point2::new(0.2, 0.2), 0.04, 20, 0.0).unwrap(), 1);
        let cls = classify_active(&m, std::slice::from_ref(&f)).unwrap();
        assert!(!cls.cut.is_empty());
        let total: f64 = cls.segments.iter().flatten().map(Segment::length).sum();
        let perimeter = 2.0 * 20.0 * 0.04 * (std::f64::consts::PI / 20.0).sin();
        assert!((total - perimeter).abs() < 1e-12 * perimeter);
        assert!((perimeter - 0.250295).abs() < 1e-6);
        for t in 0..m.n_triangles() {
            assert_eq!(cls.status[t] == ElementStatus::Cut, !cls.segments[t].is_empty());
        }
        let area: f64 = cls.active_area.iter().sum();
        assert!((area - (1.0 - f.area())).abs() < 1e-13);
        // A vertex inside the feature still gets an interior patch.
        let v = m.vertices.iter().position(|p| p.dist(Point2::new(0.2, 0.2)) < 1e-12).unwrap();
        assert_eq!(patch(&m, &cls, v).unwrap().kind, PatchKind::Interior);
    }

    #[test]
    fn feature_inside_one_triangle() {
        let m = unit(0.5);
        let f = included(regular_polygon(Point2::new(0.4, 0.1), 0.02, 5, 0.0).unwrap(), 0);
        let cls = classify_active(&m, std::slice::from_ref(&f)).unwrap();
        assert_eq!(cls.cut.len(), 1);
        assert_eq!(cls.active.len(), m.n_triangles());
    }

    #[test]
    fn inactive_triangles_and_trimmed_vertex() {
        let m = unit(0.3);
        let f = included(Rect::new(Point2::new(0.2, 0.2), Point2::new(0.8, 0.8)).as_polygon(), 0);
        let cls = classify_active(&m, std::slice::from_ref(&f)).unwrap();
        assert!(cls.status.contains(&ElementStatus::Inactive));
        let v = m.vertices.iter().position(|p| p.dist(Point2::new(0.4, 0.4)) < 1e-12).unwrap();
        assert_eq!(patch(&m, &cls, v), Err(MeshError::FullyTrimmedVertex(v)));
    }

    #[test]
    fn hat_values() {
        let m = unit(std::f64::consts::SQRT_2 / 2.0);
        let v = 4;
        let (val, _) = hat_function(&m, v, m.vertices[v]).unwrap();
        assert!((val - 1.0).abs() < 1e-15);
        let (val, _) = hat_function(&m, v, Point2::new(0.5, 1.0)).unwrap_or((0.0, Point2::default()));
        assert!(val.abs() < 1e-15);
        assert!(hat_function(&m, 0, Point2::new(0.9, 0.9)).is_err());
    }

    #[test]
    fn locator_finds_containing_triangle() {
        let m = unit(0.1).refine(&[3, 50, 51]).unwrap();
        let loc = PointLocator::new(&m);
        for t in 0..m.n_triangles() {
            let c = m.centroid(t);
            assert_eq!(loc.locate(&m, c), Some(t));
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let m = unit(0.3).refine(&[0, 5, 7]).unwrap();
            let loc = PointLocator::new(&m);
            let p = Point2::new(x, y);
            let t = loc.locate(&m, p).unwrap();
            let l = barycentric(&m, t, p);
            let g = barycentric_gradients(&m, t);
            prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let gs = g[0] + g[1] + g[2];
            prop_assert!(gs.norm() < 1e-12 * g[0].norm().max(1.0));
        }

        #[test]
        fn random_refinement_conforms(seed in 0u64..1000) {
            let mut m = unit(0.5);
            let mut s = seed;
            for _ in 0..4 {
                let marked: Vec<usize> = (0..m.n_triangles()).filter(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (s >> 40) % 4 == 0
                }).collect();
                m = m.refine(&marked).unwrap();
                prop_assert!(m.audit().is_ok());
            }
        }
    }
}
