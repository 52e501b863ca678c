//! Result files: convergence history, SVG snapshots and plain-text dumps.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::adaptive::{AdaptiveState, HistoryRow};
use crate::estimator::EstimatorReport;
use crate::flux::GlobalFlux;
use crate::geometry::{Feature, Polygon};
use crate::mesh::{ActiveClassification, Mesh};

/// Column names of the history file.
pub const HISTORY_HEADER: [&str; 10] = ["iter", "N", "eta_div", "eta_g", "eta_sigma", "eta_num", "eta_def", "eta_total", "n_included", "error"];

/// Writes the history as CSV; the error column is empty without a reference.
pub fn write_history<W: Write>(history: &[HistoryRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for h in history {
        w.write_record([
            h.iteration.to_string(),
            h.n_dofs.to_string(),
            h.eta_div.to_string(),
            h.eta_g.to_string(),
            h.eta_sigma.to_string(),
            h.eta_num.to_string(),
            h.eta_def.to_string(),
            h.eta_total.to_string(),
            h.n_included.to_string(),
            h.error.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

pub fn emit_history(history: &[HistoryRow], path: &Path) -> io::Result<()> {
    write_history(history, io::BufWriter::new(fs::File::create(path)?))
}

/// SVG picture of a mesh: triangles stroked, included features filled,
/// neglected ones outlined, and optionally a heat map of the element
/// indicators on a logarithmic scale.
pub fn render_svg(mesh: &Mesh, features: &[Feature], report: Option<&EstimatorReport>) -> String {
    const SIZE: f64 = 800.0;
    let d = mesh.domain;
    let scale = SIZE / d.width().max(d.height());
    let (w, hgt) = (d.width() * scale, d.height() * scale);
    let px = |p: crate::geometry::Point2| ((p.x - d.min.x) * scale, (d.max.y - p.y) * scale);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{hgt:.0}" viewBox="0 0 {w:.3} {hgt:.3}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let heat: Option<(Vec<f64>, f64, f64)> = report.map(|r| {
        let v: Vec<f64> = (0..mesh.n_triangles()).map(|t| r.element_indicator(t).sqrt()).collect();
        let pos = v.iter().copied().filter(|x| *x > 0.0);
        let hi = pos.clone().fold(f64::MIN_POSITIVE, f64::max);
        let lo = pos.fold(hi, f64::min).max(hi * 1e-8);
        (v, lo.ln(), hi.ln())
    });

    let _ = writeln!(s, r#"<g stroke="black" stroke-width="0.3" stroke-linejoin="round">"#);
    for t in 0..mesh.n_triangles() {
        let pts: Vec<String> = mesh.points(t).iter().map(|&p| px(p)).map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        let fill = match &heat {
            Some((v, lo, hi)) if v[t] > 0.0 => {
                let a = if hi > lo { ((v[t].ln() - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
                heat_color(a)
            }
            _ => "none".to_string(),
        };
        let _ = writeln!(s, r#"<polygon points="{}" fill="{fill}"/>"#, pts.join(" "));
    }
    let _ = writeln!(s, "</g>");

    for f in features {
        let (fill, color) = if f.is_included() { ("#9e9e9e", "#424242") } else { ("none", "#d32f2f") };
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="0.8" stroke="{color}" stroke-width="1.5"/>"#,
            polygon_points(&f.shape, &px)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn polygon_points(p: &Polygon, px: &impl Fn(crate::geometry::Point2) -> (f64, f64)) -> String {
    p.vertices.iter().map(|&v| px(v)).map(|(x, y)| format!("{x:.3},{y:.3}")).collect::<Vec<_>>().join(" ")
}

/// Blue to red through yellow, `a` in `[0, 1]`.
fn heat_color(a: f64) -> String {
    let (r, g, b) = if a < 0.5 {
        let t = 2.0 * a;
        (t, t, 1.0 - t)
    } else {
        let t = 2.0 * (a - 0.5);
        (1.0, 1.0 - t, 0.0)
    };
    format!("#{:02x}{:02x}{:02x}", (255.0 * r) as u8, (255.0 * g) as u8, (255.0 * b) as u8)
}

/// Writes the last solved iteration of `state` (with indicators), or the
/// current mesh when nothing has been solved yet.
pub fn emit_snapshot(state: &AdaptiveState, path: &Path) -> io::Result<()> {
    let svg = match &state.latest {
        Some(s) => render_svg(&s.mesh, &s.features, Some(&s.report)),
        None => render_svg(&state.mesh, &state.features, None),
    };
    fs::write(path, svg)
}

/// Vertices, then triangles with their refinement generation.
pub fn write_mesh<W: Write>(mesh: &Mesh, mut out: W) -> io::Result<()> {
    writeln!(out, "vertices {}", mesh.n_vertices())?;
    for v in &mesh.vertices {
        writeln!(out, "{} {}", v.x, v.y)?;
    }
    writeln!(out, "triangles {}", mesh.n_triangles())?;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        writeln!(out, "{} {} {} {}", tri[0], tri[1], tri[2], mesh.generation[t])?;
    }
    out.flush()
}

/// Local RT coefficients of every active element, one line per element:
/// the triangle index followed by the eight coefficients.
pub fn write_flux<W: Write>(flux: &GlobalFlux, mesh: &Mesh, cls: &ActiveClassification, mut out: W) -> io::Result<()> {
    writeln!(out, "# triangle e0_0 e0_1 e1_0 e1_1 e2_0 e2_1 mean_x mean_y")?;
    for &t in &cls.active {
        let c = flux.local(mesh, t);
        let vals: Vec<String> = c.iter().map(f64::to_string).collect();
        writeln!(out, "{t} {}", vals.join(" "))?;
    }
    out.flush()
}
