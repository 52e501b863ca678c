//! Adaptive loop: solve, estimate, mark elements and neglected features
//! together with a Dörfler criterion, then refine the mesh and include the
//! marked features.

use std::cmp::Ordering;

use log::{debug, info, warn};

use crate::error::{AdaptiveError, Error};
use crate::estimator::{estimate, EstimatorReport, Weights};
use crate::flux::{reconstruct_flux, FluxContext, FluxOptions, GlobalFlux};
use crate::geometry::{clip_triangle, Feature, FeatureStatus, Rect};
use crate::mesh::{classify_active, ActiveClassification, Mesh};
use crate::primal::{energy_error, solve_primal, DiscreteSolution};
use crate::problem::ProblemSpec;

/// Relative change of the total estimator below which a step counts as stagnant.
pub const STAGNATION_TOL: f64 = 1e-12;
/// Estimator below this fraction of the discrete energy norm counts as zero.
pub const CONVERGED_TOL: f64 = 1e-10;
/// Consecutive stagnant steps that stop the loop.
pub const STAGNATION_STEPS: usize = 3;
/// Allowed ratio between the largest and smallest element touching a neglected feature.
pub const RESOLUTION_RATIO: f64 = 10.0;

/// Which items may be marked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdaptMode {
    /// Elements only; the feature set never changes.
    HOnly,
    /// Elements and neglected features.
    #[default]
    Combined,
}

/// Kind of a markable item. Features sort first on ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ItemKind {
    Feature,
    Element,
}

/// A markable item with its squared indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkItem {
    pub kind: ItemKind,
    /// Triangle index or feature id.
    pub id: usize,
    pub value: f64,
}

fn kind_name(kind: ItemKind) -> &'static str {
    match kind {
        ItemKind::Feature => "feature",
        ItemKind::Element => "element",
    }
}

/// Smallest set of items whose squared indicators sum to at least
/// `theta` times the total. Items are taken in decreasing order, ties
/// broken by kind (features first) and then by id.
pub fn doerfler_mark(items: &[MarkItem], theta: f64) -> Result<Vec<MarkItem>, AdaptiveError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(AdaptiveError::InvalidTheta(theta));
    }
    if let Some(bad) = items.iter().find(|m| !(m.value >= 0.0) || !m.value.is_finite()) {
        return Err(AdaptiveError::InvalidIndicator { kind: kind_name(bad.kind), id: bad.id, value: bad.value });
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .unwrap_or(Ordering::Equal)
            .then(a.kind.cmp(&b.kind))
            .then(a.id.cmp(&b.id))
    });
    // Summing in the same order as the prefix makes theta = 1 exact.
    let total: f64 = sorted.iter().map(|m| m.value).sum();
    if total <= 0.0 {
        return Ok(Vec::new());
    }
    let target = theta * total;
    let mut acc = 0.0;
    let mut count = 0;
    for m in &sorted {
        acc += m.value;
        count += 1;
        if acc >= target {
            break;
        }
    }
    sorted.truncate(count);
    Ok(sorted)
}

/// Parameters of an adaptive run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    pub theta: f64,
    pub weights: Weights,
    pub mode: AdaptMode,
    pub flux: FluxOptions,
    /// The loop stops once the number of unknowns reaches this value.
    pub max_dofs: usize,
    /// Hard cap on the number of iterations.
    pub max_iterations: usize,
    /// Extra uniform refinement rounds for the reference solution; 0 disables it.
    pub reference_levels: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            theta: 0.3,
            weights: Weights::default(),
            mode: AdaptMode::Combined,
            flux: FluxOptions::default(),
            max_dofs: 5000,
            max_iterations: 200,
            reference_levels: 0,
        }
    }
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxDofs,
    /// Every indicator vanished.
    Converged,
    /// Positive estimator with nothing to mark, or no progress over several steps.
    Stagnation,
    MaxIterations,
}

/// One line of the convergence history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub n_dofs: usize,
    pub eta_div: f64,
    pub eta_g: f64,
    pub eta_sigma: f64,
    pub eta_num: f64,
    pub eta_def: f64,
    pub eta_total: f64,
    pub n_included: usize,
    /// Energy error against the reference solution, when one was computed.
    pub error: Option<f64>,
    pub marked_elements: usize,
    pub marked_features: Vec<usize>,
}

/// Discrete quantities of one iteration, kept on the mesh they live on.
#[derive(Debug, Clone)]
pub struct Solved {
    pub mesh: Mesh,
    pub features: Vec<Feature>,
    pub cls: ActiveClassification,
    pub solution: DiscreteSolution,
    pub flux: GlobalFlux,
    pub report: EstimatorReport,
    pub marked: Vec<MarkItem>,
    /// Neglected features violating the resolution condition.
    pub underresolved: Vec<usize>,
}

/// Current mesh and feature set plus the last solved iteration.
#[derive(Debug, Clone)]
pub struct AdaptiveState {
    pub iteration: usize,
    pub mesh: Mesh,
    /// Every feature, with its current status.
    pub features: Vec<Feature>,
    pub latest: Option<Solved>,
    pub history: Vec<HistoryRow>,
    stagnant: usize,
}

impl AdaptiveState {
    pub fn new(mesh: Mesh, features: Vec<Feature>) -> Self {
        Self { iteration: 0, mesh, features, latest: None, history: Vec::new(), stagnant: 0 }
    }

    pub fn n_included(&self) -> usize {
        self.features.iter().filter(|f| f.is_included()).count()
    }

    /// Solves and estimates on the current geometry, without marking.
    pub fn solve(&self, spec: &ProblemSpec, config: &AdaptiveConfig) -> Result<Solved, Error> {
        let cls = classify_active(&self.mesh, &self.features)?;
        let solution = solve_primal(spec, &self.mesh, &cls, &self.features)?;
        let ctx = FluxContext { mesh: &self.mesh, cls: &cls, spec, features: &self.features, u: &solution };
        let flux = reconstruct_flux(&ctx, &config.flux)?;
        let report = estimate(&ctx, &flux, &self.features, config.weights)?;
        let underresolved = underresolved_features(&self.mesh, &self.features);
        Ok(Solved {
            mesh: self.mesh.clone(),
            features: self.features.clone(),
            cls,
            solution,
            flux,
            report,
            marked: Vec::new(),
            underresolved,
        })
    }

    /// One SOLVE, ESTIMATE, MARK, REFINE cycle. Returns the stop reason when
    /// the loop should end; in that case the geometry is left unchanged.
    pub fn step(&mut self, spec: &ProblemSpec, config: &AdaptiveConfig) -> Result<Option<StopReason>, Error> {
        let mut solved = self.solve(spec, config)?;
        for id in &solved.underresolved {
            warn!("iteration {}: neglected feature {id} is covered by elements of very different sizes", self.iteration);
        }
        let r = &solved.report;
        let n_dofs = solved.solution.n_dofs;
        let previous = self.history.last().map(|h| h.eta_total);
        let mut row = HistoryRow {
            iteration: self.iteration,
            n_dofs,
            eta_div: r.eta_div,
            eta_g: r.eta_g,
            eta_sigma: r.eta_sigma,
            eta_num: r.eta_num,
            eta_def: r.eta_def,
            eta_total: r.eta_total,
            n_included: self.n_included(),
            error: None,
            marked_elements: 0,
            marked_features: Vec::new(),
        };
        info!(
            "iteration {}: N = {n_dofs}, eta = {:.6e} (num {:.3e}, def {:.3e}), {} features included",
            self.iteration, r.eta_total, r.eta_num, r.eta_def, row.n_included
        );

        let mut stop = None;
        if n_dofs >= config.max_dofs {
            stop = Some(StopReason::MaxDofs);
        } else if self.iteration + 1 >= config.max_iterations {
            stop = Some(StopReason::MaxIterations);
        }
        if let Some(prev) = previous {
            let change = (r.eta_total - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            self.stagnant = if change < STAGNATION_TOL { self.stagnant + 1 } else { 0 };
            if self.stagnant >= STAGNATION_STEPS && stop.is_none() {
                warn!("estimator unchanged for {} steps, stopping", self.stagnant);
                stop = Some(StopReason::Stagnation);
            }
        }

        if stop.is_none() && r.eta_total <= CONVERGED_TOL * energy_norm(&solved, spec) {
            stop = Some(StopReason::Converged);
        }
        if stop.is_none() {
            let items = mark_items(&solved, config.mode);
            let marked = doerfler_mark(&items, config.theta)?;
            if marked.is_empty() {
                stop = Some(if r.eta_total > 0.0 { StopReason::Stagnation } else { StopReason::Converged });
                if r.eta_total > 0.0 {
                    warn!("positive estimator {:.3e} but nothing to mark", r.eta_total);
                }
            } else {
                let elements: Vec<usize> =
                    marked.iter().filter(|m| m.kind == ItemKind::Element).map(|m| m.id).collect();
                let features: Vec<usize> =
                    marked.iter().filter(|m| m.kind == ItemKind::Feature).map(|m| m.id).collect();
                debug!("marked {} elements and features {features:?}", elements.len());
                for f in self.features.iter_mut().filter(|f| features.contains(&f.id)) {
                    f.status = FeatureStatus::Included;
                }
                self.mesh = self.mesh.refine(&elements)?;
                row.marked_elements = elements.len();
                row.marked_features = features;
                solved.marked = marked;
            }
        }
        self.history.push(row);
        self.latest = Some(solved);
        if stop.is_none() {
            self.iteration += 1;
        }
        Ok(stop)
    }
}

/// `||kappa^(1/2) grad u_h||` over the active domain.
fn energy_norm(solved: &Solved, spec: &ProblemSpec) -> f64 {
    let (mesh, cls) = (&solved.mesh, &solved.cls);
    cls.active
        .iter()
        .map(|&t| {
            let g = solved.solution.gradients[t];
            spec.kappa_at(mesh.centroid(t)) * cls.active_area[t] * g.dot(g)
        })
        .sum::<f64>()
        .sqrt()
}

/// Markable items of a solved iteration.
pub fn mark_items(solved: &Solved, mode: AdaptMode) -> Vec<MarkItem> {
    let r = &solved.report;
    let mut items: Vec<MarkItem> = solved
        .cls
        .active
        .iter()
        .map(|&t| MarkItem { kind: ItemKind::Element, id: t, value: r.element_indicator(t) })
        .collect();
    if mode == AdaptMode::Combined {
        items.extend(r.features.iter().map(|&(id, eta)| MarkItem { kind: ItemKind::Feature, id, value: r.feature_indicator(eta) }));
    }
    items
}

/// Neglected features whose covering elements differ in diameter by more
/// than [`RESOLUTION_RATIO`].
pub fn underresolved_features(mesh: &Mesh, features: &[Feature]) -> Vec<usize> {
    features
        .iter()
        .filter(|f| !f.is_included())
        .filter(|f| {
            let fb = f.bbox();
            let (mut hmin, mut hmax) = (f64::INFINITY, 0.0f64);
            for t in 0..mesh.n_triangles() {
                let tri = mesh.points(t);
                if !Rect::bounding(&tri).overlaps(&fb) {
                    continue;
                }
                let outside: f64 = match clip_triangle(tri, &[f]) {
                    Ok(pieces) => pieces.iter().map(|p| p.area()).sum(),
                    Err(_) => continue,
                };
                if outside < mesh.area(t) * (1.0 - 1e-12) {
                    let h = mesh.diameter(t);
                    hmin = hmin.min(h);
                    hmax = hmax.max(h);
                }
            }
            hmax > RESOLUTION_RATIO * hmin
        })
        .map(|f| f.id)
        .collect()
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
    pub state: AdaptiveState,
}

/// Iterates [`AdaptiveState::step`] until a stop criterion fires.
/// `observer` sees the state after every step, with `latest` set to the
/// iteration just solved. With `reference_levels > 0` the error column is
/// filled afterwards against a solution on the final mesh refined that many
/// more times with every feature included.
pub fn run(
    spec: &ProblemSpec,
    mesh: Mesh,
    features: Vec<Feature>,
    config: &AdaptiveConfig,
    mut observer: impl FnMut(&AdaptiveState),
) -> Result<RunResult, Error> {
    config.weights.validate()?;
    if !(config.theta > 0.0 && config.theta <= 1.0) {
        return Err(AdaptiveError::InvalidTheta(config.theta).into());
    }
    let all_features = features.clone();
    let mut state = AdaptiveState::new(mesh, features);
    let mut iterates: Vec<(Mesh, DiscreteSolution)> = Vec::new();
    let stop = loop {
        let stop = state.step(spec, config)?;
        observer(&state);
        if config.reference_levels > 0 {
            let s = state.latest.as_ref().expect("step stores the solved iteration");
            iterates.push((s.mesh.clone(), s.solution.clone()));
        }
        if let Some(stop) = stop {
            break stop;
        }
    };
    if config.reference_levels > 0 {
        let last = &iterates.last().expect("at least one iteration").0;
        let errors = reference_errors(spec, last, &all_features, config.reference_levels, &iterates)?;
        for (row, e) in state.history.iter_mut().zip(errors) {
            row.error = Some(e);
        }
    }
    info!("stopped after {} iterations: {stop:?}", state.history.len());
    Ok(RunResult { history: state.history.clone(), stop, state })
}

/// Energy errors of `iterates` against the solution on `finest` refined
/// uniformly `levels` times with all features included.
pub fn reference_errors(
    spec: &ProblemSpec,
    finest: &Mesh,
    features: &[Feature],
    levels: usize,
    iterates: &[(Mesh, DiscreteSolution)],
) -> Result<Vec<f64>, Error> {
    let mut all = features.to_vec();
    for f in &mut all {
        f.status = FeatureStatus::Included;
    }
    let ref_mesh = finest.refine_uniform(levels);
    let ref_cls = classify_active(&ref_mesh, &all)?;
    let u_ref = solve_primal(spec, &ref_mesh, &ref_cls, &all)?;
    info!("reference solution: {} unknowns", u_ref.n_dofs);
    iterates
        .iter()
        .map(|(m, u)| energy_error(m, u, &ref_mesh, &ref_cls, &u_ref, &all, spec).map_err(Error::from))
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x.ln() - mx;
        num += dx * (y.ln() - my);
        den += dx * dx;
    }
    num / den
}
