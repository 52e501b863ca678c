//! A posteriori estimator: numerical terms per active element and one
//! defeaturing term per neglected feature.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{EstimatorError, FluxError};
use crate::flux::{FluxContext, GlobalFlux};
use crate::geometry::{feature_segments_in_triangle, Feature, Rect};
use crate::quadrature::{cut_rule, segment_rule, SEGMENT_DEGREE, VOLUME_DEGREE};

/// Relative tolerance for the coverage of a feature boundary by the mesh.
const COVERAGE_TOL: f64 = 1e-9;

/// Solution of `z = -ln z`.
pub fn zeta() -> f64 {
    static ZETA: OnceLock<f64> = OnceLock::new();
    *ZETA.get_or_init(|| {
        let mut z = 0.5f64;
        for _ in 0..10_000 {
            // Damped iteration: plain z <- exp(-z) converges slowly.
            let next = 0.5 * (z + (-z).exp());
            if (next - z).abs() < 1e-16 {
                return next;
            }
            z = next;
        }
        z
    })
}

/// Boundary constant `max(-ln |w|, zeta)^(1/2)`.
pub fn c_omega(length: f64) -> Result<f64, EstimatorError> {
    if !(length > 0.0) {
        return Err(EstimatorError::NonPositiveLength(length));
    }
    Ok((-length.ln()).max(zeta()).sqrt())
}

/// Weights of the estimator components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 1.0, alpha3: 1.0 }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        for (name, value) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(EstimatorError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Numerical indicators of one element.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElementIndicators {
    pub eta_div: f64,
    pub eta_g: f64,
    pub eta_sigma: f64,
}

/// All indicators and their totals.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    /// Per triangle (zero on inactive triangles).
    pub elements: Vec<ElementIndicators>,
    /// `(feature id, eta_F)` for each neglected feature.
    pub features: Vec<(usize, f64)>,
    pub weights: Weights,
    /// `(sum alpha1 eta_div^2)^(1/2)`.
    pub eta_div: f64,
    pub eta_g: f64,
    pub eta_sigma: f64,
    pub eta_num: f64,
    pub eta_def: f64,
    pub eta_total: f64,
}

impl EstimatorReport {
    /// Squared marking indicator of triangle `t`.
    pub fn element_indicator(&self, t: usize) -> f64 {
        let e = &self.elements[t];
        self.weights.alpha1 * e.eta_div.powi(2) + self.weights.alpha2 * e.eta_g.powi(2) + e.eta_sigma.powi(2)
    }

    /// Squared marking indicator of a feature.
    pub fn feature_indicator(&self, eta_f: f64) -> f64 {
        self.weights.alpha3 * eta_f * eta_f
    }
}

/// Combines per-item values into a report.
pub fn totals(elements: Vec<ElementIndicators>, features: Vec<(usize, f64)>, weights: Weights) -> Result<EstimatorReport, EstimatorError> {
    weights.validate()?;
    let rss = |f: &dyn Fn(&ElementIndicators) -> f64| elements.iter().fold(0.0, |a, e| a + f(e).powi(2)).sqrt();
    let eta_div = weights.alpha1.sqrt() * rss(&|e| e.eta_div);
    let eta_g = weights.alpha2.sqrt() * rss(&|e| e.eta_g);
    let eta_sigma = rss(&|e| e.eta_sigma);
    let eta_num = eta_div + eta_g + eta_sigma;
    let eta_def = (weights.alpha3 * features.iter().fold(0.0, |a, (_, f)| a + f * f)).sqrt();
    Ok(EstimatorReport { elements, features, weights, eta_div, eta_g, eta_sigma, eta_num, eta_def, eta_total: eta_num + eta_def })
}

/// Numerical indicators of active triangle `t`.
pub fn eta_element(ctx: &FluxContext, flux: &GlobalFlux, t: usize) -> Result<ElementIndicators, FluxError> {
    let (mesh, cls, spec) = (ctx.mesh, ctx.cls, ctx.spec);
    if !cls.is_active(t) {
        return Ok(ElementIndicators::default());
    }
    let h = mesh.diameter(t);
    let kappa = spec.kappa_at(mesh.centroid(t));
    let grad = ctx.u.gradients[t];
    let rule = cut_rule(&cls.pieces[t], VOLUME_DEGREE)?;
    let mut div2 = 0.0;
    let mut sig2 = 0.0;
    for (p, w) in rule.iter() {
        div2 += w * (spec.source.eval(p) - flux.div(mesh, t, p)).powi(2);
        let r = flux.eval(mesh, t, p) + grad * kappa;
        sig2 += w * r.dot(r) / kappa;
    }
    let mut g2 = 0.0;
    for seg in &cls.segments[t] {
        for (p, w) in segment_rule(seg.a, seg.b, SEGMENT_DEGREE)?.iter() {
            g2 += w * (spec.feature_flux.eval(p, seg.normal) + flux.eval(mesh, t, p).dot(seg.normal)).powi(2);
        }
    }
    Ok(ElementIndicators { eta_div: h * div2.sqrt(), eta_g: h.sqrt() * g2.sqrt(), eta_sigma: sig2.sqrt() })
}

/// Defeaturing indicator of a neglected feature.
pub fn eta_feature(ctx: &FluxContext, flux: &GlobalFlux, feature: &Feature) -> Result<f64, EstimatorError> {
    let (mesh, cls, spec) = (ctx.mesh, ctx.cls, ctx.spec);
    let total = feature.gamma_tilde_length();
    let c = c_omega(total)?;
    let fb = feature.bbox();
    // (weight, d) samples along the boundary.
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut covered = 0.0;
    for &t in &cls.active {
        let tri = mesh.points(t);
        if !Rect::bounding(&tri).overlaps(&fb) {
            continue;
        }
        for seg in feature_segments_in_triangle(tri, feature) {
            covered += seg.length();
            let rule = segment_rule(seg.a, seg.b, SEGMENT_DEGREE).expect("supported degree");
            for (p, w) in rule.iter() {
                let d = spec.feature_flux.eval(p, seg.normal) + flux.eval(mesh, t, p).dot(seg.normal);
                samples.push((w, d));
            }
        }
    }
    if (covered - total).abs() > COVERAGE_TOL * total.max(1e-300) {
        return Err(EstimatorError::FeatureOutsideMesh { id: feature.id, covered, total });
    }
    let mean_d = samples.iter().map(|(w, d)| w * d).sum::<f64>() / total;
    let osc2: f64 = samples.iter().map(|(w, d)| w * (d - mean_d).powi(2)).sum();

    let mut g_int = 0.0;
    for seg in &feature.gamma_tilde {
        g_int += segment_rule(seg.a, seg.b, SEGMENT_DEGREE).expect("supported degree").integrate(|p| spec.feature_flux.eval(p, seg.normal));
    }
    let f_int = cut_rule(&feature.parts, VOLUME_DEGREE).expect("supported degree").integrate(|p| spec.source.eval(p));
    let mut g0_int = 0.0;
    for seg in &feature.gamma_zero {
        // Outward normal of the original domain points out of the feature.
        g0_int += segment_rule(seg.a, seg.b, SEGMENT_DEGREE).expect("supported degree").integrate(|p| spec.feature_flux_zero.eval(p, -seg.normal));
    }
    let d_bar = (g_int - f_int - g0_int) / total;
    Ok((total * osc2 + c * c * total * total * d_bar * d_bar).sqrt())
}

/// Full estimator for the current state. `features` lists every feature;
/// only neglected ones contribute a defeaturing term.
pub fn estimate(ctx: &FluxContext, flux: &GlobalFlux, features: &[Feature], weights: Weights) -> Result<EstimatorReport, crate::error::Error> {
    weights.validate()?;
    let elements = (0..ctx.mesh.n_triangles())
        .into_par_iter()
        .map(|t| eta_element(ctx, flux, t))
        .collect::<Result<Vec<_>, FluxError>>()?;
    let feats = features
        .par_iter()
        .filter(|f| !f.is_included())
        .map(|f| eta_feature(ctx, flux, f).map(|e| (f.id, e)))
        .collect::<Result<Vec<_>, EstimatorError>>()?;
    Ok(totals(elements, feats, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{reconstruct_flux, FluxOptions};
    use crate::geometry::{regular_polygon, FeatureStatus, Point2};
    use crate::mesh::{build_structured_mesh, classify_active, ActiveClassification, Mesh};
    use crate::primal::{solve_primal, DiscreteSolution};
    use crate::problem::{Coefficient, DirichletData, FluxData, ProblemSpec};

    struct Run {
        mesh: Mesh,
        cls: ActiveClassification,
        spec: ProblemSpec,
        features: Vec<Feature>,
        u: DiscreteSolution,
    }

    impl Run {
        fn new(spec: ProblemSpec, h: f64, features: Vec<Feature>) -> Self {
            let mesh = build_structured_mesh(spec.domain, h, spec.bc).unwrap();
            let cls = classify_active(&mesh, &features).unwrap();
            let u = solve_primal(&spec, &mesh, &cls, &features).unwrap();
            Self { mesh, cls, spec, features, u }
        }
        fn ctx(&self) -> FluxContext<'_> {
            FluxContext { mesh: &self.mesh, cls: &self.cls, spec: &self.spec, features: &self.features, u: &self.u }
        }
        fn report(&self) -> EstimatorReport {
            let flux = reconstruct_flux(&self.ctx(), &FluxOptions::default()).unwrap();
            estimate(&self.ctx(), &flux, &self.features, Weights::default()).unwrap()
        }
    }

    fn test1_feature(status: FeatureStatus) -> Feature {
        let mut f = Feature::new(0, regular_polygon(Point2::new(0.2, 0.2), 0.04, 20, 0.0).unwrap(), &Rect::unit_square()).unwrap();
        f.status = status;
        f
    }

    #[test]
    fn zeta_and_boundary_constant() {
        let z = zeta();
        assert!((z + z.ln()).abs() < 1e-15);
        // Independent oracle: undamped fixed-point iteration.
        let mut y = 0.5f64;
        for _ in 0..200 {
            y = (-y).exp();
        }
        assert!((z - y).abs() < 1e-14);
        assert!((c_omega(1.0).unwrap() - 0.753089).abs() < 1e-6);
        assert!((c_omega((-4.0f64).exp()).unwrap() - 2.0).abs() < 1e-14);
        assert!((c_omega((-z).exp()).unwrap() - z.sqrt()).abs() < 1e-12);
        assert!(c_omega(0.0).is_err());
        assert!(c_omega(0.1).unwrap() >= c_omega(0.2).unwrap());
    }

    #[test]
    fn constant_data_feature_term() {
        let spec = ProblemSpec { feature_flux: FluxData::Constant(1.0), dirichlet: DirichletData::Zero, ..ProblemSpec::test1() };
        let r = Run::new(spec, 0.1, vec![test1_feature(FeatureStatus::Neglected)]);
        let zero = GlobalFlux {
            coeffs: vec![0.0; 2 * r.mesh.n_edges() + 2 * r.mesh.n_triangles()],
            elements: reconstruct_flux(&r.ctx(), &FluxOptions::default()).unwrap().elements,
            n_edges: r.mesh.n_edges(),
            discarded: vec![],
            max_compatibility_residual: 0.0,
        };
        let f = &r.features[0];
        let len = f.gamma_tilde_length();
        let eta = eta_feature(&r.ctx(), &zero, f).unwrap();
        let c = c_omega(len).unwrap();
        assert!((eta - c * len).abs() < 1e-13);
    }

    #[test]
    fn zero_data_feature_term_is_oscillation_only() {
        let r = Run::new(ProblemSpec::test1(), 0.1, vec![test1_feature(FeatureStatus::Neglected)]);
        let flux = reconstruct_flux(&r.ctx(), &FluxOptions::default()).unwrap();
        let eta = eta_feature(&r.ctx(), &flux, &r.features[0]).unwrap();
        assert!(eta > 0.0 && eta.is_finite());
    }

    #[test]
    fn totals_consistency() {
        let zero = totals(vec![ElementIndicators::default(); 4], vec![], Weights::default()).unwrap();
        assert_eq!(zero.eta_total, 0.0);
        let w = Weights { alpha3: 4.0, ..Default::default() };
        let one = totals(vec![], vec![(3, 0.5)], w).unwrap();
        assert!((one.eta_total - 1.0).abs() < 1e-15 && one.eta_def == one.eta_total);
        assert!(totals(vec![], vec![], Weights { alpha2: -1.0, ..Default::default() }).is_err());
        let els = vec![
            ElementIndicators { eta_div: 3.0, eta_g: 0.0, eta_sigma: 4.0 },
            ElementIndicators { eta_div: 4.0, eta_g: 1.0, eta_sigma: 3.0 },
        ];
        let r = totals(els, vec![], Weights { alpha1: 0.25, ..Default::default() }).unwrap();
        assert!((r.eta_div - 2.5).abs() < 1e-15);
        assert!((r.eta_num - (2.5 + 1.0 + 5.0)).abs() < 1e-14);
        assert!((r.element_indicator(0) - (0.25 * 9.0 + 16.0)).abs() < 1e-14);
    }

    #[test]
    fn affine_solution_has_zero_numerical_estimator() {
        let spec = ProblemSpec { dirichlet: DirichletData::Affine { a: 1.0, b: -2.0, c: 0.3 }, ..ProblemSpec::test1() };
        let r = Run::new(spec, 0.1, vec![]).report();
        assert!(r.eta_num <= 1e-10, "{}", r.eta_num);
        assert_eq!(r.eta_def, 0.0);
    }

    #[test]
    fn uncut_elements_have_no_div_or_g_term() {
        let r = Run::new(ProblemSpec::test1(), 0.1, vec![test1_feature(FeatureStatus::Included)]);
        let rep = r.report();
        for &t in &r.cls.active {
            if !r.cls.is_cut(t) {
                assert!(rep.elements[t].eta_div <= 1e-10);
                assert_eq!(rep.elements[t].eta_g, 0.0);
            }
        }
        assert!(rep.eta_g > 0.0);
        assert_eq!(rep.eta_def, 0.0);
    }

    #[test]
    fn unit_chessboard_matches_constant() {
        let spec = ProblemSpec::test1();
        let chess = ProblemSpec { kappa: Coefficient::Chessboard { n: 4, first: 1.0, second: 1.0 }, ..spec.clone() };
        let a = Run::new(spec, 0.1, vec![test1_feature(FeatureStatus::Neglected)]).report();
        let b = Run::new(chess, 0.1, vec![test1_feature(FeatureStatus::Neglected)]).report();
        assert_eq!(a, b);
    }

    #[test]
    fn scale_coherence() {
        let spec = ProblemSpec { feature_flux: FluxData::Constant(0.7), ..ProblemSpec::test1() };
        let feats = || vec![test1_feature(FeatureStatus::Neglected)];
        let a = Run::new(spec.clone(), 0.1, feats()).report();
        let b = Run::new(spec.scaled(-2.0), 0.1, feats()).report();
        let close = |x: f64, y: f64| (2.0 * x - y).abs() <= 1e-10 * (1.0 + y.abs());
        assert!(close(a.eta_num, b.eta_num) && close(a.eta_def, b.eta_def) && close(a.eta_total, b.eta_total));
        for (x, y) in a.elements.iter().zip(&b.elements) {
            assert!(close(x.eta_sigma, y.eta_sigma) && close(x.eta_div, y.eta_div) && close(x.eta_g, y.eta_g));
        }
    }

    #[test]
    fn uncovered_feature_rejected() {
        let r = Run::new(ProblemSpec::test1(), 0.1, vec![]);
        let flux = reconstruct_flux(&r.ctx(), &FluxOptions::default()).unwrap();
        let mut f = test1_feature(FeatureStatus::Neglected);
        for s in &mut f.gamma_tilde {
            s.a = s.a + Point2::new(5.0, 0.0);
            s.b = s.b + Point2::new(5.0, 0.0);
        }
        assert!(matches!(eta_feature(&r.ctx(), &flux, &f), Err(EstimatorError::FeatureOutsideMesh { .. })));
    }
}
