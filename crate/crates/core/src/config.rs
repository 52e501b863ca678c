//! Run configuration: presets, `key=value` files and feature tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptive::{AdaptMode, AdaptiveConfig};
use crate::error::{ConfigError, GeometryError};
use crate::estimator::Weights;
use crate::flux::{FluxOptions, PatchVariant, Stabilization, DISCARD_THRESHOLD};
use crate::geometry::{features_disjoint, regular_polygon, Feature, Point2, Rect};
use crate::mesh::{build_structured_mesh, BoundaryTag, Mesh};
use crate::problem::ProblemSpec;

const TEST2_TABLE: &str = include_str!("../data/test2_features.csv");
const TEST3_TABLE: &str = include_str!("../data/test3_features.csv");

/// Named benchmark setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Test1,
    Test2,
    Test3,
    Custom,
}

/// Built-in problem data sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Test1,
    Test2,
    Test3,
}

impl ProblemKind {
    pub fn spec(self) -> ProblemSpec {
        match self {
            ProblemKind::Test1 => ProblemSpec::test1(),
            ProblemKind::Test2 => ProblemSpec::test2(),
            ProblemKind::Test3 => ProblemSpec::test3(),
        }
    }
}

/// Where the features come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    None,
    /// The single 20-gon of the first benchmark.
    Test1,
    Test2,
    Test3,
    File(PathBuf),
}

/// Patch stabilization choice; the numeric parameters live in [`RunConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilizationKind {
    None,
    Ghost,
    Discard,
}

/// Everything needed to start a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub problem: ProblemKind,
    pub theta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilization: StabilizationKind,
    pub discard_threshold: f64,
    pub variant: PatchVariant,
    pub mode: AdaptMode,
    pub max_dofs: usize,
    pub max_iterations: usize,
    pub h_initial: f64,
    pub output: PathBuf,
    pub features: FeatureSource,
    /// Write an SVG every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    pub reference_levels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Custom)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            problem: ProblemKind::Test1,
            theta: 0.3,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta1: 0.1,
            beta2: 0.1,
            stabilization: StabilizationKind::Discard,
            discard_threshold: DISCARD_THRESHOLD,
            variant: PatchVariant::Symmetric,
            mode: AdaptMode::Combined,
            max_dofs: 5000,
            max_iterations: 200,
            h_initial: 7.07e-2,
            output: PathBuf::from("out"),
            features: FeatureSource::None,
            snapshot_every: 0,
            reference_levels: 0,
        };
        match preset {
            Preset::Custom => base,
            Preset::Test1 => Self { features: FeatureSource::Test1, ..base },
            Preset::Test2 => Self { problem: ProblemKind::Test2, features: FeatureSource::Test2, ..base },
            Preset::Test3 => Self {
                problem: ProblemKind::Test3,
                features: FeatureSource::Test3,
                theta: 0.5,
                h_initial: 1.41e-1,
                ..base
            },
        }
    }

    /// Sets one option from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "preset" => *self = Self::preset(parse_enum(key, v)?),
            "problem" => self.problem = parse_enum(key, v)?,
            "theta" => self.theta = parse_num(key, v)?,
            "alpha1" => self.alpha1 = parse_num(key, v)?,
            "alpha2" => self.alpha2 = parse_num(key, v)?,
            "alpha3" => self.alpha3 = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "stabilization" => self.stabilization = parse_enum(key, v)?,
            "discard_threshold" => self.discard_threshold = parse_num(key, v)?,
            "variant" => self.variant = parse_variant(key, v)?,
            "mode" => self.mode = parse_mode(key, v)?,
            "max_dofs" => self.max_dofs = parse_num(key, v)?,
            "max_iterations" => self.max_iterations = parse_num(key, v)?,
            "h_initial" | "h0" => self.h_initial = parse_num(key, v)?,
            "output" | "out" => self.output = PathBuf::from(v),
            "features" => self.features = feature_source(v),
            "snapshot_every" => self.snapshot_every = parse_num(key, v)?,
            "reference_levels" => self.reference_levels = parse_num(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Range checks that do not need a mesh.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &str, value: f64, ok: bool, range: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { key: key.into(), value: value.to_string(), range: range.into() })
            }
        };
        range("theta", self.theta, self.theta > 0.0 && self.theta <= 1.0, "(0, 1]")?;
        for (k, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3), ("beta1", self.beta1), ("beta2", self.beta2)] {
            range(k, v, v >= 0.0 && v.is_finite(), "[0, inf)")?;
        }
        range("discard_threshold", self.discard_threshold, (0.0..1.0).contains(&self.discard_threshold), "[0, 1)")?;
        range("h_initial", self.h_initial, self.h_initial > 0.0 && self.h_initial.is_finite(), "(0, inf)")?;
        range("max_iterations", self.max_iterations as f64, self.max_iterations > 0, "[1, inf)")?;
        Ok(())
    }

    pub fn weights(&self) -> Weights {
        Weights { alpha1: self.alpha1, alpha2: self.alpha2, alpha3: self.alpha3 }
    }

    pub fn flux_options(&self) -> FluxOptions {
        let stabilization = match self.stabilization {
            StabilizationKind::None => Stabilization::None,
            StabilizationKind::Ghost => Stabilization::Ghost { beta1: self.beta1, beta2: self.beta2 },
            StabilizationKind::Discard => Stabilization::Discard { threshold: self.discard_threshold },
        };
        FluxOptions { stabilization, variant: self.variant }
    }

    pub fn adaptive(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            theta: self.theta,
            weights: self.weights(),
            mode: self.mode,
            flux: self.flux_options(),
            max_dofs: self.max_dofs,
            max_iterations: self.max_iterations,
            reference_levels: self.reference_levels,
        }
    }

    /// Problem data, initial mesh and features. Rejects a DOF budget that
    /// the initial mesh already exceeds.
    pub fn build(&self) -> Result<(ProblemSpec, Mesh, Vec<Feature>), ConfigError> {
        self.validate()?;
        let spec = self.problem.spec();
        let mesh = build_structured_mesh(spec.domain, self.h_initial, spec.bc).map_err(|e| ConfigError::InvalidValue {
            key: "h_initial".into(),
            value: self.h_initial.to_string(),
            reason: e.to_string(),
        })?;
        let initial = initial_dofs(&mesh);
        if self.max_dofs <= initial {
            return Err(ConfigError::OutOfRange {
                key: "max_dofs".into(),
                value: self.max_dofs.to_string(),
                range: format!("more than the {initial} initial unknowns"),
            });
        }
        let features = self.features.load(&spec.domain)?;
        Ok((spec, mesh, features))
    }

    /// One `key=value` line per option; [`parse_config`] reads it back.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        line("preset", self.preset.to_string());
        line("problem", self.problem.to_string());
        line("theta", self.theta.to_string());
        line("alpha1", self.alpha1.to_string());
        line("alpha2", self.alpha2.to_string());
        line("alpha3", self.alpha3.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("stabilization", self.stabilization.to_string());
        line("discard_threshold", self.discard_threshold.to_string());
        line("variant", variant_name(self.variant).into());
        line("mode", mode_name(self.mode).into());
        line("max_dofs", self.max_dofs.to_string());
        line("max_iterations", self.max_iterations.to_string());
        line("h_initial", self.h_initial.to_string());
        line("output", self.output.display().to_string());
        line("features", self.features.to_string());
        line("snapshot_every", self.snapshot_every.to_string());
        line("reference_levels", self.reference_levels.to_string());
        s
    }
}

/// Unknowns of the feature-free problem: vertices not on a Dirichlet edge.
pub fn initial_dofs(mesh: &Mesh) -> usize {
    let mut dirichlet = vec![false; mesh.n_vertices()];
    for t in 0..mesh.n_triangles() {
        for i in 0..3 {
            if mesh.tri_tags[t][i] == BoundaryTag::Dirichlet {
                let tri = mesh.triangles[t];
                dirichlet[tri[(i + 1) % 3]] = true;
                dirichlet[tri[(i + 2) % 3]] = true;
            }
        }
    }
    dirichlet.iter().filter(|d| !**d).count()
}

/// Reads `key=value` lines. Blank lines and `#` comments are skipped; a
/// `preset` line is applied first wherever it appears, so the remaining
/// keys override it.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Malformed { line: i + 1, message: format!("expected key=value, got `{line}`") })?;
        if k.trim().is_empty() {
            return Err(ConfigError::Malformed { line: i + 1, message: "empty key".into() });
        }
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = RunConfig::default();
    if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
        cfg.set(k, v)?;
    }
    for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

impl FeatureSource {
    /// Builds the features clipped to `domain`, ids in table order from 0.
    pub fn load(&self, domain: &Rect) -> Result<Vec<Feature>, ConfigError> {
        match self {
            FeatureSource::None => Ok(Vec::new()),
            FeatureSource::Test1 => {
                let shape = regular_polygon(Point2::new(0.2, 0.2), 0.04, 20, 0.0)?;
                Ok(vec![Feature::new(0, shape, domain)?])
            }
            FeatureSource::Test2 => parse_features(TEST2_TABLE, domain),
            FeatureSource::Test3 => parse_features(TEST3_TABLE, domain),
            FeatureSource::File(path) => load_features(path, domain),
        }
    }
}

/// Reads a feature table file (`i,eps,xc,yc,n_e,theta_deg`).
pub fn load_features(path: &Path, domain: &Rect) -> Result<Vec<Feature>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_features(&text, domain)
}

/// Parses a feature table and checks that the features are pairwise disjoint.
pub fn parse_features(text: &str, domain: &Rect) -> Result<Vec<Feature>, ConfigError> {
    const HEADER: [&str; 6] = ["i", "eps", "xc", "yc", "n_e", "theta_deg"];
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| ConfigError::FeatureTable { line: 1, message: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(ConfigError::FeatureTable { line: 1, message: format!("header must be `{}`", HEADER.join(",")) });
    }
    let mut features: Vec<Feature> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| ConfigError::FeatureTable { line, message: e.to_string() })?;
        let num = |j: usize| -> Result<f64, ConfigError> {
            record[j].parse::<f64>().map_err(|e| ConfigError::FeatureTable { line, message: format!("column `{}`: {e}", HEADER[j]) })
        };
        let (eps, xc, yc, theta) = (num(1)?, num(2)?, num(3)?, num(5)?);
        let n_e: usize = record[4]
            .parse()
            .map_err(|e| ConfigError::FeatureTable { line, message: format!("column `n_e`: {e}") })?;
        let shape = regular_polygon(Point2::new(xc, yc), eps, n_e, theta)?;
        let f = Feature::new(features.len(), shape, domain)?;
        if let Some(g) = features.iter().find(|g| !features_disjoint(g, &f)) {
            return Err(GeometryError::OverlappingFeatures { a: g.id, b: f.id }.into());
        }
        features.push(f);
    }
    Ok(features)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: e.to_string() })
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|reason| ConfigError::InvalidValue { key: key.into(), value: v.into(), reason })
}

fn parse_mode(key: &str, v: &str) -> Result<AdaptMode, ConfigError> {
    match v {
        "h_only" => Ok(AdaptMode::HOnly),
        "combined" => Ok(AdaptMode::Combined),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: "expected h_only or combined".into() }),
    }
}

fn mode_name(m: AdaptMode) -> &'static str {
    match m {
        AdaptMode::HOnly => "h_only",
        AdaptMode::Combined => "combined",
    }
}

fn parse_variant(key: &str, v: &str) -> Result<PatchVariant, ConfigError> {
    match v {
        "symmetric" => Ok(PatchVariant::Symmetric),
        "asymmetric" => Ok(PatchVariant::Asymmetric),
        _ => Err(ConfigError::InvalidValue { key: key.into(), value: v.into(), reason: "expected symmetric or asymmetric".into() }),
    }
}

fn variant_name(v: PatchVariant) -> &'static str {
    match v {
        PatchVariant::Symmetric => "symmetric",
        PatchVariant::Asymmetric => "asymmetric",
    }
}

fn feature_source(v: &str) -> FeatureSource {
    match v {
        "" | "none" => FeatureSource::None,
        "test1" => FeatureSource::Test1,
        "test2" => FeatureSource::Test2,
        "test3" => FeatureSource::Test3,
        path => FeatureSource::File(PathBuf::from(path)),
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::None => f.write_str("none"),
            FeatureSource::Test1 => f.write_str("test1"),
            FeatureSource::Test2 => f.write_str("test2"),
            FeatureSource::Test3 => f.write_str("test3"),
            FeatureSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

macro_rules! named_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!("expected one of: {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

named_enum!(Preset, Preset::Test1 => "test1", Preset::Test2 => "test2", Preset::Test3 => "test3", Preset::Custom => "custom");
named_enum!(ProblemKind, ProblemKind::Test1 => "test1", ProblemKind::Test2 => "test2", ProblemKind::Test3 => "test3");
named_enum!(StabilizationKind, StabilizationKind::None => "none", StabilizationKind::Ghost => "ghost", StabilizationKind::Discard => "discard");
