//! Command-line driver for adaptive defeaturing runs.

use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use defeat::adaptive::run;
use defeat::config::{parse_config, RunConfig};
use defeat::error::{ConfigError, Error};
use defeat::output::{emit_history, emit_snapshot, write_flux, write_mesh};
use log::{error, info};

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

/// Adaptive CutFEM solver with an equilibrated-flux estimator that decides
/// which geometric features to include.
#[derive(Debug, Parser)]
#[command(name = "defeat", version)]
struct Cli {
    /// `key=value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// test1, test2, test3 or custom.
    #[arg(long)]
    preset: Option<String>,
    /// Built-in problem data: test1, test2 or test3.
    #[arg(long)]
    problem: Option<String>,
    /// Dörfler marking fraction in (0, 1].
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    alpha1: Option<String>,
    #[arg(long)]
    alpha2: Option<String>,
    #[arg(long)]
    alpha3: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    /// none, ghost or discard.
    #[arg(long)]
    stabilization: Option<String>,
    /// Active fraction below which a patch is discarded.
    #[arg(long)]
    discard_threshold: Option<String>,
    /// symmetric or asymmetric patch problems.
    #[arg(long)]
    variant: Option<String>,
    /// h_only or combined.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_dofs: Option<String>,
    #[arg(long)]
    max_iterations: Option<String>,
    /// Initial element diameter.
    #[arg(long)]
    h0: Option<String>,
    /// Feature table (`i,eps,xc,yc,n_e,theta_deg`), or none/test1/test2/test3.
    #[arg(long)]
    features: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Extra uniform refinements for the reference solution (0: no error column).
    #[arg(long)]
    reference_levels: Option<String>,
    /// Write an SVG snapshot every n iterations (0: final only).
    #[arg(long)]
    snapshot_every: Option<String>,
}

impl Cli {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("preset", &self.preset),
            ("problem", &self.problem),
            ("theta", &self.theta),
            ("alpha1", &self.alpha1),
            ("alpha2", &self.alpha2),
            ("alpha3", &self.alpha3),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("stabilization", &self.stabilization),
            ("discard_threshold", &self.discard_threshold),
            ("variant", &self.variant),
            ("mode", &self.mode),
            ("max_dofs", &self.max_dofs),
            ("max_iterations", &self.max_iterations),
            ("h_initial", &self.h0),
            ("output", &self.out),
            ("features", &self.features),
            ("reference_levels", &self.reference_levels),
            ("snapshot_every", &self.snapshot_every),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }

    /// File entries first, then flags; a preset is applied before everything else.
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut text = match &self.config {
            Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Read { path: p.display().to_string(), message: e.to_string() })?,
            None => String::new(),
        };
        for (k, v) in self.overrides() {
            if v.contains('\n') {
                return Err(ConfigError::InvalidValue { key: k.into(), value: v.into(), reason: "contains a newline".into() });
            }
            text.push('\n');
            text.push_str(k);
            text.push('=');
            text.push_str(v);
        }
        parse_config(&text)
    }
}

fn execute(cfg: &RunConfig) -> Result<(), Error> {
    let (spec, mesh, features) = cfg.build()?;
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.emit())?;
    info!("{} triangles, {} features, output in {}", mesh.n_triangles(), features.len(), out.display());

    let every = cfg.snapshot_every;
    let mut io_error: Option<std::io::Error> = None;
    let result = run(&spec, mesh, features, &cfg.adaptive(), |state| {
        let it = state.history.len() - 1;
        if every > 0 && it % every == 0 && io_error.is_none() {
            if let Err(e) = emit_snapshot(state, &out.join(format!("snapshot_{it:03}.svg"))) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    emit_history(&result.history, &out.join("history.csv"))?;
    emit_snapshot(&result.state, &out.join("final.svg"))?;
    if let Some(s) = &result.state.latest {
        write_mesh(&s.mesh, BufWriter::new(fs::File::create(out.join("mesh.txt"))?))?;
        write_flux(&s.flux, &s.mesh, &s.cls, BufWriter::new(fs::File::create(out.join("flux.txt"))?))?;
    }
    let last = result.history.last().expect("run records at least one iteration");
    println!(
        "stopped ({:?}) after {} iterations: N = {}, eta = {:.6e} (num {:.6e}, def {:.6e}), {} features included",
        result.stop,
        result.history.len(),
        last.n_dofs,
        last.eta_total,
        last.eta_num,
        last.eta_def,
        last.n_included
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match cli.resolve() {
        Ok(c) => c,
        Err(e) => {
            error!("configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_solver_failure() => {
            error!("solver failure: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
