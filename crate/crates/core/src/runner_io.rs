//! Scenario files, experiment dispatch and deterministic artifacts.
//!
//! A scenario is a TOML file with nested blocks. Unknown keys are errors.
//! Every CSV and JSON artifact starts with a metadata block carrying the
//! scenario hash (SHA-256 of the file bytes), the code version and the
//! transform and force conventions. Numbers are written with 17 significant
//! digits, so reruns of the same bytes give identical bodies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytic_norms::prop25_suite;
use crate::echo_growth::{
    backward_moment, echo_geometry, forward_moment_table, growth_control_solve, run_echo, EchoKernelParams,
    EchoScenario, GrowthProblem,
};
use crate::error::Error;
use crate::fields::{InteractionPotential, WRule};
use crate::kinematics::Kinematics;
use crate::linear_volterra::{
    default_omega_grid, fit_decay_rate, solve_mode, stability_margin, LinearSetup, StabilityOptions,
};
use crate::nonlinear_vlasov::{run, FilterConfig, SolverConfig};
use crate::phase_space::{maxwellian_anisotropic, perturbed_state, Equilibrium, Geometry, Perturbation, VelocityProfile};

pub const CODE_VERSION: &str = concat!("cyclodamp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("invalid [{block}] block: {message}")]
    Invalid { block: String, message: String },
    #[error("{module} failed in [{block}]: {source}")]
    Numeric { module: &'static str, block: String, source: Error },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
}

impl RunnerError {
    /// 2 for configuration errors, 3 for numeric or output failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Read { .. } | Self::Parse { .. } | Self::UnknownKey { .. } | Self::Invalid { .. } => 2,
            Self::Numeric { .. } | Self::Write { .. } => 3,
        }
    }
}

pub type RunnerResult<T> = std::result::Result<T, RunnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Linear,
    Nonlinear,
    Echo,
    Stability,
    Moments,
    Norms,
    Growth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryBlock {
    pub dim_x: usize,
    pub kmax: usize,
    pub nv: usize,
    pub lv: f64,
    pub dim_v: usize,
    pub nv_perp: usize,
}

impl Default for GeometryBlock {
    fn default() -> Self {
        Self { dim_x: 1, kmax: 1, nv: 64, lv: 8.0, dim_v: 3, nv_perp: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicsBlock {
    pub b0: f64,
}

impl Default for KinematicsBlock {
    fn default() -> Self {
        Self { b0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialBlock {
    pub gamma: f64,
    pub amplitude: f64,
    pub rule: WRule,
}

impl Default for PotentialBlock {
    fn default() -> Self {
        Self { gamma: 2.0, amplitude: 1.0, rule: WRule::OddPerp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumBlock {
    pub v_thermal: f64,
    /// Defaults to `v_thermal`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_thermal_perp: Option<f64>,
}

impl Default for EquilibriumBlock {
    fn default() -> Self {
        Self { v_thermal: 1.0, v_thermal_perp: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Equilibrium,
    Gaussian,
    Sech,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBlock {
    pub mode: [i64; 3],
    pub amplitude: f64,
    #[serde(default = "default_profile")]
    pub profile: ProfileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

fn default_profile() -> ProfileKind {
    ProfileKind::Equilibrium
}

impl PerturbationBlock {
    fn to_perturbation(self) -> std::result::Result<Perturbation, String> {
        let profile = match (self.profile, self.width) {
            (ProfileKind::Equilibrium, None) => VelocityProfile::Equilibrium,
            (ProfileKind::Equilibrium, Some(_)) => return Err("width is only used by gaussian and sech".into()),
            (ProfileKind::Gaussian, Some(w)) if w > 0.0 => VelocityProfile::Gaussian { width: w },
            (ProfileKind::Sech, Some(w)) if w > 0.0 => VelocityProfile::Sech { width: w },
            _ => return Err("gaussian and sech profiles need a positive width".into()),
        };
        Ok(Perturbation { mode: self.mode, amplitude: self.amplitude, profile })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    pub dt: f64,
    pub t_end: f64,
    pub dealias: bool,
    pub filter: bool,
    pub filter_strength: f64,
    pub filter_cutoff: f64,
    pub diag_every: usize,
    /// Decay-fit window; defaults to `[t_end/4, t_end]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
    /// Envelope period for the fit; none fits `|ρ̂|` directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_period: Option<f64>,
    pub v_te: f64,
    pub kappa_min: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            dt: 0.05,
            t_end: 15.0,
            dealias: true,
            filter: true,
            filter_strength: 40.0,
            filter_cutoff: 0.5,
            diag_every: 1,
            fit_window: None,
            fit_period: None,
            v_te: 1.0,
            kappa_min: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoBlock {
    pub a1: f64,
    pub a2: f64,
    pub k1: i64,
    pub k2: i64,
    pub tau_pulse: f64,
    pub nv: usize,
    pub lv: f64,
    pub dt_out: f64,
    pub t_end: f64,
}

impl Default for EchoBlock {
    fn default() -> Self {
        Self { a1: 0.1, a2: 0.1, k1: 1, k2: 2, tau_pulse: 10.0, nv: 2048, lv: 8.0, dt_out: 0.05, t_end: 25.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsBlock {
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub n_t: usize,
    pub tau_max: f64,
    pub n_tau: usize,
}

impl Default for MomentsBlock {
    fn default() -> Self {
        Self { alpha: 0.1, gamma: 2.0, eps: 0.05, t_min: 50.0, t_max: 400.0, n_t: 6, tau_max: 100.0, n_tau: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormsBlock {
    pub samples: usize,
}

impl Default for NormsBlock {
    fn default() -> Self {
        Self { samples: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthBlock {
    pub a: f64,
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub c0: f64,
    pub m: f64,
    pub lambda: f64,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for GrowthBlock {
    fn default() -> Self {
        Self { a: 1.0, c: 0.01, alpha: 0.1, gamma: 2.0, eps: 0.05, c0: 0.0, m: 2.0, lambda: 0.0, dt: 0.2, t_end: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// A complete, validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: GeometryBlock,
    #[serde(default)]
    pub kinematics: KinematicsBlock,
    #[serde(default)]
    pub potential: PotentialBlock,
    #[serde(default)]
    pub equilibrium: EquilibriumBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub echo: EchoBlock,
    #[serde(default)]
    pub moments: MomentsBlock,
    #[serde(default)]
    pub norms: NormsBlock,
    #[serde(default)]
    pub growth: GrowthBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default, rename = "perturbation")]
    pub perturbations: Vec<PerturbationBlock>,
}

fn invalid(block: &str, message: impl ToString) -> RunnerError {
    RunnerError::Invalid { block: block.to_string(), message: message.to_string() }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parse and validate scenario text.
pub fn parse_scenario(text: &str) -> RunnerResult<Scenario> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
        let message = e.message().to_string();
        match message.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(key) => RunnerError::UnknownKey { key: key.to_string(), line },
            None => RunnerError::Parse { line, message },
        }
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> RunnerResult<Scenario> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunnerError::Read { path: path.display().to_string(), message: e.to_string() })?;
    parse_scenario(&text)
}

/// SHA-256 of the scenario bytes, hex encoded.
pub fn scenario_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Scenario {
    /// Normalized TOML with every default written out.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn geometry(&self) -> RunnerResult<Geometry> {
        let g = self.geometry;
        Geometry::new(g.dim_x, g.kmax, g.nv, g.lv, g.dim_v, g.nv_perp).map_err(|e| invalid("geometry", e))
    }

    pub fn kinematics(&self) -> Kinematics {
        Kinematics::new(self.kinematics.b0)
    }

    pub fn potential(&self) -> RunnerResult<InteractionPotential> {
        let p = self.potential;
        InteractionPotential::new(p.gamma, p.amplitude, p.rule).map_err(|e| invalid("potential", e))
    }

    pub fn equilibrium(&self) -> RunnerResult<(Equilibrium, Geometry)> {
        let g = self.geometry()?;
        let e = self.equilibrium;
        let vp = e.v_thermal_perp.unwrap_or(e.v_thermal);
        if !(e.v_thermal > 0.0 && vp > 0.0) {
            return Err(invalid("equilibrium", "thermal speeds must be positive"));
        }
        let (eq, _) = maxwellian_anisotropic(&g, e.v_thermal, vp).map_err(|err| invalid("equilibrium", err))?;
        Ok((eq, g))
    }

    pub fn perturbations(&self) -> RunnerResult<Vec<Perturbation>> {
        self.perturbations
            .iter()
            .map(|p| p.to_perturbation().map_err(|m| invalid("perturbation", m)))
            .collect()
    }

    pub fn echo_scenario(&self) -> EchoScenario {
        let e = self.echo;
        EchoScenario {
            a1: e.a1,
            a2: e.a2,
            k1: e.k1,
            k2: e.k2,
            tau_pulse: e.tau_pulse,
            v_thermal: self.equilibrium.v_thermal,
        }
    }

    pub fn moment_params(&self) -> RunnerResult<EchoKernelParams> {
        let m = self.moments;
        EchoKernelParams::new(m.alpha, m.gamma, m.eps).map_err(|e| invalid("moments", e))
    }

    pub fn growth_params(&self) -> RunnerResult<EchoKernelParams> {
        let g = self.growth;
        let mut p = EchoKernelParams::new(g.alpha, g.gamma, g.eps).map_err(|e| invalid("growth", e))?;
        p.c0 = g.c0;
        p.m = g.m;
        p.validate().map_err(|e| invalid("growth", e))?;
        Ok(p)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = self.solver;
        let mut cfg = SolverConfig::new(s.dt, s.t_end);
        cfg.dealias = s.dealias;
        cfg.diag_every = s.diag_every;
        cfg.filter = s.filter.then_some(FilterConfig { strength: s.filter_strength, cutoff: s.filter_cutoff });
        cfg
    }

    /// Checks every block the experiment uses before any compute starts.
    pub fn validate(&self) -> RunnerResult<()> {
        if self.name.trim().is_empty() {
            return Err(invalid("scenario", "name must not be empty"));
        }
        match self.experiment {
            Experiment::Linear | Experiment::Nonlinear | Experiment::Stability => {
                let (eq, g) = self.equilibrium()?;
                self.potential()?;
                if !self.kinematics.b0.is_finite() {
                    return Err(invalid("kinematics", "b0 must be finite"));
                }
                let perts = self.perturbations()?;
                if perts.is_empty() {
                    return Err(invalid("perturbation", "at least one perturbation is required"));
                }
                for p in &perts {
                    if g.mode_index(p.mode).is_none() || p.mode == [0, 0, 0] {
                        return Err(invalid("perturbation", format!("mode {:?} is not a retained non-zero mode", p.mode)));
                    }
                }
                let s = self.solver;
                if !(s.dt > 0.0 && s.t_end > 0.0) || s.diag_every == 0 {
                    return Err(invalid("solver", "need dt > 0, t_end > 0 and diag_every >= 1"));
                }
                if let Some([a, b]) = s.fit_window {
                    if !(a < b) {
                        return Err(invalid("solver", "fit_window must be increasing"));
                    }
                }
                if self.experiment == Experiment::Nonlinear {
                    let dist = perturbed_state(&g, &eq, &perts).map_err(|e| invalid("perturbation", e))?;
                    self.solver_config().validate(&dist).map_err(|e| invalid("solver", e))?;
                }
            }
            Experiment::Echo => {
                let es = self.echo_scenario();
                es.validate().map_err(|e| invalid("echo", e))?;
                let e = self.echo;
                echo_geometry(&es, e.nv, e.lv).map_err(|err| invalid("echo", err))?;
                if !(e.dt_out > 0.0) {
                    return Err(invalid("echo", "dt_out must be positive"));
                }
                if es.predicted_time() > e.t_end {
                    return Err(invalid("echo", format!("echo time {} lies beyond t_end = {}", es.predicted_time(), e.t_end)));
                }
            }
            Experiment::Moments => {
                self.moment_params()?;
                let m = self.moments;
                if !(m.t_min > 0.0 && m.t_max > m.t_min) || m.n_t < 2 || !(m.tau_max > 0.0) || m.n_tau == 0 {
                    return Err(invalid("moments", "need 0 < t_min < t_max, n_t >= 2, tau_max > 0, n_tau >= 1"));
                }
            }
            Experiment::Norms => {
                if self.norms.samples == 0 {
                    return Err(invalid("norms", "samples must be positive"));
                }
            }
            Experiment::Growth => {
                self.growth_params()?;
                let g = self.growth;
                if !(g.dt > 0.0 && g.t_end > 0.0 && g.a >= 0.0 && g.c >= 0.0 && g.lambda >= 0.0) {
                    return Err(invalid("growth", "need dt, t_end > 0 and a, c, lambda >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Round-trip decimal formatting used in every CSV.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Metadata written at the top of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scenario: String,
    pub scenario_hash: String,
    pub code_version: String,
    pub experiment: Experiment,
    pub fourier_x: String,
    pub fourier_v: String,
    pub force: String,
    pub w_rule: WRule,
}

impl Metadata {
    pub fn new(s: &Scenario, hash: &str) -> Self {
        Self {
            scenario: s.name.clone(),
            scenario_hash: hash.to_string(),
            code_version: CODE_VERSION.to_string(),
            experiment: s.experiment,
            fourier_x: "exp(-2 pi i k.x)".into(),
            fourier_v: "exp(-2 pi i eta.v)".into(),
            force: "B_tot x v".into(),
            w_rule: s.potential.rule,
        }
    }

    fn comment_block(&self) -> String {
        let rule = serde_json::to_value(self.w_rule).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let exp = serde_json::to_value(self.experiment).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mut out = String::new();
        for (k, v) in [
            ("scenario", self.scenario.as_str()),
            ("scenario_hash", &self.scenario_hash),
            ("code_version", &self.code_version),
            ("experiment", &exp),
            ("fourier_x", &self.fourier_x),
            ("fourier_v", &self.fourier_v),
            ("force", &self.force),
            ("w_rule", &rule),
        ] {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out
    }
}

/// CSV text: metadata comments, a header row, then the rows.
pub fn csv_text(meta: &Metadata, columns: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = meta.comment_block();
    out.push_str(&columns.join(","));
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|x| fmt_num(*x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Strips the `#` metadata block, leaving the header row and the body.
pub fn csv_body(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

/// Files produced by one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

struct Writer {
    dir: PathBuf,
    meta: Metadata,
    files: Vec<PathBuf>,
}

impl Writer {
    fn write(&mut self, name: &str, text: &str) -> RunnerResult<()> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| RunnerError::Write { path: self.dir.display().to_string(), message: e.to_string() })?;
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| RunnerError::Write { path: path.display().to_string(), message: e.to_string() })?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> RunnerResult<()> {
        let cols: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        let text = csv_text(&self.meta, &cols, rows);
        self.write(name, &text)
    }

    fn csv_owned(&mut self, name: &str, columns: &[String], rows: &[Vec<f64>]) -> RunnerResult<()> {
        let text = csv_text(&self.meta, columns, rows);
        self.write(name, &text)
    }

    fn json(&mut self, name: &str, result: &serde_json::Value) -> RunnerResult<serde_json::Value> {
        let doc = json!({ "meta": self.meta, "result": result });
        let text = serde_json::to_string_pretty(&doc).expect("json serializes") + "\n";
        self.write(name, &text)?;
        Ok(result.clone())
    }
}

fn numeric<'a>(module: &'static str, block: &'a str) -> impl Fn(Error) -> RunnerError + 'a {
    move |source| RunnerError::Numeric { module, block: block.to_string(), source }
}

fn mode_label(k: [i64; 3]) -> String {
    format!("{}_{}_{}", k[0], k[1], k[2])
}

/// Runs a validated scenario and writes its artifacts under `out_dir`
/// (or the scenario's own output directory).
pub fn run_scenario(s: &Scenario, hash: &str, out_dir: Option<&Path>) -> RunnerResult<RunSummary> {
    s.validate()?;
    let mut w = Writer {
        dir: out_dir.map(Path::to_path_buf).unwrap_or_else(|| s.output.dir.clone()),
        meta: Metadata::new(s, hash),
        files: Vec::new(),
    };
    let summary = match s.experiment {
        Experiment::Linear => run_linear(s, &mut w)?,
        Experiment::Nonlinear => run_nonlinear(s, &mut w)?,
        Experiment::Echo => run_echo_experiment(s, &mut w)?,
        Experiment::Stability => run_stability(s, &mut w)?,
        Experiment::Moments => run_moments(s, &mut w)?,
        Experiment::Norms => run_norms(s, &mut w)?,
        Experiment::Growth => run_growth(s, &mut w)?,
    };
    Ok(RunSummary { experiment: s.experiment, files: w.files, summary })
}

fn stability_json(s: &Scenario, eq: &Equilibrium, wpot: &InteractionPotential, k: [i64; 3]) -> serde_json::Value {
    let kin = s.kinematics();
    let opts = StabilityOptions { v_te: s.solver.v_te, kappa_min: s.solver.kappa_min, sigma: None };
    let omega = default_omega_grid(k, eq, &kin, 801);
    serde_json::to_value(stability_margin(eq, wpot, k, &omega, &kin, &opts)).expect("report serializes")
}

fn run_linear(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let (eq, _) = s.equilibrium()?;
    let wpot = s.potential()?;
    let kin = s.kinematics();
    let mut columns = vec!["t".to_string()];
    let mut traces: Vec<Vec<Complex64>> = Vec::new();
    let mut t_grid = Vec::new();
    let mut modes = Vec::new();
    for p in s.perturbations()? {
        let setup = LinearSetup {
            eq,
            w: wpot,
            kin,
            profile: p.profile,
            amplitude: p.amplitude,
            dt: s.solver.dt,
            t_end: s.solver.t_end,
        };
        let sys = solve_mode(&setup, p.mode).map_err(numeric("linear_volterra", "perturbation"))?;
        let label = mode_label(p.mode);
        columns.extend([format!("re_{label}"), format!("im_{label}"), format!("abs_{label}")]);
        t_grid = sys.t_grid.clone();
        traces.push(sys.rho_of_t);
        modes.push(p.mode);
    }
    let rows: Vec<Vec<f64>> = t_grid
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = vec![*t];
            for tr in &traces {
                r.extend([tr[i].re, tr[i].im, tr[i].norm()]);
            }
            r
        })
        .collect();
    w.csv_owned("linear_rho.csv", &columns, &rows)?;
    let window = s.solver.fit_window.map(|[a, b]| (a, b)).unwrap_or((0.25 * s.solver.t_end, s.solver.t_end));
    let per_mode: Vec<serde_json::Value> = modes
        .iter()
        .zip(&traces)
        .map(|(k, tr)| {
            let fit = match fit_decay_rate(&t_grid, tr, window, s.solver.fit_period) {
                Ok(f) => serde_json::to_value(f).expect("fit serializes"),
                Err(e) => json!({ "error": e.to_string() }),
            };
            json!({ "mode": k, "fit": fit, "stability": stability_json(s, &eq, &wpot, *k) })
        })
        .collect();
    w.json("linear_summary.json", &json!({ "fit_window": [window.0, window.1], "modes": per_mode }))
}

fn run_nonlinear(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let (eq, g) = s.equilibrium()?;
    let dist = perturbed_state(&g, &eq, &s.perturbations()?).map_err(|e| invalid("perturbation", e))?;
    let out = run(dist, s.potential()?, s.kinematics(), s.solver_config()).map_err(numeric("nonlinear_vlasov", "solver"))?;
    let mut columns = vec!["t".to_string()];
    columns.extend(out.modes.iter().map(|k| format!("abs_{}", mode_label(*k))));
    columns.extend(["electric_energy", "magnetic_energy", "mass", "l2"].map(String::from));
    let rows: Vec<Vec<f64>> = out
        .diagnostics
        .iter()
        .map(|d| {
            let mut r = vec![d.t];
            r.extend(d.rho.iter().map(|c| c.norm()));
            r.extend([d.electric_energy, d.magnetic_energy, d.mass, d.l2]);
            r
        })
        .collect();
    w.csv_owned("nonlinear_diagnostics.csv", &columns, &rows)?;
    let last = out.diagnostics.last();
    w.json(
        "nonlinear_summary.json",
        &json!({
            "steps": s.solver_config().steps(),
            "warnings": out.warnings,
            "final_mass": last.map(|d| d.mass),
            "final_l2": last.map(|d| d.l2),
        }),
    )
}

fn run_echo_experiment(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let es = s.echo_scenario();
    let e = s.echo;
    let g = echo_geometry(&es, e.nv, e.lv).map_err(|err| invalid("echo", err))?;
    let tr = run_echo(&es, &g, &s.kinematics(), e.dt_out, e.t_end).map_err(numeric("echo_growth", "echo"))?;
    let rows: Vec<Vec<f64>> = tr.t.iter().zip(&tr.rho).map(|(t, r)| vec![*t, *r]).collect();
    w.csv("echo_trace.csv", &["t", "abs_rho_echo"], &rows)?;
    w.json(
        "echo_summary.json",
        &json!({
            "k1": es.k1,
            "k2": es.k2,
            "tau_pulse": es.tau_pulse,
            "echo_mode": es.echo_mode(),
            "predicted_time": tr.predicted_time,
            "peak_time": tr.peak_time,
            "peak_value": tr.peak_value,
            "dt_out": e.dt_out,
        }),
    )
}

fn run_stability(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let (eq, _) = s.equilibrium()?;
    let wpot = s.potential()?;
    let reports: Vec<serde_json::Value> =
        s.perturbations()?.iter().map(|p| stability_json(s, &eq, &wpot, p.mode)).collect();
    w.json("stability.json", &json!({ "reports": reports }))
}

fn run_moments(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let p = s.moment_params()?;
    let m = s.moments;
    let table = forward_moment_table(m.t_min, m.t_max, m.n_t, &p);
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![r.t, r.moment, r.bound_shape]).collect();
    w.csv("forward_moments.csv", &["t", "moment", "bound_shape"], &rows)?;
    let back = backward_moment(m.tau_max, m.n_tau, &p);
    let brows: Vec<Vec<f64>> = back.samples.iter().map(|(t, v)| vec![*t, *v]).collect();
    w.csv("backward_moments.csv", &["tau", "moment"], &brows)?;
    w.json(
        "moments_summary.json",
        &json!({
            "params": p,
            "forward_slope": table.slope,
            "expected_slope": -(p.gamma - 1.0),
            "backward_value": back.value,
            "backward_argmax_tau": back.argmax_tau,
            "backward_bound_shape": back.bound_shape,
            "backward_tail": back.tail,
        }),
    )
}

fn run_norms(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let rep = prop25_suite(s.seed, s.norms.samples).map_err(numeric("analytic_norms", "norms"))?;
    let rows: Vec<Vec<f64>> = rep
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| vec![i as f64, it.worst_ratio, if it.pass { 1.0 } else { 0.0 }])
        .collect();
    w.csv("norms_suite.csv", &["item_index", "worst_ratio", "pass"], &rows)?;
    w.json("norms_summary.json", &serde_json::to_value(&rep).expect("report serializes"))
}

fn run_growth(s: &Scenario, w: &mut Writer) -> RunnerResult<serde_json::Value> {
    let p = s.growth_params()?;
    let g = s.growth;
    let mut pr = GrowthProblem::new(g.a, p, g.dt, g.t_end);
    pr.c = g.c;
    pr.lambda = g.lambda;
    let rep = growth_control_solve(&pr).map_err(numeric("echo_growth", "growth"))?;
    let rows: Vec<Vec<f64>> = rep.t.iter().zip(&rep.phi).map(|(t, f)| vec![*t, *f]).collect();
    w.csv("growth_phi.csv", &["t", "phi"], &rows)?;
    w.json(
        "growth_summary.json",
        &json!({
            "slope_final_third": rep.slope,
            "eps": rep.eps,
            "envelope_constant": rep.envelope_constant,
        }),
    )
}
