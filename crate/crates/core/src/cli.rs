//! Config-driven experiment runner.
//!
//! A config is a TOML file with an `[experiment]` table and one table per module:
//!
//! ```toml
//! [experiment]
//! kind = "ensemble_bound"   # single_run | ensemble_bound | rate_sweep | es_fit | identity_suite
//! seed = 42
//! output = "out/bound"
//!
//! [problem]
//! kind = "quadratic"        # or "logistic"
//! n = 10
//! d = 5
//!
//! [sampling]
//! kind = "tau_nice"         # or "with_replacement", "independent"
//! tau = 2
//!
//! [schedule]
//! kind = ["constant", "cosine"]
//! eta_fraction = 0.5        # of 2/(L̄·max(B, 1)); or an absolute `eta`
//!
//! [run]
//! horizon = 1000
//! seeds = 50
//! ```
//!
//! Unknown keys are rejected and every parameter is validated before anything runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{
    check_bound, corollary_rate, fit_rate, write_bound_csv, write_rate_csv, BoundRow, FloorMode,
    RateRow, BOUND_CSV_HEADER, RATE_CSV_HEADER,
};
use crate::es_model::{
    detect_crossover, enumerate_minibatch_second_moment, fit_es, grad_gap_check, minibatch_es_rhs,
    samples_from_trajectory, variance_identity_check, windowed_fit, write_fit_csv, ForwardModel,
};
use crate::optimizer::{read_trajectory_csv, run_ensemble, run_sgd, RunConfig};
use crate::problems::{
    make_logistic, make_random_quadratic, FiniteSumProblem, QuadraticSpec, SpectrumLayout,
};
use crate::sampling::{
    closed_form_es, enumerate_mean_grad, enumerate_moments, enumerate_second_moment,
    exact_second_moment, scheme_moments, verify_es_pointwise, EsConstants, SamplingScheme,
};
use crate::schedules::{admissible, step_ceiling, ScheduleKind, StepSchedule};
use crate::{Error, Result, Vector};

pub const IDENTITY_CSV_HEADER: &str = "identity,scheme,problem,checks,failures,max_error";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const VIOLATION: i32 = 2;
}

/// Exit code for an error: configuration, usage and I/O problems are 1, everything else 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. }
        | Error::InvalidParameter { .. }
        | Error::Inadmissible { .. }
        | Error::EnumerationTooLarge { .. }
        | Error::Report(_)
        | Error::Io(_) => exit::CONFIG,
        _ => exit::VIOLATION,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: ExperimentSection,
    pub problem: Option<ProblemSection>,
    pub sampling: Option<SamplingSection>,
    pub schedule: Option<ScheduleSection>,
    pub run: Option<RunSection>,
    pub es_fit: Option<EsFitSection>,
    pub identity: Option<IdentitySection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: String,
    pub seed: u64,
    pub output: PathBuf,
    /// Label used in report rows; defaults to the problem kind.
    pub name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: String,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_spectrum")]
    pub spectrum: [f64; 2],
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    #[serde(default)]
    pub rotate: bool,
    /// `uniform` or `log_stratified`.
    #[serde(default = "default_layout")]
    pub layout: String,
    /// Ridge coefficient for logistic problems.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Data seed; the experiment seed when absent.
    pub seed: Option<u64>,
}

fn default_spectrum() -> [f64; 2] {
    [0.5, 2.0]
}
fn default_heterogeneity() -> f64 {
    1.0
}
fn default_layout() -> String {
    "uniform".into()
}
fn default_lambda() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub kind: String,
    pub tau: Option<usize>,
    /// With-replacement probabilities; uniform when absent.
    pub q: Option<Vec<f64>>,
    /// Independent inclusion probabilities.
    pub p: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn items(&self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: OneOrMany,
    pub eta: Option<f64>,
    pub eta_fraction: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: Option<usize>,
    pub horizons: Option<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub probe_every: usize,
    #[serde(default)]
    pub probe_draws: usize,
    /// `ones` or `balanced`.
    #[serde(default = "default_start")]
    pub start: String,
}

fn default_seeds() -> usize {
    1
}
fn default_start() -> String {
    "ones".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsFitSection {
    /// `forward_model` or `trajectory`.
    pub source: String,
    pub window: usize,
    pub stride: usize,
    pub before: Option<[f64; 3]>,
    pub after: Option<[f64; 3]>,
    pub switch_step: Option<usize>,
    pub length: Option<usize>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub use_exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitySection {
    #[serde(default = "default_identity_n")]
    pub n: usize,
    #[serde(default = "default_identity_d")]
    pub d: usize,
    #[serde(default = "default_identity_tau")]
    pub tau: usize,
    #[serde(default = "default_identity_points")]
    pub points: usize,
}

fn default_identity_n() -> usize {
    4
}
fn default_identity_d() -> usize {
    3
}
fn default_identity_tau() -> usize {
    2
}
fn default_identity_points() -> usize {
    20
}

impl Default for IdentitySection {
    fn default() -> Self {
        Self {
            n: default_identity_n(),
            d: default_identity_d(),
            tau: default_identity_tau(),
            points: default_identity_points(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    SingleRun,
    EnsembleBound,
    RateSweep,
    EsFit,
    IdentitySuite,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "single_run" => Self::SingleRun,
            "ensemble_bound" => Self::EnsembleBound,
            "rate_sweep" => Self::RateSweep,
            "es_fit" => Self::EsFit,
            "identity_suite" => Self::IdentitySuite,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SingleRun => "single_run",
            Self::EnsembleBound => "ensemble_bound",
            Self::RateSweep => "rate_sweep",
            Self::EsFit => "es_fit",
            Self::IdentitySuite => "identity_suite",
        }
    }
}

/// A schedule with its base step size resolved; cosine horizons are set per run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta: f64,
    pub alpha: Option<f64>,
}

impl ScheduleSpec {
    pub fn build(&self, horizon: usize) -> Result<StepSchedule> {
        match self.kind {
            ScheduleKind::Constant => StepSchedule::constant(self.eta),
            ScheduleKind::Harmonic => StepSchedule::harmonic(self.eta),
            ScheduleKind::Polynomial => StepSchedule::polynomial(
                self.eta,
                self.alpha.ok_or_else(|| {
                    Error::invalid("alpha", "required for the polynomial schedule")
                })?,
            ),
            ScheduleKind::Cosine => StepSchedule::cosine(self.eta, horizon),
        }
    }
}

/// A parsed and fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub path: PathBuf,
    pub source: String,
    pub raw: RawConfig,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output: PathBuf,
    pub label: String,
    pub problem: Option<FiniteSumProblem>,
    pub scheme: Option<SamplingScheme>,
    pub schedules: Vec<ScheduleSpec>,
    pub x0: Option<Vector>,
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let source = fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        message: format!("cannot read file: {e}"),
    })?;
    parse_config_str(&source, path)
}

/// Parses config text; `path` is only used for messages and the manifest.
pub fn parse_config_str(source: &str, path: &Path) -> Result<ExperimentConfig> {
    let cfg_err = |message: String| Error::Config {
        path: path.display().to_string(),
        message,
    };
    let raw: RawConfig =
        toml::from_str(source).map_err(|e| cfg_err(e.to_string().trim_end().to_owned()))?;
    build_config(raw, source, path).map_err(|e| match e {
        Error::Config { .. } => e,
        other => cfg_err(other.to_string()),
    })
}

fn require<'a, T>(section: &'a Option<T>, name: &str, kind: ExperimentKind) -> Result<&'a T> {
    section.as_ref().ok_or_else(|| {
        Error::invalid(
            name,
            format!("section [{name}] is required for {}", kind.name()),
        )
    })
}

fn build_problem(p: &ProblemSection, seed: u64) -> Result<FiniteSumProblem> {
    let seed = p.seed.unwrap_or(seed);
    match p.kind.as_str() {
        "quadratic" => {
            let layout = match p.layout.as_str() {
                "uniform" => SpectrumLayout::Uniform,
                "log_stratified" => SpectrumLayout::LogStratified,
                other => {
                    return Err(Error::invalid(
                        "layout",
                        format!("expected `uniform` or `log_stratified`, got `{other}`"),
                    ))
                }
            };
            let mut spec = QuadraticSpec::new(
                p.n,
                p.d,
                (p.spectrum[0], p.spectrum[1]),
                p.heterogeneity,
                seed,
            )
            .with_layout(layout);
            if p.rotate {
                spec = spec.rotated();
            }
            make_random_quadratic(&spec)
        }
        "logistic" => make_logistic(p.n, p.d, p.lambda, seed),
        other => Err(Error::invalid(
            "kind",
            format!("problem kind must be `quadratic` or `logistic`, got `{other}`"),
        )),
    }
}

fn build_scheme(s: &SamplingSection, n: usize) -> Result<SamplingScheme> {
    let scheme = match s.kind.as_str() {
        "tau_nice" => SamplingScheme::tau_nice(
            n,
            s.tau
                .ok_or_else(|| Error::invalid("tau", "required for tau_nice"))?,
        )?,
        "with_replacement" => {
            let tau = s.tau.unwrap_or(1);
            match &s.q {
                Some(q) => SamplingScheme::with_replacement(tau, q.clone())?,
                None => SamplingScheme::uniform_with_replacement(n, tau)?,
            }
        }
        "independent" => SamplingScheme::independent(
            s.p.clone()
                .ok_or_else(|| Error::invalid("p", "required for independent sampling"))?,
        )?,
        other => return Err(Error::invalid(
            "kind",
            format!(
                "sampling kind must be tau_nice, with_replacement or independent, got `{other}`"
            ),
        )),
    };
    if scheme.n() != n {
        let field = if s.kind == "independent" { "p" } else { "q" };
        return Err(Error::invalid(
            field,
            format!("has {} entries but the problem has n = {n}", scheme.n()),
        ));
    }
    Ok(scheme)
}

fn build_config(raw: RawConfig, source: &str, path: &Path) -> Result<ExperimentConfig> {
    let kind = ExperimentKind::parse(&raw.experiment.kind).ok_or_else(|| {
        Error::invalid(
            "kind",
            format!(
                "experiment kind must be one of single_run, ensemble_bound, rate_sweep, es_fit, identity_suite; got `{}`",
                raw.experiment.kind
            ),
        )
    })?;
    let seed = raw.experiment.seed;
    let needs_sgd = match kind {
        ExperimentKind::SingleRun | ExperimentKind::EnsembleBound | ExperimentKind::RateSweep => {
            true
        }
        ExperimentKind::EsFit => {
            let fit = require(&raw.es_fit, "es_fit", kind)?;
            fit.source == "trajectory"
        }
        ExperimentKind::IdentitySuite => false,
    };

    let mut problem = None;
    let mut scheme = None;
    let mut schedules = Vec::new();
    let mut x0 = None;
    if needs_sgd {
        let p = build_problem(require(&raw.problem, "problem", kind)?, seed)?;
        let s = build_scheme(require(&raw.sampling, "sampling", kind)?, p.n())?;
        let sched = require(&raw.schedule, "schedule", kind)?;
        let run = require(&raw.run, "run", kind)?;
        let es = closed_form_es(&s, &p)?;
        let eta = match (sched.eta, sched.eta_fraction) {
            (Some(e), None) => e,
            (None, Some(fr)) => {
                if !(fr > 0.0 && fr < 1.0) {
                    return Err(Error::invalid(
                        "eta_fraction",
                        format!("must lie in (0, 1), got {fr}"),
                    ));
                }
                fr * step_ceiling(p.l_bar(), es.b.max(1.0))
            }
            _ => {
                return Err(Error::invalid(
                    "eta",
                    "give exactly one of `eta` and `eta_fraction`",
                ))
            }
        };
        let kinds = sched.kind.items();
        if kinds.is_empty() {
            return Err(Error::invalid("kind", "schedule list is empty"));
        }
        for name in kinds {
            let k = ScheduleKind::parse(&name).ok_or_else(|| {
                Error::invalid(
                    "kind",
                    format!("schedule kind must be constant, harmonic, polynomial or cosine, got `{name}`"),
                )
            })?;
            let spec = ScheduleSpec {
                kind: k,
                eta,
                alpha: sched.alpha,
            };
            // validates eta and alpha
            let built = spec.build(1)?;
            if kind == ExperimentKind::EnsembleBound && !admissible(&built, p.l_bar(), es.b) {
                return Err(Error::Inadmissible {
                    eta_max: eta,
                    ceiling: step_ceiling(p.l_bar(), es.b),
                });
            }
            schedules.push(spec);
        }
        if kind == ExperimentKind::SingleRun && schedules.len() != 1 {
            return Err(Error::invalid(
                "kind",
                "single_run takes exactly one schedule",
            ));
        }
        x0 = match run.start.as_str() {
            "ones" => None,
            "balanced" => Some(p.balanced_start().ok_or_else(|| {
                Error::invalid(
                    "start",
                    "`balanced` is only available for quadratic problems",
                )
            })?),
            other => {
                return Err(Error::invalid(
                    "start",
                    format!("expected `ones` or `balanced`, got `{other}`"),
                ))
            }
        };
        let probe_cfg = RunConfig::new(run.horizon.unwrap_or(1), seed)
            .with_probes(run.probe_every, run.probe_draws);
        probe_cfg.validate(p.d())?;
        match kind {
            ExperimentKind::RateSweep => {
                let ks = run
                    .horizons
                    .as_ref()
                    .ok_or_else(|| Error::invalid("horizons", "rate_sweep needs a K grid"))?;
                if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid(
                        "horizons",
                        "must be positive and strictly increasing",
                    ));
                }
                if ks.len() < 4 || (ks[ks.len() - 1] as f64 / ks[0] as f64).log10() < 1.5 - 1e-12 {
                    return Err(Error::invalid(
                        "horizons",
                        "need at least 4 horizons spanning at least 1.5 decades",
                    ));
                }
                if run.seeds < 2 {
                    return Err(Error::invalid("seeds", "an ensemble needs at least 2 runs"));
                }
            }
            _ => {
                if run.horizon.unwrap_or(0) == 0 {
                    return Err(Error::invalid("horizon", "must be >= 1"));
                }
                if kind == ExperimentKind::EnsembleBound && run.seeds < 2 {
                    return Err(Error::invalid("seeds", "an ensemble needs at least 2 runs"));
                }
                if kind == ExperimentKind::EsFit && run.probe_every == 0 {
                    return Err(Error::invalid("probe_every", "trajectory fits need probes"));
                }
            }
        }
        problem = Some(p);
        scheme = Some(s);
    }

    match kind {
        ExperimentKind::EsFit => {
            let fit = require(&raw.es_fit, "es_fit", kind)?;
            if fit.window < 3 {
                return Err(Error::invalid("window", "must be >= 3"));
            }
            if fit.stride == 0 {
                return Err(Error::invalid("stride", "must be >= 1"));
            }
            match fit.source.as_str() {
                "trajectory" => {}
                "forward_model" => {
                    let before = fit
                        .before
                        .ok_or_else(|| Error::invalid("before", "forward model needs `before`"))?;
                    let after = fit.after.unwrap_or(before);
                    if before
                        .iter()
                        .chain(after.iter())
                        .any(|v| !(*v >= 0.0) || !v.is_finite())
                    {
                        return Err(Error::invalid(
                            "before",
                            "coefficients must be finite and >= 0",
                        ));
                    }
                    let length = fit
                        .length
                        .ok_or_else(|| Error::invalid("length", "forward model needs `length`"))?;
                    if length < fit.window {
                        return Err(Error::invalid("length", "shorter than the window"));
                    }
                    if !(fit.noise >= 0.0 && fit.noise < 1.0) {
                        return Err(Error::invalid("noise", "must lie in [0, 1)"));
                    }
                }
                other => {
                    return Err(Error::invalid(
                        "source",
                        format!("expected `forward_model` or `trajectory`, got `{other}`"),
                    ))
                }
            }
        }
        ExperimentKind::IdentitySuite => {
            let id = raw.identity.clone().unwrap_or_default();
            if id.n < 2 || id.n > 6 {
                return Err(Error::invalid("n", "identity suite needs 2 <= n <= 6"));
            }
            if id.tau == 0 || id.tau > id.n {
                return Err(Error::invalid(
                    "tau",
                    format!("need 1 <= tau <= n = {}", id.n),
                ));
            }
            if id.points == 0 || id.d == 0 {
                return Err(Error::invalid("points", "points and d must be >= 1"));
            }
        }
        _ => {}
    }

    let label = raw
        .experiment
        .name
        .clone()
        .or_else(|| raw.problem.as_ref().map(|p| p.kind.clone()))
        .unwrap_or_else(|| kind.name().to_owned());
    Ok(ExperimentConfig {
        path: path.to_path_buf(),
        source: source.to_owned(),
        output: raw.experiment.output.clone(),
        raw,
        kind,
        seed,
        label,
        problem,
        scheme,
        schedules,
        x0,
    })
}

/// Files written by a run and the number of failed checks.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub violations: usize,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.violations > 0 {
            exit::VIOLATION
        } else {
            exit::OK
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    experiment: &'a str,
    seed: u64,
    config_path: String,
    created_unix: u64,
    files: Vec<String>,
    config: &'a str,
    summary: BTreeMap<String, String>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs a validated experiment, writing reports and `manifest.toml` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    fs::create_dir_all(&cfg.output)?;
    let mut summary = BTreeMap::new();
    let mut outcome = match cfg.kind {
        ExperimentKind::SingleRun => single_run(cfg, &mut summary)?,
        ExperimentKind::EnsembleBound => ensemble_bound(cfg, &mut summary)?,
        ExperimentKind::RateSweep => rate_sweep(cfg, &mut summary)?,
        ExperimentKind::EsFit => es_fit(cfg, &mut summary)?,
        ExperimentKind::IdentitySuite => identity_suite(cfg, &mut summary)?,
    };
    summary.insert("violations".into(), outcome.violations.to_string());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.kind.name(),
        seed: cfg.seed,
        config_path: cfg.path.display().to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        files: outcome
            .files
            .iter()
            .filter_map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
        config: &cfg.source,
        summary,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Report(e.to_string()))?;
    let path = cfg.output.join("manifest.toml");
    fs::write(&path, text)?;
    outcome.files.push(path);
    Ok(outcome)
}

fn sgd_parts(cfg: &ExperimentConfig) -> (&FiniteSumProblem, &SamplingScheme, &RunSection) {
    (
        cfg.problem.as_ref().expect("validated"),
        cfg.scheme.as_ref().expect("validated"),
        cfg.raw.run.as_ref().expect("validated"),
    )
}

fn run_config(cfg: &ExperimentConfig, horizon: usize) -> RunConfig {
    let mut rc = RunConfig::new(horizon, cfg.seed);
    if let Some(x0) = &cfg.x0 {
        rc = rc.with_start(x0.clone());
    }
    rc
}

fn single_run(
    cfg: &ExperimentConfig,
    summary: &mut BTreeMap<String, String>,
) -> Result<RunOutcome> {
    let (problem, scheme, run) = sgd_parts(cfg);
    let horizon = run.horizon.expect("validated");
    let schedule = cfg.schedules[0].build(horizon)?;
    let rc = run_config(cfg, horizon).with_probes(run.probe_every, run.probe_draws);
    let traj = run_sgd(problem, scheme, &schedule, &rc)?;
    let path = cfg.output.join("trajectory.csv");
    let mut out = create(&path)?;
    traj.write_csv(&mut out)?;
    out.flush()?;
    let last = traj.steps.last().expect("at least one step");
    summary.insert("final_subopt".into(), format!("{:e}", last.f - traj.f_star));
    summary.insert(
        "min_grad_norm_sq".into(),
        format!("{:e}", traj.min_grad_norm_sq()),
    );
    summary.insert("diverged".into(), traj.diverged.to_string());
    Ok(RunOutcome {
        files: vec![path],
        violations: 0,
        lines: vec![format!(
            "{} steps, final f - f* = {:e}, min |grad|^2 = {:e}{}",
            traj.steps.len() - 1,
            last.f - traj.f_star,
            traj.min_grad_norm_sq(),
            if traj.diverged { " (diverged)" } else { "" }
        )],
    })
}

fn ensemble_bound(
    cfg: &ExperimentConfig,
    summary: &mut BTreeMap<String, String>,
) -> Result<RunOutcome> {
    let (problem, scheme, run) = sgd_parts(cfg);
    let horizon = run.horizon.expect("validated");
    let es = closed_form_es(scheme, problem)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for spec in &cfg.schedules {
        let schedule = spec.build(horizon)?;
        let ens = run_ensemble(
            problem,
            scheme,
            &schedule,
            &run_config(cfg, horizon),
            run.seeds,
        )?;
        let report = check_bound(
            &ens,
            &es,
            problem.l_bar(),
            &schedule,
            horizon,
            problem.infimum_slack(),
        )?;
        lines.push(format!(
            "{:<10} lhs {:.4e}  rhs {:.4e}  {}",
            spec.kind.name(),
            report.lhs,
            report.rhs_total,
            if report.holds { "holds" } else { "VIOLATED" }
        ));
        rows.push(BoundRow {
            problem: cfg.label.clone(),
            scheme: scheme.kind_name().to_owned(),
            schedule: spec.kind.name().to_owned(),
            eta: spec.eta,
            report,
        });
    }
    let violations = rows.iter().filter(|r| !r.report.holds).count();
    let path = cfg.output.join("bounds.csv");
    let mut out = create(&path)?;
    write_bound_csv(&rows, &mut out)?;
    out.flush()?;
    summary.insert("cells".into(), rows.len().to_string());
    Ok(RunOutcome {
        files: vec![path],
        violations,
        lines,
    })
}

fn rate_sweep(
    cfg: &ExperimentConfig,
    summary: &mut BTreeMap<String, String>,
) -> Result<RunOutcome> {
    let (problem, scheme, run) = sgd_parts(cfg);
    let ks = run.horizons.clone().expect("validated");
    let k_max = *ks.last().expect("validated");
    let es = closed_form_es(scheme, problem)?;
    let mut rate_rows = Vec::new();
    let mut bound_rows = Vec::new();
    let mut lines = Vec::new();
    for spec in &cfg.schedules {
        let mut curve = Vec::with_capacity(ks.len());
        let mut push_bound = |ens: &crate::optimizer::EnsembleTrajectory,
                              schedule: &StepSchedule,
                              k: usize|
         -> Result<f64> {
            let report = check_bound(
                ens,
                &es,
                problem.l_bar(),
                schedule,
                k,
                problem.infimum_slack(),
            )?;
            bound_rows.push(BoundRow {
                problem: cfg.label.clone(),
                scheme: scheme.kind_name().to_owned(),
                schedule: spec.kind.name().to_owned(),
                eta: spec.eta,
                report,
            });
            Ok(report.lhs)
        };
        if spec.kind == ScheduleKind::Cosine {
            for &k in &ks {
                let schedule = spec.build(k)?;
                let ens = run_ensemble(problem, scheme, &schedule, &run_config(cfg, k), run.seeds)?;
                curve.push((k as f64, push_bound(&ens, &schedule, k)?));
            }
        } else {
            let schedule = spec.build(k_max)?;
            let ens = run_ensemble(
                problem,
                scheme,
                &schedule,
                &run_config(cfg, k_max),
                run.seeds,
            )?;
            for &k in &ks {
                curve.push((k as f64, push_bound(&ens, &schedule, k)?));
            }
        }
        let prediction = corollary_rate(spec.kind, spec.alpha)?;
        let floor = if prediction.floor {
            FloorMode::TailMean
        } else {
            FloorMode::None
        };
        let slope = fit_rate(&curve, floor).map(|f| f.slope).unwrap_or(f64::NAN);
        lines.push(format!(
            "{:<10} fitted slope {:>8.4}  predicted {}",
            spec.kind.name(),
            slope,
            prediction
                .forms
                .iter()
                .map(|f| format!(
                    "{} ({:.3})",
                    f.label(),
                    f.local_slope(ks[0] as f64, k_max as f64)
                ))
                .collect::<Vec<_>>()
                .join(" or ")
        ));
        summary.insert(format!("slope_{}", spec.kind.name()), format!("{slope:e}"));
        for (k, v) in &curve {
            rate_rows.push(RateRow {
                schedule: spec.kind.name().to_owned(),
                k: *k as usize,
                min_grad: *v,
                fitted_slope: slope,
                predicted_exponent: prediction.exponent(),
            });
        }
    }
    let rates = cfg.output.join("rates.csv");
    let mut out = create(&rates)?;
    write_rate_csv(&rate_rows, &mut out)?;
    out.flush()?;
    let bounds = cfg.output.join("bounds.csv");
    let mut out = create(&bounds)?;
    write_bound_csv(&bound_rows, &mut out)?;
    out.flush()?;
    Ok(RunOutcome {
        files: vec![rates, bounds],
        violations: bound_rows.iter().filter(|r| !r.report.holds).count(),
        lines,
    })
}

fn es_fit(cfg: &ExperimentConfig, summary: &mut BTreeMap<String, String>) -> Result<RunOutcome> {
    let fit_cfg = cfg.raw.es_fit.as_ref().expect("validated");
    let mut files = Vec::new();
    let samples = if fit_cfg.source == "forward_model" {
        let before = fit_cfg.before.expect("validated");
        let after = fit_cfg.after.unwrap_or(before);
        let length = fit_cfg.length.expect("validated");
        ForwardModel {
            before: EsConstants::new(before[0], before[1], before[2]),
            after: EsConstants::new(after[0], after[1], after[2]),
            switch_step: fit_cfg.switch_step.unwrap_or(length),
            length,
            noise: fit_cfg.noise,
            seed: cfg.seed,
        }
        .samples()
    } else {
        let (problem, scheme, run) = sgd_parts(cfg);
        let horizon = run.horizon.expect("validated");
        let schedule = cfg.schedules[0].build(horizon)?;
        let rc = run_config(cfg, horizon).with_probes(run.probe_every, run.probe_draws);
        let traj = run_sgd(problem, scheme, &schedule, &rc)?;
        let path = cfg.output.join("trajectory.csv");
        let mut out = create(&path)?;
        traj.write_csv(&mut out)?;
        out.flush()?;
        files.push(path.clone());
        let rows = read_trajectory_csv(File::open(&path)?)?;
        samples_from_trajectory(&rows, problem.f_star(), fit_cfg.use_exact)
    };
    let fits = windowed_fit(&samples, fit_cfg.window, fit_cfg.stride)?;
    let path = cfg.output.join("es_fit.csv");
    let mut out = create(&path)?;
    write_fit_csv(&fits, &mut out)?;
    out.flush()?;
    files.push(path);

    let overall = fit_es(&samples)?;
    let mut lines = vec![format!(
        "{} windows; whole-trajectory fit A {:.4e} B {:.4e} C {:.4e} (r2 {:.4})",
        fits.len(),
        overall.a_hat,
        overall.b_hat,
        overall.c_hat,
        overall.r_squared
    )];
    summary.insert("windows".into(), fits.len().to_string());
    match detect_crossover(&fits, fit_cfg.window) {
        Some(c) => {
            lines.push(format!(
                "crossover at window {} (sample {:.0}): A {:.3} -> {:.3}, B {:.3} -> {:.3}",
                c.window_index, c.center, c.a_before, c.a_after, c.b_before, c.b_after
            ));
            summary.insert("crossover_center".into(), format!("{}", c.center));
            summary.insert("crossover_window_start".into(), c.window_start.to_string());
        }
        None => {
            lines.push("no crossover detected".into());
            summary.insert("crossover_center".into(), "none".into());
        }
    }
    Ok(RunOutcome {
        files,
        violations: 0,
        lines,
    })
}

/// Aggregated result of one identity over a set of probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRow {
    pub identity: &'static str,
    pub scheme: String,
    pub problem: String,
    pub checks: usize,
    pub failures: usize,
    /// Relative error for equalities; relative excess `(lhs − rhs)/(1 + |rhs|)` for inequalities.
    pub max_error: f64,
}

impl IdentityRow {
    fn new(identity: &'static str, scheme: &SamplingScheme, problem: &str) -> Self {
        Self {
            identity,
            scheme: scheme.kind_name().to_owned(),
            problem: problem.to_owned(),
            checks: 0,
            failures: 0,
            max_error: f64::NEG_INFINITY,
        }
    }

    fn record(&mut self, error: f64, ok: bool) {
        self.checks += 1;
        self.failures += usize::from(!ok);
        self.max_error = self.max_error.max(error);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Every enumeration identity for the three schemes on a quadratic and a logistic problem.
pub fn identity_table(section: &IdentitySection, seed: u64) -> Result<Vec<IdentityRow>> {
    let n = section.n;
    let weights: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let total: f64 = weights.iter().sum();
    let q: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let p: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.6 * i as f64 / (n - 1) as f64)
        .collect();
    let schemes = [
        SamplingScheme::tau_nice(n, section.tau)?,
        SamplingScheme::with_replacement(section.tau, q)?,
        SamplingScheme::independent(p)?,
    ];
    let problems = [
        (
            "quadratic",
            make_random_quadratic(
                &QuadraticSpec::new(n, section.d, (0.5, 3.0), 1.0, seed).rotated(),
            )?,
        ),
        ("logistic", make_logistic(n, section.d, 0.1, seed)?),
    ];

    let mut rows = Vec::new();
    for scheme in &schemes {
        let closed = scheme_moments(scheme);
        let en = enumerate_moments(scheme)?;
        let mut row = IdentityRow::new("moments", scheme, "-");
        row.record(
            (en.total_probability - 1.0).abs(),
            (en.total_probability - 1.0).abs() <= 1e-12,
        );
        for i in 0..n {
            let e1 = (en.e_v[i] - 1.0).abs();
            row.record(e1, e1 <= 1e-12);
            let e2 = rel(en.e_v2[i], closed.e_v2[i]);
            row.record(e2, e2 <= 1e-12);
            if let Some(pair) = closed.e_vivj {
                for j in (0..n).filter(|j| *j != i) {
                    let e = rel(en.e_vivj[i][j], pair);
                    row.record(e, e <= 1e-12);
                }
            }
        }
        rows.push(row);

        for (name, problem) in &problems {
            let es = closed_form_es(scheme, problem)?;
            let mut unbiased = IdentityRow::new("unbiased", scheme, name);
            let mut second = IdentityRow::new("second_moment", scheme, name);
            let mut ineq = IdentityRow::new("es_inequality", scheme, name);
            let mut var = IdentityRow::new("variance_identity", scheme, name);
            let mut gap = IdentityRow::new("gradient_gap", scheme, name);
            let mut mini = IdentityRow::new("minibatch_es", scheme, name);
            for x in problem.sample_points(section.points, 1.5, seed ^ 0x5eed) {
                let g = problem.grad_full(&x)?;
                let mean = enumerate_mean_grad(problem, scheme, &x)?;
                let e = (mean - &g).amax() / g.amax().max(1.0);
                unbiased.record(e, e <= 1e-12);

                let exact = exact_second_moment(problem, scheme, &x)?;
                let brute = enumerate_second_moment(problem, scheme, &x)?;
                let e = rel(exact, brute);
                second.record(e, e <= 1e-12);

                let c = verify_es_pointwise(problem, scheme, &x)?;
                ineq.record((c.lhs - c.rhs) / (1.0 + c.rhs.abs()), c.holds);

                let v = variance_identity_check(problem, scheme, &x)?;
                var.record(v.relative_diff(), v.relative_diff() <= 1e-12);

                let gc = grad_gap_check(problem, &x)?;
                gap.record((gc.lhs - gc.rhs) / (1.0 + gc.rhs.abs()), gc.holds);

                let subopt = problem.eval_full(&x)? - problem.f_star();
                let gsq = g.norm_squared();
                for tau in 1..=2 {
                    let lhs = enumerate_minibatch_second_moment(problem, scheme, tau, &x)?;
                    let rhs = minibatch_es_rhs(&es, tau, subopt, gsq);
                    let excess = (lhs - rhs) / (1.0 + rhs.abs());
                    mini.record(
                        excess,
                        lhs <= rhs + 1e-9 * (1.0 + rhs.abs()) + problem.infimum_slack(),
                    );
                }
            }
            rows.extend([unbiased, second, ineq, var, gap, mini]);
        }
    }
    Ok(rows)
}

pub fn write_identity_csv<W: Write>(rows: &[IdentityRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{IDENTITY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:e}",
            r.identity, r.scheme, r.problem, r.checks, r.failures, r.max_error
        )?;
    }
    Ok(())
}

fn identity_suite(
    cfg: &ExperimentConfig,
    summary: &mut BTreeMap<String, String>,
) -> Result<RunOutcome> {
    let section = cfg.raw.identity.clone().unwrap_or_default();
    let rows = identity_table(&section, cfg.seed)?;
    let path = cfg.output.join("identities.csv");
    let mut out = create(&path)?;
    write_identity_csv(&rows, &mut out)?;
    out.flush()?;
    let checks: usize = rows.iter().map(|r| r.checks).sum();
    let failures: usize = rows.iter().map(|r| r.failures).sum();
    summary.insert("checks".into(), checks.to_string());
    let mut lines: Vec<String> = rows
        .iter()
        .filter(|r| r.failures > 0)
        .map(|r| {
            format!(
                "FAIL {} / {} / {}: {} of {}",
                r.identity, r.scheme, r.problem, r.failures, r.checks
            )
        })
        .collect();
    lines.push(format!("{checks} checks, {failures} failures"));
    Ok(RunOutcome {
        files: vec![path],
        violations: failures,
        lines,
    })
}

#[derive(Debug, Deserialize)]
struct BoundCsvRow {
    schedule: String,
    holds: bool,
}

#[derive(Debug, Deserialize)]
struct RateCsvRow {
    schedule: String,
    fitted_slope: f64,
    predicted_exponent: f64,
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub schedule: String,
    pub predicted_exponent: Option<f64>,
    pub fitted_slope: Option<f64>,
    pub holds: usize,
    pub cells: usize,
}

impl SummaryRow {
    pub fn holds_fraction(&self) -> Option<f64> {
        (self.cells > 0).then(|| self.holds as f64 / self.cells as f64)
    }
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_csvs(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn summary_entry<'a>(
    table: &'a mut BTreeMap<ScheduleKind, SummaryRow>,
    path: &Path,
    schedule: &str,
) -> Result<&'a mut SummaryRow> {
    let kind = ScheduleKind::parse(schedule).ok_or_else(|| {
        Error::Report(format!("{}: unknown schedule `{schedule}`", path.display()))
    })?;
    Ok(table.entry(kind).or_insert_with(|| SummaryRow {
        schedule: schedule.to_owned(),
        predicted_exponent: None,
        fitted_slope: None,
        holds: 0,
        cells: 0,
    }))
}

/// Aggregates every bound and rate report under `dir` (recursively) by schedule.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    if !dir.is_dir() {
        return Err(Error::Report(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut files = Vec::new();
    collect_csvs(dir, &mut files)?;
    let mut table: BTreeMap<ScheduleKind, SummaryRow> = BTreeMap::new();
    let mut found = false;
    for path in files {
        let first = fs::read_to_string(&path)?
            .lines()
            .next()
            .unwrap_or("")
            .to_owned();
        if first == BOUND_CSV_HEADER {
            found = true;
            for rec in csv::Reader::from_path(&path)?.deserialize() {
                let r: BoundCsvRow = rec?;
                let row = summary_entry(&mut table, &path, &r.schedule)?;
                row.cells += 1;
                row.holds += usize::from(r.holds);
            }
        } else if first == RATE_CSV_HEADER {
            found = true;
            for rec in csv::Reader::from_path(&path)?.deserialize() {
                let r: RateCsvRow = rec?;
                let row = summary_entry(&mut table, &path, &r.schedule)?;
                row.predicted_exponent.get_or_insert(r.predicted_exponent);
                row.fitted_slope.get_or_insert(r.fitted_slope);
            }
        }
    }
    if !found {
        return Err(Error::Report(format!(
            "no bound or rate reports (bounds.csv / rates.csv) found under {}",
            dir.display()
        )));
    }
    Ok(table.into_values().collect())
}

/// Plain-text table: schedule, predicted exponent, fitted slope, fraction of bound cells holding.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_owned(), |x| format!("{x:.prec$}"));
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:>12}{:>14}{:>10}",
        "schedule", "predicted", "fitted_slope", "holds"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12}{:>12}{:>14}{:>10}",
            r.schedule,
            opt(r.predicted_exponent, 3),
            opt(r.fitted_slope, 4),
            opt(r.holds_fraction(), 3)
        );
    }
    s
}
