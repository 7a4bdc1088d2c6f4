//! Seeded SGD and mini-batch SGD runs, second-moment probes and seed ensembles.
//!
//! Runs are deterministic in `(problem, scheme, schedule, config)`. The update stream and the
//! probe stream are separate ChaCha streams of the same seed, so turning probes on or off
//! never changes the optimisation path.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::problems::FiniteSumProblem;
use crate::sampling::{
    add_stochastic_grad, closed_form_es, derive_rng, exact_second_moment, EsConstants,
    SamplingScheme,
};
use crate::schedules::{admissible, StepSchedule};
use crate::stats::mean_and_se;
use crate::{Error, Result, Vector};

/// Runs are cut off once `f_k` exceeds this multiple of `1 + |f_0|`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

/// Header of the trajectory CSV export.
pub const TRAJECTORY_CSV_HEADER: &str =
    "k,f,grad_norm_sq,eta,second_moment_hat,second_moment_se,exact_second_moment";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Number of SGD steps `K`; `K + 1` iterates are recorded.
    pub horizon: usize,
    pub seed: u64,
    /// Probe cadence; 0 disables probing.
    pub probe_every: usize,
    /// Fresh sampling vectors per probe (≥ 2 when probing).
    pub probe_draws: usize,
    pub record_iterates: bool,
    /// Start point; the all-ones vector when absent.
    pub x0: Option<Vector>,
}

impl RunConfig {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            probe_every: 0,
            probe_draws: 0,
            record_iterates: false,
            x0: None,
        }
    }

    pub fn with_probes(mut self, every: usize, draws: usize) -> Self {
        self.probe_every = every;
        self.probe_draws = draws;
        self
    }

    pub fn with_start(mut self, x0: Vector) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be >= 1"));
        }
        if self.probe_every > 0 && self.probe_draws < 2 {
            return Err(Error::invalid(
                "probe_draws",
                "need at least 2 draws per probe",
            ));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: x0.len(),
                });
            }
        }
        Ok(())
    }
}

/// Mini-batch sizes `τ_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchSchedule {
    Constant(usize),
    /// One entry per step; must cover the whole horizon.
    Explicit(Vec<usize>),
    /// `τ_k = ⌊initial · factor^k⌋`, capped at `max`.
    Geometric {
        initial: usize,
        factor: f64,
        max: usize,
    },
}

impl Default for BatchSchedule {
    fn default() -> Self {
        BatchSchedule::Constant(1)
    }
}

impl BatchSchedule {
    pub fn tau_at(&self, k: usize) -> usize {
        match self {
            BatchSchedule::Constant(t) => *t,
            BatchSchedule::Explicit(ts) => ts[k.min(ts.len() - 1)],
            BatchSchedule::Geometric {
                initial,
                factor,
                max,
            } => {
                let t = *initial as f64 * factor.powi(k.min(i32::MAX as usize) as i32);
                if t >= *max as f64 {
                    *max
                } else {
                    (t.floor() as usize).max(1)
                }
            }
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        match self {
            BatchSchedule::Constant(t) if *t == 0 => {
                Err(Error::invalid("batch", "batch sizes must be >= 1"))
            }
            BatchSchedule::Explicit(ts) if ts.contains(&0) => {
                Err(Error::invalid("batch", "batch sizes must be >= 1"))
            }
            BatchSchedule::Explicit(ts) if ts.len() < horizon => Err(Error::invalid(
                "batch",
                format!(
                    "explicit list has {} entries, horizon is {horizon}",
                    ts.len()
                ),
            )),
            BatchSchedule::Geometric {
                initial,
                factor,
                max,
            } if *initial == 0 || !(*factor >= 1.0) || max < initial => Err(Error::invalid(
                "batch",
                "geometric growth needs initial >= 1, factor >= 1, max >= initial",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub f: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRecord {
    pub k: usize,
    pub tau: usize,
    pub second_moment_hat: f64,
    pub second_moment_se: f64,
    pub exact_second_moment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
    pub final_x: Option<Vector>,
    pub iterates: Option<Vec<Vector>>,
    pub diverged: bool,
    /// Whether the schedule satisfied `η_max < 2/(L̄B)` for the scheme's closed-form `B`.
    pub admissible: bool,
    pub f_star: f64,
}

impl Trajectory {
    /// `min_k ‖∇f(x_k)‖²` over the recorded steps.
    pub fn min_grad_norm_sq(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.grad_norm_sq)
            .fold(f64::INFINITY, f64::min)
    }

    /// Writes the trajectory CSV; probe columns are empty on non-probe steps.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
        let mut probes = self.probes.iter().peekable();
        for s in &self.steps {
            write!(out, "{},{:e},{:e},{:e}", s.k, s.f, s.grad_norm_sq, s.eta)?;
            match probes.peek() {
                Some(p) if p.k == s.k => {
                    write!(out, ",{:e},{:e},", p.second_moment_hat, p.second_moment_se)?;
                    if let Some(e) = p.exact_second_moment {
                        write!(out, "{e:e}")?;
                    }
                    probes.next();
                }
                _ => write!(out, ",,,")?,
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// One row of a trajectory CSV, as read back for ES fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub k: usize,
    pub f: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
    pub second_moment_hat: Option<f64>,
    pub second_moment_se: Option<f64>,
    pub exact_second_moment: Option<f64>,
}

/// Parses a trajectory CSV written by [`Trajectory::write_csv`] (or any file with that header).
pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != TRAJECTORY_CSV_HEADER {
        return Err(Error::Report(format!(
            "unexpected trajectory header `{}`",
            header.join(",")
        )));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Report(format!("bad number `{s}`: {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let k = rec[0]
            .parse::<usize>()
            .map_err(|e| Error::Report(format!("bad step index `{}`: {e}", &rec[0])))?;
        let req = |i: usize| -> Result<f64> {
            num(&rec[i])?.ok_or_else(|| Error::Report(format!("missing column {i} at k={k}")))
        };
        rows.push(TrajectoryRow {
            k,
            f: req(1)?,
            grad_norm_sq: req(2)?,
            eta: req(3)?,
            second_moment_hat: num(&rec[4])?,
            second_moment_se: num(&rec[5])?,
            exact_second_moment: num(&rec[6])?,
        });
    }
    Ok(rows)
}

/// Sample mean and standard error of `‖∇f_v(x)‖²` over `draws` independent sampling vectors.
pub fn probe_second_moment<R: Rng + ?Sized>(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    probe_minibatch_second_moment(problem, scheme, x, 1, draws, rng)
}

/// Probe of the mini-batch gradient `(1/τ) Σ_j ∇f_{v_j}(x)` with `τ` i.i.d. vectors per draw.
pub fn probe_minibatch_second_moment<R: Rng + ?Sized>(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
    tau: usize,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(Error::invalid("draws", "need at least 2 draws"));
    }
    if tau == 0 {
        return Err(Error::invalid("tau", "batch size must be >= 1"));
    }
    check_compat(problem, scheme)?;
    if x.len() != problem.d() {
        return Err(Error::DimensionMismatch {
            expected: problem.d(),
            got: x.len(),
        });
    }
    let values: Vec<f64> = (0..draws)
        .map(|_| minibatch_grad(problem, scheme, x, tau, rng).norm_squared())
        .collect();
    Ok(mean_and_se(&values))
}

fn minibatch_grad<R: Rng + ?Sized>(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
    tau: usize,
    rng: &mut R,
) -> Vector {
    let mut g = Vector::zeros(problem.d());
    let scale = 1.0 / tau as f64;
    for _ in 0..tau {
        let v = scheme.draw(rng);
        add_stochastic_grad(problem, &v, x, scale, &mut g);
    }
    g
}

fn check_compat(problem: &FiniteSumProblem, scheme: &SamplingScheme) -> Result<()> {
    if scheme.n() != problem.n() {
        return Err(Error::DimensionMismatch {
            expected: problem.n(),
            got: scheme.n(),
        });
    }
    Ok(())
}

/// Plain SGD `x_{k+1} = x_k − η_k ∇f_v(x_k)` with one sampling vector per step.
pub fn run_sgd(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    schedule: &StepSchedule,
    cfg: &RunConfig,
) -> Result<Trajectory> {
    run_minibatch_sgd(problem, scheme, &BatchSchedule::Constant(1), schedule, cfg)
}

/// Mini-batch SGD averaging `τ_k` i.i.d. stochastic gradients per step.
///
/// With `τ_k = 1` this consumes the update stream exactly like [`run_sgd`].
pub fn run_minibatch_sgd(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    batches: &BatchSchedule,
    schedule: &StepSchedule,
    cfg: &RunConfig,
) -> Result<Trajectory> {
    check_compat(problem, scheme)?;
    cfg.validate(problem.d())?;
    batches.validate(cfg.horizon)?;
    if let Some(h) = schedule.horizon() {
        if h < cfg.horizon {
            return Err(Error::invalid(
                "horizon",
                format!(
                    "cosine horizon {h} is shorter than the run horizon {}",
                    cfg.horizon
                ),
            ));
        }
    }
    let es = closed_form_es(scheme, problem)?;
    let is_admissible = admissible(schedule, problem.l_bar(), es.b);

    let mut update_rng = derive_rng(cfg.seed, 0, 0);
    let mut probe_rng = derive_rng(cfg.seed, 0, 1);
    let probing = cfg.probe_every > 0;

    let mut x = cfg
        .x0
        .clone()
        .unwrap_or_else(|| Vector::from_element(problem.d(), 1.0));
    let f0 = problem.eval_full_unchecked(&x);
    let limit = DIVERGENCE_FACTOR * (1.0 + f0.abs());

    let mut steps = Vec::with_capacity(cfg.horizon + 1);
    let mut probes = Vec::new();
    let mut iterates = cfg.record_iterates.then(Vec::new);
    let mut diverged = false;
    let mut direction = Vector::zeros(problem.d());

    for k in 0..=cfg.horizon {
        let f = problem.eval_full_unchecked(&x);
        let grad = problem.grad_full_unchecked(&x);
        let grad_norm_sq = grad.norm_squared();
        if !f.is_finite()
            || !grad_norm_sq.is_finite()
            || f > limit
            || !x.iter().all(|v| v.is_finite())
        {
            diverged = true;
            break;
        }
        let eta = schedule.step_unchecked(k);
        steps.push(StepRecord {
            k,
            f,
            grad_norm_sq,
            eta,
        });
        if let Some(its) = iterates.as_mut() {
            its.push(x.clone());
        }
        let tau = batches.tau_at(k.min(cfg.horizon.saturating_sub(1)));
        if probing && k % cfg.probe_every == 0 {
            let (hat, se) = probe_minibatch_second_moment(
                problem,
                scheme,
                &x,
                tau,
                cfg.probe_draws,
                &mut probe_rng,
            )?;
            let single = exact_second_moment(problem, scheme, &x)?;
            probes.push(ProbeRecord {
                k,
                tau,
                second_moment_hat: hat,
                second_moment_se: se,
                exact_second_moment: Some(grad_norm_sq + (single - grad_norm_sq) / tau as f64),
            });
        }
        if k == cfg.horizon {
            break;
        }

        direction.fill(0.0);
        let scale = 1.0 / tau as f64;
        for _ in 0..tau {
            let v = scheme.draw(&mut update_rng);
            add_stochastic_grad(problem, &v, &x, scale, &mut direction);
        }
        x.axpy(-eta, &direction, 1.0);
    }

    Ok(Trajectory {
        steps,
        probes,
        final_x: (!diverged).then_some(x),
        iterates,
        diverged,
        admissible: is_admissible,
        f_star: problem.f_star(),
    })
}

/// Seed-ensemble statistics of `f_k − f⋆` and `‖∇f(x_k)‖²`, over non-diverged runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrajectory {
    pub runs: usize,
    pub used_runs: usize,
    pub diverged_runs: usize,
    pub horizon: usize,
    pub f_star: f64,
    pub eta: Vec<f64>,
    pub subopt_mean: Vec<f64>,
    pub subopt_se: Vec<f64>,
    pub grad_mean: Vec<f64>,
    pub grad_se: Vec<f64>,
}

impl EnsembleTrajectory {
    pub fn from_runs(trajectories: &[Trajectory]) -> Result<Self> {
        let runs = trajectories.len();
        let good: Vec<&Trajectory> = trajectories.iter().filter(|t| !t.diverged).collect();
        if good.is_empty() {
            return Err(Error::AllDiverged { runs });
        }
        let steps = good[0].steps.len();
        let f_star = good[0].f_star;
        let mut subopt_mean = Vec::with_capacity(steps);
        let mut subopt_se = Vec::with_capacity(steps);
        let mut grad_mean = Vec::with_capacity(steps);
        let mut grad_se = Vec::with_capacity(steps);
        let mut buf_f = vec![0.0; good.len()];
        let mut buf_g = vec![0.0; good.len()];
        for k in 0..steps {
            for (r, t) in good.iter().enumerate() {
                buf_f[r] = t.steps[k].f - f_star;
                buf_g[r] = t.steps[k].grad_norm_sq;
            }
            let (m, s) = mean_and_se(&buf_f);
            subopt_mean.push(m);
            subopt_se.push(s);
            let (m, s) = mean_and_se(&buf_g);
            grad_mean.push(m);
            grad_se.push(s);
        }
        Ok(Self {
            runs,
            used_runs: good.len(),
            diverged_runs: runs - good.len(),
            horizon: steps - 1,
            f_star,
            eta: good[0].steps.iter().map(|s| s.eta).collect(),
            subopt_mean,
            subopt_se,
            grad_mean,
            grad_se,
        })
    }

    /// `min_{0 ≤ k ≤ K} E‖∇f(x_k)‖²` for a prefix horizon `K`.
    pub fn min_grad_mean(&self, horizon: usize) -> f64 {
        self.grad_mean[..=horizon.min(self.horizon)]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_grad_se(&self, horizon: usize) -> f64 {
        self.grad_se[..=horizon.min(self.horizon)]
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// `runs` independent SGD runs; run `r` uses seed `cfg.seed XOR r`.
pub fn run_ensemble(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    schedule: &StepSchedule,
    cfg: &RunConfig,
    runs: usize,
) -> Result<EnsembleTrajectory> {
    run_minibatch_ensemble(
        problem,
        scheme,
        &BatchSchedule::Constant(1),
        schedule,
        cfg,
        runs,
    )
}

pub fn run_minibatch_ensemble(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    batches: &BatchSchedule,
    schedule: &StepSchedule,
    cfg: &RunConfig,
    runs: usize,
) -> Result<EnsembleTrajectory> {
    if runs < 2 {
        return Err(Error::invalid("seeds", "an ensemble needs at least 2 runs"));
    }
    let trajectories = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = cfg.seed ^ r;
            run_cfg.probe_every = 0;
            run_minibatch_sgd(problem, scheme, batches, schedule, &run_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleTrajectory::from_runs(&trajectories)
}

/// One-step expected descent at a fixed point, with the expectation taken exactly by
/// enumerating the scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    pub expected_next: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `E[f(x − ηg)] ≤ f − η(1 − L̄Bη/2)‖∇f‖² + L̄Aη²(f − f⋆) + L̄η²C/2`.
pub fn one_step_descent_check(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    es: &EsConstants,
    x: &Vector,
    eta: f64,
) -> Result<DescentCheck> {
    check_compat(problem, scheme)?;
    let fx = problem.eval_full(x)?;
    let grad_sq = problem.grad_full(x)?.norm_squared();
    let mut expected_next = 0.0;
    for o in scheme.enumerate()? {
        let mut next = x.clone();
        add_stochastic_grad(problem, &o.vector, x, -eta, &mut next);
        expected_next += o.probability * problem.eval_full_unchecked(&next);
    }
    let l = problem.l_bar();
    let rhs = fx - eta * (1.0 - l * es.b * eta / 2.0) * grad_sq
        + l * es.a * eta * eta * (fx - problem.f_star())
        + l * eta * eta * es.c / 2.0;
    let holds = expected_next <= rhs + 1e-9 * (1.0 + rhs.abs()) + problem.infimum_slack();
    Ok(DescentCheck {
        expected_next,
        rhs,
        holds,
    })
}
