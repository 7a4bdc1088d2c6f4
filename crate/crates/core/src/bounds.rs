//! Nonconvex SGD bound evaluation, rate predictions and empirical rate fits.
//!
//! The bound compared against ensemble data is
//!
//! ```text
//! min_{k≤K} E‖∇f(x_k)‖² ≤ 2(f_0 − f⋆) / (D Σ η_k)
//!                        + (2LA/D) Σ η_k² E[f_k − f⋆] / Σ η_k
//!                        + (LC/D) Σ η_k² / Σ η_k,          D = 2 − LBη_max,
//! ```
//!
//! with sums over `0 ≤ k < K`.

use std::io::Write;

use crate::optimizer::EnsembleTrajectory;
use crate::sampling::EsConstants;
use crate::schedules::{step_ceiling, ScheduleKind, StepSchedule};
use crate::stats::linear_fit;
use crate::{Error, Result};

pub const BOUND_CSV_HEADER: &str =
    "problem,scheme,schedule,K,eta,lhs,rhs_term1,rhs_term2,rhs_term3,rhs_total,margin,holds";
pub const RATE_CSV_HEADER: &str = "schedule,K,min_grad,fitted_slope,predicted_exponent";

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// The three additive terms of the right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsTerms {
    pub term1: f64,
    /// A-term weighted by the per-step ensemble mean of `f_k − f⋆`.
    pub term2: f64,
    /// A-term with every `E[f_k − f⋆]` replaced by `f_0 − f⋆`.
    pub term2_coarse: f64,
    pub term3: f64,
    pub eta_max: f64,
}

impl RhsTerms {
    pub fn total(&self) -> f64 {
        self.term1 + self.term2 + self.term3
    }

    pub fn total_coarse(&self) -> f64 {
        self.term1 + self.term2_coarse + self.term3
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub horizon: usize,
    pub lhs: f64,
    pub terms: RhsTerms,
    pub rhs_total: f64,
    pub eta_max: f64,
    pub margin: f64,
    /// Tolerance added to the right-hand side before comparing.
    pub slack: f64,
    pub holds: bool,
}

/// Evaluates the bound's right-hand side for the first `horizon` steps of an ensemble.
///
/// `l` is the smoothness constant used in the analysis (the mean `L̄` of the components).
pub fn theorem1_rhs(
    ensemble: &EnsembleTrajectory,
    es: &EsConstants,
    l: f64,
    schedule: &StepSchedule,
    horizon: usize,
) -> Result<RhsTerms> {
    if horizon == 0 || horizon > ensemble.horizon {
        return Err(Error::invalid(
            "K",
            format!("must lie in 1..={}, got {horizon}", ensemble.horizon),
        ));
    }
    let eta_max = schedule.eta_max();
    let denom = 2.0 - l * es.b * eta_max;
    if !(denom > 0.0) {
        return Err(Error::Inadmissible {
            eta_max,
            ceiling: step_ceiling(l, es.b),
        });
    }
    let (s1, s2) = schedule.partial_sums(horizon)?;
    let gap0 = ensemble.subopt_mean[0];
    let weighted: f64 = (0..horizon)
        .map(|k| {
            let e = schedule.step_unchecked(k);
            e * e * ensemble.subopt_mean[k]
        })
        .sum();
    Ok(RhsTerms {
        term1: 2.0 * gap0 / (denom * s1),
        term2: 2.0 * l * es.a / denom * weighted / s1,
        term2_coarse: 2.0 * l * es.a / denom * s2 * gap0 / s1,
        term3: l * es.c / denom * s2 / s1,
        eta_max,
    })
}

/// Compares `min_{k≤K}` of the ensemble-mean squared gradient with the right-hand side,
/// allowing three standard errors of the gradient means plus `numeric_slack`.
pub fn check_bound(
    ensemble: &EnsembleTrajectory,
    es: &EsConstants,
    l: f64,
    schedule: &StepSchedule,
    horizon: usize,
    numeric_slack: f64,
) -> Result<BoundReport> {
    let terms = theorem1_rhs(ensemble, es, l, schedule, horizon)?;
    let lhs = ensemble.min_grad_mean(horizon);
    let rhs_total = terms.total();
    let slack = 3.0 * ensemble.max_grad_se(horizon) + numeric_slack;
    Ok(BoundReport {
        horizon,
        lhs,
        terms,
        rhs_total,
        eta_max: terms.eta_max,
        margin: rhs_total - lhs,
        slack,
        holds: lhs <= rhs_total + slack,
    })
}

/// Functional forms a min-gradient curve is predicted to follow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateForm {
    /// `K^p`
    PowerLaw(f64),
    /// `log K / K`
    LogOverK,
    /// `1 / log K`
    InverseLog,
}

impl RateForm {
    /// Nominal exponent; `log K / K` counts as −1 and `1/log K` as 0.
    pub fn exponent(&self) -> f64 {
        match *self {
            RateForm::PowerLaw(p) => p,
            RateForm::LogOverK => -1.0,
            RateForm::InverseLog => 0.0,
        }
    }

    /// Log-log slope of the form between two horizons.
    pub fn local_slope(&self, k_lo: f64, k_hi: f64) -> f64 {
        let dl = k_hi.ln() - k_lo.ln();
        let dll = k_hi.ln().ln() - k_lo.ln().ln();
        match *self {
            RateForm::PowerLaw(p) => p,
            RateForm::LogOverK => dll / dl - 1.0,
            RateForm::InverseLog => -dll / dl,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            RateForm::PowerLaw(p) => format!("K^{p}"),
            RateForm::LogOverK => "log K/K".into(),
            RateForm::InverseLog => "1/log K".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePrediction {
    pub kind: ScheduleKind,
    /// Candidate forms; more than one only for the harmonic schedule.
    pub forms: Vec<RateForm>,
    /// An `O(η)` floor is predicted.
    pub floor: bool,
}

impl RatePrediction {
    /// Exponent of the first (primary) form.
    pub fn exponent(&self) -> f64 {
        self.forms[0].exponent()
    }
}

pub fn corollary_rate(kind: ScheduleKind, alpha: Option<f64>) -> Result<RatePrediction> {
    let (forms, floor) = match kind {
        ScheduleKind::Constant => (vec![RateForm::PowerLaw(0.0)], true),
        ScheduleKind::Cosine => (vec![RateForm::PowerLaw(-1.0)], true),
        ScheduleKind::Harmonic => (vec![RateForm::LogOverK, RateForm::InverseLog], false),
        ScheduleKind::Polynomial => {
            let a = alpha.ok_or_else(|| Error::invalid("alpha", "required for polynomial"))?;
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(
                    "alpha",
                    format!("must lie in (0, 1), got {a}"),
                ));
            }
            (vec![RateForm::PowerLaw(-(1.0 - a))], false)
        }
    };
    Ok(RatePrediction { kind, forms, floor })
}

/// How the asymptote is removed before fitting a power law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FloorMode {
    None,
    Fixed(f64),
    /// Mean of the last `⌈N/5⌉` points (by `K`); the fit uses the remaining points.
    TailMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub floor: f64,
    pub points_used: usize,
}

/// Least-squares slope of `log(value − floor)` against `log K`.
pub fn fit_rate(curve: &[(f64, f64)], floor: FloorMode) -> Result<RateFit> {
    let mut pts: Vec<(f64, f64)> = curve.to_vec();
    if pts
        .iter()
        .any(|(k, v)| !(k.is_finite() && *k > 0.0) || !v.is_finite())
    {
        return Err(Error::RateFit(
            "horizons must be positive and values finite".into(),
        ));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct = pts.iter().map(|p| p.0).collect::<Vec<_>>();
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::RateFit(format!(
            "need at least 4 distinct horizons, got {}",
            distinct.len()
        )));
    }
    let decades = (distinct[distinct.len() - 1] / distinct[0]).log10();
    if decades < 1.5 - 1e-12 {
        return Err(Error::RateFit(format!(
            "horizons span {decades:.2} decades, need at least 1.5"
        )));
    }
    let (floor_value, head) = match floor {
        FloorMode::None => (0.0, pts.as_slice()),
        FloorMode::Fixed(c) => (c, pts.as_slice()),
        FloorMode::TailMean => {
            let tail = pts.len().div_ceil(5);
            let (head, tail_pts) = pts.split_at(pts.len() - tail);
            let mean = tail_pts.iter().map(|p| p.1).sum::<f64>() / tail as f64;
            (mean, head)
        }
    };
    if head.len() < 3 {
        return Err(Error::RateFit("fewer than 3 points left to fit".into()));
    }
    let mut xs = Vec::with_capacity(head.len());
    let mut ys = Vec::with_capacity(head.len());
    for &(k, v) in head {
        let r = v - floor_value;
        if !(r > 0.0) {
            return Err(Error::RateFit(format!(
                "value at K={k} is {r:e} after subtracting floor {floor_value:e}"
            )));
        }
        xs.push(k.ln());
        ys.push(r.ln());
    }
    let (slope, intercept, r_squared) = linear_fit(&xs, &ys);
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        floor: floor_value,
        points_used: head.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumAsymptoticRow {
    pub k: usize,
    pub sum: f64,
    pub predicted_sum: f64,
    pub sum_sq: f64,
    pub predicted_sum_sq: f64,
}

impl SumAsymptoticRow {
    pub fn ratio(&self) -> f64 {
        self.sum / self.predicted_sum
    }

    pub fn ratio_sq(&self) -> f64 {
        self.sum_sq / self.predicted_sum_sq
    }
}

/// Exact partial sums against their large-`K` approximations:
///
/// | schedule   | `Σ η_k`                   | `Σ η_k²`                         |
/// |------------|---------------------------|----------------------------------|
/// | constant   | `Kη`                      | `Kη²`                            |
/// | harmonic   | `η ln K`                  | `η²π²/6`                         |
/// | polynomial | `η(K^{1−α} − 1)/(1 − α)`  | `η²(K^{1−2α} − 1)/(1 − 2α)` (`η² ln K` at α = ½) |
/// | cosine     | `Kη/2`                    | `3Kη²/8`                         |
///
/// The cosine schedule is rebuilt with horizon `K` for each grid point.
pub fn sum_asymptotics_check(
    kind: ScheduleKind,
    eta: f64,
    alpha: Option<f64>,
    ks: &[usize],
) -> Result<Vec<SumAsymptoticRow>> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "K",
            "grid must be nonempty, positive and increasing",
        ));
    }
    let base = match kind {
        ScheduleKind::Constant => StepSchedule::constant(eta)?,
        ScheduleKind::Harmonic => StepSchedule::harmonic(eta)?,
        ScheduleKind::Polynomial => StepSchedule::polynomial(
            eta,
            alpha.ok_or_else(|| Error::invalid("alpha", "required for polynomial"))?,
        )?,
        ScheduleKind::Cosine => StepSchedule::cosine(eta, 1)?,
    };
    ks.iter()
        .map(|&k| {
            let kf = k as f64;
            let schedule = match base {
                StepSchedule::Cosine { .. } => StepSchedule::cosine(eta, k)?,
                s => s,
            };
            let (sum, sum_sq) = schedule.partial_sums(k)?;
            let (predicted_sum, predicted_sum_sq) = match schedule {
                StepSchedule::Constant { .. } => (kf * eta, kf * eta * eta),
                StepSchedule::Harmonic { .. } => (
                    eta * kf.ln(),
                    eta * eta * std::f64::consts::PI.powi(2) / 6.0,
                ),
                StepSchedule::Polynomial { alpha, .. } => {
                    let p = 1.0 - alpha;
                    let q = 1.0 - 2.0 * alpha;
                    let sq = if q.abs() < 1e-12 {
                        kf.ln()
                    } else {
                        (kf.powf(q) - 1.0) / q
                    };
                    (eta / p * (kf.powf(p) - 1.0), eta * eta * sq)
                }
                StepSchedule::Cosine { .. } => (kf * eta / 2.0, 3.0 * kf * eta * eta / 8.0),
            };
            Ok(SumAsymptoticRow {
                k,
                sum,
                predicted_sum,
                sum_sq,
                predicted_sum_sq,
            })
        })
        .collect()
}

/// One line of the bound CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub problem: String,
    pub scheme: String,
    pub schedule: String,
    pub eta: f64,
    pub report: BoundReport,
}

pub fn write_bound_csv<W: Write>(rows: &[BoundRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{BOUND_CSV_HEADER}")?;
    for r in rows {
        let t = &r.report.terms;
        writeln!(
            out,
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            r.problem,
            r.scheme,
            r.schedule,
            r.report.horizon,
            r.eta,
            r.report.lhs,
            t.term1,
            t.term2,
            t.term3,
            r.report.rhs_total,
            r.report.margin,
            r.report.holds
        )?;
    }
    Ok(())
}

/// One line of the rate table.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub schedule: String,
    pub k: usize,
    pub min_grad: f64,
    pub fitted_slope: f64,
    pub predicted_exponent: f64,
}

pub fn write_rate_csv<W: Write>(rows: &[RateRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{RATE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.schedule, r.k, r.min_grad, r.fitted_slope, r.predicted_exponent
        )?;
    }
    Ok(())
}
