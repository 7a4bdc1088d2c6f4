//! Step-size schedules and their exact partial sums.

use crate::stats::CompensatedSum;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScheduleKind {
    Constant,
    Harmonic,
    Polynomial,
    Cosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Constant,
        ScheduleKind::Harmonic,
        ScheduleKind::Polynomial,
        ScheduleKind::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Harmonic => "harmonic",
            ScheduleKind::Polynomial => "polynomial",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Step-size schedule `η_k`, `k = 0, 1, …`. Every variant has `η_max = η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// `η_k = η`
    Constant { eta: f64 },
    /// `η_k = η / (k + 1)`
    Harmonic { eta: f64 },
    /// `η_k = η (k + 1)^{−α}`, `α ∈ (0, 1)`
    Polynomial { eta: f64, alpha: f64 },
    /// `η_k = η · ½ (1 + cos(πk/K))` for `0 ≤ k ≤ K`
    Cosine { eta: f64, horizon: usize },
}

impl StepSchedule {
    pub fn constant(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self::Constant { eta })
    }

    pub fn harmonic(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self::Harmonic { eta })
    }

    pub fn polynomial(eta: f64, alpha: f64) -> Result<Self> {
        check_eta(eta)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("must lie in (0, 1), got {alpha}"),
            ));
        }
        Ok(Self::Polynomial { eta, alpha })
    }

    pub fn cosine(eta: f64, horizon: usize) -> Result<Self> {
        check_eta(eta)?;
        if horizon == 0 {
            return Err(Error::invalid("horizon", "cosine horizon must be >= 1"));
        }
        Ok(Self::Cosine { eta, horizon })
    }

    /// Same kind and shape with a different base step size.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        match *self {
            Self::Constant { .. } => Self::constant(eta),
            Self::Harmonic { .. } => Self::harmonic(eta),
            Self::Polynomial { alpha, .. } => Self::polynomial(eta, alpha),
            Self::Cosine { horizon, .. } => Self::cosine(eta, horizon),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            Self::Constant { .. } => ScheduleKind::Constant,
            Self::Harmonic { .. } => ScheduleKind::Harmonic,
            Self::Polynomial { .. } => ScheduleKind::Polynomial,
            Self::Cosine { .. } => ScheduleKind::Cosine,
        }
    }

    pub fn eta(&self) -> f64 {
        match *self {
            Self::Constant { eta }
            | Self::Harmonic { eta }
            | Self::Polynomial { eta, .. }
            | Self::Cosine { eta, .. } => eta,
        }
    }

    /// `sup_k η_k`, attained at `k = 0` for every variant.
    pub fn eta_max(&self) -> f64 {
        self.eta()
    }

    pub fn horizon(&self) -> Option<usize> {
        match *self {
            Self::Cosine { horizon, .. } => Some(horizon),
            _ => None,
        }
    }

    pub fn step_size(&self, k: usize) -> Result<f64> {
        if let Self::Cosine { horizon, .. } = *self {
            if k > horizon {
                return Err(Error::PastHorizon { k, horizon });
            }
        }
        Ok(self.step_unchecked(k))
    }

    pub(crate) fn step_unchecked(&self, k: usize) -> f64 {
        match *self {
            Self::Constant { eta } => eta,
            Self::Harmonic { eta } => eta / (k as f64 + 1.0),
            Self::Polynomial { eta, alpha } => eta * (k as f64 + 1.0).powf(-alpha),
            Self::Cosine { eta, horizon } => {
                if k == horizon {
                    0.0
                } else {
                    eta * 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / horizon as f64).cos())
                }
            }
        }
    }

    /// `(Σ_{k<K} η_k, Σ_{k<K} η_k²)` by compensated direct summation.
    pub fn partial_sums(&self, horizon: usize) -> Result<(f64, f64)> {
        if horizon == 0 {
            return Err(Error::invalid("K", "horizon must be >= 1"));
        }
        self.partial_sums_range(0, horizon)
    }

    /// Sums over `start ≤ k < end`.
    pub fn partial_sums_range(&self, start: usize, end: usize) -> Result<(f64, f64)> {
        if end > 0 {
            if let Self::Cosine { horizon, .. } = *self {
                if end - 1 > horizon {
                    return Err(Error::PastHorizon {
                        k: end - 1,
                        horizon,
                    });
                }
            }
        }
        let mut s1 = CompensatedSum::new();
        let mut s2 = CompensatedSum::new();
        for k in start..end {
            let e = self.step_unchecked(k);
            s1.add(e);
            s2.add(e * e);
        }
        Ok((s1.value(), s2.value()))
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::invalid(
            "eta",
            format!("must be finite and > 0, got {eta}"),
        ));
    }
    Ok(())
}

/// Step-size ceiling `2/(L·B)`; infinite when `B = 0`.
pub fn step_ceiling(l: f64, b: f64) -> f64 {
    if b <= 0.0 {
        f64::INFINITY
    } else {
        2.0 / (l * b)
    }
}

/// True iff `η_max < 2/(L·B)` (open interval; vacuous when `B = 0`).
pub fn admissible(schedule: &StepSchedule, l: f64, b: f64) -> bool {
    schedule.eta_max() < step_ceiling(l, b)
}
