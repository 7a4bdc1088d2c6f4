//! Fitting ES coefficients to measured second moments, plus exact identity checks.
//!
//! A fit regresses the measured `E‖g‖²` on the columns `(2·subopt, grad_sq, 1)` under the
//! constraint `A, B, C ≥ 0`, weighting each sample by its inverse probe variance.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nnls::nnls;
use crate::optimizer::TrajectoryRow;
use crate::problems::FiniteSumProblem;
use crate::sampling::{stochastic_grad, EsConstants, SamplingScheme, ENUMERATION_LIMIT};
use crate::stats::percentile;
use crate::{Error, Result, Vector};

/// Header of the windowed-fit CSV export.
pub const FIT_CSV_HEADER: &str = "window_start,A_hat,B_hat,C_hat,r_squared,n_samples,rank_flag";

/// One regression row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsSample {
    pub subopt: f64,
    pub grad_sq: f64,
    pub second_moment: f64,
    pub weight: f64,
}

impl EsSample {
    /// A sample with an exactly known second moment (unit weight).
    pub fn exact(subopt: f64, grad_sq: f64, second_moment: f64) -> Self {
        Self {
            subopt,
            grad_sq,
            second_moment,
            weight: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.subopt) && ok(self.grad_sq) && ok(self.second_moment) && ok(self.weight)) {
            return Err(Error::invalid(
                "samples",
                format!("all sample fields must be finite and nonnegative: {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Inverse-variance weights `1/se²`, clamped to the 5th–95th percentile band of the finite
/// weights. Zero standard errors take the upper clamp; if every error is zero all weights are 1.
pub fn inverse_variance_weights(standard_errors: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = standard_errors.iter().map(|s| 1.0 / (s * s)).collect();
    let finite: Vec<f64> = raw.iter().copied().filter(|w| w.is_finite()).collect();
    if finite.is_empty() {
        return vec![1.0; raw.len()];
    }
    let lo = percentile(&finite, 0.05);
    let hi = percentile(&finite, 0.95);
    raw.into_iter()
        .map(|w| if w.is_finite() { w.clamp(lo, hi) } else { hi })
        .collect()
}

/// Regression samples from the probe rows of a trajectory CSV.
///
/// Uses the measured estimate with inverse-variance weights, or the exact column with unit
/// weights when `use_exact` is set. Suboptimality is clamped at zero.
pub fn samples_from_trajectory(
    rows: &[TrajectoryRow],
    f_star: f64,
    use_exact: bool,
) -> Vec<EsSample> {
    let probed: Vec<&TrajectoryRow> = rows
        .iter()
        .filter(|r| {
            if use_exact {
                r.exact_second_moment.is_some()
            } else {
                r.second_moment_hat.is_some()
            }
        })
        .collect();
    let weights = if use_exact {
        vec![1.0; probed.len()]
    } else {
        inverse_variance_weights(
            &probed
                .iter()
                .map(|r| r.second_moment_se.unwrap_or(0.0))
                .collect::<Vec<_>>(),
        )
    };
    probed
        .iter()
        .zip(weights)
        .map(|(r, w)| EsSample {
            subopt: (r.f - f_star).max(0.0),
            grad_sq: r.grad_norm_sq,
            second_moment: if use_exact {
                r.exact_second_moment.unwrap_or(0.0)
            } else {
                r.second_moment_hat.unwrap_or(0.0)
            },
            weight: w,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsFit {
    pub a_hat: f64,
    pub b_hat: f64,
    pub c_hat: f64,
    /// Weighted coefficient of determination; may be negative, never clamped.
    pub r_squared: f64,
    /// `predicted − measured` per sample.
    pub residuals: Vec<f64>,
    pub sample_count: usize,
    /// The normalised weighted design has rank < 3, so `(A, B, C)` is not identifiable.
    pub rank_deficient: bool,
    /// Coefficients pinned at zero (0 = A, 1 = B, 2 = C).
    pub active: Vec<usize>,
}

impl EsFit {
    pub fn constants(&self) -> EsConstants {
        EsConstants::new(self.a_hat, self.b_hat, self.c_hat)
    }

    pub fn predict(&self, subopt: f64, grad_sq: f64) -> f64 {
        self.constants().rhs(subopt, grad_sq)
    }
}

/// Weighted nonnegative least-squares fit of `(A, B, C)`.
pub fn fit_es(samples: &[EsSample]) -> Result<EsFit> {
    if samples.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    for s in samples {
        s.validate()?;
    }
    let m = samples.len();
    let mut design = DMatrix::zeros(m, 3);
    let mut target = DVector::zeros(m);
    for (r, s) in samples.iter().enumerate() {
        let sw = s.weight.sqrt();
        design[(r, 0)] = sw * 2.0 * s.subopt;
        design[(r, 1)] = sw * s.grad_sq;
        design[(r, 2)] = sw;
        target[r] = sw * s.second_moment;
    }
    let norms: Vec<f64> = (0..3).map(|j| design.column(j).norm()).collect();
    if norms.iter().all(|n| *n == 0.0) {
        return Err(Error::invalid("samples", "every design column is zero"));
    }
    let live: Vec<usize> = (0..3).filter(|j| norms[*j] > 0.0).collect();
    let mut normalized = design.select_columns(&live);
    for (k, &j) in live.iter().enumerate() {
        normalized.column_mut(k).scale_mut(1.0 / norms[j]);
    }

    let sv = normalized.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > 1e-10 * smax).count();
    let rank_deficient = rank < 3;

    let sol = nnls(&normalized, &target);
    let mut coef = [0.0; 3];
    for (k, &j) in live.iter().enumerate() {
        coef[j] = sol.x[k] / norms[j];
    }
    let mut active: Vec<usize> = sol.active.iter().map(|k| live[*k]).collect();
    active.extend((0..3).filter(|j| norms[*j] == 0.0));
    active.sort_unstable();

    let [a_hat, b_hat, c_hat] = coef;
    let residuals: Vec<f64> = samples
        .iter()
        .map(|s| 2.0 * a_hat * s.subopt + b_hat * s.grad_sq + c_hat - s.second_moment)
        .collect();
    let wsum: f64 = samples.iter().map(|s| s.weight).sum();
    let wmean = samples
        .iter()
        .map(|s| s.weight * s.second_moment)
        .sum::<f64>()
        / wsum;
    let sst: f64 = samples
        .iter()
        .map(|s| s.weight * (s.second_moment - wmean).powi(2))
        .sum();
    let sse: f64 = samples
        .iter()
        .zip(&residuals)
        .map(|(s, r)| s.weight * r * r)
        .sum();
    let r_squared = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };

    Ok(EsFit {
        a_hat,
        b_hat,
        c_hat,
        r_squared,
        residuals,
        sample_count: m,
        rank_deficient,
        active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFit {
    pub start: usize,
    pub fit: EsFit,
}

/// One fit per window `[start, start + width)`, `start = 0, stride, 2·stride, …`.
pub fn windowed_fit(samples: &[EsSample], width: usize, stride: usize) -> Result<Vec<WindowFit>> {
    if width < 3 {
        return Err(Error::invalid("window", "window width must be >= 3"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "stride must be >= 1"));
    }
    if samples.len() < width {
        return Err(Error::TooFewSamples {
            needed: width,
            got: samples.len(),
        });
    }
    (0..=samples.len() - width)
        .step_by(stride)
        .map(|start| {
            Ok(WindowFit {
                start,
                fit: fit_es(&samples[start..start + width])?,
            })
        })
        .collect()
}

pub fn write_fit_csv<W: Write>(fits: &[WindowFit], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{FIT_CSV_HEADER}")?;
    for w in fits {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{},{}",
            w.start,
            w.fit.a_hat,
            w.fit.b_hat,
            w.fit.c_hat,
            w.fit.r_squared,
            w.fit.sample_count,
            u8::from(w.fit.rank_deficient)
        )?;
    }
    Ok(())
}

/// Where the fitted coefficients shift from an A-dominated to a B-dominated regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossover {
    pub window_index: usize,
    pub window_start: usize,
    /// Sample index at the centre of the crossover window.
    pub center: f64,
    pub a_before: f64,
    pub a_after: f64,
    pub b_before: f64,
    pub b_after: f64,
}

/// First window whose `A_hat` falls below the midpoint between the early and late levels
/// (medians of the first and last quarter of windows). `None` unless `A` drops and `B` rises.
pub fn detect_crossover(fits: &[WindowFit], width: usize) -> Option<Crossover> {
    if fits.len() < 4 {
        return None;
    }
    let q = (fits.len() / 4).max(1);
    let median = |vals: Vec<f64>| percentile(&vals, 0.5);
    let a_before = median(fits[..q].iter().map(|w| w.fit.a_hat).collect());
    let a_after = median(fits[fits.len() - q..].iter().map(|w| w.fit.a_hat).collect());
    let b_before = median(fits[..q].iter().map(|w| w.fit.b_hat).collect());
    let b_after = median(fits[fits.len() - q..].iter().map(|w| w.fit.b_hat).collect());
    if !(a_after < a_before && b_after > b_before) {
        return None;
    }
    let threshold = 0.5 * (a_before + a_after);
    let idx = fits.iter().position(|w| w.fit.a_hat < threshold)?;
    Some(Crossover {
        window_index: idx,
        window_start: fits[idx].start,
        center: fits[idx].start as f64 + width as f64 / 2.0,
        a_before,
        a_after,
        b_before,
        b_after,
    })
}

/// Synthetic regression data following `2A·subopt + B·grad_sq + C`, optionally switching
/// coefficients at `switch_step`, with multiplicative Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub before: EsConstants,
    pub after: EsConstants,
    pub switch_step: usize,
    pub length: usize,
    /// Relative noise level (0.02 for 2 %).
    pub noise: f64,
    pub seed: u64,
}

impl ForwardModel {
    pub fn stationary(es: EsConstants, length: usize, noise: f64, seed: u64) -> Self {
        Self {
            before: es,
            after: es,
            switch_step: length,
            length,
            noise,
            seed,
        }
    }

    /// Samples along a decaying pseudo-trajectory. Suboptimality and gradient norm trend
    /// down at different rates with independent log-uniform jitter of one decade so the
    /// design stays well conditioned inside every window.
    pub fn samples(&self) -> Vec<EsSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let len = self.length.max(1) as f64;
        (0..self.length)
            .map(|k| {
                let t = k as f64 / len;
                let subopt = 10f64.powf(1.0 - 2.0 * t + rng.random_range(-0.5..0.5));
                let grad_sq = 10f64.powf(0.5 - 1.5 * t + rng.random_range(-0.5..0.5));
                let es = if k < self.switch_step {
                    self.before
                } else {
                    self.after
                };
                let clean = es.rhs(subopt, grad_sq);
                let eps: f64 = rng.sample(StandardNormal);
                let measured = (clean * (1.0 + self.noise * eps)).max(0.0);
                let weight = if self.noise > 0.0 {
                    1.0 / (self.noise * clean).powi(2)
                } else {
                    1.0
                };
                EsSample {
                    subopt,
                    grad_sq,
                    second_moment: measured,
                    weight,
                }
            })
            .collect()
    }
}

/// Both sides of `E‖g − ∇f‖² = E‖g‖² − ‖∇f‖²`, each computed by enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceIdentity {
    pub variance_direct: f64,
    pub variance_via_decomposition: f64,
    pub max_diff: f64,
    /// `E‖g‖²`, the natural scale for the difference.
    pub second_moment: f64,
}

impl VarianceIdentity {
    /// `max_diff / max(1, E‖g‖²)`.
    pub fn relative_diff(&self) -> f64 {
        self.max_diff / self.second_moment.max(1.0)
    }
}

pub fn variance_identity_check(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
) -> Result<VarianceIdentity> {
    let outcomes = scheme.enumerate()?;
    let grad = problem.grad_full(x)?;
    let mut direct = 0.0;
    let mut second = 0.0;
    for o in &outcomes {
        let g = stochastic_grad(problem, &o.vector, x)?;
        direct += o.probability * (&g - &grad).norm_squared();
        second += o.probability * g.norm_squared();
    }
    let via = second - grad.norm_squared();
    Ok(VarianceIdentity {
        variance_direct: direct,
        variance_via_decomposition: via,
        max_diff: (direct - via).abs(),
        second_moment: second,
    })
}

/// `(2A/τ)·subopt + (1 + (B − 1)/τ)·grad_sq + C/τ`.
pub fn minibatch_es_rhs(es: &EsConstants, tau: usize, subopt: f64, grad_sq: f64) -> f64 {
    let t = tau as f64;
    2.0 * es.a / t * subopt + (1.0 + (es.b - 1.0) / t) * grad_sq + es.c / t
}

/// Exact `E‖(1/τ) Σ_j ∇f_{v_j}(x)‖²` over `τ` i.i.d. copies of the scheme, by enumerating
/// every tuple of outcomes.
pub fn enumerate_minibatch_second_moment(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    tau: usize,
    x: &Vector,
) -> Result<f64> {
    if tau == 0 {
        return Err(Error::invalid("tau", "batch size must be >= 1"));
    }
    let outcomes = scheme.enumerate()?;
    let count = (outcomes.len() as u128)
        .checked_pow(tau as u32)
        .unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let grads: Vec<Vector> = outcomes
        .iter()
        .map(|o| stochastic_grad(problem, &o.vector, x))
        .collect::<Result<_>>()?;
    let mut idx = vec![0usize; tau];
    let mut total = 0.0;
    loop {
        let mut g = Vector::zeros(problem.d());
        let mut prob = 1.0;
        for &i in &idx {
            g += &grads[i];
            prob *= outcomes[i].probability;
        }
        total += prob * (g / tau as f64).norm_squared();
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == tau {
                return Ok(total);
            }
            idx[pos] += 1;
            if idx[pos] < outcomes.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `‖∇f(x)‖² ≤ 2L̄(f(x) − f⋆)`, with 1e-9 relative slack plus the numeric-infimum slack.
pub fn grad_gap_check(problem: &FiniteSumProblem, x: &Vector) -> Result<GapCheck> {
    let lhs = problem.grad_full(x)?.norm_squared();
    let rhs = 2.0 * problem.l_bar() * (problem.eval_full(x)? - problem.f_star());
    let slack = 1e-9 * (1.0 + rhs.abs()) + 2.0 * problem.l_bar() * problem.infimum_slack();
    Ok(GapCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        make_random_quadratic, FiniteSumProblem, QuadraticComponent, QuadraticSpec,
    };
    use crate::sampling::{closed_form_es, exact_second_moment};

    #[test]
    fn noiseless_recovery() {
        let es = EsConstants::new(3.0, 0.5, 0.2);
        let samples = ForwardModel::stationary(es, 100, 0.0, 1).samples();
        let fit = fit_es(&samples).unwrap();
        assert!((fit.a_hat - 3.0).abs() < 1e-8);
        assert!((fit.b_hat - 0.5).abs() < 1e-8);
        assert!((fit.c_hat - 0.2).abs() < 1e-8);
        assert!(fit.r_squared > 1.0 - 1e-12);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn degenerate_design_is_flagged() {
        let samples = vec![EsSample::exact(1.0, 2.0, 5.0); 10];
        let fit = fit_es(&samples).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.predict(1.0, 2.0) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            fit_es(&[EsSample::exact(1.0, 1.0, 1.0); 2]),
            Err(Error::TooFewSamples { needed: 3, got: 2 })
        ));
        let bad = [EsSample::exact(-1.0, 1.0, 1.0); 3];
        assert!(fit_es(&bad).is_err());
    }

    #[test]
    fn whole_window_equals_plain_fit() {
        let samples =
            ForwardModel::stationary(EsConstants::new(1.0, 2.0, 0.1), 60, 0.02, 3).samples();
        let fits = windowed_fit(&samples, 60, 5).unwrap();
        assert_eq!(fits.len(), 1);
        assert_eq!(fits[0].fit, fit_es(&samples).unwrap());
        assert!(windowed_fit(&samples, 61, 1).is_err());
        assert!(windowed_fit(&samples, 2, 1).is_err());
    }

    #[test]
    fn nnls_kkt_holds_at_fit() {
        // data generated with a negative intercept forces C to the boundary
        let samples: Vec<EsSample> =
            ForwardModel::stationary(EsConstants::new(1.0, 1.0, 0.0), 50, 0.0, 2)
                .samples()
                .into_iter()
                .map(|mut s| {
                    s.second_moment = (s.second_moment - 0.5).max(0.0);
                    s
                })
                .collect();
        let fit = fit_es(&samples).unwrap();
        let beta = [fit.a_hat, fit.b_hat, fit.c_hat];
        let mut grad = [0.0; 3];
        for (s, r) in samples.iter().zip(&fit.residuals) {
            let row = [2.0 * s.subopt, s.grad_sq, 1.0];
            for j in 0..3 {
                grad[j] += 2.0 * s.weight * row[j] * r;
            }
        }
        let scale: f64 = samples
            .iter()
            .map(|s| s.second_moment.powi(2))
            .sum::<f64>()
            .sqrt();
        for j in 0..3 {
            if beta[j] == 0.0 {
                assert!(grad[j] >= -1e-8 * scale, "pinned coord {j}: {}", grad[j]);
            } else {
                assert!(grad[j].abs() <= 1e-8 * scale, "free coord {j}: {}", grad[j]);
            }
        }
        assert!(fit.active.contains(&2));
    }

    #[test]
    fn weights_are_clamped() {
        let ses: Vec<f64> = (1..=100).map(|i| i as f64).chain([0.0]).collect();
        let w = inverse_variance_weights(&ses);
        let finite: Vec<f64> = ses[..100].iter().map(|s| 1.0 / (s * s)).collect();
        let lo = percentile(&finite, 0.05);
        let hi = percentile(&finite, 0.95);
        assert!(w.iter().all(|x| *x >= lo && *x <= hi));
        assert_eq!(w[100], hi);
        assert_eq!(inverse_variance_weights(&[0.0, 0.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn minibatch_rhs_reductions() {
        let es = EsConstants::new(2.0, 0.7, 0.3);
        assert_eq!(minibatch_es_rhs(&es, 1, 1.5, 0.4), es.rhs(1.5, 0.4));
        let es1 = EsConstants::new(2.0, 1.0, 0.3);
        let vals: Vec<f64> = (1..10)
            .map(|t| minibatch_es_rhs(&es1, t, 1.5, 0.4))
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!((minibatch_es_rhs(&es1, 1_000_000, 1.5, 0.4) - 0.4).abs() < 1e-5);
    }

    #[test]
    fn gap_lemma_saturates_on_isotropic_quadratic() {
        let l = 2.5;
        let p = FiniteSumProblem::quadratic(
            vec![QuadraticComponent {
                eigenvalues: vec![l, l],
                b: Vector::zeros(2),
                c: 0.0,
            }],
            None,
        )
        .unwrap();
        let c = grad_gap_check(&p, &Vector::from_column_slice(&[0.3, -1.1])).unwrap();
        assert!((c.lhs - c.rhs).abs() < 1e-14);
        assert!(c.holds);
        let z = grad_gap_check(&p, &Vector::zeros(2)).unwrap();
        assert_eq!((z.lhs, z.rhs), (0.0, 0.0));
    }

    #[test]
    fn deterministic_scheme_has_no_variance() {
        let p = make_random_quadratic(&QuadraticSpec::new(4, 2, (0.5, 2.0), 1.0, 1)).unwrap();
        let x = Vector::from_column_slice(&[0.5, 0.5]);
        let v = variance_identity_check(&p, &SamplingScheme::tau_nice(4, 4).unwrap(), &x).unwrap();
        assert!(v.variance_direct.abs() < 1e-15);
        assert!(v.variance_via_decomposition.abs() < 1e-14);
    }

    #[test]
    fn minibatch_enumeration_matches_closed_form_variance_scaling() {
        let p = make_random_quadratic(&QuadraticSpec::new(4, 2, (0.5, 2.0), 1.0, 6)).unwrap();
        let s = SamplingScheme::tau_nice(4, 2).unwrap();
        let x = Vector::from_column_slice(&[0.2, -0.7]);
        let single = exact_second_moment(&p, &s, &x).unwrap();
        let g2 = p.grad_full(&x).unwrap().norm_squared();
        let es = closed_form_es(&s, &p).unwrap();
        let subopt = p.eval_full(&x).unwrap() - p.f_star();
        for tau in 1..=3 {
            let e = enumerate_minibatch_second_moment(&p, &s, tau, &x).unwrap();
            let expected = g2 + (single - g2) / tau as f64;
            assert!((e - expected).abs() <= 1e-12 * expected);
            assert!(e <= minibatch_es_rhs(&es, tau, subopt, g2) + 1e-9);
        }
    }

    #[test]
    fn switch_produces_crossover() {
        let model = ForwardModel {
            before: EsConstants::new(5.0, 0.2, 0.1),
            after: EsConstants::new(0.5, 2.0, 0.1),
            switch_step: 300,
            length: 600,
            noise: 0.02,
            seed: 4,
        };
        let fits = windowed_fit(&model.samples(), 40, 20).unwrap();
        let c = detect_crossover(&fits, 40).unwrap();
        assert!((c.center - 300.0).abs() <= 40.0, "{c:?}");
    }
}
