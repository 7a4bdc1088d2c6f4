//! Sampling vectors, stochastic gradients and their exact moments.
//!
//! A sampling vector `v` has `E[v_i] = 1` and defines the stochastic gradient
//! `∇f_v(x) = (1/n) Σ v_i ∇f_i(x)`. Three schemes are supported: sampling with replacement,
//! independent (Bernoulli) inclusion and τ-nice subsets. For each one the module exposes the
//! closed-form moments `E[v_i²]`, `E[v_i v_j]`, the resulting ES constants `(A, B, C)` and an
//! enumeration oracle that sums over every outcome of a small scheme.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problems::FiniteSumProblem;
use crate::{Error, Result, Vector};

/// Largest outcome space the enumeration oracle accepts.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Relative tolerance for pointwise ES checks.
pub const ES_RELATIVE_TOLERANCE: f64 = 1e-9;

/// Generator for `worker` derived from a master seed: `master XOR worker` through
/// `seed_from_u64`, on the given ChaCha stream. Stream 0 drives optimisation, stream 1 probes.
pub fn derive_rng(master: u64, worker: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ worker);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    /// `τ` categorical draws with probabilities `q`; `v_i = S_i / (τ q_i)`.
    WithReplacement {
        tau: usize,
        q: Vec<f64>,
        cumulative: Vec<f64>,
    },
    /// Each index kept independently with probability `p_i`; `v_i ∈ {0, 1/p_i}`.
    IndependentBernoulli { p: Vec<f64> },
    /// Uniform subset of size `τ`; `v_i ∈ {0, n/τ}`.
    TauNice { n: usize, tau: usize },
}

impl SamplingScheme {
    pub fn with_replacement(tau: usize, q: Vec<f64>) -> Result<Self> {
        if tau == 0 {
            return Err(Error::invalid("tau", "batch size must be >= 1"));
        }
        if q.is_empty() {
            return Err(Error::invalid("q", "need at least one probability"));
        }
        if q.iter().any(|qi| !(*qi > 0.0) || !qi.is_finite()) {
            return Err(Error::invalid("q", "all probabilities must be > 0"));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "q",
                format!("probabilities must sum to 1 (sum = {total})"),
            ));
        }
        let mut acc = 0.0;
        let cumulative = q
            .iter()
            .map(|qi| {
                acc += qi;
                acc
            })
            .collect();
        Ok(Self::WithReplacement { tau, q, cumulative })
    }

    pub fn uniform_with_replacement(n: usize, tau: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        Self::with_replacement(tau, vec![1.0 / n as f64; n])
    }

    pub fn independent(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("p", "need at least one probability"));
        }
        if p.iter().any(|pi| !(*pi > 0.0 && *pi <= 1.0)) {
            return Err(Error::invalid(
                "p",
                "inclusion probabilities must lie in (0, 1]",
            ));
        }
        Ok(Self::IndependentBernoulli { p })
    }

    pub fn tau_nice(n: usize, tau: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        if tau == 0 || tau > n {
            return Err(Error::invalid("tau", format!("need 1 <= tau <= n = {n}")));
        }
        Ok(Self::TauNice { n, tau })
    }

    pub fn n(&self) -> usize {
        match self {
            Self::WithReplacement { q, .. } => q.len(),
            Self::IndependentBernoulli { p } => p.len(),
            Self::TauNice { n, .. } => *n,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::WithReplacement { .. } => "with_replacement",
            Self::IndependentBernoulli { .. } => "independent",
            Self::TauNice { .. } => "tau_nice",
        }
    }

    /// True when every draw returns the all-ones vector.
    pub fn is_deterministic(&self) -> bool {
        match self {
            Self::WithReplacement { q, tau, .. } => q.len() == 1 && *tau >= 1,
            Self::IndependentBernoulli { p } => p.iter().all(|pi| *pi == 1.0),
            Self::TauNice { n, tau } => n == tau,
        }
    }

    /// Draws one sampling vector.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplingVector {
        let n = self.n();
        let mut weights = vec![0.0; n];
        match self {
            Self::WithReplacement { tau, q, cumulative } => {
                for _ in 0..*tau {
                    let u: f64 = rng.random();
                    // first index with u < cumulative[i]; ties go to the lower index
                    let i = cumulative.partition_point(|c| *c <= u).min(n - 1);
                    weights[i] += 1.0;
                }
                for (w, qi) in weights.iter_mut().zip(q) {
                    if *w > 0.0 {
                        *w /= *tau as f64 * qi;
                    }
                }
            }
            Self::IndependentBernoulli { p } => {
                for (w, pi) in weights.iter_mut().zip(p) {
                    if *pi >= 1.0 || rng.random::<f64>() < *pi {
                        *w = 1.0 / pi;
                    }
                }
            }
            Self::TauNice { n, tau } => {
                if tau == n {
                    weights.iter_mut().for_each(|w| *w = 1.0);
                } else {
                    let mut perm: Vec<usize> = (0..*n).collect();
                    let value = *n as f64 / *tau as f64;
                    for j in 0..*tau {
                        let k = rng.random_range(j..*n);
                        perm.swap(j, k);
                        weights[perm[j]] = value;
                    }
                }
            }
        }
        SamplingVector { weights }
    }

    /// Number of distinct outcomes the enumeration oracle would visit.
    pub fn outcome_count(&self) -> u128 {
        match self {
            Self::WithReplacement { tau, q, .. } => binomial(*tau + q.len() - 1, q.len() - 1),
            Self::IndependentBernoulli { p } => {
                let random = p.iter().filter(|pi| **pi < 1.0).count();
                if random >= 127 {
                    u128::MAX
                } else {
                    1u128 << random
                }
            }
            Self::TauNice { n, tau } => binomial(*n, *tau),
        }
    }

    /// Every outcome with its probability. Refuses spaces larger than [`ENUMERATION_LIMIT`].
    pub fn enumerate(&self) -> Result<Vec<Outcome>> {
        let count = self.outcome_count();
        if count > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge {
                count,
                limit: ENUMERATION_LIMIT,
            });
        }
        let n = self.n();
        let mut out = Vec::with_capacity(count as usize);
        match self {
            Self::WithReplacement { tau, q, .. } => {
                let mut counts = vec![0usize; n];
                compositions(*tau, 0, &mut counts, &mut |counts| {
                    let mut prob = 1.0;
                    let mut remaining = *tau;
                    for (s, qi) in counts.iter().zip(q) {
                        prob *= binomial(remaining, *s) as f64 * qi.powi(*s as i32);
                        remaining -= s;
                    }
                    let weights = counts
                        .iter()
                        .zip(q)
                        .map(|(s, qi)| *s as f64 / (*tau as f64 * qi))
                        .collect();
                    out.push(Outcome {
                        probability: prob,
                        vector: SamplingVector { weights },
                    });
                });
            }
            Self::IndependentBernoulli { p } => {
                let random: Vec<usize> = (0..n).filter(|i| p[*i] < 1.0).collect();
                for mask in 0u64..(1u64 << random.len()) {
                    let mut weights: Vec<f64> = p
                        .iter()
                        .map(|pi| if *pi >= 1.0 { 1.0 } else { 0.0 })
                        .collect();
                    let mut prob = 1.0;
                    for (bit, &i) in random.iter().enumerate() {
                        if mask >> bit & 1 == 1 {
                            weights[i] = 1.0 / p[i];
                            prob *= p[i];
                        } else {
                            prob *= 1.0 - p[i];
                        }
                    }
                    out.push(Outcome {
                        probability: prob,
                        vector: SamplingVector { weights },
                    });
                }
            }
            Self::TauNice { n, tau } => {
                let prob = 1.0 / binomial(*n, *tau) as f64;
                let value = *n as f64 / *tau as f64;
                let mut chosen = Vec::with_capacity(*tau);
                subsets(*n, *tau, 0, &mut chosen, &mut |set| {
                    let mut weights = vec![0.0; *n];
                    for &i in set {
                        weights[i] = value;
                    }
                    out.push(Outcome {
                        probability: prob,
                        vector: SamplingVector { weights },
                    });
                });
            }
        }
        Ok(out)
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

fn compositions(remaining: usize, idx: usize, counts: &mut [usize], f: &mut dyn FnMut(&[usize])) {
    if idx + 1 == counts.len() {
        counts[idx] = remaining;
        f(counts);
        counts[idx] = 0;
        return;
    }
    for s in (0..=remaining).rev() {
        counts[idx] = s;
        compositions(remaining - s, idx + 1, counts, f);
    }
    counts[idx] = 0;
}

fn subsets(n: usize, k: usize, start: usize, chosen: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if chosen.len() == k {
        f(chosen);
        return;
    }
    for i in start..n {
        if n - i < k - chosen.len() {
            break;
        }
        chosen.push(i);
        subsets(n, k, i + 1, chosen, f);
        chosen.pop();
    }
}

/// Nonnegative weights `v` with `E[v_i] = 1` under their scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingVector {
    pub weights: Vec<f64>,
}

impl SamplingVector {
    pub fn ones(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    /// `(index, weight)` pairs with nonzero weight.
    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (i, *w))
    }
}

/// One outcome of an enumerated scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub probability: f64,
    pub vector: SamplingVector,
}

/// Closed-form `E[v_i²]` and the (pair-independent) `E[v_i v_j]`, `i ≠ j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeMoments {
    pub e_v2: Vec<f64>,
    /// `None` when `n = 1` and there are no pairs.
    pub e_vivj: Option<f64>,
}

pub fn scheme_moments(scheme: &SamplingScheme) -> SchemeMoments {
    let n = scheme.n();
    let (e_v2, pair) = match scheme {
        SamplingScheme::WithReplacement { tau, q, .. } => {
            let t = *tau as f64;
            (
                q.iter().map(|qi| 1.0 - 1.0 / t + 1.0 / (t * qi)).collect(),
                1.0 - 1.0 / t,
            )
        }
        SamplingScheme::IndependentBernoulli { p } => (p.iter().map(|pi| 1.0 / pi).collect(), 1.0),
        SamplingScheme::TauNice { n, tau } => {
            let (nf, t) = (*n as f64, *tau as f64);
            let pair = if *n > 1 {
                nf * (t - 1.0) / (t * (nf - 1.0))
            } else {
                f64::NAN
            };
            (vec![nf / t; *n], pair)
        }
    };
    SchemeMoments {
        e_v2,
        e_vivj: (n > 1).then_some(pair),
    }
}

/// Moments of a scheme computed by summing over every outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedMoments {
    pub e_v: Vec<f64>,
    pub e_v2: Vec<f64>,
    /// Full `n × n` table of `E[v_i v_j]` (diagonal equals `e_v2`).
    pub e_vivj: Vec<Vec<f64>>,
    pub total_probability: f64,
}

pub fn enumerate_moments(scheme: &SamplingScheme) -> Result<EnumeratedMoments> {
    let n = scheme.n();
    let mut e_v = vec![0.0; n];
    let mut table = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for o in scheme.enumerate()? {
        total += o.probability;
        let w = &o.vector.weights;
        for i in 0..n {
            e_v[i] += o.probability * w[i];
            for j in 0..n {
                table[i][j] += o.probability * w[i] * w[j];
            }
        }
    }
    Ok(EnumeratedMoments {
        e_v,
        e_v2: (0..n).map(|i| table[i][i]).collect(),
        e_vivj: table,
        total_probability: total,
    })
}

/// ES constants `(A, B, C)` of the bound `E‖g‖² ≤ 2A(f − f⋆) + B‖∇f‖² + C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EsConstants {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// `2A·subopt + B·grad_sq + C`.
    pub fn rhs(&self, subopt: f64, grad_sq: f64) -> f64 {
        2.0 * self.a * subopt + self.b * grad_sq + self.c
    }
}

/// Which `A` to use for sampling with replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WithReplacementForm {
    /// `A = max_i L_i / (τ n q_i)`, the constant the moment expansion actually yields.
    #[default]
    Derived,
    /// `A = (1/τ) max_i L_i / q_i`, looser by a factor `n`; kept for comparison.
    Loose,
}

/// Closed-form ES constants for `scheme` on `problem`, with `C = 2AΔ^inf`.
pub fn closed_form_es(scheme: &SamplingScheme, problem: &FiniteSumProblem) -> Result<EsConstants> {
    closed_form_es_with(scheme, problem, WithReplacementForm::Derived)
}

pub fn closed_form_es_with(
    scheme: &SamplingScheme,
    problem: &FiniteSumProblem,
    form: WithReplacementForm,
) -> Result<EsConstants> {
    let n = problem.n();
    if scheme.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: scheme.n(),
        });
    }
    let nf = n as f64;
    let l = problem.l_each();
    let (a, b) = match scheme {
        SamplingScheme::WithReplacement { tau, q, .. } => {
            let t = *tau as f64;
            let ratio = l.iter().zip(q).map(|(li, qi)| li / qi).fold(0.0, f64::max);
            let a = match form {
                WithReplacementForm::Derived => ratio / (t * nf),
                WithReplacementForm::Loose => ratio / t,
            };
            (a, 1.0 - 1.0 / t)
        }
        SamplingScheme::IndependentBernoulli { p } => {
            let a = l
                .iter()
                .zip(p)
                .map(|(li, pi)| (1.0 - pi) * li / (pi * nf))
                .fold(0.0, f64::max);
            (a, 1.0)
        }
        SamplingScheme::TauNice { n, tau } => {
            if n == tau {
                (0.0, 1.0)
            } else {
                let (nf, t) = (*n as f64, *tau as f64);
                (
                    (nf - t) / (t * (nf - 1.0)) * problem.l_max(),
                    nf * (t - 1.0) / (t * (nf - 1.0)),
                )
            }
        }
    };
    Ok(EsConstants {
        a,
        b,
        c: 2.0 * a * problem.delta_inf(),
    })
}

/// `(1/n) Σ v_i ∇f_i(x)`, skipping zero weights.
pub fn stochastic_grad(
    problem: &FiniteSumProblem,
    v: &SamplingVector,
    x: &Vector,
) -> Result<Vector> {
    if v.weights.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            expected: problem.n(),
            got: v.weights.len(),
        });
    }
    if x.len() != problem.d() {
        return Err(Error::DimensionMismatch {
            expected: problem.d(),
            got: x.len(),
        });
    }
    let mut g = Vector::zeros(problem.d());
    add_stochastic_grad(problem, v, x, 1.0, &mut g);
    Ok(g)
}

/// `acc += scale · ∇f_v(x)` without dimension checks.
pub(crate) fn add_stochastic_grad(
    problem: &FiniteSumProblem,
    v: &SamplingVector,
    x: &Vector,
    scale: f64,
    acc: &mut Vector,
) {
    let inv_n = 1.0 / problem.n() as f64;
    for (i, w) in v.nonzeros() {
        problem.add_scaled_grad(i, x, scale * w * inv_n, acc);
    }
}

/// Exact `E‖∇f_v(x)‖²` from the closed-form moments:
/// `(1/n²) [Σ E[v_i²] ‖∇f_i‖² + E[v_i v_j] Σ_{i≠j} ⟨∇f_i, ∇f_j⟩]`.
pub fn exact_second_moment(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
) -> Result<f64> {
    if scheme.n() != problem.n() {
        return Err(Error::DimensionMismatch {
            expected: problem.n(),
            got: scheme.n(),
        });
    }
    let grads = problem.component_grads(x)?;
    Ok(second_moment_from_grads(&scheme_moments(scheme), &grads))
}

pub(crate) fn second_moment_from_grads(moments: &SchemeMoments, grads: &[Vector]) -> f64 {
    let n = grads.len() as f64;
    let mut diag = 0.0;
    let mut sum_sq = 0.0;
    let mut total = Vector::zeros(grads[0].len());
    for (g, e2) in grads.iter().zip(&moments.e_v2) {
        let sq = g.norm_squared();
        diag += e2 * sq;
        sum_sq += sq;
        total += g;
    }
    let cross = match moments.e_vivj {
        Some(pair) => pair * (total.norm_squared() - sum_sq),
        None => 0.0,
    };
    (diag + cross) / (n * n)
}

/// Exact `E‖∇f_v(x)‖²` by brute force over every outcome of the scheme.
pub fn enumerate_second_moment(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
) -> Result<f64> {
    let outcomes = scheme.enumerate()?;
    let mut acc = 0.0;
    for o in &outcomes {
        acc += o.probability * stochastic_grad(problem, &o.vector, x)?.norm_squared();
    }
    Ok(acc)
}

/// Enumeration-weighted mean of the stochastic gradient.
pub fn enumerate_mean_grad(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
) -> Result<Vector> {
    let mut acc = Vector::zeros(problem.d());
    for o in scheme.enumerate()? {
        acc += stochastic_grad(problem, &o.vector, x)? * o.probability;
    }
    Ok(acc)
}

/// Outcome of a pointwise ES check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares the exact second moment against the closed-form ES right-hand side at `x`.
pub fn verify_es_pointwise(
    problem: &FiniteSumProblem,
    scheme: &SamplingScheme,
    x: &Vector,
) -> Result<EsCheck> {
    let es = closed_form_es(scheme, problem)?;
    let lhs = exact_second_moment(problem, scheme, x)?;
    let subopt = problem.eval_full(x)? - problem.f_star();
    let grad_sq = problem.grad_full(x)?.norm_squared();
    let rhs = es.rhs(subopt, grad_sq);
    let holds = lhs <= rhs + ES_RELATIVE_TOLERANCE * (1.0 + rhs.abs()) + problem.infimum_slack();
    Ok(EsCheck { lhs, rhs, holds })
}
