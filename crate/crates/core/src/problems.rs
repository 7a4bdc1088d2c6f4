//! Finite-sum objectives `f(x) = (1/n) Σ f_i(x)` with certified constants.
//!
//! Every problem carries the per-component smoothness constants `L_i`, their mean `L̄`,
//! the component infima `f_i^inf`, the global infimum `f⋆` and the heterogeneity gap
//! `Δ^inf = (1/n) Σ (f⋆ − f_i^inf)`. Quadratics get all of these in closed form; logistic
//! regression computes infima numerically and flags the problem so that bound checks can
//! add a small absolute slack.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result, Vector};

/// Absolute slack added to inequality checks whenever `f⋆` / `f_i^inf` are numeric.
pub const NUMERIC_INFIMUM_SLACK: f64 = 1e-8;

/// How the per-component diagonal spectra are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectrumLayout {
    /// Every eigenvalue uniform on `[λ_min, λ_max]`.
    #[default]
    Uniform,
    /// Coordinate `j` of every component is log-uniform inside the `j`-th of `d` equal
    /// log-bins of `[λ_min, λ_max]`, so the averaged Hessian has a geometric spectrum.
    LogStratified,
}

/// Parameters for [`make_random_quadratic`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub n: usize,
    pub d: usize,
    pub spectrum: (f64, f64),
    pub heterogeneity: f64,
    pub seed: u64,
    pub rotate: bool,
    pub layout: SpectrumLayout,
}

impl QuadraticSpec {
    pub fn new(n: usize, d: usize, spectrum: (f64, f64), heterogeneity: f64, seed: u64) -> Self {
        Self {
            n,
            d,
            spectrum,
            heterogeneity,
            seed,
            rotate: false,
            layout: SpectrumLayout::Uniform,
        }
    }

    pub fn rotated(mut self) -> Self {
        self.rotate = true;
        self
    }

    pub fn with_layout(mut self, layout: SpectrumLayout) -> Self {
        self.layout = layout;
        self
    }
}

/// One quadratic component `½ xᵀ A x + bᵀ x + c` with `A = Q diag(eigenvalues) Qᵀ`,
/// where the rotation `Q` is shared by all components of a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticComponent {
    pub eigenvalues: Vec<f64>,
    pub b: Vector,
    pub c: f64,
}

#[derive(Debug, Clone)]
struct Quadratic {
    rotation: Option<DMatrix<f64>>,
    components: Vec<QuadraticComponent>,
    mean_eigenvalues: Vec<f64>,
    mean_b: Vector,
    mean_c: f64,
}

impl Quadratic {
    fn to_eigenbasis(&self, x: &Vector) -> Vector {
        match &self.rotation {
            Some(q) => q.tr_mul(x),
            None => x.clone(),
        }
    }

    fn to_original_basis(&self, y: Vector) -> Vector {
        match &self.rotation {
            Some(q) => q * y,
            None => y,
        }
    }

    /// `A x` for a diagonal-in-eigenbasis matrix.
    fn apply(&self, eigenvalues: &[f64], x: &Vector) -> Vector {
        let mut y = self.to_eigenbasis(x);
        for (yj, lam) in y.iter_mut().zip(eigenvalues) {
            *yj *= lam;
        }
        self.to_original_basis(y)
    }

    fn value(&self, eigenvalues: &[f64], b: &Vector, c: f64, x: &Vector) -> f64 {
        let y = self.to_eigenbasis(x);
        let quad: f64 = y.iter().zip(eigenvalues).map(|(yj, l)| l * yj * yj).sum();
        0.5 * quad + b.dot(x) + c
    }

    /// Minimizer and minimum value of `½xᵀAx + bᵀx + c`, or an error when `b` leaves the
    /// range of `A` (unbounded below).
    fn minimize(&self, eigenvalues: &[f64], b: &Vector, c: f64) -> Result<(Vector, f64)> {
        let bt = self.to_eigenbasis(b);
        let scale = bt.amax().max(1.0);
        let mut yt = Vector::zeros(bt.len());
        let mut value = c;
        for j in 0..bt.len() {
            let lam = eigenvalues[j];
            if lam > 0.0 {
                yt[j] = -bt[j] / lam;
                value -= 0.5 * bt[j] * bt[j] / lam;
            } else if bt[j].abs() > 1e-12 * scale {
                return Err(Error::invalid(
                    "b",
                    "linear term has a component in the null space of A; component is unbounded below",
                ));
            }
        }
        Ok((self.to_original_basis(yt), value))
    }
}

#[derive(Debug, Clone)]
struct Logistic {
    features: Vec<Vector>,
    labels: Vec<f64>,
    lambda: f64,
}

/// Numerically stable `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    fn value(&self, i: usize, x: &Vector) -> f64 {
        let margin = self.labels[i] * self.features[i].dot(x);
        softplus(-margin) + 0.5 * self.lambda * x.norm_squared()
    }

    fn add_grad(&self, i: usize, x: &Vector, scale: f64, acc: &mut Vector) {
        let a = &self.features[i];
        let y = self.labels[i];
        let coef = -y * sigmoid(-y * a.dot(x));
        acc.axpy(scale * coef, a, 1.0);
        acc.axpy(scale * self.lambda, x, 1.0);
    }

    /// Infimum of a single component. The minimizer lies on `t·a_i`; with `u = y·t` the
    /// stationarity condition is `λu = σ(−‖a‖²u)`, monotone in `u ∈ [0, 1/λ]`.
    fn component_infimum(&self, i: usize) -> f64 {
        let s = self.features[i].norm_squared();
        let lam = self.lambda;
        let (mut lo, mut hi) = (0.0, 1.0 / lam);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if lam * mid - sigmoid(-s * mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let u = 0.5 * (lo + hi);
        softplus(-s * u) + 0.5 * lam * s * u * u
    }

    fn full_value(&self, x: &Vector) -> f64 {
        let n = self.labels.len();
        (0..n).map(|i| self.value(i, x)).sum::<f64>() / n as f64
    }

    fn full_grad(&self, x: &Vector) -> Vector {
        let n = self.labels.len();
        let mut g = Vector::zeros(x.len());
        for i in 0..n {
            self.add_grad(i, x, 1.0 / n as f64, &mut g);
        }
        g
    }

    fn full_hessian(&self, x: &Vector) -> DMatrix<f64> {
        let n = self.labels.len();
        let d = x.len();
        let mut h = DMatrix::identity(d, d) * self.lambda;
        for i in 0..n {
            let a = &self.features[i];
            let s = sigmoid(self.labels[i] * a.dot(x));
            h.ger(s * (1.0 - s) / n as f64, a, a, 1.0);
        }
        h
    }

    /// Damped Newton with Armijo backtracking, run until the gradient stalls below 1e-10.
    fn minimize(&self, d: usize) -> (Vector, f64) {
        let mut x = Vector::zeros(d);
        let mut fx = self.full_value(&x);
        for _ in 0..200 {
            let g = self.full_grad(&x);
            let gnorm = g.norm();
            if gnorm <= 1e-13 {
                break;
            }
            let h = self.full_hessian(&x);
            let step = match h.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => -g.clone(),
            };
            let slope = g.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand = &x + &step * t;
                let fc = self.full_value(&cand);
                if fc <= fx + 1e-4 * t * slope {
                    x = cand;
                    fx = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // Armijo cannot distinguish values any more; accept the full Newton step
                // only if it reduces the gradient norm.
                let cand = &x + &step;
                if self.full_grad(&cand).norm() < gnorm {
                    x = cand;
                    fx = self.full_value(&x);
                } else {
                    break;
                }
            }
        }
        (x, fx)
    }
}

#[derive(Debug, Clone)]
enum Objective {
    Quadratic(Quadratic),
    Logistic(Logistic),
}

/// A finite-sum objective with exact gradient oracles and certified constants.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct FiniteSumProblem {
    n: usize,
    d: usize,
    l_each: Vec<f64>,
    l_bar: f64,
    f_star: f64,
    x_star: Option<Vector>,
    f_inf_each: Vec<f64>,
    delta_inf: f64,
    numeric_infimum: bool,
    objective: Objective,
}

impl FiniteSumProblem {
    /// Builds a quadratic problem from explicit components sharing an optional rotation.
    pub fn quadratic(
        components: Vec<QuadraticComponent>,
        rotation: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::invalid("n", "need at least one component"));
        }
        let d = components[0].eigenvalues.len();
        if d == 0 {
            return Err(Error::invalid("d", "dimension must be positive"));
        }
        if let Some(q) = &rotation {
            if q.nrows() != d || q.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: q.nrows(),
                });
            }
        }
        for comp in &components {
            if comp.eigenvalues.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: comp.eigenvalues.len(),
                });
            }
            if comp.b.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: comp.b.len(),
                });
            }
            if comp
                .eigenvalues
                .iter()
                .any(|l| !(*l >= 0.0) || !l.is_finite())
            {
                return Err(Error::invalid(
                    "spectrum",
                    "eigenvalues must be finite and nonnegative",
                ));
            }
        }

        let mut mean_eigenvalues = vec![0.0; d];
        let mut mean_b = Vector::zeros(d);
        let mut mean_c = 0.0;
        for comp in &components {
            for (m, l) in mean_eigenvalues.iter_mut().zip(&comp.eigenvalues) {
                *m += l;
            }
            mean_b += &comp.b;
            mean_c += comp.c;
        }
        let nf = n as f64;
        mean_eigenvalues.iter_mut().for_each(|m| *m /= nf);
        mean_b /= nf;
        mean_c /= nf;

        let quad = Quadratic {
            rotation,
            components,
            mean_eigenvalues,
            mean_b,
            mean_c,
        };

        let l_each: Vec<f64> = quad
            .components
            .iter()
            .map(|c| c.eigenvalues.iter().copied().fold(0.0, f64::max))
            .collect();
        let mut f_inf_each = Vec::with_capacity(n);
        for comp in &quad.components {
            let (_, v) = quad.minimize(&comp.eigenvalues, &comp.b, comp.c)?;
            f_inf_each.push(v);
        }
        let (x_star, f_star) = quad.minimize(&quad.mean_eigenvalues, &quad.mean_b, quad.mean_c)?;

        Ok(Self::assemble(
            d,
            l_each,
            f_star,
            Some(x_star),
            f_inf_each,
            false,
            Objective::Quadratic(quad),
        ))
    }

    /// Builds an ℓ2-regularised logistic regression problem from explicit data.
    ///
    /// Labels must be ±1. Infima are computed numerically.
    pub fn logistic(features: Vec<Vector>, labels: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", "ridge coefficient must be > 0"));
        }
        let n = features.len();
        if n == 0 {
            return Err(Error::invalid("n", "need at least one component"));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
            });
        }
        let d = features[0].len();
        if d == 0 {
            return Err(Error::invalid("d", "dimension must be positive"));
        }
        if let Some(a) = features.iter().find(|a| a.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.len(),
            });
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::invalid("labels", "labels must be +1 or -1"));
        }
        let log = Logistic {
            features,
            labels,
            lambda,
        };
        let l_each: Vec<f64> = log
            .features
            .iter()
            .map(|a| 0.25 * a.norm_squared() + lambda)
            .collect();
        let f_inf_each: Vec<f64> = (0..n).map(|i| log.component_infimum(i)).collect();
        let (x_star, f_star) = log.minimize(d);
        Ok(Self::assemble(
            d,
            l_each,
            f_star,
            Some(x_star),
            f_inf_each,
            true,
            Objective::Logistic(log),
        ))
    }

    fn assemble(
        d: usize,
        l_each: Vec<f64>,
        f_star: f64,
        x_star: Option<Vector>,
        f_inf_each: Vec<f64>,
        numeric_infimum: bool,
        objective: Objective,
    ) -> Self {
        let n = l_each.len();
        let l_bar = l_each.iter().sum::<f64>() / n as f64;
        let delta_inf = f_inf_each.iter().map(|fi| f_star - fi).sum::<f64>() / n as f64;
        Self {
            n,
            d,
            l_each,
            l_bar,
            f_star,
            x_star,
            f_inf_each,
            delta_inf,
            numeric_infimum,
            objective,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Per-component smoothness constants `L_i`.
    pub fn l_each(&self) -> &[f64] {
        &self.l_each
    }

    /// `L̄ = (1/n) Σ L_i`, a smoothness constant of `f`.
    pub fn l_bar(&self) -> f64 {
        self.l_bar
    }

    pub fn l_max(&self) -> f64 {
        self.l_each.iter().copied().fold(0.0, f64::max)
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn x_star(&self) -> Option<&Vector> {
        self.x_star.as_ref()
    }

    pub fn f_inf_each(&self) -> &[f64] {
        &self.f_inf_each
    }

    pub fn delta_inf(&self) -> f64 {
        self.delta_inf
    }

    /// True when `f⋆` and the `f_i^inf` come from a numerical minimisation.
    pub fn numeric_infimum(&self) -> bool {
        self.numeric_infimum
    }

    /// Absolute slack inequality checks should grant for numeric infima.
    pub fn infimum_slack(&self) -> f64 {
        if self.numeric_infimum {
            NUMERIC_INFIMUM_SLACK
        } else {
            0.0
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.objective, Objective::Quadratic(_))
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange {
                index: i,
                n: self.n,
            });
        }
        Ok(())
    }

    pub fn eval_component(&self, i: usize, x: &Vector) -> Result<f64> {
        self.check_index(i)?;
        self.check_dim(x)?;
        Ok(self.eval_component_unchecked(i, x))
    }

    pub fn grad_component(&self, i: usize, x: &Vector) -> Result<Vector> {
        self.check_index(i)?;
        self.check_dim(x)?;
        let mut g = Vector::zeros(self.d);
        self.add_scaled_grad(i, x, 1.0, &mut g);
        Ok(g)
    }

    pub fn eval_full(&self, x: &Vector) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.eval_full_unchecked(x))
    }

    pub fn grad_full(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        Ok(self.grad_full_unchecked(x))
    }

    /// All component gradients at `x`.
    pub fn component_grads(&self, x: &Vector) -> Result<Vec<Vector>> {
        self.check_dim(x)?;
        Ok((0..self.n)
            .map(|i| {
                let mut g = Vector::zeros(self.d);
                self.add_scaled_grad(i, x, 1.0, &mut g);
                g
            })
            .collect())
    }

    pub(crate) fn eval_component_unchecked(&self, i: usize, x: &Vector) -> f64 {
        match &self.objective {
            Objective::Quadratic(q) => {
                let c = &q.components[i];
                q.value(&c.eigenvalues, &c.b, c.c, x)
            }
            Objective::Logistic(l) => l.value(i, x),
        }
    }

    /// `acc += scale · ∇f_i(x)`.
    pub(crate) fn add_scaled_grad(&self, i: usize, x: &Vector, scale: f64, acc: &mut Vector) {
        match &self.objective {
            Objective::Quadratic(q) => {
                let c = &q.components[i];
                let ax = q.apply(&c.eigenvalues, x);
                acc.axpy(scale, &ax, 1.0);
                acc.axpy(scale, &c.b, 1.0);
            }
            Objective::Logistic(l) => l.add_grad(i, x, scale, acc),
        }
    }

    pub(crate) fn eval_full_unchecked(&self, x: &Vector) -> f64 {
        match &self.objective {
            Objective::Quadratic(q) => q.value(&q.mean_eigenvalues, &q.mean_b, q.mean_c, x),
            Objective::Logistic(l) => l.full_value(x),
        }
    }

    pub(crate) fn grad_full_unchecked(&self, x: &Vector) -> Vector {
        match &self.objective {
            Objective::Quadratic(q) => {
                let mut g = q.apply(&q.mean_eigenvalues, x);
                g += &q.mean_b;
                g
            }
            Objective::Logistic(l) => l.full_grad(x),
        }
    }

    /// A start point whose initial gap `f(x₀) − f⋆` is spread evenly over the eigen-directions
    /// of the averaged Hessian: `x₀ = x⋆ + Q diag(λ̄)^{-1/2} 1`. Quadratics only.
    ///
    /// On a geometric spectrum this start makes `‖∇f(x_k)‖²` decay like `1/Σ η_j` over many
    /// decades, which is what rate experiments need.
    pub fn balanced_start(&self) -> Option<Vector> {
        let Objective::Quadratic(q) = &self.objective else {
            return None;
        };
        let y = Vector::from_iterator(
            self.d,
            q.mean_eigenvalues
                .iter()
                .map(|l| if *l > 0.0 { 1.0 / l.sqrt() } else { 0.0 }),
        );
        let offset = q.to_original_basis(y);
        Some(
            self.x_star
                .as_ref()
                .map_or(offset.clone(), |xs| xs + offset),
        )
    }

    /// Seeded probe points `center + radius·N(0, I)` around `x⋆` (or the origin).
    pub fn sample_points(&self, count: usize, radius: f64, seed: u64) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = self.x_star.clone().unwrap_or_else(|| Vector::zeros(self.d));
        (0..count)
            .map(|_| {
                let noise = Vector::from_fn(self.d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &center + noise * radius
            })
            .collect()
    }
}

/// Random quadratic test problem with closed-form constants.
///
/// Component `i` is `½ (x − m_i)ᵀ A_i (x − m_i)` written as `½xᵀA_ix + b_iᵀx + c_i`, with
/// `m_i = heterogeneity · ξ_i`, `ξ_i ~ N(0, I)`. With `heterogeneity = 0` all components share
/// the minimiser `0` and `Δ^inf = 0` exactly.
pub fn make_random_quadratic(spec: &QuadraticSpec) -> Result<FiniteSumProblem> {
    let QuadraticSpec {
        n,
        d,
        spectrum: (lmin, lmax),
        heterogeneity,
        seed,
        rotate,
        layout,
    } = *spec;
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "must be >= 1"));
    }
    if !(lmin >= 0.0) {
        return Err(Error::invalid(
            "spectrum",
            "lambda_min must be >= 0 (components would be unbounded below)",
        ));
    }
    if !(lmax >= lmin) || !lmax.is_finite() {
        return Err(Error::invalid(
            "spectrum",
            "need lambda_min <= lambda_max < inf",
        ));
    }
    if !(heterogeneity >= 0.0) || !heterogeneity.is_finite() {
        return Err(Error::invalid("heterogeneity", "must be finite and >= 0"));
    }
    if layout == SpectrumLayout::LogStratified && lmin == 0.0 {
        return Err(Error::invalid(
            "spectrum",
            "log-stratified layout needs lambda_min > 0",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = if rotate {
        Some(random_orthogonal(d, &mut rng))
    } else {
        None
    };

    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let eigenvalues: Vec<f64> = (0..d)
            .map(|j| match layout {
                SpectrumLayout::Uniform => {
                    if lmax > lmin {
                        rng.random_range(lmin..=lmax)
                    } else {
                        lmin
                    }
                }
                SpectrumLayout::LogStratified => {
                    let t = (j as f64 + rng.random::<f64>()) / d as f64;
                    (lmin.ln() * (1.0 - t) + lmax.ln() * t)
                        .exp()
                        .clamp(lmin, lmax)
                }
            })
            .collect();
        let center = Vector::from_fn(d, |_, _| {
            heterogeneity * rng.sample::<f64, _>(StandardNormal)
        });
        let (b, c) = if heterogeneity == 0.0 {
            (Vector::zeros(d), 0.0)
        } else {
            // b = −A m, c = ½ mᵀ A m
            let mt = match &rotation {
                Some(q) => q.tr_mul(&center),
                None => center.clone(),
            };
            let mut amt = mt.clone();
            for (v, l) in amt.iter_mut().zip(&eigenvalues) {
                *v *= l;
            }
            let c = 0.5 * mt.dot(&amt);
            let am = match &rotation {
                Some(q) => q * amt,
                None => amt,
            };
            (-am, c)
        };
        components.push(QuadraticComponent { eigenvalues, b, c });
    }
    FiniteSumProblem::quadratic(components, rotation)
}

/// Seeded Haar-ish orthogonal matrix from the QR factorisation of a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Synthetic ℓ2-regularised logistic regression with seeded data.
///
/// Features are standard normal; labels come from a random linear teacher with label noise.
pub fn make_logistic(n: usize, d: usize, lambda: f64, seed: u64) -> Result<FiniteSumProblem> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "must be >= 1"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda", "ridge coefficient must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let a = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise: f64 = rng.sample(StandardNormal);
        labels.push(if a.dot(&teacher) + noise >= 0.0 {
            1.0
        } else {
            -1.0
        });
        features.push(a);
    }
    FiniteSumProblem::logistic(features, labels, lambda)
}

/// Max relative error between analytic and central-difference gradients, over every
/// component and the full objective. Errors are `‖g_fd − g‖_∞ / max(1, ‖g‖_∞)`.
pub fn finite_diff_check(problem: &FiniteSumProblem, x: &Vector, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("h", "finite-difference step must be > 0"));
    }
    problem.check_dim(x)?;
    let d = problem.d;
    let rel = |analytic: &Vector, f: &dyn Fn(&Vector) -> f64| {
        let mut worst: f64 = 0.0;
        let mut xp = x.clone();
        for j in 0..d {
            let orig = xp[j];
            xp[j] = orig + h;
            let fp = f(&xp);
            xp[j] = orig - h;
            let fm = f(&xp);
            xp[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - analytic[j]).abs());
        }
        worst / analytic.amax().max(1.0)
    };
    let mut worst: f64 = 0.0;
    for i in 0..problem.n {
        let g = problem.grad_component(i, x)?;
        worst = worst.max(rel(&g, &|p| problem.eval_component_unchecked(i, p)));
    }
    let g = problem.grad_full_unchecked(x);
    worst = worst.max(rel(&g, &|p| problem.eval_full_unchecked(p)));
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn single_symmetric_component() {
        let p = make_random_quadratic(&QuadraticSpec::new(1, 1, (2.0, 2.0), 0.0, 99)).unwrap();
        assert_eq!(p.l_bar(), 2.0);
        assert_eq!(p.f_star(), 0.0);
        assert_eq!(p.delta_inf(), 0.0);
        // f(x) = x²
        assert_eq!(p.eval_full(&v(&[3.0])).unwrap(), 9.0);
        assert_eq!(p.grad_full(&v(&[3.0])).unwrap()[0], 6.0);
    }

    #[test]
    fn homogeneous_has_zero_gap() {
        for rotate in [false, true] {
            let mut spec = QuadraticSpec::new(4, 3, (0.5, 3.0), 0.0, 11);
            spec.rotate = rotate;
            let p = make_random_quadratic(&spec).unwrap();
            assert_eq!(p.delta_inf(), 0.0);
            assert!(p.f_inf_each().iter().all(|fi| *fi == p.f_star()));
        }
    }

    #[test]
    fn heterogeneous_gap_matches_independent_minimisation() {
        let p = make_random_quadratic(&QuadraticSpec::new(5, 2, (1.0, 10.0), 1.0, 7)).unwrap();
        assert!(p.delta_inf() > 0.0);
        // Oracle: each f_i = ½(x − m_i)ᵀA_i(x − m_i), so f_i^inf = 0 and f⋆ is f at the
        // solution of (Σ A_i) x = −Σ b_i, obtained here by a dense solve.
        let d = 2;
        let mut a_sum = DMatrix::<f64>::zeros(d, d);
        let mut b_sum = Vector::zeros(d);
        let Objective::Quadratic(q) = &p.objective else {
            unreachable!()
        };
        for comp in &q.components {
            a_sum += DMatrix::from_diagonal(&Vector::from_column_slice(&comp.eigenvalues));
            b_sum += &comp.b;
        }
        let xs = a_sum.lu().solve(&(-b_sum)).unwrap();
        let f_star = p.eval_full(&xs).unwrap();
        for fi in p.f_inf_each() {
            assert!(fi.abs() < 1e-12);
        }
        let expected_gap = f_star - p.f_inf_each().iter().sum::<f64>() / 5.0;
        assert!((p.delta_inf() - expected_gap).abs() < 1e-12);
        assert!((p.f_star() - f_star).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_spectrum() {
        let err = make_random_quadratic(&QuadraticSpec::new(2, 2, (-1.0, 1.0), 0.0, 1));
        assert!(matches!(err, Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn explicit_quadratic_gradient() {
        let p = FiniteSumProblem::quadratic(
            vec![QuadraticComponent {
                eigenvalues: vec![2.0, 2.0],
                b: Vector::zeros(2),
                c: 0.0,
            }],
            None,
        )
        .unwrap();
        assert_eq!(
            p.grad_component(0, &v(&[1.0, 1.0])).unwrap(),
            v(&[2.0, 2.0])
        );
        assert!(matches!(
            p.grad_component(1, &v(&[1.0, 1.0])),
            Err(Error::IndexOutOfRange { index: 1, n: 1 })
        ));
        assert!(matches!(
            p.grad_full(&v(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logistic_zero_feature() {
        let p = FiniteSumProblem::logistic(vec![v(&[0.0])], vec![1.0], 1.0).unwrap();
        assert!((p.f_star() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(p.x_star().unwrap()[0].abs() < 1e-15);
        assert_eq!(p.grad_component(0, &v(&[0.7])).unwrap()[0], 0.7);
        assert!((p.eval_full(&v(&[2.0])).unwrap() - (std::f64::consts::LN_2 + 2.0)).abs() < 1e-15);
        assert!(p.numeric_infimum());
    }

    #[test]
    fn logistic_minimiser_is_stationary() {
        let p = make_logistic(8, 4, 0.1, 3).unwrap();
        let g = p.grad_full(p.x_star().unwrap()).unwrap();
        assert!(g.norm() <= 1e-8, "grad norm {}", g.norm());
    }

    #[test]
    fn logistic_rejects_bad_lambda() {
        assert!(make_logistic(3, 2, 0.0, 1).is_err());
        assert!(make_logistic(3, 2, -1.0, 1).is_err());
    }

    #[test]
    fn logistic_component_infima_are_lower_bounds() {
        let p = make_logistic(6, 3, 0.05, 17).unwrap();
        for x in p.sample_points(100, 3.0, 5) {
            for i in 0..p.n() {
                assert!(p.eval_component(i, &x).unwrap() >= p.f_inf_each()[i] - 1e-12);
            }
        }
        assert!(p.delta_inf() >= 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
    }

    #[test]
    fn finite_differences() {
        let q =
            make_random_quadratic(&QuadraticSpec::new(4, 3, (0.5, 4.0), 1.0, 2).rotated()).unwrap();
        let x = v(&[0.3, -1.2, 0.8]);
        assert!(finite_diff_check(&q, &x, 1e-5).unwrap() <= 1e-8);
        let l = make_logistic(5, 3, 0.1, 4).unwrap();
        assert!(finite_diff_check(&l, &x, 1e-5).unwrap() <= 1e-6);
        assert!(finite_diff_check(&l, &x, 0.0).is_err());
    }

    #[test]
    fn two_identical_components() {
        let comp = QuadraticComponent {
            eigenvalues: vec![1.0, 3.0],
            b: v(&[0.5, -1.0]),
            c: 0.25,
        };
        let p = FiniteSumProblem::quadratic(vec![comp.clone(), comp], None).unwrap();
        let x = v(&[0.4, 0.9]);
        assert_eq!(p.grad_full(&x).unwrap(), p.grad_component(0, &x).unwrap());
    }

    #[test]
    fn rejects_linear_term_outside_range() {
        let comp = QuadraticComponent {
            eigenvalues: vec![0.0, 1.0],
            b: v(&[1.0, 0.0]),
            c: 0.0,
        };
        assert!(FiniteSumProblem::quadratic(vec![comp], None).is_err());
    }
}
