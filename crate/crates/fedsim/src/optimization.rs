//! Convex local objectives and projected stochastic gradient steps.
//!
//! Two model families are supported, both convex in the parameter: linear
//! prediction with squared error, `l(u, y) = (u - y)^2`, and linear softmax
//! with multinomial cross-entropy. Parameters live in an origin-centered
//! Euclidean ball, onto which every SGD step projects. Minibatches are drawn
//! uniformly without replacement, so the minibatch gradient is an unbiased
//! estimate of the full local gradient.

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::availability::MarginalWeights;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::uniform_in_ball;

/// A model parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Dense row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::dimension(format!(
                "expected {} values for a {n_rows}x{n_cols} matrix, got {}",
                n_rows * n_cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("feature values must be finite"));
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

/// Per-sample targets: real-valued for regression, class indices for
/// classification.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One client's local dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub features: FeatureMatrix,
    pub targets: Targets,
}

impl ClientDataset {
    pub fn new(features: FeatureMatrix, targets: Targets) -> Result<Self> {
        if features.n_rows() == 0 {
            return Err(Error::validation(
                "a client dataset needs at least one sample",
            ));
        }
        if features.n_rows() != targets.len() {
            return Err(Error::dimension(format!(
                "{} feature rows but {} targets",
                features.n_rows(),
                targets.len()
            )));
        }
        if let Targets::Real(v) = &targets {
            if v.iter().any(|y| !y.is_finite()) {
                return Err(Error::validation("regression targets must be finite"));
            }
        }
        Ok(Self { features, targets })
    }

    pub fn n_samples(&self) -> usize {
        self.features.n_rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.n_cols()
    }
}

/// The model family and per-sample loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossModel {
    /// Linear prediction `x . theta` with loss `(x . theta - y)^2`.
    SquaredError,
    /// Linear softmax over `classes` classes with cross-entropy loss; the
    /// parameter is `classes` stacked blocks of the feature dimension.
    MultinomialLogistic { classes: usize },
}

impl LossModel {
    /// Parameter dimension for a given feature dimension.
    pub fn param_dim(&self, feature_dim: usize) -> usize {
        match self {
            LossModel::SquaredError => feature_dim,
            LossModel::MultinomialLogistic { classes } => classes * feature_dim,
        }
    }

    pub fn check_dataset(&self, data: &ClientDataset) -> Result<()> {
        match (self, &data.targets) {
            (LossModel::SquaredError, Targets::Real(_)) => Ok(()),
            (LossModel::MultinomialLogistic { classes }, Targets::Class(ys)) => {
                if let Some(&bad) = ys.iter().find(|&&y| y >= *classes) {
                    return Err(Error::validation(format!(
                        "class label {bad} out of range for {classes} classes"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::validation(
                "target kind does not match the loss model",
            )),
        }
    }

    fn check_theta(&self, theta: &ParamVector, feature_dim: usize) -> Result<()> {
        let want = self.param_dim(feature_dim);
        if theta.dim() != want {
            return Err(Error::dimension(format!(
                "parameter has dimension {}, model needs {want}",
                theta.dim()
            )));
        }
        Ok(())
    }
}

/// An origin-centered Euclidean ball of positive radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub radius: f64,
}

impl ProjectionSet {
    pub fn new(radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::validation(format!(
                "projection radius must be finite and positive, got {radius}"
            )));
        }
        Ok(Self { radius })
    }

    pub fn contains(&self, theta: &ParamVector, tol: f64) -> bool {
        theta.norm() <= self.radius + tol
    }
}

/// Distinct sample indices into one client's dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    indices: Vec<usize>,
}

impl Minibatch {
    pub fn new(mut indices: Vec<usize>, n_samples: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() || indices.len() > n_samples {
            return Err(Error::validation(format!(
                "batch size must lie in 1..={n_samples}"
            )));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("batch indices must be distinct"));
        }
        if *indices.last().unwrap() >= n_samples {
            return Err(Error::validation("batch index out of range"));
        }
        Ok(Self { indices })
    }

    /// The whole dataset as one batch.
    pub fn full(n_samples: usize) -> Self {
        Self {
            indices: (0..n_samples).collect(),
        }
    }

    /// Uniform draw of `size` distinct indices without replacement.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n_samples: usize, size: usize) -> Result<Self> {
        if size == 0 || size > n_samples {
            return Err(Error::validation(format!(
                "batch size {size} must lie in 1..={n_samples}"
            )));
        }
        // Sequential selection scan: index i enters with probability
        // (remaining needed) / (remaining items), giving a uniform subset.
        let mut indices = Vec::with_capacity(size);
        for i in 0..n_samples {
            if rng.gen_range(0..n_samples - i) < size - indices.len() {
                indices.push(i);
                if indices.len() == size {
                    break;
                }
            }
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn softmax_stable(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn scores_for(theta: &ParamVector, x: &[f64], classes: usize) -> Vec<f64> {
    let d = x.len();
    (0..classes)
        .map(|c| {
            theta.0[c * d..(c + 1) * d]
                .iter()
                .zip(x)
                .map(|(t, xi)| t * xi)
                .sum()
        })
        .collect()
}

fn sample_loss(
    theta: &ParamVector,
    x: &[f64],
    data: &ClientDataset,
    model: &LossModel,
    j: usize,
) -> f64 {
    match (model, &data.targets) {
        (LossModel::SquaredError, Targets::Real(ys)) => {
            let pred: f64 = theta.0.iter().zip(x).map(|(t, xi)| t * xi).sum();
            let r = pred - ys[j];
            r * r
        }
        (LossModel::MultinomialLogistic { classes }, Targets::Class(ys)) => {
            let scores = scores_for(theta, x, *classes);
            log_sum_exp(&scores) - scores[ys[j]]
        }
        _ => unreachable!("dataset/model mismatch is rejected up front"),
    }
}

/// Mean per-sample loss of one client at `theta`.
pub fn local_loss(theta: &ParamVector, data: &ClientDataset, model: &LossModel) -> Result<f64> {
    model.check_dataset(data)?;
    model.check_theta(theta, data.feature_dim())?;
    let n = data.n_samples();
    let total: f64 = (0..n)
        .map(|j| sample_loss(theta, data.features.row(j), data, model, j))
        .sum();
    Ok(total / n as f64)
}

/// Gradient of the mean per-sample loss over a minibatch.
pub fn minibatch_gradient(
    theta: &ParamVector,
    data: &ClientDataset,
    model: &LossModel,
    batch: &Minibatch,
) -> Result<ParamVector> {
    model.check_dataset(data)?;
    model.check_theta(theta, data.feature_dim())?;
    if batch.indices().iter().any(|&j| j >= data.n_samples()) {
        return Err(Error::validation("batch index out of range for dataset"));
    }
    let d = data.feature_dim();
    let mut grad = ParamVector::zeros(theta.dim());
    let scale = 1.0 / batch.len() as f64;
    match (model, &data.targets) {
        (LossModel::SquaredError, Targets::Real(ys)) => {
            for &j in batch.indices() {
                let x = data.features.row(j);
                let pred: f64 = theta.0.iter().zip(x).map(|(t, xi)| t * xi).sum();
                let coeff = 2.0 * (pred - ys[j]) * scale;
                for (g, xi) in grad.0.iter_mut().zip(x) {
                    *g += coeff * xi;
                }
            }
        }
        (LossModel::MultinomialLogistic { classes }, Targets::Class(ys)) => {
            for &j in batch.indices() {
                let x = data.features.row(j);
                let mut probs = softmax_stable(&scores_for(theta, x, *classes));
                probs[ys[j]] -= 1.0;
                for (c, &pc) in probs.iter().enumerate() {
                    let coeff = pc * scale;
                    for (g, xi) in grad.0[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += coeff * xi;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(grad)
}

/// Gradient of the full local objective (the whole dataset as one batch).
pub fn full_gradient(
    theta: &ParamVector,
    data: &ClientDataset,
    model: &LossModel,
) -> Result<ParamVector> {
    minibatch_gradient(theta, data, model, &Minibatch::full(data.n_samples()))
}

/// Euclidean projection onto the ball.
pub fn project(theta: &ParamVector, set: &ProjectionSet) -> ParamVector {
    let norm = theta.norm();
    if norm <= set.radius {
        theta.clone()
    } else {
        theta.scaled(set.radius / norm)
    }
}

/// One projected minibatch SGD step.
pub fn sgd_step(
    theta: &ParamVector,
    data: &ClientDataset,
    model: &LossModel,
    batch: &Minibatch,
    eta: f64,
    set: &ProjectionSet,
) -> Result<ParamVector> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::validation(format!(
            "step size must be finite and nonnegative, got {eta}"
        )));
    }
    let grad = minibatch_gradient(theta, data, model, batch)?;
    let mut next = theta.clone();
    next.add_scaled(&grad, -eta);
    Ok(project(&next, set))
}

/// The survival-weighted global objective `sum_i p_i f(theta; D_i)`.
pub fn global_objective(
    theta: &ParamVector,
    weights: &MarginalWeights,
    datasets: &[ClientDataset],
    model: &LossModel,
) -> Result<f64> {
    if weights.n_clients() != datasets.len() {
        return Err(Error::dimension(format!(
            "{} weights but {} client datasets",
            weights.n_clients(),
            datasets.len()
        )));
    }
    let grain = per_client_work(datasets, theta.dim());
    let losses = par::map_grained(datasets, grain, |data| local_loss(theta, data, model));
    let mut total = 0.0;
    for (pi, loss) in weights.p.iter().zip(losses) {
        total += pi * loss?;
    }
    Ok(total)
}

fn per_client_work(datasets: &[ClientDataset], dim: usize) -> usize {
    datasets
        .iter()
        .map(|d| d.n_samples())
        .max()
        .unwrap_or(0)
        .saturating_mul(dim)
}

/// How a reference optimum was obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Exact solve of the weighted normal equations (interior optimum).
    NormalEquations,
    /// Accelerated projected gradient descent.
    ProjectedGradient { iterations: usize },
}

/// A solution of the weighted global problem over the ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub theta: ParamVector,
    pub objective: f64,
    pub method: SolveMethod,
    /// Gradient-mapping norm at the solution (0 for exact solves).
    pub grad_mapping_norm: f64,
    pub converged: bool,
}

/// Options for [`solve_reference_optimum`].
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    /// Stop when the gradient-mapping norm falls below this.
    pub tol: f64,
    /// Iteration cap for the projected-gradient fallback.
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50_000,
        }
    }
}

/// Solve `min_{theta in C} sum_i p_i f(theta; D_i)` to high precision.
///
/// Squared-error problems whose normal-equation solution lies inside the
/// ball are solved exactly; everything else (classification, active
/// constraint, singular system) falls back to accelerated projected
/// gradient descent, with the method recorded in the result.
pub fn solve_reference_optimum(
    weights: &MarginalWeights,
    datasets: &[ClientDataset],
    model: &LossModel,
    set: &ProjectionSet,
    opts: &SolveOptions,
) -> Result<ReferenceSolution> {
    if weights.n_clients() != datasets.len() {
        return Err(Error::dimension(format!(
            "{} weights but {} client datasets",
            weights.n_clients(),
            datasets.len()
        )));
    }
    for data in datasets {
        model.check_dataset(data)?;
    }
    if *model == LossModel::SquaredError {
        if let Some(theta) = try_normal_equations(weights, datasets)? {
            if set.contains(&theta, 0.0) {
                let objective = global_objective(&theta, weights, datasets, model)?;
                return Ok(ReferenceSolution {
                    theta,
                    objective,
                    method: SolveMethod::NormalEquations,
                    grad_mapping_norm: 0.0,
                    converged: true,
                });
            }
        }
    }
    projected_gradient_solve(weights, datasets, model, set, opts)
}

/// Weighted least-squares via the normal equations; `None` when singular.
#[allow(clippy::needless_range_loop)]
fn try_normal_equations(
    weights: &MarginalWeights,
    datasets: &[ClientDataset],
) -> Result<Option<ParamVector>> {
    let d = datasets[0].feature_dim();
    let mut a = vec![0.0_f64; d * d];
    let mut b = vec![0.0_f64; d];
    for (pi, data) in weights.p.iter().zip(datasets) {
        let ys = match &data.targets {
            Targets::Real(v) => v,
            _ => {
                return Err(Error::validation(
                    "normal equations need regression targets",
                ))
            }
        };
        let w = pi / data.n_samples() as f64;
        for j in 0..data.n_samples() {
            let x = data.features.row(j);
            for r in 0..d {
                let wxr = w * x[r];
                for c in r..d {
                    a[r * d + c] += wxr * x[c];
                }
                b[r] += wxr * ys[j];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            a[r * d + c] = a[c * d + r];
        }
    }
    Ok(solve_spd(&a, &b, d))
}

/// Cholesky solve of a symmetric positive-definite system; `None` when a
/// pivot degenerates.
fn solve_spd(a: &[f64], b: &[f64], d: usize) -> Option<ParamVector> {
    let mut l = vec![0.0_f64; d * d];
    let max_diag = (0..d).map(|i| a[i * d + i].abs()).fold(0.0_f64, f64::max);
    if max_diag == 0.0 {
        return None;
    }
    for r in 0..d {
        for c in 0..=r {
            let mut sum = a[r * d + c];
            for k in 0..c {
                sum -= l[r * d + k] * l[c * d + k];
            }
            if r == c {
                if sum <= 1e-12 * max_diag {
                    return None;
                }
                l[r * d + r] = sum.sqrt();
            } else {
                l[r * d + c] = sum / l[c * d + c];
            }
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0_f64; d];
    for r in 0..d {
        let mut sum = b[r];
        for k in 0..r {
            sum -= l[r * d + k] * y[k];
        }
        y[r] = sum / l[r * d + r];
    }
    let mut x = vec![0.0_f64; d];
    for r in (0..d).rev() {
        let mut sum = y[r];
        for k in r + 1..d {
            sum -= l[k * d + r] * x[k];
        }
        x[r] = sum / l[r * d + r];
    }
    Some(ParamVector(x))
}

fn weighted_full_gradient(
    theta: &ParamVector,
    weights: &MarginalWeights,
    datasets: &[ClientDataset],
    model: &LossModel,
) -> Result<ParamVector> {
    let grain = per_client_work(datasets, theta.dim());
    let grads = par::map_grained(datasets, grain, |data| full_gradient(theta, data, model));
    let mut total = ParamVector::zeros(theta.dim());
    for (pi, g) in weights.p.iter().zip(grads) {
        total.add_scaled(&g?, *pi);
    }
    Ok(total)
}

/// Accelerated projected gradient descent.
///
/// Phase one is FISTA with backtracking and a monotone safeguard; once
/// objective improvements drop below float resolution it switches to plain
/// fixed-step projected-gradient iteration, which contracts the gradient
/// mapping all the way to a floating-point fixed point without needing to
/// resolve objective differences.
fn projected_gradient_solve(
    weights: &MarginalWeights,
    datasets: &[ClientDataset],
    model: &LossModel,
    set: &ProjectionSet,
    opts: &SolveOptions,
) -> Result<ReferenceSolution> {
    let dim = model.param_dim(datasets[0].feature_dim());
    let objective = |theta: &ParamVector| global_objective(theta, weights, datasets, model);
    let gradient = |theta: &ParamVector| weighted_full_gradient(theta, weights, datasets, model);
    // one backtracked projected step from `from`
    let backtracked = |from: &ParamVector,
                       f_from: f64,
                       g_from: &ParamVector,
                       lips: &mut f64|
     -> Result<(ParamVector, f64)> {
        loop {
            let mut cand = from.clone();
            cand.add_scaled(g_from, -1.0 / *lips);
            let next = project(&cand, set);
            let f_next = objective(&next)?;
            let diff = next.minus(from);
            let quad = f_from + g_from.dot(&diff) + 0.5 * *lips * diff.dot(&diff);
            if f_next <= quad + 1e-12 * quad.abs().max(1e-12) || *lips > 1e30 {
                return Ok((next, f_next));
            }
            *lips *= 2.0;
        }
    };

    let mut x = ParamVector::zeros(dim);
    let mut fx = objective(&x)?;
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut lips = 1.0_f64;
    let mut iters = 0usize;
    let mut stalled = 0usize;
    let fista_budget = opts.max_iters.saturating_mul(4) / 5;
    while iters < fista_budget {
        iters += 1;
        let fy = objective(&y)?;
        let gy = gradient(&y)?;
        let (mut next, mut f_next) = backtracked(&y, fy, &gy, &mut lips)?;
        if f_next > fx {
            // momentum overshoot: monotone step from the best point instead
            let gx = gradient(&x)?;
            let (cand, f_cand) = backtracked(&x, fx, &gx, &mut lips)?;
            next = cand;
            f_next = f_cand;
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mut y_next = next.clone();
            let step = next.minus(&x);
            y_next.add_scaled(&step, (t - 1.0) / t_next);
            y = project(&y_next, set);
            t = t_next;
        }
        // objective stall: float resolution reached, hand over to the polish
        if fx - f_next <= 4.0 * f64::EPSILON * fx.abs() {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if f_next <= fx {
            x = next;
            fx = f_next;
        }
        if stalled >= 8 {
            break;
        }
    }

    // fixed-step polish: x <- project(x - grad / lips) until the mapping is
    // below tolerance or x is a floating-point fixed point
    let mut grad_map = f64::INFINITY;
    while iters < opts.max_iters {
        iters += 1;
        let gx = gradient(&x)?;
        let mut cand = x.clone();
        cand.add_scaled(&gx, -1.0 / lips);
        let next = project(&cand, set);
        let moved = next.minus(&x).norm();
        grad_map = moved * lips;
        let fixed_point = moved == 0.0;
        x = next;
        if grad_map < opts.tol || fixed_point {
            break;
        }
    }
    let gx = gradient(&x)?;
    let mut probe = x.clone();
    probe.add_scaled(&gx, -1.0 / lips);
    let mapped = project(&probe, set);
    grad_map = grad_map.min(x.minus(&mapped).norm() * lips);
    let objective_at_x = objective(&x)?;
    Ok(ReferenceSolution {
        objective: objective_at_x,
        theta: x,
        method: SolveMethod::ProjectedGradient { iterations: iters },
        grad_mapping_norm: grad_map,
        converged: grad_map < opts.tol,
    })
}

/// Empirical problem constants sampled over the ball.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Bound on the root mean squared minibatch-gradient norm.
    pub grad_bound: f64,
    /// Per-client bound on the minibatch-gradient standard deviation.
    pub sigma_per_client: Vec<f64>,
    /// Survival-weighted global variance bound `sum_i p_i sigma_i^2`.
    pub sigma_sq: f64,
    /// Bound on the full local-gradient norm (a Lipschitz constant on the ball).
    pub lipschitz: f64,
    pub theta_samples: usize,
}

/// Estimate `G`, per-client `sigma_i`, the global `sigma^2`, and a Lipschitz
/// bound by maximizing exact minibatch moments over parameters sampled
/// uniformly in the ball.
///
/// For each sampled `theta` the minibatch second moment is computed in
/// closed form from the per-sample gradients (sampling without replacement),
/// so only `theta` itself is randomized.
pub fn estimate_constants<R: Rng + ?Sized>(
    model: &LossModel,
    datasets: &[ClientDataset],
    set: &ProjectionSet,
    weights: &MarginalWeights,
    batch_size: usize,
    theta_samples: usize,
    rng: &mut R,
) -> Result<ConstantEstimates> {
    if theta_samples == 0 {
        return Err(Error::validation("theta_samples must be at least 1"));
    }
    if weights.n_clients() != datasets.len() {
        return Err(Error::dimension(format!(
            "{} weights but {} client datasets",
            weights.n_clients(),
            datasets.len()
        )));
    }
    for data in datasets {
        model.check_dataset(data)?;
        if batch_size == 0 || batch_size > data.n_samples() {
            return Err(Error::validation(format!(
                "batch size {batch_size} invalid for a client with {} samples",
                data.n_samples()
            )));
        }
    }
    let dim = model.param_dim(datasets[0].feature_dim());
    let thetas: Vec<ParamVector> = (0..theta_samples)
        .map(|_| ParamVector(uniform_in_ball(rng, dim, set.radius)))
        .collect();

    let per_theta: Vec<(f64, Vec<f64>, f64)> = par::map(&thetas, |theta| {
        let mut max_second_moment = 0.0_f64;
        let mut var_by_client = Vec::with_capacity(datasets.len());
        let mut max_full_norm = 0.0_f64;
        for data in datasets {
            let (full, sum_sq_norms) =
                gradient_moments(theta, data, model).expect("datasets validated above");
            let n = data.n_samples() as f64;
            let full_sq = full.dot(&full);
            let batch_var = if data.n_samples() > 1 && batch_size < data.n_samples() {
                let pop_var = ((sum_sq_norms - n * full_sq) / (n - 1.0)).max(0.0);
                (1.0 - batch_size as f64 / n) * pop_var / batch_size as f64
            } else {
                0.0
            };
            max_second_moment = max_second_moment.max(full_sq + batch_var);
            var_by_client.push(batch_var);
            max_full_norm = max_full_norm.max(full_sq.sqrt());
        }
        (max_second_moment, var_by_client, max_full_norm)
    });

    let mut grad_sq = 0.0_f64;
    let mut sigma_sq_client = vec![0.0_f64; datasets.len()];
    let mut lipschitz = 0.0_f64;
    for (second, vars, full_norm) in per_theta {
        grad_sq = grad_sq.max(second);
        for (acc, v) in sigma_sq_client.iter_mut().zip(vars) {
            *acc = acc.max(v);
        }
        lipschitz = lipschitz.max(full_norm);
    }
    let sigma_per_client: Vec<f64> = sigma_sq_client.iter().map(|v| v.sqrt()).collect();
    let sigma_sq: f64 = weights
        .p
        .iter()
        .zip(&sigma_sq_client)
        .map(|(pi, v)| pi * v)
        .sum();
    Ok(ConstantEstimates {
        grad_bound: grad_sq.sqrt(),
        sigma_per_client,
        sigma_sq,
        lipschitz,
        theta_samples,
    })
}

/// The full local gradient together with the sum of squared per-sample
/// gradient norms, in one pass.
#[allow(clippy::needless_range_loop)]
pub fn gradient_moments(
    theta: &ParamVector,
    data: &ClientDataset,
    model: &LossModel,
) -> Result<(ParamVector, f64)> {
    model.check_dataset(data)?;
    model.check_theta(theta, data.feature_dim())?;
    let d = data.feature_dim();
    let n = data.n_samples();
    let mut mean = ParamVector::zeros(theta.dim());
    let mut sum_sq = 0.0_f64;
    match (model, &data.targets) {
        (LossModel::SquaredError, Targets::Real(ys)) => {
            for j in 0..n {
                let x = data.features.row(j);
                let pred: f64 = theta.0.iter().zip(x).map(|(t, xi)| t * xi).sum();
                let coeff = 2.0 * (pred - ys[j]);
                let x_sq: f64 = x.iter().map(|v| v * v).sum();
                sum_sq += coeff * coeff * x_sq;
                for (g, xi) in mean.0.iter_mut().zip(x) {
                    *g += coeff * xi;
                }
            }
        }
        (LossModel::MultinomialLogistic { classes }, Targets::Class(ys)) => {
            for j in 0..n {
                let x = data.features.row(j);
                let mut probs = softmax_stable(&scores_for(theta, x, *classes));
                probs[ys[j]] -= 1.0;
                let s_sq: f64 = probs.iter().map(|v| v * v).sum();
                let x_sq: f64 = x.iter().map(|v| v * v).sum();
                sum_sq += s_sq * x_sq;
                for (c, &pc) in probs.iter().enumerate() {
                    for (g, xi) in mean.0[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += pc * xi;
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    mean.scale(1.0 / n as f64);
    Ok((mean, sum_sq))
}

/// Average the minibatch gradient over every size-`b` batch. Test oracle for
/// unbiasedness; feasible only for small datasets.
pub fn gradient_over_all_batches(
    theta: &ParamVector,
    data: &ClientDataset,
    model: &LossModel,
    batch_size: usize,
) -> Result<ParamVector> {
    let n = data.n_samples();
    let mut total = ParamVector::zeros(model.param_dim(data.feature_dim()));
    let mut count = 0usize;
    for combo in (0..n).combinations(batch_size) {
        let batch = Minibatch::new(combo, n)?;
        total.add_scaled(&minibatch_gradient(theta, data, model, &batch)?, 1.0);
        count += 1;
    }
    total.scale(1.0 / count as f64);
    Ok(total)
}
