//! Binary RBF support vector machine: SMO solver, stratified grid search and
//! Platt-scaled probability outputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    /// KKT tolerance: the solver stops once the maximal violating pair gap
    /// falls below this value.
    pub tol: f64,
    pub max_iter: usize,
}

impl SvmParams {
    pub fn new(c: f64, gamma: f64) -> Self {
        Self {
            c,
            gamma,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::invalid(format!("box constraint {} must be positive", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("kernel width {} must be positive", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("SMO tolerance must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty features");
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.rows() {
            for ((v, a), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (a - m) * (a - m);
            }
        }
        let n = x.nrows() as f64;
        let scale = var.mapv(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Self { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn apply_row(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        (&x - &self.mean) / &self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    /// `P(y = +1 | f) = 1 / (1 + exp(a f + b))`.
    pub fn probability(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        if z >= 0.0 {
            (-z).exp() / (1.0 + (-z).exp())
        } else {
            1.0 / (1.0 + z.exp())
        }
    }

    /// `(log P(+1 | f), log P(-1 | f))`.
    pub fn log_probs(&self, f: f64) -> (f64, f64) {
        let z = self.a * f + self.b;
        // log sigma(-z), computed without overflow
        let l_in = if z > 0.0 {
            -z - (-z).exp().ln_1p()
        } else {
            -(z.exp().ln_1p())
        };
        (l_in, z + l_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// Standardized support vectors, one per row.
    pub support: Array2<f64>,
    /// `alpha_i y_i` for each support vector.
    pub coef: Array1<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub standardizer: Standardizer,
    pub platt: Option<Platt>,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    /// Checks the stored invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.support.nrows() != self.coef.len() || self.support.ncols() != self.dim() {
            return Err(Error::invalid("SVM support/coefficient shapes disagree"));
        }
        if self.standardizer.scale.len() != self.dim() || self.standardizer.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("SVM standardization scales must be positive"));
        }
        if !(self.gamma > 0.0) || !(self.c > 0.0) {
            return Err(Error::invalid("SVM gamma and C must be positive"));
        }
        if self.coef.iter().any(|c| !c.is_finite() || c.abs() > self.c * (1.0 + 1e-12)) {
            return Err(Error::invalid("SVM dual coefficients must lie in [-C, C]"));
        }
        let finite = self.support.iter().chain(&self.standardizer.mean).all(|v| v.is_finite())
            && self.bias.is_finite();
        if !finite {
            return Err(Error::invalid("SVM parameters must be finite"));
        }
        if let Some(p) = self.platt {
            if !(p.a.is_finite() && p.b.is_finite()) {
                return Err(Error::invalid("Platt parameters must be finite"));
            }
        }
        Ok(())
    }

    /// `f(x) = sum_i alpha_i y_i k(x_i, x) + b` on a raw (unstandardized) feature.
    pub fn decision_value(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "feature length {} does not match model dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let z = self.standardizer.apply_row(x);
        let mut f = self.bias;
        for (sv, c) in self.support.rows().into_iter().zip(&self.coef) {
            let d2: f64 = sv.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            f += c * (-self.gamma * d2).exp();
        }
        Ok(f)
    }

    /// `(L_R(X | C), L_R(X | not C))` from the calibrated sigmoid.
    pub fn predict_log_probs(&self, x: ArrayView1<'_, f64>) -> Result<(f64, f64)> {
        let platt = self
            .platt
            .ok_or_else(|| Error::invalid("SVM has not been calibrated"))?;
        Ok(platt.log_probs(self.decision_value(x)?))
    }
}

/// Raw solver state, exposed for diagnostics.
#[derive(Debug, Clone)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Gradient of `0.5 a'Qa - e'a`.
    pub grad: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Dual objective `sum a - 0.5 a'Qa` after each pair update, when requested.
    pub dual_trace: Vec<f64>,
}

fn check_labels(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("labels must be +1 or -1"));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::InsufficientData("SVM training needs both classes".into()));
    }
    Ok(())
}

/// Pairwise squared Euclidean distances between rows of `a` and rows of `b`.
pub fn squared_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let a_sq: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let b_sq: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (a_sq[i] + b_sq[j] - 2.0 * *v).max(0.0);
    }
    d
}

fn rbf(sq_dist: &Array2<f64>, gamma: f64) -> Array2<f64> {
    sq_dist.mapv(|d| (-gamma * d).exp())
}

/// SMO on a precomputed kernel matrix with maximal-violating-pair selection.
pub fn smo(kernel: &Array2<f64>, y: &[f64], params: &SvmParams, record_trace: bool) -> Result<SmoSolution> {
    params.validate()?;
    check_labels(y)?;
    let n = y.len();
    let c = params.c;
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[[i, j]];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut dual_trace = Vec::new();
    let mut iterations = 0;

    let is_upper = |a: f64| a >= c;
    let is_lower = |a: f64| a <= 0.0;

    loop {
        // i maximizes -y G over I_up, j minimizes it over I_low
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        let mut i_sel = None;
        let mut j_sel = None;
        for t in 0..n {
            let v = -y[t] * grad[t];
            let in_up = if y[t] > 0.0 { !is_upper(alpha[t]) } else { !is_lower(alpha[t]) };
            let in_low = if y[t] > 0.0 { !is_lower(alpha[t]) } else { !is_upper(alpha[t]) };
            if in_up && v > g_max {
                g_max = v;
                i_sel = Some(t);
            }
            if in_low && v < g_min {
                g_min = v;
                j_sel = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if g_max - g_min < params.tol {
            break;
        }
        if iterations >= params.max_iter {
            return Err(Error::Numerical(format!(
                "SMO did not reach tolerance {} within {} iterations",
                params.tol, params.max_iter
            )));
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let mut quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for t in 0..n {
            grad[t] += q(i, t) * di + q(j, t) * dj;
        }
        if record_trace {
            dual_trace.push(dual_objective(&alpha, &grad));
        }
    }

    // rho from free vectors, or the midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if is_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if is_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    let rho = if n_free > 0 { free_sum / n_free as f64 } else { (ub + lb) / 2.0 };
    Ok(SmoSolution {
        alpha,
        grad,
        rho,
        iterations,
        dual_trace,
    })
}

/// `sum a - 0.5 a'Qa`, using `G = Qa - e`.
pub fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

fn model_from_solution(
    z: ArrayView2<'_, f64>,
    y: &[f64],
    sol: &SmoSolution,
    params: &SvmParams,
    standardizer: Standardizer,
) -> SvmModel {
    let sv: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
    SvmModel {
        support: z.select(Axis(0), &sv),
        coef: sv.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
        bias: -sol.rho,
        gamma: params.gamma,
        c: params.c,
        standardizer,
        platt: None,
    }
}

fn check_features(x: ArrayView2<'_, f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::invalid(format!("{} feature rows but {} labels", x.nrows(), y.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::invalid("features have zero length"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    Ok(())
}

/// Trains an uncalibrated model and also returns the solver state.
pub fn train_detailed(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    params: &SvmParams,
    record_trace: bool,
) -> Result<(SvmModel, SmoSolution)> {
    check_features(x, y)?;
    check_labels(y)?;
    let standardizer = Standardizer::fit(x);
    let z = standardizer.apply(x);
    let kernel = rbf(&squared_distances(z.view(), z.view()), params.gamma);
    let sol = smo(&kernel, y, params, record_trace)?;
    Ok((model_from_solution(z.view(), y, &sol, params, standardizer), sol))
}

pub fn train(x: ArrayView2<'_, f64>, y: &[f64], params: &SvmParams) -> Result<SvmModel> {
    Ok(train_detailed(x, y, params, false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub c_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub folds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            c_values: (-3..=7).map(|e| 2f64.powi(e)).collect(),
            gamma_values: (-9..=1).map(|e| 2f64.powi(e)).collect(),
            folds: 5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_values.is_empty() || self.gamma_values.is_empty() {
            return Err(Error::invalid("SVM grid must be non-empty"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("SVM grid search needs at least 2 folds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub c: f64,
    pub gamma: f64,
    /// Pooled held-out accuracy at the chosen point.
    pub accuracy: f64,
    /// Held-out decision value of every sample at the chosen point.
    pub cv_decision_values: Vec<f64>,
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin, continuing the deal across classes.
pub fn stratified_folds(y: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; y.len()];
    let mut next = 0;
    for class in [1.0, -1.0] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

struct Fold {
    test: Vec<usize>,
    y_train: Vec<f64>,
    d_train: Array2<f64>,
    d_test: Array2<f64>,
}

/// Picks `(C, gamma)` by stratified k-fold cross-validated accuracy.
/// Ties go to the smaller C, then the smaller gamma.
pub fn grid_search(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    grid: &GridSpec,
    tol: f64,
    seed: u64,
) -> Result<GridResult> {
    grid.validate()?;
    check_features(x, y)?;
    check_labels(y)?;
    for class in [1.0, -1.0] {
        let count = y.iter().filter(|&&v| v == class).count();
        if count < grid.folds {
            return Err(Error::InsufficientData(format!(
                "class {class:+} has {count} samples, fewer than {} folds",
                grid.folds
            )));
        }
    }
    let assignment = stratified_folds(y, grid.folds, seed);
    let folds: Vec<Fold> = (0..grid.folds)
        .map(|f| {
            let train: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| assignment[i] == f).collect();
            let x_train = x.select(Axis(0), &train);
            let standardizer = Standardizer::fit(x_train.view());
            let z_train = standardizer.apply(x_train.view());
            let z_test = standardizer.apply(x.select(Axis(0), &test).view());
            Fold {
                y_train: train.iter().map(|&i| y[i]).collect(),
                d_train: squared_distances(z_train.view(), z_train.view()),
                d_test: squared_distances(z_test.view(), z_train.view()),
                test,
            }
        })
        .collect();

    let mut c_values = grid.c_values.clone();
    let mut gamma_values = grid.gamma_values.clone();
    c_values.sort_by(f64::total_cmp);
    gamma_values.sort_by(f64::total_cmp);

    let mut best: Option<(usize, f64, f64, Vec<f64>)> = None;
    for &c in &c_values {
        for &gamma in &gamma_values {
            let params = SvmParams { tol, ..SvmParams::new(c, gamma) };
            let mut decisions = vec![0.0; y.len()];
            let mut correct = 0usize;
            for fold in &folds {
                if !(fold.y_train.contains(&1.0) && fold.y_train.contains(&-1.0)) {
                    return Err(Error::InsufficientData("a training fold lost a class".into()));
                }
                let sol = smo(&rbf(&fold.d_train, gamma), &fold.y_train, &params, false)?;
                let k_test = rbf(&fold.d_test, gamma);
                for (row, &i) in fold.test.iter().enumerate() {
                    let mut f = -sol.rho;
                    for (t, a) in sol.alpha.iter().enumerate() {
                        if *a > 0.0 {
                            f += a * fold.y_train[t] * k_test[[row, t]];
                        }
                    }
                    decisions[i] = f;
                    let predicted = if f >= 0.0 { 1.0 } else { -1.0 };
                    if predicted == y[i] {
                        correct += 1;
                    }
                }
            }
            if best.as_ref().is_none_or(|b| correct > b.0) {
                best = Some((correct, c, gamma, decisions));
            }
        }
    }
    let (correct, c, gamma, cv_decision_values) = best.expect("grid is non-empty");
    Ok(GridResult {
        c,
        gamma,
        accuracy: correct as f64 / y.len() as f64,
        cv_decision_values,
    })
}

/// Fits the Platt sigmoid to held-out decision values by regularized
/// maximum likelihood (Newton's method with backtracking).
pub fn fit_platt(decision_values: &[f64], labels: &[f64]) -> Result<Platt> {
    if decision_values.len() != labels.len() {
        return Err(Error::invalid("decision values and labels differ in length"));
    }
    if decision_values.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("decision values must be finite"));
    }
    let n_pos = labels.iter().filter(|&&l| l > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs two samples per class, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let hi = (n_pos as f64 + 1.0) / (n_pos as f64 + 2.0);
    let lo = 1.0 / (n_neg as f64 + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l > 0.0 { hi } else { lo }).collect();

    let mut a = 0.0;
    let mut b = ((n_neg as f64 + 1.0) / (n_pos as f64 + 1.0)).ln();
    let mut fval = platt_objective(decision_values, &targets, a, b);
    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &t) in decision_values.iter().zip(&targets) {
            let p = Platt { a, b }.probability(f);
            let q = 1.0 - p;
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = t - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = platt_objective(decision_values, &targets, na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < MIN_STEP {
            break;
        }
    }
    Ok(Platt { a, b })
}

/// Negative log likelihood of smoothed targets; probabilities are clamped to
/// `[1e-12, 1 - 1e-12]` before the logarithms.
pub fn platt_objective(decision_values: &[f64], targets: &[f64], a: f64, b: f64) -> f64 {
    let sigmoid = Platt { a, b };
    decision_values
        .iter()
        .zip(targets)
        .map(|(&f, &t)| {
            let p = sigmoid.probability(f).clamp(1e-12, 1.0 - 1e-12);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Returns a copy of `model` carrying a sigmoid fitted to the given
/// held-out decision values.
pub fn calibrate(model: &SvmModel, decision_values: &[f64], labels: &[f64]) -> Result<SvmModel> {
    let platt = fit_platt(decision_values, labels)?;
    Ok(SvmModel {
        platt: Some(platt),
        ..model.clone()
    })
}
