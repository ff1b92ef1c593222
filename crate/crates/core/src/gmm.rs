//! Diagonal-covariance Gaussian mixtures trained by EM, and the within-class /
//! out-of-class sequence scores of the scene detector.

use std::collections::HashSet;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Points beyond this count are subsampled (seeded) before EM.
    pub max_points: usize,
    /// Subsample size for k-means++ seeding and the Lloyd refinement.
    pub kmeans_points: usize,
    pub kmeans_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_frac: f64,
    pub weight_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            n_components: 64,
            max_iters: 100,
            rel_tol: 1e-5,
            seed: 11,
            max_points: 200_000,
            kmeans_points: 10_000,
            kmeans_iters: 10,
            var_floor_frac: 1e-4,
            weight_floor: 1e-6,
        }
    }
}

impl GmmConfig {
    pub fn with_components(n_components: usize) -> Self {
        Self {
            n_components,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    // log w_i - 0.5 * sum_d ln(2 pi var_id)
    log_norm: Array1<f64>,
    inv_var: Array2<f64>,
}

impl GaussianMixture {
    /// Builds a mixture from raw parameters, checking every invariant.
    pub fn from_parts(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.nrows() != n || variances.dim() != means.dim() {
            return Err(Error::invalid("mixture parameter shapes disagree"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mixture means must be finite"));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("mixture variances must be finite and positive"));
        }
        let inv_var = variances.mapv(|v| 1.0 / v);
        let log_norm = Array1::from_shape_fn(n, |i| {
            weights[i].ln() - 0.5 * variances.row(i).iter().map(|v| LN_2PI + v.ln()).sum::<f64>()
        });
        Ok(Self {
            weights,
            means,
            variances,
            log_norm,
            inv_var,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    /// `sum_i w_i mu_i`.
    pub fn mean(&self) -> Array1<f64> {
        self.means.t().dot(&self.weights)
    }

    fn component_log_densities(&self, x: ArrayView1<'_, f64>, out: &mut [f64]) {
        let x = x.as_slice();
        for (i, slot) in out.iter_mut().enumerate() {
            let mu = self.means.row(i);
            let iv = self.inv_var.row(i);
            let mut quad = 0.0;
            match (x, mu.as_slice(), iv.as_slice()) {
                (Some(x), Some(mu), Some(iv)) => {
                    for ((xv, m), w) in x.iter().zip(mu).zip(iv) {
                        let d = xv - m;
                        quad += d * d * w;
                    }
                }
                _ => unreachable!("mixture rows are contiguous"),
            }
            *slot = self.log_norm[i] - 0.5 * quad;
        }
    }

    /// Log mixture density, evaluated with log-sum-exp.
    pub fn log_pdf(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        let x = x.as_standard_layout();
        self.component_log_densities(x.view(), &mut buf);
        log_sum_exp(&buf)
    }

    /// Log density of a scalar under a one-dimensional mixture.
    pub fn log_pdf_scalar(&self, x: f64) -> f64 {
        debug_assert_eq!(self.dim(), 1);
        self.log_pdf(ArrayView1::from(&[x]))
    }

    /// Sum of per-row log densities.
    pub fn total_log_likelihood(&self, data: ArrayView2<'_, f64>) -> f64 {
        let data = data.as_standard_layout();
        let mut buf = vec![0.0; self.n_components()];
        data.rows()
            .into_iter()
            .map(|row| {
                self.component_log_densities(row, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: GaussianMixture,
    /// Total data log likelihood before each M-step.
    pub log_likelihoods: Vec<f64>,
}

fn global_variances(data: ArrayView2<'_, f64>) -> Array1<f64> {
    let mean = data.mean_axis(Axis(0)).expect("non-empty data");
    let mut var = Array1::zeros(data.ncols());
    for row in data.rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var / data.nrows() as f64
}

fn variance_floor(data: ArrayView2<'_, f64>, frac: f64) -> Array1<f64> {
    global_variances(data).mapv(|v| (v * frac).max(1e-12))
}

fn has_distinct_rows(data: ArrayView2<'_, f64>, needed: usize) -> bool {
    let mut seen = HashSet::new();
    for row in data.rows() {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if seen.len() >= needed {
            return true;
        }
    }
    false
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd iterations; returns an initial
/// mixture built from the resulting clusters.
fn kmeans_init(
    data: ArrayView2<'_, f64>,
    cfg: &GmmConfig,
    floor: &Array1<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianMixture> {
    let n_comp = cfg.n_components;
    let sub: Array2<f64> = if data.nrows() > cfg.kmeans_points {
        let mut idx = sample(rng, data.nrows(), cfg.kmeans_points).into_vec();
        idx.sort_unstable();
        data.select(Axis(0), &idx)
    } else {
        data.to_owned()
    };
    let n = sub.nrows();
    let dim = sub.ncols();

    let mut centers = Array2::zeros((n_comp, dim));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&sub.row(first));
    let mut d2: Vec<f64> = sub.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..n_comp {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "only {c} distinct points available for {n_comp} components"
            )));
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|d| *d > 0.0).expect("positive mass exists");
        }
        centers.row_mut(c).assign(&sub.row(pick));
        for (i, row) in sub.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, centers.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..cfg.kmeans_iters.max(1) {
        for (i, row) in sub.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..n_comp {
                let d = sq_dist(row, centers.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = Array2::<f64>::zeros((n_comp, dim));
        let mut counts = vec![0usize; n_comp];
        for (i, row) in sub.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).zip_mut_with(&row, |s, x| *s += x);
            counts[assign[i]] += 1;
        }
        for c in 0..n_comp {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }

    let global = global_variances(sub.view());
    let mut counts = vec![0usize; n_comp];
    let mut vars = Array2::<f64>::zeros((n_comp, dim));
    for (i, row) in sub.rows().into_iter().enumerate() {
        let c = assign[i];
        counts[c] += 1;
        for ((v, x), m) in vars.row_mut(c).iter_mut().zip(row).zip(centers.row(c)) {
            *v += (x - m) * (x - m);
        }
    }
    for c in 0..n_comp {
        let mut row = vars.row_mut(c);
        if counts[c] > 1 {
            row.mapv_inplace(|v| v / counts[c] as f64);
        } else {
            row.assign(&global);
        }
        row.zip_mut_with(floor, |v, f| *v = v.max(*f));
    }
    let weights = floor_weights(
        Array1::from_iter(counts.iter().map(|&c| c as f64 / n as f64)),
        cfg.weight_floor,
    );
    GaussianMixture::from_parts(weights, centers, vars)
}

fn floor_weights(w: Array1<f64>, floor: f64) -> Array1<f64> {
    let w = w.mapv(|v| v.max(floor));
    let total = w.sum();
    w / total
}

/// One EM iteration. Returns the updated mixture and the data log
/// likelihood under the *input* mixture.
pub fn em_step(
    model: &GaussianMixture,
    data: ArrayView2<'_, f64>,
    var_floor: &Array1<f64>,
    weight_floor: f64,
) -> Result<(GaussianMixture, f64)> {
    let data = data.as_standard_layout();
    let n = data.nrows();
    let n_comp = model.n_components();
    let dim = model.dim();
    let mut resp = Array2::<f64>::zeros((n, n_comp));
    let mut log_lik = 0.0;
    let mut buf = vec![0.0; n_comp];
    for (row, mut r) in data.rows().into_iter().zip(resp.rows_mut()) {
        model.component_log_densities(row, &mut buf);
        let lse = log_sum_exp(&buf);
        log_lik += lse;
        for (dst, lp) in r.iter_mut().zip(&buf) {
            *dst = (lp - lse).exp();
        }
    }
    if !log_lik.is_finite() {
        return Err(Error::Numerical(format!("EM log likelihood is {log_lik}")));
    }

    let nk = resp.sum_axis(Axis(0));
    let x = data.as_slice().expect("standard layout");
    let r = resp.as_slice().expect("standard layout");
    let mut mean_acc = vec![0.0; n_comp * dim];
    for (row, rr) in x.chunks_exact(dim).zip(r.chunks_exact(n_comp)) {
        for (&rc, acc) in rr.iter().zip(mean_acc.chunks_exact_mut(dim)) {
            if rc > 0.0 {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += rc * v;
                }
            }
        }
    }
    for c in 0..n_comp {
        let acc = &mut mean_acc[c * dim..(c + 1) * dim];
        if nk[c] > 1e-300 {
            acc.iter_mut().for_each(|v| *v /= nk[c]);
        } else {
            // Empty component: keep its previous location.
            acc.copy_from_slice(model.means.row(c).as_slice().expect("contiguous"));
        }
    }
    let mut var_acc = vec![0.0; n_comp * dim];
    for (row, rr) in x.chunks_exact(dim).zip(r.chunks_exact(n_comp)) {
        for ((&rc, acc), mu) in rr.iter().zip(var_acc.chunks_exact_mut(dim)).zip(mean_acc.chunks_exact(dim)) {
            if rc > 0.0 {
                for ((a, v), m) in acc.iter_mut().zip(row).zip(mu) {
                    let d = v - m;
                    *a += rc * d * d;
                }
            }
        }
    }
    let means = Array2::from_shape_vec((n_comp, dim), mean_acc).expect("shape");
    let mut variances = Array2::from_shape_vec((n_comp, dim), var_acc).expect("shape");
    for c in 0..n_comp {
        let mut row = variances.row_mut(c);
        if nk[c] > 1e-300 {
            row.mapv_inplace(|v| v / nk[c]);
        } else {
            row.assign(&model.variances.row(c));
        }
        row.zip_mut_with(var_floor, |v, f| *v = v.max(*f));
    }
    let weights = floor_weights(nk / n as f64, weight_floor);
    Ok((GaussianMixture::from_parts(weights, means, variances)?, log_lik))
}

/// Fits a diagonal Gaussian mixture by EM.
pub fn fit(data: ArrayView2<'_, f64>, cfg: &GmmConfig) -> Result<FitResult> {
    if cfg.n_components == 0 {
        return Err(Error::invalid("n_components must be at least 1"));
    }
    if cfg.max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if data.ncols() == 0 {
        return Err(Error::invalid("data has zero dimensions"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("data contains non-finite values"));
    }
    if data.nrows() < cfg.n_components || !has_distinct_rows(data, cfg.n_components) {
        return Err(Error::InsufficientData(format!(
            "need at least {} distinct points, got {} rows",
            cfg.n_components,
            data.nrows()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Array2<f64> = if data.nrows() > cfg.max_points {
        let mut idx = sample(&mut rng, data.nrows(), cfg.max_points).into_vec();
        idx.sort_unstable();
        data.select(Axis(0), &idx)
    } else {
        data.as_standard_layout().into_owned()
    };

    let floor = variance_floor(data.view(), cfg.var_floor_frac);
    let mut model = kmeans_init(data.view(), cfg, &floor, &mut rng)?;
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.max_iters);
    for _ in 0..cfg.max_iters {
        let (next, ll) = em_step(&model, data.view(), &floor, cfg.weight_floor)?;
        let converged = trace
            .last()
            .is_some_and(|&prev| (ll - prev).abs() <= cfg.rel_tol * prev.abs().max(1e-300));
        trace.push(ll);
        model = next;
        if converged {
            break;
        }
    }
    Ok(FitResult {
        model,
        log_likelihoods: trace,
    })
}

/// Convenience wrapper for one-dimensional samples.
pub fn fit_1d(values: &[f64], cfg: &GmmConfig) -> Result<FitResult> {
    let data = ArrayView2::from_shape((values.len(), 1), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    fit(data, cfg)
}

/// Mixture pair for one label: frames of the label, frames of every other label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub in_model: GaussianMixture,
    pub out_model: GaussianMixture,
}

impl ScenePair {
    pub fn new(in_model: GaussianMixture, out_model: GaussianMixture) -> Result<Self> {
        if in_model.dim() != out_model.dim() {
            return Err(Error::invalid(format!(
                "scene models disagree on dimension: {} vs {}",
                in_model.dim(),
                out_model.dim()
            )));
        }
        Ok(Self { in_model, out_model })
    }

    pub fn dim(&self) -> usize {
        self.in_model.dim()
    }

    /// `(sum_t log p(x_t | C), sum_t log p(x_t | not C))`.
    pub fn sequence_score(&self, features: &FeatureSequence) -> Result<(f64, f64)> {
        if features.is_empty() {
            return Err(Error::invalid("cannot score an empty feature sequence"));
        }
        if features.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match model dimension {}",
                features.dim(),
                self.dim()
            )));
        }
        let frames = features.frames().view();
        Ok((
            self.in_model.total_log_likelihood(frames),
            self.out_model.total_log_likelihood(frames),
        ))
    }
}

/// Density of a univariate normal; used by tests and diagnostics.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}
