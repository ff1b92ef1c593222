//! Blind estimation of a room impulse response magnitude spectrogram by
//! sparse non-negative matrix deconvolution.
//!
//! The reverberant spectrogram `X` (`F x T`) is approximated by
//! `Y[f, t] = sum_k R[f, k] * S[f, t - k]` with a sparse source `S` and an
//! `F x K` response `R`. Each frequency row is an independent 1-D
//! deconvolution, so all kernels below walk contiguous rows.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{dct_rows, Spectrogram, LOG_FLOOR};
use crate::error::{Error, Result};

/// Floor for every denominator and for `Y` inside ratios and logarithms.
pub const EPS: f64 = 1e-12;

/// Number of cepstral coefficients kept per RIR column.
pub const RIR_CEPSTRA: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmfdConfig {
    /// RIR length in frames.
    pub k: usize,
    pub lambda: f64,
    pub p: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Geometric decay applied across the K columns of the random `R` start.
    pub init_decay: f64,
    pub source_rule: SourceRule,
}

/// Form of the multiplicative `S` update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRule {
    /// Divergence-consistent form:
    /// `S <- S * (sum_k R_k (X/Y)<-k) / (lambda |S|^(p-1) + sum_k R_k 1<-k)`.
    /// Never increases [`objective`].
    #[default]
    Kl,
    /// `S <- S * (sum_k R_k X<-k) / (lambda |S|^(p-1) + sum_k R_k Y<-k)`,
    /// the squared-error form. Not monotone in [`objective`].
    Euclidean,
}

impl Default for NmfdConfig {
    fn default() -> Self {
        Self {
            k: 20,
            lambda: 0.1,
            p: 1.2,
            max_iters: 100,
            rel_tol: 1e-5,
            seed: 7,
            init_decay: 0.1,
            source_rule: SourceRule::Kl,
        }
    }
}

impl NmfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("NMFD K must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("NMFD max_iters must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("NMFD lambda {} must be >= 0", self.lambda)));
        }
        if !(self.p > 0.0 && self.p <= 2.0) {
            return Err(Error::invalid(format!("NMFD p {} must lie in (0, 2]", self.p)));
        }
        if !(self.init_decay > 0.0 && self.init_decay <= 1.0) {
            return Err(Error::invalid("NMFD init_decay must lie in (0, 1]"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::invalid("NMFD rel_tol must be >= 0"));
        }
        Ok(())
    }
}

/// Axis along which the log RIR is cepstrally compressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DctAxis {
    /// Per time column, across frequency: a `20 x K` descriptor.
    #[default]
    Frequency,
    /// Per frequency row, across the K tail frames: `F x min(20, K)`.
    Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpectrogram(pub Array2<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct RirSpectrogram(pub Array2<f64>);

impl RirSpectrogram {
    pub fn k(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RirFeature(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct NmfdOutput {
    pub source: SourceSpectrogram,
    pub rir: RirSpectrogram,
    /// Objective after every completed iteration.
    pub trace: Vec<f64>,
}

/// `Y = S * R` along time: `Y[f, t] = sum_k R[f, k] S[f, t - k]`.
pub fn convolve(s: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> Array2<f64> {
    let (f_len, t_len) = s.dim();
    let mut y = Array2::zeros((f_len, t_len));
    for ((s_row, r_row), mut y_row) in s
        .axis_iter(Axis(0))
        .zip(r.axis_iter(Axis(0)))
        .zip(y.axis_iter_mut(Axis(0)))
    {
        let s_row = s_row.as_slice().expect("standard layout");
        let y_row = y_row.as_slice_mut().expect("standard layout");
        for (k, &rk) in r_row.iter().enumerate().take(t_len) {
            for (yt, st) in y_row[k..].iter_mut().zip(s_row) {
                *yt += rk * st;
            }
        }
    }
    y
}

/// Shifts columns right by `k` (`out[:, t] = m[:, t - k]`), zero-filling
/// vacated columns and dropping those that overrun.
pub fn shift_right(m: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let t_len = m.ncols();
    let mut out = Array2::zeros(m.raw_dim());
    if k < t_len {
        out.slice_mut(ndarray::s![.., k..])
            .assign(&m.slice(ndarray::s![.., ..t_len - k]));
    }
    out
}

/// Shifts columns left by `k` (`out[:, t] = m[:, t + k]`).
pub fn shift_left(m: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let t_len = m.ncols();
    let mut out = Array2::zeros(m.raw_dim());
    if k < t_len {
        out.slice_mut(ndarray::s![.., ..t_len - k])
            .assign(&m.slice(ndarray::s![.., k..]));
    }
    out
}

/// Generalized KL divergence `D(X || Y)` plus `lambda * sum S^p`, with
/// `0 log 0 = 0` and `Y` floored at [`EPS`].
pub fn objective(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    s: ArrayView2<'_, f64>,
    lambda: f64,
    p: f64,
) -> f64 {
    let mut kl = 0.0;
    for (&xv, &yv) in x.iter().zip(y.iter()) {
        if xv > 0.0 {
            kl += xv * (xv / yv.max(EPS)).ln() - xv + yv;
        } else {
            kl += yv;
        }
    }
    let sparsity = if lambda > 0.0 {
        lambda * s.iter().map(|v| v.powf(p)).sum::<f64>()
    } else {
        0.0
    };
    kl + sparsity
}

/// One multiplicative update of `S` in place, given the current `Y`.
pub fn update_source(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    s: &mut Array2<f64>,
    r: ArrayView2<'_, f64>,
    lambda: f64,
    p: f64,
    rule: SourceRule,
) {
    match rule {
        SourceRule::Kl => update_source_kl(x, y, s, r, lambda, p),
        SourceRule::Euclidean => update_source_euclidean(x, y, s, r, lambda, p),
    }
}

fn sparsity_penalty(sv: f64, lambda: f64, p: f64) -> f64 {
    if lambda > 0.0 {
        lambda * sv.abs().powf(p - 1.0)
    } else {
        0.0
    }
}

fn update_source_kl(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    s: &mut Array2<f64>,
    r: ArrayView2<'_, f64>,
    lambda: f64,
    p: f64,
) {
    let t_len = x.ncols();
    let mut ratio = vec![0.0; t_len];
    let mut num = vec![0.0; t_len];
    for (((x_row, y_row), mut s_row), r_row) in x
        .axis_iter(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .zip(s.axis_iter_mut(Axis(0)))
        .zip(r.axis_iter(Axis(0)))
    {
        for ((q, xv), yv) in ratio.iter_mut().zip(x_row).zip(y_row) {
            *q = xv / yv.max(EPS);
        }
        num.fill(0.0);
        for (k, &rk) in r_row.iter().enumerate().take(t_len) {
            for (nv, q) in num[..t_len - k].iter_mut().zip(&ratio[k..]) {
                *nv += rk * q;
            }
        }
        // sum_{k : t + k < T} R[k]
        let r_len = r_row.len();
        let mut r_prefix = vec![0.0; r_len + 1];
        for (k, rk) in r_row.iter().enumerate() {
            r_prefix[k + 1] = r_prefix[k] + rk;
        }
        for (t, (sv, nv)) in s_row.iter_mut().zip(&num).enumerate() {
            let den = r_prefix[(t_len - t).min(r_len)];
            *sv *= nv / (sparsity_penalty(*sv, lambda, p) + den).max(EPS);
        }
    }
}

fn update_source_euclidean(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    s: &mut Array2<f64>,
    r: ArrayView2<'_, f64>,
    lambda: f64,
    p: f64,
) {
    let t_len = x.ncols();
    let mut num = vec![0.0; t_len];
    let mut den = vec![0.0; t_len];
    for (((x_row, y_row), mut s_row), r_row) in x
        .axis_iter(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .zip(s.axis_iter_mut(Axis(0)))
        .zip(r.axis_iter(Axis(0)))
    {
        let x_row = x_row.as_slice().expect("standard layout");
        let y_row = y_row.as_slice().expect("standard layout");
        num.fill(0.0);
        den.fill(0.0);
        for (k, &rk) in r_row.iter().enumerate().take(t_len) {
            let n = t_len - k;
            for ((nv, dv), (xv, yv)) in num[..n]
                .iter_mut()
                .zip(den[..n].iter_mut())
                .zip(x_row[k..].iter().zip(&y_row[k..]))
            {
                *nv += rk * xv;
                *dv += rk * yv;
            }
        }
        for ((sv, nv), dv) in s_row.iter_mut().zip(&num).zip(&den) {
            *sv *= nv / (sparsity_penalty(*sv, lambda, p) + dv).max(EPS);
        }
    }
}

/// One multiplicative update of every `R_k` in place, given the current `Y`.
///
/// `R_k <- R_k * ((X / Y) . (S->k)^T) / (1 . (S->k)^T)`
pub fn update_rir(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    s: ArrayView2<'_, f64>,
    r: &mut Array2<f64>,
) {
    let t_len = x.ncols();
    let mut ratio = vec![0.0; t_len];
    for (((x_row, y_row), s_row), mut r_row) in x
        .axis_iter(Axis(0))
        .zip(y.axis_iter(Axis(0)))
        .zip(s.axis_iter(Axis(0)))
        .zip(r.axis_iter_mut(Axis(0)))
    {
        let s_row = s_row.as_slice().expect("standard layout");
        for ((q, xv), yv) in ratio.iter_mut().zip(x_row).zip(y_row) {
            *q = xv / yv.max(EPS);
        }
        // Prefix sums of S give sum_{t >= k} S[t - k] = sum_{j < T - k} S[j].
        let mut prefix = 0.0;
        let mut s_mass = vec![0.0; t_len + 1];
        for (j, sv) in s_row.iter().enumerate() {
            prefix += sv;
            s_mass[j + 1] = prefix;
        }
        for (k, rk) in r_row.iter_mut().enumerate().take(t_len) {
            let n = t_len - k;
            let num: f64 = ratio[k..].iter().zip(&s_row[..n]).map(|(q, sv)| q * sv).sum();
            *rk *= num / s_mass[n].max(EPS);
        }
    }
}

fn check_finite(m: &Array2<f64>, what: &str, iter: usize) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite value in {what} at NMFD iteration {iter}"
        )));
    }
    Ok(())
}

/// Seeded uniform initialisation in `(0.1, 1]`; column `k` of `R` is further
/// scaled by `decay^k` so the start favours a direct-path-first response.
pub fn initial_factors(
    f_len: usize,
    t_len: usize,
    k: usize,
    decay: f64,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Array2::from_shape_fn((f_len, t_len), |_| 1.0 - 0.9 * rng.gen::<f64>());
    let r = Array2::from_shape_fn((f_len, k), |(_, col)| {
        (1.0 - 0.9 * rng.gen::<f64>()) * decay.powi(col as i32)
    });
    (s, r)
}

/// Runs the alternating updates from an explicit starting point. No scale
/// normalization is applied.
pub fn deconvolve_from(
    x: ArrayView2<'_, f64>,
    mut s: Array2<f64>,
    mut r: Array2<f64>,
    cfg: &NmfdConfig,
) -> Result<NmfdOutput> {
    cfg.validate()?;
    let (f_len, t_len) = x.dim();
    if s.dim() != (f_len, t_len) || r.dim() != (f_len, cfg.k) {
        return Err(Error::invalid("initial factor shapes do not match X and K"));
    }
    if t_len < cfg.k {
        return Err(Error::invalid(format!(
            "spectrogram has {t_len} frames, fewer than K = {}",
            cfg.k
        )));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("X must be finite and non-negative"));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("spectrogram is zero everywhere".into()));
    }
    let x = x.as_standard_layout();
    // An objective this small relative to the data is an exact fit; further
    // iterations only shuffle rounding error.
    let exact_fit = EPS * x.sum();

    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut y = convolve(s.view(), r.view());
    for iter in 0..cfg.max_iters {
        update_source(x.view(), y.view(), &mut s, r.view(), cfg.lambda, cfg.p, cfg.source_rule);
        check_finite(&s, "S", iter)?;
        y = convolve(s.view(), r.view());
        update_rir(x.view(), y.view(), s.view(), &mut r);
        check_finite(&r, "R", iter)?;
        y = convolve(s.view(), r.view());

        let obj = objective(x.view(), y.view(), s.view(), cfg.lambda, cfg.p);
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective is {obj} at NMFD iteration {iter}")));
        }
        let converged = obj <= exact_fit
            || trace
                .last()
                .is_some_and(|&prev: &f64| (prev - obj).abs() <= cfg.rel_tol * prev.abs().max(EPS));
        trace.push(obj);
        if converged {
            break;
        }
    }
    Ok(NmfdOutput {
        source: SourceSpectrogram(s),
        rir: RirSpectrogram(r),
        trace,
    })
}

/// Estimates `(S, R)` from a reverberant magnitude spectrogram.
///
/// After the iterations stop, `R` is rescaled so that the largest entry of
/// its first column is 1 and the inverse gain is folded into `S`.
pub fn estimate_rir(x: &Spectrogram, cfg: &NmfdConfig) -> Result<NmfdOutput> {
    cfg.validate()?;
    let (f_len, t_len) = x.values().dim();
    let (s, r) = initial_factors(f_len, t_len, cfg.k, cfg.init_decay, cfg.seed);
    let mut out = deconvolve_from(x.values().view(), s, r, cfg)?;
    normalize_scale(&mut out);
    Ok(out)
}

fn normalize_scale(out: &mut NmfdOutput) {
    let peak = out.rir.0.column(0).iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        out.rir.0.mapv_inplace(|v| v / peak);
        out.source.0.mapv_inplace(|v| v * peak);
    }
}

/// Log-cepstral compression of an RIR spectrogram, flattened row-major.
pub fn parametrize_rir(rir: &RirSpectrogram, axis: DctAxis) -> Result<RirFeature> {
    let (f_len, k) = rir.0.dim();
    if f_len < RIR_CEPSTRA {
        return Err(Error::invalid(format!(
            "RIR has {f_len} frequency rows, need at least {RIR_CEPSTRA}"
        )));
    }
    let log_r = rir.0.mapv(|v| v.max(LOG_FLOOR).ln());
    let compressed = match axis {
        // rows of the transposed matrix are the K time columns;
        // transpose back so the result is 20 x K
        DctAxis::Frequency => dct_rows(log_r.t(), RIR_CEPSTRA)?.reversed_axes(),
        DctAxis::Time => dct_rows(log_r.view(), RIR_CEPSTRA.min(k))?,
    };
    Ok(RirFeature(compressed.as_standard_layout().iter().copied().collect()))
}
