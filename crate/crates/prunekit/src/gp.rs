//! Gaussian-process regression with an RBF kernel.
//!
//! Inputs arrive already scaled to the unit cube; outputs are standardized
//! internally. The kernel uses one shared length-scale. The kernel matrix is
//! Cholesky-factorized with a jitter that escalates tenfold on failure, up
//! to 1e-2.

use crate::error::{Error, Result};

pub const BASE_NOISE: f64 = 1e-6;
pub const MAX_NOISE: f64 = 1e-2;
pub const DEFAULT_LENGTHSCALE: f64 = 0.2;
/// Observations closer than this (L2) count as duplicates and are dropped.
pub const DEDUPE_RADIUS: f64 = 1e-9;

/// Fitted GP surrogate.
#[derive(Debug, Clone)]
pub struct GpState {
    inputs: Vec<Vec<f64>>,
    outputs_std: Vec<f64>,
    pub lengthscale: f64,
    pub signal_var: f64,
    /// Jitter actually used (may have escalated from [`BASE_NOISE`]).
    pub noise: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    out_mean: f64,
    out_scale: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(sq: f64, signal_var: f64, lengthscale: f64) -> f64 {
    signal_var * (-sq / (2.0 * lengthscale * lengthscale)).exp()
}

/// In-place lower Cholesky of a row-major `n x n` matrix. Returns false if
/// the matrix is not positive definite.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return false;
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    y
}

fn solve_upper_t(l: &[f64], n: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Drops later observations whose input lies within [`DEDUPE_RADIUS`] of an
/// earlier one.
pub fn dedupe(inputs: &[Vec<f64>], outputs: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut ys = Vec::with_capacity(outputs.len());
    for (x, y) in inputs.iter().zip(outputs) {
        if xs
            .iter()
            .all(|seen| sq_dist(seen, x) > DEDUPE_RADIUS * DEDUPE_RADIUS)
        {
            xs.push(x.clone());
            ys.push(*y);
        }
    }
    (xs, ys)
}

/// Fits the GP at a fixed length-scale. Inputs must already live in the
/// unit cube and be deduplicated.
pub fn fit(inputs: Vec<Vec<f64>>, outputs: &[f64], lengthscale: f64) -> Result<GpState> {
    if inputs.is_empty() || inputs.len() != outputs.len() {
        return Err(Error::EmptyGp);
    }
    let n = inputs.len();
    let out_mean = outputs.iter().sum::<f64>() / n as f64;
    let var = outputs.iter().map(|y| (y - out_mean).powi(2)).sum::<f64>() / n as f64;
    let raw_std = var.sqrt();
    // A constant output column would otherwise collapse every posterior
    // standard deviation to zero.
    let out_scale = if raw_std > 1e-8 { raw_std } else { 1.0 };
    let outputs_std: Vec<f64> = outputs.iter().map(|y| (y - out_mean) / out_scale).collect();
    let signal_var = 1.0;

    let mut base = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = rbf(sq_dist(&inputs[i], &inputs[j]), signal_var, lengthscale);
            base[i * n + j] = k;
            base[j * n + i] = k;
        }
    }

    let mut noise = BASE_NOISE;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[i * n + i] += noise;
        }
        if cholesky(&mut k, n) {
            let y = solve_lower(&k, n, &outputs_std);
            let alpha = solve_upper_t(&k, n, &y);
            return Ok(GpState {
                inputs,
                outputs_std,
                lengthscale,
                signal_var,
                noise,
                chol: k,
                alpha,
                out_mean,
                out_scale,
            });
        }
        noise *= 10.0;
        if noise > MAX_NOISE {
            return Err(Error::Factorization { jitter: noise });
        }
    }
}

impl GpState {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Posterior mean and standard deviation at `x`, in raw output units.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let mut kstar = vec![0.0; n];
        for (ks, xi) in kstar.iter_mut().zip(&self.inputs) {
            *ks = rbf(sq_dist(xi, x), self.signal_var, self.lengthscale);
        }
        let mean_std: f64 = kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = solve_lower(&self.chol, n, &kstar);
        let var_std = (self.signal_var - v.iter().map(|vi| vi * vi).sum::<f64>()).max(0.0);
        (
            mean_std * self.out_scale + self.out_mean,
            var_std.sqrt() * self.out_scale,
        )
    }

    /// Log marginal likelihood of the standardized data under this fit.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.inputs.len();
        let data_fit: f64 = self
            .outputs_std
            .iter()
            .zip(&self.alpha)
            .map(|(y, a)| y * a)
            .sum();
        let log_det: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * data_fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Largest |posterior mean - observed output| over the training inputs,
    /// in standardized units.
    pub fn max_interpolation_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in self.inputs.iter().zip(&self.outputs_std) {
            let (mean, _) = self.posterior(x);
            let mean_std = (mean - self.out_mean) / self.out_scale;
            worst = worst.max((mean_std - y).abs());
        }
        worst
    }
}

/// Fixed 16-point log grid of candidate length-scales for unit-cube inputs.
pub fn lengthscale_grid() -> [f64; 16] {
    let (lo, hi) = (0.05f64.ln(), 2.0f64.ln());
    let mut grid = [0.0; 16];
    for (i, g) in grid.iter_mut().enumerate() {
        *g = (lo + (hi - lo) * i as f64 / 15.0).exp();
    }
    grid
}

/// Picks the grid length-scale maximizing marginal likelihood (first wins
/// ties). Falls back to the default when every candidate fails to fit.
pub fn select_lengthscale(inputs: &[Vec<f64>], outputs: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, DEFAULT_LENGTHSCALE);
    for ls in lengthscale_grid() {
        if let Ok(state) = fit(inputs.to_vec(), outputs, ls) {
            let ll = state.log_marginal_likelihood();
            if ll > best.0 {
                best = (ll, ls);
            }
        }
    }
    best.1
}
