//! Gaussian-process regression with a Matérn-5/2 ARD kernel and Gaussian noise.
//!
//! Objectives are standardized before fitting. Hyperparameters (log length scales, log
//! signal variance, log noise variance) maximize the log marginal likelihood by projected
//! Adam ascent from a fixed grid of starting points; the best end point wins.

use std::f64::consts::PI;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Diagonal jitter tried in order when a covariance matrix is not numerically positive
/// definite.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];
pub const MIN_NOISE_VAR: f64 = 1e-8;

const LOG_LENGTH_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // [1e-2, 1e2]
const LOG_SIGNAL_BOUNDS: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091);
const LOG_NOISE_BOUNDS: (f64, f64) = (-18.420_680_743_952_367, 0.0); // [1e-8, 1]

/// Starting (length scale, noise variance) pairs; signal variance always starts at 1.
pub const START_GRID: [(f64, f64); 4] = [(0.1, 1e-3), (0.5, 1e-3), (2.0, 1e-3), (0.5, 1e-1)];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("GP needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation {0} has the wrong dimension")]
    DimensionMismatch(usize),
    #[error("non-finite observation")]
    NonFinite,
    #[error("covariance matrix singular after jitter up to 1e-4")]
    SingularCovariance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpOptions {
    /// Pins the noise variance (standardized units) instead of fitting it.
    pub fixed_noise: Option<f64>,
    pub iterations: usize,
    pub step: f64,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            fixed_noise: None,
            iterations: 80,
            step: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    /// Noise variance in standardized objective units.
    pub noise_var: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn matern52(r: f64, signal_var: f64) -> f64 {
    let s = SQRT5 * r;
    signal_var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn scaled_sq_dist(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum()
}

/// In-place lower Cholesky factor of a row-major n×n matrix; `None` if not positive definite.
fn cholesky(a: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Some(())
}

fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn solve_upper_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

struct Factorized {
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    lml: f64,
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    dims: usize,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn kernel_matrix(&self, ls: &[f64], signal: f64) -> Vec<f64> {
        let n = self.n();
        let mut k = vec![0.0; n * n];
        for a in 0..n {
            k[a * n + a] = signal;
            for b in 0..a {
                let v = matern52(scaled_sq_dist(&self.x[a], &self.x[b], ls).sqrt(), signal);
                k[a * n + b] = v;
                k[b * n + a] = v;
            }
        }
        k
    }

    fn factorize(&self, kf: &[f64], noise: f64) -> Option<Factorized> {
        let n = self.n();
        for jitter in JITTER_LADDER {
            let mut l = kf.to_vec();
            for i in 0..n {
                l[i * n + i] += noise + jitter;
            }
            if cholesky(&mut l, n).is_none() {
                continue;
            }
            let mut alpha = self.y.to_vec();
            solve_lower(&l, n, &mut alpha);
            let quad: f64 = alpha.iter().map(|v| v * v).sum();
            solve_upper_t(&l, n, &mut alpha);
            let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
            let lml = -0.5 * quad - logdet - 0.5 * n as f64 * (2.0 * PI).ln();
            return Some(Factorized {
                chol: l,
                alpha,
                jitter,
                lml,
            });
        }
        None
    }

    /// theta = [log l_1..log l_D, log s², log noise]. Returns the log marginal likelihood
    /// and its gradient (the noise component is zero when noise is pinned).
    fn lml_and_grad(&self, theta: &[f64], noise_fixed: bool) -> Option<(f64, Vec<f64>)> {
        let n = self.n();
        let d = self.dims;
        let ls: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
        let signal = theta[d].exp();
        let noise = theta[d + 1].exp();
        let kf = self.kernel_matrix(&ls, signal);
        let f = self.factorize(&kf, noise)?;

        // K^-1 column by column from the factor.
        let mut kinv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            solve_lower(&f.chol, n, &mut e);
            solve_upper_t(&f.chol, n, &mut e);
            for r in 0..n {
                kinv[r * n + c] = e[r];
            }
        }
        // W = alpha alpha^T - K^-1; dL/dtheta = 0.5 tr(W dK/dtheta).
        let w = |a: usize, b: usize| f.alpha[a] * f.alpha[b] - kinv[a * n + b];

        let mut grad = vec![0.0; d + 2];
        let inv_l2: Vec<f64> = ls.iter().map(|l| 1.0 / (l * l)).collect();
        for a in 0..n {
            grad[d] += 0.5 * w(a, a) * signal;
            for b in 0..a {
                let wab = w(a, b);
                let r = scaled_sq_dist(&self.x[a], &self.x[b], &ls).sqrt();
                let s = SQRT5 * r;
                // Off-diagonal pairs appear twice in the trace.
                grad[d] += wab * kf[a * n + b];
                let g = wab * (5.0 / 3.0) * signal * (1.0 + s) * (-s).exp();
                for k in 0..d {
                    let delta = self.x[a][k] - self.x[b][k];
                    grad[k] += g * delta * delta * inv_l2[k];
                }
            }
        }
        if !noise_fixed {
            grad[d + 1] = 0.5 * noise * (0..n).map(|a| w(a, a)).sum::<f64>();
        }
        Some((f.lml, grad))
    }
}

fn clamp_theta(theta: &mut [f64], dims: usize, noise_fixed: bool) {
    for t in &mut theta[..dims] {
        *t = t.clamp(LOG_LENGTH_BOUNDS.0, LOG_LENGTH_BOUNDS.1);
    }
    theta[dims] = theta[dims].clamp(LOG_SIGNAL_BOUNDS.0, LOG_SIGNAL_BOUNDS.1);
    if !noise_fixed {
        theta[dims + 1] = theta[dims + 1].clamp(LOG_NOISE_BOUNDS.0, LOG_NOISE_BOUNDS.1);
    }
}

fn ascend(p: &Problem<'_>, mut theta: Vec<f64>, opts: &GpOptions) -> Option<(f64, Vec<f64>)> {
    let noise_fixed = opts.fixed_noise.is_some();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for t in 1..=opts.iterations.max(1) {
        let Some((val, g)) = p.lml_and_grad(&theta, noise_fixed) else {
            break;
        };
        if best.as_ref().is_none_or(|(bv, _)| val > *bv) {
            best = Some((val, theta.clone()));
        }
        if g.iter().map(|x| x.abs()).fold(0.0, f64::max) < 1e-6 {
            break;
        }
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            theta[i] += opts.step * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        clamp_theta(&mut theta, p.dims, noise_fixed);
    }
    best
}

impl GpSurrogate {
    pub fn fit(x: &[Vec<f64>], y: &[f64], opts: &GpOptions) -> Result<Self, GpError> {
        let n = y.len();
        if n < 2 || x.len() != n {
            return Err(GpError::TooFewObservations(n.min(x.len())));
        }
        let dims = x[0].len();
        for (i, row) in x.iter().enumerate() {
            if row.len() != dims || dims == 0 {
                return Err(GpError::DimensionMismatch(i));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() > 1e-12 * y_mean.abs().max(1.0) {
            var.sqrt()
        } else {
            1.0
        };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
        let problem = Problem { x, y: &ys, dims };

        let noise_fixed = opts.fixed_noise.map(|v| v.max(0.0));
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (l0, n0) in START_GRID {
            let mut theta = vec![l0.ln(); dims];
            theta.push(0.0);
            theta.push(match noise_fixed {
                Some(v) => v.max(f64::MIN_POSITIVE).ln(),
                None => n0.ln(),
            });
            clamp_theta(&mut theta, dims, noise_fixed.is_some());
            if let Some((val, th)) = ascend(&problem, theta, opts) {
                if best.as_ref().is_none_or(|(bv, _)| val > *bv) {
                    best = Some((val, th));
                }
            }
        }
        let (_, theta) = best.ok_or(GpError::SingularCovariance)?;

        let length_scales: Vec<f64> = theta[..dims].iter().map(|t| t.exp()).collect();
        let signal_var = theta[dims].exp();
        let noise_var = match noise_fixed {
            Some(v) => v,
            None => theta[dims + 1].exp().max(MIN_NOISE_VAR),
        };
        let kf = problem.kernel_matrix(&length_scales, signal_var);
        let f = problem
            .factorize(&kf, noise_var)
            .ok_or(GpError::SingularCovariance)?;
        Ok(Self {
            x: x.to_vec(),
            y_mean,
            y_std,
            length_scales,
            signal_var,
            noise_var,
            jitter: f.jitter,
            log_marginal_likelihood: f.lml,
            chol: f.chol,
            alpha: f.alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.length_scales.len()
    }

    pub fn observed_points(&self) -> &[Vec<f64>] {
        &self.x
    }

    /// Posterior mean and noise-free posterior variance of the latent objective, in the
    /// objective's original units.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let n = self.len();
        let mut k: Vec<f64> = self
            .x
            .iter()
            .map(|xi| matern52(scaled_sq_dist(xi, p, &self.length_scales).sqrt(), self.signal_var))
            .collect();
        let mean: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        solve_lower(&self.chol, n, &mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        let var = (self.signal_var - explained).max(0.0);
        (
            self.y_mean + self.y_std * mean,
            var * self.y_std * self.y_std,
        )
    }
}
