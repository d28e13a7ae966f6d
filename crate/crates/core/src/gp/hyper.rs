//! Maximum-marginal-likelihood kernel hyperparameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{cholesky_with_jitter, FitOptions, KernelSpec, MeanPrior, ReplicatedDataset};
use crate::error::{invalid, Result};
use crate::optim::{minimize_box, LbfgsOptions};

/// Box on the log-parameters searched by [`estimate_hyperparameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBounds {
    /// Bounds on `ln θᵢ`, shared by every input dimension.
    pub log_rate: (f64, f64),
    /// Bounds on `ln σ_F²`.
    pub log_variance: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self { log_rate: (1e-3f64.ln(), 1e2f64.ln()), log_variance: (1e-2f64.ln(), 1e2f64.ln()) }
    }
}

impl HyperBounds {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if ok(self.log_rate) && ok(self.log_variance) {
            Ok(())
        } else {
            invalid(format!("hyperparameter bounds must be finite and ordered, got {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperOptions {
    pub bounds: HyperBounds,
    /// Number of local searches; the first starts from a data-driven guess,
    /// the rest from uniform draws in the box.
    pub restarts: usize,
    pub max_iters: usize,
    pub prior: MeanPrior,
    pub fit: FitOptions,
}

impl Default for HyperOptions {
    fn default() -> Self {
        Self {
            bounds: HyperBounds::default(),
            restarts: 3,
            max_iters: 60,
            prior: MeanPrior::default(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperFit {
    pub kernel: KernelSpec,
    /// Log marginal likelihood at `kernel`.
    pub log_likelihood: f64,
    /// False when no local search improved on its starting point; `kernel`
    /// is then the best starting point.
    pub improved: bool,
}

/// Marginal likelihood of the sample means as a function of
/// `(ln θ₁, …, ln θ_d, ln σ_F²)`, with analytic gradient.
struct Objective<'a> {
    n: usize,
    dim: usize,
    /// Per-dimension squared differences, `sq[k][i*n + j]`.
    sq: Vec<Vec<f64>>,
    resid: DVector<f64>,
    /// Noise diagonal plus `LᵀΩL`; the part of the covariance that does not
    /// depend on the kernel.
    fixed: DMatrix<f64>,
    opts: &'a FitOptions,
}

impl<'a> Objective<'a> {
    fn new(data: &ReplicatedDataset, prior: &MeanPrior, opts: &'a FitOptions) -> Self {
        let n = data.len();
        let dim = data.dim();
        let pts = data.points();
        let mut sq = vec![vec![0.0; n * n]; dim];
        for (k, m) in sq.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..i {
                    let d = pts[i][k] - pts[j][k];
                    m[i * n + j] = d * d;
                    m[j * n + i] = d * d;
                }
            }
        }
        let basis = prior.basis();
        let p = prior.prior_mean().len();
        let mut lt = DMatrix::zeros(n, p);
        for (i, x) in pts.iter().enumerate() {
            lt.row_mut(i).copy_from(&basis.eval(x).transpose());
        }
        let mut fixed = &lt * prior.prior_cov() * lt.transpose();
        for (i, v) in data.noise_variances(opts.noise_floor).into_iter().enumerate() {
            fixed[(i, i)] += v;
        }
        let resid = DVector::from_column_slice(data.means()) - &lt * prior.prior_mean();
        Self { n, dim, sq, resid, fixed, opts }
    }

    fn kernel_matrix(&self, params: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let variance = params[self.dim].exp();
        let rates: Vec<f64> = params[..self.dim].iter().map(|v| v.exp()).collect();
        let mut k = DMatrix::from_element(n, n, variance);
        for i in 0..n {
            for j in 0..i {
                let s: f64 = rates.iter().zip(&self.sq).map(|(t, m)| t * m[i * n + j]).sum();
                let v = variance * (-s).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Negative log marginal likelihood; writes its gradient into `grad`.
    fn eval(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let n = self.n;
        let variance = params[self.dim].exp();
        let k = self.kernel_matrix(params);
        let total = &k + &self.fixed;
        let Ok((chol, _)) = cholesky_with_jitter(total, variance, self.opts, "marginal covariance") else {
            return f64::INFINITY;
        };
        let alpha = chol.solve(&self.resid);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let nll = 0.5 * (self.resid.dot(&alpha) + logdet + n as f64 * (2.0 * PI).ln());

        // d(-LML)/dψ = -½ tr((ααᵀ - C⁻¹) ∂C/∂ψ)
        let inv = chol.inverse();
        let mut w = inv;
        for j in 0..n {
            for i in 0..n {
                w[(i, j)] = alpha[i] * alpha[j] - w[(i, j)];
            }
        }
        let mut g_var = 0.0;
        for j in 0..n {
            for i in 0..n {
                g_var += w[(i, j)] * k[(i, j)];
            }
        }
        grad[self.dim] = -0.5 * g_var;
        for (kdim, m) in self.sq.iter().enumerate() {
            let rate = params[kdim].exp();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..i {
                    acc += w[(i, j)] * k[(i, j)] * m[i * n + j];
                }
            }
            // symmetric: off-diagonal pairs counted twice
            grad[kdim] = -0.5 * (-rate * 2.0 * acc);
        }
        nll
    }
}

/// Multi-start maximization of the log marginal likelihood over
/// `(θ, σ_F²)` in log-space. Deterministic given the state of `rng`.
pub fn estimate_hyperparameters<R: Rng + ?Sized>(
    data: &ReplicatedDataset,
    opts: &HyperOptions,
    rng: &mut R,
) -> Result<HyperFit> {
    if data.len() < 3 {
        return invalid(format!("hyperparameter estimation needs at least 3 points, got {}", data.len()));
    }
    opts.bounds.validate()?;
    let dim = data.dim();
    let objective = Objective::new(data, &opts.prior, &opts.fit);

    let (rlo, rhi) = opts.bounds.log_rate;
    let (vlo, vhi) = opts.bounds.log_variance;
    let mut lo = vec![rlo; dim + 1];
    let mut hi = vec![rhi; dim + 1];
    lo[dim] = vlo;
    hi[dim] = vhi;

    let restarts = opts.restarts.max(1);
    let mut starts = Vec::with_capacity(restarts);
    starts.push(initial_guess(data, &lo, &hi));
    for _ in 1..restarts {
        starts.push(lo.iter().zip(&hi).map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l }).collect::<Vec<_>>());
    }

    let lbfgs = LbfgsOptions { max_iters: opts.max_iters, grad_tol: 1e-5, rel_tol: 1e-9, ..Default::default() };
    let mut best_start: Option<(Vec<f64>, f64)> = None;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut improved = false;
    let mut scratch = vec![0.0; dim + 1];
    for start in starts {
        let f0 = objective.eval(&start, &mut scratch);
        if f0.is_finite() && best_start.as_ref().is_none_or(|(_, f)| f0 < *f) {
            best_start = Some((start.clone(), f0));
        }
        let found = minimize_box(|p, g| objective.eval(p, g), &start, &lo, &hi, &lbfgs);
        if found.value.is_finite() {
            if found.value < f0 - 1e-12 * f0.abs().max(1.0) {
                improved = true;
            }
            if best.as_ref().is_none_or(|(_, f)| found.value < *f) {
                best = Some((found.x, found.value));
            }
        }
    }

    let (params, nll) = match (best, best_start) {
        (Some(b), _) if improved => b,
        (_, Some(s)) => s,
        (Some(b), None) => b,
        (None, None) => {
            return Err(crate::Error::NotPositiveDefinite("marginal covariance"));
        }
    };
    if !improved {
        log::warn!("hyperparameter search did not improve on any starting point");
    }
    let kernel = KernelSpec::new(params[..dim].iter().map(|v| v.exp()).collect(), params[dim].exp())?;
    Ok(HyperFit { kernel, log_likelihood: -nll, improved })
}

/// Rates that make the average squared scaled distance of order one, and the
/// sample variance of the means.
fn initial_guess(data: &ReplicatedDataset, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let dim = data.dim();
    let n = data.len() as f64;
    let pts = data.points();
    let mut guess = Vec::with_capacity(dim + 1);
    for k in 0..dim {
        let mean = pts.iter().map(|p| p[k]).sum::<f64>() / n;
        let var = pts.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / n;
        guess.push((1.0 / (2.0 * dim as f64 * var.max(1e-12))).ln());
    }
    let ym = data.means().iter().sum::<f64>() / n;
    let yv = data.means().iter().map(|m| (m - ym).powi(2)).sum::<f64>() / n;
    guess.push(yv.max(1e-12).ln());
    guess.iter().zip(lo.iter().zip(hi)).map(|(g, (l, h))| g.clamp(*l, *h)).collect()
}
