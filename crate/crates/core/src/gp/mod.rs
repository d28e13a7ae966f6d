//! Stochastic Gaussian-process regression on replicated noisy observations.
//!
//! The latent objective `F` carries a squared-exponential covariance and a
//! linear mean `l(x)ᵀβ` whose coefficients have a Gaussian prior
//! `β ~ N(b, Ω)`. Observations are sample means `Ȳ(xᵢ)` of replicated runs;
//! their noise enters the posterior through the diagonal matrix `Σ_ξ` with
//! entries `s²(xᵢ)/M(xᵢ)`.

mod hyper;

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, invalid, Error, Result};

pub use hyper::{estimate_hyperparameters, HyperBounds, HyperFit, HyperOptions};

/// Squared-exponential covariance `σ_F² · exp(-Σ θᵢ (xᵢ - x′ᵢ)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    rates: Vec<f64>,
    variance: f64,
}

impl KernelSpec {
    /// `rates` are the per-dimension inverse squared lengthscales θ.
    pub fn new(rates: Vec<f64>, variance: f64) -> Result<Self> {
        if rates.is_empty() {
            return invalid("kernel needs at least one lengthscale rate");
        }
        if rates.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return invalid(format!("lengthscale rates must be positive and finite, got {rates:?}"));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return invalid(format!("process variance must be positive and finite, got {variance}"));
        }
        Ok(Self { rates, variance })
    }

    /// Same rate on every dimension.
    pub fn isotropic(dim: usize, rate: f64, variance: f64) -> Result<Self> {
        Self::new(vec![rate; dim], variance)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((a, b), t) in x.iter().zip(y).zip(&self.rates) {
            let d = a - b;
            s += t * d * d;
        }
        self.variance * (-s).exp()
    }
}

/// Known basis functions `l(x)` of the linear mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanBasis {
    /// `l(x) = (1)`
    Constant,
    /// `l(x) = (1, x₁, …, x_d)`
    Linear,
}

impl MeanBasis {
    pub fn len(&self, dim: usize) -> usize {
        match self {
            MeanBasis::Constant => 1,
            MeanBasis::Linear => dim + 1,
        }
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        match self {
            MeanBasis::Constant => DVector::from_element(1, 1.0),
            MeanBasis::Linear => DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied())),
        }
    }
}

/// Gaussian prior `β ~ N(b, Ω)` on the mean coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPrior {
    basis: MeanBasis,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
}

impl MeanPrior {
    pub fn new(basis: MeanBasis, prior_mean: DVector<f64>, prior_cov: DMatrix<f64>) -> Result<Self> {
        let p = prior_mean.len();
        if prior_cov.nrows() != p || prior_cov.ncols() != p {
            return invalid(format!(
                "prior covariance is {}x{} but the prior mean has length {p}",
                prior_cov.nrows(),
                prior_cov.ncols()
            ));
        }
        if (&prior_cov - prior_cov.transpose()).amax() > 1e-12 * prior_cov.amax().max(1.0) {
            return invalid("prior covariance must be symmetric");
        }
        if Cholesky::new(prior_cov.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("prior covariance"));
        }
        Ok(Self { basis, prior_mean, prior_cov })
    }

    /// Constant basis with `β ~ N(mean, variance)`.
    pub fn constant(mean: f64, variance: f64) -> Result<Self> {
        Self::new(MeanBasis::Constant, DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn basis(&self) -> MeanBasis {
        self.basis
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    /// Copy of this prior with Ω multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.basis, self.prior_mean.clone(), &self.prior_cov * factor)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        check_dim(self.prior_mean.len(), self.basis.len(dim))
    }
}

impl Default for MeanPrior {
    /// Weakly informative constant mean, `β ~ N(0, 10²)`.
    fn default() -> Self {
        Self::constant(0.0, 100.0).expect("default prior is valid")
    }
}

/// Design points together with the sample statistics of their replications.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedDataset {
    points: Vec<Vec<f64>>,
    means: Vec<f64>,
    variances: Vec<f64>,
    counts: Vec<usize>,
}

impl ReplicatedDataset {
    pub fn new(points: Vec<Vec<f64>>, means: Vec<f64>, variances: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let data = Self::new_unchecked_distinct(points, means, variances, counts)?;
        for i in 0..data.len() {
            for j in 0..i {
                if data.points[i] == data.points[j] {
                    return invalid(format!("design points {j} and {i} coincide"));
                }
            }
        }
        Ok(data)
    }

    /// Validates everything except pairwise distinctness. Projected inputs
    /// can collide without making the model ill-posed (the noise and jitter
    /// keep the covariance definite).
    pub(crate) fn new_unchecked_distinct(
        points: Vec<Vec<f64>>,
        means: Vec<f64>,
        variances: Vec<f64>,
        counts: Vec<usize>,
    ) -> Result<Self> {
        let n = points.len();
        if means.len() != n || variances.len() != n || counts.len() != n {
            return invalid(format!(
                "dataset columns differ in length: {} points, {} means, {} variances, {} counts",
                n,
                means.len(),
                variances.len(),
                counts.len()
            ));
        }
        if let Some(first) = points.first() {
            let d = first.len();
            if d == 0 {
                return invalid("design points must have at least one coordinate");
            }
            if let Some(bad) = points.iter().find(|p| p.len() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
            }
        }
        if points.iter().flatten().chain(&means).any(|v| !v.is_finite()) {
            return invalid("design points and sample means must be finite");
        }
        if variances.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return invalid("sample variances must be finite and nonnegative");
        }
        if counts.contains(&0) {
            return invalid("replicate counts must be at least 1");
        }
        Ok(Self { points, means, variances, counts })
    }

    /// Builds the dataset from raw replications at each point.
    pub fn from_replicates(points: Vec<Vec<f64>>, replicates: &[Vec<f64>]) -> Result<Self> {
        let mut means = Vec::with_capacity(replicates.len());
        let mut variances = Vec::with_capacity(replicates.len());
        let mut counts = Vec::with_capacity(replicates.len());
        for reps in replicates {
            if reps.is_empty() {
                return invalid("every point needs at least one replication");
            }
            let m = reps.len() as f64;
            let mean = reps.iter().sum::<f64>() / m;
            let var = if reps.len() > 1 {
                reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            means.push(mean);
            variances.push(var);
            counts.push(reps.len());
        }
        Self::new(points, means, variances, counts)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Input dimension (0 for an empty dataset).
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            means: indices.iter().map(|&i| self.means[i]).collect(),
            variances: indices.iter().map(|&i| self.variances[i]).collect(),
            counts: indices.iter().map(|&i| self.counts[i]).collect(),
        }
    }

    /// Same statistics at transformed inputs.
    pub(crate) fn with_points(&self, points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new_unchecked_distinct(points, self.means.clone(), self.variances.clone(), self.counts.clone())
    }

    /// Affine transform `(y - shift) / scale` of the sample means, with the
    /// variances rescaled to match.
    pub(crate) fn standardized(&self, shift: f64, scale: f64) -> Self {
        Self {
            points: self.points.clone(),
            means: self.means.iter().map(|m| (m - shift) / scale).collect(),
            variances: self.variances.iter().map(|v| v / (scale * scale)).collect(),
            counts: self.counts.clone(),
        }
    }

    /// Plug-in noise variances of the sample means, `s²(xᵢ)/M(xᵢ)`.
    ///
    /// Points with a single replication have no sample variance; they get
    /// the pooled average over points with at least two replications, or
    /// `floor` when no such point exists.
    pub fn noise_variances(&self, floor: f64) -> Vec<f64> {
        let (sum, cnt) = self
            .variances
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c >= 2)
            .fold((0.0, 0usize), |(s, k), (v, _)| (s + v, k + 1));
        let pooled = if cnt > 0 { sum / cnt as f64 } else { floor };
        self.variances
            .iter()
            .zip(&self.counts)
            .map(|(&v, &c)| if c >= 2 { v / c as f64 } else { pooled })
            .collect()
    }
}

/// Numerical settings for [`fit_gp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Initial diagonal jitter, relative to σ_F².
    pub jitter: f64,
    /// Largest relative jitter tried before giving up.
    pub max_jitter: f64,
    /// Noise variance used for single-replication points when no pooled
    /// sample variance is available.
    pub noise_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { jitter: 1e-10, max_jitter: 1e-4, noise_floor: 1e-6 }
    }
}

static NEGATIVE_VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of predictive variances below `-1e-8` that were clamped to zero
/// since process start.
pub fn negative_variance_clamps() -> u64 {
    NEGATIVE_VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v >= 0.0 {
        return v;
    }
    if v < -1e-8 {
        NEGATIVE_VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        log::warn!("clamping negative predictive variance {v:e}");
    }
    0.0
}

/// Cholesky factorization with escalating relative jitter.
pub(crate) fn cholesky_with_jitter(
    mut matrix: DMatrix<f64>,
    scale: f64,
    opts: &FitOptions,
    name: &'static str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = opts.jitter * scale;
    let max = opts.max_jitter * scale;
    for i in 0..matrix.nrows() {
        matrix[(i, i)] += jitter;
    }
    loop {
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok((chol, jitter));
        }
        if jitter * 2.0 > max * (1.0 + 1e-12) {
            return Err(Error::NotPositiveDefinite(name));
        }
        for i in 0..matrix.nrows() {
            matrix[(i, i)] += jitter;
        }
        jitter *= 2.0;
    }
}

/// A fitted stochastic GP. Immutable once built; prediction takes `&self`.
#[derive(Debug, Clone)]
pub struct PosteriorGP {
    kernel: KernelSpec,
    prior: MeanPrior,
    data: ReplicatedDataset,
    noise: DVector<f64>,
    jitter: f64,
    /// Factor of Σ_F + Σ_ξ (+ jitter).
    chol: Cholesky<f64, Dyn>,
    /// Lc⁻¹ Lᵀ, n×p.
    whitened_basis: DMatrix<f64>,
    /// Factor of Ω⁻¹ + L(Σ_F+Σ_ξ)⁻¹Lᵀ.
    coef_chol: Cholesky<f64, Dyn>,
    beta_hat: DVector<f64>,
    /// (Σ_F+Σ_ξ)⁻¹(Ȳ - Lᵀβ̂)
    resid_weights: DVector<f64>,
    omega_logdet: f64,
}

/// Fits the stochastic GP posterior to `data` with fixed kernel parameters.
pub fn fit_gp(data: &ReplicatedDataset, kernel: &KernelSpec, prior: &MeanPrior, opts: &FitOptions) -> Result<PosteriorGP> {
    if data.is_empty() {
        return invalid("cannot fit a GP to an empty dataset");
    }
    let d = data.dim();
    check_dim(kernel.dim(), d)?;
    prior.check_dim(d)?;

    let n = data.len();
    let noise = DVector::from_vec(data.noise_variances(opts.noise_floor));
    let pts = data.points();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        cov[(i, i)] = kernel.variance() + noise[i];
        for j in 0..i {
            let k = kernel.eval_unchecked(&pts[i], &pts[j]);
            cov[(i, j)] = k;
            cov[(j, i)] = k;
        }
    }
    let (chol, jitter) = cholesky_with_jitter(cov, kernel.variance(), opts, "process plus noise covariance")?;

    let basis = prior.basis();
    let p = basis.len(d);
    let mut basis_t = DMatrix::zeros(n, p);
    for (i, x) in pts.iter().enumerate() {
        basis_t.row_mut(i).copy_from(&basis.eval(x).transpose());
    }
    let whitened_basis = chol.l_dirty().solve_lower_triangular(&basis_t).expect("nonsingular factor");

    let omega_chol = Cholesky::new(prior.prior_cov().clone()).ok_or(Error::NotPositiveDefinite("prior covariance"))?;
    let omega_inv = omega_chol.inverse();
    let omega_logdet = 2.0 * omega_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let precision = &omega_inv + whitened_basis.transpose() * &whitened_basis;
    let coef_chol = Cholesky::new(precision).ok_or(Error::NotPositiveDefinite("posterior coefficient precision"))?;

    let y = DVector::from_column_slice(data.means());
    let white_y = chol.l_dirty().solve_lower_triangular(&y).expect("nonsingular factor");
    let rhs = &omega_inv * prior.prior_mean() + whitened_basis.transpose() * &white_y;
    let beta_hat = coef_chol.solve(&rhs);
    let resid_weights = chol.solve(&(&y - &basis_t * &beta_hat));

    Ok(PosteriorGP {
        kernel: kernel.clone(),
        prior: prior.clone(),
        data: data.clone(),
        noise,
        jitter,
        chol,
        whitened_basis,
        coef_chol,
        beta_hat,
        resid_weights,
        omega_logdet,
    })
}

impl PosteriorGP {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn prior(&self) -> &MeanPrior {
        &self.prior
    }

    pub fn data(&self) -> &ReplicatedDataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    /// Diagonal of Σ_ξ used in the fit.
    pub fn noise_diag(&self) -> &DVector<f64> {
        &self.noise
    }

    /// Absolute jitter that was added to the covariance diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn beta_hat(&self) -> &DVector<f64> {
        &self.beta_hat
    }

    /// Lower-triangular factor of Σ_F + Σ_ξ (+ jitter).
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        let pts = self.data.points();
        DVector::from_iterator(pts.len(), pts.iter().map(|p| self.kernel.eval_unchecked(x, p)))
    }

    /// Whitened cross-covariance `Lc⁻¹k(x)` and whitened `u(x)`.
    fn whiten(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let k = self.cross_cov(x);
        let v = self.chol.l_dirty().solve_lower_triangular(&k).expect("nonsingular factor");
        let u = self.prior.basis().eval(x) - self.whitened_basis.transpose() * &v;
        let q = self.coef_chol.l_dirty().solve_lower_triangular(&u).expect("nonsingular factor");
        (k, v, q)
    }

    /// Posterior mean and variance of `F(x)`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.dim(), x.len())?;
        let (k, v, q) = self.whiten(x);
        let mean = self.prior.basis().eval(x).dot(&self.beta_hat) + k.dot(&self.resid_weights);
        let var = self.kernel.variance() - v.norm_squared() + q.norm_squared();
        Ok((mean, clamp_variance(var)))
    }

    /// Posterior mean only; skips the triangular solves.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.prior.basis().eval(x).dot(&self.beta_hat) + self.cross_cov(x).dot(&self.resid_weights))
    }

    /// Posterior covariance `C(x, x′)`.
    pub fn cov(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        let (_, vx, qx) = self.whiten(x);
        if x == y {
            return Ok(clamp_variance(self.kernel.variance() - vx.norm_squared() + qx.norm_squared()));
        }
        let (_, vy, qy) = self.whiten(y);
        Ok(self.kernel.eval_unchecked(x, y) - vx.dot(&vy) + qx.dot(&qy))
    }

    /// Joint posterior mean vector and covariance matrix at `points`.
    pub fn joint(&self, points: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let c = points.len();
        let n = self.data.len();
        for p in points {
            check_dim(self.dim(), p.len())?;
        }
        let basis = self.prior.basis();
        let p_len = self.beta_hat.len();
        let mut cross = DMatrix::zeros(n, c);
        let mut basis_cols = DMatrix::zeros(p_len, c);
        for (j, x) in points.iter().enumerate() {
            cross.set_column(j, &self.cross_cov(x));
            basis_cols.set_column(j, &basis.eval(x));
        }
        let mean = basis_cols.transpose() * &self.beta_hat + cross.transpose() * &self.resid_weights;
        let v = self.chol.l_dirty().solve_lower_triangular(&cross).expect("nonsingular factor");
        let u = basis_cols - self.whitened_basis.transpose() * &v;
        let q = self.coef_chol.l_dirty().solve_lower_triangular(&u).expect("nonsingular factor");
        let mut cov = q.transpose() * &q - v.transpose() * &v;
        for i in 0..c {
            for j in 0..=i {
                let k = if i == j { self.kernel.variance() } else { self.kernel.eval_unchecked(&points[i], &points[j]) };
                cov[(i, j)] += k;
                if i != j {
                    cov[(j, i)] = cov[(i, j)];
                }
            }
        }
        Ok((mean, cov))
    }

    /// Log density of Ȳ under `N(Lᵀb, Σ_F + Σ_ξ + LᵀΩL)`, with β integrated
    /// out. Evaluated through the cached factors via the matrix determinant
    /// lemma and Woodbury.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len();
        let basis = self.prior.basis();
        let y = DVector::from_column_slice(self.data.means());
        let prior_fit = DVector::from_iterator(n, self.data.points().iter().map(|x| basis.eval(x).dot(self.prior.prior_mean())));
        let r = y - prior_fit;
        let z = self.chol.l_dirty().solve_lower_triangular(&r).expect("nonsingular factor");
        let g = self.whitened_basis.transpose() * &z;
        let h = self.coef_chol.l_dirty().solve_lower_triangular(&g).expect("nonsingular factor");
        let quad = z.norm_squared() - h.norm_squared();
        let logdet_c = 2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_a = 2.0 * self.coef_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (quad + logdet_c + self.omega_logdet + logdet_a + n as f64 * (2.0 * PI).ln())
    }

    /// Leave-one-out standardized residuals of the sample means under the
    /// marginal model `N(Lᵀb, Σ_F + Σ_ξ + LᵀΩL)`.
    pub fn loo_standardized_residuals(&self) -> Vec<f64> {
        let n = self.data.len();
        let basis = self.prior.basis();
        let pts = self.data.points();
        let mut total = self.chol.l() * self.chol.l().transpose();
        let mut lt = DMatrix::zeros(n, self.beta_hat.len());
        for (i, x) in pts.iter().enumerate() {
            lt.row_mut(i).copy_from(&basis.eval(x).transpose());
        }
        total += &lt * self.prior.prior_cov() * lt.transpose();
        let Some(chol) = Cholesky::new(total) else {
            return vec![0.0; n];
        };
        let inv = chol.inverse();
        let r = DVector::from_column_slice(self.data.means()) - &lt * self.prior.prior_mean();
        let alpha = &inv * r;
        (0..n).map(|i| alpha[i] / inv[(i, i)].sqrt()).collect()
    }
}
