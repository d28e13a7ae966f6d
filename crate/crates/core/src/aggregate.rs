//! Aggregated Gaussian process built from embedded submodels.
//!
//! The design points are split into `m` random subsets. Submodel `i` maps
//! its subset through an embedding `Πᵢ` into `R^{dᵢ}`, fits a stochastic GP
//! there, and is scored by a BIC approximation of its log evidence. With
//! posterior model weights `wᵢ` the aggregate is again a GP with mean
//! `Σ wᵢ mᵢ(Πᵢx)` and covariance `Σ wᵢ² Cᵢ(Πᵢx, Πᵢx′)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{gaussian_embedding, pca_embedding, Embedding, EmbeddingKind};
use crate::error::{check_dim, invalid, Error, Result};
use crate::gp::{estimate_hyperparameters, fit_gp, HyperOptions, KernelSpec, PosteriorGP, ReplicatedDataset};

/// Splits `0..n` into `m` random groups whose sizes differ by at most one.
pub fn partition<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return invalid("number of subsets must be at least 1");
    }
    if m > n {
        return invalid(format!("cannot split {n} points into {m} nonempty subsets"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut groups = vec![Vec::with_capacity(n / m + 1); m];
    for (pos, i) in idx.into_iter().enumerate() {
        groups[pos % m].push(i);
    }
    Ok(groups)
}

/// Unnormalized model prior `(nᵢ/n)² (dᵢ/d)^η`.
pub fn model_prior(n_i: usize, n: usize, d_i: usize, d: usize, eta: f64) -> f64 {
    debug_assert!(1 <= n_i && n_i <= n && 1 <= d_i && d_i <= d);
    let frac_n = n_i as f64 / n as f64;
    let frac_d = d_i as f64 / d as f64;
    frac_n * frac_n * frac_d.powf(eta)
}

/// Normalizes `exp(log_evidence) · prior` with a max shift.
pub fn normalized_weights(log_evidence: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if log_evidence.len() != priors.len() {
        return invalid("one prior per evidence is required");
    }
    let scores: Vec<f64> = log_evidence
        .iter()
        .zip(priors)
        .map(|(&e, &p)| if p > 0.0 { e + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY || top.is_nan() {
        return Err(Error::DegenerateEvidence);
    }
    let raw: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// One embedded GP fitted on a subset of the design.
#[derive(Debug, Clone)]
pub struct Submodel {
    embedding: Embedding,
    subset: Vec<usize>,
    gp: PosteriorGP,
    max_log_likelihood: f64,
    log_evidence: f64,
}

impl Submodel {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Indices into the full dataset this submodel was trained on.
    pub fn subset_indices(&self) -> &[usize] {
        &self.subset
    }

    pub fn gp(&self) -> &PosteriorGP {
        &self.gp
    }

    pub fn n_i(&self) -> usize {
        self.subset.len()
    }

    pub fn d_i(&self) -> usize {
        self.embedding.target_dim()
    }

    pub fn max_log_likelihood(&self) -> f64 {
        self.max_log_likelihood
    }

    /// BIC approximation: max log-likelihood `− (dᵢ + 1)/2 · ln nᵢ`.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }
}

/// Where submodel kernel hyperparameters come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelChoice {
    /// Maximize the marginal likelihood.
    Estimate,
    /// Use the same isotropic kernel in every embedded space.
    Isotropic { rate: f64, variance: f64 },
}

/// Fits a submodel on `data[subset]` after mapping the inputs through
/// `embedding`.
pub fn fit_submodel<R: Rng + ?Sized>(
    data: &ReplicatedDataset,
    subset: Vec<usize>,
    embedding: Embedding,
    kernel: KernelChoice,
    hyper: &HyperOptions,
    rng: &mut R,
) -> Result<Submodel> {
    check_dim(embedding.source_dim(), data.dim())?;
    let sub = data.subset(&subset);
    let projected = sub.with_points(sub.points().iter().map(|p| embedding.project_unchecked(p)).collect())?;
    let kernel = match kernel {
        KernelChoice::Estimate => estimate_hyperparameters(&projected, hyper, rng)?.kernel,
        KernelChoice::Isotropic { rate, variance } => KernelSpec::isotropic(embedding.target_dim(), rate, variance)?,
    };
    let gp = fit_gp(&projected, &kernel, &hyper.prior, &hyper.fit)?;
    let max_log_likelihood = gp.log_marginal_likelihood();
    let p = embedding.target_dim() as f64 + 1.0;
    let log_evidence = max_log_likelihood - 0.5 * p * (subset.len() as f64).ln();
    Ok(Submodel { embedding, subset, gp, max_log_likelihood, log_evidence })
}

/// Bayes weights of `submodels` under the prior `(nᵢ/n)²(dᵢ/d)^η`.
pub fn bayes_weights(submodels: &[Submodel], n: usize, eta: f64) -> Result<Vec<f64>> {
    let evidence: Vec<f64> = submodels.iter().map(Submodel::log_evidence).collect();
    let priors: Vec<f64> = submodels
        .iter()
        .map(|s| model_prior(s.n_i(), n, s.d_i(), s.embedding.source_dim(), eta))
        .collect();
    normalized_weights(&evidence, &priors)
}

/// How many subsets to create.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubsetCount {
    /// `clamp(⌈n/50⌉, 2, 10)`, reduced so that every subset keeps at least
    /// three points.
    Auto,
    Fixed(usize),
}

impl SubsetCount {
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            SubsetCount::Fixed(m) => m,
            SubsetCount::Auto => n.div_ceil(50).clamp(2, 10).min(n / 3).max(1),
        }
    }
}

/// How each submodel's target dimension `dᵢ` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimPolicy {
    /// Uniform on `{⌈d/10⌉, …, min(⌈d/2⌉, nᵢ − 2)}`; when the range is empty
    /// its upper end is used.
    Random,
    /// The same `d_e` for every submodel (capped at `d`).
    Fixed(usize),
}

impl DimPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, d: usize, n_i: usize, rng: &mut R) -> usize {
        match *self {
            DimPolicy::Fixed(de) => de.clamp(1, d),
            DimPolicy::Random => {
                let hi = d.div_ceil(2).min(n_i.saturating_sub(2)).max(1);
                let lo = d.div_ceil(10).clamp(1, hi);
                rng.random_range(lo..=hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateConfig {
    pub subsets: SubsetCount,
    pub dims: DimPolicy,
    pub embedding: EmbeddingKind,
    pub eta: f64,
    pub kernel: KernelChoice,
    pub hyper: HyperOptions,
    /// Fit on `(Ȳ − mean)/sd` and map predictions back.
    pub standardize: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            subsets: SubsetCount::Auto,
            dims: DimPolicy::Random,
            embedding: EmbeddingKind::Gaussian,
            eta: 1.0,
            kernel: KernelChoice::Estimate,
            hyper: HyperOptions::default(),
            standardize: true,
        }
    }
}

/// Weighted sum of submodels. Immutable; prediction is `&self`.
#[derive(Debug, Clone)]
pub struct AggregatedModel {
    submodels: Vec<Submodel>,
    weights: Vec<f64>,
    eta: f64,
    n: usize,
    source_dim: usize,
    y_shift: f64,
    y_scale: f64,
}

impl AggregatedModel {
    /// Combines fitted submodels with Bayes weights. `n` is the size of the
    /// dataset the subsets were drawn from; `y_shift`/`y_scale` undo any
    /// standardization of the targets.
    pub fn from_submodels(submodels: Vec<Submodel>, n: usize, eta: f64, y_shift: f64, y_scale: f64) -> Result<Self> {
        let Some(first) = submodels.first() else {
            return Err(Error::NoSubmodels("empty submodel list".into()));
        };
        let source_dim = first.embedding.source_dim();
        if let Some(bad) = submodels.iter().find(|s| s.embedding.source_dim() != source_dim) {
            return Err(Error::DimensionMismatch { expected: source_dim, got: bad.embedding.source_dim() });
        }
        let weights = bayes_weights(&submodels, n, eta)?;
        Ok(Self { submodels, weights, eta, n, source_dim, y_shift, y_scale })
    }

    pub fn submodels(&self) -> &[Submodel] {
        &self.submodels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dim(&self) -> usize {
        self.source_dim
    }

    /// Same submodels, weights recomputed for another `η`.
    pub fn reweighted(&self, eta: f64) -> Result<Self> {
        let weights = bayes_weights(&self.submodels, self.n, eta)?;
        Ok(Self { weights, eta, ..self.clone() })
    }

    /// Aggregated posterior mean `μ_n(x)` and variance `k_n(x, x)`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(self.source_dim, x.len())?;
        let mut mean = 0.0;
        let mut var = 0.0;
        for (s, &w) in self.submodels.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let (m, v) = s.gp.predict(&s.embedding.project_unchecked(x))?;
            mean += w * m;
            var += w * w * v;
        }
        Ok((self.y_shift + self.y_scale * mean, self.y_scale * self.y_scale * var))
    }

    /// Aggregated posterior covariance `k_n(x, x′)`.
    pub fn cov(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.source_dim, x.len())?;
        check_dim(self.source_dim, y.len())?;
        let mut c = 0.0;
        for (s, &w) in self.submodels.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            c += w * w * s.gp.cov(&s.embedding.project_unchecked(x), &s.embedding.project_unchecked(y))?;
        }
        Ok(self.y_scale * self.y_scale * c)
    }

    /// Joint mean and covariance of the aggregate at `points`.
    pub fn joint(&self, points: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        for p in points {
            check_dim(self.source_dim, p.len())?;
        }
        let c = points.len();
        let mut mean = DVector::zeros(c);
        let mut cov = DMatrix::zeros(c, c);
        for (s, &w) in self.submodels.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let projected: Vec<Vec<f64>> = points.iter().map(|p| s.embedding.project_unchecked(p)).collect();
            let (m, k) = s.gp.joint(&projected)?;
            mean += m * w;
            cov += k * (w * w);
        }
        mean.apply(|v| *v = self.y_shift + self.y_scale * *v);
        cov *= self.y_scale * self.y_scale;
        Ok((mean, cov))
    }

    /// Fraction of training points whose leave-one-out standardized residual
    /// within their own submodel exceeds `threshold` in magnitude.
    pub fn loo_outlier_fraction(&self, threshold: f64) -> f64 {
        let (mut bad, mut total) = (0usize, 0usize);
        for s in &self.submodels {
            for z in s.gp.loo_standardized_residuals() {
                total += 1;
                if z.abs() > threshold {
                    bad += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }
}

fn target_scaling(data: &ReplicatedDataset, standardize: bool) -> (f64, f64) {
    if !standardize || data.len() < 2 {
        return (0.0, 1.0);
    }
    let n = data.len() as f64;
    let mean = data.means().iter().sum::<f64>() / n;
    let sd = (data.means().iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd > 0.0 && sd.is_finite() {
        (mean, sd)
    } else {
        (mean, 1.0)
    }
}

/// Partitions `data`, draws a fresh embedding per subset, fits every
/// submodel (in parallel) and combines them with Bayes weights.
///
/// A submodel whose fit fails is dropped with a warning as long as another
/// one survives.
pub fn build_aggregated_model<R: Rng + ?Sized>(
    data: &ReplicatedDataset,
    config: &AggregateConfig,
    rng: &mut R,
) -> Result<AggregatedModel> {
    let n = data.len();
    let d = data.dim();
    let m = config.subsets.resolve(n);
    let groups = partition(n, m, rng)?;
    let (shift, scale) = target_scaling(data, config.standardize);
    let scaled = data.standardized(shift, scale);

    // all randomness is drawn up front so the result does not depend on
    // how the fits are scheduled
    let plans: Vec<(Vec<usize>, usize, u64)> = groups
        .into_iter()
        .map(|g| {
            let d_i = match config.embedding {
                EmbeddingKind::Identity => d,
                _ => config.dims.draw(d, g.len(), rng),
            };
            (g, d_i, rng.next_u64())
        })
        .collect();

    let fitted: Vec<Result<Submodel>> = plans
        .into_par_iter()
        .map(|(subset, d_i, seed)| {
            let mut sub_rng = ChaCha8Rng::seed_from_u64(seed);
            let embedding = match config.embedding {
                EmbeddingKind::Identity => Embedding::identity(d)?,
                EmbeddingKind::Gaussian => gaussian_embedding(d, d_i, &mut sub_rng)?,
                EmbeddingKind::Pca => {
                    let x = DMatrix::from_fn(subset.len(), d, |r, c| data.points()[subset[r]][c]);
                    pca_embedding(&x, d_i)?
                }
            };
            fit_submodel(&scaled, subset, embedding, config.kernel, &config.hyper, &mut sub_rng)
        })
        .collect();

    let mut submodels = Vec::with_capacity(m);
    let mut last_err = None;
    for r in fitted {
        match r {
            Ok(s) => submodels.push(s),
            Err(e) => {
                if m >= 2 {
                    log::warn!("dropping submodel: {e}");
                }
                last_err = Some(e);
            }
        }
    }
    if submodels.is_empty() {
        return Err(match (m, last_err) {
            (1, Some(e)) => e,
            (_, e) => Error::NoSubmodels(e.map_or_else(String::new, |e| e.to_string())),
        });
    }
    AggregatedModel::from_submodels(submodels, n, config.eta, shift, scale)
}

/// A one-submodel aggregate over all of `data` with a caller-chosen
/// embedding. Targets are standardized as in [`build_aggregated_model`].
pub fn build_single_model<R: Rng + ?Sized>(
    data: &ReplicatedDataset,
    embedding: Embedding,
    config: &AggregateConfig,
    rng: &mut R,
) -> Result<AggregatedModel> {
    let (shift, scale) = target_scaling(data, config.standardize);
    let sub = fit_submodel(&data.standardized(shift, scale), (0..data.len()).collect(), embedding, config.kernel, &config.hyper, rng)?;
    AggregatedModel::from_submodels(vec![sub], data.len(), config.eta, shift, scale)
}

/// Outcome of [`select_eta_cv`].
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSelection {
    pub eta: f64,
    /// `(η, mean held-out squared error)` for every grid value.
    pub scores: Vec<(f64, f64)>,
}

/// Chooses `η` from `grid` by `k`-fold cross-validated squared prediction
/// error of the aggregated mean. Within a fold every `η` reuses the same
/// submodels, so only the weights differ. Ties go to the smaller `η`.
pub fn select_eta_cv<R: Rng + ?Sized>(
    data: &ReplicatedDataset,
    grid: &[f64],
    k: usize,
    config: &AggregateConfig,
    rng: &mut R,
) -> Result<EtaSelection> {
    if grid.is_empty() {
        return invalid("eta grid is empty");
    }
    if k < 2 {
        return invalid("cross-validation needs at least 2 folds");
    }
    if data.len() < 2 * k {
        return invalid(format!("{} points are too few for {k}-fold cross-validation", data.len()));
    }
    if grid.len() == 1 {
        return Ok(EtaSelection { eta: grid[0], scores: vec![(grid[0], f64::NAN)] });
    }
    let folds = partition(data.len(), k, rng)?;
    let mut sse = vec![0.0; grid.len()];
    for (f, held) in folds.iter().enumerate() {
        let train: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect();
        let model = build_aggregated_model(&data.subset(&train), config, rng)?;
        for (slot, &eta) in sse.iter_mut().zip(grid) {
            let weighted = model.reweighted(eta)?;
            for &i in held {
                let (m, _) = weighted.predict(&data.points()[i])?;
                *slot += (m - data.means()[i]).powi(2);
            }
        }
    }
    let n = data.len() as f64;
    let scores: Vec<(f64, f64)> = grid.iter().zip(&sse).map(|(&e, &s)| (e, s / n)).collect();
    let best = scores
        .iter()
        .copied()
        .reduce(|a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
        .expect("nonempty grid");
    Ok(EtaSelection { eta: best.0, scores })
}
