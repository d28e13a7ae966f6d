//! The optimization loop: initial design, then repeated search stage,
//! observation, allocation stage and model rebuild until the replication
//! budget or the iteration cap runs out.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{latin_hypercube, propose_next, AcquisitionSpec, BoxSpace};
use crate::aggregate::{build_aggregated_model, build_single_model, select_eta_cv, AggregateConfig, AggregatedModel};
use crate::allocation::{allocate, ocba_split, stage_budget, BudgetState, PointStats};
use crate::embedding::{gaussian_embedding, pca_embedding, Embedding, EmbeddingKind};
use crate::error::{invalid, Result};
use crate::gp::ReplicatedDataset;

/// A noisy black-box function. One call is one replication.
pub trait NoisyObjective {
    fn evaluate(&self, x: &[f64], rng: &mut ChaCha8Rng) -> f64;
}

impl<F: Fn(&[f64], &mut ChaCha8Rng) -> f64> NoisyObjective for F {
    fn evaluate(&self, x: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        self(x, rng)
    }
}

/// Maximin Latin hypercube: the best of 10 random designs by minimum
/// pairwise distance (measured in the unit cube).
pub fn initial_design<R: Rng + ?Sized>(n0: usize, space: &BoxSpace, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n0 < 2 {
        return invalid(format!("initial design needs at least 2 points, got {n0}"));
    }
    let width: Vec<f64> = space.lo().iter().zip(space.hi()).map(|(l, h)| h - l).collect();
    let min_dist = |pts: &[Vec<f64>]| {
        let mut best = f64::INFINITY;
        for i in 0..pts.len() {
            for j in 0..i {
                let d2: f64 = (0..width.len()).map(|k| ((pts[i][k] - pts[j][k]) / width[k]).powi(2)).sum();
                best = best.min(d2);
            }
        }
        best
    };
    let mut best = latin_hypercube(n0, space, rng);
    let mut best_score = min_dist(&best);
    for _ in 1..10 {
        let cand = latin_hypercube(n0, space, rng);
        let score = min_dist(&cand);
        if score > best_score {
            best = cand;
            best_score = score;
        }
    }
    Ok(best)
}

/// Index of the lowest sample mean; ties go to the larger replicate count,
/// then to the earlier index.
pub fn incumbent(data: &ReplicatedDataset) -> Result<usize> {
    if data.is_empty() {
        return invalid("incumbent of an empty dataset");
    }
    let (m, c) = (data.means(), data.counts());
    let mut b = 0;
    for i in 1..data.len() {
        if m[i] < m[b] || (m[i] == m[b] && c[i] > c[b]) {
            b = i;
        }
    }
    Ok(b)
}

/// How `η` is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum EtaChoice {
    Fixed(f64),
    /// Cross-validated once on the initial design.
    CrossValidated { grid: Vec<f64>, folds: usize },
}

/// Which surrogate the loop refits each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurrogatePolicy {
    /// Fresh partition and embeddings every iteration.
    Aggregated,
    /// One GP on all data through a single embedding drawn from the initial
    /// design and kept for the whole run.
    FixedEmbedding { kind: EmbeddingKind, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MamboConfig {
    pub n0: usize,
    /// Replication budget `N`.
    pub total_budget: u64,
    pub r_min: usize,
    /// Coefficient `c` of the floor `s_N = max(r_min, ⌈c ln²(N + 1)⌉)`.
    pub s_coef: f64,
    /// Extra replications per allocation stage beyond the floor demand,
    /// split by OCBA.
    pub ocba_bonus: usize,
    /// When false every point keeps exactly `r_min` replications.
    pub allocation: bool,
    pub acquisition: AcquisitionSpec,
    pub model: AggregateConfig,
    pub eta: EtaChoice,
    pub surrogate: SurrogatePolicy,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for MamboConfig {
    fn default() -> Self {
        Self {
            n0: 20,
            total_budget: 10_000_000,
            r_min: 2,
            s_coef: 5.0,
            ocba_bonus: 2,
            allocation: true,
            acquisition: AcquisitionSpec::default(),
            model: AggregateConfig::default(),
            eta: EtaChoice::CrossValidated { grid: vec![0.0, 1.0, 2.0, 4.0], folds: 2 },
            surrogate: SurrogatePolicy::Aggregated,
            max_iterations: 10_000,
            seed: 0,
        }
    }
}

impl MamboConfig {
    pub fn validate(&self, space: &BoxSpace) -> Result<()> {
        if self.n0 < 2 {
            return invalid(format!("n0 must be at least 2, got {}", self.n0));
        }
        if self.r_min < 2 {
            return invalid(format!("r_min must be at least 2, got {}", self.r_min));
        }
        if self.total_budget < (self.n0 * self.r_min) as u64 {
            return invalid(format!(
                "budget {} cannot cover the initial design ({} points x {} replications)",
                self.total_budget, self.n0, self.r_min
            ));
        }
        if let SurrogatePolicy::FixedEmbedding { dim, .. } = self.surrogate {
            if dim == 0 || dim > space.dim() {
                return invalid(format!("embedding dimension {dim} outside 1..={}", space.dim()));
            }
        }
        if let EtaChoice::CrossValidated { grid, folds } = &self.eta {
            if grid.is_empty() || *folds < 2 || self.n0 < 2 * folds {
                return invalid("eta cross-validation needs a nonempty grid, at least 2 folds and n0 >= 2 * folds");
            }
        }
        self.acquisition.validate()
    }
}

/// One trace row per design point, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Number of design points sampled so far (initial design included).
    pub iteration: usize,
    pub point: Vec<f64>,
    /// Sample mean of `point` right after it was observed.
    pub sample_mean: f64,
    /// Replications consumed so far.
    pub budget_spent: u64,
    pub incumbent: Vec<f64>,
    pub incumbent_mean: f64,
    /// Running minimum of `incumbent_mean`.
    pub best_so_far: f64,
    /// Seconds spent building the surrogate after this point (0 for all but
    /// the last initial point). The refit triggered by the initial validity
    /// check is not included.
    pub fit_seconds: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    BudgetExhausted,
    IterationCap,
    /// The surrogate could not be built even after one retry.
    ModelFailure(String),
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub incumbent: Vec<f64>,
    pub incumbent_mean: f64,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    pub eta: f64,
    pub data: ReplicatedDataset,
    pub budget_spent: u64,
    /// Surrogate built on the initial design.
    pub initial_model: Option<AggregatedModel>,
    /// Last surrogate that was built.
    pub final_model: Option<AggregatedModel>,
}

/// Welford accumulator per design point.
#[derive(Debug, Clone)]
struct Archive {
    points: Vec<Vec<f64>>,
    count: Vec<usize>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Archive {
    fn push_point(&mut self, x: Vec<f64>) -> usize {
        self.points.push(x);
        self.count.push(0);
        self.mean.push(0.0);
        self.m2.push(0.0);
        self.points.len() - 1
    }

    fn observe(&mut self, i: usize, y: f64) {
        self.count[i] += 1;
        let delta = y - self.mean[i];
        self.mean[i] += delta / self.count[i] as f64;
        self.m2[i] += delta * (y - self.mean[i]);
    }

    fn variance(&self, i: usize) -> f64 {
        if self.count[i] > 1 {
            (self.m2[i] / (self.count[i] - 1) as f64).max(0.0)
        } else {
            0.0
        }
    }

    fn dataset(&self) -> Result<ReplicatedDataset> {
        ReplicatedDataset::new(
            self.points.clone(),
            self.mean.clone(),
            (0..self.points.len()).map(|i| self.variance(i)).collect(),
            self.count.clone(),
        )
    }

    fn stats(&self) -> Vec<PointStats> {
        (0..self.points.len()).map(|i| PointStats { mean: self.mean[i], sd: self.variance(i).sqrt(), count: self.count[i] }).collect()
    }
}

struct Driver<'a, O: NoisyObjective + ?Sized> {
    objective: &'a O,
    config: &'a MamboConfig,
    archive: Archive,
    budget: BudgetState,
    model_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    eta: f64,
    fixed_embedding: Option<Embedding>,
}

impl<O: NoisyObjective + ?Sized> Driver<'_, O> {
    fn replicate(&mut self, i: usize, k: usize) -> Result<()> {
        self.budget.spend(k)?;
        for _ in 0..k {
            let y = self.objective.evaluate(&self.archive.points[i], &mut self.noise_rng);
            if !y.is_finite() {
                return invalid(format!("objective returned {y} at design point {i}"));
            }
            self.archive.observe(i, y);
        }
        Ok(())
    }

    fn model_config(&self, restarts_factor: usize) -> AggregateConfig {
        let mut cfg = self.config.model.clone();
        cfg.eta = self.eta;
        cfg.hyper.restarts *= restarts_factor;
        cfg
    }

    fn build_once(&mut self, data: &ReplicatedDataset, restarts_factor: usize) -> Result<AggregatedModel> {
        let cfg = self.model_config(restarts_factor);
        match &self.fixed_embedding {
            Some(e) => build_single_model(data, e.clone(), &cfg, &mut self.model_rng),
            None => build_aggregated_model(data, &cfg, &mut self.model_rng),
        }
    }

    /// Builds the surrogate, retrying once with the advanced random stream.
    fn build(&mut self, data: &ReplicatedDataset, restarts_factor: usize) -> Result<AggregatedModel> {
        match self.build_once(data, restarts_factor) {
            Ok(m) => Ok(m),
            Err(e) => {
                log::warn!("surrogate build failed ({e}); retrying with a fresh partition");
                self.build_once(data, restarts_factor)
            }
        }
    }
}

/// Runs the optimizer, streaming trace rows into `sink` as they are produced.
///
/// Two ChaCha8 streams are seeded from the first two outputs of
/// `ChaCha8Rng::seed_from_u64(config.seed)`: the first drives the design,
/// the surrogate and the acquisition, the second the objective's noise.
/// With an aggregated surrogate, the initial model is screened by
/// leave-one-out residuals and refitted with twice the restarts when more
/// than 10% exceed 3 in magnitude.
pub fn run_mambo_with_sink<O: NoisyObjective + ?Sized>(
    objective: &O,
    space: &BoxSpace,
    config: &MamboConfig,
    sink: &mut dyn FnMut(&TraceRow),
) -> Result<RunResult> {
    config.validate(space)?;
    let start = Instant::now();
    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let model_rng = ChaCha8Rng::seed_from_u64(root.next_u64());
    let noise_rng = ChaCha8Rng::seed_from_u64(root.next_u64());
    let mut drv = Driver {
        objective,
        config,
        archive: Archive { points: Vec::new(), count: Vec::new(), mean: Vec::new(), m2: Vec::new() },
        budget: BudgetState::new(config.total_budget, config.r_min, config.s_coef)?,
        model_rng,
        noise_rng,
        eta: match config.eta {
            EtaChoice::Fixed(e) => e,
            EtaChoice::CrossValidated { ref grid, .. } => grid[0],
        },
        fixed_embedding: None,
    };
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best_so_far = f64::INFINITY;
    let mut emit = |trace: &mut Vec<TraceRow>, archive: &Archive, budget: &BudgetState, point: usize, fit: f64| -> Result<()> {
        let data = archive.dataset()?;
        let inc = incumbent(&data)?;
        best_so_far = best_so_far.min(archive.mean[inc]);
        let row = TraceRow {
            iteration: archive.points.len(),
            point: archive.points[point].clone(),
            sample_mean: archive.mean[point],
            budget_spent: budget.consumed(),
            incumbent: archive.points[inc].clone(),
            incumbent_mean: archive.mean[inc],
            best_so_far,
            fit_seconds: fit,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        sink(&row);
        trace.push(row);
        Ok(())
    };

    let design = initial_design(config.n0, space, &mut drv.model_rng)?;
    for x in design {
        let i = drv.archive.push_point(x);
        drv.replicate(i, config.r_min)?;
        if i + 1 < config.n0 {
            emit(&mut trace, &drv.archive, &drv.budget, i, 0.0)?;
        }
    }
    let data = drv.archive.dataset()?;

    if let EtaChoice::CrossValidated { grid, folds } = &config.eta {
        if matches!(config.surrogate, SurrogatePolicy::Aggregated) {
            let mut cfg = config.model.clone();
            cfg.hyper.restarts = cfg.hyper.restarts.min(1);
            drv.eta = select_eta_cv(&data, grid, *folds, &cfg, &mut drv.model_rng)?.eta;
        }
    }
    if let SurrogatePolicy::FixedEmbedding { kind, dim } = config.surrogate {
        let d = space.dim();
        drv.fixed_embedding = Some(match kind {
            EmbeddingKind::Identity => Embedding::identity(d)?,
            EmbeddingKind::Gaussian => gaussian_embedding(d, dim, &mut drv.model_rng)?,
            EmbeddingKind::Pca => {
                let x = nalgebra::DMatrix::from_fn(data.len(), d, |r, c| data.points()[r][c]);
                pca_embedding(&x, dim.min(data.len().saturating_sub(1)).max(1))?
            }
        });
    }

    let fit_start = Instant::now();
    let mut termination = None;
    let mut model = match drv.build(&data, 1) {
        Ok(m) => Some(m),
        Err(e) => {
            termination = Some(Termination::ModelFailure(e.to_string()));
            None
        }
    };
    let initial_fit = fit_start.elapsed().as_secs_f64();
    if let (Some(m), SurrogatePolicy::Aggregated) = (&model, config.surrogate) {
        let frac = m.loo_outlier_fraction(3.0);
        if frac > 0.1 {
            log::warn!("initial model flags {:.0}% of points as LOO outliers; refitting with more restarts", 100.0 * frac);
            match drv.build(&data, 2) {
                Ok(m2) => model = Some(m2),
                Err(e) => log::warn!("refit failed ({e}); keeping the first model"),
            }
        }
    }
    emit(&mut trace, &drv.archive, &drv.budget, config.n0 - 1, initial_fit)?;

    let initial_model = model.clone();
    let mut final_model = model.clone();
    let mut iterations = 0;
    while let Some(current) = model.take() {
        if drv.budget.remaining() == 0 {
            termination = Some(Termination::BudgetExhausted);
            break;
        }
        if iterations >= config.max_iterations {
            termination = Some(Termination::IterationCap);
            break;
        }
        if drv.budget.remaining() < config.r_min as u64 {
            // too little left for a new point: spend it on the sampled ones
            let left = drv.budget.remaining() as usize;
            let extra = if drv.archive.points.len() >= 2 { ocba_split(&drv.archive.stats(), left)? } else { vec![left] };
            for (i, k) in extra.into_iter().enumerate() {
                drv.replicate(i, k)?;
            }
            termination = Some(Termination::BudgetExhausted);
            break;
        }
        iterations += 1;
        let t = drv.archive.mean.iter().copied().fold(f64::INFINITY, f64::min);
        let proposal = propose_next(&current, space, &drv.archive.points, &config.acquisition, t, &mut drv.model_rng)?;
        let i = drv.archive.push_point(proposal.point);
        drv.replicate(i, config.r_min)?;

        if config.allocation {
            let s_n = drv.budget.floor(drv.archive.points.len());
            let demand = stage_budget(&drv.archive.count, s_n, drv.budget.remaining());
            let b = (demand + config.ocba_bonus).min(drv.budget.remaining() as usize);
            let extra = allocate(&drv.archive.stats(), s_n, b)?;
            for (j, k) in extra.into_iter().enumerate() {
                if k > 0 {
                    drv.replicate(j, k)?;
                }
            }
        }

        let data = drv.archive.dataset()?;
        let fit_start = Instant::now();
        match drv.build(&data, 1) {
            Ok(m) => {
                final_model = Some(m.clone());
                model = Some(m);
            }
            Err(e) => termination = Some(Termination::ModelFailure(e.to_string())),
        }
        emit(&mut trace, &drv.archive, &drv.budget, i, fit_start.elapsed().as_secs_f64())?;
    }

    let data = drv.archive.dataset()?;
    let inc = incumbent(&data)?;
    Ok(RunResult {
        incumbent: data.points()[inc].clone(),
        incumbent_mean: data.means()[inc],
        trace,
        termination: termination.unwrap_or(Termination::BudgetExhausted),
        eta: drv.eta,
        budget_spent: drv.budget.consumed(),
        data,
        initial_model,
        final_model,
    })
}

/// [`run_mambo_with_sink`] without streaming.
pub fn run_mambo<O: NoisyObjective + ?Sized>(objective: &O, space: &BoxSpace, config: &MamboConfig) -> Result<RunResult> {
    run_mambo_with_sink(objective, space, config, &mut |_| {})
}
