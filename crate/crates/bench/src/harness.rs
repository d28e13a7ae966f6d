//! Macroreplication runner, regret summaries and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mambo_core::acquisition::AcquisitionKind;
use mambo_core::embedding::EmbeddingKind;
use mambo_core::optimizer::{run_mambo_with_sink, EtaChoice, MamboConfig, RunResult, SurrogatePolicy, TraceRow};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Algorithm, ExperimentConfig};
use crate::problems::{Assignment, TestProblem};
use crate::BenchError;

/// `count` distinct macroreplication seeds derived from `master`.
pub fn macrorep_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mut seeds = Vec::with_capacity(count);
    while seeds.len() < count {
        let s = rng.next_u64() >> 1;
        if !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

/// The problem an experiment runs on. Active coordinates are placed by the
/// master seed, so every macroreplication sees the same function.
pub fn experiment_problem(cfg: &ExperimentConfig) -> Result<TestProblem, BenchError> {
    let assignment = if cfg.first_k { Assignment::FirstK } else { Assignment::Permuted(cfg.seed) };
    TestProblem::by_name(&cfg.problem, assignment)
}

/// Loop settings for one macroreplication.
pub fn run_config(cfg: &ExperimentConfig, seed: u64) -> MamboConfig {
    MamboConfig { n0: cfg.n0, max_iterations: cfg.iterations - cfg.n0, seed, ..cfg.mambo.clone() }
}

/// Plain BO through one embedding learned from the initial design: a
/// single GP on all data, EI, and `r_min` replications per point.
pub fn single_embedding_baseline(
    problem: &TestProblem,
    base: &MamboConfig,
    kind: EmbeddingKind,
    dim: usize,
    sink: &mut dyn FnMut(&TraceRow),
) -> Result<RunResult, BenchError> {
    let mut cfg = base.clone();
    cfg.surrogate = SurrogatePolicy::FixedEmbedding { kind, dim };
    cfg.allocation = false;
    cfg.acquisition.kind = AcquisitionKind::Ei;
    cfg.eta = EtaChoice::Fixed(0.0);
    Ok(run_mambo_with_sink(problem, &problem.space(), &cfg, sink)?)
}

/// One finished macroreplication.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    /// Simple regret of the incumbent after each row.
    pub regrets: Vec<f64>,
    pub result: RunResult,
}

impl RunTrace {
    pub fn final_regret(&self) -> f64 {
        *self.regrets.last().expect("runs have at least one row")
    }

    /// Regret after `iteration` design points (last value carried forward).
    pub fn regret_at(&self, iteration: usize) -> f64 {
        let i = iteration.clamp(1, self.regrets.len()) - 1;
        self.regrets[i]
    }
}

/// Runs one macroreplication of `cfg` with `seed`.
pub fn run_single(cfg: &ExperimentConfig, problem: &TestProblem, seed: u64) -> Result<RunTrace, BenchError> {
    let mc = run_config(cfg, seed);
    let mut rows = Vec::new();
    let mut sink = |r: &TraceRow| rows.push(r.clone());
    let result = match cfg.algorithm {
        Algorithm::Mambo => run_mambo_with_sink(problem, &problem.space(), &mc, &mut sink)?,
        Algorithm::Baseline => {
            let dim = cfg.baseline_dim.unwrap_or(problem.active_dim()).min(problem.dim());
            single_embedding_baseline(problem, &mc, cfg.baseline_embedding, dim, &mut sink)?
        }
    };
    let regrets = rows.iter().map(|r| problem.regret(&r.incumbent)).collect();
    Ok(RunTrace { seed, rows, regrets, result })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub iteration: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// `(q1, median, q3)`, only on the last row.
    pub quartiles: Option<(f64, f64, f64)>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(q1, median, q3)`.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75))
}

/// Mean regret with a 95% normal interval at every iteration, plus
/// final-iteration quartiles.
pub fn summarize(runs: &[RunTrace], iterations: usize) -> Vec<SummaryRow> {
    let r = runs.len() as f64;
    (1..=iterations)
        .map(|it| {
            let vals: Vec<f64> = runs.iter().map(|t| t.regret_at(it)).collect();
            let mean = vals.iter().sum::<f64>() / r;
            let sd = if runs.len() > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt() } else { 0.0 };
            let half = 1.96 * sd / r.sqrt();
            SummaryRow {
                iteration: it,
                mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                quartiles: (it == iterations).then(|| quartiles(&vals)),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunTrace>,
    /// Seeds whose run failed, with the error.
    pub failures: Vec<(u64, String)>,
}

impl BenchSummary {
    /// Mean over successful runs of the surrogate fit time at `iteration`.
    pub fn mean_fit_seconds(&self, iteration: usize) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.rows.get(iteration - 1).map(|row| row.fit_seconds)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn final_regrets(&self) -> Vec<f64> {
        self.runs.iter().map(RunTrace::final_regret).collect()
    }
}

fn file_stem(cfg: &ExperimentConfig) -> String {
    match cfg.algorithm {
        Algorithm::Mambo => cfg.problem.clone(),
        Algorithm::Baseline => format!("{}_baseline", cfg.problem),
    }
}

pub fn trace_csv(run: &RunTrace) -> String {
    let mut s = String::from("iteration,proposed_x,sample_mean,replications_spent,best_so_far,simple_regret\n");
    for (row, regret) in run.rows.iter().zip(&run.regrets) {
        let x: Vec<String> = row.point.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            row.iteration,
            x.join(";"),
            row.sample_mean,
            row.budget_spent,
            row.best_so_far,
            regret
        );
    }
    s
}

pub fn timing_csv(run: &RunTrace) -> String {
    let mut s = String::from("iteration,fit_s,elapsed_s\n");
    for row in &run.rows {
        let _ = writeln!(s, "{},{},{}", row.iteration, row.fit_seconds, row.wall_seconds);
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("iteration,mean_regret,ci_lo,ci_hi,q1,median,q3\n");
    for r in rows {
        let q = r.quartiles.map_or_else(|| ",,".to_string(), |(a, b, c)| format!("{a},{b},{c}"));
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.mean, r.ci_lo, r.ci_hi, q);
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<(), BenchError> {
    fs::write(&path, text).map_err(|e| BenchError::io(path, e))
}

/// Writes per-seed traces and timings, the summary and a metadata file.
/// Everything except the timing and metadata files is deterministic.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, summary: &BenchSummary) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let stem = file_stem(cfg);
    for run in &summary.runs {
        write(dir.join(format!("{stem}_seed{}.csv", run.seed)), &trace_csv(run))?;
        write(dir.join(format!("{stem}_seed{}_timing.csv", run.seed)), &timing_csv(run))?;
    }
    write(dir.join(format!("{stem}_summary.csv")), &summary_csv(&summary.rows))?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut meta = format!(
        "problem = {}\nalgorithm = {}\nmaster_seed = {}\nmacroreps = {}\niterations = {}\nfinished_unix = {now}\n",
        cfg.problem,
        cfg.algorithm.name(),
        cfg.seed,
        cfg.macroreps,
        cfg.iterations
    );
    for run in &summary.runs {
        let _ = writeln!(meta, "run seed={} eta={} termination={:?}", run.seed, run.result.eta, run.result.termination);
    }
    for (seed, err) in &summary.failures {
        let _ = writeln!(meta, "failed seed={seed} error={err}");
    }
    write(dir.join(format!("{stem}_metadata.txt")), &meta)
}

/// Runs every macroreplication (concurrently), summarizes the successful
/// ones and writes the output files when `cfg.out` is set.
pub fn run_macroreps(cfg: &ExperimentConfig) -> Result<BenchSummary, BenchError> {
    cfg.validate()?;
    let problem = experiment_problem(cfg)?;
    let seeds = macrorep_seeds(cfg.seed, cfg.macroreps);
    let outcomes: Vec<(u64, Result<RunTrace, BenchError>)> =
        seeds.par_iter().map(|&s| (s, run_single(cfg, &problem, s))).collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(t) => runs.push(t),
            Err(e) => {
                log::warn!("macroreplication with seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if runs.is_empty() {
        return Err(BenchError::Run(format!("all {} macroreplications failed", seeds.len())));
    }
    let summary = BenchSummary { rows: summarize(&runs, cfg.iterations), runs, failures };
    if let Some(dir) = &cfg.out {
        write_outputs(dir, cfg, &summary)?;
    }
    Ok(summary)
}
