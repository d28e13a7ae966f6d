//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors.

use std::path::{Path, PathBuf};

use mambo_core::acquisition::AcquisitionKind;
use mambo_core::aggregate::{DimPolicy, SubsetCount};
use mambo_core::embedding::EmbeddingKind;
use mambo_core::optimizer::{EtaChoice, MamboConfig};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Mambo,
    Baseline,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "mambo" => Ok(Algorithm::Mambo),
            "baseline" => Ok(Algorithm::Baseline),
            _ => Err(BenchError::Config(format!("unknown algorithm `{s}` (expected mambo or baseline)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mambo => "mambo",
            Algorithm::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: String,
    pub algorithm: Algorithm,
    pub n0: usize,
    /// Total design points per run, initial design included.
    pub iterations: usize,
    pub macroreps: usize,
    /// Master seed; macroreplication seeds and the active-coordinate
    /// placement derive from it.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Place active coordinates first instead of at seeded positions.
    pub first_k: bool,
    pub mambo: MamboConfig,
    pub baseline_embedding: EmbeddingKind,
    /// Baseline embedding dimension; `None` uses the problem's active
    /// dimension.
    pub baseline_dim: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "branin100".into(),
            algorithm: Algorithm::Mambo,
            n0: 20,
            iterations: 220,
            macroreps: 1,
            seed: 0,
            out: None,
            first_k: false,
            mambo: MamboConfig { total_budget: 1_000_000_000, ..MamboConfig::default() },
            baseline_embedding: EmbeddingKind::Pca,
            baseline_dim: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.macroreps == 0 {
            return bad("macroreps must be at least 1".into());
        }
        if self.n0 < 2 {
            return bad(format!("n0 must be at least 2, got {}", self.n0));
        }
        if self.iterations < self.n0 {
            return bad(format!("iterations ({}) must be at least n0 ({})", self.iterations, self.n0));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(BenchError::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            cfg.set(key, value).map_err(|e| BenchError::Config(format!("line {}: {e}", no + 1)))?;
            seen.push(key.to_string());
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.mambo;
        match key {
            "problem" => self.problem = value.to_string(),
            "algorithm" => self.algorithm = Algorithm::parse(value).map_err(|e| e.to_string())?,
            "n0" => self.n0 = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "macroreps" => self.macroreps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "assignment" => {
                self.first_k = match value {
                    "first_k" => true,
                    "permuted" => false,
                    _ => return Err(format!("assignment must be first_k or permuted, got `{value}`")),
                }
            }
            "total_budget" => m.total_budget = num(key, value)?,
            "r_min" => m.r_min = num(key, value)?,
            "s_coef" => m.s_coef = num(key, value)?,
            "ocba_bonus" => m.ocba_bonus = num(key, value)?,
            "allocation" => m.allocation = boolean(key, value)?,
            "acquisition" => {
                m.acquisition.kind = match value {
                    "ei" => AcquisitionKind::Ei,
                    "lcb" => AcquisitionKind::Lcb,
                    "thompson" => AcquisitionKind::Thompson,
                    _ => return Err(format!("acquisition must be ei, lcb or thompson, got `{value}`")),
                }
            }
            "kappa" => m.acquisition.kappa = num(key, value)?,
            "candidate_count" => m.acquisition.candidate_count = num(key, value)?,
            "refine_steps" => m.acquisition.refine_steps = num(key, value)?,
            "subsets" => {
                m.model.subsets = if value == "auto" { SubsetCount::Auto } else { SubsetCount::Fixed(num(key, value)?) }
            }
            "dims" => m.model.dims = if value == "random" { DimPolicy::Random } else { DimPolicy::Fixed(num(key, value)?) },
            "embedding" => m.model.embedding = embedding(value)?,
            "eta" => {
                m.eta = if value == "cv" {
                    match &m.eta {
                        EtaChoice::CrossValidated { .. } => m.eta.clone(),
                        EtaChoice::Fixed(_) => MamboConfig::default().eta,
                    }
                } else {
                    EtaChoice::Fixed(num(key, value)?)
                }
            }
            "eta_grid" | "eta_folds" => {
                let EtaChoice::CrossValidated { grid, folds } = &mut m.eta else {
                    return Err(format!("`{key}` needs `eta = cv` earlier in the file"));
                };
                if key == "eta_grid" {
                    *grid = value.split(',').map(|v| num("eta_grid", v.trim())).collect::<Result<_, _>>()?;
                } else {
                    *folds = num(key, value)?;
                }
            }
            "restarts" => m.model.hyper.restarts = num(key, value)?,
            "hyper_max_iters" => m.model.hyper.max_iters = num(key, value)?,
            "standardize" => m.model.standardize = boolean(key, value)?,
            "baseline_embedding" => self.baseline_embedding = embedding(value)?,
            "baseline_dim" => self.baseline_dim = Some(num(key, value)?),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` must be true or false, got `{value}`")),
    }
}

fn embedding(value: &str) -> Result<EmbeddingKind, String> {
    match value {
        "gaussian" => Ok(EmbeddingKind::Gaussian),
        "pca" => Ok(EmbeddingKind::Pca),
        "identity" => Ok(EmbeddingKind::Identity),
        _ => Err(format!("embedding must be gaussian, pca or identity, got `{value}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = "
            # comment
            problem = camel100
            algorithm = baseline
            n0 = 12
            iterations = 40   # trailing comment
            macroreps = 3
            seed = 9
            out = results
            assignment = first_k
            total_budget = 5000
            r_min = 3
            s_coef = 2.5
            ocba_bonus = 4
            allocation = false
            acquisition = lcb
            kappa = 1.5
            candidate_count = 64
            refine_steps = 3
            subsets = 4
            dims = 7
            embedding = pca
            eta = cv
            eta_grid = 0, 2
            eta_folds = 3
            restarts = 1
            hyper_max_iters = 25
            standardize = false
            baseline_embedding = gaussian
            baseline_dim = 5
        ";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.problem, "camel100");
        assert_eq!(c.algorithm, Algorithm::Baseline);
        assert_eq!((c.n0, c.iterations, c.macroreps, c.seed), (12, 40, 3, 9));
        assert_eq!(c.out, Some(PathBuf::from("results")));
        assert!(c.first_k);
        assert_eq!(c.mambo.total_budget, 5000);
        assert_eq!(c.mambo.acquisition.kind, AcquisitionKind::Lcb);
        assert_eq!(c.mambo.model.subsets, SubsetCount::Fixed(4));
        assert_eq!(c.mambo.model.dims, DimPolicy::Fixed(7));
        assert_eq!(c.mambo.eta, EtaChoice::CrossValidated { grid: vec![0.0, 2.0], folds: 3 });
        assert_eq!(c.baseline_dim, Some(5));
        assert!(!c.mambo.allocation && !c.mambo.model.standardize);
    }

    #[test]
    fn fails_closed() {
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("n0 = 3\nn0 = 4").is_err());
        assert!(ExperimentConfig::parse("n0 3").is_err());
        assert!(ExperimentConfig::parse("n0 = three").is_err());
        assert!(ExperimentConfig::parse("eta = 1\neta_grid = 1,2").is_err());
        assert!(ExperimentConfig::parse("acquisition = ucb").is_err());
        let err = ExperimentConfig::from_file(Path::new("/nonexistent/x.cfg")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.cfg"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig { macroreps: 0, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { iterations: 5, ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
