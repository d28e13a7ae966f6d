//! Command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Algorithm, ExperimentConfig};
use crate::harness::{experiment_problem, run_macroreps, run_single, trace_csv};
use crate::problems::{multistart_minimum, BaseFunction, TestProblem, PRICE_MAX};
use crate::validate::run_checks;
use crate::BenchError;

#[derive(Parser, Debug)]
#[command(name = "mambo", about = "Aggregated-GP Bayesian optimization benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One optimization run.
    Run(Common),
    /// Macroreplication suite with a regret summary.
    Bench(Common),
    /// Quick invariant checks.
    Validate(Common),
    /// Compute and cache reference optima.
    Oracle(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// Total design points per run, initial design included.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    macroreps: Option<usize>,
    #[arg(long, value_parser = ["mambo", "baseline"])]
    algo: Option<String>,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig, BenchError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(p) = &self.problem {
            cfg.problem = p.clone();
        }
        if let Some(i) = self.iters {
            cfg.iterations = i;
        }
        if let Some(m) = self.macroreps {
            cfg.macroreps = m;
        }
        if let Some(a) = &self.algo {
            cfg.algorithm = Algorithm::parse(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_run(c: &Common) -> Result<String, BenchError> {
    let cfg = c.experiment()?;
    let problem = experiment_problem(&cfg)?;
    let run = run_single(&cfg, &problem, cfg.seed)?;
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        let path = dir.join(format!("{}_seed{}.csv", cfg.problem, cfg.seed));
        std::fs::write(&path, trace_csv(&run)).map_err(|e| BenchError::io(path, e))?;
    }
    let x: Vec<String> = problem.to_native(&run.result.incumbent).iter().map(|v| format!("{v:.6}")).collect();
    Ok(format!(
        "{}: {} points, incumbent mean {:.6}, simple regret {:.6}\nactive coordinates (native scale): [{}]\n",
        cfg.problem,
        run.rows.len(),
        run.result.incumbent_mean,
        run.final_regret(),
        x.join(", ")
    ))
}

fn cmd_bench(c: &Common) -> Result<String, BenchError> {
    let cfg = c.experiment()?;
    let s = run_macroreps(&cfg)?;
    let last = s.rows.last().expect("iterations >= 1");
    let (q1, med, q3) = last.quartiles.expect("last row has quartiles");
    Ok(format!(
        "{} ({}): {} runs ok, {} failed; final mean regret {:.6} [{:.6}, {:.6}], quartiles {:.6} / {:.6} / {:.6}\n",
        cfg.problem,
        cfg.algorithm.name(),
        s.runs.len(),
        s.failures.len(),
        last.mean,
        last.ci_lo,
        last.ci_hi,
        q1,
        med,
        q3
    ))
}

fn cmd_validate() -> Result<String, BenchError> {
    let mut out = String::new();
    let mut failed = 0;
    for (name, r) in run_checks() {
        match r {
            Ok(()) => {
                let _ = writeln!(out, "PASS {name}");
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(out, "FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        print!("{out}");
        return Err(BenchError::Run(format!("{failed} check(s) failed")));
    }
    Ok(out)
}

fn cmd_oracle(c: &Common) -> Result<String, BenchError> {
    let seed = c.seed.unwrap_or(0);
    let bases: Vec<BaseFunction> = match &c.problem {
        Some(name) => vec![TestProblem::by_name(name, crate::problems::Assignment::FirstK)?.base()],
        None => BaseFunction::ALL.to_vec(),
    };
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    let mut out = String::new();
    for base in bases {
        let starts = 100;
        let m = multistart_minimum(base, starts, seed);
        let mut text = format!(
            "value = {}\ndescription = multistart projected L-BFGS with finite-difference gradients, {starts} uniform starts on the native box\nseed = {seed}\npoint = {}\n",
            m.value,
            m.point.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
        );
        if let Some(known) = base.known_minimum() {
            let _ = writeln!(text, "reference = {known}");
        }
        if base == BaseFunction::Price {
            let interior = m.point.iter().all(|&p| p > 1e-6 && p < PRICE_MAX * (1.0 - 1e-6));
            let _ = writeln!(text, "box = [0, {PRICE_MAX}]^10\ninterior = {interior}");
        }
        let name = c.problem.clone().unwrap_or_else(|| base.name().to_string());
        let path = dir.join(format!("{name}_oracle.txt"));
        std::fs::write(&path, &text).map_err(|e| BenchError::io(&path, e))?;
        let _ = writeln!(out, "{name}: minimum {} -> {}", m.value, path.display());
    }
    Ok(out)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 for usage or configuration errors,
/// 2 when the run itself fails.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Bench(c) => cmd_bench(c),
        Command::Validate(_) => cmd_validate(),
        Command::Oracle(c) => cmd_oracle(c),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
