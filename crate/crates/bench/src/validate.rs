//! Quick invariant checks behind `mambo validate`.

use mambo_core::acquisition::expected_improvement;
use mambo_core::aggregate::{normalized_weights, partition};
use mambo_core::allocation::{allocate, ocba_targets, PointStats};
use mambo_core::embedding::gaussian_embedding;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::problems::{Assignment, BaseFunction, TestProblem};

/// Name and outcome of one check.
pub type Check = (&'static str, Result<(), String>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn weights(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..200 {
        let m = rng.random_range(1..8);
        let ev: Vec<f64> = (0..m).map(|_| rng.random_range(-300.0..300.0)).collect();
        let pr: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let w = normalized_weights(&ev, &pr).map_err(|e| e.to_string())?;
        let shifted: Vec<f64> = ev.iter().map(|e| e + 17.0).collect();
        let w2 = normalized_weights(&shifted, &pr).map_err(|e| e.to_string())?;
        ensure(w.iter().all(|&v| v >= 0.0), || "negative weight".into())?;
        ensure((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12, || "weights do not sum to 1".into())?;
        ensure(w.iter().zip(&w2).all(|(a, b)| (a - b).abs() <= 1e-12), || "weights not shift invariant".into())?;
    }
    Ok(())
}

fn ocba(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..200 {
        let k = rng.random_range(2..10);
        let stats: Vec<PointStats> = (0..k)
            .map(|_| PointStats { mean: rng.random_range(-5.0..5.0), sd: rng.random_range(0.1..3.0), count: rng.random_range(2..30) })
            .collect();
        let budget = rng.random_range(0..500);
        let a = allocate(&stats, 20, budget).map_err(|e| e.to_string())?;
        ensure(a.iter().sum::<usize>() == budget, || "allocation does not conserve the budget".into())?;
        let t = ocba_targets(&stats, budget as f64).map_err(|e| e.to_string())?;
        ensure((t.iter().sum::<f64>() - budget as f64).abs() <= 1e-9 * (budget as f64).max(1.0), || "OCBA targets off budget".into())?;
    }
    Ok(())
}

fn ei(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..5 {
        let delta = rng.random_range(-2.0..2.0);
        let var: f64 = rng.random_range(0.05..3.0);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let imp = (delta - var.sqrt() * rng.sample::<f64, _>(StandardNormal)).max(0.0);
            s += imp;
            s2 += imp * imp;
        }
        let mc = s / n as f64;
        let se = ((s2 / n as f64 - mc * mc) / n as f64).sqrt();
        let exact = expected_improvement(0.0, var, delta).map_err(|e| e.to_string())?;
        ensure((mc - exact).abs() <= 4.0 * se, || format!("EI {exact} vs Monte Carlo {mc}"))?;
    }
    Ok(())
}

fn lifting(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for base in BaseFunction::ALL {
        let p = TestProblem::by_name(&format!("{}100", base.name()), Assignment::Permuted(3)).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let f = p.value(&x);
        for _ in 0..20 {
            let mut y = x.clone();
            for (i, v) in y.iter_mut().enumerate() {
                if !p.active_indices().contains(&i) {
                    *v = rng.random();
                }
            }
            ensure(p.value(&y) == f, || format!("{base}: value depends on an inactive coordinate"))?;
            ensure(p.noise_sd(&y) > 0.0, || format!("{base}: nonpositive noise sd"))?;
        }
    }
    Ok(())
}

fn partitions(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for _ in 0..100 {
        let n = rng.random_range(1..300);
        let m = rng.random_range(1..=n);
        let g = partition(n, m, rng).map_err(|e| e.to_string())?;
        let sizes: Vec<usize> = g.iter().map(Vec::len).collect();
        ensure(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, || "unbalanced partition".into())?;
        let mut all: Vec<usize> = g.into_iter().flatten().collect();
        all.sort_unstable();
        ensure(all == (0..n).collect::<Vec<_>>(), || "partition does not cover 0..n".into())?;
    }
    Ok(())
}

fn embeddings(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let v = DMatrix::from_fn(100, 2, |i, j| if i == j { 1.0 } else { 0.0 });
    let mut ok = 0;
    for _ in 0..40 {
        let e = gaussian_embedding(100, 60, rng).map_err(|e| e.to_string())?;
        if e.is_subspace_embedding(&v, 0.5).map_err(|e| e.to_string())?.0 {
            ok += 1;
        }
    }
    ensure(ok >= 36, || format!("only {ok}/40 embeddings within distortion 0.5"))
}

/// Runs every check with a fixed seed.
pub fn run_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    vec![
        ("bayes weights", weights(&mut rng)),
        ("ocba conservation", ocba(&mut rng)),
        ("expected improvement", ei(&mut rng)),
        ("lifted problems", lifting(&mut rng)),
        ("partitions", partitions(&mut rng)),
        ("gaussian embeddings", embeddings(&mut rng)),
    ]
}
