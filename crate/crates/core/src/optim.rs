//! Bound-constrained quasi-Newton minimization.
//!
//! A projected L-BFGS with Armijo backtracking. Used for kernel
//! hyperparameter fitting and by the benchmark oracles; neither needs more
//! than a reliable local descent inside a box.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of the objective falls below this.
    pub rel_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iters: 100, memory: 6, grad_tol: 1e-6, rel_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            if (xi <= l && gi > 0.0) || (xi >= h && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
///
/// `f` returns the objective and writes the gradient into its second
/// argument. Non-finite values are treated as infeasible and rejected by the
/// line search.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    clip(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Minimum { x, value: f64::INFINITY, iterations: 0 };
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    for it in 0..opts.max_iters {
        iterations = it + 1;
        let pg = projected_gradient(&x, &g, lo, hi);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            break;
        }

        // two-loop recursion on the projected gradient
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        for (i, d) in dir.iter_mut().enumerate() {
            if pg[i] == 0.0 {
                *d = 0.0;
            }
        }
        let mut quasi_newton = !history.is_empty();
        if dot(&dir, &pg) >= 0.0 {
            dir = pg.iter().map(|v| -v).collect();
            quasi_newton = false;
        }

        let mut step = if history.is_empty() {
            let norm = dot(&dir, &dir).sqrt();
            if norm > 1.0 { 1.0 / norm } else { 1.0 }
        } else {
            1.0
        };

        let mut accepted = None;
        loop {
            for _ in 0..40 {
                let mut cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
                clip(&mut cand, lo, hi);
                let decrease: f64 = g.iter().zip(cand.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
                let fc = f(&cand, &mut g_new);
                if fc.is_finite() && fc <= fx + 1e-4 * decrease {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            if accepted.is_some() || !quasi_newton {
                break;
            }
            history.clear();
            dir = pg.iter().map(|v| -v).collect();
            let norm = dot(&dir, &dir).sqrt();
            step = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            quasi_newton = false;
        }

        let Some((x_next, f_next)) = accepted else { break };
        let s: Vec<f64> = x_next.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - f_next).abs() / fx.abs().max(1.0);
        x = x_next;
        fx = f_next;
        g.copy_from_slice(&g_new);
        if rel < opts.rel_tol {
            break;
        }
    }
    Minimum { x, value: fx, iterations }
}

/// Central-difference gradient, shrinking the stencil at the box faces.
pub fn numeric_gradient<F>(f: &mut F, x: &[f64], lo: &[f64], hi: &[f64], h: f64, grad: &mut [f64])
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let up = (x[i] + h).min(hi[i]);
        let down = (x[i] - h).max(lo[i]);
        probe[i] = up;
        let fu = f(&probe);
        probe[i] = down;
        let fd = f(&probe);
        probe[i] = x[i];
        grad[i] = if up > down { (fu - fd) / (up - down) } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let opts = LbfgsOptions { max_iters: 500, ..Default::default() };
        let m = minimize_box(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &opts);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m);
    }

    #[test]
    fn active_bound_is_respected() {
        // minimum of (x-3)^2 + (y+1)^2 over [0,1]^2 is at (1, 0)
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * (x[1] + 1.0);
            (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2)
        };
        let m = minimize_box(f, &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], &LbfgsOptions::default());
        assert_eq!(m.x, vec![1.0, 0.0]);
    }

    #[test]
    fn numeric_gradient_matches_analytic() {
        let mut f = |x: &[f64]| x[0].sin() * x[1].powi(2);
        let mut g = [0.0; 2];
        numeric_gradient(&mut f, &[0.3, 1.7], &[-9.0; 2], &[9.0; 2], 1e-6, &mut g);
        assert!((g[0] - 0.3f64.cos() * 1.7f64.powi(2)).abs() < 1e-6);
        assert!((g[1] - 0.3f64.sin() * 2.0 * 1.7).abs() < 1e-6);
    }
}
