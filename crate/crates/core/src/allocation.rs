//! Replication budgeting: the growing per-point floor `s_N`, the stage
//! budget, and the OCBA split of extra replications.

use crate::error::{invalid, Result};

/// `max(r_min, ⌈c · ln²(i + 1)⌉)`.
pub fn s_sequence(i: usize, c: f64, r_min: usize) -> usize {
    debug_assert!(i >= 1 && c > 0.0);
    let l = ((i + 1) as f64).ln();
    ((c * l * l).ceil() as usize).max(r_min)
}

/// Replications needed to lift every count to `s_n`, capped at `remaining`.
pub fn stage_budget(counts: &[usize], s_n: usize, remaining: u64) -> usize {
    let demand: usize = counts.iter().map(|&m| s_n.saturating_sub(m)).sum();
    demand.min(usize::try_from(remaining).unwrap_or(usize::MAX))
}

/// Sample statistics of one design point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointStats {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Index of the smallest sample mean (first one on ties).
fn best_index(stats: &[PointStats]) -> usize {
    let mut b = 0;
    for (i, s) in stats.iter().enumerate() {
        if s.mean < stats[b].mean {
            b = i;
        }
    }
    b
}

/// Continuous OCBA allocation of `budget` replications.
///
/// Non-best points get shares proportional to `(sᵢ/d_{b,i})²`, the best one
/// `s_b · sqrt(Σ_{i≠b} Nᵢ²/sᵢ²)`, and everything is scaled to sum to
/// `budget`. Zero gaps are replaced by `1e-9 ·` (range of the means, or 1).
/// When every share is zero the budget is split evenly.
pub fn ocba_targets(stats: &[PointStats], budget: f64) -> Result<Vec<f64>> {
    if stats.len() < 2 {
        return invalid("OCBA needs at least two points");
    }
    if !(budget >= 0.0 && budget.is_finite()) {
        return invalid(format!("budget must be finite and nonnegative, got {budget}"));
    }
    if stats.iter().any(|s| !s.mean.is_finite() || !(s.sd >= 0.0 && s.sd.is_finite())) {
        return invalid("OCBA statistics must be finite with nonnegative sd");
    }
    let k = stats.len();
    if budget == 0.0 {
        return Ok(vec![0.0; k]);
    }
    let b = best_index(stats);
    let (lo, hi) = stats.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.mean), hi.max(s.mean)));
    let range = hi - lo;
    let eps = 1e-9 * if range > 0.0 { range } else { 1.0 };

    let mut share = vec![0.0; k];
    let mut best_sum = 0.0;
    for (i, s) in stats.iter().enumerate() {
        if i == b || s.sd == 0.0 {
            continue;
        }
        let gap = (s.mean - stats[b].mean).max(eps);
        let r = s.sd / gap;
        share[i] = r * r;
        best_sum += (share[i] / s.sd).powi(2);
    }
    share[b] = stats[b].sd * best_sum.sqrt();
    let total: f64 = share.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(share.into_iter().map(|v| budget * v / total).collect())
    } else {
        Ok(vec![budget / k as f64; k])
    }
}

/// Rounds nonnegative `targets` (summing to `total` up to rounding error) to
/// integers with exactly that sum: floors first, then one extra unit to the
/// largest fractional parts, lower index first on ties.
pub fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|t| t.max(0.0).floor() as usize).collect();
    let mut assigned: usize = out.iter().sum();
    if assigned > total {
        // targets overshot through rounding; trim from the largest counts
        while assigned > total {
            let i = (0..out.len()).max_by_key(|&i| (out[i], std::cmp::Reverse(i))).unwrap();
            out[i] -= 1;
            assigned -= 1;
        }
        return out;
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a].max(0.0) - out[a] as f64;
        let fb = targets[b].max(0.0) - out[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total - assigned;
    let mut pos = 0;
    while left > 0 {
        out[order[pos % order.len()]] += 1;
        left -= 1;
        pos += 1;
    }
    out
}

/// Integer OCBA split: [`ocba_targets`] rounded by [`largest_remainder`].
pub fn ocba_split(stats: &[PointStats], budget: usize) -> Result<Vec<usize>> {
    let targets = ocba_targets(stats, budget as f64)?;
    Ok(largest_remainder(&targets, budget))
}

/// `budget` spread as evenly as possible, extra units to the first points.
pub fn equal_split(points: usize, budget: usize) -> Vec<usize> {
    if points == 0 {
        return Vec::new();
    }
    (0..points).map(|i| budget / points + usize::from(i < budget % points)).collect()
}

/// Allocation stage. Every point is first lifted to the floor `s_n`; any
/// budget beyond that demand is split by OCBA. When `budget` cannot cover
/// the demand, OCBA splits all of it instead.
pub fn allocate(stats: &[PointStats], s_n: usize, budget: usize) -> Result<Vec<usize>> {
    if stats.is_empty() {
        return Ok(Vec::new());
    }
    if stats.len() == 1 {
        return Ok(vec![budget]);
    }
    let deficits: Vec<usize> = stats.iter().map(|s| s_n.saturating_sub(s.count)).collect();
    let demand: usize = deficits.iter().sum();
    if budget < demand {
        return ocba_split(stats, budget);
    }
    let extra = ocba_split(stats, budget - demand)?;
    Ok(deficits.iter().zip(extra).map(|(d, e)| d + e).collect())
}

/// Replication budget of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetState {
    total: u64,
    remaining: u64,
    r_min: usize,
    c: f64,
}

impl BudgetState {
    pub fn new(total: u64, r_min: usize, c: f64) -> Result<Self> {
        if r_min < 2 {
            return invalid(format!("r_min must be at least 2, got {r_min}"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return invalid(format!("s-sequence coefficient must be positive, got {c}"));
        }
        Ok(Self { total, remaining: total, r_min, c })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    pub fn consumed(&self) -> u64 {
        self.total - self.remaining
    }

    pub fn r_min(&self) -> usize {
        self.r_min
    }

    /// Floor `s_N` for `n_points` sampled points.
    pub fn floor(&self, n_points: usize) -> usize {
        s_sequence(n_points.max(1), self.c, self.r_min)
    }

    /// Records `k` replications; fails without change if that overdraws.
    pub fn spend(&mut self, k: usize) -> Result<()> {
        let k = k as u64;
        if k > self.remaining {
            return invalid(format!("spending {k} replications with only {} left", self.remaining));
        }
        self.remaining -= k;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(mean: f64, sd: f64) -> PointStats {
        PointStats { mean, sd, count: 2 }
    }

    #[test]
    fn s_sequence_examples() {
        assert_eq!(s_sequence(1, 5.0, 2), 3);
        assert_eq!(s_sequence(1, 5.0, 4), 4);
        let mut prev = 0;
        for i in 1..=10_000 {
            let s = s_sequence(i, 5.0, 2);
            assert!(s >= prev);
            prev = s;
        }
        assert!(s_sequence(1_000_000, 5.0, 2) > 900);
    }

    #[test]
    fn s_sequence_series_converges() {
        // Σ i·exp(−a sᵢ) with sᵢ ≈ c ln² i: the log summand is
        // ln i − a c ln²(i+1), which tends to −∞ for every a > 0.
        for a in [1.0, 0.5] {
            let mut sum = 0.0;
            let mut tail = 0.0;
            for i in 1..=1_000_000usize {
                let t = i as f64 * (-a * s_sequence(i, 5.0, 2) as f64).exp();
                sum += t;
                if i > 500_000 {
                    tail += t;
                }
            }
            assert!(sum.is_finite() && tail < 1e-9, "a={a} tail={tail}");
        }
        let a = 0.01;
        let log_term = |i: f64| i.ln() - a * 5.0 * (i + 1.0).ln().powi(2);
        let mut prev = log_term(1e9);
        for e in [12.0, 15.0, 18.0, 19.0] {
            let cur = log_term(10f64.powf(e));
            assert!(cur < prev);
            prev = cur;
        }
        assert!(prev < (1e-9f64).ln());
    }

    #[test]
    fn stage_budget_examples() {
        assert_eq!(stage_budget(&[6, 7, 9], 5, 100), 0);
        assert_eq!(stage_budget(&[2, 2, 2], 5, 100), 9);
        assert_eq!(stage_budget(&[2, 2, 2], 5, 4), 4);
    }

    #[test]
    fn symmetric_points_get_equal_shares() {
        let stats = [st(0.0, 1.0), st(1.0, 2.0), st(1.0, 2.0)];
        let split = ocba_split(&stats, 101).unwrap();
        assert_eq!(split.iter().sum::<usize>(), 101);
        assert!(split[1].abs_diff(split[2]) <= 1);
        assert_eq!(ocba_split(&stats, 0).unwrap(), vec![0, 0, 0]);
    }

    /// Checks the ratio equations directly on the continuous targets.
    fn assert_ocba_equations(stats: &[PointStats], t: &[f64], budget: f64) {
        let b = best_index(stats);
        assert!((t.iter().sum::<f64>() - budget).abs() <= 1e-9 * budget.max(1.0));
        let others: Vec<usize> = (0..stats.len()).filter(|&i| i != b).collect();
        let r = |i: usize| (stats[i].sd / (stats[i].mean - stats[b].mean)).powi(2);
        for &i in &others {
            for &j in &others {
                let lhs = t[i] / t[j];
                let rhs = r(i) / r(j);
                assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0), "ratio {i}/{j}: {lhs} vs {rhs}");
            }
        }
        let nb = stats[b].sd * others.iter().map(|&i| (t[i] / stats[i].sd).powi(2)).sum::<f64>().sqrt();
        assert!((t[b] - nb).abs() <= 1e-9 * nb.max(1.0));
    }

    #[test]
    fn four_point_instance_solves_the_ratio_equations() {
        let stats = [st(1.3, 0.8), st(0.2, 1.1), st(2.0, 2.5), st(0.9, 0.4)];
        let t = ocba_targets(&stats, 40.0).unwrap();
        assert_ocba_equations(&stats, &t, 40.0);
        // hand solution: best is index 1
        let r: Vec<f64> = [(0.8, 1.1), (2.5, 1.8), (0.4, 0.7)].iter().map(|(s, d): &(f64, f64)| (s / d).powi(2)).collect();
        let rb = 1.1 * (r[0].powi(2) / 0.64 + r[1].powi(2) / 6.25 + r[2].powi(2) / 0.16).sqrt();
        let tot = r.iter().sum::<f64>() + rb;
        let expect = [r[0], rb, r[1], r[2]].map(|v| 40.0 * v / tot);
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let tied = [st(1.0, 1.0), st(1.0, 1.0), st(2.0, 1.0)];
        let t = ocba_targets(&tied, 10.0).unwrap();
        assert!(t.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((t.iter().sum::<f64>() - 10.0).abs() < 1e-9);
        // the tied point dominates the allocation
        assert!(t[1] > t[2]);

        let flat = [st(1.0, 0.0), st(2.0, 0.0), st(3.0, 0.0)];
        assert_eq!(ocba_split(&flat, 7).unwrap(), vec![3, 2, 2]);

        assert!(ocba_targets(&[st(0.0, 1.0)], 3.0).is_err());
        assert!(ocba_targets(&[st(0.0, -1.0), st(1.0, 1.0)], 3.0).is_err());
    }

    #[test]
    fn allocate_lifts_to_floor_then_uses_ocba() {
        let stats = [
            PointStats { mean: 0.0, sd: 1.0, count: 2 },
            PointStats { mean: 1.0, sd: 1.0, count: 5 },
            PointStats { mean: 3.0, sd: 1.0, count: 3 },
        ];
        let a = allocate(&stats, 5, 5).unwrap();
        assert_eq!(a, vec![3, 0, 2]);
        let a = allocate(&stats, 5, 25).unwrap();
        assert_eq!(a.iter().sum::<usize>(), 25);
        assert!(stats.iter().zip(&a).all(|(s, k)| s.count + k >= 5));
        let short = allocate(&stats, 5, 3).unwrap();
        assert_eq!(short.iter().sum::<usize>(), 3);
        assert_eq!(allocate(&stats[..1], 5, 4).unwrap(), vec![4]);
    }

    #[test]
    fn budget_state_accounting() {
        let mut b = BudgetState::new(10, 2, 5.0).unwrap();
        b.spend(4).unwrap();
        assert_eq!((b.remaining(), b.consumed()), (6, 4));
        assert!(b.spend(7).is_err());
        assert_eq!(b.remaining(), 6);
        assert_eq!(b.floor(1), 3);
        assert!(BudgetState::new(10, 1, 5.0).is_err());
        assert!(BudgetState::new(10, 2, 0.0).is_err());
    }

    #[test]
    fn equal_split_conserves() {
        assert_eq!(equal_split(3, 7), vec![3, 2, 2]);
        assert_eq!(equal_split(0, 7), Vec::<usize>::new());
    }

    proptest! {
        #[test]
        fn targets_satisfy_equations(
            raw in prop::collection::vec((-10.0f64..10.0, 0.05f64..5.0), 2..12),
            budget in 1.0f64..1e4,
        ) {
            let stats: Vec<PointStats> = raw.iter().map(|&(m, s)| st(m, s)).collect();
            let b = best_index(&stats);
            // keep the gaps away from zero so the equations are well posed
            prop_assume!(stats.iter().enumerate().all(|(i, s)| i == b || s.mean - stats[b].mean > 1e-3));
            let t = ocba_targets(&stats, budget).unwrap();
            assert_ocba_equations(&stats, &t, budget);
        }

        #[test]
        fn rounding_conserves_budget(
            raw in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0, 1usize..50), 1..15),
            s_n in 2usize..60,
            budget in 0usize..2000,
        ) {
            let stats: Vec<PointStats> = raw.iter().map(|&(mean, sd, count)| PointStats { mean, sd, count }).collect();
            let a = allocate(&stats, s_n, budget).unwrap();
            prop_assert_eq!(a.iter().sum::<usize>(), budget);
            let demand: usize = stats.iter().map(|s| s_n.saturating_sub(s.count)).sum();
            if budget >= demand {
                prop_assert!(stats.iter().zip(&a).all(|(s, k)| s.count + k >= s_n));
            }
            if stats.len() >= 2 {
                prop_assert_eq!(ocba_split(&stats, budget).unwrap().iter().sum::<usize>(), budget);
            }
        }
    }
}
