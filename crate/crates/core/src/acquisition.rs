//! Acquisition functions over the aggregated model and the inner search
//! that proposes the next design point.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::aggregate::AggregatedModel;
use crate::error::{check_dim, invalid, Error, Result};
use crate::gp::{cholesky_with_jitter, FitOptions};

const NEG_VARIANCE_TOL: f64 = 1e-8;
const EXCLUSION_RADIUS: f64 = 1e-9;

fn checked_variance(variance: f64) -> Result<f64> {
    if variance < -NEG_VARIANCE_TOL || variance.is_nan() {
        return Err(Error::NegativeVariance(variance));
    }
    Ok(variance.max(0.0))
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement `E[(T − F)⁺]` for `F ~ N(mean, variance)`.
pub fn expected_improvement(mean: f64, variance: f64, t: f64) -> Result<f64> {
    let var = checked_variance(variance)?;
    let delta = t - mean;
    if var == 0.0 {
        return Ok(delta.max(0.0));
    }
    let sd = var.sqrt();
    let z = delta / sd;
    Ok((delta * normal_cdf(z) + sd * normal_pdf(z)).max(0.0))
}

/// Lower confidence bound `mean − κ·sd` (minimized).
pub fn lcb(mean: f64, variance: f64, kappa: f64) -> Result<f64> {
    Ok(mean - kappa * checked_variance(variance)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquisitionKind {
    Ei,
    Lcb,
    Thompson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// LCB width; ignored by the other kinds.
    pub kappa: f64,
    pub candidate_count: usize,
    /// Sweeps of coordinate pattern search after candidate scoring.
    pub refine_steps: usize,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self { kind: AcquisitionKind::Ei, kappa: 2.0, candidate_count: 512, refine_steps: 20 }
    }
}

impl AcquisitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_count == 0 {
            return invalid("candidate_count must be at least 1");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return invalid(format!("kappa must be finite and nonnegative, got {}", self.kappa));
        }
        Ok(())
    }

    /// Acquisition value oriented so that larger is better.
    pub fn utility(&self, mean: f64, variance: f64, t: f64) -> Result<f64> {
        match self.kind {
            AcquisitionKind::Ei => expected_improvement(mean, variance, t),
            AcquisitionKind::Lcb => Ok(-lcb(mean, variance, self.kappa)?),
            AcquisitionKind::Thompson => invalid("Thompson sampling has no pointwise utility"),
        }
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpace {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSpace {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return invalid("box must have at least one dimension");
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return invalid("box bounds must be finite with lo < hi");
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi]^d`.
    pub fn cube(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.lo.iter().zip(&self.hi)).map(|(u, (l, h))| l + u * (h - l)).collect()
    }
}

/// `n` Latin-hypercube points in `space`: each coordinate hits every one of
/// the `n` equal slices exactly once.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, space: &BoxSpace, rng: &mut R) -> Vec<Vec<f64>> {
    let d = space.dim();
    let mut unit = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, &slot) in perm.iter().enumerate() {
            unit[i][j] = (slot as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    unit.iter().map(|u| space.from_unit(u)).collect()
}

fn too_close(x: &[f64], sampled: &[Vec<f64>]) -> bool {
    sampled.iter().any(|s| s.iter().zip(x).all(|(a, b)| (a - b).abs() <= EXCLUSION_RADIUS))
}

/// Result of [`thompson_pick`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThompsonPick {
    pub index: usize,
    /// The joint covariance could not be factored and independent marginal
    /// draws were used instead.
    pub marginal_fallback: bool,
}

/// Draws one joint posterior sample at `candidates` and returns its argmin.
pub fn thompson_pick<R: Rng + ?Sized>(model: &AggregatedModel, candidates: &[Vec<f64>], rng: &mut R) -> Result<ThompsonPick> {
    if candidates.is_empty() {
        return invalid("Thompson sampling needs at least one candidate");
    }
    let (mean, cov) = model.joint(candidates)?;
    let c = candidates.len();
    let z = DVector::from_iterator(c, (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let scale = cov.diagonal().iter().fold(0.0f64, |a, &b| a.max(b));
    let (sample, marginal_fallback) = if scale <= 0.0 {
        (mean, false)
    } else {
        match cholesky_with_jitter(cov.clone(), scale, &FitOptions::default(), "Thompson covariance") {
            Ok((chol, _)) => (mean + chol.l_dirty().lower_triangle() * &z, false),
            Err(_) => {
                log::warn!("joint Thompson draw failed to factor; using marginal draws");
                let s = DVector::from_iterator(c, (0..c).map(|i| mean[i] + z[i] * cov[(i, i)].max(0.0).sqrt()));
                (s, true)
            }
        }
    };
    let index = (0..c).fold(0, |b, i| if sample[i] < sample[b] { i } else { b });
    Ok(ThompsonPick { index, marginal_fallback })
}

/// Outcome of [`propose_next`].
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: Vec<f64>,
    /// Utility at `point` (NaN for Thompson sampling).
    pub utility: f64,
    pub thompson_fallback: bool,
}

#[derive(Clone, Copy)]
struct Scored {
    utility: f64,
    mean: f64,
}

impl Scored {
    /// Higher utility wins; equal utility goes to the lower mean.
    fn beats(&self, other: &Scored) -> bool {
        self.utility > other.utility || (self.utility == other.utility && self.mean < other.mean)
    }
}

fn score(model: &AggregatedModel, spec: &AcquisitionSpec, t: f64, x: &[f64]) -> Result<Scored> {
    let (mean, var) = model.predict(x)?;
    Ok(Scored { utility: spec.utility(mean, var, t)?, mean })
}

/// Proposes the next design point: Latin-hypercube candidates are scored,
/// and the best one is refined by coordinate pattern search with steps that
/// halve after a sweep without improvement. Points within L∞ distance 1e-9
/// of `sampled` are never returned. `t` is the current best sample mean.
pub fn propose_next<R: Rng + ?Sized>(
    model: &AggregatedModel,
    space: &BoxSpace,
    sampled: &[Vec<f64>],
    spec: &AcquisitionSpec,
    t: f64,
    rng: &mut R,
) -> Result<Proposal> {
    spec.validate()?;
    check_dim(space.dim(), model.dim())?;
    let candidates: Vec<Vec<f64>> = latin_hypercube(spec.candidate_count, space, rng)
        .into_iter()
        .filter(|c| !too_close(c, sampled))
        .collect();
    if candidates.is_empty() {
        return Err(Error::AllCandidatesExcluded);
    }
    if spec.kind == AcquisitionKind::Thompson {
        let pick = thompson_pick(model, &candidates, rng)?;
        return Ok(Proposal {
            point: candidates[pick.index].clone(),
            utility: f64::NAN,
            thompson_fallback: pick.marginal_fallback,
        });
    }

    let scores: Vec<Scored> = candidates.par_iter().map(|c| score(model, spec, t, c)).collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i].beats(&scores[best]) {
            best = i;
        }
    }
    let mut x = candidates[best].clone();
    let mut cur = scores[best];
    let mut h = 0.1;
    for _ in 0..spec.refine_steps {
        let mut improved = false;
        for j in 0..x.len() {
            let width = space.hi[j] - space.lo[j];
            for dir in [1.0, -1.0] {
                let old = x[j];
                let new = (old + dir * h * width).clamp(space.lo[j], space.hi[j]);
                if new == old {
                    continue;
                }
                x[j] = new;
                if !too_close(&x, sampled) {
                    let s = score(model, spec, t, &x)?;
                    if s.beats(&cur) {
                        cur = s;
                        improved = true;
                        break;
                    }
                }
                x[j] = old;
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok(Proposal { point: x, utility: cur.utility, thompson_fallback: false })
}
