//! Benchmark functions, their lift into `[0,1]^d`, and the Griewank noise.

use std::f64::consts::PI;
use std::fmt;

use mambo_core::acquisition::BoxSpace;
use mambo_core::optim::{minimize_box, numeric_gradient, LbfgsOptions};
use mambo_core::optimizer::NoisyObjective;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::BenchError;

const NOISE_FLOOR: f64 = 1e-6;

const HARTMAN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMAN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMAN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

const PRICE_A: [f64; 10] = [4.42, 2.06, -5.32, 0.61, -4.41, 1.90, -5.96, -6.41, -1.82, 3.60];
const PRICE_B: [f64; 10] = [0.0010, 0.0024, 0.0023, 0.0057, 0.0065, 0.0021, 0.0080, 0.0056, 0.0064, 0.0087];
/// Upper price bound of the search box.
pub const PRICE_MAX: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseFunction {
    Branin,
    Camel,
    Eggholder,
    Hartman6,
    Price,
}

impl BaseFunction {
    pub const ALL: [BaseFunction; 5] =
        [BaseFunction::Branin, BaseFunction::Camel, BaseFunction::Eggholder, BaseFunction::Hartman6, BaseFunction::Price];

    pub fn name(self) -> &'static str {
        match self {
            BaseFunction::Branin => "branin",
            BaseFunction::Camel => "camel",
            BaseFunction::Eggholder => "eggholder",
            BaseFunction::Hartman6 => "hartman6",
            BaseFunction::Price => "price",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    /// Number of active coordinates `k`.
    pub fn dim(self) -> usize {
        match self {
            BaseFunction::Hartman6 => 6,
            BaseFunction::Price => 10,
            _ => 2,
        }
    }

    /// Native domain per active coordinate.
    pub fn native_box(self) -> Vec<(f64, f64)> {
        match self {
            BaseFunction::Branin => vec![(-5.0, 10.0), (0.0, 15.0)],
            BaseFunction::Camel => vec![(-3.0, 3.0), (-2.0, 2.0)],
            BaseFunction::Eggholder => vec![(-512.0, 512.0); 2],
            BaseFunction::Hartman6 => vec![(0.0, 1.0); 6],
            BaseFunction::Price => vec![(0.0, PRICE_MAX); 10],
        }
    }

    /// Literature value of the global minimum on the native box, if known.
    pub fn known_minimum(self) -> Option<f64> {
        match self {
            BaseFunction::Branin => Some(0.397_887_357_729_738),
            BaseFunction::Camel => Some(-1.031_628_453_489_877),
            BaseFunction::Eggholder => Some(-959.640_662_720_850_7),
            BaseFunction::Hartman6 => Some(-3.322_368_011_415_515),
            BaseFunction::Price => None,
        }
    }

    pub fn eval(self, u: &[f64]) -> f64 {
        match self {
            BaseFunction::Branin => branin(u[0], u[1]),
            BaseFunction::Camel => camel(u[0], u[1]),
            BaseFunction::Eggholder => eggholder(u[0], u[1]),
            BaseFunction::Hartman6 => hartman6(u),
            BaseFunction::Price => price_revenue(u),
        }
    }
}

impl fmt::Display for BaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

pub fn camel(x1: f64, x2: f64) -> f64 {
    let x1s = x1 * x1;
    (4.0 - 2.1 * x1s + x1s * x1s / 3.0) * x1s + x1 * x2 + (-4.0 + 4.0 * x2 * x2) * x2 * x2
}

pub fn eggholder(x1: f64, x2: f64) -> f64 {
    -(x2 + 47.0) * (x2 + x1 / 2.0 + 47.0).abs().sqrt().sin() - x1 * (x1 - (x2 + 47.0)).abs().sqrt().sin()
}

pub fn hartman6(x: &[f64]) -> f64 {
    -(0..4)
        .map(|i| {
            let e: f64 = (0..6).map(|j| HARTMAN_A[i][j] * (x[j] - HARTMAN_P[i][j]).powi(2)).sum();
            HARTMAN_ALPHA[i] * (-e).exp()
        })
        .sum::<f64>()
}

/// Negative expected revenue of ten products under a multinomial logit
/// demand model.
pub fn price_revenue(p: &[f64]) -> f64 {
    let w: Vec<f64> = (0..10).map(|i| (PRICE_A[i] - PRICE_B[i] * p[i]).exp()).collect();
    let denom = 1.0 + w.iter().sum::<f64>();
    -(0..10).map(|i| p[i] * w[i]).sum::<f64>() / denom
}

/// `1 + Σ uᵢ²/4000 − Π cos(uᵢ/√i)` with `i` starting at 1.
pub fn griewank(u: &[f64]) -> f64 {
    let s: f64 = u.iter().map(|v| v * v).sum::<f64>() / 4000.0;
    let p: f64 = u.iter().enumerate().map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos()).product();
    1.0 + s - p
}

/// Evaluates a base function by name at a point of its native box.
pub fn eval_testfunc(name: &str, u: &[f64]) -> Result<f64, BenchError> {
    let f = BaseFunction::from_name(name).ok_or_else(|| BenchError::Config(format!("unknown test function `{name}`")))?;
    if u.len() != f.dim() {
        return Err(BenchError::Config(format!("{name} takes {} inputs, got {}", f.dim(), u.len())));
    }
    Ok(f.eval(u))
}

/// Where the active coordinates sit inside the lifted space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    FirstK,
    Permuted(u64),
}

/// A base function lifted into `[0,1]^d`. Active coordinate `j` is mapped
/// affinely onto the `j`-th native interval; the others are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TestProblem {
    name: String,
    base: BaseFunction,
    dim: usize,
    active: Vec<usize>,
    native: Vec<(f64, f64)>,
    f_star: f64,
}

impl TestProblem {
    /// The native problem rescaled to `[0,1]^k`.
    pub fn native(base: BaseFunction) -> Self {
        let f_star = base.known_minimum().unwrap_or_else(|| price_optimum(0).value);
        Self {
            name: base.name().to_string(),
            base,
            dim: base.dim(),
            active: (0..base.dim()).collect(),
            native: base.native_box(),
            f_star,
        }
    }

    /// Parses `branin`, `branin100`, `hartman6_100`, `price10`, ... The
    /// optional numeric suffix is the ambient dimension.
    pub fn by_name(name: &str, assignment: Assignment) -> Result<Self, BenchError> {
        let unknown = || BenchError::Config(format!("unknown problem `{name}`"));
        let base = BaseFunction::ALL.into_iter().find(|b| name.starts_with(b.name())).ok_or_else(unknown)?;
        let rest = name[base.name().len()..].trim_start_matches('_');
        let native = Self::native(base);
        if rest.is_empty() {
            return Ok(native);
        }
        let d: usize = rest.parse().map_err(|_| unknown())?;
        let mut p = lift_to_highdim(&native, d, assignment)?;
        p.name = name.to_string();
        Ok(p)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> BaseFunction {
        self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn active_dim(&self) -> usize {
        self.active.len()
    }

    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn space(&self) -> BoxSpace {
        BoxSpace::cube(self.dim, 0.0, 1.0).expect("unit cube is valid")
    }

    /// Active coordinates mapped to the native box.
    pub fn to_native(&self, x: &[f64]) -> Vec<f64> {
        self.active.iter().zip(&self.native).map(|(&i, &(lo, hi))| lo + x[i] * (hi - lo)).collect()
    }

    /// Noiseless objective.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.base.eval(&self.to_native(x))
    }

    /// Griewank of the active coordinates mapped to `[−5,5]^k`, divided by
    /// `k` and floored at 1e-6.
    pub fn noise_sd(&self, x: &[f64]) -> f64 {
        let u: Vec<f64> = self.active.iter().map(|&i| -5.0 + 10.0 * x[i]).collect();
        (griewank(&u) / self.active.len() as f64).max(NOISE_FLOOR)
    }

    /// `|f(x) − f*|` with the noiseless objective.
    pub fn regret(&self, x: &[f64]) -> f64 {
        simple_regret(self.value(x), self.f_star)
    }
}

impl NoisyObjective for TestProblem {
    fn evaluate(&self, x: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        self.value(x) + self.noise_sd(x) * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Embeds `p` (which must not already be lifted) into `[0,1]^d`.
pub fn lift_to_highdim(p: &TestProblem, d: usize, assignment: Assignment) -> Result<TestProblem, BenchError> {
    let k = p.active_dim();
    if d < k {
        return Err(BenchError::Config(format!("cannot lift a {k}-dimensional problem into {d} dimensions")));
    }
    let active = match assignment {
        Assignment::FirstK => (0..k).collect(),
        Assignment::Permuted(seed) => {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(k);
            idx
        }
    };
    Ok(TestProblem { name: format!("{}{d}", p.base.name()), dim: d, active, ..p.clone() })
}

pub fn simple_regret(f_hat: f64, f_star: f64) -> f64 {
    (f_hat - f_star).abs()
}

/// Best point found by multistart local search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMinimum {
    pub value: f64,
    pub point: Vec<f64>,
    pub starts: usize,
    pub seed: u64,
}

/// Multistart projected L-BFGS (finite-difference gradients) on the native
/// box of `base`, from `starts` uniform starting points.
pub fn multistart_minimum(base: BaseFunction, starts: usize, seed: u64) -> OracleMinimum {
    // search in unit coordinates so one finite-difference step fits all boxes
    let bx = base.native_box();
    let k = bx.len();
    let to_native = |u: &[f64]| -> Vec<f64> { u.iter().zip(&bx).map(|(u, (l, h))| l + u * (h - l)).collect() };
    let mut f = |u: &[f64]| base.eval(&to_native(u));
    let (lo, hi) = (vec![0.0; k], vec![1.0; k]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LbfgsOptions { max_iters: 500, grad_tol: 1e-10, rel_tol: 1e-15, ..LbfgsOptions::default() };
    let mut best = OracleMinimum { value: f64::INFINITY, point: Vec::new(), starts, seed };
    for _ in 0..starts {
        let u0: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let m = minimize_box(
            |u: &[f64], g: &mut [f64]| {
                numeric_gradient(&mut f, u, &lo, &hi, 1e-7, g);
                f(u)
            },
            &u0,
            &lo,
            &hi,
            &opts,
        );
        if m.value < best.value {
            best.value = m.value;
            best.point = to_native(&m.x);
        }
    }
    best
}

/// Oracle optimum of the price problem (100 starts).
pub fn price_optimum(seed: u64) -> OracleMinimum {
    multistart_minimum(BaseFunction::Price, 100, seed)
}
