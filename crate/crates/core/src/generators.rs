//! Deterministic, differentiable stand-ins for a noise-to-output generator,
//! and gallery-level objectives over their outputs.
//!
//! Every generator exposes its value and an exact vector-Jacobian product;
//! every objective exposes its value and exact partials with respect to each
//! output. Together they are enough to backpropagate a gallery score to the
//! noises and from there to a coupling matrix.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::MatrixRows;
use crate::error::{CouplingError, Result};
use crate::sampler::{standard_normal_matrix, RandomStream};

/// Deterministic map `z -> x` with an exact vector-Jacobian product.
pub trait GeneratorOracle: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Opaque label standing in for a prompt.
    fn context(&self) -> &str;
    fn evaluate(&self, z: &DVector<f64>) -> DVector<f64>;
    /// `J(z)ᵀ u`.
    fn vjp(&self, z: &DVector<f64>, cotangent: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Maximize,
    Minimize,
}

impl Goal {
    /// +1 for maximize, -1 for minimize.
    pub fn sign(self) -> f64 {
        match self {
            Goal::Maximize => 1.0,
            Goal::Minimize => -1.0,
        }
    }

    /// True when `a` is at least as good as `b`.
    pub fn no_worse(self, a: f64, b: f64) -> bool {
        match self {
            Goal::Maximize => a >= b,
            Goal::Minimize => a <= b,
        }
    }
}

/// A scalar function of the `k` outputs of a gallery, with exact partials.
pub trait GalleryObjective: Send + Sync {
    fn name(&self) -> &str;
    fn arity(&self) -> usize;
    fn goal(&self) -> Goal;
    fn evaluate(&self, outputs: &[DVector<f64>]) -> f64;
    /// `∂f/∂x_i` for every `i`.
    fn gradient(&self, outputs: &[DVector<f64>]) -> Vec<DVector<f64>>;
}

// ---------------------------------------------------------------------------
// Generators

/// `x = a + J z`.
#[derive(Debug, Clone)]
pub struct LinearGenerator {
    jacobian: DMatrix<f64>,
    offset: DVector<f64>,
    context: String,
}

impl LinearGenerator {
    pub fn new(jacobian: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if jacobian.nrows() == 0 || jacobian.ncols() == 0 {
            return Err(CouplingError::mismatch(
                "linear generator needs a non-empty Jacobian",
            ));
        }
        if offset.len() != jacobian.nrows() {
            return Err(CouplingError::mismatch(format!(
                "offset has length {}, Jacobian has {} rows",
                offset.len(),
                jacobian.nrows()
            )));
        }
        if jacobian.iter().chain(offset.iter()).any(|x| !x.is_finite()) {
            return Err(CouplingError::invalid(
                "linear generator has non-finite entries",
            ));
        }
        Ok(LinearGenerator {
            jacobian,
            offset,
            context: "linear".into(),
        })
    }

    pub fn identity(d: usize) -> Self {
        LinearGenerator {
            jacobian: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
            context: "linear".into(),
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }
}

impl GeneratorOracle for LinearGenerator {
    fn input_dim(&self) -> usize {
        self.jacobian.ncols()
    }
    fn output_dim(&self) -> usize {
        self.jacobian.nrows()
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn evaluate(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.jacobian * z
    }
    fn vjp(&self, _z: &DVector<f64>, cotangent: &DVector<f64>) -> DVector<f64> {
        self.jacobian.tr_mul(cotangent)
    }
}

pub fn make_linear(jacobian: DMatrix<f64>, offset: DVector<f64>) -> Result<LinearGenerator> {
    LinearGenerator::new(jacobian, offset)
}

/// One-hidden-layer network `x = W2 tanh(W1 z + b) / sqrt(width)` with seeded weights.
///
/// `W1` entries are `N(0, 1/d)`, `b` entries `N(0, 1/4)`, `W2` entries `N(0, 1)`.
#[derive(Debug, Clone)]
pub struct RandomFeatureGenerator {
    w1: DMatrix<f64>,
    bias: DVector<f64>,
    w2: DMatrix<f64>,
    context: String,
}

impl RandomFeatureGenerator {
    pub fn new(seed: u64, d: usize, m: usize, width: usize) -> Result<Self> {
        if d == 0 || m == 0 || width == 0 {
            return Err(CouplingError::invalid(
                "random-feature generator needs d, m, width >= 1",
            ));
        }
        let mut rng = RandomStream::new(seed, 0).rng();
        let w1 = standard_normal_matrix(&mut rng, width, d) / (d as f64).sqrt();
        let bias = standard_normal_matrix(&mut rng, width, 1).column(0) * 0.5;
        let w2 = standard_normal_matrix(&mut rng, m, width);
        Ok(RandomFeatureGenerator {
            w1,
            bias,
            w2,
            context: format!("random-feature/{seed}"),
        })
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    /// Upper bound on `‖x‖∞`: the max absolute row sum of `W2 / sqrt(width)`.
    pub fn output_bound(&self) -> f64 {
        let scale = (self.width() as f64).sqrt();
        self.w2
            .row_iter()
            .map(|r| r.iter().map(|x| x.abs()).sum::<f64>() / scale)
            .fold(0.0, f64::max)
    }
}

impl GeneratorOracle for RandomFeatureGenerator {
    fn input_dim(&self) -> usize {
        self.w1.ncols()
    }
    fn output_dim(&self) -> usize {
        self.w2.nrows()
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn evaluate(&self, z: &DVector<f64>) -> DVector<f64> {
        let hidden = (&self.w1 * z + &self.bias).map(f64::tanh);
        &self.w2 * hidden / (self.width() as f64).sqrt()
    }
    fn vjp(&self, z: &DVector<f64>, cotangent: &DVector<f64>) -> DVector<f64> {
        let pre = &self.w1 * z + &self.bias;
        let back = self.w2.tr_mul(cotangent) / (self.width() as f64).sqrt();
        let dpre = back.zip_map(&pre, |g, p| {
            let t = p.tanh();
            g * (1.0 - t * t)
        });
        self.w1.tr_mul(&dpre)
    }
}

pub fn make_random_feature(
    seed: u64,
    d: usize,
    m: usize,
    width: usize,
) -> Result<RandomFeatureGenerator> {
    RandomFeatureGenerator::new(seed, d, m, width)
}

/// Scalar brightness surrogate `b(z) = sigmoid(wᵀz / sqrt(d))`, `w ~ N(0, I_d)` from the seed.
#[derive(Debug, Clone)]
pub struct BrightnessSurrogate {
    direction: DVector<f64>,
    context: String,
}

impl BrightnessSurrogate {
    pub fn new(seed: u64, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(CouplingError::invalid("brightness surrogate needs d >= 1"));
        }
        let mut rng = RandomStream::new(seed, 0).rng();
        let w = standard_normal_matrix(&mut rng, d, 1).column(0) / (d as f64).sqrt();
        Ok(BrightnessSurrogate {
            direction: w,
            context: format!("brightness/{seed}"),
        })
    }

    fn logit(&self, z: &DVector<f64>) -> f64 {
        self.direction.dot(z)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GeneratorOracle for BrightnessSurrogate {
    fn input_dim(&self) -> usize {
        self.direction.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn evaluate(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, sigmoid(self.logit(z)))
    }
    fn vjp(&self, z: &DVector<f64>, cotangent: &DVector<f64>) -> DVector<f64> {
        let s = sigmoid(self.logit(z));
        &self.direction * (cotangent[0] * s * (1.0 - s))
    }
}

pub fn make_brightness_surrogate(seed: u64, d: usize) -> Result<BrightnessSurrogate> {
    BrightnessSurrogate::new(seed, d)
}

// ---------------------------------------------------------------------------
// Objectives

fn check_arity(expected: usize, got: usize) {
    assert_eq!(
        got, expected,
        "gallery objective expects {expected} outputs, got {got}"
    );
}

/// How pairwise separation is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separation {
    /// `‖x_i - x_j‖²`.
    Squared,
    /// `sqrt(‖x_i - x_j‖² + ε²) - ε`.
    Distance,
}

/// Smoothing for the distance form of [`PairwiseL2`].
pub const DISTANCE_EPS: f64 = 1e-3;

/// Average pairwise separation `2/(k(k-1)) Σ_{i<j} s(x_i - x_j)`.
#[derive(Debug, Clone)]
pub struct PairwiseL2 {
    k: usize,
    form: Separation,
    goal: Goal,
}

impl PairwiseL2 {
    pub fn new(k: usize, form: Separation) -> Result<Self> {
        if k < 2 {
            return Err(CouplingError::invalid("pairwise objective needs k >= 2"));
        }
        Ok(PairwiseL2 {
            k,
            form,
            goal: Goal::Maximize,
        })
    }

    pub fn with_goal(mut self, goal: Goal) -> Self {
        self.goal = goal;
        self
    }

    fn pair_weight(&self) -> f64 {
        2.0 / (self.k * (self.k - 1)) as f64
    }
}

impl GalleryObjective for PairwiseL2 {
    fn name(&self) -> &str {
        match self.form {
            Separation::Squared => "pairwise_sq",
            Separation::Distance => "pairwise_l2",
        }
    }
    fn arity(&self) -> usize {
        self.k
    }
    fn goal(&self) -> Goal {
        self.goal
    }
    fn evaluate(&self, x: &[DVector<f64>]) -> f64 {
        check_arity(self.k, x.len());
        let mut total = 0.0;
        for i in 0..self.k {
            for j in i + 1..self.k {
                let sq = (&x[i] - &x[j]).norm_squared();
                total += match self.form {
                    Separation::Squared => sq,
                    Separation::Distance => {
                        (sq + DISTANCE_EPS * DISTANCE_EPS).sqrt() - DISTANCE_EPS
                    }
                };
            }
        }
        self.pair_weight() * total
    }
    fn gradient(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        check_arity(self.k, x.len());
        let mut grads: Vec<DVector<f64>> = x.iter().map(|v| DVector::zeros(v.len())).collect();
        let w = self.pair_weight();
        for i in 0..self.k {
            for j in i + 1..self.k {
                let diff = &x[i] - &x[j];
                let coeff = match self.form {
                    Separation::Squared => 2.0 * w,
                    Separation::Distance => {
                        w / (diff.norm_squared() + DISTANCE_EPS * DISTANCE_EPS).sqrt()
                    }
                };
                grads[i] += &diff * coeff;
                grads[j] -= &diff * coeff;
            }
        }
        grads
    }
}

/// Average pairwise distance (smoothed), maximized by default.
pub fn objective_pairwise_l2(k: usize) -> Result<PairwiseL2> {
    PairwiseL2::new(k, Separation::Distance)
}

/// Average squared pairwise separation, maximized by default.
pub fn objective_pairwise_squared(k: usize) -> Result<PairwiseL2> {
    PairwiseL2::new(k, Separation::Squared)
}

/// Average pairwise RBF similarity `2/(k(k-1)) Σ_{i<j} exp(-‖x_i - x_j‖² / (2τ²))`.
#[derive(Debug, Clone)]
pub struct RbfSimilarity {
    k: usize,
    tau: f64,
    goal: Goal,
}

impl RbfSimilarity {
    pub fn new(k: usize, tau: f64) -> Result<Self> {
        if k < 2 {
            return Err(CouplingError::invalid("RBF objective needs k >= 2"));
        }
        if !tau.is_finite() || tau <= 0.0 {
            return Err(CouplingError::invalid("RBF bandwidth must be positive"));
        }
        Ok(RbfSimilarity {
            k,
            tau,
            goal: Goal::Minimize,
        })
    }

    pub fn with_goal(mut self, goal: Goal) -> Self {
        self.goal = goal;
        self
    }
}

impl GalleryObjective for RbfSimilarity {
    fn name(&self) -> &str {
        "rbf"
    }
    fn arity(&self) -> usize {
        self.k
    }
    fn goal(&self) -> Goal {
        self.goal
    }
    fn evaluate(&self, x: &[DVector<f64>]) -> f64 {
        check_arity(self.k, x.len());
        let inv = 1.0 / (2.0 * self.tau * self.tau);
        let mut total = 0.0;
        for i in 0..self.k {
            for j in i + 1..self.k {
                total += (-(&x[i] - &x[j]).norm_squared() * inv).exp();
            }
        }
        2.0 * total / (self.k * (self.k - 1)) as f64
    }
    fn gradient(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        check_arity(self.k, x.len());
        let inv = 1.0 / (2.0 * self.tau * self.tau);
        let w = 2.0 / (self.k * (self.k - 1)) as f64;
        let mut grads: Vec<DVector<f64>> = x.iter().map(|v| DVector::zeros(v.len())).collect();
        for i in 0..self.k {
            for j in i + 1..self.k {
                let diff = &x[i] - &x[j];
                let e = (-diff.norm_squared() * inv).exp();
                let coeff = -w * e * 2.0 * inv;
                grads[i] += &diff * coeff;
                grads[j] -= &diff * coeff;
            }
        }
        grads
    }
}

pub fn objective_rbf(k: usize, tau: f64) -> Result<RbfSimilarity> {
    RbfSimilarity::new(k, tau)
}

/// Smoothing for absolute values in [`BrightnessCluster`].
pub const BRIGHTNESS_EPS: f64 = 1e-3;

/// Within-pair weight used for the brightness-split objective.
pub const DEFAULT_BRIGHTNESS_LAMBDA: f64 = 0.35;

fn smooth_abs(u: f64, eps: f64) -> (f64, f64) {
    let s = (u * u + eps * eps).sqrt();
    (s, u / s)
}

/// Two-bright / two-dark split score on four scalar brightness values:
/// `|(b1+b2)/2 - (b3+b4)/2| + λ (|b1-b2| + |b3-b4|) / 2`.
///
/// Brightness of an output is the mean of its entries. Absolute values are
/// smoothed as `sqrt(u² + ε²)`.
#[derive(Debug, Clone)]
pub struct BrightnessCluster {
    lambda: f64,
    eps: f64,
    goal: Goal,
}

impl BrightnessCluster {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(CouplingError::invalid(
                "brightness lambda must be a nonnegative number",
            ));
        }
        Ok(BrightnessCluster {
            lambda,
            eps: BRIGHTNESS_EPS,
            goal: Goal::Maximize,
        })
    }

    pub fn with_goal(mut self, goal: Goal) -> Self {
        self.goal = goal;
        self
    }

    fn brightness(x: &DVector<f64>) -> f64 {
        x.mean()
    }

    /// The unsmoothed score for brightness values `b`.
    pub fn exact_score(&self, b: [f64; 4]) -> f64 {
        ((b[0] + b[1]) / 2.0 - (b[2] + b[3]) / 2.0).abs()
            + self.lambda * ((b[0] - b[1]).abs() + (b[2] - b[3]).abs()) / 2.0
    }

    /// Smoothed score and its partials wrt the brightness values.
    pub fn score_and_partials(&self, b: [f64; 4]) -> (f64, [f64; 4]) {
        let (gap, dgap) = smooth_abs((b[0] + b[1]) / 2.0 - (b[2] + b[3]) / 2.0, self.eps);
        let (p1, dp1) = smooth_abs(b[0] - b[1], self.eps);
        let (p2, dp2) = smooth_abs(b[2] - b[3], self.eps);
        let h = self.lambda / 2.0;
        let value = gap + h * (p1 + p2);
        let partials = [
            dgap / 2.0 + h * dp1,
            dgap / 2.0 - h * dp1,
            -dgap / 2.0 + h * dp2,
            -dgap / 2.0 - h * dp2,
        ];
        (value, partials)
    }
}

impl GalleryObjective for BrightnessCluster {
    fn name(&self) -> &str {
        "brightness_cluster"
    }
    fn arity(&self) -> usize {
        4
    }
    fn goal(&self) -> Goal {
        self.goal
    }
    fn evaluate(&self, x: &[DVector<f64>]) -> f64 {
        check_arity(4, x.len());
        let b = [0, 1, 2, 3].map(|i| Self::brightness(&x[i]));
        self.score_and_partials(b).0
    }
    fn gradient(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        check_arity(4, x.len());
        let b = [0, 1, 2, 3].map(|i| Self::brightness(&x[i]));
        let (_, partials) = self.score_and_partials(b);
        x.iter()
            .zip(partials)
            .map(|(xi, p)| DVector::from_element(xi.len(), p / xi.len() as f64))
            .collect()
    }
}

pub fn objective_brightness_cluster(k: usize, lambda: f64) -> Result<BrightnessCluster> {
    if k != 4 {
        return Err(CouplingError::invalid(format!(
            "brightness objective needs k = 4, got {k}"
        )));
    }
    BrightnessCluster::new(lambda)
}

/// Masked fidelity `Σ_i Σ_{l in region} (x_il - x*_l)²`, minimized.
#[derive(Debug, Clone)]
pub struct MaskedFidelity {
    k: usize,
    target: DVector<f64>,
    region: Vec<bool>,
}

impl MaskedFidelity {
    pub fn new(k: usize, target: DVector<f64>, region: Vec<bool>) -> Result<Self> {
        if region.len() != target.len() {
            return Err(CouplingError::mismatch("target and region lengths differ"));
        }
        Ok(MaskedFidelity { k, target, region })
    }
}

impl GalleryObjective for MaskedFidelity {
    fn name(&self) -> &str {
        "masked_fidelity"
    }
    fn arity(&self) -> usize {
        self.k
    }
    fn goal(&self) -> Goal {
        Goal::Minimize
    }
    fn evaluate(&self, x: &[DVector<f64>]) -> f64 {
        check_arity(self.k, x.len());
        x.iter()
            .map(|xi| {
                (0..xi.len())
                    .filter(|&l| self.region[l])
                    .map(|l| (xi[l] - self.target[l]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }
    fn gradient(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        check_arity(self.k, x.len());
        x.iter()
            .map(|xi| {
                DVector::from_fn(xi.len(), |l, _| {
                    if self.region[l] {
                        2.0 * (xi[l] - self.target[l])
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Declarative forms for configuration files

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorSpec {
    LinearIdentity {
        d: usize,
    },
    Linear {
        jacobian: MatrixRows,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
    RandomFeature {
        seed: u64,
        d: usize,
        m: usize,
        width: usize,
    },
    Brightness {
        seed: u64,
        d: usize,
    },
}

impl GeneratorSpec {
    pub fn build(&self) -> Result<Arc<dyn GeneratorOracle>> {
        Ok(match self {
            GeneratorSpec::LinearIdentity { d } => Arc::new(LinearGenerator::identity(*d)),
            GeneratorSpec::Linear { jacobian, offset } => {
                let j = jacobian.to_matrix()?;
                let a = match offset {
                    Some(v) => DVector::from_vec(v.clone()),
                    None => DVector::zeros(j.nrows()),
                };
                Arc::new(LinearGenerator::new(j, a)?)
            }
            GeneratorSpec::RandomFeature { seed, d, m, width } => {
                Arc::new(RandomFeatureGenerator::new(*seed, *d, *m, *width)?)
            }
            GeneratorSpec::Brightness { seed, d } => Arc::new(BrightnessSurrogate::new(*seed, *d)?),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    PairwiseL2 {
        k: usize,
        #[serde(default)]
        goal: Option<Goal>,
    },
    PairwiseSquared {
        k: usize,
        #[serde(default)]
        goal: Option<Goal>,
    },
    Rbf {
        k: usize,
        tau: f64,
        #[serde(default)]
        goal: Option<Goal>,
    },
    BrightnessCluster {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        goal: Option<Goal>,
    },
}

fn default_lambda() -> f64 {
    DEFAULT_BRIGHTNESS_LAMBDA
}

impl ObjectiveSpec {
    pub fn build(&self) -> Result<Arc<dyn GalleryObjective>> {
        Ok(match self {
            ObjectiveSpec::PairwiseL2 { k, goal } => {
                let o = objective_pairwise_l2(*k)?;
                Arc::new(match goal {
                    Some(g) => o.with_goal(*g),
                    None => o,
                })
            }
            ObjectiveSpec::PairwiseSquared { k, goal } => {
                let o = objective_pairwise_squared(*k)?;
                Arc::new(match goal {
                    Some(g) => o.with_goal(*g),
                    None => o,
                })
            }
            ObjectiveSpec::Rbf { k, tau, goal } => {
                let o = objective_rbf(*k, *tau)?;
                Arc::new(match goal {
                    Some(g) => o.with_goal(*g),
                    None => o,
                })
            }
            ObjectiveSpec::BrightnessCluster { lambda, goal } => {
                let o = objective_brightness_cluster(4, *lambda)?;
                Arc::new(match goal {
                    Some(g) => o.with_goal(*g),
                    None => o,
                })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        standard_normal_matrix(rng, n, 1).column(0).into_owned()
    }

    /// Central-difference VJP: `u · (G(z + h e_l) - G(z - h e_l)) / 2h`.
    fn fd_vjp(g: &dyn GeneratorOracle, z: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(z.len(), |l, _| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[l] += h;
            zm[l] -= h;
            u.dot(&(g.evaluate(&zp) - g.evaluate(&zm))) / (2.0 * h)
        })
    }

    fn assert_vjp_matches(g: &dyn GeneratorOracle, seed: u64) {
        let mut rng = RandomStream::new(seed, 99).rng();
        for _ in 0..10 {
            let z = random_vec(&mut rng, g.input_dim());
            let u = random_vec(&mut rng, g.output_dim());
            let exact = g.vjp(&z, &u);
            let fd = fd_vjp(g, &z, &u, 1e-5);
            let rel = (&fd - &exact).norm() / exact.norm().max(1e-12);
            assert!(rel <= 1e-4, "relative vjp error {rel}");
        }
    }

    fn fd_objective_gradient(
        o: &dyn GalleryObjective,
        x: &[DVector<f64>],
        h: f64,
    ) -> Vec<DVector<f64>> {
        (0..x.len())
            .map(|i| {
                DVector::from_fn(x[i].len(), |l, _| {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[i][l] += h;
                    xm[i][l] -= h;
                    (o.evaluate(&xp) - o.evaluate(&xm)) / (2.0 * h)
                })
            })
            .collect()
    }

    fn assert_objective_gradient(o: &dyn GalleryObjective, m: usize, scale: f64, seed: u64) {
        let mut rng = RandomStream::new(seed, 7).rng();
        for _ in 0..10 {
            let x: Vec<DVector<f64>> = (0..o.arity())
                .map(|_| random_vec(&mut rng, m) * scale)
                .collect();
            let exact = o.gradient(&x);
            let fd = fd_objective_gradient(o, &x, 1e-5);
            let num: f64 = exact
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt();
            let den: f64 = exact.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
            assert!(
                num / den.max(1e-12) <= 1e-4,
                "{}: relative gradient error {}",
                o.name(),
                num / den
            );
        }
    }

    #[test]
    fn linear_examples() {
        let g = LinearGenerator::identity(3);
        let z = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_eq!(g.evaluate(&z), z);

        let g = make_linear(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(
            g.evaluate(&DVector::from_vec(vec![1.0, 1.0])),
            DVector::from_vec(vec![2.0, 3.0])
        );

        let j = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = make_linear(j.clone(), DVector::zeros(2)).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(g.vjp(&DVector::zeros(3), &e1), j.row(0).transpose());
    }

    #[test]
    fn linear_shape_mismatch() {
        assert!(make_linear(DMatrix::identity(2, 3), DVector::zeros(3)).is_err());
    }

    #[test]
    fn random_feature_is_deterministic_and_bounded() {
        let g1 = make_random_feature(4, 6, 3, 16).unwrap();
        let g2 = make_random_feature(4, 6, 3, 16).unwrap();
        let mut rng = RandomStream::new(1, 1).rng();
        let bound = g1.output_bound();
        for _ in 0..20 {
            let z = random_vec(&mut rng, 6) * 5.0;
            let a = g1.evaluate(&z);
            let b = g2.evaluate(&z);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert!(a.amax() <= bound);
        }
    }

    #[test]
    fn generator_vjps_match_finite_differences() {
        assert_vjp_matches(&make_random_feature(3, 5, 4, 12).unwrap(), 1);
        assert_vjp_matches(&make_brightness_surrogate(8, 6).unwrap(), 2);
        let j = standard_normal_matrix(&mut RandomStream::new(5, 5).rng(), 3, 4);
        assert_vjp_matches(&make_linear(j, DVector::from_element(3, 0.5)).unwrap(), 3);
    }

    #[test]
    fn brightness_surrogate_properties() {
        let g = make_brightness_surrogate(1, 8).unwrap();
        assert_eq!(g.evaluate(&DVector::zeros(8))[0], 0.5);
        let mut rng = RandomStream::new(2, 2).rng();
        for _ in 0..10 {
            let z = random_vec(&mut rng, 8);
            let b = g.evaluate(&z)[0];
            let bn = g.evaluate(&(-&z))[0];
            assert!((bn - (1.0 - b)).abs() < 1e-15);
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        assert_objective_gradient(&objective_pairwise_l2(3).unwrap(), 4, 1.0, 1);
        assert_objective_gradient(&objective_pairwise_squared(4).unwrap(), 3, 1.0, 2);
        assert_objective_gradient(&objective_rbf(3, 1.5).unwrap(), 2, 1.0, 3);
        assert_objective_gradient(&objective_brightness_cluster(4, 0.35).unwrap(), 1, 0.2, 4);
        let fid = MaskedFidelity::new(
            2,
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            vec![true, false, true],
        )
        .unwrap();
        assert_objective_gradient(&fid, 3, 1.0, 5);
    }

    #[test]
    fn objectives_on_identical_inputs() {
        let x = vec![DVector::from_vec(vec![0.4, -0.2]); 3];
        assert_eq!(objective_pairwise_l2(3).unwrap().evaluate(&x), 0.0);
        assert_eq!(objective_pairwise_squared(3).unwrap().evaluate(&x), 0.0);
        assert_eq!(objective_rbf(3, 0.7).unwrap().evaluate(&x), 1.0);
    }

    #[test]
    fn brightness_example_value() {
        let o = objective_brightness_cluster(4, 0.35).unwrap();
        let b = [0.9, 0.8, 0.2, 0.1];
        assert!((o.exact_score(b) - 0.735).abs() < 1e-12);
        let x: Vec<DVector<f64>> = b.iter().map(|&v| DVector::from_element(1, v)).collect();
        // Smoothing moves each |.| by at most ε.
        assert!((o.evaluate(&x) - 0.735).abs() <= BRIGHTNESS_EPS * (1.0 + 0.35));
        assert!(objective_brightness_cluster(3, 0.35).is_err());
    }

    #[test]
    fn default_goals() {
        assert_eq!(objective_pairwise_l2(2).unwrap().goal(), Goal::Maximize);
        assert_eq!(objective_rbf(2, 1.0).unwrap().goal(), Goal::Minimize);
        assert_eq!(
            objective_brightness_cluster(4, 0.35).unwrap().goal(),
            Goal::Maximize
        );
    }

    #[test]
    fn specs_build() {
        let g: GeneratorSpec =
            serde_json::from_str(r#"{"type":"random_feature","seed":1,"d":4,"m":2,"width":8}"#)
                .unwrap();
        assert_eq!(g.build().unwrap().output_dim(), 2);
        let o: ObjectiveSpec = serde_json::from_str(r#"{"type":"brightness_cluster"}"#).unwrap();
        assert_eq!(o.build().unwrap().arity(), 4);
    }
}
