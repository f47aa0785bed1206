//! Gallery-level quantities under a coupling: pairwise feature separation,
//! RBF feature similarity (closed form and Monte Carlo), the first-order
//! coupling-effect expansion, and the local linear separation prediction.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    check_equicorrelation, correlation_of, CorrelationStructure, CouplingKind, CouplingSpec,
    SampleCorrelation,
};
use crate::error::{CouplingError, Result};
use crate::generators::{GalleryObjective, GeneratorOracle};
use crate::quadrature::gauss_legendre_unit;
use crate::sampler::{standard_normal_matrix, NoiseBatch, PreparedSampler, RandomStream};
use crate::stats::{chunked_fold, Estimate, RunningStats, DEFAULT_CHUNKS};

/// Linear feature map `y = a + J z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeatureMap {
    jacobian: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearFeatureMap {
    pub fn new(jacobian: DMatrix<f64>) -> Result<Self> {
        let m = jacobian.nrows();
        Self::with_offset(jacobian, DVector::zeros(m))
    }

    pub fn with_offset(jacobian: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if jacobian.nrows() == 0 || jacobian.ncols() == 0 {
            return Err(CouplingError::mismatch("feature map needs m, d >= 1"));
        }
        if offset.len() != jacobian.nrows() {
            return Err(CouplingError::mismatch("offset length must equal m"));
        }
        if jacobian.iter().chain(offset.iter()).any(|x| !x.is_finite()) {
            return Err(CouplingError::invalid("feature map has non-finite entries"));
        }
        Ok(LinearFeatureMap { jacobian, offset })
    }

    pub fn identity(d: usize) -> Self {
        LinearFeatureMap {
            jacobian: DMatrix::identity(d, d),
            offset: DVector::zeros(d),
        }
    }

    pub fn jacobian(&self) -> &DMatrix<f64> {
        &self.jacobian
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn input_dim(&self) -> usize {
        self.jacobian.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.jacobian.nrows()
    }

    /// `‖J‖_F²`.
    pub fn frobenius_sq(&self) -> f64 {
        self.jacobian.norm_squared()
    }

    /// Features of every row of `z`, as rows.
    fn features(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = z * self.jacobian.transpose();
        for mut row in y.row_iter_mut() {
            row += self.offset.transpose();
        }
        y
    }
}

/// Average pairwise RBF feature similarity, optionally a nonnegative weighted
/// sum over several bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfSimilaritySpec {
    pub map: LinearFeatureMap,
    pub bandwidth: f64,
    /// `(τ_i, w_i)` pairs. When present these replace `bandwidth`.
    pub weights: Option<Vec<(f64, f64)>>,
}

impl RbfSimilaritySpec {
    pub fn new(map: LinearFeatureMap, bandwidth: f64) -> Result<Self> {
        let s = RbfSimilaritySpec {
            map,
            bandwidth,
            weights: None,
        };
        s.check()?;
        Ok(s)
    }

    pub fn weighted(map: LinearFeatureMap, weights: Vec<(f64, f64)>) -> Result<Self> {
        let bandwidth = weights.first().map(|w| w.0).unwrap_or(f64::NAN);
        let s = RbfSimilaritySpec {
            map,
            bandwidth,
            weights: Some(weights),
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let terms = self.terms();
        if terms.is_empty() {
            return Err(CouplingError::invalid(
                "RBF spec needs at least one bandwidth",
            ));
        }
        for (tau, w) in terms {
            if !tau.is_finite() || tau <= 0.0 {
                return Err(CouplingError::invalid("RBF bandwidth must be positive"));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(CouplingError::invalid("RBF weights must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn terms(&self) -> Vec<(f64, f64)> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![(self.bandwidth, 1.0)],
        }
    }

    fn kernel(&self, sq_dist: f64) -> f64 {
        self.terms()
            .iter()
            .map(|(tau, w)| w * (-sq_dist / (2.0 * tau * tau)).exp())
            .sum()
    }
}

fn check_map_dim(map: &LinearFeatureMap, d: usize) -> Result<()> {
    if map.input_dim() != d {
        return Err(CouplingError::mismatch(format!(
            "feature map expects d = {}, noise has d = {d}",
            map.input_dim()
        )));
    }
    Ok(())
}

fn pair_weight(k: usize) -> f64 {
    2.0 / (k * (k - 1)) as f64
}

fn separation_of(z: &DMatrix<f64>, map: &LinearFeatureMap) -> f64 {
    let y = map.features(z);
    let k = y.nrows();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += (y.row(i) - y.row(j)).norm_squared();
        }
    }
    pair_weight(k) * total
}

fn rbf_of(z: &DMatrix<f64>, rbf: &RbfSimilaritySpec) -> f64 {
    let y = rbf.map.features(z);
    let k = y.nrows();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += rbf.kernel((y.row(i) - y.row(j)).norm_squared());
        }
    }
    pair_weight(k) * total
}

/// Monte Carlo estimate of `2/(k(k-1)) Σ_{i<j} E‖J z_i - J z_j‖²` over given batches.
pub fn pairwise_separation(batches: &[NoiseBatch], map: &LinearFeatureMap) -> Result<Estimate> {
    let Some(first) = batches.first() else {
        return Err(CouplingError::invalid(
            "pairwise separation needs at least one batch",
        ));
    };
    let (k, d) = (first.k(), first.d());
    if k < 2 {
        return Err(CouplingError::invalid("pairwise separation needs k >= 2"));
    }
    if batches.iter().any(|b| b.k() != k || b.d() != d) {
        return Err(CouplingError::mismatch("batches must share k and d"));
    }
    check_map_dim(map, d)?;
    let mut stats = RunningStats::new();
    for b in batches {
        stats.push(separation_of(&b.vectors, map));
    }
    Ok(stats.estimate())
}

/// Streaming version of [`pairwise_separation`] over `n` batches drawn from `spec`.
pub fn pairwise_separation_mc(
    spec: &CouplingSpec,
    map: &LinearFeatureMap,
    stream: RandomStream,
    n: usize,
) -> Result<Estimate> {
    if spec.k() < 2 {
        return Err(CouplingError::invalid("pairwise separation needs k >= 2"));
    }
    check_map_dim(map, spec.d())?;
    let sampler = PreparedSampler::new(spec)?;
    let stats = chunked_fold(
        n as u64,
        DEFAULT_CHUNKS,
        RunningStats::new,
        |acc, i| {
            acc.push(separation_of(
                &sampler.sample(stream.substream(i)).vectors,
                map,
            ))
        },
        |a, b| a.merge(&b),
    );
    Ok(stats.estimate())
}

/// Upper bound `2k/(k-1) ‖J‖_F²` on average squared feature separation.
pub fn separation_bound(k: usize, map: &LinearFeatureMap) -> Result<f64> {
    if k < 2 {
        return Err(CouplingError::invalid("separation bound needs k >= 2"));
    }
    let kf = k as f64;
    Ok(2.0 * kf / (kf - 1.0) * map.frobenius_sq())
}

/// `2 (1 - c) ‖J‖_F²`: exact pairwise separation of a linear map under equicorrelation `c`.
pub fn local_linear_prediction(k: usize, c: f64, map: &LinearFeatureMap) -> Result<f64> {
    check_equicorrelation(k, c)?;
    Ok(2.0 * (1.0 - c) * map.frobenius_sq())
}

/// `det(I + V/τ²)^{-1/2}` for a pair difference covariance `V`.
pub fn gaussian_pair_rbf(diff_cov: &DMatrix<f64>, tau: f64) -> f64 {
    let m = diff_cov.nrows();
    let a = DMatrix::identity(m, m) + diff_cov / (tau * tau);
    let chol = Cholesky::new(a).expect("I + V/tau^2 is positive definite for PSD V");
    let l = chol.l();
    1.0 / (0..m).map(|i| l[(i, i)]).product::<f64>()
}

/// Closed-form minimum of average RBF similarity over Gaussian couplings:
/// `Σ_τ w_τ det(I_m + 2k/((k-1)τ²) J Jᵀ)^{-1/2}`, attained by the repulsive coupling.
pub fn rbf_similarity_closed_form(k: usize, rbf: &RbfSimilaritySpec) -> Result<f64> {
    if k < 2 {
        return Err(CouplingError::invalid("RBF closed form needs k >= 2"));
    }
    let kf = k as f64;
    let jjt = rbf.map.jacobian() * rbf.map.jacobian().transpose();
    let scaled = jjt * (2.0 * kf / (kf - 1.0));
    Ok(rbf
        .terms()
        .iter()
        .map(|(tau, w)| w * gaussian_pair_rbf(&scaled, *tau))
        .sum())
}

/// `Cov(z_i - z_j)` as a `d x d` matrix.
fn pair_difference_covariance(
    structure: &CorrelationStructure,
    spec: &CouplingSpec,
    i: usize,
    j: usize,
) -> DMatrix<f64> {
    let d = spec.d();
    match (structure, spec.kind()) {
        (
            CorrelationStructure::Subspace {
                on_subspace,
                on_complement,
                ..
            },
            CouplingKind::Subspace(s),
        ) => {
            let pv = s.projector();
            let perp = DMatrix::identity(d, d) - &pv;
            pv * (2.0 - 2.0 * on_subspace.get(i, j)) + perp * (2.0 - 2.0 * on_complement.get(i, j))
        }
        _ => DMatrix::identity(d, d) * (2.0 - 2.0 * structure.full_vector()[(i, j)]),
    }
}

/// Exact average RBF similarity of a jointly Gaussian coupling, pair by pair.
pub fn rbf_similarity_exact(spec: &CouplingSpec, rbf: &RbfSimilaritySpec) -> Result<f64> {
    let k = spec.k();
    if k < 2 {
        return Err(CouplingError::invalid("RBF similarity needs k >= 2"));
    }
    check_map_dim(&rbf.map, spec.d())?;
    let structure = correlation_of(spec)?;
    let j = rbf.map.jacobian();
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let v = j * pair_difference_covariance(&structure, spec, a, b) * j.transpose();
            total += rbf
                .terms()
                .iter()
                .map(|(tau, w)| w * gaussian_pair_rbf(&v, *tau))
                .sum::<f64>();
        }
    }
    Ok(pair_weight(k) * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RbfReport {
    pub monte_carlo: Estimate,
    pub exact: f64,
}

/// Monte Carlo average RBF similarity together with its exact Gaussian value.
pub fn rbf_similarity_mc(
    spec: &CouplingSpec,
    rbf: &RbfSimilaritySpec,
    stream: RandomStream,
    n: usize,
) -> Result<RbfReport> {
    let exact = rbf_similarity_exact(spec, rbf)?;
    let sampler = PreparedSampler::new(spec)?;
    let stats = chunked_fold(
        n as u64,
        DEFAULT_CHUNKS,
        RunningStats::new,
        |acc, i| acc.push(rbf_of(&sampler.sample(stream.substream(i)).vectors, rbf)),
        |a, b| a.merge(&b),
    );
    Ok(RbfReport {
        monte_carlo: stats.estimate(),
        exact,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub c: f64,
    pub k: usize,
    pub metric: String,
    pub estimate: f64,
    pub stderr: f64,
    pub prediction: f64,
}

/// Equicorrelation grid `c_j = -j / (4(k-1))`, `j = 0..=4`, from independent to repulsive.
pub fn default_sweep_grid(k: usize) -> Vec<f64> {
    // `+ 0.0` turns the leading -0.0 into 0.0
    (0..=4)
        .map(|j| -(j as f64) / (4.0 * (k as f64 - 1.0)) + 0.0)
        .collect()
}

/// Pairwise separation of a linear map across equicorrelation values.
pub fn separation_sweep(
    k: usize,
    d: usize,
    map: &LinearFeatureMap,
    grid: &[f64],
    stream: RandomStream,
    n: usize,
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .enumerate()
        .map(|(idx, &c)| {
            let spec = CouplingSpec::equicorrelated(k, d, c)?;
            let est =
                pairwise_separation_mc(&spec, map, stream.substream(idx as u64 * n as u64), n)?;
            Ok(SweepRow {
                c,
                k,
                metric: "separation".into(),
                estimate: est.mean,
                stderr: est.stderr,
                prediction: local_linear_prediction(k, c, map)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// First-order coupling effect

/// A smooth function `H(z_1, ..., z_k)` of a noise batch (rows of `z`).
pub trait NoiseObjective: Sync {
    fn k(&self) -> usize;
    fn d(&self) -> usize;
    fn value(&self, z: &DMatrix<f64>) -> f64;
    /// `∂H/∂z` with the same shape as `z`.
    fn gradient(&self, z: &DMatrix<f64>) -> DMatrix<f64>;
    /// Exact `D_ij H = Σ_l ∂²H/∂z_il ∂z_jl` as a `k x k` matrix, when known.
    fn mixed_traces(&self, _z: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// `H(z) = Σ_{i<j} ‖J (z_i - z_j)‖²`; `D_ij H = -2 ‖J‖_F²` for `i != j`.
#[derive(Debug, Clone)]
pub struct QuadraticPairwise {
    k: usize,
    map: LinearFeatureMap,
}

impl QuadraticPairwise {
    pub fn new(k: usize, map: LinearFeatureMap) -> Result<Self> {
        if k < 2 {
            return Err(CouplingError::invalid("pairwise objective needs k >= 2"));
        }
        Ok(QuadraticPairwise { k, map })
    }
}

impl NoiseObjective for QuadraticPairwise {
    fn k(&self) -> usize {
        self.k
    }
    fn d(&self) -> usize {
        self.map.input_dim()
    }
    fn value(&self, z: &DMatrix<f64>) -> f64 {
        separation_of(z, &self.map) / pair_weight(self.k)
    }
    fn gradient(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        // ∂/∂z_i = 2 JᵀJ (k z_i - Σ_j z_j)
        let jtj = self.map.jacobian().transpose() * self.map.jacobian();
        let sum = z.row_sum();
        let mut g = z * (self.k as f64);
        for mut row in g.row_iter_mut() {
            row -= &sum;
        }
        g * jtj * 2.0
    }
    fn mixed_traces(&self, _z: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let t = -2.0 * self.map.frobenius_sq();
        Some(DMatrix::from_fn(self.k, self.k, |i, j| {
            if i == j {
                0.0
            } else {
                t
            }
        }))
    }
}

/// `H(z) = f(G(z_1), ..., G(z_k))`, differentiated through the generator's VJP.
pub struct GeneratedObjective<'a> {
    pub generator: &'a dyn GeneratorOracle,
    pub objective: &'a dyn GalleryObjective,
}

impl GeneratedObjective<'_> {
    fn outputs(&self, z: &DMatrix<f64>) -> Vec<DVector<f64>> {
        z.row_iter()
            .map(|r| self.generator.evaluate(&r.transpose()))
            .collect()
    }
}

impl NoiseObjective for GeneratedObjective<'_> {
    fn k(&self) -> usize {
        self.objective.arity()
    }
    fn d(&self) -> usize {
        self.generator.input_dim()
    }
    fn value(&self, z: &DMatrix<f64>) -> f64 {
        self.objective.evaluate(&self.outputs(z))
    }
    fn gradient(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.outputs(z);
        let gx = self.objective.gradient(&x);
        let mut g = DMatrix::zeros(z.nrows(), z.ncols());
        for (i, gi) in gx.iter().enumerate() {
            let gz = self.generator.vjp(&z.row(i).transpose(), gi);
            g.row_mut(i).copy_from(&gz.transpose());
        }
        g
    }
}

/// How `D_ij H` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum MixedPartials {
    /// Exact traces if the objective supplies them, else finite differences.
    Auto,
    FiniteDifference,
    Hutchinson {
        probes: usize,
    },
}

pub const DEFAULT_HUTCHINSON_PROBES: usize = 16;

fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// `D_ij H` for all pairs by central differences of the gradient.
pub fn mixed_traces_fd(obj: &dyn NoiseObjective, z: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, d) = (z.nrows(), z.ncols());
    let mut t = DMatrix::zeros(k, k);
    let mut zp = z.clone();
    for j in 0..k {
        for l in 0..d {
            let h = fd_step(z[(j, l)]);
            zp[(j, l)] = z[(j, l)] + h;
            let gp = obj.gradient(&zp);
            zp[(j, l)] = z[(j, l)] - h;
            let gm = obj.gradient(&zp);
            zp[(j, l)] = z[(j, l)];
            for i in 0..k {
                t[(i, j)] += (gp[(i, l)] - gm[(i, l)]) / (2.0 * h);
            }
        }
    }
    (&t + t.transpose()) * 0.5
}

/// Hutchinson estimate of `D_ij H` with Rademacher probes.
pub fn mixed_traces_hutchinson<R: Rng + ?Sized>(
    obj: &dyn NoiseObjective,
    z: &DMatrix<f64>,
    probes: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let (k, d) = (z.nrows(), z.ncols());
    let mut t = DMatrix::zeros(k, k);
    let scale = z.amax().max(1.0);
    let h = f64::EPSILON.cbrt() * scale;
    for _ in 0..probes.max(1) {
        let v: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        for j in 0..k {
            let mut zp = z.clone();
            let mut zm = z.clone();
            for l in 0..d {
                zp[(j, l)] += h * v[l];
                zm[(j, l)] -= h * v[l];
            }
            let gp = obj.gradient(&zp);
            let gm = obj.gradient(&zm);
            for i in 0..k {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += v[l] * (gp[(i, l)] - gm[(i, l)]);
                }
                t[(i, j)] += acc / (2.0 * h);
            }
        }
    }
    let t = t / probes.max(1) as f64;
    (&t + t.transpose()) * 0.5
}

fn traces_for<R: Rng + ?Sized>(
    obj: &dyn NoiseObjective,
    z: &DMatrix<f64>,
    mode: MixedPartials,
    rng: &mut R,
) -> DMatrix<f64> {
    match mode {
        MixedPartials::Auto => obj
            .mixed_traces(z)
            .unwrap_or_else(|| mixed_traces_fd(obj, z)),
        MixedPartials::FiniteDifference => mixed_traces_fd(obj, z),
        MixedPartials::Hutchinson { probes } => mixed_traces_hutchinson(obj, z, probes, rng),
    }
}

/// `Σ_{i<j} B_ij T_ij`.
fn pair_contract(b: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    let k = b.nrows();
    let mut s = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            s += b[(i, j)] * t[(i, j)];
        }
    }
    s
}

/// Symmetric square roots `V diag(sqrt(1 - t + t λ)) Vᵀ` of `R_t = (1-t) I + t R`,
/// all from one eigendecomposition of `R` so that common random numbers vary smoothly in `t`.
struct InterpolatedRoots {
    vectors: DMatrix<f64>,
    values: DVector<f64>,
}

impl InterpolatedRoots {
    fn new(r: &SampleCorrelation) -> Self {
        let eig = SymmetricEigen::new(r.entries().clone());
        InterpolatedRoots {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        }
    }

    fn at(&self, t: f64) -> DMatrix<f64> {
        let scaled = self.values.map(|l| ((1.0 - t) + t * l).max(0.0).sqrt());
        &self.vectors * DMatrix::from_diagonal(&scaled) * self.vectors.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectOptions {
    pub mode: MixedPartials,
    pub quadrature_nodes: usize,
    pub chunks: usize,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions {
            mode: MixedPartials::Auto,
            quadrature_nodes: 16,
            chunks: DEFAULT_CHUNKS,
        }
    }
}

/// The three routes to `E_R[H] - E_iid[H]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectReport {
    /// `E_R[H] - E_iid[H]` with common random numbers.
    pub direct: Estimate,
    /// `Σ_{i<j} B_ij E_iid[D_ij H]`.
    pub first_order: Estimate,
    /// `∫_0^1 Σ_{i<j} B_ij E_t[D_ij H] dt` by Gauss–Legendre quadrature.
    pub interpolation: Estimate,
    /// Paired estimate of `direct - first_order`.
    pub remainder: Estimate,
    /// `Σ_{i<j} |B_ij|`.
    pub offset_l1: f64,
}

struct EffectAcc {
    direct: RunningStats,
    first: RunningStats,
    interp: RunningStats,
    remainder: RunningStats,
}

/// Compares the direct Monte Carlo coupling effect with its first-order
/// prediction and the exact interpolation integral.
pub fn coupling_effect_first_order(
    obj: &dyn NoiseObjective,
    r: &SampleCorrelation,
    stream: RandomStream,
    n: usize,
    opts: EffectOptions,
) -> Result<EffectReport> {
    let (k, d) = (obj.k(), obj.d());
    if r.k() != k {
        return Err(CouplingError::mismatch(format!(
            "correlation is {}x{}, objective has k = {k}",
            r.k(),
            r.k()
        )));
    }
    if n < 2 {
        return Err(CouplingError::invalid("effect estimate needs n >= 2"));
    }
    let b = r.offset_from_identity();
    let roots = InterpolatedRoots::new(r);
    let full = roots.at(1.0);
    let (nodes, weights) = gauss_legendre_unit(opts.quadrature_nodes);
    let node_roots: Vec<DMatrix<f64>> = nodes
        .iter()
        .map(|&t| {
            r.interpolate(t)
                .expect("R_t lies on the segment between I and a valid R");
            roots.at(t)
        })
        .collect();
    let probe_seed = stream.seed ^ 0x005E_ED0F_D1FF_u64;

    let acc = chunked_fold(
        n as u64,
        opts.chunks,
        || EffectAcc {
            direct: RunningStats::new(),
            first: RunningStats::new(),
            interp: RunningStats::new(),
            remainder: RunningStats::new(),
        },
        |acc, i| {
            let sub = stream.substream(i);
            let u = standard_normal_matrix(&mut sub.rng(), k, d);
            let mut probe_rng = RandomStream::new(probe_seed, sub.stream_id).rng();
            let z = &full * &u;
            let direct = obj.value(&z) - obj.value(&u);
            let first = pair_contract(&b, &traces_for(obj, &u, opts.mode, &mut probe_rng));
            let interp: f64 = node_roots
                .iter()
                .zip(&weights)
                .map(|(a, w)| {
                    w * pair_contract(&b, &traces_for(obj, &(a * &u), opts.mode, &mut probe_rng))
                })
                .sum();
            acc.direct.push(direct);
            acc.first.push(first);
            acc.interp.push(interp);
            acc.remainder.push(direct - first);
        },
        |a, o| {
            a.direct.merge(&o.direct);
            a.first.merge(&o.first);
            a.interp.merge(&o.interp);
            a.remainder.merge(&o.remainder);
        },
    );

    let offset_l1 = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| b[(i, j)].abs())
        .sum();
    Ok(EffectReport {
        direct: acc.direct.estimate(),
        first_order: acc.first.estimate(),
        interpolation: acc.interp.estimate(),
        remainder: acc.remainder.estimate(),
        offset_l1,
    })
}

/// Step for the outer difference in [`fourth_order_bound`].
const OUTER_STEP: f64 = 1e-2;

/// `D_kl f` for a matrix-valued `f` by a four-point mixed central difference.
fn mixed_trace_of<F: Fn(&DMatrix<f64>) -> DMatrix<f64>>(
    f: &F,
    z: &DMatrix<f64>,
    a: usize,
    b: usize,
) -> DMatrix<f64> {
    let d = z.ncols();
    let h = OUTER_STEP;
    let mut total: Option<DMatrix<f64>> = None;
    for l in 0..d {
        let eval = |sa: f64, sb: f64| {
            let mut zz = z.clone();
            zz[(a, l)] += sa * h;
            zz[(b, l)] += sb * h;
            f(&zz)
        };
        let term =
            (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total.expect("d >= 1")
}

/// Largest observed `|D_kl D_ij H|` over the quadrature grid, sampling
/// `samples_per_node` batches from each `R_t`. Serves as the constant `M` in
/// the remainder bound `|Rem| <= (M/2) (Σ_{i<j} |B_ij|)²`.
pub fn fourth_order_bound(
    obj: &dyn NoiseObjective,
    r: &SampleCorrelation,
    stream: RandomStream,
    samples_per_node: usize,
    opts: EffectOptions,
) -> Result<f64> {
    let (k, d) = (obj.k(), obj.d());
    if r.k() != k {
        return Err(CouplingError::mismatch(
            "correlation size differs from objective arity",
        ));
    }
    let roots = InterpolatedRoots::new(r);
    let (nodes, _) = gauss_legendre_unit(opts.quadrature_nodes);
    let mode = match opts.mode {
        MixedPartials::Hutchinson { .. } => MixedPartials::FiniteDifference,
        m => m,
    };
    let traces = |z: &DMatrix<f64>| traces_for(obj, z, mode, &mut RandomStream::new(0, 0).rng());
    let jobs: Vec<(usize, usize)> = (0..nodes.len())
        .flat_map(|t| (0..samples_per_node).map(move |s| (t, s)))
        .collect();
    let worst = chunked_fold(
        jobs.len() as u64,
        opts.chunks,
        || 0.0f64,
        |acc, idx| {
            let (t, s) = jobs[idx as usize];
            let sub = stream.substream((t * samples_per_node + s) as u64);
            let u = standard_normal_matrix(&mut sub.rng(), k, d);
            let z = roots.at(nodes[t]) * u;
            for a in 0..k {
                for b in a + 1..k {
                    let dd = mixed_trace_of(&traces, &z, a, b);
                    for i in 0..k {
                        for j in i + 1..k {
                            *acc = acc.max(dd[(i, j)].abs());
                        }
                    }
                }
            }
        },
        |a, b| *a = a.max(b),
    );
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::equicorrelated_matrix;
    use crate::generators::{make_linear, objective_pairwise_squared};
    use crate::sampler::sample_many;

    #[test]
    fn separation_examples() {
        let map = LinearFeatureMap::identity(2);
        let spec = CouplingSpec::repulsive(2, 2).unwrap();
        let batches = sample_many(&spec, RandomStream::new(1, 0), 20_000).unwrap();
        let est = pairwise_separation(&batches, &map).unwrap();
        assert!(est.z_from(8.0) < 4.0, "{est:?}");

        let spec = CouplingSpec::identical(3, 2).unwrap();
        let batches = sample_many(&spec, RandomStream::new(1, 0), 100).unwrap();
        assert_eq!(pairwise_separation(&batches, &map).unwrap().mean, 0.0);

        let d = 5;
        let spec = CouplingSpec::independent(3, d).unwrap();
        let est = pairwise_separation_mc(
            &spec,
            &LinearFeatureMap::identity(d),
            RandomStream::new(2, 0),
            20_000,
        )
        .unwrap();
        assert!(est.z_from(2.0 * d as f64) < 4.0, "{est:?}");
    }

    #[test]
    fn separation_dimension_mismatch() {
        let spec = CouplingSpec::independent(3, 4).unwrap();
        let batches = sample_many(&spec, RandomStream::new(1, 0), 2).unwrap();
        assert!(pairwise_separation(&batches, &LinearFeatureMap::identity(3)).is_err());
    }

    #[test]
    fn separation_bound_examples() {
        let j = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(
            separation_bound(2, &LinearFeatureMap::new(j).unwrap()).unwrap(),
            8.0
        );
        let big = separation_bound(1_000_000, &LinearFeatureMap::identity(1)).unwrap();
        assert!((big - 2.0).abs() < 1e-5);
        let diag =
            LinearFeatureMap::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])))
                .unwrap();
        assert_eq!(separation_bound(3, &diag).unwrap(), 15.0);
    }

    #[test]
    fn rbf_closed_form_examples() {
        let one = LinearFeatureMap::identity(1);
        let v = rbf_similarity_closed_form(2, &RbfSimilaritySpec::new(one.clone(), 1.0).unwrap())
            .unwrap();
        assert!((v - 5f64.powf(-0.5)).abs() < 1e-15);
        assert!((v - 0.44721).abs() < 1e-5);
        let wide =
            rbf_similarity_closed_form(3, &RbfSimilaritySpec::new(one, 1e9).unwrap()).unwrap();
        assert!((wide - 1.0).abs() < 1e-12);
        let zero = LinearFeatureMap::new(DMatrix::zeros(2, 3)).unwrap();
        assert_eq!(
            rbf_similarity_closed_form(4, &RbfSimilaritySpec::new(zero, 0.5).unwrap()).unwrap(),
            1.0
        );
    }

    #[test]
    fn rbf_exact_values() {
        let rbf = RbfSimilaritySpec::new(LinearFeatureMap::identity(2), 1.0).unwrap();
        let rep = CouplingSpec::repulsive(3, 2).unwrap();
        let report = rbf_similarity_mc(&rep, &rbf, RandomStream::new(3, 0), 20_000).unwrap();
        assert!((report.exact - 0.25).abs() < 1e-12);
        assert!(report.monte_carlo.z_from(report.exact) < 4.0);

        let rbf1 = RbfSimilaritySpec::new(LinearFeatureMap::identity(1), 1.0).unwrap();
        let ind = CouplingSpec::independent(2, 1).unwrap();
        assert!((rbf_similarity_exact(&ind, &rbf1).unwrap() - 3f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn rbf_weighted_sum() {
        let map = LinearFeatureMap::identity(2);
        let w = RbfSimilaritySpec::weighted(map.clone(), vec![(0.5, 0.3), (2.0, 0.7)]).unwrap();
        let a = rbf_similarity_closed_form(3, &RbfSimilaritySpec::new(map.clone(), 0.5).unwrap())
            .unwrap();
        let b = rbf_similarity_closed_form(3, &RbfSimilaritySpec::new(map.clone(), 2.0).unwrap())
            .unwrap();
        assert!((rbf_similarity_closed_form(3, &w).unwrap() - (0.3 * a + 0.7 * b)).abs() < 1e-14);
        assert!(RbfSimilaritySpec::weighted(map.clone(), vec![(1.0, -0.1)]).is_err());
        assert!(RbfSimilaritySpec::new(map, 0.0).is_err());
    }

    #[test]
    fn local_linear_examples() {
        let map = LinearFeatureMap::identity(1);
        assert!((local_linear_prediction(3, -0.5, &map).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(local_linear_prediction(3, 0.0, &map).unwrap(), 2.0);
        assert_eq!(local_linear_prediction(3, 1.0, &map).unwrap(), 0.0);
        assert!(local_linear_prediction(3, -0.6, &map).is_err());
    }

    #[test]
    fn quadratic_pairwise_gradient_and_traces() {
        let d = 3;
        let obj = QuadraticPairwise::new(3, LinearFeatureMap::identity(d)).unwrap();
        let z = standard_normal_matrix(&mut RandomStream::new(4, 0).rng(), 3, d);
        let g = obj.gradient(&z);
        for i in 0..3 {
            for l in 0..d {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[(i, l)] += 1e-5;
                zm[(i, l)] -= 1e-5;
                let fd = (obj.value(&zp) - obj.value(&zm)) / 2e-5;
                assert!((fd - g[(i, l)]).abs() < 1e-6 * g[(i, l)].abs().max(1.0));
            }
        }
        let fd = mixed_traces_fd(&obj, &z);
        let exact = obj.mixed_traces(&z).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((fd[(i, j)] - exact[(i, j)]).abs() < 1e-6);
                    assert_eq!(exact[(i, j)], -2.0 * d as f64);
                }
            }
        }
        let hutch = mixed_traces_hutchinson(&obj, &z, 4, &mut RandomStream::new(5, 0).rng());
        // Rademacher probes are exact for a block-diagonal Hessian.
        assert!((hutch[(0, 1)] - exact[(0, 1)]).abs() < 1e-6);
    }

    #[test]
    fn effect_quadratic_repulsive() {
        let d = 4;
        let obj = QuadraticPairwise::new(3, LinearFeatureMap::identity(d)).unwrap();
        let r = equicorrelated_matrix(3, -0.5).unwrap();
        let rep = coupling_effect_first_order(
            &obj,
            &r,
            RandomStream::new(6, 0),
            20_000,
            EffectOptions::default(),
        )
        .unwrap();
        let expected = 3.0 * d as f64;
        assert!((rep.first_order.mean - expected).abs() < 1e-10);
        assert!((rep.interpolation.mean - expected).abs() < 1e-10);
        assert!(rep.direct.z_from(expected) < 4.0, "{rep:?}");
        assert_eq!(rep.offset_l1, 1.5);
    }

    #[test]
    fn effect_zero_for_identity_and_single_sample_metric() {
        let obj = QuadraticPairwise::new(3, LinearFeatureMap::identity(2)).unwrap();
        let rep = coupling_effect_first_order(
            &obj,
            &SampleCorrelation::identity(3),
            RandomStream::new(7, 0),
            2_000,
            EffectOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.direct.mean, 0.0);
        assert_eq!(rep.first_order.mean, 0.0);
        assert_eq!(rep.interpolation.mean, 0.0);

        struct SumOfSquares(usize, usize);
        impl NoiseObjective for SumOfSquares {
            fn k(&self) -> usize {
                self.0
            }
            fn d(&self) -> usize {
                self.1
            }
            fn value(&self, z: &DMatrix<f64>) -> f64 {
                z.norm_squared()
            }
            fn gradient(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
                z * 2.0
            }
        }
        let r = equicorrelated_matrix(3, -0.5).unwrap();
        let rep = coupling_effect_first_order(
            &SumOfSquares(3, 2),
            &r,
            RandomStream::new(8, 0),
            5_000,
            EffectOptions::default(),
        )
        .unwrap();
        assert!(rep.first_order.mean.abs() < 1e-8);
        assert!(rep.interpolation.mean.abs() < 1e-8);
        assert!(rep.direct.mean.abs() < 4.0 * rep.direct.stderr.max(1e-12));
    }

    #[test]
    fn generated_objective_matches_quadratic() {
        let d = 3;
        let g = make_linear(DMatrix::identity(d, d), DVector::zeros(d)).unwrap();
        let o = objective_pairwise_squared(3).unwrap();
        let composed = GeneratedObjective {
            generator: &g,
            objective: &o,
        };
        let quad = QuadraticPairwise::new(3, LinearFeatureMap::identity(d)).unwrap();
        let z = standard_normal_matrix(&mut RandomStream::new(9, 0).rng(), 3, d);
        // The gallery objective averages over the 3 pairs.
        assert!((composed.value(&z) * 3.0 - quad.value(&z)).abs() < 1e-12);
        assert!(((composed.gradient(&z) * 3.0) - quad.gradient(&z)).amax() < 1e-12);
    }

    #[test]
    fn fourth_order_vanishes_for_quadratic() {
        let obj = QuadraticPairwise::new(3, LinearFeatureMap::identity(2)).unwrap();
        let r = equicorrelated_matrix(3, -0.5).unwrap();
        let m = fourth_order_bound(
            &obj,
            &r,
            RandomStream::new(10, 0),
            2,
            EffectOptions::default(),
        )
        .unwrap();
        assert!(m < 1e-8, "M = {m}");
    }

    #[test]
    fn sweep_grid() {
        assert_eq!(
            default_sweep_grid(3),
            vec![0.0, -0.125, -0.25, -0.375, -0.5]
        );
        let rows = separation_sweep(
            3,
            2,
            &LinearFeatureMap::identity(2),
            &[0.0, -0.5],
            RandomStream::new(1, 0),
            2_000,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].prediction, 6.0);
    }
}
