//! Monte Carlo checks that a sampler honors its coupling's moment contract.
//!
//! All thresholds are multiples of exact standard errors, so they stay valid
//! across `n` and `d`:
//!
//! | check                          | tolerance            |
//! |--------------------------------|----------------------|
//! | per-coordinate mean            | `4 / sqrt(n)`        |
//! | per-coordinate variance        | `5 sqrt(2 / n)`      |
//! | per-coordinate excess kurtosis | `10 sqrt(24 / n)`    |
//! | pair correlation `⟨z_i,z_j⟩/d` | `5 / sqrt(n d)`      |
//! | cross-covariance off-diagonal  | `5 / sqrt(n)`        |

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coupling::{
    correlation_of, min_equicorrelation, CorrelationStructure, CouplingKind, CouplingSpec,
};
use crate::error::{CouplingError, Result};
use crate::generators::GeneratorOracle;
use crate::sampler::{NoiseSource, PreparedSampler, RandomStream};
use crate::stats::{chunked_fold, Estimate, RunningStats, DEFAULT_CHUNKS};

pub const MEAN_Z: f64 = 4.0;
pub const VARIANCE_Z: f64 = 5.0;
pub const KURTOSIS_Z: f64 = 10.0;
pub const CORRELATION_Z: f64 = 5.0;
pub const MINIMAX_Z: f64 = 5.0;
pub const INVARIANCE_Z: f64 = 6.0;

/// Smallest replication count the validators accept.
pub const MIN_REPLICATIONS: usize = 1_000;

/// One observed quantity compared against its expected value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Statistic {
    pub name: String,
    pub index: Vec<usize>,
    pub value: f64,
    pub expected: f64,
    /// Allowed `|value - expected|`; `None` for informational entries.
    pub tolerance: Option<f64>,
    pub pass: bool,
}

impl Statistic {
    fn checked(name: &str, index: Vec<usize>, value: f64, expected: f64, tolerance: f64) -> Self {
        let pass = (value - expected).abs() <= tolerance;
        Statistic {
            name: name.into(),
            index,
            value,
            expected,
            tolerance: Some(tolerance),
            pass,
        }
    }

    fn info(name: &str, index: Vec<usize>, value: f64) -> Self {
        Statistic {
            name: name.into(),
            index,
            value,
            expected: f64::NAN,
            tolerance: None,
            pass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold {
    pub name: String,
    pub value: f64,
}

/// Machine-checkable result of a validation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub check: String,
    pub spec: CouplingSpec,
    pub n: usize,
    pub statistics: Vec<Statistic>,
    pub thresholds: Vec<Threshold>,
    pub pass: bool,
}

impl Report {
    pub fn failures(&self) -> impl Iterator<Item = &Statistic> {
        self.statistics.iter().filter(|s| !s.pass)
    }

    pub fn find(&self, name: &str, index: &[usize]) -> Option<&Statistic> {
        self.statistics
            .iter()
            .find(|s| s.name == name && s.index == index)
    }
}

pub type MomentReport = Report;
pub type CovarianceReport = Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationOptions {
    pub chunks: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            chunks: DEFAULT_CHUNKS,
        }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < MIN_REPLICATIONS {
        return Err(CouplingError::invalid(format!(
            "validation needs n >= {MIN_REPLICATIONS}, got {n}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Marginals

struct MarginalAcc {
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    s4: DMatrix<f64>,
}

impl MarginalAcc {
    fn new(k: usize, d: usize) -> Self {
        MarginalAcc {
            s1: DMatrix::zeros(k, d),
            s2: DMatrix::zeros(k, d),
            s4: DMatrix::zeros(k, d),
        }
    }

    fn add(&mut self, z: &DMatrix<f64>) {
        for ((x, a), (b, c)) in z
            .iter()
            .zip(self.s1.iter_mut())
            .zip(self.s2.iter_mut().zip(self.s4.iter_mut()))
        {
            let x2 = x * x;
            *a += x;
            *b += x2;
            *c += x2 * x2;
        }
    }

    fn merge(&mut self, other: MarginalAcc) {
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.s4 += other.s4;
    }
}

/// Checks that every coordinate of every `z_i` looks standard normal.
pub fn validate_marginals(
    spec: &CouplingSpec,
    stream: RandomStream,
    n: usize,
) -> Result<MomentReport> {
    let sampler = PreparedSampler::new(spec)?;
    validate_marginals_of(&sampler, stream, n, ValidationOptions::default())
}

/// [`validate_marginals`] for an arbitrary noise source.
pub fn validate_marginals_of(
    source: &dyn NoiseSource,
    stream: RandomStream,
    n: usize,
    opts: ValidationOptions,
) -> Result<MomentReport> {
    check_n(n)?;
    let spec = source.spec().clone();
    let (k, d) = (spec.k(), spec.d());
    let acc = chunked_fold(
        n as u64,
        opts.chunks,
        || MarginalAcc::new(k, d),
        |acc, i| acc.add(&source.draw(stream.substream(i))),
        |a, b| a.merge(b),
    );

    let nf = n as f64;
    let mean_tol = MEAN_Z / nf.sqrt();
    let var_tol = VARIANCE_Z * (2.0 / nf).sqrt();
    let kurt_tol = KURTOSIS_Z * (24.0 / nf).sqrt();

    let mut statistics = Vec::new();
    for i in 0..k {
        let mut mean_norm_sq = 0.0;
        let (mut worst_mean, mut worst_var, mut worst_kurt) = (0.0f64, 1.0f64, 0.0f64);
        for l in 0..d {
            let m1 = acc.s1[(i, l)] / nf;
            let m2 = acc.s2[(i, l)] / nf;
            let m4 = acc.s4[(i, l)] / nf;
            let kurt = m4 / (m2 * m2) - 3.0;
            mean_norm_sq += m1 * m1;
            if m1.abs() > worst_mean.abs() {
                worst_mean = m1;
            }
            if (m2 - 1.0).abs() > (worst_var - 1.0).abs() || m2.is_nan() {
                worst_var = m2;
            }
            if kurt.abs() > worst_kurt.abs() || kurt.is_nan() {
                worst_kurt = kurt;
            }
        }
        statistics.push(Statistic::info(
            "mean_vector_norm",
            vec![i],
            mean_norm_sq.sqrt(),
        ));
        statistics.push(Statistic::checked(
            "worst_coordinate_mean",
            vec![i],
            worst_mean,
            0.0,
            mean_tol,
        ));
        statistics.push(Statistic::checked(
            "worst_coordinate_variance",
            vec![i],
            worst_var,
            1.0,
            var_tol,
        ));
        statistics.push(Statistic::checked(
            "worst_excess_kurtosis",
            vec![i],
            worst_kurt,
            0.0,
            kurt_tol,
        ));
    }
    let pass = statistics.iter().all(|s| s.pass);
    Ok(Report {
        check: "marginals".into(),
        spec,
        n,
        statistics,
        thresholds: vec![
            Threshold {
                name: "mean".into(),
                value: mean_tol,
            },
            Threshold {
                name: "variance".into(),
                value: var_tol,
            },
            Threshold {
                name: "excess_kurtosis".into(),
                value: kurt_tol,
            },
        ],
        pass,
    })
}

// ---------------------------------------------------------------------------
// Cross covariance

struct PairAcc {
    k: usize,
    /// Per-batch `⟨z_i, z_j⟩ / d`, upper triangle in row-major order.
    pairs: Vec<RunningStats>,
    /// Same on the subspace and its complement, when split.
    on_v: Vec<RunningStats>,
    on_perp: Vec<RunningStats>,
    /// `Σ z_0a z_1b` over batches.
    cross: DMatrix<f64>,
}

fn pair_index(k: usize, i: usize, j: usize) -> usize {
    i * k - i * (i + 1) / 2 + (j - i - 1)
}

impl PairAcc {
    fn new(k: usize, d: usize, split: bool) -> Self {
        let np = k * (k - 1) / 2;
        PairAcc {
            k,
            pairs: vec![RunningStats::new(); np],
            on_v: if split {
                vec![RunningStats::new(); np]
            } else {
                Vec::new()
            },
            on_perp: if split {
                vec![RunningStats::new(); np]
            } else {
                Vec::new()
            },
            cross: if k >= 2 {
                DMatrix::zeros(d, d)
            } else {
                DMatrix::zeros(0, 0)
            },
        }
    }

    fn add(&mut self, z: &DMatrix<f64>, basis: Option<&DMatrix<f64>>) {
        let k = self.k;
        let d = z.ncols() as f64;
        let gram = z * z.transpose();
        let projected = basis.map(|q| {
            let w = z * q;
            (&w * w.transpose(), q.ncols() as f64)
        });
        for i in 0..k {
            for j in i + 1..k {
                let p = pair_index(k, i, j);
                self.pairs[p].push(gram[(i, j)] / d);
                if let Some((gv, s)) = &projected {
                    self.on_v[p].push(gv[(i, j)] / s);
                    if d > *s {
                        self.on_perp[p].push((gram[(i, j)] - gv[(i, j)]) / (d - s));
                    }
                }
            }
        }
        if k >= 2 {
            let r0 = z.row(0);
            let r1 = z.row(1);
            self.cross.ger(1.0, &r0.transpose(), &r1.transpose(), 1.0);
        }
    }

    fn merge(&mut self, other: PairAcc) {
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            a.merge(b);
        }
        for (a, b) in self.on_v.iter_mut().zip(&other.on_v) {
            a.merge(b);
        }
        for (a, b) in self.on_perp.iter_mut().zip(&other.on_perp) {
            a.merge(b);
        }
        self.cross += other.cross;
    }
}

fn run_pairs(source: &dyn NoiseSource, stream: RandomStream, n: usize, chunks: usize) -> PairAcc {
    let spec = source.spec();
    let (k, d) = (spec.k(), spec.d());
    let basis = match spec.kind() {
        CouplingKind::Subspace(s) => Some(s.basis().clone()),
        _ => None,
    };
    chunked_fold(
        n as u64,
        chunks,
        || PairAcc::new(k, d, basis.is_some()),
        |acc, i| acc.add(&source.draw(stream.substream(i)), basis.as_ref()),
        |a, b| a.merge(b),
    )
}

/// Expected `E[z_0 z_1ᵀ]` for the structure.
fn expected_cross(structure: &CorrelationStructure, spec: &CouplingSpec) -> DMatrix<f64> {
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
            pv * on_subspace.get(0, 1) + perp * on_complement.get(0, 1)
        }
        _ => DMatrix::identity(d, d) * structure.full_vector()[(0, 1)],
    }
}

/// Compares the estimated `(1/d) E⟨z_i, z_j⟩` against [`correlation_of`].
pub fn validate_cross_covariance(
    spec: &CouplingSpec,
    stream: RandomStream,
    n: usize,
) -> Result<CovarianceReport> {
    let sampler = PreparedSampler::new(spec)?;
    validate_cross_covariance_of(&sampler, stream, n, ValidationOptions::default())
}

pub fn validate_cross_covariance_of(
    source: &dyn NoiseSource,
    stream: RandomStream,
    n: usize,
    opts: ValidationOptions,
) -> Result<CovarianceReport> {
    check_n(n)?;
    let spec = source.spec().clone();
    let structure = correlation_of(&spec)?;
    let expected = structure.full_vector();
    let (k, d) = (spec.k(), spec.d());
    let acc = run_pairs(source, stream, n, opts.chunks);
    let nf = n as f64;
    let pair_tol = CORRELATION_Z / (nf * d as f64).sqrt();

    let mut statistics = Vec::new();
    let mut thresholds = vec![Threshold {
        name: "pair_correlation".into(),
        value: pair_tol,
    }];
    for i in 0..k {
        for j in i + 1..k {
            let p = pair_index(k, i, j);
            statistics.push(Statistic::checked(
                "pair_correlation",
                vec![i, j],
                acc.pairs[p].mean(),
                expected[(i, j)],
                pair_tol,
            ));
        }
    }

    if let CorrelationStructure::Subspace {
        on_subspace,
        on_complement,
        subspace_dim,
        ..
    } = &structure
    {
        let s = *subspace_dim as f64;
        let v_tol = CORRELATION_Z / (nf * s).sqrt();
        thresholds.push(Threshold {
            name: "pair_correlation_on_subspace".into(),
            value: v_tol,
        });
        let perp_tol = if d > *subspace_dim {
            CORRELATION_Z / (nf * (d as f64 - s)).sqrt()
        } else {
            0.0
        };
        if d > *subspace_dim {
            thresholds.push(Threshold {
                name: "pair_correlation_on_complement".into(),
                value: perp_tol,
            });
        }
        for i in 0..k {
            for j in i + 1..k {
                let p = pair_index(k, i, j);
                statistics.push(Statistic::checked(
                    "pair_correlation_on_subspace",
                    vec![i, j],
                    acc.on_v[p].mean(),
                    on_subspace.get(i, j),
                    v_tol,
                ));
                if d > *subspace_dim {
                    statistics.push(Statistic::checked(
                        "pair_correlation_on_complement",
                        vec![i, j],
                        acc.on_perp[p].mean(),
                        on_complement.get(i, j),
                        perp_tol,
                    ));
                }
            }
        }
    }

    if k >= 2 {
        let cross = &acc.cross / nf;
        let exp_cross = expected_cross(&structure, &spec);
        let mut worst = 0.0f64;
        let mut worst_expected = 0.0;
        let mut max_expected_off = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                max_expected_off = max_expected_off.max(exp_cross[(a, b)].abs());
                let dev = cross[(a, b)] - exp_cross[(a, b)];
                if dev.abs() > (worst - worst_expected).abs() || dev.is_nan() {
                    worst = cross[(a, b)];
                    worst_expected = exp_cross[(a, b)];
                }
            }
        }
        // Var(z_0a z_1b) = 1 + E[z_0a z_1b]^2 for a != b.
        let cross_tol =
            CORRELATION_Z * (1.0 + max_expected_off * max_expected_off).sqrt() / nf.sqrt();
        thresholds.push(Threshold {
            name: "cross_covariance_off_diagonal".into(),
            value: cross_tol,
        });
        if d >= 2 {
            statistics.push(Statistic::checked(
                "cross_covariance_off_diagonal",
                vec![0, 1],
                worst,
                worst_expected,
                cross_tol,
            ));
        }
    }

    let pass = statistics.iter().all(|s| s.pass);
    Ok(Report {
        check: "cross_covariance".into(),
        spec,
        n,
        statistics,
        thresholds,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Minimax

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaxEntry {
    pub spec: CouplingSpec,
    pub worst_pair: (usize, usize),
    pub estimate: Estimate,
    /// Allowed shortfall below the bound: `max(5/sqrt(n d), 5 stderr)`.
    pub tolerance: f64,
    pub respects_bound: bool,
    pub attains_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaxReport {
    pub k: usize,
    pub n: usize,
    pub bound: f64,
    pub entries: Vec<MinimaxEntry>,
    /// Indices of candidates whose worst pair matches the bound within tolerance.
    pub attaining: Vec<usize>,
    pub pass: bool,
}

/// Estimates each candidate's worst-pair correlation and checks none beats `-1/(k-1)`.
pub fn check_minimax(
    k: usize,
    candidates: &[CouplingSpec],
    stream: RandomStream,
    n: usize,
) -> Result<MinimaxReport> {
    check_n(n)?;
    if k < 2 {
        return Err(CouplingError::invalid("minimax check needs k >= 2"));
    }
    if let Some(bad) = candidates.iter().find(|s| s.k() != k) {
        return Err(CouplingError::mismatch(format!(
            "candidate has k = {}, expected {k}",
            bad.k()
        )));
    }
    let bound = min_equicorrelation(k);
    let mut entries = Vec::with_capacity(candidates.len());
    for (c, spec) in candidates.iter().enumerate() {
        let sampler = PreparedSampler::new(spec)?;
        let sub = stream.substream((c as u64) * n as u64);
        let acc = run_pairs(&sampler, sub, n, DEFAULT_CHUNKS);
        let mut worst: Option<((usize, usize), Estimate)> = None;
        for i in 0..k {
            for j in i + 1..k {
                let e = acc.pairs[pair_index(k, i, j)].estimate();
                if worst.is_none_or(|(_, w)| e.mean > w.mean) {
                    worst = Some(((i, j), e));
                }
            }
        }
        let (pair, estimate) = worst.expect("k >= 2 has at least one pair");
        let tolerance =
            (MINIMAX_Z / ((n * spec.d()) as f64).sqrt()).max(MINIMAX_Z * estimate.stderr);
        entries.push(MinimaxEntry {
            spec: spec.clone(),
            worst_pair: pair,
            estimate,
            tolerance,
            respects_bound: estimate.mean >= bound - tolerance,
            attains_bound: (estimate.mean - bound).abs() <= tolerance,
        });
    }
    let attaining = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.attains_bound)
        .map(|(i, _)| i)
        .collect();
    let pass = entries.iter().all(|e| e.respects_bound);
    Ok(MinimaxReport {
        k,
        n,
        bound,
        entries,
        attaining,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Marginal invariance

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceEntry {
    pub spec: CouplingSpec,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub n: usize,
    pub entries: Vec<InvarianceEntry>,
    /// Largest pairwise gap in pooled standard errors.
    pub max_z: f64,
    pub threshold_z: f64,
    pub pass: bool,
}

/// Estimates `E[(1/k) Σ_i q(G(z_i))]` per spec and checks they agree.
pub fn check_marginal_invariance(
    specs: &[CouplingSpec],
    generator: &dyn GeneratorOracle,
    score: &(dyn Fn(&DVector<f64>) -> f64 + Sync),
    stream: RandomStream,
    n: usize,
) -> Result<InvarianceReport> {
    if n < 2 {
        return Err(CouplingError::invalid("invariance check needs n >= 2"));
    }
    let Some(first) = specs.first() else {
        return Err(CouplingError::invalid(
            "invariance check needs at least one spec",
        ));
    };
    if specs
        .iter()
        .any(|s| s.k() != first.k() || s.d() != first.d())
    {
        return Err(CouplingError::mismatch("all specs must share k and d"));
    }
    if generator.input_dim() != first.d() {
        return Err(CouplingError::mismatch(
            "generator input dimension differs from d",
        ));
    }
    let mut entries = Vec::with_capacity(specs.len());
    for (c, spec) in specs.iter().enumerate() {
        let sampler = PreparedSampler::new(spec)?;
        let sub = stream.substream((c as u64) * n as u64);
        let stats = chunked_fold(
            n as u64,
            DEFAULT_CHUNKS,
            RunningStats::new,
            |acc, i| {
                let z = sampler.draw(sub.substream(i));
                let total: f64 = z
                    .row_iter()
                    .map(|row| score(&generator.evaluate(&row.transpose())))
                    .sum();
                acc.push(total / z.nrows() as f64);
            },
            |a, b| a.merge(&b),
        );
        entries.push(InvarianceEntry {
            spec: spec.clone(),
            estimate: stats.estimate(),
        });
    }
    let mut max_z = 0.0f64;
    for a in 0..entries.len() {
        for b in a + 1..entries.len() {
            let (ea, eb) = (&entries[a].estimate, &entries[b].estimate);
            let pooled = ea.stderr.hypot(eb.stderr);
            let gap = (ea.mean - eb.mean).abs();
            let z = if pooled > 0.0 {
                gap / pooled
            } else if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_z = max_z.max(z);
        }
    }
    Ok(InvarianceReport {
        n,
        entries,
        max_z,
        threshold_z: INVARIANCE_Z,
        pass: max_z <= INVARIANCE_Z,
    })
}
