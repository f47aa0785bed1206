//! Seeded, reproducible sampling of coupled noise batches.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`), keyed by the 64-bit seed
//! through `SeedableRng::seed_from_u64`, with the ChaCha stream word set to
//! `stream_id`. Standard normals use the ziggurat transform of
//! `rand_distr::StandardNormal`. Draws fill base-noise matrices row by row.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    factor_correlation, kind_correlation, min_equicorrelation, CouplingKind, CouplingMatrix,
    CouplingSpec,
};
use crate::error::{CouplingError, Result};

pub const RNG_FAMILY: &str = "chacha20";
pub const RNG_VERSION: &str = "rand_chacha-0.9/seed_from_u64/set_stream";
pub const GAUSSIAN_TRANSFORM: &str = "ziggurat/rand_distr-0.5/StandardNormal";

/// A `(seed, stream_id)` pair naming an independent, replayable random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RandomStream { seed, stream_id }
    }

    /// Sub-stream `stream_id + i`.
    pub fn substream(&self, i: u64) -> Self {
        RandomStream {
            seed: self.seed,
            stream_id: self.stream_id.wrapping_add(i),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Fills an `rows x cols` matrix with standard normals in row-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> DMatrix<f64> {
    let draws: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &draws)
}

/// A realized coupled sample: row `i` of `vectors` is `z_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub vectors: DMatrix<f64>,
    pub spec: CouplingSpec,
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseBatch {
    pub fn new(vectors: DMatrix<f64>, spec: CouplingSpec, stream: RandomStream) -> Result<Self> {
        if vectors.nrows() != spec.k() || vectors.ncols() != spec.d() {
            return Err(CouplingError::mismatch(format!(
                "batch is {}x{}, spec expects {}x{}",
                vectors.nrows(),
                vectors.ncols(),
                spec.k(),
                spec.d()
            )));
        }
        Ok(NoiseBatch {
            vectors,
            spec,
            seed: stream.seed,
            stream_id: stream.stream_id,
        })
    }

    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn stream(&self) -> RandomStream {
        RandomStream::new(self.seed, self.stream_id)
    }

    /// `Σ_i z_i`.
    pub fn row_sum(&self) -> Vec<f64> {
        self.vectors.row_sum().iter().copied().collect()
    }
}

/// Anything that can produce a `k x d` noise matrix for a stream.
///
/// Validation routines consume this trait so that deliberately faulty
/// samplers can be checked against a spec.
pub trait NoiseSource: Sync {
    fn spec(&self) -> &CouplingSpec;
    fn draw(&self, stream: RandomStream) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
enum Route {
    Identical,
    Independent,
    Antithetic,
    Repulsive,
    Matrix(CouplingMatrix),
}

impl Route {
    fn for_kind(kind: &CouplingKind, k: usize) -> Result<Route> {
        Ok(match kind {
            CouplingKind::Identical => Route::Identical,
            CouplingKind::Independent => Route::Independent,
            CouplingKind::Antithetic => Route::Antithetic,
            CouplingKind::Repulsive => Route::Repulsive,
            CouplingKind::Equicorrelated { c } if *c == 0.0 => Route::Independent,
            CouplingKind::Equicorrelated { c } if *c == 1.0 => Route::Identical,
            CouplingKind::Equicorrelated { c } if *c == min_equicorrelation(k) => Route::Repulsive,
            CouplingKind::Equicorrelated { .. } => {
                let r = kind_correlation(kind, k)?;
                Route::Matrix(factor_correlation(&r, k)?)
            }
            CouplingKind::Matrix(a) => Route::Matrix(a.clone()),
            CouplingKind::Subspace(_) => {
                return Err(CouplingError::invalid("subspace kinds cannot be nested"))
            }
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, k: usize, dim: usize) -> DMatrix<f64> {
        match self {
            Route::Identical => {
                let z = standard_normal_matrix(rng, 1, dim);
                DMatrix::from_fn(k, dim, |_, j| z[(0, j)])
            }
            Route::Independent => standard_normal_matrix(rng, k, dim),
            Route::Antithetic => {
                let z = standard_normal_matrix(rng, 1, dim);
                DMatrix::from_fn(2, dim, |i, j| if i == 0 { z[(0, j)] } else { -z[(0, j)] })
            }
            Route::Repulsive => {
                let u = standard_normal_matrix(rng, k, dim);
                center_and_scale(u)
            }
            Route::Matrix(a) => {
                let u = standard_normal_matrix(rng, a.r(), dim);
                a.entries() * u
            }
        }
    }
}

/// `z_i = sqrt(k/(k-1)) (u_i - ū)`, with ū accumulated by Neumaier summation.
fn center_and_scale(mut u: DMatrix<f64>) -> DMatrix<f64> {
    let k = u.nrows();
    let kf = k as f64;
    let scale = (kf / (kf - 1.0)).sqrt();
    for mut col in u.column_iter_mut() {
        let mean = neumaier_sum(col.iter().copied()) / kf;
        for x in col.iter_mut() {
            *x = scale * (*x - mean);
        }
    }
    u
}

pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone)]
enum Plan {
    Whole(Route),
    Split {
        basis: nalgebra::DMatrix<f64>,
        inner: Route,
        outer: Route,
    },
}

/// A spec with any factorization it needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSampler {
    spec: CouplingSpec,
    plan: Plan,
}

impl PreparedSampler {
    pub fn new(spec: &CouplingSpec) -> Result<Self> {
        let k = spec.k();
        let plan = match spec.kind() {
            CouplingKind::Subspace(s) => Plan::Split {
                basis: s.basis().clone(),
                inner: Route::for_kind(&s.inner, k)?,
                outer: Route::for_kind(&s.outer, k)?,
            },
            kind => Plan::Whole(Route::for_kind(kind, k)?),
        };
        Ok(PreparedSampler {
            spec: spec.clone(),
            plan,
        })
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    pub fn sample(&self, stream: RandomStream) -> NoiseBatch {
        let vectors = self.draw_matrix(stream);
        NoiseBatch {
            vectors,
            spec: self.spec.clone(),
            seed: stream.seed,
            stream_id: stream.stream_id,
        }
    }

    fn draw_matrix(&self, stream: RandomStream) -> DMatrix<f64> {
        let mut rng = stream.rng();
        let (k, d) = (self.spec.k(), self.spec.d());
        match &self.plan {
            Plan::Whole(route) => route.draw(&mut rng, k, d),
            Plan::Split {
                basis,
                inner,
                outer,
            } => {
                // Inner coupling in V-coordinates, mapped into R^d by the basis.
                let w = inner.draw(&mut rng, k, basis.ncols());
                let on_v = &w * basis.transpose();
                // Outer coupling in R^d, projected onto the complement of V.
                let y = outer.draw(&mut rng, k, d);
                let on_perp = &y - (&y * basis) * basis.transpose();
                on_v + on_perp
            }
        }
    }

    pub fn sample_many(&self, stream: RandomStream, n: usize) -> Vec<NoiseBatch> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.sample(stream.substream(i)))
            .collect()
    }
}

impl NoiseSource for PreparedSampler {
    fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    fn draw(&self, stream: RandomStream) -> DMatrix<f64> {
        self.draw_matrix(stream)
    }
}

/// Draws one batch from `spec`.
pub fn sample(spec: &CouplingSpec, stream: RandomStream) -> Result<NoiseBatch> {
    Ok(PreparedSampler::new(spec)?.sample(stream))
}

/// Draws `n` batches from sub-streams `stream_id + i`, `i = 0..n`.
pub fn sample_many(spec: &CouplingSpec, stream: RandomStream, n: usize) -> Result<Vec<NoiseBatch>> {
    if n == 0 {
        return Err(CouplingError::invalid("sample_many needs n >= 1"));
    }
    Ok(PreparedSampler::new(spec)?.sample_many(stream, n))
}
