//! Amortized optimization of coupling matrices and masked refinement of
//! realized noises.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::{normalize_rows, CouplingMatrix};
use crate::error::{CouplingError, Result};
use crate::generators::{
    GalleryObjective, GeneratorOracle, GeneratorSpec, Goal, MaskedFidelity, ObjectiveSpec,
};
use crate::sampler::{standard_normal_matrix, NoiseBatch, RandomStream};
use crate::stats::{chunked_fold, DEFAULT_CHUNKS};

/// Stream id used for the random initial matrix, kept apart from the
/// per-step basis-noise streams.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `A = I` (independent coupling). Requires `r >= k`.
    #[default]
    IdentityRows,
    /// Gaussian rows, normalized.
    RandomRows,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_STEP_SIZE: f64 = 0.05;
pub const DEFAULT_MC_BATCH: usize = 64;

#[derive(Clone)]
pub struct AmortizedConfig {
    pub k: usize,
    pub r: usize,
    pub objective: Arc<dyn GalleryObjective>,
    pub generator: Arc<dyn GeneratorOracle>,
    pub maximize: bool,
    pub steps: usize,
    pub step_size: f64,
    pub mc_batch: usize,
    pub seed: u64,
    pub init: Init,
    /// Scale the step by `(1 + cos(pi t / steps)) / 2`.
    pub cosine_decay: bool,
    /// Number of consecutive steps sharing the same basis noises.
    pub crn_steps: usize,
}

impl std::fmt::Debug for AmortizedConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AmortizedConfig")
            .field("k", &self.k)
            .field("r", &self.r)
            .field("objective", &self.objective.name())
            .field("maximize", &self.maximize)
            .field("steps", &self.steps)
            .field("step_size", &self.step_size)
            .field("mc_batch", &self.mc_batch)
            .field("seed", &self.seed)
            .field("init", &self.init)
            .field("cosine_decay", &self.cosine_decay)
            .field("crn_steps", &self.crn_steps)
            .finish()
    }
}

impl AmortizedConfig {
    /// Defaults: square `A`, identity start, direction from the objective's goal.
    pub fn new(objective: Arc<dyn GalleryObjective>, generator: Arc<dyn GeneratorOracle>) -> Self {
        let k = objective.arity();
        AmortizedConfig {
            k,
            r: k,
            maximize: objective.goal() == Goal::Maximize,
            objective,
            generator,
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_STEP_SIZE,
            mc_batch: DEFAULT_MC_BATCH,
            seed: 0,
            init: Init::IdentityRows,
            cosine_decay: true,
            crn_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.r < 1 {
            return Err(CouplingError::invalid("k and r must be positive"));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(CouplingError::invalid("step_size must be positive"));
        }
        if self.mc_batch < 1 || self.crn_steps < 1 {
            return Err(CouplingError::invalid(
                "mc_batch and crn_steps must be at least 1",
            ));
        }
        if self.objective.arity() != self.k {
            return Err(CouplingError::mismatch(format!(
                "objective expects {} samples, k = {}",
                self.objective.arity(),
                self.k
            )));
        }
        if self.init == Init::IdentityRows && self.r < self.k {
            return Err(CouplingError::invalid(
                "identity initialization needs r >= k",
            ));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.generator.input_dim()
    }

    fn sign(&self) -> f64 {
        if self.maximize {
            1.0
        } else {
            -1.0
        }
    }

    /// The starting matrix.
    pub fn initial_matrix(&self) -> Result<DMatrix<f64>> {
        let mut a = match self.init {
            Init::IdentityRows => {
                DMatrix::from_fn(self.k, self.r, |i, j| if i == j { 1.0 } else { 0.0 })
            }
            Init::RandomRows => standard_normal_matrix(
                &mut RandomStream::new(self.seed, INIT_STREAM).rng(),
                self.k,
                self.r,
            ),
        };
        normalize_rows(&mut a)?;
        Ok(a)
    }

    fn block_stream(&self, step: usize) -> RandomStream {
        let block = (step / self.crn_steps) as u64;
        RandomStream::new(self.seed, block * self.mc_batch as u64)
    }
}

/// Monte Carlo objective and `∂/∂A` at `a`, averaged over `mc_batch` galleries
/// drawn from `stream` (substreams `0..mc_batch`).
pub fn objective_and_gradient(
    cfg: &AmortizedConfig,
    a: &DMatrix<f64>,
    stream: RandomStream,
) -> (f64, DMatrix<f64>) {
    let (k, r, d) = (cfg.k, cfg.r, cfg.d());
    let gen = cfg.generator.as_ref();
    let obj = cfg.objective.as_ref();
    let (value, grad) = chunked_fold(
        cfg.mc_batch as u64,
        DEFAULT_CHUNKS.min(cfg.mc_batch),
        || (0.0, DMatrix::zeros(k, r)),
        |acc, b| {
            let u = standard_normal_matrix(&mut stream.substream(b).rng(), r, d);
            let z = a * &u;
            let x: Vec<DVector<f64>> = z
                .row_iter()
                .map(|row| gen.evaluate(&row.transpose()))
                .collect();
            acc.0 += obj.evaluate(&x);
            let gx = obj.gradient(&x);
            let mut gz = DMatrix::zeros(k, d);
            for (i, gi) in gx.iter().enumerate() {
                gz.row_mut(i)
                    .copy_from(&gen.vjp(&z.row(i).transpose(), gi).transpose());
            }
            acc.1 += gz * u.transpose();
        },
        |acc, other| {
            acc.0 += other.0;
            acc.1 += other.1;
        },
    );
    let m = cfg.mc_batch as f64;
    (value / m, grad / m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub objective: f64,
    pub matrix: CouplingMatrix,
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    step: usize,
    objective: f64,
    k: usize,
    r: usize,
    a: &'a [f64],
}

/// Writes one JSON object per line: step, objective, and `A` flattened row-major.
pub fn write_trajectory_jsonl<W: Write>(
    mut w: W,
    trajectory: &[TrajectoryPoint],
) -> std::io::Result<()> {
    for p in trajectory {
        let m = p.matrix.entries();
        let flat: Vec<f64> = m
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .collect();
        let rec = TrajectoryRecord {
            step: p.step,
            objective: p.objective,
            k: m.nrows(),
            r: m.ncols(),
            a: &flat,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Projected stochastic gradient on the row sphere: step, then renormalize rows.
/// Returns `steps + 1` points; point `t` holds `A_t` and the estimate used at step `t`.
pub fn optimize_coupling(cfg: &AmortizedConfig) -> Result<Vec<TrajectoryPoint>> {
    cfg.validate()?;
    let mut a = cfg.initial_matrix()?;
    let mut out = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (value, grad) = objective_and_gradient(cfg, &a, cfg.block_stream(step));
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CouplingError::Divergence { step });
        }
        out.push(TrajectoryPoint {
            step,
            objective: value,
            matrix: CouplingMatrix::new(a.clone())?,
        });
        if step == cfg.steps {
            break;
        }
        let mut eta = cfg.step_size;
        if cfg.cosine_decay {
            eta *= 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        }
        a += grad * (cfg.sign() * eta);
        normalize_rows(&mut a).map_err(|_| CouplingError::Divergence { step })?;
    }
    Ok(out)
}

/// Mean of the last `window` objective estimates.
pub fn smoothed_tail(trajectory: &[TrajectoryPoint], window: usize) -> f64 {
    let w = window.max(1).min(trajectory.len());
    trajectory[trajectory.len() - w..]
        .iter()
        .map(|p| p.objective)
        .sum::<f64>()
        / w as f64
}

/// File form of [`AmortizedConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmortizedConfigFile {
    pub objective: ObjectiveSpec,
    pub generator: GeneratorSpec,
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default)]
    pub maximize: Option<bool>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub mc_batch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub cosine_decay: Option<bool>,
    #[serde(default)]
    pub crn_steps: Option<usize>,
}

impl AmortizedConfigFile {
    pub fn build(&self) -> Result<AmortizedConfig> {
        let mut cfg = AmortizedConfig::new(self.objective.build()?, self.generator.build()?);
        cfg.r = self.r.unwrap_or(cfg.k);
        if let Some(m) = self.maximize {
            cfg.maximize = m;
        }
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.step_size = self.step_size.unwrap_or(cfg.step_size);
        cfg.mc_batch = self.mc_batch.unwrap_or(cfg.mc_batch);
        cfg.seed = self.seed;
        cfg.init = self.init;
        cfg.cosine_decay = self.cosine_decay.unwrap_or(cfg.cosine_decay);
        cfg.crn_steps = self.crn_steps.unwrap_or(cfg.crn_steps);
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Refinement of realized noises

/// What [`refine_noise`] descends on.
#[derive(Clone)]
pub enum RefineLoss {
    /// `Σ_i ‖m ⊙ (G(z_i) - x*)‖²`, minimized.
    Fidelity {
        target: DVector<f64>,
        region: Vec<bool>,
    },
    /// Any gallery objective, moved in the direction of its goal.
    Objective(Arc<dyn GalleryObjective>),
}

pub const DEFAULT_REFINE_STEPS: usize = 200;
pub const DEFAULT_REFINE_STEP_SIZE: f64 = 0.25;

#[derive(Clone)]
pub struct RefineConfig {
    /// Coordinates that may change. The rest are frozen.
    pub optimized: Vec<usize>,
    pub loss: RefineLoss,
    pub steps: usize,
    pub step_size: f64,
    pub generator: Arc<dyn GeneratorOracle>,
}

impl RefineConfig {
    pub fn fidelity(
        optimized: Vec<usize>,
        target: DVector<f64>,
        region: Vec<bool>,
        generator: Arc<dyn GeneratorOracle>,
    ) -> Self {
        RefineConfig {
            optimized,
            loss: RefineLoss::Fidelity { target, region },
            steps: DEFAULT_REFINE_STEPS,
            step_size: DEFAULT_REFINE_STEP_SIZE,
            generator,
        }
    }

    /// Unconstrained direct noise optimization: every coordinate is free.
    pub fn direct(
        objective: Arc<dyn GalleryObjective>,
        generator: Arc<dyn GeneratorOracle>,
    ) -> Self {
        let d = generator.input_dim();
        RefineConfig {
            optimized: (0..d).collect(),
            loss: RefineLoss::Objective(objective),
            steps: DEFAULT_REFINE_STEPS,
            step_size: DEFAULT_REFINE_STEP_SIZE,
            generator,
        }
    }

    fn objective_for(&self, k: usize) -> Result<(Arc<dyn GalleryObjective>, f64)> {
        let obj: Arc<dyn GalleryObjective> = match &self.loss {
            RefineLoss::Fidelity { target, region } => {
                if target.len() != self.generator.output_dim() {
                    return Err(CouplingError::mismatch(
                        "target length differs from generator output",
                    ));
                }
                Arc::new(MaskedFidelity::new(k, target.clone(), region.clone())?)
            }
            RefineLoss::Objective(o) => o.clone(),
        };
        if obj.arity() != k {
            return Err(CouplingError::mismatch(format!(
                "objective expects {} samples, batch has {k}",
                obj.arity()
            )));
        }
        Ok((obj.clone(), obj.goal().sign()))
    }
}

/// Gradient steps on the refinement loss that touch only the optimized coordinates.
pub fn refine_noise(initial: &NoiseBatch, cfg: &RefineConfig) -> Result<NoiseBatch> {
    refine_noise_with(initial, cfg, |_, _| {})
}

/// As [`refine_noise`], calling `observer(step, z)` after every step.
pub fn refine_noise_with<F: FnMut(usize, &DMatrix<f64>)>(
    initial: &NoiseBatch,
    cfg: &RefineConfig,
    mut observer: F,
) -> Result<NoiseBatch> {
    let (k, d) = (initial.k(), initial.d());
    if cfg.generator.input_dim() != d {
        return Err(CouplingError::mismatch(format!(
            "generator expects d = {}, batch has d = {d}",
            cfg.generator.input_dim()
        )));
    }
    if cfg.optimized.iter().any(|&l| l >= d) {
        return Err(CouplingError::mismatch(
            "optimized coordinate index out of range",
        ));
    }
    if !cfg.step_size.is_finite() || cfg.step_size <= 0.0 {
        return Err(CouplingError::invalid("step_size must be positive"));
    }
    let mut free = cfg.optimized.clone();
    free.sort_unstable();
    free.dedup();
    let mut z = initial.vectors.clone();
    if free.is_empty() {
        return Ok(initial.clone());
    }
    let (obj, sign) = cfg.objective_for(k)?;
    let gen = cfg.generator.as_ref();
    for step in 0..cfg.steps {
        let x: Vec<DVector<f64>> = z.row_iter().map(|r| gen.evaluate(&r.transpose())).collect();
        let value = obj.evaluate(&x);
        let gx = obj.gradient(&x);
        if !value.is_finite() {
            return Err(CouplingError::Divergence { step });
        }
        for (i, gi) in gx.iter().enumerate() {
            let gz = gen.vjp(&z.row(i).transpose(), gi);
            for &l in &free {
                z[(i, l)] += sign * cfg.step_size * gz[l];
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CouplingError::Divergence { step });
        }
        observer(step, &z);
    }
    NoiseBatch::new(z, initial.spec.clone(), initial.stream())
}

/// Largest per-sample masked residual `‖m ⊙ (G(z_i) - x*)‖`.
pub fn masked_residual(
    batch: &NoiseBatch,
    generator: &dyn GeneratorOracle,
    target: &DVector<f64>,
    region: &[bool],
) -> f64 {
    batch
        .vectors
        .row_iter()
        .map(|r| {
            let x = generator.evaluate(&r.transpose());
            (0..x.len())
                .filter(|&l| region[l])
                .map(|l| (x[l] - target[l]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// File form of [`RefineConfig`] for the command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfigFile {
    pub generator: GeneratorSpec,
    pub optimized: Vec<usize>,
    pub target: Vec<f64>,
    /// Output coordinates where fidelity is enforced.
    pub region: Vec<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
}

impl RefineConfigFile {
    pub fn build(&self) -> Result<RefineConfig> {
        let generator = self.generator.build()?;
        let m = generator.output_dim();
        if self.target.len() != m {
            return Err(CouplingError::mismatch(
                "target length differs from generator output",
            ));
        }
        if self.region.iter().any(|&l| l >= m) {
            return Err(CouplingError::mismatch("region index out of range"));
        }
        let mut region = vec![false; m];
        for &l in &self.region {
            region[l] = true;
        }
        let mut cfg = RefineConfig::fidelity(
            self.optimized.clone(),
            DVector::from_vec(self.target.clone()),
            region,
            generator,
        );
        cfg.steps = self.steps.unwrap_or(cfg.steps);
        cfg.step_size = self.step_size.unwrap_or(cfg.step_size);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingSpec;
    use crate::generators::{
        make_brightness_surrogate, make_linear, make_random_feature, objective_brightness_cluster,
        objective_pairwise_l2, objective_rbf,
    };
    use crate::sampler::sample;

    fn off_diagonals(a: &CouplingMatrix) -> Vec<f64> {
        let g = a.gram();
        let k = g.nrows();
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| g[(i, j)])
            .collect()
    }

    #[test]
    fn zero_steps_returns_initial() {
        let mut cfg = AmortizedConfig::new(
            Arc::new(objective_pairwise_l2(3).unwrap()),
            Arc::new(make_linear(DMatrix::identity(4, 4), DVector::zeros(4)).unwrap()),
        );
        cfg.steps = 0;
        let t = optimize_coupling(&cfg).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].matrix.entries(), &DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let gen = make_random_feature(3, 5, 4, 16).unwrap();
        let mut cfg =
            AmortizedConfig::new(Arc::new(objective_pairwise_l2(3).unwrap()), Arc::new(gen));
        cfg.mc_batch = 8;
        cfg.init = Init::RandomRows;
        let a = cfg.initial_matrix().unwrap();
        let stream = RandomStream::new(11, 0);
        let (_, g) = objective_and_gradient(&cfg, &a, stream);
        for (i, j) in [(0, 0), (0, 2), (1, 1), (2, 0), (2, 1)] {
            let h = 1e-6;
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[(i, j)] += h;
            am[(i, j)] -= h;
            let fd = (objective_and_gradient(&cfg, &ap, stream).0
                - objective_and_gradient(&cfg, &am, stream).0)
                / (2.0 * h);
            let rel = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1e-8);
            assert!(rel <= 1e-3, "entry ({i},{j}): fd {fd} vs {}", g[(i, j)]);
        }
    }

    #[test]
    fn rows_stay_unit_and_run_is_deterministic() {
        let mut cfg = AmortizedConfig::new(
            Arc::new(objective_pairwise_l2(3).unwrap()),
            Arc::new(make_linear(DMatrix::identity(4, 4), DVector::zeros(4)).unwrap()),
        );
        cfg.steps = 20;
        cfg.init = Init::RandomRows;
        cfg.r = 5;
        let t = optimize_coupling(&cfg).unwrap();
        for p in &t {
            for row in p.matrix.entries().row_iter() {
                assert!((row.norm() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(t, optimize_coupling(&cfg).unwrap());
    }

    #[test]
    fn rbf_k2_goes_antithetic() {
        let mut cfg = AmortizedConfig::new(
            Arc::new(objective_rbf(2, 2.0).unwrap()),
            Arc::new(make_linear(DMatrix::identity(4, 4), DVector::zeros(4)).unwrap()),
        );
        cfg.step_size = 0.5;
        cfg.steps = 300;
        let t = optimize_coupling(&cfg).unwrap();
        let rho = off_diagonals(&t.last().unwrap().matrix)[0];
        assert!(rho < -0.95, "rho = {rho}");
    }

    #[test]
    fn brightness_learns_block_signs() {
        let mut cfg = AmortizedConfig::new(
            Arc::new(objective_brightness_cluster(4, 0.35).unwrap()),
            Arc::new(make_brightness_surrogate(1, 8).unwrap()),
        );
        cfg.seed = 1;
        let t = optimize_coupling(&cfg).unwrap();
        let g = t.last().unwrap().matrix.gram();
        assert!(g[(0, 1)] > 0.0 && g[(2, 3)] > 0.0, "{g}");
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert!(g[(i, j)] < 0.0, "{g}");
        }
    }

    #[test]
    fn divergence_guard() {
        struct Explode;
        impl GalleryObjective for Explode {
            fn name(&self) -> &str {
                "explode"
            }
            fn arity(&self) -> usize {
                2
            }
            fn goal(&self) -> Goal {
                Goal::Maximize
            }
            fn evaluate(&self, _x: &[DVector<f64>]) -> f64 {
                f64::NAN
            }
            fn gradient(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
                x.to_vec()
            }
        }
        let cfg = AmortizedConfig::new(
            Arc::new(Explode),
            Arc::new(make_linear(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap()),
        );
        assert_eq!(
            optimize_coupling(&cfg).unwrap_err(),
            CouplingError::Divergence { step: 0 }
        );
    }

    #[test]
    fn trajectory_jsonl() {
        let mut cfg = AmortizedConfig::new(
            Arc::new(objective_pairwise_l2(2).unwrap()),
            Arc::new(make_linear(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap()),
        );
        cfg.steps = 3;
        let t = optimize_coupling(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trajectory_jsonl(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let v: serde_json::Value = serde_json::from_str(lines[3]).unwrap();
        assert_eq!(v["step"], 3);
        assert_eq!(v["a"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn refine_linear_reaches_target_and_freezes_background() {
        let d = 8;
        let s = 3;
        let spec = CouplingSpec::repulsive(4, d).unwrap();
        let init = sample(&spec, RandomStream::new(3, 0)).unwrap();
        let target = DVector::from_fn(d, |l, _| l as f64 * 0.1 - 0.2);
        let region: Vec<bool> = (0..d).map(|l| l < s).collect();
        let gen: Arc<dyn GeneratorOracle> =
            Arc::new(make_linear(DMatrix::identity(d, d), DVector::zeros(d)).unwrap());
        let cfg = RefineConfig::fidelity(
            (0..s).collect(),
            target.clone(),
            region.clone(),
            gen.clone(),
        );
        let out = refine_noise_with(&init, &cfg, |_, z| {
            for i in 0..4 {
                for l in s..d {
                    assert_eq!(z[(i, l)].to_bits(), init.vectors[(i, l)].to_bits());
                }
            }
        })
        .unwrap();
        assert!(masked_residual(&out, gen.as_ref(), &target, &region) <= 1e-6);
        let tol = 1e-6 * ((4 * (d - s)) as f64).sqrt();
        for l in s..d {
            assert!(out.vectors.column(l).sum().abs() < tol);
        }
    }

    #[test]
    fn refine_empty_mask_is_identity() {
        let spec = CouplingSpec::independent(2, 3).unwrap();
        let init = sample(&spec, RandomStream::new(3, 0)).unwrap();
        let gen: Arc<dyn GeneratorOracle> =
            Arc::new(make_linear(DMatrix::identity(3, 3), DVector::zeros(3)).unwrap());
        let cfg = RefineConfig::fidelity(vec![], DVector::zeros(3), vec![true; 3], gen);
        assert_eq!(refine_noise(&init, &cfg).unwrap(), init);
    }

    #[test]
    fn direct_optimization_increases_separation() {
        let spec = CouplingSpec::repulsive(3, 4).unwrap();
        let init = sample(&spec, RandomStream::new(4, 0)).unwrap();
        let obj = Arc::new(objective_pairwise_l2(3).unwrap());
        let gen: Arc<dyn GeneratorOracle> =
            Arc::new(make_linear(DMatrix::identity(4, 4), DVector::zeros(4)).unwrap());
        let mut cfg = RefineConfig::direct(obj.clone(), gen.clone());
        cfg.steps = 10;
        cfg.step_size = 0.05;
        let out = refine_noise(&init, &cfg).unwrap();
        let eval = |b: &NoiseBatch| {
            let x: Vec<DVector<f64>> = b.vectors.row_iter().map(|r| r.transpose()).collect();
            obj.evaluate(&x)
        };
        assert!(eval(&out) > eval(&init));
    }
}
