use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use noisecouple::analysis::{
    coupling_effect_first_order, default_sweep_grid, local_linear_prediction,
    pairwise_separation_mc, rbf_similarity_closed_form, rbf_similarity_mc, separation_bound,
    separation_sweep, EffectOptions, LinearFeatureMap, QuadraticPairwise, RbfSimilaritySpec,
};
use noisecouple::container::{self, ContainerError, Dtype};
use noisecouple::coupling::{
    check_equicorrelation, correlation_of, factor_correlation, min_equicorrelation, CouplingKind,
    CouplingMatrix, CouplingSpec, MatrixRows, SubspaceSpec,
};
use noisecouple::optimizer::{
    masked_residual, optimize_coupling, refine_noise, write_trajectory_jsonl, AmortizedConfigFile,
    RefineConfigFile, RefineLoss,
};
use noisecouple::sampler::{sample, standard_normal_matrix, RandomStream};
use noisecouple::validation::{validate_cross_covariance, validate_marginals};
use noisecouple::CouplingError;

#[derive(Parser)]
#[command(
    name = "noisecouple",
    version,
    about = "Coupled Gaussian noise for generative galleries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one coupled batch and write it as an NPY tensor with a JSON sidecar.
    Sample(SampleArgs),
    /// Run the marginal and cross-covariance suites; exit 1 on failure.
    Validate(ValidateArgs),
    /// Check whether an equicorrelation value is valid for k samples.
    Feasibility {
        #[arg(long)]
        k: usize,
        #[arg(long, allow_negative_numbers = true)]
        c: f64,
    },
    /// Diversity quantities under a coupling.
    Analyze(AnalyzeArgs),
    /// Amortized coupling optimization or masked refinement.
    Optimize(OptimizeArgs),
    /// Write the coupling matrix A (and R = A Aᵀ) of a spec as JSON.
    ExportMatrix {
        #[command(flatten)]
        coupling: CouplingArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingName {
    Identical,
    Independent,
    Antithetic,
    Repulsive,
    Equicorr,
    Matrix,
    Subspace,
}

#[derive(Args, Clone)]
struct CouplingArgs {
    #[arg(long, value_enum)]
    coupling: Option<CouplingName>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Latent layout CxHxW; sets d = C*H*W.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    c: Option<f64>,
    /// JSON file with `{"rows": [[...], ...]}`.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// JSON file with `{"basis": {"rows": ...}, "inner": {...}, "outer": {...}}`.
    #[arg(long)]
    subspace: Option<PathBuf>,
    /// Full spec as JSON, instead of the flags above.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    coupling: CouplingArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    stream_id: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "f32")]
    dtype: String,
}

#[derive(Args)]
struct ValidateArgs {
    /// Validate the spec recorded in a container (after checking its checksum).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[command(flatten)]
    coupling: CouplingArgs,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyzeTask {
    Separation,
    Rbf,
    Effect,
    Sweep,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    task: AnalyzeTask,
    #[command(flatten)]
    coupling: CouplingArgs,
    /// `identity`, `random:SEED`, or a JSON file with `{"rows": ...}`.
    #[arg(long = "linear-J", default_value = "identity")]
    linear_j: String,
    /// Feature dimension of the linear map.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizeTask {
    Amortized,
    Refine,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, value_enum)]
    task: OptimizeTask,
    #[arg(long)]
    config: PathBuf,
    /// Initial noise container (refine only).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Trajectory JSON lines (amortized) or refined container (refine).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation,
    Config(String),
    Io(String),
    Integrity(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Integrity(_) => 4,
        }
    }
}

impl From<CouplingError> for Failure {
    fn from(e: CouplingError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ContainerError> for Failure {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io { .. } => Failure::Io(e.to_string()),
            ContainerError::Integrity { .. } | ContainerError::Format(_) => {
                Failure::Integrity(e.to_string())
            }
            ContainerError::Shape(_) | ContainerError::Coupling(_) => {
                Failure::Config(e.to_string())
            }
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("JSON values serialize")
    );
}

fn parse_shape(s: &str) -> CliResult<Vec<usize>> {
    let dims: Result<Vec<usize>, _> = s.split(['x', 'X']).map(str::parse).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&x| x > 0) => Ok(d),
        _ => Err(Failure::Config(format!(
            "bad --shape {s:?}; expected e.g. 4x64x64"
        ))),
    }
}

impl CouplingArgs {
    fn trailing_shape(&self) -> CliResult<Option<Vec<usize>>> {
        self.shape.as_deref().map(parse_shape).transpose()
    }

    fn dim(&self) -> CliResult<Option<usize>> {
        let from_shape = self.trailing_shape()?.map(|s| s.iter().product::<usize>());
        match (self.dim, from_shape) {
            (Some(d), Some(s)) if d != s => Err(Failure::Config(format!(
                "--dim {d} disagrees with --shape (C*H*W = {s})"
            ))),
            (d, s) => Ok(d.or(s)),
        }
    }

    fn build(&self, default_dim: Option<usize>) -> CliResult<CouplingSpec> {
        if let Some(path) = &self.spec {
            return read_json(path);
        }
        let name = self
            .coupling
            .ok_or_else(|| Failure::Config("--coupling or --spec is required".into()))?;
        let d = self
            .dim()?
            .or(default_dim)
            .ok_or_else(|| Failure::Config("--dim or --shape is required".into()))?;
        let need_k = || {
            self.k
                .ok_or_else(|| Failure::Config("--k is required".into()))
        };
        let spec = match name {
            CouplingName::Identical => CouplingSpec::identical(need_k()?, d)?,
            CouplingName::Independent => CouplingSpec::independent(need_k()?, d)?,
            CouplingName::Antithetic => CouplingSpec::antithetic(d)?,
            CouplingName::Repulsive => CouplingSpec::repulsive(need_k()?, d)?,
            CouplingName::Equicorr => {
                let c = self
                    .c
                    .ok_or_else(|| Failure::Config("--c is required for equicorr".into()))?;
                CouplingSpec::equicorrelated(need_k()?, d, c)?
            }
            CouplingName::Matrix => {
                let path = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Failure::Config("--matrix FILE is required".into()))?;
                let rows: MatrixRows = read_json(path)?;
                let a = CouplingMatrix::new(rows.to_matrix()?)?;
                if let Some(k) = self.k {
                    if k != a.k() {
                        return Err(Failure::Config(format!(
                            "--k {k} but matrix has {} rows",
                            a.k()
                        )));
                    }
                }
                CouplingSpec::matrix(a, d)?
            }
            CouplingName::Subspace => {
                let path = self
                    .subspace
                    .as_ref()
                    .ok_or_else(|| Failure::Config("--subspace FILE is required".into()))?;
                let s: SubspaceSpec = read_json(path)?;
                if s.ambient_dim() != d {
                    return Err(Failure::Config(format!(
                        "subspace basis lives in R^{}, d = {d}",
                        s.ambient_dim()
                    )));
                }
                CouplingSpec::subspace(s, need_k()?)?
            }
        };
        Ok(spec)
    }
}

fn cmd_sample(args: SampleArgs) -> CliResult {
    let spec = args.coupling.build(None)?;
    let dtype = Dtype::parse(&args.dtype)
        .ok_or_else(|| Failure::Config(format!("unknown dtype {}", args.dtype)))?;
    let batch = sample(&spec, RandomStream::new(args.seed, args.stream_id))?;
    let shape = args.coupling.trailing_shape()?;
    let sidecar = container::export_batch(&batch, &args.out, dtype, shape.as_deref())?;
    emit(&json!({
        "path": args.out,
        "sidecar": container::sidecar_path(&args.out),
        "shape": sidecar.shape,
        "dtype": sidecar.dtype,
        "checksum": sidecar.checksum,
    }));
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> CliResult {
    let (spec, replay) = match &args.input {
        Some(path) => {
            let loaded = container::load_container(path)?;
            (
                loaded.sidecar.spec.clone(),
                Some(container::replay_matches(path)?),
            )
        }
        None => (args.coupling.build(None)?, None),
    };
    let stream = RandomStream::new(args.seed, 0);
    let marginals = validate_marginals(&spec, stream, args.n)?;
    let cross =
        validate_cross_covariance(&spec, RandomStream::new(args.seed, args.n as u64), args.n)?;
    let pass = marginals.pass && cross.pass && replay.unwrap_or(true);
    let mut report = json!({
        "pass": pass,
        "spec": spec,
        "n": args.n,
        "marginals": marginals,
        "cross_covariance": cross,
    });
    if let Some(r) = replay {
        report["replay_matches"] = json!(r);
    }
    emit(&report);
    if pass {
        Ok(())
    } else {
        Err(Failure::Validation)
    }
}

fn cmd_feasibility(k: usize, c: f64) -> CliResult {
    if k < 2 {
        return Err(Failure::Config("k must be at least 2".into()));
    }
    let lower = min_equicorrelation(k);
    let verdict = check_equicorrelation(k, c);
    emit(&json!({
        "k": k,
        "c": c,
        "feasible": verdict.is_ok(),
        "interval": [lower, 1.0],
    }));
    verdict.map_err(Failure::from)
}

fn linear_map(spec_j: &str, m: Option<usize>, d: usize) -> CliResult<LinearFeatureMap> {
    if spec_j == "identity" {
        if let Some(m) = m {
            if m != d {
                return Err(Failure::Config(format!(
                    "identity map needs m = d, got m = {m}, d = {d}"
                )));
            }
        }
        return Ok(LinearFeatureMap::identity(d));
    }
    if let Some(seed) = spec_j.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Failure::Config(format!("bad seed in {spec_j}")))?;
        let m = m.unwrap_or(d);
        let j = standard_normal_matrix(&mut RandomStream::new(seed, 0).rng(), m, d);
        return Ok(LinearFeatureMap::new(j)?);
    }
    let rows: MatrixRows = read_json(Path::new(spec_j))?;
    Ok(LinearFeatureMap::new(rows.to_matrix()?)?)
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    let stream = RandomStream::new(args.seed, 0);
    if let AnalyzeTask::Sweep = args.task {
        let k = args
            .coupling
            .k
            .ok_or_else(|| Failure::Config("--k is required".into()))?;
        let d = args
            .coupling
            .dim()?
            .or(args.m)
            .ok_or_else(|| Failure::Config("--dim or --m is required".into()))?;
        let map = linear_map(&args.linear_j, args.m, d)?;
        let grid = match args.coupling.c {
            Some(c) => vec![c],
            None => default_sweep_grid(k),
        };
        let rows = separation_sweep(k, d, &map, &grid, stream, args.n)?;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "c,k,metric,estimate,stderr,prediction");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.c, r.k, r.metric, r.estimate, r.stderr, r.prediction
            );
        }
        return Ok(());
    }

    let spec = args.coupling.build(args.m)?;
    let map = linear_map(&args.linear_j, args.m, spec.d())?;
    match args.task {
        AnalyzeTask::Separation => {
            let est = pairwise_separation_mc(&spec, &map, stream, args.n)?;
            let mut out = json!({
                "task": "separation",
                "spec": spec,
                "estimate": est.mean,
                "stderr": est.stderr,
                "n": est.n,
                "bound": separation_bound(spec.k(), &map)?,
            });
            if let Some(r) = correlation_of(&spec)?.uniform() {
                if let Some(c) = equicorrelation_value(r.entries()) {
                    out["prediction"] = json!(local_linear_prediction(spec.k(), c, &map)?);
                }
            }
            emit(&out);
        }
        AnalyzeTask::Rbf => {
            let rbf = RbfSimilaritySpec::new(map, args.tau)?;
            let report = rbf_similarity_mc(&spec, &rbf, stream, args.n)?;
            emit(&json!({
                "task": "rbf",
                "spec": spec,
                "tau": args.tau,
                "estimate": report.monte_carlo.mean,
                "stderr": report.monte_carlo.stderr,
                "n": report.monte_carlo.n,
                "exact": report.exact,
                "repulsive_minimum": rbf_similarity_closed_form(spec.k(), &rbf)?,
            }));
        }
        AnalyzeTask::Effect => {
            let structure = correlation_of(&spec)?;
            let r = structure.uniform().ok_or_else(|| {
                Failure::Config(
                    "effect analysis needs a coupling with one sample correlation".into(),
                )
            })?;
            let obj = QuadraticPairwise::new(spec.k(), map)?;
            let report =
                coupling_effect_first_order(&obj, r, stream, args.n, EffectOptions::default())?;
            emit(&json!({ "task": "effect", "spec": spec, "report": report }));
        }
        AnalyzeTask::Sweep => unreachable!(),
    }
    Ok(())
}

/// The common off-diagonal value of an equicorrelated matrix, if it is one.
fn equicorrelation_value(r: &DMatrix<f64>) -> Option<f64> {
    let k = r.nrows();
    if k < 2 {
        return None;
    }
    let c = r[(0, 1)];
    let uniform = (0..k).all(|i| (0..k).all(|j| i == j || (r[(i, j)] - c).abs() < 1e-12));
    uniform.then_some(c)
}

fn cmd_optimize(args: OptimizeArgs) -> CliResult {
    match args.task {
        OptimizeTask::Amortized => {
            let file: AmortizedConfigFile = read_json(&args.config)?;
            let cfg = file.build()?;
            let trajectory = optimize_coupling(&cfg)?;
            let last = trajectory
                .last()
                .expect("trajectory has at least the initial point");
            match &args.out {
                Some(path) => {
                    let mut buf = Vec::new();
                    write_trajectory_jsonl(&mut buf, &trajectory).expect("writing to memory");
                    write_file(path, &buf)?;
                    emit(&json!({
                        "trajectory": path,
                        "steps": cfg.steps,
                        "final_objective": last.objective,
                        "matrix": last.matrix,
                        "correlation": MatrixRows::from_matrix(&last.matrix.gram()),
                    }));
                }
                None => {
                    let stdout = std::io::stdout().lock();
                    write_trajectory_jsonl(stdout, &trajectory)
                        .map_err(|e| Failure::Io(format!("stdout: {e}")))?;
                }
            }
        }
        OptimizeTask::Refine => {
            let file: RefineConfigFile = read_json(&args.config)?;
            let cfg = file.build()?;
            let input = args
                .input
                .as_ref()
                .ok_or_else(|| Failure::Config("--in CONTAINER is required".into()))?;
            let loaded = container::load_container(input)?;
            let refined = refine_noise(&loaded.batch, &cfg)?;
            let RefineLoss::Fidelity { target, region } = &cfg.loss else {
                unreachable!("file configs use the fidelity loss")
            };
            let residual = masked_residual(&refined, cfg.generator.as_ref(), target, region);
            let mut out = json!({ "steps": cfg.steps, "masked_residual": residual });
            if let Some(path) = &args.out {
                let trailing = loaded.sidecar.shape[1..].to_vec();
                container::export_batch(&refined, path, loaded.sidecar.dtype, Some(&trailing))?;
                out["out"] = json!(path);
            }
            emit(&out);
        }
    }
    Ok(())
}

fn cmd_export_matrix(coupling: CouplingArgs, out: PathBuf) -> CliResult {
    let spec = coupling.build(Some(1))?;
    let a = match spec.kind() {
        CouplingKind::Matrix(a) => a.clone(),
        CouplingKind::Subspace(_) => {
            return Err(Failure::Config(
                "subspace couplings have no single coupling matrix".into(),
            ));
        }
        _ => {
            let r = correlation_of(&spec)?;
            let r = r
                .uniform()
                .expect("non-subspace kinds have one sample correlation");
            factor_correlation(r, spec.k())?
        }
    };
    let doc = json!({
        "k": a.k(),
        "r": a.r(),
        "rows": MatrixRows::from_matrix(a.entries()).rows,
        "correlation": MatrixRows::from_matrix(&a.gram()).rows,
    });
    write_file(
        &out,
        serde_json::to_string_pretty(&doc)
            .expect("JSON values serialize")
            .as_bytes(),
    )?;
    emit(&json!({ "path": out, "k": a.k(), "r": a.r() }));
    Ok(())
}

fn configure_threads() {
    let n = std::env::var("NOISECOUPLE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Feasibility { k, c } => cmd_feasibility(k, c),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::ExportMatrix { coupling, out } => cmd_export_matrix(coupling, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, message) = match &f {
                Failure::Validation => (
                    "validation",
                    "validation failed; see report on stdout".to_string(),
                ),
                Failure::Config(m) => ("config", m.clone()),
                Failure::Io(m) => ("io", m.clone()),
                Failure::Integrity(m) => ("integrity", m.clone()),
            };
            eprintln!(
                "{}",
                json!({ "error": kind, "message": message, "exit_code": f.code() })
            );
            ExitCode::from(f.code())
        }
    }
}
