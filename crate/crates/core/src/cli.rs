//! Command-line front end.
//!
//! Exit codes: 0 success, 1 error, 2 registration finished without converging.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::datagen::{make_pair_with, random_axis_rotation, random_unit_vector, rng_from_seed, synthetic_shape, ExperimentSpec, RegistrationPair};
use crate::embed::EmbeddingKind;
use crate::error::{Error, Result};
use crate::eval::{aggregate, success_grid, transform_errors, GridTrial, PairErrors, SuccessRule};
use crate::geometry::{random_rigid_transform, PointCloud, RigidTransform};
use crate::io::{format_cloud, format_transform, read_cloud_auto, read_transform, write_atomic, CloudFormat};
use crate::matching::{match_pass, DEFAULT_XI};
use crate::pipeline::{register, Method, PipelineConfig, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

/// Environment variable capping benchmark worker threads; 0 means one per core.
pub const THREADS_ENV: &str = "BBSREG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bbsreg", version, about = "Rigid point-cloud registration with soft best-buddies matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a source cloud onto a target cloud.
    Register(RegisterArgs),
    /// Run methods over generated pairs and tabulate their errors.
    Benchmark(BenchmarkArgs),
    /// Write seeded registration pairs to disk.
    Datagen(DatagenArgs),
    /// Score stored transform estimates against ground truth.
    Eval(EvalArgs),
    /// Write the soft matching matrices of one pair.
    BbsDump(BbsDumpArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value = "deepbbs-pp")]
    pub method: Method,
    #[arg(long, default_value_t = EmbeddingKind::default())]
    pub embedding: EmbeddingKind,
    #[arg(long, default_value_t = DEFAULT_XI)]
    pub xi: f64,
    #[arg(long = "t0", default_value_t = 1.0)]
    pub t0: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t_decay: f64,
    #[arg(long, default_value_t = 0.4)]
    pub conv_deg: f64,
    #[arg(long, default_value_t = 20)]
    pub max_iters: usize,
    #[arg(long)]
    pub out_transform: Option<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
    /// Recorded in the report; registration itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Directory of source shapes (.xyz, .ply, .off); synthetic shapes when absent.
    #[arg(long)]
    pub dataset_dir: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.to_vec())]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long)]
    pub out_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Source shape; a synthetic one when absent.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Overrides the experiment file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated transform files.
    #[arg(long = "estimate", required = true)]
    pub estimates: Vec<PathBuf>,
    /// Ground-truth transform files, paired in order with the estimates.
    #[arg(long = "ground-truth", required = true)]
    pub ground_truths: Vec<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
    #[arg(long)]
    pub out_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BbsDumpArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = EmbeddingKind::Identity)]
    pub embedding: EmbeddingKind,
    #[arg(long, default_value_t = DEFAULT_XI)]
    pub xi: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                emit(&e.to_string());
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            return EXIT_ERROR;
        }
    };
    let outcome = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Datagen(a) => cmd_datagen(a).map(|()| EXIT_OK),
        Command::Eval(a) => cmd_eval(a).map(|()| EXIT_OK),
        Command::BbsDump(a) => cmd_bbs_dump(a).map(|()| EXIT_OK),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            EXIT_ERROR
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

pub fn cmd_register(a: &RegisterArgs) -> Result<i32> {
    let cfg = PipelineConfig {
        embedding: a.embedding,
        xi: a.xi,
        t_initial: a.t0,
        t_decay: a.t_decay,
        convergence_deg: a.conv_deg,
        fine_tune_convergence_deg: a.conv_deg,
        max_iters: a.max_iters,
        ..Default::default()
    };
    cfg.validate()?;
    let p = read_cloud_auto(&a.source)?;
    let q = read_cloud_auto(&a.target)?;
    let report = register(a.method, &p, &q, &cfg)?;
    let text = format!("method={}\nseed={}\n{}", a.method, a.seed, report.to_text());
    if let Some(path) = &a.out_transform {
        write_atomic(path, &format_transform(&report.estimate))?;
    }
    match &a.out_report {
        Some(path) => write_atomic(path, &text)?,
        None => emit(&text),
    }
    Ok(if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn load_spec(path: Option<&Path>) -> Result<ExperimentSpec> {
    match path {
        Some(p) => ExperimentSpec::read(p),
        None => Ok(ExperimentSpec::default()),
    }
}

fn dataset_shapes(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && CloudFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptySet);
    }
    files.iter().map(|f| read_cloud_auto(f)).collect()
}

/// Worker count from `BBSREG_THREADS`, never more than `jobs`.
pub fn worker_threads(jobs: usize) -> Result<usize> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV} must be a count, got {v:?}")))?,
        Err(_) => 0,
    };
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { auto } else { requested };
    Ok(n.clamp(1, jobs.max(1)))
}

/// Runs `job` for every index on up to `threads` workers; results keep index order.
fn run_indexed<T: Send>(count: usize, threads: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

struct Trial {
    rotation_deg: f64,
    translation_frac: f64,
    pair: RegistrationPair,
}

fn build_trial(index: usize, spec: &ExperimentSpec, shapes: Option<&[PointCloud]>, trials: usize) -> Result<Trial> {
    let mut rng = rng_from_seed(spec.seed.wrapping_add(index as u64));
    let source = match shapes {
        Some(s) => s[index % s.len()].clone(),
        None => synthetic_shape(2 * spec.n_points, &mut rng)?,
    };
    let (rotation_deg, translation_frac, gt) = if spec.is_sweep() {
        let cell = index / trials;
        let nt = spec.sweep_translation_frac.len();
        let (r, t) = (spec.sweep_rotation_deg[cell / nt], spec.sweep_translation_frac[cell % nt]);
        let rot = random_axis_rotation(r, &mut rng);
        let shift = random_unit_vector(&mut rng) * (t * source.bounding_box_diagonal());
        (r, t, RigidTransform::new(rot, shift)?)
    } else {
        let (lo, hi) = spec.translation_range;
        (f64::NAN, f64::NAN, random_rigid_transform(spec.rotation_max_deg, lo, hi, &mut rng))
    };
    let pair = make_pair_with(&source, spec, gt, &mut rng)?;
    Ok(Trial {
        rotation_deg,
        translation_frac,
        pair,
    })
}

enum Outcome {
    Done {
        estimate: RigidTransform,
        errors: PairErrors,
        iterations: usize,
        converged: bool,
    },
    Failed(String),
}

fn run_method(method: Method, pair: &RegistrationPair, cfg: &PipelineConfig) -> Outcome {
    let attempt = || -> Result<Outcome> {
        let rep = register(method, &pair.p, &pair.q, cfg)?;
        Ok(Outcome::Done {
            errors: transform_errors(&rep.estimate, &pair.gt)?,
            estimate: rep.estimate,
            iterations: rep.iterations.len(),
            converged: rep.converged,
        })
    };
    attempt().unwrap_or_else(|e| Outcome::Failed(e.to_string().replace(['\t', '\n'], " ")))
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<i32> {
    if a.trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if a.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods given".into()));
    }
    let spec = load_spec(a.spec.as_deref())?;
    let cells = if spec.is_sweep() {
        spec.sweep_rotation_deg.len() * spec.sweep_translation_frac.len()
    } else {
        1
    };
    let count = cells * a.trials;
    let threads = worker_threads(count)?;
    let shapes = a.dataset_dir.as_deref().map(dataset_shapes).transpose()?;
    let cfg = PipelineConfig::default();

    let results = run_indexed(count, threads, |i| -> Result<(Trial, Vec<Outcome>)> {
        let trial = build_trial(i, &spec, shapes.as_deref(), a.trials)?;
        let outcomes = a.methods.iter().map(|&m| run_method(m, &trial.pair, &cfg)).collect();
        Ok((trial, outcomes))
    });
    let results: Vec<(Trial, Vec<Outcome>)> = results.into_iter().collect::<Result<_>>()?;

    let mut table = String::from(
        "trial\tmethod\trotation_deg\ttranslation_frac\tstatus\titerations\terr_rx\terr_ry\terr_rz\terr_tx\terr_ty\terr_tz\tchordal_deg\tmte\n",
    );
    for (i, (trial, outcomes)) in results.iter().enumerate() {
        for (method, out) in a.methods.iter().zip(outcomes) {
            table.push_str(&format!(
                "{i}\t{method}\t{}\t{}\t",
                trial.rotation_deg, trial.translation_frac
            ));
            match out {
                Outcome::Done {
                    errors: e,
                    iterations,
                    converged,
                    ..
                } => {
                    let status = if *converged { "converged" } else { "not_converged" };
                    table.push_str(&format!("{status}\t{iterations}"));
                    for v in e.euler_deg.iter().chain(&e.translation).chain([&e.chordal_deg, &e.mte]) {
                        table.push_str(&format!("\t{v:.9e}"));
                    }
                }
                Outcome::Failed(msg) => {
                    table.push_str(&format!("error\t0{}", "\tnan".repeat(8)));
                    eprintln!("trial {i} {method}: {msg}");
                }
            }
            table.push('\n');
        }
    }

    let mut summary = String::new();
    for (k, method) in a.methods.iter().enumerate() {
        let errs: Vec<PairErrors> = results
            .iter()
            .filter_map(|(_, o)| match &o[k] {
                Outcome::Done { errors, .. } => Some(*errors),
                Outcome::Failed(_) => None,
            })
            .collect();
        summary.push_str(&format!("method={method}\nfailures={}\n", count - errs.len()));
        if let Ok(s) = aggregate(&errs) {
            summary.push_str(&s.to_report());
        }
        if spec.is_sweep() {
            let grid_trials: Vec<GridTrial<'_>> = results
                .iter()
                .map(|(t, o)| GridTrial {
                    rotation_deg: t.rotation_deg,
                    translation_frac: t.translation_frac,
                    cloud: &t.pair.p,
                    gt: t.pair.gt,
                    est: match &o[k] {
                        Outcome::Done { estimate, .. } => Some(*estimate),
                        Outcome::Failed(_) => None,
                    },
                })
                .collect();
            summary.push_str("success_grid\n");
            summary.push_str(&success_grid(&grid_trials, &SuccessRule::default()).to_table());
        }
        summary.push('\n');
    }
    if let Some(path) = &a.out_table {
        write_atomic(path, &table)?;
    }
    emit(&summary);
    Ok(EXIT_OK)
}

pub fn cmd_datagen(a: &DatagenArgs) -> Result<()> {
    let mut spec = load_spec(a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    if !a.out_dir.is_dir() {
        return Err(Error::io(
            &a.out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let source = a.source.as_deref().map(read_cloud_auto).transpose()?;
    for k in 0..a.count {
        let shapes = source.as_ref().map(std::slice::from_ref);
        let trial = build_trial(k, &spec, shapes, 1)?;
        let stem = a.out_dir.join(format!("pair_{k:04}"));
        write_atomic(&suffixed(&stem, "_p.xyz"), &format_cloud(&trial.pair.p, CloudFormat::Xyz))?;
        write_atomic(&suffixed(&stem, "_q.xyz"), &format_cloud(&trial.pair.q, CloudFormat::Xyz))?;
        write_atomic(&suffixed(&stem, "_gt.txt"), &format_transform(&trial.pair.gt))?;
    }
    Ok(())
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.estimates.len() != a.ground_truths.len() {
        return Err(Error::SizeMismatch(format!(
            "{} estimates but {} ground truths",
            a.estimates.len(),
            a.ground_truths.len()
        )));
    }
    let errors = a
        .estimates
        .iter()
        .zip(&a.ground_truths)
        .map(|(e, g)| transform_errors(&read_transform(e)?, &read_transform(g)?))
        .collect::<Result<Vec<_>>>()?;
    let summary = aggregate(&errors)?.to_report();
    if let Some(path) = &a.out_table {
        write_atomic(path, &crate::eval::errors_table(&errors))?;
    }
    match &a.out_report {
        Some(path) => write_atomic(path, &summary)?,
        None => emit(&summary),
    }
    Ok(())
}

pub fn cmd_bbs_dump(a: &BbsDumpArgs) -> Result<()> {
    a.embedding.validate()?;
    if !(a.temperature > 0.0 && a.xi > 0.0) {
        return Err(Error::InvalidConfig("temperature and xi must be positive".into()));
    }
    if !a.out_dir.is_dir() {
        return Err(Error::io(
            &a.out_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let p = read_cloud_auto(&a.source)?;
    let q = read_cloud_auto(&a.target)?;
    let m = match_pass(&p, &q, a.embedding, a.xi, a.temperature)?;
    write_atomic(&a.out_dir.join("b_tilde.txt"), &m.b_tilde.to_text())?;
    write_atomic(&a.out_dir.join("pi_tilde.txt"), &m.pi_tilde.to_text())?;
    let gamma: String = m.gamma.iter().map(|g| format!("{g:.16e}\n")).collect();
    write_atomic(&a.out_dir.join("gamma.txt"), &gamma)?;
    write_atomic(&a.out_dir.join("q_hat.xyz"), &format_cloud(&m.q_hat, CloudFormat::Xyz))?;
    emit(&format!("alpha={:.16e}\ntemperature={}\n", m.alpha, m.temperature));
    Ok(())
}

/// Iterations spent in each stage, for scripts that grep reports.
pub fn stage_summary(report: &crate::pipeline::RegistrationReport) -> String {
    [Stage::Feature, Stage::Spatial, Stage::Icp]
        .iter()
        .map(|s| format!("{s}={}", report.stage_iterations(*s)))
        .collect::<Vec<_>>()
        .join(" ")
}
