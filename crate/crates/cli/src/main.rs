mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gauss_align::aligner::{
    align_gaussian, align_points, normalize_cloud, AlignConfig, AlignResult, GradientMode, InitMode, NestedPlacement,
};
use gauss_align::geometry::PointCloud;
use gauss_align::synthgen::{self, VarianceMode};
use gauss_align::{dataio, evalkit, Error, Result};

use manifest::RunManifest;

const THREADS_ENV: &str = "GAUSS_ALIGN_THREADS";

#[derive(Parser)]
#[command(name = "gauss-align", version, about = "Unsupervised orthogonal alignment of Gaussian word embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn an orthogonal map from source to target embeddings.
    Align(AlignArgs),
    /// Score a map by lexicon retrieval (P@1, P@5).
    Eval(EvalArgs),
    /// Write a synthetic embedding pair with known ground truth.
    Gen(GenArgs),
}

#[derive(Args)]
struct AlignArgs {
    /// Replay a previous run: its inputs and configuration become the
    /// defaults, and any flag given here overrides them.
    #[arg(long, value_name = "FILE")]
    from_manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE", required_unless_present = "from_manifest")]
    src_mean: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    src_var: Option<PathBuf>,
    #[arg(long, value_name = "FILE", required_unless_present = "from_manifest")]
    tgt_mean: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    tgt_var: Option<PathBuf>,
    /// Where to write the learned d x d map.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Run manifest path [default: <out>.manifest].
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Align means only; variance files are not needed.
    #[arg(long)]
    means_only: bool,
    /// Read only the most frequent N words of each file.
    #[arg(long, value_name = "N")]
    max_words: Option<usize>,
    /// Record wall-clock time in the manifest.
    #[arg(long)]
    record_time: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size of the first epoch; doubled every epoch.
    #[arg(long)]
    batch: Option<usize>,
    /// Steps in the first epoch; divided by four every epoch.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    sinkhorn_reg: Option<f64>,
    #[arg(long)]
    sinkhorn_max_iter: Option<usize>,
    #[arg(long)]
    sinkhorn_tol: Option<f64>,
    /// Nested covariance steps per final-epoch step.
    #[arg(long)]
    nested_iters: Option<usize>,
    #[arg(long)]
    nested_lr_factor: Option<f64>,
    #[arg(long)]
    covariance_weight: Option<f64>,
    /// refinement | per-step
    #[arg(long)]
    nested_placement: Option<NestedPlacement>,
    /// Batches are drawn from the first K rows of each cloud.
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,
    #[arg(long)]
    no_normalize: bool,
    /// identity | convex
    #[arg(long)]
    init: Option<InitMode>,
    #[arg(long)]
    convex_sample: Option<usize>,
    #[arg(long)]
    convex_iters: Option<usize>,
    /// cross | full
    #[arg(long)]
    gradient: Option<GradientMode>,
    /// Fail if any projected map deviates from orthogonality.
    #[arg(long)]
    check_orthogonality: bool,
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut AlignConfig) {
        macro_rules! take {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        take!(
            seed => seed,
            epochs => epochs,
            batch => initial_batch,
            iters => initial_iters,
            learning_rate => learning_rate,
            sinkhorn_reg => sinkhorn_reg,
            sinkhorn_max_iter => sinkhorn_max_iter,
            sinkhorn_tol => sinkhorn_tol,
            nested_iters => nested_iters,
            nested_lr_factor => nested_lr_factor,
            covariance_weight => covariance_weight,
            nested_placement => nested_placement,
            top_k => train_top_k,
            init => init_mode,
            convex_sample => convex_sample,
            convex_iters => convex_iters,
            gradient => gradient,
        );
        if self.no_normalize {
            cfg.normalize_inputs = false;
        }
        if self.check_orthogonality {
            cfg.check_orthogonality = true;
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    map: PathBuf,
    #[arg(long, value_name = "FILE")]
    src_mean: PathBuf,
    #[arg(long, value_name = "FILE")]
    tgt_mean: PathBuf,
    /// `source target` pairs, one per line.
    #[arg(long, value_name = "FILE")]
    lexicon: PathBuf,
    #[arg(long, value_name = "N")]
    max_words: Option<usize>,
    /// Use raw means; by default both clouds are centred and scaled the
    /// same way alignment preprocesses them.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(short = 'd', long, default_value_t = 20)]
    d: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// clean | informative-variance | hostile-variance
    #[arg(long, default_value = "clean")]
    mode: VarianceMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Parse { .. } | Error::Io { .. } | Error::Consistency(_) | Error::Validation(_) => 3,
        Error::Numerical(_) => 4,
        Error::Evaluation(_) => 5,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Align(args) => cmd_align(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gen(args) => cmd_gen(args),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gauss-align: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn cmd_align(args: AlignArgs) -> Result<()> {
    let base = match &args.from_manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            Some(RunManifest::parse(&text, path)?)
        }
        None => None,
    };
    let mut cfg = base.as_ref().map_or_else(AlignConfig::default, |m| m.config.clone());
    args.config.apply(&mut cfg);
    let means_only = args.means_only || base.as_ref().is_some_and(|m| m.means_only);

    let input = |flag: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
        flag.clone()
            .or_else(|| base.as_ref().and_then(|m| m.inputs.get(key)).map(PathBuf::from))
    };
    let max_words = args
        .max_words
        .or_else(|| base.as_ref().and_then(|m| m.inputs.get("max_words")).and_then(|v| v.parse().ok()));
    let need = |p: Option<PathBuf>, flag: &str| {
        p.ok_or_else(|| Error::Config(format!("--{flag} is required (or a manifest that records it)")))
    };
    let src_mean = need(input(&args.src_mean, "src_mean"), "src-mean")?;
    let tgt_mean = need(input(&args.tgt_mean, "tgt_mean"), "tgt-mean")?;

    let mut record = RunManifest::new("align", cfg.clone());
    record.means_only = means_only;
    record.inputs.insert("src_mean".into(), path_string(&src_mean));
    record.inputs.insert("tgt_mean".into(), path_string(&tgt_mean));
    if let Some(k) = max_words {
        record.inputs.insert("max_words".into(), k.to_string());
    }

    let start = Instant::now();
    let result = if means_only {
        let (_, x) = dataio::load_point_embeddings(&src_mean, max_words)?;
        let (_, y) = dataio::load_point_embeddings(&tgt_mean, max_words)?;
        align_points(&x, &y, &cfg)?
    } else {
        let src_var = need(input(&args.src_var, "src_var"), "src-var (or --means-only)")?;
        let tgt_var = need(input(&args.tgt_var, "tgt_var"), "tgt-var (or --means-only)")?;
        record.inputs.insert("src_var".into(), path_string(&src_var));
        record.inputs.insert("tgt_var".into(), path_string(&tgt_var));
        let (_, gx) = dataio::load_gaussian_embeddings(&src_mean, &src_var, max_words)?;
        let (_, gy) = dataio::load_gaussian_embeddings(&tgt_mean, &tgt_var, max_words)?;
        align_gaussian(&gx, &gy, &cfg)?
    };
    let elapsed = start.elapsed().as_secs_f64();

    dataio::save_map(&args.out, &result.map)?;
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest", args.out.display())));
    record.outputs.insert("map".into(), path_string(&args.out));
    record.outputs.insert("manifest".into(), path_string(&manifest_path));
    record_align_metrics(&mut record, &result);
    if args.record_time {
        record.wall_time_seconds = Some(elapsed);
    }
    std::fs::write(&manifest_path, record.to_string()).map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;

    println!(
        "aligned in {} steps over {} epochs (final batch {}), final batch objective {}",
        result.trace.len(),
        result.epochs_run,
        result.final_batch,
        record.metrics["final_objective"]
    );
    println!("map: {}", args.out.display());
    println!("manifest: {}", manifest_path.display());
    eprintln!("wall time: {elapsed:.2}s");
    Ok(())
}

fn record_align_metrics(record: &mut RunManifest, result: &AlignResult) {
    let last = result.trace.last().map_or(f64::NAN, |t| t.objective);
    let m = &mut record.metrics;
    m.insert("steps".into(), result.trace.len().to_string());
    m.insert("epochs_run".into(), result.epochs_run.to_string());
    m.insert("final_batch".into(), result.final_batch.to_string());
    m.insert("final_objective".into(), last.to_string());
    m.insert(
        "max_orthogonality_defect".into(),
        result.max_orthogonality_defect.to_string(),
    );
}

fn load_eval_cloud(path: &Path, max_words: Option<usize>, normalize: bool) -> Result<(Vec<String>, PointCloud)> {
    let (words, cloud) = dataio::load_point_embeddings(path, max_words)?;
    if !normalize {
        return Ok((words, cloud));
    }
    let (m, _) = normalize_cloud(cloud.as_matrix());
    Ok((words, PointCloud::new(m)?))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let map = dataio::load_map(&args.map)?;
    let (src_words, x) = load_eval_cloud(&args.src_mean, args.max_words, !args.no_normalize)?;
    let (tgt_words, y) = load_eval_cloud(&args.tgt_mean, args.max_words, !args.no_normalize)?;
    let lexicon = dataio::load_lexicon(&args.lexicon)?;
    let report = evalkit::evaluate(&map, &x, &src_words, &y, &tgt_words, &lexicon)?;
    println!("P@1: {:.2}%", 100.0 * report.precision_at_1);
    println!("P@5: {:.2}%", 100.0 * report.precision_at_5);
    println!("evaluated: {}, skipped (out of vocabulary): {}", report.evaluated, report.skipped_oov);
    println!("{}", report.to_record());
    Ok(())
}

/// File names written by `gen` inside the output directory.
const GEN_FILES: [&str; 6] = [
    "src.mean.vec",
    "src.var.vec",
    "tgt.mean.vec",
    "tgt.var.vec",
    "truth.txt",
    "lexicon.txt",
];

fn cmd_gen(args: GenArgs) -> Result<()> {
    let inst = synthgen::generate(args.n, args.d, args.sigma, args.mode, args.seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    let [src_mean, src_var, tgt_mean, tgt_var, truth, lexicon] = GEN_FILES.map(|f| args.out_dir.join(f));
    let src_words: Vec<String> = (0..args.n).map(|i| format!("s{i}")).collect();
    let tgt_words: Vec<String> = (0..args.n).map(|j| format!("t{j}")).collect();
    dataio::save_gaussian_embeddings(&src_mean, &src_var, &src_words, &inst.source)?;
    dataio::save_gaussian_embeddings(&tgt_mean, &tgt_var, &tgt_words, &inst.target)?;
    dataio::save_truth(&truth, &inst.true_map, &inst.true_matching)?;
    let pairs = inst
        .true_matching
        .target_of()
        .iter()
        .enumerate()
        .map(|(i, &j)| (src_words[i].clone(), tgt_words[j].clone()));
    dataio::save_lexicon(&lexicon, &evalkit::Lexicon::from_pairs(pairs)?)?;
    println!(
        "wrote {} instance (n = {}, d = {}, sigma = {}, seed = {}) to {}",
        args.mode,
        args.n,
        args.d,
        args.sigma,
        args.seed,
        args.out_dir.display()
    );
    Ok(())
}
