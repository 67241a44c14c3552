//! `freqadapt` command-line front end.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use freqadapt::corpus::{self, CorpusSpec};
use freqadapt::estimator::{self, AblationMode, EstimationReport, HrPolicy, NamedImage};
use freqadapt::fdc::{self, ComparatorModel, FdcTrainConfig};
use freqadapt::format::g9;
use freqadapt::harness::{self, BenchmarkSuite, EstimatorKind};
use freqadapt::imaging::{self, ImagePlane};
use freqadapt::kernel::{wrap_angle, KernelParams};
use freqadapt::TOOL_VERSION;

use config::AppConfig;

#[derive(Parser)]
#[command(name = "freqadapt", version, about = "Blind blur-kernel estimation by frequency-density consistency")]
struct Cli {
    /// Config file of key=value lines
    #[arg(long, global = true, env = "FREQADAPT_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads (default: one per core)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the blur kernel of an image folder
    Estimate(EstimateArgs),
    /// Degrade a folder with a kernel into HR/LR training pairs
    GeneratePairs(PairArgs),
    /// Run the synthetic kernel-recovery benchmark
    Benchmark(BenchmarkArgs),
    /// Write frequency-density profiles of image folders as CSV
    Profile(ProfileArgs),
    /// Train a frequency density comparator and save a checkpoint
    TrainFdc(TrainArgs),
    /// Write the procedural test corpus as PNG files
    MakeCorpus(CorpusArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Direct,
    Fca,
}

#[derive(Args)]
struct EstimateArgs {
    /// Folder of source images (PNG or FQA1 raw)
    #[arg(long, value_name = "DIR")]
    source: PathBuf,
    #[arg(long, value_enum, default_value = "direct")]
    method: Method,
    /// Loss terms kept by the fca method: both, fdc-only, wd-only
    #[arg(long)]
    ablation: Option<String>,
    /// Start the fca comparator from this checkpoint
    #[arg(long, value_name = "FILE")]
    comparator: Option<PathBuf>,
    /// Report file
    #[arg(long, default_value = "report.txt", value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    /// Folder of source images
    #[arg(long, value_name = "DIR")]
    source: PathBuf,
    /// Output folder for the pairs and manifest.txt
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Take the kernel from an estimation report
    #[arg(long, value_name = "FILE", conflicts_with_all = ["r1", "r2", "theta"])]
    report: Option<PathBuf>,
    /// First kernel std-dev, pixels
    #[arg(long)]
    r1: Option<f64>,
    /// Defaults to r1
    #[arg(long)]
    r2: Option<f64>,
    /// Radians; wrapped into [0, 2pi)
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    /// HR side of each pair: source, or bicubic-2x (source halved)
    #[arg(long, default_value = "bicubic-2x")]
    hr_policy: String,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Suite file of key=value lines
    #[arg(long, value_name = "FILE")]
    suite: Option<PathBuf>,
    /// HR corpus folder; the procedural corpus is used when absent
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Output folder for scores.csv, summary.csv and timings.csv
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma list overriding the suite's estimators
    #[arg(long)]
    estimators: Option<String>,
    /// Exit 0 even when some rows failed
    #[arg(long)]
    keep_going: bool,
}

#[derive(Args)]
struct ProfileArgs {
    /// NAME=DIR, repeatable; distances are reported against the first domain
    #[arg(long = "domain", value_name = "NAME=DIR", required = true)]
    domains: Vec<String>,
    /// CSV output
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Folder of training images
    #[arg(long, value_name = "DIR")]
    source: PathBuf,
    /// Checkpoint file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    /// Output folder
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of images [default: 16]
    #[arg(long)]
    count: Option<usize>,
    /// Side of each image in pixels [default: 1024]
    #[arg(long)]
    size: Option<usize>,
    /// Corpus seed [default: 2021]
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<freqadapt::Error> for Failure {
    fn from(e: freqadapt::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let keys = config::help_table();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in ["estimate", "generate-pairs", "benchmark", "profile", "train-fdc", "make-corpus"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(keys.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.jobs {
        set_jobs(n)?;
    }
    let cfg = AppConfig::load(cli.config.as_deref(), &cli.sets).map_err(Failure::Usage)?;
    match cli.command {
        Command::Estimate(a) => estimate(&cfg, a),
        Command::GeneratePairs(a) => generate_pairs(&cfg, a),
        Command::Benchmark(a) => benchmark(&cfg, a),
        Command::Profile(a) => profile(&cfg, a),
        Command::TrainFdc(a) => train_fdc(&cfg, a),
        Command::MakeCorpus(a) => make_corpus(a),
    }
}

fn set_jobs(n: usize) -> Outcome {
    if n == 0 {
        return Err(Failure::Usage("--jobs must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("worker pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("warning: built without the parallel feature, --jobs {n} runs on one thread");
    }
    Ok(())
}

fn require_dir(flag: &str, dir: &Path) -> Outcome {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag}: {} is not a directory", dir.display())))
    }
}

fn load_planes(flag: &str, dir: &Path, cfg: &AppConfig) -> Result<Vec<ImagePlane>, Failure> {
    require_dir(flag, dir)?;
    let images = imaging::load_dir(dir, cfg.channel_policy)?;
    if images.is_empty() {
        return Err(Failure::Usage(format!("{flag}: no .png or .fqa images in {}", dir.display())));
    }
    Ok(images.into_iter().map(|(_, img)| img).collect())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn estimate(cfg: &AppConfig, a: EstimateArgs) -> Outcome {
    let ablation = match (&a.method, &a.ablation) {
        (Method::Direct, Some(_)) => {
            return Err(Failure::Usage("--ablation applies only to --method fca".into()));
        }
        (_, Some(s)) => s.parse::<AblationMode>().map_err(|e| Failure::Usage(format!("--ablation: {e}")))?,
        (_, None) => AblationMode::Both,
    };
    if matches!(a.method, Method::Direct) && a.comparator.is_some() {
        return Err(Failure::Usage("--comparator applies only to --method fca".into()));
    }
    let source = load_planes("--source", &a.source, cfg)?;
    let comparator = match &a.comparator {
        Some(p) => Some(ComparatorModel::load(p)?),
        None => None,
    };
    let method = match a.method {
        Method::Direct => "direct",
        Method::Fca => "fca",
    };
    let result: Result<EstimationReport, (freqadapt::Error, Option<EstimationReport>)> = match a.method {
        Method::Direct => estimator::estimate_direct(&source, &cfg.estimator, &cfg.grid()).map_err(|e| (e, None)),
        Method::Fca => match estimator::run_fca(&source, &cfg.estimator, ablation, comparator) {
            Ok(run) => match run.error {
                None => Ok(run.report),
                Some(e) => Err((e, Some(run.report))),
            },
            Err(e) => Err((e, None)),
        },
    };
    match result {
        Ok(report) => {
            report.save(&a.out)?;
            let p = report.estimated;
            println!("r1={} r2={} theta={}", g9(p.r1), g9(p.r2), g9(p.theta));
            println!(
                "sigma1_sq={} sigma2_sq={} sigma_sq={}",
                g9(p.r1 * p.r1),
                g9(p.r2 * p.r2),
                g9(p.sigma_sq())
            );
            println!("freq_distance={}", g9(report.freq_distance));
            println!("report={}", a.out.display());
            eprintln!("elapsed {:.1}s", report.seconds);
            Ok(())
        }
        Err((e, partial)) => {
            let msg = e.to_string().replace('\n', " ");
            let stub = match partial {
                Some(r) => r.to_text().replacen("[report]\n", &format!("[report]\nstatus=failed\nerror={msg}\n"), 1),
                None => format!(
                    "[report]\ntool={TOOL_VERSION}\nmethod={method}\nstatus=failed\nerror={msg}\n[config]\n{}",
                    config::echo_text(cfg)
                ),
            };
            write_file(&a.out, &stub)?;
            Err(Failure::Runtime(format!("{e} (stub report written to {})", a.out.display())))
        }
    }
}

fn generate_pairs(cfg: &AppConfig, a: PairArgs) -> Outcome {
    let hr_policy: HrPolicy = a.hr_policy.parse().map_err(|e| Failure::Usage(format!("--hr-policy: {e}")))?;
    let (params, side) = match (&a.report, a.r1) {
        (Some(path), _) => {
            let (p, side) = EstimationReport::read_params(path)?;
            (p, side.unwrap_or(cfg.estimator.kernel_side))
        }
        (None, Some(r1)) => {
            let r2 = a.r2.unwrap_or(r1);
            let theta = a.theta.unwrap_or(0.0);
            let wrapped = wrap_angle(theta);
            if wrapped != theta {
                eprintln!("warning: theta {} wrapped into [0, 2pi) as {}", g9(theta), g9(wrapped));
            }
            let p = KernelParams::new(r1, r2, theta).map_err(|e| Failure::Usage(e.to_string()))?;
            (p, cfg.estimator.kernel_side)
        }
        (None, None) => {
            return Err(Failure::Usage("give the kernel with --report or --r1 [--r2 --theta]".into()));
        }
    };
    require_dir("--source", &a.source)?;
    let mut corpus = Vec::new();
    for path in imaging::list_images(&a.source)? {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let [r, g, b] = imaging::load_rgb(&path)?;
        let channels = if r == g && g == b { vec![r] } else { vec![r, g, b] };
        corpus.push(NamedImage { name, channels });
    }
    if corpus.is_empty() {
        return Err(Failure::Usage(format!("--source: no .png or .fqa images in {}", a.source.display())));
    }
    let manifest = estimator::generate_pairs(&corpus, &params, cfg.estimator.scale, side, &a.out, hr_policy)?;
    for (name, why) in &manifest.skipped {
        eprintln!("warning: skipped {name}: {why}");
    }
    println!("pairs={} skipped={}", manifest.pairs.len(), manifest.skipped.len());
    println!("manifest={}", manifest.path.display());
    Ok(())
}

fn benchmark(cfg: &AppConfig, a: BenchmarkArgs) -> Outcome {
    let base = BenchmarkSuite {
        estimator: cfg.estimator.clone(),
        grid: cfg.grid(),
        ..BenchmarkSuite::default()
    };
    let mut suite = match &a.suite {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("--suite {}: {e}", path.display())))?;
            BenchmarkSuite::parse_onto(&text, base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => base,
    };
    if let Some(list) = &a.estimators {
        suite.estimators = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse::<EstimatorKind>)
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Usage(format!("--estimators: {e}")))?;
    }
    suite.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus_dir = a.corpus.clone().or_else(|| suite.corpus_dir.clone());
    let hr = match &corpus_dir {
        Some(dir) => load_planes("--corpus", dir, cfg)?,
        None => {
            eprintln!("no corpus given, generating the procedural corpus");
            corpus::generate(&CorpusSpec::default())?
        }
    };
    let out = a
        .out
        .clone()
        .or_else(|| suite.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("benchmark"));
    let result = harness::run_suite(&suite, &hr)?;
    let [scores, summary, timings] = result.write(&out)?;
    print!("{}", result.summary_csv());
    println!("scores={}", scores.display());
    println!("summary={}", summary.display());
    println!("timings={}", timings.display());
    let failed: Vec<String> = result
        .rows
        .iter()
        .filter(|r| !r.ok())
        .map(|r| format!("{}/{}/{}: {}", r.kind, r.estimator.name(), r.seed, r.error.as_deref().unwrap_or("")))
        .collect();
    if failed.is_empty() || a.keep_going {
        for f in &failed {
            eprintln!("warning: row failed {f}");
        }
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} row(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

fn profile(cfg: &AppConfig, a: ProfileArgs) -> Outcome {
    let mut domains = Vec::new();
    for d in &a.domains {
        let (name, dir) = d
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--domain expects NAME=DIR, got {d:?}")))?;
        if name.is_empty() {
            return Err(Failure::Usage(format!("--domain {d:?} has an empty name")));
        }
        domains.push((name.to_string(), load_planes("--domain", Path::new(dir), cfg)?));
    }
    let (patch, kind) = (cfg.estimator.patch_size, cfg.estimator.bin_kind);
    harness::emit_profile_plot_data(&domains, patch, kind, &a.out)?;
    let (first, rest) = domains.split_first().expect("clap requires one domain");
    for (name, images) in rest {
        let r = estimator::verify_consistency(images, &first.1, patch, kind)?;
        println!("d_bar[{name} vs {}]={}", first.0, g9(r.d_bar));
    }
    println!("profile={}", a.out.display());
    Ok(())
}

fn train_fdc(cfg: &AppConfig, a: TrainArgs) -> Outcome {
    let sources = load_planes("--source", &a.source, cfg)?;
    let e = &cfg.estimator;
    let schedule = e.curriculum;
    let tc = FdcTrainConfig {
        patch_size: e.patch_size,
        normalization: e.normalization,
        bin_kind: e.bin_kind,
        batch_size: cfg.fdc_batch,
        iterations: cfg.fdc_iterations,
        lr: e.fdc_lr,
        schedule,
        seed: e.seed,
        ..FdcTrainConfig::default()
    };
    let (state, curve) = fdc::train_comparator(&sources, &tc)?;
    state.model.save(&a.out)?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    println!("final_loss={}", g9(tail.iter().sum::<f64>() / tail.len() as f64));
    let check = fdc::sample_triplets(
        &sources,
        schedule.end_scale,
        e.patch_size,
        e.bin_kind,
        200,
        freqadapt::rng::mix(e.seed, 0x6576_616c),
    )?;
    match fdc::ordering_accuracy(&state.model, &check) {
        Ok(acc) => println!("ordering_accuracy@{}={}", g9(schedule.end_scale), g9(acc)),
        Err(err) => eprintln!("warning: {err}"),
    }
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn make_corpus(a: CorpusArgs) -> Outcome {
    let d = CorpusSpec::default();
    let spec = CorpusSpec {
        count: a.count.unwrap_or(d.count),
        size: a.size.unwrap_or(d.size),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    if spec.count == 0 || spec.size < 8 {
        return Err(Failure::Usage("--count must be >= 1 and --size >= 8".into()));
    }
    let paths = corpus::write_corpus(&spec, &a.out)?;
    println!("images={} dir={}", paths.len(), a.out.display());
    Ok(())
}
