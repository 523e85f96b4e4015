//! `ldiv`: i-vector statistics, backend training, and language scoring over
//! the manifest/array file formats. Every command is a pure function of its
//! flags and input files — rerunning with the same inputs rewrites the same
//! bytes. Logs go to standard error; standard output is reserved for the
//! evaluation report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldiv_core::io::{self, ArrayData, Kind, Manifest};
use ldiv_core::model::{Backend, Dims, FactorLoadings, Ubm};
use ldiv_core::posterior::{classical_ivector, recover_natural_mean, ClassicalIvector, IvectorSet};
use ldiv_core::score::{score_dataset, score_from_ivectors, save_scores, load_scores};
use ldiv_core::stats::{
    accumulate, load_stats, prune_responsibilities, responsibilities, save_stats, FrameBlock,
    SegmentStats, StatsSet,
};
use ldiv_core::synth::{make_dataset, FrameCount, SynthConfig};
use ldiv_core::train::{train, TrainConfig};
use ldiv_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ldiv",
    version,
    about = "i-vector extraction and linear Gaussian language scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic model plus labeled statistics with known truth.
    Simulate(SimulateArgs),
    /// Turn a directory of raw feature arrays into sufficient statistics.
    Stats(StatsArgs),
    /// Fit the backend means and shared precision by variational EM.
    Train(TrainArgs),
    /// Extract classical i-vectors from statistics.
    Extract(ExtractArgs),
    /// Rebuild natural statistics from stored i-vectors.
    Recover(RecoverArgs),
    /// Score every segment against a backend.
    Score(ScoreArgs),
    /// Evaluate a labeled score matrix.
    Eval(EvalArgs),
}

/// Frame count: a single number `T` or an inclusive range `A..B`.
fn parse_frames(text: &str) -> std::result::Result<FrameCount, String> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| format!("'{s}' is not a frame count"))
    };
    let frames = match text.split_once("..") {
        Some((lo, hi)) => FrameCount::Range(parse(lo)?, parse(hi)?),
        None => FrameCount::Fixed(parse(text)?),
    };
    frames.validate().map_err(|e| e.to_string())?;
    Ok(frames)
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of languages.
    #[arg(long, value_name = "L", value_parser = clap::value_parser!(u32).range(1..))]
    langs: u32,
    /// I-vector dimension.
    #[arg(long, value_name = "R", value_parser = clap::value_parser!(u32).range(1..))]
    rdim: u32,
    /// Feature dimension.
    #[arg(long, value_name = "D", value_parser = clap::value_parser!(u32).range(1..))]
    fdim: u32,
    /// Number of mixture components.
    #[arg(long, value_name = "NC", value_parser = clap::value_parser!(u32).range(1..))]
    comps: u32,
    /// Segments per language.
    #[arg(long, value_name = "S", value_parser = clap::value_parser!(u32).range(1..))]
    segs_per_lang: u32,
    /// Frames per segment: a count or an inclusive range `A..B`.
    #[arg(long, value_name = "T|A..B", value_parser = parse_frames)]
    frames: FrameCount,
    /// Language separation scale in i-vector space.
    #[arg(long, value_name = "X", default_value_t = 1.0)]
    sep: f64,
    /// RNG seed; pins every output byte.
    #[arg(long, value_name = "N")]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory of `.ldiv` frame arrays (rows = frames). A `labels.ldiv`
    /// file, if present, labels the remaining files in name order.
    #[arg(long, value_name = "DIR")]
    features: PathBuf,
    /// UBM manifest.
    #[arg(long, value_name = "MANIFEST")]
    ubm: PathBuf,
    /// Factor loadings manifest.
    #[arg(long, value_name = "MANIFEST")]
    tmatrix: PathBuf,
    /// Output stats manifest path.
    #[arg(long, value_name = "MANIFEST")]
    out: PathBuf,
    /// Drop responsibilities below this threshold and renormalize.
    #[arg(long, value_name = "THRESHOLD", num_args = 0..=1, default_missing_value = "1e-10")]
    prune: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled stats manifest.
    #[arg(long, value_name = "MANIFEST")]
    stats: PathBuf,
    /// Factor loadings manifest.
    #[arg(long, value_name = "MANIFEST")]
    tmatrix: PathBuf,
    /// Output directory for the backend manifest and training log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Maximum EM iterations.
    #[arg(long, value_name = "K", default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    iters: u32,
    /// Relative bound-gain stopping tolerance.
    #[arg(long, value_name = "E", default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct ExtractArgs {
    /// Stats manifest.
    #[arg(long, value_name = "MANIFEST")]
    stats: PathBuf,
    /// Factor loadings manifest.
    #[arg(long, value_name = "MANIFEST")]
    tmatrix: PathBuf,
    /// Output i-vectors manifest path.
    #[arg(long, value_name = "MANIFEST")]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    /// I-vectors manifest.
    #[arg(long, value_name = "MANIFEST")]
    ivectors: PathBuf,
    /// Factor loadings manifest.
    #[arg(long, value_name = "MANIFEST")]
    tmatrix: PathBuf,
    /// Output stats manifest path.
    #[arg(long, value_name = "MANIFEST")]
    out: PathBuf,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).multiple(false))]
struct ScoreArgs {
    /// Stats manifest to score.
    #[arg(long, value_name = "MANIFEST", group = "source")]
    stats: Option<PathBuf>,
    /// I-vectors manifest to score (natural statistics are recovered first).
    #[arg(long, value_name = "MANIFEST", group = "source")]
    ivectors: Option<PathBuf>,
    /// Backend manifest.
    #[arg(long, value_name = "MANIFEST")]
    backend: PathBuf,
    /// Factor loadings manifest.
    #[arg(long, value_name = "MANIFEST")]
    tmatrix: PathBuf,
    /// Scoring rule: ld, cpf, or lgbe.
    #[arg(long, value_name = "NAME")]
    scorer: String,
    /// Output scores manifest path.
    #[arg(long, value_name = "MANIFEST")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores manifest with labels.
    #[arg(long, value_name = "MANIFEST")]
    scores: PathBuf,
    /// Output file for machine-readable `key = value` results.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for I/O and runtime numeric failures, 2 for everything the inputs could
/// have validated up front (clap uses 2 for flag errors on its own).
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::BoundDecreased { .. } | Error::Numeric(_) => 1,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => run_simulate(args),
        Command::Stats(args) => run_stats(args),
        Command::Train(args) => run_train(args),
        Command::Extract(args) => run_extract(args),
        Command::Recover(args) => run_recover(args),
        Command::Score(args) => run_score(args),
        Command::Eval(args) => run_eval(args),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let config = SynthConfig {
        dims: Dims {
            feature_dim: args.fdim as usize,
            ivector_dim: args.rdim as usize,
            num_components: args.comps as usize,
            num_languages: args.langs as usize,
        },
        segments_per_language: args.segs_per_lang as usize,
        frames_per_segment: args.frames,
        class_separation: args.sep,
        precision_scale: 1.0,
        tractable: false,
        seed: args.seed,
    };
    let data = make_dataset(&config)?;
    create_dir(&args.out)?;

    data.models.ubm.save(&args.out.join("ubm.manifest"))?;
    data.models
        .loadings
        .save(&args.out.join("tmatrix.manifest"))?;
    data.models
        .backend
        .save(&args.out.join("backend.manifest"))?;
    save_stats(&data.stats, &args.out.join("stats.manifest"))?;

    // Ground truth for diagnostics: the generating backend again, plus the
    // latent vector every segment was sampled from.
    let s = data.latents.len();
    let r = config.dims.ivector_dim;
    let mut values = Vec::with_capacity(s * r);
    for latent in &data.latents {
        values.extend(latent.iter().copied());
    }
    let x = ArrayData::new(vec![s, r], values)?;
    let mut man = Manifest::new(Kind::Truth);
    man.set_dim("S", s);
    man.set_dim("R", r);
    man.set_dim("L", config.dims.num_languages);
    man.set_languages(data.models.backend.languages())?;
    for (name, array) in [
        ("means", ArrayData::from_matrix(data.models.backend.means())),
        (
            "precision",
            ArrayData::from_matrix(data.models.backend.precision()),
        ),
        ("x", x),
    ] {
        let file_name = io::array_file_name("truth", name);
        io::write_array(&args.out.join(&file_name), &array)?;
        man.set_array(name, &file_name);
    }
    man.save(&args.out.join("truth.manifest"))?;

    eprintln!(
        "simulate: wrote 18 files ({} segments, {} languages) to {}",
        s,
        config.dims.num_languages,
        args.out.display()
    );
    Ok(())
}

fn run_stats(args: StatsArgs) -> Result<()> {
    if let Some(threshold) = args.prune {
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(Error::InvalidArgument(
                "prune threshold must be finite and >= 0".into(),
            ));
        }
    }
    let ubm = Ubm::load(&args.ubm)?;
    let loadings = FactorLoadings::load(&args.tmatrix)?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.features)
        .map_err(|e| io_err(&args.features, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| io_err(&args.features, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(io::ARRAY_EXT))
        .collect();
    files.sort();
    let labels_file = args.features.join("labels.ldiv");
    files.retain(|p| *p != labels_file);
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .ldiv feature files in {}",
            args.features.display()
        )));
    }

    let (labels, num_languages) = if labels_file.exists() {
        let array = io::read_array(&labels_file)?;
        let num_languages = array
            .values()
            .iter()
            .fold(0i64, |acc, &v| acc.max(v as i64))
            .max(0) as usize
            + 1;
        let labels = io::labels_from_array(&array, num_languages)?;
        if labels.len() != files.len() {
            return Err(Error::DimensionMismatch {
                what: "label count".into(),
                expected: files.len().to_string(),
                actual: labels.len().to_string(),
            });
        }
        (Some(labels), num_languages)
    } else {
        (None, 1)
    };

    let mut segments = Vec::with_capacity(files.len());
    for (index, path) in files.iter().enumerate() {
        let frames = FrameBlock::new(io::read_array(path)?.to_matrix()?)?;
        let mut q = responsibilities(&frames, &ubm)?;
        if let Some(threshold) = args.prune {
            prune_responsibilities(&mut q, threshold);
        }
        let mut stats = accumulate(&frames, &q, &ubm, &loadings)?;
        stats.label = labels.as_ref().and_then(|l| l[index]);
        segments.push(stats);
    }
    let set = StatsSet::new(segments, num_languages, None)?;
    save_stats(&set, &args.out)?;
    eprintln!(
        "stats: accumulated {} segments into {}",
        files.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let set = load_stats(&args.stats)?;
    let loadings = FactorLoadings::load(&args.tmatrix)?;
    let config = TrainConfig {
        max_iters: args.iters as usize,
        rel_tol: args.tol,
        eig_floor: 1e-8,
    };
    let (backend, report) = train(&set, &loadings, &config)?;

    create_dir(&args.out)?;
    backend.save(&args.out.join("backend.manifest"))?;
    let mut log = String::new();
    for (i, bound) in report.bounds.iter().enumerate() {
        log.push_str(&format!("iter {} bound {:.17e}\n", i + 1, bound));
    }
    log.push_str(&format!(
        "{} after {} iterations\n",
        if report.converged {
            "converged"
        } else {
            "stopped at max iterations"
        },
        report.iterations
    ));
    write_text(&args.out.join("train.log"), &log)?;
    eprintln!(
        "train: {} iterations, final bound {:.6}, backend in {}",
        report.iterations,
        report.bounds.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_extract(args: ExtractArgs) -> Result<()> {
    let set = load_stats(&args.stats)?;
    let loadings = FactorLoadings::load(&args.tmatrix)?;
    let mut ivectors = Vec::with_capacity(set.len());
    let mut counts = Vec::with_capacity(set.len());
    for seg in &set.segments {
        ivectors.push(classical_ivector(seg, &loadings)?.mean);
        counts.push(seg.counts.clone());
    }
    let out_set = IvectorSet::new(
        ivectors,
        counts,
        set.labels(),
        set.num_languages,
        set.languages.clone(),
    )?;
    ldiv_core::posterior::save_ivectors(&out_set, &args.out)?;
    eprintln!(
        "extract: {} i-vectors into {}",
        out_set.len(),
        args.out.display()
    );
    Ok(())
}

fn run_recover(args: RecoverArgs) -> Result<()> {
    let set = ldiv_core::posterior::load_ivectors(&args.ivectors)?;
    let loadings = FactorLoadings::load(&args.tmatrix)?;
    let mut segments = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let ivector = ClassicalIvector {
            mean: set.ivectors[i].clone(),
        };
        let a = recover_natural_mean(&ivector, &set.counts[i], &loadings)?;
        segments.push(SegmentStats::new(
            set.counts[i].clone(),
            a,
            set.labels[i],
        )?);
    }
    let out_set = StatsSet::new(segments, set.num_languages, set.languages.clone())?;
    save_stats(&out_set, &args.out)?;
    eprintln!(
        "recover: {} segments into {}",
        out_set.len(),
        args.out.display()
    );
    Ok(())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let backend = Backend::load(&args.backend)?;
    let loadings = FactorLoadings::load(&args.tmatrix)?;
    let matrix = match (&args.stats, &args.ivectors) {
        (Some(stats), None) => {
            let set = load_stats(stats)?;
            score_dataset(&set, &backend, &loadings, &args.scorer)?
        }
        (None, Some(ivectors)) => {
            let set = ldiv_core::posterior::load_ivectors(ivectors)?;
            score_from_ivectors(&set, &backend, &loadings, &args.scorer)?
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    save_scores(&matrix, &args.out)?;
    eprintln!(
        "score: {} segments x {} languages ({}) into {}",
        matrix.scores.nrows(),
        matrix.scores.ncols(),
        matrix.scorer,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let matrix = load_scores(&args.scores)?;
    let report = ldiv_core::eval::evaluate(&matrix)?;
    write_text(&args.out, &report.to_key_values())?;
    print!("{}", report.render());
    Ok(())
}
