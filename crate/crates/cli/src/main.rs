use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn, LevelFilter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xpcs_core::autoenc::{train, ModelConfig};
use xpcs_core::corrsim::{synth_two_time, ScenarioSampler, ScenarioSpec, TwoTimeCorrelation};
use xpcs_core::denoiser::{denoise, DEFAULT_SLIDING_STEP};
use xpcs_core::flow::io::{
    read_matrix, read_weights, write_anomaly_report, write_history_csv, write_matrix, write_report,
    write_truth_csv, write_weights, ModelArtifacts,
};
use xpcs_core::flow::{analyze_offline, analyze_online, detect_anomalies, AnalysisConfig, AnomalyConfig};
use xpcs_core::prep::{augment_corpus, Split};
use xpcs_core::uncert::training_acc_kde;
use xpcs_core::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_ANOMALOUS: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "xpcs", version, about = "Denoise and analyze XPCS two-time correlation functions")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize clean and noisy 2TCFs from a scenario JSON file.
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a training corpus of random ageing scenarios.
    SynthCorpus {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoising autoencoder on a directory of matrices.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        kernel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Denoise a matrix of any size.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step of the sliding window along the diagonal.
        #[arg(long, default_value_t = DEFAULT_SLIDING_STEP)]
        step: usize,
    },
    /// Denoise, score, fit and refit one matrix.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "offline")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare series in the latent space of a model.
    Detect {
        #[arg(long, num_args = 1.., required = true)]
        series: Vec<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 5.0)]
        flag_multiple: f64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn matrix_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x == "xtcf"));
    files.sort();
    Ok(files)
}

/// `train/` and `validation/` subdirectories when present, otherwise every
/// tenth file of the directory goes to validation.
fn load_corpus(dir: &Path) -> Result<Vec<(TwoTimeCorrelation, Split)>, Error> {
    let (train_dir, val_dir) = (dir.join("train"), dir.join("validation"));
    let mut out = Vec::new();
    if train_dir.is_dir() {
        for p in matrix_files(&train_dir)? {
            out.push((read_matrix(p)?, Split::Train));
        }
        if val_dir.is_dir() {
            for p in matrix_files(&val_dir)? {
                out.push((read_matrix(p)?, Split::Validation));
            }
        }
    } else {
        for (i, p) in matrix_files(dir)?.into_iter().enumerate() {
            let split = if i % 10 == 9 { Split::Validation } else { Split::Train };
            out.push((read_matrix(p)?, split));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no .xtcf matrices in {}", dir.display())));
    }
    Ok(out)
}

fn history_path(weights: &Path) -> PathBuf {
    let stem = weights.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    weights.with_file_name(format!("{stem}.history.csv"))
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Synth { scenario, out } => {
            let spec: ScenarioSpec = read_json(&scenario)?;
            let (clean, noisy) = synth_two_time(&spec)?;
            fs::create_dir_all(&out)?;
            write_matrix(out.join("clean.xtcf"), &clean)?;
            write_matrix(out.join("noisy.xtcf"), &noisy)?;
            write_truth_csv(out.join("truth.csv"), &spec.truth_table())?;
        }
        Command::SynthCorpus { count, frames, noise, seed, out } => {
            let sampler = ScenarioSampler::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for sub in ["train", "validation"] {
                fs::create_dir_all(out.join(sub))?;
            }
            for i in 0..count {
                let spec = sampler.sample(&mut rng, frames, noise);
                let (_, noisy) = synth_two_time(&spec)?;
                let sub = if i % 10 == 9 { "validation" } else { "train" };
                write_matrix(out.join(sub).join(format!("{i:05}.xtcf")), &noisy)?;
            }
            info!("wrote {count} matrices to {}", out.display());
        }
        Command::Train { corpus, kernel, seed, out, epochs, learning_rate } => {
            let sources = load_corpus(&corpus)?;
            let corpus = augment_corpus(&sources);
            info!(
                "{} crops ({} validation) from {} matrices",
                corpus.len(),
                corpus.count(Split::Validation),
                sources.len()
            );
            let mut cfg = ModelConfig { kernel_size: kernel, seed, ..ModelConfig::default() };
            if let Some(e) = epochs {
                cfg.max_epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            let (weights, history, stats) = train(&corpus, &cfg)?;
            let inputs: Vec<_> = corpus.split(Split::Train).map(|e| e.values.clone()).collect();
            let kde = training_acc_kde(&inputs, &weights)?;
            write_weights(
                &out,
                &ModelArtifacts { weights, latent_stats: Some(stats), acc_kde: Some(kde) },
            )?;
            write_history_csv(history_path(&out), &history.epochs)?;
            let chosen = history.chosen();
            info!("kept epoch {} (validation loss {:.5})", chosen.epoch, chosen.validation_loss);
        }
        Command::Denoise { input, weights, out, step } => {
            let c2 = read_matrix(&input)?;
            let model = read_weights(&weights)?;
            write_matrix(&out, &denoise(&c2, &model.weights, step)?)?;
        }
        Command::Analyze { input, weights, config, mode, out } => {
            let cfg: AnalysisConfig = match config {
                Some(p) => read_json(&p)?,
                None => AnalysisConfig::default(),
            };
            let raw = read_matrix(&input)?;
            let model = read_weights(&weights)?;
            let (Some(stats), Some(kde)) = (&model.latent_stats, &model.acc_kde) else {
                return Err(Error::InvalidArgument(
                    "weights file carries no latent statistics or ACC density".into(),
                ));
            };
            let report = match mode {
                ModeArg::Online => analyze_online(&raw, &model.weights, stats, kde, &cfg)?,
                ModeArg::Offline => analyze_offline(&raw, &model.weights, stats, kde, &cfg)?,
            };
            write_report(&out, &report)?;
            if report.anomalous {
                warn!("anomalous input: only the raw matrix was fitted");
                return Ok(EXIT_ANOMALOUS);
            }
        }
        Command::Detect { series, weights, out, reference, stride, flag_multiple } => {
            let model = read_weights(&weights)?;
            let matrices = series.iter().map(read_matrix).collect::<Result<Vec<_>, _>>()?;
            let cfg = AnomalyConfig { stride, reference, flag_multiple };
            let report = detect_anomalies(&matrices, &model.weights, &cfg)?;
            write_anomaly_report(&out, &report)?;
            for c in report.clusters.iter().filter(|c| c.flagged) {
                warn!(
                    "series {} ({}) flagged at {:.2} reference spreads",
                    c.index, c.roi_label, c.normalized_distance
                );
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.root() {
                Error::TrainingDiverged { .. } => EXIT_DIVERGED,
                _ => EXIT_INVALID,
            })
        }
    }
}
