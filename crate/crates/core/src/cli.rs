//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{build_vocab, load_fewrel, write_fewrel, RelationDataset, Split};
use crate::error::{Error, Result};
use crate::fewshot::EpisodeSpec;
use crate::synth::{generate, SyntheticSpec};
use crate::train::{evaluate_checkpoint, run_ablation, train, write_report_csv, Checkpoint, EvalMethod, TrainConfig};
use crate::viz::{export_embeddings, project, render_scatter, EmbeddingMatrix, Projection, TsneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "lmproto",
    version,
    about = "Few-shot relation classification with large-margin prototypical networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on N-way-K-shot episodes.
    Eval(EvalArgs),
    /// Train and evaluate the four-model ablation grid.
    Ablate(AblateArgs),
    /// Export support-set embeddings of one sampled episode as CSV.
    #[command(name = "export-emb")]
    ExportEmb(ExportArgs),
    /// Project an embedding CSV to 2-D with exact t-SNE.
    Tsne(TsneArgs),
    /// Render a 2-D projection CSV as an SVG scatter plot.
    Plot(PlotArgs),
    /// Run gradient checks and invariant checks.
    Selftest,
    /// Write a synthetic FewRel-format corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// GloVe-format word vectors.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress log file; stdout when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the number of training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Proto,
    Knn,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub nway: usize,
    #[arg(long, default_value_t = 1)]
    pub kshot: usize,
    #[arg(long, default_value_t = 5)]
    pub nquery: usize,
    #[arg(long, default_value_t = 10_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Proto)]
    pub method: MethodArg,
    /// Neighbours for KNN; defaults to K.
    #[arg(long)]
    pub knn_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub holdout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub nway: usize,
    #[arg(long, default_value_t = 40)]
    pub kshot: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving train.json, val.json and unsignaled.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub relations: usize,
    #[arg(long, default_value_t = 60)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn open_log(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(io::stdout()),
    })
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn require(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        Error::Config(format!(
            "no {name} data: pass --{name} or set data.{name} in the config"
        ))
    })
}

fn stdout_err(e: io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Train(a) => {
            let mut config = load_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(n) = a.episodes {
                config.episodes = n;
                config.eval_every = config.eval_every.min(n);
            }
            if a.vectors.is_some() {
                config.data.vectors = a.vectors.clone();
            }
            let train_path = require(a.train, &config.data.train, "train")?;
            let val_path = require(a.val, &config.data.val, "val")?;
            config.data.train = Some(train_path.clone());
            config.data.val = Some(val_path.clone());
            config.validate()?;
            let train_set = load_fewrel(&train_path, Split::Train)?;
            let val_set = load_fewrel(&val_path, Split::Val)?;
            let vocab = build_vocab(
                &[&train_set, &val_set],
                config.data.vectors.as_deref(),
                config.model.word_dim,
                config.model.lowercase,
                config.seed,
            )?;
            let mut log = open_log(a.log.as_deref())?;
            let outcome = train(&config, &train_set, &val_set, &vocab, &mut log)?;
            outcome.checkpoint.save(&a.out)?;
            log::info!(
                "saved {} (best val acc {:.2}% at episode {})",
                a.out.display(),
                outcome.checkpoint.meta.best_val_accuracy.unwrap_or(f64::NAN),
                outcome.checkpoint.meta.best_episode
            );
            Ok(true)
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let data = load_fewrel(&a.data, Split::Test)?;
            let spec = EpisodeSpec::new(a.nway, a.kshot, a.nquery)?;
            let method = match a.method {
                MethodArg::Proto => EvalMethod::Prototype,
                MethodArg::Knn => EvalMethod::Knn(a.knn_k),
            };
            let report = evaluate_checkpoint(&ckpt, &data, &spec, a.episodes, a.seed, method)?;
            println!(
                "{} {}: {:.2} ± {:.2} over {} episodes (seed {})",
                report.model,
                spec.label(),
                report.accuracy,
                report.ci95,
                report.n_episodes,
                report.seed
            );
            if let Some(csv) = &a.csv {
                write_report_csv(&[report.row()], csv)?;
            }
            Ok(true)
        }
        Command::Ablate(a) => {
            let config = load_config(a.config.as_deref())?;
            let train_path = require(a.train, &config.data.train, "train")?;
            let val_path = require(a.val, &config.data.val, "val")?;
            let vectors = a.vectors.or_else(|| config.data.vectors.clone());
            let train_set = load_fewrel(&train_path, Split::Train)?;
            let val_set = load_fewrel(&val_path, Split::Val)?;
            let vocab = build_vocab(
                &[&train_set, &val_set],
                vectors.as_deref(),
                config.model.word_dim,
                config.model.lowercase,
                a.seed,
            )?;
            let mut log = open_log(a.log.as_deref())?;
            let rows = run_ablation(&config, &train_set, &val_set, &vocab, a.holdout, a.seed, &mut log)?;
            write_report_csv(&rows, &a.csv)?;
            Ok(true)
        }
        Command::ExportEmb(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let data = load_fewrel(&a.data, Split::Val)?;
            let m = export_embeddings(&ckpt, &data, a.nway, a.kshot, a.seed)?;
            m.write_csv(
                &a.out,
                &[format!(
                    "model={} data={} n_way={} k_shot={} seed={}",
                    ckpt.model_name(),
                    a.data.display(),
                    a.nway,
                    a.kshot,
                    a.seed
                )],
            )?;
            Ok(true)
        }
        Command::Tsne(a) => {
            let m = EmbeddingMatrix::read_csv(&a.input)?;
            let cfg = TsneConfig {
                perplexity: a.perplexity,
                iterations: a.iters,
                seed: a.seed,
                ..TsneConfig::default()
            };
            let p = project(&m, &cfg)?;
            p.write_csv(
                &a.out,
                &[format!(
                    "t-SNE of {} perplexity={} iterations={} seed={}",
                    a.input.display(),
                    a.perplexity,
                    a.iters,
                    a.seed
                )],
            )?;
            Ok(true)
        }
        Command::Plot(a) => {
            let p = Projection::read_csv(&a.input)?;
            render_scatter(&p.coords, &p.labels, &a.out)?;
            Ok(true)
        }
        Command::Selftest => {
            let mut out = io::stdout();
            let ok = crate::selftest::run_selftest(&mut out)?;
            writeln!(out, "{}", if ok { "selftest passed" } else { "selftest FAILED" }).map_err(stdout_err)?;
            Ok(ok)
        }
        Command::Synth(a) => {
            std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
            let write = |name: &str, d: &RelationDataset| write_fewrel(d, a.out_dir.join(name));
            let train_set = generate(
                &SyntheticSpec::marker(a.relations, a.instances, "T", a.seed),
                Split::Train,
            )?;
            let val_set = generate(
                &SyntheticSpec::marker(a.relations, a.instances, "V", a.seed.wrapping_add(1)).with_markers_of("T"),
                Split::Val,
            )?;
            let unsignaled = generate(
                &SyntheticSpec::unsignaled(a.relations, a.instances, "U", a.seed.wrapping_add(2)),
                Split::Test,
            )?;
            write("train.json", &train_set)?;
            write("val.json", &val_set)?;
            write("unsignaled.json", &unsignaled)?;
            Ok(true)
        }
    }
}
