use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use predictive_asr::confidence::TrainConfig;
use predictive_asr::corpus::{CorpusFormat, SyntheticSpec};
use predictive_asr::eval::{self, GridSpacing, Series};
use predictive_asr::experiment::{
    self, CandidateSource, ConfidenceKind, CorpusSource, ExperimentConfig,
};
use predictive_asr::policy::Selection;
use predictive_asr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "predictive-asr",
    version,
    about = "Predictive ASR prefetching simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic per-user corpus in the native format.
    Gen(GenArgs),
    /// Train the n-gram LM and the confidence model.
    Train {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Directory for model files and the echoed config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep thresholds on the test partition with trained models.
    Eval {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay the sweeps of several eval directories in one chart.
    SweepPlot {
        /// Eval output directories (each holding sweep.csv and oracle.csv).
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    days: Option<f64>,
    #[arg(long)]
    per_day: Option<f64>,
    #[arg(long)]
    habitual_pool: Option<usize>,
    #[arg(long)]
    habitual_mix: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Native,
    Slurp,
}

#[derive(Clone, Copy, ValueEnum)]
enum CandidatesArg {
    Both,
    Lm,
    Personal,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfidenceArg {
    Mlp,
    LmScore,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpacingArg {
    Uniform,
    Quantile,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    RankOrder,
    MaxScore,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus file (or SLURP directory) instead of a synthetic corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "native")]
    format: FormatArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    interval: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    n_best: Option<usize>,
    #[arg(long)]
    max_extra_tokens: Option<usize>,
    #[arg(long, value_enum)]
    candidates: Option<CandidatesArg>,
    /// Drop the personal log-frequency feature.
    #[arg(long)]
    no_personal_feature: bool,
    #[arg(long)]
    history_window: Option<f64>,
    #[arg(long)]
    personal_cap: Option<usize>,
    #[arg(long, value_enum)]
    confidence: Option<ConfidenceArg>,
    /// Hidden layer widths, comma separated; empty for logistic regression.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    max_examples: Option<usize>,
    #[arg(long)]
    threshold_points: Option<usize>,
    #[arg(long, value_enum)]
    spacing: Option<SpacingArg>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    t_ep: Option<f64>,
    #[arg(long)]
    t_response: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.corpus {
            let format = match self.format {
                FormatArg::Native => CorpusFormat::Native,
                FormatArg::Slurp => CorpusFormat::Slurp,
            };
            c.corpus = CorpusSource::File {
                path: path.clone(),
                format,
            };
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
            c.training.seed = seed;
        }
        set(&mut c.decode_interval, self.interval);
        set(&mut c.lm.order, self.order);
        set(&mut c.lm.discount, self.discount);
        set(&mut c.lm.completion.beam_width, self.beam_width);
        set(&mut c.lm.completion.n_best, self.n_best);
        set(&mut c.lm.completion.max_extra_tokens, self.max_extra_tokens);
        if let Some(cands) = self.candidates {
            c.candidates = match cands {
                CandidatesArg::Both => CandidateSource::Both,
                CandidatesArg::Lm => CandidateSource::Lm,
                CandidatesArg::Personal => CandidateSource::Personal,
            };
        }
        if self.no_personal_feature {
            c.personal_feature = false;
        }
        set(&mut c.personal.window, self.history_window);
        set(&mut c.personal.cap, self.personal_cap);
        if let Some(kind) = self.confidence {
            c.confidence = match kind {
                ConfidenceArg::Mlp => ConfidenceKind::Mlp,
                ConfidenceArg::LmScore => ConfidenceKind::LmScore,
            };
        }
        let t: &mut TrainConfig = &mut c.training;
        if let Some(hidden) = &self.hidden {
            t.hidden = hidden.clone();
        }
        set(&mut t.max_epochs, self.epochs);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.ensemble_size, self.ensemble);
        if self.max_examples.is_some() {
            t.max_examples = self.max_examples;
        }
        set(&mut c.thresholds.points, self.threshold_points);
        if let Some(s) = self.spacing {
            c.thresholds.spacing = match s {
                SpacingArg::Uniform => GridSpacing::Uniform,
                SpacingArg::Quantile => GridSpacing::Quantile,
            };
        }
        if let Some(s) = self.selection {
            c.selection = match s {
                SelectionArg::RankOrder => Selection::RankOrder,
                SelectionArg::MaxScore => Selection::MaxScore,
            };
        }
        set(&mut c.latency.t_ep, self.t_ep);
        set(&mut c.latency.t_response, self.t_response);
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        c.latency.validate()?;
        Ok(c)
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: e.line(),
                message: format!("{}: {e}", path.display()),
            })?
        }
        None => SyntheticSpec::default(),
    };
    set(&mut spec.users, args.users);
    set(&mut spec.days, args.days);
    set(&mut spec.utterances_per_day, args.per_day);
    set(&mut spec.habitual_pool, args.habitual_pool);
    set(&mut spec.habitual_mix, args.habitual_mix);
    let corpus = experiment::cmd_gen(&spec, args.seed, &args.out)?;
    println!(
        "wrote {} utterances to {}",
        corpus.len(),
        args.out.display()
    );
    Ok(())
}

fn sweep_plot(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut loaded = Vec::new();
    for dir in inputs {
        let points: Vec<_> = eval::read_csv(&dir.join("sweep.csv"))?
            .into_iter()
            .filter(|p| p.threshold.is_finite())
            .collect();
        let oracle = eval::read_csv(&dir.join("oracle.csv"))?.into_iter().next();
        loaded.push((dir.display().to_string(), points, oracle));
    }
    let series: Vec<Series<'_>> = loaded
        .iter()
        .map(|(name, points, oracle)| Series {
            name,
            points,
            oracle: oracle.as_ref(),
        })
        .collect();
    std::fs::write(out, eval::render_svg(&series)).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(&args),
        Command::Train { experiment, out } => {
            let config = experiment.resolve()?;
            let summary = experiment::cmd_train(&config, &out)?;
            println!(
                "trained on {} confidence examples ({} positive); models in {}",
                summary.train_examples,
                summary.train_positives,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            experiment,
            models,
            out,
        } => {
            let config = experiment.resolve()?;
            let sweep = experiment::cmd_eval(&config, &models, &out)?;
            let best = sweep
                .points
                .iter()
                .max_by(|a, b| a.success_rate.total_cmp(&b.success_rate));
            if let Some(best) = best {
                println!(
                    "max success rate {:.3} at failure rate {:.3} (mean gain {:.0} ms); oracle {:.3}",
                    best.success_rate,
                    best.failure_rate,
                    best.mean_gain_success * 1000.0,
                    sweep.oracle.success_rate
                );
            }
            Ok(())
        }
        Command::SweepPlot { inputs, out } => sweep_plot(&inputs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}
