//! End-to-end experiment wiring behind the CLI: corpus, candidate streams,
//! confidence training, scored sweeps and output files.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{
    extract_features, train_mlp, ConfidenceModel, FeatureSchema, FeatureVector, LabeledSet,
    TrainConfig,
};
use crate::corpus::{
    generate_synthetic, load_corpus, Corpus, CorpusFormat, LoadOptions, Partition, SplitFractions,
    SyntheticSpec, TimingModel, Utterance,
};
use crate::eval::{self, AuditLog, GridSpacing, LatencyConfig, Sweep};
use crate::personal::{
    history_candidates, merge_candidates, personal_logfreq, UserHistory, DEFAULT_CANDIDATE_CAP,
    DEFAULT_WINDOW,
};
use crate::policy::{ScoredCandidate, ScoredTick, ScoredUtterance, Selection};
use crate::predictor::{
    train_ngram, CompletionParams, NgramModel, Prediction, DEFAULT_DISCOUNT, DEFAULT_ORDER,
};
use crate::stream::{stream_partials, PartialHypothesis, DEFAULT_INTERVAL};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const LM_FILE: &str = "lm.json";
pub const CONFIDENCE_FILE: &str = "confidence.json";
pub const AUDIT_FILE: &str = "outcomes.jsonl";

/// Where candidates come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    #[default]
    Both,
    Lm,
    Personal,
}

impl CandidateSource {
    fn lm(self) -> bool {
        self != CandidateSource::Personal
    }

    fn personal(self) -> bool {
        self != CandidateSource::Lm
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    #[default]
    Mlp,
    LmScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic { spec: SyntheticSpec },
    File { path: PathBuf, format: CorpusFormat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
    pub completion: CompletionParams,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: DEFAULT_ORDER,
            discount: DEFAULT_DISCOUNT,
            completion: CompletionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalConfig {
    pub window: f64,
    pub cap: usize,
}

impl Default for PersonalConfig {
    fn default() -> Self {
        PersonalConfig {
            window: DEFAULT_WINDOW,
            cap: DEFAULT_CANDIDATE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub points: usize,
    pub spacing: GridSpacing,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            points: 50,
            spacing: GridSpacing::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    /// Timing and split for file corpora; synthetic corpora carry their own.
    pub timing: TimingModel,
    pub split: SplitFractions,
    pub decode_interval: f64,
    pub lm: LmConfig,
    pub candidates: CandidateSource,
    pub personal_feature: bool,
    pub personal: PersonalConfig,
    pub confidence: ConfidenceKind,
    pub training: TrainConfig,
    pub thresholds: ThresholdConfig,
    pub selection: Selection,
    pub latency: LatencyConfig,
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic {
                spec: SyntheticSpec::default(),
            },
            timing: TimingModel::default(),
            split: SplitFractions::default(),
            decode_interval: DEFAULT_INTERVAL,
            lm: LmConfig::default(),
            candidates: CandidateSource::Both,
            personal_feature: true,
            personal: PersonalConfig::default(),
            confidence: ConfidenceKind::Mlp,
            training: TrainConfig::default(),
            thresholds: ThresholdConfig::default(),
            selection: Selection::RankOrder,
            latency: LatencyConfig::default(),
            seed: 0,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invariant(format!("serializing config: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn feature_schema(&self) -> FeatureSchema {
        if self.personal_feature {
            FeatureSchema::Personalized
        } else {
            FeatureSchema::Base
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::Synthetic { spec } => generate_synthetic(spec, self.seed),
            CorpusSource::File { path, format } => load_corpus(
                path,
                *format,
                &LoadOptions {
                    timing: self.timing,
                    split: self.split,
                },
            ),
        }
    }

    /// Runs `f` inside a pool sized by `threads`.
    pub fn with_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(f()),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map(|pool| pool.install(f))
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}"))),
        }
    }
}

/// Candidate-generation settings shared by training and evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSetup<'a> {
    pub lm: &'a NgramModel,
    pub completion: CompletionParams,
    pub interval: f64,
    pub source: CandidateSource,
    pub window: f64,
    pub cap: usize,
    pub schema: FeatureSchema,
}

impl<'a> CandidateSetup<'a> {
    pub fn from_config(config: &ExperimentConfig, lm: &'a NgramModel) -> Self {
        CandidateSetup {
            lm,
            completion: config.lm.completion,
            interval: config.decode_interval,
            source: config.candidates,
            window: config.personal.window,
            cap: config.personal.cap.max(1),
            schema: config.feature_schema(),
        }
    }
}

/// Merged, featurized candidates of one non-final partial.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTick {
    pub partial: PartialHypothesis,
    pub candidates: Vec<(Prediction, FeatureVector)>,
}

/// Calls `f` on the candidate ticks of every utterance in `partition`,
/// returning results in corpus order.
///
/// Users are processed in parallel; within a user, utterances are visited
/// chronologically and each only sees the history recorded before it.
pub fn map_partition<R, F>(
    corpus: &Corpus,
    partition: Partition,
    setup: &CandidateSetup<'_>,
    f: F,
) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize, &Utterance, &[CandidateTick]) -> Result<R> + Sync,
{
    setup.completion.validate()?;
    let utterances = corpus.utterances();
    let targets = corpus.partition(partition);
    let mut partials: Vec<Option<Vec<PartialHypothesis>>> = vec![None; utterances.len()];
    for &id in targets {
        partials[id] = Some(stream_partials(&utterances[id], setup.interval)?);
    }

    // Completions depend only on the prefix; compute each distinct prefix once.
    let lm_cache: HashMap<&[String], Vec<Prediction>> = if setup.source.lm() {
        let mut prefixes: HashSet<&[String]> = HashSet::new();
        for &id in targets {
            for p in partials[id].iter().flatten().filter(|p| !p.is_final) {
                prefixes.insert(p.tokens(&utterances[id]));
            }
        }
        let mut prefixes: Vec<&[String]> = prefixes.into_iter().collect();
        prefixes.sort_unstable();
        prefixes
            .into_par_iter()
            .map(|prefix| Ok((prefix, setup.lm.complete(prefix, &setup.completion)?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };

    let per_user: Vec<Vec<R>> = corpus
        .user_ranges()
        .into_par_iter()
        .map(|range| {
            let mut history = UserHistory::new(utterances[range.start].user_id(), setup.window);
            let mut out = Vec::new();
            for id in range {
                let u = &utterances[id];
                if let Some(partials) = &partials[id] {
                    let ticks = utterance_ticks(u, partials, &history, &lm_cache, setup)?;
                    out.push(f(id, u, &ticks)?);
                }
                history.record(u.wallclock(), u.tokens().to_vec());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_user.into_iter().flatten().collect())
}

/// A merged candidate with its personal log-frequency, if the schema uses it.
type Merged = (Prediction, Option<f64>);

fn utterance_ticks(
    u: &Utterance,
    partials: &[PartialHypothesis],
    history: &UserHistory,
    lm_cache: &HashMap<&[String], Vec<Prediction>>,
    setup: &CandidateSetup<'_>,
) -> Result<Vec<CandidateTick>> {
    let now = u.wallclock();
    let mut ticks = Vec::with_capacity(partials.len());
    let mut merged: Option<(usize, Vec<Merged>)> = None;
    for partial in partials.iter().filter(|p| !p.is_final) {
        let prefix = partial.tokens(u);
        if merged.as_ref().map(|(len, _)| *len) != Some(partial.prefix_len) {
            let lm = if setup.source.lm() {
                lm_cache.get(prefix).cloned().ok_or_else(|| {
                    Error::Invariant(format!("no cached completion for prefix {prefix:?}"))
                })?
            } else {
                Vec::new()
            };
            let personal = if setup.source.personal() {
                history_candidates(history, now, prefix, setup.cap, setup.lm)
            } else {
                Vec::new()
            };
            let candidates = merge_candidates(lm, personal)
                .into_iter()
                .map(|p| {
                    let feature = (setup.schema == FeatureSchema::Personalized)
                        .then(|| personal_logfreq(history, now, &p.tokens, prefix));
                    (p, feature)
                })
                .collect();
            merged = Some((partial.prefix_len, candidates));
        }
        let (_, candidates) = merged.as_ref().expect("set above");
        let candidates = candidates
            .iter()
            .map(|(p, feature)| Ok((p.clone(), extract_features(p, partial, *feature)?)))
            .collect::<Result<_>>()?;
        ticks.push(CandidateTick {
            partial: partial.clone(),
            candidates,
        });
    }
    Ok(ticks)
}

/// One labeled example per (non-final partial, candidate with at least one
/// predicted word); the label is an exact match with the final hypothesis.
pub fn build_training_set(
    corpus: &Corpus,
    partition: Partition,
    setup: &CandidateSetup<'_>,
) -> Result<LabeledSet> {
    let rows = map_partition(corpus, partition, setup, |_, u, ticks| {
        Ok(ticks
            .iter()
            .flat_map(|t| &t.candidates)
            .filter(|(p, _)| p.extra_words() >= 1)
            .map(|(p, f)| (f.to_vec(), p.tokens.as_slice() == u.tokens()))
            .collect::<Vec<_>>())
    })?;
    let (rows, labels): (Vec<Vec<f64>>, Vec<bool>) = rows.into_iter().flatten().unzip();
    if rows.is_empty() {
        return Err(Error::Training(format!(
            "no {} examples with predicted words",
            partition.as_str()
        )));
    }
    LabeledSet::from_rows(setup.schema, &rows, &labels)
}

/// Scores every candidate of `partition` for threshold sweeps.
pub fn score_streams(
    corpus: &Corpus,
    partition: Partition,
    setup: &CandidateSetup<'_>,
    model: &ConfidenceModel,
) -> Result<Vec<ScoredUtterance>> {
    if let Some(schema) = model.schema() {
        if schema != setup.schema {
            return Err(Error::SchemaMismatch(format!(
                "confidence model uses {schema:?} features but the configuration asks for {:?}",
                setup.schema
            )));
        }
    }
    map_partition(corpus, partition, setup, |id, u, ticks| {
        let mut scored: Vec<ScoredTick> = ticks
            .iter()
            .map(|t| {
                let candidates = t
                    .candidates
                    .iter()
                    .map(|(p, f)| Ok(ScoredCandidate::new(p, model.score(f)?, u.tokens())))
                    .collect::<Result<_>>()?;
                Ok(ScoredTick {
                    reveal_time: t.partial.reveal_time,
                    is_final: false,
                    candidates,
                })
            })
            .collect::<Result<_>>()?;
        scored.push(ScoredTick {
            reveal_time: u.end_of_speech(),
            is_final: true,
            candidates: Vec::new(),
        });
        Ok(ScoredUtterance {
            utterance_id: id,
            end_of_speech: u.end_of_speech(),
            ticks: scored,
        })
    })
}

/// Scores of candidates the policy could act on.
pub fn eligible_scores(streams: &[ScoredUtterance]) -> Vec<f64> {
    streams
        .iter()
        .flat_map(|u| u.ticks.iter().filter(|t| !t.is_final))
        .flat_map(|t| t.candidates.iter().filter(|c| c.extra_words >= 1))
        .map(|c| c.score)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub lm: NgramModel,
    pub confidence: ConfidenceModel,
    pub train_examples: usize,
    pub dev_examples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSummary {
    pub train_examples: usize,
    pub train_positives: usize,
    pub dev_examples: usize,
    pub vocabulary: usize,
}

pub fn train(
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<(TrainedModels, TrainingSummary)> {
    for p in [Partition::Train, Partition::Test] {
        if corpus.partition(p).is_empty() {
            return Err(Error::invalid(
                "corpus",
                format!("{} partition is empty", p.as_str()),
            ));
        }
    }
    let lm = train_ngram(
        corpus,
        Partition::Train,
        config.lm.order,
        config.lm.discount,
    )?;
    let setup = CandidateSetup::from_config(config, &lm);
    let train_set = build_training_set(corpus, Partition::Train, &setup)?;
    let dev_set = if corpus.partition(Partition::Dev).is_empty() {
        None
    } else {
        Some(build_training_set(corpus, Partition::Dev, &setup)?)
    };
    log::info!(
        "confidence training set: {} examples ({} positive), dev {}",
        train_set.len(),
        train_set.positives(),
        dev_set.as_ref().map_or(0, LabeledSet::len)
    );
    let confidence = match config.confidence {
        ConfidenceKind::LmScore => ConfidenceModel::LmScorePassthrough,
        ConfidenceKind::Mlp => train_mlp(&train_set, dev_set.as_ref(), &config.training)?,
    };
    let summary = TrainingSummary {
        train_examples: train_set.len(),
        train_positives: train_set.positives(),
        dev_examples: dev_set.as_ref().map_or(0, LabeledSet::len),
        vocabulary: lm.words().len(),
    };
    Ok((
        TrainedModels {
            lm,
            confidence,
            train_examples: summary.train_examples,
            dev_examples: summary.dev_examples,
        },
        summary,
    ))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub streams: Vec<ScoredUtterance>,
    pub thresholds: Vec<f64>,
    pub sweep: Sweep,
}

pub fn evaluate(
    config: &ExperimentConfig,
    corpus: &Corpus,
    models: &TrainedModels,
    audit: Option<&Path>,
) -> Result<Evaluation> {
    if corpus.partition(Partition::Test).is_empty() {
        return Err(Error::invalid("corpus", "test partition is empty"));
    }
    let setup = CandidateSetup::from_config(config, &models.lm);
    let streams = score_streams(corpus, Partition::Test, &setup, &models.confidence)?;
    let thresholds = eval::threshold_grid(
        &eligible_scores(&streams),
        config.thresholds.points,
        config.thresholds.spacing,
    );
    let mut log = audit.map(AuditLog::create).transpose()?;
    let sweep = eval::sweep(
        &streams,
        &thresholds,
        config.selection,
        &config.latency,
        log.as_mut(),
    )?;
    Ok(Evaluation {
        streams,
        thresholds,
        sweep,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates a synthetic corpus file.
pub fn cmd_gen(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Corpus> {
    let corpus = generate_synthetic(spec, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    corpus.write_native(out)?;
    Ok(corpus)
}

/// Trains both models and writes them with the echoed config to `dir`.
pub fn cmd_train(config: &ExperimentConfig, dir: &Path) -> Result<TrainingSummary> {
    config.with_pool(|| {
        ensure_dir(dir)?;
        config.write(&dir.join(CONFIG_FILE))?;
        let corpus = config.load_corpus()?;
        let (models, summary) = train(config, &corpus)?;
        models.lm.save(&dir.join(LM_FILE))?;
        models.confidence.save(&dir.join(CONFIDENCE_FILE))?;
        let text =
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Invariant(e.to_string()))?;
        let path = dir.join("training_summary.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    })?
}

pub fn load_models(dir: &Path) -> Result<TrainedModels> {
    Ok(TrainedModels {
        lm: NgramModel::load(&dir.join(LM_FILE))?,
        confidence: ConfidenceModel::load(&dir.join(CONFIDENCE_FILE))?,
        train_examples: 0,
        dev_examples: 0,
    })
}

/// Sweeps the test partition with trained models and writes the report,
/// audit log and echoed config to `out`.
pub fn cmd_eval(config: &ExperimentConfig, model_dir: &Path, out: &Path) -> Result<Sweep> {
    config.with_pool(|| {
        ensure_dir(out)?;
        config.write(&out.join(CONFIG_FILE))?;
        let models = load_models(model_dir)?;
        let corpus = config.load_corpus()?;
        let evaluation = evaluate(config, &corpus, &models, Some(&out.join(AUDIT_FILE)))?;
        let name = format!(
            "{:?} candidates, {:?}",
            config.candidates, config.confidence
        );
        eval::report(&evaluation.sweep, &name, out)?;
        Ok(evaluation.sweep)
    })?
}
