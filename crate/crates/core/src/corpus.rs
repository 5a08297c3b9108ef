//! Timestamped per-user transcript corpora: loading, synthetic generation,
//! partitioning and the native line-delimited JSON format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Dev, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Test => "test",
        }
    }
}

/// Lowercase, drop punctuation other than apostrophes, split on whitespace.
///
/// Tokens left without any alphanumeric character are discarded.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let token: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect();
            token.chars().any(char::is_alphanumeric).then_some(token)
        })
        .collect()
}

/// Assigns per-token end times when a record carries none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimingModel {
    /// Every word lasts the same number of seconds.
    Uniform { seconds_per_word: f64 },
    /// Utterance lasts `len / words_per_second`; each word gets a share
    /// proportional to its character count.
    Proportional { words_per_second: f64 },
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel::Uniform {
            seconds_per_word: 0.3,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        let rate = match *self {
            TimingModel::Uniform { seconds_per_word } => seconds_per_word,
            TimingModel::Proportional { words_per_second } => words_per_second,
        };
        if rate.is_finite() && rate > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "timing model rate must be positive and finite, got {rate}"
            )))
        }
    }

    pub fn end_times(&self, tokens: &[String]) -> Vec<f64> {
        match *self {
            TimingModel::Uniform { seconds_per_word } => (1..=tokens.len())
                .map(|i| i as f64 * seconds_per_word)
                .collect(),
            TimingModel::Proportional { words_per_second } => {
                let duration = tokens.len() as f64 / words_per_second;
                let total: usize = tokens.iter().map(|t| t.chars().count()).sum();
                let mut acc = 0usize;
                tokens
                    .iter()
                    .map(|t| {
                        acc += t.chars().count();
                        duration * acc as f64 / total as f64
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    user_id: String,
    wallclock: f64,
    tokens: Vec<String>,
    token_end_times: Vec<f64>,
    partition: Partition,
}

impl Utterance {
    /// Validates all utterance invariants; `record` labels errors.
    pub fn new(
        record: &str,
        user_id: impl Into<String>,
        wallclock: f64,
        tokens: Vec<String>,
        token_end_times: Vec<f64>,
        partition: Partition,
    ) -> Result<Self> {
        if !wallclock.is_finite() {
            return Err(Error::invalid(record, "wallclock is not finite"));
        }
        if tokens.is_empty() {
            return Err(Error::invalid(record, "empty transcript"));
        }
        for token in &tokens {
            if token.is_empty()
                || token.chars().any(char::is_whitespace)
                || token.chars().any(char::is_uppercase)
            {
                return Err(Error::invalid(
                    record,
                    format!("token {token:?} is not normalized"),
                ));
            }
        }
        if token_end_times.len() != tokens.len() {
            return Err(Error::invalid(
                record,
                format!(
                    "{} token end times for {} tokens",
                    token_end_times.len(),
                    tokens.len()
                ),
            ));
        }
        let mut prev = 0.0;
        for &t in &token_end_times {
            if !t.is_finite() || t <= prev {
                return Err(Error::invalid(
                    record,
                    "token end times must be positive and strictly increasing",
                ));
            }
            prev = t;
        }
        Ok(Utterance {
            user_id: user_id.into(),
            wallclock,
            tokens,
            token_end_times,
            partition,
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn wallclock(&self) -> f64 {
        self.wallclock
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_end_times(&self) -> &[f64] {
        &self.token_end_times
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    /// Seconds from utterance start to the end of the last word.
    pub fn end_of_speech(&self) -> f64 {
        *self
            .token_end_times
            .last()
            .expect("nonempty by construction")
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Fractions of each user's chronological stream assigned to train and dev;
/// the remainder is test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.5,
            dev: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.train)
            && (0.0..=1.0).contains(&self.dev)
            && self.train + self.dev <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "split fractions train={} dev={} must lie in [0,1] and sum to at most 1",
                self.train, self.dev
            )))
        }
    }

    /// Partition of the `index`-th of `n` chronologically ordered utterances.
    pub fn assign(&self, index: usize, n: usize) -> Partition {
        let n_train = (n as f64 * self.train).floor() as usize;
        let n_dev = (n as f64 * self.dev).floor() as usize;
        if index < n_train {
            Partition::Train
        } else if index < n_train + n_dev {
            Partition::Dev
        } else {
            Partition::Test
        }
    }
}

/// Immutable corpus sorted by `(user_id, wallclock)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    partitions: [Vec<usize>; 3],
}

impl Corpus {
    pub fn new(mut utterances: Vec<Utterance>) -> Self {
        // Stable: equal keys keep their input order.
        utterances.sort_by(|a, b| {
            a.user_id
                .cmp(&b.user_id)
                .then(a.wallclock.total_cmp(&b.wallclock))
        });
        let mut partitions: [Vec<usize>; 3] = Default::default();
        for (i, u) in utterances.iter().enumerate() {
            partitions[u.partition as usize].push(i);
        }
        Corpus {
            utterances,
            partitions,
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Utterance> {
        self.utterances.get(id)
    }

    /// Utterance ids in one partition, in corpus order.
    pub fn partition(&self, partition: Partition) -> &[usize] {
        &self.partitions[partition as usize]
    }

    /// Contiguous index ranges, one per user, in corpus order.
    pub fn user_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = Vec::new();
        let mut start = 0;
        for i in 1..=self.utterances.len() {
            if i == self.utterances.len()
                || self.utterances[i].user_id != self.utterances[start].user_id
            {
                ranges.push(start..i);
                start = i;
            }
        }
        ranges
    }

    /// Utterances of the same user strictly before `wallclock`.
    pub fn user_history_before<'a>(
        &'a self,
        user_id: &'a str,
        wallclock: f64,
    ) -> impl Iterator<Item = &'a Utterance> + 'a {
        let start = self
            .utterances
            .partition_point(|u| u.user_id.as_str() < user_id);
        self.utterances[start..]
            .iter()
            .take_while(move |u| u.user_id == user_id)
            .filter(move |u| u.wallclock < wallclock)
    }

    pub fn write_native(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for u in &self.utterances {
            let record = NativeRecord {
                user_id: u.user_id.clone(),
                wallclock: u.wallclock,
                text: u.text(),
                token_end_times: Some(u.token_end_times.clone()),
                partition: Some(u.partition),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Invariant(format!("serializing corpus: {e}")))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Native,
    Slurp,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(CorpusFormat::Native),
            "slurp" => Ok(CorpusFormat::Slurp),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format {other:?} (expected native or slurp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub timing: TimingModel,
    /// Used for records that carry no explicit partition.
    pub split: SplitFractions,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeRecord {
    user_id: String,
    wallclock: f64,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_end_times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<Partition>,
}

/// Per-user chronological split for utterances that were loaded without a
/// partition label.
fn assign_missing_partitions(
    pending: Vec<(Utterance, bool)>,
    split: &SplitFractions,
) -> Vec<Utterance> {
    let mut by_user: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (u, labeled)) in pending.iter().enumerate() {
        if !labeled {
            by_user.entry(u.user_id.clone()).or_default().push(i);
        }
    }
    let mut pending = pending;
    for ids in by_user.values_mut() {
        ids.sort_by(|&a, &b| pending[a].0.wallclock.total_cmp(&pending[b].0.wallclock));
        let n = ids.len();
        for (rank, &i) in ids.iter().enumerate() {
            pending[i].0.partition = split.assign(rank, n);
        }
    }
    pending.into_iter().map(|(u, _)| u).collect()
}

pub fn load_corpus(path: &Path, format: CorpusFormat, options: &LoadOptions) -> Result<Corpus> {
    options.timing.validate()?;
    options.split.validate()?;
    match format {
        CorpusFormat::Native => load_native(path, options),
        CorpusFormat::Slurp => load_slurp(path, options),
    }
}

fn load_native(path: &Path, options: &LoadOptions) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pending = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: NativeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = format!("line {line_no}");
        let tokens = normalize(&record.text);
        let times = match record.token_end_times {
            Some(times) => times,
            None => options.timing.end_times(&tokens),
        };
        let labeled = record.partition.is_some();
        let u = Utterance::new(
            &label,
            record.user_id,
            record.wallclock,
            tokens,
            times,
            record.partition.unwrap_or(Partition::Train),
        )?;
        pending.push((u, labeled));
    }
    Ok(Corpus::new(assign_missing_partitions(
        pending,
        &options.split,
    )))
}

/// Seconds between consecutive synthetic wallclocks of one SLURP speaker.
const SLURP_WALLCLOCK_STEP: f64 = 60.0;

#[derive(Debug, Deserialize)]
struct SlurpRecording {
    file: String,
}

#[derive(Debug, Deserialize)]
struct SlurpRecord {
    slurp_id: serde_json::Value,
    sentence: String,
    #[serde(default)]
    recordings: Vec<SlurpRecording>,
    #[serde(default)]
    user_id: Option<String>,
}

/// Speaker key from a recording file name such as `audio-1434542201-headset.flac`.
fn slurp_speaker(record: &SlurpRecord) -> String {
    if let Some(user) = &record.user_id {
        return user.clone();
    }
    match record.recordings.first() {
        Some(rec) => {
            let stem = rec.file.split('.').next().unwrap_or(&rec.file);
            let stem = stem.strip_prefix("audio-").unwrap_or(stem);
            let stem = stem.split('-').next().unwrap_or(stem);
            format!("slurp-{stem}")
        }
        None => format!("slurp-record-{}", record.slurp_id),
    }
}

fn slurp_partition_for(path: &Path) -> Partition {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    if name.contains("train") {
        Partition::Train
    } else if name.contains("dev") {
        Partition::Dev
    } else {
        Partition::Test
    }
}

/// Reads SLURP text metadata (`train.jsonl`, `devel.jsonl`, `test.jsonl`).
///
/// `path` may be one file or a directory holding any of the three.
fn load_slurp(path: &Path, options: &LoadOptions) -> Result<Corpus> {
    let files: Vec<_> = if path.is_dir() {
        ["train.jsonl", "devel.jsonl", "test.jsonl"]
            .iter()
            .map(|f| path.join(f))
            .filter(|p| p.exists())
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::invalid(
            path.display().to_string(),
            "no SLURP jsonl files found",
        ));
    }
    let mut utterances = Vec::new();
    let mut next_clock: BTreeMap<String, f64> = BTreeMap::new();
    for file_path in files {
        let partition = slurp_partition_for(&file_path);
        let file = File::open(&file_path).map_err(|e| Error::io(&file_path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SlurpRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let label = format!("slurp_id {}", record.slurp_id);
            let tokens = normalize(&record.sentence);
            let times = options.timing.end_times(&tokens);
            let user = slurp_speaker(&record);
            let clock = next_clock.entry(user.clone()).or_insert(0.0);
            let wallclock = *clock;
            *clock += SLURP_WALLCLOCK_STEP;
            utterances.push(Utterance::new(
                &label, user, wallclock, tokens, times, partition,
            )?);
        }
    }
    Ok(Corpus::new(utterances))
}

/// Template grammar for synthetic requests. `{slot}` placeholders are filled
/// uniformly from the named slot list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub templates: Vec<String>,
    pub slots: BTreeMap<String, Vec<String>>,
}

impl Default for Grammar {
    fn default() -> Self {
        let templates = [
            "what is the weather {when}",
            "what is the weather in {city}",
            "what is the weather in {city} {when}",
            "play {artist}",
            "play some {genre} music",
            "play {artist} on {service}",
            "set a timer for {number} minutes",
            "set an alarm for {number} {ampm}",
            "turn {onoff} the {room} {device}",
            "turn the {room} {device} {onoff}",
            "call {contact}",
            "what time is it",
            "what time is it in {city}",
            "remind me to {task} {when}",
            "add {item} to my shopping list",
            "tell me a joke",
            "what's on my calendar {when}",
            "set the volume to {number}",
            "how long will it take to get to {place}",
            "read my messages from {contact}",
        ];
        let slot = |words: &[&str]| words.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let mut slots = BTreeMap::new();
        slots.insert(
            "when".into(),
            slot(&[
                "today",
                "tomorrow",
                "tonight",
                "this weekend",
                "this morning",
                "on monday",
                "on friday",
            ]),
        );
        slots.insert(
            "city".into(),
            slot(&[
                "seattle", "boston", "london", "paris", "berlin", "tokyo", "new york", "chicago",
                "denver", "austin",
            ]),
        );
        slots.insert(
            "artist".into(),
            slot(&[
                "taylor swift",
                "the beatles",
                "miles davis",
                "adele",
                "coldplay",
                "drake",
                "beyonce",
                "radiohead",
                "queen",
                "nirvana",
            ]),
        );
        slots.insert(
            "genre".into(),
            slot(&["jazz", "rock", "classical", "country", "pop", "hip hop"]),
        );
        slots.insert("service".into(), slot(&["spotify", "pandora"]));
        slots.insert(
            "number".into(),
            slot(&[
                "one", "two", "three", "five", "six", "seven", "eight", "ten", "fifteen", "twenty",
                "thirty",
            ]),
        );
        slots.insert("ampm".into(), slot(&["am", "pm"]));
        slots.insert("onoff".into(), slot(&["on", "off"]));
        slots.insert(
            "room".into(),
            slot(&["living room", "kitchen", "bedroom", "office", "garage"]),
        );
        slots.insert(
            "device".into(),
            slot(&["light", "lights", "lamp", "fan", "heater", "tv"]),
        );
        slots.insert(
            "contact".into(),
            slot(&[
                "mom",
                "dad",
                "john",
                "sarah",
                "grandma",
                "the office",
                "alex",
            ]),
        );
        slots.insert(
            "task".into(),
            slot(&[
                "take out the trash",
                "buy milk",
                "water the plants",
                "pay the bills",
                "walk the dog",
            ]),
        );
        slots.insert(
            "item".into(),
            slot(&["milk", "eggs", "bread", "apples", "coffee", "butter"]),
        );
        slots.insert(
            "place".into(),
            slot(&["work", "the airport", "downtown", "the gym", "school"]),
        );
        Grammar {
            templates: templates.iter().map(|t| t.to_string()).collect(),
            slots,
        }
    }
}

impl Grammar {
    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::InvalidArgument("grammar has no templates".into()));
        }
        for t in &self.templates {
            for name in slot_names(t) {
                match self.slots.get(name) {
                    Some(fillers) if !fillers.is_empty() => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "template {t:?} uses undefined or empty slot {{{name}}}"
                        )))
                    }
                }
            }
            if normalize(&t.replace(['{', '}'], " ")).is_empty() {
                return Err(Error::InvalidArgument(format!("template {t:?} is empty")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<String> {
        let template = self.templates.choose(rng).expect("validated nonempty");
        let mut text = String::new();
        let mut rest = template.as_str();
        while let Some(open) = rest.find('{') {
            text.push_str(&rest[..open]);
            let close = open + rest[open..].find('}').expect("balanced braces");
            let name = &rest[open + 1..close];
            text.push_str(self.slots[name].choose(rng).expect("validated nonempty"));
            rest = &rest[close + 1..];
        }
        text.push_str(rest);
        normalize(&text)
    }
}

fn slot_names(template: &str) -> impl Iterator<Item = &str> {
    template
        .split('{')
        .skip(1)
        .filter_map(|s| s.split('}').next())
}

/// Parameters for a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub days: f64,
    pub utterances_per_day: f64,
    /// Distinct habitual phrases per user.
    pub habitual_pool: usize,
    /// Probability that an utterance is drawn from the user's habitual pool.
    pub habitual_mix: f64,
    pub grammar: Grammar,
    pub timing: TimingModel,
    pub split: SplitFractions,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 200,
            days: 28.0,
            utterances_per_day: 4.5,
            habitual_pool: 6,
            habitual_mix: 0.5,
            grammar: Grammar::default(),
            timing: TimingModel::default(),
            split: SplitFractions::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least one user".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.habitual_mix) {
            return Err(Error::InvalidArgument(format!(
                "habitual mix {} outside [0, 1]",
                self.habitual_mix
            )));
        }
        if self.habitual_mix > 0.0 && self.habitual_pool == 0 {
            return Err(Error::InvalidArgument(
                "habitual mix > 0 needs a nonempty habitual pool".into(),
            ));
        }
        if !(self.days > 0.0 && self.days.is_finite())
            || !(self.utterances_per_day > 0.0 && self.utterances_per_day.is_finite())
        {
            return Err(Error::InvalidArgument(
                "days and utterances per day must be positive".into(),
            ));
        }
        self.timing.validate()?;
        self.split.validate()?;
        self.grammar.validate()
    }

    pub fn utterances_per_user(&self) -> usize {
        ((self.days * self.utterances_per_day).round() as usize).max(1)
    }
}

/// A generated corpus plus, per utterance id, whether it was drawn from the
/// speaker's habitual pool.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub habitual: Vec<bool>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    generate_synthetic_labeled(spec, seed).map(|s| s.corpus)
}

pub fn generate_synthetic_labeled(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_user = spec.utterances_per_user();
    let span = spec.days * 86_400.0;
    let width = spec.users.to_string().len().max(4);

    // Zipf-like preference over each user's habits.
    let habit_weights: Vec<f64> = (1..=spec.habitual_pool.max(1))
        .map(|r| 1.0 / r as f64)
        .collect();
    let habit_dist = WeightedIndex::new(&habit_weights).expect("positive weights");

    let mut utterances = Vec::with_capacity(spec.users * per_user);
    let mut habitual = Vec::with_capacity(spec.users * per_user);
    for user in 0..spec.users {
        let user_id = format!("user{user:0width$}");
        let mut pool: Vec<Vec<String>> = Vec::with_capacity(spec.habitual_pool);
        let mut attempts = 0;
        while pool.len() < spec.habitual_pool {
            let phrase = spec.grammar.sample(&mut rng);
            attempts += 1;
            // Small grammars may not have enough distinct phrases.
            if !pool.contains(&phrase) || attempts > 100 * spec.habitual_pool {
                pool.push(phrase);
            }
        }
        let mut clocks: Vec<f64> = (0..per_user).map(|_| rng.gen_range(0.0..span)).collect();
        clocks.sort_by(f64::total_cmp);
        for (k, wallclock) in clocks.into_iter().enumerate() {
            let from_habit = !pool.is_empty() && rng.gen_bool(spec.habitual_mix);
            let tokens = if from_habit {
                pool[habit_dist.sample(&mut rng) % pool.len()].clone()
            } else {
                spec.grammar.sample(&mut rng)
            };
            let times = spec.timing.end_times(&tokens);
            let partition = spec.split.assign(k, per_user);
            let label = format!("{user_id}#{k}");
            utterances.push(Utterance::new(
                &label, &user_id, wallclock, tokens, times, partition,
            )?);
            habitual.push(from_habit);
        }
    }
    // Generation order already matches corpus order: zero-padded ids,
    // sorted clocks.
    let corpus = Corpus::new(utterances);
    Ok(SyntheticCorpus { corpus, habitual })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize("What's the Weather, today?!"),
            toks("what's the weather today")
        );
        assert_eq!(normalize("  - hello --  "), toks("hello"));
        assert!(normalize("?! ...").is_empty());
    }

    #[test]
    fn uniform_timing_matches_arithmetic() {
        let times = TimingModel::default().end_times(&toks("what is the weather today"));
        let expected = [0.3, 0.6, 0.9, 1.2, 1.5];
        assert_eq!(times.len(), 5);
        for (t, e) in times.iter().zip(expected) {
            assert!((t - e).abs() < 1e-12);
        }
    }

    #[test]
    fn proportional_timing_scales_with_characters() {
        let times = TimingModel::Proportional {
            words_per_second: 2.0,
        }
        .end_times(&toks("a bbb"));
        // 2 words at 2 wps = 1 s, split 1:3 by characters.
        assert!((times[0] - 0.25).abs() < 1e-12);
        assert!((times[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn utterance_rejects_bad_records() {
        let err = Utterance::new("r1", "u", 0.0, vec![], vec![], Partition::Train).unwrap_err();
        assert!(err.to_string().contains("r1"));
        assert!(Utterance::new("r", "u", 0.0, toks("a b"), vec![0.3], Partition::Train).is_err());
        assert!(
            Utterance::new("r", "u", 0.0, toks("a b"), vec![0.3, 0.3], Partition::Train).is_err()
        );
        assert!(Utterance::new("r", "u", 0.0, toks("A"), vec![0.3], Partition::Train).is_err());
        assert!(Utterance::new("r", "u", 0.0, toks("a"), vec![0.0], Partition::Train).is_err());
    }

    #[test]
    fn unknown_format_flag_rejected() {
        assert!("native".parse::<CorpusFormat>().is_ok());
        let err = "kaldi".parse::<CorpusFormat>().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn split_assignment_is_chronological() {
        let split = SplitFractions {
            train: 0.5,
            dev: 0.1,
        };
        let parts: Vec<_> = (0..10).map(|i| split.assign(i, 10)).collect();
        assert_eq!(&parts[..5], &[Partition::Train; 5]);
        assert_eq!(parts[5], Partition::Dev);
        assert_eq!(&parts[6..], &[Partition::Test; 4]);
    }

    #[test]
    fn degenerate_synthetic_spec_repeats_one_phrase() {
        let spec = SyntheticSpec {
            users: 1,
            habitual_pool: 1,
            habitual_mix: 1.0,
            days: 2.0,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec, 3).unwrap();
        let first = corpus.utterances()[0].tokens().to_vec();
        assert!(corpus.len() > 1);
        assert!(corpus
            .utterances()
            .iter()
            .all(|u| u.tokens() == first.as_slice()));
    }

    #[test]
    fn invalid_synthetic_specs() {
        let zero = SyntheticSpec {
            users: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&zero, 1).is_err());
        let mix = SyntheticSpec {
            habitual_mix: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&mix, 1).is_err());
    }

    #[test]
    fn history_before_is_strict() {
        let mk = |user: &str, t: f64| {
            Utterance::new("r", user, t, toks("a"), vec![0.3], Partition::Train).unwrap()
        };
        let corpus = Corpus::new(vec![mk("b", 1.0), mk("a", 2.0), mk("a", 1.0), mk("a", 3.0)]);
        let seen: Vec<f64> = corpus
            .user_history_before("a", 2.0)
            .map(|u| u.wallclock())
            .collect();
        assert_eq!(seen, vec![1.0]);
        assert_eq!(corpus.user_ranges(), vec![0..3, 3..4]);
    }
}
