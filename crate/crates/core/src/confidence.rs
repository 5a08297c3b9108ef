//! Prediction confidence: per-candidate features, a small feed-forward
//! classifier ensemble trained with binary cross-entropy, and the LM-score
//! passthrough baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::predictor::Prediction;
use crate::stream::PartialHypothesis;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

const BASE_FEATURES: [&str; 7] = [
    "lm_logprob_cond",
    "nbest_rank",
    "partial_words",
    "partial_chars",
    "pred_words",
    "pred_chars",
    "time_since_start",
];
const PERSONAL_FEATURE: &str = "personal_logfreq";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSchema {
    Base,
    /// Base features plus the personal log-frequency.
    Personalized,
}

impl FeatureSchema {
    pub fn names(self) -> Vec<&'static str> {
        let mut names = BASE_FEATURES.to_vec();
        if self == FeatureSchema::Personalized {
            names.push(PERSONAL_FEATURE);
        }
        names
    }

    pub fn dim(self) -> usize {
        match self {
            FeatureSchema::Base => BASE_FEATURES.len(),
            FeatureSchema::Personalized => BASE_FEATURES.len() + 1,
        }
    }

    fn from_names(names: &[String]) -> Result<Self> {
        for schema in [FeatureSchema::Base, FeatureSchema::Personalized] {
            if schema.names().iter().eq(names.iter()) {
                return Ok(schema);
            }
        }
        Err(Error::SchemaMismatch(format!(
            "unknown feature list {names:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub lm_logprob_cond: f64,
    pub nbest_rank: usize,
    pub partial_words: usize,
    pub partial_chars: usize,
    pub pred_words: usize,
    pub pred_chars: usize,
    pub time_since_start: f64,
    pub personal_logfreq: Option<f64>,
}

impl FeatureVector {
    pub fn schema(&self) -> FeatureSchema {
        if self.personal_logfreq.is_some() {
            FeatureSchema::Personalized
        } else {
            FeatureSchema::Base
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            self.lm_logprob_cond,
            self.nbest_rank as f64,
            self.partial_words as f64,
            self.partial_chars as f64,
            self.pred_words as f64,
            self.pred_chars as f64,
            self.time_since_start,
        ];
        v.extend(self.personal_logfreq);
        v
    }

    /// Inverse of [`FeatureVector::to_vec`]; the length selects the schema.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let personal_logfreq = match values.len() {
            7 => None,
            8 => Some(values[7]),
            n => {
                return Err(Error::InvalidArgument(format!(
                    "expected 7 or 8 feature values, got {n}"
                )))
            }
        };
        let count = |i: usize| -> Result<usize> {
            let v = values[i];
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidArgument(format!(
                    "feature {} must be a non-negative integer, got {v}",
                    BASE_FEATURES[i]
                )))
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature values must be finite".into(),
            ));
        }
        Ok(FeatureVector {
            lm_logprob_cond: values[0],
            nbest_rank: count(1)?,
            partial_words: count(2)?,
            partial_chars: count(3)?,
            pred_words: count(4)?,
            pred_chars: count(5)?,
            time_since_start: values[6],
            personal_logfreq,
        })
    }
}

/// Length of the space-joined tokens.
fn char_count(tokens: &[String]) -> usize {
    let letters: usize = tokens.iter().map(|t| t.chars().count()).sum();
    letters + tokens.len().saturating_sub(1)
}

pub fn extract_features(
    prediction: &Prediction,
    partial: &PartialHypothesis,
    personal_logfreq: Option<f64>,
) -> Result<FeatureVector> {
    if prediction.partial_len != partial.prefix_len || prediction.tokens.len() < partial.prefix_len
    {
        return Err(Error::Invariant(format!(
            "prediction built from a {}-token partial scored against a {}-token partial",
            prediction.partial_len, partial.prefix_len
        )));
    }
    let (head, _) = prediction.tokens.split_at(partial.prefix_len);
    Ok(FeatureVector {
        lm_logprob_cond: prediction.lm_logprob,
        nbest_rank: prediction.rank,
        partial_words: partial.prefix_len,
        partial_chars: char_count(head),
        pred_words: prediction.tokens.len(),
        pred_chars: char_count(&prediction.tokens),
        time_since_start: partial.reveal_time,
        personal_logfreq,
    })
}

/// Labeled examples in one schema, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    schema: FeatureSchema,
    features: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledSet {
    pub fn new(schema: FeatureSchema) -> Self {
        LabeledSet {
            schema,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(schema: FeatureSchema, rows: &[Vec<f64>], labels: &[bool]) -> Result<Self> {
        let mut set = LabeledSet::new(schema);
        for (row, &label) in rows.iter().zip(labels) {
            set.push_row(row, label)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, features: &FeatureVector, label: bool) -> Result<()> {
        self.push_row(&features.to_vec(), label)
    }

    fn push_row(&mut self, row: &[f64], label: bool) -> Result<()> {
        if row.len() != self.schema.dim() {
            return Err(Error::SchemaMismatch(format!(
                "{}-feature row for the {:?} schema",
                row.len(),
                self.schema
            )));
        }
        self.features.extend_from_slice(row);
        self.labels.push(label);
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.schema.dim();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Deterministic subsample of at most `max` rows, original order kept.
    pub fn subsample(&self, max: usize, seed: u64) -> LabeledSet {
        if self.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), max).into_vec();
        idx.sort_unstable();
        let mut out = LabeledSet::new(self.schema);
        for i in idx {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// Per-feature standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population statistics; near-constant features get unit scale.
    pub fn fit(set: &LabeledSet) -> Self {
        let d = set.schema.dim();
        let n = set.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..set.len() {
            for (m, x) in mean.iter_mut().zip(set.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..set.len() {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(set.row(i)) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(x, (m, s))| (x - m) / s),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Dense::zeros(inputs, outputs);
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-limit..limit));
        layer
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
        );
    }
}

/// Feed-forward network: tanh hidden layers, one linear output logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit, computed without overflow.
fn bce_with_logit(z: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: &[usize]) -> Self {
        Self::build(inputs, hidden, Dense::zeros)
    }

    pub fn random(inputs: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(inputs, hidden, |i, o| Dense::xavier(i, o, &mut rng))
    }

    fn build(
        inputs: usize,
        hidden: &[usize],
        mut layer: impl FnMut(usize, usize) -> Dense,
    ) -> Self {
        let mut dims = vec![inputs];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Mlp {
            layers: dims.windows(2).map(|w| layer(w[0], w[1])).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .collect()
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&a, &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut a, &mut z);
        }
        a[0]
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All weights then biases, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_parameters());
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + n]);
            at += n;
        }
    }

    /// Mean cross-entropy over `rows` and its gradient, flattened in
    /// [`Mlp::parameters`] order.
    pub fn loss_and_gradient(&self, rows: &[&[f64]], labels: &[bool]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_parameters()];
        let mut loss = 0.0;
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut delta = Vec::new();
        let mut prev_delta = Vec::new();
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, l| {
                let start = *at;
                *at += l.weights.len() + l.bias.len();
                Some(start)
            })
            .collect();
        let last = self.layers.len() - 1;
        for (x, &label) in rows.iter().zip(labels) {
            acts[0].clear();
            acts[0].extend_from_slice(x);
            for (i, layer) in self.layers.iter().enumerate() {
                let (before, after) = acts.split_at_mut(i + 1);
                layer.forward(&before[i], &mut after[0]);
                if i < last {
                    after[0].iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            let z = acts[last + 1][0];
            loss += bce_with_logit(z, label);
            delta.clear();
            delta.push(sigmoid(z) - if label { 1.0 } else { 0.0 });
            for i in (0..self.layers.len()).rev() {
                let layer = &self.layers[i];
                let input = &acts[i];
                let g = &mut grad[offsets[i]..offsets[i] + layer.weights.len() + layer.bias.len()];
                let (gw, gb) = g.split_at_mut(layer.weights.len());
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gwi, xi) in row.iter_mut().zip(input) {
                        *gwi += d * xi;
                    }
                }
                if i > 0 {
                    prev_delta.clear();
                    prev_delta.resize(layer.inputs, 0.0);
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (pd, w) in prev_delta.iter_mut().zip(row) {
                            *pd += d * w;
                        }
                    }
                    // tanh'(z) = 1 - a^2 on the stored activation.
                    for (pd, a) in prev_delta.iter_mut().zip(input) {
                        *pd *= 1.0 - a * a;
                    }
                    std::mem::swap(&mut delta, &mut prev_delta);
                }
            }
        }
        let n = rows.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }
}

/// Adam with the usual defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Training rows beyond this are subsampled away.
    pub max_examples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![64, 64],
            max_epochs: 30,
            learning_rate: 1e-3,
            batch_size: 256,
            patience: 5,
            ensemble_size: 3,
            seed: 0,
            max_examples: Some(200_000),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden.len() > 4 || self.hidden.iter().any(|&w| w == 0 || w > 512) {
            return Err(Error::InvalidArgument(format!(
                "hidden layers must be at most 4 with widths in 1..=512, got {:?}",
                self.hidden
            )));
        }
        if self.batch_size == 0 || self.ensemble_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size, ensemble size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfidenceModel {
    /// `exp(lm_logprob_cond)`.
    LmScorePassthrough,
    Mlp {
        schema: FeatureSchema,
        normalizer: Normalizer,
        members: Vec<Mlp>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    features: Vec<String>,
    model: ConfidenceModel,
}

fn member_loss(net: &Mlp, rows: &[Vec<f64>], labels: &[bool]) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| bce_with_logit(net.logit(x), y))
        .sum();
    total / rows.len().max(1) as f64
}

fn standardized(set: &LabeledSet, normalizer: &Normalizer) -> Vec<Vec<f64>> {
    let mut buf = Vec::new();
    (0..set.len())
        .map(|i| {
            normalizer.apply(set.row(i), &mut buf);
            buf.clone()
        })
        .collect()
}

/// Trains a mean-combined ensemble; members differ only in initialization.
///
/// When `dev` is given, each member keeps the parameters with the lowest dev
/// cross-entropy and stops after `patience` epochs without improvement.
pub fn train_mlp(
    train: &LabeledSet,
    dev: Option<&LabeledSet>,
    config: &TrainConfig,
) -> Result<ConfidenceModel> {
    config.validate()?;
    let train = match config.max_examples {
        Some(max) => train.subsample(max, config.seed),
        None => train.clone(),
    };
    let positives = train.positives();
    if train.is_empty() || positives == 0 || positives == train.len() {
        return Err(Error::Training(format!(
            "confidence training needs both labels; got {positives} positive of {} examples",
            train.len()
        )));
    }
    if let Some(dev) = dev {
        if dev.schema != train.schema {
            return Err(Error::SchemaMismatch(
                "train and dev feature schemas differ".into(),
            ));
        }
    }
    let normalizer = Normalizer::fit(&train);
    let rows = standardized(&train, &normalizer);
    let labels = train.labels().to_vec();
    let dev_data = dev
        .filter(|d| !d.is_empty())
        .map(|d| (standardized(d, &normalizer), d.labels().to_vec()));

    let mut members = Vec::with_capacity(config.ensemble_size);
    for member in 0..config.ensemble_size {
        let init_seed = config.seed.wrapping_add(1 + member as u64);
        let mut net = Mlp::random(train.schema.dim(), &config.hidden, init_seed);
        let mut params = net.parameters();
        let mut adam = Adam::new(params.len(), config.learning_rate);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut stale = 0;
        for epoch in 0..config.max_epochs {
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(config.batch_size) {
                let xs: Vec<&[f64]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
                let ys: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, grad) = net.loss_and_gradient(&xs, &ys);
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite loss {loss} in member {member}, epoch {epoch}; \
                         learning rate {}, batch of {}",
                        config.learning_rate,
                        batch.len()
                    )));
                }
                adam.step(&mut params, &grad);
                net.set_parameters(&params);
            }
            let Some((dev_rows, dev_labels)) = &dev_data else {
                continue;
            };
            let dev_loss = member_loss(&net, dev_rows, dev_labels);
            log::debug!("member {member} epoch {epoch}: dev loss {dev_loss:.5}");
            match &best {
                Some((b, _)) if dev_loss >= *b => {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((dev_loss, params.clone()));
                    stale = 0;
                }
            }
        }
        if let Some((_, p)) = best {
            net.set_parameters(&p);
        }
        members.push(net);
    }
    Ok(ConfidenceModel::Mlp {
        schema: train.schema,
        normalizer,
        members,
    })
}

impl ConfidenceModel {
    /// Schema of the features this model accepts; passthrough reads only
    /// the LM score and accepts either.
    pub fn schema(&self) -> Option<FeatureSchema> {
        match self {
            ConfidenceModel::LmScorePassthrough => None,
            ConfidenceModel::Mlp { schema, .. } => Some(*schema),
        }
    }

    pub fn score(&self, features: &FeatureVector) -> Result<f64> {
        match self {
            ConfidenceModel::LmScorePassthrough => {
                Ok(features.lm_logprob_cond.exp().clamp(0.0, 1.0))
            }
            ConfidenceModel::Mlp {
                schema,
                normalizer,
                members,
            } => {
                if features.schema() != *schema {
                    return Err(Error::SchemaMismatch(format!(
                        "model expects {:?} features, got {:?}",
                        schema,
                        features.schema()
                    )));
                }
                let mut x = Vec::with_capacity(schema.dim());
                normalizer.apply(&features.to_vec(), &mut x);
                Ok(ensemble_mean(members, &x))
            }
        }
    }

    pub fn member_scores(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        match self {
            ConfidenceModel::LmScorePassthrough => Ok(vec![self.score(features)?]),
            ConfidenceModel::Mlp {
                normalizer,
                members,
                ..
            } => {
                self.score(features)?;
                let mut x = Vec::new();
                normalizer.apply(&features.to_vec(), &mut x);
                Ok(members.iter().map(|m| m.predict(&x)).collect())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let features = self
            .schema()
            .map(|s| s.names().into_iter().map(String::from).collect())
            .unwrap_or_else(|| vec![BASE_FEATURES[0].to_string()]);
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            features,
            model: self.clone(),
        };
        let out = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(out), &file)
            .map_err(|e| Error::Invariant(format!("serializing confidence model: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let input = File::open(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_reader(BufReader::new(input)).map_err(|e| Error::Parse {
                line: e.line(),
                message: format!("{}: {e}", path.display()),
            })?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "confidence model format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        if let ConfidenceModel::Mlp {
            schema,
            normalizer,
            members,
        } = &file.model
        {
            if FeatureSchema::from_names(&file.features)? != *schema {
                return Err(Error::SchemaMismatch(
                    "feature list disagrees with the model schema".into(),
                ));
            }
            let dim = schema.dim();
            if normalizer.mean.len() != dim
                || normalizer.std.len() != dim
                || members.is_empty()
                || members.iter().any(|m| m.inputs() != dim)
            {
                return Err(Error::SchemaMismatch(format!(
                    "model dimensions do not match the {dim}-feature schema"
                )));
            }
        }
        Ok(file.model)
    }
}

fn ensemble_mean(members: &[Mlp], x: &[f64]) -> f64 {
    members.iter().map(|m| m.predict(x)).sum::<f64>() / members.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::Source;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn prediction(tokens: &str, partial_len: usize, lm_logprob: f64) -> Prediction {
        Prediction {
            tokens: toks(tokens),
            partial_len,
            lm_logprob,
            rank: 2,
            source: Source::Lm,
            capped: false,
        }
    }

    fn features(lm_logprob_cond: f64) -> FeatureVector {
        FeatureVector {
            lm_logprob_cond,
            nbest_rank: 1,
            partial_words: 1,
            partial_chars: 1,
            pred_words: 2,
            pred_chars: 2,
            time_since_start: 0.24,
            personal_logfreq: None,
        }
    }

    #[test]
    fn counts_characters_of_joined_tokens() {
        let partial = PartialHypothesis {
            reveal_time: 0.72,
            prefix_len: 2,
            is_final: false,
        };
        let f = extract_features(&prediction("what is it", 2, -1.5), &partial, None).unwrap();
        assert_eq!(
            (f.partial_words, f.partial_chars, f.pred_words, f.pred_chars),
            (2, 7, 3, 10)
        );
        assert_eq!(f.nbest_rank, 2);
        assert_eq!(f.time_since_start, 0.72);
        assert_eq!(f.lm_logprob_cond, -1.5);
    }

    #[test]
    fn zero_extension_features() {
        let partial = PartialHypothesis {
            reveal_time: 0.5,
            prefix_len: 2,
            is_final: false,
        };
        let f = extract_features(&prediction("what is", 2, -0.1), &partial, Some(-10.0)).unwrap();
        assert_eq!(f.pred_words, f.partial_words);
        assert_eq!(f.personal_logfreq, Some(-10.0));
        assert_eq!(f.schema(), FeatureSchema::Personalized);
    }

    #[test]
    fn partial_length_mismatch_is_an_error() {
        let partial = PartialHypothesis {
            reveal_time: 0.5,
            prefix_len: 1,
            is_final: false,
        };
        assert!(extract_features(&prediction("what is it", 2, -1.0), &partial, None).is_err());
    }

    #[test]
    fn passthrough_scores() {
        let m = ConfidenceModel::LmScorePassthrough;
        assert_eq!(m.score(&features(0.0)).unwrap(), 1.0);
        assert_eq!(m.score(&features(f64::NEG_INFINITY)).unwrap(), 0.0);
        assert!(m.score(&features(-1.0)).unwrap() < m.score(&features(-0.5)).unwrap());
    }

    #[test]
    fn zero_network_scores_one_half() {
        let m = ConfidenceModel::Mlp {
            schema: FeatureSchema::Base,
            normalizer: Normalizer {
                mean: vec![0.0; 7],
                std: vec![1.0; 7],
            },
            members: vec![Mlp::zeros(7, &[4, 4]), Mlp::zeros(7, &[])],
        };
        assert_eq!(m.score(&features(-3.0)).unwrap(), 0.5);
        assert_eq!(m.score(&features(-0.1)).unwrap(), 0.5);
        let mut personal = features(-1.0);
        personal.personal_logfreq = Some(0.0);
        assert!(matches!(m.score(&personal), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn normalizer_floors_constant_features() {
        let rows = vec![
            vec![1.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![3.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let set = LabeledSet::from_rows(FeatureSchema::Base, &rows, &[true, false]).unwrap();
        let n = Normalizer::fit(&set);
        assert_eq!(n.mean[0], 2.0);
        assert_eq!(n.std[0], 1.0);
        assert_eq!(n.mean[1], 5.0);
        assert_eq!(n.std[1], 1.0);
        let mut out = Vec::new();
        n.apply(&rows[0], &mut out);
        assert_eq!(out[0], -1.0);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn rejects_single_class_training() {
        let rows = vec![vec![0.0; 7]; 3];
        let set = LabeledSet::from_rows(FeatureSchema::Base, &rows, &[true, true, true]).unwrap();
        assert!(matches!(
            train_mlp(&set, None, &TrainConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn rejects_oversized_architecture() {
        let cfg = TrainConfig {
            hidden: vec![1024],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            hidden: vec![8; 5],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let x = i as f64 / 10.0 - 2.0;
                vec![x, 1.0, 2.0, 3.0, 4.0, 5.0, x * 0.5]
            })
            .collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] > 0.0).collect();
        let set = LabeledSet::from_rows(FeatureSchema::Base, &rows, &labels).unwrap();
        let cfg = TrainConfig {
            hidden: vec![4],
            max_epochs: 3,
            ensemble_size: 2,
            ..TrainConfig::default()
        };
        let model = train_mlp(&set, Some(&set), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.json");
        model.save(&path).unwrap();
        assert_eq!(ConfidenceModel::load(&path).unwrap(), model);
    }
}
