//! One-shot, threshold-gated prefetch policy and the oracle upper bound.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::predictor::{Prediction, Source};

/// A scored candidate as cached for threshold sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    /// Space-joined tokens.
    pub text: Arc<str>,
    pub extra_words: usize,
    pub rank: usize,
    pub source: Source,
    pub score: f64,
    /// Tokens equal the final hypothesis.
    pub matches_final: bool,
}

impl ScoredCandidate {
    pub fn new(prediction: &Prediction, score: f64, final_tokens: &[String]) -> Self {
        ScoredCandidate {
            text: prediction.tokens.join(" ").into(),
            extra_words: prediction.extra_words(),
            rank: prediction.rank,
            source: prediction.source,
            score,
            matches_final: prediction.tokens == final_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTick {
    pub reveal_time: f64,
    pub is_final: bool,
    /// In rank order.
    pub candidates: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredUtterance {
    pub utterance_id: usize,
    pub end_of_speech: f64,
    /// Chronological.
    pub ticks: Vec<ScoredTick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    NoPrefetch,
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedPrediction {
    pub text: String,
    pub rank: usize,
    pub source: Source,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchOutcome {
    pub utterance_id: usize,
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<AcceptedPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_time: Option<f64>,
    /// End of speech minus decision time, seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_gain: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_extra_words: Option<usize>,
}

impl PrefetchOutcome {
    pub fn none(utterance_id: usize) -> Self {
        PrefetchOutcome {
            utterance_id,
            kind: OutcomeKind::NoPrefetch,
            accepted: None,
            decision_time: None,
            prediction_gain: None,
            predicted_extra_words: None,
        }
    }

    fn accept(u: &ScoredUtterance, tick: &ScoredTick, c: &ScoredCandidate) -> Self {
        PrefetchOutcome {
            utterance_id: u.utterance_id,
            kind: if c.matches_final {
                OutcomeKind::Success
            } else {
                OutcomeKind::Failure
            },
            accepted: Some(AcceptedPrediction {
                text: c.text.to_string(),
                rank: c.rank,
                source: c.source,
                score: c.score,
            }),
            decision_time: Some(tick.reveal_time),
            prediction_gain: Some(u.end_of_speech - tick.reveal_time),
            predicted_extra_words: Some(c.extra_words),
        }
    }
}

/// How to pick among several above-threshold candidates of one tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// First eligible candidate in rank order.
    #[default]
    RankOrder,
    /// Highest-scoring eligible candidate; rank breaks ties.
    MaxScore,
}

/// Acts on the first eligible candidate: non-final tick, score at or above
/// `threshold`, at least one predicted word beyond the partial.
pub fn run_policy(u: &ScoredUtterance, threshold: f64, selection: Selection) -> PrefetchOutcome {
    for tick in u.ticks.iter().filter(|t| !t.is_final) {
        let mut eligible = tick
            .candidates
            .iter()
            .filter(|c| c.extra_words >= 1 && c.score >= threshold);
        let chosen = match selection {
            Selection::RankOrder => eligible.next(),
            Selection::MaxScore => {
                eligible.fold(None, |best: Option<&ScoredCandidate>, c| match best {
                    Some(b) if b.score >= c.score => Some(b),
                    _ => Some(c),
                })
            }
        };
        if let Some(c) = chosen {
            return PrefetchOutcome::accept(u, tick, c);
        }
    }
    PrefetchOutcome::none(u.utterance_id)
}

/// Accepts the earliest candidate that matches the final hypothesis with at
/// least one predicted word.
pub fn run_oracle(u: &ScoredUtterance) -> PrefetchOutcome {
    for tick in u.ticks.iter().filter(|t| !t.is_final) {
        if let Some(c) = tick
            .candidates
            .iter()
            .find(|c| c.extra_words >= 1 && c.matches_final)
        {
            return PrefetchOutcome::accept(u, tick, c);
        }
    }
    PrefetchOutcome::none(u.utterance_id)
}
