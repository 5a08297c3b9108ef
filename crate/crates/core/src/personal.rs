//! Per-user recognition history: prefix-matched personal candidates, the
//! personal log-frequency feature, and merging with LM candidates.

use std::collections::{HashMap, HashSet};

use crate::predictor::{NgramModel, Prediction, Source};

/// Four weeks, in seconds.
pub const DEFAULT_WINDOW: f64 = 2_419_200.0;
pub const DEFAULT_CANDIDATE_CAP: usize = 8;
/// Feature value for predictions absent from the user's history.
pub const LOGFREQ_FALLBACK: f64 = -10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub wallclock: f64,
    pub tokens: Vec<String>,
}

/// Time-ordered final hypotheses of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    user_id: String,
    entries: Vec<HistoryEntry>,
    window: f64,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, window: f64) -> Self {
        UserHistory {
            user_id: user_id.into(),
            entries: Vec::new(),
            window,
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts keeping wallclock order; equal times keep insertion order.
    pub fn record(&mut self, wallclock: f64, tokens: Vec<String>) {
        let at = self.entries.partition_point(|e| e.wallclock <= wallclock);
        self.entries.insert(at, HistoryEntry { wallclock, tokens });
    }

    /// Entries with `now - window <= wallclock < now`.
    pub fn visible(&self, now: f64) -> &[HistoryEntry] {
        let lo = self
            .entries
            .partition_point(|e| e.wallclock < now - self.window);
        let hi = self.entries.partition_point(|e| e.wallclock < now);
        &self.entries[lo..hi.max(lo)]
    }

    /// Distinct visible utterances extending `partial`, with occurrence
    /// count and latest wallclock, ordered by count desc, recency desc, then
    /// token sequence.
    pub fn matches(&self, now: f64, partial: &[String]) -> Vec<HistoryMatch<'_>> {
        let mut by_tokens: HashMap<&[String], HistoryMatch<'_>> = HashMap::new();
        for e in self.visible(now) {
            if !e.tokens.starts_with(partial) {
                continue;
            }
            let m = by_tokens.entry(&e.tokens[..]).or_insert(HistoryMatch {
                tokens: &e.tokens,
                count: 0,
                last_seen: e.wallclock,
            });
            m.count += 1;
            m.last_seen = m.last_seen.max(e.wallclock);
        }
        let mut out: Vec<_> = by_tokens.into_values().collect();
        out.sort_by(|a, b| {
            b.count
                .cmp(&a.count)
                .then(b.last_seen.total_cmp(&a.last_seen))
                .then_with(|| a.tokens.cmp(b.tokens))
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryMatch<'a> {
    pub tokens: &'a [String],
    pub count: usize,
    pub last_seen: f64,
}

/// Up to `cap` past utterances that extend `partial`, scored by the LM so
/// they carry the same features as LM candidates.
pub fn history_candidates(
    history: &UserHistory,
    now: f64,
    partial: &[String],
    cap: usize,
    model: &NgramModel,
) -> Vec<Prediction> {
    history
        .matches(now, partial)
        .into_iter()
        .take(cap)
        .enumerate()
        .map(|(i, m)| Prediction {
            tokens: m.tokens.to_vec(),
            partial_len: partial.len(),
            lm_logprob: model.sequence_logprob(m.tokens, partial.len()),
            rank: i + 1,
            source: Source::Personal,
            capped: false,
        })
        .collect()
}

/// `ln(count(prediction) / |S|)` over the visible utterances `S` extending
/// `partial`, or [`LOGFREQ_FALLBACK`] when the prediction is not among them.
pub fn personal_logfreq(
    history: &UserHistory,
    now: f64,
    prediction: &[String],
    partial: &[String],
) -> f64 {
    debug_assert!(prediction.starts_with(partial));
    let mut matching = 0usize;
    let mut hits = 0usize;
    for e in history.visible(now) {
        if e.tokens.starts_with(partial) {
            matching += 1;
            if e.tokens == prediction {
                hits += 1;
            }
        }
    }
    if hits == 0 {
        LOGFREQ_FALLBACK
    } else {
        (hits as f64 / matching as f64).ln()
    }
}

/// Union of both lists deduplicated on tokens, ranked by descending
/// `lm_logprob` (ties by token sequence). On collision the personal copy
/// is kept.
pub fn merge_candidates(lm: Vec<Prediction>, personal: Vec<Prediction>) -> Vec<Prediction> {
    let personal_keys: HashSet<Vec<String>> = personal.iter().map(|p| p.tokens.clone()).collect();
    let mut merged: Vec<Prediction> = personal;
    merged.extend(
        lm.into_iter()
            .filter(|p| !personal_keys.contains(&p.tokens)),
    );
    merged.sort_by(|a, b| {
        b.lm_logprob
            .total_cmp(&a.lm_logprob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    for (i, p) in merged.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    merged
}
