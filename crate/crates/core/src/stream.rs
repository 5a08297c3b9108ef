//! Streaming front-end stand-in: reveals the token prefix of an utterance at
//! each decode tick.

use crate::corpus::Utterance;
use crate::{Error, Result};

/// Default decode cadence in seconds.
pub const DEFAULT_INTERVAL: f64 = 0.12;

/// Slack for comparing tick times against token end times; `k * interval`
/// is not exact in binary floating point.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PartialHypothesis {
    /// Seconds from utterance start.
    pub reveal_time: f64,
    /// Number of utterance tokens revealed; the hypothesis is
    /// `utterance.tokens()[..prefix_len]`.
    pub prefix_len: usize,
    pub is_final: bool,
}

impl PartialHypothesis {
    pub fn tokens<'a>(&self, utterance: &'a Utterance) -> &'a [String] {
        &utterance.tokens()[..self.prefix_len]
    }
}

/// Partials at `interval, 2*interval, ...` strictly before end of speech,
/// then one final hypothesis at end of speech holding every token.
///
/// Ticks that reveal no new token are still emitted.
pub fn stream_partials(utterance: &Utterance, interval: f64) -> Result<Vec<PartialHypothesis>> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "decode interval must be positive, got {interval}"
        )));
    }
    let ends = utterance.token_end_times();
    let end_of_speech = utterance.end_of_speech();
    let mut partials = Vec::new();
    let mut revealed = 0;
    for k in 1u64.. {
        let t = k as f64 * interval;
        if t >= end_of_speech - TIME_EPS {
            break;
        }
        while revealed < ends.len() && ends[revealed] <= t + TIME_EPS {
            revealed += 1;
        }
        partials.push(PartialHypothesis {
            reveal_time: t,
            prefix_len: revealed,
            is_final: false,
        });
    }
    partials.push(PartialHypothesis {
        reveal_time: end_of_speech,
        prefix_len: ends.len(),
        is_final: true,
    });
    Ok(partials)
}
