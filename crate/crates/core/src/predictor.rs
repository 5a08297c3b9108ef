//! Absolute-discount backoff n-gram language model and beam-search
//! completion of partial hypotheses into full-utterance candidates.
//!
//! Counts live in a reversed-context trie: the root holds unigram successor
//! counts, its child keyed by `w1` holds counts after `w1`, that node's child
//! keyed by `w0` holds counts after `w0 w1`, and so on. Walking down from the
//! root along the most recent tokens visits exactly the backoff chain of a
//! context, shortest first.
//!
//! Smoothing is interpolated absolute discounting:
//!
//! ```text
//! P(w | h) = max(c(h w) - D, 0) / c(h) + D * N1+(h .) / c(h) * P(w | h')
//! ```
//!
//! bottoming out in a uniform distribution over the known vocabulary plus
//! end-of-sentence, with the unknown-token class given a fixed floor mass.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Partition};
use crate::{Error, Result};

pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
const BOS: &str = "<s>";

const EOS_ID: u32 = 0;
const UNK_ID: u32 = 1;
const BOS_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DISCOUNT: f64 = 0.4;
/// Mass reserved for unseen tokens before renormalization.
pub const UNK_FLOOR: f64 = 1e-7;
pub const MAX_ORDER: usize = 5;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Lm,
    Personal,
}

/// A candidate full utterance extending a partial hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Full candidate sequence; starts with the source partial.
    pub tokens: Vec<String>,
    pub partial_len: usize,
    /// Natural-log probability of the continuation given the partial.
    pub lm_logprob: f64,
    /// 1-based position in the candidate list it was emitted in.
    pub rank: usize,
    pub source: Source,
    /// Hit the extra-token cap before end of sentence.
    #[serde(default)]
    pub capped: bool,
}

impl Prediction {
    pub fn extra_words(&self) -> usize {
        self.tokens.len() - self.partial_len
    }

    pub fn extends(&self, partial: &[String]) -> bool {
        self.partial_len == partial.len() && self.tokens.starts_with(partial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub beam_width: usize,
    pub n_best: usize,
    /// Tokens the search may emit after the partial, end-of-sentence included.
    pub max_extra_tokens: usize,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            beam_width: 16,
            n_best: 4,
            max_extra_tokens: 12,
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 || self.beam_width < self.n_best || self.max_extra_tokens == 0 {
            return Err(Error::InvalidArgument(format!(
                "completion needs beam_width >= n_best >= 1 and max_extra_tokens >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Node {
    #[serde(rename = "n")]
    total: u64,
    #[serde(rename = "s")]
    successors: BTreeMap<u32, u64>,
    #[serde(rename = "c", default, skip_serializing_if = "BTreeMap::is_empty")]
    children: BTreeMap<u32, Node>,
}

impl Node {
    fn add(&mut self, word: u32) {
        self.total += 1;
        *self.successors.entry(word).or_insert(0) += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    order: usize,
    discount: f64,
    unk_floor: f64,
    /// Words in id order starting at the first word id.
    words: Vec<String>,
    trie: Node,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    discount: f64,
    unk_floor: f64,
    /// Id-indexed; ids below `FIRST_WORD_ID` are the reserved symbols.
    vocab: Vec<String>,
    ids: BTreeMap<String, u32>,
    root: Node,
    /// Word ids by descending unigram-level probability, then ascending id.
    root_order: Vec<u32>,
}

struct Hyp {
    ext: Vec<u32>,
    logprob: f64,
}

/// Descending score, then ascending token sequence. Word ids are assigned in
/// lexicographic order so id order is string order.
fn hyp_order(a: &Hyp, b: &Hyp) -> Ordering {
    b.logprob
        .total_cmp(&a.logprob)
        .then_with(|| a.ext.cmp(&b.ext))
}

impl NgramModel {
    pub fn train<'a, I>(sentences: I, order: usize, discount: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidArgument(format!(
                "n-gram order must be in 1..={MAX_ORDER}, got {order}"
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must be in (0, 1), got {discount}"
            )));
        }
        let sentences: Vec<&[String]> = sentences.into_iter().collect();
        if sentences.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot train a language model on an empty partition".into(),
            ));
        }
        let mut words: Vec<&str> = sentences
            .iter()
            .flat_map(|s| s.iter().map(String::as_str))
            .collect();
        words.sort_unstable();
        words.dedup();

        let mut vocab: Vec<String> = vec![EOS.into(), UNK.into(), BOS.into()];
        vocab.extend(words.iter().map(|w| w.to_string()));
        let ids = Self::index(&vocab);

        let mut root = Node::default();
        let mut ctx: Vec<u32> = Vec::new();
        for sentence in &sentences {
            ctx.clear();
            for token in sentence.iter() {
                let id = ids[token.as_str()];
                Self::insert(&mut root, order, &ctx, id);
                ctx.push(id);
            }
            Self::insert(&mut root, order, &ctx, EOS_ID);
        }
        Ok(Self::assemble(order, discount, UNK_FLOOR, vocab, root))
    }

    fn index(vocab: &[String]) -> BTreeMap<String, u32> {
        vocab
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as u32 != BOS_ID)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect()
    }

    fn assemble(
        order: usize,
        discount: f64,
        unk_floor: f64,
        vocab: Vec<String>,
        root: Node,
    ) -> Self {
        let ids = Self::index(&vocab);
        let mut model = NgramModel {
            order,
            discount,
            unk_floor,
            vocab,
            ids,
            root,
            root_order: Vec::new(),
        };
        let chain = [&model.root];
        let mut order: Vec<(f64, u32)> = (FIRST_WORD_ID..model.vocab.len() as u32)
            .map(|w| (model.prob_in_chain(&chain, w), w))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        model.root_order = order.into_iter().map(|(_, w)| w).collect();
        model
    }

    /// Count `word` after every suffix of `ctx` up to `order - 1` tokens,
    /// padding before the sentence start with the begin symbol.
    fn insert(root: &mut Node, order: usize, ctx: &[u32], word: u32) {
        let mut node = root;
        node.add(word);
        for back in 0..order - 1 {
            let key = if back < ctx.len() {
                ctx[ctx.len() - 1 - back]
            } else {
                BOS_ID
            };
            node = node.children.entry(key).or_default();
            node.add(word);
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Known words, excluding reserved symbols.
    pub fn words(&self) -> &[String] {
        &self.vocab[FIRST_WORD_ID as usize..]
    }

    fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Backoff chain for a context, shortest context first.
    fn chain(&self, ctx: &[u32]) -> Vec<&Node> {
        let mut chain = Vec::with_capacity(self.order);
        let mut node = &self.root;
        chain.push(node);
        for back in 0..self.order - 1 {
            let key = if back < ctx.len() {
                ctx[ctx.len() - 1 - back]
            } else {
                BOS_ID
            };
            match node.children.get(&key) {
                Some(child) => {
                    node = child;
                    chain.push(node);
                }
                None => break,
            }
        }
        chain
    }

    fn base_prob(&self, word: u32) -> f64 {
        // Known support: end-of-sentence plus every word.
        let known = (self.vocab.len() - FIRST_WORD_ID as usize + 1) as f64;
        let norm = 1.0 + self.unk_floor;
        if word == UNK_ID {
            self.unk_floor / norm
        } else {
            1.0 / known / norm
        }
    }

    fn prob_in_chain(&self, chain: &[&Node], word: u32) -> f64 {
        let mut p = self.base_prob(word);
        for node in chain {
            let count = node.successors.get(&word).copied().unwrap_or(0) as f64;
            let kept = (count - self.discount).max(0.0);
            let backoff = self.discount * node.successors.len() as f64;
            p = (kept + backoff * p) / node.total as f64;
        }
        p
    }

    /// `P(token | context)`; out-of-vocabulary tokens map to the unknown
    /// class. Pass [`EOS`] to query end of sentence.
    pub fn prob(&self, context: &[String], token: &str) -> f64 {
        let ctx: Vec<u32> = context.iter().map(|t| self.id(t)).collect();
        self.prob_in_chain(&self.chain(&ctx), self.id(token))
    }

    /// Full successor distribution of a context over words, [`EOS`] and [`UNK`].
    pub fn distribution(&self, context: &[String]) -> Vec<(String, f64)> {
        let ctx: Vec<u32> = context.iter().map(|t| self.id(t)).collect();
        let chain = self.chain(&ctx);
        (0..self.vocab.len() as u32)
            .filter(|&w| w != BOS_ID)
            .map(|w| {
                (
                    self.vocab[w as usize].clone(),
                    self.prob_in_chain(&chain, w),
                )
            })
            .collect()
    }

    /// Sum of log-probabilities of `tokens[given_prefix_len..]` and the
    /// closing end-of-sentence, each conditioned on everything before it.
    pub fn sequence_logprob(&self, tokens: &[String], given_prefix_len: usize) -> f64 {
        assert!(
            given_prefix_len <= tokens.len(),
            "prefix length {given_prefix_len} exceeds sequence length {}",
            tokens.len()
        );
        let ids: Vec<u32> = tokens.iter().map(|t| self.id(t)).collect();
        let mut logprob = 0.0;
        for i in given_prefix_len..ids.len() {
            logprob += self.prob_in_chain(&self.chain(&ids[..i]), ids[i]).ln();
        }
        logprob + self.prob_in_chain(&self.chain(&ids), EOS_ID).ln()
    }

    /// Per-token perplexity, counting one end-of-sentence event per sentence.
    pub fn perplexity<'a, I>(&self, sentences: I) -> f64
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut logprob = 0.0;
        let mut events = 0usize;
        for s in sentences {
            logprob += self.sequence_logprob(s, 0);
            events += s.len() + 1;
        }
        (-logprob / events as f64).exp()
    }

    /// Beam-search completions of `partial`, best first.
    ///
    /// Completions end at end-of-sentence; a candidate that exhausts the
    /// token budget without it is marked `capped` and only fills the list
    /// when fewer than `n_best` ended properly. `lm_logprob` of a capped
    /// candidate has no end-of-sentence term.
    pub fn complete(
        &self,
        partial: &[String],
        params: &CompletionParams,
    ) -> Result<Vec<Prediction>> {
        params.validate()?;
        let prefix: Vec<u32> = partial.iter().map(|t| self.id(t)).collect();
        let mut live = vec![Hyp {
            ext: Vec::new(),
            logprob: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();
        let mut capped: Vec<Hyp> = Vec::new();
        let mut ctx = prefix.clone();
        let mut scored: Vec<(f64, u32)> = Vec::new();

        for step in 0..params.max_extra_tokens {
            let mut expansions: Vec<Hyp> = Vec::new();
            for hyp in &live {
                ctx.truncate(prefix.len());
                ctx.extend_from_slice(&hyp.ext);
                let chain = self.chain(&ctx);
                finished.push(Hyp {
                    ext: hyp.ext.clone(),
                    logprob: hyp.logprob + self.prob_in_chain(&chain, EOS_ID).ln(),
                });

                // Words seen after a non-empty context get individual mass;
                // every other word is scaled from the unigram level by the
                // same factor, so only the best `beam_width` of those can
                // survive pruning.
                let mut seen: Vec<u32> = chain[1..]
                    .iter()
                    .flat_map(|n| n.successors.keys().copied())
                    .filter(|&w| w >= FIRST_WORD_ID)
                    .collect();
                seen.sort_unstable();
                seen.dedup();
                let unseen = self
                    .root_order
                    .iter()
                    .copied()
                    .filter(|w| seen.binary_search(w).is_err())
                    .take(params.beam_width);
                scored.clear();
                scored.extend(
                    seen.iter()
                        .copied()
                        .chain(unseen)
                        .map(|w| (hyp.logprob + self.prob_in_chain(&chain, w).ln(), w)),
                );
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                scored.truncate(params.beam_width);
                for &(logprob, w) in &scored {
                    let mut ext = Vec::with_capacity(hyp.ext.len() + 1);
                    ext.extend_from_slice(&hyp.ext);
                    ext.push(w);
                    expansions.push(Hyp { ext, logprob });
                }
            }
            expansions.sort_by(hyp_order);
            expansions.truncate(params.beam_width);
            if step + 1 == params.max_extra_tokens {
                capped = expansions;
                break;
            }
            live = expansions;
            if live.is_empty() {
                break;
            }
            // Extending a hypothesis never raises its score.
            if finished.len() >= params.n_best {
                finished.sort_by(hyp_order);
                finished.truncate(params.n_best);
                if finished[params.n_best - 1].logprob > live[0].logprob {
                    break;
                }
            }
        }

        finished.sort_by(hyp_order);
        finished.truncate(params.n_best);
        let uncapped = finished.len();
        if uncapped < params.n_best {
            capped.sort_by(hyp_order);
            finished.extend(capped.into_iter().take(params.n_best - uncapped));
        }
        Ok(finished
            .into_iter()
            .enumerate()
            .map(|(i, hyp)| {
                let mut tokens = partial.to_vec();
                tokens.extend(hyp.ext.iter().map(|&w| self.vocab[w as usize].clone()));
                Prediction {
                    tokens,
                    partial_len: partial.len(),
                    lm_logprob: hyp.logprob,
                    rank: i + 1,
                    source: Source::Lm,
                    capped: i >= uncapped,
                }
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            order: self.order,
            discount: self.discount,
            unk_floor: self.unk_floor,
            words: self.words().to_vec(),
            trie: self.root.clone(),
        };
        let out = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(out), &file)
            .map_err(|e| Error::Invariant(format!("serializing language model: {e}")))
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
                "language model format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut vocab: Vec<String> = vec![EOS.into(), UNK.into(), BOS.into()];
        vocab.extend(file.words);
        Ok(Self::assemble(
            file.order,
            file.discount,
            file.unk_floor,
            vocab,
            file.trie,
        ))
    }
}

pub fn train_ngram(
    corpus: &Corpus,
    partition: Partition,
    order: usize,
    discount: f64,
) -> Result<NgramModel> {
    let sentences = corpus
        .partition(partition)
        .iter()
        .map(|&i| corpus.utterances()[i].tokens());
    NgramModel::train(sentences, order, discount)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn model(sentences: &[&str], order: usize, discount: f64) -> NgramModel {
        let owned: Vec<Vec<String>> = sentences.iter().map(|s| toks(s)).collect();
        NgramModel::train(owned.iter().map(Vec::as_slice), order, discount).unwrap()
    }

    fn total(dist: &[(String, f64)]) -> f64 {
        dist.iter().map(|(_, p)| p).sum()
    }

    #[test]
    fn single_sentence_bigram_is_normalized() {
        let m = model(&["a b"], 2, 0.4);
        let dist = m.distribution(&toks("a"));
        assert!((total(&dist) - 1.0).abs() < 1e-12);
        // Context "a" saw "b" once: (1 - D) plus backoff mass D * P_uni(b).
        let uni = |w: &str| m.prob_in_chain(&[&m.root], m.id(w));
        assert!((m.prob(&toks("a"), "b") - (0.6 + 0.4 * uni("b"))).abs() < 1e-12);
        assert!((m.prob(&toks("a b"), EOS) - (0.6 + 0.4 * uni(EOS))).abs() < 1e-12);
        // The empty context is the sentence start, which only saw "a".
        assert!((m.prob(&[], "b") - 0.4 * uni("b")).abs() < 1e-12);
    }

    #[test]
    fn vanishing_discount_gives_unit_perplexity() {
        let m = model(&["a b"], 2, 1e-12);
        let ppl = m.perplexity([toks("a b").as_slice()]);
        assert!((ppl - 1.0).abs() < 1e-9, "perplexity {ppl}");
    }

    #[test]
    fn unknown_tokens_keep_finite_scores() {
        let m = model(&["a b"], 3, 0.4);
        let lp = m.sequence_logprob(&toks("zzz a"), 0);
        assert!(lp.is_finite());
        assert!(m.prob(&[], "zzz") > 0.0);
    }

    #[test]
    fn training_preconditions() {
        let empty: Vec<&[String]> = Vec::new();
        assert!(NgramModel::train(empty, 3, 0.4).is_err());
        let s = [toks("a")];
        assert!(NgramModel::train(s.iter().map(Vec::as_slice), 0, 0.4).is_err());
        assert!(NgramModel::train(s.iter().map(Vec::as_slice), 6, 0.4).is_err());
        assert!(NgramModel::train(s.iter().map(Vec::as_slice), 3, 1.0).is_err());
        assert!(NgramModel::train(s.iter().map(Vec::as_slice), 3, 0.0).is_err());
    }

    #[test]
    fn single_path_completion() {
        let m = model(&["a b c"], 3, 0.4);
        let params = CompletionParams::default();
        let preds = m.complete(&toks("a"), &params).unwrap();
        assert_eq!(preds[0].tokens, toks("a b c"));
        let expected = m.prob(&toks("a"), "b").ln()
            + m.prob(&toks("a b"), "c").ln()
            + m.prob(&toks("a b c"), EOS).ln();
        assert!((preds[0].lm_logprob - expected).abs() < 1e-12);
        assert_eq!(preds[0].rank, 1);
        assert!(preds.iter().all(|p| p.extends(&toks("a")) && !p.capped));
    }

    #[test]
    fn unconditional_completion_prefers_frequent_sentence() {
        let m = model(&["a b", "a b", "a b", "c"], 2, 0.4);
        let preds = m.complete(&[], &CompletionParams::default()).unwrap();
        assert_eq!(preds[0].tokens, toks("a b"));
    }

    #[test]
    fn capped_candidates_fill_only_when_needed() {
        let m = model(&["a b c d e f"], 3, 0.1);
        let params = CompletionParams {
            beam_width: 4,
            n_best: 4,
            max_extra_tokens: 2,
        };
        let preds = m.complete(&toks("a"), &params).unwrap();
        assert_eq!(preds.len(), 4);
        // Only "a" + EOS and "a w" + EOS fit the budget: at most 1 + beam uncapped.
        let uncapped: Vec<_> = preds.iter().filter(|p| !p.capped).collect();
        assert!(!uncapped.is_empty());
        assert!(preds.iter().skip_while(|p| !p.capped).all(|p| p.capped));
        assert!(preds
            .iter()
            .filter(|p| p.capped)
            .all(|p| p.extra_words() == 2));
    }

    #[test]
    fn sequence_logprob_empty_continuation() {
        let m = model(&["a b c", "a c"], 3, 0.4);
        let tokens = toks("a b");
        let lp = m.sequence_logprob(&tokens, 2);
        assert!((lp - m.prob(&tokens, EOS).ln()).abs() < 1e-15);
    }

    #[test]
    fn sequence_logprob_chain_rule() {
        let m = model(&["a b c", "a c", "b c a"], 3, 0.4);
        let ab = m.sequence_logprob(&toks("a b"), 1) - m.prob(&toks("a b"), EOS).ln();
        let abc = m.sequence_logprob(&toks("a b c"), 1);
        let expected = ab + m.prob(&toks("a b"), "c").ln() + m.prob(&toks("a b c"), EOS).ln();
        assert!((abc - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_completion_params() {
        let m = model(&["a"], 2, 0.4);
        let bad = CompletionParams {
            beam_width: 2,
            n_best: 4,
            max_extra_tokens: 5,
        };
        assert!(m.complete(&[], &bad).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let m = model(&["a b c", "a c", "b c a"], 3, 0.4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.json");
        m.save(&path).unwrap();
        assert_eq!(NgramModel::load(&path).unwrap(), m);
    }
}
