//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.
//!
//! The SLURP criterion runs when `PASR_SLURP_DIR` points at a directory
//! holding the SLURP `train.jsonl`, `devel.jsonl` and `test.jsonl` files.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use predictive_asr::confidence::Mlp;
use predictive_asr::corpus::{CorpusFormat, Partition, SyntheticSpec};
use predictive_asr::eval::{self, GridSpacing, LatencyConfig, Sweep, SweepPoint};
use predictive_asr::experiment::{
    self, CandidateSource, CorpusSource, Evaluation, ExperimentConfig,
};
use predictive_asr::policy::{OutcomeKind, PrefetchOutcome, ScoredUtterance, Selection};
use predictive_asr::predictor::{CompletionParams, NgramModel, EOS};

const SEED: u64 = 11;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn run(name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Pass(d) => ("PASS", d, true),
        Fail(d) => ("FAIL", d, false),
        Skip(d) => ("SKIP", d, true),
    };
    println!("[{tag}] {name} ({secs:.1}s): {detail}");
    ok
}

// ---------------------------------------------------------------------------
// 1. Beam search against exhaustive enumeration.

fn random_toy_model(rng: &mut ChaCha8Rng) -> NgramModel {
    let alphabet = ["a", "b", "c", "d", "e"];
    let vocab = rng.gen_range(1..=alphabet.len());
    let sentences: Vec<Vec<String>> = (0..rng.gen_range(1..=8))
        .map(|_| {
            (0..rng.gen_range(1..=5))
                .map(|_| alphabet[rng.gen_range(0..vocab)].to_string())
                .collect()
        })
        .collect();
    let order = rng.gen_range(1..=3);
    let discount = rng.gen_range(0.05..0.95);
    NgramModel::train(sentences.iter().map(Vec::as_slice), order, discount).unwrap()
}

/// Best sentence-final continuation of at most `max_extra_tokens - 1` words.
fn exhaustive_best(
    m: &NgramModel,
    partial: &[String],
    max_extra_tokens: usize,
) -> (Vec<String>, f64) {
    let words = m.words().to_vec();
    let mut best: Option<(Vec<String>, f64)> = None;
    let mut frontier: Vec<(Vec<String>, f64)> = vec![(Vec::new(), 0.0)];
    for depth in 0..max_extra_tokens {
        let mut next = Vec::new();
        for (ext, lp) in &frontier {
            let mut ctx = partial.to_vec();
            ctx.extend(ext.iter().cloned());
            let end = lp + m.prob(&ctx, EOS).ln();
            let better = match &best {
                None => true,
                Some((b_ext, b_lp)) => end > *b_lp || (end == *b_lp && ext < b_ext),
            };
            if better {
                best = Some((ext.clone(), end));
            }
            if depth + 1 < max_extra_tokens {
                for w in &words {
                    let mut e = ext.clone();
                    e.push(w.clone());
                    next.push((e, lp + m.prob(&ctx, w).ln()));
                }
            }
        }
        frontier = next;
    }
    best.unwrap()
}

const BEAM_DEFAULT: usize = 16;
const BEAM_WIDE: usize = 10_000;

fn criterion_beam_oracle() -> Verdict {
    assert_eq!(CompletionParams::default().beam_width, BEAM_DEFAULT);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cases = 2000;
    let mut mismatches = Vec::new();
    for case in 0..cases {
        let m = random_toy_model(&mut rng);
        let words = m.words().to_vec();
        let partial: Vec<String> = (0..rng.gen_range(0..=2))
            .map(|_| {
                if rng.gen_bool(0.1) {
                    "zz".to_string()
                } else {
                    words[rng.gen_range(0..words.len())].clone()
                }
            })
            .collect();
        let max_extra_tokens = rng.gen_range(1..=4);
        let n_best = rng.gen_range(1..=4);
        let (ext, lp) = exhaustive_best(&m, &partial, max_extra_tokens);
        for beam_width in [BEAM_DEFAULT, BEAM_WIDE] {
            let params = CompletionParams {
                beam_width,
                n_best,
                max_extra_tokens,
            };
            let got = m.complete(&partial, &params).unwrap();
            let top = &got[0];
            let same_tokens = top.tokens[partial.len()..] == ext[..];
            if top.capped || !(same_tokens && (top.lm_logprob - lp).abs() < 1e-9) {
                mismatches.push(format!(
                    "case {case} beam {beam_width}: {:?} {} vs exhaustive {ext:?} {lp}",
                    top.tokens, top.lm_logprob
                ));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} mismatches over {cases} toy models (vocab <= 5, max_extra_tokens <= 4) at beam widths \
             {BEAM_DEFAULT} and {BEAM_WIDE}; {}",
            mismatches.len(),
            mismatches
                .first()
                .cloned()
                .unwrap_or_else(|| "no mismatch".into())
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. MLP gradients against central differences.

fn criterion_gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let networks = 60;
    let mut worst: f64 = 0.0;
    for n in 0..networks {
        let inputs = rng.gen_range(1..=8);
        let hidden: Vec<usize> = (0..rng.gen_range(0..=2))
            .map(|_| rng.gen_range(1..=6))
            .collect();
        let mut mlp = Mlp::random(inputs, &hidden, SEED + n);
        let rows: Vec<Vec<f64>> = (0..rng.gen_range(1..=12))
            .map(|_| (0..inputs).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<bool> = rows.iter().map(|_| rng.gen_bool(0.5)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let (_, analytic) = mlp.loss_and_gradient(&refs, &labels);
        let base = mlp.parameters();
        let h = 1e-5;
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            mlp.set_parameters(&p);
            let up = mlp.loss_and_gradient(&refs, &labels).0;
            p[i] = base[i] - h;
            mlp.set_parameters(&p);
            let down = mlp.loss_and_gradient(&refs, &labels).0;
            numeric[i] = (up - down) / (2.0 * h);
        }
        mlp.set_parameters(&base);
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-12));
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} over {networks} networks"),
    )
}

// ---------------------------------------------------------------------------
// 3. Latency model on a grid.

fn criterion_latency_grid() -> Verdict {
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let mut cases = 0;
    let mut bad = Vec::new();
    for (i, &dt) in grid.iter().enumerate() {
        for (j, &t_ep) in grid.iter().enumerate() {
            for (k, &t_response) in grid.iter().enumerate() {
                let cfg = LatencyConfig { t_ep, t_response };
                for kind in [
                    OutcomeKind::Success,
                    OutcomeKind::Failure,
                    OutcomeKind::NoPrefetch,
                ] {
                    let mut o = PrefetchOutcome::none(0);
                    o.kind = kind;
                    if kind != OutcomeKind::NoPrefetch {
                        o.prediction_gain = Some(dt);
                    }
                    let got = eval::upl(&o, &cfg);
                    let (want, tenths) = match kind {
                        OutcomeKind::Success => {
                            (t_ep.max(t_response - dt), j.max(k.saturating_sub(i)) as f64)
                        }
                        _ => (t_ep + t_response, (j + k) as f64),
                    };
                    let exact = tenths / 10.0;
                    cases += 1;
                    if got != want || (got - exact).abs() > 1e-15 {
                        bad.push(format!(
                            "{kind:?} dt={dt} t_ep={t_ep} t_resp={t_response}: {got} vs {want}"
                        ));
                    }
                }
            }
        }
    }
    check(
        bad.is_empty(),
        format!(
            "{} of {cases} grid cases exact; {}",
            cases - bad.len(),
            bad.first().cloned().unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared seeded synthetic runs for criteria 4 to 7.

struct Run {
    config: ExperimentConfig,
    evaluation: Evaluation,
    audit: PathBuf,
    users: usize,
    test_utterances: usize,
    end_of_speech: Vec<f64>,
    elapsed: Duration,
}

fn synthetic_run(config: ExperimentConfig, dir: &Path, name: &str) -> Run {
    let start = Instant::now();
    let corpus = config.load_corpus().unwrap();
    let (models, _) = experiment::train(&config, &corpus).unwrap();
    let audit = dir.join(format!("{name}.jsonl"));
    let evaluation = experiment::evaluate(&config, &corpus, &models, Some(&audit)).unwrap();
    let elapsed = start.elapsed();
    Run {
        users: corpus.user_ranges().len(),
        test_utterances: corpus.partition(Partition::Test).len(),
        end_of_speech: corpus
            .utterances()
            .iter()
            .map(|u| u.end_of_speech())
            .collect(),
        config,
        evaluation,
        audit,
        elapsed,
    }
}

fn personalized_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: SEED,
        ..ExperimentConfig::default()
    }
}

fn lm_only_config() -> ExperimentConfig {
    ExperimentConfig {
        candidates: CandidateSource::Lm,
        personal_feature: false,
        ..personalized_config()
    }
}

fn same_point(a: &SweepPoint, b: &SweepPoint) -> bool {
    let t = a.threshold == b.threshold || (a.threshold.is_nan() && b.threshold.is_nan());
    t && SweepPoint {
        threshold: 0.0,
        ..a.clone()
    } == SweepPoint {
        threshold: 0.0,
        ..b.clone()
    }
}

fn same_sweep(a: &Sweep, b: &Sweep) -> bool {
    a.points.len() == b.points.len()
        && a.points
            .iter()
            .zip(&b.points)
            .all(|(x, y)| same_point(x, y))
        && same_point(&a.oracle, &b.oracle)
}

fn criterion_policy_invariants(run: &Run) -> Verdict {
    let sweep = &run.evaluation.sweep;
    let finite = run
        .evaluation
        .thresholds
        .iter()
        .filter(|t| t.is_finite())
        .count();
    let log = eval::read_audit_log(&run.audit).unwrap();
    let mut one_attempt = true;
    for (_, outcomes) in &log.points {
        let mut seen = HashSet::new();
        one_attempt &= outcomes.iter().all(|o| seen.insert(o.utterance_id));
    }
    one_attempt &= sweep
        .points
        .iter()
        .all(|p| p.attempts == p.successes + p.failures && p.attempts <= p.utterances);
    let monotone = sweep
        .points
        .windows(2)
        .all(|w| w[0].attempts >= w[1].attempts);
    let max_success = sweep
        .points
        .iter()
        .map(|p| p.success_rate)
        .fold(0.0, f64::max);
    let dominated = sweep
        .points
        .iter()
        .all(|p| p.success_rate <= sweep.oracle.success_rate);
    let replay = same_sweep(&log.sweep().unwrap(), sweep);
    check(
        run.users >= 200
            && run.test_utterances >= 10_000
            && finite == 50
            && one_attempt
            && monotone
            && dominated
            && replay
            && run.elapsed < Duration::from_secs(300),
        format!(
            "{} users, {} test utterances, {finite} finite thresholds; one attempt per utterance: {one_attempt}; \
             attempts non-increasing: {monotone}; oracle {:.3} >= max policy {max_success:.3}: {dominated}; \
             audit replay identical: {replay}; run {:.0}s",
            run.users,
            run.test_utterances,
            sweep.oracle.success_rate,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_tradeoff_shape(run: &Run) -> Verdict {
    let points = &run.evaluation.sweep.points;
    let permissive = &points[0];
    let (best_i, best) = points
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1.success_rate
                .total_cmp(&b.1.success_rate)
                .then(b.0.cmp(&a.0))
        })
        .unwrap();
    check(
        permissive.success_rate < best.success_rate,
        format!(
            "success {:.3} at the most permissive threshold, maximum {:.3} at point {best_i} of {} \
             (threshold {:.3}, failure rate {:.3})",
            permissive.success_rate,
            best.success_rate,
            points.len(),
            best.threshold,
            best.failure_rate
        ),
    )
}

/// Sweep point whose failure rate is nearest `target` on a dense grid.
fn matched_point(streams: &[ScoredUtterance], cfg: &LatencyConfig, target: f64) -> SweepPoint {
    let thresholds = eval::threshold_grid(
        &experiment::eligible_scores(streams),
        1000,
        GridSpacing::Quantile,
    );
    let sweep = eval::sweep(streams, &thresholds, Selection::RankOrder, cfg, None).unwrap();
    sweep
        .points
        .into_iter()
        .min_by(|a, b| {
            (a.failure_rate - target)
                .abs()
                .total_cmp(&(b.failure_rate - target).abs())
        })
        .unwrap()
}

const TARGET_FAILURE: f64 = 0.10;
const FAILURE_TOLERANCE: f64 = 0.01;

fn criterion_personalization(personal: &Run, lm_only: &Run) -> Verdict {
    let p = matched_point(
        &personal.evaluation.streams,
        &personal.config.latency,
        TARGET_FAILURE,
    );
    let l = matched_point(
        &lm_only.evaluation.streams,
        &lm_only.config.latency,
        TARGET_FAILURE,
    );
    let matched = (p.failure_rate - TARGET_FAILURE).abs() <= FAILURE_TOLERANCE
        && (l.failure_rate - TARGET_FAILURE).abs() <= FAILURE_TOLERANCE;
    let ratio = p.success_rate / l.success_rate;
    check(
        matched && p.success_rate >= 1.2 * l.success_rate,
        format!(
            "personalized success {:.3} at failure {:.3} vs LM-only {:.3} at failure {:.3}; ratio {ratio:.2} (need >= 1.20)",
            p.success_rate, p.failure_rate, l.success_rate, l.failure_rate
        ),
    )
}

fn criterion_gain_semantics(run: &Run) -> Verdict {
    let log = eval::read_audit_log(&run.audit).unwrap();
    let mut successes = 0usize;
    let mut bad = Vec::new();
    for (label, outcomes) in &log.points {
        for o in outcomes.iter().filter(|o| o.kind == OutcomeKind::Success) {
            successes += 1;
            let eos = run.end_of_speech[o.utterance_id];
            let (Some(gain), Some(at), Some(extra)) =
                (o.prediction_gain, o.decision_time, o.predicted_extra_words)
            else {
                bad.push(format!(
                    "{label}: utterance {} lacks timing fields",
                    o.utterance_id
                ));
                continue;
            };
            if !(gain > 0.0 && gain == eos - at && extra >= 1) {
                bad.push(format!(
                    "{label}: utterance {} gain {gain} eos {eos} at {at} extra {extra}",
                    o.utterance_id
                ));
            }
        }
    }
    check(
        successes > 0 && bad.is_empty(),
        format!(
            "{successes} successful outcomes across {} logged points; {} violations{}",
            log.points.len(),
            bad.len(),
            bad.first().map(|b| format!(" ({b})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. End-to-end determinism through the file-based commands.

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let spec = SyntheticSpec {
        users: 40,
        days: 14.0,
        ..SyntheticSpec::default()
    };
    let corpus_file = root.join("corpus.jsonl");
    experiment::cmd_gen(&spec, SEED, &corpus_file).unwrap();
    let config = ExperimentConfig {
        corpus: CorpusSource::File {
            path: corpus_file,
            format: CorpusFormat::Native,
        },
        timing: spec.timing,
        split: spec.split,
        seed: SEED,
        ..ExperimentConfig::default()
    };
    experiment::cmd_train(&config, &root.join("models")).unwrap();
    experiment::cmd_eval(&config, &root.join("models"), &root.join("eval")).unwrap();
    ["sweep.csv", "oracle.csv", experiment::AUDIT_FILE]
        .iter()
        .map(|f| {
            (
                f.to_string(),
                std::fs::read(root.join("eval").join(f)).unwrap(),
            )
        })
        .collect()
}

fn criterion_determinism(dir: &Path) -> Verdict {
    let a = pipeline(&dir.join("a"));
    let b = pipeline(&dir.join("b"));
    let same: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x == y).collect();
    check(
        same.iter().all(|&s| s) && a[0].1.len() > 100,
        a.iter()
            .zip(&same)
            .map(|((name, bytes), s)| format!("{name} {} bytes identical: {s}", bytes.len()))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

// ---------------------------------------------------------------------------
// 9. SLURP, when available.

fn criterion_slurp(personal: &Run) -> Verdict {
    let Some(dir) = std::env::var_os("PASR_SLURP_DIR").map(PathBuf::from) else {
        return Skip("PASR_SLURP_DIR not set; SLURP transcripts unavailable".into());
    };
    if !dir.join("test.jsonl").exists() {
        return Skip(format!("{} has no test.jsonl", dir.display()));
    }
    let config = ExperimentConfig {
        corpus: CorpusSource::File {
            path: dir,
            format: CorpusFormat::Slurp,
        },
        ..lm_only_config()
    };
    let tmp = tempfile::tempdir().unwrap();
    let slurp = synthetic_run(config, tmp.path(), "slurp");
    let p = matched_point(
        &personal.evaluation.streams,
        &personal.config.latency,
        TARGET_FAILURE,
    );
    let s = matched_point(
        &slurp.evaluation.streams,
        &slurp.config.latency,
        TARGET_FAILURE,
    );
    check(
        s.success_rate < p.success_rate,
        format!(
            "SLURP LM-only success {:.3} at failure {:.3} ({} test utterances) vs personalized synthetic {:.3} at failure {:.3}",
            s.success_rate, s.failure_rate, slurp.test_utterances, p.success_rate, p.failure_rate
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    ok &= run(
        "1 beam search matches exhaustive enumeration",
        criterion_beam_oracle,
    );
    ok &= run("2 MLP gradient check", criterion_gradient_check);
    ok &= run("3 latency model exact on grid", criterion_latency_grid);

    let personal = catch_unwind(AssertUnwindSafe(|| {
        synthetic_run(personalized_config(), dir.path(), "personal")
    }));
    let lm_only = catch_unwind(AssertUnwindSafe(|| {
        synthetic_run(lm_only_config(), dir.path(), "lm_only")
    }));
    match &personal {
        Ok(p) => {
            ok &= run("4 policy invariants on seeded synthetic run", || {
                criterion_policy_invariants(p)
            });
            ok &= run("5 non-monotonic tradeoff shape", || {
                criterion_tradeoff_shape(p)
            });
            ok &= match &lm_only {
                Ok(l) => run("6 personalization effect at matched failure rate", || {
                    criterion_personalization(p, l)
                }),
                Err(_) => run("6 personalization effect at matched failure rate", || {
                    Fail("LM-only run failed".into())
                }),
            };
            ok &= run("7 prediction gain semantics over audit log", || {
                criterion_gain_semantics(p)
            });
        }
        Err(_) => {
            for name in [
                "4 policy invariants",
                "5 tradeoff shape",
                "6 personalization effect",
                "7 gain semantics",
            ] {
                ok &= run(name, || Fail("personalized synthetic run failed".into()));
            }
        }
    }
    ok &= run("8 end-to-end determinism", || {
        criterion_determinism(dir.path())
    });
    ok &= match &personal {
        Ok(p) => run("9 SLURP adapter", || criterion_slurp(p)),
        Err(_) => run("9 SLURP adapter", || {
            Fail("personalized synthetic run failed".into())
        }),
    };
    if !ok {
        std::process::exit(1);
    }
}
