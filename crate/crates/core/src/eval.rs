//! Outcome aggregation, threshold sweeps, user-perceived latency, and the
//! CSV / SVG / audit-log reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{
    run_oracle, run_policy, OutcomeKind, PrefetchOutcome, ScoredUtterance, Selection,
};
use crate::{Error, Result};

/// Endpointing and downstream response latency, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub t_ep: f64,
    pub t_response: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            t_ep: 0.5,
            t_response: 0.7,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_ep >= 0.0
            && self.t_response >= 0.0
            && self.t_ep.is_finite()
            && self.t_response.is_finite()
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "latencies must be finite and non-negative, got {self:?}"
            )))
        }
    }
}

/// User-perceived latency of one utterance.
///
/// Without a successful prefetch the response starts after endpointing.
/// A successful prefetch started `gain` seconds before end of speech
/// overlaps response generation with speech and endpointing.
pub fn upl(outcome: &PrefetchOutcome, cfg: &LatencyConfig) -> f64 {
    match (outcome.kind, outcome.prediction_gain) {
        (OutcomeKind::Success, Some(gain)) => cfg.t_ep.max(-gain + cfg.t_response),
        _ => cfg.t_ep + cfg.t_response,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub utterances: usize,
    pub attempts: usize,
    pub successes: usize,
    pub failures: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
    /// Mean gain over successful prefetches; 0 when there are none.
    pub mean_gain_success: f64,
    /// Mean gain over all utterances, 0 for those without a success.
    pub mean_gain_all: f64,
    pub mean_extra_words_success: f64,
    pub mean_upl: f64,
}

/// Aggregates the outcomes of `utterances` utterances. Outcomes for
/// utterances without a prefetch may be omitted; sums run over the given
/// outcomes in order, so a subset containing every attempt reproduces the
/// same point bit for bit.
pub fn aggregate(
    threshold: f64,
    utterances: usize,
    outcomes: &[PrefetchOutcome],
    cfg: &LatencyConfig,
) -> SweepPoint {
    let mut successes = 0usize;
    let mut failures = 0usize;
    let mut gain_sum = 0.0;
    let mut words_sum = 0usize;
    let mut upl_sum = 0.0;
    for o in outcomes {
        match o.kind {
            OutcomeKind::Success => {
                successes += 1;
                gain_sum += o.prediction_gain.unwrap_or(0.0);
                words_sum += o.predicted_extra_words.unwrap_or(0);
                upl_sum += upl(o, cfg);
            }
            OutcomeKind::Failure => failures += 1,
            OutcomeKind::NoPrefetch => {}
        }
    }
    let n = utterances.max(1) as f64;
    let per_success = |x: f64| {
        if successes > 0 {
            x / successes as f64
        } else {
            0.0
        }
    };
    let baseline = cfg.t_ep + cfg.t_response;
    SweepPoint {
        threshold,
        utterances,
        attempts: successes + failures,
        successes,
        failures,
        success_rate: successes as f64 / n,
        failure_rate: failures as f64 / n,
        mean_gain_success: per_success(gain_sum),
        mean_gain_all: gain_sum / n,
        mean_extra_words_success: per_success(words_sum as f64),
        mean_upl: if utterances == 0 {
            baseline
        } else {
            (upl_sum + (utterances - successes) as f64 * baseline) / n
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    pub oracle: SweepPoint,
}

/// Re-runs the policy over cached scored streams at each threshold and adds
/// the oracle point. `audit`, when given, receives every attempt.
pub fn sweep(
    streams: &[ScoredUtterance],
    thresholds: &[f64],
    selection: Selection,
    cfg: &LatencyConfig,
    mut audit: Option<&mut AuditLog>,
) -> Result<Sweep> {
    cfg.validate()?;
    if thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::InvalidArgument(
            "thresholds must be sorted ascending".into(),
        ));
    }
    if let Some(log) = audit.as_deref_mut() {
        log.header(streams.len(), cfg)?;
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for (i, &threshold) in thresholds.iter().enumerate() {
        let outcomes: Vec<PrefetchOutcome> = streams
            .par_iter()
            .map(|u| run_policy(u, threshold, selection))
            .collect();
        if let Some(log) = audit.as_deref_mut() {
            log.point(i, &threshold.to_string(), &outcomes)?;
        }
        points.push(aggregate(threshold, streams.len(), &outcomes, cfg));
    }
    let oracle_outcomes: Vec<PrefetchOutcome> = streams.par_iter().map(run_oracle).collect();
    if let Some(log) = audit {
        log.point(thresholds.len(), ORACLE_LABEL, &oracle_outcomes)?;
        log.flush()?;
    }
    let oracle = aggregate(f64::NAN, streams.len(), &oracle_outcomes, cfg);
    Ok(Sweep { points, oracle })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridSpacing {
    /// Evenly spaced between the smallest and largest score.
    #[default]
    Uniform,
    /// At evenly spaced empirical quantiles of the scores.
    Quantile,
}

/// `points` thresholds over the observed score range, plus `-inf` and `+inf`.
pub fn threshold_grid(scores: &[f64], points: usize, spacing: GridSpacing) -> Vec<f64> {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut grid = vec![f64::NEG_INFINITY];
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        for k in 0..points {
            let frac = if points > 1 {
                k as f64 / (points - 1) as f64
            } else {
                0.5
            };
            grid.push(match spacing {
                GridSpacing::Uniform if points > 1 && k + 1 == points => hi,
                GridSpacing::Uniform => lo + (hi - lo) * frac,
                GridSpacing::Quantile => {
                    sorted[((sorted.len() - 1) as f64 * frac).round() as usize]
                }
            });
        }
    }
    grid.push(f64::INFINITY);
    grid.dedup();
    grid
}

pub const CSV_HEADER: &str = "threshold,attempts,successes,failures,success_rate,failure_rate,\
mean_gain_success_s,mean_gain_all_s,mean_extra_words,mean_upl_s";

fn csv_row(p: &SweepPoint, label: &str) -> String {
    format!(
        "{label},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        p.attempts,
        p.successes,
        p.failures,
        p.success_rate,
        p.failure_rate,
        p.mean_gain_success,
        p.mean_gain_all,
        p.mean_extra_words_success,
        p.mean_upl
    )
}

pub fn write_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&csv_row(p, &p.threshold.to_string()));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_csv`]. Counts and rates are restored;
/// `utterances` is inferred from the rates when possible.
pub fn read_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("{}: unexpected CSV header", path.display()),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |what: &str| Error::Parse {
                line: i + 1,
                message: format!("{}: bad {what}", path.display()),
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 10 {
                return Err(bad("column count"));
            }
            let num = |k: usize| cols[k].parse::<f64>().map_err(|_| bad(cols[k]));
            let int = |k: usize| cols[k].parse::<usize>().map_err(|_| bad(cols[k]));
            let threshold = if cols[0] == ORACLE_LABEL {
                f64::NAN
            } else {
                num(0)?
            };
            let attempts = int(1)?;
            let success_rate = num(4)?;
            let failure_rate = num(5)?;
            let utterances = if success_rate + failure_rate > 0.0 {
                (attempts as f64 / (success_rate + failure_rate)).round() as usize
            } else {
                0
            };
            Ok(SweepPoint {
                threshold,
                utterances,
                attempts,
                successes: int(2)?,
                failures: int(3)?,
                success_rate,
                failure_rate,
                mean_gain_success: num(6)?,
                mean_gain_all: num(7)?,
                mean_extra_words_success: num(8)?,
                mean_upl: num(9)?,
            })
        })
        .collect()
}

/// One named curve of a chart.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [SweepPoint],
    pub oracle: Option<&'a SweepPoint>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Success rate against failure rate, labeled with mean gain over
/// successes in milliseconds.
pub fn render_svg(series: &[Series<'_>]) -> String {
    let (w, h, margin) = (720.0, 520.0, 60.0);
    let max_fail = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.failure_rate))
        .fold(0.0f64, f64::max)
        .max(0.05);
    let max_succ = series
        .iter()
        .flat_map(|s| s.points.iter().chain(s.oracle).map(|p| p.success_rate))
        .fold(0.0f64, f64::max)
        .max(0.05);
    let x = |v: f64| margin + v / max_fail * (w - 2.0 * margin);
    let y = |v: f64| h - margin - v / max_succ * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{b}" x2="{m}" y2="{m}" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    );
    for k in 0..=5 {
        let fv = max_fail * k as f64 / 5.0;
        let sv = max_succ * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}%</text><text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}%</text>"#,
            x(fv),
            h - margin + 16.0,
            fv * 100.0,
            margin - 6.0,
            y(sv) + 4.0,
            sv * 100.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">rate of failed prefetches</text><text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">rate of successful prefetches</text>"#,
        w / 2.0,
        h - 16.0,
        h / 2.0,
        h / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.failure_rate), y(p.success_rate)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for (k, p) in s.points.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#,
                x(p.failure_rate),
                y(p.success_rate)
            );
            if p.successes > 0 && k % 5 == 0 {
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" fill="{color}">{:.0} ms</text>"#,
                    x(p.failure_rate) + 4.0,
                    y(p.success_rate) - 4.0,
                    p.mean_gain_success * 1000.0
                );
            }
        }
        if let Some(o) = s.oracle {
            let _ = writeln!(
                svg,
                r#"<line x1="{m}" y1="{yy:.1}" x2="{r}" y2="{yy:.1}" stroke="{color}" stroke-dasharray="4 3"/>"#,
                m = margin,
                r = w - margin,
                yy = y(o.success_rate)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            margin + 10.0,
            margin + 14.0 * (i as f64 + 1.0),
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `sweep.csv`, `oracle.csv` and `sweep.svg` into `dir`.
pub fn report(sweep: &Sweep, name: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&sweep.points, &dir.join("sweep.csv"))?;
    let oracle = format!("{CSV_HEADER}\n{}\n", csv_row(&sweep.oracle, ORACLE_LABEL));
    let oracle_path = dir.join("oracle.csv");
    std::fs::write(&oracle_path, oracle).map_err(|e| Error::io(&oracle_path, e))?;
    let finite: Vec<SweepPoint> = sweep
        .points
        .iter()
        .filter(|p| p.threshold.is_finite())
        .cloned()
        .collect();
    let svg = render_svg(&[Series {
        name,
        points: &finite,
        oracle: Some(&sweep.oracle),
    }]);
    let svg_path = dir.join("sweep.svg");
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))
}

pub const ORACLE_LABEL: &str = "oracle";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum AuditRecord {
    Header {
        utterances: usize,
        latency: LatencyConfig,
    },
    /// Threshold as text so infinities survive JSON; the oracle point is
    /// labeled [`ORACLE_LABEL`].
    Point { index: usize, threshold: String },
    Outcome {
        point: usize,
        #[serde(flatten)]
        outcome: PrefetchOutcome,
    },
}

/// Line-delimited JSON log of every prefetch attempt in a sweep.
pub struct AuditLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl AuditLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(AuditLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, record: &AuditRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Invariant(format!("serializing audit record: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn header(&mut self, utterances: usize, latency: &LatencyConfig) -> Result<()> {
        self.write(&AuditRecord::Header {
            utterances,
            latency: *latency,
        })
    }

    fn point(&mut self, index: usize, threshold: &str, outcomes: &[PrefetchOutcome]) -> Result<()> {
        self.write(&AuditRecord::Point {
            index,
            threshold: threshold.to_string(),
        })?;
        for o in outcomes
            .iter()
            .filter(|o| o.kind != OutcomeKind::NoPrefetch)
        {
            self.write(&AuditRecord::Outcome {
                point: index,
                outcome: o.clone(),
            })?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Attempts recorded in an audit log, grouped by sweep point.
#[derive(Debug, Clone)]
pub struct AuditContents {
    pub utterances: usize,
    pub latency: LatencyConfig,
    /// `(label, attempts)` per point in log order.
    pub points: Vec<(String, Vec<PrefetchOutcome>)>,
}

impl AuditContents {
    /// Recomputes the sweep from the logged attempts.
    pub fn sweep(&self) -> Result<Sweep> {
        let mut points = Vec::new();
        let mut oracle = None;
        for (label, outcomes) in &self.points {
            if label == ORACLE_LABEL {
                oracle = Some(aggregate(
                    f64::NAN,
                    self.utterances,
                    outcomes,
                    &self.latency,
                ));
            } else {
                let threshold: f64 = label
                    .parse()
                    .map_err(|_| Error::invalid("audit log", format!("bad threshold {label:?}")))?;
                points.push(aggregate(
                    threshold,
                    self.utterances,
                    outcomes,
                    &self.latency,
                ));
            }
        }
        let oracle = oracle.ok_or_else(|| Error::invalid("audit log", "missing oracle point"))?;
        Ok(Sweep { points, oracle })
    }
}

pub fn read_audit_log(path: &Path) -> Result<AuditContents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut points: Vec<(String, Vec<PrefetchOutcome>)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let record: AuditRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            AuditRecord::Header {
                utterances,
                latency,
            } => header = Some((utterances, latency)),
            AuditRecord::Point { index, threshold } => {
                if index != points.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("point {index} out of order"),
                    });
                }
                points.push((threshold, Vec::new()));
            }
            AuditRecord::Outcome { point, outcome } => match points.get_mut(point) {
                Some((_, outcomes)) => outcomes.push(outcome),
                None => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("outcome for unknown point {point}"),
                    })
                }
            },
        }
    }
    let (utterances, latency) = header
        .ok_or_else(|| Error::invalid(path.display().to_string(), "audit log has no header"))?;
    Ok(AuditContents {
        utterances,
        latency,
        points,
    })
}
