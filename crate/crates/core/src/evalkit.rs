//! Objective judging, latency metrics and temporal analytics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, EmbeddingProvider};
use crate::runtime::{EventKind, Nanos, Timeline, Transcript};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub tau: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { tau: 0.8 }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// A free-form prediction with its reference and four options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    #[serde(default)]
    pub id: String,
    #[serde(default = "default_category")]
    pub category: String,
    /// May be left out when predictions are supplied separately.
    #[serde(default)]
    pub prediction: String,
    pub reference: String,
    pub options: Vec<String>,
    /// Index of the correct option.
    pub correct: usize,
}

fn default_category() -> String {
    "all".into()
}

impl EvalCase {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "case {:?}: expected 4 options, got {}",
                self.id,
                self.options.len()
            )));
        }
        if self.correct >= self.options.len() {
            return Err(Error::InvalidArgument(format!(
                "case {:?}: correct option {} out of range",
                self.id, self.correct
            )));
        }
        Ok(())
    }
}

pub fn read_cases(reader: impl BufRead) -> Result<Vec<EvalCase>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: EvalCase =
            serde_json::from_str(&line).map_err(|e| Error::InvalidArgument(format!("cases line {}: {e}", n + 1)))?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// The three similarities a verdict is based on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub s_ref: f64,
    pub s_opt: f64,
    pub s_neg: f64,
}

impl JudgeScores {
    pub fn verdict(&self, tau: f64) -> Verdict {
        if self.s_ref >= tau && self.s_opt >= tau && self.s_opt > self.s_neg {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }
}

pub fn judge_scores(case: &EvalCase, embedder: &dyn EmbeddingProvider) -> Result<JudgeScores> {
    case.validate()?;
    let pred = embedder.embed_text(&case.prediction)?;
    let s_ref = cosine(&pred, &embedder.embed_text(&case.reference)?)?;
    let mut s_opt = 0.0;
    let mut s_neg = f64::NEG_INFINITY;
    for (i, o) in case.options.iter().enumerate() {
        let s = cosine(&pred, &embedder.embed_text(o)?)?;
        if i == case.correct {
            s_opt = s;
        } else {
            s_neg = s_neg.max(s);
        }
    }
    Ok(JudgeScores { s_ref, s_opt, s_neg })
}

/// Correct iff the prediction is close to the reference, close to the
/// correct option, and strictly closer to it than to any distractor.
pub fn judge(case: &EvalCase, embedder: &dyn EmbeddingProvider, config: &JudgeConfig) -> Result<Verdict> {
    config.validate()?;
    Ok(judge_scores(case, embedder)?.verdict(config.tau))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
    /// Percentage.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: CategoryAccuracy,
    pub categories: BTreeMap<String, CategoryAccuracy>,
}

fn pct(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

pub fn accuracy<'a>(results: impl IntoIterator<Item = (&'a str, Verdict)>) -> Result<AccuracyReport> {
    let mut categories: BTreeMap<String, CategoryAccuracy> = BTreeMap::new();
    let (mut correct, mut total) = (0, 0);
    for (cat, v) in results {
        let c = categories.entry(cat.to_string()).or_default();
        c.total += 1;
        total += 1;
        if v == Verdict::Correct {
            c.correct += 1;
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("results"));
    }
    for c in categories.values_mut() {
        c.accuracy = pct(c.correct, c.total);
    }
    Ok(AccuracyReport {
        overall: CategoryAccuracy {
            correct,
            total,
            accuracy: pct(correct, total),
        },
        categories,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub category: String,
    #[serde(flatten)]
    pub scores: JudgeScores,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub embedder: String,
    pub accuracy: AccuracyReport,
    pub cases: Vec<CaseResult>,
}

pub fn evaluate(cases: &[EvalCase], embedder: &dyn EmbeddingProvider, config: &JudgeConfig) -> Result<EvalReport> {
    config.validate()?;
    let results = cases
        .iter()
        .map(|c| {
            let scores = judge_scores(c, embedder)?;
            Ok(CaseResult {
                id: c.id.clone(),
                category: c.category.clone(),
                scores,
                verdict: scores.verdict(config.tau),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy = accuracy(results.iter().map(|r| (r.category.as_str(), r.verdict)))?;
    Ok(EvalReport {
        tau: config.tau,
        embedder: embedder.id().to_string(),
        accuracy,
        cases: results,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtftMode {
    /// From the first frame arrival.
    EndToEnd,
    /// From the start of decoding.
    DecoderLevel,
}

impl FromStr for TtftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_to_end" => Ok(Self::EndToEnd),
            "decoder_level" => Ok(Self::DecoderLevel),
            other => Err(Error::InvalidArgument(format!("unknown ttft mode {other:?}"))),
        }
    }
}

impl fmt::Display for TtftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EndToEnd => "end_to_end",
            Self::DecoderLevel => "decoder_level",
        })
    }
}

fn first_arrival(timeline: &Timeline) -> Result<Nanos> {
    timeline
        .first(|k| matches!(k, EventKind::FrameArrival { .. }))
        .ok_or(Error::MissingEvent("frame_arrival"))
}

pub fn ttft(timeline: &Timeline, mode: TtftMode) -> Result<f64> {
    let token = timeline
        .first(|k| matches!(k, EventKind::TokenEmitted { .. }))
        .ok_or(Error::MissingEvent("token_emitted"))?;
    let origin = match mode {
        TtftMode::EndToEnd => first_arrival(timeline)?,
        TtftMode::DecoderLevel => timeline
            .first(|k| *k == EventKind::DecodeStart)
            .ok_or(Error::MissingEvent("decode_start"))?,
    };
    Ok((token - origin).secs())
}

/// Answer completion minus first frame arrival.
pub fn overall_delay(timeline: &Timeline) -> Result<f64> {
    let done = timeline
        .first(|k| *k == EventKind::AnswerDone)
        .ok_or(Error::MissingEvent("answer_done"))?;
    Ok((done - first_arrival(timeline)?).secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Segment start minus nearest keyframe, per segment that emitted tokens.
    pub deltas: Vec<f64>,
    pub mean_abs: f64,
    pub within_1s: f64,
}

/// Signed distance from each segment start to its nearest keyframe (ties to
/// the earlier keyframe).
pub fn temporal_deviation(segment_starts: &[f64], keyframes: &[f64]) -> Result<AlignmentReport> {
    if segment_starts.is_empty() {
        return Err(Error::EmptyInput("segments"));
    }
    if keyframes.is_empty() {
        return Err(Error::EmptyInput("keyframes"));
    }
    let deltas: Vec<f64> = segment_starts
        .iter()
        .map(|&s| {
            let mut best = keyframes[0];
            for &k in &keyframes[1..] {
                let (d, db) = ((s - k).abs(), (s - best).abs());
                if d < db || (d == db && k < best) {
                    best = k;
                }
            }
            s - best
        })
        .collect();
    let n = deltas.len() as f64;
    Ok(AlignmentReport {
        mean_abs: deltas.iter().map(|d| d.abs()).sum::<f64>() / n,
        within_1s: deltas.iter().filter(|d| d.abs() <= 1.0).count() as f64 / n,
        deltas,
    })
}

pub fn transcript_deviation(transcript: &Transcript, keyframes: &[f64]) -> Result<AlignmentReport> {
    temporal_deviation(&transcript.segment_starts(), keyframes)
}

/// Cosine similarity between consecutive texts.
pub fn coherence_profile<S: AsRef<str>>(texts: &[S], embedder: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    if texts.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "coherence needs at least 2 segments, got {}",
            texts.len()
        )));
    }
    let vecs = texts
        .iter()
        .map(|t| embedder.embed_text(t.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    vecs.windows(2).map(|w| cosine(&w[0], &w[1])).collect()
}

pub fn transcript_coherence(transcript: &Transcript, embedder: &dyn EmbeddingProvider) -> Result<Vec<f64>> {
    let texts: Vec<String> = transcript.segments.iter().map(|s| s.text()).collect();
    coherence_profile(&texts, embedder)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Consecutive-segment similarities with their mean and a histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub profile: Vec<f64>,
    pub mean: f64,
    pub histogram: Vec<HistogramBin>,
}

pub const COHERENCE_BINS: usize = 10;

/// `COHERENCE_BINS` equal bins over `[-1, 1]`; each bin is half-open except
/// the last, which includes 1.
pub fn coherence_report(profile: Vec<f64>) -> Result<CoherenceReport> {
    if profile.is_empty() {
        return Err(Error::EmptyInput("coherence profile"));
    }
    let width = 2.0 / COHERENCE_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..COHERENCE_BINS)
        .map(|b| HistogramBin {
            lo: -1.0 + b as f64 * width,
            hi: -1.0 + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &c in &profile {
        let b = (((c.clamp(-1.0, 1.0) + 1.0) / width) as usize).min(COHERENCE_BINS - 1);
        histogram[b].count += 1;
    }
    Ok(CoherenceReport {
        mean: profile.iter().sum::<f64>() / profile.len() as f64,
        profile,
        histogram,
    })
}
