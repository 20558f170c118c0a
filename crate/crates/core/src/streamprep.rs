//! Turning annotated videos into frame-aligned supervision.
//!
//! Per video: anchor every keyframe caption to its most similar frame,
//! resample onto a fixed grid that snaps to those anchors, screen reasoning
//! units against the question, keep question-relevant and non-redundant
//! keyframes, then emit one target per grid frame: `text</EOT>` at retained
//! keyframes and `<SKIP>` elsewhere.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine, EmbeddingProvider};
use crate::{Error, Result};

pub const EOT_MARKER: &str = "</EOT>";
pub const SKIP_MARKER: &str = "<SKIP>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFrame {
    pub index: usize,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub caption: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningUnit {
    pub text: String,
    /// Index into the video's `keyframes`.
    pub keyframe: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

/// One line of the annotations JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub video_id: String,
    pub frames: Vec<SourceFrame>,
    pub keyframes: Vec<Keyframe>,
    pub question: String,
    pub reasoning: Vec<ReasoningUnit>,
    pub answer: String,
    #[serde(default)]
    pub options: Vec<String>,
}

impl AnnotatedVideo {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("video {}: {msg}", self.video_id)));
        if self.frames.is_empty() {
            return bad("no frames".into());
        }
        if self
            .frames
            .iter()
            .any(|f| !f.timestamp.is_finite() || f.timestamp < 0.0)
        {
            return bad("frame timestamps must be finite and >= 0".into());
        }
        if self.frames.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return bad("frame timestamps must be strictly increasing".into());
        }
        let last = self.frames[self.frames.len() - 1].timestamp;
        for (k, kf) in self.keyframes.iter().enumerate() {
            if !(0.0 <= kf.start && kf.start <= kf.end && kf.end <= last) {
                return bad(format!(
                    "keyframe {k} interval [{}, {}] outside [0, {last}]",
                    kf.start, kf.end
                ));
            }
        }
        if let Some(u) = self.reasoning.iter().find(|u| u.keyframe >= self.keyframes.len()) {
            return bad(format!("reasoning unit refers to keyframe {}", u.keyframe));
        }
        Ok(())
    }

    /// Stable key for frame embeddings.
    pub fn frame_key(&self, frame: &SourceFrame) -> String {
        format!("{}/{}", self.video_id, frame.index)
    }
}

/// Read annotations, one video per non-blank line.
pub fn read_annotations(reader: impl BufRead) -> Result<Vec<AnnotatedVideo>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: AnnotatedVideo = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("annotations line {}: {e}", n + 1)))?;
        v.validate()?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapMode {
    /// A grid point within `epsilon` of an anchor timestamp takes the anchor frame.
    #[default]
    Epsilon,
    /// A grid point inside a keyframe's annotated interval takes that
    /// keyframe's anchor frame.
    Interval,
}

impl FromStr for SnapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "interval" => Ok(Self::Interval),
            other => Err(Error::InvalidArgument(format!("unknown snap mode {other:?}"))),
        }
    }
}

impl fmt::Display for SnapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Epsilon => "epsilon",
            Self::Interval => "interval",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub max_duration: f64,
    pub snap: SnapMode,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            epsilon: 0.1,
            max_duration: 30.0,
            snap: SnapMode::Epsilon,
        }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.epsilon >= self.delta / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be below delta/2 = {} or snapping is ambiguous",
                self.epsilon,
                self.delta / 2.0
            )));
        }
        if !(self.max_duration > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "max_duration must be > 0, got {}",
                self.max_duration
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub tau_q: f64,
    pub tau_adj: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_q: 0.7,
            tau_adj: 0.9,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_q", self.tau_q), ("tau_adj", self.tau_adj)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [-1, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub caption: usize,
    /// Position in the video's frame list.
    pub frame: usize,
    pub timestamp: f64,
}

/// Most similar frame for each caption; ties go to the earliest frame.
pub fn anchor_keyframes(frames: &[Vec<f64>], captions: &[Vec<f64>], timestamps: &[f64]) -> Result<Vec<Anchor>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frame embeddings"));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            frames.len()
        )));
    }
    captions
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mut best = (0, f64::NEG_INFINITY);
            for (t, f) in frames.iter().enumerate() {
                let s = cosine(f, g)?;
                if s > best.1 {
                    best = (t, s);
                }
            }
            Ok(Anchor {
                caption: k,
                frame: best.0,
                timestamp: timestamps[best.0],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampledFrame {
    pub grid_index: usize,
    pub timestamp: f64,
    /// `index` of the selected source frame.
    pub source_frame: usize,
    pub is_anchor: bool,
}

/// Grid timestamps `g * delta` that are below `max_duration` and not past
/// the last frame.
pub fn grid(last_timestamp: f64, config: &ResampleConfig) -> Vec<f64> {
    (0..)
        .map(|g| g as f64 * config.delta)
        .take_while(|&t| t < config.max_duration && t <= last_timestamp)
        .collect()
}

/// Nearest frame to `t`; ties go to the earlier frame.
pub fn nearest_frame(timestamps: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (i, &ts) in timestamps.iter().enumerate() {
        if (ts - t).abs() < (timestamps[best] - t).abs() {
            best = i;
        }
    }
    best
}

/// Resample `video` onto the grid. Under [`SnapMode::Epsilon`] a grid point
/// within `epsilon` of several anchors takes the closest one (ties to the
/// earlier anchor timestamp, then the lower caption index).
pub fn resample(video: &AnnotatedVideo, anchors: &[Anchor], config: &ResampleConfig) -> Result<Vec<ResampledFrame>> {
    config.validate()?;
    video.validate()?;
    if let Some(a) = anchors
        .iter()
        .find(|a| a.frame >= video.frames.len() || a.caption >= video.keyframes.len())
    {
        return Err(Error::InvalidArgument(format!(
            "anchor for caption {} points at frame {} outside the video",
            a.caption, a.frame
        )));
    }
    let timestamps: Vec<f64> = video.frames.iter().map(|f| f.timestamp).collect();
    let points = grid(timestamps[timestamps.len() - 1], config);
    Ok(points
        .iter()
        .enumerate()
        .map(|(g, &t)| {
            let snapped = match config.snap {
                SnapMode::Epsilon => anchors
                    .iter()
                    .filter(|a| (a.timestamp - t).abs() <= config.epsilon)
                    .min_by(|a, b| {
                        (a.timestamp - t)
                            .abs()
                            .total_cmp(&(b.timestamp - t).abs())
                            .then(a.timestamp.total_cmp(&b.timestamp))
                            .then(a.caption.cmp(&b.caption))
                    }),
                SnapMode::Interval => anchors
                    .iter()
                    .filter(|a| {
                        let kf = &video.keyframes[a.caption];
                        kf.start <= t && t <= kf.end
                    })
                    .min_by(|a, b| {
                        let (ka, kb) = (&video.keyframes[a.caption], &video.keyframes[b.caption]);
                        ka.start.total_cmp(&kb.start).then(a.caption.cmp(&b.caption))
                    }),
            };
            let (frame, is_anchor) = match snapped {
                Some(a) => (a.frame, true),
                None => (nearest_frame(&timestamps, t), false),
            };
            ResampledFrame {
                grid_index: g,
                timestamp: t,
                source_frame: video.frames[frame].index,
                is_anchor,
            }
        })
        .collect())
}

/// Cosine alignment between a question and a reasoning sentence.
pub fn consistency(question: &[f64], reasoning: &[f64]) -> Result<f64> {
    cosine(question, reasoning)
}

/// Relevance screening then adjacent de-duplication over time-ordered
/// caption vectors. Returns positions into `captions`.
pub fn filter_vectors(question: &[f64], captions: &[Vec<f64>], config: &FilterConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let mut relevant = Vec::new();
    for (k, c) in captions.iter().enumerate() {
        if cosine(question, c)? >= config.tau_q {
            relevant.push(k);
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for k in relevant {
        match kept.last() {
            None => kept.push(k),
            Some(&j) => {
                if cosine(&captions[j], &captions[k])? < config.tau_adj {
                    kept.push(k);
                }
            }
        }
    }
    Ok(kept)
}

/// Retained keyframe indices, in time order (by start, then index).
pub fn filter_trajectory(
    question: &str,
    keyframes: &[Keyframe],
    embedder: &dyn EmbeddingProvider,
    config: &FilterConfig,
) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..keyframes.len()).collect();
    order.sort_by(|&a, &b| keyframes[a].start.total_cmp(&keyframes[b].start).then(a.cmp(&b)));
    let q = embedder.embed_text(question)?;
    let vecs = order
        .iter()
        .map(|&k| embedder.embed_text(&keyframes[k].caption))
        .collect::<Result<Vec<_>>>()?;
    Ok(filter_vectors(&q, &vecs, config)?
        .into_iter()
        .map(|i| order[i])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SupervisionTarget {
    Reason(String),
    Skip,
}

impl fmt::Display for SupervisionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Reason(text) => write!(f, "{text}{EOT_MARKER}"),
            Self::Skip => f.write_str(SKIP_MARKER),
        }
    }
}

/// One target per resampled frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionStream {
    pub targets: Vec<SupervisionTarget>,
}

impl SupervisionStream {
    pub fn to_strings(&self) -> Vec<String> {
        self.targets.iter().map(ToString::to_string).collect()
    }

    pub fn skip_count(&self) -> usize {
        self.targets.iter().filter(|t| **t == SupervisionTarget::Skip).count()
    }
}

pub fn format_supervision(n_frames: usize, retained: &BTreeMap<usize, String>) -> Result<SupervisionStream> {
    if let Some((&i, _)) = retained.range(n_frames..).next() {
        return Err(Error::InvalidArgument(format!(
            "retained frame {i} outside {n_frames} resampled frames"
        )));
    }
    Ok(SupervisionStream {
        targets: (0..n_frames)
            .map(|i| match retained.get(&i) {
                Some(text) => SupervisionTarget::Reason(text.clone()),
                None => SupervisionTarget::Skip,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrepareConfig {
    pub resample: ResampleConfig,
    pub filter: FilterConfig,
    /// Reasoning units whose question alignment falls below this are dropped.
    pub tau_consistency: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            resample: ResampleConfig::default(),
            filter: FilterConfig::default(),
            tau_consistency: FilterConfig::default().tau_q,
        }
    }
}

impl PrepareConfig {
    pub fn validate(&self) -> Result<()> {
        self.resample.validate()?;
        self.filter.validate()?;
        if !(-1.0..=1.0).contains(&self.tau_consistency) {
            return Err(Error::InvalidConfig(format!(
                "tau_consistency must lie in [-1, 1], got {}",
                self.tau_consistency
            )));
        }
        Ok(())
    }
}

/// One line of the trajectory JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub video_id: String,
    pub frames: Vec<ResampledFrame>,
    pub supervision: Vec<String>,
    pub question: String,
    pub answer: String,
    pub options: Vec<String>,
}

/// Counters from one video, for logging.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareStats {
    pub anchors_outside_interval: usize,
    pub units_dropped: usize,
    pub keyframes_retained: usize,
    pub keyframes_truncated: usize,
}

pub fn prepare_video(
    video: &AnnotatedVideo,
    embedder: &dyn EmbeddingProvider,
    config: &PrepareConfig,
) -> Result<(Trajectory, PrepareStats)> {
    config.validate()?;
    video.validate()?;
    let mut stats = PrepareStats::default();
    let timestamps: Vec<f64> = video.frames.iter().map(|f| f.timestamp).collect();
    let frame_vecs = video
        .frames
        .iter()
        .map(|f| embedder.embed_frame(&video.frame_key(f)))
        .collect::<Result<Vec<_>>>()?;
    let caption_vecs = video
        .keyframes
        .iter()
        .map(|k| embedder.embed_text(&k.caption))
        .collect::<Result<Vec<_>>>()?;
    let anchors = anchor_keyframes(&frame_vecs, &caption_vecs, &timestamps)?;
    for a in &anchors {
        let kf = &video.keyframes[a.caption];
        if a.timestamp < kf.start || a.timestamp > kf.end {
            stats.anchors_outside_interval += 1;
            log::debug!(
                "{}: caption {} anchored at {}s, annotated [{}, {}]",
                video.video_id,
                a.caption,
                a.timestamp,
                kf.start,
                kf.end
            );
        }
    }
    let frames = resample(video, &anchors, &config.resample)?;

    let q = embedder.embed_text(&video.question)?;
    let mut units: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for u in &video.reasoning {
        if consistency(&q, &embedder.embed_text(&u.text)?)? >= config.tau_consistency {
            units.entry(u.keyframe).or_default().push(&u.text);
        } else {
            stats.units_dropped += 1;
        }
    }

    let retained = filter_trajectory(&video.question, &video.keyframes, embedder, &config.filter)?;
    let grid_times: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
    let mut placed: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for k in retained {
        let Some(texts) = units.get(&k) else { continue };
        let at = anchors[k].timestamp;
        if grid_times.is_empty() || at >= config.resample.max_duration {
            stats.keyframes_truncated += 1;
            continue;
        }
        stats.keyframes_retained += 1;
        placed
            .entry(nearest_frame(&grid_times, at))
            .or_default()
            .extend(texts.iter().copied());
    }
    let placed: BTreeMap<usize, String> = placed.into_iter().map(|(g, t)| (g, t.join(" "))).collect();
    let supervision = format_supervision(frames.len(), &placed)?;
    Ok((
        Trajectory {
            video_id: video.video_id.clone(),
            frames,
            supervision: supervision.to_strings(),
            question: video.question.clone(),
            answer: video.answer.clone(),
            options: video.options.clone(),
        },
        stats,
    ))
}

/// Annotations in, trajectory JSONL out, one line per video in input order.
pub fn prepare(
    reader: impl BufRead,
    mut writer: impl Write,
    embedder: &dyn EmbeddingProvider,
    config: &PrepareConfig,
) -> Result<usize> {
    config.validate()?;
    let videos = read_annotations(reader)?;
    for v in &videos {
        let (traj, stats) = prepare_video(v, embedder, config)?;
        log::info!(
            "{}: {} frames, {} keyframes retained, {} units dropped",
            v.video_id,
            traj.frames.len(),
            stats.keyframes_retained,
            stats.units_dropped
        );
        serde_json::to_writer(&mut writer, &traj)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(videos.len())
}
