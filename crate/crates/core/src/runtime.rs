//! Paradigm execution over a frame stream.
//!
//! * **Batch** encodes every frame, then reasons once over the full context.
//! * **Interleaved** alternates `F_1, R_1, F_2, R_2, ...` in one causal
//!   stream; frame `t+1` cannot be encoded until `R_t` is finished.
//! * **Parallel** runs an ingest worker that appends to the video cache and
//!   a decode loop that repeatedly merges a snapshot of both caches,
//!   generates a segment against it, and appends that segment to the text
//!   cache.
//!
//! Under the simulated clock every encode and every decoded token costs a
//! fixed amount of time from the [`CostModel`], and times are integer
//! nanoseconds, so latencies are exact and reproducible. The wall clock
//! measures the real computation instead.
//!
//! Token accounting: each decoder step feeds the tokens that are still
//! pending (the prompt at the start, afterwards the last emitted token) and
//! emits one token. A segment ends on `<EOT>` or when it reaches its token
//! cap; its last token becomes the pending input of the next segment.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kvcache::{
    dual_cache, merge_handles, CacheHandle, CacheStats, CacheView, EmptyView, Extended, KvEntry, MergedView,
    MonolithicCache, TextCache, VideoCache, PROMPT_SEGMENT,
};
use crate::masking::{
    causal_mask, causal_rows, streaming_mask, streaming_rows, FrameBoundaryMap, MaskSpec, VisualTextAccess,
};
use crate::numerics::{argmax, forward, Matrix, ModelParameters, TokenId, BOS_TOKEN, EOT_TOKEN, FRAME_PAYLOAD_DIM};
use crate::positional::{Modality, PositionAssignment, PositionScheme};
use crate::{Error, Result};

/// Simulated or measured time, in nanoseconds since the first frame arrived.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub fn from_secs(s: f64) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("time must be finite and >= 0, got {s}")));
        }
        Ok(Nanos((s * 1e9).round() as u64))
    }

    pub fn secs(self) -> f64 {
        self.0 as f64 / 1e9
    }

    fn times(self, n: usize) -> Nanos {
        Nanos(self.0 * n as u64)
    }
}

impl std::ops::Add for Nanos {
    type Output = Nanos;

    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Nanos {
    type Output = Nanos;

    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.secs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub payload_seed: u64,
}

/// Timestamped frames at a nominal rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameStream {
    pub fps: f64,
    pub frames: Vec<Frame>,
}

impl FrameStream {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(Error::InvalidStream(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidStream("stream has no frames".into()));
        }
        for f in &self.frames {
            if !f.timestamp.is_finite() || f.timestamp < 0.0 {
                return Err(Error::InvalidStream(format!(
                    "frame {} has timestamp {}",
                    f.id, f.timestamp
                )));
            }
        }
        if let Some(w) = self.frames.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidStream(format!(
                "timestamps not strictly increasing at frame {} ({} after {})",
                w[1].id, w[1].timestamp, w[0].timestamp
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// `n` frames at `i / fps` seconds with seeded payloads.
    pub fn synthetic(n: usize, fps: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..n)
            .map(|i| Frame {
                id: i as u64,
                timestamp: i as f64 / fps,
                payload_seed: rng.random(),
            })
            .collect();
        Self { fps, frames }
    }

    /// A clip of `duration` seconds sampled at `fps` (`round(duration * fps)`
    /// frames, at least one).
    pub fn synthetic_clip(duration: f64, fps: f64, seed: u64) -> Self {
        let n = ((duration * fps).round() as usize).max(1);
        Self::synthetic(n, fps, seed)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Fixed simulated costs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub encode_cost_per_frame: f64,
    pub decode_cost_per_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            encode_cost_per_frame: 0.1,
            decode_cost_per_token: 0.02,
        }
    }
}

impl CostModel {
    fn validated(&self) -> Result<(Nanos, Nanos)> {
        Ok((
            Nanos::from_secs(self.encode_cost_per_frame)?,
            Nanos::from_secs(self.decode_cost_per_token)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Batch,
    Interleaved,
    Parallel,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Batch, Paradigm::Interleaved, Paradigm::Parallel];

    /// Batch and interleaved number one monolithic stream; parallel uses
    /// separate axes.
    pub fn default_scheme(self) -> PositionScheme {
        match self {
            Paradigm::Parallel => PositionScheme::Decoupled,
            _ => PositionScheme::Monolithic,
        }
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "interleaved" => Ok(Self::Interleaved),
            "parallel" => Ok(Self::Parallel),
            other => Err(Error::InvalidArgument(format!("unknown paradigm {other:?}"))),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Interleaved => "interleaved",
            Self::Parallel => "parallel",
        })
    }
}

/// When frames become available to the runtime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Frame `i` arrives `timestamp_i - timestamp_0` seconds after the first.
    #[default]
    Live,
    /// Every frame is available at time zero.
    Prebuffered,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Simulated,
    Wall,
}

/// Merge trigger for the parallel paradigm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeSchedule {
    /// Merge when the previous segment has ended and at least one new frame
    /// is encoded; idle until one is.
    #[default]
    Streaming,
    /// One merge after the last frame is encoded (degenerates to batch).
    SinglePostStream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tokens_per_frame: usize,
    pub max_segment_tokens: usize,
    pub prompt: Vec<TokenId>,
    pub costs: CostModel,
    pub arrival: Arrival,
    pub clock: ClockMode,
    /// `None` picks [`Paradigm::default_scheme`].
    pub pos_scheme: Option<PositionScheme>,
    pub merge_schedule: MergeSchedule,
    /// Run ingest and decode on one thread (simulated clock only).
    pub single_thread: bool,
    /// Never stop on `<EOT>`: every segment runs to `max_segment_tokens`.
    pub fixed_length: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tokens_per_frame: 4,
            max_segment_tokens: 32,
            prompt: vec![BOS_TOKEN],
            costs: CostModel::default(),
            arrival: Arrival::Live,
            clock: ClockMode::Simulated,
            pos_scheme: None,
            merge_schedule: MergeSchedule::Streaming,
            single_thread: false,
            fixed_length: false,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.tokens_per_frame == 0 {
            return Err(Error::InvalidArgument("tokens_per_frame must be >= 1".into()));
        }
        if self.prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must hold at least one token".into()));
        }
        self.costs.validated()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    FrameArrival { frame: usize },
    EncodeStart { frame: usize },
    EncodeDone { frame: usize },
    DecodeStart,
    Merge { segment: usize, frames: usize },
    TokenEmitted { segment: usize, token: TokenId },
    SegmentEnd { segment: usize },
    AnswerDone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: Nanos,
    pub kind: EventKind,
}

/// Time-ordered run events.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Timeline {
    events: Vec<Event>,
}

impl Timeline {
    /// Sort by time; events at the same instant keep their recording order.
    pub fn from_events(mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| e.time);
        Self { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn first(&self, pred: impl Fn(&EventKind) -> bool) -> Option<Nanos> {
        self.events.iter().find(|e| pred(&e.kind)).map(|e| e.time)
    }

    pub fn encode_start(&self, frame: usize) -> Option<Nanos> {
        self.first(|k| *k == EventKind::EncodeStart { frame })
    }

    pub fn encode_done(&self, frame: usize) -> Option<Nanos> {
        self.first(|k| *k == EventKind::EncodeDone { frame })
    }

    pub fn arrival(&self, frame: usize) -> Option<Nanos> {
        self.first(|k| *k == EventKind::FrameArrival { frame })
    }
}

/// One reasoning segment. `tokens` excludes the terminating `<EOT>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSegment {
    pub segment_index: usize,
    pub tokens: Vec<TokenId>,
    #[serde(skip)]
    pub emit_times: Vec<Nanos>,
    pub frames_visible_at_start: usize,
    #[serde(skip)]
    pub merge_time: Nanos,
    #[serde(skip)]
    pub end_time: Nanos,
    pub ended_with_eot: bool,
    /// Frames whose visual tokens the segment's rows could attend.
    pub attended_frames: Vec<usize>,
}

impl ReasoningSegment {
    pub fn start_time(&self) -> Option<Nanos> {
        self.emit_times.first().copied()
    }

    /// Tokens rendered as words, for similarity analytics. An empty segment
    /// renders as `<EOT>`.
    pub fn text(&self) -> String {
        if self.tokens.is_empty() {
            return "<EOT>".into();
        }
        self.tokens
            .iter()
            .map(|t| format!("t{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub segments: Vec<ReasoningSegment>,
}

impl Transcript {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// First-token times (seconds) of segments that emitted anything.
    pub fn segment_starts(&self) -> Vec<f64> {
        self.segments
            .iter()
            .filter_map(|s| s.start_time())
            .map(Nanos::secs)
            .collect()
    }
}

/// Everything a run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub paradigm: Paradigm,
    pub pos_scheme: PositionScheme,
    pub clock: ClockMode,
    pub transcript: Transcript,
    pub timeline: Timeline,
    pub cache_stats: CacheStats,
    /// Visual tokens visible to each reasoning-side cache entry (prompt
    /// included), in cache order. Empty for monolithic paradigms.
    pub text_visibility: Vec<usize>,
    /// Segment tag of each reasoning-side cache entry (`-1` for the prompt),
    /// in cache order. Empty for monolithic paradigms.
    pub text_tags: Vec<i64>,
    /// Final visual token count.
    pub visual_tokens: usize,
}

impl RunOutput {
    /// Mask over the final cache layout: streaming for the parallel
    /// paradigm, causal otherwise.
    pub fn final_mask(&self) -> Result<MaskSpec> {
        match self.paradigm {
            Paradigm::Parallel => streaming_mask(
                self.visual_tokens,
                self.text_visibility.len(),
                &FrameBoundaryMap::new(self.text_visibility.clone())?,
            ),
            _ => causal_mask((self.cache_stats.video_len + self.cache_stats.text_len).max(1)),
        }
    }
}

/// Deterministic frame embeddings: a seeded `k x FRAME_PAYLOAD_DIM` payload
/// pushed through the model's frame projection.
pub fn encode_frame(frame: &Frame, params: &ModelParameters, tokens_per_frame: usize) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame.payload_seed);
    let payload = (0..tokens_per_frame * FRAME_PAYLOAD_DIM)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    params.project_frame(&Matrix::from_vec(tokens_per_frame, FRAME_PAYLOAD_DIM, payload)?)
}

/// Run frame embeddings through the decoder so their keys and values can be
/// cached. Visual rows attend causally to `history` and to each other.
fn ingest(params: &ModelParameters, embeddings: &Matrix, history: &dyn CacheView) -> Result<Vec<KvEntry>> {
    let start = history.len();
    let n = embeddings.rows();
    let positions = PositionAssignment::run(start, n, Modality::Visual);
    let mask = causal_rows(start..start + n, start + n);
    Ok(forward(params, embeddings, &positions, &mask, history)?.entries)
}

/// How new reasoning tokens see the cache they are decoded against.
#[derive(Clone, Debug)]
pub enum DecodeLayout {
    /// One physical causal stream; positions continue the global counter.
    Monolithic,
    /// `[visual | text]` merged view. Every reasoning token of this segment
    /// sees the first `window` visual tokens. `text_widths` lists the window
    /// of each text entry already in the view.
    Merged {
        visual_len: usize,
        window: usize,
        text_widths: Vec<usize>,
        scheme: PositionScheme,
    },
}

/// Result of [`generate_segment`].
#[derive(Debug)]
pub struct GeneratedSegment {
    pub tokens: Vec<TokenId>,
    pub emit_times: Vec<Nanos>,
    pub end_time: Nanos,
    pub ended_with_eot: bool,
    /// Cache entries of every token fed during the segment, in order: the
    /// pending inputs first, then each emitted token except the last.
    pub entries: Vec<KvEntry>,
    /// The token to feed at the start of the next segment.
    pub next_pending: TokenId,
}

/// Greedy decoding of one segment against `base`. With `stop_at_eot`
/// false the `<EOT>` logit is ignored and the segment always reaches
/// `max_tokens`.
///
/// `tick(n)` is called after each decoder step that fed `n` tokens and
/// returns the time at which that step's output token was emitted. The
/// caller appends `entries` to its reasoning cache.
pub fn generate_segment(
    params: &ModelParameters,
    base: &dyn CacheView,
    layout: &DecodeLayout,
    pending: &[TokenId],
    max_tokens: usize,
    stop_at_eot: bool,
    tick: &mut dyn FnMut(usize) -> Nanos,
) -> Result<GeneratedSegment> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be >= 1".into()));
    }
    if pending.is_empty() {
        return Err(Error::InvalidArgument(
            "a segment needs at least one pending input token".into(),
        ));
    }
    if base.is_empty() {
        return Err(Error::EmptyInput("merged view"));
    }
    let mut local: Vec<KvEntry> = Vec::new();
    let mut inputs = pending.to_vec();
    let mut tokens = Vec::new();
    let mut emit_times = Vec::new();
    loop {
        let view = Extended { base, tail: &local };
        let start = view.len();
        let n = inputs.len();
        let (positions, mask) = match layout {
            DecodeLayout::Monolithic => (
                PositionAssignment::run(start, n, Modality::Reasoning),
                causal_rows(start..start + n, start + n),
            ),
            DecodeLayout::Merged {
                visual_len,
                window,
                text_widths,
                scheme,
            } => {
                let text_start = start - visual_len;
                let mut widths = text_widths.clone();
                widths.resize(text_start + n, *window);
                let boundaries = FrameBoundaryMap::new(widths)?;
                let mask = streaming_rows(
                    *visual_len,
                    text_start + n,
                    &boundaries,
                    &VisualTextAccess::None,
                    start..start + n,
                )?;
                let first = match scheme {
                    PositionScheme::Decoupled => text_start,
                    PositionScheme::Monolithic => start,
                };
                (PositionAssignment::run(first, n, Modality::Reasoning), mask)
            }
        };
        let embeddings = params.embed_tokens(&inputs)?;
        let out = forward(params, &embeddings, &positions, &mask, &view)?;
        local.extend(out.entries);
        let last = out.logits.row(n - 1);
        let token = if stop_at_eot {
            argmax(last)
        } else {
            let skip = EOT_TOKEN as usize + 1;
            argmax(&last[skip..]) + skip as TokenId
        };
        let t = tick(n);
        if token == EOT_TOKEN {
            return Ok(GeneratedSegment {
                tokens,
                emit_times,
                end_time: t,
                ended_with_eot: true,
                entries: local,
                next_pending: EOT_TOKEN,
            });
        }
        tokens.push(token);
        emit_times.push(t);
        if tokens.len() == max_tokens {
            return Ok(GeneratedSegment {
                tokens,
                emit_times,
                end_time: t,
                ended_with_eot: false,
                entries: local,
                next_pending: token,
            });
        }
        inputs = vec![token];
    }
}

/// Sequential time source for the single-worker paradigms.
trait Clock {
    fn now(&self) -> Nanos;
    fn wait_until(&mut self, t: Nanos);
    fn encoded(&mut self) -> Nanos;
    fn decoded(&mut self, tokens: usize) -> Nanos;
}

struct SimClock {
    cursor: Nanos,
    encode: Nanos,
    decode: Nanos,
}

impl Clock for SimClock {
    fn now(&self) -> Nanos {
        self.cursor
    }

    fn wait_until(&mut self, t: Nanos) {
        self.cursor = self.cursor.max(t);
    }

    fn encoded(&mut self) -> Nanos {
        self.cursor = self.cursor + self.encode;
        self.cursor
    }

    fn decoded(&mut self, tokens: usize) -> Nanos {
        self.cursor = self.cursor + self.decode.times(tokens);
        self.cursor
    }
}

#[derive(Clone, Copy)]
struct WallClock {
    origin: Instant,
}

impl WallClock {
    fn elapsed(&self) -> Nanos {
        Nanos(self.origin.elapsed().as_nanos() as u64)
    }
}

impl Clock for WallClock {
    fn now(&self) -> Nanos {
        self.elapsed()
    }

    fn wait_until(&mut self, t: Nanos) {
        let now = self.elapsed();
        if t > now {
            std::thread::sleep(Duration::from_nanos((t - now).0));
        }
    }

    fn encoded(&mut self) -> Nanos {
        self.elapsed()
    }

    fn decoded(&mut self, _tokens: usize) -> Nanos {
        self.elapsed()
    }
}

fn arrivals(stream: &FrameStream, arrival: Arrival) -> Result<Vec<Nanos>> {
    let t0 = stream.frames[0].timestamp;
    stream
        .frames
        .iter()
        .map(|f| match arrival {
            Arrival::Live => Nanos::from_secs(f.timestamp - t0),
            Arrival::Prebuffered => Ok(Nanos::ZERO),
        })
        .collect()
}

fn make_clock(config: &RunConfig) -> Result<Box<dyn Clock>> {
    let (encode, decode) = config.costs.validated()?;
    Ok(match config.clock {
        ClockMode::Simulated => Box::new(SimClock {
            cursor: Nanos::ZERO,
            encode,
            decode,
        }),
        ClockMode::Wall => Box::new(WallClock { origin: Instant::now() }),
    })
}

fn check_inputs(stream: &FrameStream, config: &RunConfig) -> Result<()> {
    if stream.frames.is_empty() {
        return Err(Error::InvalidStream("stream has no frames".into()));
    }
    stream.validate()?;
    config.validate()
}

struct Recorder {
    events: Vec<Event>,
    segments: Vec<ReasoningSegment>,
    decode_started: bool,
}

impl Recorder {
    fn new() -> Self {
        Self {
            events: Vec::new(),
            segments: Vec::new(),
            decode_started: false,
        }
    }

    fn push(&mut self, time: Nanos, kind: EventKind) {
        self.events.push(Event { time, kind });
    }

    fn begin_segment(&mut self, time: Nanos) {
        if !self.decode_started {
            self.decode_started = true;
            self.push(time, EventKind::DecodeStart);
        }
    }

    fn finish_segment(
        &mut self,
        seg: &GeneratedSegment,
        index: usize,
        frames: usize,
        merge_time: Nanos,
        attended: Vec<usize>,
    ) {
        for (&tok, &t) in seg.tokens.iter().zip(&seg.emit_times) {
            self.push(
                t,
                EventKind::TokenEmitted {
                    segment: index,
                    token: tok,
                },
            );
        }
        self.push(seg.end_time, EventKind::SegmentEnd { segment: index });
        self.segments.push(ReasoningSegment {
            segment_index: index,
            tokens: seg.tokens.clone(),
            emit_times: seg.emit_times.clone(),
            frames_visible_at_start: frames,
            merge_time,
            end_time: seg.end_time,
            ended_with_eot: seg.ended_with_eot,
            attended_frames: attended,
        });
    }

    fn finish(mut self) -> (Transcript, Timeline) {
        if let Some(last) = self.segments.last() {
            self.events.push(Event {
                time: last.end_time,
                kind: EventKind::AnswerDone,
            });
        }
        (
            Transcript {
                segments: self.segments,
            },
            Timeline::from_events(self.events),
        )
    }
}

fn monolithic_stats(visual: usize, text: usize, frames: usize, segments: usize) -> CacheStats {
    CacheStats {
        video_len: visual,
        text_len: text,
        video_frames: frames,
        text_segments: segments,
        snapshot_count: 0,
        payload_count: visual + text,
    }
}

/// Encode every frame, then generate one segment over the full context.
pub fn run_batch(stream: &FrameStream, params: &ModelParameters, config: &RunConfig) -> Result<RunOutput> {
    check_inputs(stream, config)?;
    let arrive = arrivals(stream, config.arrival)?;
    let mut clock = make_clock(config)?;
    let mut rec = Recorder::new();
    let mut cache = MonolithicCache::new();
    for (i, frame) in stream.frames.iter().enumerate() {
        rec.push(arrive[i], EventKind::FrameArrival { frame: i });
        clock.wait_until(arrive[i]);
        rec.push(clock.now(), EventKind::EncodeStart { frame: i });
        let emb = encode_frame(frame, params, config.tokens_per_frame)?;
        let entries = ingest(params, &emb, &cache)?;
        cache.extend(entries);
        rec.push(clock.encoded(), EventKind::EncodeDone { frame: i });
    }
    let visual = cache.len();
    let mut text = 0;
    if config.max_segment_tokens > 0 {
        let start = clock.now();
        rec.begin_segment(start);
        let seg = generate_segment(
            params,
            &cache,
            &DecodeLayout::Monolithic,
            &config.prompt,
            config.max_segment_tokens,
            !config.fixed_length,
            &mut |n| clock.decoded(n),
        )?;
        text = seg.entries.len();
        rec.finish_segment(&seg, 0, stream.len(), start, (0..stream.len()).collect());
    }
    let segments = rec.segments.len();
    let (transcript, timeline) = rec.finish();
    Ok(RunOutput {
        paradigm: Paradigm::Batch,
        pos_scheme: PositionScheme::Monolithic,
        clock: config.clock,
        transcript,
        timeline,
        cache_stats: monolithic_stats(visual, text, stream.len(), segments),
        text_visibility: Vec::new(),
        text_tags: Vec::new(),
        visual_tokens: visual,
    })
}

/// `F_1, R_1, F_2, R_2, ...` in one causal stream.
pub fn run_interleaved(stream: &FrameStream, params: &ModelParameters, config: &RunConfig) -> Result<RunOutput> {
    check_inputs(stream, config)?;
    let arrive = arrivals(stream, config.arrival)?;
    let mut clock = make_clock(config)?;
    let mut rec = Recorder::new();
    let mut cache = MonolithicCache::new();
    let mut pending = config.prompt.clone();
    let (mut visual, mut text) = (0, 0);
    for (i, frame) in stream.frames.iter().enumerate() {
        rec.push(arrive[i], EventKind::FrameArrival { frame: i });
        clock.wait_until(arrive[i]);
        rec.push(clock.now(), EventKind::EncodeStart { frame: i });
        let emb = encode_frame(frame, params, config.tokens_per_frame)?;
        let entries = ingest(params, &emb, &cache)?;
        visual += entries.len();
        cache.extend(entries);
        rec.push(clock.encoded(), EventKind::EncodeDone { frame: i });

        if config.max_segment_tokens == 0 {
            continue;
        }
        let start = clock.now();
        rec.begin_segment(start);
        let seg = generate_segment(
            params,
            &cache,
            &DecodeLayout::Monolithic,
            &pending,
            config.max_segment_tokens,
            !config.fixed_length,
            &mut |n| clock.decoded(n),
        )?;
        rec.finish_segment(&seg, i, i + 1, start, (0..=i).collect());
        pending = vec![seg.next_pending];
        text += seg.entries.len();
        cache.extend(seg.entries);
    }
    let segments = rec.segments.len();
    let (transcript, timeline) = rec.finish();
    Ok(RunOutput {
        paradigm: Paradigm::Interleaved,
        pos_scheme: PositionScheme::Monolithic,
        clock: config.clock,
        transcript,
        timeline,
        cache_stats: monolithic_stats(visual, text, stream.len(), segments),
        text_visibility: Vec::new(),
        text_tags: Vec::new(),
        visual_tokens: visual,
    })
}

/// Decode-side state shared by the simulated and wall-clock parallel loops.
struct DecodeLoop<'a> {
    params: &'a ModelParameters,
    config: &'a RunConfig,
    scheme: PositionScheme,
    text: TextCache,
    text_widths: Vec<usize>,
    pending: Vec<TokenId>,
    prompt_pending: bool,
    rec: Recorder,
}

impl DecodeLoop<'_> {
    /// Merge at `merge_time` with the first `frames` frames visible, generate
    /// a segment and append it to the text cache.
    fn cycle(
        &mut self,
        video: &CacheHandle,
        frames: usize,
        merge_time: Nanos,
        tick: &mut dyn FnMut(usize) -> Nanos,
    ) -> Result<()> {
        let k = self.config.tokens_per_frame;
        let index = self.rec.segments.len();
        let visual_len = frames * k;
        let view: MergedView = merge_handles(video, visual_len, &self.text.handle(), self.text.len())?;
        debug_assert_eq!(view.frames(), frames);
        self.rec.begin_segment(merge_time);
        self.rec.push(merge_time, EventKind::Merge { segment: index, frames });
        let layout = DecodeLayout::Merged {
            visual_len,
            window: visual_len,
            text_widths: self.text_widths.clone(),
            scheme: self.scheme,
        };
        let seg = generate_segment(
            self.params,
            &view,
            &layout,
            &self.pending,
            self.config.max_segment_tokens,
            !self.config.fixed_length,
            tick,
        )?;
        // frames reachable through the window, read back from the view
        let mut attended: Vec<usize> = (0..visual_len).map(|i| view.frame_of(i)).collect();
        attended.dedup();
        self.rec.finish_segment(&seg, index, frames, merge_time, attended);

        let mut entries = seg.entries;
        self.text_widths
            .resize(self.text_widths.len() + entries.len(), visual_len);
        if self.prompt_pending {
            let rest = entries.split_off(self.pending.len());
            self.text.append_text(entries, PROMPT_SEGMENT)?;
            entries = rest;
            self.prompt_pending = false;
        }
        self.text.append_text(entries, index as i64)?;
        self.pending = vec![seg.next_pending];
        Ok(())
    }
}

/// Dual-cache merge-generate-split loop.
pub fn run_parallel(stream: &FrameStream, params: &ModelParameters, config: &RunConfig) -> Result<RunOutput> {
    check_inputs(stream, config)?;
    let (video, text) = dual_cache();
    let scheme = config.pos_scheme.unwrap_or(Paradigm::Parallel.default_scheme());
    let mut dl = DecodeLoop {
        params,
        config,
        scheme,
        text,
        text_widths: Vec::new(),
        pending: config.prompt.clone(),
        prompt_pending: true,
        rec: Recorder::new(),
    };
    let video = match config.clock {
        ClockMode::Simulated if config.single_thread => parallel_sim_single(stream, &mut dl, video)?,
        ClockMode::Simulated => parallel_sim_threaded(stream, &mut dl, video)?,
        ClockMode::Wall => parallel_wall(stream, &mut dl, video)?,
    };
    let stats = CacheStats::of(&video, &dl.text);
    let visual_tokens = video.len();
    let text_handle = dl.text.handle();
    let text_tags = (0..text_handle.len()).map(|i| text_handle.tag(i)).collect();
    let text_visibility = dl.text_widths;
    let (transcript, timeline) = dl.rec.finish();
    Ok(RunOutput {
        paradigm: Paradigm::Parallel,
        pos_scheme: scheme,
        clock: config.clock,
        transcript,
        timeline,
        cache_stats: stats,
        text_visibility,
        text_tags,
        visual_tokens,
    })
}

/// Encode schedule when ingest never waits on decode.
fn ingest_schedule(arrive: &[Nanos], encode: Nanos) -> Vec<(Nanos, Nanos)> {
    let mut done = Nanos::ZERO;
    arrive
        .iter()
        .map(|&a| {
            let start = a.max(done);
            done = start + encode;
            (start, done)
        })
        .collect()
}

/// The sequence of `(merge_time, frames_visible)` the decode loop follows,
/// interleaved with running the segments (each segment's end time decides
/// the next merge).
fn next_merge(
    schedule: &[(Nanos, Nanos)],
    mode: MergeSchedule,
    cursor: Nanos,
    visible: usize,
) -> Option<(Nanos, usize)> {
    let n = schedule.len();
    if visible == n {
        return None;
    }
    let ready = |t: Nanos| schedule.iter().take_while(|(_, done)| *done <= t).count();
    match mode {
        MergeSchedule::SinglePostStream => Some((cursor.max(schedule[n - 1].1), n)),
        MergeSchedule::Streaming => {
            let now_ready = ready(cursor);
            if now_ready > visible {
                Some((cursor, now_ready))
            } else {
                let t = schedule[visible].1;
                Some((t, ready(t)))
            }
        }
    }
}

fn record_ingest_events(rec: &mut Recorder, arrive: &[Nanos], schedule: &[(Nanos, Nanos)]) {
    for (i, (&a, &(s, d))) in arrive.iter().zip(schedule).enumerate() {
        rec.push(a, EventKind::FrameArrival { frame: i });
        rec.push(s, EventKind::EncodeStart { frame: i });
        rec.push(d, EventKind::EncodeDone { frame: i });
    }
}

fn encode_into(video: &mut VideoCache, params: &ModelParameters, frame: &Frame, index: usize, k: usize) -> Result<()> {
    let emb = encode_frame(frame, params, k)?;
    let handle = video.handle();
    let entries = ingest(params, &emb, &handle)?;
    video.append_video(entries, index)?;
    Ok(())
}

fn simulate_decode(
    stream: &FrameStream,
    dl: &mut DecodeLoop<'_>,
    video: &CacheHandle,
    mut ensure_frames: impl FnMut(usize) -> Result<()>,
) -> Result<()> {
    let (encode, decode) = dl.config.costs.validated()?;
    let arrive = arrivals(stream, dl.config.arrival)?;
    let schedule = ingest_schedule(&arrive, encode);
    record_ingest_events(&mut dl.rec, &arrive, &schedule);
    if dl.config.max_segment_tokens == 0 {
        return ensure_frames(stream.len());
    }
    let mut cursor = Nanos::ZERO;
    let mut visible = 0;
    while let Some((merge_time, frames)) = next_merge(&schedule, dl.config.merge_schedule, cursor, visible) {
        ensure_frames(frames)?;
        cursor = merge_time;
        let mut tick = |n: usize| {
            cursor = cursor + decode.times(n);
            cursor
        };
        dl.cycle(video, frames, merge_time, &mut tick)?;
        visible = frames;
    }
    ensure_frames(stream.len())
}

fn parallel_sim_single(stream: &FrameStream, dl: &mut DecodeLoop<'_>, mut video: VideoCache) -> Result<VideoCache> {
    let handle = video.handle();
    let (params, k) = (dl.params, dl.config.tokens_per_frame);
    let mut encoded = 0;
    simulate_decode(stream, dl, &handle, |frames| {
        while encoded < frames {
            encode_into(&mut video, params, &stream.frames[encoded], encoded, k)?;
            encoded += 1;
        }
        Ok(())
    })?;
    Ok(video)
}

fn parallel_sim_threaded(stream: &FrameStream, dl: &mut DecodeLoop<'_>, mut video: VideoCache) -> Result<VideoCache> {
    let handle = video.handle();
    let (params, k) = (dl.params, dl.config.tokens_per_frame);
    std::thread::scope(|scope| {
        let ingest = scope.spawn(move || -> Result<VideoCache> {
            for (i, frame) in stream.frames.iter().enumerate() {
                encode_into(&mut video, params, frame, i, k)?;
            }
            Ok(video)
        });
        let decoded = simulate_decode(stream, dl, &handle, |frames| {
            // a failed ingest stops publishing; surface its error via join
            while handle.len() < frames * k {
                if ingest.is_finished() {
                    return Err(Error::InvalidStream("ingest worker stopped early".into()));
                }
                handle.wait_for_len_timeout(frames * k, Duration::from_millis(50));
            }
            Ok(())
        });
        let video = ingest.join().expect("ingest worker panicked")?;
        decoded.map(|_| video)
    })
}

fn parallel_wall(stream: &FrameStream, dl: &mut DecodeLoop<'_>, mut video: VideoCache) -> Result<VideoCache> {
    let arrive = arrivals(stream, dl.config.arrival)?;
    let clock = WallClock { origin: Instant::now() };
    let handle = video.handle();
    let (params, k) = (dl.params, dl.config.tokens_per_frame);
    let n = stream.len();
    let ingest_events = Mutex::new(Vec::new());
    let video = std::thread::scope(|scope| -> Result<VideoCache> {
        let events = &ingest_events;
        let arrive = &arrive;
        let ingest = scope.spawn(move || -> Result<VideoCache> {
            let mut c = clock;
            for (i, frame) in stream.frames.iter().enumerate() {
                c.wait_until(arrive[i]);
                let arrived = c.now().max(arrive[i]);
                let start = c.now();
                encode_into(&mut video, params, frame, i, k)?;
                let done = c.now();
                let mut ev = events.lock().unwrap_or_else(|e| e.into_inner());
                ev.push(Event {
                    time: arrived,
                    kind: EventKind::FrameArrival { frame: i },
                });
                ev.push(Event {
                    time: start,
                    kind: EventKind::EncodeStart { frame: i },
                });
                ev.push(Event {
                    time: done,
                    kind: EventKind::EncodeDone { frame: i },
                });
            }
            Ok(video)
        });
        let decoded = (|| -> Result<()> {
            if dl.config.max_segment_tokens == 0 {
                return Ok(());
            }
            let mut visible = 0;
            while visible < n {
                let mut ready = handle.len() / k;
                if ready == visible {
                    while handle.len() < (visible + 1) * k {
                        if ingest.is_finished() && handle.len() < (visible + 1) * k {
                            return Err(Error::InvalidStream("ingest worker stopped early".into()));
                        }
                        handle.wait_for_len_timeout((visible + 1) * k, Duration::from_millis(50));
                    }
                    ready = handle.len() / k;
                }
                let merge_time = clock.now();
                let mut tick = |_n: usize| clock.elapsed();
                dl.cycle(&handle, ready, merge_time, &mut tick)?;
                visible = ready;
            }
            Ok(())
        })();
        let video = ingest.join().expect("ingest worker panicked")?;
        decoded.map(|_| video)
    })?;
    for e in ingest_events.into_inner().unwrap_or_else(|e| e.into_inner()) {
        dl.rec.events.push(e);
    }
    Ok(video)
}

/// Dispatch on paradigm.
pub fn run(
    paradigm: Paradigm,
    stream: &FrameStream,
    params: &ModelParameters,
    config: &RunConfig,
) -> Result<RunOutput> {
    match paradigm {
        Paradigm::Batch => run_batch(stream, params, config),
        Paradigm::Interleaved => run_interleaved(stream, params, config),
        Paradigm::Parallel => run_parallel(stream, params, config),
    }
}

/// Forward a fixed token list with a causal mask and no cache; handy for
/// checks that need a reference decode.
pub fn reference_logits(params: &ModelParameters, tokens: &[TokenId]) -> Result<Matrix> {
    let n = tokens.len();
    let emb = params.embed_tokens(tokens)?;
    let out = forward(
        params,
        &emb,
        &PositionAssignment::run(0, n, Modality::Reasoning),
        &causal_mask(n)?,
        &EmptyView,
    )?;
    Ok(out.logits)
}
