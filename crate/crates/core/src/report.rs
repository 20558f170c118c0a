//! Serializable run and bench reports.

use serde::{Deserialize, Serialize};

use crate::evalkit::{overall_delay, ttft, TtftMode};
use crate::kvcache::CacheStats;
use crate::masking::RunLengthMask;
use crate::numerics::{ModelParameters, TokenId};
use crate::positional::PositionScheme;
use crate::runtime::{Arrival, ClockMode, CostModel, EventKind, Paradigm, RunConfig, RunOutput};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub checksum: String,
}

impl ModelInfo {
    pub fn of(params: &ModelParameters) -> Self {
        let c = params.config();
        Self {
            d_model: c.d_model,
            n_heads: c.n_heads,
            n_layers: c.n_layers,
            vocab_size: c.vocab_size,
            seed: c.seed,
            checksum: params.checksum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segment_index: usize,
    pub tokens: Vec<TokenId>,
    pub emit_times_s: Vec<f64>,
    pub start_s: Option<f64>,
    pub end_s: f64,
    pub merge_time_s: f64,
    pub frames_visible_at_start: usize,
    pub attended_frames: Vec<usize>,
    pub ended_with_eot: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub time_s: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything `tays simulate` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub paradigm: Paradigm,
    pub fps: f64,
    /// End-to-end: first token minus first frame arrival.
    pub ttft_s: Option<f64>,
    /// First token minus decode start.
    pub decoder_ttft_s: Option<f64>,
    pub delay_s: Option<f64>,
    pub clock: ClockMode,
    pub pos_scheme: PositionScheme,
    pub arrival: Arrival,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub max_segment_tokens: usize,
    pub costs: CostModel,
    pub model: ModelInfo,
    pub segments: Vec<SegmentReport>,
    pub cache_stats: CacheStats,
    pub timeline: Vec<EventReport>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingEvent(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl RunReport {
    pub fn new(
        out: &RunOutput,
        fps: f64,
        n_frames: usize,
        params: &ModelParameters,
        config: &RunConfig,
    ) -> Result<Self> {
        Ok(Self {
            paradigm: out.paradigm,
            fps,
            ttft_s: optional(ttft(&out.timeline, TtftMode::EndToEnd))?,
            decoder_ttft_s: optional(ttft(&out.timeline, TtftMode::DecoderLevel))?,
            delay_s: optional(overall_delay(&out.timeline))?,
            clock: out.clock,
            pos_scheme: out.pos_scheme,
            arrival: config.arrival,
            n_frames,
            tokens_per_frame: config.tokens_per_frame,
            max_segment_tokens: config.max_segment_tokens,
            costs: config.costs,
            model: ModelInfo::of(params),
            segments: out
                .transcript
                .segments
                .iter()
                .map(|s| SegmentReport {
                    segment_index: s.segment_index,
                    tokens: s.tokens.clone(),
                    emit_times_s: s.emit_times.iter().map(|t| t.secs()).collect(),
                    start_s: s.start_time().map(|t| t.secs()),
                    end_s: s.end_time.secs(),
                    merge_time_s: s.merge_time.secs(),
                    frames_visible_at_start: s.frames_visible_at_start,
                    attended_frames: s.attended_frames.clone(),
                    ended_with_eot: s.ended_with_eot,
                })
                .collect(),
            cache_stats: out.cache_stats.clone(),
            timeline: out
                .timeline
                .events()
                .iter()
                .map(|e| EventReport {
                    time_s: e.time.secs(),
                    kind: e.kind,
                })
                .collect(),
        })
    }

    /// First-token times of segments that emitted something.
    pub fn segment_starts(&self) -> Vec<f64> {
        self.segments.iter().filter_map(|s| s.start_s).collect()
    }

    pub fn segment_texts(&self) -> Vec<String> {
        self.segments
            .iter()
            .map(|s| {
                if s.tokens.is_empty() {
                    "<EOT>".to_string()
                } else {
                    s.tokens.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" ")
                }
            })
            .collect()
    }
}

/// Final-layout mask dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub paradigm: Paradigm,
    pub visual_tokens: usize,
    pub reasoning_tokens: usize,
    pub mask: RunLengthMask,
}

impl MaskDump {
    pub fn of(out: &RunOutput) -> Result<Self> {
        Ok(Self {
            paradigm: out.paradigm,
            visual_tokens: out.visual_tokens,
            reasoning_tokens: out.cache_stats.text_len,
            mask: out.final_mask()?.to_run_length(),
        })
    }
}

/// One bench row. The first four columns are the fixed CSV prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub paradigm: Paradigm,
    pub fps: u32,
    pub ttft_s: Option<f64>,
    pub delay_s: Option<f64>,
    pub decoder_ttft_s: Option<f64>,
    pub n_frames: usize,
    pub segments: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub clock: ClockMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub duration_s: f64,
    pub tokens_per_frame: usize,
    pub max_segment_tokens: usize,
    pub fixed_length: bool,
    pub costs: CostModel,
    pub model: ModelInfo,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// CSV with `.` decimals and LF line endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
    }
}
