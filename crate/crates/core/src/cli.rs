//! The `tays` command line.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::embeddings::{EmbeddingProvider, HashEmbedder, TableEmbedder};
use crate::evalkit::{
    coherence_profile, coherence_report, evaluate, read_cases, temporal_deviation, AlignmentReport, CoherenceReport,
    EvalCase, EvalReport, JudgeConfig,
};
use crate::numerics::{init_model, ModelParameters, ToyModelConfig};
use crate::positional::PositionScheme;
use crate::report::{BenchReport, BenchRow, MaskDump, ModelInfo, RunReport};
use crate::runtime::{self, Arrival, ClockMode, CostModel, FrameStream, MergeSchedule, Paradigm, RunConfig};
use crate::streamprep::{self, FilterConfig, PrepareConfig, ResampleConfig, SnapMode};
use crate::{Error, Result};

pub const SEED_ENV: &str = "TAYS_SEED";

#[derive(Debug, Parser)]
#[command(name = "tays", version, about = "Streaming video reasoning on a toy decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one paradigm over a frame stream and write a run report.
    Simulate(SimulateArgs),
    /// Build trajectory JSONL from annotated videos.
    Prepare(PrepareArgs),
    /// Judge predictions and analyse a run transcript.
    Eval(EvalArgs),
    /// Sweep paradigms over frame rates; writes CSV and optional JSON.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ParadigmArg {
    Batch,
    Interleaved,
    Parallel,
}

impl From<ParadigmArg> for Paradigm {
    fn from(p: ParadigmArg) -> Self {
        match p {
            ParadigmArg::Batch => Paradigm::Batch,
            ParadigmArg::Interleaved => Paradigm::Interleaved,
            ParadigmArg::Parallel => Paradigm::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Monolithic,
    Decoupled,
}

impl From<SchemeArg> for PositionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Monolithic => PositionScheme::Monolithic,
            SchemeArg::Decoupled => PositionScheme::Decoupled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClockArg {
    Simulated,
    Wall,
}

impl From<ClockArg> for ClockMode {
    fn from(c: ClockArg) -> Self {
        match c {
            ClockArg::Simulated => ClockMode::Simulated,
            ClockArg::Wall => ClockMode::Wall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArrivalArg {
    Live,
    Prebuffered,
}

impl From<ArrivalArg> for Arrival {
    fn from(a: ArrivalArg) -> Self {
        match a {
            ArrivalArg::Live => Arrival::Live,
            ArrivalArg::Prebuffered => Arrival::Prebuffered,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Streaming,
    SinglePostStream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedderArg {
    /// Seeded hash of the text or frame key.
    Hash,
    /// Precomputed vectors from --embeddings.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SnapArg {
    Epsilon,
    Interval,
}

/// Toy model and seed.
#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Seed for the model, synthetic streams and the hash embedder.
    /// The TAYS_SEED environment variable overrides it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    /// JSON model config; replaces the dimension flags and the seed.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

/// Simulated costs and decoding limits.
#[derive(Clone, Debug, Args)]
pub struct CostArgs {
    /// Seconds per encoded frame.
    #[arg(long, default_value_t = 0.1)]
    pub encode_cost: f64,
    /// Seconds per decoded token.
    #[arg(long, default_value_t = 0.02)]
    pub decode_cost: f64,
    #[arg(long, default_value_t = 4)]
    pub tokens_per_frame: usize,
    /// Token cap per reasoning segment.
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
}

#[derive(Clone, Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "parallel")]
    pub paradigm: ParadigmArg,
    /// Stream spec JSON. Without it a synthetic stream is generated.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    /// Frames in the synthetic stream.
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    /// Frame rate of the synthetic stream.
    #[arg(long, default_value_t = 2.0)]
    pub fps: f64,
    #[arg(long, value_enum, default_value = "prebuffered")]
    pub arrival: ArrivalArg,
    /// Position scheme; defaults to monolithic for batch and interleaved,
    /// decoupled for parallel.
    #[arg(long, value_enum)]
    pub pos_scheme: Option<SchemeArg>,
    #[arg(long, value_enum, default_value = "simulated")]
    pub clock: ClockArg,
    /// Run ingest and decode on one thread (simulated clock only).
    #[arg(long)]
    pub single_thread: bool,
    /// Parallel merge trigger.
    #[arg(long, value_enum, default_value = "streaming")]
    pub merge: MergeArg,
    /// Ignore <EOT> so every segment reaches --max-tokens.
    #[arg(long)]
    pub fixed_length: bool,
    #[command(flatten)]
    pub costs: CostArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the final attention mask (run-length JSON) here.
    #[arg(long)]
    pub dump_mask: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct EmbedderArgs {
    /// Embedding provider; `file` when --embeddings is given, `hash` otherwise.
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderArg>,
    /// Embedding table JSONL (`{"kind", "key", "vector"}` lines). The seeded
    /// hash embedder is used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Hash embedder dimension.
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    /// Seed for the hash embedder. The TAYS_SEED environment variable
    /// overrides it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct PrepareArgs {
    /// Annotated videos, one JSON object per line.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Grid interval in seconds.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    /// Anchor snapping tolerance in seconds; must be below delta/2.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Clip length limit in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub max_duration: f64,
    #[arg(long, value_enum, default_value = "epsilon")]
    pub snap: SnapArg,
    /// Question-caption relevance threshold.
    #[arg(long, default_value_t = 0.7)]
    pub tau_q: f64,
    /// Adjacent-caption redundancy threshold.
    #[arg(long, default_value_t = 0.9)]
    pub tau_adj: f64,
    /// Question-reasoning consistency threshold.
    #[arg(long, default_value_t = 0.7)]
    pub tau_consistency: f64,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    /// Trajectory JSONL path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Evaluation cases, one JSON object per line.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Predictions (`{"id", "prediction"}` lines) replacing those in --cases.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Judge similarity threshold.
    #[arg(long, visible_alias = "threshold", default_value_t = 0.8)]
    pub tau: f64,
    /// A run report from `tays simulate`, for temporal analytics.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Keyframe timestamps (seconds) for temporal deviation, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub keyframes: Vec<f64>,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    /// Frame rates to sweep: a range `1..5`, a list `1,3,5` or one value.
    /// Each must lie in 1..=5.
    #[arg(long, default_value = "1..5")]
    pub fps: String,
    /// Length of the synthetic clip in seconds.
    #[arg(long, default_value_t = 20.0)]
    pub duration: f64,
    /// Paradigms to run, comma separated.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "batch,interleaved,parallel"
    )]
    pub paradigms: Vec<ParadigmArg>,
    #[arg(long, value_enum, default_value = "simulated")]
    pub clock: ClockArg,
    /// Let segments stop on <EOT> instead of always producing --max-tokens.
    #[arg(long)]
    pub allow_eot: bool,
    #[command(flatten)]
    pub costs: CostArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the full bench report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// `--seed`, unless the environment overrides it.
pub fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn build_model(args: &ModelArgs) -> Result<ModelParameters> {
    let config = match &args.model_config {
        Some(path) => ToyModelConfig::from_json(&fs::read_to_string(path)?)?,
        None => ToyModelConfig {
            d_model: args.d_model,
            n_heads: args.n_heads,
            n_layers: args.n_layers,
            vocab_size: args.vocab_size,
            seed: effective_seed(args.seed)?,
        },
    };
    init_model(config)
}

fn costs(args: &CostArgs) -> CostModel {
    CostModel {
        encode_cost_per_frame: args.encode_cost,
        decode_cost_per_token: args.decode_cost,
    }
}

fn build_embedder(args: &EmbedderArgs) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match (args.embedder, &args.embeddings) {
        (Some(EmbedderArg::File) | None, Some(path)) => Box::new(TableEmbedder::from_jsonl(
            format!("file:{}", path.display()),
            BufReader::new(File::open(path)?),
        )?),
        (Some(EmbedderArg::File), None) => {
            return Err(Error::InvalidArgument("--embedder file needs --embeddings".into()))
        }
        (Some(EmbedderArg::Hash), Some(_)) => {
            return Err(Error::InvalidArgument(
                "--embeddings conflicts with --embedder hash".into(),
            ))
        }
        (Some(EmbedderArg::Hash) | None, None) => {
            Box::new(HashEmbedder::new(args.embed_dim, effective_seed(args.seed)?))
        }
    })
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn simulate(args: &SimulateArgs) -> Result<RunReport> {
    let params = build_model(&args.model)?;
    let stream = match &args.stream {
        Some(path) => FrameStream::from_json(&fs::read_to_string(path)?)?,
        None => {
            if args.frames == 0 {
                return Err(Error::InvalidArgument("--frames must be >= 1".into()));
            }
            FrameStream::synthetic(args.frames, args.fps, effective_seed(args.model.seed)?)
        }
    };
    stream.validate()?;
    if args.single_thread && args.clock == ClockArg::Wall {
        return Err(Error::InvalidArgument(
            "--single-thread needs the simulated clock".into(),
        ));
    }
    let config = RunConfig {
        tokens_per_frame: args.costs.tokens_per_frame,
        max_segment_tokens: args.costs.max_tokens,
        costs: costs(&args.costs),
        arrival: args.arrival.into(),
        clock: args.clock.into(),
        pos_scheme: args.pos_scheme.map(Into::into),
        merge_schedule: match args.merge {
            MergeArg::Streaming => MergeSchedule::Streaming,
            MergeArg::SinglePostStream => MergeSchedule::SinglePostStream,
        },
        single_thread: args.single_thread,
        fixed_length: args.fixed_length,
        ..RunConfig::default()
    };
    let out = runtime::run(args.paradigm.into(), &stream, &params, &config)?;
    if let Some(path) = &args.dump_mask {
        fs::write(path, json_bytes(&MaskDump::of(&out)?)?)?;
    }
    RunReport::new(&out, stream.fps, stream.len(), &params, &config)
}

pub fn prepare(args: &PrepareArgs) -> Result<Vec<u8>> {
    let config = PrepareConfig {
        resample: ResampleConfig {
            delta: args.delta,
            epsilon: args.epsilon,
            max_duration: args.max_duration,
            snap: match args.snap {
                SnapArg::Epsilon => SnapMode::Epsilon,
                SnapArg::Interval => SnapMode::Interval,
            },
        },
        filter: FilterConfig {
            tau_q: args.tau_q,
            tau_adj: args.tau_adj,
        },
        tau_consistency: args.tau_consistency,
    };
    config.validate()?;
    let embedder = build_embedder(&args.embedder)?;
    let reader = BufReader::new(File::open(&args.annotations)?);
    let mut out = Vec::new();
    streamprep::prepare(reader, &mut out, embedder.as_ref(), &config)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub judged: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<CoherenceReport>,
}

#[derive(serde::Deserialize)]
struct Prediction {
    id: String,
    prediction: String,
}

fn apply_predictions(cases: &mut [EvalCase], path: &Path) -> Result<()> {
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("predictions line {}: {e}", n + 1)))?;
        let case = cases
            .iter_mut()
            .find(|c| c.id == p.id)
            .ok_or_else(|| Error::InvalidArgument(format!("prediction for unknown case {:?}", p.id)))?;
        case.prediction = p.prediction;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<EvalOutput> {
    if args.pred.is_some() && args.cases.is_none() {
        return Err(Error::InvalidArgument("--pred needs --cases".into()));
    }
    if args.cases.is_none() && args.run.is_none() {
        return Err(Error::InvalidArgument("eval needs --cases, --run or both".into()));
    }
    let embedder = build_embedder(&args.embedder)?;
    let judged = match &args.cases {
        Some(path) => {
            let mut cases = read_cases(BufReader::new(File::open(path)?))?;
            if let Some(pred) = &args.pred {
                apply_predictions(&mut cases, pred)?;
            }
            if let Some(c) = cases.iter().find(|c| c.prediction.trim().is_empty()) {
                return Err(Error::InvalidArgument(format!("case {:?} has no prediction", c.id)));
            }
            Some(evaluate(&cases, embedder.as_ref(), &JudgeConfig { tau: args.tau })?)
        }
        None => None,
    };
    let (mut alignment, mut coherence) = (None, None);
    if let Some(path) = &args.run {
        let run: RunReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        if !args.keyframes.is_empty() {
            alignment = Some(temporal_deviation(&run.segment_starts(), &args.keyframes)?);
        }
        let texts = run.segment_texts();
        if texts.len() >= 2 {
            coherence = Some(coherence_report(coherence_profile(&texts, embedder.as_ref())?)?);
        }
    }
    Ok(EvalOutput {
        judged,
        alignment,
        coherence,
    })
}

/// Parse `1..5`, `1,3,5` or `3`; every rate must lie in 1..=5.
pub fn parse_fps_sweep(spec: &str) -> Result<Vec<u32>> {
    let bad = || Error::InvalidArgument(format!("bad fps sweep {spec:?}; use e.g. 1..5 or 1,2,4"));
    let values: Vec<u32> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u32, u32) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|v| !(1..=5).contains(v)) {
        return Err(Error::InvalidArgument(format!(
            "fps values must lie in 1..=5, got {spec:?}"
        )));
    }
    Ok(values)
}

pub fn bench(args: &BenchArgs) -> Result<BenchReport> {
    let fps_values = parse_fps_sweep(&args.fps)?;
    if !(args.duration > 0.0) {
        return Err(Error::InvalidArgument("--duration must be > 0".into()));
    }
    let params = build_model(&args.model)?;
    let seed = effective_seed(args.model.seed)?;
    let config = RunConfig {
        tokens_per_frame: args.costs.tokens_per_frame,
        max_segment_tokens: args.costs.max_tokens,
        costs: costs(&args.costs),
        arrival: Arrival::Live,
        clock: args.clock.into(),
        fixed_length: !args.allow_eot,
        ..RunConfig::default()
    };
    let model = ModelInfo::of(&params);
    let mut rows = Vec::new();
    for &paradigm in &args.paradigms {
        for &fps in &fps_values {
            let stream = FrameStream::synthetic_clip(args.duration, fps as f64, seed);
            let out = runtime::run(paradigm.into(), &stream, &params, &config)?;
            let report = RunReport::new(&out, fps as f64, stream.len(), &params, &config)?;
            rows.push(BenchRow {
                paradigm: paradigm.into(),
                fps,
                ttft_s: report.ttft_s,
                delay_s: report.delay_s,
                decoder_ttft_s: report.decoder_ttft_s,
                n_frames: stream.len(),
                segments: report.segments.len(),
                d_model: model.d_model,
                n_heads: model.n_heads,
                n_layers: model.n_layers,
                clock: config.clock,
            });
        }
    }
    Ok(BenchReport {
        duration_s: args.duration,
        tokens_per_frame: config.tokens_per_frame,
        max_segment_tokens: config.max_segment_tokens,
        fixed_length: config.fixed_length,
        costs: config.costs,
        model,
        rows,
    })
}

/// Run a parsed command, writing its outputs.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(args) => write_output(args.out.as_deref(), &json_bytes(&simulate(args)?)?),
        Command::Prepare(args) => write_output(args.out.as_deref(), &prepare(args)?),
        Command::Eval(args) => write_output(args.out.as_deref(), &json_bytes(&eval(args)?)?),
        Command::Bench(args) => {
            let report = bench(args)?;
            if let Some(path) = &args.json {
                fs::write(path, json_bytes(&report)?)?;
            }
            write_output(args.out.as_deref(), report.to_csv()?.as_bytes())
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
