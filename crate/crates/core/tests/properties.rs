use proptest::prelude::*;

use tays::evalkit::{overall_delay, ttft, TtftMode};
use tays::kvcache::{dual_cache, merge, split, CacheView, KvEntry};
use tays::numerics::{init_model, ToyModelConfig};
use tays::runtime::{run, Arrival, CostModel, EventKind, FrameStream, Nanos, Paradigm, RunConfig};

fn entry(x: f64) -> KvEntry {
    KvEntry::new(1, 2, vec![x, -x], vec![x * 2.0, 1.0])
}

fn config(tpf: usize, max_tokens: usize, enc_ms: u32, dec_ms: u32, live: bool, fixed: bool) -> RunConfig {
    RunConfig {
        tokens_per_frame: tpf,
        max_segment_tokens: max_tokens,
        costs: CostModel {
            encode_cost_per_frame: enc_ms as f64 / 1000.0,
            decode_cost_per_token: dec_ms as f64 / 1000.0,
        },
        arrival: if live { Arrival::Live } else { Arrival::Prebuffered },
        fixed_length: fixed,
        ..RunConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn views_are_frozen_and_share_payloads(
        frames in prop::collection::vec(1usize..4, 1..6),
        texts in prop::collection::vec(1usize..5, 1..6),
    ) {
        let (mut video, mut text) = dual_cache();
        let mut views = Vec::new();
        let mut x = 0.0;
        for (i, (&f, &t)) in frames.iter().zip(texts.iter().cycle()).enumerate() {
            video.append_video((0..f).map(|_| { x += 1.0; entry(x) }).collect(), i).unwrap();
            let view = merge(&video, &text);
            let frozen: Vec<KvEntry> = (0..view.len()).map(|j| view.entry(j).deep_copy()).collect();
            views.push((view, frozen));
            text.append_text((0..t).map(|_| { x += 1.0; entry(x) }).collect(), i as i64).unwrap();
        }
        for (view, frozen) in &views {
            prop_assert_eq!(view.len(), frozen.len());
            for (j, e) in frozen.iter().enumerate() {
                prop_assert_eq!(view.entry(j), e);
            }
            let (v, t) = split(view);
            prop_assert!(v.same_cache(&video.handle()) && t.same_cache(&text.handle()));
            prop_assert!(v.len() >= view.video_len() && t.len() >= view.text_len());
        }
        prop_assert_eq!(video.ledger().payload_count(), video.len() + text.len());
    }

    #[test]
    fn paradigm_timelines_are_well_formed(
        paradigm in prop::sample::select(Paradigm::ALL.to_vec()),
        n in 1usize..10,
        fps in 1u32..6,
        tpf in 1usize..4,
        max_tokens in 0usize..10,
        enc_ms in 1u32..300,
        dec_ms in 1u32..60,
        live: bool,
        fixed: bool,
        seed in 0u64..1000,
    ) {
        let params = init_model(ToyModelConfig { seed, ..ToyModelConfig::default() }).unwrap();
        let stream = FrameStream::synthetic(n, fps as f64, seed);
        let cfg = config(tpf, max_tokens, enc_ms, dec_ms, live, fixed);
        let out = run(paradigm, &stream, &params, &cfg).unwrap();
        let events = out.timeline.events();
        prop_assert!(events.windows(2).all(|w| w[0].time <= w[1].time));

        let mut visible = 0;
        for seg in &out.transcript.segments {
            prop_assert!(seg.emit_times.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(seg.frames_visible_at_start >= visible);
            visible = seg.frames_visible_at_start;
            prop_assert!(seg.tokens.len() <= max_tokens);
            if fixed {
                prop_assert_eq!(seg.tokens.len(), max_tokens);
            }
            let ready = (0..n).filter(|&f| out.timeline.encode_done(f).unwrap() <= seg.merge_time).count();
            prop_assert!(seg.frames_visible_at_start <= ready);
        }

        if out.transcript.tokens().is_empty() {
            prop_assert!(ttft(&out.timeline, TtftMode::EndToEnd).is_err());
            return Ok(());
        }
        let e2e = ttft(&out.timeline, TtftMode::EndToEnd).unwrap();
        let dec = ttft(&out.timeline, TtftMode::DecoderLevel).unwrap();
        prop_assert!(e2e >= dec);
        prop_assert!(overall_delay(&out.timeline).unwrap() >= e2e);

        let first_token = out.timeline.first(|k| matches!(k, EventKind::TokenEmitted { .. })).unwrap();
        let first_done = out.timeline.encode_done(0).unwrap();
        prop_assert!(first_token > first_done);
        if paradigm == Paradigm::Batch {
            prop_assert!(first_token > out.timeline.encode_done(n - 1).unwrap());
        }
    }

    #[test]
    fn parallel_simulation_is_thread_independent(
        n in 1usize..10,
        fps in 1u32..6,
        max_tokens in 1usize..10,
        enc_ms in 1u32..300,
        live: bool,
        seed in 0u64..1000,
    ) {
        let params = init_model(ToyModelConfig { seed, ..ToyModelConfig::default() }).unwrap();
        let stream = FrameStream::synthetic(n, fps as f64, seed);
        let threaded = config(4, max_tokens, enc_ms, 20, live, false);
        let single = RunConfig { single_thread: true, ..threaded.clone() };
        let a = run(Paradigm::Parallel, &stream, &params, &threaded).unwrap();
        let b = run(Paradigm::Parallel, &stream, &params, &single).unwrap();
        prop_assert_eq!(a.transcript, b.transcript);
        prop_assert_eq!(a.timeline, b.timeline);
        prop_assert_eq!(a.text_visibility, b.text_visibility);
    }
}

#[test]
fn parallel_tokens_precede_later_arrivals() {
    let params = init_model(ToyModelConfig::default()).unwrap();
    let stream = FrameStream::synthetic(10, 1.0, 0);
    let out = run(Paradigm::Parallel, &stream, &params, &RunConfig::default()).unwrap();
    let first = out
        .timeline
        .first(|k| matches!(k, EventKind::TokenEmitted { .. }))
        .unwrap();
    assert!(first < out.timeline.arrival(9).unwrap());
    assert_eq!(first, Nanos::from_secs(0.12).unwrap());
}
