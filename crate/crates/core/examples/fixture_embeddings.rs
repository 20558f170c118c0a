//! Writes an embedding table for an annotations file: hash-embedder vectors
//! for every text, and frame vectors that lean toward the caption of the
//! keyframe interval they fall in (strongest at the interval midpoint).
//!
//! cargo run --example fixture_embeddings -- fixtures/annotations.jsonl > fixtures/embeddings.jsonl

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, Write};

use tays::embeddings::{normalize, EmbeddingKind, EmbeddingProvider, EmbeddingRecord, HashEmbedder};
use tays::streamprep::read_annotations;

fn main() -> tays::Result<()> {
    let path = std::env::args()
        .nth(1)
        .expect("usage: fixture_embeddings <annotations.jsonl>");
    let videos = read_annotations(BufReader::new(File::open(path)?))?;
    let e = HashEmbedder::default();
    let mut out = io::stdout().lock();
    let mut emit = |kind, key: String, vector| -> tays::Result<()> {
        serde_json::to_writer(&mut out, &EmbeddingRecord { kind, key, vector })?;
        out.write_all(b"\n")?;
        Ok(())
    };
    let mut texts = BTreeSet::new();
    for v in &videos {
        texts.insert(v.question.clone());
        texts.insert(v.answer.clone());
        texts.extend(v.options.iter().cloned());
        texts.extend(v.keyframes.iter().map(|k| k.caption.clone()));
        texts.extend(v.reasoning.iter().map(|r| r.text.clone()));
    }
    for t in texts {
        let vector = e.embed_text(&t)?;
        emit(EmbeddingKind::Text, t, vector)?;
    }
    for v in &videos {
        for f in &v.frames {
            let mut vector = e.embed_frame(&v.frame_key(f))?;
            for k in &v.keyframes {
                let (mid, half) = ((k.start + k.end) / 2.0, ((k.end - k.start) / 2.0).max(0.25));
                let weight = 1.0 - (f.timestamp - mid).abs() / half;
                if weight > 0.0 {
                    let c = e.embed_text(&k.caption)?;
                    vector
                        .iter_mut()
                        .zip(&c)
                        .for_each(|(x, y)| *x = 0.3 * *x + 3.0 * weight * y);
                }
            }
            normalize(&mut vector)?;
            emit(EmbeddingKind::Frame, v.frame_key(f), vector)?;
        }
    }
    Ok(())
}
