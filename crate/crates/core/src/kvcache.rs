//! Key/value caches.
//!
//! The parallel paradigm keeps two caches: a video cache written by the
//! ingest worker and a text cache owned by the decode loop. Both sit on an
//! [`AppendLog`]: slots never move once written, so a reader that knows a
//! length can read that prefix without locks while the writer keeps
//! appending. A [`MergedView`] is two such prefixes side by side (visual
//! entries first, then text). Creating one copies two handles and two
//! lengths, never a key or value.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const FIRST_CHUNK_BITS: u32 = 5;
const N_CHUNKS: usize = 40;

fn locate(index: usize) -> (usize, usize) {
    let shifted = index + (1 << FIRST_CHUNK_BITS);
    let bits = usize::BITS - 1 - shifted.leading_zeros();
    let chunk = (bits - FIRST_CHUNK_BITS) as usize;
    (chunk, shifted - (1 << bits))
}

fn chunk_capacity(chunk: usize) -> usize {
    1 << (chunk as u32 + FIRST_CHUNK_BITS)
}

struct LogInner<T> {
    chunks: [OnceLock<Box<[OnceLock<T>]>>; N_CHUNKS],
    len: AtomicUsize,
    grown: (Mutex<()>, Condvar),
}

/// Single-writer, many-reader append-only log. Chunk sizes double, so slots
/// have stable addresses and a published prefix is immutable.
pub struct AppendLog<T> {
    inner: Arc<LogInner<T>>,
}

/// Read side of an [`AppendLog`]. Cheap to clone.
pub struct LogReader<T> {
    inner: Arc<LogInner<T>>,
}

impl<T> Clone for LogReader<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> Default for AppendLog<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> AppendLog<T> {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(LogInner {
                chunks: std::array::from_fn(|_| OnceLock::new()),
                len: AtomicUsize::new(0),
                grown: (Mutex::new(()), Condvar::new()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write all items, then publish them in one step.
    pub fn extend<I: IntoIterator<Item = T>>(&mut self, items: I) -> usize {
        let mut len = self.len();
        for item in items {
            let (c, off) = locate(len);
            let chunk = self.inner.chunks[c].get_or_init(|| (0..chunk_capacity(c)).map(|_| OnceLock::new()).collect());
            if chunk[off].set(item).is_err() {
                unreachable!("slot {len} written twice");
            }
            len += 1;
        }
        self.inner.len.store(len, Ordering::Release);
        let (lock, cv) = &self.inner.grown;
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        cv.notify_all();
        len
    }

    pub fn reader(&self) -> LogReader<T> {
        LogReader {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> LogReader<T> {
    pub fn len(&self) -> usize {
        self.inner.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item `index`. Panics if `index` was never published.
    pub fn get(&self, index: usize) -> &T {
        let (c, off) = locate(index);
        self.inner.chunks[c]
            .get()
            .and_then(|chunk| chunk[off].get())
            .unwrap_or_else(|| panic!("log index {index} not published"))
    }

    /// Block until at least `n` items are published.
    pub fn wait_for_len(&self, n: usize) {
        if self.len() >= n {
            return;
        }
        let (lock, cv) = &self.inner.grown;
        let mut guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        while self.len() < n {
            guard = cv.wait(guard).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Like [`wait_for_len`](Self::wait_for_len) but gives up after
    /// `timeout`. Returns whether `n` items are published.
    pub fn wait_for_len_timeout(&self, n: usize, timeout: std::time::Duration) -> bool {
        if self.len() >= n {
            return true;
        }
        let (lock, cv) = &self.inner.grown;
        let guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let _ = cv
            .wait_timeout_while(guard, timeout, |_| self.len() < n)
            .unwrap_or_else(|e| e.into_inner());
        self.len() >= n
    }

    pub fn same_log(&self, other: &LogReader<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Keys and values one token produced in every layer, post-rotation.
/// Not `Clone`. A payload lives in exactly one place.
#[derive(Debug, PartialEq)]
pub struct KvEntry {
    n_layers: usize,
    width: usize,
    keys: Box<[f64]>,
    values: Box<[f64]>,
}

impl KvEntry {
    pub fn new(n_layers: usize, width: usize, keys: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(keys.len(), n_layers * width, "key payload size");
        assert_eq!(values.len(), n_layers * width, "value payload size");
        Self {
            n_layers,
            width,
            keys: keys.into_boxed_slice(),
            values: values.into_boxed_slice(),
        }
    }

    pub fn key(&self, layer: usize) -> &[f64] {
        &self.keys[layer * self.width..(layer + 1) * self.width]
    }

    pub fn value(&self, layer: usize) -> &[f64] {
        &self.values[layer * self.width..(layer + 1) * self.width]
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Explicit physical copy, for building reference caches in tests and
    /// oracles. Never used by the merge path.
    pub fn deep_copy(&self) -> KvEntry {
        KvEntry {
            n_layers: self.n_layers,
            width: self.width,
            keys: self.keys.clone(),
            values: self.values.clone(),
        }
    }
}

/// Ordered, read-only access to cached entries.
pub trait CacheView {
    fn len(&self) -> usize;
    fn entry(&self, index: usize) -> &KvEntry;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A view with nothing in it.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmptyView;

impl CacheView for EmptyView {
    fn len(&self) -> usize {
        0
    }

    fn entry(&self, index: usize) -> &KvEntry {
        panic!("entry {index} of an empty view")
    }
}

/// A view followed by a run of entries that are not cached yet (the tokens
/// of the segment being generated).
pub struct Extended<'a> {
    pub base: &'a dyn CacheView,
    pub tail: &'a [KvEntry],
}

impl CacheView for Extended<'_> {
    fn len(&self) -> usize {
        self.base.len() + self.tail.len()
    }

    fn entry(&self, index: usize) -> &KvEntry {
        let b = self.base.len();
        if index < b {
            self.base.entry(index)
        } else {
            &self.tail[index - b]
        }
    }
}

/// Single physically contiguous cache used by the batch and interleaved
/// paradigms.
#[derive(Debug, Default)]
pub struct MonolithicCache {
    entries: Vec<KvEntry>,
}

impl MonolithicCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: KvEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = KvEntry>) {
        self.entries.extend(entries);
    }

    /// Physical concatenation of `views`, in order.
    pub fn concat(views: &[&dyn CacheView]) -> Self {
        let entries = views
            .iter()
            .flat_map(|v| (0..v.len()).map(move |i| v.entry(i).deep_copy()))
            .collect();
        Self { entries }
    }
}

impl CacheView for MonolithicCache {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn entry(&self, index: usize) -> &KvEntry {
        &self.entries[index]
    }
}

/// Shared counters for a video/text cache pair.
#[derive(Debug, Default)]
pub struct CacheLedger {
    payloads: AtomicUsize,
    snapshots: AtomicUsize,
}

impl CacheLedger {
    pub fn payload_count(&self) -> usize {
        self.payloads.load(Ordering::Relaxed)
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshots.load(Ordering::Relaxed)
    }
}

/// A stored entry plus its frame or segment index. Stored entries are
/// counted in the ledger for as long as they live.
pub struct Stored {
    pub kv: KvEntry,
    pub tag: i64,
    ledger: Arc<CacheLedger>,
}

impl Drop for Stored {
    fn drop(&mut self) {
        self.ledger.payloads.fetch_sub(1, Ordering::Relaxed);
    }
}

/// Live read handle on a video or text cache.
#[derive(Clone)]
pub struct CacheHandle {
    log: LogReader<Stored>,
    ledger: Arc<CacheLedger>,
}

impl CacheHandle {
    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    pub fn tag(&self, index: usize) -> i64 {
        self.log.get(index).tag
    }

    pub fn wait_for_len(&self, n: usize) {
        self.log.wait_for_len(n)
    }

    pub fn wait_for_len_timeout(&self, n: usize, timeout: std::time::Duration) -> bool {
        self.log.wait_for_len_timeout(n, timeout)
    }

    pub fn same_cache(&self, other: &CacheHandle) -> bool {
        self.log.same_log(&other.log)
    }

    pub fn ledger(&self) -> &Arc<CacheLedger> {
        &self.ledger
    }
}

impl CacheView for CacheHandle {
    fn len(&self) -> usize {
        self.log.len()
    }

    fn entry(&self, index: usize) -> &KvEntry {
        &self.log.get(index).kv
    }
}

/// Frozen prefix of a cache.
#[derive(Clone)]
pub struct Prefix {
    handle: CacheHandle,
    len: usize,
}

impl Prefix {
    pub fn tag(&self, index: usize) -> i64 {
        assert!(index < self.len);
        self.handle.tag(index)
    }
}

impl CacheView for Prefix {
    fn len(&self) -> usize {
        self.len
    }

    fn entry(&self, index: usize) -> &KvEntry {
        assert!(index < self.len, "index {index} beyond snapshot length {}", self.len);
        self.handle.entry(index)
    }
}

struct TaggedCache {
    log: AppendLog<Stored>,
    last: Option<i64>,
    groups: usize,
    ledger: Arc<CacheLedger>,
}

impl TaggedCache {
    fn new(ledger: Arc<CacheLedger>) -> Self {
        Self {
            log: AppendLog::new(),
            last: None,
            groups: 0,
            ledger,
        }
    }

    fn append(&mut self, entries: Vec<KvEntry>, tag: i64, floor: i64) -> Result<usize> {
        let last = self.last.unwrap_or(floor - 1);
        if tag <= last || tag < floor {
            return Err(Error::OutOfOrder { index: tag, last });
        }
        self.ledger.payloads.fetch_add(entries.len(), Ordering::Relaxed);
        let ledger = &self.ledger;
        let len = self.log.extend(entries.into_iter().map(|kv| Stored {
            kv,
            tag,
            ledger: Arc::clone(ledger),
        }));
        self.last = Some(tag);
        self.groups += 1;
        Ok(len)
    }

    fn handle(&self) -> CacheHandle {
        CacheHandle {
            log: self.log.reader(),
            ledger: Arc::clone(&self.ledger),
        }
    }
}

/// Visual key/values, one group per frame, frames strictly increasing.
pub struct VideoCache {
    inner: TaggedCache,
}

/// Reasoning key/values, one group per segment. Prompt tokens use segment
/// index -1.
pub struct TextCache {
    inner: TaggedCache,
}

/// Segment index under which prompt entries are stored.
pub const PROMPT_SEGMENT: i64 = -1;

/// A fresh video/text pair sharing one ledger.
pub fn dual_cache() -> (VideoCache, TextCache) {
    let ledger = Arc::new(CacheLedger::default());
    (
        VideoCache {
            inner: TaggedCache::new(Arc::clone(&ledger)),
        },
        TextCache {
            inner: TaggedCache::new(ledger),
        },
    )
}

impl VideoCache {
    /// Append the entries of frame `frame_index`. Returns the new length.
    pub fn append_video(&mut self, entries: Vec<KvEntry>, frame_index: usize) -> Result<usize> {
        self.inner.append(entries, frame_index as i64, 0)
    }

    pub fn len(&self) -> usize {
        self.inner.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.inner.groups
    }

    pub fn handle(&self) -> CacheHandle {
        self.inner.handle()
    }

    pub fn ledger(&self) -> &Arc<CacheLedger> {
        &self.inner.ledger
    }
}

impl TextCache {
    /// Append the entries of segment `segment_index`. Returns the new length.
    pub fn append_text(&mut self, entries: Vec<KvEntry>, segment_index: i64) -> Result<usize> {
        self.inner.append(entries, segment_index, PROMPT_SEGMENT)
    }

    pub fn len(&self) -> usize {
        self.inner.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> usize {
        self.inner.groups
    }

    pub fn handle(&self) -> CacheHandle {
        self.inner.handle()
    }

    pub fn ledger(&self) -> &Arc<CacheLedger> {
        &self.inner.ledger
    }
}

/// Frozen `[video prefix | text prefix]` composition.
#[derive(Clone)]
pub struct MergedView {
    video: Prefix,
    text: Prefix,
}

/// Snapshot both caches at their current lengths.
pub fn merge(video: &VideoCache, text: &TextCache) -> MergedView {
    merge_handles(&video.handle(), video.len(), &text.handle(), text.len())
        .expect("current lengths are always published")
}

/// Snapshot the first `video_len` video entries and `text_len` text entries
/// of live caches. Fails if either prefix is not published yet.
pub fn merge_handles(video: &CacheHandle, video_len: usize, text: &CacheHandle, text_len: usize) -> Result<MergedView> {
    if video_len > video.len() || text_len > text.len() {
        return Err(Error::InvalidArgument(format!(
            "snapshot {video_len}+{text_len} exceeds published {}+{}",
            video.len(),
            text.len()
        )));
    }
    video.ledger.snapshots.fetch_add(1, Ordering::Relaxed);
    Ok(MergedView {
        video: Prefix {
            handle: video.clone(),
            len: video_len,
        },
        text: Prefix {
            handle: text.clone(),
            len: text_len,
        },
    })
}

/// Live handles on both caches, reflecting appends made after the merge.
pub fn split(view: &MergedView) -> (CacheHandle, CacheHandle) {
    (view.video.handle.clone(), view.text.handle.clone())
}

impl MergedView {
    pub fn video_len(&self) -> usize {
        self.video.len
    }

    pub fn text_len(&self) -> usize {
        self.text.len
    }

    pub fn video(&self) -> &Prefix {
        &self.video
    }

    pub fn text(&self) -> &Prefix {
        &self.text
    }

    /// Frame index of visual entry `i`.
    pub fn frame_of(&self, i: usize) -> usize {
        self.video.tag(i) as usize
    }

    /// Number of whole frames in the video prefix.
    pub fn frames(&self) -> usize {
        if self.video.len == 0 {
            0
        } else {
            self.frame_of(self.video.len - 1) + 1
        }
    }
}

impl CacheView for MergedView {
    fn len(&self) -> usize {
        self.video.len + self.text.len
    }

    fn entry(&self, index: usize) -> &KvEntry {
        if index < self.video.len {
            self.video.entry(index)
        } else {
            self.text.entry(index - self.video.len)
        }
    }
}

/// Lengths and counters exported in run reports.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub video_len: usize,
    pub text_len: usize,
    pub video_frames: usize,
    pub text_segments: usize,
    pub snapshot_count: usize,
    pub payload_count: usize,
}

impl CacheStats {
    pub fn of(video: &VideoCache, text: &TextCache) -> Self {
        let ledger = video.ledger();
        Self {
            video_len: video.len(),
            text_len: text.len(),
            video_frames: video.frames(),
            text_segments: text.segments(),
            snapshot_count: ledger.snapshot_count(),
            payload_count: ledger.payload_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize, fill: f64) -> Vec<KvEntry> {
        (0..n)
            .map(|i| KvEntry::new(1, 2, vec![fill, i as f64], vec![i as f64, fill]))
            .collect()
    }

    #[test]
    fn locate_covers_chunks_without_gaps() {
        let mut expected = (0, 0);
        for i in 0..10_000 {
            let got = locate(i);
            assert_eq!(got, expected, "index {i}");
            expected.1 += 1;
            if expected.1 == chunk_capacity(expected.0) {
                expected = (expected.0 + 1, 0);
            }
        }
    }

    #[test]
    fn append_video_grows_and_orders() {
        let (mut v, _t) = dual_cache();
        assert_eq!(v.append_video(entries(4, 0.0), 0).unwrap(), 4);
        assert!(matches!(
            v.append_video(entries(4, 1.0), 0),
            Err(Error::OutOfOrder { index: 0, last: 0 })
        ));
        assert_eq!(v.append_video(entries(4, 1.0), 2).unwrap(), 8);
        assert_eq!(v.frames(), 2);
    }

    #[test]
    fn snapshots_keep_their_length() {
        let (mut v, t) = dual_cache();
        let mut views = Vec::new();
        for f in 0..60 {
            v.append_video(entries(4, f as f64), f).unwrap();
            views.push((merge(&v, &t), 4 * (f + 1)));
        }
        assert_eq!(v.len(), 240);
        for (view, len) in &views {
            assert_eq!(view.len(), *len);
            assert_eq!(view.video_len(), *len);
            // last visible entry still belongs to the frame that was newest at merge time
            assert_eq!(view.frame_of(len - 1), len / 4 - 1);
        }
    }

    #[test]
    fn text_appends_leave_video_alone() {
        let (mut v, mut t) = dual_cache();
        v.append_video(entries(4, 0.0), 0).unwrap();
        assert_eq!(t.append_text(entries(3, 0.0), 0).unwrap(), 3);
        assert_eq!(v.len(), 4);
        assert!(t.append_text(entries(1, 0.0), 0).is_err());
        assert!(t.append_text(entries(1, 0.0), -2).is_err());
    }

    #[test]
    fn prompt_segment_comes_first() {
        let (_v, mut t) = dual_cache();
        t.append_text(entries(2, 0.0), PROMPT_SEGMENT).unwrap();
        t.append_text(entries(1, 0.0), 0).unwrap();
        let h = t.handle();
        assert_eq!((h.tag(0), h.tag(2)), (-1, 0));
    }

    #[test]
    fn segment_metadata_stays_ordered() {
        let (mut v, mut t) = dual_cache();
        for s in 0..50usize {
            v.append_video(entries(1, 0.0), s).unwrap();
            t.append_text(entries(s % 3 + 1, s as f64), s as i64).unwrap();
        }
        let h = t.handle();
        let tags: Vec<i64> = (0..h.len()).map(|i| h.tag(i)).collect();
        assert!(tags.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*tags.last().unwrap(), 49);
    }

    #[test]
    fn merge_and_split() {
        let (mut v, mut t) = dual_cache();
        v.append_video(entries(5, 0.0), 0).unwrap();
        t.append_text(entries(3, 0.0), 0).unwrap();
        let view = merge(&v, &t);
        assert_eq!(view.len(), 8);
        v.append_video(entries(2, 1.0), 1).unwrap();
        assert_eq!(view.len(), 8);
        let (vh, th) = split(&view);
        assert_eq!((vh.len(), th.len()), (7, 3));
        // visual entries come first
        assert_eq!(view.entry(4).key(0), v.handle().entry(4).key(0));
        assert_eq!(view.entry(5).key(0), t.handle().entry(0).key(0));
    }

    #[test]
    fn merge_split_cycles_do_not_copy_payloads() {
        let (mut v, mut t) = dual_cache();
        for cycle in 0..100usize {
            v.append_video(entries(4, cycle as f64), cycle).unwrap();
            let view = merge(&v, &t);
            let (vh, th) = split(&view);
            assert_eq!(vh.len() + th.len(), view.len());
            t.append_text(entries(2, 0.0), cycle as i64).unwrap();
            assert_eq!(v.ledger().payload_count(), v.len() + t.len());
        }
        assert_eq!(v.ledger().payload_count(), 400 + 200);
        assert_eq!(v.ledger().snapshot_count(), 100);
    }

    #[test]
    fn prefix_beyond_published_is_rejected() {
        let (mut v, t) = dual_cache();
        v.append_video(entries(2, 0.0), 0).unwrap();
        assert!(merge_handles(&v.handle(), 3, &t.handle(), 0).is_err());
        assert_eq!(merge_handles(&v.handle(), 1, &t.handle(), 0).unwrap().len(), 1);
    }

    #[test]
    fn payloads_released_with_the_caches() {
        let (mut v, mut t) = dual_cache();
        let ledger = Arc::clone(v.ledger());
        v.append_video(entries(3, 0.0), 0).unwrap();
        t.append_text(entries(2, 0.0), 0).unwrap();
        let view = merge(&v, &t);
        drop((v, t));
        // the view still pins the payloads
        assert_eq!(ledger.payload_count(), 5);
        drop(view);
        assert_eq!(ledger.payload_count(), 0);
    }

    #[test]
    fn concurrent_append_and_read() {
        let (mut v, t) = dual_cache();
        let reader = v.handle();
        let th = t.handle();
        let writer = std::thread::spawn(move || {
            for f in 0..200 {
                v.append_video(entries(4, f as f64), f).unwrap();
            }
            v
        });
        let mut last = 0;
        while last < 800 {
            reader.wait_for_len(last + 1);
            let view = merge_handles(&reader, reader.len(), &th, 0).unwrap();
            // frames are published whole
            assert_eq!(view.video_len() % 4, 0);
            for i in 0..view.len() {
                assert_eq!(view.entry(i).key(0)[0], (i / 4) as f64);
            }
            last = view.len();
        }
        let v = writer.join().unwrap();
        assert_eq!(v.len(), 800);
    }
}
