//! Causal and streaming visibility masks.
//!
//! Column layout of a streaming mask is `[visual 0..N_v | reasoning 0..N_r]`
//! and rows use the same order. Visual rows see earlier visual keys only.
//! Reasoning row `t` sees the first `w(t)` visual keys and reasoning keys
//! `0..=t`. With one token per frame and `w(t) = t + 1` this is the sliding
//! window `j > i - N_v` read with 0-based indices.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense boolean visibility matrix; `true` means attention is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    n_rows: usize,
    n_cols: usize,
    visible: Vec<bool>,
}

impl MaskSpec {
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::InvalidMask("rows have different lengths".into()));
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols,
            visible: rows.into_iter().flatten().collect(),
        })
    }

    fn hidden(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            visible: vec![false; n_rows * n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visible[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.n_cols + j]
    }

    fn set_span(&mut self, i: usize, cols: Range<usize>) {
        let base = i * self.n_cols;
        self.visible[base + cols.start..base + cols.end].fill(true);
    }

    pub fn count_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Rows `rows` of this mask as a new mask.
    pub fn slice_rows(&self, rows: Range<usize>) -> MaskSpec {
        MaskSpec {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            visible: self.visible[rows.start * self.n_cols..rows.end * self.n_cols].to_vec(),
        }
    }

    pub fn to_run_length(&self) -> RunLengthMask {
        let rows = (0..self.n_rows)
            .map(|i| {
                let mut runs = Vec::new();
                let row = self.row(i);
                let mut j = 0;
                while j < row.len() {
                    if row[j] {
                        let start = j;
                        while j < row.len() && row[j] {
                            j += 1;
                        }
                        runs.push([start, j - start]);
                    } else {
                        j += 1;
                    }
                }
                runs
            })
            .collect();
        RunLengthMask {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            rows,
        }
    }

    pub fn from_run_length(rl: &RunLengthMask) -> Result<Self> {
        if rl.rows.len() != rl.n_rows {
            return Err(Error::InvalidMask(format!(
                "{} row entries for n_rows = {}",
                rl.rows.len(),
                rl.n_rows
            )));
        }
        let mut mask = MaskSpec::hidden(rl.n_rows, rl.n_cols);
        for (i, runs) in rl.rows.iter().enumerate() {
            for &[start, len] in runs {
                if start + len > rl.n_cols {
                    return Err(Error::InvalidMask(format!(
                        "run {start}+{len} past column {}",
                        rl.n_cols
                    )));
                }
                mask.set_span(i, start..start + len);
            }
        }
        Ok(mask)
    }
}

/// Compact debugging form: for each row, `[start, length]` runs of visible
/// columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthMask {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows: Vec<Vec<[usize; 2]>>,
}

/// Number of visual keys visible to each reasoning token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBoundaryMap {
    widths: Vec<usize>,
}

impl FrameBoundaryMap {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if let Some(t) = widths.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidMask(format!(
                "window shrinks at reasoning token {}: {} -> {}",
                t + 1,
                widths[t],
                widths[t + 1]
            )));
        }
        Ok(Self { widths })
    }

    /// One visual token per step: `w(t) = t + 1`.
    pub fn one_to_one(n_r: usize) -> Self {
        Self {
            widths: (1..=n_r).collect(),
        }
    }

    /// Every reasoning token sees all `n_v` visual tokens.
    pub fn full(n_v: usize, n_r: usize) -> Self {
        Self { widths: vec![n_v; n_r] }
    }

    /// Expand per-segment visibility to per-token widths. `segments` holds
    /// `(reasoning tokens in segment, frames visible to it)` in order.
    pub fn from_segments(segments: &[(usize, usize)], tokens_per_frame: usize) -> Result<Self> {
        let widths = segments
            .iter()
            .flat_map(|&(n, frames)| std::iter::repeat_n(frames * tokens_per_frame, n))
            .collect();
        Self::new(widths)
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn width(&self, t: usize) -> usize {
        self.widths[t]
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}

/// Whether visual rows may read reasoning keys. `Prior(r)` lets visual token
/// `s` see the first `r[s]` reasoning tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum VisualTextAccess {
    #[default]
    None,
    Prior(Vec<usize>),
}

/// Lower-triangular mask: row `i` sees columns `0..=i`.
pub fn causal_mask(n: usize) -> Result<MaskSpec> {
    if n == 0 {
        return Err(Error::InvalidMask("causal mask needs n >= 1".into()));
    }
    Ok(causal_rows(0..n, n))
}

/// Rows `rows` of an `n_cols`-square causal mask.
pub fn causal_rows(rows: Range<usize>, n_cols: usize) -> MaskSpec {
    let mut mask = MaskSpec::hidden(rows.len(), n_cols);
    for (r, i) in rows.enumerate() {
        mask.set_span(r, 0..(i + 1).min(n_cols));
    }
    mask
}

pub fn streaming_mask(n_v: usize, n_r: usize, boundaries: &FrameBoundaryMap) -> Result<MaskSpec> {
    streaming_rows(n_v, n_r, boundaries, &VisualTextAccess::None, 0..n_v + n_r)
}

pub fn streaming_mask_with(
    n_v: usize,
    n_r: usize,
    boundaries: &FrameBoundaryMap,
    access: &VisualTextAccess,
) -> Result<MaskSpec> {
    streaming_rows(n_v, n_r, boundaries, access, 0..n_v + n_r)
}

/// Rows `rows` of the `(n_v + n_r)`-square streaming mask. The decode loop
/// uses this to build just the rows of the tokens it is about to feed.
pub fn streaming_rows(
    n_v: usize,
    n_r: usize,
    boundaries: &FrameBoundaryMap,
    access: &VisualTextAccess,
    rows: Range<usize>,
) -> Result<MaskSpec> {
    let n = n_v + n_r;
    if boundaries.len() != n_r {
        return Err(Error::InvalidMask(format!(
            "boundary map covers {} reasoning tokens, expected {n_r}",
            boundaries.len()
        )));
    }
    if let Some(t) = boundaries.widths().iter().position(|&w| w > n_v) {
        return Err(Error::InvalidMask(format!(
            "w({t}) = {} exceeds N_v = {n_v}",
            boundaries.width(t)
        )));
    }
    if rows.end > n {
        return Err(Error::InvalidMask(format!("row range {rows:?} past {n}")));
    }
    if let VisualTextAccess::Prior(r) = access {
        if r.len() != n_v || r.iter().any(|&x| x > n_r) || r.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidMask(
                "visual-to-text access must give a non-decreasing count <= N_r per visual token".into(),
            ));
        }
    }
    let mut mask = MaskSpec::hidden(rows.len(), n);
    for (r, i) in rows.enumerate() {
        if i < n_v {
            mask.set_span(r, 0..i + 1);
            if let VisualTextAccess::Prior(counts) = access {
                mask.set_span(r, n_v..n_v + counts[i]);
            }
        } else {
            let t = i - n_v;
            mask.set_span(r, 0..boundaries.width(t));
            mask.set_span(r, n_v..i + 1);
        }
    }
    Ok(mask)
}

/// Column indices visible from `row`, ascending.
pub fn visible_keys(mask: &MaskSpec, row: usize) -> Result<Vec<usize>> {
    if row >= mask.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "row {row} out of range for {} rows",
            mask.n_rows()
        )));
    }
    Ok(mask
        .row(row)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(j, _)| j)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Entry-by-entry evaluation of the piecewise definition.
    #[allow(clippy::needless_range_loop)]
    fn brute_force(n_v: usize, n_r: usize, w: &[usize]) -> Vec<Vec<bool>> {
        let n = n_v + n_r;
        let mut rows = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                rows[i][j] = match (i < n_v, j < n_v) {
                    (true, true) => j <= i,
                    (true, false) => false,
                    (false, true) => j < w[i - n_v],
                    (false, false) => j <= i,
                };
            }
        }
        rows
    }

    fn monotone_widths() -> impl Strategy<Value = (usize, Vec<usize>)> {
        (0usize..=16, 0usize..=16).prop_flat_map(|(n_v, n_r)| {
            (Just(n_v), proptest::collection::vec(0..=n_v, n_r)).prop_map(|(n_v, mut w)| {
                w.sort_unstable();
                (n_v, w)
            })
        })
    }

    #[test]
    fn causal_examples() {
        assert_eq!(causal_mask(1).unwrap().row(0), &[true]);
        let m = causal_mask(3).unwrap();
        assert_eq!(m.row(1), &[true, true, false]);
        for n in 1..20 {
            assert_eq!(causal_mask(n).unwrap().count_visible(), n * (n + 1) / 2);
        }
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn one_to_one_window() {
        let m = streaming_mask(3, 2, &FrameBoundaryMap::one_to_one(2)).unwrap();
        // reasoning token t = 1 is row 4
        assert_eq!(visible_keys(&m, 4).unwrap(), vec![0, 1, 3, 4]);
        assert!(!m.get(4, 2));
    }

    #[test]
    fn one_to_one_matches_sliding_window_formula() {
        // j > i - N_v hides visual key j from reasoning row i (0-based)
        for n in 1..10 {
            let m = streaming_mask(n, n, &FrameBoundaryMap::one_to_one(n)).unwrap();
            for i in 0..2 * n {
                for j in 0..2 * n {
                    let formula = if i >= n && j < n && j as isize > i as isize - n as isize {
                        false
                    } else {
                        j <= i
                    };
                    let ours = if i < n && j >= n { false } else { formula };
                    assert_eq!(m.get(i, j), ours, "n={n} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn full_window_is_batch_visibility() {
        let (n_v, n_r) = (5, 4);
        let m = streaming_mask(n_v, n_r, &FrameBoundaryMap::full(n_v, n_r)).unwrap();
        let causal = causal_mask(n_v + n_r).unwrap();
        for i in n_v..n_v + n_r {
            assert_eq!(m.row(i), causal.row(i));
        }
    }

    #[test]
    fn rejects_window_past_visual_length() {
        let w = FrameBoundaryMap::new(vec![1, 4]).unwrap();
        assert!(streaming_mask(3, 2, &w).is_err());
        assert!(FrameBoundaryMap::new(vec![2, 1]).is_err());
        assert!(streaming_mask(3, 3, &FrameBoundaryMap::one_to_one(2)).is_err());
    }

    #[test]
    fn first_reasoning_token_window() {
        let w = FrameBoundaryMap::new(vec![1, 2]).unwrap();
        let m = streaming_mask(3, 2, &w).unwrap();
        let keys = visible_keys(&m, 3).unwrap();
        let visual: Vec<_> = keys.iter().copied().filter(|&j| j < 3).collect();
        let reasoning: Vec<_> = keys.iter().filter(|&&j| j >= 3).map(|j| j - 3).collect();
        assert_eq!(visual, vec![0]);
        // the token itself is its only reasoning key
        assert_eq!(reasoning, vec![0]);
    }

    #[test]
    fn visible_keys_examples() {
        assert_eq!(visible_keys(&causal_mask(4).unwrap(), 2).unwrap(), vec![0, 1, 2]);
        assert!(visible_keys(&causal_mask(4).unwrap(), 4).is_err());
    }

    #[test]
    fn visual_rows_can_opt_into_text() {
        let w = FrameBoundaryMap::one_to_one(2);
        let m = streaming_mask_with(3, 2, &w, &VisualTextAccess::Prior(vec![0, 1, 2])).unwrap();
        assert_eq!(visible_keys(&m, 1).unwrap(), vec![0, 1, 3]);
        assert_eq!(visible_keys(&m, 2).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(streaming_mask_with(3, 2, &w, &VisualTextAccess::Prior(vec![0, 3, 3])).is_err());
    }

    #[test]
    fn segments_expand_to_tokens() {
        let w = FrameBoundaryMap::from_segments(&[(2, 1), (3, 2)], 4).unwrap();
        assert_eq!(w.widths(), &[4, 4, 8, 8, 8]);
    }

    proptest! {
        #[test]
        fn streaming_matches_entrywise_oracle((n_v, w) in monotone_widths()) {
            let n_r = w.len();
            prop_assume!(n_v + n_r > 0);
            let m = streaming_mask(n_v, n_r, &FrameBoundaryMap::new(w.clone()).unwrap()).unwrap();
            let oracle = brute_force(n_v, n_r, &w);
            for (i, row) in oracle.iter().enumerate() {
                prop_assert_eq!(m.row(i), row.as_slice());
            }
        }

        #[test]
        fn row_blocks_agree_with_full_mask((n_v, w) in monotone_widths(), a in 0usize..32, b in 0usize..32) {
            let n_r = w.len();
            let n = n_v + n_r;
            prop_assume!(n > 0);
            let (lo, hi) = ((a % n).min(b % n), (a % n).max(b % n) + 1);
            let map = FrameBoundaryMap::new(w).unwrap();
            let full = streaming_mask(n_v, n_r, &map).unwrap();
            let block = streaming_rows(n_v, n_r, &map, &VisualTextAccess::None, lo..hi).unwrap();
            prop_assert_eq!(block, full.slice_rows(lo..hi));
        }

        #[test]
        fn visible_keys_grow_and_extension_keeps_rows((n_v, mut w) in monotone_widths()) {
            let n_r = w.len();
            prop_assume!(n_v + n_r > 0);
            let m = streaming_mask(n_v, n_r, &FrameBoundaryMap::new(w.clone()).unwrap()).unwrap();
            for i in n_v + 1..n_v + n_r {
                let prev = visible_keys(&m, i - 1).unwrap();
                let cur = visible_keys(&m, i).unwrap();
                prop_assert!(prev.iter().all(|j| cur.contains(j)));
            }
            // one more reasoning token leaves existing rows untouched
            w.push(n_v);
            let ext = streaming_mask(n_v, n_r + 1, &FrameBoundaryMap::new(w).unwrap()).unwrap();
            for i in 0..n_v + n_r {
                prop_assert_eq!(visible_keys(&ext, i).unwrap(), visible_keys(&m, i).unwrap());
            }
        }

        #[test]
        fn run_length_round_trip(rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 9), 0..9)) {
            let m = MaskSpec::from_rows(rows).unwrap();
            let rl = m.to_run_length();
            let text = serde_json::to_string(&rl).unwrap();
            let back: RunLengthMask = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(MaskSpec::from_run_length(&back).unwrap(), m);
        }
    }
}
