//! Rotary position encoding and the two ways of numbering a mixed
//! visual/reasoning sequence.
//!
//! Under [`PositionScheme::Monolithic`] every token shares one counter, so a
//! reasoning token's index is offset by however many visual tokens precede
//! it. Under [`PositionScheme::Decoupled`] visual tokens and reasoning tokens
//! each get their own counter starting at 0. Prompt tokens live on the
//! reasoning axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::dot;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Reasoning,
    Prompt,
}

impl Modality {
    fn axis(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Reasoning | Modality::Prompt => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    Monolithic,
    #[default]
    Decoupled,
}

impl FromStr for PositionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(Self::Monolithic),
            "decoupled" => Ok(Self::Decoupled),
            other => Err(Error::InvalidArgument(format!("unknown position scheme {other:?}"))),
        }
    }
}

impl fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Monolithic => "monolithic",
            Self::Decoupled => "decoupled",
        })
    }
}

/// Per-token position index and modality tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionAssignment {
    positions: Vec<usize>,
    modalities: Vec<Modality>,
}

impl PositionAssignment {
    pub fn new(positions: Vec<usize>, modalities: Vec<Modality>) -> Result<Self> {
        if positions.len() != modalities.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions for {} modality tags",
                positions.len(),
                modalities.len()
            )));
        }
        Ok(Self { positions, modalities })
    }

    /// `n` consecutive positions starting at `start`, all with one modality.
    pub fn run(start: usize, n: usize, modality: Modality) -> Self {
        Self {
            positions: (start..start + n).collect(),
            modalities: vec![modality; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> usize {
        self.positions[i]
    }

    pub fn modality(&self, i: usize) -> Modality {
        self.modalities[i]
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Positions of the tokens with the given modality, in sequence order.
    pub fn positions_of(&self, modality: Modality) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&self.modalities)
            .filter(|(_, &m)| m == modality)
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Number the tokens of `layout` under the chosen scheme.
pub fn assign_positions(layout: &[Modality], scheme: PositionScheme) -> Result<PositionAssignment> {
    if layout.is_empty() {
        return Err(Error::EmptyInput("layout"));
    }
    let positions = match scheme {
        PositionScheme::Monolithic => (0..layout.len()).collect(),
        PositionScheme::Decoupled => {
            let mut next = [0usize; 2];
            layout
                .iter()
                .map(|m| {
                    let slot = &mut next[m.axis()];
                    let p = *slot;
                    *slot += 1;
                    p
                })
                .collect()
        }
    };
    PositionAssignment::new(positions, layout.to_vec())
}

/// Rotation applied to query/key heads. Pair `i` covers dims `(2i, 2i+1)`
/// and turns at frequency `base^(-2i/head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationSpec {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl RotationSpec {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rotary head dimension must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rotary base must be finite and > 1, got {base}"
            )));
        }
        let freqs = (0..head_dim / 2)
            .map(|i| base.powf(-((2 * i) as f64) / head_dim as f64))
            .collect();
        Ok(Self { head_dim, base, freqs })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub(crate) fn rotate_in_place(&self, v: &mut [f64], position: usize) {
        if position == 0 {
            return;
        }
        let p = position as f64;
        for (pair, &theta) in v.chunks_exact_mut(2).zip(&self.freqs) {
            let (s, c) = (p * theta).sin_cos();
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }

    pub fn rotate(&self, v: &[f64], position: usize) -> Result<Vec<f64>> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::DimensionMismatch(format!("odd-length vector ({})", v.len())));
        }
        if v.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} vs head dimension {}",
                v.len(),
                self.head_dim
            )));
        }
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, position);
        Ok(out)
    }
}

/// `(R_{pos_q} q) · (R_{pos_k} k)`.
pub fn attention_score(q: &[f64], k: &[f64], pos_q: usize, pos_k: usize, spec: &RotationSpec) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch(format!(
            "query length {} vs key length {}",
            q.len(),
            k.len()
        )));
    }
    Ok(dot(&spec.rotate(q, pos_q)?, &spec.rotate(k, pos_k)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Modality::{Prompt, Reasoning as R, Visual as V};

    #[test]
    fn monolithic_is_global() {
        let pa = assign_positions(&[V, V, V, R, R], PositionScheme::Monolithic).unwrap();
        assert_eq!(pa.positions(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn decoupled_axes_are_independent() {
        let pa = assign_positions(&[V, V, V, R, R], PositionScheme::Decoupled).unwrap();
        assert_eq!(pa.positions_of(V), vec![0, 1, 2]);
        assert_eq!(pa.positions_of(R), vec![0, 1]);

        let pa = assign_positions(&[V, R, V, R], PositionScheme::Decoupled).unwrap();
        assert_eq!(pa.positions_of(V), vec![0, 1]);
        assert_eq!(pa.positions_of(R), vec![0, 1]);
    }

    #[test]
    fn prompt_shares_the_reasoning_axis() {
        let pa = assign_positions(&[Prompt, V, V, R], PositionScheme::Decoupled).unwrap();
        assert_eq!(pa.positions(), &[0, 0, 1, 1]);
    }

    #[test]
    fn empty_layout_rejected() {
        assert!(assign_positions(&[], PositionScheme::Decoupled).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let spec = RotationSpec::new(8, 10_000.0).unwrap();
        let v = vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0, -0.25, 4.0];
        assert_eq!(spec.rotate(&v, 0).unwrap(), v);
    }

    #[test]
    fn unit_pair_traces_the_circle() {
        let spec = RotationSpec::new(4, 10_000.0).unwrap();
        for p in [1usize, 2, 7, 100] {
            let out = spec.rotate(&[1.0, 0.0, 1.0, 0.0], p).unwrap();
            for (i, &theta) in spec.frequencies().iter().enumerate() {
                let a = p as f64 * theta;
                assert!((out[2 * i] - a.cos()).abs() < 1e-15);
                assert!((out[2 * i + 1] - a.sin()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn frequencies_strictly_decrease() {
        let spec = RotationSpec::new(16, 10_000.0).unwrap();
        assert!(spec.frequencies().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(spec.frequencies()[0], 1.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(RotationSpec::new(7, 10_000.0).is_err());
        let spec = RotationSpec::new(4, 10_000.0).unwrap();
        assert!(spec.rotate(&[1.0, 2.0, 3.0], 1).is_err());
        assert!(attention_score(&[1.0; 4], &[1.0; 2], 0, 0, &spec).is_err());
    }

    #[test]
    fn norm_preserved_over_random_draws() {
        let spec = RotationSpec::new(8, 10_000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = rng.random_range(0..100_000);
            let r = spec.rotate(&v, p).unwrap();
            let (a, b) = (dot(&v, &v).sqrt(), dot(&r, &r).sqrt());
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn equal_positions_give_plain_dot() {
        let spec = RotationSpec::new(4, 10_000.0).unwrap();
        let (q, k) = ([0.5, -1.0, 2.0, 0.25], [1.5, 0.5, -0.5, 3.0]);
        for p in [0, 3, 41] {
            let s = attention_score(&q, &k, p, p, &spec).unwrap();
            assert!((s - dot(&q, &k)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn score_depends_on_offset_only(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            t in 0usize..500, s in 0usize..500, shift in 0usize..500,
        ) {
            let spec = RotationSpec::new(8, 10_000.0).unwrap();
            let a = attention_score(&q, &k, t, s, &spec).unwrap();
            let b = attention_score(&q, &k, t + shift, s + shift, &spec).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
