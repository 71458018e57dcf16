//! Mask-count adaptation: chunked sampling when the generated sequence is
//! longer than the label set, inference truncation, and the ablation
//! selectors.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K contiguous, disjoint, non-empty index ranges covering `0..M` in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    ranges: Vec<Range<usize>>,
}

impl ChunkPartition {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn num_chunks(&self) -> usize {
        self.ranges.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Balanced contiguous partition of `0..m` into `k` chunks: the first
/// `m % k` chunks get `ceil(m/k)` elements, the rest `floor(m/k)`.
pub fn partition(m: usize, k: usize) -> Result<ChunkPartition> {
    if k == 0 {
        return Err(Error::invalid("cannot partition into zero chunks"));
    }
    if m < k {
        return Err(Error::invalid(format!(
            "sequence length {m} is shorter than the number of chunks {k}"
        )));
    }
    let base = m / k;
    let extra = m % k;
    let mut ranges = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(ChunkPartition { ranges })
}

/// One index drawn uniformly from each chunk, in chunk order.
pub fn sample_per_chunk<R: Rng + ?Sized>(partition: &ChunkPartition, rng: &mut R) -> Vec<usize> {
    partition
        .ranges
        .iter()
        .map(|r| rng.random_range(r.clone()))
        .collect()
}

/// The first `m_out` elements of a generated sequence.
pub fn select_inference<T: Clone>(seq: &[T], m_out: usize) -> Result<Vec<T>> {
    if m_out == 0 || m_out > seq.len() {
        return Err(Error::invalid(format!(
            "cannot select {m_out} of {} generated masks",
            seq.len()
        )));
    }
    Ok(seq[..m_out].to_vec())
}

/// How training picks K masks out of an M-long generated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// One uniformly drawn mask per contiguous chunk.
    Chunked,
    /// K masks drawn uniformly without replacement from the whole sequence.
    RandomK,
    /// The first K masks.
    FirstK,
}

impl Selector {
    pub fn name(self) -> &'static str {
        match self {
            Selector::Chunked => "chunked",
            Selector::RandomK => "random_k",
            Selector::FirstK => "first_k",
        }
    }

    /// Indices of the selected masks, ascending.
    pub fn select_indices<R: Rng + ?Sized>(self, m: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if k == 0 || k > m {
            return Err(Error::invalid(format!("cannot select {k} of {m} masks")));
        }
        Ok(match self {
            Selector::Chunked => sample_per_chunk(&partition(m, k)?, rng),
            Selector::RandomK => {
                let mut idx = rand::seq::index::sample(rng, m, k).into_vec();
                idx.sort_unstable();
                idx
            }
            Selector::FirstK => (0..k).collect(),
        })
    }
}

/// Ablation modes for [`select_ablation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    RandomK,
    FirstK,
}

/// `random_k`: K masks without replacement, kept in sequence order.
/// `first_k`: the K-prefix.
pub fn select_ablation<T: Clone, R: Rng + ?Sized>(
    seq: &[T],
    k: usize,
    mode: AblationMode,
    rng: &mut R,
) -> Result<Vec<T>> {
    let selector = match mode {
        AblationMode::RandomK => Selector::RandomK,
        AblationMode::FirstK => Selector::FirstK,
    };
    let idx = selector.select_indices(seq.len(), k, rng)?;
    Ok(idx.into_iter().map(|i| seq[i].clone()).collect())
}
