//! Deterministic per-patient random streams built on splitmix64.
//!
//! Every patient owns an independent stream derived from the master seed and
//! the patient's index, so a cohort can be generated in any order (or in
//! parallel) and still produce the same bytes.

use chrono::{Duration, NaiveDateTime};

/// Weyl-sequence increment of splitmix64 (2^64 / golden ratio).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const UNIT_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

/// splitmix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps 64 random bits to `[0, 1)` using the top 53 bits.
#[inline]
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * UNIT_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum WeightError {
    #[error("weights must be finite and non-negative")]
    Invalid,
    #[error("weights sum to zero")]
    AllZero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
}

/// Stream for one patient; depends only on `(master_seed, patient_index)`.
pub fn stream_for_patient(master_seed: u64, patient_index: u64) -> RngStream {
    RngStream::for_patient(master_seed, patient_index)
}

impl RngStream {
    pub fn from_state(state: u64) -> Self {
        RngStream { state }
    }

    pub fn for_patient(master_seed: u64, patient_index: u64) -> Self {
        RngStream {
            state: mix64(master_seed ^ patient_index.wrapping_mul(GOLDEN_GAMMA)),
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        unit_from_bits(self.next_u64())
    }

    /// Uniform integer in `[lo, hi]` by scaling one unit draw.
    ///
    /// Scaling instead of rejection keeps one draw per call. The bias is at
    /// most `span / 2^53`, below 2^-48 for the spans used here (at most 20).
    ///
    /// # Panics
    /// If `lo > hi`.
    #[inline]
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi, "uniform_int: lo {lo} > hi {hi}");
        let span = (hi as i128 - lo as i128 + 1) as f64;
        let offset = (self.next_unit() * span).floor() as i128;
        (lo as i128 + offset).min(hi as i128) as i64
    }

    /// Uniform datetime in `[lo, hi)` at one-second resolution.
    ///
    /// # Panics
    /// If `lo >= hi`.
    pub fn uniform_datetime(&mut self, lo: NaiveDateTime, hi: NaiveDateTime) -> NaiveDateTime {
        assert!(lo < hi, "uniform_datetime: empty window {lo} .. {hi}");
        let seconds = (hi - lo).num_seconds().max(1);
        let offset = ((self.next_unit() * seconds as f64).floor() as i64).min(seconds - 1);
        lo + Duration::seconds(offset)
    }

    /// Index of a level chosen with probability `weights[j] / sum(weights)`.
    pub fn pick_weighted(&mut self, weights: &[f64]) -> Result<usize, WeightError> {
        let total = checked_total(weights.iter().copied())?;
        let target = self.next_unit() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (j, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = j;
                if target < acc {
                    return Ok(j);
                }
            }
        }
        Ok(last_positive)
    }
}

fn checked_total(weights: impl Iterator<Item = f64>) -> Result<f64, WeightError> {
    let mut total = 0.0;
    for w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(WeightError::Invalid);
        }
        total += w;
    }
    if total > 0.0 {
        Ok(total)
    } else {
        Err(WeightError::AllZero)
    }
}

/// Precomputed cumulative weights. Picks exactly what
/// [`RngStream::pick_weighted`] picks for the same draw, in `O(log n)`.
#[derive(Debug, Clone)]
pub struct WeightedIndex {
    cumulative: Vec<f64>,
    last_positive: usize,
}

impl WeightedIndex {
    pub fn new(weights: &[f64]) -> Result<Self, WeightError> {
        checked_total(weights.iter().copied())?;
        let mut acc = 0.0;
        let mut last_positive = 0;
        let cumulative = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                if w > 0.0 {
                    acc += w;
                    last_positive = j;
                }
                acc
            })
            .collect();
        Ok(WeightedIndex {
            cumulative,
            last_positive,
        })
    }

    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    #[inline]
    pub fn pick(&self, stream: &mut RngStream) -> usize {
        let target = stream.next_unit() * self.total();
        let j = self.cumulative.partition_point(|&c| c <= target);
        j.min(self.last_positive)
    }
}
