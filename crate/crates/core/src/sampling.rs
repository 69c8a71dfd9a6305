//! Seeded pixel-pair sampling shared by the sparse losses and the ORD metric.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::grid::ValidMask;

/// Flat row-major indices of two distinct valid pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPair {
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSampleConfig {
    pub pair_count: usize,
    pub seed: u64,
    /// Ground-truth difference below which a pair counts as "same depth".
    pub delta: f64,
}

impl Default for PairSampleConfig {
    fn default() -> Self {
        Self { pair_count: 2500, seed: 0, delta: 0.01 }
    }
}

impl PairSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pair_count == 0 {
            return invalid_arg("pair_count must be at least 1");
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return invalid_arg(format!("delta must be positive, got {}", self.delta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<PixelPair>,
    /// More pairs were requested than distinct unordered pairs exist.
    pub with_replacement: bool,
}

pub fn rng_from_seed(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Draws `pair_count` pairs of distinct valid pixels.
///
/// Pairs are uniform over ordered pairs and distinct as unordered pairs. When
/// `pair_count` exceeds `n (n - 1) / 2` the draw falls back to sampling with
/// replacement and reports it.
pub fn sample_pairs(mask: &ValidMask, pair_count: usize, seed: u64) -> Result<PairSample> {
    let valid = mask.valid_indices();
    let n = valid.len() as u64;
    if n < 2 {
        return Err(Error::InsufficientData(format!("pair sampling needs 2 valid pixels, got {n}")));
    }
    if pair_count == 0 {
        return invalid_arg("pair_count must be at least 1");
    }
    let mut rng = rng_from_seed(seed);
    let distinct = n * (n - 1) / 2;
    let draw = |rng: &mut SplitMix64| {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    };
    let to_pair = |(a, b): (u64, u64)| PixelPair { i: valid[a as usize], j: valid[b as usize] };

    if pair_count as u64 > distinct {
        let pairs = (0..pair_count).map(|_| to_pair(draw(&mut rng))).collect();
        return Ok(PairSample { pairs, with_replacement: true });
    }

    if (pair_count as u64) * 2 > distinct {
        // Dense request: partial Fisher-Yates over the enumerated unordered pairs.
        let mut all: Vec<(u64, u64)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for k in 0..pair_count {
            let pick = rng.random_range(k as u64..all.len() as u64) as usize;
            all.swap(k, pick);
        }
        let pairs = all[..pair_count]
            .iter()
            .map(|&(a, b)| if rng.random::<bool>() { to_pair((a, b)) } else { to_pair((b, a)) })
            .collect();
        return Ok(PairSample { pairs, with_replacement: false });
    }

    let mut seen = HashSet::with_capacity(pair_count);
    let mut pairs = Vec::with_capacity(pair_count);
    while pairs.len() < pair_count {
        let (a, b) = draw(&mut rng);
        if seen.insert((a.min(b), a.max(b))) {
            pairs.push(to_pair((a, b)));
        }
    }
    Ok(PairSample { pairs, with_replacement: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_valid_and_distinct() {
        let mask = ValidMask::from_fn(10, 10, |r, c| (r * 10 + c) % 3 != 0);
        let s = sample_pairs(&mask, 200, 9).unwrap();
        assert!(!s.with_replacement);
        assert_eq!(s.pairs.len(), 200);
        let mut seen = HashSet::new();
        for p in &s.pairs {
            assert_ne!(p.i, p.j);
            assert!(mask.is_valid(p.i) && mask.is_valid(p.j));
            assert!(seen.insert((p.i.min(p.j), p.i.max(p.j))));
        }
    }

    #[test]
    fn dense_request_enumerates_everything() {
        let mask = ValidMask::all_valid(3, 1);
        let s = sample_pairs(&mask, 3, 1).unwrap();
        let mut got: Vec<_> = s.pairs.iter().map(|p| (p.i.min(p.j), p.i.max(p.j))).collect();
        got.sort();
        assert_eq!(got, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn oversubscription_switches_to_replacement() {
        let mask = ValidMask::all_valid(2, 2);
        let s = sample_pairs(&mask, 50, 3).unwrap();
        assert!(s.with_replacement);
        assert_eq!(s.pairs.len(), 50);
        assert!(s.pairs.iter().all(|p| p.i != p.j));
    }

    #[test]
    fn deterministic_per_seed() {
        let mask = ValidMask::all_valid(16, 16);
        assert_eq!(sample_pairs(&mask, 100, 5).unwrap(), sample_pairs(&mask, 100, 5).unwrap());
        assert_ne!(sample_pairs(&mask, 100, 5).unwrap(), sample_pairs(&mask, 100, 6).unwrap());
    }

    #[test]
    fn too_few_pixels() {
        let mask = ValidMask::new(2, 1, vec![true, false]).unwrap();
        assert!(matches!(sample_pairs(&mask, 1, 0), Err(Error::InsufficientData(_))));
    }
}
