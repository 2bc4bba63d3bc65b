//! Triplet counting and seeded triplet generation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unordered genuine pairs available from `n_samples` samples: n(n−1)/2.
pub fn genuine_pairs(n_samples: u64) -> u128 {
    let n = u128::from(n_samples);
    n * n.saturating_sub(1) / 2
}

/// Triplets over `subjects` subjects with `n_samples` samples each: every
/// subject as anchor, every genuine pair, every other subject as impostor and
/// every impostor sample. Zero when fewer than two subjects or samples.
///
/// Exact in `u128`; returns `None` only past 3.4×10³⁸.
pub fn possible_triplets(subjects: u64, n_samples: u64) -> Option<u128> {
    if subjects < 2 || n_samples < 2 {
        return Some(0);
    }
    let p = u128::from(subjects);
    p.checked_mul(genuine_pairs(n_samples))?
        .checked_mul(p - 1)?
        .checked_mul(u128::from(n_samples))
}

/// One training triplet. Subjects are indices into the [`TripletPool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletSpec {
    pub anchor_subject: u32,
    pub anchor_index: u32,
    pub positive_index: u32,
    pub negative_subject: u32,
    pub negative_index: u32,
}

/// Requested triplet count next to the size of the space it is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletBudget {
    pub requested: u64,
    pub possible: u128,
    pub seed: u64,
}

/// Ordered subjects with their sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPool {
    subjects: Vec<String>,
    counts: Vec<u32>,
    /// Subjects with at least two samples.
    anchors: Vec<u32>,
    /// Subjects with at least one sample.
    negatives: Vec<u32>,
}

impl TripletPool {
    /// Errors when fewer than two subjects can serve as anchors.
    pub fn new<S: Into<String>>(entries: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let (subjects, counts): (Vec<String>, Vec<u32>) = entries
            .into_iter()
            .map(|(s, c)| {
                (
                    s.into(),
                    u32::try_from(c).expect("sample count fits in u32"),
                )
            })
            .unzip();
        let pick = |min: u32| -> Vec<u32> {
            (0..counts.len() as u32)
                .filter(|&i| counts[i as usize] >= min)
                .collect()
        };
        let anchors = pick(2);
        if anchors.len() < 2 {
            return Err(Error::InsufficientSubjects {
                needed: 2,
                available: anchors.len(),
            });
        }
        let negatives = pick(1);
        Ok(TripletPool {
            subjects,
            counts,
            anchors,
            negatives,
        })
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn sample_count(&self, subject: u32) -> u32 {
        self.counts[subject as usize]
    }

    /// Size of the triplet space the generator draws from, summed over the
    /// actual per-subject counts. Equals [`possible_triplets`] when every
    /// subject has the same count.
    pub fn possible(&self) -> u128 {
        let total: u128 = self.counts.iter().map(|&c| u128::from(c)).sum();
        self.anchors
            .iter()
            .map(|&a| {
                let own = u128::from(self.counts[a as usize]);
                genuine_pairs(own as u64) * (total - own)
            })
            .sum()
    }

    pub fn budget(&self, requested: u64, seed: u64) -> TripletBudget {
        TripletBudget {
            requested,
            possible: self.possible(),
            seed,
        }
    }

    /// A seeded stream of `requested` triplets drawn with replacement.
    pub fn generate(&self, requested: u64, seed: u64) -> TripletGenerator<'_> {
        TripletGenerator {
            pool: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            remaining: requested,
        }
    }
}

/// Draws each triplet independently: anchor subject uniform over subjects with
/// two or more samples, genuine pair uniform with a fair anchor/positive role
/// assignment, impostor uniform over the other subjects, impostor sample
/// uniform over that subject's samples.
pub struct TripletGenerator<'a> {
    pool: &'a TripletPool,
    rng: ChaCha8Rng,
    remaining: u64,
}

impl Iterator for TripletGenerator<'_> {
    type Item = TripletSpec;

    fn next(&mut self) -> Option<TripletSpec> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let pool = self.pool;
        let anchor_subject = pool.anchors[self.rng.gen_range(0..pool.anchors.len())];
        let n = pool.counts[anchor_subject as usize];
        // A uniform ordered pair of distinct indices is a uniform unordered
        // pair with a fair coin deciding which element is the anchor.
        let anchor_index = self.rng.gen_range(0..n);
        let mut positive_index = self.rng.gen_range(0..n - 1);
        if positive_index >= anchor_index {
            positive_index += 1;
        }
        // Uniform over negatives minus the anchor subject, which is always a
        // member of the negative list.
        let slot = self.rng.gen_range(0..pool.negatives.len() - 1);
        let anchor_slot = pool
            .negatives
            .binary_search(&anchor_subject)
            .expect("anchors are negatives");
        let negative_subject = pool.negatives[if slot >= anchor_slot { slot + 1 } else { slot }];
        let negative_index = self
            .rng
            .gen_range(0..pool.counts[negative_subject as usize]);
        Some(TripletSpec {
            anchor_subject,
            anchor_index,
            positive_index,
            negative_subject,
            negative_index,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (r, Some(r))
    }
}

/// Writes `anchor_subject, i, j, negative_subject, k` rows for audit/replay.
pub fn write_triplet_manifest<W: Write>(
    writer: W,
    pool: &TripletPool,
    triplets: impl IntoIterator<Item = TripletSpec>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["anchor_subject", "i", "j", "negative_subject", "k"])?;
    for t in triplets {
        w.write_record([
            pool.subjects[t.anchor_subject as usize].as_str(),
            &t.anchor_index.to_string(),
            &t.positive_index.to_string(),
            &pool.subjects[t.negative_subject as usize],
            &t.negative_index.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<triplets>", e))?;
    Ok(())
}


#[cfg(test)]
mod uniformity {
    use super::*;

    #[test]
    fn anchor_subjects_are_uniform_within_five_sigma() {
        let pool = TripletPool::new([("A", 3), ("B", 7), ("C", 2), ("D", 15)]).unwrap();
        let n = 100_000u64;
        let mut hits = [0u64; 4];
        for t in pool.generate(n, 77) {
            hits[t.anchor_subject as usize] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - n as f64 * p).abs() < 5.0 * sigma, "{hits:?}");
        }
    }
}
