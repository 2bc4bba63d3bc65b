use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint subject sets for training, validation and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_subjects: BTreeSet<String>,
    pub validation_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    pub seed: u64,
}

/// Draws `n_test` test and `n_validation` validation subjects uniformly at
/// random; everything left over is the training pool.
pub fn make_split(
    subjects: &BTreeSet<String>,
    n_test: usize,
    n_validation: usize,
    seed: u64,
) -> Result<SplitPlan> {
    let needed = n_test + n_validation;
    if needed > subjects.len() {
        return Err(Error::InsufficientSubjects {
            needed,
            available: subjects.len(),
        });
    }
    let mut order: Vec<&String> = subjects.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| order[range].iter().map(|s| (*s).clone()).collect();
    Ok(SplitPlan {
        test_subjects: take(0..n_test),
        validation_subjects: take(n_test..needed),
        train_subjects: take(needed..order.len()),
        seed,
    })
}
