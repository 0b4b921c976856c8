//! Bootstrap stability of a canonicalizer's partition, measured by the
//! adjusted Rand index.

use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Canonicalizer, RawSample};
use crate::seed;

/// Minimum mean ARI for a canonicalization to be reported as stable.
pub const ARI_STABLE_FLOOR: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub resamples: usize,
    pub mean_ari: f64,
    pub min_ari: f64,
    pub unstable: bool,
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same elements, computed
/// from the contingency table. Two single-cluster partitions (or any pair of
/// identical partitions with no chance-adjustable structure) score 1.
pub fn adjusted_rand_index<A, B>(left: &[A], right: &[B]) -> f64
where
    A: Eq + Hash,
    B: Eq + Hash,
{
    assert_eq!(left.len(), right.len(), "labelings must cover the same elements");
    let n = left.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: HashMap<(&A, &B), usize> = HashMap::new();
    let mut rows: HashMap<&A, usize> = HashMap::new();
    let mut cols: HashMap<&B, usize> = HashMap::new();
    for (a, b) in left.iter().zip(right) {
        *table.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let row_sum: f64 = rows.values().map(|&c| choose2(c)).sum();
    let col_sum: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = row_sum * col_sum / choose2(n);
    let max = 0.5 * (row_sum + col_sum);
    if (max - expected).abs() < 1e-12 {
        // degenerate: both partitions trivial in the same way
        return if (index - max).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Resample the K answers with replacement `resamples` times, re-canonicalize
/// each resample as a batch, and compare its partition against the labels
/// the original canonicalization gave the same samples.
pub fn bootstrap_stability(
    samples: &[RawSample],
    canon: &dyn Canonicalizer,
    resamples: usize,
    seed_value: u64,
) -> StabilitySummary {
    let resamples = resamples.max(1);
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let original = canon.canonicalize_batch(&texts);
    let mut rng = seed::rng(seed_value);
    let mut aris = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let picks: Vec<usize> = (0..texts.len()).map(|_| rng.random_range(0..texts.len())).collect();
        let resampled_texts: Vec<&str> = picks.iter().map(|&i| texts[i]).collect();
        let relabeled = canon.canonicalize_batch(&resampled_texts);
        let before: Vec<_> = picks.iter().map(|&i| &original[i]).collect();
        aris.push(adjusted_rand_index(&before, &relabeled));
    }
    let mean_ari = aris.iter().sum::<f64>() / aris.len() as f64;
    let min_ari = aris.iter().copied().fold(f64::INFINITY, f64::min);
    StabilitySummary {
        resamples,
        mean_ari,
        min_ari,
        unstable: mean_ari < ARI_STABLE_FLOOR,
    }
}
