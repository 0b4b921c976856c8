//! Turning K raw samples for one query into a frequency-ranked consensus.

mod canon;
mod stability;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

pub use canon::{
    canonicalize_binary, canonicalize_numeric, normalize_text, BinaryCanonicalizer,
    CanonicalClass, Canonicalizer, CanonicalizerKind, ClassKind, NumericCanonicalizer,
    OptionCanonicalizer, VerbatimCanonicalizer, INVALID_KEY,
};
pub use stability::{adjusted_rand_index, bootstrap_stability, StabilitySummary, ARI_STABLE_FLOOR};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub item_id: String,
    pub index: u32,
    pub text: String,
}

impl RawSample {
    pub fn new(item_id: impl Into<String>, index: u32, text: impl Into<String>) -> Self {
        RawSample {
            item_id: item_id.into(),
            index,
            text: text.into(),
        }
    }
}

/// The acceptable canonical classes for one item. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptabilitySpec {
    item_id: String,
    acceptable: Vec<CanonicalClass>,
}

impl AcceptabilitySpec {
    pub fn new(item_id: impl Into<String>, acceptable: Vec<CanonicalClass>) -> Result<Self> {
        let item_id = item_id.into();
        if acceptable.is_empty() {
            return Err(Error::input(format!("item {item_id}: acceptable set is empty")));
        }
        let mut acceptable = acceptable;
        acceptable.sort();
        acceptable.dedup();
        Ok(AcceptabilitySpec {
            item_id,
            acceptable,
        })
    }

    pub fn single(item_id: impl Into<String>, class: CanonicalClass) -> Self {
        AcceptabilitySpec {
            item_id: item_id.into(),
            acceptable: vec![class],
        }
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    pub fn acceptable(&self) -> &[CanonicalClass] {
        &self.acceptable
    }

    pub fn contains(&self, class: &CanonicalClass) -> bool {
        self.acceptable.binary_search(class).is_ok()
    }
}

/// 1-based position in a ranking, or absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rank {
    Finite(usize),
    Infinite,
}

impl Rank {
    pub fn finite(self) -> Option<usize> {
        match self {
            Rank::Finite(r) => Some(r),
            Rank::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Rank::Infinite)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Finite(r) => write!(f, "{r}"),
            Rank::Infinite => f.write_str("INFINITE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: CanonicalClass,
    pub count: usize,
}

/// Per-query frequency table over canonical classes, sorted by count with
/// seeded tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConsensus {
    item_id: String,
    k: usize,
    classes: Vec<ClassCount>,
    tie_seed: u64,
    strength: f64,
    margin: f64,
    entropy: f64,
}

/// Tie-break priority of a class under `tie_seed`.
///
/// Priorities are i.i.d. uniform across classes, so the order within a group
/// of equal counts is a uniform random permutation. Keying on the class
/// itself (not its position) keeps the order of two classes stable when
/// other classes come and go.
pub(crate) fn tie_priority(tie_seed: u64, class: &CanonicalClass) -> u64 {
    priority_from_tag(tie_seed, class_tag(class))
}

/// Seed-independent part of a class's tie-break priority.
pub(crate) fn class_tag(class: &CanonicalClass) -> u64 {
    seed::hash_str(&class.to_string())
}

pub(crate) fn priority_from_tag(tie_seed: u64, tag: u64) -> u64 {
    seed::derive(tie_seed, Stream::TieBreak, tag)
}

impl RankedConsensus {
    /// Build from per-class counts. Zero counts are dropped; duplicate
    /// classes are merged.
    pub fn from_counts<I>(item_id: impl Into<String>, counts: I, tie_seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (CanonicalClass, usize)>,
    {
        let item_id = item_id.into();
        let mut merged: BTreeMap<CanonicalClass, usize> = BTreeMap::new();
        for (class, count) in counts {
            if count > 0 {
                *merged.entry(class).or_insert(0) += count;
            }
        }
        let k: usize = merged.values().sum();
        if k == 0 {
            return Err(Error::input(format!("item {item_id}: no samples")));
        }
        let mut keyed: Vec<(u64, ClassCount)> = merged
            .into_iter()
            .map(|(class, count)| (tie_priority(tie_seed, &class), ClassCount { class, count }))
            .collect();
        keyed.sort_by(|(pa, a), (pb, b)| {
            b.count
                .cmp(&a.count)
                .then(pa.cmp(pb))
                .then_with(|| a.class.cmp(&b.class))
        });
        let classes: Vec<ClassCount> = keyed.into_iter().map(|(_, c)| c).collect();

        let kf = k as f64;
        let top = classes[0].count;
        let second = classes.get(1).map_or(0, |c| c.count);
        let entropy = if classes.len() == 1 {
            0.0
        } else {
            classes
                .iter()
                .map(|c| {
                    let p = c.count as f64 / kf;
                    p * (kf / c.count as f64).ln()
                })
                .sum()
        };
        Ok(RankedConsensus {
            item_id,
            k,
            strength: top as f64 / kf,
            margin: (top - second) as f64 / kf,
            entropy,
            classes,
            tie_seed,
        })
    }

    pub fn item_id(&self) -> &str {
        &self.item_id
    }

    /// Number of samples K.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> &[ClassCount] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn tie_seed(&self) -> u64 {
        self.tie_seed
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Shannon entropy of the empirical class distribution, in nats.
    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    pub fn mode(&self) -> &CanonicalClass {
        &self.classes[0].class
    }

    /// Empirical frequency of the class at 1-based `rank`.
    pub fn frequency_at(&self, rank: usize) -> f64 {
        self.classes[rank - 1].count as f64 / self.k as f64
    }

    pub fn count_of(&self, class: &CanonicalClass) -> usize {
        self.classes
            .iter()
            .find(|c| &c.class == class)
            .map_or(0, |c| c.count)
    }

    pub fn rank_of(&self, class: &CanonicalClass) -> Rank {
        match self.classes.iter().position(|c| &c.class == class) {
            Some(i) => Rank::Finite(i + 1),
            None => Rank::Infinite,
        }
    }

    /// Smallest rank among the acceptable classes.
    pub fn min_acceptable_rank(&self, spec: &AcceptabilitySpec) -> Rank {
        self.classes
            .iter()
            .position(|c| spec.contains(&c.class))
            .map_or(Rank::Infinite, |i| Rank::Finite(i + 1))
    }

    /// Sum of counts of the top `rank` classes.
    pub fn prefix_count(&self, rank: usize) -> usize {
        self.classes.iter().take(rank).map(|c| c.count).sum()
    }
}

/// Canonicalize and rank the samples of one item.
pub fn aggregate(
    samples: &[RawSample],
    canon: &dyn Canonicalizer,
    tie_seed: u64,
) -> Result<RankedConsensus> {
    let first = samples
        .first()
        .ok_or_else(|| Error::input("aggregate needs at least one sample"))?;
    if let Some(other) = samples.iter().find(|s| s.item_id != first.item_id) {
        return Err(Error::input(format!(
            "mixed item ids in one aggregation: {} and {}",
            first.item_id, other.item_id
        )));
    }
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let classes = canon.canonicalize_batch(&texts);
    RankedConsensus::from_counts(first.item_id.clone(), classes.into_iter().map(|c| (c, 1)), tie_seed)
}

/// Rank of `class` in `consensus`; `Rank::Infinite` when never observed.
pub fn rank_of(consensus: &RankedConsensus, class: &CanonicalClass) -> Rank {
    consensus.rank_of(class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(k: &str) -> CanonicalClass {
        CanonicalClass::new(ClassKind::Numeric, k)
    }

    fn samples(item: &str, texts: &[&str]) -> Vec<RawSample> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| RawSample::new(item, i as u32, *t))
            .collect()
    }

    fn fig1() -> RankedConsensus {
        let mut texts = vec!["42"; 8];
        texts.extend(["37", "37.0"]);
        aggregate(&samples("q", &texts), &NumericCanonicalizer, 1).unwrap()
    }

    #[test]
    fn eight_two_split() {
        let c = fig1();
        assert_eq!(c.k(), 10);
        assert_eq!(c.mode(), &num("42"));
        assert_eq!(c.classes()[1].class, num("37"));
        assert!((c.strength() - 0.8).abs() < 1e-12);
        assert!((c.margin() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn unanimous() {
        let c = aggregate(&samples("q", &["7"; 10]), &NumericCanonicalizer, 3).unwrap();
        assert_eq!(c.num_classes(), 1);
        assert_eq!(c.entropy(), 0.0);
        assert_eq!(c.margin(), 1.0);
        assert_eq!(c.strength(), 1.0);
    }

    #[test]
    fn ties_split_evenly_over_seeds() {
        let s = samples("q", &["1", "1", "1", "1", "1", "2", "2", "2", "2", "2"]);
        let mut first_is_one = 0;
        for seed in 0..100u64 {
            let a = aggregate(&s, &NumericCanonicalizer, seed).unwrap();
            let b = aggregate(&s, &NumericCanonicalizer, seed).unwrap();
            assert_eq!(a, b);
            if a.mode() == &num("1") {
                first_is_one += 1;
            }
        }
        // both orders occur; binomial(100, 1/2) stays inside [30, 70] w.p. > 0.9999
        assert!((30..=70).contains(&first_is_one), "{first_is_one}");
    }

    #[test]
    fn rank_lookup() {
        let c = fig1();
        assert_eq!(rank_of(&c, &num("42")), Rank::Finite(1));
        assert_eq!(rank_of(&c, &num("37")), Rank::Finite(2));
        assert_eq!(rank_of(&c, &num("99")), Rank::Infinite);
    }

    #[test]
    fn invalid_participates_in_ranking() {
        let c = aggregate(&samples("q", &["??", "??", "??", "4"]), &NumericCanonicalizer, 0).unwrap();
        assert!(c.mode().is_invalid());
        assert_eq!(c.rank_of(&num("4")), Rank::Finite(2));
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate(&[], &NumericCanonicalizer, 0).is_err());
        let mut s = samples("a", &["1"]);
        s.push(RawSample::new("b", 1, "2"));
        assert!(aggregate(&s, &NumericCanonicalizer, 0).is_err());
    }

    #[test]
    fn acceptability_must_be_nonempty() {
        assert!(AcceptabilitySpec::new("q", vec![]).is_err());
        let spec = AcceptabilitySpec::new("q", vec![num("37"), num("99")]).unwrap();
        assert_eq!(fig1().min_acceptable_rank(&spec), Rank::Finite(2));
    }
}
