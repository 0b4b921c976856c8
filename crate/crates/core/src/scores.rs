//! Nonconformity scores from a ranked consensus: rank, cumulative
//! probability, LAC and APS.
//!
//! Every score uses the acceptable class with the smallest rank. A score is
//! `INFINITE` exactly when no acceptable class was observed; all four
//! families agree on that.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::consensus::{AcceptabilitySpec, Rank, RankedConsensus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Rank,
    Cumprob,
    Lac,
    Aps,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::Rank, ScoreKind::Cumprob, ScoreKind::Lac, ScoreKind::Aps];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Rank => "rank",
            ScoreKind::Cumprob => "cumprob",
            ScoreKind::Lac => "lac",
            ScoreKind::Aps => "aps",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(ScoreKind::Rank),
            "cumprob" => Ok(ScoreKind::Cumprob),
            "lac" => Ok(ScoreKind::Lac),
            "aps" => Ok(ScoreKind::Aps),
            other => Err(Error::input(format!(
                "unknown score kind {other:?} (expected rank|cumprob|lac|aps)"
            ))),
        }
    }
}

/// Extended nonnegative real: a finite value or `INFINITE`, totally ordered
/// with `INFINITE` above everything. Serialized as a JSON number or the
/// string `"INFINITE"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue(f64);

impl ScoreValue {
    pub const INFINITE: ScoreValue = ScoreValue(f64::INFINITY);

    pub fn finite(v: f64) -> Self {
        assert!(v.is_finite(), "finite score expected, got {v}");
        ScoreValue(v)
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// The value, `f64::INFINITY` when infinite.
    pub fn get(self) -> f64 {
        self.0
    }

    pub fn as_finite(self) -> Option<f64> {
        self.0.is_finite().then_some(self.0)
    }
}

impl Eq for ScoreValue {}

impl PartialOrd for ScoreValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScoreValue {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for ScoreValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("INFINITE")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl From<Rank> for ScoreValue {
    fn from(r: Rank) -> Self {
        match r {
            Rank::Finite(r) => ScoreValue(r as f64),
            Rank::Infinite => ScoreValue::INFINITE,
        }
    }
}

impl Serialize for ScoreValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("INFINITE")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for ScoreValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) if v.is_finite() && v >= 0.0 => Ok(ScoreValue(v)),
            Repr::Num(v) => Err(serde::de::Error::custom(format!("score out of range: {v}"))),
            Repr::Text(t) if t == "INFINITE" => Ok(ScoreValue::INFINITE),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad score {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub kind: ScoreKind,
    pub value: ScoreValue,
}

impl Score {
    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

fn check_ids(consensus: &RankedConsensus, spec: &AcceptabilitySpec) -> Result<()> {
    if consensus.item_id() != spec.item_id() {
        return Err(Error::input(format!(
            "consensus for {} scored against acceptability spec for {}",
            consensus.item_id(),
            spec.item_id()
        )));
    }
    Ok(())
}

/// Minimum rank over the acceptable classes.
pub fn score_rank(consensus: &RankedConsensus, spec: &AcceptabilitySpec) -> Result<Score> {
    check_ids(consensus, spec)?;
    Ok(Score {
        kind: ScoreKind::Rank,
        value: consensus.min_acceptable_rank(spec).into(),
    })
}

/// Empirical mass of the classes ranked at or above the best acceptable one.
pub fn score_cumprob(consensus: &RankedConsensus, spec: &AcceptabilitySpec) -> Result<Score> {
    check_ids(consensus, spec)?;
    let value = match consensus.min_acceptable_rank(spec) {
        Rank::Finite(r) => ScoreValue::finite(consensus.prefix_count(r) as f64 / consensus.k() as f64),
        Rank::Infinite => ScoreValue::INFINITE,
    };
    Ok(Score {
        kind: ScoreKind::Cumprob,
        value,
    })
}

/// One minus the frequency of the most frequent acceptable class.
pub fn score_lac(consensus: &RankedConsensus, spec: &AcceptabilitySpec) -> Result<Score> {
    check_ids(consensus, spec)?;
    let value = match consensus.min_acceptable_rank(spec) {
        Rank::Finite(r) => {
            let k = consensus.k();
            ScoreValue::finite((k - consensus.classes()[r - 1].count) as f64 / k as f64)
        }
        Rank::Infinite => ScoreValue::INFINITE,
    };
    Ok(Score {
        kind: ScoreKind::Lac,
        value,
    })
}

/// Randomized cumulative mass: the classes strictly above the best
/// acceptable one, plus `u` times its own frequency.
pub fn score_aps(consensus: &RankedConsensus, spec: &AcceptabilitySpec, u: f64) -> Result<Score> {
    check_ids(consensus, spec)?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::input(format!("APS randomizer u={u} outside [0, 1]")));
    }
    let value = match consensus.min_acceptable_rank(spec) {
        Rank::Finite(r) => {
            let before = consensus.prefix_count(r - 1) as f64;
            let own = consensus.classes()[r - 1].count as f64;
            ScoreValue::finite((before + u * own) / consensus.k() as f64)
        }
        Rank::Infinite => ScoreValue::INFINITE,
    };
    Ok(Score {
        kind: ScoreKind::Aps,
        value,
    })
}

/// Dispatch on kind. `aps_u` is ignored for the deterministic kinds.
pub fn score(
    kind: ScoreKind,
    consensus: &RankedConsensus,
    spec: &AcceptabilitySpec,
    aps_u: f64,
) -> Result<Score> {
    match kind {
        ScoreKind::Rank => score_rank(consensus, spec),
        ScoreKind::Cumprob => score_cumprob(consensus, spec),
        ScoreKind::Lac => score_lac(consensus, spec),
        ScoreKind::Aps => score_aps(consensus, spec, aps_u),
    }
}
