//! Split-conformal calibration over nonconformity scores: thresholds,
//! prediction sets, the reliability level, weighted thresholds, coverage
//! evaluation and split stability.

use std::collections::HashSet;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consensus::{AcceptabilitySpec, CanonicalClass, Rank, RankedConsensus};
use crate::error::{Error, Result};
use crate::scores::{self, Score, ScoreKind, ScoreValue};
use crate::seed::{self, Stream};
use crate::stats::{self, Z_95};

pub const SCHEMA_VERSION: &str = "rankcert/1";

/// Miscoverage levels reported by default.
pub const ALPHA_GRID: [f64; 7] = [0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

/// Float comparisons against frequency thresholds use this slack.
pub const FREQ_TOL: f64 = 1e-12;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// `ceil((n + 1)(1 - alpha))` in exact arithmetic. `alpha` is first
/// converted to the simplest rational that rounds to it, so decimal inputs
/// like 0.1 are treated as 1/10 rather than as their binary approximation.
pub fn k_index(n: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let r = Ratio::<i64>::approximate_float(alpha)
        .ok_or_else(|| Error::input(format!("alpha {alpha} has no rational approximation")))?;
    let (num, den) = (*r.numer() as i128, *r.denom() as i128);
    let top = (n as i128 + 1) * (den - num);
    Ok(((top + den - 1) / den) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub alpha: f64,
    pub n: usize,
    pub k_index: usize,
    pub m_star: ScoreValue,
}

/// The `k_index`-th smallest of `values`; `INFINITE` when `k_index > n`.
pub fn conformal_threshold_values(values: &[ScoreValue], alpha: f64) -> Result<ConformalThreshold> {
    if values.is_empty() {
        return Err(Error::input("conformal threshold needs at least one calibration score"));
    }
    let n = values.len();
    let k = k_index(n, alpha)?;
    let m_star = if k > n {
        ScoreValue::INFINITE
    } else {
        let mut sorted = values.to_vec();
        sorted.sort();
        sorted[k - 1]
    };
    Ok(ConformalThreshold {
        alpha,
        n,
        k_index: k,
        m_star,
    })
}

/// Conformal threshold over scores of a single kind.
pub fn conformal_threshold(scores: &[Score], alpha: f64) -> Result<ConformalThreshold> {
    if let Some(first) = scores.first() {
        if scores.iter().any(|s| s.kind != first.kind) {
            return Err(Error::input("calibration scores mix score kinds"));
        }
    }
    let values: Vec<ScoreValue> = scores.iter().map(|s| s.value).collect();
    conformal_threshold_values(&values, alpha)
}

/// Exact reliability level `|{i : s_i <= 1}| / (n + 1)` over rank scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityLevel {
    pub numerator: u64,
    pub denominator: u64,
}

impl ReliabilityLevel {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    pub fn ratio(&self) -> Ratio<u64> {
        Ratio::new_raw(self.numerator, self.denominator)
    }

    /// Percentage with one decimal, e.g. `94.6%`.
    pub fn percent(&self) -> String {
        format!("{:.1}%", 100.0 * self.value())
    }
}

pub fn reliability_level(scores: &[Score]) -> Result<ReliabilityLevel> {
    if let Some(bad) = scores.iter().find(|s| s.kind != ScoreKind::Rank) {
        return Err(Error::input(format!(
            "reliability level is defined on rank scores, got {}",
            bad.kind
        )));
    }
    let values: Vec<ScoreValue> = scores.iter().map(|s| s.value).collect();
    Ok(reliability_from_ranks(&values))
}

fn reliability_from_ranks(values: &[ScoreValue]) -> ReliabilityLevel {
    let hits = values.iter().filter(|v| v.get() <= 1.0).count();
    ReliabilityLevel {
        numerator: hits as u64,
        denominator: values.len() as u64 + 1,
    }
}

/// Weighted split-conformal threshold. The test point takes the largest
/// calibration weight as its own slot, with mass placed at `+inf`; with all
/// weights equal this is exactly [`conformal_threshold_values`].
pub fn weighted_threshold(values: &[ScoreValue], weights: &[f64], alpha: f64) -> Result<ScoreValue> {
    let test_weight = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    weighted_threshold_with_test_weight(values, weights, test_weight, alpha)
}

/// Weighted threshold with an explicit test-point likelihood ratio.
pub fn weighted_threshold_with_test_weight(
    values: &[ScoreValue],
    weights: &[f64],
    test_weight: f64,
    alpha: f64,
) -> Result<ScoreValue> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(Error::input("weighted threshold needs at least one calibration score"));
    }
    if values.len() != weights.len() {
        return Err(Error::input(format!(
            "{} scores but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().chain(std::iter::once(&test_weight)).find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::input(format!("weights must be finite and positive, got {w}")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].cmp(&values[b]));
    let total: f64 = weights.iter().sum::<f64>() + test_weight;
    let target = (1.0 - alpha) * total;
    let mut cum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let v = values[order[i]];
        // absorb the whole tie block before testing the crossing
        while i < order.len() && values[order[i]] == v {
            cum += weights[order[i]];
            i += 1;
        }
        if cum >= target * (1.0 - FREQ_TOL) {
            return Ok(v);
        }
    }
    Ok(ScoreValue::INFINITE)
}

/// A prediction set over observed classes, best-ranked first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub classes: Vec<CanonicalClass>,
    /// The threshold asked for more classes than were observed.
    pub saturated: bool,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn covers(&self, spec: &AcceptabilitySpec) -> bool {
        self.classes.iter().any(|c| spec.contains(c))
    }
}

fn prefix_set(consensus: &RankedConsensus, size: usize, saturated: bool) -> PredictionSet {
    PredictionSet {
        classes: consensus.classes().iter().take(size).map(|c| c.class.clone()).collect(),
        saturated,
    }
}

/// Top-`m_star` classes by rank.
pub fn prediction_set(consensus: &RankedConsensus, m_star: ScoreValue) -> PredictionSet {
    let observed = consensus.num_classes();
    match m_star.as_finite() {
        Some(m) => {
            let m = (m + FREQ_TOL).floor().max(0.0) as usize;
            prefix_set(consensus, m.min(observed), m > observed)
        }
        None => prefix_set(consensus, observed, true),
    }
}

/// Smallest non-empty ranked prefix whose cumulative frequency reaches `q`.
pub fn prediction_set_adaptive(consensus: &RankedConsensus, q: ScoreValue) -> PredictionSet {
    let observed = consensus.num_classes();
    let Some(q) = q.as_finite() else {
        return prefix_set(consensus, observed, true);
    };
    let k = consensus.k() as f64;
    let mut cum = 0usize;
    for (i, c) in consensus.classes().iter().enumerate() {
        cum += c.count;
        if cum as f64 / k >= q - FREQ_TOL {
            return prefix_set(consensus, i + 1, false);
        }
    }
    prefix_set(consensus, observed, q > 1.0 + FREQ_TOL)
}

/// Classes whose score, were they the acceptable one, would not exceed
/// `threshold`. Used for LAC (frequency cut) and APS (randomized prefix).
fn threshold_set(kind: ScoreKind, consensus: &RankedConsensus, threshold: ScoreValue, aps_u: f64) -> PredictionSet {
    let observed = consensus.num_classes();
    let Some(q) = threshold.as_finite() else {
        return prefix_set(consensus, observed, true);
    };
    let k = consensus.k() as f64;
    let mut size = 0;
    let mut before = 0usize;
    for c in consensus.classes() {
        let s = match kind {
            ScoreKind::Lac => (consensus.k() - c.count) as f64 / k,
            ScoreKind::Aps => (before as f64 + aps_u * c.count as f64) / k,
            ScoreKind::Rank => (size + 1) as f64,
            ScoreKind::Cumprob => (before + c.count) as f64 / k,
        };
        if s > q + FREQ_TOL {
            break;
        }
        size += 1;
        before += c.count;
    }
    prefix_set(consensus, size, false)
}

/// The prediction set a threshold induces for the given score family.
pub fn prediction_set_for(
    kind: ScoreKind,
    consensus: &RankedConsensus,
    threshold: ScoreValue,
    aps_u: f64,
) -> PredictionSet {
    match kind {
        ScoreKind::Rank => prediction_set(consensus, threshold),
        ScoreKind::Cumprob => prediction_set_adaptive(consensus, threshold),
        ScoreKind::Lac | ScoreKind::Aps => threshold_set(kind, consensus, threshold, aps_u),
    }
}

/// Summary statistics of the consensus behind a record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusDigest {
    pub k: usize,
    pub strength: f64,
    pub margin: f64,
    pub entropy: f64,
    pub num_classes: usize,
}

impl From<&RankedConsensus> for ConsensusDigest {
    fn from(c: &RankedConsensus) -> Self {
        ConsensusDigest {
            k: c.k(),
            strength: c.strength(),
            margin: c.margin(),
            entropy: c.entropy(),
            num_classes: c.num_classes(),
        }
    }
}

/// One labeled item after sampling: its consensus, what is acceptable, and
/// the per-item APS randomizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledConsensus {
    pub consensus: RankedConsensus,
    pub spec: AcceptabilitySpec,
    /// At least one acceptable answer appeared within the full sample budget.
    pub solvable: bool,
    pub aps_u: f64,
}

impl LabeledConsensus {
    /// Solvability read off the consensus itself, APS randomizer derived from
    /// the run seed and item id.
    pub fn new(consensus: RankedConsensus, spec: AcceptabilitySpec, run_seed: u64) -> Self {
        let solvable = !consensus.min_acceptable_rank(&spec).is_infinite();
        let aps_u = aps_uniform(run_seed, consensus.item_id());
        LabeledConsensus {
            consensus,
            spec,
            solvable,
            aps_u,
        }
    }

    pub fn item_id(&self) -> &str {
        self.consensus.item_id()
    }

    pub fn score(&self, kind: ScoreKind) -> Result<Score> {
        scores::score(kind, &self.consensus, &self.spec, self.aps_u)
    }

    pub fn rank(&self) -> Rank {
        self.consensus.min_acceptable_rank(&self.spec)
    }
}

/// APS randomizer for an item, in [0, 1].
pub fn aps_uniform(run_seed: u64, item_id: &str) -> f64 {
    seed::unit_from_seed(seed::derive(seed::item_seed(run_seed, item_id), Stream::ApsUniform, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub item_id: String,
    pub score: Score,
    /// Rank score of the same item; the reliability level is read off these.
    pub rank: ScoreValue,
    pub solvable: bool,
    pub digest: ConsensusDigest,
}

impl CalibrationRecord {
    pub fn from_labeled(item: &LabeledConsensus, kind: ScoreKind) -> Result<Self> {
        let score = item.score(kind)?;
        let rank: ScoreValue = item.rank().into();
        if !item.solvable && !score.is_infinite() {
            return Err(Error::input(format!(
                "item {} is marked unsolvable but its acceptable class was observed",
                item.item_id()
            )));
        }
        Ok(CalibrationRecord {
            item_id: item.item_id().to_string(),
            score,
            rank,
            solvable: item.solvable,
            digest: (&item.consensus).into(),
        })
    }
}

/// Fitted calibration: sorted records plus one threshold per alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub score_kind: ScoreKind,
    /// Ascending by score, `INFINITE` last, ties by item id.
    pub records: Vec<CalibrationRecord>,
    pub thresholds: Vec<ConformalThreshold>,
    pub primary_alpha: f64,
    pub reliability: ReliabilityLevel,
}

impl Calibration {
    pub fn fit(mut records: Vec<CalibrationRecord>, alphas: &[f64], primary_alpha: f64) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::input("calibration needs at least one record"));
        };
        let kind = first.score.kind;
        if records.iter().any(|r| r.score.kind != kind) {
            return Err(Error::input("calibration records mix score kinds"));
        }
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.item_id.as_str()) {
                return Err(Error::input(format!("duplicate calibration item {}", r.item_id)));
            }
        }
        records.sort_by(|a, b| a.score.value.cmp(&b.score.value).then_with(|| a.item_id.cmp(&b.item_id)));
        let mut alphas: Vec<f64> = alphas.to_vec();
        if !alphas.iter().any(|a| (a - primary_alpha).abs() < 1e-15) {
            alphas.push(primary_alpha);
        }
        alphas.sort_by(f64::total_cmp);
        let values: Vec<ScoreValue> = records.iter().map(|r| r.score.value).collect();
        let thresholds = alphas
            .iter()
            .map(|&a| conformal_threshold_values(&values, a))
            .collect::<Result<Vec<_>>>()?;
        let ranks: Vec<ScoreValue> = records.iter().map(|r| r.rank).collect();
        Ok(Calibration {
            score_kind: kind,
            reliability: reliability_from_ranks(&ranks),
            records,
            thresholds,
            primary_alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn threshold(&self, alpha: f64) -> Option<&ConformalThreshold> {
        self.thresholds.iter().find(|t| (t.alpha - alpha).abs() < 1e-15)
    }

    pub fn primary(&self) -> &ConformalThreshold {
        self.threshold(self.primary_alpha).expect("primary alpha is always fitted")
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.item_id.as_str())
    }

    pub fn certificate(&self, seed: u64, metadata: CertificateMetadata) -> Certificate {
        let t = self.primary();
        Certificate {
            schema_version: SCHEMA_VERSION.to_string(),
            alpha: t.alpha,
            n: t.n,
            k_index: t.k_index,
            m_star: t.m_star,
            reliability_level: self.reliability,
            reliability_percent: self.reliability.percent(),
            score_kind: self.score_kind,
            seed,
            metadata,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateMetadata {
    pub tool: String,
    pub tool_version: String,
    pub backend: String,
    pub model: String,
    pub k: usize,
    pub temperature: f64,
    pub calibration_items: Vec<String>,
}

/// Serialized calibration outcome at the primary alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub schema_version: String,
    pub alpha: f64,
    pub n: usize,
    pub k_index: usize,
    pub m_star: ScoreValue,
    pub reliability_level: ReliabilityLevel,
    pub reliability_percent: String,
    pub score_kind: ScoreKind,
    pub seed: u64,
    pub metadata: CertificateMetadata,
}

impl Certificate {
    /// Rebuild a calibration-side view sufficient for evaluation: thresholds
    /// and the ids that must not reappear in a test set.
    pub fn thresholds(&self) -> ConformalThreshold {
        ConformalThreshold {
            alpha: self.alpha,
            n: self.n,
            k_index: self.k_index,
            m_star: self.m_star,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub k_index: usize,
    pub m_star: ScoreValue,
    /// Fraction of test items whose prediction set holds an acceptable class.
    pub coverage: f64,
    /// Fraction with `s_test <= m_star`, counting `INFINITE <= INFINITE`.
    pub threshold_coverage: f64,
    pub conditional_coverage_solvable: f64,
    pub avg_set_size: f64,
    pub saturated_fraction: f64,
    pub wilson_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub schema_version: String,
    pub score_kind: ScoreKind,
    pub n_calibration: usize,
    pub n_test: usize,
    pub n_solvable: usize,
    pub alpha: f64,
    pub m_star: ScoreValue,
    pub coverage: f64,
    pub threshold_coverage: f64,
    pub conditional_coverage_solvable: f64,
    pub mode_accuracy: f64,
    pub avg_set_size: f64,
    pub wilson_ci: (f64, f64),
    pub reliability_level: ReliabilityLevel,
    pub per_alpha: Vec<AlphaRow>,
}

impl CoverageReport {
    pub fn row(&self, alpha: f64) -> Option<&AlphaRow> {
        self.per_alpha.iter().find(|r| (r.alpha - alpha).abs() < 1e-15)
    }
}

fn check_disjoint<'a>(cal_ids: impl Iterator<Item = &'a str>, test: &[LabeledConsensus]) -> Result<()> {
    let cal: HashSet<&str> = cal_ids.collect();
    if let Some(dup) = test.iter().find(|t| cal.contains(t.item_id())) {
        return Err(Error::input(format!(
            "item {} appears in both calibration and test sets",
            dup.item_id()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = test.iter().find(|t| !seen.insert(t.item_id())) {
        return Err(Error::input(format!("duplicate test item {}", dup.item_id())));
    }
    Ok(())
}

struct ItemOutcome {
    covered: bool,
    under_threshold: bool,
    set_size: usize,
    saturated: bool,
}

fn assess(kind: ScoreKind, item: &LabeledConsensus, score: ScoreValue, threshold: ScoreValue) -> ItemOutcome {
    let set = prediction_set_for(kind, &item.consensus, threshold, item.aps_u);
    ItemOutcome {
        covered: set.covers(&item.spec),
        under_threshold: score.is_infinite() && threshold.is_infinite() || score.get() <= threshold.get() + FREQ_TOL,
        set_size: set.len(),
        saturated: set.saturated,
    }
}

fn alpha_row(kind: ScoreKind, t: &ConformalThreshold, test: &[LabeledConsensus], test_scores: &[ScoreValue]) -> Result<AlphaRow> {
    let outcomes: Vec<ItemOutcome> = test
        .iter()
        .zip(test_scores)
        .map(|(item, s)| assess(kind, item, *s, t.m_star))
        .collect();
    let n = outcomes.len();
    let covered = outcomes.iter().filter(|o| o.covered).count();
    let solvable: Vec<&ItemOutcome> = test.iter().zip(&outcomes).filter(|(i, _)| i.solvable).map(|(_, o)| o).collect();
    let solvable_cov = if solvable.is_empty() {
        f64::NAN
    } else {
        solvable.iter().filter(|o| o.covered).count() as f64 / solvable.len() as f64
    };
    Ok(AlphaRow {
        alpha: t.alpha,
        k_index: t.k_index,
        m_star: t.m_star,
        coverage: covered as f64 / n as f64,
        threshold_coverage: outcomes.iter().filter(|o| o.under_threshold).count() as f64 / n as f64,
        conditional_coverage_solvable: solvable_cov,
        avg_set_size: outcomes.iter().map(|o| o.set_size as f64).sum::<f64>() / n as f64,
        saturated_fraction: outcomes.iter().filter(|o| o.saturated).count() as f64 / n as f64,
        wilson_ci: stats::wilson_ci(covered, n, Z_95)?,
    })
}

/// Coverage of `calibration`'s thresholds on a disjoint test set.
pub fn evaluate(calibration: &Calibration, test: &[LabeledConsensus]) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::input("evaluation needs at least one test item"));
    }
    check_disjoint(calibration.item_ids(), test)?;
    let kind = calibration.score_kind;
    let test_scores: Vec<ScoreValue> = test
        .iter()
        .map(|t| t.score(kind).map(|s| s.value))
        .collect::<Result<_>>()?;
    let per_alpha = calibration
        .thresholds
        .iter()
        .map(|t| alpha_row(kind, t, test, &test_scores))
        .collect::<Result<Vec<_>>>()?;
    let primary = per_alpha
        .iter()
        .find(|r| (r.alpha - calibration.primary_alpha).abs() < 1e-15)
        .expect("primary alpha fitted")
        .clone();
    let mode_hits = test.iter().filter(|t| t.rank() == Rank::Finite(1)).count();
    Ok(CoverageReport {
        schema_version: SCHEMA_VERSION.to_string(),
        score_kind: kind,
        n_calibration: calibration.n(),
        n_test: test.len(),
        n_solvable: test.iter().filter(|t| t.solvable).count(),
        alpha: primary.alpha,
        m_star: primary.m_star,
        coverage: primary.coverage,
        threshold_coverage: primary.threshold_coverage,
        conditional_coverage_solvable: primary.conditional_coverage_solvable,
        mode_accuracy: mode_hits as f64 / test.len() as f64,
        avg_set_size: primary.avg_set_size,
        wilson_ci: primary.wilson_ci,
        reliability_level: calibration.reliability,
        per_alpha,
    })
}

/// Evaluate against a stored certificate (single alpha). The certificate's
/// recorded calibration ids are checked for overlap with `test`.
pub fn evaluate_certificate(cert: &Certificate, test: &[LabeledConsensus]) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::input("evaluation needs at least one test item"));
    }
    check_disjoint(cert.metadata.calibration_items.iter().map(String::as_str), test)?;
    let kind = cert.score_kind;
    let test_scores: Vec<ScoreValue> = test
        .iter()
        .map(|t| t.score(kind).map(|s| s.value))
        .collect::<Result<_>>()?;
    let row = alpha_row(kind, &cert.thresholds(), test, &test_scores)?;
    let mode_hits = test.iter().filter(|t| t.rank() == Rank::Finite(1)).count();
    Ok(CoverageReport {
        schema_version: SCHEMA_VERSION.to_string(),
        score_kind: kind,
        n_calibration: cert.n,
        n_test: test.len(),
        n_solvable: test.iter().filter(|t| t.solvable).count(),
        alpha: row.alpha,
        m_star: row.m_star,
        coverage: row.coverage,
        threshold_coverage: row.threshold_coverage,
        conditional_coverage_solvable: row.conditional_coverage_solvable,
        mode_accuracy: mode_hits as f64 / test.len() as f64,
        avg_set_size: row.avg_set_size,
        wilson_ci: row.wilson_ci,
        reliability_level: cert.reliability_level,
        per_alpha: vec![row],
    })
}

/// Calibrate on `cal`, evaluate on `test`, returning only what Monte Carlo
/// loops need.
pub fn split_coverage(
    kind: ScoreKind,
    cal: &[LabeledConsensus],
    test: &[LabeledConsensus],
    alpha: f64,
) -> Result<SplitOutcome> {
    Ok(split_coverage_grid(kind, cal, test, &[alpha])?.remove(0))
}

/// [`split_coverage`] for several alphas, scoring each item once.
pub fn split_coverage_grid(
    kind: ScoreKind,
    cal: &[LabeledConsensus],
    test: &[LabeledConsensus],
    alphas: &[f64],
) -> Result<Vec<SplitOutcome>> {
    if test.is_empty() {
        return Err(Error::input("evaluation needs at least one test item"));
    }
    let cal_scores: Vec<ScoreValue> = cal.iter().map(|c| c.score(kind).map(|s| s.value)).collect::<Result<_>>()?;
    let test_scores: Vec<ScoreValue> = test.iter().map(|c| c.score(kind).map(|s| s.value)).collect::<Result<_>>()?;
    let n = test.len() as f64;
    alphas
        .iter()
        .map(|&alpha| {
            let t = conformal_threshold_values(&cal_scores, alpha)?;
            let (mut covered, mut under, mut size) = (0usize, 0usize, 0usize);
            for (item, s) in test.iter().zip(&test_scores) {
                let o = assess(kind, item, *s, t.m_star);
                covered += usize::from(o.covered);
                under += usize::from(o.under_threshold);
                size += o.set_size;
            }
            Ok(SplitOutcome {
                m_star: t.m_star,
                coverage: covered as f64 / n,
                threshold_coverage: under as f64 / n,
                avg_set_size: size as f64 / n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub m_star: ScoreValue,
    pub coverage: f64,
    pub threshold_coverage: f64,
    pub avg_set_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStability {
    pub splits: usize,
    /// Mean and standard deviation over splits with a finite threshold.
    pub m_star_mean: f64,
    pub m_star_std: f64,
    pub m_star_infinite: usize,
    /// Fraction of splits whose threshold equals the most common value.
    pub m_star_modal_fraction: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
}

/// Re-split `items` 50/50 under `n_splits` derived seeds and summarise how
/// the threshold and test coverage move.
pub fn bootstrap_splits(
    items: &[LabeledConsensus],
    kind: ScoreKind,
    n_splits: usize,
    alpha: f64,
    seed_value: u64,
) -> Result<SplitStability> {
    if items.len() < 2 {
        return Err(Error::input(format!(
            "need at least 2 records for a calibration/test split, got {}",
            items.len()
        )));
    }
    if n_splits == 0 {
        return Err(Error::input("need at least one split"));
    }
    let half = items.len() / 2;
    let mut outcomes = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(&mut seed::rng(seed::derive(seed_value, Stream::Split, s as u64)));
        let cal: Vec<LabeledConsensus> = idx[..half].iter().map(|&i| items[i].clone()).collect();
        let test: Vec<LabeledConsensus> = idx[half..].iter().map(|&i| items[i].clone()).collect();
        outcomes.push(split_coverage(kind, &cal, &test, alpha)?);
    }
    let finite: Vec<f64> = outcomes.iter().filter_map(|o| o.m_star.as_finite()).collect();
    let mut values: Vec<ScoreValue> = outcomes.iter().map(|o| o.m_star).collect();
    values.sort();
    let mut modal = 0;
    let mut i = 0;
    while i < values.len() {
        let j = values[i..].iter().take_while(|v| **v == values[i]).count();
        modal = modal.max(j);
        i += j;
    }
    let cov: Vec<f64> = outcomes.iter().map(|o| o.coverage).collect();
    Ok(SplitStability {
        splits: n_splits,
        m_star_mean: if finite.is_empty() { f64::NAN } else { stats::mean(&finite) },
        m_star_std: stats::sample_std(&finite),
        m_star_infinite: n_splits - finite.len(),
        m_star_modal_fraction: modal as f64 / n_splits as f64,
        coverage_mean: stats::mean(&cov),
        coverage_std: stats::sample_std(&cov),
    })
}
