//! Validation experiments. Each returns a serializable result holding the
//! plotted series plus the Monte Carlo standard errors needed to test it.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    draw_population, mode_with_tags, multinomial, sample_stream, ItemDraw, Sampling, SimulatedJudge,
    SyntheticAgent,
};
use crate::calibrate::{
    self, conformal_threshold_values, prediction_set_adaptive, LabeledConsensus, SplitOutcome, ALPHA_GRID,
};
use crate::consensus::{self, CanonicalClass, Canonicalizer, ClassKind, VerbatimCanonicalizer};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::scores::{ScoreKind, ScoreValue};
use crate::seed::{self, Stream};
use crate::sequential::{self, SavingsReport, StoppingConfig, StoppingTrace};
use crate::stats;

/// Plot-ready table export.
pub trait Tabular {
    fn to_csv(&self) -> String;
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Upper bound on the mode error of an agent with acceptable probability
/// `p > 1/2` after `k` samples.
pub fn hoeffding_bound(k: usize, p: f64) -> Option<f64> {
    (p > 0.5).then(|| (-2.0 * k as f64 * (p - 0.5).powi(2)).exp())
}

// ---------------------------------------------------------------- coverage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub p_stars: Vec<f64>,
    pub alphas: Vec<f64>,
    pub n_cal: usize,
    pub n_test: usize,
    pub reps: usize,
    pub k: usize,
    pub score: ScoreKind,
    pub wrong_weights: Vec<f64>,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            p_stars: vec![0.6, 0.7, 0.8],
            alphas: ALPHA_GRID.to_vec(),
            n_cal: 200,
            n_test: 500,
            reps: 200,
            k: 10,
            score: ScoreKind::Rank,
            wrong_weights: vec![1.0, 1.0, 1.0],
            sampling: Sampling::Bulk,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub p_star: f64,
    pub alpha: f64,
    pub target: f64,
    pub reps: usize,
    pub mean_coverage: f64,
    /// Standard error of `mean_coverage` across replications.
    pub coverage_se: f64,
    pub mean_threshold_coverage: f64,
    pub threshold_coverage_se: f64,
    pub mean_set_size: f64,
    pub infinite_threshold_fraction: f64,
    /// `target - 3 se`.
    pub lower_band: f64,
    /// `target + 1/(n+1) + 3 se`, on threshold coverage.
    pub upper_band: f64,
}

impl CoverageCell {
    pub fn lower_ok(&self) -> bool {
        self.mean_coverage >= self.lower_band
    }

    pub fn upper_ok(&self) -> bool {
        self.mean_threshold_coverage <= self.upper_band
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    pub config: CoverageConfig,
    pub cells: Vec<CoverageCell>,
}

impl Tabular for CoverageGrid {
    fn to_csv(&self) -> String {
        let mut out = String::from(
            "p_star,alpha,target,mean_coverage,coverage_se,mean_threshold_coverage,mean_set_size,lower_band,upper_band\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.p_star,
                c.alpha,
                c.target,
                c.mean_coverage,
                c.coverage_se,
                c.mean_threshold_coverage,
                c.mean_set_size,
                c.lower_band,
                c.upper_band
            );
        }
        out
    }
}

/// Replicate calibrate-then-evaluate splits and summarise each alpha.
fn replicate_coverage<F>(
    p_star: f64,
    alphas: &[f64],
    reps: usize,
    n_cal: usize,
    score: ScoreKind,
    seed_value: u64,
    exec: Execution,
    make_split: F,
) -> Result<Vec<CoverageCell>>
where
    F: Fn(u64) -> Result<(Vec<LabeledConsensus>, Vec<LabeledConsensus>)> + Sync + Send,
{
    if reps == 0 {
        return Err(Error::input("need at least one replication"));
    }
    let runs: Vec<Result<Vec<SplitOutcome>>> = exec::map_indexed(exec, reps, |r| {
        let (cal, test) = make_split(seed::derive(seed_value, Stream::Trial, r as u64))?;
        calibrate::split_coverage_grid(score, &cal, &test, alphas)
    });
    let runs: Vec<Vec<SplitOutcome>> = runs.into_iter().collect::<Result<_>>()?;
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let cov: Vec<f64> = runs.iter().map(|r| r[j].coverage).collect();
            let thr: Vec<f64> = runs.iter().map(|r| r[j].threshold_coverage).collect();
            let size: Vec<f64> = runs.iter().map(|r| r[j].avg_set_size).collect();
            let inf = runs.iter().filter(|r| r[j].m_star.is_infinite()).count();
            let (se, tse) = (stats::std_error(&cov), stats::std_error(&thr));
            let target = 1.0 - alpha;
            CoverageCell {
                p_star,
                alpha,
                target,
                reps,
                mean_coverage: stats::mean(&cov),
                coverage_se: se,
                mean_threshold_coverage: stats::mean(&thr),
                threshold_coverage_se: tse,
                mean_set_size: stats::mean(&size),
                infinite_threshold_fraction: inf as f64 / reps as f64,
                lower_band: target - 3.0 * se,
                upper_band: target + 1.0 / (n_cal as f64 + 1.0) + 3.0 * tse,
            }
        })
        .collect())
}

/// Coverage across the p★ × alpha grid, with every item drawn from the
/// agent returned by `agent_for(p_star, draw)`.
pub fn coverage_sweep_with<F>(config: &CoverageConfig, exec: Execution, agent_for: F) -> Result<CoverageGrid>
where
    F: Fn(f64, ItemDraw<'_>) -> Result<SyntheticAgent> + Sync + Send,
{
    let mut cells = Vec::new();
    for (i, &p) in config.p_stars.iter().enumerate() {
        let cell_seed = seed::derive(config.seed, Stream::Population, i as u64);
        cells.extend(replicate_coverage(
            p,
            &config.alphas,
            config.reps,
            config.n_cal,
            config.score,
            cell_seed,
            exec,
            |run_seed| {
                let f = |d: ItemDraw<'_>| agent_for(p, d);
                Ok((
                    draw_population("cal", config.n_cal, config.k, run_seed, config.sampling, f)?,
                    draw_population("test", config.n_test, config.k, run_seed, config.sampling, f)?,
                ))
            },
        )?);
    }
    Ok(CoverageGrid {
        config: config.clone(),
        cells,
    })
}

/// Coverage across the grid for single-distribution agents.
pub fn coverage_sweep(config: &CoverageConfig, exec: Execution) -> Result<CoverageGrid> {
    let wrong = config.wrong_weights.clone();
    coverage_sweep_with(config, exec, move |p, _| SyntheticAgent::with_accuracy(p, &wrong))
}

// --------------------------------------------------------------- mode error

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeErrorPoint {
    pub k: usize,
    pub error: f64,
    pub sigma: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeErrorSeries {
    pub p_star: f64,
    pub trials: usize,
    pub points: Vec<ModeErrorPoint>,
}

impl Tabular for ModeErrorSeries {
    fn to_csv(&self) -> String {
        let mut out = String::from("p_star,k,error,sigma,bound\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", self.p_star, p.k, p.error, p.sigma, opt(p.bound));
        }
        out
    }
}

fn mode_correct_rate(agent: &SyntheticAgent, k: usize, trials: usize, seed_value: u64, exec: Execution) -> f64 {
    let acc = agent.acceptable_index();
    let hits = super::monte_carlo(exec, seed_value, trials, |rng, _| {
        let counts = agent.counts_bulk(k, rng);
        agent.mode_index(&counts, rng.random()) == acc
    });
    hits.iter().filter(|h| **h).count() as f64 / trials as f64
}

/// Empirical probability that the consensus mode is not acceptable, per K,
/// with the exponential bound overlaid when it applies.
pub fn mode_error_sweep(
    agent: &SyntheticAgent,
    ks: &[usize],
    trials: usize,
    seed_value: u64,
    exec: Execution,
) -> ModeErrorSeries {
    let points = ks
        .iter()
        .map(|&k| {
            let err = 1.0 - mode_correct_rate(agent, k, trials, seed::derive(seed_value, Stream::Trial, k as u64), exec);
            ModeErrorPoint {
                k,
                error: err,
                sigma: stats::binomial_sigma(err, trials),
                bound: hoeffding_bound(k, agent.p_star()),
            }
        })
        .collect();
    ModeErrorSeries {
        p_star: agent.p_star(),
        trials,
        points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub k: usize,
    pub mode_correct_rate: f64,
    /// `mode_correct_rate - p_star`.
    pub bias: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSeries {
    pub p_star: f64,
    pub trials: usize,
    pub points: Vec<BiasPoint>,
}

impl Tabular for BiasSeries {
    fn to_csv(&self) -> String {
        let mut out = String::from("p_star,k,mode_correct_rate,bias,sigma\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", self.p_star, p.k, p.mode_correct_rate, p.bias, p.sigma);
        }
        out
    }
}

/// Bias of the mode-correct indicator as an estimate of p★, per K.
pub fn mode_bias_regimes(
    agent: &SyntheticAgent,
    ks: &[usize],
    trials: usize,
    seed_value: u64,
    exec: Execution,
) -> BiasSeries {
    let points = ks
        .iter()
        .map(|&k| {
            let rate = mode_correct_rate(agent, k, trials, seed::derive(seed_value, Stream::Trial, k as u64), exec);
            BiasPoint {
                k,
                mode_correct_rate: rate,
                bias: rate - agent.p_star(),
                sigma: stats::binomial_sigma(rate, trials),
            }
        })
        .collect();
    BiasSeries {
        p_star: agent.p_star(),
        trials,
        points,
    }
}

// --------------------------------------------------------- canonicalization

/// An agent whose raw answers are surface variants of fewer canonical
/// classes. Raw keys have the form `class#variant`.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentedAgent {
    raw: Vec<(CanonicalClass, f64)>,
    raw_tags: Vec<u64>,
    canonical_of: Vec<usize>,
    canonical: Vec<(CanonicalClass, f64)>,
    canonical_tags: Vec<u64>,
    acceptable: usize,
}

impl FragmentedAgent {
    /// Acceptable mass split evenly over `variants` raw forms of `ok`, wrong
    /// classes `w1, w2, ...` with the given probabilities left unsplit.
    pub fn split(variants: usize, variant_mass: f64, wrong: &[f64]) -> Result<Self> {
        if variants == 0 {
            return Err(Error::input("need at least one variant"));
        }
        let mut raw: Vec<(CanonicalClass, f64, usize)> = (0..variants)
            .map(|v| (CanonicalClass::new(ClassKind::Verbatim, format!("ok#{}", v + 1)), variant_mass, 0))
            .collect();
        for (i, p) in wrong.iter().enumerate() {
            raw.push((CanonicalClass::new(ClassKind::Verbatim, format!("w{}", i + 1)), *p, i + 1));
        }
        let mut canonical = vec![(CanonicalClass::new(ClassKind::Verbatim, "ok"), variant_mass * variants as f64)];
        for (i, p) in wrong.iter().enumerate() {
            canonical.push((CanonicalClass::new(ClassKind::Verbatim, format!("w{}", i + 1)), *p));
        }
        FragmentedAgent::new(raw, canonical, 0)
    }

    /// Every raw answer is its own canonical class.
    pub fn identity(agent: &SyntheticAgent) -> Self {
        let raw = agent.classes().iter().enumerate().map(|(i, (c, p))| (c.clone(), *p, i)).collect();
        FragmentedAgent::new(raw, agent.classes().to_vec(), agent.acceptable_index()).expect("valid agent")
    }

    fn new(raw: Vec<(CanonicalClass, f64, usize)>, canonical: Vec<(CanonicalClass, f64)>, acceptable: usize) -> Result<Self> {
        let total: f64 = raw.iter().map(|r| r.1).sum();
        if (total - 1.0).abs() > super::PROB_TOL || raw.iter().any(|r| !(r.1 > 0.0)) {
            return Err(Error::input(format!("raw probabilities must be positive and sum to 1, got {total}")));
        }
        if raw.iter().any(|r| r.2 >= canonical.len()) || acceptable >= canonical.len() {
            return Err(Error::input("canonical index out of range"));
        }
        Ok(FragmentedAgent {
            raw_tags: raw.iter().map(|r| consensus::class_tag(&r.0)).collect(),
            canonical_of: raw.iter().map(|r| r.2).collect(),
            raw: raw.into_iter().map(|r| (r.0, r.1)).collect(),
            canonical_tags: canonical.iter().map(|c| consensus::class_tag(&c.0)).collect(),
            canonical,
            acceptable,
        })
    }

    pub fn acceptable_mass(&self) -> f64 {
        self.canonical[self.acceptable].1
    }

    pub fn raw_classes(&self) -> &[(CanonicalClass, f64)] {
        &self.raw
    }

    pub fn canonical_classes(&self) -> &[(CanonicalClass, f64)] {
        &self.canonical
    }

    /// Raw counts for `k` draws.
    pub fn raw_counts(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let probs: Vec<f64> = self.raw.iter().map(|r| r.1).collect();
        multinomial(&probs, k, rng)
    }

    pub fn canonical_counts(&self, raw_counts: &[usize]) -> Vec<usize> {
        let mut out = vec![0; self.canonical.len()];
        for (i, c) in raw_counts.iter().enumerate() {
            out[self.canonical_of[i]] += c;
        }
        out
    }

    /// Whether the raw and the canonical mode are acceptable.
    pub fn mode_correct(&self, raw_counts: &[usize], tie_seed: u64) -> (bool, bool) {
        let raw_mode = mode_with_tags(raw_counts, &self.raw_tags, &self.raw, tie_seed);
        let can = self.canonical_counts(raw_counts);
        let can_mode = mode_with_tags(&can, &self.canonical_tags, &self.canonical, tie_seed);
        (self.canonical_of[raw_mode] == self.acceptable, can_mode == self.acceptable)
    }
}

/// Maps `class#variant` to `class`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FragmentCanonicalizer;

impl Canonicalizer for FragmentCanonicalizer {
    fn name(&self) -> &str {
        "fragment"
    }

    fn canonicalize(&self, text: &str) -> CanonicalClass {
        let base = text.split('#').next().unwrap_or("").trim();
        if base.is_empty() {
            CanonicalClass::invalid()
        } else {
            CanonicalClass::new(ClassKind::Verbatim, base)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonPoint {
    pub k: usize,
    pub raw_error: f64,
    pub canonical_error: f64,
    pub raw_sigma: f64,
    pub canonical_sigma: f64,
    /// Standard error of the paired difference `raw - canonical`.
    pub diff_sigma: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonSeries {
    pub acceptable_mass: f64,
    pub trials: usize,
    pub points: Vec<CanonPoint>,
}

impl Tabular for CanonSeries {
    fn to_csv(&self) -> String {
        let mut out = String::from("k,raw_error,canonical_error,raw_sigma,canonical_sigma,diff_sigma,bound\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.k,
                p.raw_error,
                p.canonical_error,
                p.raw_sigma,
                p.canonical_sigma,
                p.diff_sigma,
                opt(p.bound)
            );
        }
        out
    }
}

/// Paired raw versus canonical mode error on the same draws.
pub fn canonicalization_amplification(
    agent: &FragmentedAgent,
    ks: &[usize],
    trials: usize,
    seed_value: u64,
    exec: Execution,
) -> CanonSeries {
    let points = ks
        .iter()
        .map(|&k| {
            let pairs = super::monte_carlo(exec, seed::derive(seed_value, Stream::Trial, k as u64), trials, |rng, _| {
                let counts = agent.raw_counts(k, rng);
                agent.mode_correct(&counts, rng.random())
            });
            let raw: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(!p.0))).collect();
            let can: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(!p.1))).collect();
            let diff: Vec<f64> = raw.iter().zip(&can).map(|(r, c)| r - c).collect();
            CanonPoint {
                k,
                raw_error: stats::mean(&raw),
                canonical_error: stats::mean(&can),
                raw_sigma: stats::std_error(&raw),
                canonical_sigma: stats::std_error(&can),
                diff_sigma: stats::std_error(&diff),
                bound: hoeffding_bound(k, agent.acceptable_mass()),
            }
        })
        .collect();
    CanonSeries {
        acceptable_mass: agent.acceptable_mass(),
        trials,
        points,
    }
}

// ------------------------------------------------------------ bias-variance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarConfig {
    pub easy_p: f64,
    pub easy_wrong: Vec<f64>,
    pub hard_p: f64,
    pub hard_wrong: Vec<f64>,
    /// Probability that an item is hard.
    pub hard_fraction: f64,
    pub k: usize,
    pub alpha: f64,
    pub n_cal: usize,
    pub n_test: usize,
    /// Calibration/test replications for the conformal rows.
    pub reps: usize,
    /// Trials per item type for the point-estimate rows.
    pub point_trials: usize,
    pub judge: SimulatedJudge,
    pub seed: u64,
}

impl Default for BiasVarConfig {
    fn default() -> Self {
        BiasVarConfig {
            easy_p: 0.75,
            easy_wrong: vec![1.0, 1.0, 1.0],
            hard_p: 0.35,
            hard_wrong: vec![1.0],
            hard_fraction: 0.5,
            k: 20,
            alpha: 0.1,
            n_cal: 200,
            n_test: 500,
            reps: 200,
            point_trials: 100_000,
            judge: SimulatedJudge {
                bias: 0.05,
                noise_sd: 0.1,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub method: String,
    pub bias_sq: f64,
    pub variance: f64,
    pub mse: f64,
    pub mse_sigma: f64,
    /// Conformal rows: mean coverage and its target.
    pub coverage: Option<f64>,
    pub target: Option<f64>,
    /// Judge row: bias² predicted by the closed-form clamped-normal mean.
    pub analytic_bias_sq: Option<f64>,
}

impl DecompositionRow {
    pub fn is_conformal(&self) -> bool {
        self.coverage.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarTable {
    pub config: BiasVarConfig,
    pub rows: Vec<DecompositionRow>,
    /// Smallest non-conformal MSE over largest conformal MSE.
    pub mse_ratio: f64,
}

impl BiasVarTable {
    pub fn row(&self, method: &str) -> Option<&DecompositionRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

impl Tabular for BiasVarTable {
    fn to_csv(&self) -> String {
        let mut out = String::from("method,bias_sq,variance,mse,mse_sigma,coverage,target\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.bias_sq,
                r.variance,
                r.mse,
                r.mse_sigma,
                opt(r.coverage),
                opt(r.target)
            );
        }
        out
    }
}

/// Bias², variance and MSE of `xs` as estimates of `truth`; variance has
/// divisor n so the three add up exactly.
fn decompose(xs: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let m = stats::mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - truth).powi(2)).collect();
    ((m - truth).powi(2), stats::population_variance(xs), stats::mean(&sq), stats::std_error(&sq))
}

/// Six evaluators on the easy/hard mixture: single sample, judge and mode
/// estimate each item's p★; the three conformal scores estimate 1 − alpha
/// through their test coverage.
pub fn bias_variance_table(config: &BiasVarConfig, exec: Execution) -> Result<BiasVarTable> {
    let easy = SyntheticAgent::with_accuracy(config.easy_p, &config.easy_wrong)?;
    let hard = SyntheticAgent::with_accuracy(config.hard_p, &config.hard_wrong)?;
    let weights = [1.0 - config.hard_fraction, config.hard_fraction];
    let mut acc = [[0.0f64; 4]; 3];
    let mut judge_bias_sq = 0.0;
    for (t, agent) in [&easy, &hard].into_iter().enumerate() {
        let p = agent.p_star();
        let draws = super::monte_carlo(
            exec,
            seed::derive(config.seed, Stream::Judge, t as u64),
            config.point_trials,
            |rng, _| {
                let accept = rng.random::<f64>() < p;
                let judged = config.judge.judge(accept, rng);
                let counts = agent.counts_bulk(config.k, rng);
                let mode = agent.mode_index(&counts, rng.random()) == agent.acceptable_index();
                [f64::from(u8::from(accept)), judged, f64::from(u8::from(mode))]
            },
        );
        for m in 0..3 {
            let xs: Vec<f64> = draws.iter().map(|d| d[m]).collect();
            let (b, v, e, s) = decompose(&xs, p);
            let w = weights[t];
            acc[m][0] += w * b;
            acc[m][1] += w * v;
            acc[m][2] += w * e;
            acc[m][3] += w * w * s * s;
        }
        judge_bias_sq += weights[t] * config.judge.analytic_bias(p).powi(2);
    }
    let mut rows: Vec<DecompositionRow> = ["single-sample", "judge", "mode"]
        .iter()
        .zip(acc)
        .map(|(name, a)| DecompositionRow {
            method: (*name).to_string(),
            bias_sq: a[0],
            variance: a[1],
            mse: a[2],
            mse_sigma: a[3].sqrt(),
            coverage: None,
            target: None,
            analytic_bias_sq: (*name == "judge").then_some(judge_bias_sq),
        })
        .collect();

    let agent_for = |d: ItemDraw<'_>| -> Result<SyntheticAgent> {
        Ok(if d.uniform(0) < config.hard_fraction { hard.clone() } else { easy.clone() })
    };
    let target = 1.0 - config.alpha;
    for (i, kind) in [ScoreKind::Rank, ScoreKind::Lac, ScoreKind::Aps].into_iter().enumerate() {
        let covs: Vec<Result<f64>> = exec::map_indexed(exec, config.reps, |r| {
            let run_seed = seed::derive(seed::derive(config.seed, Stream::Split, i as u64), Stream::Trial, r as u64);
            let cal = draw_population("cal", config.n_cal, config.k, run_seed, Sampling::Bulk, agent_for)?;
            let test = draw_population("test", config.n_test, config.k, run_seed, Sampling::Bulk, agent_for)?;
            Ok(calibrate::split_coverage(kind, &cal, &test, config.alpha)?.coverage)
        });
        let covs: Vec<f64> = covs.into_iter().collect::<Result<_>>()?;
        let (b, v, e, s) = decompose(&covs, target);
        rows.push(DecompositionRow {
            method: format!("conformal-{kind}"),
            bias_sq: b,
            variance: v,
            mse: e,
            mse_sigma: s,
            coverage: Some(stats::mean(&covs)),
            target: Some(target),
            analytic_bias_sq: None,
        });
    }
    let best_point = rows.iter().filter(|r| !r.is_conformal()).map(|r| r.mse).fold(f64::INFINITY, f64::min);
    let worst_conformal = rows.iter().filter(|r| r.is_conformal()).map(|r| r.mse).fold(0.0, f64::max);
    Ok(BiasVarTable {
        config: config.clone(),
        mse_ratio: best_point / worst_conformal,
        rows,
    })
}

/// Population variance of the single-sample indicator at acceptable
/// probability `p`, with a batch-means standard error.
pub fn single_sample_variance(p: f64, trials: usize, seed_value: u64, exec: Execution) -> (f64, f64) {
    let xs: Vec<f64> = super::monte_carlo(exec, seed_value, trials, |rng, _| f64::from(u8::from(rng.random::<f64>() < p)));
    let batches = 20;
    let size = trials / batches;
    let per: Vec<f64> = (0..batches).map(|b| stats::population_variance(&xs[b * size..(b + 1) * size])).collect();
    (stats::population_variance(&xs), stats::std_error(&per))
}

// ---------------------------------------------------------------- set size

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeConfig {
    pub grid: Vec<f64>,
    pub n_cal: usize,
    pub alpha: f64,
    pub k: usize,
    pub runs: usize,
    pub wrong_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SetSizeConfig {
    fn default() -> Self {
        SetSizeConfig {
            grid: (0..15).map(|i| (30 + 5 * i) as f64 / 100.0).collect(),
            n_cal: 200,
            alpha: 0.1,
            k: 10,
            runs: 100,
            wrong_weights: vec![1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeRun {
    pub m_star: Vec<ScoreValue>,
    /// Fraction of calibration items whose acceptable class never appeared.
    pub beta: Vec<f64>,
    pub non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizePoint {
    pub p_star: f64,
    pub mean_finite_m_star: f64,
    pub infinite_fraction: f64,
    pub mean_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeResult {
    pub config: SetSizeConfig,
    pub curve: Vec<SetSizePoint>,
    pub runs: Vec<SetSizeRun>,
    pub non_increasing_fraction: f64,
    /// Runs and grid points where beta > alpha + 1/(n+1) but the threshold
    /// was finite.
    pub infinite_rule_violations: usize,
}

impl Tabular for SetSizeResult {
    fn to_csv(&self) -> String {
        let mut out = String::from("p_star,mean_finite_m_star,infinite_fraction,mean_beta\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{},{}", p.p_star, p.mean_finite_m_star, p.infinite_fraction, p.mean_beta);
        }
        out
    }
}

/// Population for quality level `q`: an item is unsolvable with probability
/// `(1 - q) / 2`, otherwise its acceptable probability is `q`.
pub fn quality_population(q: f64, wrong_weights: &[f64], d: ItemDraw<'_>) -> Result<SyntheticAgent> {
    let p = if d.uniform(0) < (1.0 - q) / 2.0 { 0.0 } else { q };
    SyntheticAgent::with_accuracy(p, wrong_weights)
}

/// Certified rank threshold across agent quality levels. Draws are coupled
/// across the grid, so within a run a better agent never scores worse.
pub fn setsize_vs_quality(config: &SetSizeConfig, exec: Execution) -> Result<SetSizeResult> {
    let runs: Vec<Result<SetSizeRun>> = exec::map_indexed(exec, config.runs, |r| {
        let run_seed = seed::derive(config.seed, Stream::Trial, r as u64);
        let mut m_star = Vec::new();
        let mut beta = Vec::new();
        for &q in &config.grid {
            let items = draw_population("cal", config.n_cal, config.k, run_seed, Sampling::Coupled, |d| {
                quality_population(q, &config.wrong_weights, d)
            })?;
            let scores: Vec<ScoreValue> = items.iter().map(|i| i.rank().into()).collect();
            beta.push(scores.iter().filter(|s| s.is_infinite()).count() as f64 / scores.len() as f64);
            m_star.push(conformal_threshold_values(&scores, config.alpha)?.m_star);
        }
        let non_increasing = m_star.windows(2).all(|w| w[1] <= w[0]);
        Ok(SetSizeRun {
            m_star,
            beta,
            non_increasing,
        })
    });
    let runs: Vec<SetSizeRun> = runs.into_iter().collect::<Result<_>>()?;
    let limit = config.alpha + 1.0 / (config.n_cal as f64 + 1.0);
    let violations = runs
        .iter()
        .flat_map(|r| r.beta.iter().zip(&r.m_star))
        .filter(|(b, m)| **b > limit && !m.is_infinite())
        .count();
    let curve = config
        .grid
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let finite: Vec<f64> = runs.iter().filter_map(|r| r.m_star[j].as_finite()).collect();
            let betas: Vec<f64> = runs.iter().map(|r| r.beta[j]).collect();
            SetSizePoint {
                p_star: q,
                mean_finite_m_star: stats::mean(&finite),
                infinite_fraction: (runs.len() - finite.len()) as f64 / runs.len() as f64,
                mean_beta: stats::mean(&betas),
            }
        })
        .collect();
    Ok(SetSizeResult {
        config: config.clone(),
        curve,
        non_increasing_fraction: runs.iter().filter(|r| r.non_increasing).count() as f64 / runs.len() as f64,
        infinite_rule_violations: violations,
        runs,
    })
}

// ----------------------------------------------------------------- entropy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub n_cal: usize,
    pub n_test: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            n_cal: 200,
            n_test: 500,
            k: 10,
            alpha: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub entropy: f64,
    pub set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyResult {
    pub config: EntropyConfig,
    pub threshold: ScoreValue,
    /// `None` when entropy or set size is constant.
    pub correlation: Option<f64>,
    pub points: Vec<EntropyPoint>,
}

impl Tabular for EntropyResult {
    fn to_csv(&self) -> String {
        let mut out = String::from("entropy,set_size\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.entropy, p.set_size);
        }
        out
    }
}

/// Items with acceptable probability uniform on [0.3, 1] and one to four
/// equally likely wrong classes.
pub fn heterogeneous_population(d: ItemDraw<'_>) -> Result<SyntheticAgent> {
    let p = 0.3 + 0.7 * d.uniform(0);
    let wrong = 1 + (d.uniform(1) * 4.0) as usize;
    SyntheticAgent::with_accuracy(p, &vec![1.0; wrong.min(4)])
}

/// Pearson correlation between consensus entropy and adaptive set size on
/// test items, with the cumulative-probability threshold calibrated on a
/// disjoint set.
pub fn entropy_setsize_correlation<F>(config: &EntropyConfig, agent_for: F) -> Result<EntropyResult>
where
    F: Fn(ItemDraw<'_>) -> Result<SyntheticAgent>,
{
    let cal = draw_population("cal", config.n_cal, config.k, config.seed, Sampling::Bulk, &agent_for)?;
    let test = draw_population("test", config.n_test, config.k, config.seed, Sampling::Bulk, &agent_for)?;
    let scores: Vec<ScoreValue> = cal.iter().map(|c| c.score(ScoreKind::Cumprob).map(|s| s.value)).collect::<Result<_>>()?;
    let q = conformal_threshold_values(&scores, config.alpha)?.m_star;
    let points: Vec<EntropyPoint> = test
        .iter()
        .map(|t| EntropyPoint {
            entropy: t.consensus.entropy(),
            set_size: prediction_set_adaptive(&t.consensus, q).len(),
        })
        .collect();
    let h: Vec<f64> = points.iter().map(|p| p.entropy).collect();
    let s: Vec<f64> = points.iter().map(|p| p.set_size as f64).collect();
    Ok(EntropyResult {
        config: config.clone(),
        threshold: q,
        correlation: stats::pearson(&h, &s),
        points,
    })
}

// -------------------------------------------------------------- sequential

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialConfig {
    /// `(weight, probabilities)` per agent type; the first probability is
    /// the acceptable class.
    pub mixture: Vec<(f64, Vec<f64>)>,
    pub stopping: StoppingConfig,
    pub items: usize,
    pub alphas: Vec<f64>,
    pub n_cal: usize,
    pub n_test: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for SequentialConfig {
    fn default() -> Self {
        SequentialConfig {
            mixture: vec![(1.0, vec![0.9, 0.1])],
            stopping: StoppingConfig::default(),
            items: 10_000,
            alphas: ALPHA_GRID.to_vec(),
            n_cal: 200,
            n_test: 500,
            reps: 200,
            seed: 0,
        }
    }
}

impl SequentialConfig {
    fn agents(&self) -> Result<Vec<(f64, SyntheticAgent)>> {
        if self.mixture.is_empty() {
            return Err(Error::input("sequential mixture is empty"));
        }
        let total: f64 = self.mixture.iter().map(|m| m.0).sum();
        self.mixture
            .iter()
            .map(|(w, probs)| {
                let Some((&p, wrong)) = probs.split_first() else {
                    return Err(Error::input("agent with no classes"));
                };
                Ok((w / total, SyntheticAgent::with_accuracy(p, wrong)?))
            })
            .collect()
    }
}

fn pick<'a>(agents: &'a [(f64, SyntheticAgent)], u: f64) -> &'a SyntheticAgent {
    let mut acc = 0.0;
    for (w, a) in agents {
        acc += w;
        if u < acc {
            return a;
        }
    }
    &agents[agents.len() - 1].1
}

/// Stop one item's sampling early and package the stopped consensus.
fn stopped_item(
    agent: &SyntheticAgent,
    item_id: &str,
    run_seed: u64,
    config: &StoppingConfig,
) -> Result<(LabeledConsensus, StoppingTrace)> {
    let item_seed = seed::item_seed(run_seed, item_id);
    let tie_seed = seed::derive(item_seed, Stream::TieBreak, 0);
    let (cons, trace) = sequential::run_sequential(
        sample_stream(agent, item_id, item_seed),
        &VerbatimCanonicalizer,
        config,
        tie_seed,
    )?;
    Ok((LabeledConsensus::new(cons, agent.spec(item_id), run_seed), trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialResult {
    pub config: SequentialConfig,
    /// Items whose stopped mode is the class with the highest probability.
    pub true_mode_fraction: f64,
    pub true_mode_sigma: f64,
    pub savings: SavingsReport,
    /// Rank-score coverage when calibrating and testing on stopped consensuses.
    pub stopped_coverage: Vec<CoverageCell>,
    /// The same with every item sampled to `k_max`.
    pub fixed_coverage: Vec<CoverageCell>,
}

impl Tabular for SequentialResult {
    fn to_csv(&self) -> String {
        let mut out = String::from("alpha,target,stopped_coverage,stopped_se,fixed_coverage,fixed_se\n");
        for (s, f) in self.stopped_coverage.iter().zip(&self.fixed_coverage) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.alpha, s.target, s.mean_coverage, s.coverage_se, f.mean_coverage, f.coverage_se
            );
        }
        out
    }
}

/// Sequential stopping over a synthetic population: mode certification,
/// sample savings, and coverage of stopped versus fixed-K calibration.
pub fn sequential_experiment(config: &SequentialConfig, exec: Execution) -> Result<(SequentialResult, Vec<StoppingTrace>)> {
    config.stopping.validate()?;
    let agents = config.agents()?;
    let ids: Vec<String> = (0..config.items).map(|i| format!("item-{i}")).collect();
    let outcomes: Vec<Result<(bool, StoppingTrace)>> = exec::map_slice(exec, &ids, |id| {
        let agent = pick(&agents, ItemDraw { run_seed: config.seed, item_id: id }.uniform(0));
        let (item, trace) = stopped_item(agent, id, config.seed, &config.stopping)?;
        let best = agent
            .classes()
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|c| &c.0)
            .expect("agent has classes");
        Ok((item.consensus.mode() == best, trace))
    });
    let outcomes: Vec<(bool, StoppingTrace)> = outcomes.into_iter().collect::<Result<_>>()?;
    let hits = outcomes.iter().filter(|o| o.0).count() as f64 / outcomes.len().max(1) as f64;
    let traces: Vec<StoppingTrace> = outcomes.into_iter().map(|o| o.1).collect();
    let savings = sequential::savings_report(&traces, config.stopping.k_max)?;

    let population = |run_seed: u64, prefix: &str, n: usize, stop: bool| -> Result<Vec<LabeledConsensus>> {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}-{i}");
                let agent = pick(&agents, ItemDraw { run_seed, item_id: &id }.uniform(0));
                if stop {
                    Ok(stopped_item(agent, &id, run_seed, &config.stopping)?.0)
                } else {
                    super::labeled_item(agent, &id, config.stopping.k_max, run_seed, Sampling::Coupled)
                }
            })
            .collect()
    };
    let mean_p: f64 = agents.iter().map(|(w, a)| w * a.p_star()).sum();
    let coverage = |stop: bool| {
        replicate_coverage(
            mean_p,
            &config.alphas,
            config.reps,
            config.n_cal,
            ScoreKind::Rank,
            seed::derive(config.seed, Stream::Split, 0),
            exec,
            |run_seed| Ok((population(run_seed, "cal", config.n_cal, stop)?, population(run_seed, "test", config.n_test, stop)?)),
        )
    };
    let result = SequentialResult {
        config: config.clone(),
        true_mode_fraction: hits,
        true_mode_sigma: stats::binomial_sigma(hits, config.items),
        savings,
        stopped_coverage: if config.reps > 0 { coverage(true)? } else { Vec::new() },
        fixed_coverage: if config.reps > 0 { coverage(false)? } else { Vec::new() },
    };
    Ok((result, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::aggregate;
    use crate::consensus::RawSample;

    fn binom_pmf(n: usize, k: usize, p: f64) -> f64 {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    }

    /// Exact mode error of a two-class agent: lose outright below n/2, lose a
    /// coin flip at exactly n/2.
    fn two_class_error(n: usize, p: f64) -> f64 {
        (0..=n)
            .map(|c| {
                let pm = binom_pmf(n, c, p);
                if 2 * c < n {
                    pm
                } else if 2 * c == n {
                    0.5 * pm
                } else {
                    0.0
                }
            })
            .sum()
    }

    #[test]
    fn mode_error_matches_exact_binomial() {
        let agent = SyntheticAgent::with_accuracy(0.6, &[1.0]).unwrap();
        let s = mode_error_sweep(&agent, &[1, 2, 5, 10], 40_000, 3, Execution::Parallel);
        for p in &s.points {
            let exact = two_class_error(p.k, 0.6);
            assert!((p.error - exact).abs() <= 4.0 * p.sigma + 1e-9, "k={} {} vs {}", p.k, p.error, exact);
        }
    }

    #[test]
    fn perfect_agent_never_errs() {
        let s = mode_error_sweep(&SyntheticAgent::deterministic(), &[1, 3, 8], 2000, 1, Execution::Sequential);
        assert!(s.points.iter().all(|p| p.error == 0.0));
    }

    #[test]
    fn even_split_is_a_coin_flip() {
        let agent = SyntheticAgent::with_accuracy(0.5, &[1.0]).unwrap();
        let s = mode_bias_regimes(&agent, &[1, 10, 11], 40_000, 2, Execution::Parallel);
        for p in &s.points {
            assert!((p.mode_correct_rate - 0.5).abs() <= 4.0 * p.sigma, "{p:?}");
        }
    }

    #[test]
    fn identity_canonicalization_changes_nothing() {
        let agent = SyntheticAgent::with_accuracy(0.55, &[2.0, 1.0]).unwrap();
        let s = canonicalization_amplification(&FragmentedAgent::identity(&agent), &[1, 4, 9], 5000, 0, Execution::Parallel);
        for p in &s.points {
            assert_eq!(p.raw_error, p.canonical_error);
        }
    }

    #[test]
    fn canonical_mass_dominates_each_variant() {
        let agent = FragmentedAgent::split(6, 0.10, &[0.40]).unwrap();
        let mut rng = seed::rng(7);
        for k in [1, 5, 20] {
            for _ in 0..500 {
                let raw = agent.raw_counts(k, &mut rng);
                let can = agent.canonical_counts(&raw);
                assert!(can[0] >= *raw[..6].iter().max().unwrap());
                assert_eq!(can.iter().sum::<usize>(), k);
            }
        }
    }

    #[test]
    fn fragment_pipeline_matches_counts() {
        let agent = FragmentedAgent::split(3, 0.2, &[0.4]).unwrap();
        let mut rng = seed::rng(3);
        for t in 0..100u64 {
            let raw = agent.raw_counts(9, &mut rng);
            let mut samples = Vec::new();
            for (i, c) in raw.iter().enumerate() {
                for _ in 0..*c {
                    let n = samples.len() as u32;
                    samples.push(RawSample::new("q", n, agent.raw_classes()[i].0.key.clone()));
                }
            }
            let cons = aggregate(&samples, &FragmentCanonicalizer, t).unwrap();
            let (_, can_ok) = agent.mode_correct(&raw, t);
            assert_eq!(can_ok, cons.mode().key == "ok");
        }
    }

    #[test]
    fn entropy_two_populations() {
        let cfg = EntropyConfig {
            n_cal: 100,
            n_test: 200,
            ..EntropyConfig::default()
        };
        let res = entropy_setsize_correlation(&cfg, |d| {
            if d.uniform(0) < 0.5 {
                Ok(SyntheticAgent::deterministic())
            } else {
                SyntheticAgent::with_accuracy(0.5, &[1.0])
            }
        })
        .unwrap();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for p in &res.points {
            if p.entropy == 0.0 {
                lo.push(p.set_size);
            } else {
                hi.push(p.set_size);
            }
        }
        assert!(!lo.is_empty() && !hi.is_empty());
        assert!(lo.iter().max() < hi.iter().min(), "{lo:?} {hi:?}");
    }

    #[test]
    fn entropy_degenerate_population() {
        let cfg = EntropyConfig {
            n_cal: 20,
            n_test: 30,
            ..EntropyConfig::default()
        };
        let res = entropy_setsize_correlation(&cfg, |_| Ok(SyntheticAgent::deterministic())).unwrap();
        assert!(res.correlation.is_none());
        assert!(res.points.iter().all(|p| p.set_size == 1 && p.entropy == 0.0));
    }

    #[test]
    fn csv_headers_and_rows() {
        let agent = SyntheticAgent::with_accuracy(0.7, &[1.0]).unwrap();
        let s = mode_error_sweep(&agent, &[1, 2], 100, 0, Execution::Sequential);
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("p_star,k,error,sigma,bound\n"));
    }
}
