//! Synthetic agents with known answer distributions, a simulated judge, and
//! the validation experiments built on them.
//!
//! Sample texts are class keys, so a canonicalizer of the matching kind maps
//! them back to the agent's classes (verbatim for the default agents).

mod experiments;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::calibrate::LabeledConsensus;
use crate::consensus::{self, AcceptabilitySpec, CanonicalClass, ClassKind, RankedConsensus, RawSample};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::seed::{self, Stream};

pub use experiments::*;

/// Tolerance on the total probability of an agent.
pub const PROB_TOL: f64 = 1e-12;

/// Key of the acceptable class in agents built by [`SyntheticAgent::with_accuracy`].
pub const ACCEPTABLE_KEY: &str = "ok";

/// A multinomial answer distribution with one acceptable class.
///
/// Draws are coupled: one uniform decides acceptable versus not, a second
/// picks among the wrong classes. Two agents that differ only in the
/// acceptable probability therefore produce nested acceptable draws under
/// the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAgent {
    classes: Vec<(CanonicalClass, f64)>,
    acceptable_index: usize,
    /// Cumulative distribution over wrong classes, in class order, skipping
    /// the acceptable one.
    wrong_cdf: Vec<(usize, f64)>,
    tags: Vec<u64>,
}

impl SyntheticAgent {
    /// Probabilities must be finite, nonnegative and sum to one. Only the
    /// acceptable class may have probability zero.
    pub fn new(classes: Vec<(CanonicalClass, f64)>, acceptable_index: usize) -> Result<Self> {
        if acceptable_index >= classes.len() {
            return Err(Error::input(format!(
                "acceptable index {acceptable_index} out of range for {} classes",
                classes.len()
            )));
        }
        for (i, (c, p)) in classes.iter().enumerate() {
            let ok = p.is_finite() && (*p > 0.0 || (i == acceptable_index && *p == 0.0));
            if !ok {
                return Err(Error::input(format!("class {c} has invalid probability {p}")));
            }
        }
        let total: f64 = classes.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::input(format!("class probabilities sum to {total}, not 1")));
        }
        for i in 0..classes.len() {
            if classes[..i].iter().any(|(c, _)| *c == classes[i].0) {
                return Err(Error::input(format!("duplicate class {}", classes[i].0)));
            }
        }
        let wrong_total = 1.0 - classes[acceptable_index].1;
        let mut wrong_cdf = Vec::new();
        let mut acc = 0.0;
        for (i, (_, p)) in classes.iter().enumerate() {
            if i != acceptable_index {
                acc += p / wrong_total;
                wrong_cdf.push((i, acc));
            }
        }
        if let Some(last) = wrong_cdf.last_mut() {
            last.1 = 1.0;
        }
        let tags = classes.iter().map(|(c, _)| consensus::class_tag(c)).collect();
        Ok(SyntheticAgent {
            classes,
            acceptable_index,
            wrong_cdf,
            tags,
        })
    }

    /// Acceptable class `ok` with probability `p_star`; wrong classes
    /// `w1, w2, ...` share `1 - p_star` in proportion to `wrong_weights`.
    pub fn with_accuracy(p_star: f64, wrong_weights: &[f64]) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_star) {
            return Err(Error::input(format!("p_star must lie in [0, 1], got {p_star}")));
        }
        let mut classes = vec![(CanonicalClass::new(ClassKind::Verbatim, ACCEPTABLE_KEY), p_star)];
        if p_star < 1.0 {
            let total: f64 = wrong_weights.iter().sum();
            if wrong_weights.is_empty() || wrong_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::input("wrong-class weights must be non-empty and positive"));
            }
            let mut assigned = 0.0;
            for (i, w) in wrong_weights.iter().enumerate() {
                let p = if i + 1 == wrong_weights.len() {
                    1.0 - p_star - assigned
                } else {
                    (1.0 - p_star) * w / total
                };
                assigned += p;
                classes.push((CanonicalClass::new(ClassKind::Verbatim, format!("w{}", i + 1)), p));
            }
        }
        SyntheticAgent::new(classes, 0)
    }

    /// An agent that always answers `ok`.
    pub fn deterministic() -> Self {
        SyntheticAgent::with_accuracy(1.0, &[]).expect("valid agent")
    }

    pub fn classes(&self) -> &[(CanonicalClass, f64)] {
        &self.classes
    }

    pub fn acceptable_index(&self) -> usize {
        self.acceptable_index
    }

    pub fn acceptable_class(&self) -> &CanonicalClass {
        &self.classes[self.acceptable_index].0
    }

    pub fn p_star(&self) -> f64 {
        self.classes[self.acceptable_index].1
    }

    pub fn spec(&self, item_id: &str) -> AcceptabilitySpec {
        AcceptabilitySpec::single(item_id, self.acceptable_class().clone())
    }

    /// Index of the class produced by the uniform pair `(u, v)`.
    pub fn class_for(&self, u: f64, v: f64) -> usize {
        if u < self.p_star() || self.wrong_cdf.is_empty() {
            return self.acceptable_index;
        }
        self.wrong_cdf
            .iter()
            .find(|(_, c)| v < *c)
            .map_or(self.wrong_cdf[self.wrong_cdf.len() - 1].0, |(i, _)| *i)
    }

    /// Class index of sample `index` under `item_seed`.
    pub fn draw(&self, item_seed: u64, index: u64) -> usize {
        let s = seed::derive(item_seed, Stream::Sample, index);
        self.class_for(seed::unit_from_seed(s), seed::unit_from_seed(seed::derive(s, Stream::Sample, 1)))
    }

    /// Per-class counts of the first `k` coupled draws.
    pub fn counts_coupled(&self, k: usize, item_seed: u64) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for i in 0..k {
            counts[self.draw(item_seed, i as u64)] += 1;
        }
        counts
    }

    /// Per-class counts of `k` draws via conditional binomials; cost does not
    /// grow with `k`.
    pub fn counts_bulk(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let probs: Vec<f64> = self.classes.iter().map(|(_, p)| *p).collect();
        multinomial(&probs, k, rng)
    }

    /// Class index of the consensus mode for `counts`, with the same
    /// tie-breaking as [`RankedConsensus`].
    pub fn mode_index(&self, counts: &[usize], tie_seed: u64) -> usize {
        mode_with_tags(counts, &self.tags, &self.classes, tie_seed)
    }

    pub fn consensus(&self, item_id: &str, counts: &[usize], tie_seed: u64) -> Result<RankedConsensus> {
        RankedConsensus::from_counts(
            item_id,
            self.classes.iter().zip(counts).map(|((c, _), n)| (c.clone(), *n)),
            tie_seed,
        )
    }
}

pub(crate) fn mode_with_tags(counts: &[usize], tags: &[u64], classes: &[(CanonicalClass, f64)], tie_seed: u64) -> usize {
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut best: Option<(u64, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c != top || c == 0 {
            continue;
        }
        let p = consensus::priority_from_tag(tie_seed, tags[i]);
        best = match best {
            Some((bp, bi)) if (bp, &classes[bi].0) <= (p, &classes[i].0) => Some((bp, bi)),
            _ => Some((p, i)),
        };
    }
    best.map_or(0, |(_, i)| i)
}

/// Multinomial counts by sequential conditional binomials.
pub fn multinomial(probs: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts = vec![0; probs.len()];
    let mut left = k as u64;
    let mut mass = 1.0;
    for (i, p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = left as usize;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let x = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        counts[i] = x as usize;
        left -= x;
        mass -= p;
    }
    counts
}

/// `k` coupled samples for `item_id`, as raw texts.
pub fn sample_agent(agent: &SyntheticAgent, item_id: &str, k: usize, item_seed: u64) -> Vec<RawSample> {
    sample_stream(agent, item_id, item_seed).take(k).collect()
}

/// Unbounded coupled sample stream; sample `i` depends only on the seed and `i`.
pub fn sample_stream<'a>(
    agent: &'a SyntheticAgent,
    item_id: &'a str,
    item_seed: u64,
) -> impl Iterator<Item = RawSample> + 'a {
    (0u64..).map(move |i| {
        let c = agent.draw(item_seed, i);
        RawSample::new(item_id, i as u32, agent.classes[c].0.key.clone())
    })
}

/// How per-item counts are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Per-sample coupled draws, O(K).
    Coupled,
    /// Conditional binomials, O(|classes|); for large K.
    #[default]
    Bulk,
}

/// Sample `k` answers for an item and package them with the item's
/// acceptability and APS randomizer.
pub fn labeled_item(
    agent: &SyntheticAgent,
    item_id: &str,
    k: usize,
    run_seed: u64,
    sampling: Sampling,
) -> Result<LabeledConsensus> {
    let item_seed = seed::item_seed(run_seed, item_id);
    let counts = match sampling {
        Sampling::Coupled => agent.counts_coupled(k, item_seed),
        Sampling::Bulk => agent.counts_bulk(k, &mut seed::rng(seed::derive(item_seed, Stream::Sample, u64::MAX))),
    };
    let tie_seed = seed::derive(item_seed, Stream::TieBreak, 0);
    let consensus = agent.consensus(item_id, &counts, tie_seed)?;
    Ok(LabeledConsensus::new(consensus, agent.spec(item_id), run_seed))
}

/// Per-item randomness for population-level choices (which agent an item
/// gets), independent of the sample stream.
#[derive(Debug, Clone, Copy)]
pub struct ItemDraw<'a> {
    pub run_seed: u64,
    pub item_id: &'a str,
}

impl ItemDraw<'_> {
    pub fn uniform(&self, index: u64) -> f64 {
        let s = seed::item_seed(self.run_seed, self.item_id);
        seed::unit_from_seed(seed::derive(s, Stream::Population, index))
    }
}

/// Build `n` labeled items named `{prefix}-{i}`.
pub fn draw_population<F>(
    prefix: &str,
    n: usize,
    k: usize,
    run_seed: u64,
    sampling: Sampling,
    agent_for: F,
) -> Result<Vec<LabeledConsensus>>
where
    F: Fn(ItemDraw<'_>) -> Result<SyntheticAgent>,
{
    (0..n)
        .map(|i| {
            let id = format!("{prefix}-{i}");
            let agent = agent_for(ItemDraw { run_seed, item_id: &id })?;
            labeled_item(&agent, &id, k, run_seed, sampling)
        })
        .collect()
}

/// LLM-as-judge stand-in: the true acceptability of one answer, shifted by
/// a fixed bias plus Gaussian noise, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedJudge {
    pub bias: f64,
    pub noise_sd: f64,
}

impl SimulatedJudge {
    pub fn new(bias: f64, noise_sd: f64) -> Result<Self> {
        if !bias.is_finite() || !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(Error::input(format!("invalid judge (bias {bias}, sd {noise_sd})")));
        }
        Ok(SimulatedJudge { bias, noise_sd })
    }

    pub fn judge(&self, acceptable: bool, rng: &mut ChaCha8Rng) -> f64 {
        let noise = if self.noise_sd > 0.0 {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            n * self.noise_sd
        } else {
            0.0
        };
        (f64::from(u8::from(acceptable)) + self.bias + noise).clamp(0.0, 1.0)
    }

    /// `E[clamp(a + bias + noise, 0, 1)]` in closed form.
    fn clamped_mean(&self, a: f64) -> f64 {
        let mu = a + self.bias;
        if self.noise_sd == 0.0 {
            return mu.clamp(0.0, 1.0);
        }
        let s = self.noise_sd;
        let n = Normal::standard();
        let (lo, hi) = ((0.0 - mu) / s, (1.0 - mu) / s);
        mu * (n.cdf(hi) - n.cdf(lo)) - s * (n.pdf(hi) - n.pdf(lo)) + (1.0 - n.cdf(hi))
    }

    /// Expected judge score for an agent with acceptable probability `p`.
    pub fn expected(&self, p: f64) -> f64 {
        p * self.clamped_mean(1.0) + (1.0 - p) * self.clamped_mean(0.0)
    }

    pub fn analytic_bias(&self, p: f64) -> f64 {
        self.expected(p) - p
    }
}

pub(crate) const TRIAL_BLOCK: usize = 1024;

/// Run `trials` independent trials. Trials are grouped into fixed blocks,
/// each with its own generator, so results do not depend on `exec`.
pub fn monte_carlo<T, F>(exec: Execution, seed_value: u64, trials: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync + Send,
{
    let blocks = trials.div_ceil(TRIAL_BLOCK);
    exec::map_indexed(exec, blocks, |b| {
        let mut rng = seed::rng(seed::derive(seed_value, Stream::Trial, b as u64));
        let end = ((b + 1) * TRIAL_BLOCK).min(trials);
        (b * TRIAL_BLOCK..end).map(|t| f(&mut rng, t)).collect::<Vec<T>>()
    })
    .into_iter()
    .flatten()
    .collect()
}
