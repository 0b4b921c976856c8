//! Certified early stopping: draw samples one at a time and stop once the
//! empirical margin between the two leading classes clears a Hoeffding
//! threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consensus::{CanonicalClass, Canonicalizer, RankedConsensus, RawSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub delta: f64,
    pub k0: usize,
    pub k_max: usize,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            delta: 0.05,
            k0: 3,
            k_max: 20,
        }
    }
}

impl StoppingConfig {
    pub fn new(delta: f64, k0: usize, k_max: usize) -> Result<Self> {
        let c = StoppingConfig { delta, k0, k_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::input(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.k0 < 2 {
            return Err(Error::input(format!("k0 must be at least 2, got {}", self.k0)));
        }
        if self.k_max < self.k0 {
            return Err(Error::input(format!(
                "k_max ({}) must be at least k0 ({})",
                self.k_max, self.k0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingTrace {
    pub item_id: String,
    pub stopped_at: usize,
    /// The margin rule fired; `false` means sampling ran to `k_max`.
    pub triggered: bool,
    /// Margin after each consumed sample, starting at k = 1.
    pub margins: Vec<f64>,
    /// Threshold after each consumed sample, with the class count at that step.
    pub thresholds: Vec<f64>,
}

/// `sqrt(2 ln(2 |C| k^2 / delta) / k)`.
pub fn stopping_threshold(k: usize, n_classes: usize, delta: f64) -> Result<f64> {
    if k == 0 || n_classes == 0 {
        return Err(Error::input(format!(
            "stopping threshold needs k >= 1 and at least one class, got k={k}, classes={n_classes}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::input(format!("delta must lie in (0, 1), got {delta}")));
    }
    let k = k as f64;
    Ok((2.0 * (2.0 * n_classes as f64 * k * k / delta).ln() / k).sqrt())
}

/// Gap between the two largest counts over `k`; the lone class's frequency
/// when only one class has been seen.
fn margin(counts: &BTreeMap<CanonicalClass, usize>, k: usize) -> f64 {
    let (mut first, mut second) = (0usize, 0usize);
    for &c in counts.values() {
        if c > first {
            second = first;
            first = c;
        } else if c > second {
            second = c;
        }
    }
    (first - second) as f64 / k as f64
}

/// Consume `stream` one sample at a time until the margin rule fires or
/// `k_max` samples are in. Acceptability never enters here.
pub fn run_sequential<I>(
    stream: I,
    canon: &dyn Canonicalizer,
    config: &StoppingConfig,
    tie_seed: u64,
) -> Result<(RankedConsensus, StoppingTrace)>
where
    I: IntoIterator<Item = RawSample>,
{
    config.validate()?;
    let mut stream = stream.into_iter();
    let mut counts: BTreeMap<CanonicalClass, usize> = BTreeMap::new();
    let mut item_id: Option<String> = None;
    let mut margins = Vec::new();
    let mut thresholds = Vec::new();
    let mut triggered = false;
    let mut k = 0;
    while k < config.k_max {
        let Some(sample) = stream.next() else {
            return Err(Error::input(format!(
                "sample stream for {} ended after {k} samples (need {})",
                item_id.as_deref().unwrap_or("<unknown>"),
                if k < config.k0 { config.k0 } else { config.k_max }
            )));
        };
        match &item_id {
            None => item_id = Some(sample.item_id.clone()),
            Some(id) if *id != sample.item_id => {
                return Err(Error::input(format!(
                    "sample stream mixes items {id} and {}",
                    sample.item_id
                )))
            }
            Some(_) => {}
        }
        *counts.entry(canon.canonicalize(&sample.text)).or_insert(0) += 1;
        k += 1;
        let m = margin(&counts, k);
        let t = stopping_threshold(k, counts.len(), config.delta)?;
        margins.push(m);
        thresholds.push(t);
        if k >= config.k0 && m > t {
            triggered = true;
            break;
        }
    }
    let item_id = item_id.expect("k_max >= k0 >= 2 samples were consumed");
    let consensus = RankedConsensus::from_counts(item_id.clone(), counts, tie_seed)?;
    Ok((
        consensus,
        StoppingTrace {
            item_id,
            stopped_at: k,
            triggered,
            margins,
            thresholds,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub items: usize,
    pub avg_k: f64,
    pub savings_fraction: f64,
    pub triggered_fraction: f64,
}

pub fn savings_report(traces: &[StoppingTrace], k_max: usize) -> Result<SavingsReport> {
    if traces.is_empty() {
        return Err(Error::input("savings report needs at least one trace"));
    }
    if k_max == 0 {
        return Err(Error::input("k_max must be positive"));
    }
    let n = traces.len() as f64;
    let avg_k = traces.iter().map(|t| t.stopped_at as f64).sum::<f64>() / n;
    Ok(SavingsReport {
        items: traces.len(),
        avg_k,
        savings_fraction: 1.0 - avg_k / k_max as f64,
        triggered_fraction: traces.iter().filter(|t| t.triggered).count() as f64 / n,
    })
}

/// One JSON object per line.
pub fn traces_to_jsonl(traces: &[StoppingTrace]) -> Result<String> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}
