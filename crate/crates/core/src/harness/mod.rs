//! End-to-end pipeline: dataset → samples (cached) → consensus → calibration
//! → certificate and coverage report on disk.

pub mod backend;
pub mod cache;
pub mod dataset;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use backend::{Backend, BackendConfig, BackendKind, HttpBackend, RetryPolicy, SyntheticBackend};
pub use cache::{CacheEntry, CacheRequest, ResponseCache};
pub use dataset::{load_dataset, parse_dataset, write_dataset, DatasetItem};

use crate::calibrate::{
    evaluate, evaluate_certificate, Calibration, CalibrationRecord, Certificate, CertificateMetadata,
    CoverageReport, LabeledConsensus, ReliabilityLevel, ALPHA_GRID,
};
use crate::consensus::{aggregate, CanonicalizerKind, Rank, RawSample};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::scores::{ScoreKind, ScoreValue};
use crate::seed::{self, Stream};
use crate::sequential::{run_sequential, savings_report, SavingsReport, StoppingConfig, StoppingTrace};
use crate::stats;

pub const TOOL_NAME: &str = "rankcert";

/// Write via a temporary sibling file and rename, so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// One sample, served from the cache when possible.
pub fn fetch_one(
    item: &DatasetItem,
    index: u32,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
) -> Result<RawSample> {
    let cache = cache.filter(|_| backend.cacheable());
    let req = CacheRequest {
        backend_id: backend.id(),
        model_id: backend.model(),
        query: &item.query,
        sample_index: index,
        temperature: backend.temperature(),
    };
    if let Some(c) = cache {
        if let Some(text) = c.get(&req)? {
            return Ok(RawSample::new(item.id.clone(), index, text));
        }
    }
    let text = backend.sample(item, index)?;
    if let Some(c) = cache {
        c.put(&req, &text)?;
    }
    Ok(RawSample::new(item.id.clone(), index, text))
}

/// Samples `0..k` in index order. Any sample failure fails the whole item.
pub fn fetch_samples(
    item: &DatasetItem,
    k: usize,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    exec: Execution,
) -> Result<Vec<RawSample>> {
    if k == 0 {
        return Err(Error::input("K must be at least 1"));
    }
    let indices: Vec<u32> = (0..k as u32).collect();
    map_slice(exec, &indices, |&i| fetch_one(item, i, backend, cache)).into_iter().collect()
}

fn tie_seed(run_seed: u64, item_id: &str) -> u64 {
    seed::derive(seed::item_seed(run_seed, item_id), Stream::TieBreak, 0)
}

/// Canonicalize and rank samples, attaching the item's acceptable set.
pub fn label(item: &DatasetItem, samples: &[RawSample], run_seed: u64) -> Result<LabeledConsensus> {
    let canon = item.canonicalizer()?;
    let consensus = aggregate(samples, canon.as_ref(), tie_seed(run_seed, &item.id))?;
    Ok(LabeledConsensus::new(consensus, item.acceptability()?, run_seed))
}

/// How items are divided between calibration and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Split {
    /// Seeded shuffle, first half calibrates.
    Half,
    /// Seeded shuffle, then the given sizes.
    Sizes { n_cal: usize, n_test: usize },
    /// Dataset order: the first `n_cal` items calibrate, the rest test.
    Prefix { n_cal: usize },
}

impl Split {
    /// Item indices for (calibration, test).
    pub fn assign(self, n: usize, run_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        let shuffled = || {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::rng(seed::derive(run_seed, Stream::Split, 0)));
            idx
        };
        let (cal, test) = match self {
            Split::Half => {
                let idx = shuffled();
                let (a, b) = idx.split_at(n / 2);
                (a.to_vec(), b.to_vec())
            }
            Split::Sizes { n_cal, n_test } => {
                if n_cal + n_test > n {
                    return Err(Error::input(format!(
                        "split needs {n_cal} + {n_test} items but the dataset has {n}"
                    )));
                }
                let idx = shuffled();
                (idx[..n_cal].to_vec(), idx[n_cal..n_cal + n_test].to_vec())
            }
            Split::Prefix { n_cal } => {
                if n_cal > n {
                    return Err(Error::input(format!("n_cal {n_cal} exceeds dataset size {n}")));
                }
                ((0..n_cal).collect(), (n_cal..n).collect())
            }
        };
        if cal.is_empty() || test.is_empty() {
            return Err(Error::input("calibration and test sets must both be non-empty"));
        }
        Ok((cal, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub message: String,
    pub backend: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub k: usize,
    pub alphas: Vec<f64>,
    pub primary_alpha: f64,
    pub score: ScoreKind,
    pub split: Split,
    pub seed: u64,
    /// Minimum fraction of items that must complete for the run to continue.
    pub min_success: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            k: 10,
            alphas: ALPHA_GRID.to_vec(),
            primary_alpha: 0.1,
            score: ScoreKind::Rank,
            split: Split::Half,
            seed: 0,
            min_success: 0.9,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::input("K must be at least 1"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::input("every alpha must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.min_success) {
            return Err(Error::input("min_success must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Items that completed, in input order, plus the ones that did not.
pub struct Labeled {
    pub items: Vec<LabeledConsensus>,
    pub failures: Vec<ItemFailure>,
}

/// Fetch and label every item; fail the run only when fewer than
/// `min_success` of them complete.
pub fn label_items(
    items: &[&DatasetItem],
    k: usize,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    run_seed: u64,
    min_success: f64,
    exec: Execution,
) -> Result<Labeled> {
    let results = map_slice(exec, items, |item| {
        let samples = fetch_samples(item, k, backend, cache, Execution::Sequential)?;
        label(item, &samples, run_seed)
    });
    collect_outcomes(items, results, min_success)
}

fn collect_outcomes(
    items: &[&DatasetItem],
    results: Vec<Result<LabeledConsensus>>,
    min_success: f64,
) -> Result<Labeled> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(l) => ok.push(l),
            Err(e) => {
                failures.push(ItemFailure {
                    item_id: item.id.clone(),
                    message: e.to_string(),
                    backend: e.is_backend(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        let frac = ok.len() as f64 / items.len() as f64;
        if frac < min_success {
            return Err(e);
        }
    }
    Ok(Labeled { items: ok, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyOutcome {
    pub certificate: Certificate,
    pub report: CoverageReport,
    pub failures: Vec<ItemFailure>,
}

impl CertifyOutcome {
    /// Write `certificate.json` and `coverage.json` (and `failures.json` when
    /// items were excluded).
    pub fn persist(&self, out_dir: &Path) -> Result<()> {
        write_json(&out_dir.join("certificate.json"), &self.certificate)?;
        write_json(&out_dir.join("coverage.json"), &self.report)?;
        if !self.failures.is_empty() {
            write_json(&out_dir.join("failures.json"), &self.failures)?;
        }
        Ok(())
    }
}

fn metadata(backend: &dyn Backend, k: usize, cal: &Calibration) -> CertificateMetadata {
    CertificateMetadata {
        tool: TOOL_NAME.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        backend: backend.id().into(),
        model: backend.model().into(),
        k,
        temperature: backend.temperature(),
        calibration_items: cal.item_ids().map(str::to_string).collect(),
    }
}

fn fit(labeled: &[LabeledConsensus], cfg: &CertifyConfig) -> Result<Calibration> {
    let records = labeled
        .iter()
        .map(|l| CalibrationRecord::from_labeled(l, cfg.score))
        .collect::<Result<Vec<_>>>()?;
    let mut alphas = cfg.alphas.clone();
    if !alphas.contains(&cfg.primary_alpha) {
        alphas.push(cfg.primary_alpha);
    }
    Calibration::fit(records, &alphas, cfg.primary_alpha)
}

/// Full certification run over a dataset.
pub fn certify(
    dataset: &[DatasetItem],
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    cfg: &CertifyConfig,
    exec: Execution,
) -> Result<CertifyOutcome> {
    cfg.validate()?;
    let (cal_idx, test_idx) = cfg.split.assign(dataset.len(), cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &dataset[i]).collect::<Vec<_>>();
    let (cal_items, test_items) = (pick(&cal_idx), pick(&test_idx));
    assert_disjoint(&cal_items, &test_items)?;

    let all: Vec<&DatasetItem> = cal_items.iter().chain(&test_items).copied().collect();
    let labeled = label_items(&all, cfg.k, backend, cache, cfg.seed, cfg.min_success, exec)?;
    let cal_ids: HashSet<&str> = cal_items.iter().map(|i| i.id.as_str()).collect();
    let (cal, test): (Vec<_>, Vec<_>) = labeled
        .items
        .into_iter()
        .partition(|l| cal_ids.contains(l.item_id()));

    let calibration = fit(&cal, cfg)?;
    let report = evaluate(&calibration, &test)?;
    let certificate = calibration.certificate(cfg.seed, metadata(backend, cfg.k, &calibration));
    Ok(CertifyOutcome {
        certificate,
        report,
        failures: labeled.failures,
    })
}

fn assert_disjoint(cal: &[&DatasetItem], test: &[&DatasetItem]) -> Result<()> {
    let ids: HashSet<&str> = cal.iter().map(|i| i.id.as_str()).collect();
    match test.iter().find(|t| ids.contains(t.id.as_str())) {
        Some(t) => Err(Error::input(format!("item {} is in both calibration and test", t.id))),
        None => Ok(()),
    }
}

/// Score dataset items not used for calibration against an existing certificate.
pub fn evaluate_dataset(
    dataset: &[DatasetItem],
    certificate: &Certificate,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    min_success: f64,
    exec: Execution,
) -> Result<(CoverageReport, Vec<ItemFailure>)> {
    let cal: HashSet<&str> = certificate.metadata.calibration_items.iter().map(String::as_str).collect();
    let test: Vec<&DatasetItem> = dataset.iter().filter(|i| !cal.contains(i.id.as_str())).collect();
    if test.is_empty() {
        return Err(Error::input("every dataset item was used for calibration; nothing to evaluate"));
    }
    let labeled = label_items(
        &test,
        certificate.metadata.k,
        backend,
        cache,
        certificate.seed,
        min_success,
        exec,
    )?;
    let report = evaluate_certificate(certificate, &labeled.items)?;
    Ok((report, labeled.failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode_error: f64,
    pub mode_error_ci: (f64, f64),
    pub m_star: ScoreValue,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub reliability_level: ReliabilityLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub alpha: f64,
    pub score_kind: ScoreKind,
    pub n_items: usize,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<ItemFailure>,
}

/// Mode error and coverage at each K, every K reusing the prefix of one
/// `max(K)`-sample fetch per item.
pub fn sweep_k(
    dataset: &[DatasetItem],
    ks: &[usize],
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    cfg: &CertifyConfig,
    exec: Execution,
) -> Result<SweepResult> {
    cfg.validate()?;
    let k_max = *ks.iter().max().ok_or_else(|| Error::input("K set is empty"))?;
    if ks.contains(&0) {
        return Err(Error::input("every K must be at least 1"));
    }
    let items: Vec<&DatasetItem> = dataset.iter().collect();
    let fetched = map_slice(exec, &items, |item| {
        fetch_samples(item, k_max, backend, cache, Execution::Sequential)
    });
    let mut samples = Vec::new();
    let mut kept = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (item, r) in items.iter().zip(fetched) {
        match r {
            Ok(s) => {
                samples.push(s);
                kept.push(*item);
            }
            Err(e) => {
                failures.push(ItemFailure {
                    item_id: item.id.clone(),
                    message: e.to_string(),
                    backend: e.is_backend(),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        if (kept.len() as f64 / items.len() as f64) < cfg.min_success {
            return Err(e);
        }
    }
    let (cal_idx, test_idx) = cfg.split.assign(kept.len(), cfg.seed)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let labeled = kept
            .iter()
            .zip(&samples)
            .map(|(item, s)| label(item, &s[..k], cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        let errors = labeled.iter().filter(|l| l.rank() != Rank::Finite(1)).count();
        let n = labeled.len();
        let cal: Vec<LabeledConsensus> = cal_idx.iter().map(|&i| labeled[i].clone()).collect();
        let test: Vec<LabeledConsensus> = test_idx.iter().map(|&i| labeled[i].clone()).collect();
        let calibration = fit(&cal, cfg)?;
        let report = evaluate(&calibration, &test)?;
        rows.push(SweepRow {
            k,
            mode_error: errors as f64 / n as f64,
            mode_error_ci: stats::wilson_ci(errors, n, stats::Z_95)?,
            m_star: report.m_star,
            coverage: report.coverage,
            avg_set_size: report.avg_set_size,
            reliability_level: report.reliability_level,
        });
    }
    Ok(SweepResult {
        alpha: cfg.primary_alpha,
        score_kind: cfg.score,
        n_items: kept.len(),
        rows,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialOutcome {
    pub certificate: Certificate,
    pub report: CoverageReport,
    pub savings: SavingsReport,
    pub traces: Vec<StoppingTrace>,
    pub failures: Vec<ItemFailure>,
}

impl SequentialOutcome {
    pub fn persist(&self, out_dir: &Path) -> Result<()> {
        write_json(&out_dir.join("certificate.json"), &self.certificate)?;
        write_json(&out_dir.join("coverage.json"), &self.report)?;
        write_json(&out_dir.join("savings.json"), &self.savings)?;
        write_atomic(
            &out_dir.join("traces.jsonl"),
            crate::sequential::traces_to_jsonl(&self.traces)?.as_bytes(),
        )?;
        if !self.failures.is_empty() {
            write_json(&out_dir.join("failures.json"), &self.failures)?;
        }
        Ok(())
    }
}

/// Draw samples one at a time until the stopping rule fires, then calibrate
/// on the stopped consensuses.
pub fn sequential_certify(
    dataset: &[DatasetItem],
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    stopping: &StoppingConfig,
    cfg: &CertifyConfig,
    exec: Execution,
) -> Result<SequentialOutcome> {
    cfg.validate()?;
    stopping.validate()?;
    let (cal_idx, test_idx) = cfg.split.assign(dataset.len(), cfg.seed)?;
    let items: Vec<&DatasetItem> = cal_idx.iter().chain(&test_idx).map(|&i| &dataset[i]).collect();
    let results = map_slice(exec, &items, |item| stop_item(item, backend, cache, stopping, cfg.seed));
    let mut traces = Vec::new();
    let labeled_results: Vec<Result<LabeledConsensus>> = results
        .into_iter()
        .map(|r| {
            r.map(|(l, t)| {
                traces.push(t);
                l
            })
        })
        .collect();
    let labeled = collect_outcomes(&items, labeled_results, cfg.min_success)?;
    let cal_ids: HashSet<&str> = cal_idx.iter().map(|&i| dataset[i].id.as_str()).collect();
    let (cal, test): (Vec<_>, Vec<_>) = labeled
        .items
        .into_iter()
        .partition(|l| cal_ids.contains(l.item_id()));
    let calibration = fit(&cal, cfg)?;
    let report = evaluate(&calibration, &test)?;
    let certificate = calibration.certificate(cfg.seed, metadata(backend, stopping.k_max, &calibration));
    let savings = savings_report(&traces, stopping.k_max)?;
    Ok(SequentialOutcome {
        certificate,
        report,
        savings,
        traces,
        failures: labeled.failures,
    })
}

fn stop_item(
    item: &DatasetItem,
    backend: &dyn Backend,
    cache: Option<&ResponseCache>,
    stopping: &StoppingConfig,
    run_seed: u64,
) -> Result<(LabeledConsensus, StoppingTrace)> {
    let canon = item.canonicalizer()?;
    let fetch_err = RefCell::new(None);
    let stream = (0u32..).map_while(|i| match fetch_one(item, i, backend, cache) {
        Ok(s) => Some(s),
        Err(e) => {
            *fetch_err.borrow_mut() = Some(e);
            None
        }
    });
    let result = run_sequential(stream, canon.as_ref(), stopping, tie_seed(run_seed, &item.id));
    if let Some(e) = fetch_err.into_inner() {
        return Err(e);
    }
    let (consensus, trace) = result?;
    Ok((LabeledConsensus::new(consensus, item.acceptability()?, run_seed), trace))
}

/// Synthetic dataset whose items carry their agent accuracy in metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub n_cal: usize,
    pub n_test: usize,
    /// Accuracy of every item, unless `cal_correct` is set.
    pub p_star: f64,
    /// Exact pools: this many calibration items always answer correctly and
    /// the rest never do; test items follow the same proportion.
    pub cal_correct: Option<usize>,
}

impl SyntheticDatasetConfig {
    /// Items plus the split that keeps the calibration pool intact.
    pub fn build(&self) -> Result<(Vec<DatasetItem>, Split)> {
        if self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::input("n_cal and n_test must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_star) {
            return Err(Error::input(format!("p_star must lie in [0, 1], got {}", self.p_star)));
        }
        let test_correct = match self.cal_correct {
            Some(c) if c > self.n_cal => {
                return Err(Error::input(format!("cal_correct {c} exceeds n_cal {}", self.n_cal)))
            }
            Some(c) => Some((c as f64 * self.n_test as f64 / self.n_cal as f64).round() as usize),
            None => None,
        };
        let p_for = |pool_correct: Option<usize>, i: usize| match pool_correct {
            Some(c) => Some(if i < c { 1.0 } else { 0.0 }),
            None => None,
        };
        let mut items = Vec::with_capacity(self.n_cal + self.n_test);
        for i in 0..self.n_cal {
            items.push(synthetic_item(format!("cal-{i:05}"), i, p_for(self.cal_correct, i)));
        }
        for i in 0..self.n_test {
            items.push(synthetic_item(format!("test-{i:05}"), self.n_cal + i, p_for(test_correct, i)));
        }
        Ok((items, Split::Prefix { n_cal: self.n_cal }))
    }
}

fn synthetic_item(id: String, i: usize, p_star: Option<f64>) -> DatasetItem {
    let mut metadata = serde_json::Map::new();
    if let Some(p) = p_star {
        metadata.insert("p_star".into(), serde_json::json!(p));
    }
    DatasetItem {
        query: format!("synthetic question {i}"),
        acceptable: vec![(i % 997 + 1).to_string()],
        canonicalizer: CanonicalizerKind::Numeric,
        options: None,
        metadata,
        id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: SyntheticBackend,
        calls: AtomicUsize,
        fail_item: Option<String>,
    }

    impl Backend for Counting {
        fn id(&self) -> &str {
            "counting"
        }
        fn model(&self) -> &str {
            "m"
        }
        fn temperature(&self) -> f64 {
            0.7
        }
        fn sample(&self, item: &DatasetItem, index: u32) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_item.as_deref() == Some(item.id.as_str()) {
                return Err(Error::Backend {
                    item_id: item.id.clone(),
                    index,
                    message: "boom".into(),
                });
            }
            self.inner.sample(item, index)
        }
    }

    fn counting(p: f64) -> Counting {
        Counting {
            inner: SyntheticBackend::new(5, p, vec![1.0, 1.0], 0.7).unwrap(),
            calls: AtomicUsize::new(0),
            fail_item: None,
        }
    }

    fn dataset(n: usize, p: f64) -> Vec<DatasetItem> {
        let (mut items, _) = SyntheticDatasetConfig {
            n_cal: n / 2,
            n_test: n - n / 2,
            p_star: p,
            cal_correct: None,
        }
        .build()
        .unwrap();
        for it in &mut items {
            it.metadata.clear();
        }
        items
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/x.json");
        write_atomic(&path, b"first version").unwrap();
        write_atomic(&path, b"2").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"2");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn second_fetch_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let backend = counting(0.6);
        let item = &dataset(2, 0.6)[0];
        let first = fetch_samples(item, 20, &backend, Some(&cache), Execution::Parallel).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 20);
        cache.reset_counters();
        let second = fetch_samples(item, 20, &backend, Some(&cache), Execution::Parallel).unwrap();
        assert_eq!(first, second);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 20);
        assert_eq!(cache.hits(), 20);
        let prefix = fetch_samples(item, 10, &backend, Some(&cache), Execution::Sequential).unwrap();
        assert_eq!(prefix[..], first[..10]);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 20);
        let indices: Vec<u32> = first.iter().map(|s| s.index).collect();
        assert_eq!(indices, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_backend_matches_sample_agent() {
        let backend = SyntheticBackend::new(9, 0.6, vec![1.0], 0.7).unwrap();
        let item = &dataset(2, 0.6)[0];
        let samples = fetch_samples(item, 30, &backend, None, Execution::Sequential).unwrap();
        let agent = backend.agent_for(item).unwrap();
        let reference = crate::synthetic::sample_agent(&agent, &item.id, 30, seed::item_seed(9, &item.id));
        for (s, r) in samples.iter().zip(&reference) {
            assert_eq!(s.text == item.acceptable[0], r.text == agent.acceptable_class().key);
        }
    }

    #[test]
    fn perfect_agent_certifies_n_over_n_plus_one() {
        let items = dataset(40, 1.0);
        let backend = SyntheticBackend::new(7, 1.0, vec![1.0], 0.7).unwrap();
        let cfg = CertifyConfig { seed: 7, ..Default::default() };
        let out = certify(&items, &backend, None, &cfg, Execution::Parallel).unwrap();
        assert_eq!(out.certificate.reliability_level, ReliabilityLevel { numerator: 20, denominator: 21 });
        assert_eq!(out.certificate.m_star, ScoreValue::finite(1.0));
        assert_eq!(out.report.coverage, 1.0);
        assert_eq!(out.certificate.metadata.calibration_items.len(), 20);
    }

    #[test]
    fn exact_pools_reproduce_a_given_reliability() {
        let (items, split) = SyntheticDatasetConfig {
            n_cal: 500,
            n_test: 100,
            p_star: 0.7,
            cal_correct: Some(474),
        }
        .build()
        .unwrap();
        let backend = SyntheticBackend::new(3, 0.7, vec![1.0, 1.0], 0.7).unwrap();
        let cfg = CertifyConfig { split, seed: 3, ..Default::default() };
        let out = certify(&items, &backend, None, &cfg, Execution::Parallel).unwrap();
        assert_eq!(out.certificate.reliability_level, ReliabilityLevel { numerator: 474, denominator: 501 });
        assert_eq!(out.certificate.reliability_percent, "94.6%");
    }

    #[test]
    fn failed_items_are_excluded_above_threshold() {
        let items = dataset(40, 0.8);
        let mut backend = counting(0.8);
        backend.fail_item = Some(items[3].id.clone());
        let cfg = CertifyConfig::default();
        let out = certify(&items, &backend, None, &cfg, Execution::Sequential).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert!(out.failures[0].backend);
        assert_eq!(out.report.n_calibration + out.report.n_test, 39);

        let strict = CertifyConfig { min_success: 1.0, ..cfg };
        let err = certify(&items, &backend, None, &strict, Execution::Sequential).err().unwrap();
        assert!(err.is_backend());
    }

    #[test]
    fn certify_is_deterministic() {
        let items = dataset(60, 0.6);
        let backend = SyntheticBackend::new(1, 0.6, vec![1.0, 1.0], 0.7).unwrap();
        let cfg = CertifyConfig { seed: 1, ..Default::default() };
        let a = certify(&items, &backend, None, &cfg, Execution::Parallel).unwrap();
        let b = certify(&items, &backend, None, &cfg, Execution::Sequential).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn split_assignment() {
        let (c, t) = Split::Half.assign(11, 4).unwrap();
        assert_eq!((c.len(), t.len()), (5, 6));
        let mut all: Vec<usize> = c.iter().chain(&t).copied().collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(Split::Half.assign(11, 4).unwrap(), (c, t));
        assert!(Split::Sizes { n_cal: 6, n_test: 6 }.assign(11, 0).is_err());
        assert_eq!(Split::Prefix { n_cal: 2 }.assign(4, 0).unwrap(), (vec![0, 1], vec![2, 3]));
        assert!(Split::Prefix { n_cal: 4 }.assign(4, 0).is_err());
    }

    #[test]
    fn sweep_over_perfect_agent_has_zero_error() {
        let items = dataset(20, 1.0);
        let backend = SyntheticBackend::new(2, 1.0, vec![1.0], 0.7).unwrap();
        let r = sweep_k(&items, &[1, 2, 5], &backend, None, &CertifyConfig::default(), Execution::Parallel).unwrap();
        assert!(r.rows.iter().all(|row| row.mode_error == 0.0));
    }

    #[test]
    fn sweep_at_one_is_single_sample_accuracy() {
        let items = dataset(200, 0.6);
        let backend = SyntheticBackend::new(4, 0.6, vec![1.0, 1.0], 0.7).unwrap();
        let r = sweep_k(&items, &[1, 10], &backend, None, &CertifyConfig::default(), Execution::Parallel).unwrap();
        let wrong = items
            .iter()
            .filter(|it| backend.sample(it, 0).unwrap() != it.acceptable[0])
            .count();
        assert_eq!(r.rows[0].mode_error, wrong as f64 / items.len() as f64);
    }

    #[test]
    fn sequential_pipeline_on_deterministic_agent() {
        let items = dataset(20, 1.0);
        let backend = SyntheticBackend::new(2, 1.0, vec![1.0], 0.7).unwrap();
        let stopping = StoppingConfig::new(0.05, 3, 40).unwrap();
        let out = sequential_certify(&items, &backend, None, &stopping, &CertifyConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(out.traces.len(), 20);
        assert!(out.traces.iter().all(|t| t.stopped_at == 20 && t.triggered));
        assert!((out.savings.savings_fraction - 0.5).abs() < 1e-12);
        assert_eq!(out.report.coverage, 1.0);
    }
}
