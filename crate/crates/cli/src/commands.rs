use std::fs;
use std::path::Path;

use rankcert::calibrate::CoverageReport;
use rankcert::harness::{
    self, load_dataset, write_atomic, write_json, Backend, BackendConfig, BackendKind, CertifyConfig,
    DatasetItem, ResponseCache, RetryPolicy, Split, SyntheticDatasetConfig,
};
use rankcert::sequential::StoppingConfig;
use rankcert::synthetic::{self, SyntheticAgent, Tabular};
use rankcert::{Certificate, Error, Execution, Result};
use serde::Serialize;

use crate::args::{
    BackendArg, CertifyArgs, Cli, EvaluateArgs, SequentialArgs, SourceArgs, SweepArgs, SyntheticArgs,
};

const EXEC: Execution = Execution::Parallel;

pub const EXPERIMENTS: [&str; 6] = ["coverage", "variance", "biasvar", "setsize", "entropy", "canon"];

/// Everything a pipeline command needs, validated before any sampling.
struct Source {
    items: Vec<DatasetItem>,
    split: Split,
    backend: Box<dyn Backend>,
    cache: Option<ResponseCache>,
}

fn backend_config(cli: &Cli, src: &SourceArgs) -> Result<BackendConfig> {
    let template = match (&src.template, &src.template_file) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(path)) => Some(fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?),
        (None, None) => None,
    };
    let cfg = BackendConfig {
        kind: match src.backend {
            BackendArg::Synthetic => BackendKind::Synthetic,
            BackendArg::Http => BackendKind::Http,
        },
        endpoint: src.endpoint.clone(),
        template,
        response_pointer: src.response_pointer.clone(),
        temperature: src.temperature,
        model: src.model.clone(),
        auth_env: cli.auth_env.clone(),
        retry: RetryPolicy {
            max_attempts: src.max_attempts,
            ..RetryPolicy::default()
        },
        p_star: src.p_star,
        wrong_weights: src.wrong_weights.clone(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(cli: &Cli, src: &SourceArgs) -> Result<Source> {
    if src.backend == BackendArg::Http && src.dataset.is_none() {
        return Err(Error::Schema("the http backend needs a dataset: pass --dataset <file.jsonl>".into()));
    }
    let config = backend_config(cli, src)?;
    let (items, split) = match (&src.dataset, config.kind) {
        (Some(path), _) => {
            if src.cal_correct.is_some() {
                return Err(Error::Input("--cal-correct only applies to generated synthetic data".into()));
            }
            let items = load_dataset(path)?;
            let split = match (src.n_cal, src.n_test) {
                (None, None) => Split::Half,
                (Some(n_cal), Some(n_test)) => Split::Sizes { n_cal, n_test },
                (Some(n_cal), None) => Split::Sizes {
                    n_cal,
                    n_test: items.len().saturating_sub(n_cal),
                },
                (None, Some(_)) => return Err(Error::Input("--n-test needs --n-cal".into())),
            };
            (items, split)
        }
        (None, _) => SyntheticDatasetConfig {
            n_cal: src.n_cal.unwrap_or(200),
            n_test: src.n_test.unwrap_or(500),
            p_star: src.p_star,
            cal_correct: src.cal_correct,
        }
        .build()?,
    };
    if !(0.0..=1.0).contains(&src.min_success) {
        return Err(Error::Input("--min-success must lie in [0, 1]".into()));
    }
    split.assign(items.len(), cli.seed)?;
    let cache = if src.no_cache {
        None
    } else {
        Some(ResponseCache::new(src.cache.clone().unwrap_or_else(|| cli.out.join("cache"))))
    };
    let backend = config.build(cli.seed)?;
    Ok(Source {
        items,
        split,
        backend,
        cache,
    })
}

fn certify_config(cli: &Cli, src: &SourceArgs, split: Split, k: usize, alpha: f64) -> CertifyConfig {
    CertifyConfig {
        k,
        alphas: cli.alpha_grid.clone(),
        primary_alpha: alpha,
        score: cli.score,
        split,
        seed: cli.seed,
        min_success: src.min_success,
    }
}

fn json_text<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable value")
}

/// Per-alpha table whose cells are the exact JSON texts stored in coverage.json.
pub fn alpha_table(report: &CoverageReport) -> String {
    let mut out = String::from("alpha,k_index,m_star,coverage,threshold_coverage,avg_set_size\n");
    for r in &report.per_alpha {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            json_text(&r.alpha),
            json_text(&r.k_index),
            json_text(&r.m_star),
            json_text(&r.coverage),
            json_text(&r.threshold_coverage),
            json_text(&r.avg_set_size)
        ));
    }
    out
}

fn print_failures(failures: &[harness::ItemFailure]) {
    for f in failures {
        eprintln!("excluded item {}: {}", f.item_id, f.message);
    }
}

pub fn certify(cli: &Cli, args: &CertifyArgs) -> Result<()> {
    let src = prepare(cli, &args.source)?;
    let cfg = certify_config(cli, &args.source, src.split, args.k, args.alpha);
    cfg.validate()?;
    let out = harness::certify(&src.items, src.backend.as_ref(), src.cache.as_ref(), &cfg, EXEC)?;
    out.persist(&cli.out)?;
    print_failures(&out.failures);
    let c = &out.certificate;
    println!(
        "reliability level: {}/{} ({})",
        c.reliability_level.numerator, c.reliability_level.denominator, c.reliability_percent
    );
    println!("m_star at alpha {}: {}", c.alpha, c.m_star);
    print!("{}", alpha_table(&out.report));
    Ok(())
}

pub fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let cert: Certificate = harness::read_json(&args.certificate)?;
    if cert.schema_version != rankcert::calibrate::SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "certificate schema {} is not {}",
            cert.schema_version,
            rankcert::calibrate::SCHEMA_VERSION
        )));
    }
    let src = prepare(cli, &args.source)?;
    let (report, failures) = harness::evaluate_dataset(
        &src.items,
        &cert,
        src.backend.as_ref(),
        src.cache.as_ref(),
        args.source.min_success,
        EXEC,
    )?;
    write_json(&cli.out.join("coverage.json"), &report)?;
    print_failures(&failures);
    println!(
        "coverage {} on {} items at alpha {} (m_star {})",
        report.coverage, report.n_test, report.alpha, report.m_star
    );
    Ok(())
}

pub fn sweep_k(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let src = prepare(cli, &args.source)?;
    let k_max = args.ks.iter().copied().max().unwrap_or(1);
    let cfg = certify_config(cli, &args.source, src.split, k_max, args.alpha);
    let result = harness::sweep_k(&src.items, &args.ks, src.backend.as_ref(), src.cache.as_ref(), &cfg, EXEC)?;
    write_json(&cli.out.join("sweep_k.json"), &result)?;
    let mut csv = String::from("k,mode_error,m_star,coverage,avg_set_size\n");
    for r in &result.rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.k, r.mode_error, r.m_star, r.coverage, r.avg_set_size));
    }
    write_atomic(&cli.out.join("sweep_k.csv"), csv.as_bytes())?;
    print_failures(&result.failures);
    print!("{csv}");
    Ok(())
}

pub fn sequential(cli: &Cli, args: &SequentialArgs) -> Result<()> {
    let stopping = StoppingConfig::new(args.delta, args.k0, args.k_max)?;
    let src = prepare(cli, &args.source)?;
    let cfg = certify_config(cli, &args.source, src.split, args.k_max, args.alpha);
    let out = harness::sequential_certify(
        &src.items,
        src.backend.as_ref(),
        src.cache.as_ref(),
        &stopping,
        &cfg,
        EXEC,
    )?;
    out.persist(&cli.out)?;
    print_failures(&out.failures);
    println!("items: {}", out.savings.items);
    println!("avg K: {}", out.savings.avg_k);
    println!("savings: {}", out.savings.savings_fraction);
    println!("triggered: {}", out.savings.triggered_fraction);
    println!("coverage at alpha {}: {} (m_star {})", out.report.alpha, out.report.coverage, out.report.m_star);
    Ok(())
}

fn write_experiment<T: Serialize + Tabular>(out: &Path, name: &str, value: &T) -> Result<()> {
    write_json(&out.join(format!("synthetic_{name}.json")), value)?;
    write_atomic(&out.join(format!("synthetic_{name}.csv")), value.to_csv().as_bytes())
}

#[derive(Serialize)]
struct VarianceOutput {
    mode_error: synthetic::ModeErrorSeries,
    hard_agent_bias: synthetic::BiasSeries,
    single_sample_variance: f64,
    single_sample_variance_se: f64,
}

impl Tabular for VarianceOutput {
    fn to_csv(&self) -> String {
        self.mode_error.to_csv()
    }
}

pub fn synthetic(cli: &Cli, args: &SyntheticArgs) -> Result<()> {
    let seed = cli.seed;
    match args.experiment.as_str() {
        "coverage" => {
            let mut cfg = synthetic::CoverageConfig {
                alphas: cli.alpha_grid.clone(),
                score: cli.score,
                seed,
                ..Default::default()
            };
            cfg.reps = args.reps.unwrap_or(cfg.reps);
            cfg.k = args.k.unwrap_or(cfg.k);
            let grid = synthetic::coverage_sweep(&cfg, EXEC)?;
            write_experiment(&cli.out, "coverage", &grid)?;
            println!("p_star,alpha,mean_coverage,lower_ok,upper_ok");
            for c in &grid.cells {
                println!("{},{},{:.4},{},{}", c.p_star, c.alpha, c.mean_coverage, c.lower_ok(), c.upper_ok());
            }
        }
        "variance" => {
            let trials = args.trials.unwrap_or(100_000);
            let agent = SyntheticAgent::with_accuracy(0.7, &[1.0])?;
            let ks: Vec<usize> = (1..=60).collect();
            let mode_error = synthetic::mode_error_sweep(&agent, &ks, trials, seed, EXEC);
            let hard = SyntheticAgent::with_accuracy(0.35, &[1.0])?;
            let hard_agent_bias = synthetic::mode_bias_regimes(&hard, &[1, 5, 11, 25, 51, 99], trials, seed, EXEC);
            let (var, se) = synthetic::single_sample_variance(0.5, trials, seed, EXEC);
            let out = VarianceOutput {
                mode_error,
                hard_agent_bias,
                single_sample_variance: var,
                single_sample_variance_se: se,
            };
            write_experiment(&cli.out, "variance", &out)?;
            let at = |k: usize| out.mode_error.points[k - 1].error;
            println!("mode error K=1: {} K=10: {} K=58: {}", at(1), at(10), at(58));
            let last = out.hard_agent_bias.points.last().expect("non-empty K grid");
            println!("hard agent K={}: mode-correct {} bias {}", last.k, last.mode_correct_rate, last.bias);
            println!("single-sample variance at p=0.5: {var} (se {se})");
        }
        "biasvar" => {
            let mut cfg = synthetic::BiasVarConfig { seed, ..Default::default() };
            cfg.reps = args.reps.unwrap_or(cfg.reps);
            cfg.point_trials = args.trials.unwrap_or(cfg.point_trials);
            cfg.k = args.k.unwrap_or(cfg.k);
            let table = synthetic::bias_variance_table(&cfg, EXEC)?;
            write_experiment(&cli.out, "biasvar", &table)?;
            print!("{}", table.to_csv());
            println!("mse ratio (best baseline / worst conformal): {}", table.mse_ratio);
        }
        "setsize" => {
            let mut cfg = synthetic::SetSizeConfig { seed, ..Default::default() };
            cfg.runs = args.reps.unwrap_or(cfg.runs);
            cfg.k = args.k.unwrap_or(cfg.k);
            let result = synthetic::setsize_vs_quality(&cfg, EXEC)?;
            write_experiment(&cli.out, "setsize", &result)?;
            print!("{}", result.to_csv());
            println!("non-increasing runs: {}", result.non_increasing_fraction);
        }
        "entropy" => {
            let mut cfg = synthetic::EntropyConfig { seed, ..Default::default() };
            cfg.k = args.k.unwrap_or(cfg.k);
            let result = synthetic::entropy_setsize_correlation(&cfg, synthetic::heterogeneous_population)?;
            write_experiment(&cli.out, "entropy", &result)?;
            match result.correlation {
                Some(r) => println!("entropy/set-size correlation: {r} (threshold {})", result.threshold),
                None => println!("entropy/set-size correlation undefined (threshold {})", result.threshold),
            }
        }
        "canon" => {
            let trials = args.trials.unwrap_or(100_000);
            let agent = synthetic::FragmentedAgent::split(6, 0.10, &[0.40])?;
            let series = synthetic::canonicalization_amplification(&agent, &[1, 2, 5, 10, 20], trials, seed, EXEC);
            write_experiment(&cli.out, "canon", &series)?;
            print!("{}", series.to_csv());
        }
        other => {
            return Err(Error::Input(format!(
                "unknown experiment {other:?}; valid names: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    }
    Ok(())
}
