//! Benchmark orchestration: synthetic dataset generation, grid runs over
//! methods and budgets, metric aggregation, and the alpha sweep.
//!
//! Runs are parallelized across (method, budget, instance, repetition)
//! cells; every run derives its own seed from the master seed by position,
//! so the parallelism degree never changes any result.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, verify_result, AttackConfig, AttackResult, Method};
use crate::categorical::Instance;
use crate::classifier::{Classifier, ClassifierHandle, EmbedMlpModel};
use crate::error::{Error, Result};
use crate::io;

/// Which instances enter the success-rate denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SrDenominator {
    /// Attack and count only instances the model classifies correctly.
    #[default]
    Correct,
    /// Attack and count every instance; already-misclassified inputs
    /// succeed at the pre-check.
    All,
}

/// A benchmark grid: methods x budgets over one model and dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    /// Attack parameters shared by every cell (budget and seed are filled
    /// in per run).
    #[serde(default)]
    pub attack: AttackConfig,
    /// Per-method parameter overrides.
    #[serde(default)]
    pub overrides: BTreeMap<Method, AttackConfig>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses the global default.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub sr_denominator: SrDenominator,
    /// Cap on the number of dataset instances attacked.
    #[serde(default)]
    pub max_instances: Option<usize>,
}

fn default_repetitions() -> usize {
    1
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArg("benchmark needs at least one method".into()));
        }
        if self.budgets.is_empty() {
            return Err(Error::InvalidArg("benchmark needs at least one budget".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArg("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    fn config_for(&self, method: Method, budget: usize, seed: u64) -> AttackConfig {
        let mut cfg = self.overrides.get(&method).unwrap_or(&self.attack).clone();
        cfg.budget = budget;
        cfg.seed = seed;
        cfg
    }
}

/// One attack run's record as written to `runs.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub budget: usize,
    pub instance_index: usize,
    pub repetition: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<AttackResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Success claims re-checked outside the run's accounting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
}

/// One aggregated cell of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub budget: usize,
    pub attempted: usize,
    pub successes: usize,
    pub sr: f64,
    /// Mean confidence queries over successful attacks; absent when no
    /// attack succeeded.
    pub mean_queries: Option<f64>,
    /// Mean changed features over successful attacks.
    pub mean_changed: Option<f64>,
    /// Mean wall seconds over successful attacks.
    pub mean_runtime_s: Option<f64>,
}

/// Full benchmark output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOutcome {
    /// Report format tag plus crate version.
    pub version: String,
    /// Hardware note: runtimes are machine-dependent.
    pub host: String,
    pub spec: BenchmarkSpec,
    pub attempted_instances: usize,
    pub rows: Vec<MetricsRow>,
    pub failed_runs: usize,
    #[serde(skip)]
    pub runs: Vec<RunRecord>,
}

/// Derives one run's seed from the master seed and its grid position.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0x9E37_79B9_7F4A_7C15);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    state
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples uniform category assignments labeled by the model's decision.
///
/// With `balance` on, rejection sampling evens the class counts to within
/// one; generation fails if a class never appears within the attempt cap.
pub fn gen_dataset(
    model: &EmbedMlpModel,
    n_instances: usize,
    balance: bool,
    seed: u64,
) -> Result<Vec<Instance>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k = model.num_classes();
    let mut instances = Vec::with_capacity(n_instances);
    let mut class_counts = vec![0usize; k];
    let cap = n_instances.div_ceil(k);
    let max_attempts = n_instances.saturating_mul(1000).max(1000);
    let mut attempts = 0;
    while instances.len() < n_instances {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArg(format!(
                "class balance unreachable after {max_attempts} draws: counts {class_counts:?}"
            )));
        }
        let categories: Vec<Option<usize>> = model
            .values_per_feature()
            .iter()
            .map(|&m| Some(rng.gen_range(0..m)))
            .collect();
        let conf = model.predict(&Instance::new(categories.clone(), 0))?;
        let label = conf.argmax();
        if balance && class_counts[label] >= cap {
            continue;
        }
        class_counts[label] += 1;
        instances.push(Instance::new(categories, label));
    }
    Ok(instances)
}

/// Runs the benchmark grid defined by `spec`, loading its model and
/// dataset files.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let model = io::read_model_file(&spec.model)?;
    let dataset = io::read_dataset(&spec.dataset)?;
    run_benchmark_loaded(&model, &dataset, spec)
}

/// [`run_benchmark`] over an already-loaded model and dataset.
pub fn run_benchmark_loaded(
    model: &EmbedMlpModel,
    dataset: &[Instance],
    spec: &BenchmarkSpec,
) -> Result<BenchOutcome> {
    spec.validate()?;
    // Instances entering the grid; the correct-only denominator drops
    // inputs whose pre-attack margin is already non-negative.
    let mut attacked: Vec<(usize, &Instance)> = Vec::new();
    for (i, inst) in dataset.iter().enumerate() {
        let keep = match spec.sr_denominator {
            SrDenominator::All => true,
            SrDenominator::Correct => model.predict(inst)?.margin(inst.label) < 0.0,
        };
        if keep {
            attacked.push((i, inst));
        }
        if let Some(cap) = spec.max_instances {
            if attacked.len() >= cap {
                break;
            }
        }
    }

    // One task per grid run, seeded by position.
    struct Task<'a> {
        method_idx: usize,
        budget_idx: usize,
        instance_index: usize,
        inst: &'a Instance,
        repetition: usize,
    }
    let mut tasks = Vec::new();
    for (mi, _) in spec.methods.iter().enumerate() {
        for (bi, _) in spec.budgets.iter().enumerate() {
            for &(instance_index, inst) in &attacked {
                for rep in 0..spec.repetitions {
                    tasks.push(Task {
                        method_idx: mi,
                        budget_idx: bi,
                        instance_index,
                        inst,
                        repetition: rep,
                    });
                }
            }
        }
    }

    let run_one = |task: &Task| -> RunRecord {
        let method = spec.methods[task.method_idx];
        let budget = spec.budgets[task.budget_idx];
        let seed = derive_seed(
            spec.seed,
            &[
                task.method_idx as u64,
                task.budget_idx as u64,
                task.instance_index as u64,
                task.repetition as u64,
            ],
        );
        let cfg = spec.config_for(method, budget, seed);
        let mut handle = ClassifierHandle::new(model);
        match run_attack(method, &mut handle, task.inst, &cfg) {
            Ok(result) => {
                let verified = verify_result(model, task.inst, &result, budget).ok();
                RunRecord {
                    method,
                    budget,
                    instance_index: task.instance_index,
                    repetition: task.repetition,
                    seed,
                    result: Some(result),
                    error: None,
                    verified,
                }
            }
            Err(e) => RunRecord {
                method,
                budget,
                instance_index: task.instance_index,
                repetition: task.repetition,
                seed,
                result: None,
                error: Some(e.to_string()),
                verified: None,
            },
        }
    };

    let runs: Vec<RunRecord> = if spec.threads == 1 {
        tasks.iter().map(run_one).collect()
    } else if spec.threads == 0 {
        tasks.par_iter().map(run_one).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.threads)
            .build()
            .map_err(|e| Error::InvalidArg(format!("thread pool: {e}")))?
            .install(|| tasks.par_iter().map(run_one).collect())
    };

    let rows = aggregate(&runs);
    let failed_runs = runs.iter().filter(|r| r.error.is_some()).count();
    Ok(BenchOutcome {
        version: format!("catbreak-bench-v1 (crate {})", env!("CARGO_PKG_VERSION")),
        host: format!(
            "{}-{} ({} cpus)",
            std::env::consts::ARCH,
            std::env::consts::OS,
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        ),
        spec: spec.clone(),
        attempted_instances: attacked.len(),
        rows,
        failed_runs,
        runs,
    })
}

/// Folds per-run records into one metrics row per `(method, budget)` cell.
///
/// Query, change and runtime means cover successful attacks only; cells
/// without a success leave them absent rather than zero.
pub fn aggregate(runs: &[RunRecord]) -> Vec<MetricsRow> {
    let mut cells: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for run in runs {
        cells
            .entry((run.method.name().to_string(), run.budget))
            .or_default()
            .push(run);
    }
    let mut rows = Vec::new();
    for ((_, budget), cell) in cells {
        let method = cell[0].method;
        let attempted = cell.len();
        let successes: Vec<&&RunRecord> = cell
            .iter()
            .filter(|r| r.result.as_ref().is_some_and(|res| res.success))
            .collect();
        let count = successes.len();
        let mean = |f: &dyn Fn(&AttackResult) -> f64| -> Option<f64> {
            if count == 0 {
                None
            } else {
                Some(
                    successes
                        .iter()
                        .map(|r| f(r.result.as_ref().expect("successes hold results")))
                        .sum::<f64>()
                        / count as f64,
                )
            }
        };
        rows.push(MetricsRow {
            method,
            budget,
            attempted,
            successes: count,
            sr: if attempted == 0 { 0.0 } else { count as f64 / attempted as f64 },
            mean_queries: mean(&|r| r.queries as f64),
            mean_changed: mean(&|r| r.changed as f64),
            mean_runtime_s: mean(&|r| r.wall_time),
        });
    }
    rows
}

/// Fixed-header CSV rendering of the metrics table; empty cells print as
/// `N/A`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out =
        String::from("method,budget,attempted,successes,sr,mean_queries,mean_changed,mean_runtime_s\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |x| x.to_string());
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.method,
            row.budget,
            row.attempted,
            row.successes,
            row.sr,
            opt(row.mean_queries),
            opt(row.mean_changed),
            opt(row.mean_runtime_s),
        ));
    }
    out
}

/// Runs the benchmark once per exploration weight, reusing the spec.
pub fn alpha_sweep(spec: &BenchmarkSpec, alphas: &[f64]) -> Result<Vec<(f64, BenchOutcome)>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArg("alpha sweep needs at least one alpha".into()));
    }
    let model = io::read_model_file(&spec.model)?;
    let dataset = io::read_dataset(&spec.dataset)?;
    alpha_sweep_loaded(&model, &dataset, spec, alphas)
}

/// [`alpha_sweep`] over an already-loaded model and dataset.
pub fn alpha_sweep_loaded(
    model: &EmbedMlpModel,
    dataset: &[Instance],
    spec: &BenchmarkSpec,
    alphas: &[f64],
) -> Result<Vec<(f64, BenchOutcome)>> {
    if alphas.is_empty() {
        return Err(Error::InvalidArg("alpha sweep needs at least one alpha".into()));
    }
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut swept = spec.clone();
        swept.attack.alpha = alpha;
        for cfg in swept.overrides.values_mut() {
            cfg.alpha = alpha;
        }
        out.push((alpha, run_benchmark_loaded(model, dataset, &swept)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{make_planted_classifier, Sensitivity};
    use tempfile::tempdir;

    fn small_spec(dir: &std::path::Path) -> (EmbedMlpModel, Vec<Instance>, BenchmarkSpec) {
        let model = make_planted_classifier(8, 3, 2, 4, Sensitivity::Skewed { top: 2 }, 7).unwrap();
        let dataset = gen_dataset(&model, 24, false, 3).unwrap();
        let model_path = dir.join("model.bin");
        let data_path = dir.join("data.jsonl");
        crate::io::write_model_file(&model_path, &model).unwrap();
        crate::io::write_dataset(&data_path, &dataset).unwrap();
        let spec = BenchmarkSpec {
            model: model_path,
            dataset: data_path,
            methods: vec![Method::Feat, Method::FeatB],
            budgets: vec![2, 4],
            attack: AttackConfig { top_l: 4, ..AttackConfig::default() },
            overrides: BTreeMap::new(),
            repetitions: 1,
            seed: 5,
            threads: 0,
            sr_denominator: SrDenominator::Correct,
            max_instances: None,
        };
        (model, dataset, spec)
    }

    #[test]
    fn dataset_generation_is_reproducible_and_valid() {
        let model = make_planted_classifier(6, 3, 2, 3, Sensitivity::Uniform, 11).unwrap();
        let a = gen_dataset(&model, 30, false, 42).unwrap();
        let b = gen_dataset(&model, 30, false, 42).unwrap();
        assert_eq!(a, b);
        for inst in &a {
            inst.validate_shape(model.values_per_feature()).unwrap();
            assert_eq!(model.predict(inst).unwrap().argmax(), inst.label);
        }
    }

    #[test]
    fn balanced_generation_evens_class_counts() {
        let model = make_planted_classifier(6, 3, 2, 3, Sensitivity::Uniform, 11).unwrap();
        let data = gen_dataset(&model, 31, true, 9).unwrap();
        let mut counts = [0usize; 2];
        for inst in &data {
            counts[inst.label] += 1;
        }
        assert!(counts[0].abs_diff(counts[1]) <= 1, "counts {counts:?}");
    }

    #[test]
    fn benchmark_produces_one_row_per_cell() {
        let dir = tempdir().unwrap();
        let (_model, _dataset, spec) = small_spec(dir.path());
        let outcome = run_benchmark(&spec).unwrap();
        assert_eq!(outcome.rows.len(), 4);
        assert_eq!(outcome.failed_runs, 0);
        for row in &outcome.rows {
            assert!(row.sr >= 0.0 && row.sr <= 1.0);
            if row.successes == 0 {
                assert!(row.mean_queries.is_none());
            }
        }
        // Every attacked instance was correctly classified up front: the
        // recorded pre-check margin is strictly negative.
        for run in &outcome.runs {
            assert_eq!(run.verified, Some(true));
            let result = run.result.as_ref().unwrap();
            match &result.trace[0] {
                crate::attacks::TraceEvent::PreCheck { margin, .. } => {
                    assert!(*margin < 0.0, "attacked an already-misclassified instance")
                }
                other => panic!("first trace event should be the pre-check, got {other:?}"),
            }
        }
    }

    #[test]
    fn rerun_reproduces_everything_but_runtime() {
        let dir = tempdir().unwrap();
        let (_model, _dataset, spec) = small_spec(dir.path());
        let a = run_benchmark(&spec).unwrap();
        let serial = BenchmarkSpec { threads: 1, ..spec.clone() };
        let b = run_benchmark(&serial).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.method, rb.method);
            assert_eq!(ra.budget, rb.budget);
            assert_eq!(ra.sr, rb.sr);
            assert_eq!(ra.mean_queries, rb.mean_queries);
            assert_eq!(ra.mean_changed, rb.mean_changed);
        }
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.seed, rb.seed);
            let (res_a, res_b) = (ra.result.as_ref().unwrap(), rb.result.as_ref().unwrap());
            assert_eq!(res_a.trace, res_b.trace);
            assert_eq!(res_a.perturbation, res_b.perturbation);
            assert_eq!(res_a.queries, res_b.queries);
        }
    }

    #[test]
    fn aggregates_match_recomputation_from_runs() {
        let dir = tempdir().unwrap();
        let (_model, _dataset, spec) = small_spec(dir.path());
        let outcome = run_benchmark(&spec).unwrap();
        let recomputed = aggregate(&outcome.runs);
        assert_eq!(outcome.rows, recomputed);
    }

    #[test]
    fn csv_renders_na_for_empty_cells() {
        let rows = vec![MetricsRow {
            method: Method::Feat,
            budget: 3,
            attempted: 5,
            successes: 0,
            sr: 0.0,
            mean_queries: None,
            mean_changed: None,
            mean_runtime_s: None,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("method,budget,attempted"));
        assert!(csv.contains("feat,3,5,0,0,N/A,N/A,N/A"));
    }

    #[test]
    fn alpha_sweep_single_alpha_matches_plain_benchmark() {
        let dir = tempdir().unwrap();
        let (model, dataset, spec) = small_spec(dir.path());
        let sweep = alpha_sweep_loaded(&model, &dataset, &spec, &[spec.attack.alpha]).unwrap();
        let plain = run_benchmark_loaded(&model, &dataset, &spec).unwrap();
        assert_eq!(sweep.len(), 1);
        for (a, b) in sweep[0].1.rows.iter().zip(&plain.rows) {
            assert_eq!((a.method, a.budget, a.attempted, a.successes), (b.method, b.budget, b.attempted, b.successes));
            assert_eq!(a.sr, b.sr);
            assert_eq!(a.mean_queries, b.mean_queries);
            assert_eq!(a.mean_changed, b.mean_changed);
        }
    }
}
