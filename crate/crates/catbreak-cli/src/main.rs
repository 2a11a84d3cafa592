//! Command-line front end: model/dataset generation, single-method attack
//! runs, benchmark grids, the alpha sweep, sensitivity/fidelity analyses,
//! and the stationary-bandit regret simulation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use catbreak::analysis::{
    feature_sensitivity, gradient_indicator_fidelity, ClassRule, ValueRule,
};
use catbreak::attacks::{run_attack, verify_result, AttackConfig, Method};
use catbreak::bandit::{simulate_bandit, ArmSpec, RewardVariant};
use catbreak::bench::{
    aggregate, alpha_sweep, derive_seed, gen_dataset, metrics_csv, run_benchmark, BenchOutcome,
    BenchmarkSpec, RunRecord,
};
use catbreak::classifier::{ClassifierHandle, Sensitivity};
use catbreak::io::{read_dataset, read_model_file, write_dataset, write_model_file};

#[derive(Parser)]
#[command(name = "catbreak", version, about = "Adversarial attacks on categorical classifiers")]
struct Cli {
    /// Master seed fallback for subcommands that take one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Directory that relative output paths are joined onto.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic target model with planted feature sensitivity.
    GenModel(GenModelArgs),
    /// Sample a dataset labeled by a model's decisions.
    GenData(GenDataArgs),
    /// Run one attack method over a dataset.
    Attack(AttackArgs),
    /// Run a benchmark grid from a JSON spec.
    Bench(BenchArgs),
    /// Run the benchmark once per exploration weight.
    AlphaSweep(AlphaSweepArgs),
    /// Per-feature sensitivity report.
    Sensitivity(SensitivityArgs),
    /// Gradient-vs-measured rank fidelity report.
    Fidelity(FidelityArgs),
    /// Stationary-bandit regret simulation against the theoretical bound.
    RegretSim(RegretSimArgs),
}

#[derive(Args)]
struct GenModelArgs {
    /// Number of categorical features.
    #[arg(long)]
    n: usize,
    /// Values per feature.
    #[arg(long)]
    m: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 6)]
    d: usize,
    /// Hidden layer sizes, comma separated.
    #[arg(long, default_value = "16", value_delimiter = ',')]
    hidden: Vec<usize>,
    /// `uniform` or `skewed:<top>`.
    #[arg(long, default_value = "uniform")]
    sensitivity: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also export the embedding table to this file.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    count: usize,
    /// Rejection-sample for class balance.
    #[arg(long)]
    balance: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 60.0)]
    time_limit: f64,
    #[arg(long, default_value_t = 10)]
    top_l: usize,
    /// Inner rounds per ranking refresh; defaults to budget/3.
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// `perturbed` or `original`.
    #[arg(long, default_value = "perturbed")]
    reward_variant: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1 << 16)]
    fsgs_subset_cap: u64,
    #[arg(long, default_value_t = 0)]
    grad_combo_depth: usize,
    #[arg(long)]
    allow_delete: bool,
    #[arg(long)]
    omp_row_norm: bool,
    #[arg(long)]
    appendix_bonus: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark spec (JSON).
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct AlphaSweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Comma-separated exploration weights.
    #[arg(long, default_value = "0,2,4,8", value_delimiter = ',')]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `max-value` or `first-alt`.
    #[arg(long, default_value = "max-value")]
    rule: String,
    /// `best-wrong` or `true-drop`.
    #[arg(long, default_value = "best-wrong")]
    class_rule: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV export for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FidelityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegretSimArgs {
    /// Inline arm specs `mu:var[,mu:var...]`; append `:g` for a clamped
    /// Gaussian arm instead of the default two-point arm.
    #[arg(long)]
    arms: String,
    #[arg(long, default_value_t = 10_000)]
    horizon: u64,
    #[arg(long, default_value_t = 4.0)]
    alpha: f64,
    /// Number of independent seeds averaged.
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("catbreak: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("catbreak: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out_dir = cli.out_dir.clone();
    let resolve = |p: &Path| -> PathBuf {
        match (&out_dir, p.is_relative()) {
            (Some(dir), true) => dir.join(p),
            _ => p.to_path_buf(),
        }
    };
    let master_seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::GenModel(args) => {
            let sensitivity = parse_sensitivity(&args.sensitivity)?;
            let seed = args.seed.unwrap_or(master_seed);
            let spec = catbreak::classifier::GenSpec {
                values_per_feature: vec![args.m; args.n],
                num_classes: args.k,
                dim: args.d,
                hidden: args.hidden.clone(),
                sensitivity,
                seed,
            };
            let model = catbreak::classifier::EmbedMlpModel::generate(&spec)?;
            let out = resolve(&args.out);
            ensure_parent(&out)?;
            write_model_file(&out, &model)?;
            if let Some(emb) = &args.export_embeddings {
                let emb = resolve(emb);
                ensure_parent(&emb)?;
                catbreak::io::write_embedding_file(&emb, model.table())?;
            }
            println!(
                "wrote model: n={} m={} k={} d={} hidden={:?} seed={seed} -> {}",
                args.n,
                args.m,
                args.k,
                args.d,
                args.hidden,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData(args) => {
            let model = read_model_file(&args.model)?;
            let seed = args.seed.unwrap_or(master_seed);
            let data = gen_dataset(&model, args.count, args.balance, seed)?;
            let out = resolve(&args.out);
            ensure_parent(&out)?;
            write_dataset(&out, &data)?;
            println!("wrote {} instances -> {}", data.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack(args) => run_attack_command(args, master_seed, &resolve),
        Command::Bench(args) => {
            let spec: BenchmarkSpec = read_json(&args.spec)?;
            let outcome = run_benchmark(&spec)?;
            let dir = out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            write_bench_outputs(&dir, &outcome)?;
            print_rows(&outcome);
            if outcome.failed_runs > 0 {
                eprintln!("catbreak: {} run(s) failed; partial results kept", outcome.failed_runs);
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AlphaSweep(args) => {
            let spec: BenchmarkSpec = read_json(&args.spec)?;
            if !spec.methods.contains(&Method::Feat) {
                bail!("alpha sweep requires the feat method in the spec");
            }
            let sweep = alpha_sweep(&spec, &args.alphas)?;
            let dir = out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&dir)?;
            let mut failed = 0;
            let mut table = Vec::new();
            for (alpha, outcome) in &sweep {
                failed += outcome.failed_runs;
                for row in &outcome.rows {
                    table.push(serde_json::json!({
                        "alpha": alpha,
                        "method": row.method.name(),
                        "budget": row.budget,
                        "sr": row.sr,
                        "mean_queries": row.mean_queries,
                        "mean_runtime_s": row.mean_runtime_s,
                    }));
                }
                println!("alpha = {alpha}:");
                print_rows(outcome);
            }
            write_json(&dir.join("alpha_sweep.json"), &table)?;
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sensitivity(args) => {
            let model = read_model_file(&args.model)?;
            let data = read_dataset(&args.data)?;
            let rule = match args.rule.as_str() {
                "max-value" => ValueRule::MaxValue,
                "first-alt" => ValueRule::FirstAlt,
                other => bail!("unknown value rule '{other}'"),
            };
            let class_rule = match args.class_rule.as_str() {
                "best-wrong" => ClassRule::BestWrong,
                "true-drop" => ClassRule::TrueDrop,
                other => bail!("unknown class rule '{other}'"),
            };
            let report = feature_sensitivity(&model, &data, rule, class_rule)?;
            let out = resolve(&args.out);
            ensure_parent(&out)?;
            write_json(&out, &report)?;
            if let Some(csv) = &args.csv {
                let csv = resolve(csv);
                ensure_parent(&csv)?;
                fs::write(&csv, report.to_csv())?;
            }
            println!("wrote sensitivity report ({} features) -> {}", report.per_feature.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Fidelity(args) => {
            let model = read_model_file(&args.model)?;
            let data = read_dataset(&args.data)?;
            let report = gradient_indicator_fidelity(&model, &data, args.sample)?;
            let out = resolve(&args.out);
            ensure_parent(&out)?;
            write_json(&out, &report)?;
            println!(
                "mean rank correlation {:.4} over {} instances ({} degenerate) -> {}",
                report.mean_correlation,
                report.sampled,
                report.degenerate,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::RegretSim(args) => {
            let arms = parse_arms(&args.arms)?;
            let master = args.seed.unwrap_or(master_seed);
            let seeds: Vec<u64> =
                (0..args.seeds).map(|i| derive_seed(master, &[i as u64])).collect();
            let report = simulate_bandit(&arms, args.horizon, args.alpha, &seeds)?;
            let out = resolve(&args.out);
            ensure_parent(&out)?;
            write_json(&out, &report)?;
            match report.bound {
                Some(bound) => println!(
                    "empirical regret {:.3} vs bound {:.3} over {} seeds -> {}",
                    report.empirical_regret_mean,
                    bound,
                    report.num_seeds,
                    out.display()
                ),
                None => println!(
                    "empirical regret {:.3} (no bound: alpha <= 2 or no gaps) -> {}",
                    report.empirical_regret_mean,
                    out.display()
                ),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_attack_command(
    args: AttackArgs,
    master_seed: u64,
    resolve: &dyn Fn(&Path) -> PathBuf,
) -> Result<ExitCode> {
    let method = Method::from_str(&args.method)?;
    let model = read_model_file(&args.model)?;
    let data = read_dataset(&args.data)?;
    let reward_variant = match args.reward_variant.as_str() {
        "perturbed" => RewardVariant::Perturbed,
        "original" => RewardVariant::Original,
        other => bail!("unknown reward variant '{other}'"),
    };
    let seed = args.seed.unwrap_or(master_seed);
    let base = AttackConfig {
        budget: args.budget,
        time_limit: args.time_limit,
        top_l: args.top_l,
        tau: args.tau,
        alpha: args.alpha,
        lambda: args.lambda,
        reward_variant,
        seed,
        fsgs_subset_cap: args.fsgs_subset_cap,
        grad_combo_depth: args.grad_combo_depth,
        allow_delete: args.allow_delete,
        omp_row_norm: args.omp_row_norm,
        appendix_bonus: args.appendix_bonus,
    };

    use rayon::prelude::*;
    let records: Vec<RunRecord> = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let cfg = AttackConfig { seed: derive_seed(seed, &[i as u64]), ..base.clone() };
            let mut handle = ClassifierHandle::new(&model);
            match run_attack(method, &mut handle, inst, &cfg) {
                Ok(result) => {
                    let verified = verify_result(&model, inst, &result, cfg.budget).ok();
                    RunRecord {
                        method,
                        budget: cfg.budget,
                        instance_index: i,
                        repetition: 0,
                        seed: cfg.seed,
                        result: Some(result),
                        error: None,
                        verified,
                    }
                }
                Err(e) => RunRecord {
                    method,
                    budget: cfg.budget,
                    instance_index: i,
                    repetition: 0,
                    seed: cfg.seed,
                    result: None,
                    error: Some(e.to_string()),
                    verified: None,
                },
            }
        })
        .collect();

    let out = resolve(&args.out);
    ensure_parent(&out)?;
    let mut file = fs::File::create(&out)?;
    for record in &records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    let rows = aggregate(&records);
    for row in &rows {
        serde_json::to_writer(&mut file, &serde_json::json!({ "aggregate": row }))?;
        file.write_all(b"\n")?;
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    for row in &rows {
        println!(
            "{} budget {}: SR {:.3} ({}/{}), mean queries {}, mean changed {}",
            row.method,
            row.budget,
            row.sr,
            row.successes,
            row.attempted,
            row.mean_queries.map_or("N/A".into(), |v| format!("{v:.1}")),
            row.mean_changed.map_or("N/A".into(), |v| format!("{v:.2}")),
        );
    }
    if failed > 0 {
        eprintln!("catbreak: {failed} run(s) failed; partial results kept");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_bench_outputs(dir: &Path, outcome: &BenchOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.rows))?;
    let mut runs = fs::File::create(dir.join("runs.jsonl"))?;
    for record in &outcome.runs {
        serde_json::to_writer(&mut runs, record)?;
        runs.write_all(b"\n")?;
    }
    write_json(&dir.join("report.json"), outcome)?;
    Ok(())
}

fn print_rows(outcome: &BenchOutcome) {
    for row in &outcome.rows {
        println!(
            "  {:>10} budget {}: SR {:.3} ({}/{}), queries {}, changed {}",
            row.method.name(),
            row.budget,
            row.sr,
            row.successes,
            row.attempted,
            row.mean_queries.map_or("N/A".into(), |v| format!("{v:.1}")),
            row.mean_changed.map_or("N/A".into(), |v| format!("{v:.2}")),
        );
    }
}

fn parse_sensitivity(s: &str) -> Result<Sensitivity> {
    if s == "uniform" {
        return Ok(Sensitivity::Uniform);
    }
    if let Some(top) = s.strip_prefix("skewed:") {
        let top: usize = top.parse().context("skewed:<top> wants an integer")?;
        return Ok(Sensitivity::Skewed { top });
    }
    bail!("sensitivity must be 'uniform' or 'skewed:<top>', got '{s}'")
}

fn parse_arms(s: &str) -> Result<Vec<ArmSpec>> {
    let mut arms = Vec::new();
    for part in s.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        let arm = match fields.as_slice() {
            [mean, var] => ArmSpec::bernoulli(mean.parse()?, var.parse()?),
            [mean, var, "g"] => ArmSpec::gaussian(mean.parse()?, var.parse()?),
            _ => bail!("arm '{part}' is not mu:var or mu:var:g"),
        };
        arms.push(arm);
    }
    Ok(arms)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_sweep_defaults_to_the_standard_grid() {
        let cli =
            Cli::try_parse_from(["catbreak", "alpha-sweep", "--spec", "spec.json"]).unwrap();
        match cli.command {
            Command::AlphaSweep(args) => assert_eq!(args.alphas, vec![0.0, 2.0, 4.0, 8.0]),
            _ => panic!("parsed the wrong subcommand"),
        }
    }

    #[test]
    fn arm_specs_parse_both_distributions() {
        let arms = parse_arms("1.5:0.02,0.9:0.01:g").unwrap();
        assert_eq!(arms.len(), 2);
        assert_eq!(arms[0], ArmSpec::bernoulli(1.5, 0.02));
        assert_eq!(arms[1], ArmSpec::gaussian(0.9, 0.01));
        assert!(parse_arms("nonsense").is_err());
    }

    #[test]
    fn sensitivity_argument_forms() {
        assert_eq!(parse_sensitivity("uniform").unwrap(), Sensitivity::Uniform);
        assert_eq!(
            parse_sensitivity("skewed:3").unwrap(),
            Sensitivity::Skewed { top: 3 }
        );
        assert!(parse_sensitivity("bogus").is_err());
    }
}
