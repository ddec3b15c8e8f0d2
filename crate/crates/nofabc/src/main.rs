//! Command-line harness: experiment runs, ablation grids, numeric
//! verification, and synthetic data export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nofabc::allocator::non_forgetting_trial;
use nofabc::config::RunConfig;
use nofabc::data::{self, CilStream};
use nofabc::error::{NofaError, Result};
use nofabc::gradcheck;
use nofabc::pipeline::{run_cil, PipelineConfig, RunOutcome};

#[derive(Parser)]
#[command(name = "nofabc", version, about = "Class-incremental learning with a non-forgetting allocator and bi-level adapter competition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline over the configured seed set and write metrics.
    Run(RunArgs),
    /// Run a grid of configuration variants and tabulate the results.
    Ablate(AblateArgs),
    /// Check recursive-vs-joint weight equivalence and gradient correctness.
    Verify(VerifyArgs),
    /// Generate a synthetic stream and export it as a feature file.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with flat dotted keys (`model.gamma = 0.5`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single-key override, repeatable: --set model.gamma=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (falls back to $NOFABC_OUT, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for assignment in &self.sets {
            let (key, value) = assignment.split_once('=').ok_or_else(|| {
                NofaError::Config(format!("--set expects key=value, got `{assignment}`"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Use the synthetic generator (the default data source).
    #[arg(long)]
    synthetic: bool,
    /// Load a feature file instead of generating synthetic data.
    #[arg(long, conflicts_with = "synthetic")]
    features: Option<PathBuf>,
    /// Base-session class count for feature-file splits (B-m Inc-n).
    #[arg(long, default_value_t = 0)]
    base_m: usize,
    /// Incremental classes per task for feature-file splits.
    #[arg(long, default_value_t = 4)]
    inc_n: usize,
    /// Held-out fraction per class for feature-file splits.
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    /// Shortcut for data.tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Shortcut for data.classes_per_task.
    #[arg(long)]
    classes_per_task: Option<usize>,
    /// Shortcut for a single-seed run: sets the model and data seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.tasks {
            cfg.data.tasks = t;
        }
        if let Some(n) = self.classes_per_task {
            cfg.data.classes_per_task = n;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
    }

    /// Build the stream for one trial seed.
    fn stream(&self, cfg: &RunConfig, seed: u64) -> Result<CilStream> {
        match &self.features {
            Some(path) => {
                let pool = if path.extension().is_some_and(|e| e == "csv") {
                    data::load_feature_csv(path)?
                } else {
                    data::load_feature_file(path)?
                };
                data::apply_split(&pool, self.base_m, self.inc_n, self.test_fraction, seed)
            }
            None => {
                let mut spec = cfg.data.clone();
                spec.seed = seed;
                data::generate_stream(&spec)
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Grid file: one `name: key=value key=value` row per line.
    #[arg(long, conflicts_with = "preset")]
    grid: Option<PathBuf>,
    /// Built-in grid: components, o, beta, or adapters.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Inject noise into the autocorrelation to prove the check can fail.
    #[arg(long)]
    corrupt_update: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Destination feature file.
    #[arg(long, default_value = "data.feat")]
    file: PathBuf,
}

// ---------------------------------------------------------------------------
// Result records. No timestamps anywhere: identical config + seeds must
// produce byte-identical files.
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SeedRecord {
    seed: u64,
    #[serde(flatten)]
    outcome: RunOutcome,
}

#[derive(Serialize)]
struct Aggregate {
    avg_acc_mean: f64,
    avg_acc_std: f64,
    last_acc_mean: f64,
    last_acc_std: f64,
    bwt_mean: f64,
    bwt_std: f64,
    p_a_mean: f64,
    p_a_std: f64,
}

#[derive(Serialize)]
struct RunRecord {
    version: &'static str,
    config: RunConfig,
    per_seed: Vec<SeedRecord>,
    aggregate: Aggregate,
}

#[derive(Serialize)]
struct AblateRow {
    name: String,
    num_adapters: usize,
    adapter_params: usize,
    #[serde(flatten)]
    aggregate: Aggregate,
}

#[derive(Serialize)]
struct AblateRecord {
    version: &'static str,
    config: RunConfig,
    rows: Vec<AblateRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(outcomes: &[(u64, RunOutcome)]) -> Aggregate {
    let pick = |f: fn(&RunOutcome) -> f64| -> Vec<f64> {
        outcomes.iter().map(|(_, o)| f(o)).collect()
    };
    let (avg_acc_mean, avg_acc_std) = mean_std(&pick(|o| o.metrics.avg_acc));
    let (last_acc_mean, last_acc_std) = mean_std(&pick(|o| o.metrics.last_acc));
    let (bwt_mean, bwt_std) = mean_std(&pick(|o| o.metrics.bwt));
    let (p_a_mean, p_a_std) = mean_std(&pick(|o| o.metrics.p_a));
    Aggregate {
        avg_acc_mean,
        avg_acc_std,
        last_acc_mean,
        last_acc_std,
        bwt_mean,
        bwt_std,
        p_a_mean,
        p_a_std,
    }
}

/// One full pipeline run per seed; the seed drives both the data draw and
/// the model initialization so trials are fully independent.
fn run_seeds(cfg: &RunConfig, data_args: &DataArgs, pipeline: &PipelineConfig) -> Result<Vec<(u64, RunOutcome)>> {
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let stream = data_args.stream(cfg, seed)?;
        let mut pcfg = pipeline.clone();
        pcfg.seed = seed;
        let (outcome, _) = run_cil(stream, &pcfg)?;
        outcomes.push((seed, outcome));
    }
    Ok(outcomes)
}

fn write_pretty<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(record)
        .map_err(|e| NofaError::Format(e.to_string()))?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    args.data.apply(&mut cfg);
    let out_dir = cfg.resolve_out_dir();
    std::fs::create_dir_all(&out_dir)?;

    let outcomes = run_seeds(&cfg, &args.data, &cfg.pipeline)?;
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg.clone(),
        per_seed: outcomes
            .iter()
            .map(|(seed, outcome)| SeedRecord {
                seed: *seed,
                outcome: outcome.clone(),
            })
            .collect(),
        aggregate: aggregate(&outcomes),
    };
    write_pretty(&out_dir.join("run.json"), &record)?;

    let mut csv = String::from("seed,stage,accuracy\n");
    for (seed, outcome) in &outcomes {
        for (stage, acc) in outcome.metrics.stage_acc.iter().enumerate() {
            csv.push_str(&format!("{seed},{},{acc:.6}\n", stage + 1));
        }
    }
    std::fs::write(out_dir.join("curves.csv"), csv)?;

    println!("config: {}", serde_json::to_string(&cfg).map_err(|e| NofaError::Format(e.to_string()))?);
    println!("{:<6} {:>8} {:>8} {:>8} {:>8}", "seed", "avg", "last", "bwt", "p_a");
    for (seed, o) in &outcomes {
        println!(
            "{seed:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            o.metrics.avg_acc, o.metrics.last_acc, o.metrics.bwt, o.metrics.p_a
        );
    }
    let a = &record.aggregate;
    println!(
        "mean   {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        a.avg_acc_mean, a.last_acc_mean, a.bwt_mean, a.p_a_mean
    );
    println!(
        "std    {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        a.avg_acc_std, a.last_acc_std, a.bwt_std, a.p_a_std
    );
    println!("wrote {}", out_dir.join("run.json").display());
    Ok(())
}

/// Grid rows are `name: key=value key=value ...` with the keys from the
/// config format.
fn parse_grid(base: &RunConfig, text: &str) -> Result<Vec<(String, RunConfig)>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line.split_once(':').ok_or_else(|| {
            NofaError::Config(format!("grid line {}: expected `name: ...`", lineno + 1))
        })?;
        let mut cfg = base.clone();
        for token in rest.split_whitespace() {
            let (key, value) = token.split_once('=').ok_or_else(|| {
                NofaError::Config(format!("grid line {}: bad token `{token}`", lineno + 1))
            })?;
            cfg.set(key, value)
                .map_err(|e| NofaError::Config(format!("grid line {}: {e}", lineno + 1)))?;
        }
        rows.push((name.trim().to_string(), cfg));
    }
    if rows.is_empty() {
        return Err(NofaError::Config("grid file has no rows".into()));
    }
    Ok(rows)
}

fn preset_grid(base: &RunConfig, preset: &str) -> Result<Vec<(String, RunConfig)>> {
    let rows: Vec<(&str, Vec<(&str, String)>)> = match preset {
        "components" => vec![
            ("ia", vec![("model.components", "ia".into())]),
            ("ia_nfa", vec![("model.components", "ia_nfa".into())]),
            ("ia_nfa_blc", vec![("model.components", "ia_nfa_blc".into())]),
            ("full", vec![("model.components", "full".into())]),
        ],
        "o" => [0u32, 25, 50, 75]
            .iter()
            .map(|o| ("o", vec![("model.o_percent", o.to_string())]))
            .collect(),
        "beta" => [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|b| ("beta", vec![("model.beta", format!("{b}"))]))
            .collect(),
        "adapters" => vec![
            ("cap1", vec![("model.max_adapters", "1".into())]),
            ("cap3", vec![("model.max_adapters", "3".into())]),
            ("all", vec![("model.max_adapters", "none".into())]),
        ],
        _ => {
            return Err(NofaError::Config(format!(
                "unknown preset `{preset}` (components, o, beta, adapters)"
            )))
        }
    };
    let mut out = Vec::new();
    for (stem, assignments) in rows {
        let mut cfg = base.clone();
        let mut name = stem.to_string();
        for (key, value) in &assignments {
            cfg.set(key, value)?;
            if matches!(preset, "o" | "beta") {
                name = format!("{stem}{value}");
            }
        }
        out.push((name, cfg));
    }
    Ok(out)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut base = args.config.build()?;
    args.data.apply(&mut base);
    let grid = match (&args.grid, &args.preset) {
        (Some(path), None) => parse_grid(&base, &std::fs::read_to_string(path)?)?,
        (None, Some(preset)) => preset_grid(&base, preset)?,
        (None, None) => preset_grid(&base, "components")?,
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let out_dir = base.resolve_out_dir();
    std::fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::new();
    for (name, cfg) in &grid {
        let outcomes = run_seeds(cfg, &args.data, &cfg.pipeline)?;
        let num_adapters = outcomes[0].1.num_adapters;
        // Two rank-d_x_r matrices per block per adapter.
        let adapter_params = num_adapters
            * cfg.pipeline.num_blocks
            * 2
            * cfg.pipeline.feature_dim
            * cfg.pipeline.adapter_rank;
        rows.push(AblateRow {
            name: name.clone(),
            num_adapters,
            adapter_params,
            aggregate: aggregate(&outcomes),
        });
    }

    let record = AblateRecord {
        version: env!("CARGO_PKG_VERSION"),
        config: base.clone(),
        rows,
    };
    write_pretty(&out_dir.join("ablate.json"), &record)?;

    let mut csv = String::from(
        "name,num_adapters,adapter_params,avg_acc_mean,avg_acc_std,last_acc_mean,last_acc_std,bwt_mean,bwt_std,p_a_mean,p_a_std\n",
    );
    println!(
        "{:<12} {:>8} {:>10} {:>8} {:>8} {:>8}",
        "name", "adapters", "params", "avg", "last", "p_a"
    );
    for row in &record.rows {
        let a = &row.aggregate;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.name,
            row.num_adapters,
            row.adapter_params,
            a.avg_acc_mean,
            a.avg_acc_std,
            a.last_acc_mean,
            a.last_acc_std,
            a.bwt_mean,
            a.bwt_std,
            a.p_a_mean,
            a.p_a_std
        ));
        println!(
            "{:<12} {:>8} {:>10} {:>8.4} {:>8.4} {:>8.4}",
            row.name, row.num_adapters, row.adapter_params, a.avg_acc_mean, a.last_acc_mean, a.p_a_mean
        );
    }
    std::fs::write(out_dir.join("ablate.csv"), csv)?;
    println!("wrote {}", out_dir.join("ablate.json").display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyFailure {
    check: String,
    num_tasks: usize,
    expansion_dim: usize,
    error: f64,
    tolerance: f64,
}

fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let out_dir = cfg.resolve_out_dir();
    let corrupt = args.corrupt_update.then_some(1e-3);

    let mut worst: Option<VerifyFailure> = None;
    println!("{:<28} {:>10} {:>12}", "check", "tasks", "max error");
    for (&t, &d_b) in [1usize, 2, 4, 8].iter().zip([64usize, 96, 160, 256].iter()) {
        let rel = non_forgetting_trial(t, 24, d_b, 5, 12, cfg.pipeline.gamma, 97 + t as u64, corrupt)?;
        println!("{:<28} {:>10} {:>12.3e}", format!("recursive-vs-joint d_B={d_b}"), t, rel);
        if rel > 1e-8 && worst.as_ref().map_or(true, |w| rel > w.error) {
            worst = Some(VerifyFailure {
                check: "recursive-vs-joint".into(),
                num_tasks: t,
                expansion_dim: d_b,
                // JSON has no infinity; clamp so the dump stays numeric.
                error: rel.min(f64::MAX),
                tolerance: 1e-8,
            });
        }
    }

    let mut grad_worst = 0.0f64;
    let mut checked_total = 0usize;
    for seed in [1993u64, 1994, 1995] {
        let (max_rel, checked) = gradcheck::standard_check(seed);
        grad_worst = grad_worst.max(max_rel);
        checked_total += checked;
    }
    println!(
        "{:<28} {:>10} {:>12.3e}",
        format!("gradient ({checked_total} params)"),
        "-",
        grad_worst
    );
    if grad_worst > 1e-4 && worst.is_none() {
        worst = Some(VerifyFailure {
            check: "gradient".into(),
            num_tasks: 0,
            expansion_dim: 0,
            error: grad_worst,
            tolerance: 1e-4,
        });
    }

    if let Some(failure) = worst {
        std::fs::create_dir_all(&out_dir)?;
        let path = out_dir.join("verify_failure.json");
        write_pretty(&path, &failure)?;
        return Err(NofaError::Numeric(format!(
            "{} exceeded tolerance: {:.3e} > {:.3e} (details in {})",
            failure.check,
            failure.error,
            failure.tolerance,
            path.display()
        )));
    }
    println!("all checks passed");
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = args.config.build()?;
    args.data.apply(&mut cfg);
    let stream = data::generate_stream(&cfg.data)?;
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
    for task in &stream.tasks {
        if let Some(train) = &task.train {
            samples.extend(train.samples.iter().cloned());
        }
        samples.extend(task.test.samples.iter().cloned());
    }
    data::save_feature_file(&args.file, stream.input_dim, &samples)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        samples.len(),
        stream.total_classes,
        stream.input_dim,
        args.file.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::GenData(args) => cmd_gen_data(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                NofaError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
