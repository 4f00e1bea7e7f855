use cbb_core::bench::{
    run_experiment, run_sweep, ExperimentConfig, ModelKind, RunReport, DEFAULT_RATIO_GRID,
};
use cbb_core::cbb::save_checkpoint;
use cbb_core::gradcheck::{check_cbb, GradcheckConfig};
use cbb_core::oracle::{cross_check, frontdoor, observational, CrossCheck, Scm};
use cbb_core::tensor::write_tensor;
use cbb_core::CbbError;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "cbb",
    version,
    about = "Causal basis block checks, oracle validation and benchmarks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config for the chosen subcommand. Missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CBB_OUT_DIR", default_value = "cbb-out")]
    out: PathBuf,
    /// Comma-separated seeds, replacing those in the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Run seeds on separate threads. Output does not depend on it.
    #[arg(long, global = true)]
    parallel_seeds: bool,
    /// Print per-seed detail.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every block parameter gradient.
    Gradcheck,
    /// Compare back-door, front-door and interventional truth on random models.
    Oracle {
        /// Number of random models per seed.
        #[arg(long)]
        count: Option<usize>,
        /// Fixture model whose observational and front-door distributions
        /// are compared. Defaults to a built-in strongly confounded model.
        #[arg(long)]
        scm: Option<PathBuf>,
    },
    /// Run the benchmark once per basis ratio.
    Sweep {
        /// Comma-separated basis ratios.
        #[arg(long, value_delimiter = ',')]
        ratio_grid: Option<Vec<f64>>,
    },
    /// Run the benchmark once and save reports and checkpoints.
    Run,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

/// Rejected inputs are config errors; anything raised while running is a
/// failure.
fn classify(e: CbbError) -> CliError {
    match e {
        CbbError::Param(_) | CbbError::Usage(_) | CbbError::Format(_) | CbbError::Json(_) => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Failed(e.to_string()),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct OracleConfig {
    n_scms: usize,
    seeds: Vec<u64>,
    tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_scms: 500,
            seeds: vec![0],
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Serialize)]
struct FixtureReport {
    source: String,
    tv_observational_frontdoor: Vec<f64>,
    max_tv: f64,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    config: OracleConfig,
    batches: Vec<CrossCheck>,
    max_deviation: f64,
    max_tv_gap: f64,
    fixture: FixtureReport,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct GradcheckRun {
    seed: u64,
    report: cbb_core::gradcheck::GradcheckReport,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Creates `dir` and proves it accepts files.
fn prepare_out(dir: &Path) -> Result<(), CliError> {
    let fail = |e: std::io::Error| {
        CliError::Config(format!(
            "output directory {} is not writable: {e}",
            dir.display()
        ))
    };
    std::fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".cbb-write-probe");
    File::create(&probe).map_err(fail)?;
    std::fs::remove_file(&probe).map_err(fail)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

fn check_outcome(passed: bool, what: &str) -> Result<(), CliError> {
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{what} failed")))
    }
}

fn cmd_gradcheck(common: &Common) -> Result<(), CliError> {
    let cfg: GradcheckConfig = load_config(common.config.as_deref())?;
    let seeds = common.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    prepare_out(&common.out)?;
    let mut runs = Vec::new();
    println!(
        "{:<6} {:<14} {:>8} {:>12} {:>12}  result",
        "seed", "parameter", "entries", "max abs err", "max rel err"
    );
    for seed in seeds {
        let report = check_cbb(&GradcheckConfig {
            seed,
            ..cfg.clone()
        })
        .map_err(classify)?;
        for p in &report.params {
            println!(
                "{:<6} {:<14} {:>8} {:>12.3e} {:>12.3e}  {}",
                seed,
                p.name,
                p.entries,
                p.max_abs_err,
                p.max_rel_err,
                if p.passed { "pass" } else { "FAIL" }
            );
        }
        runs.push(GradcheckRun { seed, report });
    }
    write_json(&common.out.join("gradcheck.json"), &runs)?;
    check_outcome(
        runs.iter().all(|r| r.report.passed),
        &format!("gradient check (tolerance {:e})", cfg.tolerance),
    )
}

fn fixture_report(scm: &Scm, source: String) -> Result<FixtureReport, CliError> {
    let tv = (0..scm.card_x())
        .map(|x| Ok(observational(scm, x)?.tv(&frontdoor(scm, x)?)))
        .collect::<Result<Vec<f64>, CbbError>>()
        .map_err(classify)?;
    let max_tv = tv.iter().copied().fold(0.0, f64::max);
    Ok(FixtureReport {
        source,
        tv_observational_frontdoor: tv,
        max_tv,
    })
}

fn cmd_oracle(
    common: &Common,
    count: Option<usize>,
    scm_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg: OracleConfig = load_config(common.config.as_deref())?;
    if let Some(n) = count {
        cfg.n_scms = n;
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if cfg.n_scms == 0 || cfg.seeds.is_empty() {
        return Err(CliError::Config(
            "need at least one model and one seed".into(),
        ));
    }
    let (fixture, source) = match scm_path {
        Some(p) => (read_json::<Scm>(p)?, p.display().to_string()),
        None => (
            Scm::confounded_binary(0.1, 0.05, 0.4).map_err(classify)?,
            "built-in confounded binary model".to_string(),
        ),
    };
    prepare_out(&common.out)?;

    let batches = cfg
        .seeds
        .iter()
        .map(|&s| cross_check(cfg.n_scms, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(classify)?;
    let max_deviation = batches.iter().map(|b| b.max_deviation).fold(0.0, f64::max);
    let max_tv_gap = batches.iter().map(|b| b.max_tv_gap).fold(0.0, f64::max);
    let fixture_out = fixture_report(&fixture, source)?;
    let passed = max_deviation < cfg.tolerance;

    if common.verbose {
        for b in &batches {
            println!(
                "seed {:>4}: {} models, max deviation {:.3e}, max TV gap {:.4} (model seed {})",
                b.base_seed, b.n_scms, b.max_deviation, b.max_tv_gap, b.max_tv_seed
            );
        }
    }
    println!("models checked           {}", cfg.n_scms * cfg.seeds.len());
    println!(
        "max deviation            {max_deviation:.3e} (tolerance {:e})",
        cfg.tolerance
    );
    println!("max TV(obs, do) gap      {max_tv_gap:.4}");
    println!("fixture TV(obs, front)   {:.4}", fixture_out.max_tv);

    write_json(&common.out.join("fixture_scm.json"), &fixture)?;
    let report = OracleReport {
        config: cfg,
        batches,
        max_deviation,
        max_tv_gap,
        fixture: fixture_out,
        passed,
    };
    write_json(&common.out.join("oracle.json"), &report)?;
    check_outcome(passed, "oracle agreement")
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = load_config(common.config.as_deref())?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.parallel_seeds |= common.parallel_seeds;
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn print_summary(report: &RunReport, verbose: bool) {
    if verbose {
        for run in &report.runs {
            for m in &run.models {
                println!(
                    "  seed {:>4} {:<8} source {:.4} target {:.4}",
                    run.seed,
                    m.model.name(),
                    m.source_accuracy,
                    m.target_accuracy
                );
            }
        }
    }
    for model in [ModelKind::Baseline, ModelKind::Cbb] {
        let agg = |d| {
            report
                .aggregate(model, d)
                .map(|a| (a.mean, a.std))
                .unwrap_or((f64::NAN, f64::NAN))
        };
        let ((sm, ss), (tm, ts)) = (agg("source"), agg("target"));
        println!(
            "  {:<8} source {sm:.4} +- {ss:.4}  target {tm:.4} +- {ts:.4}",
            model.name()
        );
    }
    let c = &report.checks;
    println!(
        "  checks: train/infer max diff {:.2e} ({}), E[X] rank {} <= K {} ({})",
        c.train_infer_max_diff,
        if c.train_infer_passed { "pass" } else { "FAIL" },
        c.max_expected_x_rank,
        c.basis_count,
        if c.rank_passed { "pass" } else { "FAIL" }
    );
}

fn cmd_sweep(common: &Common, grid: Option<Vec<f64>>) -> Result<(), CliError> {
    let cfg = experiment_config(common)?;
    let grid = grid.unwrap_or_else(|| DEFAULT_RATIO_GRID.to_vec());
    if grid.is_empty() {
        return Err(CliError::Config("ratio grid is empty".into()));
    }
    for &r in &grid {
        cbb_core::cbb::basis_count(cfg.block.channels, r).map_err(classify)?;
    }
    prepare_out(&common.out)?;
    let out = run_sweep(&cfg, &grid).map_err(classify)?;
    for (ratio, report) in &out.reports {
        println!("ratio {ratio}");
        print_summary(report, common.verbose);
    }
    let csv_path = common.out.join("sweep.csv");
    out.write_csv(create(&csv_path)?)
        .map_err(|e| io_err(&csv_path, e))?;
    write_json(&common.out.join("sweep_summary.json"), &out.summary(&cfg))?;
    check_outcome(out.passed(), "sweep checks")
}

fn write_tensor_file(path: &Path, t: &cbb_core::Tensor) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_tensor(&mut w, t).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn cmd_run(common: &Common) -> Result<(), CliError> {
    let cfg = experiment_config(common)?;
    prepare_out(&common.out)?;
    let out = run_experiment(&cfg).map_err(classify)?;
    let report = &out.report;
    print_summary(report, common.verbose);

    let json_path = common.out.join("report.json");
    report
        .write_json(create(&json_path)?)
        .map_err(|e| io_err(&json_path, e))?;
    let csv_path = common.out.join("report.csv");
    report
        .write_csv(create(&csv_path)?)
        .map_err(|e| io_err(&csv_path, e))?;
    for (seed, models) in &out.models {
        for model in models {
            let dir = common
                .out
                .join("checkpoints")
                .join(format!("seed-{seed}"))
                .join(model.kind.name());
            if let Some(block) = &model.block {
                save_checkpoint(block, &dir).map_err(|e| io_err(&dir, e))?;
            }
            write_tensor_file(&dir.join("head_w.cbtn"), &model.head_w)?;
            write_tensor_file(&dir.join("head_b.cbtn"), &model.head_b)?;
        }
    }
    check_outcome(report.checks.passed, "run checks")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck => cmd_gradcheck(&cli.common),
        Command::Oracle { count, scm } => cmd_oracle(&cli.common, *count, scm.as_deref()),
        Command::Sweep { ratio_grid } => cmd_sweep(&cli.common, ratio_grid.clone()),
        Command::Run => cmd_run(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
