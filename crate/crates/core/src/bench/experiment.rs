use super::data::{generate_domain, DomainSpec, LabeledBatch};
use super::model::{evaluate, train, Classifier, ModelKind, TrainConfig};
use crate::cbb::CbbConfig;
use crate::error::{CbbError, Result};
use crate::tensor::linalg::numerical_rank;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const TRAIN_INFER_TOL: f64 = 1e-6;
pub const RANK_REL_TOL: f64 = 1e-8;

/// Everything a run depends on. Serialized verbatim into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    /// Block hyperparameters. `channels` must match the domains; the seed
    /// is replaced per run.
    pub block: CbbConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Run seeds on separate threads. Results are merged in seed order, so
    /// reports do not depend on this flag.
    pub parallel_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let source = DomainSpec::default();
        let target = DomainSpec {
            confounder_label_corr: 0.0,
            seed: 1,
            ..source.clone()
        };
        Self {
            source,
            target,
            block: CbbConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            parallel_seeds: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.seeds.len() < 3 {
            return Err(CbbError::Param(format!(
                "need at least 3 seeds, got {}",
                self.seeds.len()
            )));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CbbError::Param("seed list has duplicates".into()));
        }
        let (s, t) = (&self.source, &self.target);
        if (s.channels, s.height, s.width, s.n_classes, s.pattern_seed)
            != (t.channels, t.height, t.width, t.n_classes, t.pattern_seed)
        {
            return Err(CbbError::Param(
                "source and target must share channels, extents, classes and pattern_seed".into(),
            ));
        }
        if self.block.channels != s.channels {
            return Err(CbbError::Param(format!(
                "block has {} channels, domains have {}",
                self.block.channels, s.channels
            )));
        }
        crate::cbb::basis_count(self.block.channels, self.block.basis_ratio)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model: ModelKind,
    pub epoch_loss: Vec<f64>,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

/// Per-seed consistency checks on the trained block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedChecks {
    /// Max abs difference between the training and inference paths over
    /// both evaluation batches.
    pub train_infer_max_diff: f64,
    /// Largest numerical rank of the flattened `E[X]` over both batches.
    pub expected_x_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub models: Vec<ModelRun>,
    pub checks: SeedChecks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: ModelKind,
    pub domain: String,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub train_infer_tolerance: f64,
    pub train_infer_max_diff: f64,
    pub train_infer_passed: bool,
    pub basis_count: usize,
    pub max_expected_x_rank: usize,
    pub rank_passed: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<Aggregate>,
    pub checks: CheckSummary,
}

/// One row of the flat CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub seed: u64,
    pub model: ModelKind,
    pub domain: String,
    pub accuracy: f64,
}

impl RunReport {
    /// Rows in seed, model, domain order.
    pub fn rows(&self) -> Vec<AccuracyRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            for m in &run.models {
                for (domain, accuracy) in
                    [("source", m.source_accuracy), ("target", m.target_accuracy)]
                {
                    rows.push(AccuracyRow {
                        seed: run.seed,
                        model: m.model,
                        domain: domain.into(),
                        accuracy,
                    });
                }
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn aggregate(&self, model: ModelKind, domain: &str) -> Option<&Aggregate> {
        self.summary
            .iter()
            .find(|a| a.model == model && a.domain == domain)
    }

    /// Accuracies of one model on one domain, in seed order.
    pub fn accuracies(&self, model: ModelKind, domain: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.models.iter().find(|m| m.model == model))
            .map(|m| {
                if domain == "source" {
                    m.source_accuracy
                } else {
                    m.target_accuracy
                }
            })
            .collect()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> CbbError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CbbError::Io(io),
        other => CbbError::Format(format!("csv: {other:?}")),
    }
}

/// Mean, sample standard deviation and median.
pub fn describe(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    (mean, var.sqrt(), median)
}

/// Reports plus the trained models, in seed order.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: RunReport,
    pub models: Vec<(u64, Vec<Classifier>)>,
}

/// SplitMix64 finalizer, used to derive independent per-seed streams.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Domain batches for one seed: the domain seeds are mixed with the run seed
/// so different runs see different samples of the same distributions.
pub fn seed_domains(cfg: &ExperimentConfig, seed: u64) -> Result<(LabeledBatch, LabeledBatch)> {
    let source = generate_domain(&DomainSpec {
        seed: mix(cfg.source.seed, seed),
        ..cfg.source.clone()
    })?;
    let target = generate_domain(&DomainSpec {
        seed: mix(cfg.target.seed, seed),
        ..cfg.target.clone()
    })?;
    Ok((source, target))
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedRun, Vec<Classifier>)> {
    let (source, target) = seed_domains(cfg, seed)?;
    let mut models = Vec::new();
    let mut runs = Vec::new();
    let mut checks = SeedChecks {
        train_infer_max_diff: 0.0,
        expected_x_rank: 0,
    };
    for kind in [ModelKind::Baseline, ModelKind::Cbb] {
        let mut model = Classifier::init(
            kind,
            &cfg.block,
            cfg.source.n_classes,
            cfg.source.height,
            cfg.source.width,
            mix(seed, 1),
        )?;
        let log = train(&mut model, &source, &cfg.train, mix(seed, 2))?;
        runs.push(ModelRun {
            model: kind,
            epoch_loss: log.epoch_loss,
            source_accuracy: evaluate(&model, &source)?,
            target_accuracy: evaluate(&model, &target)?,
        });
        for batch in [&source, &target] {
            if let (Some(train_out), Some(parts)) = (
                model.block_forward(&batch.features)?,
                model.block_infer(&batch.features)?,
            ) {
                checks.train_infer_max_diff = checks
                    .train_infer_max_diff
                    .max(train_out.max_abs_diff(&parts.output));
                let c = parts.expected_x.shape()[2];
                let flat = parts
                    .expected_x
                    .reshape([parts.expected_x.numel() / c, c])?;
                checks.expected_x_rank = checks
                    .expected_x_rank
                    .max(numerical_rank(&flat, RANK_REL_TOL)?);
            }
        }
        models.push(model);
    }
    Ok((
        SeedRun {
            seed,
            models: runs,
            checks,
        },
        models,
    ))
}

/// Trains and evaluates both models for every seed and aggregates the
/// results.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let per_seed: Vec<Result<(SeedRun, Vec<Classifier>)>> = if cfg.parallel_seeds {
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&s| scope.spawn(move || run_seed(cfg, s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        })
    } else {
        cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect()
    };
    let mut runs = Vec::with_capacity(per_seed.len());
    let mut models = Vec::with_capacity(per_seed.len());
    for r in per_seed {
        let (run, trained) = r?;
        models.push((run.seed, trained));
        runs.push(run);
    }

    let mut report = RunReport {
        config: cfg.clone(),
        runs,
        summary: Vec::new(),
        checks: CheckSummary {
            train_infer_tolerance: TRAIN_INFER_TOL,
            train_infer_max_diff: 0.0,
            train_infer_passed: false,
            basis_count: crate::cbb::basis_count(cfg.block.channels, cfg.block.basis_ratio)?,
            max_expected_x_rank: 0,
            rank_passed: false,
            passed: false,
        },
    };
    for model in [ModelKind::Baseline, ModelKind::Cbb] {
        for domain in ["source", "target"] {
            let (mean, std, median) = describe(&report.accuracies(model, domain));
            report.summary.push(Aggregate {
                model,
                domain: domain.into(),
                mean,
                std,
                median,
            });
        }
    }
    let c = &mut report.checks;
    c.train_infer_max_diff = report
        .runs
        .iter()
        .map(|r| r.checks.train_infer_max_diff)
        .fold(0.0, f64::max);
    c.max_expected_x_rank = report
        .runs
        .iter()
        .map(|r| r.checks.expected_x_rank)
        .max()
        .unwrap_or(0);
    c.train_infer_passed = c.train_infer_max_diff <= TRAIN_INFER_TOL;
    c.rank_passed = c.max_expected_x_rank <= c.basis_count;
    c.passed = c.train_infer_passed && c.rank_passed;
    Ok(ExperimentOutput { report, models })
}
