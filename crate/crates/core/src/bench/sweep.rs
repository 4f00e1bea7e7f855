use super::experiment::{
    csv_err, run_experiment, Aggregate, CheckSummary, ExperimentConfig, RunReport,
};
use super::model::ModelKind;
use crate::error::{CbbError, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Basis ratios swept by default.
pub const DEFAULT_RATIO_GRID: [f64; 5] = [0.9, 0.7, 0.5, 0.25, 0.125];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub model: ModelKind,
    pub domain: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub ratio: f64,
    pub summary: Vec<Aggregate>,
    pub checks: CheckSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: ExperimentConfig,
    pub ratios: Vec<RatioSummary>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub reports: Vec<(f64, RunReport)>,
}

/// Runs the experiment once per basis ratio, in grid order.
pub fn run_sweep(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<SweepOutput> {
    if ratios.is_empty() {
        return Err(CbbError::Param("ratio grid is empty".into()));
    }
    for &r in ratios {
        crate::cbb::basis_count(cfg.block.channels, r)?;
    }
    let reports = ratios
        .iter()
        .map(|&ratio| {
            let mut c = cfg.clone();
            c.block.basis_ratio = ratio;
            Ok((ratio, run_experiment(&c)?.report))
        })
        .collect::<Result<_>>()?;
    Ok(SweepOutput { reports })
}

impl SweepOutput {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.reports
            .iter()
            .flat_map(|(ratio, report)| {
                report.rows().into_iter().map(move |r| SweepRow {
                    ratio: *ratio,
                    seed: r.seed,
                    model: r.model,
                    domain: r.domain,
                    accuracy: r.accuracy,
                })
            })
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(|(_, r)| r.checks.passed)
    }

    pub fn summary(&self, cfg: &ExperimentConfig) -> SweepSummary {
        SweepSummary {
            config: cfg.clone(),
            ratios: self
                .reports
                .iter()
                .map(|(ratio, r)| RatioSummary {
                    ratio: *ratio,
                    summary: r.summary.clone(),
                    checks: r.checks.clone(),
                })
                .collect(),
            passed: self.passed(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in self.rows() {
            out.serialize(row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
