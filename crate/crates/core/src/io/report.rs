//! Versioned JSON solve reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::ProblemClass;
use crate::staircase::{LevelRecord, SolveReport, SolveStatus, StaircaseConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Odometry,
    Random,
}

impl std::fmt::Display for InitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMethod::Odometry => "odometry",
            InitMethod::Random => "random",
        })
    }
}

/// Where a run came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub dataset: String,
    pub problem_class: ProblemClass,
    pub init: InitMethod,
    pub seed: u64,
    pub p0: usize,
    pub config: StaircaseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub code_version: String,
    pub dataset: String,
    pub problem_class: ProblemClass,
    pub init: InitMethod,
    pub seed: u64,
    pub p0: usize,
    pub status: SolveStatus,
    pub levels: Vec<LevelRecord>,
    pub sdp_value: Option<f64>,
    pub rounded_value: Option<f64>,
    pub refined_value: Option<f64>,
    /// `f(best feasible) − f_SDP` when the run certified.
    pub suboptimality_bound: Option<f64>,
    pub term_rank: usize,
    pub certified: bool,
    pub opt_time_s: f64,
    pub total_time_s: f64,
    pub config: StaircaseConfig,
}

impl ReportDocument {
    pub fn new(report: &SolveReport, provenance: Provenance) -> Self {
        let best_feasible = match (report.rounded_value, report.refined_value) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let suboptimality_bound = report
            .sdp_value
            .zip(best_feasible)
            .map(|(sdp, f)| crate::certifier::suboptimality_bound(f, sdp));
        Self {
            schema_version: SCHEMA_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: provenance.dataset,
            problem_class: provenance.problem_class,
            init: provenance.init,
            seed: provenance.seed,
            p0: provenance.p0,
            status: report.status,
            levels: report.levels.clone(),
            sdp_value: report.sdp_value,
            rounded_value: report.rounded_value,
            refined_value: report.refined_value,
            suboptimality_bound,
            term_rank: report.term_rank,
            certified: report.certified,
            opt_time_s: report.opt_time_s,
            total_time_s: report.total_time_s,
            config: provenance.config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn write_report(doc: &ReportDocument, path: &Path) -> Result<()> {
    std::fs::write(path, doc.to_json()? + "\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    ReportDocument::from_json(&std::fs::read_to_string(path)?)
}
