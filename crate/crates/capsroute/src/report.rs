//! JSON verification report. The layout is pinned by
//! `schema/verify-report.schema.json`.

use capsroute_core::routing::fm_agreement;
use capsroute_core::verify::{self, FmFn, SuiteOutcome};
use serde::Serialize;

pub const SCHEMA: &str = include_str!("../schema/verify-report.schema.json");
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub passed: bool,
    /// `null` when the suite could not produce a finite error measure.
    pub worst_error: Option<f64>,
    pub instances: usize,
    pub detail: String,
}

impl From<SuiteOutcome> for SuiteEntry {
    fn from(s: SuiteOutcome) -> Self {
        SuiteEntry {
            name: s.name,
            passed: s.passed,
            worst_error: s.worst_error.is_finite().then_some(s.worst_error),
            instances: s.instances,
            detail: s.detail,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub version: u32,
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteEntry>,
}

/// Runs every suite with `fm` standing in for the agreement operator.
pub fn verify_with(fm: FmFn, seed: u64) -> VerifyReport {
    let suites: Vec<SuiteEntry> = verify::run_all_with(fm, seed)
        .into_iter()
        .map(SuiteEntry::from)
        .collect();
    VerifyReport {
        version: REPORT_VERSION,
        seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}

pub fn verify(seed: u64) -> VerifyReport {
    verify_with(fm_agreement, seed)
}
