//! `mvacon gradcheck`: central differences over every registered computation.

use std::path::Path;

use mvacon_core::verify::{CaseResult, CheckSettings, Registry};

use crate::error::Result;
use crate::output::LineFile;

pub const REPORT_FILE: &str = "gradcheck.csv";

/// Runs the registry and writes one CSV row per case.
pub fn gradcheck(registry: &Registry, settings: &CheckSettings, out: &Path, hash: &str) -> Result<Vec<CaseResult>> {
    let results = registry.run(settings)?;
    let mut csv = LineFile::csv(&out.join(REPORT_FILE), hash, "case,max_rel_error,checked,worst,passed")?;
    for r in &results {
        let worst = r
            .report
            .worst
            .as_ref()
            .map_or_else(String::new, |(n, i)| format!("{n}[{i}]"));
        csv.line(&format!(
            "{},{:e},{},{},{}",
            r.name, r.report.max_rel_error, r.report.checked, worst, r.passed
        ))?;
    }
    Ok(results)
}

pub fn all_passed(results: &[CaseResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.passed)
}
