//! Declarative scenarios: a TOML file describes topology, faults, a script
//! of data operations, training jobs and the checks a run must pass.

pub mod pool;
pub mod report;
pub mod run;
pub mod scenario;

pub use pool::{select_machine_pool, Candidate, PoolCriteria, PoolError, PoolWeights, Selected};
pub use report::{JobSummary, Summary};
pub use run::{run_scenario, AssertionResult, HarnessError, JobOutcome, JobStatus, OpOutcome, RunOutput};
pub use scenario::{Scenario, ScenarioError};

use std::io;
use std::path::Path;

impl RunOutput {
    /// Writes `metrics.jsonl`, `ledger.csv`, the report tables and
    /// `summary.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.jsonl"), self.metrics_jsonl())?;
        std::fs::write(dir.join("ledger.csv"), &self.ledger_csv)?;
        let summary = Summary::from_records(&self.metrics);
        for (name, body) in summary.tables() {
            std::fs::write(dir.join(name), body)?;
        }
        let mut text = summary.to_text();
        text.push_str("checks:\n");
        for a in &self.assertions {
            let mark = if a.passed { "pass" } else { "FAIL" };
            text.push_str(&format!("  {mark} {}{}\n", a.check, if a.detail.is_empty() { String::new() } else { format!(": {}", a.detail) }));
        }
        std::fs::write(dir.join("summary.txt"), text)
    }
}
