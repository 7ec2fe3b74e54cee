//! Summaries computed from a metric stream alone, so a saved run can be
//! reported without re-running it.

use crate::sim::MetricRecord;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JobSummary {
    pub index: usize,
    pub started_ms: u64,
    pub rejected: bool,
    pub finished: bool,
    pub steps_committed: usize,
    pub ranks_lost: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// `(time, loss)` in network time.
    pub loss: Vec<(u64, f64)>,
    /// `(time, ms since the previous commit)`.
    pub step_latency: Vec<(u64, f64)>,
    pub mean_step_ms: Option<f64>,
    pub rewards: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub end_ms: u64,
    pub counts: BTreeMap<String, usize>,
    pub jobs: Vec<JobSummary>,
    /// Final balance per node.
    pub balances: BTreeMap<u32, f64>,
    pub safety_violations: Option<f64>,
}

impl Summary {
    /// Jobs are delimited by their `job_started` markers; a record belongs
    /// to the most recent job started on or before it.
    pub fn from_records(records: &[MetricRecord]) -> Summary {
        let mut s = Summary::default();
        let mut starts: Vec<(u64, usize)> = records
            .iter()
            .filter(|r| r.metric == "job_started")
            .map(|r| (r.time, r.value as usize))
            .collect();
        starts.sort();
        for (t, i) in &starts {
            s.jobs.push(JobSummary { index: *i, started_ms: *t, ..Default::default() });
        }
        let job_at = |t: u64| starts.iter().rposition(|(st, _)| *st <= t);
        for r in records {
            s.end_ms = s.end_ms.max(r.time);
            *s.counts.entry(r.metric.clone()).or_default() += 1;
            match r.metric.as_str() {
                "coin_balance" => {
                    if let Some(n) = r.node {
                        s.balances.insert(n, r.value);
                    }
                }
                "safety_violations" => s.safety_violations = Some(r.value),
                _ => {}
            }
            let Some(j) = job_at(r.time).map(|i| &mut s.jobs[i]) else { continue };
            match r.metric.as_str() {
                "job_rejected" => j.rejected = true,
                "job_finished" => j.finished = true,
                "step_committed" => j.steps_committed += 1,
                "rank_lost" => j.ranks_lost += 1,
                "train_loss" => j.loss.push((r.time, r.value)),
                "step_latency_ms" => j.step_latency.push((r.time, r.value)),
                "training_reward" => j.rewards += r.value,
                _ => {}
            }
        }
        for j in &mut s.jobs {
            j.first_loss = j.loss.first().map(|l| l.1);
            j.last_loss = j.loss.last().map(|l| l.1);
            if !j.step_latency.is_empty() {
                j.mean_step_ms = Some(j.step_latency.iter().map(|l| l.1).sum::<f64>() / j.step_latency.len() as f64);
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "simulated time: {} ms", self.end_ms);
        if let Some(v) = self.safety_violations {
            let _ = writeln!(out, "safety violations: {v}");
        }
        for j in &self.jobs {
            let state = if j.rejected {
                "rejected"
            } else if j.finished {
                "finished"
            } else {
                "unfinished"
            };
            let _ = writeln!(out, "job {} at {} ms: {state}", j.index, j.started_ms);
            if j.rejected {
                continue;
            }
            let _ = writeln!(out, "  steps committed: {}, ranks lost: {}", j.steps_committed, j.ranks_lost);
            if let (Some(a), Some(b)) = (j.first_loss, j.last_loss) {
                let _ = writeln!(out, "  loss: {a:.5} -> {b:.5}");
            }
            if let Some(m) = j.mean_step_ms {
                let _ = writeln!(out, "  mean step latency: {m:.1} ms");
            }
            let _ = writeln!(out, "  training rewards: {:.6}", j.rewards);
        }
        if !self.balances.is_empty() {
            let _ = writeln!(out, "balances:");
            for (n, b) in &self.balances {
                let _ = writeln!(out, "  n{n}: {b:.6}");
            }
        }
        let _ = writeln!(out, "event counts:");
        for (m, c) in &self.counts {
            let _ = writeln!(out, "  {m}: {c}");
        }
        out
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("job,time_ms,loss\n");
        for j in &self.jobs {
            for (t, l) in &j.loss {
                let _ = writeln!(out, "{},{t},{l}", j.index);
            }
        }
        out
    }

    pub fn step_latency_csv(&self) -> String {
        let mut out = String::from("job,time_ms,step_ms\n");
        for j in &self.jobs {
            for (t, l) in &j.step_latency {
                let _ = writeln!(out, "{},{t},{l}", j.index);
            }
        }
        out
    }

    pub fn balances_csv(&self) -> String {
        let mut out = String::from("node,balance\n");
        for (n, b) in &self.balances {
            let _ = writeln!(out, "{n},{b}");
        }
        out
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("metric,count\n");
        for (m, c) in &self.counts {
            let _ = writeln!(out, "{m},{c}");
        }
        out
    }

    /// `(file name, contents)` of every table.
    pub fn tables(&self) -> Vec<(&'static str, String)> {
        vec![
            ("loss.csv", self.loss_csv()),
            ("step_latency.csv", self.step_latency_csv()),
            ("balances.csv", self.balances_csv()),
            ("counts.csv", self.counts_csv()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(time: u64, node: Option<u32>, metric: &str, value: f64) -> MetricRecord {
        MetricRecord { time, node, metric: metric.into(), value }
    }

    #[test]
    fn records_are_grouped_by_job_start() {
        let records = vec![
            rec(0, None, "peer_joined", 1.0),
            rec(10, Some(3), "job_started", 0.0),
            rec(20, Some(3), "train_loss", 2.0),
            rec(30, Some(3), "train_loss", 1.0),
            rec(30, Some(3), "step_committed", 1.0),
            rec(40, Some(3), "job_finished", 0.0),
            rec(50, Some(3), "job_started", 1.0),
            rec(50, Some(3), "job_rejected", 1.0),
            rec(60, Some(4), "coin_balance", 7.5),
        ];
        let s = Summary::from_records(&records);
        assert_eq!(s.jobs.len(), 2);
        assert!(s.jobs[0].finished && !s.jobs[0].rejected);
        assert_eq!((s.jobs[0].first_loss, s.jobs[0].last_loss), (Some(2.0), Some(1.0)));
        assert!(s.jobs[1].rejected);
        assert_eq!(s.balances.get(&4), Some(&7.5));
        assert_eq!(s.counts["train_loss"], 2);
        assert!(s.loss_csv().contains("0,30,1\n"));
    }
}
