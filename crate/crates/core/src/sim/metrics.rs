use super::{NodeId, SimTime};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub time: u64,
    pub node: Option<u32>,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsSink {
    records: Vec<MetricRecord>,
    offset_ms: u64,
}

impl MetricsSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Time added to every subsequent record; lets sequential phases share a stream.
    pub fn set_offset(&mut self, offset_ms: u64) {
        self.offset_ms = offset_ms;
    }

    pub fn record(&mut self, time: SimTime, node: Option<NodeId>, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            time: time.0 + self.offset_ms,
            node: node.map(|n| n.0),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn extend(&mut self, other: MetricsSink) {
        self.records.extend(other.records);
    }

    pub fn named<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a MetricRecord> + 'a {
        self.records.iter().filter(move |r| r.metric == metric)
    }

    pub fn count(&self, metric: &str) -> usize {
        self.named(metric).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<MetricRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_shape() {
        let mut m = MetricsSink::new();
        m.record(SimTime(5), Some(NodeId(2)), "loss", 0.5);
        m.record(SimTime(6), None, "elections", 1.0);
        let text = m.to_jsonl();
        assert_eq!(
            text,
            "{\"time\":5,\"node\":2,\"metric\":\"loss\",\"value\":0.5}\n{\"time\":6,\"node\":null,\"metric\":\"elections\",\"value\":1.0}\n"
        );
        assert_eq!(MetricsSink::parse_jsonl(&text).unwrap(), m.records());
    }
}
