//! Trace events in, metrics records and CSV reports out.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CostReport;
use crate::scheduler::TickReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    QueryArrival { text: String },
    ChunkArrival { text: String },
    ConfigChange { field: String, value: serde_json::Value },
    IdleTick { budget: f64 },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::QueryArrival { .. } => "query",
            EventKind::ChunkArrival { .. } => "chunk",
            EventKind::ConfigChange { .. } => "config",
            EventKind::IdleTick { .. } => "idle",
        }
    }
}

/// Config values may be written as JSON strings, numbers or booleans.
pub fn config_value_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a JSON-lines trace. Blank lines are skipped; errors name the 1-based line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent = serde_json::from_str(line).map_err(|e| Error::Trace {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}

/// One metrics line per processed event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: u64,
    pub event: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_pre: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_tokens: Option<usize>,
    #[serde(flatten)]
    pub cost: CostReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks_added: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_marked: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<TickReport>,
    pub strategy: String,
    pub qkv_used_bytes: u64,
    pub qkv_limit_bytes: u64,
    pub qa_used_bytes: u64,
    pub qa_entries: usize,
    pub tree_nodes: usize,
    pub queries: u64,
    pub qa_hits: u64,
    pub qkv_hits: u64,
}

impl EventRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<EventRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            file: "metrics".into(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const CSV_COLUMNS: [&str; 16] = [
    "seq",
    "at",
    "event",
    "path",
    "matched_count",
    "l_pre",
    "l_total",
    "similarity",
    "prefill_flops",
    "decode_flops",
    "prefill_ms",
    "decode_ms",
    "match_ms",
    "load_ms",
    "embed_ms",
    "total_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub seq: u64,
    pub at: u64,
    pub event: String,
    pub path: Option<String>,
    pub matched_count: Option<usize>,
    pub l_pre: Option<usize>,
    pub l_total: Option<usize>,
    pub similarity: Option<f64>,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathStats {
    pub count: u64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregates {
    pub queries: u64,
    pub qa_hits: u64,
    pub qa_hit_rate: f64,
    /// Queries that reached the model with at least one chunk slice reused.
    pub qkv_hits: u64,
    /// `qkv_hits` over queries that reached the model.
    pub qkv_hit_rate: f64,
    pub mean_latency_ms: f64,
    pub latency_by_path: BTreeMap<String, PathStats>,
    pub total_flops: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn from_records(records: &[EventRecord]) -> Self {
        RunReport {
            rows: records
                .iter()
                .map(|r| ReportRow {
                    seq: r.seq,
                    at: r.at,
                    event: r.event.clone(),
                    path: r.path.clone(),
                    matched_count: r.matched_count,
                    l_pre: r.l_pre,
                    l_total: r.l_total,
                    similarity: r.similarity,
                    cost: r.cost,
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let c = &r.cost;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.seq,
                r.at,
                r.event,
                opt(&r.path),
                opt(&r.matched_count),
                opt(&r.l_pre),
                opt(&r.l_total),
                opt(&r.similarity),
                c.prefill_flops,
                c.decode_flops,
                c.prefill_ms,
                c.decode_ms,
                c.match_ms,
                c.load_ms,
                c.embed_ms,
                c.total_ms()
            );
        }
        out
    }

    pub fn aggregates(&self) -> Aggregates {
        let mut a = Aggregates::default();
        let mut sums: BTreeMap<String, (u64, f64)> = BTreeMap::new();
        let mut served = 0u64;
        let mut total_ms = 0.0;
        for r in &self.rows {
            a.total_flops += r.cost.total_flops();
            let Some(path) = &r.path else { continue };
            a.queries += 1;
            total_ms += r.cost.total_ms();
            let e = sums.entry(path.clone()).or_default();
            e.0 += 1;
            e.1 += r.cost.total_ms();
            if path == "qa_hit" {
                a.qa_hits += 1;
            } else {
                served += 1;
                if r.matched_count.unwrap_or(0) > 0 {
                    a.qkv_hits += 1;
                }
            }
        }
        a.qa_hit_rate = ratio(a.qa_hits, a.queries);
        a.qkv_hit_rate = ratio(a.qkv_hits, served);
        a.mean_latency_ms = if a.queries == 0 { 0.0 } else { total_ms / a.queries as f64 };
        a.latency_by_path = sums
            .into_iter()
            .map(|(k, (n, s))| {
                (
                    k,
                    PathStats {
                        count: n,
                        mean_ms: s / n as f64,
                    },
                )
            })
            .collect();
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_event_kinds() {
        let text = r#"{"at":1,"kind":"query_arrival","text":"When is the offsite?"}
{"at":2,"kind":"chunk_arrival","text":"New note."}

{"at":3,"kind":"config_change","field":"tau_query","value":0.9}
{"at":4,"kind":"config_change","field":"scheduler","value":"off"}
{"at":5,"kind":"idle_tick","budget":1e9}"#;
        let evs = parse_trace(text).unwrap();
        assert_eq!(evs.len(), 5);
        assert_eq!(evs[0].kind, EventKind::QueryArrival { text: "When is the offsite?".into() });
        match &evs[2].kind {
            EventKind::ConfigChange { field, value } => {
                assert_eq!(field, "tau_query");
                assert_eq!(config_value_string(value), "0.9");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(evs[4].kind.label(), "idle");
    }

    #[test]
    fn bad_line_is_reported() {
        let err = parse_trace("{\"at\":1,\"kind\":\"idle_tick\",\"budget\":1}\n{\"at\":2,\"kind\":\"nap\"}").unwrap_err();
        assert!(matches!(err, Error::Trace { line: 2, .. }));
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(RunReport::default().to_csv(), format!("{}\n", CSV_COLUMNS.join(",")));
    }
}
