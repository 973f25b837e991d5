use std::path::{Path, PathBuf};

use hiercache::config::Config;
use hiercache::engine::{Engine, QueryPath};
use hiercache::trace::{parse_metrics, parse_trace, RunReport, CSV_COLUMNS};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/scenarios")
}

fn corpus() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/corpus/notes.txt")).unwrap()
}

fn engine() -> Engine {
    let cfg = Config::load(&scenarios().join("threshold_raise.conf")).unwrap();
    let mut e = Engine::new(cfg).unwrap();
    e.ingest(&[corpus()], 0).unwrap();
    e
}

#[test]
fn query_paths_progress_from_cold_to_hit() {
    let mut e = engine();
    let q = "When is the next oil change due?";
    let first = e.handle_query(q, 1).unwrap();
    assert_eq!(first.path, QueryPath::ColdMiss);
    assert_eq!(first.l_pre, 0);

    let related = e.handle_query("Which mechanic handles the oil change?", 2).unwrap();
    assert!(matches!(related.path, QueryPath::QkvPartial(_)), "{:?}", related.path);
    assert!(related.l_pre > 0 && related.l_pre < related.l_total);

    let again = e.handle_query(q, 3).unwrap();
    assert_eq!(again.path, QueryPath::QaHit);
    assert_eq!(again.answer, first.answer);
    assert_eq!(again.cost.total_flops(), 0.0);

    let c = e.counters();
    assert_eq!((c.queries, c.qa_hits), (3, 1));
}

#[test]
fn replay_metrics_round_trip_and_report() {
    let mut e = engine();
    let trace = parse_trace(&std::fs::read_to_string(scenarios().join("sweep.trace")).unwrap()).unwrap();
    let records = e.replay(&trace).unwrap();
    assert_eq!(records.len(), trace.len());
    assert!(records.windows(2).all(|w| w[0].seq < w[1].seq));

    let jsonl: String = records.iter().map(|r| r.to_json() + "\n").collect();
    assert_eq!(parse_metrics(&jsonl).unwrap(), records);

    let report = RunReport::from_records(&records);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    for line in lines {
        assert_eq!(line.split(',').count(), CSV_COLUMNS.len(), "{line}");
    }
    let agg = report.aggregates();
    assert_eq!(agg.queries, e.counters().queries);
    assert_eq!(agg.qa_hits, e.counters().qa_hits);
    let by_path: u64 = agg.latency_by_path.values().map(|p| p.count).sum();
    assert_eq!(by_path, agg.queries);
}

#[test]
fn reopened_bank_serves_cached_answers() {
    let tmp = tempfile::tempdir().unwrap();
    let mut e = engine();
    let q = "Why was the Falcon launch delayed?";
    let answer = e.handle_query(q, 1).unwrap().answer;
    e.save(tmp.path()).unwrap();

    let mut back = Engine::open(e.config().clone(), tmp.path()).unwrap();
    assert!(back.degraded().is_empty());
    assert_eq!(back.qa().contents(), e.qa().contents());
    assert_eq!(back.bank().ledger(), e.bank().ledger());
    let hit = back.handle_query(q, 2).unwrap();
    assert_eq!(hit.path, QueryPath::QaHit);
    assert_eq!(hit.answer, answer);
}

#[test]
fn bad_trace_line_is_reported() {
    let err = parse_trace("{\"at\":1,\"kind\":\"idle_tick\",\"budget\":1}\nnot json\n").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}
