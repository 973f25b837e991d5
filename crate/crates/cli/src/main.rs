use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hiercache::config::Config;
use hiercache::engine::Engine;
use hiercache::trace::{parse_metrics, parse_trace, EventRecord, RunReport};

#[derive(Parser)]
#[command(name = "hiercache", version, about = "Ingest a corpus, replay traces and summarise cache metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk and embed a corpus file into a bank directory.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a trace against a bank and write per-event metrics.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Per-event CSV report.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics; defaults to the report path with a `.jsonl` extension.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write the final cache state back into the bank directory.
        #[arg(long)]
        save_bank: bool,
    },
    /// Summarise a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Machine-readable `metric,value` output.
        #[arg(long)]
        csv: bool,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Ingest { corpus, bank, config } => ingest(&corpus, &bank, config.as_deref()),
        Command::Replay {
            trace,
            bank,
            config,
            out,
            metrics,
            save_bank,
        } => replay(&trace, &bank, &config, &out, metrics, save_bank),
        Command::Report { metrics, csv } => report(&metrics, csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    cfg.apply_seed_env()?;
    Ok(cfg)
}

fn ingest(corpus: &Path, bank: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let text = std::fs::read_to_string(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let mut engine = Engine::open(cfg, bank)?;
    engine.ingest(&[text], 0)?;
    engine.save(bank)?;
    println!("{} chunks", engine.bank().chunks.len());
    Ok(())
}

fn replay(
    trace: &Path,
    bank: &Path,
    config: &Path,
    out: &Path,
    metrics: Option<PathBuf>,
    save_bank: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(Some(config))?;
    if !bank.is_dir() {
        bail!("bank directory {} does not exist; run `ingest` first", bank.display());
    }
    let text = std::fs::read_to_string(trace).with_context(|| format!("reading trace {}", trace.display()))?;
    let events = parse_trace(&text).with_context(|| format!("in trace {}", trace.display()))?;
    let mut engine = Engine::open(cfg, bank)?;
    let records = engine.replay(&events)?;

    std::fs::write(out, RunReport::from_records(&records).to_csv())
        .with_context(|| format!("writing {}", out.display()))?;
    let metrics = metrics.unwrap_or_else(|| out.with_extension("jsonl"));
    let lines: String = records.iter().map(|r| r.to_json() + "\n").collect();
    std::fs::write(&metrics, lines).with_context(|| format!("writing {}", metrics.display()))?;
    if save_bank {
        engine.save(bank)?;
    }
    let c = engine.counters();
    println!(
        "{} events, {} queries, {} QA hits, {} QKV hits",
        records.len(),
        c.queries,
        c.qa_hits,
        c.qkv_hits
    );
    Ok(())
}

fn report(path: &Path, csv: bool) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading metrics {}", path.display()))?;
    let records = parse_metrics(&text).with_context(|| format!("in metrics {}", path.display()))?;
    print!("{}", if csv { summary_csv(&records) } else { summary_text(&records) });
    Ok(())
}

struct Storage {
    peak_qkv: u64,
    final_qkv: u64,
    final_qa: u64,
}

fn storage(records: &[EventRecord]) -> Storage {
    Storage {
        peak_qkv: records.iter().map(|r| r.qkv_used_bytes).max().unwrap_or(0),
        final_qkv: records.last().map_or(0, |r| r.qkv_used_bytes),
        final_qa: records.last().map_or(0, |r| r.qa_used_bytes),
    }
}

fn summary_csv(records: &[EventRecord]) -> String {
    let a = RunReport::from_records(records).aggregates();
    let s = storage(records);
    let mut out = String::from("metric,value\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(out, "{k},{v}");
    };
    row("queries", a.queries.to_string());
    row("qa_hits", a.qa_hits.to_string());
    row("qa_hit_rate", a.qa_hit_rate.to_string());
    row("qkv_hits", a.qkv_hits.to_string());
    row("qkv_hit_rate", a.qkv_hit_rate.to_string());
    row("mean_latency_ms", a.mean_latency_ms.to_string());
    row("total_flops", a.total_flops.to_string());
    for (path, p) in &a.latency_by_path {
        row(&format!("path.{path}.count"), p.count.to_string());
        row(&format!("path.{path}.mean_ms"), p.mean_ms.to_string());
    }
    row("storage.peak_qkv_bytes", s.peak_qkv.to_string());
    row("storage.final_qkv_bytes", s.final_qkv.to_string());
    row("storage.final_qa_bytes", s.final_qa.to_string());
    out
}

fn summary_text(records: &[EventRecord]) -> String {
    let a = RunReport::from_records(records).aggregates();
    let s = storage(records);
    let mut out = String::new();
    let _ = writeln!(out, "queries          {}", a.queries);
    let _ = writeln!(out, "QA hits          {} (rate {:.3})", a.qa_hits, a.qa_hit_rate);
    let _ = writeln!(out, "QKV hits         {} (rate {:.3} of model-served)", a.qkv_hits, a.qkv_hit_rate);
    let _ = writeln!(out, "mean latency ms  {:.3}", a.mean_latency_ms);
    let _ = writeln!(out, "total FLOPs      {:.6e}", a.total_flops);
    let _ = writeln!(out, "\nlatency by path");
    let _ = writeln!(out, "  {:<12} {:>7} {:>12}", "path", "count", "mean_ms");
    for (path, p) in &a.latency_by_path {
        let _ = writeln!(out, "  {:<12} {:>7} {:>12.3}", path, p.count, p.mean_ms);
    }
    let _ = writeln!(out, "\nstorage (peak QKV {} bytes, final QKV {} bytes, final QA {} bytes)", s.peak_qkv, s.final_qkv, s.final_qa);
    let _ = writeln!(
        out,
        "  {:>5} {:>8} {:<7} {:>12} {:>12} {:>10} {:>8}",
        "seq", "at", "event", "qkv_used", "qkv_limit", "qa_used", "entries"
    );
    for r in records {
        let _ = writeln!(
            out,
            "  {:>5} {:>8} {:<7} {:>12} {:>12} {:>10} {:>8}",
            r.seq, r.at, r.event, r.qkv_used_bytes, r.qkv_limit_bytes, r.qa_used_bytes, r.qa_entries
        );
    }
    out
}
