//! `ugovor`: contract validation, corpus generation, trace-driven replay,
//! standalone endpoint modes, and analytics over replay reports.
//!
//! Configuration precedence for tunables: command-line flags beat
//! `UGOVOR_*` environment variables, which beat the optional `--config`
//! JSON file, which beats built-in defaults.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ugovor_core::analytics;
use ugovor_core::auditor::AuditorConfig;
use ugovor_core::server_monitor::MonitorConfig;
use ugovor_core::virtual_buffer::DEFAULT_INSERTION_ALLOWANCE_S;
use ugovor_core::Contract;
use ugovor_harness::endpoints::auditor_service::{
    AuditorService, AuditorServiceConfig, InboundDelays,
};
use ugovor_harness::endpoints::client::{run_client, ClientConfig};
use ugovor_harness::endpoints::monitor_service::{MonitorService, MonitorServiceConfig};
use ugovor_harness::endpoints::video_server::{VideoServer, VideoServerConfig};
use ugovor_harness::replay::{replay, ReplayOptions};
use ugovor_harness::report::{load_reports, save_reports};
use ugovor_harness::trace::{
    chunk_map_for, generate_synthetic, load_traces, save_traces, CorpusParams, LatencyProfile,
};
use ugovor_harness::SessionClock;

/// An example three-level agreement: at the strictest level at most half
/// the window in 720p, loosening to 0.7 and 0.9, with rebuffering caps
/// rising from 1 to 10 per level.
const DEFAULT_CONTRACT: &str = r#"{ "window"      : 120,
  "resolution"  : [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                   [["720p", 0.7], ["1080p", 1], ["4K", 1]],
                   [["720p", 0.9], ["1080p", 1], ["4K", 1]]],
  "rebuffering" : [1, 5, 10] }
"#;

#[derive(Parser)]
#[command(
    name = "ugovor",
    version,
    about = "Multilateral streaming-contract monitoring"
)]
struct Cli {
    /// JSON file with default values for the tunable knobs.
    #[arg(long, global = true, env = "UGOVOR_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Tunables {
    /// Client insertion-delay allowance agreed at bootstrap, milliseconds.
    #[arg(long, env = "UGOVOR_C_MS")]
    c_ms: Option<f64>,
    /// Delayed-ack detection: flagging ratio.
    #[arg(long, env = "UGOVOR_THETA")]
    theta: Option<f64>,
    /// Delayed-ack detection: chunks per observation window.
    #[arg(long, env = "UGOVOR_WINDOW_CHUNKS")]
    window_chunks: Option<usize>,
    /// Auditor reply budget, session seconds.
    #[arg(long, env = "UGOVOR_REPLY_TIMEOUT_S")]
    reply_timeout_s: Option<f64>,
    /// Grace period for the second party to corroborate a reset.
    #[arg(long, env = "UGOVOR_RESET_GRACE_S")]
    reset_grace_s: Option<f64>,
}

#[derive(serde::Deserialize, Default)]
struct FileConfig {
    c_ms: Option<f64>,
    theta: Option<f64>,
    window_chunks: Option<usize>,
    reply_timeout_s: Option<f64>,
    reset_grace_s: Option<f64>,
}

struct Resolved {
    monitor_cfg: MonitorConfig,
    auditor_cfg: AuditorConfig,
}

fn resolve(tunables: &Tunables, config: &Option<PathBuf>) -> Result<Resolved, String> {
    let file: FileConfig = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("config {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let monitor_defaults = MonitorConfig::default();
    let auditor_defaults = AuditorConfig::default();
    Ok(Resolved {
        monitor_cfg: MonitorConfig {
            insertion_allowance_s: tunables
                .c_ms
                .or(file.c_ms)
                .map(|ms| ms / 1000.0)
                .unwrap_or(DEFAULT_INSERTION_ALLOWANCE_S),
            theta: tunables
                .theta
                .or(file.theta)
                .unwrap_or(monitor_defaults.theta),
            ack_window_chunks: tunables
                .window_chunks
                .or(file.window_chunks)
                .unwrap_or(monitor_defaults.ack_window_chunks),
            hold_s: monitor_defaults.hold_s,
        },
        auditor_cfg: AuditorConfig {
            reply_timeout_s: tunables
                .reply_timeout_s
                .or(file.reply_timeout_s)
                .unwrap_or(auditor_defaults.reply_timeout_s),
            reset_grace_s: tunables
                .reset_grace_s
                .or(file.reset_grace_s)
                .unwrap_or(auditor_defaults.reset_grace_s),
        },
    })
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a contract document.
    ValidateContract { file: PathBuf },
    /// Write the built-in example contract.
    InitContract {
        #[arg(long, default_value = "contract.json")]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic corpus.
    GenCorpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 384)]
        sessions: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of sessions with at least one rebuffering.
        #[arg(long, default_value_t = 0.125)]
        rebuffer_fraction: f64,
        /// Median session length, seconds.
        #[arg(long, default_value_t = 60.0)]
        duration_median_s: f64,
        /// Restrict the ladder to a single resolution.
        #[arg(long)]
        only_resolution: Option<String>,
        /// Also write the server configuration map next to the corpus.
        #[arg(long)]
        emit_chunkmap: Option<PathBuf>,
    },
    /// Replay a trace through all endpoints on loopback.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        contract: PathBuf,
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Override every session's latency profile: "base_ms[:jitter_ms]".
        #[arg(long)]
        latency: Option<String>,
        /// Wall seconds per session second (time compression).
        #[arg(long, env = "UGOVOR_TIME_SCALE", default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long, env = "UGOVOR_CONCURRENCY", default_value_t = 8)]
        concurrency: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Strip wall-derived values so identical inputs give identical files.
        #[arg(long)]
        deterministic: bool,
        /// Leave the client unmonitored.
        #[arg(long)]
        no_client_monitor: bool,
        /// Leave the server unmonitored.
        #[arg(long)]
        no_server_monitor: bool,
        /// Persist auditor logs here.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[command(flatten)]
        tunables: Tunables,
    },
    /// Standalone auditor for multi-host runs.
    ServeAuditor {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        log_dir: PathBuf,
        #[command(flatten)]
        tunables: Tunables,
    },
    /// Standalone server-monitor core fed by a remote sniffer.
    ServeServerMonitor {
        /// Sniffer stream listen address.
        #[arg(long)]
        listen: String,
        #[arg(long)]
        auditor: String,
        /// Server configuration map (from gen-corpus --emit-chunkmap).
        #[arg(long)]
        chunkmap: PathBuf,
        #[arg(long)]
        contract: PathBuf,
        #[command(flatten)]
        tunables: Tunables,
    },
    /// Standalone dummy-payload video server with its sniffer.
    ServeVideo {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        contract: PathBuf,
        #[arg(long)]
        auditor: String,
        /// Server-monitor sniffer address.
        #[arg(long)]
        sniffer: String,
    },
    /// Standalone client(s) replaying against a remote video server.
    RunClient {
        #[arg(long)]
        server: String,
        #[arg(long)]
        trace: PathBuf,
        /// Only this session from the trace.
        #[arg(long)]
        session: Option<String>,
        /// Inject the trace's latency profiles locally (loopback runs).
        #[arg(long)]
        inject_latency: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Aggregate statistics and reports.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Sample size for estimating a proportion.
    SampleSize {
        #[arg(long)]
        confidence: f64,
        #[arg(long)]
        margin: f64,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Distribution tables: switches/min, durations, rebuffer counts and
    /// durations; plus per-group quantiles.
    Cdf {
        /// Trace file to summarize nominally.
        #[arg(long, conflicts_with = "report")]
        trace: Option<PathBuf>,
        /// Replay report to summarize as observed.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also bucket mean active-stream quality over time, seconds.
        #[arg(long)]
        time_bucket_s: Option<f64>,
    },
    /// Per-group fraction of sessions satisfying their contract.
    Satisfaction {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Client duration vs server bound ratios for confirmed rebufferings.
    Bounds {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Price sessions from their per-window outcomes.
    Price {
        #[arg(long)]
        report: PathBuf,
        /// Per-level price per window, e.g. "1.0,0.5,0.25".
        #[arg(long)]
        schedule: String,
        /// Price of an exhausted window.
        #[arg(long, default_value_t = 0.0)]
        exhausted: f64,
    },
    /// Session outcomes from a directory of auditor logs.
    Summary {
        #[arg(long)]
        log_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            let _ = writeln!(std::io::stderr(), "{}", serde_json::json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::ValidateContract { file } => {
            let text =
                std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            let contract = Contract::parse(&text).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({
                    "ok": true,
                    "window_s": contract.window_s(),
                    "levels": contract.level_count(),
                    "rebuffering": contract.rebuffering_caps(),
                })
            );
            Ok(())
        }
        Command::InitContract { out } => {
            Contract::parse(DEFAULT_CONTRACT).expect("built-in contract parses");
            std::fs::write(&out, DEFAULT_CONTRACT).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::GenCorpus {
            seed,
            sessions,
            out,
            rebuffer_fraction,
            duration_median_s,
            only_resolution,
            emit_chunkmap,
        } => {
            let mut params = CorpusParams {
                sessions,
                rebuffer_session_fraction: rebuffer_fraction,
                duration_median_s,
                ..Default::default()
            };
            if let Some(label) = only_resolution {
                params.ladder.retain(|r| r.label == label);
                if params.ladder.is_empty() {
                    return Err(format!("unknown resolution {label:?}"));
                }
            }
            let corpus = generate_synthetic(&params, seed).map_err(|e| e.to_string())?;
            save_traces(&out, &corpus).map_err(|e| e.to_string())?;
            if let Some(map_path) = emit_chunkmap {
                let map = chunk_map_for(&corpus).map_err(|e| e.to_string())?;
                let text = serde_json::to_string(&map).map_err(|e| e.to_string())?;
                std::fs::write(&map_path, text).map_err(|e| e.to_string())?;
            }
            println!(
                "{}",
                serde_json::json!({ "sessions": corpus.len(), "out": out.display().to_string() })
            );
            Ok(())
        }
        Command::Replay {
            trace,
            contract,
            faults,
            latency,
            time_scale,
            concurrency,
            seed,
            out,
            deterministic,
            no_client_monitor,
            no_server_monitor,
            log_dir,
            tunables,
        } => {
            let resolved = resolve(&tunables, &cli.config)?;
            let traces = load_traces(&trace).map_err(|e| e.to_string())?;
            let contract_text = std::fs::read_to_string(&contract)
                .map_err(|e| format!("{}: {e}", contract.display()))?;
            let fault_scripts = match faults {
                Some(path) => {
                    ugovor_harness::faults::load_faults(&path).map_err(|e| e.to_string())?
                }
                None => Vec::new(),
            };
            let opts = ReplayOptions {
                time_scale,
                seed,
                concurrency,
                ugovor_client: !no_client_monitor,
                ugovor_server: !no_server_monitor,
                faults: fault_scripts,
                latency_override: latency.as_deref().map(parse_latency).transpose()?,
                monitor_cfg: resolved.monitor_cfg,
                auditor_cfg: resolved.auditor_cfg,
                deterministic_report: deterministic,
                log_dir,
                ..Default::default()
            };
            let outcome = replay(&traces, &contract_text, &opts).map_err(|e| e.to_string())?;
            save_reports(&out, &outcome.sessions, &outcome.totals).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({
                    "sessions": outcome.totals.sessions,
                    "terminated": outcome.totals.terminated,
                    "closed": outcome.totals.closed,
                    "control_bytes": outcome.totals.counters.control_bytes,
                    "payload_bytes": outcome.totals.counters.payload_bytes,
                    "out": out.display().to_string(),
                })
            );
            Ok(())
        }
        Command::ServeAuditor {
            listen,
            log_dir,
            tunables,
        } => {
            let resolved = resolve(&tunables, &cli.config)?;
            let service = AuditorService::spawn(
                SessionClock::new(1.0),
                AuditorServiceConfig {
                    auditor_cfg: resolved.auditor_cfg,
                    log_dir: Some(log_dir),
                    delays: InboundDelays::default(),
                    seed: 0,
                    listen: Some(listen),
                },
                Default::default(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({ "listening": service.addr.to_string() })
            );
            park_forever();
        }
        Command::ServeServerMonitor {
            listen,
            auditor,
            chunkmap,
            contract,
            tunables,
        } => {
            let resolved = resolve(&tunables, &cli.config)?;
            let map_text = std::fs::read_to_string(&chunkmap)
                .map_err(|e| format!("{}: {e}", chunkmap.display()))?;
            let map: ugovor_core::ChunkMap =
                serde_json::from_str(&map_text).map_err(|e| e.to_string())?;
            let contract_text = std::fs::read_to_string(&contract)
                .map_err(|e| format!("{}: {e}", contract.display()))?;
            let canonical = Contract::parse(&contract_text)
                .map_err(|e| e.to_string())?
                .canonical_text();
            let service = MonitorService::spawn(
                SessionClock::new(1.0),
                std::sync::Arc::new(map),
                MonitorServiceConfig {
                    monitor_cfg: resolved.monitor_cfg,
                    auditor_addr: auditor,
                    contract_text: canonical,
                    control_delay: None,
                    faults: Vec::new(),
                    seed: 0,
                    listen: Some(listen),
                },
                Default::default(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({ "sniffer_listening": service.sniffer_addr.to_string() })
            );
            park_forever();
        }
        Command::ServeVideo {
            listen,
            trace,
            contract,
            auditor,
            sniffer,
        } => {
            let traces = load_traces(&trace).map_err(|e| e.to_string())?;
            let contract_text = std::fs::read_to_string(&contract)
                .map_err(|e| format!("{}: {e}", contract.display()))?;
            let canonical = Contract::parse(&contract_text)
                .map_err(|e| e.to_string())?
                .canonical_text();
            let sniffer_addr = sniffer
                .parse()
                .map_err(|e| format!("sniffer address: {e}"))?;
            let service = VideoServer::spawn(
                SessionClock::new(1.0),
                &traces,
                VideoServerConfig {
                    ugovor: true,
                    contract_text: canonical,
                    auditor_addr: auditor,
                    sniffer_addr: Some(sniffer_addr),
                    seed: 0,
                    listen: Some(listen),
                },
                Default::default(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({ "listening": service.addr.to_string() })
            );
            park_forever();
        }
        Command::RunClient {
            server,
            trace,
            session,
            inject_latency,
            seed,
        } => {
            let traces = load_traces(&trace).map_err(|e| e.to_string())?;
            let clock = SessionClock::new(1.0);
            let addr = server.parse().map_err(|e| format!("server address: {e}"))?;
            let cfg = ClientConfig {
                inject_latency,
                seed,
                ..Default::default()
            };
            let counters = Default::default();
            for t in traces
                .iter()
                .filter(|t| session.as_deref().map_or(true, |s| s == t.session_id))
            {
                let result =
                    run_client(&clock, t, addr, &cfg, &counters).map_err(|e| e.to_string())?;
                println!(
                    "{}",
                    serde_json::json!({
                        "session_id": result.session_id,
                        "engaged": result.engaged,
                        "events": result.events.len(),
                        "closed": result.closed,
                        "terminated": result.terminated.is_some(),
                    })
                );
            }
            Ok(())
        }
        Command::Analyze(analyze) => run_analyze(analyze),
        Command::SampleSize {
            confidence,
            margin,
            p,
        } => {
            let n =
                analytics::cochran_sample_size(confidence, margin, p).map_err(|e| e.to_string())?;
            println!("{n}");
            Ok(())
        }
    }
}

fn parse_latency(text: &str) -> Result<LatencyProfile, String> {
    let mut parts = text.split(':');
    let base: f64 = parts
        .next()
        .unwrap_or_default()
        .parse()
        .map_err(|e| format!("latency base: {e}"))?;
    let jitter: f64 = match parts.next() {
        Some(j) => j.parse().map_err(|e| format!("latency jitter: {e}"))?,
        None => 0.0,
    };
    Ok(LatencyProfile {
        up_base_ms: base,
        up_jitter_ms: jitter,
        down_base_ms: base,
        down_jitter_ms: jitter,
    })
}

fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn summaries_from(
    trace: &Option<PathBuf>,
    report: &Option<PathBuf>,
) -> Result<Vec<analytics::SessionSummary>, String> {
    match (trace, report) {
        (Some(path), None) => {
            let traces = load_traces(path).map_err(|e| e.to_string())?;
            Ok(traces
                .iter()
                .map(ugovor_harness::trace::trace_summary)
                .collect())
        }
        (None, Some(path)) => {
            let (sessions, _) = load_reports(path).map_err(|e| e.to_string())?;
            Ok(sessions.iter().map(|s| s.summary(None)).collect())
        }
        _ => Err("exactly one of --trace or --report is required".into()),
    }
}

fn write_cdf(path: &Path, table: &[(f64, f64)]) -> Result<(), String> {
    let mut out = String::from("value\tcum_fraction\n");
    for (v, f) in table {
        out.push_str(&format!("{v}\t{f}\n"));
    }
    std::fs::write(path, out).map_err(|e| e.to_string())
}

fn run_analyze(analyze: Analyze) -> Result<(), String> {
    match analyze {
        Analyze::Cdf {
            trace,
            report,
            out,
            time_bucket_s,
        } => {
            let summaries = summaries_from(&trace, &report)?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let dist = analytics::distribution_report(&summaries).map_err(|e| e.to_string())?;
            write_cdf(
                &out.join("switches_per_minute.tsv"),
                &dist.switches_per_minute,
            )?;
            write_cdf(
                &out.join("session_duration_s.tsv"),
                &dist.session_duration_s,
            )?;
            write_cdf(
                &out.join("rebuffer_events_per_session.tsv"),
                &dist.rebuffer_events_per_session,
            )?;
            write_cdf(
                &out.join("rebuffer_duration_s.tsv"),
                &dist.rebuffer_duration_s,
            )?;
            let groups = analytics::grouped_report(&summaries).map_err(|e| e.to_string())?;
            let mut table = String::from(
                "group\tsessions\tswitches_p05\tswitches_p25\tswitches_p50\tswitches_p75\tswitches_p95\n",
            );
            for g in &groups {
                let b = &g.switches_per_minute;
                table.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    g.group, g.sessions, b.p05, b.p25, b.p50, b.p75, b.p95
                ));
            }
            std::fs::write(out.join("groups.tsv"), table).map_err(|e| e.to_string())?;
            if let Some(bucket_s) = time_bucket_s {
                let ladder = ["240p", "360p", "480p", "720p", "1080p", "4K"];
                let buckets = analytics::time_bucket_quality(&summaries, &ladder, bucket_s)
                    .map_err(|e| e.to_string())?;
                write_cdf(&out.join("quality_over_time.tsv"), &buckets)?;
            }
            println!(
                "{}",
                serde_json::json!({ "sessions": summaries.len(), "out": out.display().to_string() })
            );
            Ok(())
        }
        Analyze::Satisfaction { report, out } => {
            let (sessions, _) = load_reports(&report).map_err(|e| e.to_string())?;
            let summaries: Vec<_> = sessions.iter().map(|s| s.summary(None)).collect();
            let window_s = sessions
                .iter()
                .flat_map(|s| s.windows.iter())
                .map(|w| w.end_pts - w.start_pts)
                .fold(0.0f64, f64::max)
                .max(1.0);
            let sat =
                analytics::satisfaction_report(&summaries, window_s).map_err(|e| e.to_string())?;
            let text = serde_json::to_string_pretty(&sat).map_err(|e| e.to_string())?;
            match out {
                Some(path) => std::fs::write(path, text).map_err(|e| e.to_string())?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Analyze::Bounds { report, out } => {
            let (sessions, _) = load_reports(&report).map_err(|e| e.to_string())?;
            let summaries: Vec<_> = sessions.iter().map(|s| s.summary(None)).collect();
            let bounds = analytics::duration_bound_report(&summaries);
            let text = serde_json::to_string_pretty(&bounds).map_err(|e| e.to_string())?;
            match out {
                Some(path) => std::fs::write(path, text).map_err(|e| e.to_string())?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Analyze::Price {
            report,
            schedule,
            exhausted,
        } => {
            let (sessions, _) = load_reports(&report).map_err(|e| e.to_string())?;
            let prices: Vec<f64> = schedule
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| format!("schedule: {e}")))
                .collect::<Result<_, _>>()?;
            let mut total = 0.0;
            for s in &sessions {
                let amount = analytics::price_session(&s.windows, &prices, exhausted);
                total += amount;
                println!(
                    "{}",
                    serde_json::json!({ "session_id": s.session_id, "amount": amount })
                );
            }
            println!("{}", serde_json::json!({ "total": total }));
            Ok(())
        }
        Analyze::Summary { log_dir } => {
            let mut outcomes: BTreeMap<String, serde_json::Value> = BTreeMap::new();
            let index = log_dir.join("index.jsonl");
            let text =
                std::fs::read_to_string(&index).map_err(|e| format!("{}: {e}", index.display()))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| e.to_string())?;
                let id = rec["session_id"].as_str().unwrap_or_default().to_string();
                outcomes.insert(id, rec);
            }
            let closed = outcomes
                .values()
                .filter(|r| r["outcome"] == "closed")
                .count();
            let terminated = outcomes
                .values()
                .filter(|r| r["outcome"] == "terminated")
                .count();
            for rec in outcomes.values() {
                println!("{rec}");
            }
            println!(
                "{}",
                serde_json::json!({
                    "sessions": outcomes.len(),
                    "closed": closed,
                    "terminated": terminated,
                })
            );
            Ok(())
        }
    }
}
