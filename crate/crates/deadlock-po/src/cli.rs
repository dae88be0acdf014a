//! Command-line front end binding the pipeline: analyze traces for
//! deadlock patterns, validate trace files, referee candidates against the
//! exhaustive reordering search, generate fuzz corpora, and time synthetic
//! scaling workloads.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::engine::OrderMode;
use crate::fuzz::{generate, synthetic_low_conflict, GenParams};
use crate::oracle::{
    enumerate_predictable_deadlocks, is_predictable_deadlock, witness_to_canonical, OracleLimits,
    Verdict,
};
use crate::report::{diagnostics_text, to_json, to_text};
use crate::search::{analyze, AnalysisReport, AnalyzeConfig, AnalyzeError, BlockMode};
use crate::trace::{
    normalize_requests, parse_trace, validate, EventId, NormalizedTrace, Op, ValidationReport,
    WfKind,
};

const EXIT_OK: i32 = 0;
const EXIT_DEADLOCK: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_ILL_FORMED: i32 = 3;

/// Exit precedence across inputs: usage/IO > ill-formed > deadlock > clean.
fn combine(a: i32, b: i32) -> i32 {
    let rank = |c: i32| match c {
        EXIT_USAGE => 3,
        EXIT_ILL_FORMED => 2,
        EXIT_DEADLOCK => 1,
        _ => 0,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "deadlock-po",
    version,
    about = "Predicts deadlocks from lock-acquisition traces"
)]
pub struct CliConfig {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analyze trace files for predictable deadlock patterns.
    Analyze(AnalyzeArgs),
    /// Check trace files for well-formedness and cite violations.
    Validate(ValidateArgs),
    /// Referee deadlock candidates by exhaustive reordering search.
    Oracle(OracleArgs),
    /// Generate a corpus of random well-formed traces.
    Fuzz(FuzzArgs),
    /// Time the analysis on a synthetic low-conflict workload.
    Bench(BenchArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OrderChoice {
    Trw,
    Pwr,
}

impl From<OrderChoice> for OrderMode {
    fn from(c: OrderChoice) -> Self {
        match c {
            OrderChoice::Trw => OrderMode::Trw,
            OrderChoice::Pwr => OrderMode::Pwr,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatChoice {
    Text,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BlockChoice {
    /// Cross-check the pairwise blocking filter with exhaustive tuple
    /// enumeration; divergences are reported on stderr.
    Strict,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Trace files; several inputs are analyzed concurrently and reported
    /// in argument order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Partial order: trw never falsely accuses on guarded well-nested
    /// traces, pwr never misses a predictable deadlock.
    #[arg(long, value_enum, default_value_t = OrderChoice::Trw)]
    order: OrderChoice,
    /// Report every concurrent pattern, skipping the blocking stage.
    #[arg(long)]
    no_block: bool,
    /// Blocking variant.
    #[arg(long, value_enum, conflicts_with = "no_block")]
    block: Option<BlockChoice>,
    /// Collapse repeated dependencies with identical abstract effect.
    #[arg(long)]
    dedupe: bool,
    /// Drop events on ill-formed locks instead of rejecting the trace.
    #[arg(long)]
    lenient: bool,
    /// Require an explicit request before every acquire.
    #[arg(long)]
    strict_requests: bool,
    #[arg(long, value_enum, default_value_t = FormatChoice::Text)]
    format: FormatChoice,
    /// Record per-event observation clocks and emit them in JSON output.
    #[arg(long)]
    event_clocks: bool,
    /// UNSAFE: disable write-write and read-write ordering. The analysis
    /// may then report deadlocks no execution can reach. Debug ablation
    /// only.
    #[arg(long)]
    debug_no_ww_sync: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also require an explicit request before every acquire.
    #[arg(long)]
    strict_requests: bool,
}

#[derive(Args, Debug)]
struct OracleArgs {
    input: PathBuf,
    /// Comma-separated event ids of a candidate's requests (request events,
    /// or acquires whose implicit requests are meant). Omit to enumerate
    /// and referee every cyclic candidate.
    #[arg(long)]
    requests: Option<String>,
    /// Source-event budget; larger traces are refused as indeterminate.
    #[arg(long, default_value_t = 24)]
    max_events: usize,
    /// Explored-state budget for the reordering search.
    #[arg(long, default_value_t = 1_000_000)]
    max_states: usize,
}

#[derive(Args, Debug)]
struct FuzzArgs {
    /// Output directory for trace files and manifest.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Base seed; trace i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on events per trace.
    #[arg(long)]
    max_events: Option<usize>,
    /// Keep only traces whose requests stay guard-free under trw.
    #[arg(long)]
    require_bounded: bool,
    /// Keep only traces whose releases always pop the innermost lock.
    #[arg(long)]
    require_well_nested: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Number of events in the generated low-conflict workload.
    #[arg(long)]
    synthetic: usize,
    #[arg(long, default_value_t = 8)]
    threads: usize,
    /// Restrict to one order; default times both.
    #[arg(long, value_enum)]
    order: Option<OrderChoice>,
}

fn init_thread_pool() {
    if let Ok(s) = std::env::var("DEADLOCK_PO_THREADS") {
        if let Ok(n) = s.parse::<usize>() {
            if n > 0 {
                // Fails when a pool already exists (repeated run() in one
                // process); the first configuration then stays in force.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Parse argv and execute; returns the process exit code. Reports go to
/// `stdout`, diagnostics and errors to `stderr`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match CliConfig::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            }
        }
    };
    init_thread_pool();
    match cli.command {
        Command::Analyze(a) => cmd_analyze(&a, stdout, stderr),
        Command::Validate(a) => cmd_validate(&a, stdout, stderr),
        Command::Oracle(a) => cmd_oracle(&a, stdout, stderr),
        Command::Fuzz(a) => cmd_fuzz(&a, stdout, stderr),
        Command::Bench(a) => cmd_bench(&a, stdout, stderr),
    }
}

fn analyze_config(a: &AnalyzeArgs) -> AnalyzeConfig {
    let mut cfg = AnalyzeConfig::new(a.order.into());
    cfg.block = if a.no_block {
        BlockMode::Off
    } else if a.block.is_some() {
        BlockMode::Strict
    } else {
        BlockMode::Normal
    };
    cfg.dedupe = a.dedupe;
    cfg.lenient = a.lenient;
    cfg.strict_requests = a.strict_requests;
    cfg.disable_write_write_sync = a.debug_no_ww_sync;
    cfg.record_event_clocks = a.event_clocks;
    cfg
}

fn kind_label(kind: &WfKind) -> &'static str {
    match kind {
        WfKind::DoubleAcquire => "double-acquire",
        WfKind::UnmatchedRelease => "unmatched-release",
        WfKind::RequestShape => "request-shape",
    }
}

fn violations_text(path: &Path, report: &ValidationReport) -> String {
    let mut out = String::new();
    for v in &report.violations {
        out.push_str(&format!("{}: {}: {}\n", path.display(), kind_label(&v.kind), v.message));
    }
    out
}

enum FileOutcome {
    Report(Box<AnalysisReport>),
    IllFormed(String),
    Io(String),
}

fn cmd_analyze(a: &AnalyzeArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cfg = analyze_config(a);
    let results: Vec<FileOutcome> = a
        .inputs
        .par_iter()
        .map(|p| {
            let text = match fs::read_to_string(p) {
                Ok(t) => t,
                Err(e) => return FileOutcome::Io(format!("{}: {e}", p.display())),
            };
            let trace = match parse_trace(&text) {
                Ok(t) => t,
                Err(e) => return FileOutcome::Io(format!("{}: {e}", p.display())),
            };
            match analyze(&trace, &cfg) {
                Ok(r) => FileOutcome::Report(Box::new(r)),
                Err(AnalyzeError::Malformed(v)) => {
                    FileOutcome::IllFormed(violations_text(p, &v))
                }
                Err(AnalyzeError::Trace(e)) => {
                    FileOutcome::IllFormed(format!("{}: {e}\n", p.display()))
                }
            }
        })
        .collect();

    let multi = a.inputs.len() > 1;
    let mut code = EXIT_OK;
    for (p, outcome) in a.inputs.iter().zip(&results) {
        match outcome {
            FileOutcome::Report(r) => {
                match a.format {
                    FormatChoice::Json => {
                        let _ = writeln!(stdout, "{}", to_json(r));
                    }
                    FormatChoice::Text => {
                        if multi {
                            let _ = writeln!(stdout, "# {}", p.display());
                        }
                        let _ = write!(stdout, "{}", to_text(r));
                    }
                }
                let diag = diagnostics_text(r);
                if !diag.is_empty() {
                    if multi {
                        for line in diag.lines() {
                            let _ = writeln!(stderr, "{}: {line}", p.display());
                        }
                    } else {
                        let _ = write!(stderr, "{diag}");
                    }
                }
                if !r.patterns.is_empty() {
                    code = combine(code, EXIT_DEADLOCK);
                }
            }
            FileOutcome::IllFormed(msg) => {
                let _ = write!(stderr, "{msg}");
                code = combine(code, EXIT_ILL_FORMED);
            }
            FileOutcome::Io(msg) => {
                let _ = writeln!(stderr, "{msg}");
                code = combine(code, EXIT_USAGE);
            }
        }
    }
    code
}

fn cmd_validate(a: &ValidateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let mut code = EXIT_OK;
    for p in &a.inputs {
        let text = match fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => {
                let _ = writeln!(stderr, "{}: {e}", p.display());
                code = combine(code, EXIT_USAGE);
                continue;
            }
        };
        let trace = match parse_trace(&text) {
            Ok(t) => t,
            Err(e) => {
                let _ = writeln!(stderr, "{}: {e}", p.display());
                code = combine(code, EXIT_USAGE);
                continue;
            }
        };
        let report = validate(&trace, a.strict_requests);
        if report.is_ok() {
            let _ = writeln!(stdout, "{}: ok", p.display());
        } else {
            let _ = write!(stdout, "{}", violations_text(p, &report));
            code = combine(code, EXIT_ILL_FORMED);
        }
    }
    code
}

/// Resolve a user-supplied id to a request event: request ids pass
/// through; an acquire id means its (possibly implicit) request.
fn resolve_request(norm: &NormalizedTrace, id: EventId) -> Result<EventId, String> {
    let events = norm.events();
    let idx = events
        .iter()
        .position(|e| e.id == id)
        .ok_or_else(|| format!("no event with id {id}"))?;
    match events[idx].op {
        Op::Request(_) => Ok(id),
        Op::Acquire(_) => {
            for j in (0..idx).rev() {
                if events[j].thread == events[idx].thread {
                    if let Op::Request(_) = events[j].op {
                        return Ok(events[j].id);
                    }
                    break;
                }
            }
            Err(format!("acquire {id} has no preceding request"))
        }
        _ => Err(format!("event {id} is not a request or acquire")),
    }
}

fn cmd_oracle(a: &OracleArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let text = match fs::read_to_string(&a.input) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "{}: {e}", a.input.display());
            return EXIT_USAGE;
        }
    };
    let trace = match parse_trace(&text) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(stderr, "{}: {e}", a.input.display());
            return EXIT_USAGE;
        }
    };
    let report = validate(&trace, false);
    if !report.is_ok() {
        let _ = write!(stderr, "{}", violations_text(&a.input, &report));
        return EXIT_ILL_FORMED;
    }
    let norm = match normalize_requests(&trace) {
        Ok(n) => n,
        Err(e) => {
            let _ = writeln!(stderr, "{}: {e}", a.input.display());
            return EXIT_ILL_FORMED;
        }
    };
    let limits = OracleLimits { max_events: a.max_events, max_states: a.max_states };

    if let Some(spec) = &a.requests {
        let mut ids = Vec::new();
        for part in spec.split(',') {
            let id: EventId = match part.trim().parse() {
                Ok(v) => v,
                Err(_) => {
                    let _ = writeln!(stderr, "invalid event id {:?}", part.trim());
                    return EXIT_USAGE;
                }
            };
            match resolve_request(&norm, id) {
                Ok(r) => ids.push(r),
                Err(msg) => {
                    let _ = writeln!(stderr, "{msg}");
                    return EXIT_USAGE;
                }
            }
        }
        match is_predictable_deadlock(&norm, &ids, &limits) {
            Verdict::Yes { witness } => {
                let _ = writeln!(stdout, "confirmed predictable deadlock; witness prefix:");
                let _ = write!(stdout, "{}", witness_to_canonical(&norm, &witness));
                EXIT_DEADLOCK
            }
            Verdict::No => {
                let _ = writeln!(stdout, "no reordering reaches these requests together");
                EXIT_OK
            }
            Verdict::BudgetExceeded => {
                let _ = writeln!(stderr, "search budget exceeded; verdict unknown");
                EXIT_OK
            }
        }
    } else {
        let e = enumerate_predictable_deadlocks(&norm, &limits);
        let _ = writeln!(stdout, "cyclic candidates: {}", e.candidates.len());
        for c in &e.confirmed {
            // Cite source positions, not raw ids: synthesized requests have
            // ids the input never mentions, but their acquire's line is real.
            let displays: Vec<String> = c
                .cycle
                .request_ids()
                .iter()
                .map(|id| {
                    let idx = norm.events().iter().position(|e| e.id == *id).unwrap();
                    norm.source_pos[idx].to_string()
                })
                .collect();
            let _ = writeln!(stdout, "confirmed: requests at [{}]", displays.join(", "));
        }
        let _ = writeln!(stdout, "confirmed total: {}", e.confirmed.len());
        if e.budget_hit {
            let _ = writeln!(stderr, "search budget exceeded on some candidates");
        }
        if e.confirmed.is_empty() {
            EXIT_OK
        } else {
            EXIT_DEADLOCK
        }
    }
}

fn cmd_fuzz(a: &FuzzArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let mut base = GenParams {
        require_bounded: a.require_bounded,
        require_well_nested: a.require_well_nested,
        ..GenParams::default()
    };
    if let Some(cap) = a.max_events {
        base.events = (base.events.0.min(cap), base.events.1.min(cap));
    }
    if let Err(e) = fs::create_dir_all(&a.out) {
        let _ = writeln!(stderr, "{}: {e}", a.out.display());
        return EXIT_USAGE;
    }
    let mut files = Vec::new();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let trace = match generate(&GenParams { seed, ..base.clone() }) {
            Ok(t) => t,
            Err(e) => {
                let _ = writeln!(stderr, "seed {seed}: {e}");
                return EXIT_USAGE;
            }
        };
        let name = format!("fuzz-{i:05}.trace");
        if let Err(e) = fs::write(a.out.join(&name), trace.to_canonical()) {
            let _ = writeln!(stderr, "{name}: {e}");
            return EXIT_USAGE;
        }
        files.push(serde_json::json!({ "file": name, "seed": seed, "events": trace.events.len() }));
    }
    let manifest = serde_json::json!({
        "count": a.count,
        "base_seed": a.seed,
        "events": [base.events.0, base.events.1],
        "threads": [base.threads.0, base.threads.1],
        "locks": [base.locks.0, base.locks.1],
        "require_bounded": base.require_bounded,
        "require_well_nested": base.require_well_nested,
        "files": files,
    });
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = fs::write(a.out.join("manifest.json"), body) {
        let _ = writeln!(stderr, "manifest.json: {e}");
        return EXIT_USAGE;
    }
    let _ = writeln!(stdout, "wrote {} trace(s) and manifest.json to {}", a.count, a.out.display());
    EXIT_OK
}

fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let build_start = Instant::now();
    let trace = synthetic_low_conflict(a.synthetic, a.threads);
    let build_ms = build_start.elapsed().as_secs_f64() * 1e3;
    let _ = writeln!(stderr, "generated {} events in {:.1} ms", trace.events.len(), build_ms);
    let modes: Vec<OrderMode> = match a.order {
        Some(o) => vec![o.into()],
        None => vec![OrderMode::Trw, OrderMode::Pwr],
    };
    for mode in modes {
        let cfg = AnalyzeConfig::new(mode);
        let start = Instant::now();
        let report = match analyze(&trace, &cfg) {
            Ok(r) => r,
            Err(e) => {
                let _ = writeln!(stderr, "analysis failed: {e}");
                return EXIT_USAGE;
            }
        };
        let total_ms = start.elapsed().as_secs_f64() * 1e3;
        let _ = writeln!(
            stdout,
            "events={} threads={} mode={} phase1_ms={:.1} phase2_ms={:.1} total_ms={:.1} patterns={}",
            a.synthetic,
            a.threads,
            mode.as_str(),
            report.timings.phase1_ms,
            report.timings.phase2_ms,
            total_ms,
            report.patterns.len(),
        );
    }
    EXIT_OK
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_vec(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_error_exits_two() {
        let (code, _, err) = run_vec(&["deadlock-po", "analyze"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("required"));
    }

    #[test]
    fn conflicting_block_flags_rejected() {
        let (code, _, err) = run_vec(&[
            "deadlock-po",
            "analyze",
            "--no-block",
            "--block",
            "strict",
            "tests/fixtures/abba.trace",
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("cannot be used with"));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_vec(&["deadlock-po", "--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("analyze"));
    }

    #[test]
    fn exit_precedence_prefers_usage_over_ill_formed() {
        assert_eq!(combine(EXIT_ILL_FORMED, EXIT_USAGE), EXIT_USAGE);
        assert_eq!(combine(EXIT_USAGE, EXIT_ILL_FORMED), EXIT_USAGE);
        assert_eq!(combine(EXIT_DEADLOCK, EXIT_ILL_FORMED), EXIT_ILL_FORMED);
        assert_eq!(combine(EXIT_OK, EXIT_DEADLOCK), EXIT_DEADLOCK);
    }
}
