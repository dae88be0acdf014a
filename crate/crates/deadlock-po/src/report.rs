//! Render analysis results. The JSON layout is a stable interface: field
//! names and order are fixed, and all volatile data (timings) lives under
//! the single `timing_ms` key so consumers can exclude it when comparing
//! runs.

use serde::Serialize;

use crate::engine::Diagnostics;
use crate::search::{AnalysisReport, DeadlockPattern};

#[derive(Serialize)]
struct JsonPattern<'a> {
    threads: Vec<&'a str>,
    requests: Vec<u32>,
    locks: Vec<&'a str>,
    acquires: Vec<u32>,
}

#[derive(Serialize)]
struct JsonStages {
    chains: usize,
    concurrent: usize,
    unblocked: usize,
}

#[derive(Serialize)]
struct JsonTiming {
    phase1: f64,
    phase2: f64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    mode: &'a str,
    patterns: Vec<JsonPattern<'a>>,
    stages: JsonStages,
    diagnostics: &'a Diagnostics,
    timing_ms: JsonTiming,
    #[serde(skip_serializing_if = "Option::is_none")]
    event_clocks: Option<Vec<&'a [u32]>>,
}

fn json_pattern<'a>(report: &'a AnalysisReport, p: &'a DeadlockPattern) -> JsonPattern<'a> {
    JsonPattern {
        threads: p.entries.iter().map(|e| report.threads[e.thread as usize].as_str()).collect(),
        requests: p.entries.iter().map(|e| e.display_pos).collect(),
        locks: p.entries.iter().map(|e| report.locks[e.lock as usize].as_str()).collect(),
        acquires: p.entries.iter().map(|e| e.cycle_acquire).collect(),
    }
}

/// One-line JSON rendering of a report.
pub fn to_json(report: &AnalysisReport) -> String {
    let doc = JsonReport {
        mode: report.mode.as_str(),
        patterns: report.patterns.iter().map(|p| json_pattern(report, p)).collect(),
        stages: JsonStages {
            chains: report.stages.chains,
            concurrent: report.stages.concurrent,
            unblocked: report.stages.unblocked,
        },
        diagnostics: &report.diagnostics,
        timing_ms: JsonTiming {
            phase1: report.timings.phase1_ms,
            phase2: report.timings.phase2_ms,
        },
        event_clocks: report
            .event_clocks
            .as_ref()
            .map(|clocks| clocks.iter().map(|c| c.as_slice()).collect()),
    };
    serde_json::to_string(&doc).expect("report serialization cannot fail")
}

/// Human-readable rendering of a report.
pub fn to_text(report: &AnalysisReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("mode: {}\n", report.mode.as_str()));
    if report.patterns.is_empty() {
        out.push_str("no deadlock patterns\n");
    } else {
        out.push_str(&format!("deadlock patterns: {}\n", report.patterns.len()));
        for (i, p) in report.patterns.iter().enumerate() {
            out.push_str(&format!("  pattern {}:\n", i + 1));
            for e in &p.entries {
                let held: Vec<&str> = e
                    .acquires_held
                    .iter()
                    .map(|&(_, l)| report.locks[l as usize].as_str())
                    .collect();
                out.push_str(&format!(
                    "    {} requests {} at event {} holding {{{}}} (cycle acquire {})\n",
                    report.threads[e.thread as usize],
                    report.locks[e.lock as usize],
                    e.display_pos,
                    held.join(", "),
                    e.cycle_acquire,
                ));
            }
        }
    }
    out.push_str(&format!(
        "stages: chains {}, concurrent {}, unblocked {}\n",
        report.stages.chains, report.stages.concurrent, report.stages.unblocked
    ));
    if !report.blocked.is_empty() {
        out.push_str(&format!("blocked patterns: {}\n", report.blocked.len()));
    }
    out
}

/// Warning and bookkeeping lines, kept apart from the report body so the
/// CLI can route them to stderr.
pub fn diagnostics_text(report: &AnalysisReport) -> String {
    let mut out = String::new();
    if !report.diagnostics.trw_bounded {
        out.push_str("warning: request-guard assumption violated; reports may be unsound\n");
        for w in &report.diagnostics.boundedness_witnesses {
            out.push_str(&format!(
                "  guard {} held around {}'s request at event {}, released at event {} by {}\n",
                w.guard_lock, w.guarded_thread, w.recorded_at_event, w.release_event,
                w.releasing_thread,
            ));
        }
    }
    if !report.diagnostics.well_nested {
        out.push_str("note: trace is not well nested\n");
        for w in &report.diagnostics.nesting_witnesses {
            out.push_str(&format!(
                "  release of {} at event {} skips innermost lock {}\n",
                w.released_lock, w.release_event, w.innermost_lock,
            ));
        }
    }
    if let Some(d) = &report.diagnostics.dedupe {
        out.push_str(&format!(
            "dedupe: {} of {} dependencies kept\n",
            d.entries_after, d.entries_before
        ));
    }
    if let Some(s) = &report.strict {
        if s.budget_exceeded {
            out.push_str("strict blocking sweep skipped: tuple budget exceeded\n");
        } else if s.divergent > 0 {
            out.push_str(&format!(
                "strict blocking removed {} pattern(s) the pairwise filter kept\n",
                s.divergent
            ));
        }
    }
    if report.dropped_events > 0 {
        out.push_str(&format!(
            "lenient recovery dropped {} event(s) on ill-formed locks\n",
            report.dropped_events
        ));
    }
    out
}
