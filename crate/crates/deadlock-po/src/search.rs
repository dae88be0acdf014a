//! Cycle search over abstract lock dependencies: enumerate cyclic chains
//! (circular request structure with pairwise-disjoint held sets), pick a
//! concrete pairwise-concurrent instance per chain with a monotone cursor
//! sweep, and drop patterns blocked by an earlier one.

use std::time::Instant;

use rayon::prelude::*;

use crate::engine::{
    compute_lock_dependencies, ConcreteDependency, DepKey, DependencyMap, Diagnostics,
    EngineOptions, OrderMode,
};
use crate::trace::{
    normalize_requests, validate, EventId, LockIdx, Trace, TraceError, ValidationReport,
};
use crate::vclock::{ThreadIdx, VClock};

/// One cyclic chain of abstract dependencies: entry i requests a lock that
/// entry i+1 holds (wrapping), threads pairwise distinct, held sets
/// pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CyclicChain {
    pub keys: Vec<DepKey>,
}

fn disjoint(a: &[LockIdx], b: &[LockIdx]) -> bool {
    a.iter().all(|l| !b.contains(l))
}

fn chains_inner(deps: &DependencyMap, max_len: usize, guard: bool) -> Vec<CyclicChain> {
    fn extend(
        keys: &[&DepKey],
        stack: &mut Vec<usize>,
        out: &mut Vec<CyclicChain>,
        max_len: usize,
        guard: bool,
    ) {
        let start = keys[stack[0]];
        let last = keys[*stack.last().unwrap()];
        for (ci, cand) in keys.iter().enumerate() {
            if cand.thread <= start.thread
                || stack.iter().any(|&k| keys[k].thread == cand.thread)
            {
                continue;
            }
            if !cand.lockset.contains(&last.lock) {
                continue;
            }
            if guard && stack.iter().any(|&k| !disjoint(&keys[k].lockset, &cand.lockset)) {
                continue;
            }
            stack.push(ci);
            if start.lockset.contains(&cand.lock) {
                out.push(CyclicChain { keys: stack.iter().map(|&k| keys[k].clone()).collect() });
            }
            if stack.len() < max_len {
                extend(keys, stack, out, max_len, guard);
            }
            stack.pop();
        }
    }

    let mut out = Vec::new();
    if max_len < 2 {
        return out;
    }
    let keys: Vec<&DepKey> = deps.keys().collect();
    let mut stack: Vec<usize> = Vec::new();
    for s in 0..keys.len() {
        stack.push(s);
        extend(&keys, &mut stack, &mut out, max_len, guard);
        stack.pop();
    }
    out
}

/// Enumerate every cyclic chain over the map's keys, each cycle exactly
/// once: the canonical rotation starts at the smallest thread index and
/// all other entries have larger thread indices. Length is capped by
/// `max_cycle_len`.
pub fn enumerate_cyclic_chains(deps: &DependencyMap, max_cycle_len: usize) -> Vec<CyclicChain> {
    chains_inner(deps, max_cycle_len, true)
}

/// Sweep one cursor per list (each list clock-monotone) until the current
/// entries are pairwise concurrent. An entry whose clock is dominated by
/// another list's current clock can never pair with that list's remaining
/// entries, so skipping it is safe and cursors only move forward. Returns
/// per-list indices of the first instance found.
pub fn find_concurrent_instance(lists: &[&[ConcreteDependency]]) -> Option<Vec<usize>> {
    let n = lists.len();
    if lists.iter().any(|l| l.is_empty()) {
        return None;
    }
    let mut cur = vec![0usize; n];
    loop {
        let all_concurrent = (0..n).all(|i| {
            (0..n).all(|j| i == j || !lists[i][cur[i]].clock.le(&lists[j][cur[j]].clock))
        });
        if all_concurrent {
            return Some(cur);
        }
        let snapshot: Vec<&VClock> = (0..n).map(|i| &lists[i][cur[i]].clock).collect();
        for i in 0..n {
            let mut k = cur[i];
            while k < lists[i].len()
                && (0..n).any(|j| j != i && lists[i][k].clock.le(snapshot[j]))
            {
                k += 1;
            }
            if k == lists[i].len() {
                return None;
            }
            cur[i] = k;
        }
    }
}

/// One entry of a reported pattern: a concrete lock request plus the held
/// acquire that closes the cycle toward the predecessor entry.
#[derive(Clone, Debug)]
pub struct PatternEntry {
    pub thread: ThreadIdx,
    /// Requested lock.
    pub lock: LockIdx,
    /// 1-based position in the normalized event sequence; the ordering key
    /// for blocking comparisons.
    pub request_pos: u32,
    /// 1-based source position cited in reports.
    pub display_pos: u32,
    pub request_id: EventId,
    pub clock: VClock,
    pub acquires_held: Vec<(EventId, LockIdx)>,
    /// The held acquire of the lock the predecessor entry requests.
    pub cycle_acquire: EventId,
}

/// What removed a pattern in the blocking stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Blocker {
    /// Index of the blocking pattern in the pre-filter report order.
    Pattern(usize),
    /// A dependency tuple found by the exhaustive sweep (strict mode).
    ExhaustiveTuple,
}

#[derive(Clone, Debug)]
pub struct DeadlockPattern {
    pub entries: Vec<PatternEntry>,
    pub mode: OrderMode,
    pub blocked_by: Option<Blocker>,
}

/// Cycle order: `b` precedes `a` when every entry of `b` has an entry of
/// `a` whose request comes later while still holding `b`'s cycle acquire.
/// A pattern preceded by another cannot be the first deadlock to manifest.
pub fn less_than(b: &DeadlockPattern, a: &DeadlockPattern) -> bool {
    b.entries.iter().all(|be| {
        a.entries.iter().any(|ae| {
            be.request_pos < ae.request_pos
                && ae.acquires_held.iter().any(|&(id, _)| id == be.cycle_acquire)
        })
    })
}

/// Split patterns into kept and blocked: a pattern is blocked when some
/// other input pattern (blocked or not) precedes it in the cycle order.
pub fn filter_blocked(
    mut patterns: Vec<DeadlockPattern>,
) -> (Vec<DeadlockPattern>, Vec<DeadlockPattern>) {
    let blocker_of: Vec<Option<usize>> = (0..patterns.len())
        .map(|ai| (0..patterns.len()).find(|&bi| bi != ai && less_than(&patterns[bi], &patterns[ai])))
        .collect();
    let mut kept = Vec::new();
    let mut blocked = Vec::new();
    for (i, mut p) in patterns.drain(..).enumerate() {
        match blocker_of[i] {
            Some(b) => {
                p.blocked_by = Some(Blocker::Pattern(b));
                blocked.push(p);
            }
            None => kept.push(p),
        }
    }
    (kept, blocked)
}

/// How the blocking stage runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    /// Report every concurrent instance.
    Off,
    /// Drop instances preceded by another reported instance.
    Normal,
    /// Normal, plus an exhaustive sweep over all dependency tuples of all
    /// cycle-shaped chains (held-set overlap allowed) as extra blockers.
    Strict,
}

#[derive(Clone, Debug)]
pub struct AnalyzeConfig {
    pub mode: OrderMode,
    pub block: BlockMode,
    pub dedupe: bool,
    /// Drop events on locks with well-formedness violations instead of
    /// failing.
    pub lenient: bool,
    pub strict_requests: bool,
    /// Cycle length cap; defaults to the trace's thread count.
    pub max_cycle_len: Option<usize>,
    pub disable_write_write_sync: bool,
    pub record_event_clocks: bool,
    /// Tuple budget for the strict blocker sweep.
    pub strict_budget: usize,
}

impl AnalyzeConfig {
    pub fn new(mode: OrderMode) -> Self {
        AnalyzeConfig {
            mode,
            block: BlockMode::Normal,
            dedupe: false,
            lenient: false,
            strict_requests: false,
            max_cycle_len: None,
            disable_write_write_sync: false,
            record_event_clocks: false,
            strict_budget: 100_000,
        }
    }
}

/// Pattern counts after each stage; non-increasing left to right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub chains: usize,
    pub concurrent: usize,
    pub unblocked: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Timings {
    pub phase1_ms: f64,
    pub phase2_ms: f64,
}

/// Outcome of the strict blocker sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StrictOutcome {
    /// Patterns the pairwise filter kept but an exhaustive tuple blocks.
    pub divergent: usize,
    /// Sweep abandoned: tuple count exceeded the budget.
    pub budget_exceeded: bool,
}

#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub mode: OrderMode,
    /// Surviving patterns, in chain enumeration order.
    pub patterns: Vec<DeadlockPattern>,
    /// Patterns removed by the blocking stage, `blocked_by` set.
    pub blocked: Vec<DeadlockPattern>,
    pub stages: StageCounts,
    pub diagnostics: Diagnostics,
    pub timings: Timings,
    pub threads: Vec<String>,
    pub locks: Vec<String>,
    pub strict: Option<StrictOutcome>,
    pub event_clocks: Option<Vec<VClock>>,
    /// Events removed by lenient recovery.
    pub dropped_events: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("trace is not well formed ({n} violation{s})", n = .0.violations.len(), s = if .0.violations.len() == 1 { "" } else { "s" })]
    Malformed(ValidationReport),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn build_pattern(
    chain: &CyclicChain,
    deps: &DependencyMap,
    idxs: &[usize],
    mode: OrderMode,
) -> DeadlockPattern {
    let n = chain.keys.len();
    let entries = (0..n)
        .map(|i| {
            let key = &chain.keys[i];
            let prev = &chain.keys[(i + n - 1) % n];
            let d = &deps[key][idxs[i]];
            let cycle_acquire = d
                .acquires_held
                .iter()
                .find(|&&(_, l)| l == prev.lock)
                .expect("cycle lock must be held")
                .0;
            PatternEntry {
                thread: key.thread,
                lock: key.lock,
                request_pos: d.request_pos,
                display_pos: d.display_pos,
                request_id: d.request_id,
                clock: d.clock.clone(),
                acquires_held: d.acquires_held.clone(),
                cycle_acquire,
            }
        })
        .collect();
    DeadlockPattern { entries, mode, blocked_by: None }
}

/// Exhaustive blocker sweep: every concrete tuple of every cycle-shaped
/// chain (held-set overlap allowed, concurrency not required) may block a
/// kept pattern. Finds blocks the pairwise filter cannot see; divergences
/// are counted, and the blocked patterns move to `blocked`.
fn strict_sweep(
    kept: &mut Vec<DeadlockPattern>,
    blocked: &mut Vec<DeadlockPattern>,
    deps: &DependencyMap,
    max_len: usize,
    budget: usize,
) -> StrictOutcome {
    let all_chains = chains_inner(deps, max_len, false);
    let mut tuples: Vec<Vec<(u32, EventId)>> = Vec::new();
    let mut total: usize = 0;
    for chain in &all_chains {
        let lists: Vec<&[ConcreteDependency]> =
            chain.keys.iter().map(|k| deps[k].as_slice()).collect();
        if lists.iter().any(|l| l.is_empty()) {
            continue;
        }
        let size = lists.iter().map(|l| l.len()).try_fold(1usize, |a, b| a.checked_mul(b));
        match size {
            Some(s) if total.saturating_add(s) <= budget => total += s,
            _ => return StrictOutcome { divergent: 0, budget_exceeded: true },
        }
        let n = lists.len();
        let mut idx = vec![0usize; n];
        loop {
            let tuple: Vec<(u32, EventId)> = (0..n)
                .map(|i| {
                    let prev = &chain.keys[(i + n - 1) % n];
                    let d = &lists[i][idx[i]];
                    let cyc = d
                        .acquires_held
                        .iter()
                        .find(|&&(_, l)| l == prev.lock)
                        .expect("cycle lock must be held")
                        .0;
                    (d.request_pos, cyc)
                })
                .collect();
            tuples.push(tuple);
            let mut advanced = false;
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < lists[i].len() {
                    advanced = true;
                    break;
                }
                idx[i] = 0;
            }
            if !advanced {
                break;
            }
        }
    }

    let mut divergent = 0;
    let mut still_kept = Vec::new();
    for mut a in kept.drain(..) {
        let tuple_blocks = tuples.iter().any(|t| {
            t.iter().all(|&(pos, cyc)| {
                a.entries.iter().any(|ae| {
                    pos < ae.request_pos && ae.acquires_held.iter().any(|&(id, _)| id == cyc)
                })
            })
        });
        if tuple_blocks {
            divergent += 1;
            a.blocked_by = Some(Blocker::ExhaustiveTuple);
            blocked.push(a);
        } else {
            still_kept.push(a);
        }
    }
    *kept = still_kept;
    StrictOutcome { divergent, budget_exceeded: false }
}

/// Full pipeline: validate, normalize requests, compute dependencies and
/// clocks, enumerate cyclic chains, search each chain for a concurrent
/// instance, then filter blocked patterns.
pub fn analyze(trace: &Trace, config: &AnalyzeConfig) -> Result<AnalysisReport, AnalyzeError> {
    let wf = validate(trace, config.strict_requests);
    let mut dropped = 0usize;
    let cleaned: Trace;
    let input: &Trace = if wf.is_ok() {
        trace
    } else if config.lenient {
        let dirty = wf.dirty_locks(trace);
        cleaned = Trace {
            events: trace
                .events
                .iter()
                .filter(|e| e.op.lock().is_none_or(|l| !dirty.contains(&l)))
                .copied()
                .collect(),
            threads: trace.threads.clone(),
            locks: trace.locks.clone(),
            vars: trace.vars.clone(),
        };
        dropped = trace.events.len() - cleaned.events.len();
        let second = validate(&cleaned, config.strict_requests);
        if !second.is_ok() {
            return Err(AnalyzeError::Malformed(second));
        }
        &cleaned
    } else {
        return Err(AnalyzeError::Malformed(wf));
    };

    let norm = normalize_requests(input)?;

    let t1 = Instant::now();
    let mut opts = EngineOptions::new(config.mode);
    opts.record_event_clocks = config.record_event_clocks;
    opts.disable_write_write_sync = config.disable_write_write_sync;
    opts.dedupe = config.dedupe;
    let phase1 = compute_lock_dependencies(&norm, &opts);
    let phase1_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let max_len = config.max_cycle_len.unwrap_or_else(|| norm.trace.threads.len().max(2));
    let chains = enumerate_cyclic_chains(&phase1.deps, max_len);
    let eval = |c: &CyclicChain| {
        let lists: Vec<&[ConcreteDependency]> =
            c.keys.iter().map(|k| phase1.deps[k].as_slice()).collect();
        find_concurrent_instance(&lists)
    };
    // Worker-pool setup is not free; dispatch only when there is real
    // fan-out.
    let instances: Vec<Option<Vec<usize>>> = if chains.len() > 1 {
        chains.par_iter().map(eval).collect()
    } else {
        chains.iter().map(eval).collect()
    };
    let mut patterns: Vec<DeadlockPattern> = Vec::new();
    for (chain, found) in chains.iter().zip(&instances) {
        if let Some(idxs) = found {
            patterns.push(build_pattern(chain, &phase1.deps, idxs, config.mode));
        }
    }
    let concurrent = patterns.len();

    let (mut kept, mut blocked) = match config.block {
        BlockMode::Off => (patterns, Vec::new()),
        BlockMode::Normal | BlockMode::Strict => filter_blocked(patterns),
    };
    let strict = (config.block == BlockMode::Strict).then(|| {
        strict_sweep(&mut kept, &mut blocked, &phase1.deps, max_len, config.strict_budget)
    });
    let phase2_ms = t2.elapsed().as_secs_f64() * 1e3;

    Ok(AnalysisReport {
        mode: config.mode,
        stages: StageCounts { chains: chains.len(), concurrent, unblocked: kept.len() },
        patterns: kept,
        blocked,
        diagnostics: phase1.diagnostics,
        timings: Timings { phase1_ms, phase2_ms },
        threads: norm.trace.threads.clone(),
        locks: norm.trace.locks.clone(),
        strict,
        event_clocks: phase1.event_clocks,
        dropped_events: dropped,
    })
}
