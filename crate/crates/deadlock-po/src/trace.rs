//! Trace model: events, parsing, well-formedness, request normalization,
//! critical sections, and last-write lookup.
//!
//! A trace is a sequence of operations observed from one program run. The
//! line format is `<tid>|<op>(<arg>)` with `#` comments and blank lines
//! ignored; thread ids match `T[0-9]+`. Event ids are the 1-based index over
//! event lines of the source file and stay attached to events through
//! normalization.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::vclock::ThreadIdx;

/// Dense lock index (first-appearance order).
pub type LockIdx = u32;
/// Dense variable index (first-appearance order).
pub type VarIdx = u32;
/// 1-based event id, stable across normalization.
pub type EventId = u32;

/// One trace operation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Op {
    Read(VarIdx),
    Write(VarIdx),
    Request(LockIdx),
    Acquire(LockIdx),
    Release(LockIdx),
    Fork(ThreadIdx),
    Join(ThreadIdx),
}

impl Op {
    pub fn lock(&self) -> Option<LockIdx> {
        match *self {
            Op::Request(l) | Op::Acquire(l) | Op::Release(l) => Some(l),
            _ => None,
        }
    }

    pub fn var(&self) -> Option<VarIdx> {
        match *self {
            Op::Read(x) | Op::Write(x) => Some(x),
            _ => None,
        }
    }
}

/// One event: an operation performed by a thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub thread: ThreadIdx,
    pub op: Op,
}

/// A parsed trace with interned thread/lock/variable names.
///
/// Invariants: `events[i].id == i + 1` for parsed traces; name tables are in
/// first-appearance order and dense indices refer into them.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub events: Vec<Event>,
    pub threads: Vec<String>,
    pub locks: Vec<String>,
    pub vars: Vec<String>,
}

impl Trace {
    pub fn thread_name(&self, t: ThreadIdx) -> &str {
        &self.threads[t as usize]
    }

    pub fn lock_name(&self, l: LockIdx) -> &str {
        &self.locks[l as usize]
    }

    pub fn var_name(&self, x: VarIdx) -> &str {
        &self.vars[x as usize]
    }

    /// Render in the canonical line format.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let (op, arg) = match e.op {
                Op::Read(x) => ("r", self.var_name(x)),
                Op::Write(x) => ("w", self.var_name(x)),
                Op::Request(l) => ("req", self.lock_name(l)),
                Op::Acquire(l) => ("acq", self.lock_name(l)),
                Op::Release(l) => ("rel", self.lock_name(l)),
                Op::Fork(u) => ("fork", self.thread_name(u)),
                Op::Join(u) => ("join", self.thread_name(u)),
            };
            out.push_str(self.thread_name(e.thread));
            out.push('|');
            out.push_str(op);
            out.push('(');
            out.push_str(arg);
            out.push_str(")\n");
        }
        out
    }
}

/// Errors from parsing or request normalization.
#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A request is thread-immediately followed by an acquire of a different
    /// lock. Such logs come from instrumentation dropping events and cannot
    /// be normalized meaningfully.
    #[error(
        "event {request}: request of {requested} is followed by acquire {acquire} of {acquired}"
    )]
    RequestAcquireMismatch {
        request: EventId,
        requested: String,
        acquire: EventId,
        acquired: String,
    },
}

fn intern(table: &mut Vec<String>, name: &str) -> u32 {
    if let Some(i) = table.iter().position(|n| n == name) {
        return i as u32;
    }
    table.push(name.to_string());
    (table.len() - 1) as u32
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn valid_thread_id(s: &str) -> bool {
    s.len() >= 2 && s.starts_with('T') && s[1..].chars().all(|c| c.is_ascii_digit())
}

/// Parse the canonical trace format.
pub fn parse_trace(input: &str) -> Result<Trace, TraceError> {
    let mut trace = Trace::default();
    let mut next_id: EventId = 1;
    for (lineno, raw) in input.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line: lineno + 1, msg };
        let (tid, rest) = line
            .split_once('|')
            .ok_or_else(|| err(format!("expected '<tid>|<op>(<arg>)', got '{line}'")))?;
        let tid = tid.trim();
        if !valid_thread_id(tid) {
            return Err(err(format!("invalid thread id '{tid}' (expected T<digits>)")));
        }
        let rest = rest.trim();
        let (op, arg) = rest
            .strip_suffix(')')
            .and_then(|r| r.split_once('('))
            .ok_or_else(|| err(format!("malformed operation '{rest}'")))?;
        let (op, arg) = (op.trim(), arg.trim());
        let thread = intern(&mut trace.threads, tid);
        let op = match op {
            "r" | "w" => {
                if !valid_token(arg) {
                    return Err(err(format!("invalid variable name '{arg}'")));
                }
                let x = intern(&mut trace.vars, arg);
                if op == "r" {
                    Op::Read(x)
                } else {
                    Op::Write(x)
                }
            }
            "req" | "acq" | "rel" => {
                if !valid_token(arg) {
                    return Err(err(format!("invalid lock name '{arg}'")));
                }
                let l = intern(&mut trace.locks, arg);
                match op {
                    "req" => Op::Request(l),
                    "acq" => Op::Acquire(l),
                    _ => Op::Release(l),
                }
            }
            "fork" | "join" => {
                if !valid_thread_id(arg) {
                    return Err(err(format!("invalid thread id '{arg}' in {op}")));
                }
                let u = intern(&mut trace.threads, arg);
                if u == thread {
                    return Err(err(format!("thread {tid} cannot {op} itself")));
                }
                if op == "fork" {
                    Op::Fork(u)
                } else {
                    Op::Join(u)
                }
            }
            other => return Err(err(format!("unknown operation '{other}'"))),
        };
        trace.events.push(Event { id: next_id, thread, op });
        next_id += 1;
    }
    Ok(trace)
}

/// Well-formedness violation categories.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum WfKind {
    /// A lock acquired twice without an intervening release.
    DoubleAcquire,
    /// A release without a matching prior acquire in the same thread.
    UnmatchedRelease,
    /// An acquire not immediately preceded (in its thread) by a matching
    /// request, or a request whose thread-next event is not the matching
    /// acquire. Only checked in strict-requests mode; we read the
    /// well-formedness clause as requiring thread-immediate adjacency, with
    /// a thread-final request explicitly legal.
    RequestShape,
}

/// One well-formedness violation with the events that witness it.
#[derive(Clone, Debug, Serialize)]
pub struct WfViolation {
    pub kind: WfKind,
    pub events: Vec<EventId>,
    pub lock: Option<String>,
    pub message: String,
}

/// Outcome of `validate`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<WfViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Locks involved in acquire/release violations; lenient analysis drops
    /// all events on these locks.
    pub fn dirty_locks(&self, trace: &Trace) -> Vec<LockIdx> {
        let mut out: Vec<LockIdx> = Vec::new();
        for v in &self.violations {
            if v.kind == WfKind::RequestShape {
                continue;
            }
            if let Some(name) = &v.lock {
                if let Some(idx) = trace.locks.iter().position(|n| n == name) {
                    let idx = idx as u32;
                    if !out.contains(&idx) {
                        out.push(idx);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Check lock well-formedness. Dangling acquires and a thread-final request
/// are legal. `strict_requests` additionally enforces request shape.
pub fn validate(trace: &Trace, strict_requests: bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut holder: BTreeMap<LockIdx, (ThreadIdx, EventId)> = BTreeMap::new();
    for e in &trace.events {
        match e.op {
            Op::Acquire(l) => {
                if let Some(&(_, prev)) = holder.get(&l) {
                    report.violations.push(WfViolation {
                        kind: WfKind::DoubleAcquire,
                        events: vec![prev, e.id],
                        lock: Some(trace.lock_name(l).to_string()),
                        message: format!(
                            "{} acquired at event {} while still held since event {}",
                            trace.lock_name(l),
                            e.id,
                            prev
                        ),
                    });
                }
                holder.insert(l, (e.thread, e.id));
            }
            Op::Release(l) => match holder.remove(&l) {
                Some((t, _)) if t == e.thread => {}
                Some((t, acq)) => {
                    report.violations.push(WfViolation {
                        kind: WfKind::UnmatchedRelease,
                        events: vec![acq, e.id],
                        lock: Some(trace.lock_name(l).to_string()),
                        message: format!(
                            "{} released at event {} by {} but held by {} since event {}",
                            trace.lock_name(l),
                            e.id,
                            trace.thread_name(e.thread),
                            trace.thread_name(t),
                            acq
                        ),
                    });
                }
                None => {
                    report.violations.push(WfViolation {
                        kind: WfKind::UnmatchedRelease,
                        events: vec![e.id],
                        lock: Some(trace.lock_name(l).to_string()),
                        message: format!(
                            "{} released at event {} without a matching acquire",
                            trace.lock_name(l),
                            e.id
                        ),
                    });
                }
            },
            _ => {}
        }
    }
    if strict_requests {
        check_request_shape(trace, &mut report);
    }
    report
}

fn check_request_shape(trace: &Trace, report: &mut ValidationReport) {
    // Thread-next event per event, by scanning backwards.
    let n = trace.events.len();
    let mut next_in_thread: Vec<Option<usize>> = vec![None; n];
    let mut last_seen: BTreeMap<ThreadIdx, usize> = BTreeMap::new();
    for i in (0..n).rev() {
        let t = trace.events[i].thread;
        next_in_thread[i] = last_seen.get(&t).copied();
        last_seen.insert(t, i);
    }
    for (i, e) in trace.events.iter().enumerate() {
        match e.op {
            Op::Request(l) => {
                // Thread-next must be the matching acquire; thread-final is legal.
                if let Some(j) = next_in_thread[i] {
                    let f = &trace.events[j];
                    if f.op != Op::Acquire(l) {
                        report.violations.push(WfViolation {
                            kind: WfKind::RequestShape,
                            events: vec![e.id, f.id],
                            lock: Some(trace.lock_name(l).to_string()),
                            message: format!(
                                "request at event {} must be followed in its thread by acq({}) \
                                 or end the thread, found event {}",
                                e.id,
                                trace.lock_name(l),
                                f.id
                            ),
                        });
                    }
                }
            }
            Op::Acquire(l) => {
                let prev = trace.events[..i].iter().rev().find(|p| p.thread == e.thread);
                let preceded = prev.is_some_and(|p| p.op == Op::Request(l));
                if !preceded {
                    report.violations.push(WfViolation {
                        kind: WfKind::RequestShape,
                        events: vec![e.id],
                        lock: Some(trace.lock_name(l).to_string()),
                        message: format!(
                            "acquire at event {} lacks an immediately preceding req({}) \
                             in its thread",
                            e.id,
                            trace.lock_name(l)
                        ),
                    });
                }
            }
            _ => {}
        }
    }
}

/// A trace in which every acquire is thread-immediately preceded by its
/// request. Synthetic requests carry fresh ids above the source maximum and
/// inherit their acquire's source position for reporting.
#[derive(Clone, Debug)]
pub struct NormalizedTrace {
    pub trace: Trace,
    /// Per event index: 1-based position cited in reports. Original events
    /// keep their source position; a synthetic request uses its acquire's.
    pub source_pos: Vec<u32>,
    /// Per event index: true for inserted requests.
    pub synthetic: Vec<bool>,
    /// New event id -> source position of the acquire it precedes.
    pub synthetic_positions: BTreeMap<EventId, u32>,
}

impl NormalizedTrace {
    pub fn events(&self) -> &[Event] {
        &self.trace.events
    }

    /// 1-based position of an event in the normalized order.
    pub fn pos_of_index(&self, idx: usize) -> u32 {
        idx as u32 + 1
    }
}

/// Insert a synthetic request before every acquire that lacks an explicit
/// one. Errors when an explicit request is thread-immediately followed by an
/// acquire of a different lock.
pub fn normalize_requests(trace: &Trace) -> Result<NormalizedTrace, TraceError> {
    let n = trace.events.len();
    let mut next_in_thread: Vec<Option<usize>> = vec![None; n];
    let mut last_seen: BTreeMap<ThreadIdx, usize> = BTreeMap::new();
    for i in (0..n).rev() {
        let t = trace.events[i].thread;
        next_in_thread[i] = last_seen.get(&t).copied();
        last_seen.insert(t, i);
    }
    // Reject request-acquire lock mismatches up front.
    for (i, e) in trace.events.iter().enumerate() {
        if let Op::Request(l) = e.op {
            if let Some(j) = next_in_thread[i] {
                let f = &trace.events[j];
                if let Op::Acquire(m) = f.op {
                    if m != l {
                        return Err(TraceError::RequestAcquireMismatch {
                            request: e.id,
                            requested: trace.lock_name(l).to_string(),
                            acquire: f.id,
                            acquired: trace.lock_name(m).to_string(),
                        });
                    }
                }
            }
        }
    }

    let max_id = trace.events.iter().map(|e| e.id).max().unwrap_or(0);
    let mut next_fresh = max_id + 1;
    let mut events = Vec::with_capacity(n + n / 2);
    let mut source_pos = Vec::with_capacity(n + n / 2);
    let mut synthetic = Vec::with_capacity(n + n / 2);
    let mut synthetic_positions = BTreeMap::new();
    // Last pending explicit request per thread, cleared by any same-thread event.
    let mut pending: BTreeMap<ThreadIdx, LockIdx> = BTreeMap::new();

    for (i, e) in trace.events.iter().enumerate() {
        if let Op::Acquire(l) = e.op {
            let explicit = pending.get(&e.thread) == Some(&l);
            if !explicit {
                let id = next_fresh;
                next_fresh += 1;
                events.push(Event { id, thread: e.thread, op: Op::Request(l) });
                source_pos.push(i as u32 + 1);
                synthetic.push(true);
                synthetic_positions.insert(id, i as u32 + 1);
            }
        }
        match e.op {
            Op::Request(l) => {
                pending.insert(e.thread, l);
            }
            _ => {
                pending.remove(&e.thread);
            }
        }
        events.push(*e);
        source_pos.push(i as u32 + 1);
        synthetic.push(false);
    }

    Ok(NormalizedTrace {
        trace: Trace {
            events,
            threads: trace.threads.clone(),
            locks: trace.locks.clone(),
            vars: trace.vars.clone(),
        },
        source_pos,
        synthetic,
        synthetic_positions,
    })
}

/// Per-event held-acquire sets. `acquires[i]` lists (acquire event id, lock)
/// pairs whose critical section contains event `i`, outermost first. An
/// acquire is inside its own critical section; a release is inside the
/// section it closes; unreleased sections extend to the trace end.
#[derive(Clone, Debug)]
pub struct HeldSets {
    pub acquires: Vec<Vec<(EventId, LockIdx)>>,
}

impl HeldSets {
    /// Locks held at event `i`.
    pub fn locks_at(&self, i: usize) -> Vec<LockIdx> {
        self.acquires[i].iter().map(|&(_, l)| l).collect()
    }
}

/// Compute held-acquire sets for every event of a (normalized or raw) trace.
pub fn critical_sections(events: &[Event]) -> HeldSets {
    let mut held: BTreeMap<ThreadIdx, Vec<(EventId, LockIdx)>> = BTreeMap::new();
    let mut acquires = Vec::with_capacity(events.len());
    for e in events {
        let stack = held.entry(e.thread).or_default();
        match e.op {
            Op::Acquire(l) => {
                stack.push((e.id, l));
                acquires.push(stack.clone());
            }
            Op::Release(l) => {
                // The release is still inside the section it closes.
                acquires.push(stack.clone());
                if let Some(p) = stack.iter().rposition(|&(_, m)| m == l) {
                    stack.remove(p);
                }
            }
            _ => acquires.push(stack.clone()),
        }
    }
    HeldSets { acquires }
}

/// For each event index, the id of the last write to the same variable
/// strictly before it in trace order (`None` for non-reads and first reads).
pub fn last_write(events: &[Event]) -> Vec<Option<EventId>> {
    let mut last: BTreeMap<VarIdx, EventId> = BTreeMap::new();
    let mut out = vec![None; events.len()];
    for (i, e) in events.iter().enumerate() {
        match e.op {
            Op::Read(x) => out[i] = last.get(&x).copied(),
            Op::Write(x) => {
                last.insert(x, e.id);
            }
            _ => {}
        }
    }
    out
}
