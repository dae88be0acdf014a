//! Brute-force referees for the clock engine and the pattern search: an
//! explicit-state reordering search that decides whether a candidate cycle
//! is schedulable, a rule-closure computation of the event order on small
//! traces, and a literal evaluation of the cycle order used by the block
//! filter. Exponential in the worst case; meant for desk-size traces in
//! tests, never for production runs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::engine::OrderMode;
use crate::trace::{
    critical_sections, last_write, validate, Event, EventId, LockIdx, NormalizedTrace, Op, Trace,
    VarIdx,
};
use crate::vclock::VClock;

/// Resource bounds for the reordering search.
#[derive(Clone, Copy, Debug)]
pub struct OracleLimits {
    /// Queries on traces with more source events than this are refused
    /// with `BudgetExceeded` (inserted requests do not count).
    pub max_events: usize,
    /// Cap on distinct scheduler states explored per query.
    pub max_states: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits { max_events: 24, max_states: 1_000_000 }
    }
}

/// Outcome of one reordering query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// A witness prefix exists; event ids in scheduling order.
    Yes { witness: Vec<EventId> },
    /// Exhaustively refuted within the limits.
    No,
    /// Limits hit before the search space was exhausted. Not a refutation.
    BudgetExceeded,
}

const NO_WRITE: u32 = u32::MAX;

struct Search<'b> {
    events: &'b [Event],
    proj: &'b [Vec<usize>],
    pos_in_thread: &'b [usize],
    cap: &'b [usize],
    is_candidate: &'b [bool],
    src_lw: &'b [Option<EventId>],
    forked_at: &'b [Option<usize>],
    cuts: Vec<u32>,
    holder: Vec<Option<u32>>,
    last_w: Vec<u32>,
    witness: Vec<EventId>,
    /// Cut/last-write states proven unable to reach the deadlock state.
    /// Lock holders are a function of the cuts; the last writer per
    /// variable is not (it depends on interleaving order), so it is part
    /// of the key.
    failed: HashSet<(Vec<u32>, Vec<u32>)>,
    states: usize,
    max_states: usize,
}

impl Search<'_> {
    fn accepted(&self) -> bool {
        (0..self.cuts.len())
            .all(|t| !self.is_candidate[t] || self.cuts[t] as usize == self.cap[t])
    }

    fn schedulable(&self, t: usize) -> bool {
        let k = self.cuts[t] as usize;
        if k >= self.cap[t] {
            return false;
        }
        if let Some(fi) = self.forked_at[t] {
            let p = self.events[fi].thread as usize;
            if self.pos_in_thread[fi] >= self.cuts[p] as usize {
                return false;
            }
        }
        let i = self.proj[t][k];
        match self.events[i].op {
            Op::Acquire(l) => self.holder[l as usize].is_none(),
            Op::Read(x) => {
                self.last_w[x as usize] == self.src_lw[i].unwrap_or(NO_WRITE)
            }
            Op::Join(u) => self.cuts[u as usize] as usize == self.proj[u as usize].len(),
            _ => true,
        }
    }

    fn dfs(&mut self) -> Result<bool, ()> {
        if self.accepted() {
            return Ok(true);
        }
        let key = (self.cuts.clone(), self.last_w.clone());
        if self.failed.contains(&key) {
            return Ok(false);
        }
        self.states += 1;
        if self.states > self.max_states {
            return Err(());
        }
        for t in 0..self.cuts.len() {
            if !self.schedulable(t) {
                continue;
            }
            let i = self.proj[t][self.cuts[t] as usize];
            let e = &self.events[i];
            self.cuts[t] += 1;
            self.witness.push(e.id);
            let mut undo_holder = None;
            let mut undo_lw = None;
            match e.op {
                Op::Acquire(l) => {
                    undo_holder = Some((l as usize, self.holder[l as usize]));
                    self.holder[l as usize] = Some(t as u32);
                }
                Op::Release(l) => {
                    undo_holder = Some((l as usize, self.holder[l as usize]));
                    self.holder[l as usize] = None;
                }
                Op::Write(x) => {
                    undo_lw = Some((x as usize, self.last_w[x as usize]));
                    self.last_w[x as usize] = e.id;
                }
                _ => {}
            }
            let r = self.dfs();
            if matches!(r, Ok(true)) {
                // Keep the accepting prefix intact in `witness`.
                return Ok(true);
            }
            if let Some((l, h)) = undo_holder {
                self.holder[l] = h;
            }
            if let Some((x, w)) = undo_lw {
                self.last_w[x] = w;
            }
            self.witness.pop();
            self.cuts[t] -= 1;
            r?;
        }
        self.failed.insert(key);
        Ok(false)
    }
}

/// Decide by exhaustive search whether a reordered prefix exists that
/// schedules every candidate request as its thread's final event while
/// respecting per-thread order, lock exclusion, each read's source last
/// write, and fork/join causality. `requests` are normalized event ids of
/// request events in pairwise-distinct threads.
pub fn is_predictable_deadlock(
    norm: &NormalizedTrace,
    requests: &[EventId],
    limits: &OracleLimits,
) -> Verdict {
    assert!(!requests.is_empty(), "candidate needs at least one request");
    let events = norm.events();
    let source_events = norm.synthetic.iter().filter(|s| !**s).count();
    if source_events > limits.max_events {
        return Verdict::BudgetExceeded;
    }

    let nthreads = norm.trace.threads.len();
    let mut proj: Vec<Vec<usize>> = vec![Vec::new(); nthreads];
    let mut pos_in_thread = vec![0usize; events.len()];
    for (i, e) in events.iter().enumerate() {
        pos_in_thread[i] = proj[e.thread as usize].len();
        proj[e.thread as usize].push(i);
    }
    let index_of: HashMap<EventId, usize> =
        events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();

    let mut cap: Vec<usize> = proj.iter().map(Vec::len).collect();
    let mut is_candidate = vec![false; nthreads];
    for &q in requests {
        let qi = *index_of.get(&q).expect("candidate request id not in trace");
        let e = &events[qi];
        assert!(matches!(e.op, Op::Request(_)), "candidate event is not a request");
        let t = e.thread as usize;
        assert!(!is_candidate[t], "two candidate requests share a thread");
        is_candidate[t] = true;
        cap[t] = pos_in_thread[qi] + 1;
    }

    let src_lw = last_write(events);
    let mut forked_at: Vec<Option<usize>> = vec![None; nthreads];
    for (i, e) in events.iter().enumerate() {
        if let Op::Fork(u) = e.op {
            forked_at[u as usize].get_or_insert(i);
        }
    }

    let mut search = Search {
        events,
        proj: &proj,
        pos_in_thread: &pos_in_thread,
        cap: &cap,
        is_candidate: &is_candidate,
        src_lw: &src_lw,
        forked_at: &forked_at,
        cuts: vec![0; nthreads],
        holder: vec![None; norm.trace.locks.len()],
        last_w: vec![NO_WRITE; norm.trace.vars.len()],
        witness: Vec::new(),
        failed: HashSet::new(),
        states: 0,
        max_states: limits.max_states,
    };
    match search.dfs() {
        Ok(true) => Verdict::Yes { witness: search.witness },
        Ok(false) => Verdict::No,
        Err(()) => Verdict::BudgetExceeded,
    }
}

/// Independent replay check of a witness prefix: per-thread prefix order,
/// lock discipline, every read preceded by exactly its source last write,
/// fork/join causality, and each candidate request final in its thread.
pub fn audit_witness(
    norm: &NormalizedTrace,
    witness: &[EventId],
    requests: &[EventId],
) -> Result<(), String> {
    let events = norm.events();
    let nthreads = norm.trace.threads.len();
    let mut proj: Vec<Vec<usize>> = vec![Vec::new(); nthreads];
    for (i, e) in events.iter().enumerate() {
        proj[e.thread as usize].push(i);
    }
    let index_of: HashMap<EventId, usize> =
        events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let mut forked_at: Vec<Option<usize>> = vec![None; nthreads];
    for (i, e) in events.iter().enumerate() {
        if let Op::Fork(u) = e.op {
            forked_at[u as usize].get_or_insert(i);
        }
    }
    let src_lw = last_write(events);

    let mut cuts = vec![0usize; nthreads];
    let mut holder: Vec<Option<u32>> = vec![None; norm.trace.locks.len()];
    let mut last_w: HashMap<VarIdx, EventId> = HashMap::new();
    let mut seen: HashSet<EventId> = HashSet::new();
    for &id in witness {
        let &i = index_of.get(&id).ok_or(format!("unknown event {id}"))?;
        if !seen.insert(id) {
            return Err(format!("event {id} scheduled twice"));
        }
        let e = &events[i];
        let t = e.thread as usize;
        if proj[t].get(cuts[t]) != Some(&i) {
            return Err(format!("event {id} breaks thread order"));
        }
        if let Some(fi) = forked_at[t] {
            if !seen.contains(&events[fi].id) {
                return Err(format!("event {id} runs before its thread is forked"));
            }
        }
        cuts[t] += 1;
        match e.op {
            Op::Acquire(l) => {
                if holder[l as usize].is_some() {
                    return Err(format!("event {id} acquires a held lock"));
                }
                holder[l as usize] = Some(t as u32);
            }
            Op::Release(l) => {
                if holder[l as usize] != Some(t as u32) {
                    return Err(format!("event {id} releases a lock it does not hold"));
                }
                holder[l as usize] = None;
            }
            Op::Read(x) => {
                if last_w.get(&x).copied() != src_lw[i] {
                    return Err(format!("read {id} does not see its source writer"));
                }
            }
            Op::Write(x) => {
                last_w.insert(x, id);
            }
            Op::Join(u) => {
                if cuts[u as usize] != proj[u as usize].len() {
                    return Err(format!("join {id} runs before the child finished"));
                }
            }
            Op::Request(_) | Op::Fork(_) => {}
        }
    }
    for &q in requests {
        let &qi = index_of.get(&q).ok_or(format!("unknown request {q}"))?;
        let t = events[qi].thread as usize;
        if cuts[t] == 0 || proj[t][cuts[t] - 1] != qi {
            return Err(format!("request {q} is not its thread's final event"));
        }
    }
    // Belt and braces: the replayed prefix must also pass the standalone
    // well-formedness validator.
    let sub = Trace {
        events: witness.iter().map(|id| events[index_of[id]]).collect(),
        threads: norm.trace.threads.clone(),
        locks: norm.trace.locks.clone(),
        vars: norm.trace.vars.clone(),
    };
    let report = validate(&sub, false);
    if !report.is_ok() {
        return Err(format!("witness fails validation: {:?}", report.violations));
    }
    Ok(())
}

/// Serialize a witness prefix back to canonical trace lines for replay.
pub fn witness_to_canonical(norm: &NormalizedTrace, witness: &[EventId]) -> String {
    let events = norm.events();
    let index_of: HashMap<EventId, usize> =
        events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let sub = Trace {
        events: witness.iter().map(|id| events[index_of[id]]).collect(),
        threads: norm.trace.threads.clone(),
        locks: norm.trace.locks.clone(),
        vars: norm.trace.vars.clone(),
    };
    sub.to_canonical()
}

/// One cyclic acquire-request candidate. Entry `i` holds the acquire of
/// the lock requested by entry `i-1` (wrapping), so the tuple describes a
/// possible circular wait.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateCycle {
    /// (acquire id, request id) pairs in cycle order, rotated so the
    /// entry with the smallest thread index comes first.
    pub entries: Vec<(EventId, EventId)>,
    /// True when the held locksets at the requests are pairwise disjoint.
    pub guard_disjoint: bool,
}

impl CandidateCycle {
    pub fn request_ids(&self) -> Vec<EventId> {
        self.entries.iter().map(|&(_, q)| q).collect()
    }
}

/// Exhaustively enumerate all cyclic request tuples over distinct threads.
pub fn enumerate_candidate_cycles(norm: &NormalizedTrace) -> Vec<CandidateCycle> {
    struct Node {
        idx: usize,
        id: EventId,
        thread: u32,
        lock: LockIdx,
        locks: BTreeSet<LockIdx>,
        acq_of: BTreeMap<LockIdx, EventId>,
    }
    let events = norm.events();
    let held = critical_sections(events);
    let mut nodes = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if let Op::Request(l) = e.op {
            let mut locks = BTreeSet::new();
            let mut acq_of = BTreeMap::new();
            for &(aid, m) in &held.acquires[i] {
                locks.insert(m);
                acq_of.insert(m, aid);
            }
            nodes.push(Node { idx: i, id: e.id, thread: e.thread, lock: l, locks, acq_of });
        }
    }

    let nthreads = norm.trace.threads.len();
    let mut out = Vec::new();
    let mut chain: Vec<usize> = Vec::new();

    fn extend(
        nodes: &[Node],
        chain: &mut Vec<usize>,
        used: &mut Vec<bool>,
        max_len: usize,
        out: &mut Vec<CandidateCycle>,
    ) {
        let start = &nodes[chain[0]];
        let last = &nodes[*chain.last().unwrap()];
        for (ci, cand) in nodes.iter().enumerate() {
            if cand.thread <= start.thread || used[cand.thread as usize] {
                continue;
            }
            if !cand.locks.contains(&last.lock) {
                continue;
            }
            chain.push(ci);
            used[cand.thread as usize] = true;
            if start.locks.contains(&cand.lock) {
                let n = chain.len();
                let entries = (0..n)
                    .map(|i| {
                        let me = &nodes[chain[i]];
                        let prev = &nodes[chain[(i + n - 1) % n]];
                        (me.acq_of[&prev.lock], me.id)
                    })
                    .collect();
                let guard_disjoint = (0..n).all(|i| {
                    (i + 1..n).all(|j| {
                        nodes[chain[i]].locks.is_disjoint(&nodes[chain[j]].locks)
                    })
                });
                out.push(CandidateCycle { entries, guard_disjoint });
            }
            if chain.len() < max_len {
                extend(nodes, chain, used, max_len, out);
            }
            used[cand.thread as usize] = false;
            chain.pop();
        }
    }

    let mut used = vec![false; nthreads];
    for s in 0..nodes.len() {
        chain.push(s);
        used[nodes[s].thread as usize] = true;
        extend(&nodes, &mut chain, &mut used, nthreads, &mut out);
        used[nodes[s].thread as usize] = false;
        chain.pop();
    }
    // Deterministic order: by first request's trace position, then length.
    out.sort_by_key(|c| {
        let first = c.entries[0].1;
        (nodes.iter().find(|n| n.id == first).map(|n| n.idx), c.entries.len())
    });
    out
}

/// A candidate confirmed by the reordering search.
#[derive(Clone, Debug)]
pub struct ConfirmedDeadlock {
    pub cycle: CandidateCycle,
    pub witness: Vec<EventId>,
}

/// Result of checking every enumerated candidate.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub candidates: Vec<CandidateCycle>,
    pub confirmed: Vec<ConfirmedDeadlock>,
    /// True when at least one verdict hit the budget; absence of a
    /// confirmation then proves nothing.
    pub budget_hit: bool,
}

/// Enumerate all cyclic candidates and keep those the reordering search
/// confirms. Verdicts are memoized per request set since the search only
/// depends on the requests.
pub fn enumerate_predictable_deadlocks(
    norm: &NormalizedTrace,
    limits: &OracleLimits,
) -> Enumeration {
    let candidates = enumerate_candidate_cycles(norm);
    let mut confirmed = Vec::new();
    let mut budget_hit = false;
    let mut memo: HashMap<Vec<EventId>, Verdict> = HashMap::new();
    for c in &candidates {
        let mut key = c.request_ids();
        key.sort_unstable();
        let verdict = memo
            .entry(key)
            .or_insert_with(|| is_predictable_deadlock(norm, &c.request_ids(), limits));
        match verdict {
            Verdict::Yes { witness } => {
                confirmed.push(ConfirmedDeadlock { cycle: c.clone(), witness: witness.clone() })
            }
            Verdict::No => {}
            Verdict::BudgetExceeded => budget_hit = true,
        }
    }
    Enumeration { candidates, confirmed, budget_hit }
}

/// Strict order relation over the events of one normalized trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderRelation {
    n: usize,
    less: Vec<bool>,
    index_of: HashMap<EventId, usize>,
}

impl OrderRelation {
    pub fn event_count(&self) -> usize {
        self.n
    }

    pub fn less_idx(&self, i: usize, j: usize) -> bool {
        self.less[i * self.n + j]
    }

    pub fn less_id(&self, e: EventId, f: EventId) -> bool {
        self.less_idx(self.index_of[&e], self.index_of[&f])
    }

    pub fn concurrent_id(&self, e: EventId, f: EventId) -> bool {
        e != f && !self.less_id(e, f) && !self.less_id(f, e)
    }
}

/// Close the seed order (program order; conflicting-access or last-write
/// edges; fork/join edges) under transitivity and the release rule: when
/// two critical sections share a lock and the earlier acquire is ordered
/// before an event of the later section, the earlier release is too.
pub fn order_fixpoint(norm: &NormalizedTrace, mode: OrderMode) -> OrderRelation {
    let events = norm.events();
    let n = events.len();
    assert!(n <= 64, "rule-closure referee is limited to 64 events");
    let mut less = vec![false; n * n];

    let nthreads = norm.trace.threads.len();
    let mut prev: Vec<Option<usize>> = vec![None; nthreads];
    for (i, e) in events.iter().enumerate() {
        if let Some(p) = prev[e.thread as usize] {
            less[p * n + i] = true;
        }
        prev[e.thread as usize] = Some(i);
    }

    match mode {
        OrderMode::Trw => {
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (&events[i].op, &events[j].op);
                    let conflicting = match (a.var(), b.var()) {
                        (Some(x), Some(y)) if x == y => {
                            matches!(a, Op::Write(_)) || matches!(b, Op::Write(_))
                        }
                        _ => false,
                    };
                    if conflicting {
                        less[i * n + j] = true;
                    }
                }
            }
        }
        OrderMode::Pwr => {
            let index_of: HashMap<EventId, usize> =
                events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
            for (j, w) in last_write(events).iter().enumerate() {
                if let Some(wid) = w {
                    less[index_of[wid] * n + j] = true;
                }
            }
        }
    }

    for (i, e) in events.iter().enumerate() {
        match e.op {
            Op::Fork(u) => {
                for (j, f) in events.iter().enumerate().skip(i + 1) {
                    if f.thread == u {
                        less[i * n + j] = true;
                    }
                }
            }
            Op::Join(u) => {
                for (j, f) in events.iter().enumerate().take(i) {
                    if f.thread == u {
                        less[j * n + i] = true;
                    }
                }
            }
            _ => {}
        }
    }

    // Critical sections, grouped per lock in acquire trace order.
    let held = critical_sections(events);
    struct Section {
        acq_idx: usize,
        rel_idx: Option<usize>,
        members: Vec<usize>,
    }
    let mut by_acquire: BTreeMap<EventId, (LockIdx, Section)> = BTreeMap::new();
    for (f, e) in events.iter().enumerate() {
        for &(aid, l) in &held.acquires[f] {
            let entry = by_acquire.entry(aid).or_insert((
                l,
                Section { acq_idx: f, rel_idx: None, members: Vec::new() },
            ));
            entry.1.members.push(f);
            if matches!(e.op, Op::Release(m) if m == l) {
                entry.1.rel_idx = Some(f);
            }
        }
    }
    let mut by_lock: BTreeMap<LockIdx, Vec<Section>> = BTreeMap::new();
    for (_, (l, s)) in by_acquire {
        by_lock.entry(l).or_default().push(s);
    }
    for secs in by_lock.values_mut() {
        secs.sort_by_key(|s| s.acq_idx);
    }

    loop {
        let mut changed = false;
        for k in 0..n {
            for i in 0..n {
                if less[i * n + k] {
                    for j in 0..n {
                        if less[k * n + j] && !less[i * n + j] {
                            less[i * n + j] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        for secs in by_lock.values() {
            for (si, s1) in secs.iter().enumerate() {
                let Some(r1) = s1.rel_idx else { continue };
                for s2 in &secs[si + 1..] {
                    for &f in &s2.members {
                        if less[s1.acq_idx * n + f] && !less[r1 * n + f] {
                            less[r1 * n + f] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    debug_assert!((0..n).all(|i| !less[i * n + i]), "order must stay irreflexive");

    OrderRelation {
        n,
        less,
        index_of: events.iter().enumerate().map(|(i, e)| (e.id, i)).collect(),
    }
}

/// Derive the order the engine's clocks encode: thread order within a
/// thread, strict clock dominance across threads.
pub fn clock_order(norm: &NormalizedTrace, clocks: &[VClock]) -> OrderRelation {
    let events = norm.events();
    let n = events.len();
    assert_eq!(clocks.len(), n, "one observation clock per event");
    let mut less = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            less[i * n + j] = if events[i].thread == events[j].thread {
                i < j
            } else {
                clocks[i].less(&clocks[j])
            };
        }
    }
    OrderRelation {
        n,
        less,
        index_of: events.iter().enumerate().map(|(i, e)| (e.id, i)).collect(),
    }
}

/// Literal evaluation of the cycle order: `a` precedes `b` when every
/// entry of `a` has an entry of `b` whose request comes later in the
/// trace while still holding `a`'s acquire.
pub fn cycle_order_bruteforce(
    norm: &NormalizedTrace,
    a: &CandidateCycle,
    b: &CandidateCycle,
) -> bool {
    let events = norm.events();
    let held = critical_sections(events);
    let index_of: HashMap<EventId, usize> =
        events.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    a.entries.iter().all(|&(acq_a, req_a)| {
        let qa = index_of[&req_a];
        b.entries.iter().any(|&(_, req_b)| {
            let qb = index_of[&req_b];
            qa < qb && held.acquires[qb].iter().any(|&(aid, _)| aid == acq_a)
        })
    })
}
