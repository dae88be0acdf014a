//! Single-pass dependency engine: computes per-thread vector clocks under a
//! release-order partial order (two strengths, `Trw` and `Pwr`), collects
//! concrete lock dependencies, and runs the boundedness and nesting
//! diagnostics that guard the order's soundness assumptions.
//!
//! Handler contract per event, in order:
//! acquire: dependency append (if locks held) with the pre-sync clock and
//! pre-push held set, push, guard bookkeeping, syncCS, store Acq, inc;
//! release: guard check, clear guard row, pop, append (Acq, clock) to the
//! lock history, inc; write: join last-write, join last-read (Trw), syncCS
//! (Trw), store last-write, inc; read: join last-write, syncCS, store
//! last-read (Trw), inc; fork: seed child clock; join: absorb child clock,
//! syncCS, inc. Requests advance no clock; their position and id are carried
//! into the dependency recorded at the matching acquire.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::trace::{Event, EventId, LockIdx, NormalizedTrace, Op};
use crate::vclock::{ThreadIdx, VClock};

/// Which partial order the clocks track. `Trw` orders all conflicting
/// accesses by trace order; `Pwr` orders a read after its last write only.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    Trw,
    Pwr,
}

impl OrderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrderMode::Trw => "trw",
            OrderMode::Pwr => "pwr",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EngineOptions {
    pub mode: OrderMode,
    pub record_event_clocks: bool,
    pub check_boundedness: bool,
    /// Skip history entries released by the consuming thread itself. A
    /// thread's own releases are always absorbed already, so reports are
    /// unchanged; validated by report equality under fuzzing.
    pub thread_local_histories: bool,
    /// Drop the write-write and read-write joins at writes (debug aid to
    /// reproduce the unsound variant). Trw only; critical-section syncs and
    /// last-read stores stay.
    pub disable_write_write_sync: bool,
    /// Collapse redundant consecutive dependencies after the pass.
    pub dedupe: bool,
}

impl EngineOptions {
    pub fn new(mode: OrderMode) -> Self {
        EngineOptions {
            mode,
            record_event_clocks: false,
            check_boundedness: true,
            thread_local_histories: false,
            disable_write_write_sync: false,
            dedupe: false,
        }
    }
}

/// One recorded lock dependency: the thread requested `key.lock` at
/// `request_pos` while holding `acquires_held`.
#[derive(Clone, Debug, Serialize)]
pub struct ConcreteDependency {
    /// Position of the request in the normalized event sequence (1-based);
    /// the ordering key for blocking comparisons and list order.
    pub request_pos: u32,
    /// Event id of the request (synthetic ids lie above the source maximum).
    pub request_id: EventId,
    /// 1-based source position cited in reports (the acquire's line when the
    /// request was inserted).
    pub display_pos: u32,
    /// Thread clock at the request (before the acquire's syncCS).
    pub clock: VClock,
    /// Acquires held at the request, in push order.
    pub acquires_held: Vec<(EventId, LockIdx)>,
    /// Owner-thread inbound sync epoch at record time.
    pub epoch: u64,
}

/// Abstract dependency key: thread `thread` requests `lock` while holding
/// exactly the locks in `lockset` (sorted, never containing `lock`).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize)]
pub struct DepKey {
    pub thread: ThreadIdx,
    pub lock: LockIdx,
    pub lockset: Vec<LockIdx>,
}

/// Map from abstract dependency to its concrete instances in trace order.
pub type DependencyMap = BTreeMap<DepKey, Vec<ConcreteDependency>>;

/// A recorded guard violation: `guarded_thread` requested a lock while
/// `guard_lock` was held by another thread that already ordered before the
/// request, and the guard's release then ordered after it.
#[derive(Clone, Debug, Serialize)]
pub struct BoundednessWitness {
    pub guard_lock: String,
    pub guarded_thread: String,
    pub recorded_at_event: EventId,
    pub release_event: EventId,
    pub releasing_thread: String,
}

/// A release that did not pop the top of its thread's lock stack.
#[derive(Clone, Debug, Serialize)]
pub struct NestingWitness {
    pub release_event: EventId,
    pub released_lock: String,
    pub innermost_lock: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct DedupeStats {
    pub entries_before: usize,
    pub entries_after: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// False when the order's request-guard assumption was observed broken;
    /// reported deadlock patterns may then include false positives.
    pub trw_bounded: bool,
    pub boundedness_witnesses: Vec<BoundednessWitness>,
    pub well_nested: bool,
    pub nesting_witnesses: Vec<NestingWitness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dedupe: Option<DedupeStats>,
}

#[derive(Clone, Debug)]
pub struct Phase1Output {
    pub deps: DependencyMap,
    /// Per normalized-event observation clock (pre-increment), when recorded.
    pub event_clocks: Option<Vec<VClock>>,
    pub diagnostics: Diagnostics,
}

struct HistEntry {
    acq: VClock,
    rel: VClock,
    by: ThreadIdx,
}

struct Engine<'a> {
    norm: &'a NormalizedTrace,
    opts: &'a EngineOptions,
    th: Vec<VClock>,
    last_write: Vec<VClock>,
    last_read: Vec<VClock>,
    acq_clock: Vec<VClock>,
    hist: Vec<Vec<HistEntry>>,
    held: Vec<Vec<(EventId, LockIdx)>>,
    /// Dead-prefix cursor per (thread, lock): entries before it are already
    /// absorbed by that thread forever (thread clocks only grow).
    hist_cursor: Vec<Vec<usize>>,
    /// Pending request (normalized pos, event id) per thread.
    pending_request: Vec<Option<(u32, EventId)>>,
    epoch: Vec<u64>,
    deps: DependencyMap,
    all_held: BTreeMap<LockIdx, u32>,
    /// guard[(lock, thread)] = (request clock, recording event id).
    guard: BTreeMap<(LockIdx, ThreadIdx), (VClock, EventId)>,
    clocks_out: Vec<VClock>,
    diags: Diagnostics,
}

impl<'a> Engine<'a> {
    fn new(norm: &'a NormalizedTrace, opts: &'a EngineOptions) -> Self {
        let nthreads = norm.trace.threads.len();
        let nlocks = norm.trace.locks.len();
        let nvars = norm.trace.vars.len();
        Engine {
            norm,
            opts,
            th: (0..nthreads).map(|t| VClock::initial(nthreads, t as ThreadIdx)).collect(),
            last_write: vec![VClock::bottom(nthreads); nvars],
            last_read: vec![VClock::bottom(nthreads); nvars],
            acq_clock: vec![VClock::bottom(nthreads); nlocks],
            hist: (0..nlocks).map(|_| Vec::new()).collect(),
            held: vec![Vec::new(); nthreads],
            hist_cursor: vec![vec![0; nlocks]; nthreads],
            pending_request: vec![None; nthreads],
            epoch: vec![0; nthreads],
            deps: BTreeMap::new(),
            all_held: BTreeMap::new(),
            guard: BTreeMap::new(),
            clocks_out: Vec::new(),
            diags: Diagnostics {
                trw_bounded: true,
                boundedness_witnesses: Vec::new(),
                well_nested: true,
                nesting_witnesses: Vec::new(),
                dedupe: None,
            },
        }
    }

    /// Absorb released critical sections of all held locks into `v` until no
    /// entry fires; a later entry's release can unlock an earlier one, so a
    /// changed scan repeats. Returns whether `v` changed.
    fn sync_cs(&mut self, t: usize, mut v: VClock) -> (VClock, bool) {
        let mut changed_any = false;
        loop {
            let mut changed = false;
            for hi in 0..self.held[t].len() {
                let l = self.held[t][hi].1 as usize;
                let cursor = &mut self.hist_cursor[t][l];
                let entries = &self.hist[l];
                while *cursor < entries.len() {
                    let e = &entries[*cursor];
                    let dead = (self.opts.thread_local_histories && e.by as usize == t)
                        || (e.acq.less(&v) && e.rel.le(&v));
                    if dead {
                        *cursor += 1;
                    } else {
                        break;
                    }
                }
                for e in &entries[*cursor..] {
                    if self.opts.thread_local_histories && e.by as usize == t {
                        continue;
                    }
                    if e.acq.less(&v) && v.join(&e.rel) {
                        changed = true;
                    }
                }
            }
            changed_any |= changed;
            if !changed {
                break;
            }
        }
        (v, changed_any)
    }

    fn thread_name(&self, t: ThreadIdx) -> String {
        self.norm.trace.thread_name(t).to_string()
    }

    fn lock_name(&self, l: LockIdx) -> String {
        self.norm.trace.lock_name(l).to_string()
    }

    fn run(mut self) -> Phase1Output {
        let events: &[Event] = &self.norm.trace.events;
        for (idx, e) in events.iter().enumerate() {
            let t = e.thread as usize;
            let pos = idx as u32 + 1;
            let mut absorbed = false;
            // Observation clock defaults to the pre-event thread clock;
            // handlers that gain knowledge overwrite it below.
            let mut observed: Option<VClock> = None;
            match e.op {
                Op::Request(_) => {
                    self.pending_request[t] = Some((pos, e.id));
                }
                Op::Acquire(l) => {
                    let (req_pos, req_id) = self.pending_request[t]
                        .take()
                        .expect("normalized trace: every acquire follows its request");
                    if !self.held[t].is_empty() {
                        let mut lockset: Vec<LockIdx> =
                            self.held[t].iter().map(|&(_, m)| m).collect();
                        lockset.sort_unstable();
                        lockset.dedup();
                        let key = DepKey { thread: e.thread, lock: l, lockset };
                        self.deps.entry(key).or_default().push(ConcreteDependency {
                            request_pos: req_pos,
                            request_id: req_id,
                            display_pos: self.norm.source_pos[req_pos as usize - 1],
                            clock: self.th[t].clone(),
                            acquires_held: self.held[t].clone(),
                            epoch: self.epoch[t],
                        });
                    }
                    self.held[t].push((e.id, l));
                    *self.all_held.entry(l).or_insert(0) += 1;
                    if self.opts.check_boundedness {
                        self.record_guards(t, e.id);
                    }
                    let (v, ch) = self.sync_cs(t, self.th[t].clone());
                    absorbed |= ch;
                    self.th[t] = v;
                    self.acq_clock[l as usize] = self.th[t].clone();
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
                Op::Release(l) => {
                    if self.opts.check_boundedness {
                        self.check_guards(t, l, e.id);
                    }
                    match self.held[t].last() {
                        Some(&(_, top)) if top == l => {}
                        Some(&(_, top)) => {
                            self.diags.well_nested = false;
                            self.diags.nesting_witnesses.push(NestingWitness {
                                release_event: e.id,
                                released_lock: self.lock_name(l),
                                innermost_lock: self.lock_name(top),
                            });
                        }
                        None => {}
                    }
                    let had = self.held[t].iter().any(|&(_, m)| m == l);
                    self.held[t].retain(|&(_, m)| m != l);
                    if had {
                        if let Some(n) = self.all_held.get_mut(&l) {
                            *n -= 1;
                            if *n == 0 {
                                self.all_held.remove(&l);
                            }
                        }
                        self.hist[l as usize].push(HistEntry {
                            acq: self.acq_clock[l as usize].clone(),
                            rel: self.th[t].clone(),
                            by: e.thread,
                        });
                    }
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
                Op::Write(x) => {
                    let x = x as usize;
                    if self.opts.mode == OrderMode::Trw {
                        if !self.opts.disable_write_write_sync {
                            absorbed |= self.th[t].join(&self.last_write[x]);
                            absorbed |= self.th[t].join(&self.last_read[x]);
                        }
                        let (v, ch) = self.sync_cs(t, self.th[t].clone());
                        absorbed |= ch;
                        self.th[t] = v;
                    }
                    self.last_write[x] = self.th[t].clone();
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
                Op::Read(x) => {
                    let x = x as usize;
                    absorbed |= self.th[t].join(&self.last_write[x]);
                    let (v, ch) = self.sync_cs(t, self.th[t].clone());
                    absorbed |= ch;
                    self.th[t] = v;
                    if self.opts.mode == OrderMode::Trw {
                        // Accumulate rather than overwrite: two reads of the same
                        // variable are unordered, so a later read's clock does not
                        // cover an earlier one. A plain store would lose the
                        // earlier read's read-write edge toward the next write.
                        let th = &self.th[t];
                        self.last_read[x].join(th);
                    }
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
                Op::Fork(u) => {
                    let parent = self.th[t].clone();
                    if self.th[u as usize].join(&parent) {
                        self.epoch[u as usize] += 1;
                    }
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
                Op::Join(u) => {
                    let child = self.th[u as usize].clone();
                    absorbed |= self.th[t].join(&child);
                    let (v, ch) = self.sync_cs(t, self.th[t].clone());
                    absorbed |= ch;
                    self.th[t] = v;
                    observed = Some(self.th[t].clone());
                    self.th[t].inc(e.thread);
                }
            }
            if absorbed {
                self.epoch[t] += 1;
            }
            if self.opts.record_event_clocks {
                self.clocks_out.push(observed.unwrap_or_else(|| self.th[t].clone()));
            }
        }

        let mut diags = self.diags;
        let mut deps = self.deps;
        if self.opts.dedupe {
            let before = deps.values().map(Vec::len).sum();
            dedupe(&mut deps);
            diags.dedupe = Some(DedupeStats {
                entries_before: before,
                entries_after: deps.values().map(Vec::len).sum(),
            });
        }
        Phase1Output {
            deps,
            event_clocks: if self.opts.record_event_clocks { Some(self.clocks_out) } else { None },
            diagnostics: diags,
        }
    }

    /// Guard bookkeeping at an acquire: any lock held elsewhere whose last
    /// acquire is already ordered before this thread's request clock guards
    /// the request; remember the first such request clock per (lock, thread).
    fn record_guards(&mut self, t: usize, acq_event: EventId) {
        let me = t as ThreadIdx;
        for (&l, _) in self.all_held.iter() {
            if self.held[t].iter().any(|&(_, m)| m == l) {
                continue;
            }
            if self.acq_clock[l as usize].less(&self.th[t]) {
                self.guard.entry((l, me)).or_insert_with(|| (self.th[t].clone(), acq_event));
            }
        }
    }

    /// Guard check at a release: a guarded request clock ordered before the
    /// release clock means the request fell inside the guarding critical
    /// section in the order itself, which the soundness argument forbids.
    fn check_guards(&mut self, t: usize, l: LockIdx, rel_event: EventId) {
        let mut row: Vec<(ThreadIdx, VClock, EventId)> = Vec::new();
        self.guard.retain(|&(gl, gt), (clock, at)| {
            if gl == l {
                row.push((gt, clock.clone(), *at));
                false
            } else {
                true
            }
        });
        for (gt, clock, at) in row {
            if clock.less(&self.th[t]) {
                self.diags.trw_bounded = false;
                self.diags.boundedness_witnesses.push(BoundednessWitness {
                    guard_lock: self.lock_name(l),
                    guarded_thread: self.thread_name(gt),
                    recorded_at_event: at,
                    release_event: rel_event,
                    releasing_thread: self.thread_name(t as ThreadIdx),
                });
            }
        }
    }
}

/// Run the dependency pass over a normalized trace.
pub fn compute_lock_dependencies(norm: &NormalizedTrace, opts: &EngineOptions) -> Phase1Output {
    Engine::new(norm, opts).run()
}

/// Collapse consecutive dependencies that no other clock in the map can tell
/// apart: equal owner inbound epoch (so foreign slots match) and no foreign
/// dependency knows the owner thread to a level inside [kept.own, next.own).
/// Cursor behavior and reports are provably unchanged.
pub fn dedupe(deps: &mut DependencyMap) {
    let mut known_levels: BTreeMap<ThreadIdx, Vec<u32>> = BTreeMap::new();
    for key in deps.keys() {
        known_levels.entry(key.thread).or_default();
    }
    for (key, list) in deps.iter() {
        for d in list {
            for (&t, levels) in known_levels.iter_mut() {
                if t != key.thread {
                    levels.push(d.clock.get(t));
                }
            }
        }
    }
    for levels in known_levels.values_mut() {
        levels.sort_unstable();
        levels.dedup();
    }
    for (key, list) in deps.iter_mut() {
        let levels = known_levels.get(&key.thread).cloned().unwrap_or_default();
        let mut kept: Vec<ConcreteDependency> = Vec::with_capacity(list.len());
        for d in list.drain(..) {
            let drop = match kept.last() {
                Some(prev) if prev.epoch == d.epoch => {
                    let lo = prev.clock.get(key.thread);
                    let hi = d.clock.get(key.thread);
                    let i = levels.partition_point(|&v| v < lo);
                    !(i < levels.len() && levels[i] < hi)
                }
                _ => false,
            };
            if !drop {
                kept.push(d);
            }
        }
        *list = kept;
    }
}

/// True iff every release pops its thread's innermost held lock; witnesses
/// cite the offending releases.
pub fn check_well_nested(events: &[Event]) -> (bool, Vec<(EventId, LockIdx)>) {
    let mut stacks: BTreeMap<ThreadIdx, Vec<LockIdx>> = BTreeMap::new();
    let mut witnesses = Vec::new();
    for e in events {
        let stack = stacks.entry(e.thread).or_default();
        match e.op {
            Op::Acquire(l) => stack.push(l),
            Op::Release(l) => {
                match stack.last() {
                    Some(&top) if top == l => {}
                    Some(_) => witnesses.push((e.id, l)),
                    None => {}
                }
                if let Some(p) = stack.iter().rposition(|&m| m == l) {
                    stack.remove(p);
                }
            }
            _ => {}
        }
    }
    (witnesses.is_empty(), witnesses)
}
