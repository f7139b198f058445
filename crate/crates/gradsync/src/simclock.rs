//! Dual time source: a real wall clock, or a deterministic virtual clock in
//! which training and synchronization consume configured durations, plus a
//! global timestamped log of per-role phases.
//!
//! The virtual clock is a cooperative discrete-event scheduler. Every worker
//! role registers as an actor with a local virtual time. Shared state may
//! only be touched from [`ActorHandle::instant`] or after a phase completes,
//! and the scheduler admits exactly one actor at a time: the one with the
//! minimum `(time, worker, role)` key, with `P_s` ordered before `P_t` at
//! equal times. Long computations (the closures passed to
//! [`ActorHandle::work`]) run outside that critical window, so virtual runs
//! still use real parallelism without losing determinism.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClockError {
    #[error("overlapping events for worker {worker} role {role}: [{a_start},{a_end}) then [{b_start},{b_end})")]
    OverlappingEvents {
        worker: usize,
        role: Role,
        a_start: u64,
        a_end: u64,
        b_start: u64,
        b_end: u64,
    },
    #[error("event with end before start: [{start},{end})")]
    NegativeSpan { start: u64, end: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Real,
    Virtual,
}

/// The two roles a worker can host. `Sync` (P_s) sorts before `Train` (P_t)
/// so that at equal virtual times a completed synchronization is visible to
/// the training loop of the same worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Sync,
    Train,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Sync => "P_s",
            Role::Train => "P_t",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseKind {
    Compute,
    Sync,
    Wait,
    Commit,
}

impl PhaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::Compute => "compute",
            PhaseKind::Sync => "sync",
            PhaseKind::Wait => "wait",
            PhaseKind::Commit => "commit",
        }
    }
}

/// One timestamped phase of one worker role.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEvent {
    pub worker: usize,
    pub role: Role,
    pub phase: PhaseKind,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Step number for compute phases, collective round for sync/wait,
    /// activation index for commits.
    pub step_index: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ActorState {
    Runnable,
    Parked,
    Done,
}

struct ActorSlot {
    worker: usize,
    role: Role,
    time_ns: u64,
    state: ActorState,
}

struct Sched {
    actors: Vec<ActorSlot>,
    shutdown: bool,
}

impl Sched {
    fn min_runnable(&self) -> Option<usize> {
        self.actors
            .iter()
            .enumerate()
            .filter(|(_, a)| a.state == ActorState::Runnable)
            .min_by_key(|(_, a)| (a.time_ns, a.worker, a.role))
            .map(|(i, _)| i)
    }

    fn is_min(&self, id: usize) -> bool {
        self.min_runnable() == Some(id)
    }
}

struct ClockInner {
    mode: ClockMode,
    origin: Instant,
    sched: Mutex<Sched>,
    cv: Condvar,
    log: Mutex<Vec<PhaseEvent>>,
}

/// Shared clock: a factory for actor handles plus the global event log.
#[derive(Clone)]
pub struct SimClock {
    inner: Arc<ClockInner>,
}

impl SimClock {
    pub fn new(mode: ClockMode) -> Self {
        Self {
            inner: Arc::new(ClockInner {
                mode,
                origin: Instant::now(),
                sched: Mutex::new(Sched {
                    actors: Vec::new(),
                    shutdown: false,
                }),
                cv: Condvar::new(),
                log: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.inner.mode
    }

    /// Registers a worker role. All registrations must happen before any
    /// actor starts advancing.
    pub fn register(&self, worker: usize, role: Role) -> ActorHandle {
        let mut sched = self.inner.sched.lock().unwrap();
        sched.actors.push(ActorSlot {
            worker,
            role,
            time_ns: 0,
            state: ActorState::Runnable,
        });
        ActorHandle {
            clock: self.clone(),
            id: sched.actors.len() - 1,
            worker,
            role,
        }
    }

    /// Aborts the run: unparks everything so blocked actors can observe the
    /// flag and bail out.
    pub fn request_shutdown(&self) {
        let mut sched = self.inner.sched.lock().unwrap();
        sched.shutdown = true;
        for a in &mut sched.actors {
            if a.state == ActorState::Parked {
                a.state = ActorState::Runnable;
            }
        }
        self.inner.cv.notify_all();
    }

    pub fn is_shutdown(&self) -> bool {
        self.inner.sched.lock().unwrap().shutdown
    }

    /// Drains the event log, normalized to a stable order.
    pub fn take_events(&self) -> Vec<PhaseEvent> {
        let mut log = self.inner.log.lock().unwrap();
        let mut events = std::mem::take(&mut *log);
        events.sort_by_key(|e| (e.start_ns, e.worker, e.role, e.end_ns, e.step_index));
        events
    }

    fn now_ns(&self, id: usize) -> u64 {
        match self.inner.mode {
            ClockMode::Real => self.inner.origin.elapsed().as_nanos() as u64,
            ClockMode::Virtual => self.inner.sched.lock().unwrap().actors[id].time_ns,
        }
    }
}

/// One worker role's binding to the clock. Clone is cheap; a handle is only
/// ever driven from the thread running that role.
#[derive(Clone)]
pub struct ActorHandle {
    clock: SimClock,
    id: usize,
    worker: usize,
    role: Role,
}

impl ActorHandle {
    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn actor_id(&self) -> usize {
        self.id
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn mode(&self) -> ClockMode {
        self.clock.mode()
    }

    pub fn now(&self) -> u64 {
        self.clock.now_ns(self.id)
    }

    /// Blocks until this actor holds the minimum scheduling key. No-op in
    /// real mode and when shutdown was requested.
    fn ensure_active(&self) {
        if self.clock.mode() == ClockMode::Real {
            return;
        }
        let inner = &self.clock.inner;
        let mut sched = inner.sched.lock().unwrap();
        while !sched.shutdown
            && sched.actors[self.id].state == ActorState::Runnable
            && !sched.is_min(self.id)
        {
            sched = inner.cv.wait(sched).unwrap();
        }
    }

    /// Runs `f` in this role's exclusive window at the current instant.
    /// Shared state may only be read or written inside such windows (or
    /// inside real-mode locking).
    pub fn instant<T>(&self, f: impl FnOnce() -> T) -> T {
        self.ensure_active();
        f()
    }

    /// One cost-bearing phase. The closure runs outside the exclusive
    /// window (private data only); in virtual mode the role's clock then
    /// advances by `cost_ns`, in real mode the elapsed time is measured.
    pub fn work<T>(&self, phase: PhaseKind, step_index: u64, cost_ns: u64, f: impl FnOnce() -> T) -> T {
        match self.clock.mode() {
            ClockMode::Real => {
                let start = self.now();
                let out = f();
                let end = self.now();
                self.push_event(PhaseEvent {
                    worker: self.worker,
                    role: self.role,
                    phase,
                    start_ns: start,
                    end_ns: end,
                    step_index,
                });
                out
            }
            ClockMode::Virtual => {
                let start = self.now();
                let out = f();
                self.ensure_active();
                self.push_event(PhaseEvent {
                    worker: self.worker,
                    role: self.role,
                    phase,
                    start_ns: start,
                    end_ns: start + cost_ns,
                    step_index,
                });
                let inner = &self.clock.inner;
                let mut sched = inner.sched.lock().unwrap();
                sched.actors[self.id].time_ns = start + cost_ns;
                drop(sched);
                inner.cv.notify_all();
                out
            }
        }
    }

    /// Zero-cost event at the current instant (e.g. a commit marker).
    pub fn mark(&self, phase: PhaseKind, step_index: u64) {
        self.ensure_active();
        let now = self.now();
        self.push_event(PhaseEvent {
            worker: self.worker,
            role: self.role,
            phase,
            start_ns: now,
            end_ns: now,
            step_index,
        });
    }

    /// Appends an event with explicit timestamps (used by the collectives
    /// to attribute wait/sync spans).
    pub fn push_event(&self, ev: PhaseEvent) {
        self.clock.inner.log.lock().unwrap().push(ev);
    }

    /// Releases the exclusive window so same-instant actors with smaller
    /// keys (a signalled P_s, for instance) run before this role continues.
    pub fn yield_now(&self) {
        if self.clock.mode() == ClockMode::Real {
            std::thread::yield_now();
            return;
        }
        self.clock.inner.cv.notify_all();
        self.ensure_active();
    }

    /// Parks this actor until [`Self::unpark`] targets it. Returns false if
    /// the clock shut down instead. Virtual mode only.
    pub fn park(&self) -> bool {
        assert_eq!(
            self.clock.mode(),
            ClockMode::Virtual,
            "park is a virtual-clock primitive; real mode blocks on condvars"
        );
        let inner = &self.clock.inner;
        let mut sched = inner.sched.lock().unwrap();
        if sched.shutdown {
            return false;
        }
        sched.actors[self.id].state = ActorState::Parked;
        let any_runnable = sched
            .actors
            .iter()
            .any(|a| a.state == ActorState::Runnable);
        if !any_runnable {
            // Every live actor is parked: nobody can ever wake anybody.
            sched.shutdown = true;
            for a in &mut sched.actors {
                if a.state == ActorState::Parked {
                    a.state = ActorState::Runnable;
                }
            }
            inner.cv.notify_all();
            return false;
        }
        inner.cv.notify_all();
        while sched.actors[self.id].state == ActorState::Parked && !sched.shutdown {
            sched = inner.cv.wait(sched).unwrap();
        }
        let ok = !sched.shutdown;
        drop(sched);
        if ok {
            self.ensure_active();
        }
        ok
    }

    /// Wakes a parked actor and moves its clock forward to `at_ns` (never
    /// backward).
    pub fn unpark(&self, actor_id: usize, at_ns: u64) {
        if self.clock.mode() == ClockMode::Real {
            return;
        }
        let inner = &self.clock.inner;
        let mut sched = inner.sched.lock().unwrap();
        let slot = &mut sched.actors[actor_id];
        slot.time_ns = slot.time_ns.max(at_ns);
        if slot.state == ActorState::Parked {
            slot.state = ActorState::Runnable;
        }
        inner.cv.notify_all();
    }

    /// Moves this actor's own clock forward to `at_ns`.
    pub fn jump_to(&self, at_ns: u64) {
        if self.clock.mode() == ClockMode::Real {
            return;
        }
        let inner = &self.clock.inner;
        let mut sched = inner.sched.lock().unwrap();
        let slot = &mut sched.actors[self.id];
        slot.time_ns = slot.time_ns.max(at_ns);
        drop(sched);
        inner.cv.notify_all();
    }

    /// Marks this actor finished so it no longer gates the minimum.
    pub fn finish(&self) {
        if self.clock.mode() == ClockMode::Real {
            return;
        }
        let inner = &self.clock.inner;
        let mut sched = inner.sched.lock().unwrap();
        sched.actors[self.id].state = ActorState::Done;
        drop(sched);
        inner.cv.notify_all();
    }
}

/// Per-worker phase totals. Sync attributed to P_s is "hidden": it overlaps
/// training and only shows up on the critical path as P_t wait time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTotals {
    pub compute_ns: u64,
    pub sync_ns: u64,
    pub wait_ns: u64,
    pub hidden_sync_ns: u64,
}

/// Aggregates an event log into per-worker phase totals, validating that
/// events within one role neither overlap nor run backward.
pub fn breakdown(log: &[PhaseEvent]) -> Result<BTreeMap<usize, PhaseTotals>, ClockError> {
    let mut by_role: BTreeMap<(usize, Role), Vec<&PhaseEvent>> = BTreeMap::new();
    for ev in log {
        if ev.end_ns < ev.start_ns {
            return Err(ClockError::NegativeSpan {
                start: ev.start_ns,
                end: ev.end_ns,
            });
        }
        by_role.entry((ev.worker, ev.role)).or_default().push(ev);
    }
    let mut totals: BTreeMap<usize, PhaseTotals> = BTreeMap::new();
    for ((worker, role), mut events) in by_role {
        events.sort_by_key(|e| (e.start_ns, e.end_ns));
        for pair in events.windows(2) {
            if pair[1].start_ns < pair[0].end_ns {
                return Err(ClockError::OverlappingEvents {
                    worker,
                    role,
                    a_start: pair[0].start_ns,
                    a_end: pair[0].end_ns,
                    b_start: pair[1].start_ns,
                    b_end: pair[1].end_ns,
                });
            }
        }
        let t = totals.entry(worker).or_default();
        for ev in events {
            let span = ev.end_ns - ev.start_ns;
            match (role, ev.phase) {
                (Role::Train, PhaseKind::Compute) => t.compute_ns += span,
                (Role::Train, PhaseKind::Sync) => t.sync_ns += span,
                (Role::Train, PhaseKind::Wait) => t.wait_ns += span,
                // P_s spans overlap P_t's training: off the critical path.
                (Role::Sync, PhaseKind::Sync) | (Role::Sync, PhaseKind::Wait) => {
                    t.hidden_sync_ns += span
                }
                _ => {}
            }
        }
    }
    Ok(totals)
}

/// Writes the event log CSV: `worker,role,phase,start_ns,end_ns,step_index`.
pub fn write_events_csv(events: &[PhaseEvent], path: &Path) -> Result<(), ClockError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "worker,role,phase,start_ns,end_ns,step_index")?;
    for ev in events {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            ev.worker,
            ev.role.as_str(),
            ev.phase.as_str(),
            ev.start_ns,
            ev.end_ns,
            ev.step_index
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn zero_cost_event_leaves_time_unchanged() {
        let clock = SimClock::new(ClockMode::Virtual);
        let h = clock.register(0, Role::Train);
        h.work(PhaseKind::Compute, 0, 0, || ());
        assert_eq!(h.now(), 0);
        let events = clock.take_events();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].start_ns, events[0].end_ns);
    }

    #[test]
    fn sequential_costs_accumulate() {
        let clock = SimClock::new(ClockMode::Virtual);
        let h = clock.register(0, Role::Train);
        for (i, cost) in [1u64, 2, 3].iter().enumerate() {
            h.work(PhaseKind::Compute, i as u64, *cost, || ());
        }
        let ends: Vec<u64> = clock.take_events().iter().map(|e| e.end_ns).collect();
        assert_eq!(ends, vec![1, 3, 6]);
        assert_eq!(h.now(), 6);
    }

    #[test]
    fn independent_roles_never_overlap_within_a_role() {
        let clock = SimClock::new(ClockMode::Virtual);
        let a = clock.register(0, Role::Train);
        let b = clock.register(1, Role::Train);
        thread::scope(|s| {
            s.spawn(|| {
                for i in 0..20u64 {
                    a.work(PhaseKind::Compute, i, 3, || ());
                }
                a.finish();
            });
            s.spawn(|| {
                for i in 0..20u64 {
                    b.work(PhaseKind::Compute, i, 5, || ());
                }
                b.finish();
            });
        });
        let events = clock.take_events();
        assert_eq!(events.len(), 40);
        breakdown(&events).unwrap();
    }

    #[test]
    fn scheduler_orders_same_instant_by_worker_and_role() {
        // Two actors repeatedly at equal times: observed mutation order must
        // follow (worker, role) with P_s before P_t.
        let clock = SimClock::new(ClockMode::Virtual);
        let pt = clock.register(0, Role::Train);
        let ps = clock.register(0, Role::Sync);
        let order = Arc::new(Mutex::new(Vec::new()));
        thread::scope(|s| {
            let o = order.clone();
            let pt2 = pt.clone();
            s.spawn(move || {
                for i in 0..5u64 {
                    pt2.instant(|| o.lock().unwrap().push(("pt", i)));
                    pt2.work(PhaseKind::Compute, i, 10, || ());
                }
                pt2.finish();
            });
            let o = order.clone();
            let ps2 = ps.clone();
            s.spawn(move || {
                for i in 0..5u64 {
                    ps2.instant(|| o.lock().unwrap().push(("ps", i)));
                    ps2.work(PhaseKind::Sync, i, 10, || ());
                }
                ps2.finish();
            });
        });
        let order = order.lock().unwrap();
        // At every shared instant (0, 10, 20, ...) P_s must precede P_t.
        for i in 0..5u64 {
            let ps_pos = order.iter().position(|&e| e == ("ps", i)).unwrap();
            let pt_pos = order.iter().position(|&e| e == ("pt", i)).unwrap();
            assert!(ps_pos < pt_pos, "P_s must run before P_t at instant {i}");
        }
    }

    #[test]
    fn park_unpark_moves_time_forward() {
        let clock = SimClock::new(ClockMode::Virtual);
        let waiter = clock.register(0, Role::Sync);
        let waker = clock.register(0, Role::Train);
        thread::scope(|s| {
            let w = waiter.clone();
            s.spawn(move || {
                assert!(w.park());
                assert_eq!(w.now(), 42);
                w.finish();
            });
            let k = waker.clone();
            s.spawn(move || {
                k.work(PhaseKind::Compute, 0, 42, || ());
                k.instant(|| ());
                k.unpark(0, 42);
                k.finish();
            });
        });
    }

    #[test]
    fn all_parked_is_detected_as_stall() {
        let clock = SimClock::new(ClockMode::Virtual);
        let a = clock.register(0, Role::Train);
        // Single actor parking itself with nobody left to wake it.
        assert!(!a.park());
        assert!(clock.is_shutdown());
    }

    #[test]
    fn virtual_runs_are_bitwise_repeatable() {
        let run = || {
            let clock = SimClock::new(ClockMode::Virtual);
            let a = clock.register(0, Role::Train);
            let b = clock.register(1, Role::Train);
            thread::scope(|s| {
                s.spawn(|| {
                    for i in 0..50u64 {
                        a.work(PhaseKind::Compute, i, 7, || ());
                    }
                    a.finish();
                });
                s.spawn(|| {
                    for i in 0..50u64 {
                        b.work(PhaseKind::Compute, i, 11, || ());
                    }
                    b.finish();
                });
            });
            clock.take_events()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn breakdown_empty_log_is_empty() {
        assert!(breakdown(&[]).unwrap().is_empty());
    }

    #[test]
    fn breakdown_ssgd_shape() {
        // Two steps of t_train=1 and two syncs of t_sync=2 on one worker.
        let log = vec![
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Compute,
                start_ns: 0,
                end_ns: 1,
                step_index: 0,
            },
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Sync,
                start_ns: 1,
                end_ns: 3,
                step_index: 0,
            },
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Compute,
                start_ns: 3,
                end_ns: 4,
                step_index: 1,
            },
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Sync,
                start_ns: 4,
                end_ns: 6,
                step_index: 1,
            },
        ];
        let totals = breakdown(&log).unwrap();
        assert_eq!(totals[&0].compute_ns, 2);
        assert_eq!(totals[&0].sync_ns, 4);
        assert_eq!(totals[&0].wait_ns, 0);
    }

    #[test]
    fn breakdown_rejects_overlap_within_role() {
        let log = vec![
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Compute,
                start_ns: 0,
                end_ns: 5,
                step_index: 0,
            },
            PhaseEvent {
                worker: 0,
                role: Role::Train,
                phase: PhaseKind::Compute,
                start_ns: 3,
                end_ns: 6,
                step_index: 1,
            },
        ];
        assert!(matches!(
            breakdown(&log),
            Err(ClockError::OverlappingEvents { .. })
        ));
    }

    #[test]
    fn events_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let log = vec![PhaseEvent {
            worker: 2,
            role: Role::Sync,
            phase: PhaseKind::Sync,
            start_ns: 10,
            end_ns: 30,
            step_index: 4,
        }];
        write_events_csv(&log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "worker,role,phase,start_ns,end_ns,step_index\n2,P_s,sync,10,30,4\n"
        );
    }
}
