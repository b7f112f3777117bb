//! Discrete-event scheduler.
//!
//! Events are ordered by `(time, seq)` where `seq` is a monotone insertion
//! counter, so simultaneous events dispatch in the order they were scheduled.
//! Actions are closures that receive the owning simulation state and the
//! engine itself, which lets a handler schedule or cancel further events.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;

use thiserror::Error;

pub const NANOS_PER_SEC: u64 = 1_000_000_000;
pub const NANOS_PER_MILLI: u64 = 1_000_000;
pub const NANOS_PER_MICRO: u64 = 1_000;

/// Simulation time in integer nanoseconds since the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(nanos: u64) -> Self {
        SimTime(nanos)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * NANOS_PER_MICRO)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * NANOS_PER_MILLI)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * NANOS_PER_SEC)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC as f64
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

/// Formats as decimal seconds with exactly nine fractional digits.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:09}",
            self.0 / NANOS_PER_SEC,
            self.0 % NANOS_PER_SEC
        )
    }
}

/// Handle to a scheduled event; valid until the event dispatches or is cancelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(u64);

impl EventId {
    pub fn seq(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("cannot schedule at {at}: clock already at {now}")]
    InThePast { at: SimTime, now: SimTime },
}

pub type Action<S> = Box<dyn FnOnce(&mut S, &mut Engine<S>)>;

pub struct Engine<S> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    actions: HashMap<u64, Action<S>>,
    halted: bool,
    dispatched: u64,
}

impl<S> Default for Engine<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S> Engine<S> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            actions: HashMap::new(),
            halted: false,
            dispatched: 0,
        }
    }

    /// Time of the most recently dispatched event (zero before any).
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule<F>(&mut self, at: SimTime, action: F) -> Result<EventId, EngineError>
    where
        F: FnOnce(&mut S, &mut Engine<S>) + 'static,
    {
        if at < self.now {
            return Err(EngineError::InThePast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.actions.insert(seq, Box::new(action));
        Ok(EventId(seq))
    }

    /// Schedules `action` at `now() + delay`; never fails.
    pub fn schedule_in<F>(&mut self, delay: SimTime, action: F) -> EventId
    where
        F: FnOnce(&mut S, &mut Engine<S>) + 'static,
    {
        let at = self.now.saturating_add(delay);
        self.schedule(at, action)
            .expect("relative schedule is never in the past")
    }

    /// Returns true if the event was pending and has been removed.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.actions.remove(&id.0).is_some()
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.actions.contains_key(&id.0)
    }

    pub fn pending(&self) -> usize {
        self.actions.len()
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Stops the current `run_until` after the running action returns.
    pub fn halt(&mut self) {
        self.halted = true;
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Dispatches every pending event with `time <= limit` in `(time, seq)` order.
    ///
    /// Events scheduled during dispatch take part in the same run. Returns the
    /// clock after the last dispatched event.
    pub fn run_until(&mut self, limit: SimTime, state: &mut S) -> SimTime {
        self.halted = false;
        while !self.halted {
            let Some(&Reverse((at, seq))) = self.queue.peek() else {
                break;
            };
            if at > limit {
                break;
            }
            self.queue.pop();
            // cancelled events leave a stale heap entry behind
            let Some(action) = self.actions.remove(&seq) else {
                continue;
            };
            self.now = at;
            self.dispatched += 1;
            action(state, self);
        }
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Log = Vec<&'static str>;

    fn push(tag: &'static str) -> impl FnOnce(&mut Log, &mut Engine<Log>) {
        move |log: &mut Log, _: &mut Engine<Log>| log.push(tag)
    }

    #[test]
    fn start_events_dispatch_in_time_order() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        eng.schedule(SimTime::ZERO, push("startExp")).unwrap();
        eng.schedule(SimTime::from_secs(1), push("startCbr"))
            .unwrap();
        eng.run_until(SimTime::from_secs(500), &mut log);
        assert_eq!(log, ["startExp", "startCbr"]);
    }

    #[test]
    fn equal_times_dispatch_fifo() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        let t = SimTime::from_millis(3);
        eng.schedule(t, push("a")).unwrap();
        eng.schedule(t, push("b")).unwrap();
        eng.schedule(t, push("c")).unwrap();
        eng.run_until(SimTime::MAX, &mut log);
        assert_eq!(log, ["a", "b", "c"]);
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        eng.schedule(SimTime::from_secs(2), push("x")).unwrap();
        eng.run_until(SimTime::MAX, &mut log);
        let err = eng
            .schedule(SimTime::from_secs(1), push("late"))
            .unwrap_err();
        assert_eq!(
            err,
            EngineError::InThePast {
                at: SimTime::from_secs(1),
                now: SimTime::from_secs(2)
            }
        );
    }

    #[test]
    fn cancel_semantics() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        let a = eng.schedule(SimTime::from_secs(1), push("a")).unwrap();
        let b = eng.schedule(SimTime::from_secs(2), push("b")).unwrap();
        assert!(eng.cancel(a));
        assert!(!eng.cancel(a));
        eng.run_until(SimTime::MAX, &mut log);
        assert_eq!(log, ["b"]);
        assert!(!eng.cancel(b));
    }

    #[test]
    fn empty_queue_leaves_clock_at_zero() {
        let mut eng: Engine<Log> = Engine::new();
        assert_eq!(eng.now(), SimTime::ZERO);
        let end = eng.run_until(SimTime::from_secs(500), &mut Log::new());
        assert_eq!(end, SimTime::ZERO);
    }

    #[test]
    fn reverse_insertion_still_time_ordered() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        eng.schedule(SimTime::from_secs(1), push("1.0")).unwrap();
        eng.schedule(SimTime::from_millis(500), push("0.5"))
            .unwrap();
        eng.run_until(SimTime::MAX, &mut log);
        assert_eq!(log, ["0.5", "1.0"]);
    }

    #[test]
    fn twoflow_schedule_finish_sees_500s() {
        struct St {
            seen: Vec<SimTime>,
            finish_at: Option<SimTime>,
        }
        let mut eng: Engine<St> = Engine::new();
        let mut st = St {
            seen: vec![],
            finish_at: None,
        };
        let note = |s: &mut St, e: &mut Engine<St>| s.seen.push(e.now());
        eng.schedule(SimTime::ZERO, note).unwrap();
        eng.schedule(SimTime::from_secs(1), note).unwrap();
        eng.schedule(SimTime::from_secs(499), note).unwrap();
        eng.schedule(SimTime::from_secs(499), note).unwrap();
        eng.schedule(SimTime::from_secs(500), |s: &mut St, e: &mut Engine<St>| {
            s.finish_at = Some(e.now())
        })
        .unwrap();
        assert_eq!(eng.now(), SimTime::ZERO);
        let end = eng.run_until(SimTime::from_secs(500), &mut st);
        assert_eq!(st.finish_at, Some(SimTime::from_secs(500)));
        assert_eq!(end, SimTime::from_secs(500));
        assert_eq!(eng.now(), SimTime::from_secs(500));
        assert_eq!(st.seen.len(), 4);
    }

    #[test]
    fn events_scheduled_during_dispatch_participate() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        eng.schedule(SimTime::from_secs(1), |l: &mut Log, e: &mut Engine<Log>| {
            l.push("first");
            e.schedule_in(SimTime::ZERO, push("same-instant"));
            e.schedule_in(SimTime::from_secs(1), push("later"));
            e.schedule_in(SimTime::from_secs(10), push("beyond"));
        })
        .unwrap();
        eng.schedule(SimTime::from_secs(1), push("second")).unwrap();
        let end = eng.run_until(SimTime::from_secs(5), &mut log);
        assert_eq!(log, ["first", "second", "same-instant", "later"]);
        assert_eq!(end, SimTime::from_secs(2));
        assert_eq!(eng.pending(), 1);
    }

    #[test]
    fn halt_stops_dispatch() {
        let mut eng = Engine::new();
        let mut log = Log::new();
        eng.schedule(SimTime::from_secs(1), |l: &mut Log, e: &mut Engine<Log>| {
            l.push("finish");
            e.halt();
        })
        .unwrap();
        eng.schedule(SimTime::from_secs(1), push("after")).unwrap();
        eng.run_until(SimTime::MAX, &mut log);
        assert_eq!(log, ["finish"]);
    }

    #[test]
    fn time_display_has_nine_digits() {
        assert_eq!(SimTime::from_nanos(21_600_000).to_string(), "0.021600000");
        assert_eq!(SimTime::from_secs(500).to_string(), "500.000000000");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dispatch_is_sorted_and_deterministic(
                times in prop::collection::vec(0u64..50, 1..80),
                cancel_mask in prop::collection::vec(any::<bool>(), 80),
            ) {
                let run = || {
                    let mut eng: Engine<Vec<(u64, u64)>> = Engine::new();
                    let mut ids = vec![];
                    for (i, &t) in times.iter().enumerate() {
                        let id = eng.schedule(SimTime::from_nanos(t), move |log: &mut Vec<(u64, u64)>, e: &mut Engine<_>| {
                            log.push((e.now().as_nanos(), i as u64));
                        }).unwrap();
                        ids.push(id);
                    }
                    for (id, &c) in ids.iter().zip(&cancel_mask) {
                        if c {
                            eng.cancel(*id);
                        }
                    }
                    let mut log = vec![];
                    eng.run_until(SimTime::MAX, &mut log);
                    log
                };
                let a = run();
                prop_assert_eq!(&a, &run());
                for w in a.windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
                let expected = times.iter().zip(&cancel_mask).filter(|(_, &c)| !c).count();
                prop_assert_eq!(a.len(), expected);
                for &(_, i) in &a {
                    prop_assert!(!cancel_mask[i as usize]);
                }
            }
        }
    }
}
