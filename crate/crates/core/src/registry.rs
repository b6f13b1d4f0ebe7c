//! Pending-request table of the robot-side proxy.
//!
//! Each registered request resolves exactly once: either the first response
//! for its id is delivered, or its deadline passes and the timeout action
//! fires with an empty synthetic response. Resolved ids are remembered as
//! tombstones for a retention window so late duplicates are recognised.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::Clock;
use crate::envelope::{RequestId, ResponseEnvelope};

pub const DEFAULT_RETENTION: Duration = Duration::from_secs(60);

/// Callback consuming the response (or the synthetic timeout response).
pub type ResponseAction = Box<dyn FnOnce(ResponseEnvelope) + Send>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("request {0} is already registered")]
    DuplicateRegistration(RequestId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    Pending,
    Completed,
    TimedOut,
}

/// Outcome of handing a response to the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Completion {
    Delivered,
    Duplicate,
    Unknown,
}

pub struct PendingEntry {
    pub request_id: RequestId,
    pub registered_at: Duration,
    pub deadline_at: Duration,
    on_response: ResponseAction,
    on_timeout: ResponseAction,
}

impl std::fmt::Debug for PendingEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PendingEntry")
            .field("request_id", &self.request_id)
            .field("registered_at", &self.registered_at)
            .field("deadline_at", &self.deadline_at)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegistryStats {
    pub registered: u64,
    pub delivered: u64,
    pub duplicates: u64,
    pub unknown: u64,
    pub timed_out: u64,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<RequestId, PendingEntry>,
    tombstones: HashMap<RequestId, (Duration, EntryState)>,
    tomb_order: VecDeque<(Duration, RequestId)>,
    stats: RegistryStats,
}

impl Inner {
    fn bury(&mut self, id: RequestId, at: Duration, state: EntryState) {
        self.tombstones.insert(id, (at, state));
        self.tomb_order.push_back((at, id));
    }

    fn prune(&mut self, now: Duration, retention: Duration) {
        while let Some(&(at, id)) = self.tomb_order.front() {
            if now.saturating_sub(at) <= retention {
                break;
            }
            self.tomb_order.pop_front();
            if self.tombstones.get(&id).is_some_and(|(t, _)| *t == at) {
                self.tombstones.remove(&id);
            }
        }
    }
}

pub struct Registry {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    retention: Duration,
}

impl Registry {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self::with_retention(clock, DEFAULT_RETENTION)
    }

    pub fn with_retention(clock: Arc<dyn Clock>, retention: Duration) -> Self {
        Self {
            inner: Mutex::new(Inner::default()),
            clock,
            retention,
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn register(
        &self,
        request_id: RequestId,
        deadline_at: Duration,
        on_response: ResponseAction,
        on_timeout: ResponseAction,
    ) -> Result<(), RegistryError> {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        if inner.entries.contains_key(&request_id) || inner.tombstones.contains_key(&request_id)
        {
            return Err(RegistryError::DuplicateRegistration(request_id));
        }
        inner.entries.insert(
            request_id,
            PendingEntry {
                request_id,
                registered_at: now,
                deadline_at,
                on_response,
                on_timeout,
            },
        );
        inner.stats.registered += 1;
        Ok(())
    }

    /// Routes a response to its pending entry. Only the call that finds the
    /// entry still pending runs `on_response`; the action runs after the
    /// table lock is released.
    pub fn complete(&self, response: ResponseEnvelope) -> Completion {
        let now = self.clock.now();
        let id = response.request_id;
        let action = {
            let mut inner = self.inner.lock();
            match inner.entries.remove(&id) {
                Some(entry) => {
                    inner.bury(id, now, EntryState::Completed);
                    inner.stats.delivered += 1;
                    entry.on_response
                }
                None => {
                    let recent = inner
                        .tombstones
                        .get(&id)
                        .is_some_and(|(at, _)| now.saturating_sub(*at) <= self.retention);
                    return if recent {
                        inner.stats.duplicates += 1;
                        Completion::Duplicate
                    } else {
                        inner.stats.unknown += 1;
                        Completion::Unknown
                    };
                }
            }
        };
        action(response);
        Completion::Delivered
    }

    /// Times out every pending entry whose deadline is at or before `now`,
    /// firing its timeout action with an empty synthetic response, and drops
    /// tombstones older than the retention window. Returns the expired ids in
    /// deadline order.
    pub fn expire(&self, now: Duration) -> Vec<RequestId> {
        let expired = {
            let mut inner = self.inner.lock();
            let mut due: Vec<(Duration, RequestId)> = inner
                .entries
                .values()
                .filter(|e| e.deadline_at <= now)
                .map(|e| (e.deadline_at, e.request_id))
                .collect();
            due.sort();
            let mut expired = Vec::with_capacity(due.len());
            for (_, id) in due {
                if let Some(entry) = inner.entries.remove(&id) {
                    inner.bury(id, now, EntryState::TimedOut);
                    inner.stats.timed_out += 1;
                    expired.push(entry);
                }
            }
            inner.prune(now, self.retention);
            expired
        };
        expired
            .into_iter()
            .map(|entry| {
                let id = entry.request_id;
                (entry.on_timeout)(ResponseEnvelope::timeout(id));
                id
            })
            .collect()
    }

    /// State of an id as the registry currently knows it.
    pub fn state(&self, id: &RequestId) -> Option<EntryState> {
        let inner = self.inner.lock();
        if inner.entries.contains_key(id) {
            return Some(EntryState::Pending);
        }
        inner.tombstones.get(id).map(|(_, s)| *s)
    }

    /// Earliest pending deadline, if any.
    pub fn next_deadline(&self) -> Option<Duration> {
        self.inner.lock().entries.values().map(|e| e.deadline_at).min()
    }

    pub fn pending(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn tombstones(&self) -> usize {
        self.inner.lock().tombstones.len()
    }

    pub fn stats(&self) -> RegistryStats {
        self.inner.lock().stats
    }
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("Registry")
            .field("pending", &inner.entries.len())
            .field("tombstones", &inner.tombstones.len())
            .field("retention", &self.retention)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::envelope::{ReplicaId, ResponseStatus};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn resp(seq: u64, replica: u64) -> ResponseEnvelope {
        ResponseEnvelope {
            request_id: RequestId::new(1, seq),
            replica_id: ReplicaId(replica),
            status: ResponseStatus::Ok,
            payload: vec![replica as u8],
        }
    }

    struct Counters {
        responses: Arc<AtomicUsize>,
        timeouts: Arc<AtomicUsize>,
    }

    impl Counters {
        fn new() -> Self {
            Self {
                responses: Arc::new(AtomicUsize::new(0)),
                timeouts: Arc::new(AtomicUsize::new(0)),
            }
        }

        fn actions(&self) -> (ResponseAction, ResponseAction) {
            let r = self.responses.clone();
            let t = self.timeouts.clone();
            (
                Box::new(move |_| {
                    r.fetch_add(1, Ordering::SeqCst);
                }),
                Box::new(move |e: ResponseEnvelope| {
                    assert_eq!(e.status, ResponseStatus::TimeoutSynthetic);
                    assert!(e.payload.is_empty());
                    t.fetch_add(1, Ordering::SeqCst);
                }),
            )
        }
    }

    fn registry() -> (Registry, ManualClock) {
        let clock = ManualClock::new();
        (Registry::new(Arc::new(clock.clone())), clock)
    }

    #[test]
    fn first_response_delivered_then_duplicate() {
        let (reg, _) = registry();
        let c = Counters::new();
        let (on_r, on_t) = c.actions();
        reg.register(RequestId::new(1, 1), ms(100), on_r, on_t).unwrap();
        assert_eq!(reg.complete(resp(1, 1)), Completion::Delivered);
        assert_eq!(reg.complete(resp(1, 2)), Completion::Duplicate);
        assert_eq!(c.responses.load(Ordering::SeqCst), 1);
        assert_eq!(reg.pending(), 0);
        assert_eq!(reg.state(&RequestId::new(1, 1)), Some(EntryState::Completed));
    }

    #[test]
    fn duplicate_registration_rejected() {
        let (reg, _) = registry();
        let c = Counters::new();
        let (a, b) = c.actions();
        reg.register(RequestId::new(1, 1), ms(10), a, b).unwrap();
        let (a, b) = c.actions();
        assert_eq!(
            reg.register(RequestId::new(1, 1), ms(10), a, b),
            Err(RegistryError::DuplicateRegistration(RequestId::new(1, 1)))
        );
    }

    #[test]
    fn unknown_response() {
        let (reg, _) = registry();
        assert_eq!(reg.complete(resp(77, 1)), Completion::Unknown);
    }

    #[test]
    fn bulk_registration() {
        let (reg, _) = registry();
        for seq in 0..10_000 {
            reg.register(
                RequestId::new(1, seq),
                ms(1000),
                Box::new(|_| {}),
                Box::new(|_| {}),
            )
            .unwrap();
        }
        assert_eq!(reg.pending(), 10_000);
        assert!((0..10_000)
            .all(|seq| reg.state(&RequestId::new(1, seq)) == Some(EntryState::Pending)));
    }

    #[test]
    fn expire_boundaries_and_late_response() {
        let (reg, clock) = registry();
        let c = Counters::new();
        let (a, b) = c.actions();
        let id = RequestId::new(1, 1);
        reg.register(id, ms(100), a, b).unwrap();
        assert!(reg.expire(ms(99)).is_empty());
        assert_eq!(reg.expire(ms(100)), vec![id]);
        assert_eq!(c.timeouts.load(Ordering::SeqCst), 1);
        clock.set(ms(150));
        assert_eq!(reg.complete(resp(1, 1)), Completion::Duplicate);
        assert_eq!(c.responses.load(Ordering::SeqCst), 0);
        assert_eq!(reg.state(&id), Some(EntryState::TimedOut));
    }

    #[test]
    fn tombstones_expire_after_retention() {
        let clock = ManualClock::new();
        let reg = Registry::with_retention(Arc::new(clock.clone()), ms(1000));
        reg.register(RequestId::new(1, 1), ms(50), Box::new(|_| {}), Box::new(|_| {}))
            .unwrap();
        reg.register(RequestId::new(1, 2), ms(50), Box::new(|_| {}), Box::new(|_| {}))
            .unwrap();
        clock.set(ms(10));
        assert_eq!(reg.complete(resp(1, 1)), Completion::Delivered);
        reg.expire(ms(50));
        assert_eq!(reg.tombstones(), 2);
        reg.expire(ms(1011));
        assert_eq!(reg.tombstones(), 1);
        reg.expire(ms(1051));
        assert_eq!(reg.tombstones(), 0);
        assert_eq!(reg.pending(), 0);
        clock.set(ms(2000));
        assert_eq!(reg.complete(resp(1, 3)), Completion::Unknown);
    }

    #[test]
    fn concurrent_completes_deliver_once() {
        for round in 0..200 {
            let (reg, _) = registry();
            let reg = Arc::new(reg);
            let c = Counters::new();
            let (a, b) = c.actions();
            reg.register(RequestId::new(1, round), ms(1_000), a, b).unwrap();
            let barrier = Arc::new(std::sync::Barrier::new(8));
            let outcomes: Vec<Completion> = (0..8)
                .map(|replica| {
                    let reg = reg.clone();
                    let barrier = barrier.clone();
                    std::thread::spawn(move || {
                        barrier.wait();
                        reg.complete(resp(round, replica))
                    })
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect();
            let delivered = outcomes
                .iter()
                .filter(|o| **o == Completion::Delivered)
                .count();
            assert_eq!(delivered, 1);
            assert_eq!(c.responses.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn actions_run_outside_the_lock() {
        let (reg, _) = registry();
        let reg = Arc::new(reg);
        let inner = reg.clone();
        reg.register(
            RequestId::new(1, 1),
            ms(10),
            Box::new(move |_| {
                // Re-entering the registry from the callback must not deadlock.
                assert_eq!(inner.pending(), 0);
            }),
            Box::new(|_| {}),
        )
        .unwrap();
        assert_eq!(reg.complete(resp(1, 1)), Completion::Delivered);
    }
}
