//! Resource-slot scheduling: a counting semaphore bounds how many jobs run
//! at once, and an availability mask under its own short-lived lock decides
//! *which* slot each job gets (always the lowest free index).
//!
//! Every transition is appended to a shared trace, so tests can verify the
//! protocol after the fact instead of trusting the implementation: permits
//! never exceed the slot count, the mask population never exceeds the
//! permits outstanding, the mask lock is never held across job execution,
//! and each job walks the exact acquire → claim → run → free → release
//! sequence.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use crate::error::{Error, Result};

/// One scheduling transition, in global observation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub job: String,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Took a semaphore permit.
    Acquire,
    /// Took the mask lock.
    Lock,
    /// Marked this slot busy (lock held).
    Claim { slot: usize },
    /// Marked this slot free again (lock held).
    Free { slot: usize },
    /// Released the mask lock.
    Unlock,
    /// Job execution began.
    Start,
    /// Job execution finished.
    End { ok: bool },
    /// Returned the semaphore permit.
    Release,
}

/// Semaphore + availability mask + trace. Cheap to share by reference
/// across worker threads.
pub struct SlotPool {
    permits: Mutex<usize>,
    available: Condvar,
    mask: Mutex<Vec<bool>>,
    trace: Mutex<Vec<TraceEvent>>,
    num_slots: usize,
}

/// Holding one slot; freeing and releasing happen on drop.
pub struct SlotGuard<'a> {
    pool: &'a SlotPool,
    job: String,
    slot: usize,
}

impl SlotPool {
    pub fn new(num_slots: usize) -> Result<Self> {
        if num_slots == 0 {
            return Err(Error::Config("num_slots must be at least 1".into()));
        }
        Ok(SlotPool {
            permits: Mutex::new(num_slots),
            available: Condvar::new(),
            mask: Mutex::new(vec![false; num_slots]),
            trace: Mutex::new(Vec::new()),
            num_slots,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    fn record(&self, job: &str, kind: EventKind) {
        self.trace.lock().unwrap().push(TraceEvent {
            job: job.to_string(),
            kind,
        });
    }

    /// Blocks for a permit, then briefly locks the mask to claim the lowest
    /// free slot. The mask lock is released before this returns, so it is
    /// never held while the job runs.
    pub fn acquire(&self, job: &str) -> SlotGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        self.record(job, EventKind::Acquire);
        drop(permits);

        let mut mask = self.mask.lock().unwrap();
        self.record(job, EventKind::Lock);
        let slot = mask
            .iter()
            .position(|busy| !busy)
            .expect("a permit guarantees a free slot");
        mask[slot] = true;
        self.record(job, EventKind::Claim { slot });
        self.record(job, EventKind::Unlock);
        drop(mask);

        SlotGuard {
            pool: self,
            job: job.to_string(),
            slot,
        }
    }

    pub fn record_start(&self, job: &str) {
        self.record(job, EventKind::Start);
    }

    pub fn record_end(&self, job: &str, ok: bool) {
        self.record(job, EventKind::End { ok });
    }

    /// Snapshot of everything recorded so far.
    pub fn trace(&self) -> Vec<TraceEvent> {
        self.trace.lock().unwrap().clone()
    }
}

impl SlotGuard<'_> {
    pub fn slot(&self) -> usize {
        self.slot
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut mask = self.pool.mask.lock().unwrap();
        self.pool.record(&self.job, EventKind::Lock);
        mask[self.slot] = false;
        self.pool.record(&self.job, EventKind::Free { slot: self.slot });
        self.pool.record(&self.job, EventKind::Unlock);
        drop(mask);

        let mut permits = self.pool.permits.lock().unwrap();
        *permits += 1;
        self.pool.record(&self.job, EventKind::Release);
        self.pool.available.notify_one();
    }
}

/// What a verified trace says about the run.
#[derive(Clone, Debug)]
pub struct TraceStats {
    /// Most jobs observed between their Start and End at once.
    pub peak_concurrency: usize,
    /// Slot each job ran on.
    pub slots: BTreeMap<String, usize>,
}

/// Replays a trace and checks every protocol invariant; `jobs` is the full
/// expected job-id census (each must appear exactly once).
pub fn verify_trace(
    trace: &[TraceEvent],
    num_slots: usize,
    jobs: &[String],
) -> Result<TraceStats> {
    let fail = |message: String| Err(Error::Config(format!("trace violation: {message}")));

    let mut permits_out = 0usize;
    let mut mask = vec![false; num_slots];
    let mut lock_holder: Option<&str> = None;
    let mut running = 0usize;
    let mut peak = 0usize;
    let mut seen: BTreeMap<&str, Vec<EventKind>> = BTreeMap::new();
    let mut slots = BTreeMap::new();

    for event in trace {
        let job = event.job.as_str();
        match event.kind {
            EventKind::Acquire => {
                permits_out += 1;
                if permits_out > num_slots {
                    return fail(format!("{job} acquired permit {permits_out} of {num_slots}"));
                }
            }
            EventKind::Release => {
                if permits_out == 0 {
                    return fail(format!("{job} released a permit nobody held"));
                }
                permits_out -= 1;
            }
            EventKind::Lock => {
                if let Some(holder) = lock_holder {
                    return fail(format!("{job} took the mask lock while {holder} held it"));
                }
                lock_holder = Some(job);
            }
            EventKind::Unlock => {
                if lock_holder != Some(job) {
                    return fail(format!("{job} released a lock it did not hold"));
                }
                lock_holder = None;
            }
            EventKind::Claim { slot } => {
                if lock_holder != Some(job) {
                    return fail(format!("{job} claimed slot {slot} without the lock"));
                }
                if slot >= num_slots || mask[slot] {
                    return fail(format!("{job} claimed unavailable slot {slot}"));
                }
                if let Some(lower) = mask[..slot].iter().position(|busy| !busy) {
                    return fail(format!("{job} claimed slot {slot} while {lower} was free"));
                }
                mask[slot] = true;
                slots.insert(job.to_string(), slot);
            }
            EventKind::Free { slot } => {
                if lock_holder != Some(job) {
                    return fail(format!("{job} freed slot {slot} without the lock"));
                }
                if slot >= num_slots || !mask[slot] {
                    return fail(format!("{job} freed idle slot {slot}"));
                }
                mask[slot] = false;
            }
            EventKind::Start => {
                if lock_holder.is_some() {
                    return fail(format!("{job} started while the mask lock was held"));
                }
                running += 1;
                peak = peak.max(running);
            }
            EventKind::End { .. } => {
                if running == 0 {
                    return fail(format!("{job} ended without starting"));
                }
                running -= 1;
            }
        }
        let busy = mask.iter().filter(|&&b| b).count();
        if busy > permits_out {
            return fail(format!(
                "busy mask population {busy} exceeds permits outstanding {permits_out}"
            ));
        }
        seen.entry(job).or_default().push(event.kind);
    }

    if permits_out != 0 || mask.iter().any(|&b| b) || running != 0 || lock_holder.is_some() {
        return fail("trace ends with resources still held".into());
    }

    use EventKind as E;
    for id in jobs {
        let events = seen.remove(id.as_str()).unwrap_or_default();
        let shape: Vec<std::mem::Discriminant<EventKind>> =
            events.iter().map(std::mem::discriminant).collect();
        let expected = [
            E::Acquire,
            E::Lock,
            E::Claim { slot: 0 },
            E::Unlock,
            E::Start,
            E::End { ok: true },
            E::Lock,
            E::Free { slot: 0 },
            E::Unlock,
            E::Release,
        ];
        let want: Vec<std::mem::Discriminant<EventKind>> =
            expected.iter().map(std::mem::discriminant).collect();
        if shape != want {
            return fail(format!("{id} ran out of sequence: {events:?}"));
        }
        let (E::Claim { slot: claimed }, E::Free { slot: freed }) = (events[2], events[7]) else {
            unreachable!("shape was just checked");
        };
        if claimed != freed {
            return fail(format!("{id} claimed slot {claimed} but freed {freed}"));
        }
    }
    if let Some((stray, _)) = seen.into_iter().next() {
        return fail(format!("trace mentions unexpected job {stray}"));
    }

    Ok(TraceStats {
        peak_concurrency: peak,
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("job{i}")).collect()
    }

    fn run_jobs(pool: &SlotPool, n: usize) {
        let jobs = ids(n);
        std::thread::scope(|scope| {
            for job in &jobs {
                scope.spawn(move || {
                    let guard = pool.acquire(job);
                    pool.record_start(job);
                    std::thread::sleep(std::time::Duration::from_millis(2));
                    pool.record_end(job, true);
                    drop(guard);
                });
            }
        });
    }

    #[test]
    fn single_job_takes_the_lowest_slot() {
        let pool = SlotPool::new(4).unwrap();
        run_jobs(&pool, 1);
        let stats = verify_trace(&pool.trace(), 4, &ids(1)).unwrap();
        assert_eq!(stats.slots["job0"], 0);
        assert_eq!(stats.peak_concurrency, 1);
    }

    #[test]
    fn oversubscribed_pool_keeps_concurrency_at_the_slot_count() {
        let pool = SlotPool::new(2).unwrap();
        run_jobs(&pool, 8);
        let stats = verify_trace(&pool.trace(), 2, &ids(8)).unwrap();
        assert!(stats.peak_concurrency <= 2, "peak {}", stats.peak_concurrency);
        assert!(stats.peak_concurrency >= 1);
        assert!(stats.slots.values().all(|&s| s < 2));
    }

    #[test]
    fn zero_slots_is_rejected() {
        assert!(SlotPool::new(0).is_err());
    }

    #[test]
    fn verifier_rejects_a_claim_that_skips_a_free_slot() {
        use EventKind as E;
        let event = |job: &str, kind| TraceEvent { job: job.into(), kind };
        let trace = vec![
            event("a", E::Acquire),
            event("a", E::Lock),
            event("a", E::Claim { slot: 1 }),
            event("a", E::Unlock),
        ];
        let err = verify_trace(&trace, 2, &["a".into()]).unwrap_err().to_string();
        assert!(err.contains("while 0 was free"), "{err}");
    }

    #[test]
    fn verifier_rejects_running_under_the_mask_lock() {
        use EventKind as E;
        let event = |kind| TraceEvent { job: "a".into(), kind };
        let trace = vec![
            event(E::Acquire),
            event(E::Lock),
            event(E::Claim { slot: 0 }),
            event(E::Start),
        ];
        let err = verify_trace(&trace, 1, &["a".into()]).unwrap_err().to_string();
        assert!(err.contains("mask lock"), "{err}");
    }

    #[test]
    fn verifier_rejects_more_permits_than_slots() {
        use EventKind as E;
        let trace = vec![
            TraceEvent { job: "a".into(), kind: E::Acquire },
            TraceEvent { job: "b".into(), kind: E::Acquire },
        ];
        let jobs = ["a".to_string(), "b".to_string()];
        let err = verify_trace(&trace, 1, &jobs).unwrap_err().to_string();
        assert!(err.contains("permit"), "{err}");
    }
}
