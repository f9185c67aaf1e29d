//! Time sources shared by the probe, the sampler and the harness reader.
//!
//! All timestamps in the crate are nanoseconds since the clock's origin.
//! [`Clock::Monotonic`] follows the OS monotonic clock. [`Clock::Virtual`]
//! only moves when a driver calls [`Clock::pass_until`]; waiting participants
//! (the sampler) are released one deadline at a time, so a simulated run is
//! fully deterministic regardless of scheduling.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

/// Cooperative stop flag that sleeping waiters can be woken through.
#[derive(Clone, Debug, Default)]
pub struct StopSignal {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        let (flag, cvar) = &*self.inner;
        *lock(flag) = true;
        cvar.notify_all();
    }

    pub fn is_raised(&self) -> bool {
        *lock(&self.inner.0)
    }

    /// Sleeps for at most `timeout`, returning early (with `true`) if raised.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let (flag, cvar) = &*self.inner;
        let guard = lock(flag);
        let (guard, _) = cvar
            .wait_timeout_while(guard, timeout, |raised| !*raised)
            .unwrap_or_else(|e| e.into_inner());
        *guard
    }
}

#[derive(Clone, Debug)]
pub enum Clock {
    Monotonic(MonotonicClock),
    Virtual(VirtualClock),
}

impl Clock {
    pub fn monotonic() -> Self {
        Clock::Monotonic(MonotonicClock::new())
    }

    pub fn new_virtual() -> Self {
        Clock::Virtual(VirtualClock::new())
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now_ns(&self) -> u64 {
        match self {
            Clock::Monotonic(c) => c.now_ns(),
            Clock::Virtual(c) => c.now_ns(),
        }
    }

    /// Registers a task that will block in [`Participant::wait_until`].
    ///
    /// The participant counts as running from this call until it first waits,
    /// so a virtual clock will not move past it in the meantime.
    pub fn participant(&self) -> Participant {
        let id = match self {
            Clock::Monotonic(_) => 0,
            Clock::Virtual(c) => c.register(),
        };
        Participant {
            clock: self.clone(),
            id,
        }
    }

    /// Lets time pass until `deadline_ns`: sleeps on a monotonic clock,
    /// drives a virtual clock forward.
    pub fn pass_until(&self, deadline_ns: u64) {
        match self {
            Clock::Monotonic(c) => {
                let now = c.now_ns();
                if deadline_ns > now {
                    std::thread::sleep(Duration::from_nanos(deadline_ns - now));
                }
            }
            Clock::Virtual(c) => c.advance_to(deadline_ns),
        }
    }

    /// Advances a virtual clock by `delta_ns`. No-op on a monotonic clock.
    pub fn advance_by(&self, delta_ns: u64) {
        if let Clock::Virtual(c) = self {
            c.advance_by(delta_ns);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    pub fn now_ns(&self) -> u64 {
        u64::try_from(self.origin.elapsed().as_nanos()).unwrap_or(u64::MAX)
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Default)]
struct VirtualState {
    now: u64,
    next_id: u64,
    /// Registered participants that are currently running (not waiting).
    in_flight: usize,
    /// Waiting participants: id -> deadline.
    waiting: BTreeMap<u64, u64>,
    /// Participants released by the driver but not yet woken.
    released: HashSet<u64>,
}

/// Discrete-event clock. Time only moves through [`VirtualClock::advance_to`].
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    inner: Arc<(Mutex<VirtualState>, Condvar)>,
}

const STOP_POLL: Duration = Duration::from_millis(2);

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_ns(&self) -> u64 {
        lock(&self.inner.0).now
    }

    pub fn advance_by(&self, delta_ns: u64) {
        let target = self.now_ns().saturating_add(delta_ns);
        self.advance_to(target);
    }

    /// Moves time to `target_ns`, stopping at every participant deadline on
    /// the way and waiting until the released participant is idle again.
    pub fn advance_to(&self, target_ns: u64) {
        let (state, cvar) = &*self.inner;
        let mut st = lock(state);
        loop {
            while st.in_flight > 0 {
                st = cvar.wait(st).unwrap_or_else(|e| e.into_inner());
            }
            let next = st.waiting.values().copied().min();
            match next {
                Some(deadline) if deadline <= target_ns => {
                    st.now = st.now.max(deadline);
                    let now = st.now;
                    let due: Vec<u64> = st
                        .waiting
                        .iter()
                        .filter(|(_, &d)| d <= now)
                        .map(|(&id, _)| id)
                        .collect();
                    for id in due {
                        st.waiting.remove(&id);
                        st.released.insert(id);
                        st.in_flight += 1;
                    }
                    cvar.notify_all();
                }
                _ => {
                    st.now = st.now.max(target_ns);
                    cvar.notify_all();
                    return;
                }
            }
        }
    }

    fn register(&self) -> u64 {
        let mut st = lock(&self.inner.0);
        st.next_id += 1;
        st.in_flight += 1;
        st.next_id
    }

    fn wait_until(&self, id: u64, deadline_ns: u64, stop: &StopSignal) -> bool {
        let (state, cvar) = &*self.inner;
        let mut st = lock(state);
        if st.now >= deadline_ns {
            return true;
        }
        st.in_flight -= 1;
        st.waiting.insert(id, deadline_ns);
        cvar.notify_all();
        loop {
            if st.released.remove(&id) {
                return true;
            }
            if stop.is_raised() {
                st.waiting.remove(&id);
                st.in_flight += 1;
                cvar.notify_all();
                return false;
            }
            st = cvar
                .wait_timeout(st, STOP_POLL)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn deregister(&self, id: u64) {
        let (state, cvar) = &*self.inner;
        let mut st = lock(state);
        if st.waiting.remove(&id).is_none() {
            st.released.remove(&id);
            st.in_flight = st.in_flight.saturating_sub(1);
        }
        cvar.notify_all();
    }
}

/// A task that sleeps on the clock; see [`Clock::participant`].
#[derive(Debug)]
pub struct Participant {
    clock: Clock,
    id: u64,
}

impl Participant {
    /// Blocks until the clock reaches `deadline_ns` (returns `true`) or the
    /// stop signal is raised (returns `false`).
    pub fn wait_until(&mut self, deadline_ns: u64, stop: &StopSignal) -> bool {
        match &self.clock {
            Clock::Monotonic(c) => loop {
                if stop.is_raised() {
                    return false;
                }
                let now = c.now_ns();
                if now >= deadline_ns {
                    return true;
                }
                if stop.wait_timeout(Duration::from_nanos(deadline_ns - now)) {
                    return false;
                }
            },
            Clock::Virtual(c) => c.wait_until(self.id, deadline_ns, stop),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }
}

impl Drop for Participant {
    fn drop(&mut self) {
        if let Clock::Virtual(c) = &self.clock {
            c.deregister(self.id);
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::thread;

    #[test]
    fn virtual_clock_only_moves_when_driven() {
        let clock = Clock::new_virtual();
        assert_eq!(clock.now_ns(), 0);
        clock.advance_by(1_500);
        assert_eq!(clock.now_ns(), 1_500);
        clock.pass_until(1_000);
        assert_eq!(clock.now_ns(), 1_500);
    }

    #[test]
    fn participant_observes_every_deadline() {
        let clock = Clock::new_virtual();
        let mut p = clock.participant();
        let stop = StopSignal::new();
        let (tx, rx) = mpsc::channel();
        let stop2 = stop.clone();
        let handle = thread::spawn(move || {
            let mut k = 1;
            while p.wait_until(k * 100, &stop2) {
                tx.send(p.clock().now_ns()).unwrap();
                k += 1;
            }
        });
        clock.pass_until(550);
        stop.raise();
        handle.join().unwrap();
        let seen: Vec<u64> = rx.try_iter().collect();
        assert_eq!(seen, vec![100, 200, 300, 400, 500]);
        assert_eq!(clock.now_ns(), 550);
    }

    #[test]
    fn stop_wakes_monotonic_waiter() {
        let clock = Clock::monotonic();
        let mut p = clock.participant();
        let stop = StopSignal::new();
        let stop2 = stop.clone();
        let t = thread::spawn(move || p.wait_until(u64::MAX / 2, &stop2));
        thread::sleep(Duration::from_millis(20));
        stop.raise();
        assert!(!t.join().unwrap());
    }

    #[test]
    fn dropped_participant_does_not_block_driver() {
        let clock = Clock::new_virtual();
        let p = clock.participant();
        drop(p);
        clock.pass_until(10);
        assert_eq!(clock.now_ns(), 10);
    }
}
