// SPDX-License-Identifier: Apache-2.0

//! Bounded FIFO channels sharing one wake-up source per pipeline.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generation counter bumped by every channel state change. Blocked workers
/// sleep until it moves.
#[derive(Debug)]
pub struct Notifier {
    generation: AtomicU64,
    waiters: AtomicUsize,
    active: AtomicUsize,
    aborted: AtomicBool,
    lock: Mutex<()>,
    cv: Condvar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wake {
    Changed,
    Aborted,
    /// Every active worker waited `timeout` without any state change.
    Deadlock,
}

impl Notifier {
    /// `active` is the number of workers that may block; deadlock is declared
    /// only when all of them are waiting.
    pub fn new(active: usize) -> Arc<Self> {
        Arc::new(Self {
            generation: AtomicU64::new(0),
            waiters: AtomicUsize::new(0),
            active: AtomicUsize::new(active),
            aborted: AtomicBool::new(false),
            lock: Mutex::new(()),
            cv: Condvar::new(),
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation.load(SeqCst)
    }

    pub fn bump(&self) {
        self.generation.fetch_add(1, SeqCst);
        if self.waiters.load(SeqCst) > 0 {
            let _g = self.lock.lock().unwrap_or_else(|e| e.into_inner());
            self.cv.notify_all();
        }
    }

    pub fn abort(&self) {
        self.aborted.store(true, SeqCst);
        self.bump();
    }

    pub fn aborted(&self) -> bool {
        self.aborted.load(SeqCst)
    }

    /// A worker finished and will never block again.
    pub fn retire(&self) {
        self.active.fetch_sub(1, SeqCst);
        self.bump();
    }

    /// Sleeps until the generation differs from `seen`.
    pub fn wait_change(&self, seen: u64, timeout: Duration) -> Wake {
        let start = Instant::now();
        let slice = (timeout / 4).clamp(Duration::from_millis(1), Duration::from_millis(50));
        let mut guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.waiters.fetch_add(1, SeqCst);
        let wake = loop {
            if self.aborted() {
                break Wake::Aborted;
            }
            if self.generation() != seen {
                break Wake::Changed;
            }
            if self.waiters.load(SeqCst) >= self.active.load(SeqCst) && start.elapsed() >= timeout {
                self.aborted.store(true, SeqCst);
                self.generation.fetch_add(1, SeqCst);
                self.cv.notify_all();
                break Wake::Deadlock;
            }
            guard = self.cv.wait_timeout(guard, slice).unwrap_or_else(|e| e.into_inner()).0;
        };
        self.waiters.fetch_sub(1, SeqCst);
        wake
    }
}

/// Blocked-time accounting, shared between a channel and the workers that
/// stall on it.
#[derive(Debug, Default)]
pub struct StallCounters {
    name: String,
    push_ns: AtomicU64,
    pop_ns: AtomicU64,
    push_events: AtomicU64,
    pop_events: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Push,
    Pop,
}

impl StallCounters {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    /// Name of the channel these counters belong to.
    pub fn channel(&self) -> &str {
        &self.name
    }

    pub fn record(&self, dir: Direction, ns: u64) {
        let (t, e) = match dir {
            Direction::Push => (&self.push_ns, &self.push_events),
            Direction::Pop => (&self.pop_ns, &self.pop_events),
        };
        t.fetch_add(ns, SeqCst);
        e.fetch_add(1, SeqCst);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub capacity: usize,
    pub pushes: u64,
    pub pops: u64,
    pub peak: usize,
    pub push_stall_ns: u64,
    pub pop_stall_ns: u64,
    pub push_stalls: u64,
    pub pop_stalls: u64,
}

impl ChannelStats {
    /// Folds another channel of the same kind into this summary.
    pub fn merge(&mut self, o: &ChannelStats) {
        self.pushes += o.pushes;
        self.pops += o.pops;
        self.peak = self.peak.max(o.peak);
        self.push_stall_ns += o.push_stall_ns;
        self.pop_stall_ns += o.pop_stall_ns;
        self.push_stalls += o.push_stalls;
        self.pop_stalls += o.pop_stalls;
    }

    pub fn stall_ns(&self) -> u64 {
        self.push_stall_ns + self.pop_stall_ns
    }
}

#[derive(Debug)]
struct State<T> {
    queue: VecDeque<T>,
    closed: bool,
    pushes: u64,
    pops: u64,
    peak: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum TryPush<T> {
    Full(T),
    Closed(T),
}

#[derive(Debug, PartialEq, Eq)]
pub enum TryPop<T> {
    Item(T),
    Empty,
    /// Closed and drained.
    Closed,
}

/// Bounded FIFO. Capacity counts elements.
#[derive(Debug)]
pub struct Channel<T> {
    name: String,
    capacity: usize,
    state: Mutex<State<T>>,
    notifier: Arc<Notifier>,
    stalls: Arc<StallCounters>,
    timeout: Duration,
}

impl<T> Channel<T> {
    /// A standalone channel with its own notifier.
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        Self::with_notifier(name, capacity, Notifier::new(usize::MAX), Duration::from_secs(3600))
    }

    pub fn with_notifier(name: impl Into<String>, capacity: usize, notifier: Arc<Notifier>, timeout: Duration) -> Self {
        assert!(capacity > 0, "channel capacity must be positive");
        let name = name.into();
        Self {
            stalls: Arc::new(StallCounters::new(name.clone())),
            name,
            capacity,
            state: Mutex::new(State {
                queue: VecDeque::with_capacity(capacity.min(1024)),
                closed: false,
                pushes: 0,
                pops: 0,
                peak: 0,
            }),
            notifier,
            timeout,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stalls(&self) -> &Arc<StallCounters> {
        &self.stalls
    }

    fn state(&self) -> std::sync::MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.state().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn try_push(&self, value: T) -> std::result::Result<(), TryPush<T>> {
        {
            let mut s = self.state();
            if s.closed {
                return Err(TryPush::Closed(value));
            }
            if s.queue.len() == self.capacity {
                return Err(TryPush::Full(value));
            }
            s.queue.push_back(value);
            s.pushes += 1;
            s.peak = s.peak.max(s.queue.len());
        }
        self.notifier.bump();
        Ok(())
    }

    pub fn try_pop(&self) -> TryPop<T> {
        let v = {
            let mut s = self.state();
            match s.queue.pop_front() {
                Some(v) => {
                    s.pops += 1;
                    v
                }
                None if s.closed => return TryPop::Closed,
                None => return TryPop::Empty,
            }
        };
        self.notifier.bump();
        TryPop::Item(v)
    }

    fn wait(&self, seen: u64, dir: Direction, since: Instant) -> Result<()> {
        match self.notifier.wait_change(seen, self.timeout) {
            Wake::Changed => {
                self.stalls.record(dir, since.elapsed().as_nanos() as u64);
                Ok(())
            }
            Wake::Aborted => Err(Error::ChannelClosed(format!("{}: pipeline aborted", self.name))),
            Wake::Deadlock => Err(Error::Deadlock(format!("{}: no progress while blocked", self.name))),
        }
    }

    /// Blocks while the channel is full.
    pub fn push(&self, mut value: T) -> Result<()> {
        loop {
            let seen = self.notifier.generation();
            match self.try_push(value) {
                Ok(()) => return Ok(()),
                Err(TryPush::Closed(_)) => return Err(Error::ChannelClosed(format!("push to closed {}", self.name))),
                Err(TryPush::Full(v)) => {
                    value = v;
                    self.wait(seen, Direction::Push, Instant::now())?;
                }
            }
        }
    }

    /// Blocks while the channel is empty; `ChannelClosed` once closed and drained.
    pub fn pop(&self) -> Result<T> {
        loop {
            let seen = self.notifier.generation();
            match self.try_pop() {
                TryPop::Item(v) => return Ok(v),
                TryPop::Closed => return Err(Error::ChannelClosed(format!("pop from closed {}", self.name))),
                TryPop::Empty => self.wait(seen, Direction::Pop, Instant::now())?,
            }
        }
    }

    /// No more pushes; queued elements remain poppable.
    pub fn close(&self) {
        self.state().closed = true;
        self.notifier.bump();
    }

    pub fn is_closed(&self) -> bool {
        self.state().closed
    }

    pub fn stats(&self) -> ChannelStats {
        let s = self.state();
        ChannelStats {
            name: self.name.clone(),
            capacity: self.capacity,
            pushes: s.pushes,
            pops: s.pops,
            peak: s.peak,
            push_stall_ns: self.stalls.push_ns.load(SeqCst),
            pop_stall_ns: self.stalls.pop_ns.load(SeqCst),
            push_stalls: self.stalls.push_events.load(SeqCst),
            pop_stalls: self.stalls.pop_events.load(SeqCst),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_order() {
        let ch = Channel::new("t", 4);
        ch.push('a').unwrap();
        ch.push('b').unwrap();
        assert_eq!(ch.pop().unwrap(), 'a');
        assert_eq!(ch.pop().unwrap(), 'b');
    }

    #[test]
    fn full_and_closed() {
        let ch = Channel::new("t", 1);
        ch.try_push(1).unwrap();
        assert_eq!(ch.try_push(2), Err(TryPush::Full(2)));
        ch.close();
        assert_eq!(ch.try_push(3), Err(TryPush::Closed(3)));
        assert_eq!(ch.try_pop(), TryPop::Item(1));
        assert_eq!(ch.try_pop(), TryPop::Closed);
        assert!(matches!(ch.pop(), Err(Error::ChannelClosed(_))));
    }

    #[test]
    fn push_blocks_until_pop() {
        let ch = Channel::new("t", 1);
        ch.push(1).unwrap();
        std::thread::scope(|s| {
            let h = s.spawn(|| ch.push(2));
            std::thread::sleep(Duration::from_millis(20));
            assert_eq!(ch.len(), 1);
            assert_eq!(ch.pop().unwrap(), 1);
            h.join().unwrap().unwrap();
        });
        assert_eq!(ch.pop().unwrap(), 2);
        let st = ch.stats();
        assert_eq!((st.pushes, st.pops, st.peak), (2, 2, 1));
        assert_eq!(st.push_stalls, 1);
        assert!(st.push_stall_ns > 0);
    }

    #[test]
    fn lone_waiter_detects_deadlock() {
        let n = Notifier::new(1);
        let ch: Channel<u8> = Channel::with_notifier("t", 1, n, Duration::from_millis(20));
        assert!(matches!(ch.pop(), Err(Error::Deadlock(_))));
    }
}
