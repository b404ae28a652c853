// SPDX-License-Identifier: Apache-2.0

//! Stage schedulers: cooperative round-robin on the calling thread, or one
//! worker thread per stage with a deadlock watchdog.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::channel::{Notifier, Wake};
use super::stages::{Blocker, Poll, Stage};

#[derive(Debug, Clone)]
pub struct StageReport {
    pub kernel: &'static str,
    pub instance: usize,
    pub start: Option<Instant>,
    pub end: Option<Instant>,
    pub stall_ns: u64,
    pub stall_events: u64,
    pub bytes: u64,
    /// What the stage was waiting on when the run stopped, if anything.
    pub last_block: Option<String>,
}

struct Tracker {
    report: StageReport,
    blocked: Option<(Blocker, Instant)>,
}

impl Tracker {
    fn new(stage: &dyn Stage) -> Self {
        Self {
            report: StageReport {
                kernel: stage.kernel(),
                instance: stage.instance(),
                start: None,
                end: None,
                stall_ns: 0,
                stall_events: 0,
                bytes: 0,
                last_block: None,
            },
            blocked: None,
        }
    }

    fn poll(&mut self, stage: &mut dyn Stage) -> Result<Poll> {
        let now = Instant::now();
        self.report.start.get_or_insert(now);
        let p = stage.poll()?;
        match &p {
            Poll::Blocked(b) => {
                if self.blocked.is_none() {
                    self.blocked = Some((b.clone(), now));
                }
                self.report.last_block = Some(b.describe());
            }
            Poll::Progress | Poll::Done => {
                if let Some((b, since)) = self.blocked.take() {
                    let ns = since.elapsed().as_nanos() as u64;
                    b.stalls.record(b.dir, ns);
                    self.report.stall_ns += ns;
                    self.report.stall_events += 1;
                }
                self.report.last_block = None;
                if matches!(p, Poll::Done) {
                    self.report.end = Some(Instant::now());
                }
            }
        }
        Ok(p)
    }

    fn finish(mut self, stage: &dyn Stage) -> StageReport {
        self.report.bytes = stage.bytes();
        self.report
    }
}

fn label(r: &StageReport) -> String {
    format!("{}[{}]", r.kernel, r.instance)
}

fn deadlock_message(reports: &[StageReport]) -> String {
    let waits: Vec<String> = reports
        .iter()
        .filter_map(|r| r.last_block.as_ref().map(|b| format!("{} waiting to {b}", label(r))))
        .collect();
    format!("no stage can make progress: {}", waits.join("; "))
}

/// Polls stages in order until all are done. A full round without progress
/// is a deadlock.
pub fn run_cooperative(stages: &mut [&mut dyn Stage]) -> Result<Vec<StageReport>> {
    let mut trackers: Vec<Tracker> = stages.iter().map(|s| Tracker::new(&**s)).collect();
    let mut done = vec![false; stages.len()];
    loop {
        let mut progressed = false;
        for (i, stage) in stages.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            match trackers[i].poll(&mut **stage)? {
                Poll::Progress => progressed = true,
                Poll::Done => {
                    done[i] = true;
                    progressed = true;
                }
                Poll::Blocked(_) => {}
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
        if !progressed {
            let reports: Vec<StageReport> = trackers.into_iter().map(|t| t.report).collect();
            return Err(Error::Deadlock(deadlock_message(&reports)));
        }
    }
    Ok(trackers
        .into_iter()
        .zip(stages.iter())
        .map(|(t, s)| t.finish(&**s))
        .collect())
}

/// Runs every stage on its own scoped thread. `notifier` must be the one the
/// stages' channels share. The first real error wins; the watchdog turns a
/// silent stall of every stage into `Deadlock`.
pub fn run_threaded(stages: &mut [&mut dyn Stage], notifier: &Arc<Notifier>, watchdog: Duration) -> Result<Vec<StageReport>> {
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        let mut slot = first_error.lock().unwrap_or_else(|p| p.into_inner());
        slot.get_or_insert(e);
        drop(slot);
        notifier.abort();
    };
    let reports: Vec<StageReport> = std::thread::scope(|s| {
        let handles: Vec<_> = stages
            .iter_mut()
            .map(|stage| {
                let fail = &fail;
                s.spawn(move || {
                    let stage: &mut dyn Stage = &mut **stage;
                    let mut t = Tracker::new(stage);
                    loop {
                        if notifier.aborted() {
                            break;
                        }
                        let seen = notifier.generation();
                        match t.poll(stage) {
                            Err(e) => {
                                fail(e);
                                break;
                            }
                            Ok(Poll::Progress) => {}
                            Ok(Poll::Done) => {
                                notifier.retire();
                                break;
                            }
                            Ok(Poll::Blocked(_)) => match notifier.wait_change(seen, watchdog) {
                                Wake::Changed => {}
                                Wake::Aborted => break,
                                Wake::Deadlock => {
                                    fail(Error::Deadlock(String::new()));
                                    break;
                                }
                            },
                        }
                    }
                    t.finish(stage)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("stage worker panicked"))
            .collect()
    });
    match first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
        Some(Error::Deadlock(_)) => Err(Error::Deadlock(deadlock_message(&reports))),
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::channel::{Channel, Direction, TryPop, TryPush};

    struct Producer {
        ch: Arc<Channel<u32>>,
        next: u32,
        end: u32,
    }

    impl Stage for Producer {
        fn kernel(&self) -> &'static str {
            "producer"
        }

        fn poll(&mut self) -> Result<Poll> {
            if self.next == self.end {
                self.ch.close();
                return Ok(Poll::Done);
            }
            // Bursts of four overrun a slower consumer.
            let mut pushed = false;
            while self.next < self.end {
                match self.ch.try_push(self.next) {
                    Ok(()) => {
                        self.next += 1;
                        pushed = true;
                        if self.next.is_multiple_of(4) {
                            break;
                        }
                    }
                    Err(TryPush::Full(_)) if pushed => break,
                    Err(TryPush::Full(_)) => {
                        return Ok(Poll::Blocked(Blocker {
                            stalls: self.ch.stalls().clone(),
                            dir: Direction::Push,
                        }))
                    }
                    Err(TryPush::Closed(_)) => unreachable!(),
                }
            }
            Ok(Poll::Progress)
        }
    }

    struct Consumer {
        ch: Arc<Channel<u32>>,
        seen: Vec<u32>,
        /// Stops consuming after this many items, to force a deadlock.
        limit: usize,
    }

    impl Stage for Consumer {
        fn kernel(&self) -> &'static str {
            "consumer"
        }

        fn poll(&mut self) -> Result<Poll> {
            let blocked = Poll::Blocked(Blocker {
                stalls: self.ch.stalls().clone(),
                dir: Direction::Pop,
            });
            if self.seen.len() == self.limit {
                return Ok(blocked);
            }
            match self.ch.try_pop() {
                TryPop::Item(v) => {
                    self.seen.push(v);
                    Ok(Poll::Progress)
                }
                TryPop::Empty => Ok(blocked),
                TryPop::Closed => Ok(Poll::Done),
            }
        }
    }

    fn pair(n: Arc<Notifier>, cap: usize, limit: usize) -> (Producer, Consumer) {
        let ch = Arc::new(Channel::with_notifier("p->c", cap, n, Duration::from_millis(100)));
        (
            Producer {
                ch: ch.clone(),
                next: 0,
                end: 100,
            },
            Consumer {
                ch,
                seen: Vec::new(),
                limit,
            },
        )
    }

    #[test]
    fn cooperative_transfers_in_order() {
        let (mut p, mut c) = pair(Notifier::new(2), 3, usize::MAX);
        let reports = run_cooperative(&mut [&mut p, &mut c]).unwrap();
        assert_eq!(c.seen, (0..100).collect::<Vec<_>>());
        assert!(reports.iter().all(|r| r.end >= r.start));
        let st = c.ch.stats();
        assert_eq!((st.pushes, st.pops), (100, 100));
    }

    #[test]
    fn threaded_transfers_in_order() {
        let n = Notifier::new(2);
        let (mut p, mut c) = pair(n.clone(), 1, usize::MAX);
        run_threaded(&mut [&mut p, &mut c], &n, Duration::from_secs(5)).unwrap();
        assert_eq!(c.seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn cooperative_deadlock_names_blockers() {
        let (mut p, mut c) = pair(Notifier::new(2), 2, 5);
        match run_cooperative(&mut [&mut p, &mut c]) {
            Err(Error::Deadlock(msg)) => {
                assert!(msg.contains("producer[0] waiting to push to p->c"), "{msg}");
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn threaded_watchdog_fires() {
        let n = Notifier::new(2);
        let (mut p, mut c) = pair(n.clone(), 2, 5);
        let r = run_threaded(&mut [&mut p, &mut c], &n, Duration::from_millis(50));
        assert!(matches!(r, Err(Error::Deadlock(_))), "{r:?}");
    }
}
