//! Per-job event buffer with replay and live fan-out.
//!
//! The log sequences every event it accepts, keeps the most recent run in
//! full, and lets any number of subscribers replay from a sequence number and
//! then follow live output. A run ends with exactly one terminal event; the
//! log drops anything pushed after it until the next run begins.

use std::collections::VecDeque;
use std::pin::Pin;
use std::sync::{Arc, Mutex};

use futures::Stream;
use tokio::sync::watch;

use crate::clock::Clock;
use crate::executor::{EventSink, ExecState};
use crate::model::{EventBody, JobEvent, JobId};

pub type EventStream = Pin<Box<dyn Stream<Item = JobEvent> + Send>>;

pub struct EventLog {
    job_id: JobId,
    clock: Arc<dyn Clock>,
    inner: Mutex<LogInner>,
    version: watch::Sender<u64>,
}

#[derive(Default)]
struct LogInner {
    events: VecDeque<JobEvent>,
    next_seq: u64,
    run_start: u64,
    closed: bool,
}

impl EventLog {
    pub fn new(job_id: JobId, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            job_id,
            clock,
            inner: Mutex::new(LogInner::default()),
            version: watch::Sender::new(0),
        })
    }

    pub fn job_id(&self) -> &JobId {
        &self.job_id
    }

    /// Discards the previous run's events and reopens the log. Returns the
    /// sequence number the new run starts at.
    pub fn begin_run(&self) -> u64 {
        let start = {
            let mut inner = self.inner.lock().unwrap();
            inner.events.clear();
            inner.closed = false;
            inner.run_start = inner.next_seq;
            inner.run_start
        };
        self.version.send_modify(|v| *v += 1);
        start
    }

    /// Appends an event. Returns its sequence number, or `None` when the
    /// current run has already terminated.
    pub fn push(&self, body: EventBody) -> Option<u64> {
        let seq = {
            let mut inner = self.inner.lock().unwrap();
            if inner.closed {
                return None;
            }
            let seq = inner.next_seq;
            inner.next_seq += 1;
            inner.closed = body.is_terminal();
            inner.events.push_back(JobEvent {
                job_id: self.job_id.clone(),
                seq,
                body,
                timestamp: self.clock.now_ms(),
            });
            seq
        };
        self.version.send_modify(|v| *v += 1);
        Some(seq)
    }

    pub fn run_start(&self) -> u64 {
        self.inner.lock().unwrap().run_start
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    /// Buffered events with `seq >= from`, and whether the run has ended.
    pub fn events_from(&self, from: u64) -> (Vec<JobEvent>, bool) {
        let inner = self.inner.lock().unwrap();
        let events = inner
            .events
            .iter()
            .filter(|e| e.seq >= from)
            .cloned()
            .collect();
        (events, inner.closed)
    }

    /// Total stdout/stderr bytes buffered for the current run.
    pub fn buffered_output_bytes(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .events
            .iter()
            .map(|e| match &e.body {
                EventBody::Stdout(b) | EventBody::Stderr(b) => b.len(),
                _ => 0,
            })
            .sum()
    }

    /// Replays buffered events from `from` and then follows live output
    /// until the run's terminal event.
    pub fn subscribe(self: &Arc<Self>, from: u64) -> EventStream {
        let state = Follow {
            log: Arc::clone(self),
            rx: self.version.subscribe(),
            cursor: from,
            pending: VecDeque::new(),
            done: false,
        };
        Box::pin(futures::stream::unfold(state, |mut st| async move {
            loop {
                if let Some(ev) = st.pending.pop_front() {
                    st.done = ev.is_terminal();
                    return Some((ev, st));
                }
                if st.done {
                    return None;
                }
                st.rx.borrow_and_update();
                let (events, closed) = st.log.events_from(st.cursor);
                if let Some(last) = events.last() {
                    st.cursor = last.seq + 1;
                    st.pending.extend(events);
                    continue;
                }
                if closed || st.rx.changed().await.is_err() {
                    return None;
                }
            }
        }))
    }
}

struct Follow {
    log: Arc<EventLog>,
    rx: watch::Receiver<u64>,
    cursor: u64,
    pending: VecDeque<JobEvent>,
    done: bool,
}

impl EventSink for EventLog {
    fn emit(&self, body: EventBody) {
        self.push(body);
    }

    fn terminated(&self, _state: &ExecState) {}
}
