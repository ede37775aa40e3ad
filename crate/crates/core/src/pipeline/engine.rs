//! Single-threaded discrete-event engine with integer microsecond time.
//!
//! Events leave the queue in `(time, sequence)` order, where the sequence
//! number is assigned at scheduling time, so equal-time events keep their
//! insertion order and every run of the same input yields the same trace.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::hash::{Hash, Hasher};

use crate::hash::Fnv64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Event<K> {
    pub time: u64,
    pub sequence: u64,
    pub kind: K,
}

#[derive(Debug)]
pub struct EventQueue<K> {
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    payloads: std::collections::HashMap<u64, K>,
    now: u64,
    next_seq: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            payloads: std::collections::HashMap::new(),
            now: 0,
            next_seq: 0,
        }
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `kind` at absolute time `time`; returns its sequence number.
    pub fn schedule(&mut self, time: u64, kind: K) -> Result<u64> {
        if time < self.now {
            return Err(Error::EventInPast { at: time, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((time, seq)));
        self.payloads.insert(seq, kind);
        Ok(seq)
    }

    /// Schedules `kind` `delay` microseconds from now.
    pub fn schedule_in(&mut self, delay: u64, kind: K) -> u64 {
        self.schedule(self.now + delay, kind)
            .expect("a nonnegative delay is never in the past")
    }

    pub fn pop(&mut self) -> Option<Event<K>> {
        let Reverse((time, sequence)) = self.heap.pop()?;
        self.now = time;
        let kind = self.payloads.remove(&sequence).expect("payload stored with its key");
        Some(Event { time, sequence, kind })
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _))| *t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace<K> {
    pub events: Vec<Event<K>>,
    pub end_time: u64,
}

impl<K: Hash> EventTrace<K> {
    /// Stable digest of the whole trace.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv64::default();
        for e in &self.events {
            e.hash(&mut h);
        }
        self.end_time.hash(&mut h);
        Hasher::finish(&h)
    }
}

/// Runs `handler` on every event in order until the queue drains or the
/// next event lies beyond `horizon`. The handler may schedule follow-up
/// events; scheduling into the past aborts the run.
pub fn run_event_loop<K: Clone, F>(
    initial: impl IntoIterator<Item = (u64, K)>,
    horizon: Option<u64>,
    mut handler: F,
) -> Result<EventTrace<K>>
where
    F: FnMut(&mut EventQueue<K>, &Event<K>) -> Result<()>,
{
    let mut q = EventQueue::new();
    for (t, k) in initial {
        q.schedule(t, k)?;
    }
    let mut events = Vec::new();
    while let Some(t) = q.peek_time() {
        if horizon.is_some_and(|h| t > h) {
            break;
        }
        let ev = q.pop().expect("peeked");
        handler(&mut q, &ev)?;
        events.push(ev);
    }
    Ok(EventTrace {
        end_time: q.now(),
        events,
    })
}
