//! Deterministic discrete-event network: FIFO links with bandwidth and
//! latency, and a time-ordered event queue.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    /// Bits per second.
    pub bandwidth: f64,
    /// One-way propagation delay, seconds.
    pub latency: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self { bandwidth: 10e6, latency: 0.05 }
    }
}

/// A one-directional lossless link. Messages serialize one after another at
/// `bandwidth`, then propagate for `latency`.
#[derive(Debug, Clone)]
pub struct Link<P> {
    config: LinkConfig,
    busy_until: f64,
    bytes_sent: u64,
    bytes_delivered: u64,
    down: bool,
    held: VecDeque<(P, usize)>,
}

impl<P> Link<P> {
    pub fn new(config: LinkConfig) -> Self {
        assert!(config.bandwidth > 0.0, "link bandwidth must be positive");
        assert!(config.latency >= 0.0, "link latency must be nonnegative");
        Self {
            config,
            busy_until: 0.0,
            bytes_sent: 0,
            bytes_delivered: 0,
            down: false,
            held: VecDeque::new(),
        }
    }

    pub fn config(&self) -> LinkConfig {
        self.config
    }

    fn transmit(&mut self, size: usize, now: f64) -> f64 {
        let start = now.max(self.busy_until);
        let serialization = size as f64 * 8.0 / self.config.bandwidth;
        self.busy_until = start + serialization;
        self.bytes_sent += size as u64;
        self.busy_until + self.config.latency
    }

    /// Queues `payload` of `size` bytes. Returns its delivery time, or `None`
    /// while the link is down (the message is held until [`Link::set_up`]).
    pub fn send(&mut self, payload: P, size: usize, now: f64) -> Option<(f64, P)> {
        if self.down {
            self.held.push_back((payload, size));
            None
        } else {
            Some((self.transmit(size, now), payload))
        }
    }

    pub fn set_down(&mut self) {
        self.down = true;
    }

    /// Brings the link back and releases held messages in FIFO order.
    pub fn set_up(&mut self, now: f64) -> Vec<(f64, P)> {
        self.down = false;
        let held: Vec<_> = self.held.drain(..).collect();
        held.into_iter().map(|(p, size)| (self.transmit(size, now), p)).collect()
    }

    pub fn is_down(&self) -> bool {
        self.down
    }

    /// Called by the event loop when a message on this link is delivered.
    pub fn mark_delivered(&mut self, size: usize) {
        self.bytes_delivered += size as u64;
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_delivered(&self) -> u64 {
        self.bytes_delivered
    }

    /// Kilobits per second of traffic sent over `elapsed` seconds.
    pub fn kbps(&self, elapsed: f64) -> f64 {
        if elapsed <= 0.0 {
            0.0
        } else {
            self.bytes_sent as f64 * 8.0 / elapsed / 1000.0
        }
    }
}

struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Time-ordered events; equal times fire in insertion order.
pub struct EventQueue<E> {
    now: f64,
    seq: u64,
    heap: BinaryHeap<Entry<E>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { now: 0.0, seq: 0, heap: BinaryHeap::new() }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules `event` at `time`; times in the past are clamped to now.
    pub fn schedule(&mut self, time: f64, event: E) {
        let time = time.max(self.now);
        self.heap.push(Entry { time, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pops the next event if it is due at or before `until`.
    pub fn pop_until(&mut self, until: f64) -> Option<(f64, E)> {
        if self.heap.peek()?.time > until {
            return None;
        }
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.event))
    }

    /// Fires every event with time ≤ `until`, in order, and moves the clock to `until`.
    pub fn advance(&mut self, until: f64) -> Vec<(f64, E)> {
        let mut out = Vec::new();
        while let Some(e) = self.pop_until(until) {
            out.push(e);
        }
        self.now = self.now.max(until);
        out
    }
}
