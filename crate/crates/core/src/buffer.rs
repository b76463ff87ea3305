//! Time-stamped buffer of (frame, teacher label) samples with horizon eviction.

use crate::workload::{Frame, LabelGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: Frame,
    pub labels: LabelGrid,
}

impl Sample {
    pub fn timestamp(&self) -> f64 {
        self.frame.timestamp
    }
}

/// Samples sorted by timestamp. Anything older than `horizon` seconds before
/// the newest entry is dropped on insertion.
#[derive(Debug, Clone)]
pub struct SampleBuffer {
    horizon: f64,
    entries: Vec<Sample>,
}

impl SampleBuffer {
    pub fn new(horizon: f64) -> Self {
        Self { horizon, entries: Vec::new() }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Option<f64> {
        self.entries.last().map(Sample::timestamp)
    }

    pub fn oldest(&self) -> Option<f64> {
        self.entries.first().map(Sample::timestamp)
    }

    /// Inserts in timestamp order and evicts stale entries. Returns how many
    /// entries were evicted.
    pub fn push(&mut self, sample: Sample) -> usize {
        let ts = sample.timestamp();
        let pos = self.entries.partition_point(|s| s.timestamp() <= ts);
        self.entries.insert(pos, sample);
        self.evict()
    }

    fn evict(&mut self) -> usize {
        let Some(newest) = self.newest() else { return 0 };
        let cutoff = newest - self.horizon;
        let stale = self.entries.partition_point(|s| s.timestamp() < cutoff);
        self.entries.drain(..stale);
        stale
    }

    /// Entries within the horizon of the newest one.
    pub fn window(&self) -> &[Sample] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter()
    }
}
