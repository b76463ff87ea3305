//! Edge client: local inference on every frame, stride sampling at the
//! commanded rate, periodic uplink flushes and double-buffered model swaps.

use thiserror::Error;

use crate::codec::{
    apply_delta, decode_downlink, encode_uplink, CodecError, ControlRecord, UplinkBatch,
    UplinkSample,
};
use crate::workload::{predict, Frame, LabelGrid, ParamVector, StudentLayout};

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error(transparent)]
    Decode(#[from] CodecError),
    #[error("stale delta: phase {phase} <= last applied {last}")]
    StalePhase { phase: u32, last: u32 },
}

#[derive(Debug, Clone)]
pub struct EdgeState {
    pub client_id: u32,
    layout: StudentLayout,
    fps: f64,
    active: ParamVector,
    inactive: ParamVector,
    pending: Vec<UplinkSample>,
    accumulator: f64,
    pub rate: f64,
    pub t_update: f64,
    pub slowdown: bool,
    /// Phase of the last applied delta; 0 before any.
    pub last_phase: u32,
    last_flush: f64,
}

impl EdgeState {
    /// Starts from the bootstrap parameters with the given sampling directives.
    pub fn new(
        client_id: u32,
        layout: StudentLayout,
        fps: f64,
        initial: ParamVector,
        rate: f64,
        t_update: f64,
    ) -> Self {
        Self {
            client_id,
            layout,
            fps,
            inactive: initial.clone(),
            active: initial,
            pending: Vec::new(),
            accumulator: 0.0,
            rate,
            t_update,
            slowdown: false,
            last_phase: 0,
            last_flush: 0.0,
        }
    }

    pub fn active(&self) -> &ParamVector {
        &self.active
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Predicts with the active model and decides whether to sample the frame.
    pub fn on_frame(&mut self, frame: &Frame) -> (LabelGrid, bool) {
        let prediction =
            predict(&self.layout, &self.active, frame).expect("frame shape matches the layout");
        self.accumulator += self.rate / self.fps;
        // tolerance keeps exact strides despite rounding in r/fps sums
        let sampled = self.accumulator >= 1.0 - 1e-9;
        if sampled {
            self.accumulator -= 1.0;
            self.pending.push(UplinkSample::from_features(frame.timestamp, &frame.cells));
        }
        (prediction, sampled)
    }

    pub fn flush_due(&self, now: f64) -> bool {
        now - self.last_flush >= self.t_update
    }

    /// Encodes and clears the pending samples. Nothing is emitted when there
    /// are none.
    pub fn flush_uplink(&mut self, now: f64) -> Option<Vec<u8>> {
        self.last_flush = now;
        let batch = UplinkBatch {
            client_id: self.client_id,
            samples: std::mem::take(&mut self.pending),
        };
        encode_uplink(&batch)
    }

    fn apply_control(&mut self, control: &ControlRecord) {
        self.rate = control.rate as f64;
        self.t_update = control.t_update as f64;
        self.slowdown = control.flags & ControlRecord::FLAG_SLOWDOWN != 0;
    }

    /// Applies a downlink message between frames. Returns whether a delta was
    /// applied. A delta whose phase is not newer than the last one is
    /// rejected without touching any state.
    pub fn on_delta(&mut self, bytes: &[u8]) -> Result<bool, EdgeError> {
        let (control, delta) = decode_downlink(bytes)?;
        let Some(delta) = delta else {
            self.apply_control(&control);
            return Ok(false);
        };
        if delta.phase <= self.last_phase {
            return Err(EdgeError::StalePhase { phase: delta.phase, last: self.last_phase });
        }
        apply_delta(&mut self.inactive, &delta)?;
        std::mem::swap(&mut self.active, &mut self.inactive);
        self.inactive.clone_from(&self.active);
        self.last_phase = delta.phase;
        self.apply_control(&control);
        Ok(true)
    }
}
