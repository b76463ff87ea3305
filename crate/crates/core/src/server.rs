//! Server side of the streaming loop: one [`ServerSession`] per edge client
//! (teacher labeling, masked-Adam training phases, delta emission, ASR/ATR
//! control) and a round-robin GPU scheduler over sessions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::buffer::{Sample, SampleBuffer};
use crate::codec::{ControlRecord, ModelDelta, UplinkBatch};
use crate::controllers::{AsrConfig, AsrState, AtrConfig, AtrMode, AtrState, PhiTracker};
use crate::optimizer::{
    masked_adam_step, run_training_phase, select_coordinates, AdamConfig, AdamState,
    CoordinateMask, OptimizerError, PhaseOutcome, Strategy, UpdateVector,
};
use crate::workload::{
    miou, student_eval, teacher_label, DriftConfig, Frame, ParamVector, StudentLayout,
    TeacherOracle, WorkloadError,
};

#[derive(Debug, Error, PartialEq)]
pub enum ServerError {
    #[error("uplink sample has {found} features, expected {expected}")]
    FeatureShape { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] WorkloadError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

pub type Result<T> = std::result::Result<T, ServerError>;

/// Simulated GPU seconds charged per unit of server work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuCostModel {
    /// Seconds per teacher-labeled frame.
    pub teacher_cost: f64,
    /// Seconds per training iteration.
    pub train_cost: f64,
}

impl Default for GpuCostModel {
    fn default() -> Self {
        Self { teacher_cost: 0.25, train_cost: 0.05 }
    }
}

/// Coordinate-descent knobs of an AMS session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub strategy: Strategy,
    /// Fraction of coordinates updated per phase.
    pub fraction: f64,
    /// Adam iterations per phase.
    pub iterations: usize,
    pub batch_size: usize,
    /// Seconds of samples kept for training.
    pub horizon: f64,
    pub adam: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GradientGuided,
            fraction: 0.05,
            iterations: 20,
            batch_size: 8,
            horizon: 240.0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitConfig {
    /// Target training mIoU on the latest sample.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Tightest spacing between samples, in native frames.
    pub min_stride: u32,
    pub max_stride: u32,
}

impl Default for JitConfig {
    fn default() -> Self {
        Self { threshold: 0.75, max_iterations: 10, min_stride: 8, max_stride: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneTimeConfig {
    /// Seconds of stream used for the single fine-tuning.
    pub window: f64,
    pub iterations: usize,
}

impl Default for OneTimeConfig {
    fn default() -> Self {
        Self { window: 60.0, iterations: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Ams,
    NoCustomization,
    OneTime,
    JustInTime,
}

impl Policy {
    pub const ALL: [Policy; 4] =
        [Policy::Ams, Policy::NoCustomization, Policy::OneTime, Policy::JustInTime];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Ams => "ams",
            Policy::NoCustomization => "no-customization",
            Policy::OneTime => "one-time",
            Policy::JustInTime => "just-in-time",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy '{s}'"))
    }
}

/// Everything a session needs besides the initial parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub id: u32,
    pub policy: Policy,
    pub layout: StudentLayout,
    /// Stream the teacher labels; the oracle knows the generating distribution.
    pub drift: DriftConfig,
    pub stream_seed: u64,
    pub training: TrainingConfig,
    pub asr: AsrConfig,
    pub atr: AtrConfig,
    pub jit: JitConfig,
    pub one_time: OneTimeConfig,
    /// Seed of the session's mini-batch and mask sampling.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestReport {
    pub added: usize,
    pub evicted: usize,
    pub gpu_seconds: f64,
    /// True when every sample of the batch was already outside the horizon.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub delta: Option<ModelDelta>,
    pub rate: f64,
    pub t_update: f64,
    pub mode: AtrMode,
    pub gpu_seconds: f64,
}

impl PhaseReport {
    pub fn control(&self) -> ControlRecord {
        ControlRecord {
            rate: self.rate as f32,
            t_update: self.t_update as f32,
            flags: if self.mode == AtrMode::Slowdown { ControlRecord::FLAG_SLOWDOWN } else { 0 },
        }
    }
}

/// Per-client server state (one instance of the server loop).
#[derive(Debug, Clone)]
pub struct ServerSession {
    pub config: SessionConfig,
    pub params: ParamVector,
    pub adam: AdamState,
    pub last_update: Option<UpdateVector>,
    pub buffer: SampleBuffer,
    pub asr: AsrState,
    pub atr: AtrState,
    phi: PhiTracker,
    /// Start of the first controller period not yet accounted for.
    control_clock: f64,
    inbox: Vec<UplinkBatch>,
    pub next_due: f64,
    /// Number of deltas emitted so far; the next delta carries `phase + 1`.
    pub phase: u32,
    pub gpu_seconds: f64,
    jit_stride: u32,
    one_time_done: bool,
    rng: ChaCha8Rng,
}

impl ServerSession {
    pub fn new(config: SessionConfig, initial: ParamVector) -> Self {
        assert_eq!(initial.len(), config.layout.num_params());
        let adam = AdamState::new(initial.len(), config.training.adam);
        let mut asr = AsrState::new(config.asr);
        let mut next_due = 0.0;
        match config.policy {
            Policy::NoCustomization => {
                asr.rate = 0.0;
                next_due = f64::INFINITY;
            }
            Policy::OneTime => next_due = config.one_time.window + config.atr.tau_min,
            Policy::JustInTime => {
                asr.rate = config.drift.fps / config.jit.min_stride as f64;
            }
            Policy::Ams => {}
        }
        Self {
            buffer: SampleBuffer::new(config.training.horizon),
            atr: AtrState::new(config.atr),
            phi: PhiTracker::new(config.asr.window),
            control_clock: 0.0,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            jit_stride: config.jit.min_stride,
            adam,
            asr,
            next_due,
            params: initial,
            last_update: None,
            inbox: Vec::new(),
            phase: 0,
            gpu_seconds: 0.0,
            one_time_done: false,
            config,
        }
    }

    /// Sampling rate the edge should start with.
    pub fn initial_rate(&self) -> f64 {
        self.asr.rate
    }

    /// Upload interval the edge should start with (0 = send every sample).
    pub fn initial_t_update(&self) -> f64 {
        match self.config.policy {
            Policy::JustInTime => 0.0,
            _ => self.atr.t_update,
        }
    }

    pub fn enqueue(&mut self, batch: UplinkBatch) {
        self.inbox.push(batch);
    }

    pub fn pending_samples(&self) -> usize {
        self.inbox.iter().map(|b| b.samples.len()).sum()
    }

    /// Whether there is anything to do once the session is due.
    pub fn has_work(&self) -> bool {
        match self.config.policy {
            Policy::NoCustomization => false,
            Policy::OneTime => !self.one_time_done,
            Policy::JustInTime => self.pending_samples() > 0,
            Policy::Ams => self.pending_samples() > 0 || !self.buffer.is_empty(),
        }
    }

    /// Earliest time the session may be served.
    pub fn due_at(&self) -> f64 {
        match self.config.policy {
            Policy::JustInTime => f64::NEG_INFINITY,
            _ => self.next_due,
        }
    }

    /// Whether the scheduler should serve this session at `now`.
    pub fn wants_service(&self, now: f64) -> bool {
        self.has_work() && now >= self.due_at()
    }

    /// GPU seconds the next service would take.
    pub fn estimated_cost(&self, cost: &GpuCostModel) -> f64 {
        let label = cost.teacher_cost * self.pending_samples() as f64;
        let train = match self.config.policy {
            Policy::Ams => self.config.training.iterations,
            Policy::OneTime => self.config.one_time.iterations,
            Policy::JustInTime => self.config.jit.max_iterations,
            Policy::NoCustomization => 0,
        };
        label + cost.train_cost * train as f64
    }

    fn decode_frame(&self, timestamp: f32, features: Vec<f64>) -> Result<Frame> {
        let cfg = &self.config.drift;
        let expected = cfg.cells() * cfg.dim;
        if features.len() != expected {
            return Err(ServerError::FeatureShape { expected, found: features.len() });
        }
        let frame_id = cfg.frame_at(timestamp as f64);
        Ok(Frame { frame_id, timestamp: timestamp as f64, dim: cfg.dim, cells: features })
    }

    /// Labels every sample with the teacher and adds it to the buffer.
    pub fn ingest_samples(&mut self, batch: &UplinkBatch, cost: &GpuCostModel) -> Result<IngestReport> {
        let mut report = IngestReport { added: 0, evicted: 0, gpu_seconds: 0.0, stale: false };
        let mut survivors = 0usize;
        for s in &batch.samples {
            let frame = self.decode_frame(s.timestamp, s.features_f64())?;
            let oracle =
                TeacherOracle::at_frame(&self.config.drift, self.config.stream_seed, frame.frame_id)?;
            let labels = teacher_label(&frame, &oracle)?;
            report.gpu_seconds += cost.teacher_cost;
            self.phi.observe(frame.timestamp, &labels);
            let ts = frame.timestamp;
            let evicted = self.buffer.push(Sample { frame, labels });
            report.evicted += evicted;
            report.added += 1;
            if self.buffer.oldest().is_some_and(|o| o <= ts) {
                survivors += 1;
            }
        }
        report.stale = !batch.samples.is_empty() && survivors == 0;
        self.gpu_seconds += report.gpu_seconds;
        Ok(report)
    }

    /// The controllers tick once per elapsed `δt` period (at least once per
    /// phase); a phase delayed by GPU contention catches up on missed ticks.
    fn control_update(&mut self, now: f64) {
        let period = self.config.asr.window;
        let ticks = ((now - self.control_clock) / period).floor().max(1.0);
        self.control_clock += ticks * period;
        for _ in 0..ticks as usize {
            if let Some(phi_mean) = self.phi.mean() {
                self.asr.update(phi_mean);
            }
            self.atr.update(self.asr.rate);
        }
    }

    /// One training phase: select coordinates, run `K` masked-Adam steps, emit
    /// the delta of the masked coordinates and update the controllers.
    pub fn server_phase(&mut self, now: f64, cost: &GpuCostModel) -> Result<PhaseReport> {
        let tc = self.config.training;
        let mut gpu = 0.0;
        let mut delta = None;
        if !self.buffer.is_empty() {
            let mask = select_coordinates(
                tc.strategy,
                self.last_update.as_ref(),
                tc.fraction,
                &self.config.layout,
                &mut self.rng,
            )?;
            let outcome = run_training_phase(
                &self.config.layout,
                &mut self.params,
                &mut self.adam,
                &self.buffer,
                &mask,
                self.last_update.as_ref(),
                tc.iterations,
                tc.batch_size,
                &mut self.rng,
            )?;
            if let PhaseOutcome::Trained { update, iterations, .. } = outcome {
                self.last_update = update;
                gpu = cost.train_cost * iterations as f64;
                self.phase += 1;
                delta = Some(ModelDelta::from_params(self.phase, mask, &self.params));
            }
        }
        self.control_update(now);
        self.next_due = now + self.atr.t_update;
        self.gpu_seconds += gpu;
        Ok(PhaseReport {
            delta,
            rate: self.asr.rate,
            t_update: self.atr.t_update,
            mode: self.atr.mode,
            gpu_seconds: gpu,
        })
    }

    fn one_time_phase(&mut self, cost: &GpuCostModel) -> Result<PhaseReport> {
        let cfg = self.config.one_time;
        let mut gpu = 0.0;
        let mut delta = None;
        if !self.buffer.is_empty() {
            let mask = CoordinateMask::full(self.params.len());
            run_training_phase(
                &self.config.layout,
                &mut self.params,
                &mut self.adam,
                &self.buffer,
                &mask,
                None,
                cfg.iterations,
                self.config.training.batch_size,
                &mut self.rng,
            )?;
            gpu = cost.train_cost * cfg.iterations as f64;
            self.phase += 1;
            delta = Some(ModelDelta::from_params(self.phase, mask, &self.params));
        }
        self.one_time_done = true;
        self.next_due = f64::INFINITY;
        self.asr.rate = 0.0;
        self.gpu_seconds += gpu;
        Ok(PhaseReport {
            delta,
            rate: 0.0,
            t_update: self.atr.t_update,
            mode: AtrMode::Normal,
            gpu_seconds: gpu,
        })
    }

    /// Trains on the most recent sample until its mIoU reaches the threshold
    /// or the iteration budget runs out; adapts the sampling stride.
    fn jit_phase(&mut self, now: f64, cost: &GpuCostModel) -> Result<PhaseReport> {
        let jc = self.config.jit;
        let layout = self.config.layout;
        let classes: Vec<usize> = (0..layout.classes).collect();
        let mut gpu = 0.0;
        let mut delta = None;
        if let Some(latest) = self.buffer.window().last().cloned() {
            let batch = [(&latest.frame, &latest.labels)];
            let mut score = miou(&student_eval(&layout, &self.params, &batch)?.preds[0], &latest.labels, &classes);
            if score < jc.threshold {
                let mask = select_coordinates(
                    Strategy::GradientGuided,
                    self.last_update.as_ref(),
                    self.config.training.fraction,
                    &layout,
                    &mut self.rng,
                )?;
                let mut update = UpdateVector(vec![0.0; self.params.len()]);
                let mut iterations = 0;
                while iterations < jc.max_iterations && score < jc.threshold {
                    let eval = student_eval(&layout, &self.params, &batch)?;
                    masked_adam_step(&mut self.params, &mut self.adam, &eval.grad, &mask, &mut update)?;
                    iterations += 1;
                    score = miou(&student_eval(&layout, &self.params, &batch)?.preds[0], &latest.labels, &classes);
                }
                self.last_update = Some(update);
                gpu = cost.train_cost * iterations as f64;
                self.phase += 1;
                delta = Some(ModelDelta::from_params(self.phase, mask, &self.params));
                if score < jc.threshold {
                    self.jit_stride = (self.jit_stride / 2).max(jc.min_stride);
                }
            } else {
                self.jit_stride = (self.jit_stride * 2).min(jc.max_stride);
            }
        }
        self.asr.rate = self.config.drift.fps / self.jit_stride as f64;
        self.next_due = now;
        self.gpu_seconds += gpu;
        Ok(PhaseReport { delta, rate: self.asr.rate, t_update: 0.0, mode: AtrMode::Normal, gpu_seconds: gpu })
    }

    /// Ingests everything received so far, then runs the policy's phase.
    pub fn serve(&mut self, now: f64, cost: &GpuCostModel) -> Result<PhaseReport> {
        let inbox = std::mem::take(&mut self.inbox);
        let mut label_gpu = 0.0;
        for mut batch in inbox {
            if self.config.policy == Policy::OneTime {
                let window = self.config.one_time.window;
                batch.samples.retain(|s| (s.timestamp as f64) < window);
            }
            label_gpu += self.ingest_samples(&batch, cost)?.gpu_seconds;
        }
        let mut report = match self.config.policy {
            Policy::Ams => self.server_phase(now, cost)?,
            Policy::OneTime => self.one_time_phase(cost)?,
            Policy::JustInTime => self.jit_phase(now, cost)?,
            Policy::NoCustomization => PhaseReport {
                delta: None,
                rate: 0.0,
                t_update: self.atr.t_update,
                mode: AtrMode::Normal,
                gpu_seconds: 0.0,
            },
        };
        report.gpu_seconds += label_gpu;
        Ok(report)
    }
}

/// What the scheduler needs to know about a session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionStatus {
    pub due_at: f64,
    pub has_work: bool,
    pub cost: f64,
}

impl SessionStatus {
    pub fn of(session: &ServerSession, cost: &GpuCostModel) -> Self {
        Self {
            due_at: session.due_at(),
            has_work: session.has_work(),
            cost: session.estimated_cost(cost),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkItem {
    pub session: usize,
    pub start: f64,
    pub end: f64,
}

/// Cyclic visiting order over sessions; one exclusive GPU.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    cursor: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    /// The next session in cyclic order that is due at `now`, if any.
    pub fn next(&mut self, sessions: &[SessionStatus], now: f64) -> Option<usize> {
        let n = sessions.len();
        for k in 0..n {
            let i = (self.cursor + k) % n;
            let s = &sessions[i];
            if s.has_work && now >= s.due_at {
                self.cursor = (i + 1) % n;
                return Some(i);
            }
        }
        None
    }

    /// One full cycle starting at the cursor: every session due by the time
    /// the GPU reaches it is served once, back to back.
    pub fn schedule_turn(&mut self, sessions: &[SessionStatus], now: f64) -> Vec<WorkItem> {
        let n = sessions.len();
        let mut clock = now;
        let mut out = Vec::new();
        for k in 0..n {
            let i = (self.cursor + k) % n;
            let s = &sessions[i];
            if s.has_work && clock >= s.due_at {
                out.push(WorkItem { session: i, start: clock, end: clock + s.cost });
                clock += s.cost;
            }
        }
        if let Some(last) = out.last() {
            self.cursor = (last.session + 1) % n;
        }
        out
    }
}
