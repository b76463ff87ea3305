//! Experiment runner: configuration, pretrained bootstrap parameters, seeded
//! simulations of every policy, metrics emission, strategy comparisons and
//! parameter sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{Sample, SampleBuffer};
use crate::controllers::{AsrConfig, AtrConfig};
use crate::optimizer::{run_training_phase, AdamConfig, AdamState, CoordinateMask, Strategy};
use crate::server::{GpuCostModel, JitConfig, OneTimeConfig, Policy, SessionConfig, TrainingConfig};
use crate::sim::{self, ClientSpec, FrameRow, SimConfig, SimError, SimOutput};
use crate::simnet::LinkConfig;
use crate::workload::{
    derive_seed, generate_frame, teacher_label, DriftConfig, ParamVector, StudentLayout,
    TeacherOracle,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("config: {0}")]
    Parse(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    fn config(field: &str, message: impl Into<String>) -> Self {
        HarnessError::Config { field: field.into(), message: message.into() }
    }

    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Parse(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Every knob of an experiment. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of a single run.
    pub seed: u64,
    /// Seeds of multi-seed commands (comparisons and sweeps).
    pub seeds: Vec<u64>,
    /// Simulated seconds.
    pub duration: f64,
    pub policy: Policy,
    /// Number of edge clients sharing the GPU.
    pub sessions: usize,
    /// How many of the sessions (the first ones) watch a drift-free stream.
    pub stationary_sessions: usize,
    pub workload: DriftConfig,
    pub student: StudentConfig,
    pub training: TrainingConfig,
    pub asr: AsrConfig,
    pub atr: AtrConfig,
    pub jit: JitConfig,
    pub one_time: OneTimeConfig,
    pub gpu: GpuCostModel,
    pub uplink: LinkConfig,
    pub downlink: LinkConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            duration: 600.0,
            policy: Policy::Ams,
            sessions: 1,
            stationary_sessions: 0,
            workload: DriftConfig::default(),
            student: StudentConfig::default(),
            training: TrainingConfig::default(),
            asr: AsrConfig::default(),
            atr: AtrConfig::default(),
            jit: JitConfig::default(),
            one_time: OneTimeConfig::default(),
            gpu: GpuCostModel::default(),
            uplink: LinkConfig::default(),
            downlink: LinkConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn nonnegative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(HarnessError::config(field, format!("must be nonnegative and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layout(&self) -> StudentLayout {
        StudentLayout::new(self.workload.dim, self.student.hidden, self.workload.classes)
    }

    pub fn validate(&self) -> Result<()> {
        positive("duration", self.duration)?;
        if self.sessions == 0 {
            return Err(HarnessError::config("sessions", "must be at least 1"));
        }
        if self.stationary_sessions > self.sessions {
            return Err(HarnessError::config("stationary_sessions", "exceeds sessions"));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "must not be empty"));
        }
        self.workload
            .validate()
            .map_err(|e| HarnessError::config("workload", e.to_string()))?;
        if self.student.hidden == 0 {
            return Err(HarnessError::config("student.hidden", "must be at least 1"));
        }
        let t = &self.training;
        if !(t.fraction > 0.0 && t.fraction <= 1.0) {
            return Err(HarnessError::config("training.fraction", "must be in (0, 1]"));
        }
        if t.batch_size == 0 {
            return Err(HarnessError::config("training.batch_size", "must be at least 1"));
        }
        positive("training.horizon", t.horizon)?;
        validate_adam(&t.adam)?;
        let a = &self.asr;
        positive("asr.r_min", a.r_min)?;
        if a.r_max < a.r_min {
            return Err(HarnessError::config("asr.r_max", "must be at least asr.r_min"));
        }
        nonnegative("asr.eta", a.eta)?;
        positive("asr.window", a.window)?;
        let r = &self.atr;
        if r.gamma1 < r.gamma0 {
            return Err(HarnessError::config("atr.gamma1", "must be at least atr.gamma0"));
        }
        positive("atr.tau_min", r.tau_min)?;
        nonnegative("atr.delta", r.delta)?;
        let j = &self.jit;
        if !(0.0..=1.0).contains(&j.threshold) {
            return Err(HarnessError::config("jit.threshold", "must be in [0, 1]"));
        }
        if j.min_stride == 0 || j.max_stride < j.min_stride {
            return Err(HarnessError::config("jit.min_stride", "need 1 <= min_stride <= max_stride"));
        }
        positive("one_time.window", self.one_time.window)?;
        nonnegative("gpu.teacher_cost", self.gpu.teacher_cost)?;
        nonnegative("gpu.train_cost", self.gpu.train_cost)?;
        positive("uplink.bandwidth", self.uplink.bandwidth)?;
        nonnegative("uplink.latency", self.uplink.latency)?;
        positive("downlink.bandwidth", self.downlink.bandwidth)?;
        nonnegative("downlink.latency", self.downlink.latency)?;
        Ok(())
    }
}

fn validate_adam(a: &AdamConfig) -> Result<()> {
    positive("training.adam.lr", a.lr)?;
    for (field, b) in [("training.adam.beta1", a.beta1), ("training.adam.beta2", a.beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(HarnessError::config(field, "must be in [0, 1)"));
        }
    }
    positive("training.adam.eps", a.eps)
}

// ---------------------------------------------------------------------------
// Pretraining

pub const PRETRAIN_SEED: u64 = 0xB007_5EED;
pub const PRETRAIN_ITERATIONS: usize = 2000;
pub const PRETRAIN_SECONDS: u64 = 600;
pub const PRETRAIN_BATCH: usize = 8;

/// The reference stream used for pretraining: the same family with the
/// concept drift (rotation and scene jumps) removed. The camera still pans so
/// the reference covers varied layouts.
pub fn reference_workload(drift: &DriftConfig) -> DriftConfig {
    DriftConfig { rotation_rate: 0.0, jumps: Vec::new(), ..drift.clone() }
}

/// Offline bootstrap training: [`PRETRAIN_ITERATIONS`] full-model Adam steps
/// on one teacher-labeled frame per second of the reference stream.
pub fn pretrain(layout: &StudentLayout, drift: &DriftConfig) -> ParamVector {
    let reference = reference_workload(drift);
    let mut buffer = SampleBuffer::new(f64::INFINITY);
    let step = reference.fps.round().max(1.0) as u64;
    for k in (0..PRETRAIN_SECONDS * step).step_by(step as usize) {
        let frame = generate_frame(k, &reference, PRETRAIN_SEED).expect("valid reference config");
        let oracle = TeacherOracle::at_frame(&reference, PRETRAIN_SEED, k).expect("valid config");
        let labels = teacher_label(&frame, &oracle).expect("matching dims");
        buffer.push(Sample { frame, labels });
    }
    let mut params = layout.init_params(PRETRAIN_SEED);
    let mut adam = AdamState::new(params.len(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(PRETRAIN_SEED);
    run_training_phase(
        layout,
        &mut params,
        &mut adam,
        &buffer,
        &CoordinateMask::full(layout.num_params()),
        None,
        PRETRAIN_ITERATIONS,
        PRETRAIN_BATCH,
        &mut rng,
    )
    .expect("pretraining on a valid reference stream");
    params
}

/// A checked-in pretrained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layout: StudentLayout,
    pub workload: DriftConfig,
    pub params: ParamVector,
}

const CHECKPOINTS: &str = include_str!("../fixtures/pretrained.json");

pub fn checkpoints() -> Vec<Checkpoint> {
    serde_json::from_str(CHECKPOINTS).expect("pretrained fixture parses")
}

/// Pretrained parameters for `layout` on `drift`'s family: the fixture when
/// it matches, otherwise trained on the spot.
pub fn pretrained(layout: &StudentLayout, drift: &DriftConfig) -> ParamVector {
    let reference = reference_workload(drift);
    checkpoints()
        .into_iter()
        .find(|c| c.layout == *layout && reference_workload(&c.workload) == reference)
        .map(|c| c.params)
        .unwrap_or_else(|| pretrain(layout, drift))
}

/// Regenerates the fixture contents.
pub fn build_checkpoints() -> Vec<Checkpoint> {
    let workload = DriftConfig::default();
    [16, 8]
        .into_iter()
        .map(|hidden| {
            let layout = StudentLayout::new(workload.dim, hidden, workload.classes);
            Checkpoint { layout, params: pretrain(&layout, &workload), workload: reference_workload(&workload) }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Running

/// Stream seed of session `index` of run `seed`.
pub fn stream_seed(seed: u64, index: usize) -> u64 {
    derive_seed(&[seed, index as u64, 0x57])
}

pub fn sim_config(cfg: &ExperimentConfig, seed: u64) -> SimConfig {
    let layout = cfg.layout();
    let initial = pretrained(&layout, &cfg.workload);
    let clients = (0..cfg.sessions)
        .map(|i| {
            let drift = if i < cfg.stationary_sessions {
                cfg.workload.stationary()
            } else {
                cfg.workload.clone()
            };
            ClientSpec {
                session: SessionConfig {
                    id: i as u32,
                    policy: cfg.policy,
                    layout,
                    drift,
                    stream_seed: stream_seed(seed, i),
                    training: cfg.training,
                    asr: cfg.asr,
                    atr: cfg.atr,
                    jit: cfg.jit,
                    one_time: cfg.one_time,
                    rng_seed: derive_seed(&[seed, i as u64, 0x7A]),
                },
                initial: initial.clone(),
                uplink: cfg.uplink,
                downlink: cfg.downlink,
                outage: None,
            }
        })
        .collect();
    SimConfig { duration: cfg.duration, cost: cfg.gpu, clients, trace_params: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAggregate {
    pub session: u32,
    pub policy: Policy,
    pub frames: usize,
    pub mean_miou: f64,
    pub uplink_kbps: f64,
    pub downlink_kbps: f64,
    pub deltas: u32,
    pub gpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub mean_miou: f64,
    pub uplink_kbps: f64,
    pub downlink_kbps: f64,
    pub deltas: u32,
    pub gpu_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub duration: f64,
    pub overall: Aggregate,
    pub sessions: Vec<SessionAggregate>,
}

/// Per-frame rows plus aggregates. Row values are stored as emitted
/// (six significant digits) so aggregates can be recomputed from the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub rows: Vec<FrameRow>,
    pub summary: Summary,
}

/// Rounds to six significant digits, as printed by [`fmt_g6`].
pub fn round6(x: f64) -> f64 {
    fmt_g6(x).parse().expect("formatted float parses")
}

/// `%.6g`-style formatting: six significant digits, trailing zeros dropped.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let s = format!("{x:.*}", (5 - exp) as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

pub fn mean_miou(rows: &[FrameRow]) -> f64 {
    if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.miou).sum::<f64>() / rows.len() as f64
    }
}

fn kbps(bytes: u64, duration: f64) -> f64 {
    bytes as f64 * 8.0 / duration / 1000.0
}

pub fn record_from(out: SimOutput, seed: u64, duration: f64) -> MetricsRecord {
    let rows: Vec<FrameRow> = out
        .rows
        .into_iter()
        .map(|r| FrameRow {
            time: round6(r.time),
            miou: round6(r.miou),
            rate: round6(r.rate),
            t_update: round6(r.t_update),
            ..r
        })
        .collect();
    let sessions: Vec<SessionAggregate> = out
        .totals
        .iter()
        .map(|t| {
            let own: Vec<FrameRow> = rows.iter().filter(|r| r.session == t.session).cloned().collect();
            SessionAggregate {
                session: t.session,
                policy: t.policy,
                frames: own.len(),
                mean_miou: mean_miou(&own),
                uplink_kbps: kbps(t.uplink_bytes, duration),
                downlink_kbps: kbps(t.downlink_bytes, duration),
                deltas: t.deltas_sent,
                gpu_seconds: t.gpu_seconds,
            }
        })
        .collect();
    let overall = Aggregate {
        frames: rows.len(),
        mean_miou: mean_miou(&rows),
        uplink_kbps: kbps(out.totals.iter().map(|t| t.uplink_bytes).sum(), duration),
        downlink_kbps: kbps(out.totals.iter().map(|t| t.downlink_bytes).sum(), duration),
        deltas: out.totals.iter().map(|t| t.deltas_sent).sum(),
        gpu_seconds: out.totals.iter().map(|t| t.gpu_seconds).sum(),
    };
    MetricsRecord { rows, summary: Summary { seed, duration, overall, sessions } }
}

/// One seeded simulation of `cfg`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsRecord> {
    cfg.validate()?;
    let out = sim::run(&sim_config(cfg, seed))?;
    Ok(record_from(out, seed, cfg.duration))
}

/// The run selected by `cfg.seed`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    run_seed(cfg, cfg.seed)
}

pub const CSV_HEADER: &str = "time,frame_id,session,policy,miou,sampled,rate,t_update,mode";

pub fn metrics_csv(rows: &[FrameRow]) -> String {
    let mut s = String::with_capacity(64 * rows.len() + CSV_HEADER.len() + 1);
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            fmt_g6(r.time),
            r.frame_id,
            r.session,
            r.policy.name(),
            fmt_g6(r.miou),
            u8::from(r.sampled),
            fmt_g6(r.rate),
            fmt_g6(r.t_update),
            r.mode.name()
        )
        .expect("writing to a String");
    }
    s
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(record: &MetricsRecord, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| HarnessError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, metrics_csv(&record.rows)).map_err(io(&csv))?;
    let json = dir.join("summary.json");
    std::fs::write(&json, summary_json(&record.summary)).map_err(io(&json))?;
    Ok((csv, json))
}

// ---------------------------------------------------------------------------
// Comparisons and sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub fraction: f64,
    /// Mean mIoU of each seed, in `cfg.seeds` order.
    pub per_seed: Vec<f64>,
    pub mean_miou: f64,
    /// `mean_miou` minus the mean mIoU of full-model training (γ = 1).
    pub delta: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn per_seed(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    cfg.seeds
        .iter()
        .map(|&s| run_seed(cfg, s).map(|r| r.summary.overall.mean_miou))
        .collect()
}

/// AMS with each (strategy, fraction), compared with γ = 1 on the same seeds.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    fractions: &[f64],
) -> Result<Vec<StrategyRow>> {
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(HarnessError::config("fractions", format!("{f} not in (0, 1]")));
        }
    }
    let with = |strategy: Strategy, fraction: f64| ExperimentConfig {
        policy: Policy::Ams,
        training: TrainingConfig { strategy, fraction, ..cfg.training },
        ..cfg.clone()
    };
    let full = mean(&per_seed(&with(Strategy::GradientGuided, 1.0))?);
    let mut rows = Vec::new();
    for &strategy in strategies {
        for &fraction in fractions {
            let runs = if fraction == 1.0 {
                // every strategy selects every coordinate
                per_seed(&with(Strategy::GradientGuided, 1.0))?
            } else {
                per_seed(&with(strategy, fraction))?
            };
            let m = mean(&runs);
            rows.push(StrategyRow { strategy, fraction, per_seed: runs, mean_miou: m, delta: m - full });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    THorizon,
    TUpdate,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "t_horizon" | "horizon" => Ok(SweepAxis::THorizon),
            "t_update" | "update" => Ok(SweepAxis::TUpdate),
            _ => Err(format!("unknown sweep axis '{s}' (t_horizon or t_update)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub per_seed: Vec<f64>,
    pub mean_miou: f64,
    pub downlink_kbps: f64,
}

/// Applies one sweep value. A fixed update interval disables ATR growth.
pub fn with_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::THorizon => c.training.horizon = value,
        SweepAxis::TUpdate => {
            c.atr.tau_min = value;
            c.atr.enabled = false;
        }
    }
    c
}

/// One point per value, each averaged over `cfg.seeds`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(HarnessError::config("values", "must not be empty"));
    }
    values
        .iter()
        .map(|&value| {
            let c = with_axis(cfg, axis, value);
            c.validate()?;
            let mut runs = Vec::new();
            let mut kbps = Vec::new();
            for &s in &cfg.seeds {
                let r = run_seed(&c, s)?;
                runs.push(r.summary.overall.mean_miou);
                kbps.push(r.summary.overall.downlink_kbps);
            }
            Ok(SweepPoint { value, mean_miou: mean(&runs), downlink_kbps: mean(&kbps), per_seed: runs })
        })
        .collect()
}
