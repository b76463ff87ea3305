//! Label-change score, adaptive sampling rate (ASR) and adaptive training
//! rate (ATR) controllers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::workload::{miou, present_classes, LabelGrid};

/// `1 − mIoU` between consecutive teacher labelings, over the classes present
/// in either grid.
pub fn phi_score(current: &LabelGrid, previous: &LabelGrid) -> f64 {
    let classes = present_classes(current, previous);
    1.0 - miou(current, previous, &classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    /// Frames per second.
    pub r_min: f64,
    pub r_max: f64,
    pub phi_target: f64,
    /// Rate step per unit of score error.
    pub eta: f64,
    /// Averaging window for the score and controller period, seconds.
    pub window: f64,
    /// Starting rate; `r_max` when unset.
    pub initial: Option<f64>,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self { r_min: 0.1, r_max: 1.0, phi_target: 0.15, eta: 1.0, window: 10.0, initial: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrState {
    pub config: AsrConfig,
    pub rate: f64,
}

impl AsrState {
    /// Starts at `initial`, or `r_max` by default.
    pub fn new(config: AsrConfig) -> Self {
        let rate = config.initial.map_or(config.r_max, |r| r.clamp(config.r_min, config.r_max));
        Self { rate, config }
    }

    /// `r ← clamp(r + η·(φ̄ − φ_target), r_min, r_max)`.
    pub fn update(&mut self, phi_mean: f64) -> f64 {
        let c = &self.config;
        self.rate = (self.rate + c.eta * (phi_mean - c.phi_target)).clamp(c.r_min, c.r_max);
        self.rate
    }
}

/// Running φ over consecutively received samples with a time window.
#[derive(Debug, Clone)]
pub struct PhiTracker {
    window: f64,
    previous: Option<LabelGrid>,
    scores: VecDeque<(f64, f64)>,
}

impl PhiTracker {
    pub fn new(window: f64) -> Self {
        Self { window, previous: None, scores: VecDeque::new() }
    }

    /// Scores `labels` against the previously observed sample.
    pub fn observe(&mut self, timestamp: f64, labels: &LabelGrid) -> Option<f64> {
        let phi = self.previous.as_ref().map(|prev| phi_score(labels, prev));
        self.previous = Some(labels.clone());
        if let Some(p) = phi {
            self.scores.push_back((timestamp, p));
            let cutoff = timestamp - self.window;
            while self.scores.front().is_some_and(|&(t, _)| t < cutoff) {
                self.scores.pop_front();
            }
        }
        phi
    }

    /// Mean score over the window ending at the newest observation.
    pub fn mean(&self) -> Option<f64> {
        if self.scores.is_empty() {
            None
        } else {
            Some(self.scores.iter().map(|&(_, p)| p).sum::<f64>() / self.scores.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtrMode {
    Normal,
    Slowdown,
}

impl AtrMode {
    pub fn name(self) -> &'static str {
        match self {
            AtrMode::Normal => "normal",
            AtrMode::Slowdown => "slowdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtrConfig {
    pub enabled: bool,
    /// Enter slowdown below this sampling rate (fps).
    pub gamma0: f64,
    /// Leave slowdown above this sampling rate (fps).
    pub gamma1: f64,
    /// Interval increment in slowdown, seconds.
    pub delta: f64,
    /// Base update interval, seconds.
    pub tau_min: f64,
}

impl Default for AtrConfig {
    fn default() -> Self {
        Self { enabled: true, gamma0: 0.25, gamma1: 0.35, delta: 2.0, tau_min: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtrState {
    pub config: AtrConfig,
    pub mode: AtrMode,
    pub t_update: f64,
}

impl AtrState {
    pub fn new(config: AtrConfig) -> Self {
        Self { mode: AtrMode::Normal, t_update: config.tau_min, config }
    }

    /// Hysteresis transition on the current sampling rate, then grow the
    /// interval by `Δ` in slowdown or snap back to `τ_min`.
    pub fn update(&mut self, rate: f64) -> f64 {
        let c = &self.config;
        if !c.enabled {
            self.t_update = c.tau_min;
            return self.t_update;
        }
        self.mode = match self.mode {
            AtrMode::Normal if rate < c.gamma0 => AtrMode::Slowdown,
            AtrMode::Slowdown if rate > c.gamma1 => AtrMode::Normal,
            m => m,
        };
        self.t_update = match self.mode {
            AtrMode::Slowdown => self.t_update + c.delta,
            AtrMode::Normal => c.tau_min,
        };
        self.t_update
    }
}
