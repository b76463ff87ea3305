//! Masked-Adam coordinate descent.
//!
//! Each training phase fixes a coordinate mask up front, then runs `K` Adam
//! iterations in which the moments and the candidate update are computed for
//! every parameter but only the masked coordinates are written back. The last
//! full update vector of a phase drives the next phase's gradient-guided mask.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::SampleBuffer;
use crate::workload::{student_eval, ParamVector, StudentLayout, WorkloadError};

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("coordinate fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite gradient at index {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Model(#[from] WorkloadError),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments and the global step count. The step count is never reset
/// between phases.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Sorted set of parameter indices updated during one phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinateMask {
    total: usize,
    indices: Vec<usize>,
}

impl CoordinateMask {
    /// Builds a mask from arbitrary indices; duplicates are merged.
    pub fn from_indices(total: usize, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        assert!(indices.last().is_none_or(|&i| i < total), "mask index out of range");
        Self { total, indices }
    }

    pub fn full(total: usize) -> Self {
        Self { total, indices: (0..total).collect() }
    }

    pub fn empty(total: usize) -> Self {
        Self { total, indices: Vec::new() }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Dense 0/1 vector `b_n`.
    pub fn to_bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.total];
        for &i in &self.indices {
            bits[i] = true;
        }
        bits
    }
}

/// Last full-model Adam update of a phase, including masked-out coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    GradientGuided,
    Random,
    First,
    Last,
    FirstLast,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::GradientGuided,
        Strategy::Random,
        Strategy::First,
        Strategy::Last,
        Strategy::FirstLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::GradientGuided => "gradient-guided",
            Strategy::Random => "random",
            Strategy::First => "first",
            Strategy::Last => "last",
            Strategy::FirstLast => "first-last",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

/// `⌈γ·P⌉`.
pub fn mask_size(fraction: f64, total: usize) -> usize {
    // guard against 0.05 * 200 = 10.000000000000002
    let raw = fraction * total as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).min(total)
}

/// Picks the coordinates to train this phase.
///
/// Gradient-guided takes the largest `|u_{n-1}|` (ties to the lower index) and
/// falls back to a uniform random draw when there is no previous update.
/// First/last follow the flat layer order of `layout`.
pub fn select_coordinates<R: Rng + ?Sized>(
    strategy: Strategy,
    prev_update: Option<&UpdateVector>,
    fraction: f64,
    layout: &StudentLayout,
    rng: &mut R,
) -> Result<CoordinateMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(OptimizerError::BadFraction(fraction));
    }
    let total = layout.num_params();
    let n = mask_size(fraction, total);
    let indices: Vec<usize> = match strategy {
        Strategy::GradientGuided => match prev_update {
            Some(u) => {
                if u.0.len() != total {
                    return Err(OptimizerError::LengthMismatch { expected: total, found: u.0.len() });
                }
                top_magnitude(&u.0, n)
            }
            None => rand::seq::index::sample(rng, total, n).into_vec(),
        },
        Strategy::Random => rand::seq::index::sample(rng, total, n).into_vec(),
        Strategy::First => (0..n).collect(),
        Strategy::Last => (total - n..total).collect(),
        Strategy::FirstLast => {
            let head = n.div_ceil(2);
            (0..head).chain(total - (n - head)..total).collect()
        }
    };
    Ok(CoordinateMask::from_indices(total, indices))
}

fn top_magnitude(u: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[b].abs().total_cmp(&u[a].abs()).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// One Adam iteration with the update applied only on `mask`.
///
/// Moments advance on every coordinate. The full update vector is written to
/// `update`. The bias-corrected step uses `ε` inside the square root:
/// `u = α · √(1-β2^i)/(1-β1^i) · m / √(v + ε)`.
pub fn masked_adam_step(
    params: &mut ParamVector,
    state: &mut AdamState,
    grad: &ParamVector,
    mask: &CoordinateMask,
    update: &mut UpdateVector,
) -> Result<()> {
    let len = params.len();
    for found in [grad.len(), state.m.len(), state.v.len(), mask.total()] {
        if found != len {
            return Err(OptimizerError::LengthMismatch { expected: len, found });
        }
    }
    if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
        return Err(OptimizerError::NonFiniteGradient(i));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let i = state.step as i32;
    let step_size = lr * (1.0 - beta2.powi(i)).sqrt() / (1.0 - beta1.powi(i));

    update.0.resize(len, 0.0);
    for j in 0..len {
        let g = grad.0[j];
        state.m[j] = beta1 * state.m[j] + (1.0 - beta1) * g;
        state.v[j] = beta2 * state.v[j] + (1.0 - beta2) * g * g;
        update.0[j] = step_size * state.m[j] / (state.v[j] + eps).sqrt();
    }
    let w = params.as_mut_slice();
    for &j in mask.indices() {
        w[j] -= update.0[j];
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOutcome {
    /// Buffer was empty; nothing changed.
    Skipped,
    Trained {
        /// `u_n`: the last full update vector of the phase (the prior one when `K = 0`).
        update: Option<UpdateVector>,
        /// Mean mini-batch loss over the phase's iterations.
        mean_loss: f64,
        iterations: usize,
    },
}

/// Runs `iterations` masked-Adam steps on mini-batches drawn uniformly (with
/// replacement) from the buffer's horizon window.
#[allow(clippy::too_many_arguments)]
pub fn run_training_phase<R: Rng + ?Sized>(
    layout: &StudentLayout,
    params: &mut ParamVector,
    state: &mut AdamState,
    buffer: &SampleBuffer,
    mask: &CoordinateMask,
    prev_update: Option<&UpdateVector>,
    iterations: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<PhaseOutcome> {
    let window = buffer.window();
    if window.is_empty() {
        return Ok(PhaseOutcome::Skipped);
    }
    let mut update = prev_update.cloned();
    let mut loss_sum = 0.0;
    let mut scratch = UpdateVector(vec![0.0; params.len()]);
    for _ in 0..iterations {
        let batch: Vec<_> = (0..batch_size.max(1))
            .map(|_| {
                let s = &window[rng.random_range(0..window.len())];
                (&s.frame, &s.labels)
            })
            .collect();
        let eval = student_eval(layout, params, &batch)?;
        loss_sum += eval.loss;
        masked_adam_step(params, state, &eval.grad, mask, &mut scratch)?;
        update = Some(scratch.clone());
    }
    let mean_loss = if iterations == 0 { f64::NAN } else { loss_sum / iterations as f64 };
    Ok(PhaseOutcome::Trained { update, mean_loss, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout_2x4() -> StudentLayout {
        // P = 1*2 + 2 + 2*4 + 4 = 16 with spans [0..2) [2..4) [4..12) [12..16)
        StudentLayout::new(1, 2, 4)
    }

    #[test]
    fn gradient_guided_picks_largest_magnitude() {
        let layout = StudentLayout::new(1, 1, 1); // P = 4
        assert_eq!(layout.num_params(), 4);
        let u = UpdateVector(vec![0.3, -0.5, 0.1, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = select_coordinates(Strategy::GradientGuided, Some(&u), 0.5, &layout, &mut rng)
            .unwrap();
        assert_eq!(m.indices(), &[0, 1]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let layout = StudentLayout::new(1, 1, 1);
        let u = UpdateVector(vec![0.1, 0.2, 0.2, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = select_coordinates(Strategy::GradientGuided, Some(&u), 0.5, &layout, &mut rng)
            .unwrap();
        assert_eq!(m.indices(), &[1, 2]);
    }

    #[test]
    fn full_fraction_selects_everything() {
        let layout = layout_2x4();
        let u = UpdateVector(vec![1.0; 16]);
        for s in Strategy::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let m = select_coordinates(s, Some(&u), 1.0, &layout, &mut rng).unwrap();
            assert_eq!(m, CoordinateMask::full(16), "{s:?}");
        }
    }

    #[test]
    fn first_and_last_follow_layer_order() {
        let layout = StudentLayout::new(2, 4, 2); // P = 8 + 4 + 8 + 2 = 22
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = select_coordinates(Strategy::First, None, 8.0 / 22.0, &layout, &mut rng).unwrap();
        assert_eq!(first.indices(), &(0..8).collect::<Vec<_>>()[..]);
        let last = select_coordinates(Strategy::Last, None, 0.1, &layout, &mut rng).unwrap();
        assert_eq!(last.indices(), &[19, 20, 21]);
        let both = select_coordinates(Strategy::FirstLast, None, 0.2, &layout, &mut rng).unwrap();
        // ceil(4.4) = 5 -> 3 from the front, 2 from the back
        assert_eq!(both.indices(), &[0, 1, 2, 20, 21]);
    }

    #[test]
    fn first_selects_first_layer_at_half() {
        // layers [0..8) and [8..16) when viewed as weight + rest
        let layout = StudentLayout::new(1, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = select_coordinates(Strategy::First, None, 0.5, &layout, &mut rng).unwrap();
        assert_eq!(m.indices(), &(0..8).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn random_mask_size_and_determinism() {
        let layout = StudentLayout::new(8, 16, 4);
        let p = layout.num_params();
        let a = select_coordinates(
            Strategy::GradientGuided,
            None,
            0.05,
            &layout,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = select_coordinates(Strategy::Random, None, 0.05, &layout, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a.count(), (0.05 * p as f64).ceil() as usize);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_fraction_rejected() {
        let layout = layout_2x4();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                select_coordinates(Strategy::Random, None, f, &layout, &mut rng),
                Err(OptimizerError::BadFraction(_))
            ));
        }
    }

    #[test]
    fn mask_size_rounding() {
        assert_eq!(mask_size(0.05, 200), 10);
        assert_eq!(mask_size(0.05, 212), 11);
        assert_eq!(mask_size(1e-9, 10), 1);
        assert_eq!(mask_size(0.05, 2_000_000), 100_000);
    }

    #[test]
    fn zero_gradient_fresh_state() {
        let mut w = ParamVector(vec![1.0, 2.0]);
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut u = UpdateVector(vec![]);
        masked_adam_step(&mut w, &mut st, &ParamVector::zeros(2), &CoordinateMask::full(2), &mut u)
            .unwrap();
        assert_eq!(w.0, vec![1.0, 2.0]);
        assert_eq!(u.0, vec![0.0, 0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn scalar_hand_evaluation() {
        // m = 0.1 * 0.5 = 0.05, v = 0.001 * 0.25 = 2.5e-4
        // u = 1e-3 * sqrt(0.001) / 0.1 * 0.05 / sqrt(2.5e-4 + 1e-8)
        let expect_u = 1e-3 * (0.001f64).sqrt() / 0.1 * 0.05 / (2.5e-4f64 + 1e-8).sqrt();
        assert!((expect_u - 1.0e-3).abs() < 1e-7);
        for masked_in in [true, false] {
            let mut w = ParamVector(vec![1.0]);
            let mut st = AdamState::new(1, AdamConfig::default());
            let mut u = UpdateVector(vec![]);
            let mask = if masked_in { CoordinateMask::full(1) } else { CoordinateMask::empty(1) };
            masked_adam_step(&mut w, &mut st, &ParamVector(vec![0.5]), &mask, &mut u).unwrap();
            assert!((st.m[0] - 0.05).abs() < 1e-15);
            assert!((st.v[0] - 2.5e-4).abs() < 1e-18);
            assert!((u.0[0] - expect_u).abs() < 1e-18);
            if masked_in {
                assert!((w.0[0] - (1.0 - expect_u)).abs() < 1e-15);
                assert!((w.0[0] - 0.999).abs() < 1e-6);
            } else {
                assert_eq!(w.0[0], 1.0);
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut w = ParamVector(vec![1.0, 2.0]);
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut u = UpdateVector(vec![]);
        let g = ParamVector(vec![0.0, f64::INFINITY]);
        assert_eq!(
            masked_adam_step(&mut w, &mut st, &g, &CoordinateMask::full(2), &mut u),
            Err(OptimizerError::NonFiniteGradient(1))
        );
    }
}
