//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ams::optimizer::AdamConfig;
use ams::workload::{
    generate_frame, student_eval, teacher_label, DriftConfig, Frame, LabelGrid, ParamVector,
    StudentLayout, TeacherOracle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam over the full parameter vector, written out independently
/// of the library.
pub struct ReferenceAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl ReferenceAdam {
    pub fn new(len: usize, c: AdamConfig) -> Self {
        Self { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            w[i] -= self.lr * bc2.sqrt() / bc1 * self.m[i] / (self.v[i] + self.eps).sqrt();
        }
    }
}

pub fn labeled_frames(cfg: &DriftConfig, seed: u64, ids: &[u64]) -> Vec<(Frame, LabelGrid)> {
    ids.iter()
        .map(|&k| {
            let f = generate_frame(k, cfg, seed).unwrap();
            let o = TeacherOracle::at_frame(cfg, seed, k).unwrap();
            let l = teacher_label(&f, &o).unwrap();
            (f, l)
        })
        .collect()
}

pub fn random_params(layout: &StudentLayout, rng: &mut ChaCha8Rng, scale: f64) -> ParamVector {
    ParamVector((0..layout.num_params()).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect())
}

/// Central finite-difference gradient of the mean cross-entropy.
pub fn numeric_grad(layout: &StudentLayout, params: &ParamVector, batch: &[(&Frame, &LabelGrid)], h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let x = p.0[i];
            p.0[i] = x + h;
            let up = student_eval(layout, &p, batch).unwrap().loss;
            p.0[i] = x - h;
            let down = student_eval(layout, &p, batch).unwrap().loss;
            p.0[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Elementwise relative error with an absolute floor for near-zero entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst finite-difference mismatch over `draws` random (params, 2-frame batch) pairs.
pub fn gradient_check(draws: usize, seed: u64) -> f64 {
    let layout = StudentLayout::new(8, 16, 4);
    let cfg = DriftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let params = random_params(&layout, &mut rng, 1.0);
        let ids = [rng.random_range(0..18_000u64), rng.random_range(0..18_000u64)];
        let data = labeled_frames(&cfg, rng.random(), &ids);
        let batch: Vec<_> = data.iter().map(|(f, l)| (f, l)).collect();
        let analytic = student_eval(&layout, &params, &batch).unwrap().grad;
        let numeric = numeric_grad(&layout, &params, &batch, 1e-5);
        worst = worst.max(max_rel_err(&analytic.0, &numeric, 1e-6));
    }
    worst
}

/// Runs the library trainer one iteration at a time with a full mask next to
/// [`ReferenceAdam`] fed the same mini-batches, and returns the worst relative
/// parameter deviation over all steps.
pub fn adam_fidelity(steps: usize, seed: u64) -> f64 {
    use ams::buffer::{Sample, SampleBuffer};
    use ams::optimizer::{run_training_phase, AdamState, CoordinateMask};

    let layout = StudentLayout::new(8, 16, 4);
    let cfg = DriftConfig::default();
    let mut buffer = SampleBuffer::new(f64::INFINITY);
    for (frame, labels) in labeled_frames(&cfg, seed, &(0..20).map(|k| k * 30).collect::<Vec<_>>()) {
        buffer.push(Sample { frame, labels });
    }
    let window = buffer.window();
    let mut params = layout.init_params(seed);
    let mut reference = params.0.clone();
    let config = AdamConfig::default();
    let mut state = AdamState::new(params.len(), config);
    let mut oracle = ReferenceAdam::new(params.len(), config);
    let mask = CoordinateMask::full(params.len());
    let mut trainer_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    let batch_size = 8;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        // same draws as the trainer: batch_size uniform indices into the window
        let batch: Vec<_> = (0..batch_size)
            .map(|_| {
                let s = &window[batch_rng.random_range(0..window.len())];
                (&s.frame, &s.labels)
            })
            .collect();
        let g = student_eval(&layout, &ParamVector(reference.clone()), &batch).unwrap().grad;
        oracle.step(&mut reference, &g.0);
        run_training_phase(&layout, &mut params, &mut state, &buffer, &mask, None, 1, batch_size, &mut trainer_rng)
            .unwrap();
        worst = worst.max(max_rel_err(&params.0, &reference, 1e-300));
    }
    worst
}
