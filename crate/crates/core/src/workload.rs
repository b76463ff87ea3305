//! Synthetic drifting "video" stream, the oracle teacher, the per-cell student
//! network and the mIoU metric.
//!
//! Every frame is a pure function of `(seed, frame_id, DriftConfig)`: random
//! draws come from a counter-based hash, so frames can be generated in any
//! order and on any thread.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid drift config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, WorkloadError>;

/// Knobs of the synthetic stream generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    /// Feature dimension per cell.
    pub dim: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub classes: usize,
    /// Native frame rate of the stream.
    pub fps: f64,
    /// Angular velocity of the prototype rotation, radians per frame.
    pub rotation_rate: f64,
    /// Horizontal camera pan, grid cells per frame.
    pub pan_rate: f64,
    /// Frame indices at which a scene change re-draws prototypes and layout.
    pub jumps: Vec<u64>,
    /// Seed of the prototype family shared by all streams.
    pub family_seed: u64,
    /// Radius of the class prototypes inside the rotation plane.
    pub plane_radius: f64,
    /// Spread of the family prototypes outside the rotation plane.
    pub spread: f64,
    /// Per-stream (and per-scene) prototype perturbation.
    pub perturbation: f64,
    /// Static per-location texture noise.
    pub texture_noise: f64,
    /// Per-frame sensor noise.
    pub sensor_noise: f64,
    /// Size of class regions in the layout, in cells.
    pub region_scale: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            grid_width: 8,
            grid_height: 8,
            classes: 4,
            fps: 30.0,
            rotation_rate: 0.0001,
            pan_rate: 0.004,
            jumps: Vec::new(),
            family_seed: 0x5EED_F00D,
            plane_radius: 1.6,
            spread: 0.9,
            perturbation: 0.5,
            texture_noise: 0.45,
            sensor_noise: 0.2,
            region_scale: 5.0,
        }
    }
}

impl DriftConfig {
    /// A drift-free variant of this config: no rotation, pan or jumps.
    pub fn stationary(&self) -> Self {
        Self {
            rotation_rate: 0.0,
            pan_rate: 0.0,
            jumps: Vec::new(),
            ..self.clone()
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_width * self.grid_height
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(WorkloadError::InvalidConfig("dim must be positive".into()));
        }
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(WorkloadError::InvalidConfig("grid must have at least one cell".into()));
        }
        if self.classes == 0 || self.classes > 256 {
            return Err(WorkloadError::InvalidConfig("classes must be in 1..=256".into()));
        }
        if self.dim < 2 && self.rotation_rate != 0.0 {
            return Err(WorkloadError::InvalidConfig(
                "rotation needs at least two feature dimensions".into(),
            ));
        }
        if !(self.fps > 0.0) {
            return Err(WorkloadError::InvalidConfig("fps must be positive".into()));
        }
        if !(self.region_scale > 0.0) {
            return Err(WorkloadError::InvalidConfig("region_scale must be positive".into()));
        }
        for (name, v) in [
            ("rotation_rate", self.rotation_rate),
            ("pan_rate", self.pan_rate),
            ("plane_radius", self.plane_radius),
            ("spread", self.spread),
            ("perturbation", self.perturbation),
            ("texture_noise", self.texture_noise),
            ("sensor_noise", self.sensor_noise),
        ] {
            if !v.is_finite() {
                return Err(WorkloadError::InvalidConfig(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn timestamp(&self, frame_id: u64) -> f64 {
        frame_id as f64 / self.fps
    }

    /// Frame index whose timestamp is closest to `t`.
    pub fn frame_at(&self, t: f64) -> u64 {
        (t * self.fps).round().max(0.0) as u64
    }

    /// Number of scene changes at or before `frame_id`.
    pub fn epoch(&self, frame_id: u64) -> u64 {
        self.jumps.iter().filter(|&&j| j <= frame_id).count() as u64
    }
}

// Counter-based hashing (SplitMix64 finalizer) so that draws are addressable.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| mix(acc ^ p))
}

/// Deterministic seed derivation from a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    hash(parts)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn gaussian(parts: &[u64]) -> f64 {
    let h = hash(parts);
    let u1 = 1.0 - unit(h);
    let u2 = unit(mix(h));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const TAG_BASE: u64 = 1;
const TAG_PERTURB: u64 = 2;
const TAG_LAYOUT: u64 = 3;
const TAG_TEXTURE: u64 = 4;
const TAG_SENSOR: u64 = 5;
const TAG_SCENE: u64 = 6;

/// One frame of the stream: a grid of cells, each a `dim`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub dim: usize,
    /// Row-major `cells × dim` features.
    pub cells: Vec<f64>,
}

impl Frame {
    pub fn num_cells(&self) -> usize {
        self.cells.len() / self.dim
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.cells[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-cell class indices aligned with a frame's cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelGrid {
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(labels: Vec<u8>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ground-truth labeler: nearest class prototype under the drifted state.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOracle {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes × dim`.
    pub prototypes: Vec<f64>,
}

impl TeacherOracle {
    /// Oracle state at `frame_id` of the stream identified by `seed`.
    pub fn at_frame(cfg: &DriftConfig, seed: u64, frame_id: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::rotated(cfg, base_prototypes(cfg, seed, cfg.epoch(frame_id)), frame_id))
    }

    fn rotated(cfg: &DriftConfig, mut prototypes: Vec<f64>, frame_id: u64) -> Self {
        let (c, d) = (cfg.classes, cfg.dim);
        if d >= 2 {
            let theta = cfg.rotation_rate * frame_id as f64;
            let (s, co) = theta.sin_cos();
            for row in prototypes.chunks_exact_mut(d) {
                let (a, b) = (row[0], row[1]);
                row[0] = co * a - s * b;
                row[1] = s * a + co * b;
            }
        }
        Self { classes: c, dim: d, prototypes }
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * self.dim..(class + 1) * self.dim]
    }

    fn nearest(&self, x: &[f64]) -> u8 {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.classes {
            let dist: f64 = self
                .prototype(k)
                .iter()
                .zip(x)
                .map(|(p, v)| (p - v) * (p - v))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best as u8
    }
}

/// Unrotated prototypes of scene `epoch`, row-major `classes × dim`.
fn base_prototypes(cfg: &DriftConfig, seed: u64, epoch: u64) -> Vec<f64> {
    let (c, d) = (cfg.classes, cfg.dim);
    let mut prototypes = vec![0.0; c * d];
    for (k, row) in prototypes.chunks_exact_mut(d).enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            let family = if d >= 2 && j < 2 {
                let angle = std::f64::consts::TAU * k as f64 / c as f64
                    + 0.3 * gaussian(&[cfg.family_seed, TAG_BASE, k as u64, 99]);
                cfg.plane_radius * if j == 0 { angle.cos() } else { angle.sin() }
            } else {
                cfg.spread * gaussian(&[cfg.family_seed, TAG_BASE, k as u64, j as u64])
            };
            let local = cfg.perturbation * gaussian(&[seed, TAG_PERTURB, epoch, k as u64, j as u64]);
            *x = family + local;
        }
    }
    prototypes
}

/// Smooth per-class score field over world coordinates (bilinear value noise).
fn layout_field(scene: u64, class: u64, u: f64, v: f64, scale: f64) -> f64 {
    let (x, y) = (u / scale, v / scale);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
    let corner = |dx: i64, dy: i64| {
        unit(hash(&[
            scene,
            TAG_LAYOUT,
            class,
            (x0 as i64 + dx) as u64,
            (y0 as i64 + dy) as u64,
        ]))
    };
    let top = corner(0, 0) * (1.0 - sx) + corner(1, 0) * sx;
    let bottom = corner(0, 1) * (1.0 - sx) + corner(1, 1) * sx;
    top * (1.0 - sy) + bottom * sy
}

/// Generating class of each cell of frame `frame_id`.
pub fn scene_classes(cfg: &DriftConfig, seed: u64, frame_id: u64) -> Vec<u8> {
    let scene = hash(&[seed, TAG_SCENE, cfg.epoch(frame_id)]);
    let offset = cfg.pan_rate * frame_id as f64;
    let mut out = Vec::with_capacity(cfg.cells());
    for row in 0..cfg.grid_height {
        for col in 0..cfg.grid_width {
            let u = col as f64 + offset;
            let v = row as f64;
            let mut best = 0u8;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..cfg.classes {
                let s = layout_field(scene, k as u64, u, v, cfg.region_scale);
                if s > best_score {
                    best_score = s;
                    best = k as u8;
                }
            }
            out.push(best);
        }
    }
    out
}

/// The `frame_id`-th frame of the stream identified by `seed`.
pub fn generate_frame(frame_id: u64, cfg: &DriftConfig, seed: u64) -> Result<Frame> {
    let oracle = TeacherOracle::at_frame(cfg, seed, frame_id)?;
    Ok(generate_frame_with(frame_id, cfg, seed, &oracle))
}

/// Same as [`generate_frame`] with the oracle for `frame_id` already built.
pub fn generate_frame_with(frame_id: u64, cfg: &DriftConfig, seed: u64, oracle: &TeacherOracle) -> Frame {
    build_frame(frame_id, cfg, seed, oracle, &mut TextureCache::default())
}

/// Static texture of world columns, valid for one scene.
#[derive(Debug, Clone, Default)]
struct TextureCache {
    scene: u64,
    columns: HashMap<u64, Vec<f64>>,
}

impl TextureCache {
    /// `grid_height × dim` texture values of `world_col`.
    fn column(&mut self, cfg: &DriftConfig, scene: u64, world_col: u64) -> &[f64] {
        if self.scene != scene {
            self.scene = scene;
            self.columns.clear();
        }
        self.columns.entry(world_col).or_insert_with(|| {
            (0..cfg.grid_height as u64)
                .flat_map(|row| {
                    (0..cfg.dim as u64)
                        .map(move |j| cfg.texture_noise * gaussian(&[scene, TAG_TEXTURE, world_col, row, j]))
                })
                .collect()
        })
    }

    fn evict_before(&mut self, world_col: u64) {
        self.columns.retain(|&c, _| c >= world_col);
    }
}

fn build_frame(frame_id: u64, cfg: &DriftConfig, seed: u64, oracle: &TeacherOracle, cache: &mut TextureCache) -> Frame {
    let classes = scene_classes(cfg, seed, frame_id);
    let d = cfg.dim;
    let scene = hash(&[seed, TAG_SCENE, cfg.epoch(frame_id)]);
    let offset = cfg.pan_rate * frame_id as f64;
    let mut cells = Vec::with_capacity(cfg.cells() * d);
    for (i, &k) in classes.iter().enumerate() {
        let (row, col) = (i / cfg.grid_width, i % cfg.grid_width);
        let world_col = (col as f64 + offset).floor() as i64 as u64;
        let texture = &cache.column(cfg, scene, world_col)[row * d..(row + 1) * d];
        let proto = oracle.prototype(k as usize);
        for (j, (p, t)) in proto.iter().zip(texture).enumerate() {
            let sensor = if cfg.sensor_noise != 0.0 {
                cfg.sensor_noise * gaussian(&[seed, TAG_SENSOR, frame_id, i as u64, j as u64])
            } else {
                0.0
            };
            cells.push(p + t + sensor);
        }
    }
    Frame {
        frame_id,
        timestamp: cfg.timestamp(frame_id),
        dim: d,
        cells,
    }
}

/// Sequential reader of one stream. Produces the same frames and oracles as
/// [`generate_frame`] and [`TeacherOracle::at_frame`], reusing the parts that
/// only change with the scene.
#[derive(Debug, Clone)]
pub struct StreamGenerator {
    cfg: DriftConfig,
    seed: u64,
    base: Option<(u64, Vec<f64>)>,
    texture: TextureCache,
}

impl StreamGenerator {
    pub fn new(cfg: &DriftConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), seed, base: None, texture: TextureCache::default() })
    }

    pub fn oracle(&mut self, frame_id: u64) -> TeacherOracle {
        let epoch = self.cfg.epoch(frame_id);
        if self.base.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.base = Some((epoch, base_prototypes(&self.cfg, self.seed, epoch)));
        }
        let protos = self.base.as_ref().map(|(_, p)| p.clone()).unwrap_or_default();
        TeacherOracle::rotated(&self.cfg, protos, frame_id)
    }

    /// Frame `frame_id` and its oracle.
    pub fn frame(&mut self, frame_id: u64) -> (Frame, TeacherOracle) {
        let oracle = self.oracle(frame_id);
        let leftmost = (self.cfg.pan_rate * frame_id as f64).floor() as i64 as u64;
        self.texture.evict_before(leftmost.saturating_sub(1));
        let frame = build_frame(frame_id, &self.cfg, self.seed, &oracle, &mut self.texture);
        (frame, oracle)
    }
}

/// Labels every cell with the nearest prototype of `oracle`.
pub fn teacher_label(frame: &Frame, oracle: &TeacherOracle) -> Result<LabelGrid> {
    if frame.dim != oracle.dim {
        return Err(WorkloadError::DimensionMismatch {
            expected: oracle.dim,
            found: frame.dim,
        });
    }
    let labels = frame.cells.chunks_exact(frame.dim).map(|x| oracle.nearest(x)).collect();
    Ok(LabelGrid { labels })
}

/// Flat parameter vector of a student model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(WorkloadError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// A contiguous block of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: &'static str,
    pub start: usize,
    pub end: usize,
}

/// Shape of the per-cell student network `dim → hidden (tanh) → classes (softmax)`.
///
/// Flat order: hidden weights (`hidden × dim`, row-major), hidden bias, output
/// weights (`classes × hidden`), output bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentLayout {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl StudentLayout {
    pub fn new(dim: usize, hidden: usize, classes: usize) -> Self {
        Self { dim, hidden, classes }
    }

    pub fn num_params(&self) -> usize {
        self.dim * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }

    pub fn layers(&self) -> Vec<LayerSpan> {
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        let w1 = d * h;
        let b1 = w1 + h;
        let w2 = b1 + h * c;
        vec![
            LayerSpan { name: "hidden.weight", start: 0, end: w1 },
            LayerSpan { name: "hidden.bias", start: w1, end: b1 },
            LayerSpan { name: "output.weight", start: b1, end: w2 },
            LayerSpan { name: "output.bias", start: w2, end: w2 + c },
        ]
    }

    /// Small deterministic random initialization.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layers = self.layers();
        let mut p = vec![0.0; self.num_params()];
        let w1_scale = 1.0 / (self.dim as f64).sqrt();
        let w2_scale = 1.0 / (self.hidden as f64).sqrt();
        for i in layers[0].start..layers[0].end {
            p[i] = w1_scale * gaussian(&[seed, 0xA11, i as u64]);
        }
        for i in layers[2].start..layers[2].end {
            p[i] = w2_scale * gaussian(&[seed, 0xA11, i as u64]);
        }
        ParamVector(p)
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(WorkloadError::DimensionMismatch {
                expected: self.num_params(),
                found: params.len(),
            });
        }
        params.check_finite()
    }
}

/// Output of [`student_eval`].
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: ParamVector,
    pub preds: Vec<LabelGrid>,
}

struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Scratch {
    fn new(layout: &StudentLayout) -> Self {
        Self {
            hidden: vec![0.0; layout.hidden],
            logits: vec![0.0; layout.classes],
        }
    }
}

fn forward_cell(layout: &StudentLayout, p: &[f64], x: &[f64], s: &mut Scratch) {
    let (d, h, c) = (layout.dim, layout.hidden, layout.classes);
    let (w1, rest) = p.split_at(d * h);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h * c);
    for j in 0..h {
        let row = &w1[j * d..(j + 1) * d];
        let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j];
        s.hidden[j] = z.tanh();
    }
    for k in 0..c {
        let row = &w2[k * h..(k + 1) * h];
        s.logits[k] = row.iter().zip(&s.hidden).map(|(w, a)| w * a).sum::<f64>() + b2[k];
    }
}

fn argmax(v: &[f64]) -> u8 {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best as u8
}

/// Per-cell argmax predictions of the student on one frame.
pub fn predict(layout: &StudentLayout, params: &ParamVector, frame: &Frame) -> Result<LabelGrid> {
    if frame.dim != layout.dim {
        return Err(WorkloadError::DimensionMismatch {
            expected: layout.dim,
            found: frame.dim,
        });
    }
    let p = params.as_slice();
    let mut s = Scratch::new(layout);
    let labels = frame
        .cells
        .chunks_exact(layout.dim)
        .map(|x| {
            forward_cell(layout, p, x, &mut s);
            argmax(&s.logits)
        })
        .collect();
    Ok(LabelGrid { labels })
}

/// Mean per-cell cross-entropy of the student against hard teacher labels,
/// with its gradient and the per-cell predictions.
pub fn student_eval(
    layout: &StudentLayout,
    params: &ParamVector,
    batch: &[(&Frame, &LabelGrid)],
) -> Result<Evaluation> {
    layout.check(params)?;
    if batch.is_empty() {
        return Err(WorkloadError::EmptyBatch);
    }
    let (d, h, c) = (layout.dim, layout.hidden, layout.classes);
    let p = params.as_slice();
    let w2_off = d * h + h;
    let b2_off = w2_off + h * c;
    let total_cells: usize = batch.iter().map(|(f, _)| f.num_cells()).sum();
    let scale = 1.0 / total_cells as f64;

    let mut grad = vec![0.0; p.len()];
    let mut s = Scratch::new(layout);
    let mut probs = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(batch.len());

    for (frame, labels) in batch {
        if frame.dim != d {
            return Err(WorkloadError::DimensionMismatch { expected: d, found: frame.dim });
        }
        if labels.len() != frame.num_cells() {
            return Err(WorkloadError::DimensionMismatch {
                expected: frame.num_cells(),
                found: labels.len(),
            });
        }
        let mut pred = Vec::with_capacity(labels.len());
        for (x, &y) in frame.cells.chunks_exact(d).zip(&labels.labels) {
            let y = y as usize;
            forward_cell(layout, p, x, &mut s);
            pred.push(argmax(&s.logits));

            let max = s.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut norm = 0.0;
            for k in 0..c {
                probs[k] = (s.logits[k] - max).exp();
                norm += probs[k];
            }
            loss += (norm.ln() + max - s.logits[y]) * scale;
            for pk in probs.iter_mut() {
                *pk /= norm;
            }
            probs[y] -= 1.0;

            // output layer
            dhidden.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let dz = probs[k] * scale;
                grad[b2_off + k] += dz;
                let row = w2_off + k * h;
                for j in 0..h {
                    grad[row + j] += dz * s.hidden[j];
                    dhidden[j] += dz * p[row + j];
                }
            }
            // hidden layer through tanh
            for j in 0..h {
                let dz = dhidden[j] * (1.0 - s.hidden[j] * s.hidden[j]);
                grad[d * h + j] += dz;
                let row = &mut grad[j * d..(j + 1) * d];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += dz * v;
                }
            }
        }
        preds.push(LabelGrid { labels: pred });
    }
    Ok(Evaluation { loss, grad: ParamVector(grad), preds })
}

/// Mean intersection-over-union over `classes`.
///
/// A class absent from both grids scores 1; present in exactly one, 0.
pub fn miou(pred: &LabelGrid, truth: &LabelGrid, classes: &[usize]) -> f64 {
    debug_assert_eq!(pred.len(), truth.len());
    if classes.is_empty() {
        return 1.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&k| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
                let (p, t) = (p as usize == k, t as usize == k);
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = tp + fp + fneg;
            if denom == 0 {
                1.0
            } else {
                tp as f64 / denom as f64
            }
        })
        .sum();
    sum / classes.len() as f64
}

/// Classes appearing in either grid, ascending.
pub fn present_classes(a: &LabelGrid, b: &LabelGrid) -> Vec<usize> {
    let mut seen = [false; 256];
    for &l in a.labels.iter().chain(&b.labels) {
        seen[l as usize] = true;
    }
    (0..256).filter(|&k| seen[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[u8]) -> LabelGrid {
        LabelGrid::new(v.to_vec())
    }

    #[test]
    fn stream_generator_matches_pure_functions() {
        let cfg = DriftConfig { jumps: vec![40], pan_rate: 0.3, ..DriftConfig::default() };
        let mut g = StreamGenerator::new(&cfg, 5).unwrap();
        for k in (0..90).chain([200, 201, 7]) {
            let (f, o) = g.frame(k);
            assert_eq!(f, generate_frame(k, &cfg, 5).unwrap());
            assert_eq!(o, TeacherOracle::at_frame(&cfg, 5, k).unwrap());
        }
    }

    #[test]
    fn frames_are_deterministic() {
        let cfg = DriftConfig::default();
        let a = generate_frame(42, &cfg, 7).unwrap();
        let b = generate_frame(42, &cfg, 7).unwrap();
        assert_eq!(a.cells.len(), 64 * 8);
        assert!(a.cells.iter().zip(&b.cells).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_frame(42, &cfg, 8).unwrap();
        assert_ne!(a.cells, c.cells);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            DriftConfig { dim: 0, ..Default::default() },
            DriftConfig { grid_width: 0, ..Default::default() },
            DriftConfig { classes: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_frame(0, &cfg, 1), Err(WorkloadError::InvalidConfig(_))));
        }
    }

    #[test]
    fn zero_drift_prototypes_constant() {
        let cfg = DriftConfig::default().stationary();
        let a = TeacherOracle::at_frame(&cfg, 3, 0).unwrap();
        let b = TeacherOracle::at_frame(&cfg, 3, 10_000).unwrap();
        assert_eq!(a, b);
        let f = generate_frame(5, &cfg, 3).unwrap();
        assert_eq!(teacher_label(&f, &a).unwrap(), teacher_label(&f, &b).unwrap());
    }

    #[test]
    fn jump_exceeds_per_step_drift() {
        let cfg = DriftConfig { jumps: vec![300], ..Default::default() };
        let before = TeacherOracle::at_frame(&cfg, 11, 299).unwrap();
        let after = TeacherOracle::at_frame(&cfg, 11, 300).unwrap();
        let prev = TeacherOracle::at_frame(&cfg, 11, 298).unwrap();
        let dist = |a: &TeacherOracle, b: &TeacherOracle| {
            a.prototypes
                .iter()
                .zip(&b.prototypes)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        // one frame of rotation moves a point at radius r by at most r * rate
        let max_radius = (0..cfg.classes)
            .map(|k| before.prototype(k)[..2].iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let per_step_bound = (cfg.classes as f64).sqrt() * max_radius * cfg.rotation_rate;
        assert!(dist(&prev, &before) <= per_step_bound + 1e-12);
        assert!(dist(&before, &after) > 10.0 * per_step_bound);
    }

    #[test]
    fn teacher_labels_prototype_exactly() {
        let cfg = DriftConfig::default();
        let oracle = TeacherOracle::at_frame(&cfg, 1, 0).unwrap();
        let frame = Frame {
            frame_id: 0,
            timestamp: 0.0,
            dim: 8,
            cells: oracle.prototype(2).to_vec(),
        };
        assert_eq!(teacher_label(&frame, &oracle).unwrap().labels, vec![2]);
        assert_eq!(
            teacher_label(&frame, &oracle).unwrap(),
            teacher_label(&frame, &oracle).unwrap()
        );
    }

    #[test]
    fn teacher_nearest_prototype_1d() {
        let oracle = TeacherOracle { classes: 2, dim: 1, prototypes: vec![-1.0, 1.0] };
        let frame = Frame { frame_id: 0, timestamp: 0.0, dim: 1, cells: vec![0.3] };
        // |0.3 - 1| = 0.7 < |0.3 + 1| = 1.3
        assert_eq!(teacher_label(&frame, &oracle).unwrap().labels, vec![1]);
    }

    #[test]
    fn teacher_dimension_mismatch() {
        let oracle = TeacherOracle { classes: 2, dim: 2, prototypes: vec![0.0; 4] };
        let frame = Frame { frame_id: 0, timestamp: 0.0, dim: 1, cells: vec![0.3] };
        assert!(matches!(
            teacher_label(&frame, &oracle),
            Err(WorkloadError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let cfg = DriftConfig::default();
        let layout = StudentLayout::new(8, 16, 4);
        let params = ParamVector::zeros(layout.num_params());
        let f = generate_frame(0, &cfg, 1).unwrap();
        let o = TeacherOracle::at_frame(&cfg, 1, 0).unwrap();
        let l = teacher_label(&f, &o).unwrap();
        let ev = student_eval(&layout, &params, &[(&f, &l)]).unwrap();
        assert!((ev.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separable_toy_hand_weights() {
        // 1-D input, one hidden unit h = tanh(10 x); logits (+-20 h).
        let layout = StudentLayout::new(1, 1, 2);
        let params = ParamVector(vec![10.0, 0.0, -20.0, 20.0, 0.0, 0.0]);
        let frame = Frame { frame_id: 0, timestamp: 0.0, dim: 1, cells: vec![-1.0, -0.5, 0.5, 1.0] };
        let labels = grid(&[0, 0, 1, 1]);
        let ev = student_eval(&layout, &params, &[(&frame, &labels)]).unwrap();
        assert_eq!(ev.preds[0], labels);
        // at x = 0.5: h = tanh(5) = 0.99991, margin 40 h, loss ~ exp(-40)
        assert!(ev.loss < 0.01);
    }

    #[test]
    fn non_finite_params_rejected() {
        let layout = StudentLayout::new(1, 1, 2);
        let params = ParamVector(vec![f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let frame = Frame { frame_id: 0, timestamp: 0.0, dim: 1, cells: vec![1.0] };
        let labels = grid(&[0]);
        assert_eq!(
            student_eval(&layout, &params, &[(&frame, &labels)]).unwrap_err(),
            WorkloadError::NonFinite(0)
        );
    }

    #[test]
    fn predict_matches_eval_preds() {
        let cfg = DriftConfig::default();
        let layout = StudentLayout::new(8, 16, 4);
        let params = layout.init_params(5);
        let f = generate_frame(9, &cfg, 2).unwrap();
        let l = teacher_label(&f, &TeacherOracle::at_frame(&cfg, 2, 9).unwrap()).unwrap();
        let ev = student_eval(&layout, &params, &[(&f, &l)]).unwrap();
        assert_eq!(predict(&layout, &params, &f).unwrap(), ev.preds[0]);
    }

    #[test]
    fn miou_examples() {
        let a = grid(&[0, 0, 1, 1]);
        assert_eq!(miou(&a, &a, &[0, 1]), 1.0);
        let v = miou(&a, &grid(&[0, 1, 1, 1]), &[0, 1]);
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(miou(&grid(&[0, 0]), &grid(&[1, 1]), &[0, 1]), 0.0);
        // class 2 absent from both grids counts as 1
        assert_eq!(miou(&a, &a, &[0, 1, 2]), 1.0);
    }

    #[test]
    fn layout_layers_cover_params() {
        let l = StudentLayout::new(8, 16, 4);
        assert_eq!(l.num_params(), 8 * 16 + 16 + 16 * 4 + 4);
        let spans = l.layers();
        assert_eq!(spans[0].start, 0);
        assert_eq!(spans.last().unwrap().end, l.num_params());
        assert!(spans.windows(2).all(|w| w[0].end == w[1].start));
    }
}
