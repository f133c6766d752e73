//! Force regression from marker features, and material compensation.
//!
//! A frame is summarized by twelve marker-displacement statistics. A small
//! gated recurrent cell runs over the frame sequence and a sigmoid head
//! emits normalized forces, which are mapped back to newtons through
//! per-axis bounds. Gradients are computed by hand (backpropagation through
//! time) so they can be checked against finite differences.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::m2m::track_guided;
use crate::scenario::Phase;
use crate::unify::{MarkerSet, TrackedMarkers};
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 18;
pub const DEFAULT_HIDDEN: usize = 16;
/// Displacement above which a marker counts as in contact, px.
pub const CONTACT_THRESHOLD_PX: f64 = 1.0;
/// Outer radii of the radial-profile rings, px.
pub const RING_EDGES_PX: [f64; 4] = [60.0, 120.0, 180.0, 240.0];
const MODEL_MAGIC: &[u8; 4] = b"TFM1";

/// Per-frame marker statistics, in this order: mean dx, mean dy, mean |d|,
/// max |d|, std dx, std dy, contact fraction, radial divergence, mean log
/// radius ratio, change of mean |d|, change of contact fraction, matched
/// fraction, mean |d|², spread of |d| about the deformation center, and the
/// mean radial displacement in four rings around that center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub const MEAN_ABS: usize = 2;
    pub const CONTACT: usize = 6;
    pub const DELTA_MEAN_ABS: usize = 9;
    pub const DELTA_CONTACT: usize = 10;
    pub const MATCHED: usize = 11;

    pub fn zeros() -> Self {
        Self([0.0; FEATURE_DIM])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Copy with the frame-to-frame change features cleared.
    pub fn without_deltas(mut self) -> Self {
        self.0[Self::DELTA_MEAN_ABS] = 0.0;
        self.0[Self::DELTA_CONTACT] = 0.0;
        self
    }
}

pub fn extract_features(tracked: &TrackedMarkers, prev: Option<&FeatureVector>) -> FeatureVector {
    let n = tracked.pairs.len();
    if n == 0 {
        return FeatureVector::zeros();
    }
    let nf = n as f64;
    let mut f = [0.0; FEATURE_DIM];
    let mags: Vec<f64> = tracked
        .pairs
        .iter()
        .map(|p| p.displacement[0].hypot(p.displacement[1]))
        .collect();
    let mean_dx = tracked.pairs.iter().map(|p| p.displacement[0]).sum::<f64>() / nf;
    let mean_dy = tracked.pairs.iter().map(|p| p.displacement[1]).sum::<f64>() / nf;
    f[0] = mean_dx;
    f[1] = mean_dy;
    f[2] = mags.iter().sum::<f64>() / nf;
    f[3] = mags.iter().cloned().fold(0.0, f64::max);
    f[4] = (tracked.pairs.iter().map(|p| (p.displacement[0] - mean_dx).powi(2)).sum::<f64>() / nf).sqrt();
    f[5] = (tracked.pairs.iter().map(|p| (p.displacement[1] - mean_dy).powi(2)).sum::<f64>() / nf).sqrt();
    f[6] = mags.iter().filter(|&&m| m > CONTACT_THRESHOLD_PX).count() as f64 / nf;

    let positions: Vec<[f64; 2]> = tracked.pairs.iter().map(|p| tracked.ref_centroids[p.ref_index]).collect();
    // Squared magnitudes as weights keep sub-pixel far-field jitter from
    // dominating the center and spread.
    let weights: Vec<f64> = mags.iter().map(|m| m * m).collect();
    let wsum: f64 = weights.iter().sum();
    let center = if wsum > 0.0 {
        let (x, y) = positions
            .iter()
            .zip(&weights)
            .fold((0.0, 0.0), |(a, b), (p, w)| (a + w * p[0], b + w * p[1]));
        [x / wsum, y / wsum]
    } else {
        let (x, y) = positions.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [x / nf, y / nf]
    };
    let mut div = 0.0;
    let mut moment = 0.0;
    let mut ring_sum = [0.0; 4];
    let mut ring_n = [0usize; 4];
    for ((p, pair), w) in positions.iter().zip(&tracked.pairs).zip(&weights) {
        let (rx, ry) = (p[0] - center[0], p[1] - center[1]);
        let r = rx.hypot(ry);
        moment += w * r * r;
        let radial = if r > 0.0 {
            (pair.displacement[0] * rx + pair.displacement[1] * ry) / r
        } else {
            0.0
        };
        div += radial;
        if let Some(k) = RING_EDGES_PX.iter().position(|&e| r < e) {
            ring_sum[k] += radial;
            ring_n[k] += 1;
        }
    }
    f[7] = div / nf;
    f[8] = tracked.pairs.iter().map(|p| p.radius_ratio.max(1e-6).ln()).sum::<f64>() / nf;
    if let Some(prev) = prev {
        f[9] = f[2] - prev.0[2];
        f[10] = f[6] - prev.0[6];
    }
    f[11] = tracked.matched_fraction();
    f[12] = wsum / nf;
    f[13] = if wsum > 0.0 { (moment / wsum).sqrt() } else { 0.0 };
    for k in 0..4 {
        if ring_n[k] > 0 {
            f[14 + k] = ring_sum[k] / ring_n[k] as f64;
        }
    }
    FeatureVector(f)
}

/// Tracks every frame against the reference and extracts features, chaining
/// the change features from frame to frame.
pub fn sequence_features(reference: &MarkerSet, frames: &[MarkerSet], lambda: f64) -> Vec<FeatureVector> {
    let mut out: Vec<FeatureVector> = Vec::with_capacity(frames.len());
    for cur in frames {
        let tracked = track_guided(reference, cur, lambda);
        let f = extract_features(&tracked, out.last());
        out.push(f);
    }
    out
}

/// Frames and force labels of one contact sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub frames: Vec<FeatureVector>,
    /// N, `[fx, fy, fz]`.
    pub forces: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    pub phases: Vec<Phase>,
    pub sensor_id: String,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.forces.len() != n || self.depths.len() != n || self.phases.len() != n {
            return Err(Error::invalid(format!(
                "sequence lengths differ: {} frames, {} forces, {} depths, {} phases",
                n,
                self.forces.len(),
                self.depths.len(),
                self.phases.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        if self.frames.iter().any(|f| !f.is_finite()) || self.forces.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sequence sample".into()));
        }
        Ok(())
    }

    /// Splits into single-frame samples with the change features cleared,
    /// for the no-memory ablation.
    pub fn framewise(&self) -> Vec<SequenceSample> {
        (0..self.len())
            .map(|i| SequenceSample {
                frames: vec![self.frames[i].without_deltas()],
                forces: vec![self.forces[i]],
                depths: vec![self.depths[i]],
                phases: vec![self.phases[i]],
                sensor_id: self.sensor_id.clone(),
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Offsets of the parameter blocks inside [`ForceModel::params`].
///
/// Order: `Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh, Wo, bo`, matrices row-major
/// (`W*`: H x FEATURE_DIM, `U*`: H x H, `Wo`: 3 x H).
#[derive(Clone, Copy, Debug)]
struct Layout {
    h: usize,
}

impl Layout {
    fn gate(&self) -> usize {
        self.h * FEATURE_DIM + self.h * self.h + self.h
    }
    fn w(&self, g: usize) -> usize {
        g * self.gate()
    }
    fn u(&self, g: usize) -> usize {
        self.w(g) + self.h * FEATURE_DIM
    }
    fn b(&self, g: usize) -> usize {
        self.u(g) + self.h * self.h
    }
    fn wo(&self) -> usize {
        3 * self.gate()
    }
    fn bo(&self) -> usize {
        self.wo() + 3 * self.h
    }
    fn len(&self) -> usize {
        self.bo() + 3
    }
}

const GZ: usize = 0;
const GR: usize = 1;
const GH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceModel {
    pub hidden: usize,
    pub params: Vec<f64>,
    /// Per-axis `(min, max)` force bounds, N.
    pub bounds: [[f64; 2]; 3],
    /// Inputs are standardized as `(x - shift) / scale`.
    pub feature_shift: [f64; FEATURE_DIM],
    pub feature_scale: [f64; FEATURE_DIM],
}

/// Per-step values kept for backpropagation.
struct StepCache {
    x: [f64; FEATURE_DIM],
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    y: [f64; 3],
}

impl ForceModel {
    /// All-zero parameters, identity feature scaling.
    pub fn zeros(hidden: usize, bounds: [[f64; 2]; 3]) -> Self {
        Self {
            hidden,
            params: vec![0.0; Layout { h: hidden }.len()],
            bounds,
            feature_shift: [0.0; FEATURE_DIM],
            feature_scale: [1.0; FEATURE_DIM],
        }
    }

    /// Uniform initialization in `±1/sqrt(H)`, zero head bias.
    pub fn random(hidden: usize, bounds: [[f64; 2]; 3], rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(hidden, bounds);
        let k = 1.0 / (hidden as f64).sqrt();
        let bo = Layout { h: hidden }.bo();
        for p in &mut m.params[..bo] {
            *p = rng.gen_range(-k..k);
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout { h: self.hidden }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.params.len() != self.layout().len() {
            return Err(Error::invalid("model parameter count does not match hidden size"));
        }
        if self.params.iter().any(|p| !p.is_finite())
            || self.bounds.iter().flatten().any(|b| !b.is_finite())
            || self.feature_shift.iter().chain(&self.feature_scale).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("model parameters".into()));
        }
        if self.bounds.iter().any(|b| !(b[1] > b[0])) {
            return Err(Error::invalid("force bounds must satisfy min < max"));
        }
        if self.feature_scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::invalid("feature scales must be positive"));
        }
        Ok(())
    }

    pub fn normalize_force(&self, f: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = (f[a] - self.bounds[a][0]) / (self.bounds[a][1] - self.bounds[a][0]);
        }
        out
    }

    pub fn denormalize_force(&self, y: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = self.bounds[a][0] + y[a] * (self.bounds[a][1] - self.bounds[a][0]);
        }
        out
    }

    fn scaled(&self, f: &FeatureVector) -> [f64; FEATURE_DIM] {
        let mut x = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            x[i] = (f.0[i] - self.feature_shift[i]) / self.feature_scale[i];
        }
        x
    }

    fn run(&self, seq: &[FeatureVector]) -> Vec<StepCache> {
        let h = self.hidden;
        let l = self.layout();
        let p = &self.params;
        let mut h_prev = vec![0.0; h];
        let mut out = Vec::with_capacity(seq.len());
        for f in seq {
            let x = self.scaled(f);
            let pre = |g: usize, state: &[f64], i: usize| {
                let mut s = p[l.b(g) + i];
                let w = &p[l.w(g) + i * FEATURE_DIM..][..FEATURE_DIM];
                for k in 0..FEATURE_DIM {
                    s += w[k] * x[k];
                }
                let u = &p[l.u(g) + i * h..][..h];
                for k in 0..h {
                    s += u[k] * state[k];
                }
                s
            };
            let z: Vec<f64> = (0..h).map(|i| sigmoid(pre(GZ, &h_prev, i))).collect();
            let r: Vec<f64> = (0..h).map(|i| sigmoid(pre(GR, &h_prev, i))).collect();
            let rh: Vec<f64> = (0..h).map(|i| r[i] * h_prev[i]).collect();
            let c: Vec<f64> = (0..h).map(|i| pre(GH, &rh, i).tanh()).collect();
            let hn: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i]).collect();
            let mut y = [0.0; 3];
            for (a, ya) in y.iter_mut().enumerate() {
                let mut s = p[l.bo() + a];
                for k in 0..h {
                    s += p[l.wo() + a * h + k] * hn[k];
                }
                *ya = sigmoid(s);
            }
            out.push(StepCache {
                x,
                h_prev: std::mem::replace(&mut h_prev, hn.clone()),
                z,
                r,
                c,
                h: hn,
                y,
            });
        }
        out
    }

    /// Normalized outputs in `(0, 1)^3`.
    pub fn forward_normalized(&self, seq: &[FeatureVector]) -> Result<Vec<[f64; 3]>> {
        if seq.is_empty() {
            return Err(Error::invalid("empty feature sequence"));
        }
        if seq.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(self.run(seq).into_iter().map(|s| s.y).collect())
    }

    /// Forces in newtons, one per frame.
    pub fn forward(&self, seq: &[FeatureVector]) -> Result<Vec<[f64; 3]>> {
        Ok(self
            .forward_normalized(seq)?
            .iter()
            .map(|y| self.denormalize_force(y))
            .collect())
    }

    /// Accumulates `d(sum_t g_t . y_t)/d params` into `grad`, where `dy[t]`
    /// is the loss gradient w.r.t. the normalized output at step `t`.
    fn backward(&self, steps: &[StepCache], dy: &[[f64; 3]], grad: &mut [f64]) {
        let h = self.hidden;
        let l = self.layout();
        let p = &self.params;
        let mut dh_next = vec![0.0; h];
        for (t, s) in steps.iter().enumerate().rev() {
            let mut dh = dh_next.clone();
            for a in 0..3 {
                let dao = dy[t][a] * s.y[a] * (1.0 - s.y[a]);
                if dao == 0.0 {
                    continue;
                }
                grad[l.bo() + a] += dao;
                for k in 0..h {
                    grad[l.wo() + a * h + k] += dao * s.h[k];
                    dh[k] += p[l.wo() + a * h + k] * dao;
                }
            }
            let mut dh_prev: Vec<f64> = (0..h).map(|i| dh[i] * (1.0 - s.z[i])).collect();
            let da_z: Vec<f64> = (0..h)
                .map(|i| dh[i] * (s.c[i] - s.h_prev[i]) * s.z[i] * (1.0 - s.z[i]))
                .collect();
            let da_h: Vec<f64> = (0..h).map(|i| dh[i] * s.z[i] * (1.0 - s.c[i] * s.c[i])).collect();
            let rh: Vec<f64> = (0..h).map(|i| s.r[i] * s.h_prev[i]).collect();
            let mut d_rh = vec![0.0; h];
            self.accumulate_gate(GH, &da_h, &s.x, &rh, grad, &mut d_rh);
            for i in 0..h {
                dh_prev[i] += d_rh[i] * s.r[i];
            }
            let da_r: Vec<f64> = (0..h)
                .map(|i| d_rh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]))
                .collect();
            self.accumulate_gate(GR, &da_r, &s.x, &s.h_prev, grad, &mut dh_prev);
            self.accumulate_gate(GZ, &da_z, &s.x, &s.h_prev, grad, &mut dh_prev);
            dh_next = dh_prev;
        }
    }

    /// Gradients of one gate's affine map; `d_state` receives `U^T da`.
    fn accumulate_gate(
        &self,
        g: usize,
        da: &[f64],
        x: &[f64; FEATURE_DIM],
        state: &[f64],
        grad: &mut [f64],
        d_state: &mut [f64],
    ) {
        let h = self.hidden;
        let l = self.layout();
        for i in 0..h {
            let d = da[i];
            if d == 0.0 {
                continue;
            }
            grad[l.b(g) + i] += d;
            let gw = &mut grad[l.w(g) + i * FEATURE_DIM..][..FEATURE_DIM];
            for k in 0..FEATURE_DIM {
                gw[k] += d * x[k];
            }
            let gu = &mut grad[l.u(g) + i * h..][..h];
            for k in 0..h {
                gu[k] += d * state[k];
            }
            let u = &self.params[l.u(g) + i * h..][..h];
            for k in 0..h {
                d_state[k] += u[k] * d;
            }
        }
    }

    /// Mean absolute error over frames and axes on normalized forces, and its
    /// gradient by backpropagation through time.
    pub fn loss_and_gradient(&self, batch: &[SequenceSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in batch {
            if s.len() < 2 {
                return Err(Error::invalid("sequences need at least two frames"));
            }
        }
        self.loss_and_gradient_any(batch)
    }

    fn loss_and_gradient_any(&self, batch: &[SequenceSample]) -> Result<(f64, Vec<f64>)> {
        let total: usize = batch.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let norm = 1.0 / (3 * total) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for s in batch {
            s.validate()?;
            let steps = self.run(&s.frames);
            let dy: Vec<[f64; 3]> = steps
                .iter()
                .zip(&s.forces)
                .map(|(st, f)| {
                    let t = self.normalize_force(f);
                    let mut g = [0.0; 3];
                    for a in 0..3 {
                        let e = st.y[a] - t[a];
                        loss += e.abs() * norm;
                        g[a] = if e > 0.0 {
                            norm
                        } else if e < 0.0 {
                            -norm
                        } else {
                            0.0
                        };
                    }
                    g
                })
                .collect();
            self.backward(&steps, &dy, &mut grad);
        }
        Ok((loss, grad))
    }

    /// Mean normalized absolute error, without gradients.
    pub fn loss(&self, batch: &[SequenceSample]) -> Result<f64> {
        let total: usize = batch.iter().map(|s| s.len()).sum();
        if total == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut sum = 0.0;
        for s in batch {
            for (y, f) in self.forward_normalized(&s.frames)?.iter().zip(&s.forces) {
                let t = self.normalize_force(f);
                sum += (0..3).map(|a| (y[a] - t[a]).abs()).sum::<f64>();
            }
        }
        Ok(sum / (3 * total) as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * (self.params.len() + 6 + 2 * FEATURE_DIM));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for v in self
            .params
            .iter()
            .chain(self.bounds.iter().flatten())
            .chain(&self.feature_shift)
            .chain(&self.feature_scale)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::invalid("not a TFM1 model file"));
        }
        let hidden = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if hidden == 0 || hidden > 4096 {
            return Err(Error::invalid(format!("implausible hidden size {hidden}")));
        }
        let n = Layout { h: hidden }.len();
        let expected = 8 + 8 * (n + 6 + 2 * FEATURE_DIM);
        if bytes.len() != expected {
            return Err(Error::invalid(format!(
                "model file is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut m = Self::zeros(hidden, [[0.0, 1.0]; 3]);
        m.params.copy_from_slice(&vals[..n]);
        for a in 0..3 {
            m.bounds[a] = [vals[n + 2 * a], vals[n + 2 * a + 1]];
        }
        m.feature_shift.copy_from_slice(&vals[n + 6..n + 6 + FEATURE_DIM]);
        m.feature_scale.copy_from_slice(&vals[n + 6 + FEATURE_DIM..]);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Central finite-difference gradient of the batch loss.
pub fn numerical_gradient(model: &ForceModel, batch: &[SequenceSample], eps: f64) -> Result<Vec<f64>> {
    let mut m = model.clone();
    let mut out = vec![0.0; m.params.len()];
    for i in 0..out.len() {
        let p = m.params[i];
        m.params[i] = p + eps;
        let up = m.loss(batch)?;
        m.params[i] = p - eps;
        let down = m.loss(batch)?;
        m.params[i] = p;
        out[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub validation_fraction: f64,
    /// Fixed window length; `None` draws a length in `[2, full]` per batch.
    pub sequence_length: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            epochs: 300,
            batch_size: 4,
            learning_rate: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_at: 0.6,
            lr_decay: 0.1,
            validation_fraction: 0.1,
            sequence_length: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("hidden size, epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if self.sequence_length == Some(0) {
            return Err(Error::invalid("sequence length must be positive"));
        }
        Ok(())
    }
}

/// Training outcome with its loss history.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: ForceModel,
    /// Mean training loss per epoch (normalized units).
    pub train_loss: Vec<f64>,
    /// Validation MAE per epoch, N averaged over axes.
    pub val_mae: Vec<f64>,
    pub best_epoch: usize,
}

/// Global per-axis label bounds; degenerate axes are widened by 1 N.
pub fn force_bounds(dataset: &[SequenceSample]) -> [[f64; 2]; 3] {
    let mut b = [[f64::INFINITY, f64::NEG_INFINITY]; 3];
    for f in dataset.iter().flat_map(|s| &s.forces) {
        for a in 0..3 {
            b[a][0] = b[a][0].min(f[a]);
            b[a][1] = b[a][1].max(f[a]);
        }
    }
    for ax in &mut b {
        if !ax[0].is_finite() {
            *ax = [0.0, 1.0];
        } else if ax[1] - ax[0] < 1e-9 {
            *ax = [ax[0] - 0.5, ax[1] + 0.5];
        }
    }
    b
}

fn feature_standardization(dataset: &[SequenceSample]) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM]) {
    let frames: Vec<&FeatureVector> = dataset.iter().flat_map(|s| &s.frames).collect();
    let n = frames.len().max(1) as f64;
    let mut mean = [0.0; FEATURE_DIM];
    let mut scale = [1.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        mean[i] = frames.iter().map(|f| f.0[i]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f.0[i] - mean[i]).powi(2)).sum::<f64>() / n;
        scale[i] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

/// Random window of `len` frames, padded by repeating the last frame.
fn window(s: &SequenceSample, len: usize, rng: &mut ChaCha8Rng) -> SequenceSample {
    let n = s.len();
    let start = if n > len { rng.gen_range(0..=n - len) } else { 0 };
    let idx: Vec<usize> = (0..len).map(|k| (start + k).min(n - 1)).collect();
    SequenceSample {
        frames: idx.iter().map(|&i| s.frames[i]).collect(),
        forces: idx.iter().map(|&i| s.forces[i]).collect(),
        depths: idx.iter().map(|&i| s.depths[i]).collect(),
        phases: idx.iter().map(|&i| s.phases[i]).collect(),
        sensor_id: s.sensor_id.clone(),
    }
}

/// SGD with momentum and weight decay; keeps the parameters with the lowest
/// validation MAE.
pub fn train(dataset: &[SequenceSample], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training dataset"));
    }
    for s in dataset {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if dataset.len() >= 2 {
        ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, dataset.len() - 1)
    } else {
        0
    };
    let val: Vec<SequenceSample> = order[..n_val].iter().map(|&i| dataset[i].clone()).collect();
    let train_set: Vec<SequenceSample> = order[n_val..].iter().map(|&i| dataset[i].clone()).collect();
    let val = if val.is_empty() { train_set.clone() } else { val };

    let mut model = ForceModel::random(cfg.hidden, force_bounds(dataset), &mut rng);
    let (shift, scale) = feature_standardization(&train_set);
    model.feature_shift = shift;
    model.feature_scale = scale;

    let mut velocity = vec![0.0; model.params.len()];
    let decay_epoch = (cfg.epochs as f64 * cfg.lr_decay_at).round() as usize;
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_mae = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= decay_epoch {
            cfg.learning_rate * cfg.lr_decay
        } else {
            cfg.learning_rate
        };
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let full = chunk.iter().map(|&i| train_set[i].len()).max().unwrap();
            let len = match cfg.sequence_length {
                Some(l) => l,
                None if full <= 2 => full,
                None => rng.gen_range(2..=full),
            };
            let batch: Vec<SequenceSample> = chunk.iter().map(|&i| window(&train_set[i], len, &mut rng)).collect();
            let (loss, grad) = model.loss_and_gradient_any(&batch)?;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            epoch_loss += loss;
            batches += 1;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("model parameters at epoch {epoch}")));
        }
        train_loss.push(epoch_loss / batches as f64);
        let report = evaluate(&model, &val)?;
        let v = report.mean_axis_mae();
        val_mae.push(v);
        if v < best.0 {
            best = (v, model.clone(), epoch);
        }
    }
    Ok(TrainResult {
        model: best.1,
        train_loss,
        val_mae,
        best_epoch: best.2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-axis MAE, N.
    pub mae: [f64; 3],
    /// MAE of the force magnitude, N.
    pub total_mae: f64,
    /// Per-axis R²; `None` when the labels have zero variance.
    pub r2: [Option<f64>; 3],
    pub count: usize,
}

impl EvalReport {
    pub fn mean_axis_mae(&self) -> f64 {
        self.mae.iter().sum::<f64>() / 3.0
    }

    /// Scores prediction/label pairs.
    pub fn from_pairs(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Self {
        let mut mae_v = [0.0; 3];
        let mut r2 = [None; 3];
        for a in 0..3 {
            let p: Vec<f64> = pred.iter().map(|v| v[a]).collect();
            let t: Vec<f64> = truth.iter().map(|v| v[a]).collect();
            mae_v[a] = mae(&p, &t);
            r2[a] = r_squared(&p, &t);
        }
        let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let pm: Vec<f64> = pred.iter().map(norm).collect();
        let tm: Vec<f64> = truth.iter().map(norm).collect();
        Self {
            mae: mae_v,
            total_mae: mae(&pm, &tm),
            r2,
            count: pred.len(),
        }
    }
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Coefficient of determination; `None` for constant labels.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return None;
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Runs every sequence in full and scores all frames.
pub fn evaluate(model: &ForceModel, dataset: &[SequenceSample]) -> Result<EvalReport> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in dataset {
        s.validate()?;
        pred.extend(model.forward(&s.frames)?);
        truth.extend_from_slice(&s.forces);
    }
    Ok(EvalReport::from_pairs(&pred, &truth))
}

// ---------------------------------------------------------------------------
// Material priors

/// Quadratic force-depth curves for loading and unloading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialPrior {
    pub material_id: String,
    /// `(c2, c1, c0)` of `F(d) = c2 d² + c1 d + c0`.
    pub loading: [f64; 3],
    pub unloading: [f64; 3],
    pub d_max: f64,
    pub rms_loading: f64,
    pub rms_unloading: f64,
}

fn poly(c: &[f64; 3], d: f64) -> f64 {
    (c[0] * d + c[1]) * d + c[2]
}

/// Phases fitted to the loading curve; shear phases are not fitted.
fn prior_branch(phase: Phase) -> Option<bool> {
    match phase {
        Phase::Rest | Phase::NormalIncrease => Some(true),
        Phase::NormalDecrease => Some(false),
        Phase::ShearIncrease | Phase::ShearDecrease => None,
    }
}

impl MaterialPrior {
    pub fn loading_force(&self, d: f64) -> f64 {
        poly(&self.loading, d)
    }

    pub fn unloading_force(&self, d: f64) -> f64 {
        poly(&self.unloading, d)
    }

    /// Curve used for a frame in `phase`: the loading curve while the
    /// indenter is pressing or dragging outwards, the unloading curve after.
    pub fn force(&self, phase: Phase, d: f64) -> f64 {
        if phase.is_loading() {
            self.loading_force(d)
        } else {
            self.unloading_force(d)
        }
    }

    /// True when loading stays above unloading (less `eps`) on `[0, d_max]`.
    pub fn hysteresis_ordered(&self, eps: f64) -> bool {
        (0..=50).all(|i| {
            let d = self.d_max * i as f64 / 50.0;
            self.loading_force(d) >= self.unloading_force(d) - eps
        })
    }
}

fn fit_quadratic(pts: &[(f64, f64)]) -> Result<([f64; 3], f64)> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(d, f) in pts {
        let v = Vector3::new(d * d, d, 1.0);
        ata += v * v.transpose();
        atb += v * f;
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("degenerate depth samples".into()))?;
    let c = [sol[0], sol[1], sol[2]];
    let rms = (pts.iter().map(|&(d, f)| (poly(&c, d) - f).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok((c, rms))
}

/// Least-squares quadratic per branch from `(depth mm, F_z N, phase)` samples.
pub fn fit_material_prior(material_id: &str, samples: &[(f64, f64, Phase)]) -> Result<MaterialPrior> {
    if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
        return Err(Error::NonFinite("material samples".into()));
    }
    let d_max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    if !(d_max > 0.0) {
        return Err(Error::invalid("material samples need positive depths"));
    }
    let mut fits = Vec::new();
    for loading in [true, false] {
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| prior_branch(s.2) == Some(loading))
            .map(|s| (s.0, s.1))
            .collect();
        let name = if loading { "loading" } else { "unloading" };
        if pts.len() < 3 {
            return Err(Error::invalid(format!("{name} branch has {} samples, need 3", pts.len())));
        }
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.5 * d_max {
            return Err(Error::invalid(format!("{name} samples span under half the depth range")));
        }
        let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 3 {
            return Err(Error::invalid(format!("{name} samples have fewer than 3 distinct depths")));
        }
        fits.push(fit_quadratic(&pts)?);
    }
    Ok(MaterialPrior {
        material_id: material_id.to_string(),
        loading: fits[0].0,
        unloading: fits[1].0,
        d_max,
        rms_loading: fits[0].1,
        rms_unloading: fits[1].1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompensationConfig {
    /// Denominator floor, N.
    pub floor: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Scale only `F_z`.
    pub normal_only: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            floor: 0.05,
            ratio_min: 0.1,
            ratio_max: 10.0,
            normal_only: false,
        }
    }
}

/// Ratio `F_tgt / F_src` at the same normalized depth.
pub fn compensation_ratio(
    depth: f64,
    phase: Phase,
    src: &MaterialPrior,
    tgt: &MaterialPrior,
    cfg: &CompensationConfig,
) -> f64 {
    let fs = src.force(phase, depth);
    let dt = if tgt.d_max == src.d_max {
        depth
    } else {
        depth / src.d_max * tgt.d_max
    };
    let ft = tgt.force(phase, dt);
    if ft == fs {
        return 1.0;
    }
    (ft / fs.max(cfg.floor)).clamp(cfg.ratio_min, cfg.ratio_max)
}

/// Rescales source labels to the target material.
pub fn compensate_labels(
    labels: &[[f64; 3]],
    depths: &[f64],
    phases: &[Phase],
    src: &MaterialPrior,
    tgt: &MaterialPrior,
    cfg: &CompensationConfig,
) -> Result<Vec<[f64; 3]>> {
    if labels.len() != depths.len() || labels.len() != phases.len() {
        return Err(Error::invalid("labels, depths and phases differ in length"));
    }
    Ok(labels
        .iter()
        .zip(depths)
        .zip(phases)
        .map(|((f, &d), &ph)| {
            let r = compensation_ratio(d, ph, src, tgt, cfg);
            if r == 1.0 {
                *f
            } else if cfg.normal_only {
                [f[0], f[1], r * f[2]]
            } else {
                [r * f[0], r * f[1], r * f[2]]
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorRow {
    material_id: String,
    phase: String,
    c2: f64,
    c1: f64,
    c0: f64,
    d_max_mm: f64,
    rms: f64,
}

pub fn write_priors(path: &Path, priors: &[MaterialPrior]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    for p in priors {
        for (phase, c, rms) in [("loading", p.loading, p.rms_loading), ("unloading", p.unloading, p.rms_unloading)] {
            w.serialize(PriorRow {
                material_id: p.material_id.clone(),
                phase: phase.to_string(),
                c2: c[0],
                c1: c[1],
                c0: c[2],
                d_max_mm: p.d_max,
                rms,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_priors(path: &Path) -> Result<Vec<MaterialPrior>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    let mut out: Vec<MaterialPrior> = Vec::new();
    for row in r.deserialize::<PriorRow>() {
        let row = row?;
        let loading = match row.phase.as_str() {
            "loading" => true,
            "unloading" => false,
            other => return Err(Error::invalid(format!("unknown prior phase `{other}`"))),
        };
        let idx = match out.iter().position(|p| p.material_id == row.material_id) {
            Some(i) => i,
            None => {
                out.push(MaterialPrior {
                    material_id: row.material_id.clone(),
                    loading: [f64::NAN; 3],
                    unloading: [f64::NAN; 3],
                    d_max: row.d_max_mm,
                    rms_loading: f64::NAN,
                    rms_unloading: f64::NAN,
                });
                out.len() - 1
            }
        };
        let p = &mut out[idx];
        if loading {
            p.loading = [row.c2, row.c1, row.c0];
            p.rms_loading = row.rms;
        } else {
            p.unloading = [row.c2, row.c1, row.c0];
            p.rms_unloading = row.rms;
        }
    }
    if let Some(p) = out.iter().find(|p| p.loading[0].is_nan() || p.unloading[0].is_nan()) {
        return Err(Error::invalid(format!("prior `{}` lacks a branch", p.material_id)));
    }
    Ok(out)
}

/// Inserts or replaces the prior with the same id; returns true on replace.
pub fn upsert_prior(priors: &mut Vec<MaterialPrior>, prior: MaterialPrior) -> bool {
    match priors.iter_mut().find(|p| p.material_id == prior.material_id) {
        Some(p) => {
            *p = prior;
            true
        }
        None => {
            priors.push(prior);
            false
        }
    }
}
