//! From raw signals to comparable marker sets.
//!
//! Taxel arrays are turned into synthetic markers (one per taxel, displaced
//! by the lateral signal and sized by the normal signal). Binary images are
//! segmented in two stages: connected components first, then a
//! distance-transform watershed that splits merged blobs. Tracking pairs two
//! marker sets by greedy mutual-nearest-neighbor matching.

use std::collections::{BinaryHeap, VecDeque};
use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imaging::{BinaryImage, CameraMap, Disk, FACE_MM, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::{Error, Result};

/// One reading of a 4x4 taxel array, `readings[row][col] = (x, y, z)` raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct TaxelFrame {
    pub readings: [[[f64; 3]; 4]; 4],
    pub timestamp: f64,
}

impl TaxelFrame {
    pub fn zeros(timestamp: f64) -> Self {
        Self {
            readings: [[[0.0; 3]; 4]; 4],
            timestamp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.readings.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxelConfig {
    /// Grid units per raw unit, lateral.
    pub s_x: f64,
    pub s_y: f64,
    /// Pixel area per raw unit, normal.
    pub s_d: f64,
    /// Lateral offset limits, grid units.
    pub dx_max: f64,
    pub dy_max: f64,
    /// Marker pixel-area limits.
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for TaxelConfig {
    fn default() -> Self {
        Self {
            s_x: 2e-4,
            s_y: 2e-4,
            s_d: 0.2,
            dx_max: 0.6,
            dy_max: 0.6,
            d_min: 300.0,
            d_max: 6000.0,
        }
    }
}

/// Grid coordinates are clamped to this range (one offset beyond the outer taxels).
pub const TAXEL_GRID_RANGE: (f64, f64) = (-0.6, 3.6);

impl TaxelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::invalid("taxel areas need 0 < D_min < D_max"));
        }
        if !(self.dx_max > 0.0 && self.dy_max > 0.0) {
            return Err(Error::invalid("taxel offset limits must be positive"));
        }
        if ![self.s_x, self.s_y, self.s_d].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("taxel sensitivities must be finite"));
        }
        Ok(())
    }

    /// Millimetres per grid unit: the clamp range spans the whole face.
    pub fn grid_unit_mm(&self) -> f64 {
        FACE_MM / (TAXEL_GRID_RANGE.1 - TAXEL_GRID_RANGE.0)
    }

    pub fn grid_to_mm(&self, gx: f64, gy: f64) -> [f64; 2] {
        let u = self.grid_unit_mm();
        [(gx - 1.5) * u, -(gy - 1.5) * u]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedMarker {
    /// Pixel coordinates (x right, y down).
    pub centroid: [f64; 2],
    pub radius: f64,
    pub area: f64,
}

impl DetectedMarker {
    pub fn from_area(centroid: [f64; 2], area: f64) -> Self {
        Self {
            centroid,
            radius: (area / std::f64::consts::PI).sqrt(),
            area,
        }
    }

    pub fn disk(&self) -> Disk {
        Disk {
            center: self.centroid,
            radius: self.radius,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub markers: Vec<DetectedMarker>,
    pub image_dims: [usize; 2],
}

impl MarkerSet {
    pub fn new(markers: Vec<DetectedMarker>) -> Self {
        Self {
            markers,
            image_dims: [IMAGE_WIDTH, IMAGE_HEIGHT],
        }
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn disks(&self) -> Vec<Disk> {
        self.markers.iter().map(DetectedMarker::disk).collect()
    }
}

/// Converts one taxel frame into 16 pixel-space markers.
pub fn taxel_to_markers(frame: &TaxelFrame, reference: &TaxelFrame, cfg: &TaxelConfig, cam: &CameraMap) -> MarkerSet {
    let (lo, hi) = TAXEL_GRID_RANGE;
    let mut markers = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            let s = [
                frame.readings[i][j][0] - reference.readings[i][j][0],
                frame.readings[i][j][1] - reference.readings[i][j][1],
                frame.readings[i][j][2] - reference.readings[i][j][2],
            ];
            let gx = (j as f64 + clamp_nan(cfg.s_x * s[0], cfg.dx_max)).clamp(lo, hi);
            let gy = (i as f64 + clamp_nan(cfg.s_y * s[1], cfg.dy_max)).clamp(lo, hi);
            let raw_area = cfg.d_min + cfg.s_d * s[2];
            let area = if raw_area.is_nan() { cfg.d_min } else { raw_area.clamp(cfg.d_min, cfg.d_max) };
            let mm = cfg.grid_to_mm(gx, gy);
            markers.push(DetectedMarker::from_area(cam.to_px(mm[0], mm[1]), area));
        }
    }
    MarkerSet::new(markers)
}

/// `clamp(v, -limit, limit)` with NaN mapped to 0.
fn clamp_nan(v: f64, limit: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-limit, limit)
    }
}

/// Components smaller than this are noise.
pub const MIN_COMPONENT_AREA: usize = 4;
/// Components larger than this multiple of the median area go to the fine stage.
pub const SPLIT_AREA_RATIO: f64 = 2.5;
/// A component whose area exceeds this multiple of its largest inscribed
/// disk is not a single disk and also goes to the fine stage.
const SPLIT_SHAPE_RATIO: f64 = 1.6;
/// Dynamic (px) a distance-transform peak needs to seed its own region.
const SEED_DYNAMIC_PX: f64 = 1.0;

/// Segments a binary tactile image into markers.
pub fn segment_markers(img: &BinaryImage) -> MarkerSet {
    let comps = connected_components(img);
    if comps.is_empty() {
        return MarkerSet::new(Vec::new());
    }
    let mut areas: Vec<usize> = comps.iter().map(|c| c.len()).collect();
    areas.sort_unstable();
    let median = if areas.len() % 2 == 1 {
        areas[areas.len() / 2] as f64
    } else {
        0.5 * (areas[areas.len() / 2 - 1] + areas[areas.len() / 2]) as f64
    };

    let mut markers = Vec::new();
    for comp in &comps {
        let big = comp.len() as f64 > SPLIT_AREA_RATIO * median;
        let patch = Patch::new(comp);
        let dist = patch.distance_transform();
        let peak = dist.iter().cloned().fold(0.0f64, f64::max);
        let elongated = comp.len() as f64 > SPLIT_SHAPE_RATIO * std::f64::consts::PI * peak * peak;
        if big || elongated {
            for region in patch.watershed(&dist) {
                if region.len() >= MIN_COMPONENT_AREA {
                    markers.push(region_marker(&region));
                }
            }
        } else {
            markers.push(region_marker(comp));
        }
    }
    MarkerSet::new(markers)
}

fn region_marker(pixels: &[(usize, usize)]) -> DetectedMarker {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64 + 0.5, b + y as f64 + 0.5));
    DetectedMarker::from_area([sx / n, sy / n], n)
}

/// 8-connected foreground components in raster order of their first pixel,
/// with noise-sized components dropped.
pub fn connected_components(img: &BinaryImage) -> Vec<Vec<(usize, usize)>> {
    let (w, h) = (IMAGE_WIDTH, IMAGE_HEIGHT);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !img.get(x, y) {
                continue;
            }
            seen[y * w + x] = true;
            queue.push_back((x, y));
            let mut comp = Vec::new();
            while let Some((cx, cy)) = queue.pop_front() {
                comp.push((cx, cy));
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        let k = ny * w + nx;
                        if !seen[k] && img.get(nx, ny) {
                            seen[k] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            if comp.len() >= MIN_COMPONENT_AREA {
                comp.sort_unstable_by_key(|&(x, y)| (y, x));
                out.push(comp);
            }
        }
    }
    out
}

/// A component cut out into its own padded bounding box.
struct Patch {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    inside: Vec<bool>,
}

impl Patch {
    fn new(pixels: &[(usize, usize)]) -> Self {
        let x0 = pixels.iter().map(|p| p.0).min().unwrap();
        let x1 = pixels.iter().map(|p| p.0).max().unwrap();
        let y0 = pixels.iter().map(|p| p.1).min().unwrap();
        let y1 = pixels.iter().map(|p| p.1).max().unwrap();
        // One pixel of background on every side; the origin may sit off-image.
        let (w, h) = (x1 - x0 + 3, y1 - y0 + 3);
        let mut inside = vec![false; w * h];
        for &(x, y) in pixels {
            inside[(y - y0 + 1) * w + (x - x0 + 1)] = true;
        }
        Self { x0, y0, w, h, inside }
    }

    /// Euclidean distance from each inside pixel to the nearest outside pixel.
    fn distance_transform(&self) -> Vec<f64> {
        // Larger than any squared distance in the patch, and exact in f64.
        let inf = (4 * (self.w + self.h) * (self.w + self.h)) as f64;
        let mut f: Vec<f64> = self.inside.iter().map(|&i| if i { inf } else { 0.0 }).collect();
        let mut buf = vec![0.0; self.w.max(self.h)];
        let mut out = vec![0.0; self.w.max(self.h)];
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y] = f[y * self.w + x];
            }
            edt_1d(&buf[..self.h], &mut out[..self.h]);
            for y in 0..self.h {
                f[y * self.w + x] = out[y];
            }
        }
        for y in 0..self.h {
            let row = &mut f[y * self.w..(y + 1) * self.w];
            buf[..self.w].copy_from_slice(row);
            edt_1d(&buf[..self.w], &mut out[..self.w]);
            row.copy_from_slice(&out[..self.w]);
        }
        f.iter().map(|v| v.sqrt()).collect()
    }

    fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((k % self.w) as i64, (k / self.w) as i64);
        (-1..=1i64).flat_map(move |dy| {
            (-1..=1i64).filter_map(move |dx| {
                let (nx, ny) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= self.w as i64 || ny >= self.h as i64 {
                    None
                } else {
                    Some(ny as usize * self.w + nx as usize)
                }
            })
        })
    }

    /// Seeded watershed on the negated distance map. Seeds are the regional
    /// maxima of the h-maxima transform, so shallow bumps do not split.
    fn watershed(&self, dist: &[f64]) -> Vec<Vec<(usize, usize)>> {
        let n = self.w * self.h;
        // Reconstruction by dilation of (dist - h) under dist.
        let mut rec: Vec<f64> = dist
            .iter()
            .zip(&self.inside)
            .map(|(&d, &i)| if i { (d - SEED_DYNAMIC_PX).max(0.0) } else { 0.0 })
            .collect();
        loop {
            let mut changed = false;
            for k in 0..n {
                if !self.inside[k] {
                    continue;
                }
                let mut m = rec[k];
                for j in self.neighbors(k) {
                    m = m.max(rec[j]);
                }
                let v = m.min(dist[k]);
                if v > rec[k] {
                    rec[k] = v;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // Regional maxima of the reconstruction become seed labels.
        let mut label = vec![0usize; n];
        let mut next = 0usize;
        let mut visited = vec![false; n];
        for k in 0..n {
            if !self.inside[k] || visited[k] {
                continue;
            }
            let v = rec[k];
            let mut plateau = vec![k];
            let mut stack = vec![k];
            visited[k] = true;
            let mut is_max = true;
            while let Some(p) = stack.pop() {
                for j in self.neighbors(p) {
                    if !self.inside[j] {
                        continue;
                    }
                    if rec[j] > v {
                        is_max = false;
                    } else if rec[j] == v && !visited[j] {
                        visited[j] = true;
                        plateau.push(j);
                        stack.push(j);
                    }
                }
            }
            if is_max {
                next += 1;
                for p in plateau {
                    label[p] = next;
                }
            }
        }
        // Priority flood: highest distance first, ties in insertion order.
        let mut heap = BinaryHeap::new();
        let mut counter = 0u64;
        for k in 0..n {
            if label[k] != 0 {
                for j in self.neighbors(k) {
                    if self.inside[j] && label[j] == 0 {
                        heap.push(FloodItem { value: dist[j], order: counter, idx: j, from: label[k] });
                        counter += 1;
                    }
                }
            }
        }
        while let Some(item) = heap.pop() {
            if label[item.idx] != 0 {
                continue;
            }
            label[item.idx] = item.from;
            for j in self.neighbors(item.idx) {
                if self.inside[j] && label[j] == 0 {
                    heap.push(FloodItem { value: dist[j], order: counter, idx: j, from: item.from });
                    counter += 1;
                }
            }
        }
        let mut regions = vec![Vec::new(); next];
        for k in 0..n {
            if self.inside[k] && label[k] > 0 {
                let (px, py) = (k % self.w, k / self.w);
                regions[label[k] - 1].push((self.x0 + px - 1, self.y0 + py - 1));
            }
        }
        regions
    }
}

struct FloodItem {
    value: f64,
    order: u64,
    idx: usize,
    from: usize,
}

impl PartialEq for FloodItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for FloodItem {}
impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FloodItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.order.cmp(&self.order))
    }
}

/// Squared 1-D distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let meet = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        d[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub ref_index: usize,
    pub cur_index: usize,
    /// `cur - ref` centroid, px.
    pub displacement: [f64; 2],
    pub radius_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackedMarkers {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_ref: Vec<usize>,
    pub unmatched_cur: Vec<usize>,
    /// Reference centroids, px, indexed by `ref_index`.
    pub ref_centroids: Vec<[f64; 2]>,
}

impl TrackedMarkers {
    /// Matched share of the reference markers (0 for an empty reference).
    pub fn matched_fraction(&self) -> f64 {
        let n = self.ref_centroids.len();
        if n == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / n as f64
        }
    }
}

/// Default matching radius, px.
pub const DEFAULT_MAX_TRACK_DIST: f64 = 15.0;

/// Greedy mutual-nearest-neighbor matching within `max_dist` px.
pub fn track_markers(reference: &MarkerSet, current: &MarkerSet, max_dist: f64) -> TrackedMarkers {
    track_markers_with_prior(reference, current, max_dist, |_| [0.0, 0.0])
}

/// Like [`track_markers`], but each reference marker is first moved by
/// `predict(centroid)`; the distance limit applies to the residual.
pub fn track_markers_with_prior<P>(reference: &MarkerSet, current: &MarkerSet, max_dist: f64, predict: P) -> TrackedMarkers
where
    P: Fn([f64; 2]) -> [f64; 2],
{
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    let max2 = max_dist * max_dist;
    for (i, r) in reference.markers.iter().enumerate() {
        let off = predict(r.centroid);
        let (px, py) = (r.centroid[0] + off[0], r.centroid[1] + off[1]);
        for (j, c) in current.markers.iter().enumerate() {
            let d2 = (c.centroid[0] - px).powi(2) + (c.centroid[1] - py).powi(2);
            if d2 <= max2 {
                cand.push((d2, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ref_used = vec![false; reference.len()];
    let mut cur_used = vec![false; current.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if ref_used[i] || cur_used[j] {
            continue;
        }
        ref_used[i] = true;
        cur_used[j] = true;
        let (r, c) = (&reference.markers[i], &current.markers[j]);
        pairs.push(MatchedPair {
            ref_index: i,
            cur_index: j,
            displacement: [c.centroid[0] - r.centroid[0], c.centroid[1] - r.centroid[1]],
            radius_ratio: c.radius / r.radius,
        });
    }
    pairs.sort_by_key(|p| p.ref_index);
    TrackedMarkers {
        pairs,
        unmatched_ref: (0..reference.len()).filter(|&i| !ref_used[i]).collect(),
        unmatched_cur: (0..current.len()).filter(|&j| !cur_used[j]).collect(),
        ref_centroids: reference.markers.iter().map(|m| m.centroid).collect(),
    }
}

/// Generation quality gate: at least `min_count` markers.
pub fn marker_count_check(set: &MarkerSet, min_count: usize) -> bool {
    set.len() >= min_count
}

/// Reads a taxel log: `timestamp_s` followed by 48 columns `t00x .. t33z`.
pub fn read_taxel_log(path: &Path) -> Result<Vec<TaxelFrame>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = taxel_log_header();
    if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::invalid(format!(
            "{}: taxel log header must be timestamp_s,t00x,...,t33z",
            path.display()
        )));
    }
    let mut frames = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("{} row {}: {e}", path.display(), row + 1)))?;
        let mut f = TaxelFrame::zeros(vals[0]);
        for (k, v) in vals[1..].iter().enumerate() {
            f.readings[k / 12][(k / 3) % 4][k % 3] = *v;
        }
        if !f.is_finite() {
            return Err(Error::invalid(format!("{} row {}: non-finite reading", path.display(), row + 1)));
        }
        frames.push(f);
    }
    Ok(frames)
}

pub fn write_taxel_log(path: &Path, frames: &[TaxelFrame]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(taxel_log_header())?;
    for f in frames {
        let mut row = vec![f.timestamp.to_string()];
        for r in &f.readings {
            for t in r {
                row.extend(t.iter().map(|v| v.to_string()));
            }
        }
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn taxel_log_header() -> Vec<String> {
    let mut h = vec!["timestamp_s".to_string()];
    for i in 0..4 {
        for j in 0..4 {
            for a in ["x", "y", "z"] {
                h.push(format!("t{i}{j}{a}"));
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{rasterize_px, standard_pattern, MarkerFamily};
    use proptest::prelude::*;

    fn cam() -> CameraMap {
        CameraMap::default()
    }

    #[test]
    fn zero_signal_gives_base_grid() {
        let cfg = TaxelConfig::default();
        let f = TaxelFrame::zeros(0.0);
        let set = taxel_to_markers(&f, &f, &cfg, &cam());
        assert_eq!(set.len(), 16);
        let pattern = standard_pattern(MarkerFamily::USkinGrid);
        for (m, p) in set.markers.iter().zip(&pattern.markers) {
            assert_eq!(m.area, 300.0);
            let c = cam().to_px(p.center[0], p.center[1]);
            assert!((m.centroid[0] - c[0]).abs() < 1e-9 && (m.centroid[1] - c[1]).abs() < 1e-9);
            assert!((m.radius - p.radius * 24.0).abs() < 1e-9);
        }
    }

    #[test]
    fn saturation_clamps_exactly() {
        let cfg = TaxelConfig::default();
        let base = TaxelFrame::zeros(0.0);
        let mut f = base.clone();
        f.readings[1][2] = [3000.0, -1e9, 1e12];
        let set = taxel_to_markers(&f, &base, &cfg, &cam());
        let m = set.markers[1 * 4 + 2];
        let expect = cfg.grid_to_mm(2.0 + 0.6, 1.0 - 0.6);
        let px = cam().to_px(expect[0], expect[1]);
        assert!((m.centroid[0] - px[0]).abs() < 1e-9);
        assert!((m.centroid[1] - px[1]).abs() < 1e-9);
        assert_eq!(m.area, 6000.0);
    }

    #[test]
    fn doubling_sensitivity_doubles_offset() {
        let base = TaxelFrame::zeros(0.0);
        let mut f = base.clone();
        f.readings[0][0] = [500.0, 250.0, 0.0];
        let c1 = TaxelConfig::default();
        let c2 = TaxelConfig { s_x: 2.0 * c1.s_x, s_y: 2.0 * c1.s_y, ..c1.clone() };
        let rest = taxel_to_markers(&base, &base, &c1, &cam()).markers[0].centroid;
        let a = taxel_to_markers(&f, &base, &c1, &cam()).markers[0].centroid;
        let b = taxel_to_markers(&f, &base, &c2, &cam()).markers[0].centroid;
        for k in 0..2 {
            assert!(((b[k] - rest[k]) - 2.0 * (a[k] - rest[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn blank_image_segments_to_nothing() {
        assert!(segment_markers(&BinaryImage::new()).is_empty());
    }

    #[test]
    fn single_disk_round_trip() {
        let img = rasterize_px(&[Disk { center: [100.0, 200.0], radius: 5.0 }]);
        let set = segment_markers(&img);
        assert_eq!(set.len(), 1);
        let m = set.markers[0];
        assert!((m.centroid[0] - 100.0).abs() <= 0.5 && (m.centroid[1] - 200.0).abs() <= 0.5);
        assert!((m.radius - (m.area / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dumbbell_splits_in_two() {
        let img = rasterize_px(&[
            Disk { center: [200.0, 200.0], radius: 5.0 },
            Disk { center: [209.0, 200.0], radius: 5.0 },
        ]);
        assert_eq!(connected_components(&img).len(), 1);
        let set = segment_markers(&img);
        assert_eq!(set.len(), 2);
        let mut xs: Vec<f64> = set.markers.iter().map(|m| m.centroid[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 200.0).abs() < 1.5 && (xs[1] - 209.0).abs() < 1.5);
    }

    #[test]
    fn tiny_specks_are_dropped() {
        let mut img = BinaryImage::new();
        img.set(10, 10, true);
        img.set(11, 10, true);
        img.set(10, 11, true);
        assert!(segment_markers(&img).is_empty());
    }

    #[test]
    fn edt_matches_brute_force() {
        let pix: Vec<(usize, usize)> = (0..9).flat_map(|y| (0..13).map(move |x| (x + 20, y + 30)))
            .filter(|&(x, y)| (x as i64 - 26).pow(2) + (y as i64 - 34).pow(2) < 30 || x < 23)
            .collect();
        let patch = Patch::new(&pix);
        let dt = patch.distance_transform();
        for k in 0..patch.w * patch.h {
            let (x, y) = ((k % patch.w) as f64, (k / patch.w) as f64);
            let mut best = f64::INFINITY;
            for j in 0..patch.w * patch.h {
                if !patch.inside[j] {
                    let (bx, by) = ((j % patch.w) as f64, (j / patch.w) as f64);
                    best = best.min((x - bx).hypot(y - by));
                }
            }
            let expect = if patch.inside[k] { best } else { 0.0 };
            assert!((dt[k] - expect).abs() < 1e-9, "pixel {k}: {} vs {expect}", dt[k]);
        }
    }

    #[test]
    fn tracking_identity_shift_and_missing() {
        let pat = standard_pattern(MarkerFamily::Array(2));
        let set = segment_markers(&crate::imaging::rasterize(&pat.markers, &cam()));
        let t = track_markers(&set, &set, 15.0);
        assert_eq!(t.pairs.len(), set.len());
        assert!(t.pairs.iter().all(|p| p.displacement == [0.0, 0.0] && p.radius_ratio == 1.0));

        let shifted = MarkerSet::new(set.markers.iter().map(|m| DetectedMarker { centroid: [m.centroid[0] + 3.0, m.centroid[1]], ..*m }).collect());
        let t = track_markers(&set, &shifted, 10.0);
        assert_eq!(t.pairs.len(), set.len());
        assert!(t.pairs.iter().all(|p| (p.displacement[0] - 3.0).abs() < 1e-9 && p.displacement[1].abs() < 1e-9));

        let mut missing = set.clone();
        missing.markers.remove(5);
        let t = track_markers(&set, &missing, 15.0);
        assert_eq!(t.unmatched_ref, vec![5]);
        assert!(t.unmatched_cur.is_empty());
    }

    #[test]
    fn count_gate() {
        let tactip = standard_pattern(MarkerFamily::TacTipRing);
        let set = segment_markers(&crate::imaging::rasterize(&tactip.markers, &cam()));
        assert!(marker_count_check(&set, 80));
        assert!(!marker_count_check(&MarkerSet::default(), 1));
        let uskin = standard_pattern(MarkerFamily::USkinGrid);
        let set = segment_markers(&crate::imaging::rasterize(&uskin.markers, &cam()));
        assert!(marker_count_check(&set, 16));
    }

    #[test]
    fn taxel_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut f = TaxelFrame::zeros(0.5);
        f.readings[3][1] = [1.5, -2.0, 7.25];
        write_taxel_log(&path, &[TaxelFrame::zeros(0.0), f.clone()]).unwrap();
        let back = read_taxel_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], f);
        std::fs::write(&path, "time,a\n0,1\n").unwrap();
        assert!(read_taxel_log(&path).is_err());
    }

    proptest! {
        #[test]
        fn taxel_outputs_stay_in_range(vals in proptest::collection::vec(prop_oneof![any::<f64>(), -1e6f64..1e6], 48)) {
            let cfg = TaxelConfig::default();
            let mut f = TaxelFrame::zeros(0.0);
            for (k, v) in vals.iter().enumerate() {
                f.readings[k / 12][(k / 3) % 4][k % 3] = *v;
            }
            let set = taxel_to_markers(&f, &TaxelFrame::zeros(0.0), &cfg, &cam());
            prop_assert_eq!(set.len(), 16);
            let u = cfg.grid_unit_mm() * 24.0;
            for m in &set.markers {
                prop_assert!(m.area >= cfg.d_min && m.area <= cfg.d_max);
                let gx = (m.centroid[0] - 320.0) / u + 1.5;
                let gy = (m.centroid[1] - 240.0) / u + 1.5;
                prop_assert!(gx >= -0.6 - 1e-9 && gx <= 3.6 + 1e-9);
                prop_assert!(gy >= -0.6 - 1e-9 && gy <= 3.6 + 1e-9);
            }
        }

        #[test]
        fn rigid_shift_is_recovered(dx in -6.0f64..6.0, dy in -6.0f64..6.0) {
            let pat = standard_pattern(MarkerFamily::Array(3));
            let set = MarkerSet::new(pat.markers.iter().map(|d| {
                let c = cam().to_px(d.center[0], d.center[1]);
                DetectedMarker::from_area(c, 100.0)
            }).collect());
            let moved = MarkerSet::new(set.markers.iter().map(|m| DetectedMarker { centroid: [m.centroid[0] + dx, m.centroid[1] + dy], ..*m }).collect());
            let t = track_markers(&set, &moved, 15.0);
            prop_assert_eq!(t.pairs.len(), set.len());
            for p in &t.pairs {
                prop_assert_eq!(p.ref_index, p.cur_index);
                prop_assert!((p.displacement[0] - dx).abs() < 1e-9 && (p.displacement[1] - dy).abs() < 1e-9);
            }
        }
    }
}
