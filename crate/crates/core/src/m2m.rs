//! Marker-to-marker image translation.
//!
//! The deformation seen by a source sensor is reconstructed as a dense
//! thin-plate-spline field (two lateral channels plus a log size channel)
//! from tracked marker displacements, then applied to the target sensor's
//! reference markers. Each target marker's pixel mask is warped on its own,
//! so an identity field reproduces the target reference image exactly.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::imaging::{BinaryImage, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::unify::{
    connected_components, marker_count_check, segment_markers, track_markers, track_markers_with_prior,
    DetectedMarker, MarkerSet, TrackedMarkers, DEFAULT_MAX_TRACK_DIST,
};
use crate::{Error, Result};

/// Default TPS regularization.
pub const DEFAULT_LAMBDA: f64 = 1e-3;
/// Share of the target reference markers the output must keep.
pub const QUALITY_GATE_FRACTION: f64 = 0.6;
/// Tracking below this matched fraction is a failure.
pub const MIN_MATCHED_FRACTION: f64 = 0.5;
/// Rounds of field-guided re-tracking.
const GUIDED_ROUNDS: usize = 3;

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Dense field `p -> (dx, dy, ln size_scale)` in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    /// Control points, px.
    pub control_points: Vec<[f64; 2]>,
    /// Kernel weights per control point and channel (dx, dy, ln s).
    pub weights: Vec<[f64; 3]>,
    /// Affine part per channel: `c0 + c1 x' + c2 y'` in normalized coordinates.
    pub affine: [[f64; 3]; 3],
    pub lambda: f64,
    /// Coordinates are normalized as `(p - center) / scale` before use.
    pub center: [f64; 2],
    pub scale: f64,
}

impl DisplacementField {
    /// The field that moves nothing.
    pub fn identity() -> Self {
        Self {
            control_points: Vec::new(),
            weights: Vec::new(),
            affine: [[0.0; 3]; 3],
            lambda: 0.0,
            center: [0.0, 0.0],
            scale: 1.0,
        }
    }

    fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale]
    }

    /// Raw channel values at `p` (lateral px, log size).
    pub fn channels(&self, p: [f64; 2]) -> [f64; 3] {
        let q = self.normalize(p);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = self.affine[c][0] + self.affine[c][1] * q[0] + self.affine[c][2] * q[1];
        }
        for (cp, w) in self.control_points.iter().zip(&self.weights) {
            let n = self.normalize(*cp);
            let u = tps_kernel((q[0] - n[0]).powi(2) + (q[1] - n[1]).powi(2));
            for c in 0..3 {
                out[c] += w[c] * u;
            }
        }
        out
    }

    /// `(dx px, dy px, size_scale)` at `p`.
    pub fn eval(&self, p: [f64; 2]) -> (f64, f64, f64) {
        let c = self.channels(p);
        (c[0], c[1], c[2].exp())
    }

    /// Largest violation of the side conditions `sum w = 0`, `sum w x = 0`, `sum w y = 0`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for c in 0..3 {
            let mut m = [0.0; 3];
            for (cp, w) in self.control_points.iter().zip(&self.weights) {
                let n = self.normalize(*cp);
                m[0] += w[c];
                m[1] += w[c] * n[0];
                m[2] += w[c] * n[1];
            }
            worst = m.iter().fold(worst, |a, v| a.max(v.abs()));
        }
        worst
    }
}

/// Fits a regularized TPS through `values` at `points` (px).
pub fn fit_field(points: &[[f64; 2]], values: &[[f64; 3]], lambda: f64) -> Result<DisplacementField> {
    let n = points.len();
    if n != values.len() {
        return Err(Error::invalid("control point and value counts differ"));
    }
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 control points, got {n}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda must be finite and >= 0"));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite())
        || values.iter().any(|v| v.iter().any(|c| !c.is_finite()))
    {
        return Err(Error::NonFinite("control data".into()));
    }
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / n as f64,
        points.iter().map(|p| p[1]).sum::<f64>() / n as f64,
    ];
    // Collinearity test on the centered second-moment matrix.
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (x, y) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if tr <= 0.0 || det <= 1e-12 * tr * tr {
        return Err(Error::invalid("control points are collinear"));
    }
    let scale = points
        .iter()
        .map(|p| (p[0] - mean[0]).hypot(p[1] - mean[1]))
        .fold(0.0f64, f64::max);
    let mut field = DisplacementField {
        control_points: points.to_vec(),
        weights: vec![[0.0; 3]; n],
        affine: [[0.0; 3]; 3],
        lambda,
        center: mean,
        scale,
    };
    let q: Vec<[f64; 2]> = points.iter().map(|p| field.normalize(*p)).collect();
    // The kernel scales by scale² under normalization, so a pixel-unit λ
    // becomes λ / scale² in the normalized system.
    let lambda_n = lambda / (scale * scale);
    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = tps_kernel((q[i][0] - q[j][0]).powi(2) + (q[i][1] - q[j][1]).powi(2));
        }
        a[(i, i)] += lambda_n;
        let row = [1.0, q[i][0], q[i][1]];
        for k in 0..3 {
            a[(i, n + k)] = row[k];
            a[(n + k, i)] = row[k];
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(m, 3);
    for i in 0..n {
        for c in 0..3 {
            rhs[(i, c)] = values[i][c];
        }
    }
    let singular = || Error::Singular("TPS system is singular (duplicate control points?); try lambda > 0".into());
    let lu = a.clone().lu();
    let sol = lu.solve(&rhs).ok_or_else(singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    // Reject numerically singular systems whose solve "succeeded".
    let resid = (&a * &sol - &rhs).abs().max();
    if resid > 1e-6 * (1.0 + rhs.abs().max()) {
        return Err(singular());
    }
    for i in 0..n {
        for c in 0..3 {
            field.weights[i][c] = sol[(i, c)];
        }
    }
    for c in 0..3 {
        for k in 0..3 {
            field.affine[c][k] = sol[(n + k, c)];
        }
    }
    Ok(field)
}

/// Fits the field to tracked markers: lateral displacement and log radius ratio.
pub fn fit_displacement_field(tracked: &TrackedMarkers, lambda: f64) -> Result<DisplacementField> {
    let points: Vec<[f64; 2]> = tracked.pairs.iter().map(|p| tracked.ref_centroids[p.ref_index]).collect();
    let values: Vec<[f64; 3]> = tracked
        .pairs
        .iter()
        .map(|p| [p.displacement[0], p.displacement[1], p.radius_ratio.max(1e-6).ln()])
        .collect();
    fit_field(&points, &values, lambda)
}

/// Evaluates a field; see [`DisplacementField::eval`].
pub fn eval_displacement(field: &DisplacementField, point: [f64; 2]) -> (f64, f64, f64) {
    field.eval(point)
}

/// Normalization between two sensors' depth ranges and face sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthAlignment {
    pub source_zmax: f64,
    pub target_zmax: f64,
    /// Active-area side lengths, mm.
    pub source_area: f64,
    pub target_area: f64,
}

impl Default for DepthAlignment {
    fn default() -> Self {
        Self {
            source_zmax: 1.2,
            target_zmax: 1.2,
            source_area: 20.0,
            target_area: 20.0,
        }
    }
}

impl DepthAlignment {
    pub fn validate(&self) -> Result<()> {
        if [self.source_zmax, self.target_zmax, self.source_area, self.target_area]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::invalid("depth alignment values must be positive"))
        }
    }

    pub fn lateral_scale(&self) -> f64 {
        self.target_area / self.source_area
    }

    /// Source depth expressed at the same normalized depth on the target.
    pub fn target_depth(&self, source_depth: f64) -> f64 {
        source_depth / self.source_zmax * self.target_zmax
    }
}

/// Tracks `current` against `reference`, refining with the fitted field so
/// displacements beyond the matching radius are still paired.
pub fn track_guided(reference: &MarkerSet, current: &MarkerSet, lambda: f64) -> TrackedMarkers {
    let mut tracked = track_markers(reference, current, DEFAULT_MAX_TRACK_DIST);
    for _ in 0..GUIDED_ROUNDS {
        if tracked.unmatched_ref.is_empty() {
            break;
        }
        let Ok(field) = fit_displacement_field(&tracked, lambda) else {
            break;
        };
        let next = track_markers_with_prior(reference, current, DEFAULT_MAX_TRACK_DIST, |p| {
            let (dx, dy, _) = field.eval(p);
            [dx, dy]
        });
        if next.pairs.len() <= tracked.pairs.len() {
            break;
        }
        tracked = next;
    }
    tracked
}

/// Everything produced while translating one frame.
#[derive(Clone, Debug)]
pub struct Translation {
    pub image: BinaryImage,
    pub field: DisplacementField,
    pub matched_fraction: f64,
    pub markers_found: usize,
}

/// Translates the source deformation `(I0_src -> It_src)` onto the target reference image.
pub fn translate_image(
    it_src: &BinaryImage,
    i0_src: &BinaryImage,
    i0_tgt: &BinaryImage,
    align: &DepthAlignment,
    lambda: f64,
) -> Result<BinaryImage> {
    translate_image_detailed(it_src, i0_src, i0_tgt, align, lambda).map(|t| t.image)
}

pub fn translate_image_detailed(
    it_src: &BinaryImage,
    i0_src: &BinaryImage,
    i0_tgt: &BinaryImage,
    align: &DepthAlignment,
    lambda: f64,
) -> Result<Translation> {
    align.validate()?;
    let ref_src = segment_markers(i0_src);
    if ref_src.len() < 3 {
        return Err(Error::invalid(format!("source reference has {} markers, need 3", ref_src.len())));
    }
    let tgt_regions = connected_components(i0_tgt);
    let tgt_ref = segment_markers(i0_tgt);
    if tgt_ref.len() < 3 {
        return Err(Error::invalid(format!("target reference has {} markers, need 3", tgt_ref.len())));
    }
    let cur = segment_markers(it_src);

    let tracked = track_guided(&ref_src, &cur, lambda);
    let matched_fraction = tracked.matched_fraction();
    if matched_fraction < MIN_MATCHED_FRACTION {
        return Err(Error::Tracking {
            matched_fraction,
            min: MIN_MATCHED_FRACTION,
        });
    }
    let field = if tracked.pairs.iter().all(|p| p.displacement == [0.0, 0.0] && p.radius_ratio == 1.0) {
        DisplacementField::identity()
    } else {
        fit_displacement_field(&tracked, lambda)?
    };

    let s = align.lateral_scale();
    let center = [0.5 * IMAGE_WIDTH as f64, 0.5 * IMAGE_HEIGHT as f64];
    let mut out = BinaryImage::new();
    for region in &tgt_regions {
        let c = region_centroid(region);
        let src_p = [center[0] + (c[0] - center[0]) / s, center[1] + (c[1] - center[1]) / s];
        let (dx, dy, k) = field.eval(src_p);
        warp_mask(&mut out, region, c, [dx * s, dy * s], k);
    }

    let out_set = segment_markers(&out);
    let found = out_set.len();
    let required = (QUALITY_GATE_FRACTION * tgt_ref.len() as f64).ceil() as usize;
    if !marker_count_check(&out_set, required) {
        return Err(Error::QualityGate {
            found,
            required,
            partial: Box::new(out),
        });
    }
    Ok(Translation {
        image: out,
        field,
        matched_fraction,
        markers_found: found,
    })
}

fn region_centroid(pixels: &[(usize, usize)]) -> [f64; 2] {
    let n = pixels.len() as f64;
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64 + 0.5, b + y as f64 + 0.5));
    [sx / n, sy / n]
}

/// Draws `pixels` scaled by `k` about `c` and moved by `d`, sampling the
/// mask backwards with nearest-neighbor lookup.
fn warp_mask(out: &mut BinaryImage, pixels: &[(usize, usize)], c: [f64; 2], d: [f64; 2], k: f64) {
    let k = if k.is_finite() && k > 0.0 { k } else { 1.0 };
    if !(d[0].is_finite() && d[1].is_finite()) {
        return;
    }
    let x0 = pixels.iter().map(|p| p.0).min().unwrap();
    let x1 = pixels.iter().map(|p| p.0).max().unwrap();
    let y0 = pixels.iter().map(|p| p.1).min().unwrap();
    let y1 = pixels.iter().map(|p| p.1).max().unwrap();
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut mask = vec![false; w * h];
    for &(x, y) in pixels {
        mask[(y - y0) * w + (x - x0)] = true;
    }
    let fwd = |x: f64, cc: f64, dd: f64| cc + dd + k * (x - cc);
    let ox0 = fwd(x0 as f64, c[0], d[0]).floor() as i64 - 1;
    let ox1 = fwd((x1 + 1) as f64, c[0], d[0]).ceil() as i64 + 1;
    let oy0 = fwd(y0 as f64, c[1], d[1]).floor() as i64 - 1;
    let oy1 = fwd((y1 + 1) as f64, c[1], d[1]).ceil() as i64 + 1;
    for oy in oy0.max(0)..=oy1.min(IMAGE_HEIGHT as i64 - 1) {
        let sy = c[1] + (oy as f64 + 0.5 - c[1] - d[1]) / k;
        let iy = sy.floor() as i64 - y0 as i64;
        if iy < 0 || iy >= h as i64 {
            continue;
        }
        for ox in ox0.max(0)..=ox1.min(IMAGE_WIDTH as i64 - 1) {
            let sx = c[0] + (ox as f64 + 0.5 - c[0] - d[0]) / k;
            let ix = sx.floor() as i64 - x0 as i64;
            if ix >= 0 && ix < w as i64 && mask[iy as usize * w + ix as usize] {
                out.set(ox as usize, oy as usize, true);
            }
        }
    }
}

/// Marker displacement statistics between a generated and a true image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionError {
    /// `None` when nothing matched.
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub matched_fraction: f64,
}

pub fn marker_position_error(generated: &BinaryImage, truth: &BinaryImage) -> PositionError {
    let t = segment_markers(truth);
    let g = segment_markers(generated);
    marker_set_error(&g, &t)
}

/// As [`marker_position_error`] on already segmented sets.
pub fn marker_set_error(generated: &MarkerSet, truth: &MarkerSet) -> PositionError {
    let tracked = track_markers(truth, generated, DEFAULT_MAX_TRACK_DIST);
    let errs: Vec<f64> = tracked
        .pairs
        .iter()
        .map(|p| p.displacement[0].hypot(p.displacement[1]))
        .collect();
    if errs.is_empty() {
        return PositionError {
            mean: None,
            max: None,
            matched_fraction: 0.0,
        };
    }
    PositionError {
        mean: Some(errs.iter().sum::<f64>() / errs.len() as f64),
        max: Some(errs.iter().cloned().fold(0.0, f64::max)),
        matched_fraction: tracked.matched_fraction(),
    }
}

/// `|a & b| / |a | b|`, 1 when both are empty.
pub fn pixel_iou(a: &BinaryImage, b: &BinaryImage) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.packed().iter().zip(b.packed()) {
        inter += (x & y).count_ones() as usize;
        union += (x | y).count_ones() as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub mean_marker_error: f64,
    pub max_marker_error: f64,
    pub pixel_iou: f64,
    pub matched_fraction: f64,
}

impl TranslationReport {
    /// Compares a generated image against the true target render. Errors are
    /// NaN when no marker matched.
    pub fn compare(generated: &BinaryImage, truth: &BinaryImage) -> Self {
        let e = marker_position_error(generated, truth);
        Self {
            mean_marker_error: e.mean.unwrap_or(f64::NAN),
            max_marker_error: e.max.unwrap_or(f64::NAN),
            pixel_iou: pixel_iou(generated, truth),
            matched_fraction: e.matched_fraction,
        }
    }
}

/// Centroid of a marker set; used to anchor depth-normalized comparisons.
pub fn mean_centroid(set: &MarkerSet) -> Option<[f64; 2]> {
    if set.is_empty() {
        return None;
    }
    let n = set.len() as f64;
    let s = set
        .markers
        .iter()
        .fold([0.0, 0.0], |a, m: &DetectedMarker| [a[0] + m.centroid[0], a[1] + m.centroid[1]]);
    Some([s[0] / n, s[1] / n])
}

/// 2x3 least-squares affine map between matched sets, as a homogeneous matrix.
pub fn affine_between(tracked: &TrackedMarkers, current: &MarkerSet) -> Option<Matrix3<f64>> {
    if tracked.pairs.len() < 3 {
        return None;
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut atx = nalgebra::Vector3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for p in &tracked.pairs {
        let r = tracked.ref_centroids[p.ref_index];
        let c = current.markers[p.cur_index].centroid;
        let v = nalgebra::Vector3::new(r[0], r[1], 1.0);
        ata += v * v.transpose();
        atx += v * c[0];
        aty += v * c[1];
    }
    let inv = ata.try_inverse()?;
    let rx = inv * atx;
    let ry = inv * aty;
    Some(Matrix3::new(rx[0], rx[1], rx[2], ry[0], ry[1], ry[2], 0.0, 0.0, 1.0))
}
