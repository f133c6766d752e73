//! Marker patterns, warping and binary tactile images.
//!
//! Patterns live in the sensor plane in millimetres with the face center at
//! the origin and y pointing up. [`CameraMap`] projects them orthographically
//! onto a 640x480 bitmap; [`rasterize`] fills disks with an integer inclusion
//! test so the output is bit-identical on every platform.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const IMAGE_WIDTH: usize = 640;
pub const IMAGE_HEIGHT: usize = 480;
const ROW_BYTES: usize = IMAGE_WIDTH / 8;

/// Markers must keep this clearance from the face edge in the reference pattern.
const EDGE_MARGIN_MM: f64 = 0.5;

/// Side of the square marker face, mm.
pub const FACE_MM: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MarkerFamily {
    /// Square lattice, variant 1..=4.
    Array(u8),
    /// Concentric rings, variant 1..=4.
    Circle(u8),
    /// 45°-rotated square lattice, variant 1..=4.
    Diamond(u8),
    /// 4x4 taxel layout.
    USkinGrid,
    /// 127 markers on a hexagonal layout.
    TacTipRing,
    /// 7x8 lattice of 56 markers.
    GelSightGrid,
}

impl MarkerFamily {
    /// The twelve reference families followed by the three sensor layouts.
    pub fn all() -> Vec<MarkerFamily> {
        let mut out = Vec::with_capacity(15);
        for k in 1..=4 {
            out.push(MarkerFamily::Array(k));
        }
        for k in 1..=4 {
            out.push(MarkerFamily::Circle(k));
        }
        for k in 1..=4 {
            out.push(MarkerFamily::Diamond(k));
        }
        out.extend([MarkerFamily::USkinGrid, MarkerFamily::GelSightGrid, MarkerFamily::TacTipRing]);
        out
    }

    pub fn name(&self) -> String {
        match self {
            MarkerFamily::Array(k) => format!("Array{k}"),
            MarkerFamily::Circle(k) => format!("Circle{k}"),
            MarkerFamily::Diamond(k) => format!("Diamond{k}"),
            MarkerFamily::USkinGrid => "uSkinGrid".into(),
            MarkerFamily::TacTipRing => "TacTipRing".into(),
            MarkerFamily::GelSightGrid => "GelSightGrid".into(),
        }
    }

    /// Parses a family name, ignoring ASCII case (`Array2`, `array2`).
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let variant = |rest: &str| -> Option<u8> {
            let k: u8 = rest.parse().ok()?;
            (1..=4).contains(&k).then_some(k)
        };
        let fam = match lower.as_str() {
            "uskingrid" => Some(MarkerFamily::USkinGrid),
            "tactipring" => Some(MarkerFamily::TacTipRing),
            "gelsightgrid" => Some(MarkerFamily::GelSightGrid),
            _ => {
                if let Some(r) = lower.strip_prefix("array") {
                    variant(r).map(MarkerFamily::Array)
                } else if let Some(r) = lower.strip_prefix("circle") {
                    variant(r).map(MarkerFamily::Circle)
                } else if let Some(r) = lower.strip_prefix("diamond") {
                    variant(r).map(MarkerFamily::Diamond)
                } else {
                    None
                }
            }
        };
        fam.ok_or_else(|| Error::invalid(format!("unknown marker family `{name}`")))
    }

    /// Default (pitch, radius) in mm.
    pub fn default_params(&self) -> (f64, f64) {
        const PITCH: [f64; 4] = [2.0, 2.5, 3.0, 3.5];
        let alt = |k: u8| if k % 2 == 1 { 0.4 } else { 0.5 };
        match *self {
            MarkerFamily::Array(k) | MarkerFamily::Circle(k) | MarkerFamily::Diamond(k) => {
                (PITCH[(k - 1) as usize], alt(k))
            }
            MarkerFamily::USkinGrid => (FACE_MM / 4.2, (300.0 / std::f64::consts::PI).sqrt() / 24.0),
            MarkerFamily::TacTipRing => (1.5, 0.4),
            MarkerFamily::GelSightGrid => (2.5, 0.5),
        }
    }

    /// Marker count fixed by the physical sensor, if any.
    pub fn fixed_count(&self) -> Option<usize> {
        match self {
            MarkerFamily::USkinGrid => Some(16),
            MarkerFamily::GelSightGrid => Some(56),
            MarkerFamily::TacTipRing => Some(127),
            _ => None,
        }
    }
}

impl fmt::Display for MarkerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl TryFrom<String> for MarkerFamily {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        MarkerFamily::parse(&s)
    }
}

impl From<MarkerFamily> for String {
    fn from(f: MarkerFamily) -> String {
        f.name()
    }
}

/// A filled disk. Units depend on context (mm in the sensor plane, px in images).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerPattern {
    pub family: MarkerFamily,
    pub pitch: f64,
    pub markers: Vec<Disk>,
    /// Width and height of the marker face, mm.
    pub active_area: [f64; 2],
}

/// Pattern definition file contents: `[pattern] family, pitch_mm, radius_mm`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub family: MarkerFamily,
    pub pitch_mm: Option<f64>,
    pub radius_mm: Option<f64>,
}

#[derive(Deserialize)]
struct PatternFile {
    pattern: PatternSpec,
}

impl PatternSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str::<PatternFile>(text)?.pattern)
    }

    pub fn build(&self) -> Result<MarkerPattern> {
        let (p, r) = self.family.default_params();
        make_pattern(self.family, self.pitch_mm.unwrap_or(p), self.radius_mm.unwrap_or(r))
    }
}

/// Builds the pattern with the family's default pitch and radius.
pub fn standard_pattern(family: MarkerFamily) -> MarkerPattern {
    let (p, r) = family.default_params();
    make_pattern(family, p, r).expect("default pattern parameters are valid")
}

/// Lays out markers of one family on the 20 mm face.
///
/// Array and Diamond use `pitch` as the nearest-neighbor spacing, Circle as
/// the ring spacing. Fails if markers would overlap or leave the face.
pub fn make_pattern(family: MarkerFamily, pitch: f64, radius: f64) -> Result<MarkerPattern> {
    if !(pitch.is_finite() && pitch > 0.0 && radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid("pitch and radius must be positive"));
    }
    if pitch <= 2.0 * radius {
        return Err(Error::invalid(format!(
            "pitch {pitch} mm <= marker diameter {} mm: markers overlap",
            2.0 * radius
        )));
    }
    let limit = 0.5 * FACE_MM - EDGE_MARGIN_MM - radius;
    let mut centers: Vec<[f64; 2]> = Vec::new();
    match family {
        MarkerFamily::Array(_) => {
            let n = (FACE_MM / pitch + 1e-9).floor() as i64;
            for j in 0..n {
                for i in 0..n {
                    let c = |k: i64| (k as f64 - 0.5 * (n - 1) as f64) * pitch;
                    centers.push([c(i), -c(j)]);
                }
            }
        }
        MarkerFamily::Diamond(_) => {
            let s = pitch / std::f64::consts::SQRT_2;
            let n = (limit / s).floor() as i64;
            for j in (-n..=n).rev() {
                for i in -n..=n {
                    if (i + j).rem_euclid(2) == 0 {
                        centers.push([i as f64 * s, j as f64 * s]);
                    }
                }
            }
        }
        MarkerFamily::Circle(_) => {
            centers.push([0.0, 0.0]);
            let mut ring = 1;
            while ring as f64 * pitch <= limit + 1e-9 {
                let rr = ring as f64 * pitch;
                let count = (2.0 * std::f64::consts::PI * ring as f64).floor() as usize;
                for k in 0..count {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                    centers.push([rr * a.cos(), rr * a.sin()]);
                }
                ring += 1;
            }
        }
        MarkerFamily::USkinGrid => {
            for gy in 0..4 {
                for gx in 0..4 {
                    centers.push([(gx as f64 - 1.5) * pitch, -(gy as f64 - 1.5) * pitch]);
                }
            }
        }
        MarkerFamily::GelSightGrid => {
            for j in 0..7 {
                for i in 0..8 {
                    centers.push([(i as f64 - 3.5) * pitch, -(j as f64 - 3.0) * pitch]);
                }
            }
        }
        MarkerFamily::TacTipRing => {
            // Hexagonal disk of six rings in axial coordinates.
            let n: i64 = 6;
            let h = 0.5 * 3f64.sqrt();
            for r in -n..=n {
                for q in -n..=n {
                    if (q + r).abs() <= n {
                        centers.push([(q as f64 + 0.5 * r as f64) * pitch, -(r as f64) * h * pitch]);
                    }
                }
            }
        }
    }
    let markers: Vec<Disk> = centers
        .into_iter()
        .map(|center| Disk { center, radius })
        .collect();
    let pattern = MarkerPattern {
        family,
        pitch,
        markers,
        active_area: [FACE_MM, FACE_MM],
    };
    pattern.validate()?;
    Ok(pattern)
}

impl MarkerPattern {
    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let hx = 0.5 * self.active_area[0];
        let hy = 0.5 * self.active_area[1];
        for m in &self.markers {
            if m.center[0].abs() + m.radius > hx + 1e-9 || m.center[1].abs() + m.radius > hy + 1e-9 {
                return Err(Error::invalid(format!(
                    "{} marker at ({:.2}, {:.2}) leaves the active area",
                    self.family, m.center[0], m.center[1]
                )));
            }
        }
        for (i, a) in self.markers.iter().enumerate() {
            for b in &self.markers[i + 1..] {
                let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
                if d <= a.radius + b.radius {
                    return Err(Error::invalid(format!("{} markers overlap", self.family)));
                }
            }
        }
        if let Some(n) = self.family.fixed_count() {
            if self.markers.len() != n {
                return Err(Error::invalid(format!(
                    "{} needs {n} markers, layout gives {}",
                    self.family,
                    self.markers.len()
                )));
            }
        }
        if self.markers.is_empty() {
            return Err(Error::invalid("pattern has no markers"));
        }
        Ok(())
    }
}

/// Moves each marker by the lateral field at its reference center and scales
/// its radius by `max(0.2, 1 + kappa * u_z / thickness)`.
pub fn warp_markers<F>(pattern: &MarkerPattern, field: F, kappa: f64, thickness: f64) -> Result<Vec<Disk>>
where
    F: Fn(f64, f64) -> Option<[f64; 3]>,
{
    pattern
        .markers
        .iter()
        .map(|m| {
            let [x, y] = m.center;
            let u = field(x, y).ok_or_else(|| {
                Error::invalid(format!("displacement field undefined at ({x:.3}, {y:.3}) mm"))
            })?;
            let scale = (1.0 + kappa * u[2] / thickness).max(0.2);
            Ok(Disk {
                center: [x + u[0], y + u[1]],
                radius: m.radius * scale,
            })
        })
        .collect()
}

/// Orthographic projection from the sensor plane (mm) to image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMap {
    pub px_per_mm: f64,
}

impl Default for CameraMap {
    fn default() -> Self {
        Self { px_per_mm: 24.0 }
    }
}

impl CameraMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.px_per_mm > 0.0) || self.px_per_mm * FACE_MM > IMAGE_HEIGHT as f64 {
            return Err(Error::invalid(format!(
                "{} px/mm does not fit the 20 mm face in {IMAGE_HEIGHT} px",
                self.px_per_mm
            )));
        }
        Ok(())
    }

    pub fn to_px(&self, x: f64, y: f64) -> [f64; 2] {
        [
            0.5 * IMAGE_WIDTH as f64 + self.px_per_mm * x,
            0.5 * IMAGE_HEIGHT as f64 - self.px_per_mm * y,
        ]
    }

    pub fn to_mm(&self, px: f64, py: f64) -> [f64; 2] {
        [
            (px - 0.5 * IMAGE_WIDTH as f64) / self.px_per_mm,
            (0.5 * IMAGE_HEIGHT as f64 - py) / self.px_per_mm,
        ]
    }

    pub fn disk_to_px(&self, d: &Disk) -> Disk {
        Disk {
            center: self.to_px(d.center[0], d.center[1]),
            radius: d.radius * self.px_per_mm,
        }
    }
}

/// A 640x480 bitmap, rows packed MSB-first; a set bit is marker foreground.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    bits: Vec<u8>,
}

impl fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryImage({}x{}, {} set)", IMAGE_WIDTH, IMAGE_HEIGHT, self.count_ones())
    }
}

impl Default for BinaryImage {
    fn default() -> Self {
        Self::new()
    }
}

impl BinaryImage {
    pub fn new() -> Self {
        Self {
            bits: vec![0; ROW_BYTES * IMAGE_HEIGHT],
        }
    }

    pub fn width(&self) -> usize {
        IMAGE_WIDTH
    }

    pub fn height(&self) -> usize {
        IMAGE_HEIGHT
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * ROW_BYTES + x / 8] & (0x80 >> (x % 8)) != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let b = &mut self.bits[y * ROW_BYTES + x / 8];
        if on {
            *b |= 0x80 >> (x % 8);
        } else {
            *b &= !(0x80 >> (x % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / (IMAGE_WIDTH * IMAGE_HEIGHT) as f64
    }

    /// Packed rows, identical to the P4 payload.
    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn to_pbm(&self) -> Vec<u8> {
        let header = format!("P4\n{IMAGE_WIDTH} {IMAGE_HEIGHT}\n");
        let mut out = Vec::with_capacity(header.len() + self.bits.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    /// Decodes P4, or P5 with gray < 128 (of 255) read as foreground.
    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = header_token(bytes, &mut pos)?;
        let is_p5 = match magic.as_str() {
            "P4" => false,
            "P5" => true,
            other => return Err(Error::Image(format!("unsupported magic `{other}`"))),
        };
        let w = header_number(bytes, &mut pos)?;
        let h = header_number(bytes, &mut pos)?;
        if w != IMAGE_WIDTH || h != IMAGE_HEIGHT {
            return Err(Error::Image(format!(
                "expected {IMAGE_WIDTH}x{IMAGE_HEIGHT}, got {w}x{h}"
            )));
        }
        let maxval = if is_p5 { header_number(bytes, &mut pos)? } else { 1 };
        if is_p5 && !(1..=255).contains(&maxval) {
            return Err(Error::Image(format!("unsupported P5 maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(pos) {
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Image("truncated header".into())),
        }
        let data = &bytes[pos..];
        let mut img = BinaryImage::new();
        if is_p5 {
            if data.len() < w * h {
                return Err(Error::Image(format!("P5 raster has {} of {} bytes", data.len(), w * h)));
            }
            for y in 0..h {
                for x in 0..w {
                    let g = data[y * w + x] as usize;
                    // Rescale to 8 bits before thresholding at 128.
                    if g * 255 < 128 * maxval {
                        img.set(x, y, true);
                    }
                }
            }
        } else {
            if data.len() < img.bits.len() {
                return Err(Error::Image(format!(
                    "P4 raster has {} of {} bytes",
                    data.len(),
                    img.bits.len()
                )));
            }
            img.bits.copy_from_slice(&data[..ROW_BYTES * IMAGE_HEIGHT]);
        }
        Ok(img)
    }

    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pbm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pnm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm(&bytes)
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&c) = bytes.get(*pos) {
                    *pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::Image("truncated header".into())),
        }
    }
    let start = *pos;
    while let Some(c) = bytes.get(*pos) {
        if c.is_ascii_whitespace() || *c == b'#' {
            break;
        }
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Image(format!("bad header field `{tok}`")))
}

/// Fixed-point scale for the inclusion test: 1/256 px.
const SUBPIXEL: f64 = 256.0;

/// Fills disks given in pixel coordinates. A pixel is set iff its center
/// `(i + 0.5, j + 0.5)` lies inside a disk; off-image parts are clipped.
pub fn rasterize_px(disks: &[Disk]) -> BinaryImage {
    let mut img = BinaryImage::new();
    for d in disks {
        if !(d.center[0].is_finite() && d.center[1].is_finite() && d.radius.is_finite()) || d.radius <= 0.0 {
            continue;
        }
        let cx = (d.center[0] * SUBPIXEL).round() as i64;
        let cy = (d.center[1] * SUBPIXEL).round() as i64;
        let r = (d.radius * SUBPIXEL).round() as i64;
        let r2 = r * r;
        let s = SUBPIXEL as i64;
        let x0 = ((cx - r).div_euclid(s) - 1).max(0);
        let x1 = ((cx + r).div_euclid(s) + 1).min(IMAGE_WIDTH as i64 - 1);
        let y0 = ((cy - r).div_euclid(s) - 1).max(0);
        let y1 = ((cy + r).div_euclid(s) + 1).min(IMAGE_HEIGHT as i64 - 1);
        for y in y0..=y1 {
            let dy = y * s + s / 2 - cy;
            for x in x0..=x1 {
                let dx = x * s + s / 2 - cx;
                if dx * dx + dy * dy <= r2 {
                    img.set(x as usize, y as usize, true);
                }
            }
        }
    }
    img
}

/// Projects sensor-plane disks (mm) through the camera and fills them.
pub fn rasterize(markers: &[Disk], cam: &CameraMap) -> BinaryImage {
    let px: Vec<Disk> = markers.iter().map(|d| cam.disk_to_px(d)).collect();
    rasterize_px(&px)
}
