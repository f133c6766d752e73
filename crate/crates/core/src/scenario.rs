//! Indenter geometry and contact trajectories.
//!
//! Indenters are rigid solids described by signed-distance functions in a
//! local frame whose lowest point (the tip) sits at the origin and whose body
//! extends upward (+z). A [`Pose`] places the tip in sensor coordinates:
//! x/y in the marker-face plane with the origin at the face center, z measured
//! from the undeformed elastomer surface (z = 0 on the surface, negative below).

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Half-extent of the square elastomer face, mm.
pub const FACE_HALF_MM: f64 = 10.0;

/// Height above the surface at which a trajectory starts, mm.
pub const APPROACH_CLEARANCE_MM: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndenterKind {
    Sphere,
    Cylinder,
    Prism,
    Cone,
    Wave,
    Torus,
    TrianglePrism,
    PacmanPrism,
    Hemisphere,
    Capsule,
    Pyramid,
    CrossPrism,
    HexPrism,
    Ring,
    DomeArray,
    Edge,
    StarPrism,
    Ellipsoid,
}

impl IndenterKind {
    pub const ALL: [IndenterKind; 18] = [
        IndenterKind::Sphere,
        IndenterKind::Cylinder,
        IndenterKind::Prism,
        IndenterKind::Cone,
        IndenterKind::Wave,
        IndenterKind::Torus,
        IndenterKind::TrianglePrism,
        IndenterKind::PacmanPrism,
        IndenterKind::Hemisphere,
        IndenterKind::Capsule,
        IndenterKind::Pyramid,
        IndenterKind::CrossPrism,
        IndenterKind::HexPrism,
        IndenterKind::Ring,
        IndenterKind::DomeArray,
        IndenterKind::Edge,
        IndenterKind::StarPrism,
        IndenterKind::Ellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndenterKind::Sphere => "sphere",
            IndenterKind::Cylinder => "cylinder",
            IndenterKind::Prism => "prism",
            IndenterKind::Cone => "cone",
            IndenterKind::Wave => "wave",
            IndenterKind::Torus => "torus",
            IndenterKind::TrianglePrism => "triangle-prism",
            IndenterKind::PacmanPrism => "pacman-prism",
            IndenterKind::Hemisphere => "hemisphere",
            IndenterKind::Capsule => "capsule",
            IndenterKind::Pyramid => "pyramid",
            IndenterKind::CrossPrism => "cross-prism",
            IndenterKind::HexPrism => "hex-prism",
            IndenterKind::Ring => "ring",
            IndenterKind::DomeArray => "dome-array",
            IndenterKind::Edge => "edge",
            IndenterKind::StarPrism => "star-prism",
            IndenterKind::Ellipsoid => "ellipsoid",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::UnknownIndenter(name.to_string()))
    }

    /// Number of entries expected in [`IndenterSpec::dims`].
    fn dim_count(self) -> usize {
        match self {
            IndenterKind::Sphere | IndenterKind::Hemisphere => 1,
            IndenterKind::Cylinder
            | IndenterKind::Cone
            | IndenterKind::Torus
            | IndenterKind::TrianglePrism
            | IndenterKind::Capsule
            | IndenterKind::Pyramid
            | IndenterKind::HexPrism
            | IndenterKind::DomeArray => 2,
            IndenterKind::Prism
            | IndenterKind::PacmanPrism
            | IndenterKind::CrossPrism
            | IndenterKind::Ring
            | IndenterKind::Edge
            | IndenterKind::StarPrism
            | IndenterKind::Ellipsoid => 3,
            IndenterKind::Wave => 5,
        }
    }
}

impl fmt::Display for IndenterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One catalog indenter. `dims` are in mm, their meaning depends on `kind`:
///
/// | kind | dims |
/// |---|---|
/// | sphere, hemisphere | radius |
/// | cylinder, capsule | radius, length (axis along local x) |
/// | prism | width x, width y, height |
/// | cone, pyramid | base radius / base side, height (apex down) |
/// | wave | width x, width y, height, amplitude, wavelength |
/// | torus | major radius, minor radius (axis vertical) |
/// | triangle-prism, hex-prism | side / circumradius, height |
/// | pacman-prism | radius, mouth angle (deg), height |
/// | cross-prism | arm length, arm width, height |
/// | ring | outer radius, inner radius, height |
/// | dome-array | dome radius, pitch (2x2 domes) |
/// | edge | top width, height, length (knife edge along local y) |
/// | star-prism | outer radius, inner radius, height |
/// | ellipsoid | semi-axes a, b, c |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndenterSpec {
    pub id: String,
    pub kind: IndenterKind,
    pub dims: Vec<f64>,
    pub seen: bool,
}

impl IndenterSpec {
    pub fn new(kind: IndenterKind, dims: &[f64], seen: bool) -> Self {
        Self {
            id: kind.name().to_string(),
            kind,
            dims: dims.to_vec(),
            seen,
        }
    }

    /// Horizontal radius of the smallest vertical cylinder around the tip axis
    /// that contains the solid.
    pub fn bounding_radius(&self) -> f64 {
        let d = &self.dims;
        match self.kind {
            IndenterKind::Sphere | IndenterKind::Hemisphere => d[0],
            IndenterKind::Cylinder | IndenterKind::Capsule => {
                let half = if self.kind == IndenterKind::Capsule {
                    0.5 * d[1] + d[0]
                } else {
                    0.5 * d[1]
                };
                half.hypot(d[0])
            }
            IndenterKind::Prism | IndenterKind::Wave => (0.5 * d[0]).hypot(0.5 * d[1]),
            IndenterKind::Cone => d[0],
            IndenterKind::Pyramid => d[0] * std::f64::consts::FRAC_1_SQRT_2,
            IndenterKind::Torus => d[0] + d[1],
            IndenterKind::TrianglePrism => d[0] / 3f64.sqrt(),
            IndenterKind::PacmanPrism | IndenterKind::HexPrism | IndenterKind::Ring => d[0],
            IndenterKind::CrossPrism => (0.5 * d[0]).hypot(0.5 * d[1]),
            IndenterKind::DomeArray => std::f64::consts::FRAC_1_SQRT_2 * d[1] + d[0],
            IndenterKind::Edge => (0.5 * d[0]).hypot(0.5 * d[2]),
            IndenterKind::StarPrism => d[0],
            IndenterKind::Ellipsoid => d[0].max(d[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.kind.dim_count() {
            return Err(Error::invalid(format!(
                "indenter `{}` ({}) expects {} dims, got {}",
                self.id,
                self.kind,
                self.kind.dim_count(),
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid(format!("indenter `{}` has non-positive dims", self.id)));
        }
        let extra_ok = match self.kind {
            IndenterKind::Ring | IndenterKind::StarPrism => self.dims[1] < self.dims[0],
            IndenterKind::Torus => self.dims[1] < self.dims[0],
            IndenterKind::PacmanPrism => self.dims[1] < 180.0,
            IndenterKind::CrossPrism => self.dims[1] < self.dims[0],
            _ => true,
        };
        if !extra_ok {
            return Err(Error::invalid(format!("indenter `{}` has inconsistent dims", self.id)));
        }
        if self.bounding_radius() > FACE_HALF_MM {
            return Err(Error::invalid(format!(
                "indenter `{}` bounding radius {:.2} mm exceeds the face",
                self.id,
                self.bounding_radius()
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<Shape> {
        Shape::new(self)
    }
}

/// The 18-entry catalog, sorted by id. Six shapes are held out as unseen.
pub fn build_indenter_catalog() -> Vec<IndenterSpec> {
    use IndenterKind::*;
    let mut catalog = vec![
        IndenterSpec::new(Sphere, &[4.0], false),
        IndenterSpec::new(Cone, &[4.0, 6.0], false),
        IndenterSpec::new(Wave, &[8.0, 8.0, 6.0, 0.8, 4.0], false),
        IndenterSpec::new(Torus, &[3.0, 1.0], false),
        IndenterSpec::new(TrianglePrism, &[7.0, 6.0], false),
        IndenterSpec::new(PacmanPrism, &[3.5, 70.0, 6.0], false),
        IndenterSpec::new(Prism, &[8.0, 8.0, 6.0], true),
        IndenterSpec::new(Cylinder, &[2.5, 10.0], true),
        IndenterSpec::new(Hemisphere, &[5.0], true),
        IndenterSpec::new(Capsule, &[2.0, 6.0], true),
        IndenterSpec::new(Pyramid, &[6.0, 4.0], true),
        IndenterSpec::new(CrossPrism, &[8.0, 2.5, 6.0], true),
        IndenterSpec::new(HexPrism, &[3.5, 6.0], true),
        IndenterSpec::new(Ring, &[4.0, 2.5, 6.0], true),
        IndenterSpec::new(DomeArray, &[1.5, 4.0], true),
        IndenterSpec::new(Edge, &[3.0, 4.0, 10.0], true),
        IndenterSpec::new(StarPrism, &[4.0, 2.0, 6.0], true),
        IndenterSpec::new(Ellipsoid, &[5.0, 3.0, 2.5], true),
    ];
    catalog.sort_by(|a, b| a.id.cmp(&b.id));
    catalog
}

/// Looks up a catalog indenter by id.
pub fn catalog_indenter(id: &str) -> Result<IndenterSpec> {
    build_indenter_catalog()
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::UnknownIndenter(id.to_string()))
}

/// Placement of an indenter tip in sensor coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub translation: [f64; 3],
    /// Rotation about the vertical axis, radians.
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            translation: [x, y, z],
            yaw: 0.0,
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.yaw.is_finite()
    }

    /// Maps a sensor-frame point into the indenter's local frame.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.position();
        let (s, c) = (-self.yaw).sin_cos();
        Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z)
    }

    /// Indentation depth below the undeformed surface, never negative.
    pub fn depth(&self) -> f64 {
        (-self.translation[2]).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Signed distance functions

/// A compiled, validated indenter solid in its local frame.
#[derive(Clone, Debug)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
    Cone { radius: f64, height: f64 },
    Wave { half: Vec3, amplitude: f64, k: f64 },
    Torus { major: f64, minor: f64 },
    /// Vertical extrusion of a 2D footprint from z = 0 to `height`.
    Extrusion { footprint: Footprint, height: f64 },
    Hemisphere { radius: f64 },
    /// Horizontal segment along x at height `radius`, swept by `radius`.
    Capsule { radius: f64, half_len: f64 },
    /// Horizontal cylinder along x with flat ends.
    Cylinder { radius: f64, half_len: f64 },
    /// Convex solid bounded by planes (unit normal, offset): inside when n·p < d for all.
    Planes { planes: Vec<(Vec3, f64)> },
    Union(Vec<Shape>),
    Ellipsoid { semi: Vec3 },
}

#[derive(Clone, Debug)]
pub enum Footprint {
    Polygon(Vec<Vec2>),
    Annulus { outer: f64, inner: f64 },
}

impl Footprint {
    fn distance(&self, p: Vec2) -> f64 {
        match self {
            Footprint::Polygon(v) => polygon_sdf(v, p),
            Footprint::Annulus { outer, inner } => {
                let mid = 0.5 * (outer + inner);
                let half = 0.5 * (outer - inner);
                (p.norm() - mid).abs() - half
            }
        }
    }
}

/// Exact signed distance to a simple polygon (negative inside).
fn polygon_sdf(v: &[Vec2], p: Vec2) -> f64 {
    let n = v.len();
    let mut d = (p - v[0]).norm_squared();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let e = v[j] - v[i];
        let w = p - v[i];
        let t = (w.dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        let b = w - e * t;
        d = d.min(b.norm_squared());
        let c1 = p.y >= v[i].y;
        let c2 = p.y < v[j].y;
        let c3 = e.x * w.y > e.y * w.x;
        if (c1 && c2 && c3) || (!c1 && !c2 && !c3) {
            inside = !inside;
        }
        j = i;
    }
    let d = d.sqrt();
    if inside {
        -d
    } else {
        d
    }
}

fn box_sdf(p: Vec3, center: Vec3, half: Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y.max(q.z)).min(0.0)
}

fn regular_polygon(n: usize, radius: f64, phase: f64) -> Vec<Vec2> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            Vec2::new(radius * a.cos(), radius * a.sin())
        })
        .collect()
}

impl Shape {
    pub fn new(spec: &IndenterSpec) -> Result<Self> {
        spec.validate()?;
        let d = &spec.dims;
        let shape = match spec.kind {
            IndenterKind::Sphere => Shape::Sphere {
                center: Vec3::new(0.0, 0.0, d[0]),
                radius: d[0],
            },
            IndenterKind::Prism => Shape::Box {
                center: Vec3::new(0.0, 0.0, 0.5 * d[2]),
                half: Vec3::new(0.5 * d[0], 0.5 * d[1], 0.5 * d[2]),
            },
            IndenterKind::Cone => Shape::Cone {
                radius: d[0],
                height: d[1],
            },
            IndenterKind::Wave => Shape::Wave {
                half: Vec3::new(0.5 * d[0], 0.5 * d[1], 0.5 * d[2]),
                amplitude: d[3],
                k: 2.0 * PI / d[4],
            },
            IndenterKind::Torus => Shape::Torus {
                major: d[0],
                minor: d[1],
            },
            IndenterKind::TrianglePrism => Shape::Extrusion {
                footprint: Footprint::Polygon(regular_polygon(3, d[0] / 3f64.sqrt(), PI / 2.0)),
                height: d[1],
            },
            IndenterKind::PacmanPrism => {
                let mouth = d[1].to_radians();
                let segments = 48;
                let mut pts = vec![Vec2::zeros()];
                for i in 0..=segments {
                    let a = 0.5 * mouth + (2.0 * PI - mouth) * i as f64 / segments as f64;
                    pts.push(Vec2::new(d[0] * a.cos(), d[0] * a.sin()));
                }
                Shape::Extrusion {
                    footprint: Footprint::Polygon(pts),
                    height: d[2],
                }
            }
            IndenterKind::Hemisphere => Shape::Hemisphere { radius: d[0] },
            IndenterKind::Capsule => Shape::Capsule {
                radius: d[0],
                half_len: 0.5 * d[1],
            },
            IndenterKind::Cylinder => Shape::Cylinder {
                radius: d[0],
                half_len: 0.5 * d[1],
            },
            IndenterKind::Pyramid => {
                let (a, h) = (0.5 * d[0], d[1]);
                // Side faces pass through the apex (origin) and the base edges at z = h.
                let mut planes = Vec::new();
                for (sx, sy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                    let n = Vec3::new(sx * h, sy * h, -a).normalize();
                    planes.push((n, 0.0));
                }
                planes.push((Vec3::z(), h));
                Shape::Planes { planes }
            }
            IndenterKind::CrossPrism => {
                let (l, w) = (0.5 * d[0], 0.5 * d[1]);
                let pts = [
                    (w, w),
                    (w, l),
                    (-w, l),
                    (-w, w),
                    (-l, w),
                    (-l, -w),
                    (-w, -w),
                    (-w, -l),
                    (w, -l),
                    (w, -w),
                    (l, -w),
                    (l, w),
                ]
                .into_iter()
                .map(|(x, y)| Vec2::new(x, y))
                .collect();
                Shape::Extrusion {
                    footprint: Footprint::Polygon(pts),
                    height: d[2],
                }
            }
            IndenterKind::HexPrism => Shape::Extrusion {
                footprint: Footprint::Polygon(regular_polygon(6, d[0], 0.0)),
                height: d[1],
            },
            IndenterKind::Ring => Shape::Extrusion {
                footprint: Footprint::Annulus {
                    outer: d[0],
                    inner: d[1],
                },
                height: d[2],
            },
            IndenterKind::DomeArray => {
                let (r, h) = (d[0], 0.5 * d[1]);
                Shape::Union(
                    [(h, h), (-h, h), (-h, -h), (h, -h)]
                        .into_iter()
                        .map(|(x, y)| Shape::Sphere {
                            center: Vec3::new(x, y, r),
                            radius: r,
                        })
                        .collect(),
                )
            }
            IndenterKind::Edge => {
                let (w, h, l) = (0.5 * d[0], d[1], 0.5 * d[2]);
                let planes = vec![
                    (Vec3::new(h, 0.0, -w).normalize(), 0.0),
                    (Vec3::new(-h, 0.0, -w).normalize(), 0.0),
                    (Vec3::z(), h),
                    (Vec3::y(), l),
                    (-Vec3::y(), l),
                ];
                Shape::Planes { planes }
            }
            IndenterKind::StarPrism => {
                let pts = (0..10)
                    .map(|i| {
                        let r = if i % 2 == 0 { d[0] } else { d[1] };
                        let a = PI / 2.0 + PI * i as f64 / 5.0;
                        Vec2::new(r * a.cos(), r * a.sin())
                    })
                    .collect();
                Shape::Extrusion {
                    footprint: Footprint::Polygon(pts),
                    height: d[2],
                }
            }
            IndenterKind::Ellipsoid => Shape::Ellipsoid {
                semi: Vec3::new(d[0], d[1], d[2]),
            },
        };
        Ok(shape)
    }

    /// Signed distance in the local frame, mm. Satisfies the distance-bound
    /// property (Lipschitz constant at most 1) for every variant.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half } => box_sdf(*p, *center, *half),
            Shape::Cone { radius, height } => {
                // Apex at the origin, axis +z, base disk of `radius` at z = height.
                let q = Vec2::new(p.x.hypot(p.y), p.z);
                let (r, h) = (*radius, *height);
                let slant = Vec2::new(r, h);
                let len = slant.norm();
                // Distance to the slanted side segment from apex (0,0) to (r,h).
                let t = (q.dot(&slant) / (len * len)).clamp(0.0, 1.0);
                let d_side = (q - slant * t).norm();
                // Distance to the base disk.
                let d_base = Vec2::new((q.x - r).max(0.0), q.y - h).norm();
                let d = d_side.min(d_base);
                let inside = q.y <= h && q.x * h <= r * q.y;
                if inside {
                    -d
                } else {
                    d
                }
            }
            Shape::Wave { half, amplitude, k } => {
                // Bottom surface z_b(x) = A (1 - cos kx) / 2, scaled to a distance bound.
                let zb = 0.5 * amplitude * (1.0 - (k * p.x).cos());
                let slope = 0.5 * amplitude * k;
                let surf = (zb - p.z) / (1.0 + slope * slope).sqrt();
                let bx = box_sdf(*p, Vec3::new(0.0, 0.0, half.z), *half);
                surf.max(bx)
            }
            Shape::Torus { major, minor } => {
                let q = Vec2::new(p.x.hypot(p.y) - major, p.z - minor);
                q.norm() - minor
            }
            Shape::Extrusion { footprint, height } => {
                let d2 = footprint.distance(Vec2::new(p.x, p.y));
                let dz = (p.z - 0.5 * height).abs() - 0.5 * height;
                let w = Vec2::new(d2, dz);
                w.x.max(w.y).min(0.0) + Vec2::new(w.x.max(0.0), w.y.max(0.0)).norm()
            }
            Shape::Hemisphere { radius } => {
                let sphere = (p - Vec3::new(0.0, 0.0, *radius)).norm() - radius;
                sphere.max(p.z - radius)
            }
            Shape::Capsule { radius, half_len } => {
                let cx = p.x.clamp(-half_len, *half_len);
                (p - Vec3::new(cx, 0.0, *radius)).norm() - radius
            }
            Shape::Cylinder { radius, half_len } => {
                let radial = p.y.hypot(p.z - radius) - radius;
                let axial = p.x.abs() - half_len;
                let w = Vec2::new(radial, axial);
                w.x.max(w.y).min(0.0) + Vec2::new(w.x.max(0.0), w.y.max(0.0)).norm()
            }
            Shape::Planes { planes } => planes
                .iter()
                .map(|(n, off)| n.dot(p) - off)
                .fold(f64::NEG_INFINITY, f64::max),
            Shape::Union(parts) => parts
                .iter()
                .map(|s| s.distance(p))
                .fold(f64::INFINITY, f64::min),
            Shape::Ellipsoid { semi } => {
                let c = Vec3::new(p.x, p.y, p.z - semi.z);
                let scaled = Vec3::new(c.x / semi.x, c.y / semi.y, c.z / semi.z);
                (scaled.norm() - 1.0) * semi.min()
            }
        }
    }
}

/// Signed distance from `point` (sensor frame, mm) to the posed indenter.
pub fn sdf_eval(spec: &IndenterSpec, pose: &Pose, point: &Vec3) -> Result<f64> {
    if !point.iter().all(|v| v.is_finite()) || !pose.is_finite() {
        return Err(Error::NonFinite("sdf query point or pose".into()));
    }
    let shape = Shape::new(spec)?;
    Ok(shape.distance(&pose.to_local(point)))
}

// ---------------------------------------------------------------------------
// Trajectories

/// Movement phase of a trajectory waypoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Origin waypoint above the surface, no contact.
    Rest,
    /// F_N+: moving down.
    NormalIncrease,
    /// F_s+: moving laterally away.
    ShearIncrease,
    /// F_s-: returning laterally.
    ShearDecrease,
    /// F_N-: moving up.
    NormalDecrease,
}

impl Phase {
    pub const CYCLE: [Phase; 4] = [
        Phase::NormalIncrease,
        Phase::ShearIncrease,
        Phase::ShearDecrease,
        Phase::NormalDecrease,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Rest => "rest",
            Phase::NormalIncrease => "fn+",
            Phase::ShearIncrease => "fs+",
            Phase::ShearDecrease => "fs-",
            Phase::NormalDecrease => "fn-",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Phase::Rest,
            Phase::NormalIncrease,
            Phase::ShearIncrease,
            Phase::ShearDecrease,
            Phase::NormalDecrease,
        ]
        .into_iter()
        .find(|p| p.label() == s)
        .ok_or_else(|| Error::invalid(format!("unknown phase `{s}`")))
    }

    /// Loading phases push the indenter further into contact.
    pub fn is_loading(self) -> bool {
        matches!(self, Phase::Rest | Phase::NormalIncrease | Phase::ShearIncrease)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Number of surface contact points (1 = center, 5 = cross, 9 = 3x3 grid).
    pub contact_points: usize,
    /// Horizontal offsets of the contact layout, mm.
    pub grid_dx: f64,
    pub grid_dy: f64,
    /// Depth increment between levels, mm.
    pub depth_step: f64,
    /// Deepest level, mm.
    pub max_depth: f64,
    /// Angle between consecutive shear directions, radians.
    pub shear_angle: f64,
    /// Lateral shear travel, mm.
    pub shear_distance: f64,
    /// Indenter speed, mm/s.
    pub speed: f64,
    /// Frame capture rate, Hz.
    pub frame_rate: f64,
}

impl Default for TrajectoryConfig {
    /// The homogeneous-test setting: cross layout, 0.3 mm steps to 1.2 mm,
    /// 30° shear increments of 1 mm.
    fn default() -> Self {
        Self {
            contact_points: 5,
            grid_dx: 3.0,
            grid_dy: 4.0,
            depth_step: 0.3,
            max_depth: 1.2,
            shear_angle: 30f64.to_radians(),
            shear_distance: 1.0,
            speed: 10.0,
            frame_rate: 40.0,
        }
    }
}

impl TrajectoryConfig {
    /// TacTip-style setting: 1.125 mm steps down to 4.5 mm.
    pub fn tactip() -> Self {
        Self {
            grid_dx: 6.5,
            grid_dy: 6.5,
            depth_step: 1.125,
            max_depth: 4.5,
            shear_distance: 1.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.grid_dx,
            self.grid_dy,
            self.depth_step,
            self.max_depth,
            self.shear_angle,
            self.shear_distance,
            self.speed,
            self.frame_rate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("trajectory config has non-finite values"));
        }
        if !(self.depth_step > 0.0) {
            return Err(Error::invalid("depth step must be positive"));
        }
        if self.depth_step > self.max_depth + 1e-12 {
            return Err(Error::invalid(format!(
                "depth step {} mm exceeds max depth {} mm",
                self.depth_step, self.max_depth
            )));
        }
        if self.max_depth > 4.5 + 1e-12 {
            return Err(Error::invalid("max depth above 4.5 mm"));
        }
        if !(self.speed > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::invalid("speed and frame rate must be positive"));
        }
        if !(0.0..=PI / 2.0 + 1e-12).contains(&self.shear_angle) {
            return Err(Error::invalid("shear angle outside [0, 90°]"));
        }
        if self.shear_distance < 0.0 {
            return Err(Error::invalid("negative shear distance"));
        }
        Ok(())
    }

    /// Number of depth levels, `floor(Z_max / ΔZ)` with a guard against
    /// representation error (1.2 / 0.3 is 3.999... in binary).
    pub fn depth_levels(&self) -> usize {
        (self.max_depth / self.depth_step + 1e-9).floor() as usize
    }

    /// Contact layout centered on the face.
    pub fn surface_points(&self) -> Vec<Vec2> {
        match self.contact_points {
            1 => vec![Vec2::zeros()],
            5 => cross_layout(self.grid_dx, self.grid_dy),
            9 => grid_layout(3, self.grid_dx, self.grid_dy),
            n => {
                let side = (n as f64).sqrt().ceil() as usize;
                grid_layout(side, self.grid_dx, self.grid_dy)
                    .into_iter()
                    .take(n)
                    .collect()
            }
        }
    }
}

/// Center plus four points at (±dx, 0) and (0, ±dy).
pub fn cross_layout(dx: f64, dy: f64) -> Vec<Vec2> {
    vec![
        Vec2::new(0.0, 0.0),
        Vec2::new(dx, 0.0),
        Vec2::new(0.0, dy),
        Vec2::new(-dx, 0.0),
        Vec2::new(0.0, -dy),
    ]
}

/// `n x n` lattice centered on the face.
pub fn grid_layout(n: usize, dx: f64, dy: f64) -> Vec<Vec2> {
    let c = 0.5 * (n as f64 - 1.0);
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push(Vec2::new((i as f64 - c) * dx, (j as f64 - c) * dy));
        }
    }
    pts
}

/// One four-phase contact cycle at a single depth level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactSequence {
    pub indenter: String,
    pub point_index: usize,
    pub direction_index: usize,
    pub depth_level: usize,
    pub waypoints: Vec<(Pose, Phase)>,
}

impl ContactSequence {
    /// Stable identifier, e.g. `sphere_p0_d1_z2`.
    pub fn key(&self) -> String {
        format!(
            "{}_p{}_d{}_z{}",
            self.indenter, self.point_index, self.direction_index, self.depth_level
        )
    }

    pub fn target_depth(&self) -> f64 {
        self.waypoints
            .iter()
            .map(|(p, _)| p.depth())
            .fold(0.0, f64::max)
    }
}

fn check_on_face(p: &Vec2, what: &str) -> Result<()> {
    if p.x.abs() > FACE_HALF_MM + 1e-9 || p.y.abs() > FACE_HALF_MM + 1e-9 {
        return Err(Error::invalid(format!(
            "{what} ({:.3}, {:.3}) mm lies outside the 20x20 mm face",
            p.x, p.y
        )));
    }
    Ok(())
}

/// Enumerates one [`ContactSequence`] per (surface point, direction, depth
/// level). Direction `k` shears along angle `k·θ` from +x.
pub fn generate_trajectory(
    cfg: &TrajectoryConfig,
    indenter: &str,
    surface_points: &[Vec2],
    directions_per_point: usize,
) -> Result<Vec<ContactSequence>> {
    cfg.validate()?;
    if surface_points.is_empty() {
        return Err(Error::invalid("no surface contact points"));
    }
    if directions_per_point == 0 {
        return Err(Error::invalid("directions_per_point must be at least 1"));
    }
    let levels = cfg.depth_levels();
    let mut out = Vec::with_capacity(surface_points.len() * directions_per_point * levels);
    for (pi, p) in surface_points.iter().enumerate() {
        check_on_face(p, "contact point")?;
        for di in 0..directions_per_point {
            let angle = di as f64 * cfg.shear_angle;
            let dir = Vec2::new(angle.cos(), angle.sin());
            let shear_target = p + dir * cfg.shear_distance;
            check_on_face(&shear_target, "shear target")?;
            for level in 0..levels {
                let depth = (level + 1) as f64 * cfg.depth_step;
                let p0 = Pose::new(p.x, p.y, APPROACH_CLEARANCE_MM);
                let p1 = Pose::new(p.x, p.y, -depth);
                let p2 = Pose::new(shear_target.x, shear_target.y, -depth);
                out.push(ContactSequence {
                    indenter: indenter.to_string(),
                    point_index: pi,
                    direction_index: di,
                    depth_level: level,
                    waypoints: vec![
                        (p0, Phase::Rest),
                        (p1, Phase::NormalIncrease),
                        (p2, Phase::ShearIncrease),
                        (p1, Phase::ShearDecrease),
                        (p0, Phase::NormalDecrease),
                    ],
                });
            }
        }
    }
    Ok(out)
}

/// Number of contact configurations a simulation plan covers: one per
/// (indenter, location, depth level) for press-only plans.
pub fn contact_configuration_count(indenters: usize, locations: usize, depth_levels: usize) -> usize {
    indenters * locations * depth_levels
}
