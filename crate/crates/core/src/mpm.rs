//! Explicit MLS-MPM simulation of the elastomer block under a rigid indenter.
//!
//! Internally the solver works in the consistent unit system mm / tonne / s,
//! so forces come out in N and stresses in MPa. The block occupies
//! `[0, W] x [0, D] x [0, H]` in block coordinates; the marker face is the top
//! plane `z = H`. Sensor coordinates put the origin at the face center with
//! z = 0 on the undeformed surface.
//!
//! Each step does the usual particle-to-grid transfer with quadratic B-spline
//! weights, a grid update (fixed-corotated stress, damping, fixed bottom,
//! collider projection) and the grid-to-particle transfer. The impulse removed
//! by the collider projection is accumulated into the contact force.

use std::collections::VecDeque;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::{ContactSequence, IndenterSpec, Phase, Pose, Shape, TrajectoryConfig, Vec3};
use crate::{Error, Result};

type Mat3 = Matrix3<f64>;

/// Isotropic elastomer parameters in SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Young's modulus, Pa.
    pub youngs_modulus: f64,
    pub poisson: f64,
    /// Physical density, kg/m³.
    pub density: f64,
    /// Per-step grid velocity decay in [0, 1).
    pub damping: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            youngs_modulus: 1.45e5,
            poisson: 0.45,
            density: 1100.0,
            damping: 0.1,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.youngs_modulus.is_finite() && self.youngs_modulus > 0.0) {
            return Err(Error::invalid("Young's modulus must be positive"));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(Error::invalid("Poisson ratio must lie in [0, 0.5)"));
        }
        if !(self.density.is_finite() && self.density > 0.0) {
            return Err(Error::invalid("density must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::invalid("damping must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Lamé parameters (λ, μ) in MPa.
    pub fn lame_mpa(&self) -> (f64, f64) {
        let e = self.youngs_modulus * 1e-6;
        let nu = self.poisson;
        (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }

    /// Same material with the modulus scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            youngs_modulus: self.youngs_modulus * factor,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpmConfig {
    /// Block extents (W, D, H), mm.
    pub block_size: [f64; 3],
    /// Grid spacing, mm.
    pub dx: f64,
    pub particles_per_cell: usize,
    /// Time step, s.
    pub dt: f64,
    /// Coulomb friction between indenter and elastomer.
    pub friction: f64,
    /// Relaxation steps held at each waypoint.
    pub settle_steps: usize,
    /// Density multiplier for quasi-static runs; the effective density enters
    /// both the dynamics and the stability bound.
    pub mass_scale: f64,
    /// Nodes per side of the surface displacement lattice.
    pub lattice_size: usize,
    /// Largest force magnitude treated as "no contact", N.
    pub force_noise_floor: f64,
    /// Steps averaged into each reported contact force.
    pub force_window: usize,
    /// Particle position jitter as a fraction of the particle spacing.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for MpmConfig {
    fn default() -> Self {
        Self {
            block_size: [20.0, 20.0, 4.0],
            dx: 0.5,
            particles_per_cell: 8,
            dt: 1e-4,
            friction: 1.0,
            settle_steps: 25,
            mass_scale: 100.0,
            lattice_size: 32,
            force_noise_floor: 1e-3,
            force_window: 10,
            jitter: 0.0,
            seed: 0,
        }
    }
}

impl MpmConfig {
    /// Coarser grid used for dataset generation on a single core.
    pub fn desk() -> Self {
        Self {
            dx: 1.0,
            dt: 8e-4,
            mass_scale: 2000.0,
            ..Self::default()
        }
    }

    /// Largest time step admitted for `mat`: `0.3 dx / sqrt(E / ρ_eff)`.
    pub fn max_stable_dt(&self, mat: &MaterialParams) -> f64 {
        let e = mat.youngs_modulus * 1e-6;
        let rho = mat.density * self.mass_scale * 1e-12;
        0.3 * self.dx / (e / rho).sqrt()
    }

    /// Copy with `dt` clamped to the stability bound.
    pub fn clamped_to(&self, mat: &MaterialParams) -> Self {
        Self {
            dt: self.dt.min(self.max_stable_dt(mat)),
            ..self.clone()
        }
    }

    pub fn validate(&self, mat: &MaterialParams) -> Result<()> {
        if !(self.dx > 0.0) || !self.block_size.iter().all(|&s| s > 0.0) {
            return Err(Error::invalid("grid spacing and block size must be positive"));
        }
        if self.particles_per_cell < 4 {
            return Err(Error::invalid("need at least 4 particles per cell"));
        }
        if !(self.dt > 0.0) || !(self.mass_scale > 0.0) {
            return Err(Error::invalid("dt and mass scale must be positive"));
        }
        if self.force_window == 0 {
            return Err(Error::invalid("force window must cover at least one step"));
        }
        if self.lattice_size < 2 {
            return Err(Error::invalid("surface lattice needs at least 2 nodes per side"));
        }
        if self.friction < 0.0 || !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid("friction must be >= 0 and jitter in [0, 0.5)"));
        }
        let max_dt = self.max_stable_dt(mat);
        if self.dt > max_dt {
            return Err(Error::Cfl { dt: self.dt, max_dt });
        }
        Ok(())
    }
}

/// Displacement of the marker face on a regular `M x M` lattice, mm.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceLattice {
    pub size: usize,
    /// Half extent of the covered face, mm (nodes span `[-half, half]`).
    pub half_extent: f64,
    /// Row-major (y rows, x columns) displacements (u_x, u_y, u_z).
    pub data: Vec<[f64; 3]>,
}

impl SurfaceLattice {
    pub fn zeros(size: usize, half_extent: f64) -> Self {
        Self {
            size,
            half_extent,
            data: vec![[0.0; 3]; size * size],
        }
    }

    pub fn node_coord(&self, i: usize) -> f64 {
        -self.half_extent + 2.0 * self.half_extent * i as f64 / (self.size - 1) as f64
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 3] {
        self.data[j * self.size + i]
    }

    /// Bilinear sample at sensor-plane (x, y) mm; `None` outside the face.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let h = self.half_extent;
        let tol = 1e-9;
        if !(x.is_finite() && y.is_finite()) || x.abs() > h + tol || y.abs() > h + tol {
            return None;
        }
        let scale = (self.size - 1) as f64 / (2.0 * h);
        let fx = ((x + h) * scale).clamp(0.0, (self.size - 1) as f64);
        let fy = ((y + h) * scale).clamp(0.0, (self.size - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.size - 2);
        let j0 = (fy.floor() as usize).min(self.size - 2);
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let mut out = [0.0; 3];
        let corners = [
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i0 + 1, j0, tx * (1.0 - ty)),
            (i0, j0 + 1, (1.0 - tx) * ty),
            (i0 + 1, j0 + 1, tx * ty),
        ];
        for (i, j, w) in corners {
            let v = self.at(i, j);
            for a in 0..3 {
                out[a] += w * v[a];
            }
        }
        Some(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Binary lattice encoding: `TFLD`, u32 M, then M·M·3 little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 12);
        out.extend_from_slice(b"TFLD");
        out.extend_from_slice(&(self.size as u32).to_le_bytes());
        for v in &self.data {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], half_extent: f64) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != b"TFLD" {
            return Err(Error::invalid("lattice file lacks TFLD magic"));
        }
        let size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + size * size * 12;
        if size < 2 || bytes.len() != expected {
            return Err(Error::invalid(format!(
                "lattice file has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let data = bytes[8..]
            .chunks_exact(12)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
                [f(0), f(1), f(2)]
            })
            .collect();
        Ok(Self {
            size,
            half_extent,
            data,
        })
    }
}

/// One captured instant of a contact sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub surface_displacement: SurfaceLattice,
    /// Load applied by the indenter: lateral components along the drag
    /// direction, normal component positive in compression. N.
    pub contact_force: [f64; 3],
    pub indenter_pose: Pose,
    pub depth: f64,
    pub phase: Phase,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Node {
    mass: f64,
    mom: [f64; 3],
    /// Mass of particles currently touching the indenter.
    touch_mass: f64,
    /// Mass-weighted position of the touching particles.
    touch_pos: [f64; 3],
}

/// Precomputed inverse-distance weights from surface particles to lattice nodes.
#[derive(Clone, Debug)]
struct SurfaceStencil {
    nodes: Vec<[(usize, f64); SURFACE_NEIGHBORS]>,
}

const SURFACE_NEIGHBORS: usize = 8;
const SURFACE_LAYER_MM: f64 = 0.4;

/// Full simulator state. Confined to one thread at a time; independent states
/// may run concurrently.
#[derive(Clone, Debug)]
pub struct SimState {
    mat: MaterialParams,
    cfg: MpmConfig,
    lambda: f64,
    mu: f64,
    particle_mass: f64,
    particle_vol: f64,
    spacing: f64,

    x0: Vec<[f64; 3]>,
    x: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    c: Vec<Mat3>,
    f: Vec<Mat3>,

    dims: [usize; 3],
    origin: [f64; 3],
    grid: Vec<Node>,
    grid_v: Vec<[f64; 3]>,

    shape: Shape,
    reach: f64,
    pub pose: Pose,
    /// Indenter velocity in sensor coordinates, mm/s.
    pub velocity: [f64; 3],

    pub time: f64,
    pub steps: u64,
    /// Collider impulses of the most recent steps, newest last.
    recent_impulse: VecDeque<[f64; 3]>,
    surface: SurfaceStencil,
    touching: Vec<bool>,
}

const PAD: usize = 3;

/// Share of a node's mass that must touch the indenter before the node is
/// constrained by it.
const CONTACT_MASS_FRACTION: f64 = 0.5;

impl SimState {
    pub fn particle_count(&self) -> usize {
        self.x.len()
    }

    pub fn particle_positions(&self) -> &[[f64; 3]] {
        &self.x
    }

    pub fn config(&self) -> &MpmConfig {
        &self.cfg
    }

    pub fn material(&self) -> &MaterialParams {
        &self.mat
    }

    fn inv_dx(&self) -> f64 {
        1.0 / self.cfg.dx
    }

    /// Block-coordinate offset of the sensor origin (face center on the top plane).
    fn sensor_offset(&self) -> [f64; 3] {
        let b = self.cfg.block_size;
        [0.5 * b[0], 0.5 * b[1], b[2]]
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.particle_mass
            * self
                .v
                .iter()
                .map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
                .sum::<f64>()
    }

    /// Stored strain energy of the fixed-corotated model, N·mm.
    pub fn elastic_energy(&self) -> f64 {
        self.f
            .iter()
            .map(|f| {
                let r = polar_rotation(f);
                let j = f.determinant();
                let dev = f - r;
                self.mu * dev.norm_squared() + 0.5 * self.lambda * (j - 1.0) * (j - 1.0)
            })
            .sum::<f64>()
            * self.particle_vol
    }

    /// Places the indenter, clearing the force accumulator.
    pub fn set_pose(&mut self, pose: Pose) {
        self.pose = pose;
    }

    /// One explicit MPM update.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let dx = self.cfg.dx;
        let inv_dx = self.inv_dx();
        let [_, ny, nz] = self.dims;
        let stride_x = ny * nz;
        let origin = self.origin;

        for n in self.grid.iter_mut() {
            *n = Node::default();
        }

        // Particles within the contact skin of the indenter.
        let off = self.sensor_offset();
        let tip = self.pose.translation;
        let reach2 = self.reach * self.reach;
        let skin = 0.5 * self.spacing;
        for p in 0..self.x.len() {
            let xp = self.x[p];
            let (hx, hy, hz) = (xp[0] - off[0] - tip[0], xp[1] - off[1] - tip[1], xp[2] - off[2]);
            self.touching[p] = hx * hx + hy * hy <= reach2 && hz >= tip[2] - skin && {
                let q = Vec3::new(xp[0] - off[0], xp[1] - off[1], hz);
                self.shape.distance(&self.pose.to_local(&q)) < skin
            };
        }

        // Particle to grid.
        let stress_scale = -dt * self.particle_vol * 4.0 * inv_dx * inv_dx;
        let pm = self.particle_mass;
        let grid = &mut self.grid;
        for p in 0..self.x.len() {
            let xp = self.x[p];
            let (base, w) = stencil(&xp, &origin, inv_dx);
            let f = &self.f[p];
            let r = polar_rotation(f);
            let j = f.determinant();
            let tau = (f - r) * f.transpose() * (2.0 * self.mu)
                + Mat3::identity() * (self.lambda * (j - 1.0) * j);
            let affine = tau * stress_scale + self.c[p] * pm;
            let vp = self.v[p];
            let fx = [
                (xp[0] - origin[0]) * inv_dx - base[0] as f64,
                (xp[1] - origin[1]) * inv_dx - base[1] as f64,
                (xp[2] - origin[2]) * inv_dx - base[2] as f64,
            ];
            // Momentum contribution at node offset (a, b, c) is
            // m v + A (a dx - fx dx, ...), assembled axis by axis.
            let col = |k: usize| [affine[(0, k)] * dx, affine[(1, k)] * dx, affine[(2, k)] * dx];
            let (c0, c1, c2) = (col(0), col(1), col(2));
            let mut m0 = [0.0; 3];
            for r in 0..3 {
                m0[r] = pm * vp[r] - c0[r] * fx[0] - c1[r] * fx[1] - c2[r] * fx[2];
            }
            let touch = self.touching[p];
            for a in 0..3 {
                let ma = [m0[0] + c0[0] * a as f64, m0[1] + c0[1] * a as f64, m0[2] + c0[2] * a as f64];
                for b in 0..3 {
                    let mb = [ma[0] + c1[0] * b as f64, ma[1] + c1[1] * b as f64, ma[2] + c1[2] * b as f64];
                    let wab = w[0][a] * w[1][b];
                    let row = (base[0] + a) * stride_x + (base[1] + b) * nz + base[2];
                    for c in 0..3 {
                        let weight = wab * w[2][c];
                        let cf = c as f64;
                        // SAFETY: every particle lies inside the padded grid (checked in G2P
                        // and at init), so the 3x3x3 stencil is in bounds.
                        let node = unsafe { grid.get_unchecked_mut(row + c) };
                        node.mom[0] += weight * (mb[0] + c2[0] * cf);
                        node.mom[1] += weight * (mb[1] + c2[1] * cf);
                        node.mom[2] += weight * (mb[2] + c2[2] * cf);
                        let wm = weight * pm;
                        node.mass += wm;
                        if touch {
                            node.touch_mass += wm;
                            node.touch_pos[0] += wm * xp[0];
                            node.touch_pos[1] += wm * xp[1];
                            node.touch_pos[2] += wm * xp[2];
                        }
                    }
                }
            }
        }

        // Grid update.
        let keep = 1.0 - self.mat.damping;
        let bottom_k = PAD; // node index of the z = 0 plane
        let vind = self.velocity;
        let mu_f = self.cfg.friction;
        let mut impulse = [0.0; 3];
        for i in 0..self.dims[0] {
            for jy in 0..ny {
                for k in 0..nz {
                    let idx = i * stride_x + jy * nz + k;
                    let node = &mut self.grid[idx];
                    if node.mass <= 0.0 {
                        continue;
                    }
                    let inv_m = 1.0 / node.mass;
                    let mut v = [
                        node.mom[0] * inv_m * keep,
                        node.mom[1] * inv_m * keep,
                        node.mom[2] * inv_m * keep,
                    ];
                    if k <= bottom_k {
                        self.grid_v[idx] = [0.0; 3];
                        continue;
                    }
                    // A node follows the collider once most of its mass touches it.
                    if node.touch_mass >= CONTACT_MASS_FRACTION * node.mass {
                        let inv_t = 1.0 / node.touch_mass;
                        let centroid = Vec3::new(
                            node.touch_pos[0] * inv_t - off[0],
                            node.touch_pos[1] * inv_t - off[1],
                            node.touch_pos[2] * inv_t - off[2],
                        );
                        let n = sdf_normal(&self.shape, &self.pose, &centroid);
                        let rel = [v[0] - vind[0], v[1] - vind[1], v[2] - vind[2]];
                        let vn = rel[0] * n[0] + rel[1] * n[1] + rel[2] * n[2];
                        if vn < 0.0 {
                            let mut t = [rel[0] - vn * n[0], rel[1] - vn * n[1], rel[2] - vn * n[2]];
                            let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                            if tn <= -mu_f * vn {
                                t = [0.0; 3];
                            } else {
                                let s = 1.0 + mu_f * vn / tn;
                                t = [t[0] * s, t[1] * s, t[2] * s];
                            }
                            let nv = [vind[0] + t[0], vind[1] + t[1], vind[2] + t[2]];
                            for a in 0..3 {
                                impulse[a] += node.mass * (nv[a] - v[a]);
                            }
                            v = nv;
                        }
                    }
                    self.grid_v[idx] = v;
                }
            }
        }

        // Grid to particle.
        let c_scale = 4.0 * inv_dx * inv_dx;
        let grid_v = &self.grid_v;
        for p in 0..self.x.len() {
            let xp = self.x[p];
            let (base, w) = stencil(&xp, &origin, inv_dx);
            let fx = [
                (xp[0] - origin[0]) * inv_dx - base[0] as f64,
                (xp[1] - origin[1]) * inv_dx - base[1] as f64,
                (xp[2] - origin[2]) * inv_dx - base[2] as f64,
            ];
            let mut nv = [0.0; 3];
            let mut b = [[0.0; 3]; 3];
            for a in 0..3 {
                let dpx = (a as f64 - fx[0]) * dx;
                for bb in 0..3 {
                    let dpy = (bb as f64 - fx[1]) * dx;
                    let wab = w[0][a] * w[1][bb];
                    let row = (base[0] + a) * stride_x + (base[1] + bb) * nz + base[2];
                    for c in 0..3 {
                        let dpz = (c as f64 - fx[2]) * dx;
                        let weight = wab * w[2][c];
                        // SAFETY: as in P2G.
                        let gv = unsafe { *grid_v.get_unchecked(row + c) };
                        for r in 0..3 {
                            let wv = weight * gv[r];
                            nv[r] += wv;
                            b[r][0] += wv * dpx;
                            b[r][1] += wv * dpy;
                            b[r][2] += wv * dpz;
                        }
                    }
                }
            }
            let cm = Mat3::new(
                b[0][0], b[0][1], b[0][2], b[1][0], b[1][1], b[1][2], b[2][0], b[2][1], b[2][2],
            ) * c_scale;
            let newx = [xp[0] + dt * nv[0], xp[1] + dt * nv[1], xp[2] + dt * nv[2]];
            if !(newx.iter().all(|c| c.is_finite())) || !self.in_grid(&newx) {
                return Err(Error::Unstable {
                    step: self.steps,
                    frame: None,
                });
            }
            self.x[p] = newx;
            self.v[p] = nv;
            self.f[p] = (Mat3::identity() + cm * dt) * self.f[p];
            self.c[p] = cm;
        }

        let t = self.pose.translation;
        self.pose.translation = [t[0] + vind[0] * dt, t[1] + vind[1] * dt, t[2] + vind[2] * dt];
        self.recent_impulse.push_back(impulse);
        if self.recent_impulse.len() > self.cfg.force_window {
            self.recent_impulse.pop_front();
        }
        self.time += dt;
        self.steps += 1;
        Ok(())
    }

    fn in_grid(&self, x: &[f64; 3]) -> bool {
        let inv_dx = self.inv_dx();
        (0..3).all(|a| {
            let g = (x[a] - self.origin[a]) * inv_dx - 0.5;
            g >= 0.0 && (g.floor() as usize) + 3 <= self.dims[a]
        })
    }

    /// Contact force averaged over the last `force_window` steps.
    pub fn contact_force(&self) -> [f64; 3] {
        let n = self.recent_impulse.len();
        if n == 0 {
            return [0.0; 3];
        }
        let mut sum = [0.0; 3];
        for imp in &self.recent_impulse {
            for a in 0..3 {
                sum[a] += imp[a];
            }
        }
        let t = n as f64 * self.cfg.dt;
        [sum[0] / t, sum[1] / t, -sum[2] / t]
    }

    /// Current face displacement sampled onto the surface lattice.
    pub fn surface_lattice(&self) -> SurfaceLattice {
        let m = self.cfg.lattice_size;
        let half = 0.5 * self.cfg.block_size[0].min(self.cfg.block_size[1]);
        let mut lat = SurfaceLattice::zeros(m, half);
        for (node, out) in self.surface.nodes.iter().zip(lat.data.iter_mut()) {
            let mut acc = [0.0; 3];
            for &(p, w) in node {
                for a in 0..3 {
                    acc[a] += w * (self.x[p][a] - self.x0[p][a]);
                }
            }
            *out = acc;
        }
        lat
    }

    fn frame(&mut self, phase: Phase) -> Result<SimFrame> {
        let lattice = self.surface_lattice();
        let force = self.contact_force();
        if !lattice.is_finite() || !force.iter().all(|f| f.is_finite()) {
            return Err(Error::Unstable {
                step: self.steps,
                frame: None,
            });
        }
        Ok(SimFrame {
            surface_displacement: lattice,
            contact_force: force,
            indenter_pose: self.pose,
            depth: self.pose.depth(),
            phase,
            time: self.time,
        })
    }
}

/// Quadratic B-spline stencil: base node index and per-axis weights.
#[inline(always)]
fn stencil(x: &[f64; 3], origin: &[f64; 3], inv_dx: f64) -> ([usize; 3], [[f64; 3]; 3]) {
    let mut base = [0usize; 3];
    let mut w = [[0.0; 3]; 3];
    for a in 0..3 {
        let g = (x[a] - origin[a]) * inv_dx;
        let b = (g - 0.5).floor();
        let fx = g - b;
        base[a] = b as usize;
        w[a] = [
            0.5 * (1.5 - fx) * (1.5 - fx),
            0.75 - (fx - 1.0) * (fx - 1.0),
            0.5 * (fx - 0.5) * (fx - 0.5),
        ];
    }
    (base, w)
}

/// Rotation factor of the polar decomposition `F = R S`, by Newton iteration
/// `R <- (R + R^-T) / 2`.
pub fn polar_rotation(f: &Mat3) -> Mat3 {
    let mut r = *f;
    for _ in 0..20 {
        // R^-T is the cofactor matrix over the determinant.
        let cof = Mat3::new(
            r[(1, 1)] * r[(2, 2)] - r[(1, 2)] * r[(2, 1)],
            r[(1, 2)] * r[(2, 0)] - r[(1, 0)] * r[(2, 2)],
            r[(1, 0)] * r[(2, 1)] - r[(1, 1)] * r[(2, 0)],
            r[(0, 2)] * r[(2, 1)] - r[(0, 1)] * r[(2, 2)],
            r[(0, 0)] * r[(2, 2)] - r[(0, 2)] * r[(2, 0)],
            r[(0, 1)] * r[(2, 0)] - r[(0, 0)] * r[(2, 1)],
            r[(0, 1)] * r[(1, 2)] - r[(0, 2)] * r[(1, 1)],
            r[(0, 2)] * r[(1, 0)] - r[(0, 0)] * r[(1, 2)],
            r[(0, 0)] * r[(1, 1)] - r[(0, 1)] * r[(1, 0)],
        );
        let det = r[(0, 0)] * cof[(0, 0)] + r[(0, 1)] * cof[(0, 1)] + r[(0, 2)] * cof[(0, 2)];
        if det.abs() < 1e-300 {
            return Mat3::identity();
        }
        let next = (r + cof / det) * 0.5;
        let delta = (next - r).norm_squared();
        r = next;
        if delta < 1e-24 {
            break;
        }
    }
    r
}

fn sdf_normal(shape: &Shape, pose: &Pose, p: &Vec3) -> [f64; 3] {
    let h = 1e-4;
    let mut g = [0.0; 3];
    for a in 0..3 {
        let mut e = Vec3::zeros();
        e[a] = h;
        let dp = shape.distance(&pose.to_local(&(p + e)));
        let dm = shape.distance(&pose.to_local(&(p - e)));
        g[a] = (dp - dm) / (2.0 * h);
    }
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if n > 1e-12 {
        [g[0] / n, g[1] / n, g[2] / n]
    } else {
        [0.0, 0.0, -1.0]
    }
}

/// Builds the particle cloud, grid and surface stencil.
pub fn init_sim(mat: &MaterialParams, cfg: &MpmConfig, indenter: &IndenterSpec) -> Result<SimState> {
    mat.validate()?;
    cfg.validate(mat)?;
    let shape = indenter.shape()?;
    let [w, d, h] = cfg.block_size;
    let dx = cfg.dx;
    let cells = [
        (w / dx).round() as usize,
        (d / dx).round() as usize,
        (h / dx).round() as usize,
    ];
    if cells.iter().zip([w, d, h]).any(|(&c, s)| c == 0 || (c as f64 * dx - s).abs() > 1e-9) {
        return Err(Error::invalid("block size must be a whole number of grid cells"));
    }
    let ppc = cfg.particles_per_cell;
    let per_axis = (ppc as f64).cbrt().round() as usize;
    let lattice_fill = per_axis.pow(3) == ppc;
    let spacing = dx / (ppc as f64).cbrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x0 = Vec::with_capacity(cells[0] * cells[1] * cells[2] * ppc);
    for ci in 0..cells[0] {
        for cj in 0..cells[1] {
            for ck in 0..cells[2] {
                let corner = [ci as f64 * dx, cj as f64 * dx, ck as f64 * dx];
                if lattice_fill {
                    let s = dx / per_axis as f64;
                    for a in 0..per_axis {
                        for b in 0..per_axis {
                            for c in 0..per_axis {
                                let mut p = [
                                    corner[0] + (a as f64 + 0.5) * s,
                                    corner[1] + (b as f64 + 0.5) * s,
                                    corner[2] + (c as f64 + 0.5) * s,
                                ];
                                if cfg.jitter > 0.0 {
                                    for q in p.iter_mut() {
                                        *q += cfg.jitter * s * rng.gen_range(-1.0..1.0);
                                    }
                                }
                                x0.push(p);
                            }
                        }
                    }
                } else {
                    for _ in 0..ppc {
                        x0.push([
                            corner[0] + dx * rng.gen::<f64>(),
                            corner[1] + dx * rng.gen::<f64>(),
                            corner[2] + dx * rng.gen::<f64>(),
                        ]);
                    }
                }
            }
        }
    }

    let n = x0.len();
    let (lambda, mu) = mat.lame_mpa();
    let rho = mat.density * cfg.mass_scale * 1e-12;
    let particle_vol = dx * dx * dx / ppc as f64;
    let dims = [cells[0] + 1 + 2 * PAD, cells[1] + 1 + 2 * PAD, cells[2] + 1 + 2 * PAD];
    let origin = [-(PAD as f64) * dx, -(PAD as f64) * dx, -(PAD as f64) * dx];

    let surface = build_surface_stencil(&x0, cfg);
    Ok(SimState {
        mat: *mat,
        cfg: cfg.clone(),
        lambda,
        mu,
        particle_mass: rho * particle_vol,
        particle_vol,
        spacing,
        x: x0.clone(),
        x0,
        v: vec![[0.0; 3]; n],
        c: vec![Mat3::zeros(); n],
        f: vec![Mat3::identity(); n],
        dims,
        origin,
        grid: vec![Node::default(); dims[0] * dims[1] * dims[2]],
        grid_v: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
        shape,
        reach: indenter.bounding_radius() + 2.0 * dx,
        pose: Pose::new(0.0, 0.0, 10.0),
        velocity: [0.0; 3],
        time: 0.0,
        steps: 0,
        recent_impulse: VecDeque::with_capacity(cfg.force_window + 1),
        surface,
        touching: vec![false; n],
    })
}

fn build_surface_stencil(x0: &[[f64; 3]], cfg: &MpmConfig) -> SurfaceStencil {
    let [w, d, h] = cfg.block_size;
    let surf: Vec<usize> = (0..x0.len())
        .filter(|&p| x0[p][2] >= h - SURFACE_LAYER_MM)
        .collect();
    let m = cfg.lattice_size;
    let half = 0.5 * w.min(d);
    let mut nodes = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let nx = 0.5 * w - half + 2.0 * half * i as f64 / (m - 1) as f64;
            let ny = 0.5 * d - half + 2.0 * half * j as f64 / (m - 1) as f64;
            let mut best: Vec<(f64, usize)> = surf
                .iter()
                .map(|&p| {
                    let q = x0[p];
                    ((q[0] - nx).powi(2) + (q[1] - ny).powi(2) + (q[2] - h).powi(2), p)
                })
                .collect();
            best.select_nth_unstable_by(SURFACE_NEIGHBORS - 1, |a, b| {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            });
            best.truncate(SURFACE_NEIGHBORS);
            best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let raw: Vec<f64> = best.iter().map(|(d2, _)| 1.0 / (d2 + 1e-6)).collect();
            let total: f64 = raw.iter().sum();
            let mut entry = [(0usize, 0.0); SURFACE_NEIGHBORS];
            for (k, ((_, p), wgt)) in best.iter().zip(raw).enumerate() {
                entry[k] = (*p, wgt / total);
            }
            nodes.push(entry);
        }
    }
    SurfaceStencil { nodes }
}

/// Runs one contact cycle: settles at the origin, then moves through each
/// waypoint at the trajectory speed, capturing a frame every frame period of
/// motion and one more after `settle_steps` at every waypoint.
pub fn run_contact_sequence(
    state: &mut SimState,
    seq: &ContactSequence,
    traj: &TrajectoryConfig,
) -> Result<Vec<SimFrame>> {
    traj.validate()?;
    let (first, first_phase) = *seq
        .waypoints
        .first()
        .ok_or_else(|| Error::invalid("empty contact sequence"))?;
    let dt = state.cfg.dt;
    let settle = state.cfg.settle_steps;
    let steps_per_frame = ((1.0 / (traj.frame_rate * dt)).round() as usize).max(1);
    let travel_per_step = traj.speed * dt;

    let mut frames = Vec::new();
    let fail = |e: Error, frame: usize| match e {
        Error::Unstable { step, .. } => Error::Unstable {
            step,
            frame: Some(frame),
        },
        other => other,
    };

    state.set_pose(first);
    state.velocity = [0.0; 3];
    for _ in 0..settle {
        state.step().map_err(|e| fail(e, frames.len()))?;
    }
    frames.push(state.frame(first_phase)?);

    for &(target, phase) in &seq.waypoints[1..] {
        let start = state.pose.position();
        let delta = target.position() - start;
        let dist = delta.norm();
        if dist > 0.0 {
            let dir = delta / dist;
            let n_steps = ((dist / travel_per_step) - 1e-9).ceil().max(1.0) as usize;
            let mut moved = 0.0;
            for s in 0..n_steps {
                let len = travel_per_step.min(dist - moved);
                moved += len;
                let vel = dir * (len / dt);
                state.velocity = [vel.x, vel.y, vel.z];
                state.step().map_err(|e| fail(e, frames.len()))?;
                if (s + 1) % steps_per_frame == 0 && s + 1 < n_steps {
                    frames.push(state.frame(phase)?);
                }
            }
        }
        // Land exactly on the waypoint.
        state.set_pose(target);
        state.velocity = [0.0; 3];
        for _ in 0..settle {
            state.step().map_err(|e| fail(e, frames.len()))?;
        }
        frames.push(state.frame(phase)?);
    }
    Ok(frames)
}

/// Force on a rigid flat punch of contact half-width `a` pressed `d_z` into a
/// specimen: `F = α E* d_z` with `α = 2a` and `E* = E`. Inputs in Pa and mm.
pub fn flat_punch_force(youngs_modulus: f64, _poisson: f64, contact_halfwidth: f64, depth: f64) -> Result<f64> {
    if depth < 0.0 {
        return Err(Error::invalid("negative indentation depth"));
    }
    if !(contact_halfwidth > 0.0) {
        return Err(Error::invalid("contact half-width must be positive"));
    }
    let alpha = 2.0 * contact_halfwidth; // mm
    Ok(alpha * youngs_modulus * 1e-6 * depth)
}
