//! Dataset manifests and the experiment commands behind the CLI.
//!
//! A dataset directory holds `manifest.json`, the sensor's `reference.pbm`,
//! and one directory per contact sequence with `frame_NNNN.pbm` images and a
//! `forces.csv`. Every file is written to a temporary name and renamed into
//! place, and nothing in a dataset depends on the wall clock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::force::{
    compensate_labels, evaluate, fit_material_prior, read_priors, sequence_features, train, upsert_prior,
    write_priors, CompensationConfig, EvalReport, ForceModel, MaterialPrior, SequenceSample, TrainConfig,
};
use crate::imaging::{rasterize, warp_markers, BinaryImage, CameraMap, MarkerFamily, MarkerPattern, PatternSpec};
use crate::m2m::{translate_image_detailed, DepthAlignment, TranslationReport, DEFAULT_LAMBDA};
use crate::mpm::{init_sim, run_contact_sequence, MaterialParams, MpmConfig, SimFrame, SurfaceLattice};
use crate::scenario::{catalog_indenter, generate_trajectory, ContactSequence, Phase, Pose, TrajectoryConfig};
use crate::unify::{read_taxel_log, segment_markers, taxel_to_markers, MarkerSet, TaxelConfig};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REFERENCE_FILE: &str = "reference.pbm";
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Small I/O helpers

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

/// Deserializes `base` with the keys of `over` replacing its own.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Table>) -> Result<T> {
    let Some(over) = over else {
        return Ok(toml::from_str(&toml::to_string(base).map_err(|e| Error::invalid(e.to_string()))?)?);
    };
    let mut table: toml::Table = toml::from_str(&toml::to_string(base).map_err(|e| Error::invalid(e.to_string()))?)?;
    for (k, v) in over {
        if !table.contains_key(k) {
            return Err(Error::invalid(format!("unknown config key `{k}`")));
        }
        table.insert(k.clone(), v.clone());
    }
    Ok(table.try_into()?)
}

// ---------------------------------------------------------------------------
// Sensor and dataset descriptions

/// What a dataset was captured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorDescriptor {
    pub id: String,
    pub pattern: MarkerFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_mm: Option<f64>,
    #[serde(default = "default_material_id")]
    pub material_id: String,
    /// Deepest indentation, mm.
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    /// Side length of the marker face, mm.
    #[serde(default = "default_area")]
    pub active_area: f64,
    /// Marker radius gain with surface height.
    #[serde(default)]
    pub radius_gain: f64,
    #[serde(default = "default_px_per_mm")]
    pub px_per_mm: f64,
}

fn default_material_id() -> String {
    "base".into()
}
fn default_z_max() -> f64 {
    1.2
}
fn default_area() -> f64 {
    20.0
}
fn default_px_per_mm() -> f64 {
    24.0
}

impl SensorDescriptor {
    pub fn new(id: &str, pattern: MarkerFamily) -> Self {
        Self {
            id: id.to_string(),
            pattern,
            pitch_mm: None,
            radius_mm: None,
            material_id: default_material_id(),
            z_max: default_z_max(),
            active_area: default_area(),
            radius_gain: 0.0,
            px_per_mm: default_px_per_mm(),
        }
    }

    pub fn marker_pattern(&self) -> Result<MarkerPattern> {
        PatternSpec {
            family: self.pattern,
            pitch_mm: self.pitch_mm,
            radius_mm: self.radius_mm,
        }
        .build()
    }

    pub fn camera(&self) -> CameraMap {
        CameraMap {
            px_per_mm: self.px_per_mm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("sensor id is empty"));
        }
        if !(self.z_max > 0.0 && self.active_area > 0.0) {
            return Err(Error::invalid("sensor z_max and active_area must be positive"));
        }
        self.camera().validate()?;
        self.marker_pattern()?.validate()
    }

    pub fn reference_image(&self) -> Result<BinaryImage> {
        Ok(rasterize(&self.marker_pattern()?.markers, &self.camera()))
    }
}

/// Sequence record inside a manifest; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub key: String,
    pub indenter: String,
    pub contact_point: [f64; 2],
    pub direction_index: usize,
    pub depth_level: usize,
    /// Deepest indentation of the sequence, mm.
    pub target_depth: f64,
    pub frames: Vec<String>,
    pub forces: String,
    pub phases: Vec<Phase>,
    /// Frames produced by a fallback path (quality gate or tracking failure).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flagged_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub key: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dataset_id: String,
    pub sensor: SensorDescriptor,
    pub reference_image: String,
    pub sequences: Vec<SequenceEntry>,
    /// Resolved configuration the dataset was created from.
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON encoding of `config`.
    pub config_hash: String,
    pub seed: u64,
    /// Sub-steps that failed; a manifest with failures never validates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureEntry>,
}

/// One row of a sequence's `forces.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceRow {
    pub frame: usize,
    pub time_s: f64,
    pub phase: String,
    pub depth_mm: f64,
    #[serde(rename = "fx_N")]
    pub fx: f64,
    #[serde(rename = "fy_N")]
    pub fy: f64,
    #[serde(rename = "fz_N")]
    pub fz: f64,
}

impl ForceRow {
    pub fn force(&self) -> [f64; 3] {
        [self.fx, self.fy, self.fz]
    }

    pub fn phase(&self) -> Result<Phase> {
        Phase::parse(&self.phase)
    }
}

pub fn config_hash(config: &serde_json::Value) -> String {
    sha256_hex(config.to_string().as_bytes())
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_json()?.as_bytes())
    }

    /// Reads `dir/manifest.json` (or the manifest file itself) without validating.
    pub fn read_unchecked(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let m: Self = serde_json::from_str(&read_text(&file)?)
            .map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        Ok((m, dir))
    }

    /// Reads and validates; returns the manifest and its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let (m, dir) = Self::read_unchecked(path)?;
        m.validate(&dir)?;
        Ok((m, dir))
    }

    pub fn validate(&self, dir: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        if !self.failures.is_empty() {
            return bad(format!(
                "partial dataset: {} failed sequence(s), first `{}`: {}",
                self.failures.len(),
                self.failures[0].key,
                self.failures[0].error
            ));
        }
        if config_hash(&self.config) != self.config_hash {
            return bad("config hash does not match the stored config".into());
        }
        self.sensor.validate()?;
        if !dir.join(&self.reference_image).is_file() {
            return bad(format!("missing reference image {}", self.reference_image));
        }
        for s in &self.sequences {
            if s.frames.len() != s.phases.len() {
                return bad(format!("{}: {} frames but {} phases", s.key, s.frames.len(), s.phases.len()));
            }
            for f in s.frames.iter().chain(std::iter::once(&s.forces)) {
                if !dir.join(f).is_file() {
                    return bad(format!("{}: missing file {f}", s.key));
                }
            }
            let rows = read_forces(&dir.join(&s.forces))?;
            if rows.len() != s.frames.len() {
                return bad(format!("{}: {} frames but {} force rows", s.key, s.frames.len(), rows.len()));
            }
        }
        Ok(())
    }
}

pub fn read_forces(path: &Path) -> Result<Vec<ForceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    })?;
    let rows: std::result::Result<Vec<ForceRow>, _> = r.deserialize().collect();
    rows.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Simulation

/// Simulator output for one contact sequence.
#[derive(Clone, Debug)]
pub struct SimulatedSequence {
    pub sequence: ContactSequence,
    pub frames: Vec<SimFrame>,
}

/// Runs one sequence from a fresh elastomer block.
pub fn simulate_sequence(
    mat: &MaterialParams,
    mpm: &MpmConfig,
    traj: &TrajectoryConfig,
    seq: &ContactSequence,
) -> Result<Vec<SimFrame>> {
    let spec = catalog_indenter(&seq.indenter)?;
    let mut state = init_sim(mat, mpm, &spec)?;
    run_contact_sequence(&mut state, seq, traj)
}

/// Where a sequence's simulation lives in the cache.
fn cache_key(mat: &MaterialParams, mpm: &MpmConfig, traj: &TrajectoryConfig, seq: &ContactSequence) -> Result<String> {
    let v = serde_json::json!({ "material": mat, "mpm": mpm, "trajectory": traj, "sequence": seq });
    Ok(sha256_hex(v.to_string().as_bytes()))
}

const CACHE_MAGIC: &[u8; 4] = b"TFSQ";

fn encode_frames(frames: &[SimFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        let phase = [Phase::Rest, Phase::NormalIncrease, Phase::ShearIncrease, Phase::ShearDecrease, Phase::NormalDecrease]
            .iter()
            .position(|p| *p == f.phase)
            .unwrap() as u8;
        out.push(phase);
        let p = &f.indenter_pose;
        for v in [p.translation[0], p.translation[1], p.translation[2], p.yaw, f.depth, f.time]
            .iter()
            .chain(&f.contact_force)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let lat = f.surface_displacement.to_bytes();
        out.extend_from_slice(&(lat.len() as u32).to_le_bytes());
        out.extend_from_slice(&lat);
    }
    out
}

fn decode_frames(bytes: &[u8], half_extent: f64) -> Result<Vec<SimFrame>> {
    let bad = || Error::invalid("corrupt simulation cache entry");
    if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut at = 8;
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + len).ok_or_else(bad)?;
        at += len;
        Ok(s)
    };
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let phase = match take(1)?[0] {
            0 => Phase::Rest,
            1 => Phase::NormalIncrease,
            2 => Phase::ShearIncrease,
            3 => Phase::ShearDecrease,
            4 => Phase::NormalDecrease,
            _ => return Err(bad()),
        };
        let v: Vec<f64> = take(72)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let lattice = SurfaceLattice::from_bytes(take(len)?, half_extent)?;
        frames.push(SimFrame {
            surface_displacement: lattice,
            contact_force: [v[6], v[7], v[8]],
            indenter_pose: Pose {
                translation: [v[0], v[1], v[2]],
                yaw: v[3],
            },
            depth: v[4],
            phase,
            time: v[5],
        });
    }
    Ok(frames)
}

/// Cached variant of [`simulate_sequence`]. Lattices are stored in f32, so a
/// cache hit returns the rounded lattice; a miss rounds the same way so both
/// paths give identical frames.
pub fn simulate_cached(
    mat: &MaterialParams,
    mpm: &MpmConfig,
    traj: &TrajectoryConfig,
    seq: &ContactSequence,
    cache_dir: Option<&Path>,
) -> Result<Vec<SimFrame>> {
    let half = 0.5 * mpm.block_size[0];
    let Some(dir) = cache_dir else {
        let frames = simulate_sequence(mat, mpm, traj, seq)?;
        return decode_frames(&encode_frames(&frames), half);
    };
    let path = dir.join(format!("{}.tfsq", cache_key(mat, mpm, traj, seq)?));
    if let Ok(bytes) = fs::read(&path) {
        match decode_frames(&bytes, half) {
            Ok(frames) => return Ok(frames),
            Err(e) => warn!("ignoring {}: {e}", path.display()),
        }
    }
    let bytes = encode_frames(&simulate_sequence(mat, mpm, traj, seq)?);
    write_atomic(&path, &bytes)?;
    decode_frames(&bytes, half)
}

/// Renders a simulated surface as the sensor would image it.
pub fn render_frame(pattern: &MarkerPattern, lattice: &SurfaceLattice, cam: &CameraMap, radius_gain: f64, thickness: f64) -> Result<BinaryImage> {
    let disks = warp_markers(pattern, |x, y| lattice.sample(x, y), radius_gain, thickness)?;
    Ok(rasterize(&disks, cam))
}

// ---------------------------------------------------------------------------
// generate

/// Scenario section of a generate config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub indenters: Vec<String>,
    pub directions: usize,
    pub trajectory: TrajectoryConfig,
}

impl Default for ScenarioConfig {
    /// Desk scale: two indenters, five locations, four depth levels.
    fn default() -> Self {
        Self {
            indenters: vec!["sphere".into(), "cylinder".into()],
            directions: 1,
            trajectory: TrajectoryConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub dataset_id: String,
    pub sensor: SensorDescriptor,
    pub material: MaterialParams,
    pub sim: MpmConfig,
    pub scenario: ScenarioConfig,
    pub seed: u64,
}

impl GenerateConfig {
    pub fn desk(sensor: SensorDescriptor) -> Self {
        Self {
            dataset_id: sensor.id.clone(),
            sensor,
            material: MaterialParams::default(),
            sim: MpmConfig::desk(),
            scenario: ScenarioConfig::default(),
            seed: 0,
        }
    }

    pub fn sequences(&self) -> Result<Vec<ContactSequence>> {
        let traj = &self.scenario.trajectory;
        let points = traj.surface_points();
        let mut out = Vec::new();
        for ind in &self.scenario.indenters {
            catalog_indenter(ind)?;
            out.extend(generate_trajectory(traj, ind, &points, self.scenario.directions)?);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.material.validate()?;
        self.sim.validate(&self.material)?;
        self.scenario.trajectory.validate()?;
        if self.scenario.indenters.is_empty() {
            return Err(Error::invalid("scenario lists no indenters"));
        }
        if self.scenario.trajectory.max_depth > self.sensor.z_max + 1e-9 {
            return Err(Error::invalid("trajectory goes deeper than the sensor's z_max"));
        }
        Ok(())
    }
}

fn write_sequence(
    dir: &Path,
    key: &str,
    images: &[BinaryImage],
    rows: &[ForceRow],
) -> Result<(Vec<String>, String)> {
    let mut names = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let rel = format!("{key}/frame_{i:04}.pbm");
        write_atomic(&dir.join(&rel), &img.to_pbm())?;
        names.push(rel);
    }
    let forces = format!("{key}/forces.csv");
    write_atomic(&dir.join(&forces), &csv_bytes(rows)?)?;
    Ok((names, forces))
}

fn sequence_entry(seq: &ContactSequence, frames: Vec<String>, forces: String, phases: Vec<Phase>) -> SequenceEntry {
    let p = seq.waypoints[1].0;
    SequenceEntry {
        key: seq.key(),
        indenter: seq.indenter.clone(),
        contact_point: [p.translation[0], p.translation[1]],
        direction_index: seq.direction_index,
        depth_level: seq.depth_level,
        target_depth: seq.target_depth(),
        frames,
        forces,
        phases,
        flagged_frames: Vec::new(),
    }
}

/// Simulates every sequence, renders the sensor's images and writes the dataset.
/// Failed sequences are logged in the manifest, which then does not validate.
pub fn cmd_generate(cfg: &GenerateConfig, out: &Path, cache_dir: Option<&Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let pattern = cfg.sensor.marker_pattern()?;
    let cam = cfg.sensor.camera();
    let mut sim = cfg.sim.clone();
    sim.seed = cfg.seed;
    let thickness = sim.block_size[2];
    write_atomic(&out.join(REFERENCE_FILE), &rasterize(&pattern.markers, &cam).to_pbm())?;

    let mut sequences = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for seq in cfg.sequences()? {
        let key = seq.key();
        let frames = match simulate_cached(&cfg.material, &sim, &cfg.scenario.trajectory, &seq, cache_dir) {
            Ok(f) => f,
            Err(e) => {
                warn!("{key}: {e}");
                failures.push(FailureEntry {
                    key,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
                continue;
            }
        };
        let images = frames
            .iter()
            .map(|f| render_frame(&pattern, &f.surface_displacement, &cam, cfg.sensor.radius_gain, thickness))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<ForceRow> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| ForceRow {
                frame: i,
                time_s: f.time,
                phase: f.phase.label().to_string(),
                depth_mm: f.depth,
                fx: f.contact_force[0],
                fy: f.contact_force[1],
                fz: f.contact_force[2],
            })
            .collect();
        let (names, forces) = write_sequence(out, &key, &images, &rows)?;
        info!("{key}: {} frames", names.len());
        sequences.push(sequence_entry(&seq, names, forces, frames.iter().map(|f| f.phase).collect()));
    }
    let config = serde_json::to_value(cfg)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dataset_id: cfg.dataset_id.clone(),
        sensor: cfg.sensor.clone(),
        reference_image: REFERENCE_FILE.into(),
        sequences,
        config_hash: config_hash(&config),
        config,
        seed: cfg.seed,
        failures,
    };
    manifest.write(out)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

// ---------------------------------------------------------------------------
// translate

/// Paired frame lookup: sequences by (indenter, contact point, direction,
/// normalized depth), frames by (phase, rank within phase) with a nearest
/// normalized-depth fallback.
pub struct FramePairing<'a> {
    target: &'a DatasetManifest,
    target_dir: &'a Path,
}

impl<'a> FramePairing<'a> {
    pub fn new(target: &'a DatasetManifest, target_dir: &'a Path) -> Self {
        Self { target, target_dir }
    }

    fn sequence_for(&self, src: &SequenceEntry, src_zmax: f64) -> Option<&'a SequenceEntry> {
        let z = src.target_depth / src_zmax;
        let tz = self.target.sensor.z_max;
        self.target.sequences.iter().find(|t| {
            t.indenter == src.indenter
                && t.direction_index == src.direction_index
                && (t.contact_point[0] - src.contact_point[0]).abs() < 1e-6
                && (t.contact_point[1] - src.contact_point[1]).abs() < 1e-6
                && (t.target_depth / tz - z).abs() < 1e-6
        })
    }

    /// Path of the target frame paired with frame `i` of `src`.
    pub fn frame_for(&self, src: &SequenceEntry, src_zmax: f64, i: usize, src_depths: &[f64]) -> Result<Option<PathBuf>> {
        let Some(t) = self.sequence_for(src, src_zmax) else {
            return Ok(None);
        };
        let phase = src.phases[i];
        let rank = src.phases[..i].iter().filter(|p| **p == phase).count();
        let same: Vec<usize> = (0..t.phases.len()).filter(|&k| t.phases[k] == phase).collect();
        let src_count = src.phases.iter().filter(|p| **p == phase).count();
        let k = if same.len() == src_count {
            same.get(rank).copied()
        } else {
            let rows = read_forces(&self.target_dir.join(&t.forces))?;
            let z = src_depths[i] / src_zmax;
            same.iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = (rows[a].depth_mm / self.target.sensor.z_max - z).abs();
                    let db = (rows[b].depth_mm / self.target.sensor.z_max - z).abs();
                    da.total_cmp(&db)
                })
        };
        Ok(k.map(|k| self.target_dir.join(&t.frames[k])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationSpec {
    /// Priors CSV holding both materials.
    pub priors: PathBuf,
    pub source_material: String,
    pub target_material: String,
    #[serde(default)]
    pub options: CompensationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateConfig {
    pub dataset_id: String,
    /// Source dataset directory or manifest file.
    pub source: PathBuf,
    pub target: SensorDescriptor,
    pub lambda: f64,
    /// Optional target-domain dataset used to score the translation.
    pub truth: Option<PathBuf>,
    pub compensation: Option<CompensationSpec>,
    pub seed: u64,
}

/// One row of `translation_report.csv`; errors are empty when no paired
/// truth frame exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRow {
    pub frame: String,
    pub mean_err_px: Option<f64>,
    pub max_err_px: Option<f64>,
    pub iou: Option<f64>,
    pub matched_fraction: f64,
    pub status: String,
}

fn load_prior(priors: &[MaterialPrior], id: &str) -> Result<MaterialPrior> {
    priors
        .iter()
        .find(|p| p.material_id == id)
        .cloned()
        .ok_or_else(|| Error::invalid(format!("no prior for material `{id}`")))
}

/// Translates every source frame onto the target sensor and copies (or
/// compensates) the labels.
pub fn cmd_translate(cfg: &TranslateConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.target.validate()?;
    let (src, src_dir) = DatasetManifest::load(&cfg.source)?;
    let truth = match &cfg.truth {
        Some(p) => Some(DatasetManifest::load(p)?),
        None => None,
    };
    let pairing = truth.as_ref().map(|(m, d)| FramePairing::new(m, d));
    let comp = match &cfg.compensation {
        Some(c) => {
            let priors = read_priors(&c.priors)?;
            Some((load_prior(&priors, &c.source_material)?, load_prior(&priors, &c.target_material)?, c.options))
        }
        None => None,
    };
    let i0_src = BinaryImage::read_pnm(&src_dir.join(&src.reference_image))?;
    let i0_tgt = cfg.target.reference_image()?;
    write_atomic(&out.join(REFERENCE_FILE), &i0_tgt.to_pbm())?;
    let align = DepthAlignment {
        source_zmax: src.sensor.z_max,
        target_zmax: cfg.target.z_max,
        source_area: src.sensor.active_area,
        target_area: cfg.target.active_area,
    };

    let mut report = Vec::new();
    let mut sequences = Vec::new();
    for s in &src.sequences {
        let rows = read_forces(&src_dir.join(&s.forces))?;
        let depths: Vec<f64> = rows.iter().map(|r| r.depth_mm).collect();
        let mut images = Vec::with_capacity(s.frames.len());
        let mut flagged = Vec::new();
        for (i, f) in s.frames.iter().enumerate() {
            let it = BinaryImage::read_pnm(&src_dir.join(f))?;
            let name = format!("{}/frame_{i:04}.pbm", s.key);
            let (img, matched, status) = match translate_image_detailed(&it, &i0_src, &i0_tgt, &align, cfg.lambda) {
                Ok(t) => (t.image, t.matched_fraction, "ok"),
                Err(Error::QualityGate { partial, .. }) => {
                    flagged.push(i);
                    (*partial, f64::NAN, "quality_gate")
                }
                Err(Error::Tracking { matched_fraction, .. }) => {
                    flagged.push(i);
                    (i0_tgt.clone(), matched_fraction, "tracking")
                }
                Err(e) => return Err(e),
            };
            let scored = match &pairing {
                Some(p) => p
                    .frame_for(s, src.sensor.z_max, i, &depths)?
                    .map(|path| BinaryImage::read_pnm(&path).map(|t| TranslationReport::compare(&img, &t)))
                    .transpose()?,
                None => None,
            };
            let finite = |v: f64| if v.is_finite() { Some(v) } else { None };
            report.push(TranslationRow {
                frame: name,
                mean_err_px: scored.and_then(|r| finite(r.mean_marker_error)),
                max_err_px: scored.and_then(|r| finite(r.max_marker_error)),
                iou: scored.map(|r| r.pixel_iou),
                matched_fraction: if matched.is_finite() { matched } else { 0.0 },
                status: status.into(),
            });
            images.push(img);
        }
        let labels: Vec<[f64; 3]> = rows.iter().map(ForceRow::force).collect();
        let labels = match &comp {
            Some((ps, pt, opts)) => {
                let phases = rows.iter().map(ForceRow::phase).collect::<Result<Vec<_>>>()?;
                compensate_labels(&labels, &depths, &phases, ps, pt, opts)?
            }
            None => labels,
        };
        let out_rows: Vec<ForceRow> = rows
            .iter()
            .zip(&labels)
            .map(|(r, l)| ForceRow {
                fx: l[0],
                fy: l[1],
                fz: l[2],
                ..r.clone()
            })
            .collect();
        let (names, forces) = write_sequence(out, &s.key, &images, &out_rows)?;
        sequences.push(SequenceEntry {
            frames: names,
            forces,
            flagged_frames: flagged,
            ..s.clone()
        });
    }
    write_atomic(&out.join("translation_report.csv"), &csv_bytes(&report)?)?;
    let config = serde_json::json!({
        "translate": cfg,
        "source_config_hash": src.config_hash,
    });
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        dataset_id: cfg.dataset_id.clone(),
        sensor: cfg.target.clone(),
        reference_image: REFERENCE_FILE.into(),
        sequences,
        config_hash: config_hash(&config),
        config,
        seed: cfg.seed,
        failures: Vec::new(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// train / eval

/// Turns a dataset into feature sequences with force labels.
pub fn load_samples(path: &Path, lambda: f64) -> Result<Vec<SequenceSample>> {
    let (m, dir) = DatasetManifest::load(path)?;
    let reference = segment_markers(&BinaryImage::read_pnm(&dir.join(&m.reference_image))?);
    let mut out = Vec::with_capacity(m.sequences.len());
    for s in &m.sequences {
        let rows = read_forces(&dir.join(&s.forces))?;
        let sets = s
            .frames
            .iter()
            .map(|f| BinaryImage::read_pnm(&dir.join(f)).map(|img| segment_markers(&img)))
            .collect::<Result<Vec<MarkerSet>>>()?;
        out.push(SequenceSample {
            frames: sequence_features(&reference, &sets, lambda),
            forces: rows.iter().map(ForceRow::force).collect(),
            depths: rows.iter().map(|r| r.depth_mm).collect(),
            phases: rows.iter().map(ForceRow::phase).collect::<Result<_>>()?,
            sensor_id: m.sensor.id.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCmdConfig {
    pub datasets: Vec<PathBuf>,
    pub lambda: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    val_mae_n: f64,
}

/// Trains on the listed datasets; writes `model.tfm` and `train_log.csv`.
pub fn cmd_train(cfg: &TrainCmdConfig, out: &Path) -> Result<ForceModel> {
    if cfg.datasets.is_empty() {
        return Err(Error::invalid("no training datasets"));
    }
    let mut samples = Vec::new();
    for d in &cfg.datasets {
        samples.extend(load_samples(d, cfg.lambda)?);
    }
    let res = train(&samples, &cfg.train)?;
    write_atomic(&out.join("model.tfm"), &res.model.to_bytes())?;
    let log: Vec<EpochRow> = res
        .train_loss
        .iter()
        .zip(&res.val_mae)
        .enumerate()
        .map(|(epoch, (l, v))| EpochRow {
            epoch,
            train_loss: *l,
            val_mae_n: *v,
        })
        .collect();
    write_atomic(&out.join("train_log.csv"), &csv_bytes(&log)?)?;
    info!("best epoch {} of {}", res.best_epoch, cfg.train.epochs);
    Ok(res.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCmdConfig {
    pub model: PathBuf,
    pub datasets: Vec<PathBuf>,
    pub lambda: f64,
}

/// Report rows: `Fx`, `Fy`, `Fz`, `Ftotal`; R² is `undefined` for constant labels.
pub fn eval_report_csv(report: &EvalReport, total_r2: Option<f64>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "mae_N", "r2"])?;
    let fmt = |r: Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| v.to_string());
    for (name, mae, r2) in [
        ("Fx", report.mae[0], report.r2[0]),
        ("Fy", report.mae[1], report.r2[1]),
        ("Fz", report.mae[2], report.r2[2]),
        ("Ftotal", report.total_mae, total_r2),
    ] {
        w.write_record([name.to_string(), mae.to_string(), fmt(r2)])?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))
}

/// Evaluates a model on datasets carrying ground-truth forces; writes `eval_report.csv`.
pub fn cmd_eval(cfg: &EvalCmdConfig, out: &Path) -> Result<EvalReport> {
    let model = ForceModel::load(&cfg.model)?;
    let mut samples = Vec::new();
    for d in &cfg.datasets {
        samples.extend(load_samples(d, cfg.lambda)?);
    }
    if samples.is_empty() {
        return Err(Error::invalid("no evaluation sequences"));
    }
    let report = evaluate(&model, &samples)?;
    let mut pred_mag = Vec::new();
    let mut true_mag = Vec::new();
    for s in &samples {
        for (p, t) in model.forward(&s.frames)?.iter().zip(&s.forces) {
            pred_mag.push((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
            true_mag.push((t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt());
        }
    }
    let total_r2 = crate::force::r_squared(&pred_mag, &true_mag);
    write_atomic(&out.join("eval_report.csv"), &eval_report_csv(&report, total_r2)?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// fit-material

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMaterialConfig {
    /// CSV with columns `depth_mm`, `fz_N`, `phase`.
    pub input: PathBuf,
    pub material_id: String,
    /// Priors file to update; defaults to `<out>/priors.csv`.
    pub priors: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct DepthForceRow {
    depth_mm: f64,
    #[serde(rename = "fz_N")]
    fz: f64,
    phase: String,
}

/// Fits loading/unloading priors and upserts them into the priors file.
pub fn cmd_fit_material(cfg: &FitMaterialConfig, out: &Path) -> Result<MaterialPrior> {
    let mut r = csv::Reader::from_path(&cfg.input).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&cfg.input, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    let mut samples = Vec::new();
    for row in r.deserialize::<DepthForceRow>() {
        let row = row.map_err(|e| Error::invalid(format!("{}: {e}", cfg.input.display())))?;
        samples.push((row.depth_mm, row.fz, Phase::parse(&row.phase)?));
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!("{}: no samples", cfg.input.display())));
    }
    let prior = fit_material_prior(&cfg.material_id, &samples)?;
    let path = cfg.priors.clone().unwrap_or_else(|| out.join("priors.csv"));
    let mut priors = if path.is_file() { read_priors(&path)? } else { Vec::new() };
    if upsert_prior(&mut priors, prior.clone()) {
        warn!("replacing existing prior `{}`", prior.material_id);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("csv.tmp");
    write_priors(&tmp, &priors)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(prior)
}

// ---------------------------------------------------------------------------
// translate-taxel

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxelCmdConfig {
    pub input: PathBuf,
    pub taxel: TaxelConfig,
    /// Row used as the no-contact reference.
    pub reference_row: usize,
}

/// Converts a taxel log into binary marker images, one per row.
pub fn cmd_translate_taxel(cfg: &TaxelCmdConfig, out: &Path) -> Result<usize> {
    cfg.taxel.validate()?;
    let frames = read_taxel_log(&cfg.input)?;
    let reference = frames
        .get(cfg.reference_row)
        .ok_or_else(|| Error::invalid(format!("reference row {} beyond {} rows", cfg.reference_row, frames.len())))?;
    let cam = CameraMap::default();
    let base = taxel_to_markers(reference, reference, &cfg.taxel, &cam);
    write_atomic(&out.join(REFERENCE_FILE), &crate::imaging::rasterize_px(&base.disks()).to_pbm())?;
    for (i, f) in frames.iter().enumerate() {
        let set = taxel_to_markers(f, reference, &cfg.taxel, &cam);
        write_atomic(
            &out.join(format!("frame_{i:04}.pbm")),
            &crate::imaging::rasterize_px(&set.disks()).to_pbm(),
        )?;
    }
    Ok(frames.len())
}

// ---------------------------------------------------------------------------
// Config files

/// Top-level TOML accepted by the CLI. Each command reads its own section;
/// unspecified keys keep their desk defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub sensor: Option<SensorDescriptor>,
    pub material: Option<toml::Table>,
    pub sim: Option<toml::Table>,
    pub scenario: Option<toml::Table>,
    pub cache_dir: Option<PathBuf>,
    pub dataset_id: Option<String>,
    pub translate: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub eval: Option<toml::Table>,
    pub fit_material: Option<toml::Table>,
    pub taxel: Option<toml::Table>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    fn sensor(&self) -> Result<SensorDescriptor> {
        self.sensor
            .clone()
            .ok_or_else(|| Error::invalid("config lacks a [sensor] section"))
    }

    pub fn generate(&self, seed: u64) -> Result<GenerateConfig> {
        let sensor = self.sensor()?;
        let base = GenerateConfig::desk(sensor);
        let mut scenario = base.scenario.clone();
        if let Some(t) = &self.scenario {
            let mut t = t.clone();
            let traj = t.remove("trajectory");
            let traj = match traj {
                Some(toml::Value::Table(tt)) => Some(tt),
                Some(_) => return Err(Error::invalid("[scenario.trajectory] must be a table")),
                None => None,
            };
            let mut merged: ScenarioConfig = overlay(
                &ScenarioConfig {
                    trajectory: TrajectoryConfig::default(),
                    ..scenario.clone()
                },
                Some(&t),
            )?;
            merged.trajectory = overlay(&TrajectoryConfig::default(), traj.as_ref())?;
            scenario = merged;
        }
        Ok(GenerateConfig {
            dataset_id: self.dataset_id.clone().unwrap_or_else(|| base.sensor.id.clone()),
            material: overlay(&base.material, self.material.as_ref())?,
            sim: overlay(&base.sim, self.sim.as_ref())?,
            scenario,
            seed,
            sensor: base.sensor,
        })
    }

    pub fn translate(&self, seed: u64) -> Result<TranslateConfig> {
        let t = self
            .translate
            .clone()
            .ok_or_else(|| Error::invalid("config lacks a [translate] section"))?;
        let mut v = toml::Table::new();
        v.insert("dataset_id".into(), toml::Value::String(self.dataset_id.clone().unwrap_or_else(|| "translated".into())));
        v.insert("lambda".into(), toml::Value::Float(DEFAULT_LAMBDA));
        v.insert("seed".into(), toml::Value::Integer(seed as i64));
        if let Some(s) = &self.sensor {
            v.insert("target".into(), toml::Value::try_from(s).map_err(|e| Error::invalid(e.to_string()))?);
        }
        v.extend(t);
        let mut cfg: TranslateConfig = v.try_into()?;
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn train(&self, seed: u64) -> Result<TrainCmdConfig> {
        let mut t = self
            .train
            .clone()
            .ok_or_else(|| Error::invalid("config lacks a [train] section"))?;
        let datasets: Vec<PathBuf> = t
            .remove("datasets")
            .ok_or_else(|| Error::invalid("[train] needs `datasets`"))?
            .try_into()?;
        let lambda = match t.remove("lambda") {
            Some(v) => v.try_into()?,
            None => DEFAULT_LAMBDA,
        };
        let mut train: TrainConfig = overlay(&TrainConfig::default(), Some(&t))?;
        train.seed = seed;
        Ok(TrainCmdConfig { datasets, lambda, train })
    }

    pub fn eval(&self) -> Result<EvalCmdConfig> {
        let mut t = self
            .eval
            .clone()
            .ok_or_else(|| Error::invalid("config lacks an [eval] section"))?;
        t.entry("lambda").or_insert(toml::Value::Float(DEFAULT_LAMBDA));
        Ok(t.try_into()?)
    }

    pub fn fit_material(&self) -> Result<FitMaterialConfig> {
        Ok(self
            .fit_material
            .clone()
            .ok_or_else(|| Error::invalid("config lacks a [fit_material] section"))?
            .try_into()?)
    }

    pub fn taxel(&self) -> Result<TaxelCmdConfig> {
        let mut t = self
            .taxel
            .clone()
            .ok_or_else(|| Error::invalid("config lacks a [taxel] section"))?;
        let input: PathBuf = t
            .remove("input")
            .ok_or_else(|| Error::invalid("[taxel] needs `input`"))?
            .try_into()?;
        let reference_row = match t.remove("reference_row") {
            Some(v) => v.try_into()?,
            None => 0,
        };
        Ok(TaxelCmdConfig {
            input,
            taxel: overlay(&TaxelConfig::default(), Some(&t))?,
            reference_row,
        })
    }
}

/// Count of sequences per indenter in a manifest.
pub fn sequences_per_indenter(m: &DatasetManifest) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &m.sequences {
        *out.entry(s.indenter.clone()).or_insert(0) += 1;
    }
    out
}
