//! Deterministic stick-figure images with exact COCO-17 keypoint annotations.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt_codec::NUM_KEYPOINTS;

pub const NOSE: usize = 0;
pub const LEFT_EYE: usize = 1;
pub const RIGHT_EYE: usize = 2;
pub const LEFT_EAR: usize = 3;
pub const RIGHT_EAR: usize = 4;
pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_SHOULDER: usize = 6;
pub const LEFT_ELBOW: usize = 7;
pub const RIGHT_ELBOW: usize = 8;
pub const LEFT_WRIST: usize = 9;
pub const RIGHT_WRIST: usize = 10;
pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;
pub const LEFT_KNEE: usize = 13;
pub const RIGHT_KNEE: usize = 14;
pub const LEFT_ANKLE: usize = 15;
pub const RIGHT_ANKLE: usize = 16;

const LIMBS: [(usize, usize); 12] = [
    (LEFT_SHOULDER, RIGHT_SHOULDER),
    (LEFT_HIP, RIGHT_HIP),
    (LEFT_SHOULDER, LEFT_HIP),
    (RIGHT_SHOULDER, RIGHT_HIP),
    (LEFT_SHOULDER, LEFT_ELBOW),
    (LEFT_ELBOW, LEFT_WRIST),
    (RIGHT_SHOULDER, RIGHT_ELBOW),
    (RIGHT_ELBOW, RIGHT_WRIST),
    (LEFT_HIP, LEFT_KNEE),
    (LEFT_KNEE, LEFT_ANKLE),
    (RIGHT_HIP, RIGHT_KNEE),
    (RIGHT_KNEE, RIGHT_ANKLE),
];

pub const LIMB_LEVEL: u8 = 128;
pub const JOINT_LEVEL: u8 = 255;

/// Sampling ranges for the stick-figure generator. Lengths are in normalized
/// image units, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub torso_len: (f64, f64),
    pub shoulder_half_width: (f64, f64),
    pub hip_half_width: (f64, f64),
    pub upper_arm_len: (f64, f64),
    pub forearm_len: (f64, f64),
    pub thigh_len: (f64, f64),
    pub shin_len: (f64, f64),
    /// Neck-to-head-center distance; face offsets scale with it.
    pub head_offset: f64,
    /// Outward swing of the upper arm from straight down.
    pub arm_angle: (f64, f64),
    pub elbow_bend: (f64, f64),
    pub leg_angle: (f64, f64),
    pub knee_bend: (f64, f64),
    pub lean: f64,
    pub center: (f64, f64),
    pub center_jitter: f64,
    /// Per-keypoint probability of being hidden (marker not drawn, visibility 0).
    pub occlusion_prob: f64,
    /// Body-joint marker radius in pixels; face keypoints are single pixels.
    pub marker_radius: usize,
    /// Move joints to pixel centers before rendering.
    pub snap_to_pixels: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            torso_len: (0.18, 0.24),
            shoulder_half_width: (0.06, 0.08),
            hip_half_width: (0.04, 0.06),
            upper_arm_len: (0.10, 0.14),
            forearm_len: (0.09, 0.13),
            thigh_len: (0.12, 0.16),
            shin_len: (0.11, 0.15),
            head_offset: 0.09,
            arm_angle: (0.2, 1.4),
            elbow_bend: (-0.6, 0.6),
            leg_angle: (0.0, 0.4),
            knee_bend: (-0.4, 0.4),
            lean: 0.15,
            center: (0.5, 0.6),
            center_jitter: 0.05,
            occlusion_prob: 0.05,
            marker_radius: 1,
            snap_to_pixels: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Config("generator.image_size must be positive".into()));
        }
        let lengths = [
            ("torso_len", self.torso_len),
            ("shoulder_half_width", self.shoulder_half_width),
            ("hip_half_width", self.hip_half_width),
            ("upper_arm_len", self.upper_arm_len),
            ("forearm_len", self.forearm_len),
            ("thigh_len", self.thigh_len),
            ("shin_len", self.shin_len),
        ];
        for (name, (lo, hi)) in lengths {
            if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
                return Err(Error::Config(format!(
                    "generator.{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5"
                )));
            }
        }
        if !(self.head_offset > 0.0 && self.head_offset <= 0.5) {
            return Err(Error::Config("generator.head_offset must be in (0, 0.5]".into()));
        }
        for (name, (lo, hi)) in [
            ("arm_angle", self.arm_angle),
            ("elbow_bend", self.elbow_bend),
            ("leg_angle", self.leg_angle),
            ("knee_bend", self.knee_bend),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("generator.{name} range is invalid")));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("generator.occlusion_prob must be in [0, 1]".into()));
        }
        if !(self.lean >= 0.0 && self.center_jitter >= 0.0) {
            return Err(Error::Config("generator.lean and center_jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSample {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities; pixel value is `byte / 255`.
    pub pixels: Vec<u8>,
    /// Normalized `(x, y)` per keypoint; hidden joints keep their sampled position.
    pub keypoints: [(f64, f64); NUM_KEYPOINTS],
    pub visibility: [u8; NUM_KEYPOINTS],
    /// Bounding-box area of the visible keypoints, in squared pixels.
    pub area: f64,
    /// Normalized head size used by PCKh.
    pub head_size: f64,
}

impl SkeletonSample {
    pub fn image(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn is_visible(&self, k: usize) -> bool {
        self.visibility[k] == 1
    }
}

/// What the renderer actually drew for each joint.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderLog {
    pub joints: [(f64, f64); NUM_KEYPOINTS],
    /// `(row, col)` of the marker center, `None` if not drawn.
    pub marker_pixels: [Option<(usize, usize)>; NUM_KEYPOINTS],
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn add(a: (f64, f64), b: (f64, f64), s: f64) -> (f64, f64) {
    (a.0 + b.0 * s, a.1 + b.1 * s)
}

/// Joint positions of a sampled pose, before any visibility decisions.
fn sample_joints(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> [(f64, f64); NUM_KEYPOINTS] {
    let jitter = (-cfg.center_jitter, cfg.center_jitter);
    let hip_center = (cfg.center.0 + uniform(rng, jitter), cfg.center.1 + uniform(rng, jitter));
    let lean = uniform(rng, (-cfg.lean, cfg.lean));
    let up = (lean.sin(), -lean.cos());
    let down = (-up.0, -up.1);
    // The figure faces the viewer, so its left side is toward image right.
    let left = (lean.cos(), lean.sin());

    let neck = add(hip_center, up, uniform(rng, cfg.torso_len));
    let sw = uniform(rng, cfg.shoulder_half_width);
    let hw = uniform(rng, cfg.hip_half_width);
    let head = add(neck, up, cfg.head_offset);
    let f = cfg.head_offset;

    let mut j = [(0.0, 0.0); NUM_KEYPOINTS];
    j[NOSE] = add(head, down, 0.08 * f);
    j[LEFT_EYE] = add(add(head, up, 0.2 * f), left, 0.25 * f);
    j[RIGHT_EYE] = add(add(head, up, 0.2 * f), left, -0.25 * f);
    j[LEFT_EAR] = add(head, left, 0.5 * f);
    j[RIGHT_EAR] = add(head, left, -0.5 * f);
    j[LEFT_SHOULDER] = add(neck, left, sw);
    j[RIGHT_SHOULDER] = add(neck, left, -sw);
    j[LEFT_HIP] = add(hip_center, left, hw);
    j[RIGHT_HIP] = add(hip_center, left, -hw);

    let dir = |angle: f64, side: f64| {
        (
            down.0 * angle.cos() + left.0 * side * angle.sin(),
            down.1 * angle.cos() + left.1 * side * angle.sin(),
        )
    };
    for (side, sh, el, wr) in [
        (1.0, LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST),
        (-1.0, RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST),
    ] {
        let a = uniform(rng, cfg.arm_angle);
        let bend = uniform(rng, cfg.elbow_bend);
        j[el] = add(j[sh], dir(a, side), uniform(rng, cfg.upper_arm_len));
        j[wr] = add(j[el], dir(a + bend, side), uniform(rng, cfg.forearm_len));
    }
    for (side, hp, kn, an) in [
        (1.0, LEFT_HIP, LEFT_KNEE, LEFT_ANKLE),
        (-1.0, RIGHT_HIP, RIGHT_KNEE, RIGHT_ANKLE),
    ] {
        let a = uniform(rng, cfg.leg_angle);
        let bend = uniform(rng, cfg.knee_bend);
        j[kn] = add(j[hp], dir(a, side), uniform(rng, cfg.thigh_len));
        j[an] = add(j[kn], dir(a + bend, side), uniform(rng, cfg.shin_len));
    }
    j
}

struct Canvas {
    size: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn pixel_of(&self, p: (f64, f64)) -> Option<(usize, usize)> {
        let s = self.size as f64;
        let (cx, cy) = ((p.0 * s).floor(), (p.1 * s).floor());
        if cx >= 0.0 && cy >= 0.0 && cx < s && cy < s {
            Some((cy as usize, cx as usize))
        } else {
            None
        }
    }

    fn put(&mut self, row: isize, col: isize, level: u8) {
        if row >= 0 && col >= 0 && (row as usize) < self.size && (col as usize) < self.size {
            let px = &mut self.pixels[row as usize * self.size + col as usize];
            *px = (*px).max(level);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), level: u8) {
        let s = self.size as f64;
        let len_px = ((b.0 - a.0).hypot(b.1 - a.1) * s).ceil() as usize;
        let steps = 2 * len_px + 1;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (a.0 + (b.0 - a.0) * t) * s;
            let y = (a.1 + (b.1 - a.1) * t) * s;
            self.put(y.floor() as isize, x.floor() as isize, level);
        }
    }

    fn disc(&mut self, center: (usize, usize), radius: usize, level: u8) {
        let r = radius as isize;
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc <= r * r {
                    self.put(center.0 as isize + dr, center.1 as isize + dc, level);
                }
            }
        }
    }
}

fn render(
    joints: &[(f64, f64); NUM_KEYPOINTS],
    drawn: &[bool; NUM_KEYPOINTS],
    cfg: &GeneratorConfig,
) -> (Vec<u8>, RenderLog) {
    let mut canvas = Canvas {
        size: cfg.image_size,
        pixels: vec![0; cfg.image_size * cfg.image_size],
    };
    for (a, b) in LIMBS {
        canvas.line(joints[a], joints[b], LIMB_LEVEL);
    }
    let mid_shoulder = midpoint(joints[LEFT_SHOULDER], joints[RIGHT_SHOULDER]);
    canvas.line(mid_shoulder, joints[NOSE], LIMB_LEVEL);
    let mut marker_pixels = [None; NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        if !drawn[k] {
            continue;
        }
        if let Some(px) = canvas.pixel_of(joints[k]) {
            let radius = if k <= RIGHT_EAR { 0 } else { cfg.marker_radius };
            canvas.disc(px, radius, JOINT_LEVEL);
            marker_pixels[k] = Some(px);
        }
    }
    (
        canvas.pixels,
        RenderLog {
            joints: *joints,
            marker_pixels,
        },
    )
}

fn midpoint(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Generates the sample and returns the renderer's own joint registry alongside it.
pub fn generate_with_log(seed: u64, cfg: &GeneratorConfig) -> Result<(SkeletonSample, RenderLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut joints = sample_joints(&mut rng, cfg);
    let size = cfg.image_size as f64;
    if cfg.snap_to_pixels {
        for j in joints.iter_mut() {
            *j = (
                ((j.0 * size).floor() + 0.5) / size,
                ((j.1 * size).floor() + 0.5) / size,
            );
        }
    }
    let mut drawn = [true; NUM_KEYPOINTS];
    for d in drawn.iter_mut() {
        *d = !rng.random_bool(cfg.occlusion_prob);
    }
    let (pixels, log) = render(&joints, &drawn, cfg);
    let mut visibility = [0u8; NUM_KEYPOINTS];
    for k in 0..NUM_KEYPOINTS {
        visibility[k] = u8::from(log.marker_pixels[k].is_some());
    }

    let visible: Vec<(f64, f64)> = (0..NUM_KEYPOINTS)
        .filter(|&k| visibility[k] == 1)
        .map(|k| joints[k])
        .collect();
    let area = if visible.is_empty() {
        0.0
    } else {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &visible {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x1 - x0) * size * (y1 - y0) * size
    };
    let head_size = if visibility[LEFT_EAR] == 1 && visibility[RIGHT_EAR] == 1 {
        2.0 * dist(joints[LEFT_EAR], joints[RIGHT_EAR])
    } else {
        let mid = midpoint(joints[LEFT_SHOULDER], joints[RIGHT_SHOULDER]);
        2.0 * dist(joints[NOSE], mid)
    };

    let sample = SkeletonSample {
        seed,
        height: cfg.image_size,
        width: cfg.image_size,
        pixels,
        keypoints: joints,
        visibility,
        area,
        head_size,
    };
    Ok((sample, log))
}

pub fn generate_sample(seed: u64, cfg: &GeneratorConfig) -> Result<SkeletonSample> {
    generate_with_log(seed, cfg).map(|(s, _)| s)
}

/// On-disk form of one sample: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    seed: u64,
    image_b64: String,
    h: usize,
    w: usize,
    kps: Vec<f64>,
    vis: Vec<u8>,
    area: f64,
    head_size: f64,
}

impl From<&SkeletonSample> for SampleRecord {
    fn from(s: &SkeletonSample) -> Self {
        SampleRecord {
            seed: s.seed,
            image_b64: B64.encode(&s.pixels),
            h: s.height,
            w: s.width,
            kps: s.keypoints.iter().flat_map(|&(x, y)| [x, y]).collect(),
            vis: s.visibility.to_vec(),
            area: s.area,
            head_size: s.head_size,
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> std::result::Result<SkeletonSample, String> {
        let pixels = B64
            .decode(self.image_b64.as_bytes())
            .map_err(|e| format!("image_b64: {e}"))?;
        if pixels.len() != self.h * self.w {
            return Err(format!(
                "image has {} bytes, expected {}x{}",
                pixels.len(),
                self.h,
                self.w
            ));
        }
        if self.kps.len() != 2 * NUM_KEYPOINTS || self.vis.len() != NUM_KEYPOINTS {
            return Err(format!(
                "expected {} kps and {} vis entries",
                2 * NUM_KEYPOINTS,
                NUM_KEYPOINTS
            ));
        }
        let mut keypoints = [(0.0, 0.0); NUM_KEYPOINTS];
        let mut visibility = [0u8; NUM_KEYPOINTS];
        for k in 0..NUM_KEYPOINTS {
            keypoints[k] = (self.kps[2 * k], self.kps[2 * k + 1]);
            if self.vis[k] > 1 {
                return Err(format!("visibility flag {} is not 0/1", self.vis[k]));
            }
            visibility[k] = self.vis[k];
        }
        Ok(SkeletonSample {
            seed: self.seed,
            height: self.h,
            width: self.w,
            pixels,
            keypoints,
            visibility,
            area: self.area,
            head_size: self.head_size,
        })
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub count: usize,
    pub config_hash: String,
    /// Record files, relative to the manifest's directory.
    pub records: Vec<String>,
}

impl DatasetManifest {
    /// Checks that `cfg` regenerates data with the recorded hash.
    pub fn verify_config(&self, cfg: &GeneratorConfig) -> Result<()> {
        let hash = cfg.hash();
        if hash != self.config_hash {
            return Err(Error::Integrity(format!(
                "generator config hash {hash} does not match manifest {}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// `<dir>/<stem>.manifest.json` for records at `<dir>/<stem>.jsonl`.
pub fn manifest_path(records: &Path) -> PathBuf {
    records.with_extension("manifest.json")
}

/// Writes the records file and its manifest next to it.
pub fn write_dataset(
    samples: &[SkeletonSample],
    path: &Path,
    split: &str,
    config_hash: &str,
) -> Result<DatasetManifest> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&SampleRecord::from(s)).expect("record serializes");
        writeln!(out, "{line}").map_err(Error::io(path))?;
    }
    out.flush().map_err(Error::io(path))?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        split: split.to_string(),
        count: samples.len(),
        config_hash: config_hash.to_string(),
        records: vec![path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()],
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(Error::io(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

fn read_records(path: &Path) -> Result<Vec<SkeletonSample>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        samples.push(record.into_sample().map_err(parse_err)?);
    }
    Ok(samples)
}

/// Reads a dataset given either its manifest or its records file. When a
/// manifest is present the record count is checked against it.
pub fn read_dataset(path: &Path) -> Result<Vec<SkeletonSample>> {
    let is_manifest = path
        .file_name()
        .is_some_and(|n| n.to_string_lossy().ends_with(".manifest.json"));
    let (manifest, record_paths) = if is_manifest {
        let m = read_manifest(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let paths: Vec<PathBuf> = m.records.iter().map(|r| dir.join(r)).collect();
        (Some(m), paths)
    } else {
        let mpath = manifest_path(path);
        let m = if mpath.exists() {
            Some(read_manifest(&mpath)?)
        } else {
            None
        };
        (m, vec![path.to_path_buf()])
    };
    let mut samples = Vec::new();
    for p in &record_paths {
        samples.extend(read_records(p)?);
    }
    if let Some(m) = manifest {
        if m.count != samples.len() {
            return Err(Error::Integrity(format!(
                "manifest declares {} records, found {}",
                m.count,
                samples.len()
            )));
        }
    }
    Ok(samples)
}
