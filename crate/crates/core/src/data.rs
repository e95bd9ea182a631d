//! Synthetic known-pose data: a fixed chiral point object under random poses,
//! rendered through a pinhole camera as Gaussian blobs.
//!
//! Every sample draws from its own ChaCha stream keyed by `(seed, id)`, so
//! parallel generation is identical to sequential generation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{compute_translation_stats, normalize_translation, PoseSE3, TranslationStats};
use crate::error::{invalid, Error, Result};
use crate::losses::rotation_angle;
use crate::model::{Example, Target};
use crate::spd::FeatureMap;

/// Rigid point model with one fixed intensity per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyObject {
    pub points: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

impl ToyObject {
    /// Twelve irregular vertices, roughly 9 cm across. Every point sits at a
    /// different distance from the centroid, so no rotation maps the set to itself.
    pub fn chiral12() -> Self {
        let raw = [
            [0.031, 0.004, -0.012],
            [-0.022, 0.027, 0.006],
            [0.008, -0.035, 0.015],
            [-0.017, -0.011, -0.029],
            [0.012, 0.021, 0.033],
            [-0.038, -0.003, 0.011],
            [0.024, -0.018, -0.026],
            [0.002, 0.041, -0.017],
            [-0.009, -0.028, 0.036],
            [0.036, 0.026, 0.009],
            [-0.028, 0.014, -0.021],
            [0.015, -0.007, 0.002],
        ];
        let mut points: Vec<Vector3<f64>> = raw.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        points.iter_mut().for_each(|p| *p -= centroid);
        let intensities = (0..points.len()).map(|i| 0.45 + 0.05 * i as f64).collect();
        Self { points, intensities }
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { focal: 80.0, cx: 15.5, cy: 15.5, width: 32, height: 32 }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("camera: invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pixel coordinates `(x, y)` of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.focal * p.x / p.z + self.cx, self.focal * p.y / p.z + self.cy))
    }
}

/// Axis-aligned translation box, metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for TranslationBox {
    fn default() -> Self {
        Self { min: [-0.02, -0.02, 0.55], max: [0.02, 0.02, 0.75] }
    }
}

impl TranslationBox {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.max[i] >= self.min[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()) {
            return Err(Error::Config(format!("translation box: invalid bounds {self:?}")));
        }
        Ok(())
    }

    /// Length of the box diagonal.
    pub fn extent(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, t: &Vector3<f64>) -> bool {
        (0..3).all(|i| t[i] >= self.min[i] && t[i] <= self.max[i])
    }
}

pub const BLOB_SIGMA: f64 = 1.2;
/// Projected points must stay this many pixels inside the frame.
pub const FRAME_MARGIN: f64 = 1.0;

/// Uniform rotation (normalized Gaussian quaternion) and uniform translation,
/// redrawn until every model point projects inside the frame.
pub fn sample_pose(
    rng: &mut ChaCha8Rng,
    bounds: &TranslationBox,
    obj: &ToyObject,
    cam: &CameraModel,
) -> Result<PoseSE3> {
    bounds.validate()?;
    for _ in 0..10_000 {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let t = Vector3::from_fn(|i, _| {
            if bounds.max[i] > bounds.min[i] {
                rng.random_range(bounds.min[i]..=bounds.max[i])
            } else {
                bounds.min[i]
            }
        });
        let pose = PoseSE3 { rotation: *rot.to_rotation_matrix().matrix(), translation: t };
        if fits_in_frame(obj, &pose, cam) {
            return Ok(pose);
        }
    }
    invalid("sample_pose: translation box never keeps the object inside the frame")
}

pub fn fits_in_frame(obj: &ToyObject, pose: &PoseSE3, cam: &CameraModel) -> bool {
    let (w, h) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    obj.points.iter().all(|p| match cam.project(&pose.transform(p)) {
        Some((x, y)) => x >= FRAME_MARGIN && x <= w - FRAME_MARGIN && y >= FRAME_MARGIN && y <= h - FRAME_MARGIN,
        None => false,
    })
}

/// Gaussian splats at the projected points, summed and clamped to `[0, 1]`.
pub fn render(obj: &ToyObject, pose: &PoseSE3, cam: &CameraModel) -> Result<FeatureMap> {
    cam.validate()?;
    let mut img = FeatureMap::zeros(1, cam.height, cam.width);
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    let reach = (4.0 * BLOB_SIGMA).ceil() as isize;
    for (p, &intensity) in obj.points.iter().zip(&obj.intensities) {
        let Some((u, v)) = cam.project(&pose.transform(p)) else {
            return invalid("render: point behind the camera");
        };
        let (cu, cv) = (u.round() as isize, v.round() as isize);
        for y in (cv - reach).max(0)..=(cv + reach).min(cam.height as isize - 1) {
            for x in (cu - reach).max(0)..=(cu + reach).min(cam.width as isize - 1) {
                let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                img.data[y as usize * cam.width + x as usize] += intensity * (-d2 * inv).exp();
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

/// `sqrt(θ² + (‖t₁ − t₂‖ / scale)²)`, `θ` the relative rotation angle.
pub fn se3_distance(a: &PoseSE3, b: &PoseSE3, scale: f64) -> f64 {
    let theta = rotation_angle(&a.rotation, &b.rotation);
    let dt = (a.translation - b.translation).norm() / scale;
    (theta * theta + dt * dt).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: FeatureMap,
    pub pose: PoseSE3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub camera: CameraModel,
    pub translation_box: TranslationBox,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            camera: CameraModel::default(),
            translation_box: TranslationBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub object: ToyObject,
    pub camera: CameraModel,
    pub translation_box: TranslationBox,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Computed from the training split only.
    pub stats: TranslationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}'"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Samples paired with normalized-translation targets.
    pub fn examples(&self, s: Split) -> Vec<Example> {
        self.split(s).iter().map(|smp| to_example(smp, &self.stats)).collect()
    }
}

pub fn to_example(s: &Sample, stats: &TranslationStats) -> Example {
    Example {
        id: s.id,
        image: s.image.clone(),
        target: Target { rotation: s.pose.rotation, t_norm: normalize_translation(&s.pose.translation, stats) },
    }
}

fn sample_stream(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

pub fn generate_sample(
    id: usize,
    seed: u64,
    obj: &ToyObject,
    cam: &CameraModel,
    bounds: &TranslationBox,
) -> Result<Sample> {
    let mut rng = sample_stream(seed, id);
    let pose = sample_pose(&mut rng, bounds, obj, cam)?;
    Ok(Sample { id, image: render(obj, &pose, cam)?, pose })
}

/// Train, validation and test splits with consecutive ids.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_train == 0 {
        return Err(Error::Config("dataset: n_train must be positive".into()));
    }
    cfg.camera.validate()?;
    cfg.translation_box.validate()?;
    let obj = ToyObject::chiral12();
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut all = (0..total)
        .into_par_iter()
        .map(|id| generate_sample(id, seed, &obj, &cfg.camera, &cfg.translation_box))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(cfg.n_train + cfg.n_val);
    let val = all.split_off(cfg.n_train);
    let train = all;
    let stats = compute_translation_stats(&train.iter().map(|s| s.pose.translation).collect::<Vec<_>>())?;
    Ok(Dataset { object: obj, camera: cfg.camera, translation_box: cfg.translation_box, train, val, test, stats })
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const STATS_FILE: &str = "stats.json";
pub const IMAGE_DIR: &str = "images";

/// `split id r00 … r22 tx ty tz`, 17 significant digits.
pub fn manifest_text(ds: &Dataset) -> String {
    let mut out = String::from("# split id r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in ds.split(split) {
            let _ = write!(out, "{} {}", split.as_str(), s.id);
            for i in 0..3 {
                for j in 0..3 {
                    let _ = write!(out, " {:.16e}", s.pose.rotation[(i, j)]);
                }
            }
            for i in 0..3 {
                let _ = write!(out, " {:.16e}", s.pose.translation[i]);
            }
            out.push('\n');
        }
    }
    out
}

/// 16-bit binary PGM.
pub fn encode_pgm(img: &FeatureMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("pgm: truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("pgm: unsupported magic '{}'", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("pgm: bad header field '{s}'")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(Error::Format(format!("pgm: expected maxval 65535, got {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 2 * w * h {
        return Err(Error::Format(format!("pgm: {} data bytes for {w}x{h}", body.len())));
    }
    let data = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0).collect();
    FeatureMap::new(1, h, w, data)
}

fn image_name(id: usize) -> String {
    format!("{id:06}.pgm")
}

/// Writes manifest, stats and one image per sample under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_text(ds))?;
    let stats = serde_json::to_string_pretty(&ds.stats).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(STATS_FILE), stats)?;
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        let mut f = fs::File::create(dir.join(IMAGE_DIR).join(image_name(s.id)))?;
        f.write_all(&encode_pgm(&s.image))?;
    }
    Ok(())
}

/// Samples read back from disk: exact poses, images quantized to 16 bits.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: TranslationStats,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let stats: TranslationStats = serde_json::from_str(&fs::read_to_string(dir.join(STATS_FILE))?)
        .map_err(|e| Error::Format(format!("stats: {e}")))?;
    let mut out = LoadedDataset { train: Vec::new(), val: Vec::new(), test: Vec::new(), stats };
    for (lineno, line) in manifest.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 14 {
            return Err(Error::Format(format!("manifest line {}: {} fields", lineno + 1, f.len())));
        }
        let split: Split = f[0].parse().map_err(|_| Error::Format(format!("manifest line {}: bad split", lineno + 1)))?;
        let id: usize = f[1].parse().map_err(|_| Error::Format(format!("manifest line {}: bad id", lineno + 1)))?;
        let nums = f[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        let rotation = Matrix3::from_row_slice(&nums[..9]);
        let pose = PoseSE3::new(rotation, Vector3::new(nums[9], nums[10], nums[11]))
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        let image = decode_pgm(&fs::read(dir.join(IMAGE_DIR).join(image_name(id)))?)?;
        let sample = Sample { id, image, pose };
        match split {
            Split::Train => out.train.push(sample),
            Split::Val => out.val.push(sample),
            Split::Test => out.test.push(sample),
        }
    }
    Ok(out)
}

/// SHA-256 over the manifest and quantized images.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(manifest_text(ds).as_bytes());
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        h.update(encode_pgm(&s.image));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
