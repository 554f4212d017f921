//! Procedural shape worlds with controllable appearance shift.
//!
//! Every sample is a pure function of `(SceneSpec, DomainShiftSpec, index)`:
//! the scene (geometry, classes, colours) comes from one RNG stream and the
//! shift noise from another, so a source and a target dataset generated from
//! the same seed share label maps exactly and differ only in pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::labels::{LabelError, LabelMap, IGNORE};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "ccda-dataset";
const MANIFEST_VERSION: u32 = 1;
/// Separates the shift-noise stream from the scene stream of the same sample.
const SHIFT_STREAM: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {reason}")]
    Raster { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    /// Includes background, which is class 0.
    pub num_classes: usize,
    /// Shape class `c ∈ 1..C` is drawn with probability `∝ c^(-skew)`.
    pub class_frequency_skew: f64,
    /// Inclusive `[min, max]` number of shapes per image.
    pub shapes_per_image: (usize, usize),
    pub seed: u64,
    /// Image sides must be multiples of this (the model's input multiple).
    pub stride: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            num_classes: 5,
            class_frequency_skew: 1.5,
            shapes_per_image: (2, 5),
            seed: 0,
            stride: 8,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.num_classes < 2 || self.num_classes > IGNORE as usize {
            return bad(format!("num_classes {} must be in 2..={}", self.num_classes, IGNORE));
        }
        if self.image_height < 32 || self.image_width < 32 {
            return bad(format!("image {}x{} is smaller than 32x32", self.image_height, self.image_width));
        }
        if self.stride == 0 || self.image_height % self.stride != 0 || self.image_width % self.stride != 0 {
            return bad(format!(
                "image {}x{} is not divisible by stride {}",
                self.image_height, self.image_width, self.stride
            ));
        }
        if !(self.class_frequency_skew >= 0.0 && self.class_frequency_skew.is_finite()) {
            return bad(format!("skew {} must be a finite value ≥ 0", self.class_frequency_skew));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return bad(format!("shape range {:?} is empty", self.shapes_per_image));
        }
        Ok(())
    }

    /// Sampling probability of each shape class `1..C` (index 0 is class 1).
    pub fn class_probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..self.num_classes)
            .map(|c| (c as f64).powf(-self.class_frequency_skew))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftSpec {
    pub brightness_offset: f64,
    pub contrast_scale: f64,
    /// Rotation of every pixel's colour about the grey axis.
    pub hue_rotation: f64,
    pub noise_stddev: f64,
    /// Cycles per image of an additive sinusoidal overlay; 0 disables it.
    pub texture_frequency: f64,
}

/// Amplitude of the shift's texture overlay.
const OVERLAY_AMPLITUDE: f64 = 0.08;

impl DomainShiftSpec {
    pub const IDENTITY: Self = Self {
        brightness_offset: 0.0,
        contrast_scale: 1.0,
        hue_rotation: 0.0,
        noise_stddev: 0.0,
        texture_frequency: 0.0,
    };

    /// The appearance shift of the desk benchmark's target domain.
    pub fn desk_target() -> Self {
        Self {
            brightness_offset: -0.08,
            contrast_scale: 0.7,
            hue_rotation: 30.0,
            noise_stddev: 0.05,
            texture_frequency: 6.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let finite = [
            self.brightness_offset,
            self.contrast_scale,
            self.hue_rotation,
            self.noise_stddev,
            self.texture_frequency,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.contrast_scale < 0.0 || !(0.0..=1.0).contains(&self.noise_stddev) || self.texture_frequency < 0.0 {
            return Err(DatagenError::InvalidSpec(format!("invalid shift {self:?}")));
        }
        Ok(())
    }
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3 × H × W`, values are multiples of 1/255 in `[0,1]`.
    pub image: Array3<f64>,
    pub labels: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub scene: SceneSpec,
    pub shift: DomainShiftSpec,
    pub splits: BTreeMap<String, Vec<Sample>>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.scene.num_classes
    }

    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        self.splits.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class labelled pixel counts over one split.
    pub fn class_pixel_counts(&self, split: &str) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes()];
        for s in self.split(split).unwrap_or(&[]) {
            if let Some(l) = &s.labels {
                for (c, n) in l.class_counts().into_iter().enumerate() {
                    counts[c] += n;
                }
            }
        }
        counts
    }
}

/// Generates one split of `n` samples named `train`.
pub fn generate_domain(spec: &SceneSpec, shift: &DomainShiftSpec, n: usize) -> Result<Dataset, DatagenError> {
    generate_splits(spec, shift, Domain::Source, &[("train", n)])
}

/// Generates named splits; split `j` continues the sample index where split `j-1` ended.
pub fn generate_splits(
    spec: &SceneSpec,
    shift: &DomainShiftSpec,
    domain: Domain,
    sizes: &[(&str, usize)],
) -> Result<Dataset, DatagenError> {
    spec.validate()?;
    shift.validate()?;
    if sizes.iter().all(|&(_, n)| n == 0) {
        return Err(DatagenError::InvalidSpec("at least one sample is required".into()));
    }
    let mut splits = BTreeMap::new();
    let mut offset = 0u64;
    for &(name, n) in sizes {
        let samples = (0..n as u64)
            .into_par_iter()
            .map(|i| render_sample(spec, shift, offset + i))
            .collect();
        splits.insert(name.to_string(), samples);
        offset += n as u64;
    }
    Ok(Dataset {
        domain,
        scene: spec.clone(),
        shift: *shift,
        splits,
    })
}

/// Mixed into the scene seed for the target domain so the two domains never share layouts.
pub const TARGET_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Source and target datasets with the same splits; the target renders with
/// a salted seed and `shift` applied.
pub fn generate_pair(
    spec: &SceneSpec,
    shift: &DomainShiftSpec,
    sizes: &[(&str, usize)],
) -> Result<(Dataset, Dataset), DatagenError> {
    let source = generate_splits(spec, &DomainShiftSpec::IDENTITY, Domain::Source, sizes)?;
    let target_spec = SceneSpec {
        seed: spec.seed ^ TARGET_SEED_SALT,
        ..spec.clone()
    };
    let target = generate_splits(&target_spec, shift, Domain::Target, sizes)?;
    Ok((source, target))
}

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Disc,
    Rect,
    Triangle,
    Ring,
}

/// Renders sample `index`; uses `seed ⊕ index` so samples are order-independent.
pub fn render_sample(spec: &SceneSpec, shift: &DomainShiftSpec, index: u64) -> Sample {
    let (h, w) = (spec.image_height, spec.image_width);
    let sample_seed = spec.seed ^ index;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);

    let mut image = Array3::<f64>::zeros((3, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));

    let bg = class_palette(0, spec.num_classes);
    let bg_jitter = rng.gen_range(-0.06..0.06);
    let bg_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let bg_angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (bg_angle.cos(), bg_angle.sin());
    for y in 0..h {
        for x in 0..w {
            let t = (x as f64 * ca + y as f64 * sa) / w as f64;
            let tex = 0.05 * (std::f64::consts::TAU * 3.0 * t + bg_phase).sin();
            for ch in 0..3 {
                image[[ch, y, x]] = bg[ch] + bg_jitter + tex;
            }
        }
    }

    let count = rng.gen_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let probs = spec.class_probabilities();
    let chooser = WeightedIndex::new(&probs).expect("positive weights");
    let side = h.min(w) as f64;
    for _ in 0..count {
        let class = chooser.sample(&mut rng) + 1;
        let geometry = match rng.gen_range(0..4) {
            0 => Geometry::Disc,
            1 => Geometry::Rect,
            2 => Geometry::Triangle,
            _ => Geometry::Ring,
        };
        let radius = rng.gen_range(0.10..0.22) * side;
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let aspect = rng.gen_range(0.7..1.4);
        let rot = rng.gen_range(0.0..std::f64::consts::PI);
        let jitter = rng.gen_range(-0.05..0.05);
        let base = class_palette(class, spec.num_classes);
        let stripe = class_stripe_frequency(class);
        let (cr, sr) = (rot.cos(), rot.sin());
        let y0 = (cy - 1.5 * radius).floor().max(0.0) as usize;
        let y1 = ((cy + 1.5 * radius).ceil() as usize).min(h);
        let x0 = (cx - 1.5 * radius).floor().max(0.0) as usize;
        let x1 = ((cx + 1.5 * radius).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * cr + dy * sr) / (radius * aspect);
                let v = (-dx * sr + dy * cr) / radius;
                let inside = match geometry {
                    Geometry::Disc => u * u + v * v <= 1.0,
                    Geometry::Rect => u.abs() <= 0.85 && v.abs() <= 0.85,
                    Geometry::Triangle => v <= 0.7 && v >= 2.0 * u.abs() - 1.0,
                    Geometry::Ring => {
                        let r2 = u * u + v * v;
                        (0.3..=1.0).contains(&r2)
                    }
                };
                if !inside {
                    continue;
                }
                labels[[y, x]] = class as u8;
                let tex = 0.07 * (stripe * (u + v)).sin();
                for ch in 0..3 {
                    image[[ch, y, x]] = base[ch] + jitter + tex;
                }
            }
        }
    }

    if !shift.is_identity() {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(sample_seed);
        noise_rng.set_stream(SHIFT_STREAM);
        apply_shift(&mut image, shift, &mut noise_rng);
    }
    image.mapv_inplace(quantize);
    let labels = LabelMap::new(labels, spec.num_classes).expect("rendered labels are in range");
    Sample {
        id: format!("{index:06}"),
        image,
        labels: Some(labels),
    }
}

/// Clamps to `[0,1]` and rounds to the nearest 8-bit level.
fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Distinct, evenly spaced hues for shape classes; desaturated grey-green for background.
fn class_palette(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.42, 0.45, 0.40];
    }
    let hue = 360.0 * (class - 1) as f64 / (num_classes - 1) as f64;
    hsv_to_rgb(hue, 0.75, 0.8)
}

fn class_stripe_frequency(class: usize) -> f64 {
    2.0 + 1.5 * class as f64
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = hue.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rodrigues rotation about the normalized `(1,1,1)` axis.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let t = degrees.to_radians();
    let (c, s) = (t.cos(), t.sin());
    let k = 1.0 / 3.0;
    let q = 3f64.sqrt().recip() * s;
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - q;
    let d = (1.0 - c) * k + q;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn apply_shift(image: &mut Array3<f64>, shift: &DomainShiftSpec, rng: &mut ChaCha8Rng) {
    let (_, h, w) = image.dim();
    if shift.hue_rotation != 0.0 {
        let m = hue_matrix(shift.hue_rotation);
        for y in 0..h {
            for x in 0..w {
                let p = [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]];
                for (ch, row) in m.iter().enumerate() {
                    image[[ch, y, x]] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                }
            }
        }
    }
    if shift.contrast_scale != 1.0 {
        image.mapv_inplace(|v| (v - 0.5) * shift.contrast_scale + 0.5);
    }
    if shift.brightness_offset != 0.0 {
        image.mapv_inplace(|v| v + shift.brightness_offset);
    }
    if shift.texture_frequency > 0.0 {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 + y as f64) / (h + w) as f64;
                let o = OVERLAY_AMPLITUDE * (std::f64::consts::TAU * shift.texture_frequency * t + phase).sin();
                for ch in 0..3 {
                    image[[ch, y, x]] += o;
                }
            }
        }
    }
    if shift.noise_stddev > 0.0 {
        let normal = Normal::new(0.0, shift.noise_stddev).expect("finite std");
        image.mapv_inplace(|v| v + normal.sample(rng));
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    domain: Domain,
    num_classes: usize,
    image_height: usize,
    image_width: usize,
    scene: SceneSpec,
    shift: DomainShiftSpec,
    splits: BTreeMap<String, Vec<String>>,
}

fn image_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join("images").join(split).join(format!("{id}.png"))
}

fn label_path(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join("labels").join(split).join(format!("{id}.png"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes PNG rasters plus `manifest.json` under `root`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<PathBuf, DatagenError> {
    let (h, w) = (dataset.scene.image_height, dataset.scene.image_width);
    for (split, samples) in &dataset.splits {
        for dir in [root.join("images").join(split), root.join("labels").join(split)] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        samples.par_iter().try_for_each(|s| {
            let mut rgb = Vec::with_capacity(3 * h * w);
            for y in 0..h {
                for x in 0..w {
                    rgb.extend((0..3).map(|c| to_u8(s.image[[c, y, x]])));
                }
            }
            let path = image_path(root, split, &s.id);
            image::RgbImage::from_raw(w as u32, h as u32, rgb)
                .expect("buffer matches size")
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| DatagenError::Image { path: path.clone(), source })?;
            if let Some(l) = &s.labels {
                let path = label_path(root, split, &s.id);
                let raw = l.data().iter().copied().collect();
                image::GrayImage::from_raw(w as u32, h as u32, raw)
                    .expect("buffer matches size")
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|source| DatagenError::Image { path: path.clone(), source })?;
            }
            Ok(())
        })?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        domain: dataset.domain,
        num_classes: dataset.num_classes(),
        image_height: h,
        image_width: w,
        scene: dataset.scene.clone(),
        shift: dataset.shift,
        splits: dataset
            .splits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|s| s.id.clone()).collect()))
            .collect(),
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a dataset written by [`write_dataset`]; labels are validated against `C`.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset, DatagenError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let bad_manifest = |reason: String| DatagenError::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad_manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(bad_manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.num_classes != manifest.scene.num_classes
        || manifest.image_height != manifest.scene.image_height
        || manifest.image_width != manifest.scene.image_width
    {
        return Err(bad_manifest("header disagrees with scene spec".into()));
    }
    manifest.scene.validate().map_err(|e| bad_manifest(e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let (h, w, c) = (manifest.image_height, manifest.image_width, manifest.num_classes);

    let mut splits = BTreeMap::new();
    for (split, ids) in &manifest.splits {
        let samples = ids
            .par_iter()
            .map(|id| read_sample(root, split, id, h, w, c))
            .collect::<Result<Vec<_>, _>>()?;
        splits.insert(split.clone(), samples);
    }
    Ok(Dataset {
        domain: manifest.domain,
        scene: manifest.scene,
        shift: manifest.shift,
        splits,
    })
}

fn read_sample(root: &Path, split: &str, id: &str, h: usize, w: usize, c: usize) -> Result<Sample, DatagenError> {
    let raster = |path: &Path, reason: String| DatagenError::Raster {
        path: path.to_path_buf(),
        reason,
    };
    let decode = |path: &Path| -> Result<image::DynamicImage, DatagenError> {
        if !path.is_file() {
            return Err(raster(path, "missing raster".into()));
        }
        image::open(path).map_err(|source| DatagenError::Image {
            path: path.to_path_buf(),
            source,
        })
    };

    let ipath = image_path(root, split, id);
    let rgb = match decode(&ipath)? {
        image::DynamicImage::ImageRgb8(img) => img,
        other => return Err(raster(&ipath, format!("expected 8-bit RGB, got {:?}", other.color()))),
    };
    if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
        return Err(raster(&ipath, format!("size {}x{}, expected {h}x{w}", rgb.height(), rgb.width())));
    }
    let mut image = Array3::<f64>::zeros((3, h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            image[[ch, y as usize, x as usize]] = p.0[ch] as f64 / 255.0;
        }
    }

    let lpath = label_path(root, split, id);
    let labels = if lpath.exists() {
        let gray = match decode(&lpath)? {
            image::DynamicImage::ImageLuma8(img) => img,
            other => return Err(raster(&lpath, format!("expected 8-bit grey, got {:?}", other.color()))),
        };
        if (gray.height() as usize, gray.width() as usize) != (h, w) {
            return Err(raster(&lpath, format!("size {}x{}, expected {h}x{w}", gray.height(), gray.width())));
        }
        let data = Array2::from_shape_vec((h, w), gray.into_raw()).expect("size checked");
        let map = LabelMap::new(data, c).map_err(|e| match e {
            LabelError::InvalidLabel { .. } => raster(&lpath, e.to_string()),
            other => raster(&lpath, other.to_string()),
        })?;
        Some(map)
    } else {
        None
    };
    Ok(Sample {
        id: id.to_string(),
        image,
        labels,
    })
}
