//! Dataset ingestion, case-level splits, resizing, augmentation and the
//! synthetic nested-shape generator.
//!
//! Layout on disk: `root/<case_id>/slice_<k>_img.png` (16-bit grayscale) with
//! an optional `slice_<k>_mask.png` (8-bit, pixel value = class index).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File name of the split manifest written next to generated datasets.
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Intensities in `[0, 1]`, indexed `[row, column]`.
    pub image: Array2<f32>,
    pub mask: Option<Array2<u8>>,
    pub case_id: String,
    pub slice_index: usize,
}

impl Sample {
    pub fn without_mask(&self) -> Sample {
        Sample {
            mask: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub labelled_cases: Vec<String>,
    pub unlabelled_cases: Vec<String>,
    pub validation_cases: Vec<String>,
    pub test_cases: Vec<String>,
}

impl SplitManifest {
    fn lists(&self) -> [(&'static str, &Vec<String>); 4] {
        [
            ("labelled", &self.labelled_cases),
            ("unlabelled", &self.unlabelled_cases),
            ("validation", &self.validation_cases),
            ("test", &self.test_cases),
        ]
    }

    /// Rejects a case listed twice, in one subset or across subsets.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (subset, cases) in self.lists() {
            for c in cases {
                if let Some(prev) = seen.insert(c, subset) {
                    return Err(Error::Validation(format!(
                        "case `{c}` appears in both {prev} and {subset} subsets"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn parse_err(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Per-slice min-max normalization to `[0, 1]`; constant images map to 0.
pub fn normalize_min_max(raw: &Array2<f32>) -> Array2<f32> {
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Array2::zeros(raw.dim());
    }
    raw.mapv(|v| (v - lo) / (hi - lo))
}

fn read_image(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| parse_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        image::DynamicImage::ImageLuma8(b) => image::DynamicImage::ImageLuma8(b).to_luma16(),
        other => return Err(parse_err(path, format!("expected grayscale, got {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_vec((h as usize, w as usize), img.into_raw().into_iter().map(f32::from).collect())
        .map_err(|e| parse_err(path, e))?;
    Ok(normalize_min_max(&raw))
}

fn read_mask(path: &Path, classes: usize) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| parse_err(path, e))?;
    let image::DynamicImage::ImageLuma8(img) = img else {
        return Err(parse_err(path, format!("expected 8-bit grayscale mask, got {:?}", img.color())));
    };
    let (w, h) = img.dimensions();
    let mask = Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| parse_err(path, e))?;
    if let Some(&bad) = mask.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::ClassRange {
            value: bad as u32,
            classes,
            context: path.display().to_string(),
        });
    }
    Ok(mask)
}

fn slice_index(name: &str, suffix: &str) -> Option<usize> {
    name.strip_prefix("slice_")?.strip_suffix(suffix)?.parse().ok()
}

/// Loads every `<case>/slice_<k>_img.png` under `root`, pairing masks where
/// present, ordered by `(case_id, slice_index)`.
pub fn load_dataset(root: &Path, classes: usize) -> Result<Vec<Sample>> {
    let mut cases: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cases.sort();
    let mut samples = Vec::new();
    for dir in cases {
        let case_id = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut slices: BTreeSet<usize> = BTreeSet::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some(k) = slice_index(&entry.file_name().to_string_lossy(), "_img.png") {
                slices.insert(k);
            }
        }
        for k in slices {
            let img_path = dir.join(format!("slice_{k}_img.png"));
            let mask_path = dir.join(format!("slice_{k}_mask.png"));
            let image = read_image(&img_path)?;
            let mask = if mask_path.exists() {
                let m = read_mask(&mask_path, classes)?;
                if m.dim() != image.dim() {
                    return Err(Error::Validation(format!(
                        "{}: mask is {:?} but image is {:?}",
                        mask_path.display(),
                        m.dim(),
                        image.dim()
                    )));
                }
                Some(m)
            } else {
                None
            };
            samples.push(Sample {
                image,
                mask,
                case_id: case_id.clone(),
                slice_index: k,
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub labelled: Vec<Sample>,
    /// Images only; masks are withheld.
    pub unlabelled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Partitions samples by case. Labelled, validation and test samples must
/// carry masks; cases absent from the manifest are ignored.
pub fn split(samples: &[Sample], manifest: &SplitManifest) -> Result<Splits> {
    manifest.validate()?;
    let present: BTreeSet<&str> = samples.iter().map(|s| s.case_id.as_str()).collect();
    for (subset, cases) in manifest.lists() {
        if let Some(missing) = cases.iter().find(|c| !present.contains(c.as_str())) {
            return Err(Error::Validation(format!("{subset} case `{missing}` is not in the dataset")));
        }
    }
    let pick = |cases: &[String], need_mask: bool| -> Result<Vec<Sample>> {
        let wanted: BTreeSet<&str> = cases.iter().map(String::as_str).collect();
        let out: Vec<Sample> = samples
            .iter()
            .filter(|s| wanted.contains(s.case_id.as_str()))
            .cloned()
            .collect();
        if need_mask {
            if let Some(s) = out.iter().find(|s| s.mask.is_none()) {
                return Err(Error::Validation(format!(
                    "slice {} of case `{}` has no mask",
                    s.slice_index, s.case_id
                )));
            }
        }
        Ok(out)
    };
    Ok(Splits {
        labelled: pick(&manifest.labelled_cases, true)?,
        unlabelled: pick(&manifest.unlabelled_cases, false)?
            .iter()
            .map(Sample::without_mask)
            .collect(),
        validation: pick(&manifest.validation_cases, true)?,
        test: pick(&manifest.test_cases, true)?,
    })
}

/// Nearest-neighbour resampling with pixel-centre alignment.
pub fn resize_nearest(mask: &Array2<u8>, size: usize) -> Array2<u8> {
    resize_nearest_to(mask, (size, size))
}

/// [`resize_nearest`] to an arbitrary `(rows, columns)` shape.
pub fn resize_nearest_to(mask: &Array2<u8>, dim: (usize, usize)) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == dim {
        return mask.clone();
    }
    let src = |i: usize, n: usize, m: usize| ((((i as f64) + 0.5) * n as f64 / m as f64) as usize).min(n - 1);
    Array2::from_shape_fn(dim, |(y, x)| mask[(src(y, h, dim.0), src(x, w, dim.1))])
}

/// Bilinear (triangle-filter) resampling of a `[0, 1]` image.
pub fn resize_bilinear(img: &Array2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (size, size) {
        return img.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, img.iter().copied().collect()).unwrap();
    let out = image::imageops::resize(&buf, size as u32, size as u32, image::imageops::FilterType::Triangle);
    Array2::from_shape_vec((size, size), out.into_raw()).unwrap()
}

/// Resamples an image (bilinear) and its mask (nearest) to `size × size`.
pub fn resize_pair(image: &Array2<f32>, mask: Option<&Array2<u8>>, size: usize) -> (Array2<f32>, Option<Array2<u8>>) {
    (resize_bilinear(image, size), mask.map(|m| resize_nearest(m, size)))
}

pub fn resize_sample(s: &Sample, size: usize) -> Sample {
    let (image, mask) = resize_pair(&s.image, s.mask.as_ref(), size);
    Sample {
        image,
        mask,
        case_id: s.case_id.clone(),
        slice_index: s.slice_index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Identity,
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
    ];

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    pub fn apply<T: Clone>(self, a: &Array2<T>) -> Array2<T> {
        use ndarray::Axis;
        let mut v = a.view();
        match self {
            Augmentation::Identity => {}
            Augmentation::Rot90 => {
                v.swap_axes(0, 1);
                v.invert_axis(Axis(0));
            }
            Augmentation::Rot180 => {
                v.invert_axis(Axis(0));
                v.invert_axis(Axis(1));
            }
            Augmentation::Rot270 => {
                v.swap_axes(0, 1);
                v.invert_axis(Axis(1));
            }
            Augmentation::FlipHorizontal => v.invert_axis(Axis(1)),
            Augmentation::FlipVertical => v.invert_axis(Axis(0)),
        }
        v.as_standard_layout().into_owned()
    }
}

/// Generator owned by the worker handling sample `index`; independent of
/// scheduling.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Applies one randomly drawn rotation/flip to image and mask alike.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let op = Augmentation::draw(rng);
    Sample {
        image: op.apply(&sample.image),
        mask: sample.mask.as_ref().map(|m| op.apply(m)),
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
    }
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub cases: usize,
    pub slices_per_case: usize,
    pub classes: usize,
    pub seed: u64,
    pub size: usize,
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise: f64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub labelled_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            slices_per_case: 10,
            classes: 4,
            seed: 0,
            size: 224,
            noise: 0.08,
            test_fraction: 0.2,
            validation_fraction: 0.1,
            labelled_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    cy: f64,
    cx: f64,
    /// outer ellipse semi-axes (fractions of the image side) and rotation
    a: f64,
    b: f64,
    theta: f64,
    /// annulus centre offset inside the ellipse and radii
    oy: f64,
    ox: f64,
    r_outer: f64,
    r_inner: f64,
}

impl Shape {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        // ellipse area π·a·b between 10% and 30% of the image
        let area = rng.random_range(0.10..0.30);
        let ratio: f64 = rng.random_range(0.6..1.0);
        let b = (area / (std::f64::consts::PI * ratio)).sqrt();
        let a = ratio * b;
        let r_outer = a * rng.random_range(0.55..0.75);
        Self {
            cy: rng.random_range(0.4..0.6),
            cx: rng.random_range(0.4..0.6),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
            oy: rng.random_range(-0.1..0.1) * a,
            ox: rng.random_range(-0.1..0.1) * a,
            r_outer,
            r_inner: r_outer * rng.random_range(0.45..0.65),
        }
    }

    /// Class at normalized position `(y, x)`, with every length scaled by `s`.
    fn class_at(&self, y: f64, x: f64, s: f64, classes: usize) -> u8 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.theta.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let in_ellipse = (u / (self.a * s)).powi(2) + (v / (self.b * s)).powi(2) <= 1.0;
        if classes == 2 {
            return in_ellipse as u8;
        }
        let r = ((dy - self.oy * s).powi(2) + (dx - self.ox * s).powi(2)).sqrt();
        if r <= self.r_inner * s {
            3
        } else if r <= self.r_outer * s {
            2
        } else if in_ellipse {
            1
        } else {
            0
        }
    }
}

/// Mean intensity per class before bias and noise.
const CLASS_INTENSITY: [f64; 4] = [0.15, 0.45, 0.75, 0.35];

fn synth_slice(cfg: &SynthConfig, shape: &Shape, scale: f64, rng: &mut ChaCha8Rng) -> (Array2<f32>, Array2<u8>) {
    let n = cfg.size;
    let mask = Array2::from_shape_fn((n, n), |(y, x)| {
        shape.class_at((y as f64 + 0.5) / n as f64, (x as f64 + 0.5) / n as f64, scale, cfg.classes)
    });
    // background distractor blob and a smooth linear bias field
    let (dy, dx) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
    let dr = rng.random_range(0.04..0.08);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
    let mut image = Array2::zeros((n, n));
    for ((y, x), v) in image.indexed_iter_mut() {
        let (py, px) = ((y as f64 + 0.5) / n as f64, (x as f64 + 0.5) / n as f64);
        let class = mask[(y, x)] as usize;
        let mut level = CLASS_INTENSITY[class.min(3)];
        if class == 0 && (py - dy).powi(2) + (px - dx).powi(2) <= dr * dr {
            level = CLASS_INTENSITY[1];
        }
        let bias = gy * (py - 0.5) + gx * (px - 0.5);
        *v = (level + bias + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    (image, mask)
}

fn write_png16(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, raw).unwrap();
    buf.save(path).map_err(|e| parse_err(path, e))
}

fn write_png8(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, mask.iter().copied().collect()).unwrap();
    buf.save(path).map_err(|e| parse_err(path, e))
}

/// Writes one image/mask slice pair in the dataset layout.
pub fn write_slice(dir: &Path, slice: usize, image: &Array2<f32>, mask: Option<&Array2<u8>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png16(&dir.join(format!("slice_{slice}_img.png")), image)?;
    if let Some(m) = mask {
        write_png8(&dir.join(format!("slice_{slice}_mask.png")), m)?;
    }
    Ok(())
}

/// Writes an 8-bit class-index PNG.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    write_png8(path, mask)
}

pub fn read_mask_png(path: &Path, classes: usize) -> Result<Array2<u8>> {
    read_mask(path, classes)
}

/// In-memory synthetic samples for every case, ordered like [`load_dataset`]
/// output, plus the case split.
pub fn synth_samples(cfg: &SynthConfig) -> Result<(Vec<Sample>, SplitManifest)> {
    if cfg.classes != 2 && cfg.classes != 4 {
        return Err(Error::Config(format!("synthetic data supports 2 or 4 classes, got {}", cfg.classes)));
    }
    if cfg.cases == 0 || cfg.slices_per_case == 0 || cfg.size < 8 {
        return Err(Error::Config("synthetic data needs cases, slices and size >= 8".into()));
    }
    let width = cfg.cases.to_string().len().max(3);
    let ids: Vec<String> = (0..cfg.cases).map(|i| format!("case_{i:0width$}")).collect();
    let mut samples = Vec::with_capacity(cfg.cases * cfg.slices_per_case);
    for (i, id) in ids.iter().enumerate() {
        let mut rng = sample_rng(cfg.seed, i as u64);
        let shape = Shape::draw(&mut rng);
        let mid = (cfg.slices_per_case as f64 - 1.0) / 2.0;
        for k in 0..cfg.slices_per_case {
            // slices shrink towards both ends of the stack
            let scale = 1.0 - 0.2 * (k as f64 - mid).abs() / mid.max(1.0);
            let (image, mask) = synth_slice(cfg, &shape, scale, &mut rng);
            samples.push(Sample {
                image,
                mask: Some(mask),
                case_id: id.clone(),
                slice_index: k,
            });
        }
    }
    let mut order = ids.clone();
    order.shuffle(&mut sample_rng(cfg.seed, u64::MAX));
    let count = |f: f64| if f > 0.0 { ((f * cfg.cases as f64).round() as usize).max(1) } else { 0 };
    let (nt, nv, nl) = (count(cfg.test_fraction), count(cfg.validation_fraction), count(cfg.labelled_fraction));
    if nt + nv + nl > cfg.cases {
        return Err(Error::Config(format!("{} cases cannot fill the requested splits", cfg.cases)));
    }
    let mut take = |n: usize| -> Vec<String> {
        let mut v: Vec<String> = order.drain(..n).collect();
        v.sort();
        v
    };
    let test_cases = take(nt);
    let validation_cases = take(nv);
    let labelled_cases = take(nl);
    let mut unlabelled_cases = std::mem::take(&mut order);
    unlabelled_cases.sort();
    Ok((
        samples,
        SplitManifest {
            labelled_cases,
            unlabelled_cases,
            validation_cases,
            test_cases,
        },
    ))
}

/// Generates the synthetic dataset under `out_dir` and writes its manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SplitManifest> {
    let (samples, manifest) = synth_samples(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for s in &samples {
        write_slice(&out_dir.join(&s.case_id), s.slice_index, &s.image, s.mask.as_ref())?;
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
