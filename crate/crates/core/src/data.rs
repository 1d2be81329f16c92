//! Samples, datasets, video-grouped folds, on-disk loading and the synthetic
//! ultrasound-like generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Covid,
    Pneumonia,
    Regular,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Covid, Label::Pneumonia, Label::Regular];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::Pneumonia => "pneumonia",
            Label::Regular => "regular",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Array2<f64>,
    pub label: Label,
    pub video_id: String,
    pub frame_index: usize,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("{}/{}", self.video_id, self.frame_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Disk,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub source: Source,
    pub generator_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    /// Builds a dataset, checking pixel range and the one-label-per-video rule.
    pub fn new(samples: Vec<Sample>, metadata: DatasetMetadata) -> Result<Self> {
        let mut labels: HashMap<&str, Label> = HashMap::new();
        for s in &samples {
            if let Some(&prev) = labels.get(s.video_id.as_str()) {
                if prev != s.label {
                    return Err(Error::Input(format!(
                        "video {} appears under both {} and {}",
                        s.video_id, prev, s.label
                    )));
                }
            } else {
                labels.insert(&s.video_id, s.label);
            }
            if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input(format!(
                    "sample {} has pixels outside [0, 1]",
                    s.id()
                )));
            }
        }
        Ok(Self { samples, metadata })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct video ids with their labels, in first-appearance order.
    pub fn videos(&self) -> Vec<(String, Label)> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if seen.insert(s.video_id.clone(), ()).is_none() {
                out.push((s.video_id.clone(), s.label));
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn images(&self) -> Vec<Array2<f64>> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.index()).collect()
    }
}

/// An image as decoded from disk: `(rows, cols, channels)` with values in
/// `[0, max_value]`.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub pixels: Array3<f64>,
    pub max_value: f64,
}

impl RawImage {
    pub fn gray(pixels: Array2<f64>, max_value: f64) -> Self {
        Self {
            pixels: pixels.insert_axis(Axis(2)),
            max_value,
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let color = img.color().has_color();
        let (channels, max_value, values): (usize, f64, Vec<f64>) = match (color, sixteen) {
            (false, false) => (
                1,
                255.0,
                img.to_luma8()
                    .into_raw()
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            ),
            (false, true) => (
                1,
                65535.0,
                img.to_luma16()
                    .into_raw()
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            ),
            (true, false) => (
                3,
                255.0,
                img.to_rgb8()
                    .into_raw()
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            ),
            (true, true) => (
                3,
                65535.0,
                img.to_rgb16()
                    .into_raw()
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            ),
        };
        let pixels = Array3::from_shape_vec((h, w, channels), values).expect("decoded buffer size");
        Self { pixels, max_value }
    }
}

/// Bilinear resize with half-pixel centers. Exact 2× downscaling averages
/// 2×2 blocks; same-size resizing is the identity.
pub fn resize_bilinear(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos =
                    ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = coords(height, sh);
    let cols = coords(width, sw);
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (r0, r1, tr) = rows[r];
        let (c0, c1, tc) = cols[c];
        let top = src[[r0, c0]] * (1.0 - tc) + src[[r0, c1]] * tc;
        let bottom = src[[r1, c0]] * (1.0 - tc) + src[[r1, c1]] * tc;
        top * (1.0 - tr) + bottom * tr
    })
}

/// Averages channels to gray, rescales to `[0, 1]` and resizes.
pub fn preprocess(raw: &RawImage, height: usize, width: usize) -> Result<Array2<f64>> {
    let (h, w, c) = raw.pixels.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Input("empty image".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let gray = raw
        .pixels
        .mean_axis(Axis(2))
        .expect("non-empty channel axis");
    let scaled = gray.mapv(|v| (v / raw.max_value).clamp(0.0, 1.0));
    Ok(resize_bilinear(&scaled, height, width))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads `<root>/<label>/<video_id>/<frame>.png`.
///
/// Regular files directly under `root` (such as a manifest) are ignored.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset root is not a directory",
            ),
        ));
    }
    let mut samples = Vec::new();
    let mut owners: BTreeMap<String, Label> = BTreeMap::new();
    let mut label_dirs: Vec<(Label, PathBuf)> = Vec::new();
    for entry in sorted_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let name = file_name(&entry);
        let label = Label::parse(&name)
            .ok_or_else(|| Error::Input(format!("unknown label directory {}", entry.display())))?;
        label_dirs.push((label, entry));
    }
    label_dirs.sort();
    for (label, dir) in label_dirs {
        for video_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let video_id = file_name(&video_dir);
            if let Some(prev) = owners.insert(video_id.clone(), label) {
                return Err(Error::Input(format!(
                    "video {video_id} appears under both {prev} and {label}"
                )));
            }
            let frames = sorted_entries(&video_dir)?
                .into_iter()
                .filter(|p| p.is_file())
                .filter(|p| {
                    p.extension()
                        .map(|e| e.eq_ignore_ascii_case("png"))
                        .unwrap_or(false)
                });
            for (frame_index, path) in frames.enumerate() {
                let img = image::open(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                let image = preprocess(&RawImage::from_dynamic(&img), height, width)?;
                samples.push(Sample {
                    image,
                    label,
                    video_id: video_id.clone(),
                    frame_index,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Input(format!(
            "no frames found under {}",
            root.display()
        )));
    }
    Dataset::new(
        samples,
        DatasetMetadata {
            source: Source::Disk,
            generator_hash: None,
        },
    )
}

/// Writes a dataset in the layout read by [`load_dataset`], as 8-bit PNGs.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let dir = root.join(s.label.name()).join(&s.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("frame_{:04}.png", s.frame_index));
        to_gray8(&s.image)
            .save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn to_gray8(img: &Array2<f64>) -> GrayImage {
    let (h, w) = img.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// One side of a cross-validation split, as sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified k-fold partition over videos.
///
/// Each label's videos are shuffled and dealt round-robin, continuing the
/// deal counter across labels, so per-fold counts per label differ by at most
/// one and fold sizes differ by at most one.
pub fn group_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let videos = dataset.videos();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > videos.len() {
        return Err(Error::Config(format!(
            "{k} folds requested but only {} videos",
            videos.len()
        )));
    }
    let mut fold_of: HashMap<String, usize> = HashMap::new();
    let mut counter = 0usize;
    for label in Label::ALL {
        let mut ids: Vec<&String> = videos
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(v, _)| v)
            .collect();
        ids.shuffle(&mut derived_rng(seed, &format!("kfold/{label}")));
        for id in ids {
            fold_of.insert(id.clone(), counter % k);
            counter += 1;
        }
    }
    let mut folds = vec![
        Fold {
            train: Vec::new(),
            test: Vec::new()
        };
        k
    ];
    for (i, s) in dataset.samples.iter().enumerate() {
        let f = fold_of[&s.video_id];
        for (j, fold) in folds.iter_mut().enumerate() {
            if j == f {
                fold.test.push(i);
            } else {
                fold.train.push(i);
            }
        }
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    /// Multiplicative speckle strength.
    pub speckle_sigma: f64,
    /// Per-frame geometric jitter, in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos_per_class: 20,
            frames_per_video: 8,
            height: 32,
            width: 32,
            speckle_sigma: 0.2,
            jitter: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos_per_class == 0 || self.frames_per_video == 0 {
            return Err(Error::Config(
                "video and frame counts must be at least 1".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "synthetic images must be at least 8x8".into(),
            ));
        }
        if !(self.speckle_sigma >= 0.0 && self.speckle_sigma.is_finite()) {
            return Err(Error::Config("speckle_sigma must be non-negative".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Geometry shared by all frames of one video, in normalized coordinates.
#[derive(Debug, Clone)]
struct VideoMotif {
    label: Label,
    /// Depth of the pleural band.
    band: f64,
    /// Lateral positions of vertical streaks.
    streaks: Vec<f64>,
    /// Pocket centers (row, col) and radii.
    pockets: Vec<(f64, f64, f64)>,
    gain: f64,
}

impl VideoMotif {
    fn sample<R: Rng>(label: Label, rng: &mut R) -> Self {
        let band = rng.random_range(0.23..0.27);
        let streaks = match label {
            Label::Covid => {
                let n = rng.random_range(3..=5);
                (0..n).map(|_| rng.random_range(0.15..0.85)).collect()
            }
            _ => Vec::new(),
        };
        let pockets = match label {
            Label::Pneumonia => {
                let n = rng.random_range(2..=4);
                (0..n)
                    .map(|_| {
                        (
                            rng.random_range(band + 0.2..0.85),
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.07..0.12),
                        )
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        Self {
            label,
            band,
            streaks,
            pockets,
            gain: rng.random_range(0.9..1.1),
        }
    }

    /// Noise-free intensity at normalized `(v, u)` after shifting the geometry by `(dv, du)`.
    fn intensity(&self, v: f64, u: f64, dv: f64, du: f64) -> f64 {
        let band = self.band + dv;
        let thickness = 0.035;
        let below = smoothstep((v - band) / thickness);
        let depth_fade = 1.0 - 0.5 * v;
        let mut value = 0.12 + 0.1 * depth_fade * below;
        value += 0.7 * gauss((v - band) / thickness);
        match self.label {
            Label::Regular => {
                // periodic reverberations of the pleural line
                for (k, amp) in [(2.0, 0.35), (3.0, 0.22)] {
                    value += amp * gauss((v - k * band) / 0.05);
                }
            }
            Label::Covid => {
                for &c in &self.streaks {
                    value += 0.55 * depth_fade * below * gauss((u - c - du) / 0.06);
                }
            }
            Label::Pneumonia => {
                value += 0.35 * below * depth_fade;
                for &(pv, pu, r) in &self.pockets {
                    let d = (((v - pv - dv) / r).powi(2) + ((u - pu - du) / r).powi(2)).sqrt();
                    let inside = 1.0 - smoothstep((d - 1.0) / 0.25);
                    value *= 1.0 - 0.85 * inside;
                }
            }
        }
        (value * self.gain).clamp(0.0, 1.0)
    }
}

fn gauss(t: f64) -> f64 {
    (-t * t).exp()
}

/// Logistic ramp from 0 (t ≪ 0) to 1 (t ≫ 0).
fn smoothstep(t: f64) -> f64 {
    1.0 / (1.0 + (-4.0 * t).exp())
}

/// Renders ultrasound-like frames: a bright pleural band on a dark speckled
/// background, with class motifs below it (reverberation lines for
/// `regular`, vertical streaks for `covid`, dark pockets for `pneumonia`).
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut samples = Vec::with_capacity(3 * config.videos_per_class * config.frames_per_video);
    for label in Label::ALL {
        for vid in 0..config.videos_per_class {
            let video_id = format!("{label}_v{vid:03}");
            let mut rng = derived_rng(config.seed, &format!("video/{video_id}"));
            let motif = VideoMotif::sample(label, &mut rng);
            for frame_index in 0..config.frames_per_video {
                let mut frng = derived_rng(config.seed, &format!("frame/{video_id}/{frame_index}"));
                let (dv, du) = if config.jitter > 0.0 {
                    let n = Normal::new(0.0, config.jitter).expect("finite jitter");
                    (
                        n.sample(&mut frng) / h as f64,
                        n.sample(&mut frng) / w as f64,
                    )
                } else {
                    (0.0, 0.0)
                };
                let clean = Array2::from_shape_fn((h, w), |(r, c)| {
                    let v = (r as f64 + 0.5) / h as f64;
                    let u = (c as f64 + 0.5) / w as f64;
                    motif.intensity(v, u, dv, du)
                });
                let image = if config.speckle_sigma > 0.0 {
                    clean.mapv(|p| {
                        let n: f64 = frng.sample(StandardNormal);
                        (p * (1.0 + config.speckle_sigma * n)).clamp(0.0, 1.0)
                    })
                } else {
                    clean
                };
                samples.push(Sample {
                    image,
                    label,
                    video_id: video_id.clone(),
                    frame_index,
                });
            }
        }
    }
    Dataset::new(
        samples,
        DatasetMetadata {
            source: Source::Synthetic,
            generator_hash: Some(config.hash()),
        },
    )
}
