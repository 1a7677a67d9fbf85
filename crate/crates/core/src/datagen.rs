//! Paired data: LOL-style directory scanning, synthetic low-light pairs and
//! training patch extraction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, GradientMap, Image};
use crate::log_ops::extract_gradient;

/// Range of the synthetic darkening coefficient.
pub const SYNTH_COEFF_RANGE: (f32, f32) = (0.1, 0.9);

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One training unit: a low/normal pair with their LoG gradient maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub low: Image,
    pub normal: Image,
    pub grad_in: GradientMap,
    pub grad_gt: GradientMap,
}

impl PairedSample {
    /// Pairs two images and computes both gradient maps. Grayscale inputs
    /// are expanded to RGB.
    pub fn from_images(id: impl Into<String>, low: Image, normal: Image) -> Result<Self> {
        let id = id.into();
        if low.height() != normal.height() || low.width() != normal.width() {
            return Err(Error::Dataset(format!(
                "pair {id}: low is {}x{} but normal is {}x{}",
                low.height(),
                low.width(),
                normal.height(),
                normal.width()
            )));
        }
        let (low, normal) = (low.to_rgb(), normal.to_rgb());
        Ok(Self {
            grad_in: extract_gradient(&low),
            grad_gt: extract_gradient(&normal),
            id,
            low,
            normal,
        })
    }

    pub fn height(&self) -> usize {
        self.low.height()
    }

    pub fn width(&self) -> usize {
        self.low.width()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            low: self.low.crop(top, left, height, width)?,
            normal: self.normal.crop(top, left, height, width)?,
            grad_in: self.grad_in.crop(top, left, height, width)?,
            grad_gt: self.grad_gt.crop(top, left, height, width)?,
        })
    }

    /// Mirrors all four arrays. The LoG kernel is symmetric, so the flipped
    /// maps equal the maps of the flipped images.
    pub fn flip_horizontal(&self) -> Self {
        Self {
            id: self.id.clone(),
            low: self.low.flip_horizontal(),
            normal: self.normal.flip_horizontal(),
            grad_in: self.grad_in.flip_horizontal(),
            grad_gt: self.grad_gt.flip_horizontal(),
        }
    }
}

/// SplitMix64 finalizer over a base seed and a sequence of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Darkens an image by a single coefficient `m ~ U[0.1, 0.9]` drawn from `seed`.
pub fn synthesize_lowlight(clear: &Image, seed: u64) -> (Image, f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(SYNTH_COEFF_RANGE.0..=SYNTH_COEFF_RANGE.1);
    let data = clear.data().iter().map(|&v| v * m).collect();
    let low = Image::new(clear.height(), clear.width(), clear.channels(), data)
        .expect("scaling by m in [0.1, 0.9] stays in range");
    (low, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub low: PathBuf,
    pub normal: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
    /// Files present on only one side.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Pairs `<root>/low/<name>` with `<root>/high/<name>`. Pairs are sorted by id.
pub fn scan_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let low = list_images(&root.join("low"))?;
    let high = list_images(&root.join("high"))?;
    let mut warnings = Vec::new();
    let mut by_id = BTreeMap::new();
    for (name, low_path) in &low {
        match high.get(name) {
            Some(high_path) => {
                let id = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name).to_string();
                if by_id.contains_key(&id) {
                    warnings.push(format!("duplicate id {id} ({name}) skipped"));
                    continue;
                }
                by_id.insert(
                    id.clone(),
                    PairEntry {
                        id,
                        low: low_path.clone(),
                        normal: high_path.clone(),
                    },
                );
            }
            None => warnings.push(format!("low/{name} has no counterpart in high/")),
        }
    }
    warnings.extend(
        high.keys()
            .filter(|name| !low.contains_key(*name))
            .map(|name| format!("high/{name} has no counterpart in low/")),
    );
    if by_id.is_empty() {
        return Err(Error::Dataset(format!("no matched low/high pairs under {}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        pairs: by_id.into_values().collect(),
        warnings,
    })
}

pub fn load_pair(entry: &PairEntry) -> Result<PairedSample> {
    let low = load_image(&entry.low)?;
    let normal = load_image(&entry.normal)?;
    PairedSample::from_images(entry.id.clone(), low, normal)
}

/// Cuts the same random `patch × patch` window out of all four arrays.
/// Gradient maps are cropped, not recomputed.
pub fn sample_patch(sample: &PairedSample, patch: usize, seed: u64) -> Result<PairedSample> {
    let (h, w) = (sample.height(), sample.width());
    if patch == 0 || patch > h.min(w) {
        return Err(Error::arg(format!(
            "patch {patch} does not fit sample {} of size {h}x{w}",
            sample.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=h - patch);
    let left = rng.gen_range(0..=w - patch);
    sample.crop(top, left, patch, patch)
}

/// One row of `coefficients.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub m: f32,
}

/// Darkens every image in `clear_dir`, writing a LOL-style tree under
/// `out_root` plus `coefficients.csv`.
pub fn synthesize_dir(clear_dir: impl AsRef<Path>, out_root: impl AsRef<Path>, seed: u64) -> Result<Vec<SynthRecord>> {
    let (clear_dir, out_root) = (clear_dir.as_ref(), out_root.as_ref());
    let inputs = list_images(clear_dir)?;
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", clear_dir.display())));
    }
    let (low_dir, high_dir) = (out_root.join("low"), out_root.join("high"));
    for dir in [&low_dir, &high_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::with_capacity(inputs.len());
    for (index, path) in inputs.values().enumerate() {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let clear = load_image(path)?;
        let (low, m) = synthesize_lowlight(&clear, derive_seed(seed, &[index as u64]));
        save_image(&clear, high_dir.join(format!("{id}.png")))?;
        save_image(&low, low_dir.join(format!("{id}.png")))?;
        records.push(SynthRecord { id, m });
    }
    let csv_path = out_root.join("coefficients.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for r in &records {
        writer.serialize(r).map_err(|e| csv_error(&csv_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(records)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}
