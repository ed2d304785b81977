//! The multi-label training corpus: label vocabulary, image loading and
//! validation, train/validation splits, and the flip/rotation augmentations.
//!
//! Label file format: CSV with a header row whose first column is the image
//! id and whose remaining columns are the class names, in vocabulary order.
//! Each data row carries the image id followed by 0/1 flags per class.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label file {path}: {source}")]
    LabelCsv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("label file header must contain an id column plus at least one class")]
    EmptyVocabulary,
    #[error("class name {0:?} is empty or duplicated")]
    BadClassName(String),
    #[error("row for {image_id:?} has {got} label values, expected {expected}")]
    RowLength {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("label value {value:?} for {image_id:?} is not 0 or 1")]
    BadLabelValue { image_id: String, value: String },
    #[error("duplicate image id {0:?} in label file")]
    DuplicateImage(String),
    #[error("no image file found for id {image_id:?} under {dir}")]
    MissingImage { image_id: String, dir: PathBuf },
    #[error("cannot decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Ordered set of land-cover class names; index i is the label-vector
/// position for class i.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    classes: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(classes: Vec<String>) -> Result<Self, DatasetError> {
        if classes.is_empty() {
            return Err(DatasetError::EmptyVocabulary);
        }
        let mut seen = HashSet::new();
        for class in &classes {
            if class.is_empty() || !seen.insert(class.as_str()) {
                return Err(DatasetError::BadClassName(class.clone()));
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// An image with its binary label vector (length = vocabulary size).
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub labels: Vec<u8>,
}

/// Train/validation partition of a corpus, stored as indices into the
/// corpus ordering. Identical (seed, val_fraction) always reproduce the
/// identical partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
    pub val_fraction: f64,
}

/// A single flip/rotation applied to a square image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    pub fn tag(self) -> &'static str {
        match self {
            Transform::Identity => "id",
            Transform::FlipHorizontal => "hflip",
            Transform::FlipVertical => "vflip",
            Transform::Rotate90 => "rot90",
            Transform::Rotate180 => "rot180",
            Transform::Rotate270 => "rot270",
        }
    }
}

/// Which flips and rotations the training loop may sample. The identity is
/// always part of the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Quarter-turn rotations to include, as degrees from {90, 180, 270}.
    pub rotations: Vec<u16>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            rotations: vec![90, 180, 270],
        }
    }
}

impl AugmentationConfig {
    /// No augmentation at all: the pool is just the identity.
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotations: Vec::new(),
        }
    }

    /// The transform pool, identity first.
    pub fn transforms(&self) -> Result<Vec<Transform>, DatasetError> {
        let mut pool = vec![Transform::Identity];
        if self.horizontal_flip {
            pool.push(Transform::FlipHorizontal);
        }
        if self.vertical_flip {
            pool.push(Transform::FlipVertical);
        }
        for &deg in &self.rotations {
            let t = match deg {
                0 => continue,
                90 => Transform::Rotate90,
                180 => Transform::Rotate180,
                270 => Transform::Rotate270,
                other => {
                    return Err(DatasetError::InvalidArgument(format!(
                        "rotation {other}° is not a quarter turn"
                    )))
                }
            };
            if !pool.contains(&t) {
                pool.push(t);
            }
        }
        Ok(pool)
    }
}

/// Loads the corpus: vocabulary from the label-file header, then every
/// referenced image with its label vector attached, ordered by image id.
///
/// Image files are looked up as `<image_dir>/<image_id>` and, failing that,
/// `<image_dir>/<image_id>.<ext>` for the common raster extensions.
pub fn load_corpus(
    image_dir: &Path,
    label_file: &Path,
) -> Result<(LabelVocabulary, Vec<LabeledImage>), DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(label_file)
        .map_err(|source| DatasetError::LabelCsv {
            path: label_file.to_path_buf(),
            source,
        })?;

    let headers = reader
        .headers()
        .map_err(|source| DatasetError::LabelCsv {
            path: label_file.to_path_buf(),
            source,
        })?
        .clone();
    if headers.len() < 2 {
        return Err(DatasetError::EmptyVocabulary);
    }
    let vocab = LabelVocabulary::new(headers.iter().skip(1).map(str::to_owned).collect())?;
    let expected = vocab.len();

    let mut rows: Vec<(String, Vec<u8>)> = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|source| DatasetError::LabelCsv {
            path: label_file.to_path_buf(),
            source,
        })?;
        let image_id = record
            .get(0)
            .unwrap_or_default()
            .trim()
            .to_owned();
        let got = record.len().saturating_sub(1);
        if got != expected {
            return Err(DatasetError::RowLength {
                image_id,
                expected,
                got,
            });
        }
        if !seen.insert(image_id.clone()) {
            return Err(DatasetError::DuplicateImage(image_id));
        }
        let mut labels = Vec::with_capacity(expected);
        for value in record.iter().skip(1) {
            match value.trim() {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    return Err(DatasetError::BadLabelValue {
                        image_id,
                        value: other.to_owned(),
                    })
                }
            }
        }
        rows.push((image_id, labels));
    }

    // Deterministic corpus ordering regardless of label-file row order.
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let mut corpus: Vec<LabeledImage> = rows
        .into_par_iter()
        .map(|(image_id, labels)| {
            let path = resolve_image_path(image_dir, &image_id)?;
            let pixels = image::open(&path)
                .map_err(|source| DatasetError::ImageDecode { path, source })?
                .to_rgb8();
            Ok(LabeledImage {
                image_id,
                pixels,
                labels,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    corpus.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok((vocab, corpus))
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "tif", "bmp"];

fn resolve_image_path(image_dir: &Path, image_id: &str) -> Result<PathBuf, DatasetError> {
    let direct = image_dir.join(image_id);
    if direct.is_file() {
        return Ok(direct);
    }
    for ext in IMAGE_EXTENSIONS {
        let candidate = image_dir.join(format!("{image_id}.{ext}"));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(DatasetError::MissingImage {
        image_id: image_id.to_owned(),
        dir: image_dir.to_path_buf(),
    })
}

/// Seeded shuffle split with |val| = round(val_fraction * N).
pub fn split_corpus(
    corpus: &[LabeledImage],
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if corpus.is_empty() {
        return Err(DatasetError::InvalidArgument(
            "cannot split an empty corpus".into(),
        ));
    }
    let n = corpus.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val_count = ((val_fraction * n as f64).round() as usize).min(n);
    let (val, train) = indices.split_at(val_count);
    Ok(DatasetSplit {
        train: train.to_vec(),
        val: val.to_vec(),
        seed,
        val_fraction,
    })
}

/// Applies one flip/rotation. Labels pass through unchanged; the image id
/// gains a transform tag so augmented samples stay distinguishable.
pub fn augment(img: &LabeledImage, transform: Transform) -> Result<LabeledImage, DatasetError> {
    let (w, h) = img.pixels.dimensions();
    if w != h && matches!(transform, Transform::Rotate90 | Transform::Rotate270) {
        return Err(DatasetError::InvalidArgument(format!(
            "quarter-turn rotation needs a square image, got {w}x{h}"
        )));
    }
    let pixels = match transform {
        Transform::Identity => img.pixels.clone(),
        Transform::FlipHorizontal => image::imageops::flip_horizontal(&img.pixels),
        Transform::FlipVertical => image::imageops::flip_vertical(&img.pixels),
        Transform::Rotate90 => image::imageops::rotate90(&img.pixels),
        Transform::Rotate180 => image::imageops::rotate180(&img.pixels),
        Transform::Rotate270 => image::imageops::rotate270(&img.pixels),
    };
    Ok(LabeledImage {
        image_id: format!("{}__{}", img.image_id, transform.tag()),
        pixels,
        labels: img.labels.clone(),
    })
}

/// Bilinear square resize. A target equal to the input size returns the
/// pixels untouched, which also makes the resize idempotent at the target.
pub fn resize_image(pixels: &RgbImage, target: u32) -> Result<RgbImage, DatasetError> {
    if target == 0 {
        return Err(DatasetError::InvalidArgument(
            "resize target must be positive".into(),
        ));
    }
    let (w, h) = pixels.dimensions();
    if w == target && h == target {
        return Ok(pixels.clone());
    }
    Ok(image::imageops::resize(
        pixels,
        target,
        target,
        image::imageops::FilterType::Triangle,
    ))
}

/// Per-class positive counts over the corpus, in vocabulary order.
pub fn class_distribution(corpus: &[LabeledImage], vocab: &LabelVocabulary) -> Vec<u64> {
    let mut counts = vec![0u64; vocab.len()];
    for img in corpus {
        for (count, &flag) in counts.iter_mut().zip(img.labels.iter()) {
            *count += u64::from(flag);
        }
    }
    counts
}
