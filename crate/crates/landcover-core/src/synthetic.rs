//! Deterministic fixture generators: a small multi-label corpus of colored
//! geometric composites for toy training runs, and synthetic "satellite"
//! tiles for the stub map service. Everything derives from explicit seeds
//! so fixtures are reproducible byte for byte.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetError, LabelVocabulary, LabeledImage};

/// The four fixture classes; each corresponds to one blob color.
pub const SYNTHETIC_CLASSES: [&str; 4] = ["red_patch", "green_patch", "blue_patch", "yellow_patch"];

const CLASS_COLORS: [[u8; 3]; 4] = [
    [205, 45, 40],
    [55, 185, 65],
    [45, 85, 205],
    [220, 205, 45],
];

pub fn synthetic_vocab() -> LabelVocabulary {
    LabelVocabulary::new(SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect())
        .expect("static class names are valid")
}

fn draw_blob(img: &mut RgbImage, rng: &mut ChaCha8Rng, color: [u8; 3]) {
    let size = img.width();
    let blob = rng.random_range(size / 6..size / 3).max(2);
    let x0 = rng.random_range(0..size - blob);
    let y0 = rng.random_range(0..size - blob);
    let circle = rng.random_bool(0.5);
    let r = blob as i32 / 2;
    let (cx, cy) = (x0 as i32 + r, y0 as i32 + r);
    for y in y0..y0 + blob {
        for x in x0..x0 + blob {
            if circle {
                let dx = x as i32 - cx;
                let dy = y as i32 - cy;
                if dx * dx + dy * dy > r * r {
                    continue;
                }
            }
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// One composite: dark textured background plus, per present label, one or
/// two blobs of that class color.
pub fn generate_labeled_image(
    image_id: &str,
    size: u32,
    present: [bool; 4],
    seed: u64,
) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = RgbImage::from_fn(size, size, |_, _| {
        let v = rng.random_range(15..70u8);
        Rgb([v, v, v])
    });
    for (class, &is_present) in present.iter().enumerate() {
        if is_present {
            for _ in 0..rng.random_range(1..=2) {
                draw_blob(&mut pixels, &mut rng, CLASS_COLORS[class]);
            }
        }
    }
    LabeledImage {
        image_id: image_id.to_owned(),
        pixels,
        labels: present.iter().map(|&p| u8::from(p)).collect(),
    }
}

/// A corpus of `n` composites with independent fifty-fifty labels.
pub fn generate_corpus(n: usize, size: u32, seed: u64) -> (LabelVocabulary, Vec<LabeledImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = (0..n)
        .map(|i| {
            let present = [
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
            ];
            let image_seed = rng.random();
            generate_labeled_image(&format!("syn{i:04}"), size, present, image_seed)
        })
        .collect();
    (synthetic_vocab(), corpus)
}

/// Writes a corpus fixture to disk in the pipeline's corpus layout: one PNG
/// per image plus `labels.csv`. Returns the label-file path.
pub fn write_corpus_fixture(
    dir: &std::path::Path,
    n: usize,
    size: u32,
    seed: u64,
) -> Result<std::path::PathBuf, DatasetError> {
    let io_err = |path: std::path::PathBuf, source| DatasetError::Io { path, source };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir.to_path_buf(), e))?;
    let (vocab, corpus) = generate_corpus(n, size, seed);
    let mut csv_text = format!("image_id,{}\n", vocab.classes().join(","));
    for img in &corpus {
        let path = dir.join(format!("{}.png", img.image_id));
        img.pixels
            .save(&path)
            .map_err(|e| DatasetError::InvalidArgument(format!("cannot save {path:?}: {e}")))?;
        let flags: Vec<String> = img.labels.iter().map(|v| v.to_string()).collect();
        csv_text.push_str(&format!("{},{}\n", img.image_id, flags.join(",")));
    }
    let labels_path = dir.join("labels.csv");
    std::fs::write(&labels_path, csv_text).map_err(|e| io_err(labels_path.clone(), e))?;
    Ok(labels_path)
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Synthetic tile for the stub map service, deterministic in the record id.
/// Tiles reuse the corpus blob vocabulary so toy checkpoints produce
/// meaningful detections on them.
pub fn generate_tile(record_id: &str, size: u32) -> RgbImage {
    let seed = fnv1a(record_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_fn(size, size, |_, _| {
        let v = rng.random_range(15..70u8);
        Rgb([v, v, v])
    });
    for color in CLASS_COLORS {
        if rng.random_bool(0.5) {
            draw_blob(&mut img, &mut rng, color);
        }
    }
    img
}
