//! Batch classification of fetched tiles with a trained checkpoint and a
//! calibrated threshold, persisting per-tile prediction records.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::binarize;
use crate::fetch::FetchLedger;
use crate::training::prepare_batch;
use crate::zoo::{load_checkpoint, CheckpointManifest};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("threshold {0} outside [0, 1]")]
    ThresholdRange(f64),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("predictions file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Zoo(#[from] crate::zoo::ZooError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

/// One classified tile: per-class probabilities plus the thresholded
/// decisions, tagged with the threshold and model that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub record_id: String,
    pub probabilities: Vec<f64>,
    pub decisions: Vec<u8>,
    pub threshold_used: f64,
    pub model_name: String,
}

/// A tile that could not be classified, with the reason it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTile {
    pub record_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub records: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedTile>,
    pub manifest: CheckpointManifest,
    pub threshold_used: f64,
}

/// Classifies every ledger-retrieved tile with the checkpoint.
///
/// The decision threshold comes from, in order: the explicit override, the
/// checkpoint manifest (written at calibration), then 0.5. Tiles that fail
/// to open or decode are skipped and logged, never aborting the batch.
/// Records come back sorted by record id.
pub fn predict_tiles(
    checkpoint_dir: &Path,
    ledger: &FetchLedger,
    threshold_override: Option<f64>,
    batch_size: usize,
    input_size_override: Option<u32>,
) -> Result<PredictOutcome, InferenceError> {
    let (model, manifest) = load_checkpoint(checkpoint_dir)?;
    let threshold = threshold_override
        .or(manifest.threshold)
        .unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(InferenceError::ThresholdRange(threshold));
    }
    let input_size = input_size_override
        .unwrap_or_else(|| model.profile.default_input_size())
        .max(model.profile.min_input_size);

    let mut tiles: Vec<(String, RgbImage)> = Vec::new();
    let mut skipped = Vec::new();
    for result in ledger.retrieved() {
        let Some(path) = &result.tile_path else {
            skipped.push(SkippedTile {
                record_id: result.record_id.clone(),
                reason: "ledger entry has no tile path".into(),
            });
            continue;
        };
        match image::open(path) {
            Ok(img) => tiles.push((result.record_id.clone(), img.to_rgb8())),
            Err(e) => {
                eprintln!("[predict] skipping {}: {e}", result.record_id);
                skipped.push(SkippedTile {
                    record_id: result.record_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    tiles.sort_by(|a, b| a.0.cmp(&b.0));

    let model_name = model.model_name();
    let mut records = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|(_, img)| img).collect();
        let batch = prepare_batch(&images, input_size)?;
        let probs = model.predict_probabilities(&batch)?;
        let decisions = binarize(&probs, threshold)?;
        for (row, (record_id, _)) in chunk.iter().enumerate() {
            records.push(PredictionRecord {
                record_id: record_id.clone(),
                probabilities: probs.row(row).to_vec(),
                decisions: decisions.row(row).to_vec(),
                threshold_used: threshold,
                model_name: model_name.clone(),
            });
        }
    }

    Ok(PredictOutcome {
        records,
        skipped,
        manifest,
        threshold_used: threshold,
    })
}

/// Writes predictions as CSV (record_id, one probability column and one
/// decision column per class) and as a lossless JSON array. Returns the
/// (csv, json) paths.
pub fn write_predictions(
    records: &[PredictionRecord],
    classes: &[String],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), InferenceError> {
    std::fs::create_dir_all(out_dir).map_err(|source| InferenceError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let csv_path = out_dir.join("predictions.csv");
    let json_path = out_dir.join("predictions.json");

    let mut header = vec!["record_id".to_owned()];
    header.extend(classes.iter().map(|c| format!("prob_{c}")));
    header.extend(classes.iter().map(|c| format!("decision_{c}")));
    let mut text = header.join(",");
    text.push('\n');
    for record in records {
        let mut cells = vec![record.record_id.clone()];
        cells.extend(record.probabilities.iter().map(|p| p.to_string()));
        cells.extend(record.decisions.iter().map(|d| d.to_string()));
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(&csv_path, text).map_err(|source| InferenceError::Io {
        path: csv_path.clone(),
        source,
    })?;

    let json = serde_json::to_string_pretty(records).map_err(|e| InferenceError::Format {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    std::fs::write(&json_path, json).map_err(|source| InferenceError::Io {
        path: json_path.clone(),
        source,
    })?;
    Ok((csv_path, json_path))
}

pub fn read_predictions_json(path: &Path) -> Result<Vec<PredictionRecord>, InferenceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InferenceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| InferenceError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
