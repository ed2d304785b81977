//! Checkpoint directories: a binary weights file plus a JSON manifest
//! carrying the profile, vocabulary, seeds, and (once calibrated) the
//! decision threshold.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::LabelVocabulary;
use crate::nn::{load_weights, save_weights};

use super::{build_model_with_seed, BackboneProfile, ModelHandle, ProfileName, ZooError};

pub const WEIGHTS_FILE: &str = "weights.lcw";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub profile: ProfileName,
    pub num_labels: usize,
    pub classes: Vec<String>,
    /// Calibrated decision threshold; absent until calibration writes it.
    pub threshold: Option<f64>,
    pub init_seed: u64,
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> ZooError {
    ZooError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `weights.lcw` and `manifest.json` into `dir` (created if needed).
pub fn save_checkpoint(
    model: &ModelHandle,
    vocab: &LabelVocabulary,
    threshold: Option<f64>,
    dir: &Path,
) -> Result<PathBuf, ZooError> {
    if vocab.len() != model.num_labels {
        return Err(checkpoint_err(
            dir,
            format!(
                "vocabulary has {} classes, model head is {} wide",
                vocab.len(),
                model.num_labels
            ),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| checkpoint_err(dir, e.to_string()))?;
    save_weights(model.graph(), &dir.join(WEIGHTS_FILE))?;
    let manifest = CheckpointManifest {
        format_version: 1,
        profile: model.profile.name,
        num_labels: model.num_labels,
        classes: vocab.classes().to_vec(),
        threshold,
        init_seed: model.init_seed,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| checkpoint_err(dir, e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)
        .map_err(|e| checkpoint_err(dir, e.to_string()))?;
    Ok(dir.to_path_buf())
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest, ZooError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| checkpoint_err(&path, format!("missing manifest: {e}")))?;
    serde_json::from_str(&text).map_err(|e| checkpoint_err(&path, e.to_string()))
}

/// Rebuilds the architecture named in the manifest and fills it from the
/// weights file.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelHandle, CheckpointManifest), ZooError> {
    let manifest = load_manifest(dir)?;
    let mut model = build_model_with_seed(
        BackboneProfile::of(manifest.profile),
        manifest.num_labels,
        false,
        manifest.init_seed,
    )?;
    load_weights(model.graph_mut(), &dir.join(WEIGHTS_FILE))?;
    Ok((model, manifest))
}

/// Rewrites the manifest with a calibrated threshold, leaving weights alone.
pub fn set_manifest_threshold(dir: &Path, threshold: f64) -> Result<(), ZooError> {
    let mut manifest = load_manifest(dir)?;
    manifest.threshold = Some(threshold);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| checkpoint_err(dir, e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)
        .map_err(|e| checkpoint_err(dir, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::build_model;
    use ndarray::Array4;

    fn vocab3() -> LabelVocabulary {
        LabelVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 3, false).unwrap();
        let batch = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, i, j)| {
            ((n * 3 + c + i * j) % 13) as f32 / 13.0
        });
        let before = model.predict_probabilities(&batch).unwrap();
        save_checkpoint(&model, &vocab3(), Some(0.4), dir.path()).unwrap();

        let (restored, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.threshold, Some(0.4));
        assert_eq!(manifest.classes, vec!["a", "b", "c"]);
        assert_eq!(manifest.profile, ProfileName::TinyCnn);
        let after = restored.predict_probabilities(&batch).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn threshold_update_leaves_weights_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 3, false).unwrap();
        save_checkpoint(&model, &vocab3(), None, dir.path()).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap().threshold, None);

        set_manifest_threshold(dir.path(), 0.4).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap().threshold, Some(0.4));

        let (restored, _) = load_checkpoint(dir.path()).unwrap();
        let batch = Array4::<f32>::zeros((1, 3, 32, 32));
        assert_eq!(
            restored.predict_probabilities(&batch).unwrap(),
            model.predict_probabilities(&batch).unwrap()
        );
    }

    #[test]
    fn vocabulary_width_must_match_head() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 2, false).unwrap();
        assert!(save_checkpoint(&model, &vocab3(), None, dir.path()).is_err());
    }
}
