//! Fine-tuning loop: binary cross-entropy over the sigmoid head, adaptive-
//! moment updates, per-epoch train/validation losses, best-checkpoint
//! selection, and overfitting-onset detection.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment, resize_image, AugmentationConfig, DatasetSplit, LabeledImage,
    LabelVocabulary, Transform};
use crate::nn::{Adam, Feat};
use crate::zoo::{save_checkpoint, BackboneProfile, ModelHandle, ZooError};

/// Numerical guard for the cross-entropy: probabilities are clipped into
/// [EPS, 1 - EPS] so the loss stays finite.
pub const LOSS_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split and validation split must both be non-empty")]
    EmptySplit,
    #[error("model head is {model} wide but the corpus has {corpus} classes")]
    HeadWidth { model: usize, corpus: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("probabilities {probs:?} and labels {labels:?} have different shapes")]
    LossShape {
        probs: (usize, usize),
        labels: (usize, usize),
    },
    #[error("window must be at least 1")]
    BadWindow,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Requested input side; the effective side never drops below the
    /// profile minimum (see [`TrainingConfig::resolve_input_size`]).
    pub input_size: u32,
    pub freeze_backbone: bool,
}

impl TrainingConfig {
    /// Conventional fine-tuning defaults: 10 epochs, batch 32, 1e-4 for the
    /// pretrained-style backbones and 1e-3 for `tiny_cnn`.
    pub fn for_profile(profile: &BackboneProfile) -> Self {
        let learning_rate = match profile.name {
            crate::zoo::ProfileName::TinyCnn => 1e-3,
            _ => 1e-4,
        };
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate,
            seed: 42,
            input_size: profile.default_input_size(),
            freeze_backbone: false,
        }
    }

    /// The input side actually used: the configured side, raised to the
    /// profile minimum when it falls short (a 256px corpus is upscaled to
    /// 299 for the inception profile, for example).
    pub fn resolve_input_size(&self, profile: &BackboneProfile) -> u32 {
        self.input_size.max(profile.min_input_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub model_name: String,
    pub logs: Vec<EpochLog>,
    /// Directory of the best-validation-loss checkpoint.
    pub checkpoint_path: PathBuf,
}

/// Mean binary cross-entropy over all sample-label entries, with
/// probabilities clipped into [ε, 1−ε].
pub fn compute_loss(probabilities: &Array2<f64>, labels: &Array2<u8>) -> Result<f64, TrainError> {
    if probabilities.dim() != labels.dim() {
        return Err(TrainError::LossShape {
            probs: probabilities.dim(),
            labels: labels.dim(),
        });
    }
    let mut sum = 0.0f64;
    for (&p, &y) in probabilities.iter().zip(labels.iter()) {
        let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / probabilities.len() as f64)
}

/// Resizes same-shaped RGB images to `input_size` and stacks them as an
/// (N, 3, S, S) batch in [0, 1]. This is the shared entry path for both
/// training and tile inference.
pub fn prepare_batch(images: &[&RgbImage], input_size: u32) -> Result<Feat, TrainError> {
    let mut batch = Array4::<f32>::zeros((
        images.len(),
        3,
        input_size as usize,
        input_size as usize,
    ));
    for (n, img) in images.iter().enumerate() {
        let resized = resize_image(img, input_size)?;
        for (x, y, pixel) in resized.enumerate_pixels() {
            for c in 0..3 {
                batch[(n, c, y as usize, x as usize)] = pixel[c] as f32 / 255.0;
            }
        }
    }
    Ok(batch)
}

fn labels_matrix(images: &[&LabeledImage], num_labels: usize) -> Array2<u8> {
    let mut m = Array2::<u8>::zeros((images.len(), num_labels));
    for (i, img) in images.iter().enumerate() {
        for (j, &flag) in img.labels.iter().enumerate() {
            m[(i, j)] = flag;
        }
    }
    m
}

fn sigmoid_probs(logits: &Array2<f32>) -> Array2<f64> {
    logits.mapv(|z| 1.0 / (1.0 + (-(z as f64)).exp()))
}

/// Fine-tunes the model on the split, one optimizer pass per epoch, and
/// saves the best-validation-loss checkpoint (plus the final weights) under
/// `checkpoint_dir`.
pub fn train(
    model: &mut ModelHandle,
    corpus: &[LabeledImage],
    split: &DatasetSplit,
    vocab: &LabelVocabulary,
    config: &TrainingConfig,
    augmentation: &AugmentationConfig,
    checkpoint_dir: &Path,
) -> Result<TrainingHistory, TrainError> {
    if split.train.is_empty() || split.val.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if vocab.len() != model.num_labels {
        return Err(TrainError::HeadWidth {
            model: model.num_labels,
            corpus: vocab.len(),
        });
    }
    let input_size = config.resolve_input_size(&model.profile);
    let transform_pool = augmentation.transforms()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config.learning_rate as f32);
    model.graph_mut().set_backbone_frozen(config.freeze_backbone);

    let best_dir = checkpoint_dir.join("best");
    let final_dir = checkpoint_dir.join("final");
    let mut best_val = f64::INFINITY;
    let mut logs = Vec::with_capacity(config.epochs);

    let mut train_order: Vec<usize> = split.train.clone();
    for epoch in 1..=config.epochs {
        train_order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut sample_count = 0usize;
        for (batch_idx, chunk) in train_order.chunks(config.batch_size.max(1)).enumerate() {
            // Augment on the fly, then resize to the effective input side.
            let mut augmented = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let t = transform_pool[rng.random_range(0..transform_pool.len())];
                if t == Transform::Identity {
                    augmented.push(corpus[idx].clone());
                } else {
                    augmented.push(augment(&corpus[idx], t)?);
                }
            }
            let refs: Vec<&RgbImage> = augmented.iter().map(|img| &img.pixels).collect();
            let batch = prepare_batch(&refs, input_size)?;
            let label_refs: Vec<&LabeledImage> = augmented.iter().collect();
            let truth = labels_matrix(&label_refs, model.num_labels);

            let (logits, trace) = model.forward_logits_train(&batch)?;
            let probs = sigmoid_probs(&logits);
            let loss = compute_loss(&probs, &truth)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            sample_count += chunk.len();

            // d(mean BCE)/d(logit) = (p - y) / (B * L), folded with the
            // sigmoid for numerical stability.
            let (n, l) = logits.dim();
            let scale = 1.0 / (n * l) as f32;
            let mut grad = Array4::<f32>::zeros((n, l, 1, 1));
            for i in 0..n {
                for j in 0..l {
                    grad[(i, j, 0, 0)] =
                        (probs[(i, j)] as f32 - truth[(i, j)] as f32) * scale;
                }
            }
            model.graph_mut().backward(&trace, grad);
            optimizer.step(model.graph_mut());
        }
        let train_loss = loss_sum / sample_count as f64;

        let val_loss = evaluate_split_loss(model, corpus, &split.val, input_size, config.batch_size)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        println!(
            "[train] {} epoch {epoch}/{}: train_loss {train_loss:.6} val_loss {val_loss:.6}",
            model.model_name(),
            config.epochs
        );
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            save_checkpoint(model, vocab, None, &best_dir)?;
        }
    }
    save_checkpoint(model, vocab, None, &final_dir)?;

    Ok(TrainingHistory {
        model_name: model.model_name(),
        logs,
        checkpoint_path: best_dir,
    })
}

/// Mean validation loss in evaluation mode (no augmentation, running BN
/// statistics).
pub fn evaluate_split_loss(
    model: &ModelHandle,
    corpus: &[LabeledImage],
    indices: &[usize],
    input_size: u32,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut loss_sum = 0.0f64;
    let mut count = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|&i| &corpus[i].pixels).collect();
        let batch = prepare_batch(&images, input_size)?;
        let refs: Vec<&LabeledImage> = chunk.iter().map(|&i| &corpus[i]).collect();
        let truth = labels_matrix(&refs, model.num_labels);
        let probs = model.predict_probabilities(&batch)?;
        loss_sum += compute_loss(&probs, &truth)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(loss_sum / count as f64)
}

/// Predicted probabilities for a list of corpus images, batched; rows in
/// the order of `indices`.
pub fn predict_corpus(
    model: &ModelHandle,
    corpus: &[LabeledImage],
    indices: &[usize],
    input_size: u32,
    batch_size: usize,
) -> Result<(Array2<f64>, Array2<u8>), TrainError> {
    let mut probs = Array2::<f64>::zeros((indices.len(), model.num_labels));
    let mut truth = Array2::<u8>::zeros((indices.len(), model.num_labels));
    let mut row = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|&i| &corpus[i].pixels).collect();
        let batch = prepare_batch(&images, input_size)?;
        let batch_probs = model.predict_probabilities(&batch)?;
        for (local, &idx) in chunk.iter().enumerate() {
            for j in 0..model.num_labels {
                probs[(row, j)] = batch_probs[(local, j)];
                truth[(row, j)] = corpus[idx].labels[j];
            }
            row += 1;
        }
    }
    Ok((probs, truth))
}

/// First epoch where validation loss rises while training loss falls for at
/// least `window` consecutive epochs; `None` when no such run exists.
pub fn detect_overfitting(
    history: &TrainingHistory,
    window: usize,
) -> Result<Option<usize>, TrainError> {
    if window == 0 {
        return Err(TrainError::BadWindow);
    }
    let logs = &history.logs;
    if logs.len() < window + 1 {
        return Ok(None);
    }
    for start in 1..logs.len() {
        if start + window > logs.len() {
            break;
        }
        let run_holds = (start..start + window).all(|k| {
            logs[k].val_loss > logs[k - 1].val_loss && logs[k].train_loss < logs[k - 1].train_loss
        });
        if run_holds {
            return Ok(Some(logs[start].epoch));
        }
    }
    Ok(None)
}

/// Loss curves as CSV: model, epoch, train_loss, val_loss; one row per
/// (model, epoch) with full float precision.
pub fn export_loss_curves(histories: &[TrainingHistory], out: &Path) -> Result<(), TrainError> {
    let mut text = String::from("model,epoch,train_loss,val_loss\n");
    for history in histories {
        for log in &history.logs {
            text.push_str(&format!(
                "{},{},{},{}\n",
                history.model_name, log.epoch, log.train_loss, log.val_loss
            ));
        }
    }
    std::fs::write(out, text).map_err(|source| TrainError::Io {
        path: out.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_is_near_zero_for_perfect_predictions() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        let labels = array![[1u8, 0], [0, 1]];
        let loss = compute_loss(&probs, &labels).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn loss_at_half_is_ln_two() {
        let probs = array![[0.5, 0.5], [0.5, 0.5]];
        let labels = array![[1u8, 0], [1, 1]];
        let loss = compute_loss(&probs, &labels).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_elementwise_hand_computation() {
        let probs = array![
            [0.3, 0.8, 0.55, 0.12],
            [0.96, 0.04, 0.5, 0.71],
            [0.22, 0.64, 0.33, 0.9]
        ];
        let labels = array![[1u8, 0, 1, 0], [1, 0, 0, 1], [0, 1, 1, 1]];
        let mut expected = 0.0f64;
        for (&p, &y) in probs.iter().zip(labels.iter()) {
            let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
            expected += -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln());
        }
        expected /= 12.0;
        let got = compute_loss(&probs, &labels).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let probs = array![[0.2, 0.9], [0.7, 0.4]];
        let labels = array![[0u8, 1], [1, 0]];
        let a = compute_loss(&probs, &labels).unwrap();
        let probs_swapped = array![[0.7, 0.4], [0.2, 0.9]];
        let labels_swapped = array![[1u8, 0], [0, 1]];
        let b = compute_loss(&probs_swapped, &labels_swapped).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let probs = array![[0.5, 0.5]];
        let labels = array![[1u8], [0]];
        assert!(matches!(
            compute_loss(&probs, &labels),
            Err(TrainError::LossShape { .. })
        ));
    }

    fn history(pairs: &[(f64, f64)]) -> TrainingHistory {
        TrainingHistory {
            model_name: "toy".into(),
            logs: pairs
                .iter()
                .enumerate()
                .map(|(i, &(train_loss, val_loss))| EpochLog {
                    epoch: i + 1,
                    train_loss,
                    val_loss,
                })
                .collect(),
            checkpoint_path: PathBuf::from("unused"),
        }
    }

    #[test]
    fn no_overfitting_when_val_strictly_decreases() {
        let h = history(&[(1.0, 1.1), (0.8, 0.9), (0.6, 0.7), (0.5, 0.6)]);
        assert_eq!(detect_overfitting(&h, 2).unwrap(), None);
    }

    #[test]
    fn overfitting_onset_found_at_epoch_six() {
        // Train falls throughout; val falls through epoch 5 then rises at 6, 7.
        let h = history(&[
            (1.0, 1.1),
            (0.9, 1.0),
            (0.8, 0.9),
            (0.7, 0.8),
            (0.6, 0.7),
            (0.5, 0.75),
            (0.4, 0.8),
            (0.35, 0.78),
        ]);
        assert_eq!(detect_overfitting(&h, 2).unwrap(), Some(6));
    }

    #[test]
    fn single_epoch_history_has_no_onset() {
        let h = history(&[(1.0, 1.0)]);
        assert_eq!(detect_overfitting(&h, 1).unwrap(), None);
        assert!(matches!(
            detect_overfitting(&h, 0),
            Err(TrainError::BadWindow)
        ));
    }

    #[test]
    fn loss_curve_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let histories = vec![
            history(&[(1.0, 1.2), (0.5, 0.8), (0.25, 0.6)]),
            TrainingHistory {
                model_name: "other".into(),
                logs: vec![
                    EpochLog { epoch: 1, train_loss: 0.9177, val_loss: 1.0033 },
                    EpochLog { epoch: 2, train_loss: 0.41, val_loss: 0.77 },
                    EpochLog { epoch: 3, train_loss: 0.2, val_loss: 0.6 },
                ],
                checkpoint_path: PathBuf::from("unused"),
            },
        ];
        export_loss_curves(&histories, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("model,epoch,train_loss,val_loss"));
        assert_eq!(text.lines().count(), 1 + 6);

        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut parsed: Vec<(String, usize, f64, f64)> = Vec::new();
        for record in reader.records() {
            let r = record.unwrap();
            parsed.push((
                r[0].to_owned(),
                r[1].parse().unwrap(),
                r[2].parse().unwrap(),
                r[3].parse().unwrap(),
            ));
        }
        let mut expected = Vec::new();
        for h in &histories {
            for log in &h.logs {
                expected.push((h.model_name.clone(), log.epoch, log.train_loss, log.val_loss));
            }
        }
        assert_eq!(parsed, expected);
    }

    #[test]
    fn empty_history_list_exports_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        export_loss_curves(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "model,epoch,train_loss,val_loss\n"
        );
    }
}
