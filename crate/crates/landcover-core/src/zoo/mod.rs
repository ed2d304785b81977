//! The backbone zoo: five standard convolutional architectures plus a
//! desk-scale `tiny_cnn`, each terminated in an L-unit multi-label head
//! whose per-class probabilities come from an element-wise sigmoid.

mod archs;
mod checkpoint;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Array4};
use thiserror::Error;

use crate::nn::{Feat, Graph, Trace};

pub use checkpoint::{
    load_checkpoint, load_manifest, save_checkpoint, set_manifest_threshold, CheckpointManifest,
};

/// Seed used for weight initialization when the caller does not pick one.
pub const DEFAULT_INIT_SEED: u64 = 0x1a5d_c0de;

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unknown profile {0:?}")]
    UnknownProfile(String),
    #[error("num_labels must be at least 1")]
    NoLabels,
    #[error("profile {0} has no pretrained weights available")]
    PretrainedUnavailable(ProfileName),
    #[error("{profile} requires inputs of at least {required}x{required}, got {got}x{got}")]
    InputSize {
        profile: ProfileName,
        required: u32,
        got: u32,
    },
    #[error("batch must be (N, 3, S, S), got {0:?}")]
    BatchShape(Vec<usize>),
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Weights(#[from] crate::nn::WeightsError),
}

/// The profile identifiers, spelled the way the CLI and manifests spell them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Resnet50,
    InceptionV3,
    MobilenetV3,
    Densenet201,
    WideResnet50,
    TinyCnn,
}

impl ProfileName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::Resnet50 => "resnet50",
            ProfileName::InceptionV3 => "inception_v3",
            ProfileName::MobilenetV3 => "mobilenet_v3",
            ProfileName::Densenet201 => "densenet201",
            ProfileName::WideResnet50 => "wide_resnet50",
            ProfileName::TinyCnn => "tiny_cnn",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resnet50" => Ok(ProfileName::Resnet50),
            "inception_v3" => Ok(ProfileName::InceptionV3),
            "mobilenet_v3" => Ok(ProfileName::MobilenetV3),
            "densenet201" => Ok(ProfileName::Densenet201),
            "wide_resnet50" => Ok(ProfileName::WideResnet50),
            "tiny_cnn" => Ok(ProfileName::TinyCnn),
            other => Err(ZooError::UnknownProfile(other.to_owned())),
        }
    }
}

/// Static facts about a backbone: its minimum input side and whether
/// publicly distributed pretrained weights exist for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneProfile {
    pub name: ProfileName,
    pub min_input_size: u32,
    pub pretrained_available: bool,
}

impl BackboneProfile {
    pub fn of(name: ProfileName) -> Self {
        let (min_input_size, pretrained_available) = match name {
            ProfileName::Resnet50 => (224, true),
            ProfileName::InceptionV3 => (299, true),
            ProfileName::MobilenetV3 => (224, true),
            ProfileName::Densenet201 => (224, true),
            ProfileName::WideResnet50 => (224, true),
            ProfileName::TinyCnn => (32, false),
        };
        Self {
            name,
            min_input_size,
            pretrained_available,
        }
    }

    /// Input side the training pipeline uses by default: the profile
    /// minimum, except for `tiny_cnn` where 64 keeps small shapes visible.
    pub fn default_input_size(&self) -> u32 {
        match self.name {
            ProfileName::TinyCnn => 64,
            _ => self.min_input_size,
        }
    }
}

/// The six available profiles, the five standard backbones first.
pub fn list_profiles() -> Vec<BackboneProfile> {
    [
        ProfileName::Resnet50,
        ProfileName::InceptionV3,
        ProfileName::MobilenetV3,
        ProfileName::Densenet201,
        ProfileName::WideResnet50,
        ProfileName::TinyCnn,
    ]
    .into_iter()
    .map(BackboneProfile::of)
    .collect()
}

/// A built model: the compute graph plus everything needed to describe and
/// reproduce it.
pub struct ModelHandle {
    pub profile: BackboneProfile,
    pub num_labels: usize,
    pub parameter_count: usize,
    pub init_seed: u64,
    /// Whether pretrained initialization was requested at build time. When
    /// no weight file is reachable the fallback is the seeded random
    /// initialization, and this flag records the original request.
    pub pretrained_requested: bool,
    graph: Graph,
}

impl ModelHandle {
    /// Per-class probabilities for a batch of (N, 3, S, S) inputs in [0, 1].
    ///
    /// Enforces the profile's minimum input size and runs the graph in
    /// evaluation mode, so fixed weights and inputs give identical outputs.
    pub fn predict_probabilities(&self, batch: &Feat) -> Result<Array2<f64>, ZooError> {
        let (_, c, h, w) = batch.dim();
        if c != 3 || h != w {
            return Err(ZooError::BatchShape(batch.shape().to_vec()));
        }
        let side = h as u32;
        if side < self.profile.min_input_size {
            return Err(ZooError::InputSize {
                profile: self.profile.name,
                required: self.profile.min_input_size,
                got: side,
            });
        }
        let logits = self.graph.forward_eval(batch);
        Ok(sigmoid_to_probabilities(&logits))
    }

    /// Training-mode forward pass returning logits and the trace backward
    /// needs. Input-size validation matches `predict_probabilities`.
    pub fn forward_logits_train(&mut self, batch: &Feat) -> Result<(Array2<f32>, Trace), ZooError> {
        let (_, c, h, w) = batch.dim();
        if c != 3 || h != w {
            return Err(ZooError::BatchShape(batch.shape().to_vec()));
        }
        let side = h as u32;
        if side < self.profile.min_input_size {
            return Err(ZooError::InputSize {
                profile: self.profile.name,
                required: self.profile.min_input_size,
                got: side,
            });
        }
        let (logits, trace) = self.graph.forward_train(batch);
        let (n, l, _, _) = logits.dim();
        let flat = logits
            .into_shape_with_order((n, l))
            .expect("logits are (N, L, 1, 1)");
        Ok((flat, trace))
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn model_name(&self) -> String {
        self.profile.name.to_string()
    }
}

fn sigmoid_to_probabilities(logits: &Feat) -> Array2<f64> {
    let (n, l, _, _) = logits.dim();
    Array2::from_shape_fn((n, l), |(i, j)| {
        let z = logits[(i, j, 0, 0)] as f64;
        1.0 / (1.0 + (-z).exp())
    })
}

/// Builds a model with the default initialization seed.
pub fn build_model(
    profile: BackboneProfile,
    num_labels: usize,
    pretrained: bool,
) -> Result<ModelHandle, ZooError> {
    build_model_with_seed(profile, num_labels, pretrained, DEFAULT_INIT_SEED)
}

/// Builds a model, initializing weights from the given seed.
///
/// With `pretrained` set, the profile must advertise pretrained weights and
/// a weight file is searched at `$LANDCOVER_PRETRAINED_DIR/<profile>.lcw`.
/// When the file is absent the seeded initialization stands in, recorded on
/// the handle via `pretrained_requested`.
pub fn build_model_with_seed(
    profile: BackboneProfile,
    num_labels: usize,
    pretrained: bool,
    seed: u64,
) -> Result<ModelHandle, ZooError> {
    if num_labels == 0 {
        return Err(ZooError::NoLabels);
    }
    if pretrained && !profile.pretrained_available {
        return Err(ZooError::PretrainedUnavailable(profile.name));
    }
    let mut graph = archs::build_graph(profile.name, num_labels, seed);
    if pretrained {
        if let Ok(dir) = std::env::var("LANDCOVER_PRETRAINED_DIR") {
            let path = std::path::Path::new(&dir).join(format!("{}.lcw", profile.name));
            if path.is_file() {
                crate::nn::load_weights(&mut graph, &path)?;
            }
        }
    }
    let parameter_count = graph.param_count();
    Ok(ModelHandle {
        profile,
        num_labels,
        parameter_count,
        init_seed: seed,
        pretrained_requested: pretrained,
        graph,
    })
}

/// Stacks same-sized RGB images into an (N, 3, S, S) float batch in [0, 1].
pub fn batch_from_images(images: &[&RgbImage]) -> Feat {
    assert!(!images.is_empty(), "batch needs at least one image");
    let (w, h) = images[0].dimensions();
    let mut batch = Array4::<f32>::zeros((images.len(), 3, h as usize, w as usize));
    for (n, img) in images.iter().enumerate() {
        debug_assert_eq!(img.dimensions(), (w, h), "mixed sizes in one batch");
        for (x, y, pixel) in img.enumerate_pixels() {
            for c in 0..3 {
                batch[(n, c, y as usize, x as usize)] = pixel[c] as f32 / 255.0;
            }
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_profiles_in_declared_order() {
        let profiles = list_profiles();
        let names: Vec<&str> = profiles.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "resnet50",
                "inception_v3",
                "mobilenet_v3",
                "densenet201",
                "wide_resnet50",
                "tiny_cnn"
            ]
        );
    }

    #[test]
    fn inception_needs_299() {
        let p = BackboneProfile::of(ProfileName::InceptionV3);
        assert_eq!(p.min_input_size, 299);
    }

    #[test]
    fn paper_backbones_have_min_sizes_in_range() {
        for p in list_profiles() {
            match p.name {
                ProfileName::TinyCnn => {
                    assert!(p.min_input_size <= 32);
                    assert!(!p.pretrained_available);
                }
                ProfileName::InceptionV3 => assert_eq!(p.min_input_size, 299),
                _ => {
                    assert!((224..=299).contains(&p.min_input_size));
                    assert!(p.pretrained_available);
                }
            }
        }
    }

    #[test]
    fn tiny_cnn_rejects_pretrained() {
        let err = build_model(BackboneProfile::of(ProfileName::TinyCnn), 3, true).unwrap_err();
        assert!(matches!(err, ZooError::PretrainedUnavailable(_)));
    }

    #[test]
    fn tiny_cnn_outputs_probabilities_of_head_width() {
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 3, false).unwrap();
        let batch = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
            (c as f32 + i as f32 * 0.1 + j as f32 * 0.05).sin() * 0.5 + 0.5
        });
        let probs = model.predict_probabilities(&batch).unwrap();
        assert_eq!(probs.dim(), (1, 3));
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn tiny_cnn_17_labels_on_64px_batch() {
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 17, false).unwrap();
        let batch = Array4::from_shape_fn((4, 3, 64, 64), |(n, c, i, j)| {
            ((n * 31 + c * 7 + i * 3 + j) % 255) as f32 / 255.0
        });
        let probs = model.predict_probabilities(&batch).unwrap();
        assert_eq!(probs.dim(), (4, 17));
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn undersized_input_names_requirement() {
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 2, false).unwrap();
        let batch = Array4::<f32>::zeros((1, 3, 16, 16));
        let err = model.predict_probabilities(&batch).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("32"), "message should cite the minimum: {message}");
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 5, false).unwrap();
        let one = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| {
            ((c + i + j) % 7) as f32 / 7.0
        });
        let mut two = Array4::<f32>::zeros((2, 3, 32, 32));
        for c in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    let v = one[(0, c, i, j)];
                    two[(0, c, i, j)] = v;
                    two[(1, c, i, j)] = v;
                }
            }
        }
        let probs = model.predict_probabilities(&two).unwrap();
        assert_eq!(probs.row(0), probs.row(1));
    }

    #[test]
    fn fixed_seed_gives_bit_identical_outputs_across_builds() {
        let a = build_model_with_seed(BackboneProfile::of(ProfileName::TinyCnn), 4, false, 9)
            .unwrap();
        let b = build_model_with_seed(BackboneProfile::of(ProfileName::TinyCnn), 4, false, 9)
            .unwrap();
        let batch = Array4::from_shape_fn((2, 3, 48, 48), |(n, c, i, j)| {
            ((n + c + i * j) % 11) as f32 / 11.0
        });
        assert_eq!(
            a.predict_probabilities(&batch).unwrap(),
            b.predict_probabilities(&batch).unwrap()
        );
    }

    #[test]
    fn tiny_cnn_stays_under_200k_parameters() {
        let model = build_model(BackboneProfile::of(ProfileName::TinyCnn), 17, false).unwrap();
        assert!(model.parameter_count < 200_000, "{}", model.parameter_count);
    }
}
