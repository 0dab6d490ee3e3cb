//! Trained-model files.
//!
//! JSON with a fixed field order; every float is stored as a hex-float
//! string so reloading is bit-exact and re-saving reproduces the same bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use cyclesketch_core::inn::Activation;
use cyclesketch_core::train::LossTerms;
use cyclesketch_core::{BaseParams, DiffeoParams, InnSpec, ShapeTransform, SubnetSpec};
use serde::{Deserialize, Serialize};

use crate::hexfloat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u64 },
    #[error("model file holds {found} parameters but its architecture needs {expected}")]
    ParameterCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub loss: LossTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub base: BaseParams,
    pub params: DiffeoParams,
    pub shape_transform: ShapeTransform,
    pub training: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseFile {
    #[serde(with = "hexfloat::serde_f64")]
    mu: f64,
    #[serde(with = "hexfloat::serde_f64")]
    alpha_y: f64,
    #[serde(with = "hexfloat::serde_f64")]
    radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureFile {
    block_count: usize,
    hidden_layers: Vec<usize>,
    activation: String,
    #[serde(with = "hexfloat::serde_f64")]
    scale_clamp: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformFile {
    #[serde(with = "hexfloat::serde_vec")]
    translation: Vec<f64>,
    #[serde(with = "hexfloat::serde_f64")]
    scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossFile {
    #[serde(with = "hexfloat::serde_f64")]
    total: f64,
    #[serde(with = "hexfloat::serde_f64")]
    hausdorff: f64,
    #[serde(with = "hexfloat::serde_f64")]
    regularizer: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingFile {
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    loss: LossFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u64,
    base: BaseFile,
    architecture: ArchitectureFile,
    shape_transform: TransformFile,
    training: TrainingFile,
    #[serde(with = "hexfloat::serde_vec")]
    parameters: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn to_json(&self) -> String {
        let spec = self.params.spec();
        let file = CheckpointFile {
            format_version: FORMAT_VERSION as u64,
            base: BaseFile { mu: self.base.mu(), alpha_y: self.base.alpha_y(), radius: self.base.radius() },
            architecture: ArchitectureFile {
                block_count: spec.block_count,
                hidden_layers: spec.subnet.hidden_layers.clone(),
                activation: spec.subnet.activation.name().to_string(),
                scale_clamp: spec.scale_clamp,
            },
            shape_transform: TransformFile {
                translation: self.shape_transform.translation.to_vec(),
                scale: self.shape_transform.scale,
            },
            training: TrainingFile {
                seed: self.training.seed,
                epochs: self.training.epochs,
                best_epoch: self.training.best_epoch,
                loss: LossFile {
                    total: self.training.loss.total,
                    hausdorff: self.training.loss.hausdorff,
                    regularizer: self.training.loss.regularizer,
                },
            },
            parameters: self.params.flatten(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let bad = |e: cyclesketch_core::Error| CheckpointError::Malformed(e.to_string());

        let base = BaseParams::new(file.base.mu, file.base.alpha_y, file.base.radius).map_err(bad)?;
        let arch = &file.architecture;
        let activation = Activation::from_name(&arch.activation)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown activation {:?}", arch.activation)))?;
        let spec = InnSpec {
            block_count: arch.block_count,
            subnet: SubnetSpec::coupling(arch.hidden_layers.clone(), activation),
            scale_clamp: arch.scale_clamp,
        };
        spec.validate().map_err(bad)?;
        if file.parameters.len() != spec.param_count() {
            return Err(CheckpointError::ParameterCount { expected: spec.param_count(), found: file.parameters.len() });
        }
        let params = DiffeoParams::from_flat(spec, &file.parameters).map_err(bad)?;
        let t = &file.shape_transform;
        if t.translation.len() != 2 {
            return Err(CheckpointError::Malformed("translation must have two components".into()));
        }
        let shape_transform = ShapeTransform::new([t.translation[0], t.translation[1]], t.scale).map_err(bad)?;
        let l = &file.training.loss;
        Ok(Self {
            base,
            params,
            shape_transform,
            training: TrainingMeta {
                seed: file.training.seed,
                epochs: file.training.epochs,
                best_epoch: file.training.best_epoch,
                loss: LossTerms { total: l.total, hausdorff: l.hausdorff, regularizer: l.regularizer },
            },
        })
    }
}

/// Writes through a temporary file in the destination directory and
/// renames it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_model(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, ckpt.to_json().as_bytes())
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_model(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    ModelCheckpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cyclesketch_core::rng::{stream, Stream};

    fn sample() -> ModelCheckpoint {
        let spec = InnSpec { block_count: 2, subnet: SubnetSpec::coupling(vec![4], Activation::Tanh), scale_clamp: 2.0 };
        ModelCheckpoint {
            base: BaseParams::new(1.5, 0.7, 1.0).unwrap(),
            params: DiffeoParams::randomized(spec, &mut stream(3, Stream::Init), 0.3).unwrap(),
            shape_transform: ShapeTransform::new([0.25, -3.0], 0.1).unwrap(),
            training: TrainingMeta {
                seed: 3,
                epochs: 10,
                best_epoch: 7,
                loss: LossTerms { total: 0.1, hausdorff: 0.09, regularizer: 1.0 / 3.0 },
            },
        }
    }

    #[test]
    fn reload_is_bit_exact_and_resave_is_byte_identical() {
        let ckpt = sample();
        let text = ckpt.to_json();
        let back = ModelCheckpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&sample(), &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_model(&load_model(&path).unwrap(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn distinct_errors() {
        let text = sample().to_json();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(ModelCheckpoint::from_json(truncated), Err(CheckpointError::Malformed(_))));

        let v2 = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(ModelCheckpoint::from_json(&v2), Err(CheckpointError::UnsupportedVersion { found: 2 })));

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["parameters"].as_array_mut().unwrap().pop();
        let short = serde_json::to_string(&value).unwrap();
        assert!(matches!(ModelCheckpoint::from_json(&short), Err(CheckpointError::ParameterCount { .. })));

        let missing = load_model(Path::new("/nonexistent/model.json"));
        assert!(matches!(missing, Err(CheckpointError::Io { .. })));
    }
}
