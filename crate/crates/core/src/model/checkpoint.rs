//! Checkpoint directories.
//!
//! Layout:
//! ```text
//! <dir>/manifest.json        format version, model config, seed, epoch, shapes
//! <dir>/<param>.f32          raw little-endian f32, one file per parameter
//! <dir>/opt.<param>.f32      optimizer velocity, when saved
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::tensor::tape::ParamSet;
use crate::tensor::{SgdState, Tensor};

use super::{EncoderConfig, FlatModel, ModelConfig, BASE_HEAD, NOVEL_HEAD};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub state: SgdState,
    pub velocity: Vec<ArrayEntry>,
}

/// Run bookkeeping stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Free-form run state (stage, best metric, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub params: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlatModel,
    pub optimizer: Option<SgdState>,
    pub meta: CheckpointMeta,
}

fn file_name(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}.f32")
}

fn write_array(dir: &Path, file: &str, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| FlatError::io(path, e))
}

fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Vec<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| FlatError::checkpoint(&path, format!("cannot read: {e}")))?;
    let want = entry.shape.iter().product::<usize>() * 4;
    if bytes.len() != want {
        return Err(FlatError::checkpoint(
            &path,
            format!("`{}` has {} bytes, shape {:?} needs {want}", entry.name, bytes.len(), entry.shape),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn save_checkpoint(
    model: &FlatModel,
    optimizer: Option<&SgdState>,
    meta: &CheckpointMeta,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| FlatError::io(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in model.params.iter() {
        let file = file_name("", name);
        write_array(dir, &file, t.data())?;
        params.push(ArrayEntry { name: name.to_string(), shape: t.shape().to_vec(), file });
    }
    let optimizer = match optimizer {
        None => None,
        Some(st) => {
            let mut velocity = Vec::new();
            for (name, v) in &st.velocity {
                let file = file_name("opt.", name);
                write_array(dir, &file, v)?;
                velocity.push(ArrayEntry { name: name.clone(), shape: vec![v.len()], file });
            }
            Some(OptimizerEntry { state: st.clone(), velocity })
        }
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        meta: meta.clone(),
        params,
        optimizer,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| FlatError::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| FlatError::checkpoint(&path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| FlatError::checkpoint(&path, format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FlatError::checkpoint(
            &path,
            format!("format version {} is not supported (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Loads a checkpoint and checks every array against the shapes implied by
/// the manifest's model config.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let rows = |name: &str| manifest.params.iter().find(|e| e.name == name).map(|e| e.shape[0]);
    let n_base = rows(BASE_HEAD);
    let n_novel = rows(NOVEL_HEAD);

    manifest
        .config
        .encoder
        .validate()
        .map_err(|e| FlatError::checkpoint(dir, format!("manifest config is invalid: {e}")))?;
    let mut reference = FlatModel::<f32>::new(manifest.config.clone(), n_base.unwrap_or(2).max(2), 0)
        .map_err(|e| FlatError::checkpoint(dir, e.to_string()))?;
    if n_base.is_none() {
        reference.drop_base_head();
    }
    if let Some(n) = n_novel {
        reference.init_novel_random(n, 0).map_err(|e| FlatError::checkpoint(dir, e.to_string()))?;
    }

    if manifest.params.len() != reference.params.len() {
        return Err(FlatError::checkpoint(
            dir,
            format!("manifest lists {} arrays, the config implies {}", manifest.params.len(), reference.params.len()),
        ));
    }
    let mut params = ParamSet::default();
    for entry in &manifest.params {
        let expected = reference.params.by_name(&entry.name).ok_or_else(|| {
            FlatError::checkpoint(dir, format!("unexpected array `{}` for this config", entry.name))
        })?;
        let head = entry.name == BASE_HEAD || entry.name == NOVEL_HEAD;
        let shape_ok = if head {
            entry.shape.len() == 2 && entry.shape[1] == expected.shape()[1]
        } else {
            entry.shape == expected.shape()
        };
        if !shape_ok {
            return Err(FlatError::checkpoint(
                dir,
                format!("shape mismatch for `{}`: file has {:?}, config implies {:?}", entry.name, entry.shape, expected.shape()),
            ));
        }
        let data = read_array(dir, entry)?;
        params.insert(&entry.name, Tensor::new(&entry.shape, data)?.with_grad());
    }
    // Keep the canonical parameter order regardless of manifest order.
    let mut ordered = ParamSet::default();
    for name in reference.params.names() {
        let t = params.remove(&name).expect("checked above");
        ordered.insert(&name, t);
    }

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(opt) => {
            let mut st = opt.state.clone();
            st.velocity.clear();
            for entry in &opt.velocity {
                let p = ordered.by_name(&entry.name).ok_or_else(|| {
                    FlatError::checkpoint(dir, format!("velocity for unknown parameter `{}`", entry.name))
                })?;
                if p.numel() != entry.shape.iter().product::<usize>() {
                    return Err(FlatError::checkpoint(dir, format!("velocity shape mismatch for `{}`", entry.name)));
                }
                st.velocity.push((entry.name.clone(), read_array(dir, entry)?));
            }
            Some(st)
        }
    };

    Ok(Checkpoint {
        model: FlatModel { config: manifest.config, params: ordered },
        optimizer,
        meta: manifest.meta,
    })
}

/// Loads a checkpoint that must match `expected` encoder geometry.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, expected: &EncoderConfig) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let ck = load_checkpoint(dir)?;
    let found = &ck.model.config.encoder;
    if found != expected {
        return Err(FlatError::checkpoint(
            dir,
            format!(
                "shape mismatch: checkpoint encoder has feature_dim {} with {} stages, config asks for feature_dim {} with {} stages",
                found.feature_dim,
                found.stages.len(),
                expected.feature_dim,
                expected.stages.len()
            ),
        ));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;

    fn model() -> FlatModel {
        let cfg = ModelConfig { encoder: EncoderConfig::uniform(3, 8, 2, 4), scale_init: 10.0 };
        let mut m = FlatModel::new(cfg, 3, 42).unwrap();
        m.init_novel_random(2, 7).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let mut st = SgdState::new(0.01, 0.9, 1e-4).unwrap();
        st.velocity.push(("enc.0.bias".into(), vec![0.5, -0.25, 1e-30, 3.0]));
        let meta = CheckpointMeta { seed: 42, epoch: 3, extra: serde_json::json!({"stage": "pretrain"}) };
        save_checkpoint(&m, Some(&st), &meta, dir.path()).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.optimizer.as_ref(), Some(&st));
        for ((na, a), (nb, b)) in m.params.iter().zip(ck.model.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let f = Tensor::new(&[2, 4], vec![0.1, 0.9, -0.3, 0.2, 1.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(m.logits(&f, Head::Joint).unwrap(), ck.model.logits(&f, Head::Joint).unwrap());
    }

    #[test]
    fn wrong_feature_dim_in_manifest_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), None, &CheckpointMeta::default(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["config"]["encoder"]["feature_dim"] = 8.into();
        v["config"]["encoder"]["stages"][1]["filters"] = 8.into();
        fs::write(&path, v.to_string()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn mismatched_expected_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), None, &CheckpointMeta::default(), dir.path()).unwrap();
        assert!(load_checkpoint_for(dir.path(), &EncoderConfig::uniform(3, 8, 2, 4)).is_ok());
        let err = load_checkpoint_for(dir.path(), &EncoderConfig::uniform(3, 8, 2, 16)).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn truncated_or_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(FlatError::Checkpoint { .. })));
        save_checkpoint(&model(), None, &CheckpointMeta::default(), dir.path()).unwrap();
        fs::write(dir.path().join("enc.0.bias.f32"), [0u8; 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(FlatError::Checkpoint { .. })));
    }
}
