//! Checkpoint archive: one safetensors file holding every extractor parameter (including
//! batch-norm running statistics), both head matrices, and JSON metadata with the
//! backbone configuration and the base-class list.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model};
use crate::{Error, Result};

const META_KEY: &str = "bsfa";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub base_classes: Vec<String>,
    /// Free-form provenance (variant, epoch, validation accuracy ...).
    #[serde(default)]
    pub extra: HashMap<String, String>,
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

impl Model {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        if meta.base_classes.len() != self.num_classes() {
            return Err(ckpt_err(
                path,
                format!(
                    "{} class names for a {}-way head",
                    meta.base_classes.len(),
                    self.num_classes()
                ),
            ));
        }
        let tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(name, var, _)| (name.to_string(), var.as_tensor().detach()))
            .collect();
        let json = serde_json::to_string(meta).map_err(|e| ckpt_err(path, e))?;
        let info = HashMap::from([(META_KEY.to_string(), json)]);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(tensors, Some(info), path).map_err(|e| ckpt_err(path, e))
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| ckpt_err(path, e))?;
        let model = Model::new(meta.backbone.clone(), meta.base_classes.len(), dtype, 0)?;
        let stored = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        if stored.len() != model.params.len() {
            return Err(ckpt_err(
                path,
                format!("{} tensors stored, model has {}", stored.len(), model.params.len()),
            ));
        }
        for (name, var, _) in model.params.iter() {
            let t = stored
                .get(name)
                .ok_or_else(|| ckpt_err(path, format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(ckpt_err(path, format!("shape mismatch for `{name}`")));
            }
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, FeatureExtractor};
    use crate::data::Image;
    use ndarray::Array3;

    #[test]
    fn save_load_preserves_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let cfg = BackboneConfig::new(Architecture::TinyTest);
        let model = Model::new(cfg.clone(), 2, DType::F32, 5).unwrap();
        let meta = CheckpointMeta {
            backbone: cfg,
            base_classes: vec!["a".into(), "b".into()],
            extra: HashMap::new(),
        };
        model.save(&path, &meta).unwrap();
        let (loaded, lmeta) = Model::load(&path, DType::F32).unwrap();
        assert_eq!(lmeta, meta);
        let img = Image::new(Array3::from_shape_fn((84, 84, 3), |(r, c, k)| ((r * 7 + c * 3 + k) % 11) as f32 / 10.0), None, None).unwrap();
        let a = model.extract(&img).unwrap().to_array().unwrap();
        let b = loaded.extract(&img).unwrap().to_array().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreadable_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Model::load(&path, DType::F32), Err(Error::Checkpoint { .. })));
        assert!(matches!(Model::load(&dir.path().join("missing"), DType::F32), Err(Error::Io { .. })));
    }
}
