//! Versioned parameter archives with an embedded config snapshot and metric
//! history. Writes go through a temporary file and an atomic rename so a
//! crashed run never leaves a half-written checkpoint behind.

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::RareModel;
use crate::train::EpochRecord;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    /// Anticipation horizon (seconds) carried into the next epoch.
    pub attc: f64,
    pub metric_history: Vec<EpochRecord>,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &RareModel,
        config: &RunConfig,
        epoch: usize,
        attc: f64,
        metric_history: Vec<EpochRecord>,
    ) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, value)| ParamRecord {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                data: value.iter().cloned().collect(),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            epoch,
            attc,
            metric_history,
            params,
        }
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn restore(&self) -> Result<RareModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema_version {} != supported {}",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        let mut model = RareModel::init(&self.config);
        for record in &self.params {
            let id = model.store.id_by_name(&record.name).ok_or_else(|| {
                Error::Checkpoint(format!("unknown parameter '{}'", record.name))
            })?;
            let arr = ArrayD::from_shape_vec(
                ndarray::IxDyn(&record.shape),
                record.data.clone(),
            )
            .map_err(|e| Error::Checkpoint(format!("parameter '{}': {e}", record.name)))?;
            model.store.set(id, arr)?;
        }
        Ok(model)
    }
}

/// Serialize and atomically replace `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp: PathBuf = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec(checkpoint)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read '{}': {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_restores_exact_parameters() {
        let mut cfg = RunConfig::default();
        cfg.backbone_channels = 4;
        cfg.neck_channels = vec![2, 2, 2];
        cfg.object_embed_dim = 8;
        cfg.box_embed_dim = 4;
        cfg.scene_hidden_dim = 8;
        cfg.fused_dim = 8;
        cfg.num_heads = 2;
        cfg.queue_size = 3;
        cfg.classifier_hidden_dim = 6;
        cfg.roi_size = 3;
        let model = RareModel::init(&cfg);

        let dir = std::env::temp_dir().join(format!("rare-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("checkpoint.json");
        let ckpt = Checkpoint::from_model(&model, &cfg, 3, 0.8, vec![]);
        save_checkpoint(&path, &ckpt).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.attc, 0.8);
        let restored = loaded.restore().unwrap();
        for (a, b) in model.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1, "parameter {} changed across roundtrip", a.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_a_checkpoint_error() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
    }
}
