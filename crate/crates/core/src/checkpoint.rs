//! Versioned JSON model checkpoints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::io::{read_json, write_json};
use crate::curation::Standardizer;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig, OutputScaling};
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
    pub input_norm: Vec<Standardizer>,
    pub output_scaling: OutputScaling,
    /// Content hash of the curation manifest the model was trained on.
    pub manifest_hash: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &FusionModel, manifest_hash: Option<String>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model
                .store
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    data: p.value.as_slice().to_vec(),
                })
                .collect(),
            input_norm: model.input_norm.clone(),
            output_scaling: model.output_scaling,
            manifest_hash,
        }
    }

    /// Rebuilds the model, checking every parameter name and shape.
    pub fn into_model(self) -> Result<FusionModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let mut model = FusionModel::new(self.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if self.params.len() != model.store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in self.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter `{}`", p.name)))?;
            let value = Matrix::new(p.rows, p.cols, p.data)?;
            if !value.all_finite() {
                return Err(Error::invalid(format!("parameter `{}` holds non-finite values", p.name)));
            }
            model
                .store
                .set_value(id, value)
                .map_err(|e| Error::invalid(format!("parameter `{}`: {e}", p.name)))?;
        }
        if self.input_norm.len() != model.config.input_dims.len()
            || self.input_norm.iter().zip(&model.config.input_dims).any(|(s, &d)| s.dim() != d)
        {
            return Err(Error::invalid("input standardization does not match the stream dimensions"));
        }
        model.input_norm = self.input_norm;
        model.output_scaling = self.output_scaling;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn save_model(model: &FusionModel, manifest_hash: Option<String>, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, manifest_hash).save(path)
}

/// Loads a model; with `expected_manifest`, refuses checkpoints trained on
/// other data.
pub fn load_model(path: &Path, expected_manifest: Option<&str>) -> Result<FusionModel> {
    let ck = Checkpoint::load(path)?;
    if let (Some(want), Some(have)) = (expected_manifest, ck.manifest_hash.as_deref()) {
        if want != have {
            return Err(Error::format(
                path,
                format!("checkpoint was trained on curated data {have}, not {want}"),
            ));
        }
    }
    ck.into_model().map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::Sensor;

    fn model() -> FusionModel {
        let cfg = ModelConfig {
            sensors: vec![Sensor::Uwb, Sensor::Imu],
            input_dims: vec![9, 9],
            hidden_dim: 4,
            num_layers: 1,
            bidirectional: true,
            dropout: 0.1,
            history: 2,
            window_len: 4,
            mlp_hidden: vec![5],
            peephole: true,
        };
        let mut m = FusionModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        m.output_scaling = OutputScaling { mean: [4.0, 3.0], std: [2.0, 1.5] };
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_model(&m, Some("abc".into()), &path).unwrap();
        let back = load_model(&path, Some("abc")).unwrap();
        assert_eq!(back.store.flat_values(), m.store.flat_values());
        assert_eq!(back.output_scaling, m.output_scaling);
        assert_eq!(back.config, m.config);
    }

    #[test]
    fn mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model(), Some("abc".into()), &path).unwrap();
        assert!(load_model(&path, Some("xyz")).unwrap_err().to_string().contains("xyz"));

        let mut ck = Checkpoint::from_model(&model(), None);
        ck.params[0].rows += 1;
        let cols = ck.params[0].cols;
        ck.params[0].data.extend(vec![0.0; cols]);
        assert!(ck.into_model().is_err());

        let mut ck = Checkpoint::from_model(&model(), None);
        ck.params[1].name = "bogus".into();
        assert!(ck.into_model().unwrap_err().to_string().contains("bogus"));

        let mut ck = Checkpoint::from_model(&model(), None);
        ck.format_version = 99;
        assert!(ck.into_model().is_err());
    }
}
