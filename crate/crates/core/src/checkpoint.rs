//! JSON checkpoints: configuration, catalog, standardization and named parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::LoadOptions;
use crate::error::{CerdError, Result};
use crate::model::CerdModel;
use crate::tensor::Tensor;
use crate::tokenize::Standardizer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub classes: Vec<String>,
    pub standardizer: Standardizer,
    /// How the training data was loaded, so evaluation reproduces the same split.
    #[serde(default)]
    pub load_options: LoadOptions,
    pub best_epoch: Option<usize>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &CerdModel, classes: &[String], load_options: &LoadOptions, best_epoch: Option<usize>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            modalities: model.catalog.names.clone(),
            dims: model.catalog.dims.clone(),
            classes: classes.to_vec(),
            standardizer: model.standardizer.clone(),
            load_options: load_options.clone(),
            best_epoch,
            params: model
                .store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model architecture from the stored config and loads every parameter.
    pub fn to_model(&self) -> Result<CerdModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CerdError::Compatibility(format!(
                "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut model = CerdModel::new(self.config.clone(), self.modalities.clone(), self.dims.clone(), self.classes.len())?;
        if model.store.len() != self.params.len() {
            return Err(CerdError::Compatibility(format!(
                "checkpoint holds {} parameters, architecture has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| CerdError::Compatibility(format!("unexpected parameter `{}`", p.name)))?;
            if model.store.value(id).shape() != p.shape.as_slice() {
                return Err(CerdError::Compatibility(format!("parameter `{}` has shape {:?}", p.name, p.shape)));
            }
            *model.store.value_mut(id) = Tensor::new(p.shape.clone(), p.data.clone())?;
        }
        model.standardizer = self.standardizer.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| CerdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CerdError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
