//! Run configuration, its content hash, and parameter checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::scene::SceneConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub output: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        if self.scene.objects > self.model.head.queries {
            return Err(Error::Config(format!(
                "{} objects exceed {} object queries",
                self.scene.objects, self.model.head.queries
            )));
        }
        if !(self.training.lr.is_finite() && self.training.lr >= 0.0) {
            return Err(Error::Config("training lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_owned(),
            params: store.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect(),
        }
    }

    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let values: Vec<(String, Tensor<T>)> = self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        store.load_named(&values)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
