use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::container::{Container, Tensor};
use crate::corpus::Vocabulary;
use crate::embedding::{FeatureTable, Word2VecConfig};
use crate::lstm::{Dense, LstmLayer, Model, ModelConfig, Params};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

const KIND: &str = "model";

/// Provenance recorded alongside the weights. Contains no timings, so
/// identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub train: Option<TrainConfig>,
    pub embedding: Option<Word2VecConfig>,
    pub epochs_completed: usize,
    pub final_train_loss: Option<f32>,
    pub final_val_loss: Option<f32>,
    /// Users held out from training, sorted.
    pub validation_users: Vec<String>,
}

/// Everything needed to serve predictions from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub features: FeatureTable,
    pub params: Params<f32>,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    model: ModelConfig,
    max_item_id: u32,
    n_items: usize,
    n_outputs: usize,
    training: TrainingMetadata,
}

impl ModelArtifact {
    /// Checks the cross-component invariants.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if cfg.n_outputs != self.vocab.n_outputs() {
            return Err(Error::shape(format!(
                "model has {} outputs but the vocabulary has {} output items",
                cfg.n_outputs,
                self.vocab.n_outputs()
            )));
        }
        if self.features.n_rows() != self.vocab.n_items() {
            return Err(Error::shape(format!(
                "feature table has {} rows for {} items",
                self.features.n_rows(),
                self.vocab.n_items()
            )));
        }
        if self.features.dim() != cfg.feature_dim {
            return Err(Error::shape(format!(
                "feature width {} differs from model input width {}",
                self.features.dim(),
                cfg.feature_dim
            )));
        }
        self.params.check_shapes(cfg)?;
        if !self.params.all_finite() || self.features.rows().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in artifact"));
        }
        Ok(())
    }

    /// Builds a runnable network from the stored weights.
    pub fn model(&self) -> Result<Model<f32>> {
        Model::new(self.config, self.params.clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let cfg = &self.config;
        let meta = ModelMeta {
            model: *cfg,
            max_item_id: self.vocab.max_item_id(),
            n_items: self.vocab.n_items(),
            n_outputs: self.vocab.n_outputs(),
            training: self.metadata.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::invalid(e.to_string()))?;
        let mut c = Container::new(KIND, meta);
        let (n, d) = (self.vocab.n_items(), cfg.feature_dim);
        c.push(Tensor::u32("vocab.items", &[n], self.vocab.full_items().to_vec()))?;
        c.push(Tensor::u32("vocab.outputs", &[cfg.n_outputs], self.vocab.output_items().to_vec()))?;
        c.push(Tensor::f32("features", &[n, d], self.features.rows().to_vec()))?;
        for (name, layer) in [("lstm1", &self.params.layer1), ("lstm2", &self.params.layer2)] {
            let (h, i) = (layer.hidden, layer.input_dim);
            c.push(Tensor::f32(&format!("{name}.w"), &[4 * h, i], layer.w.clone()))?;
            c.push(Tensor::f32(&format!("{name}.u"), &[4 * h, h], layer.u.clone()))?;
            c.push(Tensor::f32(&format!("{name}.b"), &[4 * h], layer.b.clone()))?;
        }
        let out = &self.params.output;
        c.push(Tensor::f32("dense.w", &[out.outputs, out.input_dim], out.w.clone()))?;
        c.push(Tensor::f32("dense.b", &[out.outputs], out.b.clone()))?;
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::Corrupt(format!("expected a model file, found kind {:?}", c.kind)));
        }
        let meta: ModelMeta = serde_json::from_value(std::mem::replace(&mut c.meta, Value::Null))
            .map_err(|e| Error::Corrupt(format!("model metadata: {e}")))?;
        let cfg = meta.model;
        cfg.validate()?;
        if meta.n_outputs != cfg.n_outputs {
            return Err(Error::shape(format!(
                "manifest declares {} outputs but the model config has {}",
                meta.n_outputs, cfg.n_outputs
            )));
        }
        let (n, d) = (meta.n_items, cfg.feature_dim);
        let items = c.take_u32("vocab.items", &[n])?;
        let outputs = c.take_u32("vocab.outputs", &[cfg.n_outputs])?;
        let vocab = Vocabulary::from_parts(items, outputs, meta.max_item_id)?;
        let features = FeatureTable::from_rows(d, c.take_f32("features", &[n, d])?)?;
        let mut layer = |name: &str, input_dim: usize, hidden: usize| -> Result<LstmLayer<f32>> {
            Ok(LstmLayer {
                input_dim,
                hidden,
                w: c.take_f32(&format!("{name}.w"), &[4 * hidden, input_dim])?,
                u: c.take_f32(&format!("{name}.u"), &[4 * hidden, hidden])?,
                b: c.take_f32(&format!("{name}.b"), &[4 * hidden])?,
            })
        };
        let layer1 = layer("lstm1", d, cfg.hidden1)?;
        let layer2 = layer("lstm2", cfg.hidden1, cfg.hidden2)?;
        let output = Dense {
            input_dim: cfg.hidden2,
            outputs: cfg.n_outputs,
            w: c.take_f32("dense.w", &[cfg.n_outputs, cfg.hidden2])?,
            b: c.take_f32("dense.b", &[cfg.n_outputs])?,
        };
        let artifact = ModelArtifact {
            config: cfg,
            vocab,
            features,
            params: Params {
                layer1,
                layer2,
                output,
            },
            metadata: meta.training,
        };
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Human-readable summary: manifest fields and per-tensor norms.
pub fn inspect(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = super::container::read_manifest(&bytes)?;
    let container = Container::from_bytes(&bytes)?;
    let mut out = String::new();
    out.push_str(&format!("kind\t{}\n", manifest.kind));
    out.push_str(&format!("format_version\t{}\n", manifest.format_version));
    out.push_str(&format!(
        "meta\t{}\n",
        serde_json::to_string(&manifest.meta).unwrap_or_default()
    ));
    for (entry, tensor) in manifest.tensors.iter().zip(&container.tensors) {
        out.push_str(&format!(
            "tensor\t{}\t{}\t{:?}\toffset={}\tnorm={:.6}\n",
            entry.name,
            entry.dtype,
            entry.shape,
            entry.offset,
            tensor.norm()
        ));
    }
    Ok(out)
}

/// Shorthand for a metadata object in other container kinds.
pub(crate) fn meta_object<T: Serialize>(value: &T) -> Result<Value> {
    serde_json::to_value(value).map_err(|e| Error::invalid(e.to_string()))
}
