use std::fs;
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{self, Layout};
use super::softmax::{argmax, softmax};
use super::train::TrainingHistory;
use super::{Backbone, TrainingConfig};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{self, Preprocessing, Tensor3};
use crate::labelspec::{ClassLabel, LabelSchema, ScoringMethod};

pub const PARAMS_FILE: &str = "params.bin";
pub const METADATA_FILE: &str = "metadata.json";
pub const HISTORY_FILE: &str = "history.csv";

const PARAMS_MAGIC: &[u8; 8] = b"SODKITP1";
const FORMAT_VERSION: u32 = 1;

/// SHA-256 over the little-endian bytes of a parameter slice, hex encoded.
pub fn fingerprint(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Fingerprints {
    pub pretrained_backbone: String,
    pub head_init: String,
    /// Backbone digest after stage 1, i.e. entering stage 2.
    pub backbone_prestage2: Option<String>,
    pub backbone_final: Option<String>,
}

/// Choices the training setup leaves open, recorded alongside every model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNotes {
    pub head_activation: String,
    pub early_stopping_monitor: String,
    pub rotation: String,
    pub epoch_cap: String,
    pub batch_norm: String,
}

impl Default for ModelNotes {
    fn default() -> Self {
        ModelNotes {
            head_activation: "relu".into(),
            early_stopping_monitor: "val_loss on a stratified validation_fraction hold-out of the train split; best weights restored".into(),
            rotation: "uniform in [-rotation_max_degrees, +rotation_max_degrees]".into(),
            epoch_cap: "max_epochs_per_stage applies to each stage separately".into(),
            batch_norm: "backbone has no batch-normalization layers".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub backbone: Backbone,
    pub method: ScoringMethod,
    pub class_order: Vec<ClassLabel>,
    pub config: TrainingConfig,
    pub preprocessing: Preprocessing,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub history: TrainingHistory,
    pub fingerprints: Fingerprints,
    pub notes: ModelNotes,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    backbone: Backbone,
    method: ScoringMethod,
    class_order: Vec<ClassLabel>,
    schema: LabelSchema,
    config: TrainingConfig,
    preprocessing: Preprocessing,
    layout: Layout,
    notes: ModelNotes,
    fingerprints: Fingerprints,
    history: TrainingHistory,
}

impl TrainedModel {
    pub(crate) fn new(config: TrainingConfig, schema: &LabelSchema, layout: Layout, params: Vec<f64>) -> Self {
        let fingerprints = Fingerprints {
            pretrained_backbone: fingerprint(&params[..layout.backbone_len]),
            head_init: fingerprint(&params[layout.backbone_len..]),
            backbone_prestage2: None,
            backbone_final: None,
        };
        TrainedModel {
            backbone: config.backbone,
            method: schema.method,
            class_order: schema.classes.clone(),
            preprocessing: config.preprocessing(),
            config,
            layout,
            params,
            history: TrainingHistory::default(),
            fingerprints,
            notes: ModelNotes::default(),
        }
    }

    pub fn schema(&self) -> &'static LabelSchema {
        self.method.schema()
    }

    pub fn backbone_params(&self) -> &[f64] {
        &self.params[..self.layout.backbone_len]
    }

    pub fn backbone_fingerprint(&self) -> String {
        fingerprint(self.backbone_params())
    }

    pub fn backbone_fingerprint_prestage2(&self) -> Option<&str> {
        self.fingerprints.backbone_prestage2.as_deref()
    }

    pub fn is_trained(&self) -> bool {
        !self.history.epochs.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(16 + self.params.len() * 8);
        bytes.extend_from_slice(PARAMS_MAGIC);
        bytes.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        write_atomic(&dir.join(PARAMS_FILE), &bytes)?;

        let meta = Metadata {
            format_version: FORMAT_VERSION,
            backbone: self.backbone,
            method: self.method,
            class_order: self.class_order.clone(),
            schema: self.schema().clone(),
            config: self.config.clone(),
            preprocessing: self.preprocessing,
            layout: self.layout.clone(),
            notes: self.notes.clone(),
            fingerprints: self.fingerprints.clone(),
            history: self.history.clone(),
        };
        write_atomic(&dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        write_atomic(&dir.join(HISTORY_FILE), &self.history.to_csv()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Metadata = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "model format version {} (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let params_path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let corrupt = |msg: &str| Error::Decode {
            what: params_path.display().to_string(),
            message: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != PARAMS_MAGIC {
            return Err(corrupt("missing parameter-store header"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + count * 8 || count != meta.layout.total_len {
            return Err(corrupt("parameter count does not match layout"));
        }
        let params = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if meta.class_order.len() != meta.layout.num_classes() || meta.class_order != meta.schema.classes {
            return Err(Error::Incompatible("class_order does not match the softmax width".into()));
        }
        Ok(TrainedModel {
            backbone: meta.backbone,
            method: meta.method,
            class_order: meta.class_order,
            config: meta.config,
            preprocessing: meta.preprocessing,
            layout: meta.layout,
            params,
            history: meta.history,
            fingerprints: meta.fingerprints,
            notes: meta.notes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_order: Vec<ClassLabel>,
    pub probabilities: Vec<f64>,
    pub predicted_label: ClassLabel,
    #[serde(skip)]
    pub predicted_index: usize,
}

pub fn predict_tensor(model: &TrainedModel, input: &Tensor3) -> Result<Prediction> {
    let s = model.preprocessing.input_size as usize;
    if input.shape() != (3, s, s) {
        return Err(Error::Validation(format!(
            "input tensor shape {:?} does not match (3, {s}, {s})",
            input.shape()
        )));
    }
    let logits = network::logits(&model.layout, &model.params, input);
    let probabilities = softmax(&logits)?;
    let idx = argmax(&probabilities);
    Ok(Prediction {
        class_order: model.class_order.clone(),
        predicted_label: model.class_order[idx].clone(),
        predicted_index: idx,
        probabilities,
    })
}

/// Resizes, scales and classifies one image. Ties resolve to the lowest class
/// index.
pub fn predict(model: &TrainedModel, image: &RgbImage) -> Result<Prediction> {
    predict_tensor(model, &model.preprocessing.to_tensor(image))
}

impl TrainedModel {
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<Prediction> {
        predict(self, &imaging::decode_rgb(bytes, "upload")?)
    }

    pub fn predict_path(&self, path: &Path) -> Result<Prediction> {
        predict(self, &imaging::load_rgb(path)?)
    }
}

impl TrainingHistory {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e).map_err(|e| Error::Validation(e.to_string()))?;
        }
        let mut out = w
            .into_inner()
            .map_err(|e| Error::Validation(e.to_string()))?;
        if self.epochs.is_empty() {
            out.write_all(b"epoch,stage,train_loss,val_loss,train_acc,val_acc\n")
                .expect("write to Vec");
        }
        Ok(out)
    }
}
