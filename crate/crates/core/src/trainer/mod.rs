//! Classification network construction, augmentation and two-step transfer
//! learning (frozen backbone first, then end-to-end fine-tuning).

mod augment;
mod model;
pub mod network;
mod softmax;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{PixelScaling, Preprocessing, ResizeFilter};
use crate::labelspec::LabelSchema;

pub use augment::{augment, AugmentParams, AugmentationConfig};
pub use model::{
    fingerprint, predict, predict_tensor, Fingerprints, ModelNotes, Prediction, TrainedModel,
    METADATA_FILE, PARAMS_FILE, HISTORY_FILE,
};
pub use softmax::{argmax, softmax};
pub use train::{train_two_step, EpochRecord, StageSummary, TrainingHistory};

use network::{ConvSpec, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    InceptionV3,
    Xception,
    /// Small randomly initialised conv stack taking 64x64 inputs.
    TinyTest,
}

impl Backbone {
    pub fn id(self) -> &'static str {
        match self {
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Xception => "xception",
            Backbone::TinyTest => "tiny_test",
        }
    }

    pub fn input_size(self) -> u32 {
        match self {
            Backbone::InceptionV3 | Backbone::Xception => 299,
            Backbone::TinyTest => 64,
        }
    }

    pub fn pixel_scaling(self) -> PixelScaling {
        PixelScaling::MinusOneToOne
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "inception_v3" | "inceptionv3" => Ok(Backbone::InceptionV3),
            "xception" => Ok(Backbone::Xception),
            "tiny_test" => Ok(Backbone::TinyTest),
            other => Err(Error::InvalidConfig(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Seed of the fixed "pretrained" tiny_test backbone weights. Independent of
/// the run seed so every run starts from the same backbone.
const TINY_TEST_BACKBONE_SEED: u64 = 0x51D_BACC;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub backbone: Backbone,
    pub input_size: u32,
    pub batch_size: usize,
    pub max_epochs_per_stage: usize,
    pub early_stop_patience: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub dropout_rate: f64,
    pub head_widths: Vec<usize>,
    pub augmentation: AugmentationConfig,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            backbone: Backbone::InceptionV3,
            input_size: 299,
            batch_size: 32,
            max_epochs_per_stage: 200,
            early_stop_patience: 20,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            dropout_rate: 0.3,
            head_widths: vec![128, 64],
            augmentation: AugmentationConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// Defaults with the backbone's native input size.
    pub fn for_backbone(backbone: Backbone) -> Self {
        TrainingConfig {
            backbone,
            input_size: backbone.input_size(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return bad(format!("dropout_rate {} must lie in (0, 1)", self.dropout_rate));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0 && self.lr_stage2 < self.lr_stage1) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_stage2 ({}) < lr_stage1 ({})",
                self.lr_stage2, self.lr_stage1
            ));
        }
        if self.input_size != self.backbone.input_size() {
            return bad(format!(
                "backbone {} requires input_size {}, got {}",
                self.backbone,
                self.backbone.input_size(),
                self.input_size
            ));
        }
        if self.batch_size == 0 || self.max_epochs_per_stage == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs_per_stage and early_stop_patience must be positive".into());
        }
        if self.head_widths.is_empty() || self.head_widths.contains(&0) {
            return bad("head_widths must be non-empty and positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction {} must lie in (0, 1)",
                self.validation_fraction
            ));
        }
        let r = self.augmentation.rotation_max_degrees;
        if !(0.0..=180.0).contains(&r) {
            return bad(format!("rotation_max_degrees {r} must lie in [0, 180]"));
        }
        Ok(())
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            input_size: self.input_size,
            resize: ResizeFilter::Bilinear,
            scaling: self.backbone.pixel_scaling(),
        }
    }
}

fn backbone_convs(backbone: Backbone) -> Result<Vec<ConvSpec>> {
    match backbone {
        Backbone::TinyTest => Ok(vec![
            ConvSpec::new(3, 8, 2),
            ConvSpec::new(8, 16, 2),
            ConvSpec::new(16, 32, 2),
        ]),
        Backbone::InceptionV3 | Backbone::Xception => Err(Error::Acquisition {
            backbone: backbone.id().to_string(),
            hint: format!(
                "ImageNet-pretrained {backbone} weights are not bundled and cannot be downloaded \
                 by this build; use `--backbone tiny_test` for local runs, or train {backbone} in \
                 a framework that ships its pretrained weights"
            ),
        }),
    }
}

/// Builds an untrained model: backbone, then global average pooling, dropout,
/// ReLU dense layers of `head_widths`, and a softmax layer sized to the schema.
pub fn build_model(config: &TrainingConfig, schema: &LabelSchema) -> Result<TrainedModel> {
    config.validate()?;
    let convs = backbone_convs(config.backbone)?;
    let layout = Layout::new(
        config.input_size as usize,
        &convs,
        &config.head_widths,
        schema.num_classes(),
        config.dropout_rate,
    );
    let mut params = vec![0.0; layout.total_len];
    network::init_backbone(&layout, &mut params, TINY_TEST_BACKBONE_SEED);
    network::init_head(&layout, &mut params, config.seed);
    Ok(TrainedModel::new(config.clone(), schema, layout, params))
}
