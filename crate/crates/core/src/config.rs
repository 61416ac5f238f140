//! The TOML run configuration tying scenario, model, schema and training together.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionNorm;
use crate::backbone::BackboneConfig;
use crate::domain::{CharVocab, EntitySchema};
use crate::error::{Error, Result};
use crate::model::{EatenModel, ModelConfig};
use crate::synthgen::{ScenarioSpec, TransformSpec};
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub attention: usize,
    pub embed: usize,
    #[serde(default)]
    pub attention_norm: AttentionNorm,
    #[serde(default)]
    pub share_attention: bool,
    #[serde(default = "yes")]
    pub state_transition: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn yes() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.08
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds data generation, model initialisation and shuffling.
    pub seed: u64,
    /// Characters the decoders can emit.
    pub alphabet: String,
    pub data: DataSection,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub transform: TransformSpec,
    pub model: ModelSection,
    pub schema: EntitySchema,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn vocab(&self) -> Result<CharVocab> {
        CharVocab::new(&self.alphabet)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_width: self.scenario.width,
            image_height: self.scenario.height,
            backbone: m.backbone.clone(),
            hidden: m.hidden,
            attention: m.attention,
            embed: m.embed,
            attention_norm: m.attention_norm,
            share_attention: m.share_attention,
            state_transition: m.state_transition,
            init_scale: m.init_scale,
            init_seed: self.seed,
        }
    }

    pub fn build_model(&self) -> Result<EatenModel> {
        EatenModel::new(self.model_config(), self.schema.clone(), self.vocab()?)
    }

    /// Checks every cross-field constraint before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data.n_train and data.n_test must be at least 1".into()));
        }
        let vocab = self.vocab()?;
        self.transform.validate()?;
        self.scenario.validate(&self.transform)?;
        self.train.validate()?;
        self.model_config().validate()?;

        let slots: BTreeSet<&str> = self.scenario.entity_names().into_iter().collect();
        let entities: BTreeSet<&str> = self.schema.entity_names().collect();
        if let Some(e) = entities.difference(&slots).next() {
            return Err(Error::Config(format!("schema entity {e:?} has no scenario slot")));
        }
        if let Some(e) = slots.difference(&entities).next() {
            return Err(Error::Config(format!("scenario slot {e:?} is missing from the schema")));
        }
        for slot in &self.scenario.slots {
            if let Some(c) = slot.corpus()?.charset().into_iter().find(|&c| vocab.id(c).is_none()) {
                return Err(Error::Config(format!(
                    "slot {} can produce {c:?}, which is not in the alphabet",
                    slot.entity
                )));
            }
        }
        for (m, d) in self.schema.decoders().iter().enumerate() {
            let mut needed = 0;
            for e in &d.entities {
                let slot = self
                    .scenario
                    .slots
                    .iter()
                    .find(|s| &s.entity == e)
                    .expect("checked above");
                needed += slot.max_len()? + 1;
            }
            if needed > d.max_steps {
                return Err(Error::Capacity {
                    decoder: m,
                    needed,
                    max_steps: d.max_steps,
                });
            }
        }
        Ok(())
    }
}
