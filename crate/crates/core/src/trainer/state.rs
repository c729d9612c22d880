use std::path::Path;

use serde_json::json;

use crate::checkpoint::{self, sha256_hex};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::noise::{GeneratorPair, Modality, NoiseGenerator};
use crate::trainer::{Mode, TrainConfig};

pub const MODEL_FILE: &str = "model.ckpt";

pub fn generator_file(m: Modality) -> String {
    format!("generator_{}.ckpt", m.name())
}

/// Everything needed to continue a run bit-exactly. Optimizer moments and
/// pending generator gradients live inside the parameter stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: ModelParams,
    pub generators: Option<GeneratorPair>,
    /// Number of generator reinitializations so far.
    pub generation: u64,
}

impl TrainState {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        let model = ModelParams::init(model_config, config.seed)?;
        let generators = (config.mode == Mode::Mango)
            .then(|| GeneratorPair::new(model_config.width, &config.perturbation, config.seed));
        Ok(Self {
            step: 0,
            model,
            generators,
            generation: 0,
        })
    }

    fn model_header(&self, model_config: &ModelConfig) -> serde_json::Value {
        json!({"kind": "model", "step": self.step, "config": model_config})
    }

    fn generator_header(&self, g: &NoiseGenerator) -> serde_json::Value {
        json!({
            "kind": "generator",
            "modality": g.modality,
            "step": self.step,
            "generation": self.generation,
            "lr": g.lr,
            "zero_output": g.zero_output,
        })
    }

    pub fn model_bytes(&self, model_config: &ModelConfig) -> Result<Vec<u8>> {
        checkpoint::encode(&self.model_header(model_config), &self.model.store)
    }

    /// SHA-256 of the encoded model checkpoint.
    pub fn model_hash(&self, model_config: &ModelConfig) -> Result<String> {
        Ok(sha256_hex(&self.model_bytes(model_config)?))
    }

    /// Writes model and generator checkpoints into `dir`; returns the model
    /// checkpoint hash.
    pub fn save(&self, dir: &Path, model_config: &ModelConfig) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = checkpoint::save(
            &dir.join(MODEL_FILE),
            &self.model_header(model_config),
            &self.model.store,
        )?;
        if let Some(g) = &self.generators {
            for gen in [&g.image, &g.text] {
                checkpoint::save(
                    &dir.join(generator_file(gen.modality)),
                    &self.generator_header(gen),
                    &gen.params,
                )?;
            }
        }
        Ok(hash)
    }

    /// Loads a state written by [`TrainState::save`]. Generator files are
    /// read when present.
    pub fn load(dir: &Path, model_config: &ModelConfig) -> Result<Self> {
        let ck = checkpoint::load(&dir.join(MODEL_FILE))?;
        if ck.header["kind"] != "model" {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let stored: ModelConfig = serde_json::from_value(ck.header["config"].clone())?;
        if &stored != model_config {
            return Err(Error::Checkpoint(config_diff(&stored, model_config)));
        }
        let step = ck.header["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let model = ModelParams::from_store(model_config, ck.store)?;
        let mut gens = Vec::new();
        let mut generation = 0;
        for m in [Modality::Image, Modality::Text] {
            let path = dir.join(generator_file(m));
            if !path.exists() {
                continue;
            }
            let g = checkpoint::load(&path)?;
            let h = &g.header;
            generation = h["generation"].as_u64().unwrap_or(0);
            gens.push(NoiseGenerator {
                modality: m,
                width: model_config.width,
                params: g.store,
                lr: h["lr"].as_f64().ok_or_else(|| Error::Checkpoint("missing lr".into()))?,
                zero_output: h["zero_output"].as_bool().unwrap_or(false),
            });
        }
        let generators = match gens.len() {
            0 => None,
            2 => {
                let text = gens.pop().expect("two");
                let image = gens.pop().expect("two");
                Some(GeneratorPair { image, text })
            }
            _ => return Err(Error::Checkpoint("only one generator checkpoint present".into())),
        };
        Ok(Self {
            step,
            model,
            generators,
            generation,
        })
    }
}

/// Human-readable field differences between two model configs.
pub fn config_diff(stored: &ModelConfig, wanted: &ModelConfig) -> String {
    let a = serde_json::to_value(stored).expect("serializable");
    let b = serde_json::to_value(wanted).expect("serializable");
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!("{k}: checkpoint {va} vs expected {}", b[k]));
            }
        }
    }
    format!("model config mismatch ({})", diffs.join(", "))
}
