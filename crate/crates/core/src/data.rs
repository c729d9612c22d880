//! Examples in model-ready form and minibatch collation.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{EmbeddingBatch, ModelConfig, CLS_ID, PAD_ID};

/// One question about one scene, already tokenized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Stable identity used to key per-example random streams.
    pub key: u64,
    /// Region features, one row of `region_dim` values per object.
    pub regions: Vec<Vec<f64>>,
    /// Token ids beginning with `[CLS]`.
    pub token_ids: Vec<usize>,
    /// Soft target per answer.
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn keys(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.key).collect()
    }
}

/// Pads a set of examples to the batch-local maximum region and token
/// counts. A batch whose every label row is all zero is rejected.
pub fn collate(examples: &[&Example], config: &ModelConfig) -> Result<EmbeddingBatch> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    }
    let b = examples.len();
    let k = examples.iter().map(|e| e.regions.len()).max().unwrap_or(0).max(1);
    let l = examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
    if k > config.max_regions || l > config.max_tokens {
        return Err(Error::Contract(format!(
            "example exceeds model limits (regions {k}, tokens {l})"
        )));
    }
    let dv = config.region_dim;
    let a = config.answers;
    let mut regions = vec![0.0; b * k * dv];
    let mut region_mask = vec![false; b * k];
    let mut token_ids = vec![PAD_ID; b * l];
    let mut token_mask = vec![false; b * l];
    let mut labels = Vec::with_capacity(b * a);
    for (i, ex) in examples.iter().enumerate() {
        if ex.token_ids.first() != Some(&CLS_ID) {
            return Err(Error::Contract(format!("example {} does not start with [CLS]", ex.key)));
        }
        if ex.labels.len() != a {
            return Err(Error::dim("collate labels", &[ex.labels.len()], &[a]));
        }
        for (r, feat) in ex.regions.iter().enumerate() {
            if feat.len() != dv {
                return Err(Error::dim("collate regions", &[feat.len()], &[dv]));
            }
            regions[(i * k + r) * dv..][..dv].copy_from_slice(feat);
            region_mask[i * k + r] = true;
        }
        for (t, &id) in ex.token_ids.iter().enumerate() {
            token_ids[i * l + t] = id;
            token_mask[i * l + t] = true;
        }
        labels.extend_from_slice(&ex.labels);
    }
    if labels.iter().all(|v| *v == 0.0) {
        return Err(Error::Contract("every label row in the batch is zero".into()));
    }
    Ok(EmbeddingBatch {
        batch: b,
        regions_per: k,
        tokens_per: l,
        regions: Tensor::new(&[b, k, dv], regions)?,
        region_mask,
        token_ids,
        token_mask,
        labels: Tensor::new(&[b, a], labels)?,
    })
}
