//! Single-stream multimodal transformer.
//!
//! The text sequence (with `[CLS]` at position 0) and the region sequence are
//! concatenated per example as `[text ; regions]` and run through a pre-norm
//! transformer. `z_cls` is the encoder output at text position 0 and feeds a
//! two-layer answer head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Init, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const MASK_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of raw region features (`d_v`).
    pub region_dim: usize,
    /// Model width `d`, also the token embedding width.
    pub width: usize,
    pub max_regions: usize,
    pub max_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub answers: usize,
    pub vocab: usize,
    /// Add a learned per-slot embedding to regions. Disabling it makes the
    /// encoder equivariant to region order.
    pub region_positions: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            region_dim: 12,
            width: 32,
            max_regions: 6,
            max_tokens: 24,
            layers: 2,
            heads: 4,
            ffn_width: 64,
            answers: 19,
            vocab: 64,
            region_positions: true,
            init_std: 0.02,
            ln_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_regions == 0 || self.max_tokens == 0 {
            return Err(Error::Config("max_regions and max_tokens must be >= 1".into()));
        }
        if self.vocab <= MASK_ID {
            return Err(Error::Config(format!(
                "vocab {} too small for reserved ids",
                self.vocab
            )));
        }
        if self.width < 2 || self.answers == 0 || self.region_dim == 0 || self.ffn_width == 0 {
            return Err(Error::Config("degenerate model widths".into()));
        }
        Ok(())
    }
}

/// One padded minibatch as the model consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub batch: usize,
    /// Region slots per example (`K`).
    pub regions_per: usize,
    /// Token slots per example (`L`).
    pub tokens_per: usize,
    /// Raw region features, `[B, K, d_v]`; padded slots are zero.
    pub regions: Tensor,
    pub region_mask: Vec<bool>,
    pub token_ids: Vec<usize>,
    pub token_mask: Vec<bool>,
    /// Soft answer targets in `[0, 1]`, `[B, A]`.
    pub labels: Tensor,
}

impl EmbeddingBatch {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (b, k, l) = (self.batch, self.regions_per, self.tokens_per);
        if self.regions.shape() != [b, k, config.region_dim] {
            return Err(Error::dim(
                "regions",
                self.regions.shape(),
                &[b, k, config.region_dim],
            ));
        }
        if self.labels.shape() != [b, config.answers] {
            return Err(Error::dim("labels", self.labels.shape(), &[b, config.answers]));
        }
        if self.region_mask.len() != b * k || self.token_ids.len() != b * l || self.token_mask.len() != b * l {
            return Err(Error::Contract("mask/id lengths disagree with batch dims".into()));
        }
        if k > config.max_regions || l > config.max_tokens {
            return Err(Error::Contract(format!(
                "batch dims K={k} L={l} exceed model limits"
            )));
        }
        if let Some(id) = self.token_ids.iter().find(|&&id| id >= config.vocab) {
            return Err(Error::Domain(format!("token id {id} >= vocab {}", config.vocab)));
        }
        for e in 0..b {
            if !self.token_mask[e * l] || self.token_ids[e * l] != CLS_ID {
                return Err(Error::Contract(format!("example {e} does not start with [CLS]")));
            }
        }
        Ok(())
    }

    pub fn region_factors(&self) -> Vec<f64> {
        self.region_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn token_factors(&self) -> Vec<f64> {
        self.token_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Sub-batch of examples `range`, with the same padded dims.
    pub fn slice(&self, range: std::ops::Range<usize>) -> EmbeddingBatch {
        let (k, l) = (self.regions_per, self.tokens_per);
        let dv = self.regions.cols();
        let a = self.labels.cols();
        let n = range.len();
        EmbeddingBatch {
            batch: n,
            regions_per: k,
            tokens_per: l,
            regions: Tensor::new(
                &[n, k, dv],
                self.regions.data()[range.start * k * dv..range.end * k * dv].to_vec(),
            )
            .expect("shape"),
            region_mask: self.region_mask[range.start * k..range.end * k].to_vec(),
            token_ids: self.token_ids[range.start * l..range.end * l].to_vec(),
            token_mask: self.token_mask[range.start * l..range.end * l].to_vec(),
            labels: Tensor::new(
                &[n, a],
                self.labels.data()[range.start * a..range.end * a].to_vec(),
            )
            .expect("shape"),
        }
    }
}

/// Encoder outputs for a batch, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    /// `[B*K, d]`
    pub z_v: Var,
    /// `[B*L, d]`
    pub z_w: Var,
    /// `[B, d]`
    pub z_cls: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    tok_emb: usize,
    txt_pos: usize,
    reg_w: usize,
    reg_b: usize,
    reg_pos: usize,
    layers: Vec<LayerIdx>,
    head_w1: usize,
    head_b1: usize,
    head_ln_g: usize,
    head_ln_b: usize,
    head_w2: usize,
    head_b2: usize,
}

/// All trainable parameters of the transformer and its answer head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    layout: Layout,
}

impl ModelParams {
    /// Seeded initialization: truncated normal (std `init_std`) for embedding
    /// tables and weight matrices, zeros for biases and norm offsets, ones
    /// for norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, &[0]);
        let w = Init::TruncatedNormal(config.init_std);
        let d = config.width;
        let mut store = ParamStore::new();
        let mut reg = |name: String, shape: &[usize], init: Init| -> Result<usize> {
            store.register(name, init.sample(shape, &mut rng))
        };
        let tok_emb = reg("embed.token".into(), &[config.vocab, d], w)?;
        let txt_pos = reg("embed.text_position".into(), &[config.max_tokens, d], w)?;
        let reg_w = reg("embed.region_proj.w".into(), &[config.region_dim, d], w)?;
        let reg_b = reg("embed.region_proj.b".into(), &[d], Init::Zeros)?;
        let reg_pos = reg("embed.region_position".into(), &[config.max_regions, d], w)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = |s: &str| format!("layer{i}.{s}");
            let f = config.ffn_width;
            layers.push(LayerIdx {
                ln1_g: reg(p("ln1.g"), &[d], Init::Ones)?,
                ln1_b: reg(p("ln1.b"), &[d], Init::Zeros)?,
                wq: reg(p("attn.wq"), &[d, d], w)?,
                bq: reg(p("attn.bq"), &[d], Init::Zeros)?,
                wk: reg(p("attn.wk"), &[d, d], w)?,
                bk: reg(p("attn.bk"), &[d], Init::Zeros)?,
                wv: reg(p("attn.wv"), &[d, d], w)?,
                bv: reg(p("attn.bv"), &[d], Init::Zeros)?,
                wo: reg(p("attn.wo"), &[d, d], w)?,
                bo: reg(p("attn.bo"), &[d], Init::Zeros)?,
                ln2_g: reg(p("ln2.g"), &[d], Init::Ones)?,
                ln2_b: reg(p("ln2.b"), &[d], Init::Zeros)?,
                w1: reg(p("ffn.w1"), &[d, f], w)?,
                b1: reg(p("ffn.b1"), &[f], Init::Zeros)?,
                w2: reg(p("ffn.w2"), &[f, d], w)?,
                b2: reg(p("ffn.b2"), &[d], Init::Zeros)?,
            });
        }
        let h = 2 * d;
        let head_w1 = reg("head.w1".into(), &[d, h], w)?;
        let head_b1 = reg("head.b1".into(), &[h], Init::Zeros)?;
        let head_ln_g = reg("head.ln.g".into(), &[h], Init::Ones)?;
        let head_ln_b = reg("head.ln.b".into(), &[h], Init::Zeros)?;
        let head_w2 = reg("head.w2".into(), &[h, config.answers], w)?;
        let head_b2 = reg("head.b2".into(), &[config.answers], Init::Zeros)?;
        Ok(Self {
            store,
            layout: Layout {
                tok_emb,
                txt_pos,
                reg_w,
                reg_b,
                reg_pos,
                layers,
                head_w1,
                head_b1,
                head_ln_g,
                head_ln_b,
                head_w2,
                head_b2,
            },
        })
    }

    /// Rebuilds parameters for `config` from a loaded store, checking that
    /// every name and shape matches a fresh initialization.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (a, b) in fresh.store.iter().zip(store.iter()) {
            if a.name != b.name || a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.shape(),
                    b.name,
                    b.shape()
                )));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }
}

/// Region and token embeddings, `[B*K, d]` and `[B*L, d]`. This is the
/// surface perturbations are added to.
pub fn build_embeddings(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    bound: &Bound,
    batch: &EmbeddingBatch,
) -> Result<(Var, Var)> {
    batch.validate(config)?;
    let ly = &params.layout;
    let (b, k, l) = (batch.batch, batch.regions_per, batch.tokens_per);

    let tok = tape.gather_rows(bound.var(ly.tok_emb), &batch.token_ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = tape.gather_rows(bound.var(ly.txt_pos), &positions)?;
    let w = tape.add(tok, pos)?;
    let w = tape.scale_rows(w, &batch.token_factors())?;

    let raw = tape.constant(
        batch
            .regions
            .clone()
            .reshape(&[b * k, config.region_dim])?,
    );
    let mut v = tape.linear(raw, bound.var(ly.reg_w), bound.var(ly.reg_b))?;
    if config.region_positions {
        let slots: Vec<usize> = (0..b).flat_map(|_| 0..k).collect();
        let rp = tape.gather_rows(bound.var(ly.reg_pos), &slots)?;
        v = tape.add(v, rp)?;
    }
    let v = tape.scale_rows(v, &batch.region_factors())?;
    Ok((v, w))
}

/// Runs the transformer over `[text ; regions]` for every example.
pub fn encode_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    bound: &Bound,
    v_embed: Var,
    w_embed: Var,
    batch: &EmbeddingBatch,
) -> Result<EncodedBatch> {
    let (b, k, l) = (batch.batch, batch.regions_per, batch.tokens_per);
    let s = l + k;
    let d = config.width;
    if tape.shape(v_embed) != [b * k, d] || tape.shape(w_embed) != [b * l, d] {
        return Err(Error::dim("encode_forward", tape.shape(v_embed), tape.shape(w_embed)));
    }
    let stacked = tape.concat_rows(w_embed, v_embed)?;
    let mut order = Vec::with_capacity(b * s);
    let mut key_mask = Vec::with_capacity(b * s);
    for e in 0..b {
        for t in 0..l {
            order.push(e * l + t);
            key_mask.push(batch.token_mask[e * l + t]);
        }
        for r in 0..k {
            order.push(b * l + e * k + r);
            key_mask.push(batch.region_mask[e * k + r]);
        }
    }
    let mut x = tape.gather_rows(stacked, &order)?;

    for ly in &params.layout.layers {
        let h = tape.layer_norm_rows(x, bound.var(ly.ln1_g), bound.var(ly.ln1_b), config.ln_eps)?;
        let q = tape.linear(h, bound.var(ly.wq), bound.var(ly.bq))?;
        let kk = tape.linear(h, bound.var(ly.wk), bound.var(ly.bk))?;
        let vv = tape.linear(h, bound.var(ly.wv), bound.var(ly.bv))?;
        let a = tape.attention(q, kk, vv, &key_mask, b, s, config.heads)?;
        let o = tape.linear(a, bound.var(ly.wo), bound.var(ly.bo))?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm_rows(x, bound.var(ly.ln2_g), bound.var(ly.ln2_b), config.ln_eps)?;
        let f = tape.linear(h, bound.var(ly.w1), bound.var(ly.b1))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, bound.var(ly.w2), bound.var(ly.b2))?;
        x = tape.add(x, f)?;
    }

    let text_rows: Vec<usize> = (0..b).flat_map(|e| (0..l).map(move |t| e * s + t)).collect();
    let region_rows: Vec<usize> = (0..b)
        .flat_map(|e| (0..k).map(move |r| e * s + l + r))
        .collect();
    let cls_rows: Vec<usize> = (0..b).map(|e| e * s).collect();
    Ok(EncodedBatch {
        z_w: tape.gather_rows(x, &text_rows)?,
        z_v: tape.gather_rows(x, &region_rows)?,
        z_cls: tape.gather_rows(x, &cls_rows)?,
    })
}

/// Two-layer head on `z_cls`: linear, GELU, layer norm, linear. No output
/// activation.
pub fn answer_logits(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    bound: &Bound,
    encoded: &EncodedBatch,
) -> Result<Var> {
    let ly = &params.layout;
    let h = tape.linear(encoded.z_cls, bound.var(ly.head_w1), bound.var(ly.head_b1))?;
    let h = tape.gelu(h);
    let h = tape.layer_norm_rows(h, bound.var(ly.head_ln_g), bound.var(ly.head_ln_b), config.ln_eps)?;
    tape.linear(h, bound.var(ly.head_w2), bound.var(ly.head_b2))
}

/// Convenience: embeddings, encoder and head in one call.
pub fn forward_logits(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ModelParams,
    bound: &Bound,
    batch: &EmbeddingBatch,
) -> Result<Var> {
    let (v, w) = build_embeddings(tape, config, params, bound, batch)?;
    let enc = encode_forward(tape, config, params, bound, v, w, batch)?;
    answer_logits(tape, config, params, bound, &enc)
}

/// Index of the largest logit per row; ties go to the smallest index.
pub fn predict_answer(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inference-only logits (no gradients recorded).
pub fn infer_logits(config: &ModelConfig, params: &ModelParams, batch: &EmbeddingBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.store.bind_frozen(&mut tape);
    let logits = forward_logits(&mut tape, config, params, &bound, batch)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            region_dim: 5,
            width: 8,
            max_regions: 3,
            max_tokens: 5,
            layers: 1,
            heads: 2,
            ffn_width: 12,
            answers: 4,
            vocab: 10,
            region_positions: true,
            init_std: 0.5,
            ln_eps: 1e-12,
        }
    }

    pub(crate) fn tiny_batch(b: usize) -> EmbeddingBatch {
        let (k, l) = (3, 5);
        let mut regions = Vec::new();
        for i in 0..b * k * 5 {
            regions.push(((i * 37 % 11) as f64 - 5.0) / 5.0);
        }
        let mut region_mask = vec![true; b * k];
        region_mask[k - 1] = false;
        for v in &mut regions[(k - 1) * 5..k * 5] {
            *v = 0.0;
        }
        let mut token_ids = Vec::new();
        let mut token_mask = Vec::new();
        for e in 0..b {
            let valid = 3 + e % 3;
            for t in 0..l {
                if t == 0 {
                    token_ids.push(CLS_ID);
                    token_mask.push(true);
                } else if t < valid {
                    token_ids.push(3 + (e + t) % 7);
                    token_mask.push(true);
                } else {
                    token_ids.push(PAD_ID);
                    token_mask.push(false);
                }
            }
        }
        let mut labels = vec![0.0; b * 4];
        for e in 0..b {
            labels[e * 4 + e % 4] = 1.0;
        }
        EmbeddingBatch {
            batch: b,
            regions_per: k,
            tokens_per: l,
            regions: Tensor::new(&[b, k, 5], regions).unwrap(),
            region_mask,
            token_ids,
            token_mask,
            labels: Tensor::new(&[b, 4], labels).unwrap(),
        }
    }

    #[test]
    fn embedding_shapes_and_masking() {
        let cfg = ModelConfig {
            width: 8,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg, 1).unwrap();
        let batch = tiny_batch(2);
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        let (v, w) = build_embeddings(&mut tape, &cfg, &params, &bound, &batch).unwrap();
        assert_eq!(tape.shape(v), &[6, 8]);
        assert_eq!(tape.shape(w), &[10, 8]);
        // example 0 has 3 valid tokens; slots 3 and 4 are padding
        let wv = tape.value(w);
        assert!(wv.row(3).iter().chain(wv.row(4)).all(|x| *x == 0.0));
        assert!(tape.value(v).row(2).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn same_id_differs_only_by_position() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut batch = tiny_batch(1);
        batch.token_ids = vec![CLS_ID, 4, 4, PAD_ID, PAD_ID];
        batch.token_mask = vec![true, true, true, false, false];
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        let (_, w) = build_embeddings(&mut tape, &cfg, &params, &bound, &batch).unwrap();
        let pos = params.store.by_name("embed.text_position").unwrap();
        let wv = tape.value(w);
        for j in 0..8 {
            let lhs = wv.row(1)[j] - wv.row(2)[j];
            let rhs = pos.tensor.row(1)[j] - pos.tensor.row(2)[j];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_token_is_domain_error() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let mut batch = tiny_batch(1);
        batch.token_ids[1] = 10;
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        assert!(matches!(
            build_embeddings(&mut tape, &cfg, &params, &bound, &batch),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_layer_encoder_is_identity() {
        let cfg = ModelConfig {
            layers: 0,
            ..tiny_config()
        };
        let params = ModelParams::init(&cfg, 3).unwrap();
        let batch = tiny_batch(2);
        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        let (v, w) = build_embeddings(&mut tape, &cfg, &params, &bound, &batch).unwrap();
        let enc = encode_forward(&mut tape, &cfg, &params, &bound, v, w, &batch).unwrap();
        assert_eq!(tape.value(enc.z_v), tape.value(v));
        assert_eq!(tape.value(enc.z_w), tape.value(w));
        assert_eq!(tape.value(enc.z_cls).row(1), tape.value(w).row(5));
    }

    #[test]
    fn logits_shape_and_zero_head() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let batch = tiny_batch(3);
        let logits = infer_logits(&cfg, &params, &batch).unwrap();
        assert_eq!(logits.shape(), &[3, 4]);

        let mut tape = Tape::new();
        let bound = params.store.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(&[2, 8]));
        let enc = EncodedBatch {
            z_v: z,
            z_w: z,
            z_cls: z,
        };
        let y = answer_logits(&mut tape, &cfg, &params, &bound, &enc).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn predictions_use_argmax_with_low_index_ties() {
        let t = Tensor::from_rows(&[&[0.1, 0.9, 0.3], &[0.5, 0.5, 0.5], &[1.1, 1.9, 1.3]]);
        assert_eq!(predict_answer(&t), vec![1, 0, 1]);
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = tiny_config();
        let a = ModelParams::init(&cfg, 9).unwrap();
        let b = ModelParams::init(&cfg, 9).unwrap();
        let c = ModelParams::init(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store.flat_values(), c.store.flat_values());
    }
}
