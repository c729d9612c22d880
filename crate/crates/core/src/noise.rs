//! Embedding perturbations: Gaussian augmentation, learned noise generators
//! with sphere projection, the adversary objective, and random masking.
//!
//! Every random draw is keyed per example (`keys`) so results do not depend on
//! the order of examples inside a batch.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Init, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    answer_logits, encode_forward, EmbeddingBatch, ModelConfig, ModelParams, MASK_ID, PAD_ID,
};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub epsilon: f64,
    pub sigma: f64,
    pub gaussian_fraction: f64,
    /// Modality that receives Gaussian noise in gaussian mode.
    pub gaussian_modality: Modality,
    pub beta: f64,
    /// Outer steps per generator update.
    pub update_interval: usize,
    /// Outer steps between generator reinitializations.
    pub retrain_interval: usize,
    pub retrain_lr: f64,
    pub generator_lr: f64,
    pub perturb_image: bool,
    pub perturb_text: bool,
    /// Start generators with a zero output layer.
    pub zero_init_output: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            sigma: 0.5,
            gaussian_fraction: 0.5,
            gaussian_modality: Modality::Image,
            beta: 1.0,
            update_interval: 20,
            retrain_interval: 400,
            retrain_lr: 1e-4,
            generator_lr: 1e-5,
            perturb_image: true,
            perturb_text: true,
            zero_init_output: false,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.gaussian_fraction) {
            return Err(Error::Config("gaussian_fraction must be in [0, 1]".into()));
        }
        if self.update_interval == 0 {
            return Err(Error::Config("update_interval must be >= 1".into()));
        }
        if self.retrain_interval < self.update_interval {
            return Err(Error::Config(format!(
                "retrain_interval {} < update_interval {}",
                self.retrain_interval, self.update_interval
            )));
        }
        if !(self.beta >= 0.0) || self.retrain_lr < 0.0 || self.generator_lr < 0.0 {
            return Err(Error::Config("beta and generator learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub p_mask_img: f64,
    pub p_mask_txt: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p_mask_img: 0.15,
            p_mask_txt: 0.15,
        }
    }
}

impl MaskingConfig {
    pub fn off() -> Self {
        Self {
            p_mask_img: 0.0,
            p_mask_txt: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, p) in [("p_mask_img", self.p_mask_img), ("p_mask_txt", self.p_mask_txt)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// I.i.d. `N(0, sigma^2)` samples.
pub fn sample_gaussian<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect();
    Tensor::new(shape, data)
}

/// Rescales each trailing-dimension vector to norm `epsilon` (zero vectors
/// are returned unchanged).
pub fn project_to_sphere(delta: &Tensor, epsilon: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(delta.clone());
    let y = tape.project_rows_to_sphere(x, epsilon)?;
    Ok(tape.value(y).clone())
}

/// Per-row factors for `[B*S, d]` embeddings: 1 on valid slots, 0 on padding.
fn mask_factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Outcome of Gaussian augmentation on one batch.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    /// Which examples were selected.
    pub selected: Vec<bool>,
    /// Additive noise for the designated modality, `[B*S, d]`; `None` when no
    /// example was perturbed or `sigma == 0`.
    pub noise: Option<Tensor>,
}

/// Draws Gaussian augmentation noise for the designated modality. Each
/// example flips its own seeded coin with probability `gaussian_fraction`.
pub fn gaussian_noise_for_batch(
    batch: &EmbeddingBatch,
    width: usize,
    config: &PerturbationConfig,
    seed: u64,
    step: u64,
    keys: &[u64],
) -> Result<GaussianNoise> {
    if keys.len() != batch.batch {
        return Err(Error::Contract("one key per example required".into()));
    }
    let (slots, mask) = match config.gaussian_modality {
        Modality::Image => (batch.regions_per, &batch.region_mask),
        Modality::Text => (batch.tokens_per, &batch.token_mask),
    };
    let mut selected = Vec::with_capacity(batch.batch);
    let mut data = vec![0.0; batch.batch * slots * width];
    for (e, &key) in keys.iter().enumerate() {
        let mut rng = stream(seed, Purpose::Gaussian, &[step, key]);
        let pick = rng.random::<f64>() < config.gaussian_fraction;
        selected.push(pick);
        if !pick {
            continue;
        }
        let z = sample_gaussian(&[slots, width], config.sigma, &mut rng)?;
        for s in 0..slots {
            if mask[e * slots + s] {
                data[(e * slots + s) * width..][..width].copy_from_slice(z.row(s));
            }
        }
    }
    let any = selected.iter().any(|&s| s);
    let noise = if any && config.sigma > 0.0 {
        Some(Tensor::new(&[batch.batch * slots, width], data)?)
    } else {
        None
    };
    Ok(GaussianNoise { selected, noise })
}

/// Tensor-level Gaussian augmentation of `(v_embed, w_embed)`.
pub fn gaussian_perturb_batch(
    v_embed: &Tensor,
    w_embed: &Tensor,
    batch: &EmbeddingBatch,
    config: &PerturbationConfig,
    seed: u64,
    step: u64,
    keys: &[u64],
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    let width = v_embed.cols();
    let g = gaussian_noise_for_batch(batch, width, config, seed, step, keys)?;
    let mut v = v_embed.clone();
    let mut w = w_embed.clone();
    if let Some(n) = g.noise {
        let target = match config.gaussian_modality {
            Modality::Image => &mut v,
            Modality::Text => &mut w,
        };
        if target.shape() != n.shape() {
            return Err(Error::dim("gaussian_perturb_batch", target.shape(), n.shape()));
        }
        for (a, b) in target.data_mut().iter_mut().zip(n.data()) {
            *a += b;
        }
    }
    Ok((v, w, g.selected))
}

/// Index of generator parameters inside its store.
const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

/// Per-position map `R^d -> R^d`: affine, GELU, affine.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGenerator {
    pub modality: Modality,
    pub width: usize,
    pub params: ParamStore,
    /// Current ascent learning rate.
    pub lr: f64,
    pub zero_output: bool,
}

impl NoiseGenerator {
    pub fn new(modality: Modality, width: usize, lr: f64, zero_output: bool, seed: u64) -> Self {
        let params = Self::draw(modality, width, zero_output, seed, 0);
        Self {
            modality,
            width,
            params,
            lr,
            zero_output,
        }
    }

    /// Weights are truncated normal with std `1/sqrt(width)`; biases zero.
    fn draw(modality: Modality, width: usize, zero_output: bool, seed: u64, generation: u64) -> ParamStore {
        let mut rng = stream(seed, Purpose::Generator, &[modality.tag(), generation]);
        let w = Init::TruncatedNormal(1.0 / (width as f64).sqrt());
        let out = if zero_output { Init::Zeros } else { w };
        let p = |s: &str| format!("gen.{}.{s}", modality.name());
        let mut store = ParamStore::new();
        store.register(p("w1"), w.sample(&[width, width], &mut rng)).expect("unique");
        store.register(p("b1"), Tensor::zeros(&[width])).expect("unique");
        store.register(p("w2"), out.sample(&[width, width], &mut rng)).expect("unique");
        store.register(p("b2"), Tensor::zeros(&[width])).expect("unique");
        store
    }

    /// Fresh parameters for reinitialization number `generation`, zeroed
    /// optimizer state, and learning rate switched to `retrain_lr`.
    pub fn reinit(&mut self, seed: u64, generation: u64, retrain_lr: f64) {
        self.params = Self::draw(self.modality, self.width, self.zero_output, seed, generation);
        self.lr = retrain_lr;
    }

    /// Records `project(g(alpha), epsilon)` on the tape, with rows zeroed where
    /// `valid` is false.
    pub fn perturb(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        alpha: &Tensor,
        epsilon: f64,
        valid: &[bool],
    ) -> Result<Var> {
        if alpha.cols() != self.width {
            return Err(Error::dim("generate_adversarial", alpha.shape(), &[self.width]));
        }
        let a = tape.constant(alpha.clone());
        let h = tape.linear(a, bound.var(W1), bound.var(B1))?;
        let h = tape.gelu(h);
        let raw = tape.linear(h, bound.var(W2), bound.var(B2))?;
        let d = tape.project_rows_to_sphere(raw, epsilon)?;
        if valid.iter().all(|&v| v) {
            Ok(d)
        } else {
            tape.scale_rows(d, &mask_factors(valid))
        }
    }
}

/// Gaussian inputs `alpha` for `slots` positions of every example, keyed per
/// example.
pub fn sample_alpha(
    modality: Modality,
    slots: usize,
    width: usize,
    seed: u64,
    step: u64,
    keys: &[u64],
) -> Tensor {
    let mut data = Vec::with_capacity(keys.len() * slots * width);
    for &key in keys {
        let mut rng = stream(seed, Purpose::Noise, &[step, key, modality.tag()]);
        for _ in 0..slots * width {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(z);
        }
    }
    Tensor::new(&[keys.len() * slots, width], data).expect("shape")
}

/// Standalone generation: `project(g(alpha), epsilon)` with `alpha ~ N(0, I)`.
pub fn generate_adversarial<R: Rng + ?Sized>(
    generator: &NoiseGenerator,
    shape: &[usize],
    epsilon: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let width = *shape.last().ok_or_else(|| Error::Contract("empty shape".into()))?;
    if width != generator.width {
        return Err(Error::dim("generate_adversarial", shape, &[generator.width]));
    }
    let alpha = sample_gaussian(shape, 1.0, rng)?.reshape(&[shape.iter().product::<usize>() / width, width])?;
    let mut tape = Tape::new();
    let bound = generator.params.bind_frozen(&mut tape);
    let rows = alpha.rows();
    let d = generator.perturb(&mut tape, &bound, &alpha, epsilon, &vec![true; rows])?;
    tape.value(d).clone().reshape(shape)
}

/// Both generators, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPair {
    pub image: NoiseGenerator,
    pub text: NoiseGenerator,
}

impl GeneratorPair {
    pub fn new(width: usize, config: &PerturbationConfig, seed: u64) -> Self {
        Self {
            image: NoiseGenerator::new(Modality::Image, width, config.generator_lr, config.zero_init_output, seed),
            text: NoiseGenerator::new(Modality::Text, width, config.generator_lr, config.zero_init_output, seed),
        }
    }
}

/// Tape handles produced by one adversary forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AdversaryTerms {
    /// BCE on the perturbed forward.
    pub l_std: Var,
    /// Symmetric KL between perturbed and clean answer distributions, when
    /// `beta > 0`.
    pub r_kl: Option<Var>,
    /// `l_std + beta * r_kl`.
    pub objective: Var,
    pub perturbed_logits: Var,
    /// Mean norm over perturbed valid positions.
    pub delta_norm_mean: f64,
}

/// Perturbation inputs for one batch.
pub struct AdversaryInputs<'a> {
    pub batch: &'a EmbeddingBatch,
    pub v_embed: Var,
    pub w_embed: Var,
    /// Clean logits; required when `beta > 0`.
    pub clean_logits: Option<Var>,
    pub keys: &'a [u64],
    pub seed: u64,
    pub step: u64,
}

/// Records `L_std + beta * R_kl` for the given generators. Generator parameter
/// bindings are `(image, text)`; a modality whose binding is `None` is left
/// unperturbed.
#[allow(clippy::too_many_arguments)]
pub fn adversary_objective(
    tape: &mut Tape,
    model_config: &ModelConfig,
    params: &ModelParams,
    bound: &Bound,
    generators: &GeneratorPair,
    gen_bound: (Option<&Bound>, Option<&Bound>),
    inputs: &AdversaryInputs<'_>,
    config: &PerturbationConfig,
) -> Result<AdversaryTerms> {
    let batch = inputs.batch;
    let d = model_config.width;
    let mut v = inputs.v_embed;
    let mut w = inputs.w_embed;
    let mut norm_sum = 0.0;
    let mut norm_count = 0usize;
    let mut add_noise = |tape: &mut Tape, x: Var, gen: &NoiseGenerator, gb: &Bound, slots: usize, mask: &[bool]| -> Result<Var> {
        let alpha = sample_alpha(gen.modality, slots, d, inputs.seed, inputs.step, inputs.keys);
        let delta = gen.perturb(tape, gb, &alpha, config.epsilon, mask)?;
        let dv = tape.value(delta);
        for (r, &m) in mask.iter().enumerate() {
            if m {
                norm_sum += dv.row(r).iter().fold(0.0, |a, x| a + x * x).sqrt();
                norm_count += 1;
            }
        }
        tape.add(x, delta)
    };
    if let Some(gb) = gen_bound.0 {
        v = add_noise(tape, v, &generators.image, gb, batch.regions_per, &batch.region_mask)?;
    }
    if let Some(gb) = gen_bound.1 {
        w = add_noise(tape, w, &generators.text, gb, batch.tokens_per, &batch.token_mask)?;
    }
    let enc = encode_forward(tape, model_config, params, bound, v, w, batch)?;
    let logits = answer_logits(tape, model_config, params, bound, &enc)?;
    let l_std = tape.bce_with_logits(logits, &batch.labels)?;
    let (r_kl, objective) = if config.beta > 0.0 {
        let clean = inputs
            .clean_logits
            .ok_or_else(|| Error::Contract("clean logits required when beta > 0".into()))?;
        let p = tape.softmax_rows(logits)?;
        let q = tape.softmax_rows(clean)?;
        let kl = tape.symmetric_kl(p, q)?;
        let scaled = if config.beta == 1.0 { kl } else { tape.scale(kl, config.beta) };
        (Some(kl), tape.add(l_std, scaled)?)
    } else {
        (None, l_std)
    };
    Ok(AdversaryTerms {
        l_std,
        r_kl,
        objective,
        perturbed_logits: logits,
        delta_norm_mean: if norm_count == 0 { 0.0 } else { norm_sum / norm_count as f64 },
    })
}

/// Per-row factors that zero each valid region independently with
/// probability `p`. Padded slots keep factor 1 (they are already zero).
pub fn region_mask_factors(batch: &EmbeddingBatch, p: f64, seed: u64, step: u64, keys: &[u64]) -> Vec<f64> {
    let k = batch.regions_per;
    let mut out = vec![1.0; batch.batch * k];
    for (e, &key) in keys.iter().enumerate() {
        let mut rng = stream(seed, Purpose::Masking, &[step, key, 0]);
        for r in 0..k {
            let draw: f64 = rng.random();
            if batch.region_mask[e * k + r] && draw < p {
                out[e * k + r] = 0.0;
            }
        }
    }
    out
}

/// Tensor-level region masking of `[B*K, d]` embeddings.
pub fn apply_random_region_mask(
    v_embed: &Tensor,
    batch: &EmbeddingBatch,
    p: f64,
    seed: u64,
    step: u64,
    keys: &[u64],
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("mask probability {p} outside [0, 1]")));
    }
    let f = region_mask_factors(batch, p, seed, step, keys);
    let mut tape = Tape::new();
    let x = tape.constant(v_embed.clone());
    let y = tape.scale_rows(x, &f)?;
    Ok(tape.value(y).clone())
}

/// Inserts `n ~ Binomial(L_valid, p)` `[MASK]` tokens into one example at
/// uniformly chosen gaps after position 0, then truncates to `l_max`.
/// Returns valid ids only (no padding).
pub fn insert_mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    p: f64,
    l_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("mask probability {p} outside [0, 1]")));
    }
    if ids.is_empty() {
        return Err(Error::Contract("sequence must contain [CLS]".into()));
    }
    let n = if p == 0.0 {
        0
    } else {
        Binomial::new(ids.len() as u64, p)
            .map_err(|e| Error::Domain(e.to_string()))?
            .sample(rng) as usize
    };
    let mut out = ids.to_vec();
    for _ in 0..n {
        // gaps 1..=len: before each token after [CLS], or at the end
        let gap = rng.random_range(1..=out.len());
        out.insert(gap, MASK_ID);
    }
    out.truncate(l_max);
    Ok(out)
}

/// Applies [`insert_mask_tokens`] to every example; the returned batch may
/// have a longer token dimension (bounded by `l_max`).
pub fn insert_mask_tokens_batch(
    batch: &EmbeddingBatch,
    p: f64,
    l_max: usize,
    seed: u64,
    step: u64,
    keys: &[u64],
) -> Result<EmbeddingBatch> {
    if p == 0.0 {
        return Ok(batch.clone());
    }
    let l = batch.tokens_per;
    let mut seqs = Vec::with_capacity(batch.batch);
    for (e, &key) in keys.iter().enumerate() {
        let valid: Vec<usize> = (0..l)
            .filter(|&t| batch.token_mask[e * l + t])
            .map(|t| batch.token_ids[e * l + t])
            .collect();
        let mut rng = stream(seed, Purpose::Masking, &[step, key, 1]);
        seqs.push(insert_mask_tokens(&valid, p, l_max, &mut rng)?);
    }
    let new_l = seqs.iter().map(Vec::len).max().unwrap_or(1).max(l.min(l_max));
    let mut token_ids = Vec::with_capacity(batch.batch * new_l);
    let mut token_mask = Vec::with_capacity(batch.batch * new_l);
    for s in &seqs {
        for t in 0..new_l {
            match s.get(t) {
                Some(&id) => {
                    token_ids.push(id);
                    token_mask.push(true);
                }
                None => {
                    token_ids.push(PAD_ID);
                    token_mask.push(false);
                }
            }
        }
    }
    Ok(EmbeddingBatch {
        tokens_per: new_l,
        token_ids,
        token_mask,
        ..batch.clone()
    })
}
