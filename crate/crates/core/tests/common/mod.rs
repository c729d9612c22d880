#![allow(dead_code)]

use mango_lab::autodiff::{
    finite_difference_check, Bound, Coords, GradCheckReport, Gradients, ParamStore, Tape, Tensor, Var,
};
use mango_lab::data::{collate, Example};
use mango_lab::model::{EmbeddingBatch, ModelConfig, ModelParams, CLS_ID};
use mango_lab::noise::{adversary_objective, AdversaryInputs, GeneratorPair, PerturbationConfig};
use mango_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect()).unwrap()
}

/// Finite-difference check of `f` with respect to every input tensor. A
/// non-scalar output is reduced with fixed random weights.
pub fn check_op<F>(inputs: Vec<(&str, Tensor)>, coords: Coords, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.register(name, t).unwrap();
    }
    let objective = |s: &ParamStore| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let y = f(&mut tape, bound.vars())?;
        let loss = if tape.value(y).len() == 1 {
            y
        } else {
            let shape = tape.value(y).shape().to_vec();
            let w = tape.constant(random_tensor(&shape, 1.0, 99));
            let p = tape.mul(y, w)?;
            tape.sum(p)
        };
        let v = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((v, s.collect_grads(&bound, &g)))
    };
    finite_difference_check(objective, &store, coords, H, TOL).unwrap()
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        region_dim: 5,
        width: 8,
        max_regions: 3,
        max_tokens: 6,
        layers: 2,
        heads: 2,
        ffn_width: 12,
        answers: 4,
        vocab: 10,
        region_positions: true,
        init_std: 0.3,
        ln_eps: 1e-12,
    }
}

/// Default width, depth and init scale with few slots, so checks stay fast.
pub fn default_scale_config() -> ModelConfig {
    ModelConfig {
        region_dim: 5,
        max_regions: 3,
        max_tokens: 8,
        answers: 6,
        vocab: 12,
        ..ModelConfig::default()
    }
}

/// Random examples with varying region and token counts.
pub fn random_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let k = r.random_range(1..=cfg.max_regions);
            let l = r.random_range(2..=cfg.max_tokens);
            let mut token_ids = vec![CLS_ID];
            token_ids.extend((1..l).map(|_| r.random_range(3..cfg.vocab)));
            let mut labels = vec![0.0; cfg.answers];
            labels[r.random_range(0..cfg.answers)] = 1.0;
            Example {
                key: seed * 1000 + i as u64,
                regions: (0..k)
                    .map(|_| (0..cfg.region_dim).map(|_| r.random::<f64>()).collect())
                    .collect(),
                token_ids,
                labels,
            }
        })
        .collect()
}

pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> (EmbeddingBatch, Vec<u64>) {
    let ex = random_examples(cfg, n, seed);
    let refs: Vec<&Example> = ex.iter().collect();
    (collate(&refs, cfg).unwrap(), ex.iter().map(|e| e.key).collect())
}

/// Forward and backward pass of the generator objective `L_std + beta * R_kl`
/// on a frozen model.
pub fn generator_pass(
    mcfg: &ModelConfig,
    model: &ModelParams,
    gens: &GeneratorPair,
    batch: &EmbeddingBatch,
    keys: &[u64],
    pcfg: &PerturbationConfig,
    step: u64,
) -> Result<(f64, Bound, Bound, Gradients)> {
    use mango_lab::model::{answer_logits, build_embeddings, encode_forward};
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let gi = gens.image.params.bind(&mut tape);
    let gt = gens.text.params.bind(&mut tape);
    let (v, w) = build_embeddings(&mut tape, mcfg, model, &bound, batch)?;
    let enc = encode_forward(&mut tape, mcfg, model, &bound, v, w, batch)?;
    let clean = answer_logits(&mut tape, mcfg, model, &bound, &enc)?;
    let inputs = AdversaryInputs {
        batch,
        v_embed: v,
        w_embed: w,
        clean_logits: Some(clean),
        keys,
        seed: 7,
        step,
    };
    let terms = adversary_objective(&mut tape, mcfg, model, &bound, gens, (Some(&gi), Some(&gt)), &inputs, pcfg)?;
    let value = tape.value(terms.objective).item();
    let g = tape.backward(terms.objective)?;
    Ok((value, gi, gt, g))
}

/// Value of the generator objective plus the analytic gradients of both
/// generators' parameters.
pub fn generator_objective(
    mcfg: &ModelConfig,
    model: &ModelParams,
    gens: &GeneratorPair,
    batch: &EmbeddingBatch,
    keys: &[u64],
    pcfg: &PerturbationConfig,
    step: u64,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let (v, gi, gt, g) = generator_pass(mcfg, model, gens, batch, keys, pcfg, step)?;
    Ok((
        v,
        gens.image.params.collect_grads(&gi, &g),
        gens.text.params.collect_grads(&gt, &g),
    ))
}

/// One accumulated generator update on a frozen model: gradients of the
/// objective over `t` minibatches, then a single ascent step. Returns the
/// objective on a held minibatch before and after the update.
pub fn ascent_trial(seed: u64, t: usize) -> (f64, f64) {
    use mango_lab::trainer::{adamw_store, TrainConfig};
    let mcfg = default_scale_config();
    let model = ModelParams::init(&mcfg, seed).unwrap();
    let pcfg = PerturbationConfig::default();
    let adam = TrainConfig::default().adam();
    let mut gens = GeneratorPair::new(mcfg.width, &pcfg, seed);
    let (held, held_keys) = random_batch(&mcfg, 16, 1_000_000 + seed);
    let held_step = u64::MAX;
    let before = generator_pass(&mcfg, &model, &gens, &held, &held_keys, &pcfg, held_step).unwrap().0;
    for step in 0..t as u64 {
        let (b, k) = random_batch(&mcfg, 16, seed * 1000 + step);
        let (_, gi, gt, g) = generator_pass(&mcfg, &model, &gens, &b, &k, &pcfg, step).unwrap();
        gens.image.params.accumulate(&gi, &g).unwrap();
        gens.text.params.accumulate(&gt, &g).unwrap();
    }
    for gen in [&mut gens.image, &mut gens.text] {
        gen.params.negate_grads();
        adamw_store(&mut gen.params, gen.lr, &adam).unwrap();
    }
    let after = generator_pass(&mcfg, &model, &gens, &held, &held_keys, &pcfg, held_step).unwrap().0;
    (before, after)
}

/// Gradient checks over every differentiable primitive, each with respect
/// to all of its inputs.
#[allow(clippy::vec_init_then_push)]
pub fn primitive_checks() -> Vec<(&'static str, GradCheckReport)> {
    let all = Coords::All;
    let m = |s: &[usize], seed| random_tensor(s, 1.0, seed);
    let mut out = Vec::new();
    out.push(("add", check_op(vec![("a", m(&[3, 4], 1)), ("b", m(&[3, 4], 2))], all, |t, v| t.add(v[0], v[1]))));
    out.push(("sub", check_op(vec![("a", m(&[3, 4], 3)), ("b", m(&[3, 4], 4))], all, |t, v| t.sub(v[0], v[1]))));
    out.push(("mul", check_op(vec![("a", m(&[3, 4], 5)), ("b", m(&[3, 4], 6))], all, |t, v| t.mul(v[0], v[1]))));
    out.push(("scale", check_op(vec![("a", m(&[2, 5], 7))], all, |t, v| Ok(t.scale(v[0], -1.7)))));
    out.push((
        "add_bias",
        check_op(vec![("x", m(&[3, 4], 8)), ("b", m(&[4], 9))], all, |t, v| t.add_bias(v[0], v[1])),
    ));
    out.push((
        "matmul",
        check_op(vec![("a", m(&[3, 4], 10)), ("b", m(&[4, 2], 11))], all, |t, v| t.matmul(v[0], v[1])),
    ));
    out.push((
        "linear",
        check_op(
            vec![("x", m(&[2, 3, 4], 12)), ("w", m(&[4, 5], 13)), ("b", m(&[5], 14))],
            all,
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
    ));
    out.push(("reshape", check_op(vec![("x", m(&[2, 6], 15))], all, |t, v| t.reshape(v[0], &[3, 4]))));
    out.push(("gelu", check_op(vec![("x", random_tensor(&[3, 5], 3.0, 16))], all, |t, v| Ok(t.gelu(v[0])))));
    out.push((
        "softmax_rows",
        check_op(vec![("x", random_tensor(&[3, 5], 2.0, 17))], all, |t, v| t.softmax_rows(v[0])),
    ));
    out.push((
        "layer_norm_rows",
        check_op(
            vec![("x", random_tensor(&[3, 6], 2.0, 18)), ("g", m(&[6], 19)), ("b", m(&[6], 20))],
            all,
            |t, v| t.layer_norm_rows(v[0], v[1], v[2], 1e-12),
        ),
    ));
    let targets = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.3, 0.7]).unwrap();
    out.push((
        "bce_with_logits",
        check_op(vec![("x", random_tensor(&[2, 3], 3.0, 21))], all, move |t, v| {
            t.bce_with_logits(v[0], &targets)
        }),
    ));
    out.push(("sum", check_op(vec![("x", m(&[3, 3], 22))], all, |t, v| Ok(t.sum(v[0])))));
    out.push(("mean", check_op(vec![("x", m(&[3, 3], 23))], all, |t, v| Ok(t.mean(v[0])))));
    out.push((
        "gather_rows",
        check_op(vec![("x", m(&[4, 3], 24))], all, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2])),
    ));
    out.push((
        "concat_rows",
        check_op(vec![("a", m(&[2, 3], 25)), ("b", m(&[3, 3], 26))], all, |t, v| t.concat_rows(v[0], v[1])),
    ));
    out.push((
        "scale_rows",
        check_op(vec![("x", m(&[3, 4], 27))], all, |t, v| t.scale_rows(v[0], &[0.5, 0.0, -2.0])),
    ));
    let mask = vec![true, true, false, true, true, true, true, false];
    out.push((
        "attention",
        check_op(
            vec![("q", m(&[8, 4], 28)), ("k", m(&[8, 4], 29)), ("v", m(&[8, 4], 30))],
            all,
            move |t, v| t.attention(v[0], v[1], v[2], &mask, 2, 4, 2),
        ),
    ));
    out.push((
        "project_rows_to_sphere",
        check_op(vec![("x", m(&[4, 5], 31))], all, |t, v| t.project_rows_to_sphere(v[0], 1.0)),
    ));
    out.push((
        "symmetric_kl",
        check_op(
            vec![("a", random_tensor(&[3, 4], 2.0, 32)), ("b", random_tensor(&[3, 4], 2.0, 33))],
            all,
            |t, v| {
                let p = t.softmax_rows(v[0])?;
                let q = t.softmax_rows(v[1])?;
                t.symmetric_kl(p, q)
            },
        ),
    ));
    out
}

/// Gradient checks of the generator objective `L_std + beta * R_kl` with
/// respect to the image and text generator parameters on a frozen model.
pub fn generator_objective_checks(mcfg: &ModelConfig, coords: Coords, h: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mcfg = mcfg.clone();
    let model = ModelParams::init(&mcfg, 3).unwrap();
    let pcfg = PerturbationConfig::default();
    let gens = GeneratorPair::new(mcfg.width, &pcfg, 5);
    let (batch, keys) = random_batch(&mcfg, 4, 11);
    let img = {
        let obj = |s: &ParamStore| {
            let mut g = gens.clone();
            g.image.params = s.clone();
            let (v, gi, _) = generator_objective(&mcfg, &model, &g, &batch, &keys, &pcfg, 0)?;
            Ok((v, gi))
        };
        finite_difference_check(obj, &gens.image.params, coords, h, TOL).unwrap()
    };
    let txt = {
        let obj = |s: &ParamStore| {
            let mut g = gens.clone();
            g.text.params = s.clone();
            let (v, _, gt) = generator_objective(&mcfg, &model, &g, &batch, &keys, &pcfg, 0)?;
            Ok((v, gt))
        };
        finite_difference_check(obj, &gens.text.params, coords, h, TOL).unwrap()
    };
    vec![("generator.image", img), ("generator.text", txt)]
}

/// Finite-difference check of the answer loss of the whole model on a B=4 batch.
pub fn full_model_check(mcfg: &ModelConfig, coords: Coords, h: f64) -> GradCheckReport {
    use mango_lab::model::forward_logits;
    let model = ModelParams::init(mcfg, 1).unwrap();
    let (batch, _) = random_batch(mcfg, 4, 2);
    let obj = |s: &ParamStore| {
        let m = ModelParams::from_store(mcfg, s.clone())?;
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape);
        let logits = forward_logits(&mut tape, mcfg, &m, &bound, &batch)?;
        let loss = tape.bce_with_logits(logits, &batch.labels)?;
        let v = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((v, m.store.collect_grads(&bound, &g)))
    };
    finite_difference_check(obj, &model.store, coords, h, TOL).unwrap()
}

/// Small train set of random examples for the tiny config.
pub fn tiny_dataset(n: usize, seed: u64) -> mango_lab::data::Dataset {
    mango_lab::data::Dataset::new(random_examples(&tiny_model_config(), n, seed))
}

/// Training config for the tiny model, `steps` steps of batch 8.
pub fn tiny_train_config(mode: mango_lab::trainer::Mode, steps: usize) -> mango_lab::trainer::TrainConfig {
    mango_lab::trainer::TrainConfig {
        mode,
        seed: 3,
        total_steps: steps,
        batch_size: 8,
        peak_lr: 5e-3,
        ..Default::default()
    }
}

/// MANGO with masking off, beta = 0, frozen zero-output generators and the clean
/// loss copy removed.
pub fn degenerate_mango(mut cfg: mango_lab::trainer::TrainConfig) -> mango_lab::trainer::TrainConfig {
    cfg.mode = mango_lab::trainer::Mode::Mango;
    cfg.masking = mango_lab::noise::MaskingConfig::off();
    cfg.perturbation.beta = 0.0;
    cfg.perturbation.zero_init_output = true;
    cfg.perturbation.generator_lr = 0.0;
    cfg.perturbation.retrain_lr = 0.0;
    cfg.loss_weights.clean = 0.0;
    cfg
}

/// Final model checkpoint hash of a fresh run.
pub fn final_hash(
    mcfg: &ModelConfig,
    cfg: &mango_lab::trainer::TrainConfig,
    data: &mango_lab::data::Dataset,
) -> String {
    let (state, _) = mango_lab::trainer::run_training(mcfg, cfg, data).unwrap();
    state.model_hash(mcfg).unwrap()
}
