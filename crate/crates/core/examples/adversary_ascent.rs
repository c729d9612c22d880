//! Freezes a briefly trained model and lets the noise generators take a few
//! accumulated ascent steps. The adversary objective on a held-out batch
//! should rise while every perturbation stays on the epsilon sphere.
//!
//! ```text
//! cargo run --release --example adversary_ascent
//! ```

use mango_lab::autodiff::Tape;
use mango_lab::benchgen::{generate_suite, SuiteParams};
use mango_lab::evaluation::model_config_for;
use mango_lab::model::{answer_logits, build_embeddings, encode_forward, EmbeddingBatch, ModelConfig, ModelParams};
use mango_lab::noise::{adversary_objective, AdversaryInputs, GeneratorPair, PerturbationConfig};
use mango_lab::trainer::{adamw_store, run_training, Mode, TrainConfig, Trainer};

/// Adversary objective for `batch`; with `accumulate` the generator
/// gradients are added to their accumulators.
fn objective(
    mcfg: &ModelConfig,
    model: &ModelParams,
    gens: &mut GeneratorPair,
    pcfg: &PerturbationConfig,
    (batch, keys, step): (&EmbeddingBatch, &[u64], u64),
    accumulate: bool,
) -> anyhow::Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let gi = gens.image.params.bind(&mut tape);
    let gt = gens.text.params.bind(&mut tape);
    let (v, w) = build_embeddings(&mut tape, mcfg, model, &bound, batch)?;
    let enc = encode_forward(&mut tape, mcfg, model, &bound, v, w, batch)?;
    let clean = answer_logits(&mut tape, mcfg, model, &bound, &enc)?;
    let inputs = AdversaryInputs { batch, v_embed: v, w_embed: w, clean_logits: Some(clean), keys, seed: 7, step };
    let terms = adversary_objective(&mut tape, mcfg, model, &bound, gens, (Some(&gi), Some(&gt)), &inputs, pcfg)?;
    let value = tape.value(terms.objective).item();
    if accumulate {
        let g = tape.backward(terms.objective)?;
        gens.image.params.accumulate(&gi, &g)?;
        gens.text.params.accumulate(&gt, &g)?;
    }
    Ok((value, terms.delta_norm_mean))
}

fn main() -> anyhow::Result<()> {
    let suite = generate_suite(&SuiteParams {
        questions_per_category: 200,
        ..SuiteParams::default()
    })?;
    let mcfg = model_config_for(&suite, &ModelConfig::default());
    let data = suite.train_set()?;
    let cfg = TrainConfig {
        total_steps: 200,
        peak_lr: 1e-2,
        ..TrainConfig::default()
    };
    let (state, _) = run_training(&mcfg, &cfg, &data)?;
    let model = state.model;

    let pcfg = PerturbationConfig {
        generator_lr: 1e-3,
        ..PerturbationConfig::default()
    };
    let mut gens = GeneratorPair::new(mcfg.width, &pcfg, 1);
    let mut sampler = Trainer::new(mcfg.clone(), TrainConfig { mode: Mode::Mango, seed: 9, ..cfg.clone() }, &data)?;
    let (held, held_keys) = sampler.batch_for_step(10_000)?;
    let adam = cfg.adam();
    for round in 0..5u64 {
        let (before, norm) = objective(&mcfg, &model, &mut gens, &pcfg, (&held, &held_keys, 0), false)?;
        for t in 0..pcfg.update_interval as u64 {
            let step = round * 100 + t;
            let (batch, keys) = sampler.batch_for_step(step)?;
            objective(&mcfg, &model, &mut gens, &pcfg, (&batch, &keys, step), true)?;
        }
        for g in [&mut gens.image, &mut gens.text] {
            g.params.negate_grads();
            adamw_store(&mut g.params, g.lr, &adam)?;
        }
        let (after, _) = objective(&mcfg, &model, &mut gens, &pcfg, (&held, &held_keys, 0), false)?;
        println!("update {round}: objective {before:.7} -> {after:.7}  (mean |delta| {norm:.6})");
    }
    Ok(())
}
