//! Checks reverse-mode gradients against central differences: first a small
//! two-layer classifier built from tape primitives, then the full
//! transformer loss on a random batch.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use mango_lab::autodiff::{finite_difference_check, Coords, ParamStore, Tape, Tensor};
use mango_lab::data::{collate, Example};
use mango_lab::model::{forward_logits, ModelConfig, ModelParams, CLS_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut store = ParamStore::new();
    store.register("w1", random(&[6, 8], &mut rng))?;
    store.register("b1", random(&[8], &mut rng))?;
    store.register("w2", random(&[8, 3], &mut rng))?;
    store.register("b2", random(&[3], &mut rng))?;
    let x = random(&[5, 6], &mut rng);
    let targets = Tensor::new(&[5, 3], (0..15).map(|i| (i % 4 == 0) as u8 as f64).collect())?;
    let mlp = |s: &ParamStore| {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape);
        let x = tape.constant(x.clone());
        let h = tape.linear(x, b.var(0), b.var(1))?;
        let h = tape.gelu(h);
        let logits = tape.linear(h, b.var(2), b.var(3))?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), s.collect_grads(&b, &g)))
    };
    let r = finite_difference_check(mlp, &store, Coords::All, 1e-3, 1e-4)?;
    println!(
        "mlp: {} coordinates, max relative error {:.2e}, passed {}",
        r.coords.len(),
        r.max_rel_error,
        r.passed
    );

    let cfg = ModelConfig {
        region_dim: 5,
        max_regions: 3,
        max_tokens: 6,
        answers: 4,
        vocab: 10,
        width: 8,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = ModelParams::init(&cfg, 1)?;
    let examples: Vec<Example> = (0..4u64)
        .map(|key| Example {
            key,
            regions: (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            token_ids: std::iter::once(CLS_ID).chain((0..4).map(|_| rng.random_range(3..10))).collect(),
            labels: (0..4).map(|j| (j == key as usize % 4) as u8 as f64).collect(),
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = collate(&refs, &cfg)?;
    let transformer = |s: &ParamStore| {
        let m = ModelParams::from_store(&cfg, s.clone())?;
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape);
        let logits = forward_logits(&mut tape, &cfg, &m, &b, &batch)?;
        let loss = tape.bce_with_logits(logits, &batch.labels)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), m.store.collect_grads(&b, &g)))
    };
    for (label, coords, h) in [
        ("sampled, h=1e-3", Coords::Sample { count: 64, seed: 3 }, 1e-3),
        ("every coordinate, h=1e-5", Coords::All, 1e-5),
    ] {
        let r = finite_difference_check(transformer, &model.store, coords, h, 1e-4)?;
        println!(
            "transformer ({label}): {} coordinates, max relative error {:.2e}, passed {}",
            r.coords.len(),
            r.max_rel_error,
            r.passed
        );
    }
    Ok(())
}
