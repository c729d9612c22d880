mod common;

use common::*;
use mango_lab::autodiff::Tape;
use mango_lab::benchgen::generate_suite;
use mango_lab::error::Error;
use mango_lab::evaluation::{model_config_for, predict};
use mango_lab::experiment::DirectionalConfig;
use mango_lab::model::{forward_logits, ModelParams};
use mango_lab::noise::PerturbationConfig;
use mango_lab::trainer::*;

#[test]
fn gradient_accumulation_matches_big_batch() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(64, 1);
    let one = tiny_train_config(Mode::Clean, 12);
    let four = TrainConfig {
        grad_accum_steps: 4,
        ..one.clone()
    };
    let (a, _) = run_training(&mcfg, &one, &data).unwrap();
    let (b, _) = run_training(&mcfg, &four, &data).unwrap();
    let (x, y) = (a.model.store.flat_values(), b.model.store.flat_values());
    let worst = x.iter().zip(&y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(32, 2);
    for mode in Mode::ALL {
        let cfg = TrainConfig {
            peak_lr: 0.0,
            ..tiny_train_config(mode, 5)
        };
        let (state, _) = run_training(&mcfg, &cfg, &data).unwrap();
        let init = ModelParams::init(&mcfg, cfg.seed).unwrap();
        let same = state
            .model
            .store
            .iter()
            .zip(init.store.iter())
            .all(|(a, b)| a.tensor == b.tensor);
        assert!(same, "{mode:?}");
    }
}

#[test]
fn degenerate_mango_equals_clean() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(64, 3);
    let clean = tiny_train_config(Mode::Clean, 100);
    assert_eq!(final_hash(&mcfg, &clean, &data), final_hash(&mcfg, &degenerate_mango(clean.clone()), &data));
    // Restoring masking or generator learning breaks the identity.
    let mut short = clean.clone();
    short.total_steps = 30;
    let mut masked = degenerate_mango(short.clone());
    masked.masking = mango_lab::noise::MaskingConfig::default();
    let mut learning = degenerate_mango(short.clone());
    learning.perturbation.generator_lr = 1e-2;
    learning.perturbation.update_interval = 5;
    let base = final_hash(&mcfg, &short, &data);
    assert_ne!(base, final_hash(&mcfg, &masked, &data));
    assert_ne!(base, final_hash(&mcfg, &learning, &data));
}

#[test]
fn zero_sigma_gaussian_equals_clean() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(32, 4);
    let clean = tiny_train_config(Mode::Clean, 20);
    let mut g = clean.clone();
    g.mode = Mode::Gaussian;
    g.perturbation.sigma = 0.0;
    assert_eq!(final_hash(&mcfg, &clean, &data), final_hash(&mcfg, &g, &data));
}

#[test]
fn zero_iteration_pgd_matches_duplicated_clean_loss() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(32, 5);
    let mut pgd = tiny_train_config(Mode::Pgd, 20);
    pgd.pgd.iters = 0;
    let mut dup = degenerate_mango(pgd.clone());
    dup.loss_weights.clean = 1.0;
    assert_eq!(final_hash(&mcfg, &pgd, &data), final_hash(&mcfg, &dup, &data));
    let mut single = pgd.clone();
    single.loss_weights.clean = 0.0;
    let clean = TrainConfig {
        mode: Mode::Clean,
        ..pgd.clone()
    };
    assert_eq!(final_hash(&mcfg, &single, &data), final_hash(&mcfg, &clean, &data));
}

#[test]
fn same_seed_same_checkpoint() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(32, 6);
    for mode in Mode::ALL {
        let cfg = tiny_train_config(mode, 25);
        let other = TrainConfig { seed: 4, ..cfg.clone() };
        let h = final_hash(&mcfg, &cfg, &data);
        assert_eq!(h, final_hash(&mcfg, &cfg, &data), "{mode:?}");
        assert_ne!(h, final_hash(&mcfg, &other, &data), "{mode:?}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(40, 7);
    for mode in Mode::ALL {
        let mut cfg = tiny_train_config(mode, 30);
        cfg.perturbation.update_interval = 4;
        cfg.perturbation.retrain_interval = 12;
        let (full, _) = run_training(&mcfg, &cfg, &data).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(mcfg.clone(), cfg.clone(), &data).unwrap();
        let mut s = t.init_state().unwrap();
        // Stop between generator updates so pending gradients must survive.
        t.run_until(&mut s, 14, &mut |_| {}).unwrap();
        s.save(dir.path(), &mcfg).unwrap();
        let mut resumed = TrainState::load(dir.path(), &mcfg).unwrap();
        assert_eq!(resumed, s);
        let mut t2 = Trainer::new(mcfg.clone(), cfg.clone(), &data).unwrap();
        t2.run_until(&mut resumed, u64::MAX, &mut |_| {}).unwrap();
        assert_eq!(resumed.model_hash(&mcfg).unwrap(), full.model_hash(&mcfg).unwrap(), "{mode:?}");
        assert_eq!(resumed, full, "{mode:?}");
    }
}

#[test]
fn generator_schedule_updates_and_reinitializes() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(32, 8);
    let mut cfg = tiny_train_config(Mode::Mango, 12);
    cfg.perturbation.update_interval = 3;
    cfg.perturbation.retrain_interval = 9;
    let mut t = Trainer::new(mcfg.clone(), cfg.clone(), &data).unwrap();
    let mut s = t.init_state().unwrap();
    let g0 = s.generators.clone().unwrap();
    t.run_until(&mut s, 2, &mut |_| {}).unwrap();
    assert_eq!(s.generators.as_ref().unwrap().image.params.flat_values(), g0.image.params.flat_values());
    t.run_until(&mut s, 3, &mut |_| {}).unwrap();
    let g3 = s.generators.clone().unwrap();
    assert_ne!(g3.image.params.flat_values(), g0.image.params.flat_values());
    assert!(g3.image.params.iter().all(|p| p.grad.is_none()));
    assert_eq!(s.generation, 0);
    t.run_until(&mut s, 9, &mut |_| {}).unwrap();
    let g = s.generators.as_ref().unwrap();
    assert_eq!(s.generation, 1);
    assert_eq!(g.image.lr, cfg.perturbation.retrain_lr);
    assert!(g.image.params.iter().all(|p| p.moment1.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn logging_cadence() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(16, 9);
    let cfg = TrainConfig {
        log_every: 4,
        ..tiny_train_config(Mode::Mango, 10)
    };
    let (_, log) = run_training(&mcfg, &cfg, &data).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 10]);
    assert_eq!(log[0].lr, lr_at_step(10, cfg.warmup_fraction, cfg.peak_lr, 3).unwrap());
    for r in &log {
        assert!(r.loss_clean.is_some() && r.loss_adv.is_some() && r.r_kl.is_some());
        assert!((r.delta_norm_mean.unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn diverging_run_reports_a_numeric_fault() {
    let mcfg = tiny_model_config();
    let data = tiny_dataset(16, 10);
    let cfg = TrainConfig {
        peak_lr: 1e300,
        warmup_fraction: 0.01,
        weight_decay: 0.0,
        ..tiny_train_config(Mode::Clean, 20)
    };
    match run_training(&mcfg, &cfg, &data) {
        Err(Error::NumericFault { step, .. }) => assert!((1..20).contains(&step)),
        other => panic!("expected a numeric fault, got {:?}", other.map(|(s, _)| s.step)),
    }
}

#[test]
fn loss_falls_on_a_separable_batch() {
    let mcfg = tiny_model_config();
    // Answer is decided by the first token after [CLS].
    let mut ex = random_examples(&mcfg, 16, 11);
    for (i, e) in ex.iter_mut().enumerate() {
        let a = i % mcfg.answers;
        e.token_ids[1] = 3 + a;
        e.labels = (0..mcfg.answers).map(|j| if j == a { 1.0 } else { 0.0 }).collect();
        if e.token_ids.len() < 2 {
            e.token_ids.push(3 + a);
        }
    }
    let data = mango_lab::data::Dataset::new(ex);
    let cfg = TrainConfig {
        batch_size: 16,
        ..tiny_train_config(Mode::Clean, 200)
    };
    let (_, log) = run_training(&mcfg, &TrainConfig { log_every: 1, ..cfg }, &data).unwrap();
    let first = log[0].loss_clean.unwrap();
    let last = log.last().unwrap().loss_clean.unwrap();
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn gaussian_noise_raises_loss_on_average() {
    // At a random init the logits carry no fit for the noise to destroy, so
    // each model first takes a short clean run on the batch it is scored on.
    let mcfg = tiny_model_config();
    let pcfg = PerturbationConfig::default();
    let (mut clean, mut noisy) = (0.0, 0.0);
    for seed in 0..100 {
        let (batch, keys) = random_batch(&mcfg, 8, seed + 500);
        let cfg = TrainConfig { seed, ..tiny_train_config(Mode::Clean, 40) };
        let (state, _) = run_training(&mcfg, &cfg, &mango_lab::data::Dataset::new(random_examples(&mcfg, 8, seed + 500))).unwrap();
        let model = state.model;
        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let logits = forward_logits(&mut tape, &mcfg, &model, &bound, &batch).unwrap();
        let l = tape.bce_with_logits(logits, &batch.labels).unwrap();
        clean += tape.value(l).item();

        let mut tape = Tape::new();
        let bound = model.store.bind_frozen(&mut tape);
        let (v, w) = mango_lab::model::build_embeddings(&mut tape, &mcfg, &model, &bound, &batch).unwrap();
        let (pv, pw, _) = mango_lab::noise::gaussian_perturb_batch(
            tape.value(v), tape.value(w), &batch, &pcfg, seed, 0, &keys,
        )
        .unwrap();
        let (v, w) = (tape.constant(pv), tape.constant(pw));
        let enc = mango_lab::model::encode_forward(&mut tape, &mcfg, &model, &bound, v, w, &batch).unwrap();
        let logits = mango_lab::model::answer_logits(&mut tape, &mcfg, &model, &bound, &enc).unwrap();
        let l = tape.bce_with_logits(logits, &batch.labels).unwrap();
        noisy += tape.value(l).item();
    }
    assert!(noisy >= clean, "{noisy} < {clean}");
}

#[test]
fn pgd_deltas_sit_on_the_sphere_and_raise_the_loss() {
    let mcfg = default_scale_config();
    let eps = 1.0;
    for seed in 0..10 {
        let model = ModelParams::init(&mcfg, seed).unwrap();
        let (batch, _) = random_batch(&mcfg, 6, seed + 70);
        let loss_at = |k: usize| {
            let (dv, dw) = pgd_deltas(&mcfg, &model, &batch, k, 0.5, eps).unwrap();
            for (t, mask) in [(&dv, &batch.region_mask), (&dw, &batch.token_mask)] {
                for (r, &m) in mask.iter().enumerate() {
                    let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if m && k > 0 {
                        assert!((n - eps).abs() < 1e-12);
                    } else if !m {
                        assert_eq!(n, 0.0);
                    }
                }
            }
            let mut tape = Tape::new();
            let bound = model.store.bind_frozen(&mut tape);
            let (v, w) = mango_lab::model::build_embeddings(&mut tape, &mcfg, &model, &bound, &batch).unwrap();
            let (cv, cw) = (tape.constant(dv), tape.constant(dw));
            let (v, w) = (tape.add(v, cv).unwrap(), tape.add(w, cw).unwrap());
            let enc = mango_lab::model::encode_forward(&mut tape, &mcfg, &model, &bound, v, w, &batch).unwrap();
            let logits = mango_lab::model::answer_logits(&mut tape, &mcfg, &model, &bound, &enc).unwrap();
            let l = tape.bce_with_logits(logits, &batch.labels).unwrap();
            tape.value(l).item()
        };
        let losses: Vec<f64> = (0..=3).map(loss_at).collect();
        for w in losses.windows(2) {
            assert!(w[1] >= w[0], "seed {seed}: {losses:?}");
        }
    }
}

#[test]
fn clean_training_fits_the_desk_suite() {
    let desk = DirectionalConfig::default();
    let suite = generate_suite(&desk.suite).unwrap();
    let mcfg = model_config_for(&suite, &desk.model);
    let cfg = TrainConfig {
        mode: Mode::Clean,
        total_steps: 2000,
        peak_lr: 3e-3,
        log_every: 500,
        ..TrainConfig::default()
    };
    let (state, _) = run_training(&mcfg, &cfg, &suite.train_set().unwrap()).unwrap();
    let train: Vec<_> = suite
        .questions
        .iter()
        .filter(|q| q.split == mango_lab::benchgen::Split::Train)
        .collect();
    let preds = predict(&mcfg, &state.model, &suite, &train, 256).unwrap();
    let right = train.iter().filter(|q| preds[&q.question_id] == q.answer).count();
    let acc = 100.0 * right as f64 / train.len() as f64;
    assert!(acc >= 95.0, "train accuracy {acc:.2}");
}
