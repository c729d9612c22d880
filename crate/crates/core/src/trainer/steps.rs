use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    answer_logits, build_embeddings, encode_forward, forward_logits, EmbeddingBatch, ModelConfig,
    ModelParams,
};
use crate::noise::{
    adversary_objective, gaussian_noise_for_batch, insert_mask_tokens_batch, region_mask_factors,
    AdversaryInputs, Modality,
};
use crate::trainer::optim::adamw_store;
use crate::trainer::{Mode, TrainConfig, TrainState};

/// Loss values observed during one step (means over micro-batches).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub loss_clean: Option<f64>,
    pub loss_adv: Option<f64>,
    pub r_kl: Option<f64>,
    pub delta_norm_mean: Option<f64>,
}

impl StepStats {
    fn add(&mut self, other: &StepStats) {
        fn acc(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        acc(&mut self.loss_clean, other.loss_clean);
        acc(&mut self.loss_adv, other.loss_adv);
        acc(&mut self.r_kl, other.r_kl);
        acc(&mut self.delta_norm_mean, other.delta_norm_mean);
    }

    fn scale(&mut self, c: f64) {
        for v in [&mut self.loss_clean, &mut self.loss_adv, &mut self.r_kl, &mut self.delta_norm_mean]
            .into_iter()
            .flatten()
        {
            *v *= c;
        }
    }
}

/// `x * c`, skipping the op when `c == 1` so unit weights are exact.
fn weighted(tape: &mut Tape, x: Var, c: f64) -> Var {
    if c == 1.0 {
        x
    } else {
        tape.scale(x, c)
    }
}

/// Left-to-right sum of the present terms.
fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let mut acc = *it
        .next()
        .ok_or_else(|| Error::Config("every loss term has zero weight".into()))?;
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn check_loss(tape: &Tape, loss: Var, step: u64) -> Result<f64> {
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NumericFault {
            step: step as usize,
            detail: format!("non-finite loss {v}"),
        });
    }
    Ok(v)
}

struct Micro<'a> {
    mcfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    batch: &'a EmbeddingBatch,
    keys: &'a [u64],
    step: u64,
    /// `1 / grad_accum_steps`.
    share: f64,
}

fn micro_clean(m: &Micro<'_>, state: &mut TrainState) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = state.model.store.bind(&mut tape);
    let logits = forward_logits(&mut tape, m.mcfg, &state.model, &bound, m.batch)?;
    let bce = tape.bce_with_logits(logits, &m.batch.labels)?;
    let value = check_loss(&tape, bce, m.step)?;
    let loss = weighted(&mut tape, bce, m.share);
    let g = tape.backward(loss)?;
    state.model.store.accumulate(&bound, &g)?;
    Ok(StepStats {
        loss_clean: Some(value),
        ..Default::default()
    })
}

fn micro_gaussian(m: &Micro<'_>, state: &mut TrainState) -> Result<StepStats> {
    let p = &m.cfg.perturbation;
    let noise = gaussian_noise_for_batch(m.batch, m.mcfg.width, p, m.cfg.seed, m.step, m.keys)?;
    let Some(noise) = noise.noise else {
        return micro_clean(m, state);
    };
    let mut tape = Tape::new();
    let bound = state.model.store.bind(&mut tape);
    let (mut v, mut w) = build_embeddings(&mut tape, m.mcfg, &state.model, &bound, m.batch)?;
    let n = tape.constant(noise);
    match p.gaussian_modality {
        Modality::Image => v = tape.add(v, n)?,
        Modality::Text => w = tape.add(w, n)?,
    }
    let enc = encode_forward(&mut tape, m.mcfg, &state.model, &bound, v, w, m.batch)?;
    let logits = answer_logits(&mut tape, m.mcfg, &state.model, &bound, &enc)?;
    let bce = tape.bce_with_logits(logits, &m.batch.labels)?;
    let value = check_loss(&tape, bce, m.step)?;
    let loss = weighted(&mut tape, bce, m.share);
    let g = tape.backward(loss)?;
    state.model.store.accumulate(&bound, &g)?;
    Ok(StepStats {
        loss_adv: Some(value),
        ..Default::default()
    })
}

fn row_norm(r: &[f64]) -> f64 {
    r.iter().fold(0.0, |a, v| a + v * v).sqrt()
}

/// Per-position perturbations from `iters` normalized ascent steps on the
/// perturbed BCE of a frozen model, each followed by projection to the
/// `epsilon` sphere. Starts from zero; padded positions stay zero. After the
/// first step, a step that lowers the batch loss is rejected and the step
/// size halved, so the loss is nondecreasing in `iters`.
pub fn pgd_deltas(
    mcfg: &ModelConfig,
    params: &ModelParams,
    batch: &EmbeddingBatch,
    iters: usize,
    step_size: f64,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let d = mcfg.width;
    let mut dv = Tensor::zeros(&[batch.batch * batch.regions_per, d]);
    let mut dw = Tensor::zeros(&[batch.batch * batch.tokens_per, d]);
    if iters == 0 {
        return Ok((dv, dw));
    }
    let (v0, w0) = {
        let mut tape = Tape::new();
        let bound = params.store.bind_frozen(&mut tape);
        let (v, w) = build_embeddings(&mut tape, mcfg, params, &bound, batch)?;
        (tape.value(v).clone(), tape.value(w).clone())
    };
    type Eval = (f64, Option<Vec<f64>>, Option<Vec<f64>>);
    let eval = |dv: &Tensor, dw: &Tensor| -> Result<Eval> {
        let mut tape = Tape::new();
        let bound = params.store.bind_frozen(&mut tape);
        let v = tape.constant(v0.clone());
        let w = tape.constant(w0.clone());
        let lv = tape.leaf(dv.clone());
        let lw = tape.leaf(dw.clone());
        let v = tape.add(v, lv)?;
        let w = tape.add(w, lw)?;
        let enc = encode_forward(&mut tape, mcfg, params, &bound, v, w, batch)?;
        let logits = answer_logits(&mut tape, mcfg, params, &bound, &enc)?;
        let bce = tape.bce_with_logits(logits, &batch.labels)?;
        let g = tape.backward(bce)?;
        Ok((tape.value(bce).item(), g.get(lv).map(<[f64]>::to_vec), g.get(lw).map(<[f64]>::to_vec)))
    };
    let ascend = |delta: &Tensor, grad: &Option<Vec<f64>>, mask: &[bool], step: f64| -> Result<Tensor> {
        let mut out = delta.clone();
        if let Some(grad) = grad {
            let data = out.data_mut();
            for (r, &valid) in mask.iter().enumerate() {
                let gr = &grad[r * d..(r + 1) * d];
                let n = row_norm(gr);
                if !valid || n == 0.0 {
                    continue;
                }
                for (x, g) in data[r * d..(r + 1) * d].iter_mut().zip(gr) {
                    *x += step * g / n;
                }
            }
        }
        crate::noise::project_to_sphere(&out, epsilon)
    };
    let (mut loss, mut gv, mut gw) = eval(&dv, &dw)?;
    let mut step = step_size;
    for k in 0..iters {
        let nv = ascend(&dv, &gv, &batch.region_mask, step)?;
        let nw = ascend(&dw, &gw, &batch.token_mask, step)?;
        let (nl, ngv, ngw) = eval(&nv, &nw)?;
        if k == 0 || nl >= loss {
            (dv, dw, loss, gv, gw) = (nv, nw, nl, ngv, ngw);
        } else {
            step *= 0.5;
        }
    }
    Ok((dv, dw))
}

fn mean_valid_norm(deltas: &[(&Tensor, &[bool])]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, mask) in deltas {
        for (r, &m) in mask.iter().enumerate() {
            if m {
                sum += row_norm(t.row(r));
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn micro_pgd(m: &Micro<'_>, state: &mut TrainState) -> Result<StepStats> {
    let lw = m.cfg.loss_weights;
    let (dv, dw) = if lw.adversarial > 0.0 {
        pgd_deltas(
            m.mcfg,
            &state.model,
            m.batch,
            m.cfg.pgd.iters,
            m.cfg.pgd.step_size,
            m.cfg.perturbation.epsilon,
        )?
    } else {
        (Tensor::zeros(&[0, 1]), Tensor::zeros(&[0, 1]))
    };
    let mut tape = Tape::new();
    let bound = state.model.store.bind(&mut tape);
    let (v, w) = build_embeddings(&mut tape, m.mcfg, &state.model, &bound, m.batch)?;
    let mut terms = Vec::new();
    let mut stats = StepStats::default();
    if lw.clean > 0.0 {
        let enc = encode_forward(&mut tape, m.mcfg, &state.model, &bound, v, w, m.batch)?;
        let logits = answer_logits(&mut tape, m.mcfg, &state.model, &bound, &enc)?;
        let bce = tape.bce_with_logits(logits, &m.batch.labels)?;
        stats.loss_clean = Some(check_loss(&tape, bce, m.step)?);
        terms.push(weighted(&mut tape, bce, lw.clean));
    }
    if lw.adversarial > 0.0 {
        stats.delta_norm_mean = Some(mean_valid_norm(&[
            (&dv, &m.batch.region_mask),
            (&dw, &m.batch.token_mask),
        ]));
        let cv = tape.constant(dv);
        let cw = tape.constant(dw);
        let pv = tape.add(v, cv)?;
        let pw = tape.add(w, cw)?;
        let enc = encode_forward(&mut tape, m.mcfg, &state.model, &bound, pv, pw, m.batch)?;
        let logits = answer_logits(&mut tape, m.mcfg, &state.model, &bound, &enc)?;
        let bce = tape.bce_with_logits(logits, &m.batch.labels)?;
        stats.loss_adv = Some(check_loss(&tape, bce, m.step)?);
        terms.push(weighted(&mut tape, bce, lw.adversarial));
    }
    let loss = sum_terms(&mut tape, &terms)?;
    let loss = weighted(&mut tape, loss, m.share);
    let g = tape.backward(loss)?;
    state.model.store.accumulate(&bound, &g)?;
    Ok(stats)
}

fn micro_mango(m: &Micro<'_>, state: &mut TrainState) -> Result<StepStats> {
    let cfg = m.cfg;
    let p = &cfg.perturbation;
    let lw = cfg.loss_weights;
    let gens = state
        .generators
        .as_ref()
        .ok_or_else(|| Error::Contract("mango mode requires generators".into()))?;

    let batch = insert_mask_tokens_batch(
        m.batch,
        cfg.masking.p_mask_txt,
        m.mcfg.max_tokens,
        cfg.seed,
        m.step,
        m.keys,
    )?;
    let mut tape = Tape::new();
    let bound = state.model.store.bind(&mut tape);
    let adversarial = lw.adversarial > 0.0;
    let gb_img: Option<Bound> = (adversarial && p.perturb_image).then(|| gens.image.params.bind(&mut tape));
    let gb_txt: Option<Bound> = (adversarial && p.perturb_text).then(|| gens.text.params.bind(&mut tape));

    let (mut v, w) = build_embeddings(&mut tape, m.mcfg, &state.model, &bound, &batch)?;
    if cfg.masking.p_mask_img > 0.0 {
        let f = region_mask_factors(&batch, cfg.masking.p_mask_img, cfg.seed, m.step, m.keys);
        v = tape.scale_rows(v, &f)?;
    }

    let mut terms = Vec::new();
    let mut stats = StepStats::default();
    let need_clean = lw.clean > 0.0 || (adversarial && p.beta > 0.0);
    let clean_logits = if need_clean {
        let enc = encode_forward(&mut tape, m.mcfg, &state.model, &bound, v, w, &batch)?;
        let logits = answer_logits(&mut tape, m.mcfg, &state.model, &bound, &enc)?;
        if lw.clean > 0.0 {
            let bce = tape.bce_with_logits(logits, &batch.labels)?;
            stats.loss_clean = Some(check_loss(&tape, bce, m.step)?);
            terms.push(weighted(&mut tape, bce, lw.clean));
        }
        Some(logits)
    } else {
        None
    };
    if adversarial {
        let inputs = AdversaryInputs {
            batch: &batch,
            v_embed: v,
            w_embed: w,
            clean_logits,
            keys: m.keys,
            seed: cfg.seed,
            step: m.step,
        };
        let adv = adversary_objective(
            &mut tape,
            m.mcfg,
            &state.model,
            &bound,
            gens,
            (gb_img.as_ref(), gb_txt.as_ref()),
            &inputs,
            p,
        )?;
        stats.loss_adv = Some(check_loss(&tape, adv.l_std, m.step)?);
        stats.r_kl = adv.r_kl.map(|r| tape.value(r).item());
        stats.delta_norm_mean = Some(adv.delta_norm_mean);
        terms.push(weighted(&mut tape, adv.objective, lw.adversarial));
    }
    let loss = sum_terms(&mut tape, &terms)?;
    check_loss(&tape, loss, m.step)?;
    let loss = weighted(&mut tape, loss, m.share);
    let g = tape.backward(loss)?;
    state.model.store.accumulate(&bound, &g)?;
    let gens = state.generators.as_mut().expect("checked above");
    if let Some(b) = &gb_img {
        gens.image.params.accumulate(b, &g)?;
    }
    if let Some(b) = &gb_txt {
        gens.text.params.accumulate(b, &g)?;
    }
    Ok(stats)
}

/// Generator bookkeeping after outer step number `done` (1-based): reinit
/// at multiples of the retrain interval, otherwise one ascent update at
/// multiples of the update interval.
fn generator_schedule(cfg: &TrainConfig, state: &mut TrainState, done: u64) -> Result<()> {
    let p = &cfg.perturbation;
    let adam = cfg.adam();
    let Some(gens) = state.generators.as_mut() else {
        return Ok(());
    };
    if done.is_multiple_of(p.retrain_interval as u64) {
        state.generation += 1;
        gens.image.reinit(cfg.seed, state.generation, p.retrain_lr);
        gens.text.reinit(cfg.seed, state.generation, p.retrain_lr);
    } else if done.is_multiple_of(p.update_interval as u64) {
        for g in [&mut gens.image, &mut gens.text] {
            if g.params.iter().all(|q| q.grad.is_some()) {
                g.params.negate_grads();
                adamw_store(&mut g.params, g.lr, &adam)?;
            }
        }
    }
    Ok(())
}

/// One optimizer step in the configured mode, with gradient accumulation
/// over `grad_accum_steps` equal micro-batches.
pub(crate) fn train_step(
    mcfg: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &EmbeddingBatch,
    keys: &[u64],
    lr: f64,
) -> Result<StepStats> {
    let n = cfg.grad_accum_steps;
    let size = batch.batch / n;
    let share = if n == 1 { 1.0 } else { 1.0 / n as f64 };
    let mut total = StepStats::default();
    for i in 0..n {
        let range = i * size..(i + 1) * size;
        let mb = if n == 1 { batch.clone() } else { batch.slice(range.clone()) };
        let m = Micro {
            mcfg,
            cfg,
            batch: &mb,
            keys: &keys[range],
            step: state.step,
            share,
        };
        let s = match cfg.mode {
            Mode::Clean => micro_clean(&m, state)?,
            Mode::Gaussian => micro_gaussian(&m, state)?,
            Mode::Pgd => micro_pgd(&m, state)?,
            Mode::Mango => micro_mango(&m, state)?,
        };
        total.add(&s);
    }
    if n > 1 {
        total.scale(share);
    }
    adamw_store(&mut state.model.store, lr, &cfg.adam())?;
    if cfg.mode == Mode::Mango {
        generator_schedule(cfg, state, state.step + 1)?;
    }
    Ok(total)
}
