//! Trains the toy transformer on a synthetic suite in each of the four modes
//! (clean, Gaussian noise, PGD, learned generators), evaluates on the held-out
//! robustness split and prints a comparison table.
//!
//! ```text
//! cargo run --release --example train_modes -- [STEPS]
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use mango_lab::benchgen::{generate_suite, SuiteParams};
use mango_lab::cli::{ComparisonTable, TableRow};
use mango_lab::evaluation::{evaluate_split, model_config_for, EvalSplit};
use mango_lab::model::ModelConfig;
use mango_lab::trainer::{run_training, Mode, TrainConfig};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let suite = generate_suite(&SuiteParams {
        questions_per_category: 300,
        ..SuiteParams::default()
    })?;
    let mcfg = model_config_for(&suite, &ModelConfig::default());
    let data = suite.train_set()?;
    println!("{} training questions, vocab {}, {} answers", data.len(), mcfg.vocab, mcfg.answers);

    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let mut cfg = TrainConfig {
            mode,
            total_steps: steps,
            peak_lr: 1e-2,
            log_every: steps / 4,
            ..TrainConfig::default()
        };
        cfg.perturbation.epsilon = 0.1;
        let t = Instant::now();
        let (state, log) = run_training(&mcfg, &cfg, &data)?;
        let secs = t.elapsed().as_secs_f64();
        for r in &log {
            println!(
                "  {:<8} step {:>4} lr {:.2e} clean {:>8} adv {:>8}",
                mode.name(),
                r.step,
                r.lr,
                r.loss_clean.map_or("-".into(), |v| format!("{v:.4}")),
                r.loss_adv.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
        let report = evaluate_split(&mcfg, &state.model, &suite, EvalSplit::Eval, 256)?;
        println!("{:<8} {:.1} steps/s", mode.name(), steps as f64 / secs);
        let cells: BTreeMap<_, _> = report.cells.clone().into_iter().collect();
        rows.push(TableRow::new(mode.name(), cells)?);
    }
    print!("\n{}", ComparisonTable { rows }.to_text());
    Ok(())
}
