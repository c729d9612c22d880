//! Trains every mode under several seeds on one synthetic suite and compares
//! median robustness scores and training throughput.
//!
//! ```text
//! cargo run --release --example directional_experiment -- [KEY=VALUE ...]
//! ```
//! Keys: `steps`, `lr`, `epsilon`, `sigma`, `qpc` (questions per category), `seeds`
//! (count), `modes` (comma list), `beta`, `mask`.

use anyhow::{bail, Context};
use mango_lab::experiment::{run_directional, DirectionalConfig, CATEGORIES};
use mango_lab::trainer::Mode;

fn main() -> anyhow::Result<()> {
    let mut cfg = DirectionalConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').context("arguments are KEY=VALUE")?;
        match k {
            "steps" => cfg.train.total_steps = v.parse()?,
            "lr" => cfg.train.peak_lr = v.parse()?,
            "epsilon" => cfg.train.perturbation.epsilon = v.parse()?,
            "beta" => cfg.train.perturbation.beta = v.parse()?,
            "sigma" => cfg.train.perturbation.sigma = v.parse()?,
            "mask" => {
                cfg.train.masking.p_mask_img = v.parse()?;
                cfg.train.masking.p_mask_txt = v.parse()?;
            }
            "qpc" => cfg.suite.questions_per_category = v.parse()?,
            "seeds" => cfg.seeds = (0..v.parse::<u64>()?).collect(),
            "modes" => cfg.modes = v.split(',').map(str::parse).collect::<Result<Vec<Mode>, _>>()?,
            _ => bail!("unknown key {k}"),
        }
    }

    let t0 = std::time::Instant::now();
    let out = run_directional(&cfg, &mut |r| {
        let cats: Vec<String> = CATEGORIES.iter().map(|c| format!("{c} {:6.2}", r.categories[*c])).collect();
        println!(
            "seed {} {:<8} meta {:6.2}  {}  {:5.1} steps/s",
            r.seed,
            r.mode.name(),
            r.meta_ave,
            cats.join("  "),
            r.steps_per_second
        );
    })?;

    println!("\nmedians over {} seeds ({:.0} s total)", cfg.seeds.len(), t0.elapsed().as_secs_f64());
    for (mode, s) in &out.modes {
        let cats: Vec<String> = CATEGORIES
            .iter()
            .map(|c| format!("{c} {:6.2}", s.median_categories[*c]))
            .collect();
        println!(
            "{mode:<8} meta {:6.2}  {}  {:5.1} steps/s",
            s.median_meta_ave,
            cats.join("  "),
            s.steps_per_second
        );
    }
    if cfg.modes.contains(&Mode::Mango) && cfg.modes.contains(&Mode::Clean) {
        println!(
            "mango improves over clean on: {:?}",
            out.improved_categories(Mode::Mango, Mode::Clean)
        );
    }
    Ok(())
}
