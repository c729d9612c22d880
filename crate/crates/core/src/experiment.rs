//! Multi-seed comparison of training modes on one synthetic suite.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchgen::{generate_suite, BenchmarkSuite, SuiteParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, model_config_for, EvalSplit};
use crate::model::ModelConfig;
use crate::trainer::{Mode, TrainConfig, Trainer};

pub const CATEGORIES: [&str; 4] = ["lingual", "reason", "visual", "answer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionalConfig {
    pub suite: SuiteParams,
    pub model: ModelConfig,
    /// Shared by every run; `mode` and `seed` are set per run.
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub eval_batch: usize,
}

impl Default for DirectionalConfig {
    /// Desk-scale setting: 2 layers, width 32, a few hundred steps per run.
    fn default() -> Self {
        let mut train = TrainConfig {
            total_steps: 800,
            peak_lr: 1e-2,
            log_every: 100,
            ..TrainConfig::default()
        };
        train.perturbation.epsilon = 0.1;
        Self {
            suite: SuiteParams {
                questions_per_category: 600,
                ..SuiteParams::default()
            },
            model: ModelConfig::default(),
            train,
            modes: Mode::ALL.to_vec(),
            seeds: (0..5).collect(),
            eval_batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub meta_ave: f64,
    pub categories: BTreeMap<String, f64>,
    pub train_seconds: f64,
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub median_meta_ave: f64,
    pub median_categories: BTreeMap<String, f64>,
    /// Total steps over total training seconds across seeds.
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalOutcome {
    pub runs: Vec<RunOutcome>,
    pub modes: BTreeMap<String, ModeSummary>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl DirectionalOutcome {
    pub fn summary(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.get(mode.name())
    }

    /// Categories whose median under `a` is strictly above that under `b`.
    pub fn improved_categories(&self, a: Mode, b: Mode) -> Vec<String> {
        let (Some(a), Some(b)) = (self.summary(a), self.summary(b)) else {
            return Vec::new();
        };
        CATEGORIES
            .iter()
            .filter(|c| a.median_categories.get(**c) > b.median_categories.get(**c))
            .map(|c| c.to_string())
            .collect()
    }
}

/// Trains and evaluates one `(mode, seed)` run on a prepared suite.
pub fn run_one(
    suite: &BenchmarkSuite,
    model: &ModelConfig,
    train: &TrainConfig,
    eval_batch: usize,
) -> Result<RunOutcome> {
    let mcfg = model_config_for(suite, model);
    let data = suite.train_set()?;
    let mut trainer = Trainer::new(mcfg.clone(), train.clone(), &data)?;
    let mut state = trainer.init_state()?;
    let t0 = Instant::now();
    trainer.run_until(&mut state, u64::MAX, &mut |_| {})?;
    let secs = t0.elapsed().as_secs_f64();
    let report = evaluate_split(&mcfg, &state.model, suite, EvalSplit::Eval, eval_batch)?;
    let meta_ave = report
        .get("meta_ave.robust")
        .ok_or_else(|| Error::Contract("suite lacks robustness benchmarks".into()))?;
    let categories = CATEGORIES
        .iter()
        .map(|c| {
            report
                .get(&format!("category.{c}"))
                .map(|v| (c.to_string(), v))
                .ok_or_else(|| Error::Contract(format!("category {c} missing")))
        })
        .collect::<Result<_>>()?;
    Ok(RunOutcome {
        mode: train.mode,
        seed: train.seed,
        meta_ave,
        categories,
        train_seconds: secs,
        steps_per_second: train.total_steps as f64 / secs.max(f64::MIN_POSITIVE),
    })
}

/// Runs every mode under every seed; `progress` sees each finished run.
pub fn run_directional(
    cfg: &DirectionalConfig,
    progress: &mut dyn FnMut(&RunOutcome),
) -> Result<DirectionalOutcome> {
    if cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("need at least one mode and one seed".into()));
    }
    let suite = generate_suite(&cfg.suite)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            let train = TrainConfig {
                mode,
                seed,
                ..cfg.train.clone()
            };
            let r = run_one(&suite, &cfg.model, &train, cfg.eval_batch)?;
            progress(&r);
            runs.push(r);
        }
    }
    let mut modes = BTreeMap::new();
    for &mode in &cfg.modes {
        let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.mode == mode).collect();
        let metas: Vec<f64> = mine.iter().map(|r| r.meta_ave).collect();
        let median_categories = CATEGORIES
            .iter()
            .map(|c| {
                let v: Vec<f64> = mine.iter().map(|r| r.categories[*c]).collect();
                (c.to_string(), median(&v).expect("non-empty"))
            })
            .collect();
        let steps: f64 = mine.len() as f64 * cfg.train.total_steps as f64;
        let secs: f64 = mine.iter().map(|r| r.train_seconds).sum();
        modes.insert(
            mode.name().to_string(),
            ModeSummary {
                median_meta_ave: median(&metas).expect("non-empty"),
                median_categories,
                steps_per_second: steps / secs.max(f64::MIN_POSITIVE),
            },
        );
    }
    Ok(DirectionalOutcome { runs, modes })
}
