//! Command implementations behind the `mango` binary: config resolution,
//! suite generation, training, evaluation and cross-run reports.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::benchgen::{generate_suite, BenchmarkSuite, SuiteParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_split, model_config_for, EvalSplit, MetricReport};
use crate::metrics::{meta_average, polygon_score, BenchScore};
use crate::model::ModelConfig;
use crate::trainer::{Mode, TrainConfig, TrainState, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
/// Wall-clock sidecar, kept out of every hashed artifact.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 256 }
    }
}

/// Everything a command needs, as read from a TOML file with environment
/// and flag overrides applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Command-line sources of configuration.
#[derive(Debug, Clone, Default)]
pub struct ConfigFlags {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub overrides: Vec<String>,
}

pub const ENV_SEED: &str = "MANGO_SEED";
pub const ENV_MODE: &str = "MANGO_MODE";
/// Semicolon-separated `KEY=VALUE` list.
pub const ENV_OVERRIDES: &str = "MANGO_OVERRIDES";

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted `KEY=VALUE` inside a TOML tree. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (leaf, path) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in path {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("unknown config section {key:?}")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key:?} is not inside a table")))?;
    if !table.contains_key(*leaf) {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    table.insert(leaf.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o.as_ref())?;
        }
        v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    fn set_seed(&mut self, seed: u64) {
        self.suite.seed = seed;
        self.train.seed = seed;
    }

    /// File, then environment, then flags. `env` abstracts the process
    /// environment for testing.
    pub fn resolve(flags: &ConfigFlags, env: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Self::default(),
        };
        if let Some(o) = env(ENV_OVERRIDES) {
            let list: Vec<&str> = o.split(';').filter(|s| !s.trim().is_empty()).collect();
            cfg = cfg.with_overrides(&list)?;
        }
        if let Some(s) = env(ENV_SEED) {
            cfg.set_seed(s.trim().parse().map_err(|_| Error::Config(format!("{ENV_SEED}={s:?}")))?);
        }
        if let Some(m) = env(ENV_MODE) {
            cfg.train.mode = m.trim().parse()?;
        }
        cfg = cfg.with_overrides(&flags.overrides)?;
        if let Some(s) = flags.seed {
            cfg.set_seed(s);
        }
        if let Some(m) = flags.mode {
            cfg.train.mode = m;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(CONFIG_FILE), self.to_toml()?.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(CONFIG_FILE);
        Self::from_toml(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, refusing a non-empty one unless `overwrite`.
pub fn prepare_out_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let mut it = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a suite and the resolved config; returns the statistics lines.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<Vec<String>> {
    prepare_out_dir(out, overwrite)?;
    let suite = generate_suite(&cfg.suite)?;
    suite.write(out)?;
    cfg.write(out)?;
    let mut lines = vec![format!(
        "suite seed {} questions {} scenes {} hash {}",
        suite.manifest.seed,
        suite.questions.len(),
        suite.scenes.len(),
        suite.manifest.content_hash
    )];
    lines.extend(suite.stats());
    Ok(lines)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub step: u64,
    pub total_steps: usize,
    pub model_hash: String,
    pub suite_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub steps: u64,
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub overwrite: bool,
    /// Continue from the checkpoint already in the run directory.
    pub resume: bool,
    /// Stop (and checkpoint) once this many steps are done.
    pub until: Option<u64>,
}

fn append_line(file: &mut File, path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut line = serde_json::to_vec(v)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Trains in the configured mode and writes checkpoints, the log, the
/// resolved config and a summary into `out`.
pub fn cmd_train(cfg: &RunConfig, suite_dir: &Path, out: &Path, opts: &TrainOptions) -> Result<(TrainSummary, Timing)> {
    let suite = BenchmarkSuite::read(suite_dir)?;
    let mcfg = model_config_for(&suite, &cfg.model);
    let data = suite.train_set()?;
    let mut trainer = Trainer::new(mcfg.clone(), cfg.train.clone(), &data)?;

    let mut state = if opts.resume {
        let stored = RunConfig::read(out)?;
        if &stored != cfg {
            return Err(Error::Config(format!(
                "resume config differs from {}",
                out.join(CONFIG_FILE).display()
            )));
        }
        TrainState::load(out, &mcfg)?
    } else {
        prepare_out_dir(out, opts.overwrite)?;
        cfg.write(out)?;
        trainer.init_state()?
    };

    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(opts.resume)
        .write(true)
        .truncate(!opts.resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let start_step = state.step;
    let t0 = Instant::now();
    let mut io_err = None;
    let result = trainer.run_until(&mut state, opts.until.unwrap_or(u64::MAX), &mut |r| {
        if io_err.is_none() {
            let v = serde_json::to_value(r).expect("log record serializes");
            io_err = append_line(&mut log, &log_path, &v).err();
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Err(e) = result {
        let step = match &e {
            Error::NumericFault { step, .. } => *step as u64,
            _ => state.step,
        };
        append_line(
            &mut log,
            &log_path,
            &json!({"event": "fault", "step": step, "detail": e.to_string()}),
        )?;
        return Err(e);
    }
    let seconds = t0.elapsed().as_secs_f64();

    let model_hash = state.save(out, &mcfg)?;
    let summary = TrainSummary {
        mode: cfg.train.mode,
        step: state.step,
        total_steps: cfg.train.total_steps,
        model_hash,
        suite_hash: suite.manifest.content_hash.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write_file(&out.join(SUMMARY_FILE), &bytes)?;
    let steps = state.step - start_step;
    let timing = Timing {
        seconds,
        steps,
        steps_per_second: if seconds > 0.0 { steps as f64 / seconds } else { 0.0 },
    };
    write_file(&out.join(TIMING_FILE), &serde_json::to_vec_pretty(&timing)?)?;
    Ok((summary, timing))
}

pub fn report_file(split: EvalSplit, ext: &str) -> String {
    format!("report_{}.{ext}", split.name())
}

/// Evaluates the checkpoint in `run` on one split and writes
/// `report_<split>.json` and `.csv` into `out` (default: `run`).
pub fn cmd_eval(run: &Path, suite_dir: &Path, split: EvalSplit, out: Option<&Path>) -> Result<MetricReport> {
    let cfg = RunConfig::read(run)?;
    let suite = BenchmarkSuite::read(suite_dir)?;
    let mcfg = model_config_for(&suite, &cfg.model);
    let state = TrainState::load(run, &mcfg)?;
    let mut report = evaluate_split(&mcfg, &state.model, &suite, split, cfg.eval.batch_size)?;
    report.model_hash = Some(state.model_hash(&mcfg)?);
    let out = out.unwrap_or(run);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(report_file(split, "json")), &report.to_json()?)?;
    write_file(&out.join(report_file(split, "csv")), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Benchmark columns of the comparison table, in display order.
pub const TABLE_BENCHMARKS: [&str; 10] = [
    "rephrasings",
    "lol_compose",
    "lol_supplement",
    "introspect",
    "gqa",
    "iv_edit",
    "cv_edit",
    "answer_shift",
    "head_tail",
    "standard",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: BTreeMap<String, BenchScore>,
    pub meta_ave: Option<f64>,
    pub polygon: BTreeMap<String, f64>,
}

impl TableRow {
    pub fn new(label: impl Into<String>, cells: BTreeMap<String, BenchScore>) -> Result<Self> {
        let present: Vec<BenchScore> = TABLE_BENCHMARKS
            .iter()
            .filter_map(|b| cells.get(*b).copied())
            .collect();
        let meta_ave = if present.is_empty() {
            None
        } else {
            Some(meta_average(&present)?)
        };
        let mut polygon = BTreeMap::new();
        for (b, c) in &cells {
            if TABLE_BENCHMARKS.contains(&b.as_str()) {
                polygon.insert(b.clone(), polygon_score(b, &[c.value])?);
            }
        }
        if let (Some(c), Some(s)) = (cells.get("lol_compose"), cells.get("lol_supplement")) {
            polygon.insert("vqa_lol".into(), polygon_score("vqa_lol", &[c.value, s.value])?);
        }
        Ok(Self {
            label: label.into(),
            cells,
            meta_ave,
            polygon,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

const POLYGON_COLUMNS: [&str; 3] = ["iv_edit", "cv_edit", "vqa_lol"];

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.2}"))
}

impl ComparisonTable {
    fn header() -> Vec<String> {
        let mut h = vec!["run".to_string()];
        h.extend(TABLE_BENCHMARKS.iter().map(|b| b.to_string()));
        h.push("meta_ave".into());
        h.extend(POLYGON_COLUMNS.iter().map(|b| format!("polygon.{b}")));
        h
    }

    fn row_cells(r: &TableRow) -> Vec<String> {
        let mut c = vec![r.label.clone()];
        c.extend(TABLE_BENCHMARKS.iter().map(|b| fmt_cell(r.cells.get(*b).map(|x| x.value))));
        c.push(fmt_cell(r.meta_ave));
        c.extend(POLYGON_COLUMNS.iter().map(|b| fmt_cell(r.polygon.get(*b).copied())));
        c
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::header().join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::row_cells(r).join(","));
            s.push('\n');
        }
        s
    }

    /// Space-aligned text rendering.
    pub fn to_text(&self) -> String {
        let mut grid = vec![Self::header()];
        grid.extend(self.rows.iter().map(Self::row_cells));
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|j| grid.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in grid {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// One row per run directory, labeled `<mode>:<dir name>`, from the
/// `report_<split>.json` written by [`cmd_eval`].
pub fn cmd_report(runs: &[PathBuf], split: EvalSplit, out: Option<&Path>) -> Result<ComparisonTable> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for run in runs {
        let cfg = RunConfig::read(run)?;
        let p = run.join(report_file(split, "json"));
        let report: MetricReport =
            serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let name = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push(TableRow::new(format!("{}:{name}", cfg.train.mode.name()), report.cells)?);
    }
    let table = ComparisonTable { rows };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_file(&out.join("report.csv"), table.to_csv().as_bytes())?;
        write_file(&out.join("report.txt"), table.to_text().as_bytes())?;
    }
    Ok(table)
}
