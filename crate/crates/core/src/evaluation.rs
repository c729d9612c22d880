//! Runs a model over a benchmark suite and routes predictions to the
//! metric that each benchmark defines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::benchgen::{Benchmark, BenchmarkSuite, QuestionRecord, Robustness, Split};
use crate::data::collate;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, consensus_score, consistency_quadrants, flips_decomposition, meta_average, ood_report,
    polygon_score, BenchScore, EditKind, EditPair, GroupWeighting,
};
use crate::model::{infer_logits, predict_answer, ModelConfig, ModelParams};

/// Room for `[CLS]` and inserted `[MASK]` tokens beyond the longest question.
pub const TOKEN_SLACK: usize = 9;

/// Question subsets accepted by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Eval,
    Lingual,
    Reason,
    Visual,
    Answer,
    Base,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 7] = [
        EvalSplit::Train,
        EvalSplit::Eval,
        EvalSplit::Lingual,
        EvalSplit::Reason,
        EvalSplit::Visual,
        EvalSplit::Answer,
        EvalSplit::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Eval => "eval",
            EvalSplit::Lingual => "lingual",
            EvalSplit::Reason => "reason",
            EvalSplit::Visual => "visual",
            EvalSplit::Answer => "answer",
            EvalSplit::Base => "base",
        }
    }

    pub fn includes(self, q: &QuestionRecord) -> bool {
        let tag = match self {
            EvalSplit::Train => return q.split == Split::Train,
            EvalSplit::Eval => return q.split == Split::Eval,
            EvalSplit::Lingual => Robustness::Lingual,
            EvalSplit::Reason => Robustness::Reason,
            EvalSplit::Visual => Robustness::Visual,
            EvalSplit::Answer => Robustness::Answer,
            EvalSplit::Base => Robustness::Base,
        };
        q.split == Split::Eval && q.robustness == tag
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Model shape dictated by a suite; width and depth come from `base`.
pub fn model_config_for(suite: &BenchmarkSuite, base: &ModelConfig) -> ModelConfig {
    let m = &suite.manifest;
    ModelConfig {
        region_dim: m.region_dim,
        max_regions: m.params.scene.max_objects.max(1),
        max_tokens: m.max_question_tokens + TOKEN_SLACK,
        answers: m.answers.len(),
        vocab: m.vocab.len(),
        ..base.clone()
    }
}

/// Predicted answer word per question id.
pub fn predict(
    config: &ModelConfig,
    params: &ModelParams,
    suite: &BenchmarkSuite,
    questions: &[&QuestionRecord],
    batch_size: usize,
) -> Result<BTreeMap<u64, String>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut out = BTreeMap::new();
    for chunk in questions.chunks(batch_size) {
        let examples = chunk.iter().map(|q| suite.example(q)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = examples.iter().collect();
        let batch = collate(&refs, config)?;
        let logits = infer_logits(config, params, &batch)?;
        for (q, a) in chunk.iter().zip(predict_answer(&logits)) {
            let word = suite
                .manifest
                .answers
                .get(a)
                .ok_or_else(|| Error::Contract(format!("answer index {a} outside vocabulary")))?;
            out.insert(q.question_id, word.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub suite_hash: String,
    pub model_hash: Option<String>,
    pub questions: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Per-benchmark cells entering Meta-Ave.
    pub cells: BTreeMap<String, BenchScore>,
    /// Metrics that were requested by the layout but had no data.
    pub absent: Vec<String>,
}

/// Fixed metric layout of the CSV export.
pub fn csv_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for b in Benchmark::ALL {
        cols.push(format!("{}.acc", b.name()));
    }
    for k in 1..=4 {
        cols.push(format!("rephrasings.cs{k}"));
    }
    for q in ["mss", "msx", "mxs", "mxx", "s_given_m", "main_acc"] {
        cols.push(format!("introspect.{q}"));
    }
    for b in ["iv_edit", "cv_edit"] {
        for f in ["flips", "p2n", "n2p", "n2n", "polygon"] {
            cols.push(format!("{b}.{f}"));
        }
    }
    for f in ["all", "head", "tail", "delta"] {
        cols.push(format!("head_tail.{f}"));
    }
    cols.push("vqa_lol.polygon".into());
    for c in ["lingual", "reason", "visual", "answer"] {
        cols.push(format!("category.{c}"));
    }
    cols.push("meta_ave.robust".into());
    cols.push("meta_ave.all".into());
    cols
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }

    /// `split,metric,value` rows over [`csv_columns`]; missing cells read
    /// `absent`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,metric,value\n");
        for c in csv_columns() {
            match self.metrics.get(&c) {
                Some(v) => writeln!(s, "{},{c},{v}", self.split),
                None => writeln!(s, "{},{c},absent", self.split),
            }
            .expect("write to string");
        }
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores predictions for the questions selected by `split`.
pub fn score_predictions(
    suite: &BenchmarkSuite,
    split: EvalSplit,
    preds: &BTreeMap<u64, String>,
) -> Result<MetricReport> {
    let selected: Vec<&QuestionRecord> = suite.questions.iter().filter(|q| split.includes(q)).collect();
    if selected.is_empty() {
        return Err(Error::Contract(format!("split {} selects no questions", split.name())));
    }
    let pred = |q: &QuestionRecord| -> Result<&String> {
        preds
            .get(&q.question_id)
            .ok_or_else(|| Error::Contract(format!("no prediction for question {}", q.question_id)))
    };
    let correct = |q: &QuestionRecord| -> Result<bool> { Ok(*pred(q)? == q.answer) };

    let mut m = BTreeMap::new();
    let mut by_bench: BTreeMap<Benchmark, Vec<&QuestionRecord>> = BTreeMap::new();
    for q in &selected {
        by_bench.entry(q.benchmark).or_default().push(q);
    }
    for (b, qs) in &by_bench {
        let c = qs.iter().map(|q| correct(q)).collect::<Result<Vec<_>>>()?;
        m.insert(format!("{}.acc", b.name()), accuracy(&c)?);
    }

    if let Some(qs) = by_bench.get(&Benchmark::Rephrasings) {
        let mut groups: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        for q in qs {
            if let Some(g) = &q.group_id {
                groups.entry(g).or_default().push(correct(q)?);
            }
        }
        let groups: Vec<Vec<bool>> = groups.into_values().collect();
        let kmax = groups.iter().map(Vec::len).min().unwrap_or(0);
        for k in 1..=kmax {
            m.insert(
                format!("rephrasings.cs{k}"),
                consensus_score(&groups, k, GroupWeighting::Unweighted)?,
            );
        }
    }

    if let Some(qs) = by_bench.get(&Benchmark::Introspect) {
        let pairs = qs
            .iter()
            .filter_map(|q| q.main_id.map(|id| (id, q)))
            .map(|(id, sub)| {
                let main = suite
                    .question(id)
                    .ok_or_else(|| Error::Contract(format!("missing main question {id}")))?;
                Ok((correct(main)?, correct(sub)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if !pairs.is_empty() {
            let q = consistency_quadrants(&pairs)?;
            m.insert("introspect.mss".into(), q.mss);
            m.insert("introspect.msx".into(), q.msx);
            m.insert("introspect.mxs".into(), q.mxs);
            m.insert("introspect.mxx".into(), q.mxx);
            m.insert("introspect.main_acc".into(), q.main_accuracy);
            if let Some(s) = q.s_given_m {
                m.insert("introspect.s_given_m".into(), s);
            }
        }
    }

    for (b, kind) in [(Benchmark::IvEdit, EditKind::Invariant), (Benchmark::CvEdit, EditKind::Decrement)] {
        let Some(qs) = by_bench.get(&b) else { continue };
        let pairs = qs
            .iter()
            .filter_map(|q| q.source_id.map(|id| (id, q)))
            .map(|(id, edited)| {
                let real = suite
                    .question(id)
                    .ok_or_else(|| Error::Contract(format!("missing source question {id}")))?;
                Ok(EditPair {
                    kind,
                    real_answer: pred(real)?.clone(),
                    real_correct: correct(real)?,
                    edited_answer: pred(edited)?.clone(),
                    edited_correct: correct(edited)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            continue;
        }
        let f = flips_decomposition(&pairs)?;
        let n = b.name();
        m.insert(format!("{n}.flips"), f.flips);
        m.insert(format!("{n}.p2n"), f.p2n);
        m.insert(format!("{n}.n2p"), f.n2p);
        m.insert(format!("{n}.n2n"), f.n2n);
        m.insert(format!("{n}.polygon"), polygon_score(n, &[f.flips])?);
    }

    if let Some(qs) = by_bench.get(&Benchmark::HeadTail) {
        let items = qs
            .iter()
            .map(|q| Ok((q.head.unwrap_or(true), correct(q)?)))
            .collect::<Result<Vec<_>>>()?;
        let r = ood_report(&items)?;
        m.insert("head_tail.all".into(), r.all);
        for (k, v) in [("head", r.head), ("tail", r.tail), ("delta", r.delta)] {
            if let Some(v) = v {
                m.insert(format!("head_tail.{k}"), v);
            }
        }
    }

    if let (Some(c), Some(s)) = (m.get("lol_compose.acc"), m.get("lol_supplement.acc")) {
        let p = polygon_score("vqa_lol", &[*c, *s])?;
        m.insert("vqa_lol.polygon".into(), p);
    }

    let mut cells = BTreeMap::new();
    for (b, key, flip) in [
        (Benchmark::Standard, "standard.acc", false),
        (Benchmark::Rephrasings, "rephrasings.acc", false),
        (Benchmark::LolCompose, "lol_compose.acc", false),
        (Benchmark::LolSupplement, "lol_supplement.acc", false),
        (Benchmark::Introspect, "introspect.mss", false),
        (Benchmark::IvEdit, "iv_edit.flips", true),
        (Benchmark::CvEdit, "cv_edit.flips", true),
        (Benchmark::AnswerShift, "answer_shift.acc", false),
        (Benchmark::HeadTail, "head_tail.all", false),
    ] {
        if let Some(&v) = m.get(key) {
            let cell = if flip { BenchScore::flips(v) } else { BenchScore::score(v) };
            cells.insert(b.name().to_string(), cell);
        }
    }

    let categories: [(&str, &[&str]); 4] = [
        ("lingual", &["rephrasings"]),
        ("reason", &["lol_compose", "lol_supplement", "introspect"]),
        ("visual", &["iv_edit", "cv_edit"]),
        ("answer", &["answer_shift", "head_tail"]),
    ];
    for (cat, members) in categories {
        let vals: Option<Vec<f64>> = members.iter().map(|b| cells.get(*b).map(BenchScore::signed)).collect();
        if let Some(v) = vals {
            m.insert(format!("category.{cat}"), mean(&v));
        }
    }
    let robust: Vec<BenchScore> = cells
        .iter()
        .filter(|(k, _)| k.as_str() != "standard")
        .map(|(_, c)| *c)
        .collect();
    if !robust.is_empty() {
        m.insert("meta_ave.robust".into(), meta_average(&robust)?);
    }
    let all: Vec<BenchScore> = cells.values().copied().collect();
    if !all.is_empty() {
        m.insert("meta_ave.all".into(), meta_average(&all)?);
    }

    let absent = csv_columns().into_iter().filter(|c| !m.contains_key(c)).collect();
    Ok(MetricReport {
        split: split.name().to_string(),
        suite_hash: suite.manifest.content_hash.clone(),
        model_hash: None,
        questions: selected.len(),
        metrics: m,
        cells,
        absent,
    })
}

/// Predicts and scores one split.
pub fn evaluate_split(
    config: &ModelConfig,
    params: &ModelParams,
    suite: &BenchmarkSuite,
    split: EvalSplit,
    batch_size: usize,
) -> Result<MetricReport> {
    let selected: Vec<&QuestionRecord> = suite
        .questions
        .iter()
        .filter(|q| split.includes(q) || linked_from(suite, q, split))
        .collect();
    let preds = predict(config, params, suite, &selected, batch_size)?;
    score_predictions(suite, split, &preds)
}

/// Main and source questions referenced by selected questions need
/// predictions too.
fn linked_from(suite: &BenchmarkSuite, q: &QuestionRecord, split: EvalSplit) -> bool {
    suite.questions.iter().any(|o| {
        split.includes(o) && (o.main_id == Some(q.question_id) || o.source_id == Some(q.question_id))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{generate_suite, SuiteParams};

    fn suite() -> BenchmarkSuite {
        generate_suite(&SuiteParams {
            seed: 5,
            scenes: 30,
            questions_per_category: 160,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let s = suite();
        let preds: BTreeMap<u64, String> = s.questions.iter().map(|q| (q.question_id, q.answer.clone())).collect();
        let r = score_predictions(&s, EvalSplit::Eval, &preds).unwrap();
        for b in Benchmark::ALL {
            assert_eq!(r.get(&format!("{}.acc", b.name())), Some(100.0), "{}", b.name());
        }
        assert_eq!(r.get("iv_edit.flips"), Some(0.0));
        assert_eq!(r.get("cv_edit.flips"), Some(0.0));
        assert_eq!(r.get("introspect.s_given_m"), Some(100.0));
        assert_eq!(r.get("rephrasings.cs4"), Some(100.0));
        assert_eq!(r.get("category.visual"), Some(0.0));
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let s = suite();
        assert!(score_predictions(&s, EvalSplit::Base, &BTreeMap::new()).is_err());
    }

    #[test]
    fn csv_marks_absent_cells() {
        let s = suite();
        let preds: BTreeMap<u64, String> = s.questions.iter().map(|q| (q.question_id, "yes".into())).collect();
        let r = score_predictions(&s, EvalSplit::Base, &preds).unwrap();
        let csv = r.to_csv();
        assert!(csv.contains("base,iv_edit.flips,absent"));
        assert_eq!(csv.lines().count(), csv_columns().len() + 1);
    }
}
