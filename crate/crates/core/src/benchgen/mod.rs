//! Seeded synthetic benchmark suites with the grouping metadata every
//! robustness metric needs.

mod program;
mod questions;
mod scene;
mod splits;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{CLS_ID, MASK_ID, PAD_ID};
use crate::rng::{stream, Purpose, StreamRng};

pub use program::{
    evaluate, render, Answer, AttrKind, Filter, Program, Style, EVAL_PREFIXES, QUESTION_WORDS,
    TRAIN_PREFIXES,
};
pub use questions::{
    compose_logical, edit_remove_counted, edit_remove_irrelevant, gen_composition, gen_program,
    make_rephrasings, sub_questions, Connective, QType,
};
pub use scene::{gen_scene, object_features, Color, Object, Scene, SceneParams, Shape, Size, ONE_HOT_WIDTH};
pub use splits::{shift_answer_priors, split_head_tail, total_variation, ShiftOutcome, HEAVY_SHARE};

pub const SUITE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Robustness {
    Lingual,
    Reason,
    Visual,
    Answer,
    Base,
}

impl Robustness {
    pub const ALL: [Robustness; 5] = [
        Robustness::Lingual,
        Robustness::Reason,
        Robustness::Visual,
        Robustness::Answer,
        Robustness::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Robustness::Lingual => "lingual",
            Robustness::Reason => "reason",
            Robustness::Visual => "visual",
            Robustness::Answer => "answer",
            Robustness::Base => "base",
        }
    }
}

/// Which synthetic benchmark a question belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Standard,
    Rephrasings,
    LolCompose,
    LolSupplement,
    Introspect,
    IvEdit,
    CvEdit,
    AnswerShift,
    HeadTail,
}

impl Benchmark {
    pub const ALL: [Benchmark; 9] = [
        Benchmark::Standard,
        Benchmark::Rephrasings,
        Benchmark::LolCompose,
        Benchmark::LolSupplement,
        Benchmark::Introspect,
        Benchmark::IvEdit,
        Benchmark::CvEdit,
        Benchmark::AnswerShift,
        Benchmark::HeadTail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Standard => "standard",
            Benchmark::Rephrasings => "rephrasings",
            Benchmark::LolCompose => "lol_compose",
            Benchmark::LolSupplement => "lol_supplement",
            Benchmark::Introspect => "introspect",
            Benchmark::IvEdit => "iv_edit",
            Benchmark::CvEdit => "cv_edit",
            Benchmark::AnswerShift => "answer_shift",
            Benchmark::HeadTail => "head_tail",
        }
    }

    pub fn robustness(self) -> Robustness {
        match self {
            Benchmark::Standard => Robustness::Base,
            Benchmark::Rephrasings => Robustness::Lingual,
            Benchmark::LolCompose | Benchmark::LolSupplement | Benchmark::Introspect => Robustness::Reason,
            Benchmark::IvEdit | Benchmark::CvEdit => Robustness::Visual,
            Benchmark::AnswerShift | Benchmark::HeadTail => Robustness::Answer,
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: u64,
    pub scene_id: u64,
    pub tokens: Vec<String>,
    pub answer: String,
    pub q_type: QType,
    pub program: Program,
    /// Rephrase group or local OOD group.
    pub group_id: Option<String>,
    /// Main question of a sub-question.
    pub main_id: Option<u64>,
    /// Source question of an edited-scene twin.
    pub source_id: Option<u64>,
    pub split: Split,
    pub robustness: Robustness,
    pub benchmark: Benchmark,
    /// Head/tail tag for local-group OOD questions.
    pub head: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteParams {
    pub seed: u64,
    pub scenes: usize,
    /// Scale of each robustness category; see the crate README for the
    /// per-benchmark breakdown.
    pub questions_per_category: usize,
    pub rephrasings: usize,
    pub tv_floor: f64,
    pub scene: SceneParams,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 200,
            questions_per_category: 4000,
            rephrasings: 3,
            tv_floor: 0.3,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub params: SuiteParams,
    pub vocab: Vec<String>,
    pub answers: Vec<String>,
    pub region_dim: usize,
    pub max_question_tokens: usize,
    /// Question counts keyed `benchmark/split`.
    pub counts: BTreeMap<String, usize>,
    /// Realized train/eval total variation per answer-shift key.
    pub shift_tv: BTreeMap<String, f64>,
    pub shift_excluded: Vec<String>,
    pub edits_skipped: usize,
    /// SHA-256 over the scenes and questions files.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
    pub questions: Vec<QuestionRecord>,
}

/// Token vocabulary: reserved ids followed by every template word.
pub fn vocabulary() -> Vec<String> {
    let mut v = vec!["[PAD]".to_string(), "[CLS]".to_string(), "[MASK]".to_string()];
    debug_assert_eq!((PAD_ID, CLS_ID, MASK_ID), (0, 1, 2));
    v.extend(QUESTION_WORDS.iter().map(|w| w.to_string()));
    v
}

/// Answer vocabulary: yes/no, attribute words, then counts `0..=max_count`.
pub fn answer_vocabulary(max_count: usize) -> Vec<String> {
    let mut v = vec!["yes".to_string(), "no".to_string()];
    v.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
    v.extend(Color::ALL.iter().map(|s| s.word().to_string()));
    v.extend(Size::ALL.iter().map(|s| s.word().to_string()));
    v.extend((0..=max_count).map(|n| n.to_string()));
    v
}

fn qtype_for<R: Rng + ?Sized>(rng: &mut R) -> QType {
    let u: f64 = rng.random();
    if u < 0.35 {
        QType::Existence
    } else if u < 0.6 {
        QType::Count
    } else {
        QType::Attribute
    }
}

/// Coarse local group for head/tail tagging: question kind and shape.
fn local_group(p: &Program) -> String {
    let (kind, f) = match p {
        Program::Exists(f) => ("exists", f),
        Program::Count(f) => ("count", f),
        Program::Query { attr, filter } => (
            match attr {
                AttrKind::Shape => "shape",
                AttrKind::Color => "color",
                AttrKind::Size => "size",
            },
            filter,
        ),
        _ => return "logical".into(),
    };
    let anchor = f
        .shape
        .map(|s| s.word())
        .or(f.color.map(|c| c.word()))
        .unwrap_or("any");
    format!("{kind}:{anchor}")
}

struct Builder {
    params: SuiteParams,
    scenes: Vec<Scene>,
    base_scenes: usize,
    questions: Vec<QuestionRecord>,
    edits_skipped: usize,
}

struct Draft {
    scene: usize,
    program: Program,
    style: Style,
    benchmark: Benchmark,
    split: Split,
    group_id: Option<String>,
    main_id: Option<u64>,
    source_id: Option<u64>,
}

impl Builder {
    fn rng(&self, b: Benchmark, j: usize) -> StreamRng {
        stream(self.params.seed, Purpose::Question, &[b.tag(), j as u64])
    }

    fn pick_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.base_scenes)
    }

    /// A scene and a base-type program on it, redrawing the scene when the
    /// sampled template has no valid instance.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Program)> {
        let mut last = None;
        for _ in 0..16 {
            let s = self.pick_scene(rng);
            match gen_program(&self.scenes[s], qtype_for(rng), rng) {
                Ok(p) => return Ok((s, p)),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn push(&mut self, d: Draft) -> Result<u64> {
        let scene = &self.scenes[d.scene];
        let answer = evaluate(&d.program, scene)?.word();
        let id = self.questions.len() as u64;
        self.questions.push(QuestionRecord {
            question_id: id,
            scene_id: scene.scene_id,
            tokens: render(&d.program, &d.style).into_iter().map(String::from).collect(),
            answer,
            q_type: QType::of(&d.program),
            program: d.program,
            group_id: d.group_id,
            main_id: d.main_id,
            source_id: d.source_id,
            split: d.split,
            robustness: d.benchmark.robustness(),
            benchmark: d.benchmark,
            head: None,
        });
        Ok(id)
    }

    fn simple(&mut self, scene: usize, program: Program, benchmark: Benchmark, split: Split) -> Result<u64> {
        self.push(Draft {
            scene,
            program,
            style: Style::canonical(),
            benchmark,
            split,
            group_id: None,
            main_id: None,
            source_id: None,
        })
    }

    fn add_scene(&mut self, s: Scene) -> usize {
        self.scenes.push(s);
        self.scenes.len() - 1
    }

    fn standard(&mut self, n: usize) -> Result<()> {
        for j in 0..n {
            let mut rng = self.rng(Benchmark::Standard, j);
            let (s, p) = self.draw(&mut rng)?;
            let split = if j < n * 3 / 4 { Split::Train } else { Split::Eval };
            self.simple(s, p, Benchmark::Standard, split)?;
        }
        Ok(())
    }

    fn rephrasings(&mut self, groups: usize) -> Result<()> {
        for g in 0..groups {
            let mut rng = self.rng(Benchmark::Rephrasings, g);
            let (s, p) = self.draw(&mut rng)?;
            let eval = g % 2 == 1;
            let split = if eval { Split::Eval } else { Split::Train };
            let gid = Some(format!("rephrase-{g}"));
            let mut styles = vec![Style::canonical()];
            styles.extend(make_rephrasings(self.params.rephrasings, eval, &mut rng));
            for style in styles {
                self.push(Draft {
                    scene: s,
                    program: p.clone(),
                    style,
                    benchmark: Benchmark::Rephrasings,
                    split,
                    group_id: gid.clone(),
                    main_id: None,
                    source_id: None,
                })?;
            }
        }
        Ok(())
    }

    fn reason(&mut self, n: usize) -> Result<()> {
        for j in 0..n / 2 {
            let mut rng = self.rng(Benchmark::LolCompose, j);
            let s = self.pick_scene(&mut rng);
            let p = if rng.random_bool(0.3) {
                gen_composition(&self.scenes[s], 0, true, &mut rng)
            } else {
                gen_composition(&self.scenes[s], 1, false, &mut rng)
            };
            self.simple(s, p, Benchmark::LolCompose, Split::Train)?;
        }
        for j in 0..n / 4 {
            let mut rng = self.rng(Benchmark::LolCompose, n + j);
            let s = self.pick_scene(&mut rng);
            let depth = rng.random_range(2..=3);
            let p = gen_composition(&self.scenes[s], depth, false, &mut rng);
            self.simple(s, p, Benchmark::LolCompose, Split::Eval)?;
        }
        for j in 0..n / 8 {
            let mut rng = self.rng(Benchmark::LolSupplement, j);
            let s = self.pick_scene(&mut rng);
            let depth = rng.random_range(1..=2);
            let p = gen_composition(&self.scenes[s], depth, true, &mut rng);
            self.simple(s, p, Benchmark::LolSupplement, Split::Eval)?;
        }
        for j in 0..n / 8 {
            let mut rng = self.rng(Benchmark::Introspect, j);
            let s = self.pick_scene(&mut rng);
            let p = if rng.random_bool(0.5) {
                gen_program(&self.scenes[s], QType::Count, &mut rng)?
            } else {
                gen_composition(&self.scenes[s], 1, false, &mut rng)
            };
            let subs = sub_questions(&p);
            let main = self.simple(s, p, Benchmark::Introspect, Split::Eval)?;
            for sp in subs {
                self.push(Draft {
                    scene: s,
                    program: sp,
                    style: Style::canonical(),
                    benchmark: Benchmark::Introspect,
                    split: Split::Eval,
                    group_id: None,
                    main_id: Some(main),
                    source_id: None,
                })?;
            }
        }
        Ok(())
    }

    fn twin(&mut self, scene: usize, program: Program, benchmark: Benchmark, edited: Scene) -> Result<()> {
        let src = self.simple(scene, program.clone(), benchmark, Split::Eval)?;
        let t = self.add_scene(edited);
        self.push(Draft {
            scene: t,
            program,
            style: Style::canonical(),
            benchmark,
            split: Split::Eval,
            group_id: None,
            main_id: None,
            source_id: Some(src),
        })?;
        Ok(())
    }

    fn visual(&mut self, pairs: usize) -> Result<()> {
        for j in 0..pairs {
            let mut done = false;
            for attempt in 0..16 {
                let mut rng = self.rng(Benchmark::IvEdit, j * 16 + attempt);
                let (s, p) = self.draw(&mut rng)?;
                let new_id = self.scenes.len() as u64;
                if let Some(e) = edit_remove_irrelevant(&self.scenes[s], &p, new_id, &mut rng) {
                    self.twin(s, p, Benchmark::IvEdit, e)?;
                    done = true;
                    break;
                }
            }
            if !done {
                self.edits_skipped += 1;
            }
        }
        for j in 0..pairs {
            let mut rng = self.rng(Benchmark::CvEdit, j);
            let s = self.pick_scene(&mut rng);
            let o = self.scenes[s].objects[rng.random_range(0..self.scenes[s].objects.len())];
            let f = Filter {
                shape: Some(o.shape),
                color: rng.random_bool(0.4).then_some(o.color),
                size: None,
            };
            let p = Program::Count(f);
            let new_id = self.scenes.len() as u64;
            let e = edit_remove_counted(&self.scenes[s], &p, new_id, &mut rng)?;
            self.twin(s, p, Benchmark::CvEdit, e)?;
        }
        Ok(())
    }

    fn answer(&mut self, pool: usize, ood: usize) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
        let mut drafts = Vec::with_capacity(pool);
        for j in 0..pool {
            let mut rng = self.rng(Benchmark::AnswerShift, j);
            let (s, p) = self.draw(&mut rng)?;
            drafts.push((s, p));
        }
        let items: Vec<(String, String)> = drafts
            .iter()
            .map(|(s, p)| Ok((p.type_key(), evaluate(p, &self.scenes[*s])?.word())))
            .collect::<Result<_>>()?;
        let shift = shift_answer_priors(&items, self.params.tv_floor, self.params.seed);
        for ((s, p), e) in drafts.into_iter().zip(&shift.is_eval) {
            let split = if *e { Split::Eval } else { Split::Train };
            self.simple(s, p, Benchmark::AnswerShift, split)?;
        }

        let start = self.questions.len();
        for j in 0..ood {
            let mut rng = self.rng(Benchmark::HeadTail, j);
            let (s, p) = self.draw(&mut rng)?;
            let group = local_group(&p);
            self.push(Draft {
                scene: s,
                program: p,
                style: Style::canonical(),
                benchmark: Benchmark::HeadTail,
                split: Split::Eval,
                group_id: Some(group),
                main_id: None,
                source_id: None,
            })?;
        }
        let items: Vec<(String, String)> = self.questions[start..]
            .iter()
            .map(|q| (q.group_id.clone().expect("set above"), q.answer.clone()))
            .collect();
        for (q, h) in self.questions[start..].iter_mut().zip(split_head_tail(&items)) {
            q.head = Some(h);
        }
        Ok((shift.tv, shift.excluded))
    }
}

/// Generates a suite; a pure function of `params`.
pub fn generate_suite(params: &SuiteParams) -> Result<BenchmarkSuite> {
    if params.scenes == 0 || params.rephrasings == 0 {
        return Err(Error::Config("scenes and rephrasings must be >= 1".into()));
    }
    if params.scene.max_objects < params.scene.min_objects.max(1) {
        return Err(Error::Config("max_objects below min_objects".into()));
    }
    let scenes: Vec<Scene> = (0..params.scenes)
        .map(|i| {
            let mut rng = stream(params.seed, Purpose::Scene, &[i as u64]);
            gen_scene(&mut rng, &params.scene, i as u64, params.seed)
        })
        .collect();
    let mut b = Builder {
        params: params.clone(),
        base_scenes: scenes.len(),
        scenes,
        questions: Vec::new(),
        edits_skipped: 0,
    };
    let n = params.questions_per_category;
    b.standard(n)?;
    b.rephrasings(n / (params.rephrasings + 1))?;
    b.reason(n)?;
    b.visual(n / 4)?;
    let (shift_tv, shift_excluded) = b.answer(n, n / 2)?;

    let mut counts = BTreeMap::new();
    for q in &b.questions {
        let split = match q.split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        *counts.entry(format!("{}/{}", q.benchmark.name(), split)).or_insert(0) += 1;
    }
    let max_question_tokens = b.questions.iter().map(|q| q.tokens.len()).max().unwrap_or(0);
    let mut suite = BenchmarkSuite {
        manifest: Manifest {
            format: SUITE_FORMAT,
            seed: params.seed,
            params: params.clone(),
            vocab: vocabulary(),
            answers: answer_vocabulary(params.scene.max_objects),
            region_dim: params.scene.region_dim(),
            max_question_tokens,
            counts,
            shift_tv,
            shift_excluded,
            edits_skipped: b.edits_skipped,
            content_hash: String::new(),
        },
        scenes: b.scenes,
        questions: b.questions,
    };
    suite.manifest.content_hash = suite.content_hash()?;
    Ok(suite)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

impl BenchmarkSuite {
    pub fn scenes_bytes(&self) -> Result<Vec<u8>> {
        jsonl(&self.scenes)
    }

    pub fn questions_bytes(&self) -> Result<Vec<u8>> {
        jsonl(&self.questions)
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(&self.manifest)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn content_hash(&self) -> Result<String> {
        let mut all = self.scenes_bytes()?;
        all.extend(self.questions_bytes()?);
        Ok(sha256_hex(&all))
    }

    /// Writes the three suite files into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in [
            (SCENES_FILE, self.scenes_bytes()?),
            (QUESTIONS_FILE, self.questions_bytes()?),
            (MANIFEST_FILE, self.manifest_bytes()?),
        ] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a suite and verifies its content hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        let scenes = parse_jsonl(&read(SCENES_FILE)?, &dir.join(SCENES_FILE))?;
        let questions = parse_jsonl(&read(QUESTIONS_FILE)?, &dir.join(QUESTIONS_FILE))?;
        let suite = Self {
            manifest,
            scenes,
            questions,
        };
        let h = suite.content_hash()?;
        if h != suite.manifest.content_hash {
            return Err(Error::Config(format!(
                "suite content hash {h} does not match manifest {}",
                suite.manifest.content_hash
            )));
        }
        Ok(suite)
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.get(id as usize).filter(|s| s.scene_id == id)
    }

    pub fn question(&self, id: u64) -> Option<&QuestionRecord> {
        self.questions.get(id as usize).filter(|q| q.question_id == id)
    }

    pub fn answer_index(&self, word: &str) -> Option<usize> {
        self.manifest.answers.iter().position(|a| a == word)
    }

    pub fn token_ids(&self, q: &QuestionRecord) -> Result<Vec<usize>> {
        let mut ids = vec![CLS_ID];
        for t in &q.tokens {
            let id = self
                .manifest
                .vocab
                .iter()
                .position(|w| w == t)
                .ok_or_else(|| Error::Domain(format!("token {t:?} not in vocabulary")))?;
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn example(&self, q: &QuestionRecord) -> Result<Example> {
        let scene = self
            .scene(q.scene_id)
            .ok_or_else(|| Error::Contract(format!("question {} has no scene", q.question_id)))?;
        let a = self
            .answer_index(&q.answer)
            .ok_or_else(|| Error::Contract(format!("answer {:?} not in vocabulary", q.answer)))?;
        let mut labels = vec![0.0; self.manifest.answers.len()];
        labels[a] = 1.0;
        Ok(Example {
            key: q.question_id,
            regions: scene.features.clone(),
            token_ids: self.token_ids(q)?,
            labels,
        })
    }

    /// Dataset of the questions selected by `keep`, in question order.
    pub fn dataset(&self, keep: impl Fn(&QuestionRecord) -> bool) -> Result<Dataset> {
        Ok(Dataset::new(
            self.questions
                .iter()
                .filter(|q| keep(q))
                .map(|q| self.example(q))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn train_set(&self) -> Result<Dataset> {
        self.dataset(|q| q.split == Split::Train)
    }

    /// Counts per robustness tag and mean question length per benchmark and
    /// split, as printable lines.
    pub fn stats(&self) -> Vec<String> {
        let mut tags: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        let mut lens: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
        for q in &self.questions {
            let split = match q.split {
                Split::Train => "train",
                Split::Eval => "eval",
            };
            *tags.entry((q.robustness.name(), split)).or_default() += 1;
            let e = lens.entry((q.benchmark.name(), split)).or_default();
            e.0 += q.tokens.len();
            e.1 += 1;
        }
        let mut out = Vec::new();
        for ((tag, split), n) in tags {
            out.push(format!("questions {tag:<8} {split:<5} {n}"));
        }
        for ((b, split), (total, n)) in lens {
            out.push(format!("len(Q) {b:<15} {split:<5} {:.2}", total as f64 / n as f64));
        }
        out
    }

    /// Mean token length of questions matching `keep`.
    pub fn mean_length(&self, keep: impl Fn(&QuestionRecord) -> bool) -> f64 {
        let (t, n) = self
            .questions
            .iter()
            .filter(|q| keep(q))
            .fold((0usize, 0usize), |(t, n), q| (t + q.tokens.len(), n + 1));
        t as f64 / n.max(1) as f64
    }
}
