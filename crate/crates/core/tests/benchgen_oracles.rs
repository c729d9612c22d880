mod common;

use std::collections::{BTreeMap, BTreeSet};

use mango_lab::benchgen::*;

/// Brute-force answer: enumerates objects and compares attributes field by
/// field, without the library's filter or evaluator.
fn oracle(p: &Program, scene: &Scene) -> Option<String> {
    let hit = |f: &Filter, o: &Object| {
        f.shape.is_none_or(|s| s == o.shape)
            && f.color.is_none_or(|c| c == o.color)
            && f.size.is_none_or(|s| s == o.size)
    };
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    let truth = |p: &Program| oracle(p, scene).map(|a| a == "yes");
    Some(match p {
        Program::Exists(f) => {
            let mut n = 0;
            for o in &scene.objects {
                if hit(f, o) {
                    n += 1;
                }
            }
            yn(n > 0)
        }
        Program::Count(f) => {
            let mut n = 0;
            for o in &scene.objects {
                if hit(f, o) {
                    n += 1;
                }
            }
            n.to_string()
        }
        Program::Query { attr, filter } => {
            let matching: Vec<&Object> = scene.objects.iter().filter(|o| hit(filter, o)).collect();
            if matching.len() != 1 {
                return None;
            }
            let o = matching[0];
            match attr {
                AttrKind::Shape => o.shape.word().to_string(),
                AttrKind::Color => o.color.word().to_string(),
                AttrKind::Size => o.size.word().to_string(),
            }
        }
        Program::And(a, b) => yn(truth(a)? && truth(b)?),
        Program::Or(a, b) => yn(truth(a)? || truth(b)?),
        Program::Not(a) => yn(!truth(a)?),
    })
}

fn small_params(seed: u64) -> SuiteParams {
    SuiteParams {
        seed,
        scenes: 80,
        questions_per_category: 400,
        ..SuiteParams::default()
    }
}

#[test]
fn evaluator_matches_brute_force_on_random_questions() {
    let params = SceneParams::default();
    let mut rng = common::rng(2024);
    let mut checked = 0;
    let mut scene_id = 0;
    while checked < 10_000 {
        let scene = gen_scene(&mut rng, &params, scene_id, 5);
        scene_id += 1;
        for qt in [QType::Existence, QType::Count, QType::Attribute] {
            if let Ok(p) = gen_program(&scene, qt, &mut rng) {
                assert_eq!(Some(evaluate(&p, &scene).unwrap().word()), oracle(&p, &scene), "{p:?}");
                checked += 1;
            }
        }
        for (binary, neg) in [(1, false), (2, false), (3, false), (1, true)] {
            let p = gen_composition(&scene, binary, neg, &mut rng);
            assert_eq!(Some(evaluate(&p, &scene).unwrap().word()), oracle(&p, &scene), "{p:?}");
            checked += 1;
        }
    }
}

#[test]
fn suite_answers_match_brute_force() {
    let suite = generate_suite(&small_params(1)).unwrap();
    for q in &suite.questions {
        let scene = suite.scene(q.scene_id).unwrap();
        assert_eq!(Some(q.answer.clone()), oracle(&q.program, scene), "question {}", q.question_id);
    }
}

#[test]
fn edit_twins_keep_or_decrement_answers() {
    let suite = generate_suite(&small_params(2)).unwrap();
    let (mut iv, mut cv) = (0, 0);
    for q in suite.questions.iter().filter(|q| q.source_id.is_some()) {
        let src = suite.question(q.source_id.unwrap()).unwrap();
        assert_eq!(src.program, q.program);
        assert_ne!(src.scene_id, q.scene_id);
        let edited = oracle(&q.program, suite.scene(q.scene_id).unwrap()).unwrap();
        let real = oracle(&src.program, suite.scene(src.scene_id).unwrap()).unwrap();
        let (a, b) = (suite.scene(src.scene_id).unwrap(), suite.scene(q.scene_id).unwrap());
        assert_eq!(a.objects.len(), b.objects.len() + 1, "exactly one object removed");
        match q.benchmark {
            Benchmark::IvEdit => {
                assert_eq!(edited, real);
                iv += 1;
            }
            Benchmark::CvEdit => {
                let (e, r): (usize, usize) = (edited.parse().unwrap(), real.parse().unwrap());
                assert_eq!(e + 1, r);
                cv += 1;
            }
            other => panic!("twin in {other:?}"),
        }
    }
    assert!(iv > 10 && cv > 10, "iv {iv} cv {cv}");
}

fn tv(a: &[&str], b: &[&str]) -> f64 {
    let mut ca: BTreeMap<&str, f64> = BTreeMap::new();
    let mut cb: BTreeMap<&str, f64> = BTreeMap::new();
    for x in a {
        *ca.entry(x).or_default() += 1.0 / a.len() as f64;
    }
    for x in b {
        *cb.entry(x).or_default() += 1.0 / b.len() as f64;
    }
    let keys: BTreeSet<&str> = ca.keys().chain(cb.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| (ca.get(k).unwrap_or(&0.0) - cb.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[test]
fn answer_shift_meets_total_variation_floor() {
    let params = small_params(3);
    let suite = generate_suite(&params).unwrap();
    let mut by_key: BTreeMap<String, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for q in suite.questions.iter().filter(|q| q.benchmark == Benchmark::AnswerShift) {
        let e = by_key.entry(q.program.type_key()).or_default();
        match q.split {
            Split::Train => e.0.push(&q.answer),
            Split::Eval => e.1.push(&q.answer),
        }
    }
    let excluded: BTreeSet<&String> = suite.manifest.shift_excluded.iter().collect();
    let mut retained = 0;
    for (k, (train, eval)) in &by_key {
        if excluded.contains(k) {
            assert!(eval.is_empty(), "excluded key {k} has eval items");
            continue;
        }
        let d = tv(train, eval);
        assert!(d >= params.tv_floor, "{k}: tv {d}");
        assert!((d - suite.manifest.shift_tv[k]).abs() < 1e-12);
        retained += 1;
    }
    assert!(retained >= 3, "only {retained} keys shifted");
}

#[test]
fn total_variation_examples() {
    assert_eq!(total_variation(&["a", "b"], &["a", "b"]), 0.0);
    assert_eq!(total_variation(&["a"], &["b"]), 1.0);
    assert!((total_variation(&["a", "a", "b", "b"], &["a", "b", "b", "b"]) - 0.25).abs() < 1e-15);
}

#[test]
fn regeneration_is_byte_identical() {
    let p = small_params(4);
    let (a, b) = (generate_suite(&p).unwrap(), generate_suite(&p).unwrap());
    assert_eq!(a.scenes_bytes().unwrap(), b.scenes_bytes().unwrap());
    assert_eq!(a.questions_bytes().unwrap(), b.questions_bytes().unwrap());
    assert_eq!(a.manifest_bytes().unwrap(), b.manifest_bytes().unwrap());

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(d1.path()).unwrap();
    b.write(d2.path()).unwrap();
    for f in [SCENES_FILE, QUESTIONS_FILE, MANIFEST_FILE] {
        let x = std::fs::read(d1.path().join(f)).unwrap();
        let y = std::fs::read(d2.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let back = BenchmarkSuite::read(d1.path()).unwrap();
    assert_eq!(back.content_hash().unwrap(), a.content_hash().unwrap());

    let other = generate_suite(&small_params(5)).unwrap();
    assert_ne!(other.content_hash().unwrap(), a.content_hash().unwrap());
}

#[test]
fn eval_compositions_are_deeper_than_train() {
    let suite = generate_suite(&small_params(6)).unwrap();
    let depth = |split| {
        let v: Vec<usize> = suite
            .questions
            .iter()
            .filter(|q| q.benchmark == Benchmark::LolCompose && q.split == split)
            .map(|q| q.program.depth())
            .collect();
        (*v.iter().max().unwrap(), v.iter().sum::<usize>() as f64 / v.len() as f64)
    };
    let (train_max, train_mean) = depth(Split::Train);
    let (_, eval_mean) = depth(Split::Eval);
    assert!(eval_mean > train_mean);
    assert!(train_max <= 1);
    let len = |split| suite.mean_length(|q| q.benchmark == Benchmark::LolCompose && q.split == split);
    assert!(len(Split::Eval) > len(Split::Train));
}

#[test]
fn eval_rephrasings_use_withheld_prefixes() {
    let suite = generate_suite(&small_params(7)).unwrap();
    let groups: BTreeMap<&str, Vec<&QuestionRecord>> =
        suite.questions.iter().filter(|q| q.benchmark == Benchmark::Rephrasings).fold(
            BTreeMap::new(),
            |mut m, q| {
                m.entry(q.group_id.as_deref().unwrap()).or_default().push(q);
                m
            },
        );
    let train_first: BTreeSet<&str> = suite
        .questions
        .iter()
        .filter(|q| q.split == Split::Train)
        .map(|q| q.tokens[0].as_str())
        .collect();
    for (g, qs) in &groups {
        assert_eq!(qs.len(), 1 + suite.manifest.params.rephrasings, "{g}");
        let answers: BTreeSet<&str> = qs.iter().map(|q| q.answer.as_str()).collect();
        assert_eq!(answers.len(), 1, "{g}: rephrasings disagree");
        if qs[0].split == Split::Eval {
            for q in &qs[1..] {
                assert!(!train_first.contains(q.tokens[0].as_str()), "{g}: {:?}", q.tokens);
            }
        }
    }
}

#[test]
fn introspection_subs_link_to_mains() {
    let suite = generate_suite(&small_params(8)).unwrap();
    let subs: Vec<&QuestionRecord> = suite.questions.iter().filter(|q| q.main_id.is_some()).collect();
    assert!(!subs.is_empty());
    for s in subs {
        let m = suite.question(s.main_id.unwrap()).unwrap();
        assert_eq!(m.benchmark, Benchmark::Introspect);
        assert_eq!(m.scene_id, s.scene_id);
        assert!(matches!(s.program, Program::Exists(_)));
        assert!(m.program.filters().contains(&s.program.filters()[0]));
    }
}

#[test]
fn head_answers_are_frequent_in_their_group() {
    let suite = generate_suite(&small_params(9)).unwrap();
    let ht: Vec<&QuestionRecord> = suite.questions.iter().filter(|q| q.benchmark == Benchmark::HeadTail).collect();
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut distinct: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for q in &ht {
        let g = q.group_id.as_deref().unwrap();
        *counts.entry((g, &q.answer)).or_default() += 1;
        distinct.entry(g).or_default().insert(&q.answer);
        *sizes.entry(g).or_default() += 1;
    }
    for q in &ht {
        let g = q.group_id.as_deref().unwrap();
        let mean = sizes[g] as f64 / distinct[g].len() as f64;
        let c = counts[&(g, q.answer.as_str())] as f64;
        assert_eq!(q.head, Some(c >= mean), "{g} {}", q.answer);
    }
    assert!(ht.iter().any(|q| q.head == Some(false)));
}
