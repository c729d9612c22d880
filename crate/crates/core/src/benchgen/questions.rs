//! Program sampling, logical composition, rephrasing styles and scene edits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::benchgen::program::{
    evaluate, AttrKind, Filter, Program, Style, EVAL_PREFIXES, TRAIN_PREFIXES,
};
use crate::benchgen::scene::{Color, Object, Scene, Shape, Size};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Existence,
    Attribute,
    Count,
    Logical,
}

impl QType {
    pub fn of(p: &Program) -> QType {
        match p {
            Program::Exists(_) => QType::Existence,
            Program::Count(_) => QType::Count,
            Program::Query { .. } => QType::Attribute,
            _ => QType::Logical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connective {
    And,
    Or,
    Not,
}

const RETRIES: usize = 64;

fn pick<T: Copy, R: Rng + ?Sized>(xs: &[T], rng: &mut R) -> T {
    xs[rng.random_range(0..xs.len())]
}

/// A non-empty filter: half the time a subset of a present object's
/// attributes (shape always kept), otherwise uniformly random constraints.
fn sample_filter<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Filter {
    if rng.random::<f64>() < 0.5 && !scene.objects.is_empty() {
        let o = scene.objects[rng.random_range(0..scene.objects.len())];
        Filter {
            shape: Some(o.shape),
            color: rng.random_bool(0.6).then_some(o.color),
            size: rng.random_bool(0.3).then_some(o.size),
        }
    } else {
        Filter {
            shape: Some(pick(Shape::ALL, rng)),
            color: rng.random_bool(0.5).then(|| pick(Color::ALL, rng)),
            size: rng.random_bool(0.25).then(|| pick(Size::ALL, rng)),
        }
    }
}

fn unique(scene: &Scene, f: &Filter) -> bool {
    scene.objects.iter().filter(|o| f.matches(o)).count() == 1
}

/// Smallest description of `o` (not mentioning `attr`) that selects it
/// uniquely.
fn unique_filter(scene: &Scene, o: &Object, attr: AttrKind) -> Option<Filter> {
    let candidates: Vec<Filter> = match attr {
        AttrKind::Color => vec![
            Filter { shape: Some(o.shape), color: None, size: None },
            Filter { shape: Some(o.shape), color: None, size: Some(o.size) },
        ],
        AttrKind::Shape => vec![
            Filter { shape: None, color: Some(o.color), size: None },
            Filter { shape: None, color: Some(o.color), size: Some(o.size) },
        ],
        AttrKind::Size => vec![
            Filter { shape: Some(o.shape), color: None, size: None },
            Filter { shape: Some(o.shape), color: Some(o.color), size: None },
        ],
    };
    candidates.into_iter().find(|f| unique(scene, f))
}

/// Samples a program of the requested type that is well defined on `scene`.
pub fn gen_program<R: Rng + ?Sized>(scene: &Scene, q_type: QType, rng: &mut R) -> Result<Program> {
    match q_type {
        QType::Existence => Ok(Program::Exists(sample_filter(scene, rng))),
        QType::Count => Ok(Program::Count(sample_filter(scene, rng))),
        QType::Logical => Ok(gen_composition(scene, 1, false, rng)),
        QType::Attribute => {
            for _ in 0..RETRIES {
                let attr = pick(&[AttrKind::Shape, AttrKind::Color, AttrKind::Size], rng);
                let mut objs = scene.objects.clone();
                objs.shuffle(rng);
                if let Some(filter) = objs.iter().find_map(|o| unique_filter(scene, o, attr)) {
                    return Ok(Program::Query { attr, filter });
                }
            }
            Err(Error::Contract(format!(
                "no uniquely describable object in scene {}",
                scene.scene_id
            )))
        }
    }
}

/// Joins yes/no programs with a connective. Binary connectives need a right
/// operand that is atomic (existence, possibly negated); negation applies to
/// existence only.
pub fn compose_logical(q1: Program, q2: Option<Program>, connective: Connective) -> Result<Program> {
    let atomic = |p: &Program| match p {
        Program::Exists(_) => true,
        Program::Not(inner) => matches!(inner.as_ref(), Program::Exists(_)),
        _ => false,
    };
    if !q1.is_boolean() || q2.as_ref().is_some_and(|q| !q.is_boolean()) {
        return Err(Error::Contract("logical operands must be yes/no questions".into()));
    }
    match (connective, q2) {
        (Connective::Not, None) if matches!(q1, Program::Exists(_)) => Ok(Program::Not(Box::new(q1))),
        (Connective::Not, _) => Err(Error::Contract("negation applies to one existence question".into())),
        (_, None) => Err(Error::Contract("binary connective needs two operands".into())),
        (_, Some(q2)) if !atomic(&q2) => {
            Err(Error::Contract("right operand must be atomic".into()))
        }
        (Connective::And, Some(q2)) => Ok(Program::And(Box::new(q1), Box::new(q2))),
        (Connective::Or, Some(q2)) => Ok(Program::Or(Box::new(q1), Box::new(q2))),
    }
}

fn atom<R: Rng + ?Sized>(scene: &Scene, negate_p: f64, rng: &mut R) -> Program {
    let e = Program::Exists(sample_filter(scene, rng));
    if rng.random::<f64>() < negate_p {
        compose_logical(e, None, Connective::Not).expect("existence")
    } else {
        e
    }
}

/// Left-deep composition with `binary` connectives. With `negated_atoms`
/// every atom is negated; otherwise atoms are negated with probability 0.25
/// when `binary >= 2`.
pub fn gen_composition<R: Rng + ?Sized>(scene: &Scene, binary: usize, negated_atoms: bool, rng: &mut R) -> Program {
    let p_neg = if negated_atoms {
        1.0
    } else if binary >= 2 {
        0.25
    } else {
        0.0
    };
    let mut p = atom(scene, p_neg, rng);
    for _ in 0..binary {
        let c = if rng.random_bool(0.5) { Connective::And } else { Connective::Or };
        p = compose_logical(p, Some(atom(scene, p_neg, rng)), c).expect("well formed");
    }
    p
}

/// Surface styles for `n` rephrasings. Evaluation styles draw on the
/// withheld prefixes and the reordered template; training styles use the
/// training bank and never coincide with the canonical form.
pub fn make_rephrasings<R: Rng + ?Sized>(n: usize, eval: bool, rng: &mut R) -> Vec<Style> {
    let mut out = Vec::with_capacity(n);
    if eval {
        let mut prefixes: Vec<usize> = (0..EVAL_PREFIXES.len()).collect();
        prefixes.shuffle(rng);
        for i in 0..n {
            out.push(Style {
                variant: rng.random_range(0..=2),
                prefix: EVAL_PREFIXES[prefixes[i % prefixes.len()]],
            });
        }
    } else {
        for _ in 0..n {
            let prefix = TRAIN_PREFIXES[rng.random_range(0..TRAIN_PREFIXES.len())];
            let variant = if prefix.is_empty() { 1 } else { rng.random_range(0..=1) };
            out.push(Style { variant, prefix });
        }
    }
    out
}

/// One to three existence sub-questions for a logical or count question.
pub fn sub_questions(p: &Program) -> Vec<Program> {
    match p {
        Program::Count(f) => vec![Program::Exists(*f)],
        _ => {
            let mut seen = Vec::new();
            for f in p.atoms() {
                if !seen.contains(&f) && seen.len() < 3 {
                    seen.push(f);
                }
            }
            seen.into_iter().map(Program::Exists).collect()
        }
    }
}

/// Removes an object the question does not inspect. `None` when every
/// object is referenced.
pub fn edit_remove_irrelevant<R: Rng + ?Sized>(
    scene: &Scene,
    program: &Program,
    new_id: u64,
    rng: &mut R,
) -> Option<Scene> {
    let free: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| !program.references(&scene.objects[i]))
        .collect();
    if free.is_empty() {
        return None;
    }
    Some(scene.without(free[rng.random_range(0..free.len())], new_id))
}

/// Removes one object counted by a count question.
pub fn edit_remove_counted<R: Rng + ?Sized>(
    scene: &Scene,
    program: &Program,
    new_id: u64,
    rng: &mut R,
) -> Result<Scene> {
    let Program::Count(f) = program else {
        return Err(Error::Contract("counted-object edit needs a count question".into()));
    };
    let counted: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| f.matches(&scene.objects[i]))
        .collect();
    if counted.is_empty() {
        return Err(Error::Contract("count is zero; nothing to remove".into()));
    }
    let edited = scene.without(counted[rng.random_range(0..counted.len())], new_id);
    debug_assert!(evaluate(program, &edited).is_ok());
    Ok(edited)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::program::Answer;
    use crate::benchgen::scene::{gen_scene, SceneParams};
    use crate::rng::{stream, Purpose};

    #[test]
    fn composition_truth_table() {
        let s = gen_scene(&mut stream(0, Purpose::Scene, &[0]), &SceneParams::default(), 0, 0);
        let o = s.objects[0];
        let yes = Program::Exists(Filter { shape: Some(o.shape), color: Some(o.color), size: Some(o.size) });
        let no = Program::Exists(Filter { shape: Some(o.shape), color: Some(o.color), size: None });
        let no = if evaluate(&no, &s).unwrap() == Answer::Yes {
            compose_logical(no, None, Connective::Not).unwrap()
        } else {
            no
        };
        let not_yes = compose_logical(yes.clone(), None, Connective::Not).unwrap();
        assert_eq!(evaluate(&not_yes, &s).unwrap(), Answer::No);
        let and = compose_logical(yes.clone(), Some(no.clone()), Connective::And).unwrap();
        assert_eq!(evaluate(&and, &s).unwrap(), Answer::No);
        let or = compose_logical(yes, Some(no), Connective::Or).unwrap();
        assert_eq!(evaluate(&or, &s).unwrap(), Answer::Yes);
    }

    #[test]
    fn non_boolean_operands_rejected() {
        let c = Program::Count(Filter { shape: Some(Shape::Star), color: None, size: None });
        let e = Program::Exists(Filter { shape: Some(Shape::Star), color: None, size: None });
        assert!(compose_logical(c.clone(), Some(e.clone()), Connective::And).is_err());
        assert!(compose_logical(e, Some(c), Connective::Or).is_err());
    }

    #[test]
    fn counted_edit_decrements() {
        let mut rng = stream(4, Purpose::Question, &[0]);
        let s = gen_scene(&mut stream(4, Purpose::Scene, &[1]), &SceneParams::default(), 1, 4);
        let p = Program::Count(Filter { shape: Some(s.objects[0].shape), color: None, size: None });
        let Answer::Count(before) = evaluate(&p, &s).unwrap() else { panic!() };
        let t = edit_remove_counted(&s, &p, 100, &mut rng).unwrap();
        assert_eq!(evaluate(&p, &t).unwrap(), Answer::Count(before - 1));
        assert_eq!(t.objects.len(), s.objects.len() - 1);
    }
}
