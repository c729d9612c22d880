//! Question programs, their symbolic evaluator and surface rendering.

use serde::{Deserialize, Serialize};

use crate::benchgen::scene::{Color, Object, Scene, Shape, Size};
use crate::error::{Error, Result};

/// Conjunction of optional attribute constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Filter {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl Filter {
    pub fn matches(&self, o: &Object) -> bool {
        self.shape.is_none_or(|s| s == o.shape)
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size)
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_none() && self.color.is_none() && self.size.is_none()
    }

    /// Words describing matching objects, e.g. `small red circle`.
    fn words(&self, plural: bool) -> Vec<&'static str> {
        let mut w = Vec::new();
        if let Some(s) = self.size {
            w.push(s.word());
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        w.push(match (self.shape, plural) {
            (Some(s), false) => s.word(),
            (Some(s), true) => s.plural(),
            (None, false) => "object",
            (None, true) => "objects",
        });
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Shape,
    Color,
    Size,
}

/// Symbolic form of a question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Program {
    Exists(Filter),
    Count(Filter),
    /// Attribute of the unique object matching the filter.
    Query { attr: AttrKind, filter: Filter },
    And(Box<Program>, Box<Program>),
    Or(Box<Program>, Box<Program>),
    Not(Box<Program>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Shape(Shape),
    Color(Color),
    Size(Size),
    Count(usize),
}

impl Answer {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Answer::Yes => Some(true),
            Answer::No => Some(false),
            _ => None,
        }
    }

    pub fn word(self) -> String {
        match self {
            Answer::Yes => "yes".into(),
            Answer::No => "no".into(),
            Answer::Shape(s) => s.word().into(),
            Answer::Color(c) => c.word().into(),
            Answer::Size(s) => s.word().into(),
            Answer::Count(n) => n.to_string(),
        }
    }
}

impl Program {
    pub fn is_boolean(&self) -> bool {
        matches!(
            self,
            Program::Exists(_) | Program::And(..) | Program::Or(..) | Program::Not(_)
        )
    }

    /// Number of logical connectives.
    pub fn depth(&self) -> usize {
        match self {
            Program::And(a, b) | Program::Or(a, b) => 1 + a.depth() + b.depth(),
            Program::Not(a) => 1 + a.depth(),
            _ => 0,
        }
    }

    /// Every filter the program inspects.
    pub fn filters(&self) -> Vec<Filter> {
        match self {
            Program::Exists(f) | Program::Count(f) | Program::Query { filter: f, .. } => vec![*f],
            Program::And(a, b) | Program::Or(a, b) => {
                let mut v = a.filters();
                v.extend(b.filters());
                v
            }
            Program::Not(a) => a.filters(),
        }
    }

    /// Atomic existence sub-programs (leaves), left to right.
    pub fn atoms(&self) -> Vec<Filter> {
        match self {
            Program::Exists(f) => vec![*f],
            Program::And(a, b) | Program::Or(a, b) => {
                let mut v = a.atoms();
                v.extend(b.atoms());
                v
            }
            Program::Not(a) => a.atoms(),
            _ => Vec::new(),
        }
    }

    /// True when object `o` is inspected by the program.
    pub fn references(&self, o: &Object) -> bool {
        self.filters().iter().any(|f| f.matches(o))
    }

    /// Canonical prefix key: the first two words of the canonical surface.
    pub fn type_key(&self) -> String {
        render(self, &Style::canonical())[..2].join(" ")
    }
}

/// Evaluates `program` on `scene`.
pub fn evaluate(program: &Program, scene: &Scene) -> Result<Answer> {
    let objs = &scene.objects;
    Ok(match program {
        Program::Exists(f) => Answer::from_bool(objs.iter().any(|o| f.matches(o))),
        Program::Count(f) => Answer::Count(objs.iter().filter(|o| f.matches(o)).count()),
        Program::Query { attr, filter } => {
            let mut it = objs.iter().filter(|o| filter.matches(o));
            let (Some(o), None) = (it.next(), it.next()) else {
                return Err(Error::Contract("query filter does not select a unique object".into()));
            };
            match attr {
                AttrKind::Shape => Answer::Shape(o.shape),
                AttrKind::Color => Answer::Color(o.color),
                AttrKind::Size => Answer::Size(o.size),
            }
        }
        Program::And(a, b) => Answer::from_bool(eval_bool(a, scene)? && eval_bool(b, scene)?),
        Program::Or(a, b) => Answer::from_bool(eval_bool(a, scene)? || eval_bool(b, scene)?),
        Program::Not(a) => Answer::from_bool(!eval_bool(a, scene)?),
    })
}

fn eval_bool(p: &Program, scene: &Scene) -> Result<bool> {
    evaluate(p, scene)?
        .as_bool()
        .ok_or_else(|| Error::Contract("logical operand is not a yes/no question".into()))
}

/// Surface-form options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Style {
    /// Template variant: 0 canonical, 1 synonym swap, 2 reordered clause.
    pub variant: u8,
    pub prefix: &'static [&'static str],
}

impl Style {
    pub fn canonical() -> Self {
        Self {
            variant: 0,
            prefix: &[],
        }
    }
}

/// Filler prefixes available to training rephrasings.
pub const TRAIN_PREFIXES: &[&[&str]] = &[&[], &["please"], &["tell", "me"]];
/// Filler prefixes reserved for evaluation rephrasings.
pub const EVAL_PREFIXES: &[&[&str]] = &[
    &["looking", "at", "the", "picture"],
    &["can", "you", "tell", "me"],
    &["in", "this", "image"],
];

fn render_atom(p: &Program, variant: u8) -> Vec<&'static str> {
    let mut w: Vec<&'static str> = Vec::new();
    match p {
        Program::Exists(f) => {
            match variant {
                0 => w.extend(["is", "there", "a"]),
                1 => w.extend(["is", "there", "any"]),
                _ => w.extend(["does", "the", "scene", "contain", "a"]),
            }
            w.extend(f.words(false));
        }
        Program::Not(inner) => {
            let Program::Exists(f) = inner.as_ref() else {
                unreachable!("negation wraps existence only")
            };
            match variant {
                0 => w.extend(["is", "there", "no"]),
                1 => w.extend(["is", "there", "not", "any"]),
                _ => w.extend(["does", "the", "scene", "lack", "a"]),
            }
            w.extend(f.words(false));
        }
        Program::Count(f) => match variant {
            0 | 1 => {
                if variant == 0 {
                    w.extend(["how", "many"]);
                } else {
                    w.extend(["what", "number", "of"]);
                }
                w.extend(f.words(true));
                w.extend(["are", "there"]);
            }
            _ => {
                w.extend(["how", "many"]);
                w.extend(f.words(true));
                w.extend(["does", "the", "scene", "contain"]);
            }
        },
        Program::Query { attr, filter } => {
            let aw = match attr {
                AttrKind::Shape => "shape",
                AttrKind::Color => "color",
                AttrKind::Size => "size",
            };
            match variant {
                0 | 1 => {
                    w.push(if variant == 0 { "what" } else { "which" });
                    w.extend([aw, "is", "the"]);
                    w.extend(filter.words(false));
                }
                _ => {
                    w.push("the");
                    w.extend(filter.words(false));
                    w.extend(["has", "what", aw]);
                }
            }
        }
        Program::And(..) | Program::Or(..) => unreachable!("not an atom"),
    }
    w
}

/// Renders a program to words. Compositions are left-deep with atomic right
/// operands.
pub fn render(p: &Program, style: &Style) -> Vec<&'static str> {
    let mut w: Vec<&'static str> = style.prefix.to_vec();
    w.extend(render_body(p, style.variant));
    w
}

fn render_body(p: &Program, variant: u8) -> Vec<&'static str> {
    match p {
        Program::And(a, b) | Program::Or(a, b) => {
            let mut w = render_body(a, variant);
            w.push(if matches!(p, Program::And(..)) { "and" } else { "or" });
            w.extend(render_atom(b, variant));
            w
        }
        _ => render_atom(p, variant),
    }
}

/// Every word a rendered question can contain.
pub const QUESTION_WORDS: &[&str] = &[
    "is", "there", "a", "any", "no", "not", "does", "the", "scene", "contain", "lack", "how",
    "many", "what", "which", "number", "of", "are", "shape", "color", "size", "has", "object",
    "objects", "circle", "square", "triangle", "star", "circles", "squares", "triangles", "stars",
    "red", "green", "blue", "yellow", "small", "large", "and", "or", "please", "tell", "me",
    "looking", "at", "picture", "can", "you", "in", "this", "image",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, size: Size) -> Object {
        Object {
            shape,
            color,
            size,
            slot: 0,
        }
    }

    fn scene(objects: Vec<Object>) -> Scene {
        Scene {
            scene_id: 0,
            root_id: 0,
            objects,
            features: Vec::new(),
        }
    }

    fn f(shape: Option<Shape>, color: Option<Color>) -> Filter {
        Filter {
            shape,
            color,
            size: None,
        }
    }

    #[test]
    fn semantics_examples() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, Size::Small),
            obj(Shape::Circle, Color::Blue, Size::Large),
            obj(Shape::Circle, Color::Green, Size::Large),
        ]);
        let red_circle = Program::Exists(f(Some(Shape::Circle), Some(Color::Red)));
        assert_eq!(evaluate(&red_circle, &s).unwrap(), Answer::Yes);
        let circles = Program::Count(f(Some(Shape::Circle), None));
        assert_eq!(evaluate(&circles, &s).unwrap(), Answer::Count(3));
        let no = Program::Exists(f(Some(Shape::Star), None));
        assert_eq!(
            evaluate(&Program::Not(Box::new(red_circle.clone())), &s).unwrap(),
            Answer::No
        );
        assert_eq!(
            evaluate(&Program::And(Box::new(red_circle.clone()), Box::new(no.clone())), &s).unwrap(),
            Answer::No
        );
        assert_eq!(
            evaluate(&Program::Or(Box::new(red_circle), Box::new(no)), &s).unwrap(),
            Answer::Yes
        );
    }

    #[test]
    fn non_boolean_operand_is_contract_error() {
        let s = scene(vec![obj(Shape::Star, Color::Red, Size::Small)]);
        let bad = Program::Not(Box::new(Program::Count(f(None, None))));
        assert!(matches!(evaluate(&bad, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn rendering_and_keys() {
        let p = Program::Count(Filter {
            shape: Some(Shape::Circle),
            color: Some(Color::Red),
            size: Some(Size::Small),
        });
        assert_eq!(render(&p, &Style::canonical()).join(" "), "how many small red circles are there");
        assert_eq!(p.type_key(), "how many");
        let all: Vec<&str> = render(&p, &Style { variant: 2, prefix: EVAL_PREFIXES[1] });
        assert!(all.iter().all(|w| QUESTION_WORDS.contains(w)));
    }
}
