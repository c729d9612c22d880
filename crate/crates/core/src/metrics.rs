//! Evaluation formulas: accuracy, consensus score, flip decomposition,
//! consistency quadrants, head/tail gap, Meta-Ave and polygon scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean correctness times 100.
pub fn accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Contract("accuracy of an empty prediction set".into()));
    }
    Ok(100.0 * correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

/// `C(n, k)` as a float (exact for the small arguments used here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r as f64
}

/// Fraction of size-`k` subsets of a group of `n` answers with `c` correct
/// in which every answer is correct.
pub fn consensus_ratio(n: usize, c: usize, k: usize) -> f64 {
    if c < k {
        0.0
    } else {
        binomial(c, k) / binomial(n, k)
    }
}

/// How per-group consensus ratios are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupWeighting {
    #[default]
    Unweighted,
    /// Weight each group by its size.
    BySize,
}

/// Consensus score CS(k) over rephrase groups (correctness flags per
/// member), times 100.
pub fn consensus_score(groups: &[Vec<bool>], k: usize, weighting: GroupWeighting) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Contract("consensus score needs at least one group".into()));
    }
    let min = groups.iter().map(Vec::len).min().unwrap_or(0);
    if k == 0 || k > min {
        return Err(Error::Contract(format!("k={k} outside 1..={min}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for g in groups {
        let c = g.iter().filter(|&&x| x).count();
        let w = match weighting {
            GroupWeighting::Unweighted => 1.0,
            GroupWeighting::BySize => g.len() as f64,
        };
        num += w * consensus_ratio(g.len(), c, k);
        den += w;
    }
    Ok(100.0 * num / den)
}

/// How an edit is expected to change the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    /// Answer unchanged.
    Invariant,
    /// Count answer drops by one.
    Decrement,
}

impl EditKind {
    /// The answer a consistent model gives on the edited scene, given its
    /// answer on the real scene.
    pub fn expected(self, real: &str) -> Option<String> {
        match self {
            EditKind::Invariant => Some(real.to_string()),
            EditKind::Decrement => real
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .map(|n| (n - 1).to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub kind: EditKind,
    pub real_answer: String,
    pub real_correct: bool,
    pub edited_answer: String,
    pub edited_correct: bool,
}

impl EditPair {
    /// The edited prediction differs from the one implied by the real
    /// prediction.
    pub fn flipped(&self) -> bool {
        self.kind.expected(&self.real_answer).as_deref() != Some(self.edited_answer.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipStats {
    pub pairs: usize,
    pub flips: f64,
    pub p2n: f64,
    pub n2p: f64,
    pub n2n: f64,
}

/// Flip rate and its decomposition, as percentages of pairs. `flips` is
/// defined as `p2n + n2p + n2n`.
pub fn flips_decomposition(pairs: &[EditPair]) -> Result<FlipStats> {
    if pairs.is_empty() {
        return Err(Error::Contract("no edit pairs".into()));
    }
    let (mut p2n, mut n2p, mut n2n) = (0usize, 0usize, 0usize);
    for p in pairs {
        if !p.flipped() {
            continue;
        }
        match (p.real_correct, p.edited_correct) {
            (true, false) => p2n += 1,
            (false, true) => n2p += 1,
            (false, false) => n2n += 1,
            (true, true) => {
                return Err(Error::Contract(
                    "flipped pair with both predictions correct".into(),
                ))
            }
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / pairs.len() as f64;
    let (a, b, c) = (pct(p2n), pct(n2p), pct(n2n));
    Ok(FlipStats {
        pairs: pairs.len(),
        flips: a + b + c,
        p2n: a,
        n2p: b,
        n2n: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrants {
    pub pairs: usize,
    pub counts: [usize; 4],
    /// Main correct, sub correct.
    pub mss: f64,
    /// Main correct, sub wrong.
    pub msx: f64,
    /// Main wrong, sub correct.
    pub mxs: f64,
    /// Main wrong, sub wrong.
    pub mxx: f64,
    /// Sub correct given main correct, absent when no main is correct.
    pub s_given_m: Option<f64>,
    pub main_accuracy: f64,
}

/// `M✓S✓ / (M✓S✓ + M✓S✗)` in percent.
pub fn sub_given_main(mss: f64, msx: f64) -> Option<f64> {
    let m = mss + msx;
    (m > 0.0).then(|| 100.0 * mss / m)
}

/// Classifies `(main_correct, sub_correct)` pairs into the four quadrants.
pub fn consistency_quadrants(pairs: &[(bool, bool)]) -> Result<Quadrants> {
    if pairs.is_empty() {
        return Err(Error::Contract("no main/sub pairs".into()));
    }
    let mut counts = [0usize; 4];
    for &(m, s) in pairs {
        counts[match (m, s) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    let pct = |c: usize| 100.0 * c as f64 / pairs.len() as f64;
    let mut p = counts.map(pct);
    let big = largest(&counts);
    p[big] = 100.0 - others_sum(&p, big);
    Ok(Quadrants {
        pairs: pairs.len(),
        counts,
        mss: p[0],
        msx: p[1],
        mxs: p[2],
        mxx: p[3],
        s_given_m: sub_given_main(p[0], p[1]),
        main_accuracy: p[0] + p[1],
    })
}

fn largest(counts: &[usize; 4]) -> usize {
    (0..4).fold(0, |b, i| if counts[i] > counts[b] { i } else { b })
}

fn others_sum(p: &[f64; 4], skip: usize) -> f64 {
    (0..4).filter(|&i| i != skip).map(|i| p[i]).sum()
}

impl Quadrants {
    /// Sum of the four percentages: the largest quadrant holds the
    /// complement of the others, so this is exactly 100.
    pub fn percent_total(&self) -> f64 {
        let p = [self.mss, self.msx, self.mxs, self.mxx];
        let big = largest(&self.counts);
        others_sum(&p, big) + p[big]
    }
}

/// `(head - tail) / tail` in percent; absent when `tail` is zero.
pub fn ood_delta(head: f64, tail: f64) -> Option<f64> {
    (tail != 0.0).then(|| 100.0 * (head - tail) / tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodStats {
    pub all: f64,
    pub head: Option<f64>,
    pub tail: Option<f64>,
    pub delta: Option<f64>,
}

/// Accuracy over all, head and tail questions from `(is_head, correct)`.
pub fn ood_report(items: &[(bool, bool)]) -> Result<OodStats> {
    let all: Vec<bool> = items.iter().map(|x| x.1).collect();
    let head: Vec<bool> = items.iter().filter(|x| x.0).map(|x| x.1).collect();
    let tail: Vec<bool> = items.iter().filter(|x| !x.0).map(|x| x.1).collect();
    let h = accuracy(&head).ok();
    let t = accuracy(&tail).ok();
    Ok(OodStats {
        all: accuracy(&all)?,
        head: h,
        tail: t,
        delta: match (h, t) {
            (Some(h), Some(t)) => ood_delta(h, t),
            _ => None,
        },
    })
}

/// One benchmark cell for Meta-Ave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchScore {
    pub value: f64,
    /// Flip-count cells enter Meta-Ave negated.
    pub is_flip: bool,
}

impl BenchScore {
    pub fn score(v: f64) -> Self {
        Self {
            value: v,
            is_flip: false,
        }
    }

    pub fn flips(v: f64) -> Self {
        Self {
            value: v,
            is_flip: true,
        }
    }

    pub fn signed(&self) -> f64 {
        if self.is_flip {
            -self.value
        } else {
            self.value
        }
    }
}

/// Mean of the cells with flip entries negated. Values are summed in sorted
/// order so the result does not depend on benchmark order.
pub fn meta_average(cells: &[BenchScore]) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::Contract("meta average of no benchmarks".into()));
    }
    let mut v: Vec<f64> = cells.iter().map(BenchScore::signed).collect();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Benchmarks with a defined polygon score, and the number of values each
/// takes.
pub const POLYGON_BENCHMARKS: &[(&str, usize)] = &[
    ("rephrasings", 1),
    ("vqa_lol", 2),
    ("lol_compose", 1),
    ("lol_supplement", 1),
    ("introspect", 1),
    ("gqa", 1),
    ("iv_edit", 1),
    ("cv_edit", 1),
    ("answer_shift", 1),
    ("head_tail", 1),
    ("standard", 1),
];

/// Radar-chart value of a benchmark: `100 - flips` for the counted-edit
/// benchmark, `100 - 5 * flips` for the irrelevant-edit benchmark, the mean
/// of compose and supplement accuracies for `vqa_lol`, identity otherwise.
pub fn polygon_score(benchmark: &str, values: &[f64]) -> Result<f64> {
    let arity = POLYGON_BENCHMARKS
        .iter()
        .find(|(n, _)| *n == benchmark)
        .map(|(_, a)| *a)
        .ok_or_else(|| Error::Contract(format!("unknown benchmark {benchmark:?}")))?;
    if values.len() != arity {
        return Err(Error::Contract(format!(
            "{benchmark} takes {arity} value(s), got {}",
            values.len()
        )));
    }
    Ok(match benchmark {
        "cv_edit" => 100.0 - values[0],
        "iv_edit" => 100.0 - 5.0 * values[0],
        "vqa_lol" => (values[0] + values[1]) / 2.0,
        _ => values[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true; 4]).unwrap(), 100.0);
        assert_eq!(accuracy(&[true, true, false, true]).unwrap(), 75.0);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(consensus_ratio(4, 3, 2), 0.5);
        assert_eq!(consensus_ratio(4, 4, 3), 1.0);
        assert_eq!(consensus_ratio(4, 1, 2), 0.0);
        let g = vec![vec![true, true, true, false]];
        assert_eq!(consensus_score(&g, 2, GroupWeighting::Unweighted).unwrap(), 50.0);
        assert!(consensus_score(&g, 5, GroupWeighting::Unweighted).is_err());
    }

    #[test]
    fn flip_hand_enumeration() {
        let p = |rc, ec, r: &str, e: &str| EditPair {
            kind: EditKind::Invariant,
            real_answer: r.into(),
            real_correct: rc,
            edited_answer: e.into(),
            edited_correct: ec,
        };
        let pairs = [
            p(true, false, "yes", "no"),
            p(false, true, "no", "yes"),
            p(false, false, "red", "blue"),
            p(true, true, "yes", "yes"),
        ];
        let f = flips_decomposition(&pairs).unwrap();
        assert_eq!((f.flips, f.p2n, f.n2p, f.n2n), (75.0, 25.0, 25.0, 25.0));
    }

    #[test]
    fn decrement_edits_expect_one_less() {
        let pair = EditPair {
            kind: EditKind::Decrement,
            real_answer: "3".into(),
            real_correct: true,
            edited_answer: "2".into(),
            edited_correct: true,
        };
        assert!(!pair.flipped());
        assert_eq!(EditKind::Decrement.expected("0"), None);
    }

    #[test]
    fn quadrant_examples() {
        let q = consistency_quadrants(&[(true, true); 5]).unwrap();
        assert_eq!((q.mss, q.msx, q.mxs, q.mxx, q.s_given_m), (100.0, 0.0, 0.0, 0.0, Some(100.0)));
        assert!((sub_given_main(47.42, 18.57).unwrap() - 71.86).abs() < 0.01);
        for n in 1..60usize {
            for c in 0..=n {
                let pairs: Vec<(bool, bool)> = (0..n).map(|i| (i < c, i % 3 == 0)).collect();
                assert_eq!(consistency_quadrants(&pairs).unwrap().percent_total(), 100.0);
            }
        }
    }

    #[test]
    fn ood_examples() {
        assert!((ood_delta(53.40, 46.50).unwrap() - 14.84).abs() < 0.01);
        assert_eq!(ood_delta(40.0, 40.0), Some(0.0));
        assert_eq!(ood_delta(40.0, 0.0), None);
        let r = ood_report(&[(true, true), (true, false), (false, false)]).unwrap();
        assert_eq!((r.all, r.head, r.tail), (100.0 / 3.0, Some(50.0), Some(0.0)));
        assert_eq!(r.delta, None);
    }

    #[test]
    fn meta_average_examples() {
        assert_eq!(meta_average(&[BenchScore::score(61.5)]).unwrap(), 61.5);
        let v = meta_average(&[BenchScore::score(60.0), BenchScore::flips(9.0), BenchScore::score(30.0)]).unwrap();
        assert_eq!(v, 27.0);
    }

    #[test]
    fn polygon_examples() {
        assert!((polygon_score("iv_edit", &[7.53]).unwrap() - 62.35).abs() < 1e-9);
        assert_eq!(polygon_score("cv_edit", &[0.0]).unwrap(), 100.0);
        assert!((polygon_score("vqa_lol", &[48.99, 50.54]).unwrap() - 49.765).abs() < 1e-9);
        assert!(polygon_score("imagenet", &[1.0]).is_err());
        assert!(polygon_score("vqa_lol", &[1.0]).is_err());
    }
}
