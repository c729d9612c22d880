//! Answer-prior shifting and head/tail tagging.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

/// Probability that a question whose answer is on the train-heavy side lands
/// in train (and the complement for the eval-heavy side).
pub const HEAVY_SHARE: f64 = 0.85;
const ATTEMPTS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    /// Per input item: true when assigned to the eval side.
    pub is_eval: Vec<bool>,
    /// Realized total-variation distance per retained key.
    pub tv: BTreeMap<String, f64>,
    /// Keys that could not be shifted; their items all go to train.
    pub excluded: Vec<String>,
}

/// Total-variation distance between the answer distributions of two
/// multisets.
pub fn total_variation(a: &[&str], b: &[&str]) -> f64 {
    let mut keys: BTreeSet<&str> = a.iter().copied().collect();
    keys.extend(b.iter().copied());
    let count = |xs: &[&str], k: &str| xs.iter().filter(|x| **x == k).count() as f64;
    keys.iter()
        .map(|k| (count(a, k) / a.len() as f64 - count(b, k) / b.len() as f64).abs())
        .sum::<f64>()
        / 2.0
}

/// Partitions `(type_key, answer)` items so that, per key, the train and eval
/// answer distributions differ by at least `floor` in total variation.
///
/// Each key's distinct answers are shuffled and alternately marked train-heavy
/// or eval-heavy; items then go to their heavy side with probability
/// [`HEAVY_SHARE`]. A key is retried with fresh draws until the floor is met,
/// and excluded when it has a single answer or never meets it.
pub fn shift_answer_priors(items: &[(String, String)], floor: f64, seed: u64) -> ShiftOutcome {
    let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (k, _)) in items.iter().enumerate() {
        by_key.entry(k.as_str()).or_default().push(i);
    }
    let mut is_eval = vec![false; items.len()];
    let mut tv = BTreeMap::new();
    let mut excluded = Vec::new();
    for (ki, (key, idx)) in by_key.iter().enumerate() {
        let answers: BTreeSet<&str> = idx.iter().map(|&i| items[i].1.as_str()).collect();
        if answers.len() < 2 {
            excluded.push(key.to_string());
            continue;
        }
        let mut accepted = None;
        for attempt in 0..ATTEMPTS {
            let mut rng = stream(seed, Purpose::Split, &[ki as u64, attempt]);
            let mut order: Vec<&str> = answers.iter().copied().collect();
            order.shuffle(&mut rng);
            let train_heavy: BTreeSet<&str> = order.iter().step_by(2).copied().collect();
            let sides: Vec<bool> = idx
                .iter()
                .map(|&i| {
                    let p_train = if train_heavy.contains(items[i].1.as_str()) {
                        HEAVY_SHARE
                    } else {
                        1.0 - HEAVY_SHARE
                    };
                    rng.random::<f64>() >= p_train
                })
                .collect();
            let train: Vec<&str> = idx
                .iter()
                .zip(&sides)
                .filter(|(_, e)| !**e)
                .map(|(&i, _)| items[i].1.as_str())
                .collect();
            let eval: Vec<&str> = idx
                .iter()
                .zip(&sides)
                .filter(|(_, e)| **e)
                .map(|(&i, _)| items[i].1.as_str())
                .collect();
            if train.is_empty() || eval.is_empty() {
                continue;
            }
            let d = total_variation(&train, &eval);
            if d >= floor {
                accepted = Some((sides, d));
                break;
            }
        }
        match accepted {
            Some((sides, d)) => {
                for (&i, e) in idx.iter().zip(sides) {
                    is_eval[i] = e;
                }
                tv.insert(key.to_string(), d);
            }
            None => excluded.push(key.to_string()),
        }
    }
    ShiftOutcome {
        is_eval,
        tv,
        excluded,
    }
}

/// Head flags for `(group, answer)` items: within each group, an answer
/// class is head when its count is at least the mean count over the group's
/// classes. The most frequent class is therefore always head, and a group
/// with a single class is all head.
pub fn split_head_tail(items: &[(String, String)]) -> Vec<bool> {
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut classes: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for (g, a) in items {
        *counts.entry((g, a)).or_default() += 1;
        classes.entry(g).or_default().insert(a);
        *sizes.entry(g).or_default() += 1;
    }
    items
        .iter()
        .map(|(g, a)| {
            let c = counts[&(g.as_str(), a.as_str())] as f64;
            let mean = sizes[g.as_str()] as f64 / classes[g.as_str()].len() as f64;
            c >= mean
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(spec: &[(&str, &str, usize)]) -> Vec<(String, String)> {
        spec.iter()
            .flat_map(|(k, a, n)| std::iter::repeat_n((k.to_string(), a.to_string()), *n))
            .collect()
    }

    #[test]
    fn head_tail_rank_rule() {
        let it = items(&[("g", "yes", 80), ("g", "no", 20), ("h", "3", 5)]);
        let head = split_head_tail(&it);
        assert!(head[..80].iter().all(|&h| h));
        assert!(head[80..100].iter().all(|&h| !h));
        assert!(head[100..].iter().all(|&h| h));
    }

    #[test]
    fn shift_meets_floor_and_partitions() {
        let it = items(&[
            ("is there", "yes", 60),
            ("is there", "no", 55),
            ("how many", "1", 30),
            ("how many", "2", 25),
            ("how many", "3", 20),
            ("what size", "small", 1),
        ]);
        let out = shift_answer_priors(&it, 0.3, 7);
        assert_eq!(out.is_eval.len(), it.len());
        assert!(out.tv.values().all(|&d| d >= 0.3));
        assert_eq!(out.excluded, vec!["what size".to_string()]);
        assert_eq!(out, shift_answer_priors(&it, 0.3, 7));
    }

    #[test]
    fn tv_of_disjoint_supports_is_one() {
        assert_eq!(total_variation(&["a", "a"], &["b"]), 1.0);
        assert_eq!(total_variation(&["a", "b"], &["b", "a"]), 0.0);
    }
}
