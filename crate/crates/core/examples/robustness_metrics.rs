//! Robustness metrics on hand-made predictions: consensus over rephrasings,
//! main/sub-question quadrants, edit flips, head/tail accuracy and the
//! Meta-Ave of a benchmark row.
//!
//! ```text
//! cargo run --release --example robustness_metrics
//! ```

use mango_lab::metrics::*;

fn main() -> anyhow::Result<()> {
    // Four groups of rephrasings; true means the answer was right.
    let groups = vec![
        vec![true, true, true, true],
        vec![true, true, false, true],
        vec![true, false, false, false],
        vec![false, false, false, false],
    ];
    for k in 1..=4 {
        println!("CS({k}) = {:.2}", consensus_score(&groups, k, GroupWeighting::Unweighted)?);
    }

    // (main correct, sub-question correct) per main question.
    let pairs = [(true, true), (true, true), (true, false), (false, true), (false, false)];
    let q = consistency_quadrants(&pairs)?;
    println!("\nquadrants {:?}, S|M {:?}, main accuracy {:.1}", q.counts, q.s_given_m, q.main_accuracy);

    // Counting questions before and after one matching object is removed.
    let pairs = vec![
        EditPair { kind: EditKind::Decrement, real_answer: "3".into(), real_correct: true, edited_answer: "2".into(), edited_correct: true },
        EditPair { kind: EditKind::Decrement, real_answer: "2".into(), real_correct: true, edited_answer: "2".into(), edited_correct: false },
        EditPair { kind: EditKind::Invariant, real_answer: "yes".into(), real_correct: false, edited_answer: "no".into(), edited_correct: true },
        EditPair { kind: EditKind::Invariant, real_answer: "red".into(), real_correct: true, edited_answer: "red".into(), edited_correct: true },
    ];
    let f = flips_decomposition(&pairs)?;
    println!("\nflips {:.1} = p2n {:.1} + n2p {:.1} + n2n {:.1}", f.flips, f.p2n, f.n2p, f.n2n);

    // (is a head answer, correct).
    let items = [(true, true), (true, true), (true, false), (false, true), (false, false), (false, false)];
    let r = ood_report(&items)?;
    println!("\nhead {:?} tail {:?} delta {:?}", r.head, r.tail, r.delta);

    let row = [
        BenchScore::score(64.56),
        BenchScore::score(54.54),
        BenchScore::score(50.00),
        BenchScore::score(56.80),
        BenchScore::score(59.99),
        BenchScore::flips(8.47),
        BenchScore::flips(40.67),
        BenchScore::score(46.93),
        BenchScore::score(53.43),
        BenchScore::score(72.70),
    ];
    println!("\nMeta-Ave of a ten-benchmark row: {:.2}", meta_average(&row)?);
    println!("polygon score for 8.47 flips: {:.2}", polygon_score("iv_edit", &[8.47])?);
    Ok(())
}
