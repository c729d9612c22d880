//! Generates a small synthetic robustness suite, prints its statistics and a
//! few questions from each benchmark, and optionally writes it to disk.
//!
//! ```text
//! cargo run --release --example generate_suite -- [OUT_DIR]
//! ```

use std::collections::BTreeSet;

use mango_lab::benchgen::{generate_suite, Benchmark, SuiteParams};

fn main() -> anyhow::Result<()> {
    let params = SuiteParams {
        scenes: 60,
        questions_per_category: 120,
        ..SuiteParams::default()
    };
    let suite = generate_suite(&params)?;
    println!("{} scenes, {} questions, hash {}", suite.scenes.len(), suite.questions.len(), suite.manifest.content_hash);
    for line in suite.stats() {
        println!("  {line}");
    }

    let mut shown = BTreeSet::new();
    for q in &suite.questions {
        if !shown.insert((q.benchmark, q.split)) {
            continue;
        }
        println!("\n[{} / {:?}] scene {}", q.benchmark.name(), q.split, q.scene_id);
        println!("  Q: {}", q.tokens.join(" "));
        println!("  A: {}   program {:?}", q.answer, q.program);
        if let Some(src) = q.source_id.and_then(|id| suite.question(id)) {
            println!("  edited twin of question {} (answer {})", src.question_id, src.answer);
        }
    }

    let twins = suite.questions.iter().filter(|q| q.benchmark == Benchmark::CvEdit).count();
    println!("\n{twins} counting twins; answer-shift total variation per key:");
    for (k, tv) in &suite.manifest.shift_tv {
        println!("  {k:<24} {tv:.3}");
    }

    if let Some(dir) = std::env::args().nth(1) {
        suite.write(std::path::Path::new(&dir))?;
        println!("written to {dir}");
    }
    Ok(())
}
