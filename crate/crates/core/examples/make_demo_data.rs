//! Generates a synthetic demo corpus and task suites for the CLI quickstart.
//!
//! Usage: `cargo run --release --example make_demo_data -- [out_dir] [tokens] [seed]`
//! Defaults: `demo 500000 11`.

use headforge_core::causal::{save_suite, synth};
use std::path::Path;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(String::as_str).unwrap_or("demo");
    let tokens: usize = args.get(2).map(|s| s.parse().expect("token count")).unwrap_or(500_000);
    let seed: u64 = args.get(3).map(|s| s.parse().expect("seed")).unwrap_or(11);

    let dir = Path::new(out);
    std::fs::create_dir_all(dir.join("suites")).expect("creating output directory");

    let corpus = synth::training_corpus(seed, tokens);
    let mut bytes = Vec::with_capacity(corpus.len() * 4);
    for t in &corpus {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(dir.join("corpus.bin"), bytes).expect("writing corpus");

    save_suite(&dir.join("suites/capitalization.tsv"), &synth::capitalization_suite())
        .expect("capitalization suite");
    save_suite(&dir.join("suites/gender.tsv"), &synth::gender_suite()).expect("gender suite");
    save_suite(&dir.join("suites/winograd.tsv"), &synth::winograd_suite(128).unwrap())
        .expect("binding suite");

    println!(
        "wrote {} tokens (seed {seed}) and three task suites under {}",
        corpus.len(),
        dir.display()
    );
}
