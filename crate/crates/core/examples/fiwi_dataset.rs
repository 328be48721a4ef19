//! Loads a FiWI-style directory tree (category folders of screenshots with
//! fixation CSVs), rescaled to the working resolution, and scores a flat
//! baseline on it.
//!
//! `cargo run --example fiwi_dataset -- <root>`

use websal::saldata::{load_fiwi, Dataset, SaliencyMap};
use websal::salmetrics::{evaluate, EvalOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(root) = std::env::args().nth(1) else {
        eprintln!("usage: fiwi_dataset <root>");
        std::process::exit(2);
    };
    let data = Dataset::from_pairs(load_fiwi(&root, 128, 96)?, 4.0)?;
    let fixations: usize = data.samples.iter().map(|s| s.fixations.len()).sum();
    println!("{} stimuli, {fixations} fixations", data.len());
    let centre = SaliencyMap::from_fn(128, 96, |x, y| 1.0 / (1.0 + (x as f64 - 64.0).hypot(y as f64 - 48.0)));
    let report = evaluate(&vec![centre; data.len()], &data, EvalOptions::default())?;
    print!("{}", report.to_csv());
    Ok(())
}
