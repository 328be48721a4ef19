//! Generates synthetic web pages with fixations, writes them as a dataset
//! directory and reads it back.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use websal::saldata::{read_dataset, save_map, synth::synth_page_detailed, synthetic_pages, write_dataset, Dataset, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("websal-synth"), Into::into);
    let pages = synthetic_pages(6, &Layout::ALL, 42, 128, 96);
    write_dataset(&out, &pages)?;
    for (_, stim, fix) in &pages {
        println!("{}: {} fixations", stim.id, fix.len());
    }

    let detail = synth_page_detailed(7, Layout::FShapedTextual, 128, 96);
    println!("F-shaped page components: {:?}", detail.component_counts);

    let data = Dataset::from_pairs(read_dataset(&out)?, 4.0)?;
    for (i, s) in data.samples.iter().enumerate() {
        save_map(out.join(format!("gt_{i:03}.pgm")), &s.gt)?;
    }
    println!("{} pages written to {} (fingerprint {})", data.len(), out.display(), &data.fingerprint()[..16]);
    Ok(())
}
