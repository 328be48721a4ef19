//! Trains the class-activation network on page families, picks the number
//! of classes from the feature variance and renders the class-region map.
//!
//! `cargo run --release --example class_regions -- [out_dir]`

use websal::efnet::{class_label, select_k, train_gap_cnn, CamStack, GAP_STRIDE};
use websal::saldata::{save_map, synth_page_sized, Layout};
use websal::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("websal-mdrd"), Into::into);
    std::fs::create_dir_all(&out)?;
    let mut cfg = TrainConfig::default();
    cfg.gap_cnn.steps = 200;
    let pages: Vec<_> = (0..24).map(|s| synth_page_sized(s, Layout::ALL[s as usize % 3], 64, 48).0).collect();
    let labels: Vec<usize> = pages.iter().map(class_label).collect();
    let (net, history) = train_gap_cnn(&pages, &labels, &cfg, 1)?;
    println!("loss {:.3} -> {:.3}, training accuracy {:.2}", history[0], history[history.len() - 1], net.accuracy(&pages, &labels)?);

    for (i, stim) in pages.iter().take(3).enumerate() {
        let stack = CamStack::compute(stim, &net, cfg.variance_fraction)?;
        let (features, _) = net.forward(stim)?;
        println!(
            "{}: class scores {:.2?}, K = {} (select_k at 0.5: {}), classes {:?}",
            stim.group(),
            stack.class_scores,
            stack.chosen_k,
            select_k(&features, 0.5, cfg.gap_cnn.n_classes)?,
            stack.chosen_set
        );
        save_map(out.join(format!("mdrd_{i}.pgm")), &stack.map(GAP_STRIDE))?;
    }
    println!("maps written to {}", out.display());
    Ok(())
}
