//! Trains the text-patch classifier and runs the multi-scale sliding-window
//! detector on a text-heavy page.
//!
//! `cargo run --release --example text_regions -- [out_dir]`

use websal::efnet::{sample_patches, train_text_classifier, trd_detailed};
use websal::pipeline::TEXT_PATCHES_PER_CLASS;
use websal::saldata::{save_map, synth_page_sized, ElementKind, Layout};
use websal::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("websal-trd"), Into::into);
    std::fs::create_dir_all(&out)?;
    let mut cfg = TrainConfig::default();
    cfg.trd.train_steps = 600;
    let train: Vec<_> = (0..12).map(|s| synth_page_sized(100 + s, Layout::ALL[s as usize % 3], 128, 96).0).collect();
    let (patches, labels) = sample_patches(&train, TEXT_PATCHES_PER_CLASS, cfg.trd.patch_size, &cfg.trd.scales, 1)?;
    let (clf, _) = train_text_classifier(&patches, &labels, &cfg, 2)?;
    println!("patch accuracy on the training set: {:.3}", clf.accuracy(&patches, &labels)?);

    let page = synth_page_sized(5, Layout::FShapedTextual, 128, 96).0;
    let trd = trd_detailed(&page, &clf, &cfg.trd.scales, cfg.trd.stride, cfg.trd.sigma_blur)?;
    let mask = page.element_mask().expect("synthetic pages carry masks");
    let mean = |text: bool| {
        let v: Vec<f64> = trd.map.values().iter().zip(mask).filter(|(_, k)| (**k == ElementKind::Text) == text).map(|(v, _)| *v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("mean activation inside text {:.3}, outside {:.3}", mean(true), mean(false));
    save_map(out.join("trd.pgm"), &trd.map)?;
    println!("map written to {}", out.display());
    Ok(())
}
