//! Trains the full model on synthetic pages, saves the checkpoint, reloads
//! it and writes predicted saliency maps.
//!
//! `cargo run --release --example train_predict -- [out_dir] [steps]`

use websal::pipeline::{self, Model};
use websal::saldata::{save_map, synth_page_sized, Dataset, Layout};
use websal::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("websal-train"), Into::into);
    let mut cfg = TrainConfig::default();
    (cfg.width, cfg.height, cfg.sigma_fix) = (64, 48, 2.0);
    cfg.steps = args.next().map_or(Ok(300), |s| s.parse())?;
    cfg.ppl.vae_steps = 300;
    cfg.ppl.plnet_steps = 300;
    cfg.trd.train_steps = 300;
    cfg.gap_cnn.steps = 100;
    let data = Dataset::synthetic(20, &Layout::ALL, 0, 64, 48, 2.0)?;
    let outcome = pipeline::train_full(&data, &cfg)?;
    let s = outcome.report.scores();
    println!("held-out sAUC {:.3}  NSS {:.3}  CC {:.3}", s.sauc, s.nss, s.cc);
    outcome.model.save(&out)?;

    let model = Model::load(&out)?;
    for (i, layout) in Layout::ALL.into_iter().enumerate() {
        let page = synth_page_sized(500 + i as u64, layout, 128, 96).0;
        let pred = model.predict(&page)?;
        save_map(out.join(format!("pred_{}.pgm", layout.name())), &pred)?;
        println!("{}: prediction {}x{}, peak at {:?}", layout.name(), pred.width(), pred.height(), pred.argmax());
    }
    println!("checkpoint and maps in {}", out.display());
    Ok(())
}
