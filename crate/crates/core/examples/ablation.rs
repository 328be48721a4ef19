//! Trains the five ablation configurations on one split and prints the
//! held-out score table.
//!
//! `cargo run --release --example ablation -- [steps]`

use websal::pipeline::ablate;
use websal::saldata::{Dataset, Layout};
use websal::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    (cfg.width, cfg.height, cfg.sigma_fix) = (64, 48, 2.0);
    cfg.steps = std::env::args().nth(1).map_or(Ok(200), |s| s.parse())?;
    cfg.ppl.vae_steps = 300;
    cfg.ppl.plnet_steps = 300;
    cfg.trd.train_steps = 300;
    cfg.gap_cnn.steps = 100;
    let data = Dataset::synthetic(20, &Layout::ALL, 0, 64, 48, 2.0)?;
    print!("{}", ablate(&data, &cfg)?.to_csv());
    Ok(())
}
