//! Learns a position prior from F-shaped pages: a VAE over saliency maps,
//! then a prior network trained to match the VAE posterior.
//!
//! `cargo run --release --example position_prior -- [out_dir]`

use websal::ppl::{encode, gaussian_kl, mean_prior, plnet_forward, train_ppl};
use websal::saldata::{save_map, Dataset, Layout};
use websal::nn::relative_drop;
use websal::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("websal-ppl"), Into::into);
    std::fs::create_dir_all(&out)?;
    let mut cfg = TrainConfig::default();
    (cfg.width, cfg.height, cfg.sigma_fix) = (64, 48, 2.0);
    cfg.ppl.vae_steps = 600;
    cfg.ppl.plnet_steps = 600;
    let data = Dataset::synthetic(20, &[Layout::FShapedTextual], 1, 64, 48, 2.0)?;
    let outcome = train_ppl(&data, &cfg)?;
    println!(
        "VAE loss drop {:.0}%, prior loss drop {:.0}%",
        100.0 * relative_drop(&outcome.history.vae, 20),
        100.0 * relative_drop(&outcome.history.prior, 20)
    );

    let page = &data.samples[0];
    let q_true = encode(&page.gt, &outcome.vae)?;
    let prior = plnet_forward(&page.stimulus, &outcome.plnet)?;
    let q_prior = encode(&prior, &outcome.vae)?;
    println!("KL(prior posterior || true posterior) on page 0: {:.3}", gaussian_kl(&q_prior, &q_true)?);

    let pages: Vec<_> = data.samples.iter().map(|s| s.stimulus.clone()).collect();
    let mean = mean_prior(&pages, &outcome.plnet)?;
    let [tl, tr, bl, br] = mean.quadrant_means();
    println!("mean prior quadrants: TL {tl:.3}  TR {tr:.3}  BL {bl:.3}  BR {br:.3}");
    save_map(out.join("mean_prior.pgm"), &mean.normalize()?)?;
    println!("map written to {}", out.display());
    Ok(())
}
