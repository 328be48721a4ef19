//! Evaluates the fusion objective: per-pixel cross-entropy against the
//! ground truth plus a distribution term on sum-normalized maps.

use websal::pnet::{loss_l1, loss_l2, total_loss};
use websal::saldata::{Dataset, Layout, SaliencyMap};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Dataset::synthetic(2, &[Layout::SidebarMixed], 9, 64, 48, 2.0)?;
    let gt = &data.samples[0].gt;
    let other = &data.samples[1].gt;
    let flat = SaliencyMap::filled(64, 48, 0.5);
    for (name, pred) in [("ground truth", gt), ("another page", other), ("flat 0.5", &flat)] {
        println!(
            "{name:13} L1 {:.4}  L2 {:+.4}  total {:.4}",
            loss_l1(pred, gt)?,
            loss_l2(pred, gt, 1e-4)?,
            total_loss(pred, gt, 1.0, 0.1, 1e-4)?
        );
    }
    for eps in [1e-2, 1e-4, 1e-6] {
        println!("L2(S, S) at eps {eps:.0e}: {:+.3e}", loss_l2(gt, gt, eps)?);
    }
    Ok(())
}
