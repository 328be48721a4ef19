//! Scores ground truth, a centre-bias baseline and a flat map with CC, NSS
//! and shuffled AUC.

use websal::saldata::{Dataset, Layout, SaliencyMap};
use websal::salmetrics::{evaluate, EvalOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Dataset::synthetic(30, &Layout::ALL, 3, 128, 96, 4.0)?;
    let centre = SaliencyMap::from_fn(128, 96, |x, y| {
        let (dx, dy) = (x as f64 - 64.0, y as f64 - 48.0);
        (-(dx * dx + dy * dy) / (2.0 * 30.0f64.powi(2))).exp()
    });
    let candidates: [(&str, Vec<SaliencyMap>); 2] = [
        ("ground truth", data.samples.iter().map(|s| s.gt.clone()).collect()),
        ("centre bias", vec![centre; data.len()]),
    ];
    for (name, preds) in candidates {
        let report = evaluate(&preds, &data, EvalOptions::default())?;
        let s = report.scores();
        println!("{name:12}  sAUC {:.3}  NSS {:.3}  CC {:.3}", s.sauc, s.nss, s.cc);
        print!("{}", report.to_csv());
    }
    Ok(())
}
