//! Correlation coefficient, normalized scanpath saliency and shuffled AUC.
//!
//! Conventions: population standard deviation, half credit for ties, and
//! per-stimulus scores averaged into the reported means.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::saldata::{Dataset, Fixation, FixationSet, SaliencyMap};
use crate::seed::sub_seed;

pub const REPORT_HEADER: &str = "category,sauc,nss,cc,n";

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("map has zero variance; metric undefined")]
    ConstantMap,
    #[error("map extents {a:?} and {b:?} differ")]
    Extents { a: (usize, usize), b: (usize, usize) },
    #[error("no positive fixations")]
    NoPositives,
    #[error("no negative fixations")]
    NoNegatives,
    #[error("fixation ({x}, {y}) outside the map")]
    OutOfBounds { x: usize, y: usize },
    #[error("{count} predictions for {expected} stimuli")]
    PredictionCount { count: usize, expected: usize },
    #[error("stimulus {id}: {source}")]
    Stimulus {
        id: String,
        #[source]
        source: Box<MetricError>,
    },
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation over all pixels.
pub fn cc(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64, MetricError> {
    if pred.dims() != gt.dims() {
        return Err(MetricError::Extents {
            a: pred.dims(),
            b: gt.dims(),
        });
    }
    let (ma, sa) = moments(pred.values());
    let (mb, sb) = moments(gt.values());
    if sa == 0.0 || sb == 0.0 {
        return Err(MetricError::ConstantMap);
    }
    let n = pred.values().len() as f64;
    let cov = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - ma) * (b - mb))
        .sum::<f64>()
        / n;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

fn check_points(map: &SaliencyMap, points: &[Fixation]) -> Result<(), MetricError> {
    match points.iter().find(|p| p.x >= map.width() || p.y >= map.height()) {
        Some(p) => Err(MetricError::OutOfBounds { x: p.x, y: p.y }),
        None => Ok(()),
    }
}

/// Mean z-scored prediction at the fixated pixels.
pub fn nss(pred: &SaliencyMap, fix: &FixationSet) -> Result<f64, MetricError> {
    if fix.is_empty() {
        return Err(MetricError::NoPositives);
    }
    check_points(pred, &fix.points)?;
    let (m, s) = moments(pred.values());
    if s == 0.0 {
        return Err(MetricError::ConstantMap);
    }
    let total: f64 = fix.points.iter().map(|p| (pred.get(p.x, p.y) - m) / s).sum();
    Ok(total / fix.len() as f64)
}

/// Shuffled AUC. Negatives are `|fix|` points drawn from the in-bounds
/// points of `other_fix` (without replacement when enough exist).
pub fn sauc(
    pred: &SaliencyMap,
    fix: &FixationSet,
    other_fix: &FixationSet,
    n_thresholds: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if fix.is_empty() {
        return Err(MetricError::NoPositives);
    }
    check_points(pred, &fix.points)?;
    let pool: Vec<&Fixation> = other_fix
        .points
        .iter()
        .filter(|p| p.x < pred.width() && p.y < pred.height())
        .collect();
    if pool.is_empty() {
        return Err(MetricError::NoNegatives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = fix.len();
    let negatives: Vec<f64> = if pool.len() >= n {
        sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|i| pred.get(pool[i].x, pool[i].y))
            .collect()
    } else {
        (0..n)
            .map(|_| {
                let p = pool[rng.gen_range(0..pool.len())];
                pred.get(p.x, p.y)
            })
            .collect()
    };
    let positives: Vec<f64> = fix.points.iter().map(|p| pred.get(p.x, p.y)).collect();
    auc_scores(&positives, &negatives, n_thresholds)
}

/// ROC area from raw scores by trapezoidal integration over thresholds:
/// every distinct score when there are at most `n_thresholds` of them,
/// otherwise `n_thresholds` quantiles of the pooled scores.
pub fn auc_scores(positives: &[f64], negatives: &[f64], n_thresholds: usize) -> Result<f64, MetricError> {
    if positives.is_empty() {
        return Err(MetricError::NoPositives);
    }
    if negatives.is_empty() {
        return Err(MetricError::NoNegatives);
    }
    let mut pooled: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut distinct = pooled.clone();
    distinct.dedup();
    let mut thresholds: Vec<f64> = if distinct.len() <= n_thresholds.max(1) {
        distinct
    } else {
        let last = (pooled.len() - 1) as f64;
        let k = n_thresholds.max(1);
        let mut t: Vec<f64> = (0..k)
            .map(|i| {
                let q = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                pooled[(q * last).round() as usize]
            })
            .collect();
        t.dedup();
        t
    };
    thresholds.reverse();
    let frac_at_least = |v: &[f64], t: f64| v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64;
    let (mut area, mut px, mut py) = (0.0, 0.0, 0.0);
    for t in thresholds {
        let (x, y) = (frac_at_least(negatives, t), frac_at_least(positives, t));
        area += (x - px) * (y + py) / 2.0;
        (px, py) = (x, y);
    }
    area += (1.0 - px) * (1.0 + py) / 2.0;
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub sauc: f64,
    pub nss: f64,
    pub cc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupScores {
    pub scores: Scores,
    pub n: usize,
}

/// Mean scores overall and per group (layout for generated pages, category otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub sauc: f64,
    pub nss: f64,
    pub cc: f64,
    pub n_stimuli: usize,
    pub per_category: BTreeMap<String, GroupScores>,
    pub per_stimulus: Vec<(String, Scores)>,
}

impl MetricReport {
    pub fn scores(&self) -> Scores {
        Scores {
            sauc: self.sauc,
            nss: self.nss,
            cc: self.cc,
        }
    }

    /// `category,sauc,nss,cc,n` rows, groups in name order, then `all`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        let mut row = |name: &str, s: Scores, n: usize| {
            writeln!(out, "{name},{:.6},{:.6},{:.6},{n}", s.sauc, s.nss, s.cc).unwrap();
        };
        for (name, g) in &self.per_category {
            row(name, g.scores, g.n);
        }
        row("all", self.scores(), self.n_stimuli);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_thresholds: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_thresholds: 100,
            seed: 0,
        }
    }
}

/// Scores `preds[i]` against `data.samples[i]`. Negatives for each
/// stimulus's sAUC come from the pooled fixations of all other stimuli.
pub fn evaluate(preds: &[SaliencyMap], data: &Dataset, opts: EvalOptions) -> Result<MetricReport, MetricError> {
    if preds.len() != data.len() || data.is_empty() {
        return Err(MetricError::PredictionCount {
            count: preds.len(),
            expected: data.len(),
        });
    }
    let mut per_stimulus = Vec::with_capacity(preds.len());
    let mut groups: BTreeMap<String, (Scores, usize)> = BTreeMap::new();
    for (i, (pred, sample)) in preds.iter().zip(&data.samples).enumerate() {
        let others: Vec<Fixation> = data
            .samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, s)| s.fixations.points.iter().copied())
            .collect();
        let other_fix = FixationSet::new("others", others);
        let annotate = |e: MetricError| MetricError::Stimulus {
            id: sample.stimulus.id.clone(),
            source: Box::new(e),
        };
        let s = Scores {
            sauc: sauc(pred, &sample.fixations, &other_fix, opts.n_thresholds, sub_seed(opts.seed, i as u64))
                .map_err(annotate)?,
            nss: nss(pred, &sample.fixations).map_err(annotate)?,
            cc: cc(pred, &sample.gt).map_err(annotate)?,
        };
        let g = groups.entry(sample.stimulus.group().to_string()).or_insert((
            Scores {
                sauc: 0.0,
                nss: 0.0,
                cc: 0.0,
            },
            0,
        ));
        g.0.sauc += s.sauc;
        g.0.nss += s.nss;
        g.0.cc += s.cc;
        g.1 += 1;
        per_stimulus.push((sample.stimulus.id.clone(), s));
    }
    let n = per_stimulus.len() as f64;
    let mean = |f: fn(&Scores) -> f64| per_stimulus.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
    let per_category = groups
        .into_iter()
        .map(|(k, (s, c))| {
            let d = c as f64;
            (
                k,
                GroupScores {
                    scores: Scores {
                        sauc: s.sauc / d,
                        nss: s.nss / d,
                        cc: s.cc / d,
                    },
                    n: c,
                },
            )
        })
        .collect();
    Ok(MetricReport {
        sauc: mean(|s| s.sauc),
        nss: mean(|s| s.nss),
        cc: mean(|s| s.cc),
        n_stimuli: per_stimulus.len(),
        per_category,
        per_stimulus,
    })
}
