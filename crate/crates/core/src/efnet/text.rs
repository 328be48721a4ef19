//! Text/background patch classifier and multi-scale text region detection.

use ndgrad::{adam_step, AdamConfig, AdamState, Bindings, GradError, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{invalid, Result};
use crate::imageops;
use crate::nn::{self, conv, dense};
use crate::ppl::take_prefixed;
use crate::saldata::{ElementKind, SaliencyMap, Stimulus};

pub const TEXT_PREFIX: &str = "text.";

/// Two strided convs, global average pooling and a logistic output.
#[derive(Clone, Debug, PartialEq)]
pub struct TextClassifier {
    pub weights: ParamStore,
    pub patch_size: usize,
    pub threshold: f64,
}

impl TextClassifier {
    pub fn init(patch_size: usize, threshold: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ParamStore::new();
        nn::init_conv(&mut w, &mut rng, "text.conv1", 6, 3, 3);
        nn::init_conv(&mut w, &mut rng, "text.conv2", 8, 6, 3);
        nn::init_dense(&mut w, &mut rng, "text.fc", 8, 1, 1.0);
        TextClassifier {
            weights: w,
            patch_size,
            threshold,
        }
    }

    pub fn from_store(store: &ParamStore, patch_size: usize, threshold: f64) -> Result<Self> {
        let like = TextClassifier::init(patch_size, threshold, 0);
        Ok(TextClassifier {
            weights: take_prefixed(store, TEXT_PREFIX, &like.weights)?,
            ..like
        })
    }

    fn graph(&self) -> Result<(Graph, NodeId), GradError> {
        let mut g = Graph::new();
        let x = g.input("patch", &[3, self.patch_size, self.patch_size])?;
        let p = text_graph(&mut g, x, false)?;
        Ok((g, p))
    }

    /// Text probability of each `[3, p, p]` patch.
    pub fn probabilities(&self, patches: &[Tensor]) -> Result<Vec<f64>> {
        let (g, p) = self.graph()?;
        nn::par_map(patches, |t| {
            let mut b = Bindings::new();
            b.bind("patch", t).bind_store(&self.weights);
            Ok(g.forward(&b)?.scalar(p))
        })
        .into_iter()
        .collect()
    }

    /// Fraction of patches whose thresholded probability matches the label.
    pub fn accuracy(&self, patches: &[Tensor], labels: &[f64]) -> Result<f64> {
        let probs = self.probabilities(patches)?;
        let hits = probs
            .iter()
            .zip(labels)
            .filter(|(p, l)| (**p >= self.threshold) == (**l >= 0.5))
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Logistic patch classifier on a `[3, p, p]` node; returns a `[1, 1]` probability.
pub fn text_graph(g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId, GradError> {
    let h = conv(g, x, "text.conv1", 6, 3, 2, trainable)?;
    let h = g.relu(h)?;
    let h = conv(g, h, "text.conv2", 8, 3, 2, trainable)?;
    let h = g.relu(h)?;
    let pooled = g.global_avg_pool(h)?;
    let row = g.reshape(pooled, &[1, 8])?;
    let logit = dense(g, row, "text.fc", 1, trainable)?;
    g.sigmoid(logit)
}

/// `[3, p, p]` crop with its top-left corner at `(x0, y0)`.
pub fn crop(stim: &Stimulus, x0: usize, y0: usize, p: usize) -> Tensor {
    Tensor::from_fn(&[3, p, p], |i| {
        let (c, r) = (i / (p * p), i % (p * p));
        stim.pixel(c, x0 + r % p, y0 + r / p)
    })
}

/// Balanced text/background patches from masked pages, drawn at every scale.
/// A patch is text when at least 60% of its pixels are text and background
/// when at most 30% are; anything in between is skipped.
pub fn sample_patches(
    stimuli: &[Stimulus],
    per_class: usize,
    patch: usize,
    scales: &[f64],
    seed: u64,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let mut resized = Vec::new();
    for s in stimuli {
        if s.element_mask().is_none() {
            return invalid(format!("stimulus {} has no element mask", s.id));
        }
        for &sc in scales {
            let (w, h) = scaled_dims(s, sc);
            if w >= patch && h >= patch {
                resized.push(s.resized(w, h));
            }
        }
    }
    if resized.is_empty() {
        return invalid("no page is large enough for a patch");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut attempts = 0usize;
    while (pos.len() < per_class || neg.len() < per_class) && attempts < 400 * per_class.max(1) {
        attempts += 1;
        let s = &resized[rng.gen_range(0..resized.len())];
        let x0 = rng.gen_range(0..=s.width() - patch);
        let y0 = rng.gen_range(0..=s.height() - patch);
        let mask = s.element_mask().expect("checked");
        let mut text = 0usize;
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                text += (mask[y * s.width() + x] == ElementKind::Text) as usize;
            }
        }
        let frac = text as f64 / (patch * patch) as f64;
        if frac >= 0.6 && pos.len() < per_class {
            pos.push(crop(s, x0, y0, patch));
        } else if frac <= 0.3 && neg.len() < per_class {
            neg.push(crop(s, x0, y0, patch));
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return invalid("pages yielded only one patch class");
    }
    let mut patches = Vec::with_capacity(pos.len() + neg.len());
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    for (a, b) in pos.into_iter().zip(neg) {
        patches.push(a);
        labels.push(1.0);
        patches.push(b);
        labels.push(0.0);
    }
    Ok((patches, labels))
}

/// Logistic regression of `labels` (0 or 1) on `patches` under BCE.
pub fn train_text_classifier(
    patches: &[Tensor],
    labels: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TextClassifier, Vec<f64>)> {
    if patches.is_empty() || patches.len() != labels.len() {
        return invalid("train_text_classifier needs one label per patch");
    }
    if labels.iter().all(|&l| l >= 0.5) || labels.iter().all(|&l| l < 0.5) {
        return invalid("train_text_classifier needs both text and background patches");
    }
    let p = cfg.trd.patch_size;
    if let Some(t) = patches.iter().find(|t| t.shape() != [3, p, p]) {
        return invalid(format!("patch of shape {:?}, expected [3, {p}, {p}]", t.shape()));
    }
    let mut clf = TextClassifier::init(p, cfg.trd.threshold, seed);
    let mut g = Graph::new();
    let x = g.input("patch", &[3, p, p])?;
    let y = g.input("label", &[1, 1])?;
    let prob = text_graph(&mut g, x, true)?;
    let loss = crate::ppl::bce_sum_graph(&mut g, prob, y)?;
    let targets: Vec<Tensor> = labels.iter().map(|&l| Tensor::full(&[1, 1], l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
    let adam = AdamConfig {
        lr: cfg.trd.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.trd.train_steps);
    for _ in 0..cfg.trd.train_steps {
        let idx: Vec<usize> = (0..cfg.trd.train_batch).map(|_| rng.gen_range(0..patches.len())).collect();
        let (l, grads) = nn::mean_gradients(&idx, |&i| {
            let mut b = Bindings::new();
            b.bind("patch", &patches[i]).bind("label", &targets[i]).bind_store(&clf.weights);
            let v = g.forward(&b)?;
            Ok((v.scalar(loss), g.backward(&v, loss)?))
        })?;
        adam_step(&mut clf.weights, &grads, &adam, &mut state)?;
        history.push(l);
    }
    Ok((clf, history))
}

fn scaled_dims(stim: &Stimulus, scale: f64) -> (usize, usize) {
    (
        ((stim.width() as f64 * scale).round() as usize).max(1),
        ((stim.height() as f64 * scale).round() as usize).max(1),
    )
}

/// Window origins along one axis; a final window is aligned to the far edge
/// when the stride does not land on it.
fn origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *v.last().expect("len >= patch") != len - patch {
        v.push(len - patch);
    }
    v
}

#[derive(Clone, Debug)]
pub struct TrdOutput {
    pub map: SaliencyMap,
    /// Scales skipped because the patch did not fit.
    pub skipped: Vec<f64>,
}

/// Text region map: per scale, slide the classifier over the resized page
/// and average probabilities over overlapping windows; resize back, take
/// the pixelwise max over scales, blur and max-normalize.
pub fn trd_detailed(stim: &Stimulus, clf: &TextClassifier, scales: &[f64], stride: usize, sigma_blur: f64) -> Result<TrdOutput> {
    if scales.is_empty() || stride == 0 {
        return invalid("trd needs at least one scale and a positive stride");
    }
    let (w, h) = (stim.width(), stim.height());
    let p = clf.patch_size;
    let mut combined: Option<Vec<f64>> = None;
    let mut skipped = Vec::new();
    for &scale in scales {
        let (sw, sh) = scaled_dims(stim, scale);
        if sw < p || sh < p {
            skipped.push(scale);
            continue;
        }
        let scaled = stim.resized(sw, sh);
        let xs = origins(sw, p, stride);
        let ys = origins(sh, p, stride);
        let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        let patches: Vec<Tensor> = windows.iter().map(|&(x, y)| crop(&scaled, x, y, p)).collect();
        let probs = clf.probabilities(&patches)?;
        let mut acc = vec![0.0; sw * sh];
        let mut cnt = vec![0u32; sw * sh];
        for (&(x0, y0), pr) in windows.iter().zip(&probs) {
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    acc[y * sw + x] += pr;
                    cnt[y * sw + x] += 1;
                }
            }
        }
        for (a, c) in acc.iter_mut().zip(&cnt) {
            if *c > 0 {
                *a /= *c as f64;
            }
        }
        let back = imageops::resize_bilinear(&acc, sw, sh, w, h);
        combined = Some(match combined {
            None => back,
            Some(mut m) => {
                for (a, b) in m.iter_mut().zip(&back) {
                    *a = a.max(*b);
                }
                m
            }
        });
    }
    let Some(combined) = combined else {
        return invalid(format!("patch size {p} exceeds the page at every scale"));
    };
    let blurred = imageops::gaussian_blur(&combined, w, h, sigma_blur);
    let map = SaliencyMap::new(w, h, blurred)?.normalize_or_zero();
    Ok(TrdOutput { map, skipped })
}

pub fn trd(stim: &Stimulus, clf: &TextClassifier, scales: &[f64], stride: usize, sigma_blur: f64) -> Result<SaliencyMap> {
    Ok(trd_detailed(stim, clf, scales, stride, sigma_blur)?.map)
}
