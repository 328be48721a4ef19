//! Global-average-pooling classifier and class activation maps.

use nalgebra::{DMatrix, SymmetricEigen};
use ndgrad::{adam_step, AdamConfig, AdamState, Bindings, GradError, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{invalid, Result};
use crate::imageops;
use crate::nn::{self, conv, dense};
use crate::ppl::take_prefixed;
use crate::saldata::{SaliencyMap, Stimulus};

pub const GAP_PREFIX: &str = "gap.";
pub const GAP_CHANNELS: usize = 32;
/// Spatial reduction between the input and the last feature layer.
pub const GAP_STRIDE: usize = 4;

/// Four conv layers (8, 16, 32, 32 channels), global average pooling and
/// one linear layer, so class scores are linear in pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct GapCnn {
    pub weights: ParamStore,
    pub n_classes: usize,
}

impl GapCnn {
    pub fn init(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ParamStore::new();
        nn::init_conv(&mut w, &mut rng, "gap.conv1", 8, 3, 3);
        nn::init_conv(&mut w, &mut rng, "gap.conv2", 16, 8, 3);
        nn::init_conv(&mut w, &mut rng, "gap.conv3", 32, 16, 3);
        nn::init_conv(&mut w, &mut rng, "gap.conv4", GAP_CHANNELS, 32, 3);
        nn::init_dense(&mut w, &mut rng, "gap.fc", GAP_CHANNELS, n_classes, 1.0);
        GapCnn { weights: w, n_classes }
    }

    pub fn from_store(store: &ParamStore, n_classes: usize) -> Result<Self> {
        let like = GapCnn::init(n_classes, 0);
        Ok(GapCnn {
            weights: take_prefixed(store, GAP_PREFIX, &like.weights)?,
            n_classes,
        })
    }

    /// `[C, n_classes]` class weights.
    pub fn fc_weights(&self) -> &Tensor {
        self.weights.get("gap.fc.w").expect("initialized")
    }

    pub fn fc_bias(&self) -> &Tensor {
        self.weights.get("gap.fc.b").expect("initialized")
    }

    /// Last-layer features `[C, H/4, W/4]` and class scores.
    pub fn forward(&self, stim: &Stimulus) -> Result<(Tensor, Vec<f64>)> {
        let x = stim.to_tensor();
        let mut g = Graph::new();
        let xi = g.input("stim", x.shape())?;
        let feats = features_graph(&mut g, xi, false)?;
        let logits = logits_graph(&mut g, feats, self.n_classes, false)?;
        let mut b = Bindings::new();
        b.bind("stim", &x).bind_store(&self.weights);
        let v = g.forward(&b)?;
        Ok((v.get(feats).clone(), v.get(logits).data().to_vec()))
    }

    pub fn predict(&self, stim: &Stimulus) -> Result<usize> {
        let (_, scores) = self.forward(stim)?;
        Ok(top_k_classes(&scores, 1)[0])
    }

    pub fn accuracy(&self, stimuli: &[Stimulus], labels: &[usize]) -> Result<f64> {
        let preds = nn::par_map(stimuli, |s| self.predict(s));
        let mut hits = 0;
        for (p, l) in preds.into_iter().zip(labels) {
            hits += (p? == *l) as usize;
        }
        Ok(hits as f64 / stimuli.len().max(1) as f64)
    }
}

pub fn features_graph(g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId, GradError> {
    let x = conv(g, x, "gap.conv1", 8, 3, 2, trainable)?;
    let x = g.relu(x)?;
    let x = conv(g, x, "gap.conv2", 16, 3, 2, trainable)?;
    let x = g.relu(x)?;
    let x = conv(g, x, "gap.conv3", 32, 3, 1, trainable)?;
    let x = g.relu(x)?;
    let x = conv(g, x, "gap.conv4", GAP_CHANNELS, 3, 1, trainable)?;
    g.relu(x)
}

/// `[1, n_classes]` scores from `[C, h, w]` features.
pub fn logits_graph(g: &mut Graph, feats: NodeId, n_classes: usize, trainable: bool) -> Result<NodeId, GradError> {
    let c = g.shape(feats)[0];
    let pooled = g.global_avg_pool(feats)?;
    let row = g.reshape(pooled, &[1, c])?;
    dense(g, row, "gap.fc", n_classes, trainable)
}

/// Trains on `labels[i]` for `stimuli[i]`; returns the net and per-step loss.
pub fn train_gap_cnn(stimuli: &[Stimulus], labels: &[usize], cfg: &TrainConfig, seed: u64) -> Result<(GapCnn, Vec<f64>)> {
    let n_classes = cfg.gap_cnn.n_classes;
    if stimuli.len() != labels.len() || stimuli.is_empty() {
        return invalid("train_gap_cnn needs one label per stimulus");
    }
    if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
        return invalid(format!("label {l} outside {n_classes} classes"));
    }
    let mut distinct = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return invalid("train_gap_cnn needs at least two classes");
    }
    let mut net = GapCnn::init(n_classes, seed);
    let (w, h) = (stimuli[0].width(), stimuli[0].height());
    let mut g = Graph::new();
    let xi = g.input("stim", &[3, h, w])?;
    let onehot = g.input("onehot", &[1, n_classes])?;
    let feats = features_graph(&mut g, xi, true)?;
    let logits = logits_graph(&mut g, feats, n_classes, true)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.mul(lsm, onehot)?;
    let s = g.sum(picked)?;
    let loss = g.scale(s, -1.0)?;

    let inputs: Vec<Tensor> = stimuli.iter().map(Stimulus::to_tensor).collect();
    let targets: Vec<Tensor> = labels
        .iter()
        .map(|&l| Tensor::from_fn(&[1, n_classes], |i| (i == l) as u8 as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_7063);
    let adam = AdamConfig {
        lr: cfg.gap_cnn.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(cfg.gap_cnn.steps);
    for _ in 0..cfg.gap_cnn.steps {
        let idx: Vec<usize> = (0..cfg.gap_cnn.batch).map(|_| rng.gen_range(0..inputs.len())).collect();
        let (l, grads) = nn::mean_gradients(&idx, |&i| {
            let mut b = Bindings::new();
            b.bind("stim", &inputs[i]).bind("onehot", &targets[i]).bind_store(&net.weights);
            let v = g.forward(&b)?;
            Ok((v.scalar(loss), g.backward(&v, loss)?))
        })?;
        adam_step(&mut net.weights, &grads, &adam, &mut state)?;
        history.push(l);
    }
    Ok((net, history))
}

/// `S_c(x, y) = sum_k w[k, c] * f_k(x, y)` over `[C, h, w]` features, not normalized.
pub fn cam(features: &Tensor, fc_weights: &Tensor, c: usize) -> Result<SaliencyMap> {
    let (ch, h, w) = feature_dims(features)?;
    let fs = fc_weights.shape();
    if fs.len() != 2 || fs[0] != ch {
        return invalid(format!("class weights {fs:?} do not match {ch} feature channels"));
    }
    if c >= fs[1] {
        return invalid(format!("class {c} outside {} classes", fs[1]));
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    let (f, wt) = (features.data(), fc_weights.data());
    for k in 0..ch {
        let wk = wt[k * fs[1] + c];
        for (o, v) in out.iter_mut().zip(&f[k * plane..(k + 1) * plane]) {
            *o += wk * v;
        }
    }
    Ok(SaliencyMap::new(w, h, out)?)
}

fn feature_dims(features: &Tensor) -> Result<(usize, usize, usize)> {
    match features.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [c, n] => Ok((*c, 1, *n)),
        s => invalid(format!("features must be [C, H, W] or [C, N], got {s:?}")),
    }
}

/// Descending eigenvalues of the channel covariance (channels as variables,
/// pixels as observations, each channel mean-centered).
pub fn channel_eigenvalues(features: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = feature_dims(features)?;
    let n = h * w;
    let data = features.data();
    let mut centered = DMatrix::<f64>::zeros(c, n);
    for k in 0..c {
        let row = &data[k * n..(k + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        for (j, v) in row.iter().enumerate() {
            centered[(k, j)] = v - mean;
        }
    }
    let cov = &centered * centered.transpose() / n as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Smallest `m` whose leading eigenvalues explain at least `fraction` of
/// the variance, clamped to `[1, min(max_k, C)]`. Constant features give 1.
pub fn select_k(features: &Tensor, fraction: f64, max_k: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("variance fraction must lie in (0, 1], got {fraction}"));
    }
    let ev = channel_eigenvalues(features)?;
    let cap = max_k.min(ev.len()).max(1);
    let total: f64 = ev.iter().sum();
    if !(total > 1e-300) {
        return Ok(1);
    }
    let mut cum = 0.0;
    for (i, v) in ev.iter().enumerate() {
        cum += v;
        if cum / total >= fraction * (1.0 - 1e-12) {
            return Ok((i + 1).clamp(1, cap));
        }
    }
    Ok(cap)
}

/// Indices of the `k` highest scores, ties broken by ascending class id.
pub fn top_k_classes(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Everything `mdrd` derives for one stimulus.
#[derive(Clone, Debug)]
pub struct CamStack {
    pub features: Tensor,
    pub class_scores: Vec<f64>,
    pub cams: Vec<SaliencyMap>,
    pub chosen_k: usize,
    pub chosen_set: Vec<usize>,
}

impl CamStack {
    pub fn from_parts(features: Tensor, fc_weights: &Tensor, class_scores: Vec<f64>, fraction: f64) -> Result<Self> {
        let n_classes = class_scores.len();
        let cams = (0..n_classes)
            .map(|c| cam(&features, fc_weights, c))
            .collect::<Result<Vec<_>>>()?;
        let chosen_k = select_k(&features, fraction, n_classes)?;
        let chosen_set = top_k_classes(&class_scores, chosen_k);
        Ok(CamStack {
            features,
            class_scores,
            cams,
            chosen_k,
            chosen_set,
        })
    }

    pub fn compute(stim: &Stimulus, net: &GapCnn, fraction: f64) -> Result<Self> {
        let (features, scores) = net.forward(stim)?;
        Self::from_parts(features, net.fc_weights(), scores, fraction)
    }

    /// Mean of the chosen CAMs (each clamped at zero) at feature resolution,
    /// before normalization.
    pub fn raw_mean(&self) -> SaliencyMap {
        let first = &self.cams[0];
        let mut acc = SaliencyMap::zeros(first.width(), first.height());
        for &c in &self.chosen_set {
            for (a, v) in acc.values_mut().iter_mut().zip(self.cams[c].values()) {
                *a += v.max(0.0);
            }
        }
        let k = self.chosen_set.len() as f64;
        acc.map(|v| v / k)
    }

    /// Max-normalized mean, nearest-upsampled by `factor`.
    pub fn map(&self, factor: usize) -> SaliencyMap {
        let m = self.raw_mean().normalize_or_zero();
        let (w, h) = m.dims();
        let up = imageops::upsample_nearest(m.values(), w, h, factor);
        SaliencyMap::new(w * factor, h * factor, up).expect("extents scale together")
    }
}

/// Multi discriminative region map at the stimulus resolution.
pub fn mdrd(stim: &Stimulus, net: &GapCnn, fraction: f64) -> Result<SaliencyMap> {
    Ok(CamStack::compute(stim, net, fraction)?.map(GAP_STRIDE))
}

/// Layout index for generated pages, category index otherwise.
pub fn class_label(stim: &Stimulus) -> usize {
    use crate::saldata::Category;
    match stim.layout {
        Some(l) => l.index(),
        None => match stim.category {
            Category::Pictorial => 0,
            Category::Textual => 1,
            Category::Mixed | Category::Synthetic => 2,
        },
    }
}
