//! Fusion network and its loss `alpha * L1 + beta * L2`.
//!
//! `L1` is the mean binary cross-entropy of the prediction against the
//! ground truth. `L2 = sum_i P_i log(P_i / (Q_i + eps) + eps)` where `P` and
//! `Q` are the prediction and ground truth rescaled to sum one.

use ndgrad::{GradError, Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::efnet::{self, GAP_CHANNELS, GAP_STRIDE};
use crate::error::{invalid, Result};
use crate::nn::{self, conv};
use crate::ppl;
use crate::saldata::SaliencyMap;

pub const PNET_PREFIX: &str = "pnet.";
/// Base features plus prior, class-region and text channels.
pub const FUSION_CHANNELS: usize = efnet::BASE_CHANNELS + 3;
pub const PRED_FLOOR: f64 = 1e-7;

/// Base branch and fusion weights (`base.*`, `pnet.*`).
pub fn init_fusion(seed: u64) -> ParamStore {
    let mut store = efnet::init_base(crate::seed::sub_seed(seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::sub_seed(seed, 2));
    nn::init_conv(&mut store, &mut rng, "pnet.conv1", 8, FUSION_CHANNELS, 3);
    nn::init_conv(&mut store, &mut rng, "pnet.conv2", 8, 8, 3);
    nn::init_conv(&mut store, &mut rng, "pnet.conv3", 1, 8, 3);
    store
}

/// Three conv layers on the `[11, H, W]` stack, ending in a sigmoid.
pub fn pnet_graph(g: &mut Graph, stack: NodeId, trainable: bool) -> Result<NodeId, GradError> {
    let h = conv(g, stack, "pnet.conv1", 8, 3, 1, trainable)?;
    let h = g.relu(h)?;
    let h = conv(g, h, "pnet.conv2", 8, 3, 1, trainable)?;
    let h = g.relu(h)?;
    let h = conv(g, h, "pnet.conv3", 1, 3, 1, trainable)?;
    g.sigmoid(h)
}

/// Mean BCE of a `[1, H, W]` prediction node against a same-shaped target.
pub fn l1_graph(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, GradError> {
    let n: usize = g.shape(pred).iter().product();
    let s = ppl::bce_sum_graph(g, pred, target)?;
    g.scale(s, 1.0 / n as f64)
}

/// `L2` with the ground-truth denominator `Q + eps` bound as a constant input.
pub fn l2_graph(g: &mut Graph, pred: NodeId, gt_den: NodeId, eps: f64) -> Result<NodeId, GradError> {
    let total = g.sum(pred)?;
    let lt = g.log(total)?;
    let nlt = g.scale(lt, -1.0)?;
    let inv = g.exp(nlt)?;
    let p = g.scale_by(pred, inv)?;
    let r = g.div(p, gt_den)?;
    let r = g.offset(r, eps)?;
    let lr = g.log(r)?;
    let t = g.mul(p, lr)?;
    g.sum(t)
}

fn check_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return invalid(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Mean of `-[S log P + (1 - S) log(1 - P)]`, `P` clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_l1(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.values().len() as f64;
    let s: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, s)| {
            let p = p.clamp(PRED_FLOOR, 1.0 - PRED_FLOOR);
            -(s * p.ln() + (1.0 - s) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n)
}

/// `sum_i P_i log(P_i / (Q_i + eps) + eps)` on sum-normalized maps.
pub fn loss_l2(pred: &SaliencyMap, gt: &SaliencyMap, eps: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if !(eps > 0.0) {
        return invalid(format!("epsilon must be positive, got {eps}"));
    }
    let (sp, sq) = (pred.sum(), gt.sum());
    if !(sp > 0.0) || !(sq > 0.0) {
        return invalid("L2 needs maps with positive mass");
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, q)| {
            let (p, q) = (p / sp, q / sq);
            if p == 0.0 {
                0.0
            } else {
                p * (p / (q + eps) + eps).ln()
            }
        })
        .sum())
}

pub fn total_loss(pred: &SaliencyMap, gt: &SaliencyMap, alpha: f64, beta: f64, eps: f64) -> Result<f64> {
    let mut t = 0.0;
    if alpha != 0.0 {
        t += alpha * loss_l1(pred, gt)?;
    }
    if beta != 0.0 {
        t += beta * loss_l2(pred, gt, eps)?;
    }
    Ok(t)
}

/// `Q + eps` for the ground truth of one sample, as a `[1, H, W]` tensor.
pub fn gt_denominator(gt: &SaliencyMap, eps: f64) -> Result<Tensor> {
    let s = gt.sum();
    if !(s > 0.0) {
        return invalid("ground truth has no mass");
    }
    Ok(gt.map(|v| v / s + eps).to_tensor())
}

/// Which channels feed the fusion stack and where they come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub use_ppl: bool,
    pub use_mdrd: bool,
    pub use_trd: bool,
    /// Compute the prior in-graph from `plnet.*` instead of reading it.
    pub plnet_in_graph: bool,
    pub plnet_trainable: bool,
    /// Compute the class-region map in-graph from `gap.*`.
    pub mdrd_in_graph: bool,
    pub n_classes: usize,
}

/// Per-sample training graph. Inputs: `pnet.in.stim`, `pnet.in.gt`,
/// `pnet.in.gt_den`, and per enabled branch `pnet.in.prior`,
/// `pnet.in.mdrd` (or `pnet.in.mdrd_sel` when in-graph), `pnet.in.text`.
pub struct FusionGraph {
    pub graph: Graph,
    pub pred: NodeId,
    pub l1: NodeId,
    pub l2: NodeId,
    pub total: NodeId,
    pub options: GraphOptions,
}

impl FusionGraph {
    pub fn build(
        width: usize,
        height: usize,
        opts: GraphOptions,
        alpha: f64,
        beta: f64,
        eps: f64,
    ) -> Result<Self, GradError> {
        let mut g = Graph::new();
        let pred = prediction_graph(&mut g, width, height, opts)?;
        let target = g.input("pnet.in.gt", &[1, height, width])?;
        let gt_den = g.input("pnet.in.gt_den", &[1, height, width])?;
        let l1 = l1_graph(&mut g, pred, target)?;
        let l2 = l2_graph(&mut g, pred, gt_den, eps)?;
        let a = g.scale(l1, alpha)?;
        let b = g.scale(l2, beta)?;
        let total = g.add(a, b)?;
        Ok(FusionGraph {
            graph: g,
            pred,
            l1,
            l2,
            total,
            options: opts,
        })
    }
}

/// Prediction node of the fusion network; disabled branches feed zeros.
pub fn prediction_graph(g: &mut Graph, width: usize, height: usize, opts: GraphOptions) -> Result<NodeId, GradError> {
    let stim = g.input("pnet.in.stim", &[3, height, width])?;
    let zero = || Tensor::zeros(&[1, height, width]);
    let base = efnet::base_graph(g, stim, true)?;
    let prior = match (opts.use_ppl, opts.plnet_in_graph) {
        (false, _) => g.constant(zero()),
        (true, false) => g.input("pnet.in.prior", &[1, height, width])?,
        (true, true) => ppl::plnet_graph(g, stim, opts.plnet_trainable)?,
    };
    let mdrd = match (opts.use_mdrd, opts.mdrd_in_graph) {
        (false, _) => g.constant(zero()),
        (true, false) => g.input("pnet.in.mdrd", &[1, height, width])?,
        (true, true) => mdrd_graph(g, stim, opts.n_classes)?,
    };
    let text = if opts.use_trd {
        g.input("pnet.in.text", &[1, height, width])?
    } else {
        g.constant(zero())
    };
    let stack = g.concat_channels(&[base, prior, mdrd, text])?;
    pnet_graph(g, stack, true)
}

/// Class-region map computed from trainable `gap.*` weights. The class
/// selection and normalizer come from `pnet.in.mdrd_sel: [1, n_classes]`,
/// holding `1 / (K * max)` for chosen classes and zero elsewhere.
pub fn mdrd_graph(g: &mut Graph, stim: NodeId, n_classes: usize) -> Result<NodeId, GradError> {
    let sel = g.input("pnet.in.mdrd_sel", &[1, n_classes])?;
    let feats = efnet::features_graph(g, stim, true)?;
    let (h, w) = (g.shape(feats)[1], g.shape(feats)[2]);
    let flat = g.reshape(feats, &[GAP_CHANNELS, h * w])?;
    let fc = g.param("gap.fc.w", &[GAP_CHANNELS, n_classes])?;
    // The bias only shifts class scores, so the fc bias stays out of the graph.
    let mut acc: Option<NodeId> = None;
    for c in 0..n_classes {
        let col = g.slice_cols(fc, c, c + 1)?;
        let row = g.reshape(col, &[1, GAP_CHANNELS])?;
        let cam = g.matmul(row, flat)?;
        let cam = g.relu(cam)?;
        let k = g.slice_cols(sel, c, c + 1)?;
        let term = g.scale_by(cam, k)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let m = g.reshape(acc.expect("n_classes >= 1"), &[1, h, w])?;
    g.upsample_nearest(m, GAP_STRIDE)
}

/// Selection weights for [`mdrd_graph`] from a computed stack.
pub fn mdrd_selector(stack: &efnet::CamStack) -> Result<Tensor> {
    let n = stack.class_scores.len();
    let mx = stack.raw_mean().max();
    let norm = if mx > 0.0 { mx } else { 1.0 };
    let k = stack.chosen_set.len() as f64;
    let mut v = vec![0.0; n];
    for &c in &stack.chosen_set {
        v[c] = 1.0 / (k * norm);
    }
    Ok(Tensor::new(vec![1, n], v)?)
}
