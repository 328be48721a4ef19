//! Element features: a trainable base branch, class-activation regions and
//! text regions.

mod gap;
mod text;

use ndgrad::{Bindings, GradError, Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use gap::{
    cam, channel_eigenvalues, class_label, features_graph, logits_graph, mdrd, select_k, top_k_classes, train_gap_cnn,
    CamStack, GapCnn, GAP_CHANNELS, GAP_PREFIX, GAP_STRIDE,
};
pub use text::{
    crop, sample_patches, text_graph, train_text_classifier, trd, trd_detailed, TextClassifier, TrdOutput, TEXT_PREFIX,
};

use crate::error::Result;
use crate::nn::{self, conv};
use crate::saldata::Stimulus;

pub const BASE_PREFIX: &str = "base.";
pub const BASE_CHANNELS: usize = 8;

pub fn init_base(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ParamStore::new();
    nn::init_conv(&mut w, &mut rng, "base.conv1", BASE_CHANNELS, 3, 3);
    nn::init_conv(&mut w, &mut rng, "base.conv2", BASE_CHANNELS, BASE_CHANNELS, 3);
    w
}

/// Two 3x3 conv + ReLU layers on a `[3, H, W]` node, giving `[8, H, W]`.
pub fn base_graph(g: &mut Graph, x: NodeId, trainable: bool) -> Result<NodeId, GradError> {
    let h = conv(g, x, "base.conv1", BASE_CHANNELS, 3, 1, trainable)?;
    let h = g.relu(h)?;
    let h = conv(g, h, "base.conv2", BASE_CHANNELS, 3, 1, trainable)?;
    g.relu(h)
}

pub fn base_features(stim: &Stimulus, p: &ParamStore) -> Result<Tensor> {
    let x = stim.to_tensor();
    let mut g = Graph::new();
    let xi = g.input("stim", x.shape())?;
    let out = base_graph(&mut g, xi, false)?;
    let mut b = Bindings::new();
    b.bind("stim", &x).bind_store(p);
    Ok(g.forward(&b)?.into_tensor(out))
}
