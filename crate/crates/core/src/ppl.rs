//! Position prior learning: a VAE over downsampled saliency maps and PL-Net,
//! a small CNN whose prior maps are trained so their encoded posteriors match
//! those of the true maps.
//!
//! Stage 1 fits the VAE on ground truth with `lambda1 * BCE + lambda2 * KL`
//! (the negated evidence bound, BCE summed over pixels). Stage 2 freezes the
//! VAE and trains PL-Net on `KL(q(S') || q(S))`, averaged over the batch.

use ndgrad::{adam_step, AdamConfig, AdamState, Bindings, GradError, Graph, NodeId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::error::{invalid, Result};
use crate::imageops;
use crate::nn::{self, conv, dense};
use crate::saldata::{Dataset, SaliencyMap, Stimulus};
use crate::seed::sub_seed;

pub const ENC_PREFIX: &str = "vae.enc.";
pub const DEC_PREFIX: &str = "vae.dec.";
pub const PLNET_PREFIX: &str = "plnet.";

const PROB_FLOOR: f64 = 1e-7;

/// Diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return invalid(format!("latent with {} means and {} deviations", mu.len(), sigma.len()));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return invalid("latent means must be finite and deviations positive");
        }
        Ok(GaussianLatent { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianLatent {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    fn from_logvar(mu: &[f64], logvar: &[f64]) -> Self {
        GaussianLatent {
            mu: mu.to_vec(),
            sigma: logvar.iter().map(|l| (0.5 * l).exp()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn logvar(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 2.0 * s.ln()).collect()
    }
}

/// `KL(q1 || q2)` between diagonal Gaussians.
pub fn gaussian_kl(q1: &GaussianLatent, q2: &GaussianLatent) -> Result<f64> {
    if q1.dim() != q2.dim() {
        return invalid(format!("latent dimensions {} and {} differ", q1.dim(), q2.dim()));
    }
    let mut kl = 0.0;
    for i in 0..q1.dim() {
        let (m1, s1, m2, s2) = (q1.mu[i], q1.sigma[i], q2.mu[i], q2.sigma[i]);
        kl += (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
    }
    Ok(kl.max(0.0))
}

/// `KL(q || N(0, I)) = 0.5 * sum(sigma^2 + mu^2 - 1 - 2 log sigma)`.
pub fn kl_to_standard(q: &GaussianLatent) -> f64 {
    q.mu
        .iter()
        .zip(&q.sigma)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// `z = mu + sigma * noise`.
pub fn reparameterize(lat: &GaussianLatent, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != lat.dim() {
        return invalid(format!("noise of length {} for a {}-d latent", noise.len(), lat.dim()));
    }
    Ok(lat.mu.iter().zip(&lat.sigma).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Encoder and decoder weights with their geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    pub grid: (usize, usize),
    pub factor: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

impl VaeParams {
    pub fn init(cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gw, gh) = (cfg.ppl.vae_width, cfg.ppl.vae_height);
        let (d, h, dz) = (gw * gh, cfg.ppl.hidden, cfg.ppl.latent_dim);
        let mut encoder = ParamStore::new();
        nn::init_dense(&mut encoder, &mut rng, "vae.enc.l1", d, h, 2f64.sqrt());
        nn::init_dense(&mut encoder, &mut rng, "vae.enc.l2", h, h, 2f64.sqrt());
        nn::init_dense(&mut encoder, &mut rng, "vae.enc.out", h, 2 * dz, 0.1);
        let mut decoder = ParamStore::new();
        nn::init_dense(&mut decoder, &mut rng, "vae.dec.l1", dz, h, 2f64.sqrt());
        nn::init_dense(&mut decoder, &mut rng, "vae.dec.l2", h, h, 2f64.sqrt());
        nn::init_dense(&mut decoder, &mut rng, "vae.dec.out", h, d, 1.0);
        VaeParams {
            encoder,
            decoder,
            grid: (gw, gh),
            factor: cfg.vae_factor(),
            latent_dim: dz,
            hidden: h,
        }
    }

    /// Rebuilds from a checkpoint holding `vae.enc.*` and `vae.dec.*`.
    pub fn from_store(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let mut v = VaeParams::init(cfg, 0);
        v.encoder = take_prefixed(store, ENC_PREFIX, &v.encoder)?;
        v.decoder = take_prefixed(store, DEC_PREFIX, &v.decoder)?;
        Ok(v)
    }

    pub fn input_dim(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Both stores merged.
    pub fn store(&self) -> ParamStore {
        let mut s = self.encoder.clone();
        s.extend_prefixed("", &self.decoder);
        s
    }

    /// Downsampled, flattened map as a `[1, D]` row.
    pub fn prepare(&self, map: &SaliencyMap) -> Result<Tensor> {
        let (w, h) = (self.grid.0 * self.factor, self.grid.1 * self.factor);
        if map.dims() != (w, h) {
            return invalid(format!("map is {:?}, VAE expects {w}x{h}", map.dims()));
        }
        let v = imageops::block_average(map.values(), w, h, self.factor);
        Ok(Tensor::new(vec![1, v.len()], v)?)
    }
}

/// Copies every key of `like` from `store`, requiring matching shapes.
pub(crate) fn take_prefixed(store: &ParamStore, prefix: &str, like: &ParamStore) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in like.iter() {
        debug_assert!(name.starts_with(prefix));
        let got = store.require(name)?;
        if got.shape() != t.shape() {
            return invalid(format!(
                "checkpoint tensor {name} has shape {:?}, config expects {:?}",
                got.shape(),
                t.shape()
            ));
        }
        out.insert(name, got.clone());
    }
    Ok(out)
}

/// Encoder on `x: [B, D]`; returns `(mu, logvar)`, each `[B, dz]`.
pub fn encoder_graph(
    g: &mut Graph,
    x: NodeId,
    vae: &VaeParams,
    trainable: bool,
) -> Result<(NodeId, NodeId), GradError> {
    let h = dense(g, x, "vae.enc.l1", vae.hidden, trainable)?;
    let h = g.relu(h)?;
    let h = dense(g, h, "vae.enc.l2", vae.hidden, trainable)?;
    let h = g.relu(h)?;
    let out = dense(g, h, "vae.enc.out", 2 * vae.latent_dim, trainable)?;
    let mu = g.slice_cols(out, 0, vae.latent_dim)?;
    let logvar = g.slice_cols(out, vae.latent_dim, 2 * vae.latent_dim)?;
    Ok((mu, logvar))
}

/// Decoder on `z: [B, dz]`; returns sigmoid reconstructions `[B, D]`.
pub fn decoder_graph(g: &mut Graph, z: NodeId, vae: &VaeParams, trainable: bool) -> Result<NodeId, GradError> {
    let h = dense(g, z, "vae.dec.l1", vae.hidden, trainable)?;
    let h = g.relu(h)?;
    let h = dense(g, h, "vae.dec.l2", vae.hidden, trainable)?;
    let h = g.relu(h)?;
    let out = dense(g, h, "vae.dec.out", vae.input_dim(), trainable)?;
    g.sigmoid(out)
}

/// Summed BCE of `pred` against `target` (same shape), with `pred` clamped.
pub fn bce_sum_graph(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, GradError> {
    let p = g.clamp(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lp = g.log(p)?;
    let q = g.scale(p, -1.0)?;
    let q = g.offset(q, 1.0)?;
    let lq = g.log(q)?;
    let t_neg = g.scale(target, -1.0)?;
    let t_neg = g.offset(t_neg, 1.0)?;
    let a = g.mul(target, lp)?;
    let b = g.mul(t_neg, lq)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` summed over all entries.
pub fn kl_standard_graph(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId, GradError> {
    let ev = g.exp(logvar)?;
    let m2 = g.mul(mu, mu)?;
    let t = g.add(ev, m2)?;
    let t = g.sub(t, logvar)?;
    let t = g.offset(t, -1.0)?;
    let s = g.sum(t)?;
    g.scale(s, 0.5)
}

/// `KL(q1 || q2)` in log-variance form, summed over all entries.
pub fn kl_graph(g: &mut Graph, mu1: NodeId, lv1: NodeId, mu2: NodeId, lv2: NodeId) -> Result<NodeId, GradError> {
    let dlv = g.sub(lv2, lv1)?;
    let dlv = g.scale(dlv, 0.5)?;
    let e1 = g.exp(lv1)?;
    let d = g.sub(mu1, mu2)?;
    let d2 = g.mul(d, d)?;
    let num = g.add(e1, d2)?;
    let e2 = g.exp(lv2)?;
    let den = g.scale(e2, 2.0)?;
    let frac = g.div(num, den)?;
    let t = g.add(dlv, frac)?;
    let t = g.offset(t, -0.5)?;
    g.sum(t)
}

/// Stage-1 objective on a `[B, D]` batch, divided by `B`. Inputs:
/// `vae.in.maps` and `vae.in.noise`.
pub struct VaeLossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub recon: NodeId,
    pub bce: NodeId,
    pub kl: NodeId,
}

impl VaeLossGraph {
    pub fn build(vae: &VaeParams, batch: usize, lambda1: f64, lambda2: f64) -> Result<Self, GradError> {
        let mut g = Graph::new();
        let x = g.input("vae.in.maps", &[batch, vae.input_dim()])?;
        let noise = g.input("vae.in.noise", &[batch, vae.latent_dim])?;
        let (mu, lv) = encoder_graph(&mut g, x, vae, true)?;
        let half = g.scale(lv, 0.5)?;
        let sigma = g.exp(half)?;
        let sn = g.mul(sigma, noise)?;
        let z = g.add(mu, sn)?;
        let recon = decoder_graph(&mut g, z, vae, true)?;
        let bce = bce_sum_graph(&mut g, recon, x)?;
        let kl = kl_standard_graph(&mut g, mu, lv)?;
        let a = g.scale(bce, lambda1 / batch as f64)?;
        let b = g.scale(kl, lambda2 / batch as f64)?;
        let loss = g.add(a, b)?;
        Ok(VaeLossGraph {
            graph: g,
            loss,
            recon,
            bce,
            kl,
        })
    }
}

/// Posterior of a map at working resolution.
pub fn encode(map: &SaliencyMap, vae: &VaeParams) -> Result<GaussianLatent> {
    let x = vae.prepare(map)?;
    let mut g = Graph::new();
    let xi = g.input("x", &[1, vae.input_dim()])?;
    let (mu, lv) = encoder_graph(&mut g, xi, vae, false)?;
    let mut b = Bindings::new();
    b.bind("x", &x).bind_store(&vae.encoder);
    let v = g.forward(&b)?;
    Ok(GaussianLatent::from_logvar(v.get(mu).data(), v.get(lv).data()))
}

/// Reconstruction at working resolution (nearest-neighbour upsampled).
pub fn decode(z: &[f64], vae: &VaeParams) -> Result<SaliencyMap> {
    if z.len() != vae.latent_dim {
        return invalid(format!("latent of length {} for a {}-d decoder", z.len(), vae.latent_dim));
    }
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let mut g = Graph::new();
    let zi = g.input("z", &[1, vae.latent_dim])?;
    let out = decoder_graph(&mut g, zi, vae, false)?;
    let mut b = Bindings::new();
    b.bind("z", &zt).bind_store(&vae.decoder);
    let v = g.forward(&b)?;
    let (gw, gh) = vae.grid;
    let up = imageops::upsample_nearest(v.get(out).data(), gw, gh, vae.factor);
    Ok(SaliencyMap::new(gw * vae.factor, gh * vae.factor, up)?)
}

/// `lambda1 * BCE(recon, S) + lambda2 * KL(lat || N(0, I))` with BCE summed
/// over pixels.
pub fn vae_loss(s: &SaliencyMap, recon: &SaliencyMap, lat: &GaussianLatent, lambda1: f64, lambda2: f64) -> Result<f64> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return invalid(format!("loss weights must be positive, got {lambda1} and {lambda2}"));
    }
    if s.dims() != recon.dims() {
        return invalid(format!("target {:?} vs reconstruction {:?}", s.dims(), recon.dims()));
    }
    let mut bce = 0.0;
    for (t, p) in s.values().iter().zip(recon.values()) {
        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(lambda1 * bce + lambda2 * kl_to_standard(lat))
}

/// PL-Net weights (`plnet.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct PlNetParams {
    pub weights: ParamStore,
}

impl PlNetParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ParamStore::new();
        nn::init_conv(&mut w, &mut rng, "plnet.conv1", 8, 5, 3);
        nn::init_conv(&mut w, &mut rng, "plnet.conv2", 16, 8, 3);
        nn::init_conv(&mut w, &mut rng, "plnet.conv3", 16, 16, 3);
        nn::init_conv(&mut w, &mut rng, "plnet.conv4", 1, 16, 3);
        PlNetParams { weights: w }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let like = PlNetParams::init(0);
        Ok(PlNetParams {
            weights: take_prefixed(store, PLNET_PREFIX, &like.weights)?,
        })
    }
}

/// Normalized pixel coordinates in `[-1, 1]` as a `[2, H, W]` tensor.
pub fn coord_channels(width: usize, height: usize) -> Tensor {
    let plane = width * height;
    Tensor::from_fn(&[2, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        let (x, y) = (p % width, p / width);
        if c == 0 {
            2.0 * (x as f64 + 0.5) / width as f64 - 1.0
        } else {
            2.0 * (y as f64 + 0.5) / height as f64 - 1.0
        }
    })
}

/// PL-Net on a `[3, H, W]` stimulus node; the input is augmented with two
/// coordinate channels so the prior can depend on position. Returns `[1, H, W]`.
pub fn plnet_graph(g: &mut Graph, stim: NodeId, trainable: bool) -> Result<NodeId, GradError> {
    let (h, w) = (g.shape(stim)[1], g.shape(stim)[2]);
    let coords = g.constant(coord_channels(w, h));
    let x = g.concat_channels(&[stim, coords])?;
    let x = conv(g, x, "plnet.conv1", 8, 3, 2, trainable)?;
    let x = g.relu(x)?;
    let x = conv(g, x, "plnet.conv2", 16, 3, 2, trainable)?;
    let x = g.relu(x)?;
    let x = conv(g, x, "plnet.conv3", 16, 3, 1, trainable)?;
    let x = g.relu(x)?;
    let x = g.upsample_nearest(x, 2)?;
    let x = conv(g, x, "plnet.conv4", 1, 3, 1, trainable)?;
    let x = g.upsample_nearest(x, 2)?;
    g.sigmoid(x)
}

fn check_extents(stim: &Stimulus) -> Result<()> {
    if stim.width() % 4 != 0 || stim.height() % 4 != 0 {
        return invalid(format!(
            "stimulus {} is {}x{}; extents must be multiples of 4",
            stim.id,
            stim.width(),
            stim.height()
        ));
    }
    Ok(())
}

/// Prior map `S'` for one stimulus.
pub fn plnet_forward(stim: &Stimulus, pl: &PlNetParams) -> Result<SaliencyMap> {
    check_extents(stim)?;
    let x = stim.to_tensor();
    let mut g = Graph::new();
    let xi = g.input("stim", x.shape())?;
    let out = plnet_graph(&mut g, xi, false)?;
    let mut b = Bindings::new();
    b.bind("stim", &x).bind_store(&pl.weights);
    let v = g.forward(&b)?;
    Ok(SaliencyMap::from_tensor(v.get(out))?)
}

/// Pixelwise mean of the prior maps, max-normalized.
pub fn mean_prior(pages: &[Stimulus], pl: &PlNetParams) -> Result<SaliencyMap> {
    let Some(first) = pages.first() else {
        return invalid("mean_prior needs at least one page");
    };
    let maps = nn::par_map(pages, |s| plnet_forward(s, pl));
    let mut acc = SaliencyMap::zeros(first.width(), first.height());
    for m in maps {
        let m = m?;
        if m.dims() != acc.dims() {
            return invalid("pages differ in extents");
        }
        for (a, v) in acc.values_mut().iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    let n = pages.len() as f64;
    Ok(acc.map(|v| v / n).normalize()?)
}

/// Stage-2 graph for one stimulus: `KL(q(S') || q(S))` with frozen encoder.
/// Inputs: `ppl.in.stim`, `ppl.in.mu`, `ppl.in.logvar`.
pub struct PriorLossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub prior: NodeId,
}

impl PriorLossGraph {
    pub fn build(vae: &VaeParams, width: usize, height: usize) -> Result<Self, GradError> {
        let mut g = Graph::new();
        let stim = g.input("ppl.in.stim", &[3, height, width])?;
        let mu_t = g.input("ppl.in.mu", &[1, vae.latent_dim])?;
        let lv_t = g.input("ppl.in.logvar", &[1, vae.latent_dim])?;
        let prior = plnet_graph(&mut g, stim, true)?;
        let small = g.avg_pool(prior, vae.factor)?;
        let flat = g.reshape(small, &[1, vae.input_dim()])?;
        let (mu, lv) = encoder_graph(&mut g, flat, vae, false)?;
        let loss = kl_graph(&mut g, mu, lv, mu_t, lv_t)?;
        Ok(PriorLossGraph { graph: g, loss, prior })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PplHistory {
    /// Stage-1 objective per step.
    pub vae: Vec<f64>,
    /// Stage-2 KL per step (batch mean).
    pub prior: Vec<f64>,
}

impl PplHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,vae,prior\n");
        let n = self.vae.len().max(self.prior.len());
        let cell = |v: &[f64], i: usize| v.get(i).map(|x| format!("{x:.9}")).unwrap_or_default();
        for i in 0..n {
            out.push_str(&format!("{i},{},{}\n", cell(&self.vae, i), cell(&self.prior, i)));
        }
        out
    }
}

pub struct PplOutcome {
    pub vae: VaeParams,
    pub plnet: PlNetParams,
    pub history: PplHistory,
}

/// Runs both stages on the training samples. With `flags.joint_ppl` the two
/// updates alternate every step instead of running one stage after the other.
pub fn train_ppl(data: &Dataset, cfg: &TrainConfig) -> Result<PplOutcome> {
    if data.is_empty() {
        return invalid("train_ppl needs at least one sample");
    }
    let mut vae = VaeParams::init(cfg, sub_seed(cfg.seed, 11));
    let mut plnet = PlNetParams::init(sub_seed(cfg.seed, 12));
    let mut history = PplHistory::default();
    let targets: Vec<Tensor> = data
        .samples
        .iter()
        .map(|s| vae.prepare(&s.gt))
        .collect::<Result<_>>()?;
    let mut stage1 = Stage1::new(&vae, cfg, &targets)?;
    if cfg.flags.joint_ppl {
        let mut stage2 = Stage2::new(cfg);
        let steps = cfg.ppl.vae_steps.max(cfg.ppl.plnet_steps);
        for step in 0..steps {
            if step < cfg.ppl.vae_steps {
                history.vae.push(stage1.step(&mut vae)?);
            }
            if step < cfg.ppl.plnet_steps {
                history.prior.push(stage2.step(&vae, &mut plnet, data)?);
            }
        }
    } else {
        for _ in 0..cfg.ppl.vae_steps {
            history.vae.push(stage1.step(&mut vae)?);
        }
        let mut stage2 = Stage2::new(cfg);
        for _ in 0..cfg.ppl.plnet_steps {
            history.prior.push(stage2.step(&vae, &mut plnet, data)?);
        }
    }
    Ok(PplOutcome { vae, plnet, history })
}

struct Stage1<'a> {
    graph: VaeLossGraph,
    targets: &'a [Tensor],
    batch: usize,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    state: AdamState,
    store: ParamStore,
}

impl<'a> Stage1<'a> {
    fn new(vae: &VaeParams, cfg: &TrainConfig, targets: &'a [Tensor]) -> Result<Self> {
        Ok(Stage1 {
            graph: VaeLossGraph::build(vae, cfg.ppl.batch, cfg.lambda1, cfg.lambda2)?,
            targets,
            batch: cfg.ppl.batch,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 13)),
            adam: AdamConfig {
                lr: cfg.ppl.lr,
                ..AdamConfig::default()
            },
            state: AdamState::new(),
            store: vae.store(),
        })
    }

    fn step(&mut self, vae: &mut VaeParams) -> Result<f64> {
        let d = self.targets[0].len();
        let dz = vae.latent_dim;
        let mut maps = Vec::with_capacity(self.batch * d);
        for _ in 0..self.batch {
            let i = self.rng.gen_range(0..self.targets.len());
            maps.extend_from_slice(self.targets[i].data());
        }
        let noise: Vec<f64> = (0..self.batch * dz).map(|_| self.rng.sample(StandardNormal)).collect();
        let maps = Tensor::new(vec![self.batch, d], maps)?;
        let noise = Tensor::new(vec![self.batch, dz], noise)?;
        let mut b = Bindings::new();
        b.bind("vae.in.maps", &maps).bind("vae.in.noise", &noise).bind_store(&self.store);
        let v = self.graph.graph.forward(&b)?;
        let loss = v.scalar(self.graph.loss);
        let grads = self.graph.graph.backward(&v, self.graph.loss)?;
        adam_step(&mut self.store, &grads, &self.adam, &mut self.state)?;
        vae.encoder = self.store.with_prefix(ENC_PREFIX);
        vae.decoder = self.store.with_prefix(DEC_PREFIX);
        Ok(loss)
    }
}

struct Stage2 {
    batch: usize,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    state: AdamState,
    graph: Option<PriorLossGraph>,
    cache: Vec<Option<(Tensor, Tensor, Tensor)>>,
    cached_encoder: Option<ParamStore>,
}

impl Stage2 {
    fn new(cfg: &TrainConfig) -> Self {
        Stage2 {
            batch: cfg.ppl.batch,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 14)),
            adam: AdamConfig {
                lr: cfg.ppl.lr,
                ..AdamConfig::default()
            },
            state: AdamState::new(),
            graph: None,
            cache: Vec::new(),
            cached_encoder: None,
        }
    }

    fn step(&mut self, vae: &VaeParams, plnet: &mut PlNetParams, data: &Dataset) -> Result<f64> {
        let first = &data.samples[0].stimulus;
        if self.graph.is_none() {
            self.graph = Some(PriorLossGraph::build(vae, first.width(), first.height())?);
        }
        // Target posteriors only change when the encoder does (joint mode).
        if self.cached_encoder.as_ref() != Some(&vae.encoder) || self.cache.len() != data.len() {
            self.cache = vec![None; data.len()];
            self.cached_encoder = Some(vae.encoder.clone());
        }
        let idx: Vec<usize> = (0..self.batch).map(|_| self.rng.gen_range(0..data.len())).collect();
        for &i in &idx {
            if self.cache[i].is_none() {
                let s = &data.samples[i];
                let q = encode(&s.gt, vae)?;
                let mu = Tensor::new(vec![1, q.dim()], q.mu.clone())?;
                let lv = Tensor::new(vec![1, q.dim()], q.logvar())?;
                self.cache[i] = Some((s.stimulus.to_tensor(), mu, lv));
            }
        }
        let graph = self.graph.as_ref().expect("built above");
        let cache = &self.cache;
        let (loss, grads) = nn::mean_gradients(&idx, |&i| {
            let (stim, mu, lv) = cache[i].as_ref().expect("filled above");
            let mut b = Bindings::new();
            b.bind("ppl.in.stim", stim)
                .bind("ppl.in.mu", mu)
                .bind("ppl.in.logvar", lv)
                .bind_store(&vae.encoder)
                .bind_store(&plnet.weights);
            let v = graph.graph.forward(&b)?;
            let g = graph.graph.backward(&v, graph.loss)?;
            Ok((v.scalar(graph.loss), g))
        })?;
        adam_step(&mut plnet.weights, &grads, &self.adam, &mut self.state)?;
        Ok(loss)
    }
}
