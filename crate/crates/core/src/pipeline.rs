//! End-to-end training: component pretraining, branch maps, fusion
//! training, held-out evaluation, ablation and checkpoints.

use std::path::Path;

use ndgrad::{adam_step, AdamConfig, AdamState, Bindings, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::efnet::{self, CamStack, GapCnn, TextClassifier, GAP_PREFIX, TEXT_PREFIX};
use crate::error::{invalid, io_error, Error, Result};
use crate::nn;
use crate::pnet::{self, FusionGraph, GraphOptions, PNET_PREFIX};
use crate::ppl::{self, PlNetParams, PplHistory, VaeParams, DEC_PREFIX, ENC_PREFIX, PLNET_PREFIX};
use crate::saldata::{split_indices, Dataset, SaliencyMap, Stimulus};
use crate::salmetrics::{self, EvalOptions, MetricReport, Scores};
use crate::seed::sub_seed;

pub const TEXT_PATCHES_PER_CLASS: usize = 600;
pub const CHECKPOINT_FILE: &str = "model.wsal";
pub const CONFIG_FILE: &str = "config.json";

/// Pretrained parts feeding the fusion network; absent parts are disabled.
#[derive(Clone, Debug, Default)]
pub struct Components {
    pub text: Option<TextClassifier>,
    pub gap: Option<GapCnn>,
    pub vae: Option<VaeParams>,
    pub plnet: Option<PlNetParams>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainHistory {
    pub text: Vec<f64>,
    pub gap: Vec<f64>,
    pub ppl: PplHistory,
}

/// Trains every component the flags enable on `train`.
pub fn pretrain(train: &Dataset, cfg: &TrainConfig) -> Result<(Components, PretrainHistory)> {
    if train.is_empty() {
        return invalid("pretraining needs at least one sample");
    }
    let stimuli: Vec<Stimulus> = train.samples.iter().map(|s| s.stimulus.clone()).collect();
    let mut comps = Components::default();
    let mut hist = PretrainHistory::default();
    if cfg.flags.use_trd {
        let (patches, labels) = efnet::sample_patches(
            &stimuli,
            TEXT_PATCHES_PER_CLASS,
            cfg.trd.patch_size,
            &cfg.trd.scales,
            sub_seed(cfg.seed, 20),
        )?;
        let (clf, h) = efnet::train_text_classifier(&patches, &labels, cfg, sub_seed(cfg.seed, 21))?;
        comps.text = Some(clf);
        hist.text = h;
    }
    if cfg.flags.use_mdrd {
        let labels: Vec<usize> = stimuli.iter().map(efnet::class_label).collect();
        let (net, h) = efnet::train_gap_cnn(&stimuli, &labels, cfg, sub_seed(cfg.seed, 22))?;
        comps.gap = Some(net);
        hist.gap = h;
    }
    if cfg.flags.use_ppl {
        let out = ppl::train_ppl(train, cfg)?;
        comps.vae = Some(out.vae);
        comps.plnet = Some(out.plnet);
        hist.ppl = out.history;
    }
    Ok((comps, hist))
}

/// Precomputed branch channels of one stimulus.
#[derive(Clone, Debug, Default)]
pub struct BranchMaps {
    pub prior: Option<SaliencyMap>,
    pub mdrd: Option<SaliencyMap>,
    pub text: Option<SaliencyMap>,
    /// Class selection for the in-graph class-region path.
    pub mdrd_selector: Option<Tensor>,
}

impl Components {
    pub fn branch_maps(&self, stim: &Stimulus, cfg: &TrainConfig) -> Result<BranchMaps> {
        let mut m = BranchMaps::default();
        if cfg.flags.use_ppl {
            let pl = self.plnet.as_ref().ok_or_else(|| missing("prior network"))?;
            m.prior = Some(ppl::plnet_forward(stim, pl)?);
        }
        if cfg.flags.use_mdrd {
            let net = self.gap.as_ref().ok_or_else(|| missing("class-activation network"))?;
            let stack = CamStack::compute(stim, net, cfg.variance_fraction)?;
            m.mdrd_selector = Some(pnet::mdrd_selector(&stack)?);
            m.mdrd = Some(stack.map(efnet::GAP_STRIDE));
        }
        if cfg.flags.use_trd {
            let clf = self.text.as_ref().ok_or_else(|| missing("text classifier"))?;
            m.text = Some(efnet::trd(stim, clf, &cfg.trd.scales, cfg.trd.stride, cfg.trd.sigma_blur)?);
        }
        Ok(m)
    }

    pub fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        let mut add = |other: &ParamStore| {
            for (k, v) in other.iter() {
                s.insert(k, v.clone());
            }
        };
        if let Some(t) = &self.text {
            add(&t.weights);
        }
        if let Some(g) = &self.gap {
            add(&g.weights);
        }
        if let Some(v) = &self.vae {
            add(&v.store());
        }
        if let Some(p) = &self.plnet {
            add(&p.weights);
        }
        s
    }
}

fn missing(what: &str) -> Error {
    Error::Invalid(format!("{what} is enabled but not present"))
}

fn options(cfg: &TrainConfig, mdrd_in_graph: bool) -> GraphOptions {
    GraphOptions {
        use_ppl: cfg.flags.use_ppl,
        use_mdrd: cfg.flags.use_mdrd,
        use_trd: cfg.flags.use_trd,
        plnet_in_graph: false,
        plnet_trainable: false,
        mdrd_in_graph,
        n_classes: cfg.gap_cnn.n_classes,
    }
}

/// Everything the fusion graph binds for one sample.
#[derive(Clone, Debug)]
pub struct FusionSample {
    pub stim: Tensor,
    pub gt: Tensor,
    pub gt_den: Tensor,
    pub prior: Option<Tensor>,
    pub mdrd: Option<Tensor>,
    pub text: Option<Tensor>,
    pub mdrd_selector: Option<Tensor>,
}

impl FusionSample {
    pub fn new(stim: &Stimulus, gt: &SaliencyMap, maps: &BranchMaps, eps: f64) -> Result<Self> {
        Ok(FusionSample {
            stim: stim.to_tensor(),
            gt: gt.to_tensor(),
            gt_den: pnet::gt_denominator(gt, eps)?,
            prior: maps.prior.as_ref().map(SaliencyMap::to_tensor),
            mdrd: maps.mdrd.as_ref().map(SaliencyMap::to_tensor),
            text: maps.text.as_ref().map(SaliencyMap::to_tensor),
            mdrd_selector: maps.mdrd_selector.clone(),
        })
    }

    fn bind<'a>(&'a self, b: &mut Bindings<'a>, opts: &GraphOptions) -> Result<()> {
        b.bind("pnet.in.stim", &self.stim)
            .bind("pnet.in.gt", &self.gt)
            .bind("pnet.in.gt_den", &self.gt_den);
        let need = |t: &'a Option<Tensor>, what: &str| t.as_ref().ok_or_else(|| missing(what));
        if opts.use_ppl && !opts.plnet_in_graph {
            b.bind("pnet.in.prior", need(&self.prior, "prior map")?);
        }
        if opts.use_mdrd {
            if opts.mdrd_in_graph {
                b.bind("pnet.in.mdrd_sel", need(&self.mdrd_selector, "class selection")?);
            } else {
                b.bind("pnet.in.mdrd", need(&self.mdrd, "class-region map")?);
            }
        }
        if opts.use_trd {
            b.bind("pnet.in.text", need(&self.text, "text map")?);
        }
        Ok(())
    }
}

/// Per-step batch means of the fusion objective and its two terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub total: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "step,total,l1,l2";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for i in 0..self.total.len() {
            out.push_str(&format!("{i},{:.9},{:.9},{:.9}\n", self.total[i], self.l1[i], self.l2[i]));
        }
        out
    }
}

/// Trains `base.*` and `pnet.*` (plus `gap.*` when fine-tuning everything)
/// on precomputed samples. Returns the fusion weights, the possibly tuned
/// class-activation network, and the history.
pub fn train_fusion(
    samples: &[FusionSample],
    cfg: &TrainConfig,
    gap: Option<&GapCnn>,
) -> Result<(ParamStore, Option<GapCnn>, TrainHistory)> {
    if samples.is_empty() {
        return invalid("fusion training needs at least one sample");
    }
    let (_, h, w) = dims3(&samples[0].stim)?;
    let tune_gap = cfg.flags.finetune_efnet_all && cfg.flags.use_mdrd;
    let opts = options(cfg, tune_gap);
    let fg = FusionGraph::build(w, h, opts, cfg.alpha, cfg.beta, cfg.epsilon)?;
    let mut trainable = pnet::init_fusion(sub_seed(cfg.seed, 30));
    let mut frozen = ParamStore::new();
    if tune_gap {
        let net = gap.ok_or_else(|| missing("class-activation network"))?;
        for (k, v) in net.weights.iter() {
            // The fc bias does not reach the region map.
            if k.starts_with("gap.fc.b") {
                frozen.insert(k, v.clone());
            } else {
                trainable.insert(k, v.clone());
            }
        }
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 31));
    let mut hist = TrainHistory::default();
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let parts = nn::par_map(&idx, |&i| -> Result<_> {
            let mut b = Bindings::new();
            samples[i].bind(&mut b, &opts)?;
            b.bind_store(&trainable);
            b.bind_store(&frozen);
            let v = fg.graph.forward(&b)?;
            let grads = fg.graph.backward(&v, fg.total)?;
            Ok((v.scalar(fg.total), v.scalar(fg.l1), v.scalar(fg.l2), grads))
        });
        let k = 1.0 / idx.len() as f64;
        let (mut t, mut a, mut c) = (0.0, 0.0, 0.0);
        let mut acc = ndgrad::Gradients::new();
        for p in parts {
            let (lt, l1, l2, g) = p?;
            t += lt;
            a += l1;
            c += l2;
            acc.accumulate(&g);
        }
        acc.scale(k);
        adam_step(&mut trainable, &acc, &adam, &mut state)?;
        hist.total.push(t * k);
        hist.l1.push(a * k);
        hist.l2.push(c * k);
    }
    let tuned = if tune_gap {
        let mut store = trainable.with_prefix(GAP_PREFIX);
        for (k, v) in frozen.iter() {
            store.insert(k, v.clone());
        }
        Some(GapCnn::from_store(&store, cfg.gap_cnn.n_classes)?)
    } else {
        None
    };
    let mut fusion = trainable.with_prefix(efnet::BASE_PREFIX);
    for (k, v) in trainable.with_prefix(PNET_PREFIX).iter() {
        fusion.insert(k, v.clone());
    }
    Ok((fusion, tuned, hist))
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => invalid(format!("expected a [C, H, W] tensor, got {s:?}")),
    }
}

/// A trained predictor: configuration, components and fusion weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub components: Components,
    pub fusion: ParamStore,
}

impl Model {
    /// Prediction at the configured working resolution; other sizes are
    /// resized first and the map is returned at working resolution.
    pub fn predict(&self, stim: &Stimulus) -> Result<SaliencyMap> {
        let (w, h) = (self.config.width, self.config.height);
        let stim = if stim.width() == w && stim.height() == h {
            stim.clone()
        } else {
            stim.resized(w, h)
        };
        let maps = self.components.branch_maps(&stim, &self.config)?;
        self.predict_with(&stim, &maps)
    }

    pub fn predict_with(&self, stim: &Stimulus, maps: &BranchMaps) -> Result<SaliencyMap> {
        let opts = options(&self.config, false);
        let (w, h) = (stim.width(), stim.height());
        let mut g = ndgrad::Graph::new();
        let pred = pnet::prediction_graph(&mut g, w, h, opts)?;
        let x = stim.to_tensor();
        let (prior, mdrd, text) = (
            maps.prior.as_ref().map(SaliencyMap::to_tensor),
            maps.mdrd.as_ref().map(SaliencyMap::to_tensor),
            maps.text.as_ref().map(SaliencyMap::to_tensor),
        );
        let mut b = Bindings::new();
        b.bind("pnet.in.stim", &x).bind_store(&self.fusion);
        for (on, name, t, what) in [
            (opts.use_ppl, "pnet.in.prior", &prior, "prior map"),
            (opts.use_mdrd, "pnet.in.mdrd", &mdrd, "class-region map"),
            (opts.use_trd, "pnet.in.text", &text, "text map"),
        ] {
            if on {
                b.bind(name, t.as_ref().ok_or_else(|| missing(what))?);
            }
        }
        Ok(SaliencyMap::from_tensor(&g.forward(&b)?.into_tensor(pred))?)
    }

    pub fn predict_all(&self, stimuli: &[Stimulus]) -> Result<Vec<SaliencyMap>> {
        nn::par_map(stimuli, |s| self.predict(s)).into_iter().collect()
    }

    /// Single store holding every part under its prefix.
    pub fn store(&self) -> ParamStore {
        let mut s = self.components.store();
        for (k, v) in self.fusion.iter() {
            s.insert(k, v.clone());
        }
        s
    }

    /// Rebuilds a model; the flags in `config` decide which parts must exist.
    pub fn from_store(store: &ParamStore, config: TrainConfig) -> Result<Model> {
        let expect = |prefix: &str, on: bool| -> Result<()> {
            let present = store.names().any(|n| n.starts_with(prefix));
            if on && !present {
                return invalid(format!("checkpoint has no {prefix}* weights but the configuration enables them"));
            }
            if !on && present {
                return invalid(format!("checkpoint holds {prefix}* weights that the configuration disables"));
            }
            Ok(())
        };
        expect(TEXT_PREFIX, config.flags.use_trd)?;
        expect(GAP_PREFIX, config.flags.use_mdrd)?;
        expect(ENC_PREFIX, config.flags.use_ppl)?;
        expect(DEC_PREFIX, config.flags.use_ppl)?;
        expect(PLNET_PREFIX, config.flags.use_ppl)?;
        let mut comps = Components::default();
        if config.flags.use_trd {
            comps.text = Some(TextClassifier::from_store(
                &store.with_prefix(TEXT_PREFIX),
                config.trd.patch_size,
                config.trd.threshold,
            )?);
        }
        if config.flags.use_mdrd {
            comps.gap = Some(GapCnn::from_store(&store.with_prefix(GAP_PREFIX), config.gap_cnn.n_classes)?);
        }
        if config.flags.use_ppl {
            comps.vae = Some(VaeParams::from_store(store, &config)?);
            comps.plnet = Some(PlNetParams::from_store(&store.with_prefix(PLNET_PREFIX))?);
        }
        let like = pnet::init_fusion(0);
        let mut fusion = ParamStore::new();
        for (k, v) in like.iter() {
            let t = store
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing {k}")))?;
            if t.shape() != v.shape() {
                return invalid(format!("{k} has shape {:?}, expected {:?}", t.shape(), v.shape()));
            }
            fusion.insert(k, t.clone());
        }
        Ok(Model {
            config,
            components: comps,
            fusion,
        })
    }

    /// Writes `model.wsal` and `config.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        self.store().save(dir.join(CHECKPOINT_FILE))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_json()).map_err(io_error(&cfg_path))?;
        Ok(())
    }

    /// Loads a model saved by [`save`](Self::save). A checkpoint file path is
    /// accepted too; the configuration is read from its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let dir = if path.is_dir() {
            path
        } else {
            path.parent().unwrap_or(Path::new("."))
        };
        let ckpt = if path.is_dir() {
            dir.join(CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        };
        let config = TrainConfig::load(dir.join(CONFIG_FILE))?;
        Model::from_store(&ParamStore::load(&ckpt)?, config)
    }
}

fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        n_thresholds: cfg.eval.n_thresholds,
        seed: cfg.eval.metric_seed,
    }
}

/// Scores `model` on `data`.
pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<MetricReport> {
    let stimuli: Vec<Stimulus> = data.samples.iter().map(|s| s.stimulus.clone()).collect();
    let preds = model.predict_all(&stimuli)?;
    Ok(salmetrics::evaluate(&preds, data, eval_options(&model.config))?)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub pretrain: PretrainHistory,
    /// Held-out scores.
    pub report: MetricReport,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn check_resolution(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    for s in &data.samples {
        if s.stimulus.width() != cfg.width || s.stimulus.height() != cfg.height {
            return invalid(format!(
                "stimulus {} is {}x{}, configuration expects {}x{}",
                s.stimulus.id,
                s.stimulus.width(),
                s.stimulus.height(),
                cfg.width,
                cfg.height
            ));
        }
    }
    Ok(())
}

fn fusion_samples(data: &Dataset, comps: &Components, cfg: &TrainConfig) -> Result<Vec<FusionSample>> {
    nn::par_map(&data.samples, |s| {
        let maps = comps.branch_maps(&s.stimulus, cfg)?;
        FusionSample::new(&s.stimulus, &s.gt, &maps, cfg.epsilon)
    })
    .into_iter()
    .collect()
}

/// Seeded train/held-out split. Shuffled AUC draws each held-out page's
/// negatives from the other held-out pages, so at least two are required.
fn holdout_split(data: &Dataset, cfg: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let (train_idx, test_idx) = split_indices(data.len(), cfg.eval.holdout_fraction, cfg.seed);
    if test_idx.len() < 2 || train_idx.is_empty() {
        return invalid(format!(
            "{} stimuli with holdout fraction {} leave {} held out; shuffled AUC needs at least 2",
            data.len(),
            cfg.eval.holdout_fraction,
            test_idx.len()
        ));
    }
    Ok((train_idx, test_idx))
}

/// Splits, pretrains, trains the fusion network and scores the held-out part.
pub fn train_full(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_resolution(data, cfg)?;
    let (train_idx, test_idx) = holdout_split(data, cfg)?;
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let (mut comps, pre) = pretrain(&train, cfg)?;
    let samples = fusion_samples(&train, &comps, cfg)?;
    let (fusion, tuned, history) = train_fusion(&samples, cfg, comps.gap.as_ref())?;
    if let Some(g) = tuned {
        comps.gap = Some(g);
    }
    let model = Model {
        config: cfg.clone(),
        components: comps,
        fusion,
    };
    let report = evaluate_model(&model, &test)?;
    Ok(TrainOutcome {
        model,
        history,
        pretrain: pre,
        report,
        train_indices: train_idx,
        test_indices: test_idx,
    })
}

/// Ablation rows as `(name, trd, mdrd, ppl)`.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 5] = [
    ("Baseline", false, false, false),
    ("Baseline+TRD", true, false, false),
    ("Baseline+MDRD", false, true, false),
    ("Baseline+TRD+MDRD", true, true, false),
    ("Baseline+TRD+MDRD+PPL", true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<(String, Scores)>,
}

impl AblationTable {
    pub const HEADER: &'static str = "config,sauc,nss,cc";

    pub fn get(&self, name: &str) -> Option<Scores> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for (n, s) in &self.rows {
            out.push_str(&format!("{n},{:.6},{:.6},{:.6}\n", s.sauc, s.nss, s.cc));
        }
        out
    }

    /// Row-wise mean over several tables with the same rows.
    pub fn mean(tables: &[AblationTable]) -> Result<AblationTable> {
        let first = tables.first().ok_or_else(|| Error::Invalid("no ablation tables".into()))?;
        let mut rows = Vec::new();
        for (i, (name, _)) in first.rows.iter().enumerate() {
            let mut acc = Scores {
                sauc: 0.0,
                nss: 0.0,
                cc: 0.0,
            };
            for t in tables {
                let (n, s) = t.rows.get(i).ok_or_else(|| Error::Invalid("ablation rows differ".into()))?;
                if n != name {
                    return invalid("ablation rows differ");
                }
                acc.sauc += s.sauc;
                acc.nss += s.nss;
                acc.cc += s.cc;
            }
            let k = tables.len() as f64;
            rows.push((
                name.clone(),
                Scores {
                    sauc: acc.sauc / k,
                    nss: acc.nss / k,
                    cc: acc.cc / k,
                },
            ));
        }
        Ok(AblationTable { rows })
    }
}

/// Trains one fusion network per ablation row. Components are pretrained
/// once and every row shares the split, initialization and batch order.
pub fn ablate(data: &Dataset, cfg: &TrainConfig) -> Result<AblationTable> {
    check_resolution(data, cfg)?;
    let (train_idx, test_idx) = holdout_split(data, cfg)?;
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    let mut all = cfg.clone();
    all.flags.use_trd = true;
    all.flags.use_mdrd = true;
    all.flags.use_ppl = true;
    let (comps, _) = pretrain(&train, &all)?;
    let samples = fusion_samples(&train, &comps, &all)?;
    let test_maps: Vec<BranchMaps> = nn::par_map(&test.samples, |s| comps.branch_maps(&s.stimulus, &all))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, trd, mdrd, ppl) in ABLATION_ROWS {
        let mut row = cfg.clone();
        row.flags.use_trd = trd;
        row.flags.use_mdrd = mdrd;
        row.flags.use_ppl = ppl;
        let (fusion, tuned, _) = train_fusion(&samples, &row, comps.gap.as_ref())?;
        let mut parts = comps.clone();
        if let Some(g) = tuned {
            parts.gap = Some(g);
        }
        let model = Model {
            config: row,
            components: parts,
            fusion,
        };
        let preds: Vec<SaliencyMap> = if model.config.flags.finetune_efnet_all {
            let stimuli: Vec<Stimulus> = test.samples.iter().map(|s| s.stimulus.clone()).collect();
            model.predict_all(&stimuli)?
        } else {
            let pairs: Vec<(&Stimulus, &BranchMaps)> =
                test.samples.iter().map(|s| &s.stimulus).zip(&test_maps).collect();
            nn::par_map(&pairs, |(s, m)| model.predict_with(s, m))
                .into_iter()
                .collect::<Result<_>>()?
        };
        let report = salmetrics::evaluate(&preds, &test, eval_options(cfg))?;
        rows.push((name.to_string(), report.scores()));
    }
    Ok(AblationTable { rows })
}
