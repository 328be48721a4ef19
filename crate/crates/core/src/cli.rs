//! Command-line front end. Every command writes `run_manifest.json` into its
//! output directory; while a command runs, an `INCOMPLETE` marker holding the
//! error (if any) sits next to it and is removed on success.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndgrad::ParamStore;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{invalid, io_error, Result};
use crate::pipeline::{self, Model, CHECKPOINT_FILE, CONFIG_FILE};
use crate::ppl::{self, PlNetParams, PLNET_PREFIX};
use crate::saldata::{self, Category, Dataset, Layout, Stimulus};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const PPL_CHECKPOINT: &str = "ppl.wsal";
/// Stimulus ids of the training and held-out parts of a `train` run.
pub const SPLIT_FILE: &str = "split.json";

#[derive(Parser, Debug)]
#[command(name = "websal", version, about = "Web-page saliency prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic pages with fixations and element masks.
    Synth {
        #[arg(long)]
        seed: u64,
        /// A layout name, or `mixed` to cycle through all three.
        #[arg(long, default_value = "mixed")]
        layout: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = saldata::synth::DEFAULT_WIDTH)]
        width: usize,
        #[arg(long, default_value_t = saldata::synth::DEFAULT_HEIGHT)]
        height: usize,
    },
    /// Train the position prior only.
    Ppl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and score the held-out split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one saliency PGM per input image.
    Predict {
        #[arg(long, num_args = 1.., required = true)]
        image: Vec<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the five ablation configurations and tabulate held-out scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean prior map per layout family (or category).
    PriorViz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub inputs: Vec<String>,
    pub dataset_fingerprint: Option<String>,
    pub artifacts: Vec<Artifact>,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, out: &Path) -> Result<Run> {
        fs::create_dir_all(out).map_err(io_error(out))?;
        let marker = out.join(INCOMPLETE_MARKER);
        fs::write(&marker, format!("{command} running\n")).map_err(io_error(&marker))?;
        Ok(Run {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: None,
                config: None,
                inputs: Vec::new(),
                dataset_fingerprint: None,
                artifacts: Vec::new(),
            },
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(io_error(&path))?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    fn record_file(&mut self, name: &str) -> Result<()> {
        let path = self.out.join(name);
        let bytes = fs::read(&path).map_err(io_error(&path))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.out.join(RUN_MANIFEST);
        fs::write(&path, json).map_err(io_error(&path))?;
        let marker = self.out.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(io_error(&marker))?;
        Ok(self.manifest)
    }
}

/// Configuration from `path`, or the defaults, with `seed` applied.
pub fn resolve_config(path: Option<&Path>, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path, cfg: &TrainConfig) -> Result<Dataset> {
    Ok(Dataset::load(dir, cfg.width, cfg.height, cfg.sigma_fix)?)
}

fn layouts(name: &str) -> Result<Vec<Layout>> {
    if name == "mixed" {
        Ok(Layout::ALL.to_vec())
    } else {
        Ok(vec![name.parse::<Layout>()?])
    }
}

/// Runs one parsed command and returns its manifest. On failure the
/// output directory keeps an `INCOMPLETE` marker describing the error.
pub fn run(cmd: &Command) -> Result<RunManifest> {
    let out = match cmd {
        Command::Synth { out, .. }
        | Command::Ppl { out, .. }
        | Command::Train { out, .. }
        | Command::Eval { out, .. }
        | Command::Predict { out, .. }
        | Command::Ablate { out, .. }
        | Command::PriorViz { out, .. } => out.clone(),
    };
    let result = dispatch(cmd, &out);
    if let Err(e) = &result {
        let _ = fs::write(out.join(INCOMPLETE_MARKER), format!("failed: {e}\n"));
    }
    result
}

fn dispatch(cmd: &Command, out: &Path) -> Result<RunManifest> {
    match cmd {
        Command::Synth {
            seed,
            layout,
            count,
            width,
            height,
            ..
        } => {
            let mut run = Run::start("synth", out)?;
            if *count == 0 {
                return invalid("--count must be at least 1");
            }
            let pages = saldata::synthetic_pages(*count, &layouts(layout)?, *seed, *width, *height);
            saldata::write_dataset(out, &pages)?;
            for i in 0..pages.len() {
                for ext in [".ppm", ".csv", "_mask.pgm"] {
                    run.record_file(&format!("page_{i:03}{ext}"))?;
                }
            }
            run.record_file(saldata::DATASET_MANIFEST)?;
            run.manifest.seed = Some(*seed);
            run.manifest.inputs.push(format!("layout={layout}"));
            run.manifest.dataset_fingerprint = Some(dataset_fingerprint(out)?);
            run.finish()
        }
        Command::Ppl {
            data,
            config,
            seed,
            ..
        } => {
            let mut run = Run::start("ppl", out)?;
            let cfg = resolve_config(config.as_deref(), *seed)?;
            let ds = load_data(data, &cfg)?;
            let outcome = ppl::train_ppl(&ds, &cfg)?;
            let mut store = outcome.vae.store();
            for (k, v) in outcome.plnet.weights.iter() {
                store.insert(k, v.clone());
            }
            run.write(PPL_CHECKPOINT, &store.to_bytes())?;
            run.write("ppl_history.csv", outcome.history.to_csv().as_bytes())?;
            run.write(CONFIG_FILE, cfg.to_json().as_bytes())?;
            describe(&mut run, &cfg, data, &ds);
            run.finish()
        }
        Command::Train {
            data,
            config,
            seed,
            ..
        } => {
            let mut run = Run::start("train", out)?;
            let cfg = resolve_config(config.as_deref(), *seed)?;
            let ds = load_data(data, &cfg)?;
            let outcome = pipeline::train_full(&ds, &cfg)?;
            run.write(CHECKPOINT_FILE, &outcome.model.store().to_bytes())?;
            run.write(CONFIG_FILE, cfg.to_json().as_bytes())?;
            run.write("history.csv", outcome.history.to_csv().as_bytes())?;
            run.write("ppl_history.csv", outcome.pretrain.ppl.to_csv().as_bytes())?;
            run.write("text_history.csv", series_csv(&outcome.pretrain.text).as_bytes())?;
            run.write("gap_history.csv", series_csv(&outcome.pretrain.gap).as_bytes())?;
            run.write("report.csv", outcome.report.to_csv().as_bytes())?;
            let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| ds.samples[i].stimulus.id.clone()).collect() };
            let split = serde_json::json!({
                "train": ids(&outcome.train_indices),
                "held_out": ids(&outcome.test_indices),
            });
            run.write(SPLIT_FILE, serde_json::to_string_pretty(&split).expect("split serializes").as_bytes())?;
            describe(&mut run, &cfg, data, &ds);
            run.finish()
        }
        Command::Eval { data, ckpt, .. } => {
            let mut run = Run::start("eval", out)?;
            let model = Model::load(ckpt)?;
            let ds = load_data(data, &model.config)?;
            let report = pipeline::evaluate_model(&model, &ds)?;
            run.write("report.csv", report.to_csv().as_bytes())?;
            run.manifest.inputs.push(format!("ckpt={}", ckpt.display()));
            describe(&mut run, &model.config, data, &ds);
            run.finish()
        }
        Command::Predict { image, ckpt, .. } => {
            let mut run = Run::start("predict", out)?;
            let model = Model::load(ckpt)?;
            let mut used = std::collections::BTreeSet::new();
            for path in image {
                let stim = saldata::load_stimulus(path, Category::Mixed)?;
                let map = model.predict(&stim)?;
                let mut name = format!("{}_saliency.pgm", stim.id);
                let mut k = 1;
                while !used.insert(name.clone()) {
                    name = format!("{}_{k}_saliency.pgm", stim.id);
                    k += 1;
                }
                run.write(&name, &saldata::encode_pgm(&map))?;
                run.manifest.inputs.push(path.display().to_string());
            }
            run.manifest.inputs.push(format!("ckpt={}", ckpt.display()));
            run.manifest.seed = Some(model.config.seed);
            run.manifest.config = Some(model.config.clone());
            run.finish()
        }
        Command::Ablate {
            data,
            config,
            seed,
            ..
        } => {
            let mut run = Run::start("ablate", out)?;
            let cfg = resolve_config(config.as_deref(), *seed)?;
            let ds = load_data(data, &cfg)?;
            let table = pipeline::ablate(&ds, &cfg)?;
            run.write("ablation.csv", table.to_csv().as_bytes())?;
            describe(&mut run, &cfg, data, &ds);
            run.finish()
        }
        Command::PriorViz { data, ckpt, .. } => {
            let mut run = Run::start("prior-viz", out)?;
            let (pl, cfg) = load_prior(ckpt)?;
            let ds = load_data(data, &cfg)?;
            let mut groups: std::collections::BTreeMap<&str, Vec<Stimulus>> = Default::default();
            for s in &ds.samples {
                groups.entry(s.stimulus.group()).or_default().push(s.stimulus.clone());
            }
            for (group, pages) in &groups {
                let m = ppl::mean_prior(pages, &pl)?;
                run.write(&format!("prior_{group}.pgm"), &saldata::encode_pgm(&m))?;
            }
            run.manifest.inputs.push(format!("ckpt={}", ckpt.display()));
            describe(&mut run, &cfg, data, &ds);
            run.finish()
        }
    }
}

fn describe(run: &mut Run, cfg: &TrainConfig, data: &Path, ds: &Dataset) {
    run.manifest.seed = Some(cfg.seed);
    run.manifest.config = Some(cfg.clone());
    run.manifest.inputs.push(format!("data={}", data.display()));
    run.manifest.dataset_fingerprint = Some(ds.fingerprint());
}

/// Fingerprint of a written dataset as it will be read back.
fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let pairs = saldata::read_dataset(dir)?;
    Ok(Dataset::from_pairs(pairs, 1.0)?.fingerprint())
}

fn series_csv(v: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, x) in v.iter().enumerate() {
        out.push_str(&format!("{i},{x:.9}\n"));
    }
    out
}

/// Prior network from a model directory or a `ppl` output directory.
pub fn load_prior(ckpt: &Path) -> Result<(PlNetParams, TrainConfig)> {
    let dir = if ckpt.is_dir() {
        ckpt.to_path_buf()
    } else {
        ckpt.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let file = if ckpt.is_file() {
        ckpt.to_path_buf()
    } else if dir.join(PPL_CHECKPOINT).exists() {
        dir.join(PPL_CHECKPOINT)
    } else {
        dir.join(CHECKPOINT_FILE)
    };
    let cfg = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let store = ParamStore::load(&file)?;
    let pl = PlNetParams::from_store(&store.with_prefix(PLNET_PREFIX))?;
    Ok((pl, cfg))
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(m) => {
            println!("{}: wrote {} artifacts", m.command, m.artifacts.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
