//! `train` and `eval`.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tap_core::datasets::protocol::{evaluate_trained, TrainedSeed};
use tap_core::datasets::{run_protocol, Dataset, ProtocolConfig, ProtocolData, Splits};
use tap_core::encoder::checkpoint::{load_backbone, Checkpoint, CheckpointManifest};
use tap_core::encoder::{ToyConfig, BACKENDS, TOY_BACKEND};
use tap_core::inference::{AlignmentMode, InferenceConfig};
use tap_core::training::{LrGroup, TaskPreset};
use tap_core::vcp::PoolingMode;
use tap_core::{AttributeTree, CheckpointF64, ClipModelF64};

use crate::error::{CliError, CliResult};
use crate::io::{load_config, read_tree, write_json, write_jsonl, write_text};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Default hyperparameters of the task.
    Standard,
    /// 16-shot, 20-epoch runs without the attribute KL term.
    Synthetic,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting hyperparameters, applied before other flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// b2n, xd or fewshot.
    #[arg(long)]
    pub task: Option<TaskPreset>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub toa: Option<PathBuf>,
    /// Encoder backend: toy or pretrained-clip-adapter.
    #[arg(long)]
    pub backend: Option<String>,
    /// Backbone directory; a fresh toy backbone is used when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Comma-separated or repeated.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, conflicts_with = "all_shots")]
    pub shots: Option<usize>,
    /// Train on every training sample.
    #[arg(long)]
    pub all_shots: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Drop every regularizer.
    #[arg(long)]
    pub no_reg: bool,
    #[arg(long)]
    pub mu1: Option<f64>,
    #[arg(long)]
    pub mu2: Option<f64>,
    #[arg(long)]
    pub mu3: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub pooling: Option<PoolingMode>,
    #[arg(long)]
    pub alignment: Option<AlignmentMode>,
    /// Keep only the first k attributes of every tree.
    #[arg(long)]
    pub attrs_fixed: Option<usize>,
    /// Unstructured-description baseline.
    #[arg(long, conflicts_with_all = ["alpha", "pooling", "alignment", "attrs_fixed"])]
    pub unstructured: bool,
    /// low-attr or high-attr.
    #[arg(long)]
    pub lr_group: Option<LrGroup>,
    #[arg(long)]
    pub lr_multiplier: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Evaluate last-epoch prompts instead of the Gaussian aggregate.
    #[arg(long)]
    pub last: bool,
    /// Cross-dataset target as NAME=TREE, repeatable.
    #[arg(long = "target")]
    pub targets: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub dataset: String,
    pub toa: PathBuf,
}

/// Everything a training run depends on; written as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub toa: Option<PathBuf>,
    pub backend: String,
    pub backbone: Option<PathBuf>,
    pub targets: Vec<Target>,
    pub protocol: ProtocolConfig,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            data_root: None,
            toa: None,
            backend: TOY_BACKEND.into(),
            backbone: None,
            targets: Vec::new(),
            protocol: ProtocolConfig::default(),
            output: None,
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| CliError::args(format!("{flag} is required")))
}

impl RunConfig {
    pub fn resolve(args: TrainArgs) -> CliResult<Self> {
        let mut cfg: RunConfig = match &args.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        match args.preset {
            Some(Preset::Standard) => cfg.protocol = ProtocolConfig::default(),
            Some(Preset::Synthetic) => cfg.protocol = ProtocolConfig::synthetic(),
            None => {}
        }
        let p = &mut cfg.protocol;
        if let Some(t) = args.task {
            p.task = t;
        }
        if !args.seeds.is_empty() {
            p.seeds = args.seeds;
        }
        if args.shots.is_some() {
            p.shots = args.shots;
        }
        if args.all_shots {
            p.shots = None;
        }
        if args.epochs.is_some() {
            p.epochs = args.epochs;
        }
        if let Some(g) = args.lr_group {
            p.train.lr_group = g;
            p.train.reg.mu3 = g.values().2;
        }
        if args.no_reg {
            p.train.reg.enabled = false;
        }
        if let Some(v) = args.mu1 {
            p.train.reg.mu1 = v;
        }
        if let Some(v) = args.mu2 {
            p.train.reg.mu2 = v;
        }
        if let Some(v) = args.mu3 {
            p.train.reg.mu3 = v;
        }
        if let Some(v) = args.lr_multiplier {
            p.train.lr_multiplier = v;
        }
        if let Some(v) = args.batch_size {
            p.train.batch_size = v;
        }
        if let Some(v) = args.alpha {
            p.inference.alpha = v;
        }
        if let Some(v) = args.pooling {
            p.inference.pooling = v;
        }
        if let Some(v) = args.alignment {
            p.inference.alignment = v;
        }
        if args.attrs_fixed.is_some() {
            p.attrs_fixed = args.attrs_fixed;
        }
        if args.last {
            p.use_gpa = false;
        }
        if args.unstructured {
            cfg.protocol = cfg.protocol.unstructured_baseline();
        }
        if args.dataset.is_some() {
            cfg.dataset = args.dataset;
        }
        if args.data_root.is_some() {
            cfg.data_root = args.data_root;
        }
        if args.toa.is_some() {
            cfg.toa = args.toa;
        }
        if let Some(b) = args.backend {
            cfg.backend = b;
        }
        if args.backbone.is_some() {
            cfg.backbone = args.backbone;
        }
        if !args.targets.is_empty() {
            cfg.targets = args
                .targets
                .iter()
                .map(|t| match t.split_once('=') {
                    Some((d, p)) if !d.is_empty() && !p.is_empty() => Ok(Target { dataset: d.into(), toa: p.into() }),
                    _ => Err(CliError::args(format!("--target expects NAME=TREE, got `{t}`"))),
                })
                .collect::<CliResult<_>>()?;
        }
        if args.output.is_some() {
            cfg.output = args.output;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        require(&self.dataset, "--dataset")?;
        require(&self.data_root, "--data-root")?;
        require(&self.toa, "--toa")?;
        require(&self.output, "--output")?;
        if !BACKENDS.contains(&self.backend.as_str()) {
            return Err(CliError::args(format!("unknown backend `{}` (expected one of {BACKENDS:?})", self.backend)));
        }
        if self.backbone.is_none() && self.backend != TOY_BACKEND {
            return Err(CliError::args(format!("backend `{}` needs --backbone", self.backend)));
        }
        let p = &self.protocol;
        if p.seeds.is_empty() {
            return Err(CliError::args("at least one seed is required"));
        }
        if !(0.0..=1.0).contains(&p.inference.alpha) {
            return Err(CliError::args(format!("alpha {} outside [0, 1]", p.inference.alpha)));
        }
        if p.task == TaskPreset::CrossDataset && self.targets.is_empty() {
            log::warn!("cross-dataset run without --target reports source accuracy only");
        }
        if p.task != TaskPreset::CrossDataset && !self.targets.is_empty() {
            return Err(CliError::args("--target only applies to --task xd"));
        }
        p.train_config(p.seeds[0]).validate()?;
        Ok(())
    }

    fn output(&self) -> &Path {
        self.output.as_deref().expect("validated")
    }
}

/// Backbone named by the run, or a fresh toy backbone covering `tree`.
fn load_model(cfg: &RunConfig, trees: &[&AttributeTree]) -> CliResult<ClipModelF64> {
    if let Some(dir) = &cfg.backbone {
        if !dir.join("backbone.json").is_file() {
            return Err(CliError::args(format!("{} is not a backbone directory", dir.display())));
        }
        return Ok(load_backbone(dir, Some(&cfg.backend))?);
    }
    let mut texts: Vec<String> = Vec::new();
    for t in trees {
        for c in t.class_names() {
            for a in 0..t.num_attributes() {
                texts.extend(t.descriptions(c, a)?);
            }
        }
    }
    Ok(ClipModelF64::toy(ToyConfig::default(), &texts, 0)?)
}

struct Inputs {
    source: Dataset,
    tree: AttributeTree,
    targets: Vec<(Dataset, AttributeTree)>,
}

fn load_inputs(cfg: &RunConfig, image_size: usize) -> CliResult<Inputs> {
    let root = cfg.data_root.as_deref().expect("validated");
    let load = |name: &str| {
        if !root.join(name).join("classes.txt").is_file() {
            return Err(CliError::args(format!("no dataset `{name}` under {}", root.display())));
        }
        Ok(Dataset::load(root, name, image_size)?)
    };
    let source = load(cfg.dataset.as_deref().expect("validated"))?;
    let tree = read_tree(cfg.toa.as_deref().expect("validated"))?;
    let targets = cfg.targets.iter().map(|t| Ok((load(&t.dataset)?, read_tree(&t.toa)?))).collect::<CliResult<_>>()?;
    Ok(Inputs { source, tree, targets })
}

fn check_tree(cfg: &RunConfig, tree: &AttributeTree) -> CliResult<()> {
    if let Some(k) = cfg.protocol.attrs_fixed {
        let n = tree.attribute_names.len();
        if k == 0 || k > n {
            return Err(CliError::args(format!("--attrs-fixed {k} outside 1..={n} for this tree")));
        }
    }
    Ok(())
}

fn protocol_data<'a>(cfg: &RunConfig, inputs: &'a Inputs) -> ProtocolData<'a> {
    ProtocolData {
        source: &inputs.source,
        tree: &inputs.tree,
        targets: inputs.targets.iter().map(|(d, t)| (d, t)).collect(),
        split_root: cfg.data_root.clone(),
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::resolve(args)?;
    let tree = read_tree(cfg.toa.as_deref().expect("validated"))?;
    check_tree(&cfg, &tree)?;
    let target_trees = cfg.targets.iter().map(|t| read_tree(&t.toa)).collect::<CliResult<Vec<_>>>()?;
    let mut all_trees = vec![&tree];
    all_trees.extend(&target_trees);
    let model = load_model(&cfg, &all_trees)?;
    let inputs = load_inputs(&cfg, model.config.image_size)?;
    let out = cfg.output();
    write_json(&out.join("config.json"), &cfg)?;

    let run = run_protocol(&model, &protocol_data(&cfg, &inputs), &cfg.protocol)?;
    for t in &run.trained {
        let dir = seed_dir(out, t.seed);
        t.splits.write(&dir.join("splits.txt"))?;
        write_jsonl(&dir.join("steps.jsonl"), &t.steps)?;
        write_jsonl(&dir.join("epochs.jsonl"), &t.epochs)?;
        let manifest = CheckpointManifest {
            backend_id: model.backend_id.clone(),
            embed_dim: model.embed_dim(),
            attributes: t.last.attributes.clone(),
            tree_hash: inputs.tree.content_hash(),
            epoch: t.epochs.len(),
            config: json!({ "protocol": cfg.protocol, "train": cfg.protocol.train_config(t.seed) }),
        };
        let ckpt = Checkpoint { manifest, backbone: model.clone(), last: t.last.clone(), gpa: t.gpa.clone() };
        ckpt.save(&dir.join("checkpoint"))?;
    }
    write_text(&out.join("metrics.json"), &(run.metrics.to_json() + "\n"))?;
    println!("{}", run.metrics.to_json());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub pooling: Option<PoolingMode>,
    #[arg(long)]
    pub alignment: Option<AlignmentMode>,
    /// Dataset root, when it moved since training.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub data_root: Option<PathBuf>,
    pub inference: InferenceConfig,
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let run_cfg: RunConfig = load_config(&args.checkpoint.join("config.json"))?;
    let mut cfg = run_cfg.clone();
    if args.data_root.is_some() {
        cfg.data_root = args.data_root.clone();
    }
    let mut inference = cfg.protocol.inference;
    if let Some(a) = args.alpha {
        if !(0.0..=1.0).contains(&a) {
            return Err(CliError::args(format!("alpha {a} outside [0, 1]")));
        }
        inference.alpha = a;
    }
    if let Some(p) = args.pooling {
        inference.pooling = p;
    }
    if let Some(a) = args.alignment {
        inference.alignment = a;
    }
    let mut trained: Vec<TrainedSeed<f64>> = Vec::new();
    let mut model = None;
    let mut inputs = None;
    for &seed in &cfg.protocol.seeds {
        let dir = seed_dir(&args.checkpoint, seed);
        let ckpt: CheckpointF64 = Checkpoint::load(&dir.join("checkpoint"))?;
        if inputs.is_none() {
            inputs = Some(load_inputs(&cfg, ckpt.backbone.config.image_size)?);
        }
        let source = &inputs.as_ref().expect("loaded").source;
        let splits = Splits::read(&dir.join("splits.txt"), source, cfg.protocol.task, seed)?;
        trained.push(TrainedSeed { seed, splits, last: ckpt.last, gpa: ckpt.gpa, epochs: Vec::new(), steps: Vec::new() });
        model.get_or_insert(ckpt.backbone);
    }
    let (Some(model), Some(inputs)) = (model, inputs) else {
        return Err(CliError::args("run has no seeds"));
    };
    let doc = evaluate_trained(&model, &protocol_data(&cfg, &inputs), &cfg.protocol, &trained, inference)?;
    let echo = EvalConfig { checkpoint: args.checkpoint.clone(), data_root: args.data_root, inference };
    write_json(&args.output.join("config.json"), &echo)?;
    write_text(&args.output.join("metrics.json"), &(doc.to_json() + "\n"))?;
    println!("{}", doc.to_json());
    Ok(())
}
