use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tap_core::datasets::synthetic::{pretrained_backbone, tree_world, WorldPretraining};
use tap_core::datasets::{generate_synthetic, SyntheticConfig};
use tap_core::encoder::checkpoint::save_backbone;
use tap_core::ClipModelF64;

use crate::error::{CliError, CliResult};
use crate::io::{load_config, read_tree, write_json, write_text};

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f32>,
    /// Render a world whose values are the descriptions of this tree.
    #[arg(long)]
    pub from_toa: Option<PathBuf>,
    /// Descriptions per attribute a class depicts, with --from-toa.
    #[arg(long)]
    pub depict: Option<usize>,
    #[arg(long)]
    pub pretrain_pairs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub name_caption_rate: Option<f64>,
    /// Skip backbone pretraining.
    #[arg(long)]
    pub no_backbone: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub world: SyntheticConfig,
    pub from_toa: Option<PathBuf>,
    pub depict: usize,
    pub backbone: bool,
    pub pretraining: WorldPretraining,
    pub output: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            world: SyntheticConfig::default(),
            from_toa: None,
            depict: 1,
            backbone: true,
            pretraining: WorldPretraining::default(),
            output: None,
        }
    }
}

impl SynthConfig {
    fn resolve(args: SynthArgs) -> CliResult<Self> {
        let mut cfg: SynthConfig = match &args.config {
            Some(p) => load_config(p)?,
            None => SynthConfig::default(),
        };
        let w = &mut cfg.world;
        if let Some(v) = args.name {
            w.name = v;
        }
        if let Some(v) = args.seed {
            w.seed = v;
        }
        if let Some(v) = args.classes {
            w.num_classes = v;
        }
        if let Some(v) = args.train_per_class {
            w.train_per_class = v;
        }
        if let Some(v) = args.test_per_class {
            w.test_per_class = v;
        }
        if let Some(v) = args.image_size {
            w.image_size = v;
        }
        if let Some(v) = args.noise {
            w.noise = v;
        }
        if args.from_toa.is_some() {
            cfg.from_toa = args.from_toa;
        }
        if let Some(v) = args.depict {
            cfg.depict = v;
        }
        if let Some(v) = args.pretrain_pairs {
            cfg.pretraining.pairs = v;
        }
        if let Some(v) = args.pretrain_epochs {
            cfg.pretraining.optimizer.epochs = v;
        }
        if let Some(v) = args.name_caption_rate {
            cfg.pretraining.name_caption_rate = v;
        }
        if args.no_backbone {
            cfg.backbone = false;
        }
        if args.output.is_some() {
            cfg.output = args.output;
        }
        if cfg.output.is_none() {
            return Err(CliError::args("--output is required"));
        }
        if !(0.0..=1.0).contains(&cfg.pretraining.name_caption_rate) {
            return Err(CliError::args("--name-caption-rate must lie in [0, 1]"));
        }
        Ok(cfg)
    }
}

pub fn run(args: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig::resolve(args)?;
    let out = cfg.output.clone().unwrap();
    let world = match &cfg.from_toa {
        Some(path) => tree_world(&read_tree(path)?, cfg.depict, &cfg.world)?,
        None => generate_synthetic(&cfg.world)?,
    };
    write_json(&out.join("config.json"), &cfg)?;
    let dir = world.dataset.save(&out.join("data"))?;
    write_text(&out.join("toa.json"), &world.tree.to_json())?;
    let info = json!({
        "dataset": world.dataset.name,
        "classes": world.dataset.classes,
        "content_hash": world.content_hash(),
        "class_values": world.class_values,
        "value_phrases": world.value_phrases,
    });
    write_json(&out.join("world.json"), &info)?;
    if cfg.backbone {
        let (model, history): (ClipModelF64, Vec<f64>) = pretrained_backbone(&[&world], &cfg.pretraining)?;
        let bdir = out.join("backbone");
        save_backbone(&model, &bdir)?;
        write_json(&bdir.join("pretrain_history.json"), &history)?;
        log::info!("pretrained backbone, final loss {:.4}", history.last().copied().unwrap_or(f64::NAN));
    }
    println!("{}", dir.display());
    Ok(())
}
