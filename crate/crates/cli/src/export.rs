//! Per-description attention weights of one image.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tap_core::encoder::checkpoint::Checkpoint;
use tap_core::encoder::{build_embedding_bank, encode_image, Image};
use tap_core::inference::{AlignmentMode, InferenceConfig, Predictor};
use tap_core::vcp::PoolingMode;
use tap_core::{CheckpointF64, Scalar};

use crate::error::{CliError, CliResult};
use crate::io::{read_tree, write_json, write_text};

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Checkpoint directory, or a `train` output directory (first seed).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub toa: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Class whose descriptions are weighted.
    #[arg(long)]
    pub class: String,
    #[arg(long)]
    pub pooling: Option<PoolingMode>,
    #[arg(long)]
    pub alignment: Option<AlignmentMode>,
    /// Use last-epoch prompts instead of the Gaussian aggregate.
    #[arg(long)]
    pub last: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Serialize)]
struct Weighted {
    text: String,
    weight: f64,
}

#[derive(Serialize)]
struct AttributeWeights {
    attribute: String,
    descriptions: Vec<Weighted>,
}

#[derive(Serialize)]
struct AttentionDocument {
    image: PathBuf,
    class: String,
    prediction: String,
    inference: InferenceConfig,
    prompts: &'static str,
    attributes: Vec<AttributeWeights>,
}

fn checkpoint_dir(path: &PathBuf) -> CliResult<PathBuf> {
    if path.join("manifest.json").is_file() {
        return Ok(path.clone());
    }
    let entries = std::fs::read_dir(path).map_err(|_| CliError::args(format!("{} is not a checkpoint", path.display())))?;
    let mut seeds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path().join("checkpoint")))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    seeds.sort();
    seeds.into_iter().next().ok_or_else(|| CliError::args(format!("no checkpoint under {}", path.display())))
}

pub fn run(args: ExportArgs) -> CliResult<()> {
    let dir = checkpoint_dir(&args.checkpoint)?;
    let tree = read_tree(&args.toa)?;
    if !args.image.is_file() {
        return Err(CliError::args(format!("image {} does not exist", args.image.display())));
    }
    let ckpt: CheckpointF64 = Checkpoint::load(&dir)?;
    let trained = &ckpt.manifest.config["protocol"];
    let mut inference: InferenceConfig =
        serde_json::from_value(trained["inference"].clone()).unwrap_or_default();
    if let Some(p) = args.pooling {
        inference.pooling = p;
    }
    if let Some(a) = args.alignment {
        inference.alignment = a;
    }
    if inference.alignment == AlignmentMode::ClsOnly {
        return Err(CliError::args("attention export needs expert alignment; the run uses cls_only"));
    }
    let use_gpa = !args.last && trained["use_gpa"].as_bool().unwrap_or(true);
    let prompts = if use_gpa { &ckpt.gpa } else { &ckpt.last };
    if prompts.attributes != tree.attribute_names {
        return Err(CliError::args(format!(
            "checkpoint attributes {:?} differ from the tree's {:?}",
            prompts.attributes, tree.attribute_names
        )));
    }
    let class = tree
        .class_index(&args.class)
        .ok_or_else(|| CliError::args(format!("class `{}` is not in the tree", args.class)))?;

    let model = &ckpt.backbone;
    let size = model.config.image_size;
    let image = Image::load_png(&args.image).map_err(|e| CliError::io(&args.image, e))?;
    let image = if image.height == size && image.width == size { image } else { image.resize(size, size) };
    let bank = build_embedding_bank(model, &tree, prompts)?;
    let features = encode_image(model, &image, prompts)?;
    let predictor = Predictor::new(prompts, &bank, inference).map_err(|e| CliError::new(crate::error::Kind::Failed, "inference", e.to_string()))?;
    let logits = predictor.logits(&features).map_err(|e| CliError::new(crate::error::Kind::Failed, "inference", e.to_string()))?;

    let mut attributes = Vec::new();
    for (ai, attr) in bank.attributes.iter().enumerate() {
        let weights = &predictor.attention(&features, ai)[class];
        let texts = tree.descriptions(&args.class, ai)?;
        let descriptions = texts.into_iter().zip(weights).map(|(text, w)| Weighted { text, weight: w.as_f64() }).collect();
        attributes.push(AttributeWeights { attribute: attr.name.clone(), descriptions });
    }
    let doc = AttentionDocument {
        image: args.image.clone(),
        class: args.class.clone(),
        prediction: tree.class_names().nth(logits.prediction).unwrap_or_default().to_string(),
        inference,
        prompts: if use_gpa { "gpa" } else { "last" },
        attributes,
    };
    write_json(&args.output.join("attention.json"), &doc)?;

    let mut text = format!("{} ({}), predicted {}\n", doc.class, doc.image.display(), doc.prediction);
    for a in &doc.attributes {
        let _ = writeln!(text, "\n{}", a.attribute);
        let mut order: Vec<&Weighted> = a.descriptions.iter().collect();
        order.sort_by(|x, y| y.weight.total_cmp(&x.weight));
        for d in order {
            let _ = writeln!(text, "  {:.4}  {}", d.weight, d.text);
        }
    }
    write_text(&args.output.join("attention.txt"), &text)?;
    print!("{text}");
    Ok(())
}
