//! Train-and-evaluate protocols producing metrics documents.

use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::splits::{make_splits, target_split, SplitSet, Splits, DEFAULT_SHOTS};
use super::{Dataset, DatasetError, CROSS_DATASET_ATTRIBUTES};
use crate::encoder::{ClipModel, PromptState};
use crate::inference::{evaluate, flatten_tree, harmonic_mean, AlignmentMode, InferenceConfig};
use crate::scalar::Scalar;
use crate::toa::{AttributeTree, ToaError};
use crate::training::{train, EpochRecord, ScheduleConfig, StepRecord, TaskPreset, TrainConfig, TrainData};
use crate::vcp::PoolingMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub task: TaskPreset,
    /// Training samples per class; `None` uses every training sample.
    pub shots: Option<usize>,
    pub seeds: Vec<u64>,
    /// Overrides the task's epoch count.
    pub epochs: Option<usize>,
    pub train: TrainConfig,
    /// Pooling and alignment here also apply during training.
    pub inference: InferenceConfig,
    /// Evaluate the Gaussian-aggregated prompts instead of the last epoch's.
    pub use_gpa: bool,
    /// Replace the tree by unstructured descriptions scored against CLS.
    pub unstructured: bool,
    /// Keep only the first `k` attributes of every tree.
    pub attrs_fixed: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            task: TaskPreset::BaseToNovel,
            shots: Some(DEFAULT_SHOTS),
            seeds: vec![1, 2, 3],
            epochs: None,
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            use_gpa: true,
            unstructured: false,
            attrs_fixed: None,
        }
    }
}

impl ProtocolConfig {
    /// Baseline that averages cosines between CLS and every description,
    /// without attribute structure.
    pub fn unstructured_baseline(self) -> Self {
        Self {
            unstructured: true,
            inference: InferenceConfig { alpha: 0.0, pooling: PoolingMode::Average, alignment: AlignmentMode::ClsOnly },
            ..self
        }
    }

    /// 16-shot, 20-epoch few-shot runs on a synthetic world. The attribute
    /// KL term is off because the class-name teacher of a toy backbone is
    /// close to chance.
    pub fn synthetic() -> Self {
        let mut train = TrainConfig::default();
        train.reg.mu2 = 0.0;
        Self { task: TaskPreset::FewShot, epochs: Some(20), train, ..Self::default() }
    }

    /// The training configuration used for `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let epochs = self.epochs.unwrap_or(self.task.epochs());
        TrainConfig {
            schedule: ScheduleConfig { total_epochs: epochs, ..self.train.schedule },
            pooling: self.inference.pooling,
            alignment: self.inference.alignment,
            alpha: self.inference.alpha,
            seed,
            ..self.train.clone()
        }
    }
}

/// Source dataset and tree, plus transfer targets for cross-dataset runs.
#[derive(Clone, Debug)]
pub struct ProtocolData<'a> {
    pub source: &'a Dataset,
    pub tree: &'a AttributeTree,
    pub targets: Vec<(&'a Dataset, &'a AttributeTree)>,
    /// Dataset root holding precomputed `splits/<task>/<seed>.txt` files.
    pub split_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub task: TaskPreset,
    pub dataset: String,
    pub targets: Vec<String>,
    /// Echo of the protocol configuration.
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: IndexMap<String, f64>,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: IndexMap<String, f64>,
}

impl MetricsDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Prompts trained for one seed.
#[derive(Clone, Debug)]
pub struct TrainedSeed<T> {
    pub seed: u64,
    pub splits: Splits,
    pub last: PromptState<T>,
    pub gpa: PromptState<T>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub struct ProtocolRun<T> {
    pub metrics: MetricsDocument,
    pub trained: Vec<TrainedSeed<T>>,
}

fn prepare_tree(tree: &AttributeTree, cfg: &ProtocolConfig) -> Result<AttributeTree, DatasetError> {
    tree.ensure_valid()?;
    let tree = match cfg.attrs_fixed {
        Some(k) if k > tree.attribute_names.len() => {
            return Err(DatasetError::Config(format!(
                "attrs_fixed {k} exceeds the {} attributes of `{}`",
                tree.attribute_names.len(),
                tree.dataset_name
            )))
        }
        Some(k) => tree.truncate_attributes(k),
        None => tree.clone(),
    };
    Ok(if cfg.unstructured { flatten_tree(&tree)? } else { tree })
}

fn tree_for(tree: &AttributeTree, ds: &Dataset, set: &SplitSet) -> Result<AttributeTree, DatasetError> {
    if let Some(c) = ds.classes.iter().find(|c| tree.class_index(c).is_none()) {
        return Err(ToaError::UnknownClass(c.clone()).into());
    }
    Ok(tree.restrict_classes(&set.class_names(ds))?)
}

fn check_cross_dataset(dataset: &str, tree: &AttributeTree) -> Result<(), DatasetError> {
    if tree.attribute_names.iter().map(String::as_str).ne(CROSS_DATASET_ATTRIBUTES) {
        return Err(DatasetError::AttributeMismatch {
            dataset: dataset.to_string(),
            trained: CROSS_DATASET_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            target: tree.attribute_names.clone(),
        });
    }
    Ok(())
}

fn accuracy_on<T: Scalar>(
    model: &ClipModel<T>,
    prompts: &PromptState<T>,
    tree: &AttributeTree,
    ds: &Dataset,
    set: &SplitSet,
    cfg: InferenceConfig,
) -> Result<f64, DatasetError> {
    let tree = tree_for(tree, ds, set)?;
    let images = ds.images(&set.samples);
    Ok(evaluate(model, prompts, &tree, &images, &set.local_labels(ds), &[cfg])?[0].accuracy)
}

fn summarize(per_seed: &[SeedMetrics]) -> (IndexMap<String, f64>, IndexMap<String, f64>) {
    let mut mean = IndexMap::new();
    let mut std = IndexMap::new();
    let Some(first) = per_seed.first() else { return (mean, std) };
    let n = per_seed.len() as f64;
    for key in first.metrics.keys() {
        let xs: Vec<f64> = per_seed.iter().filter_map(|s| s.metrics.get(key).copied()).collect();
        let m = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        mean.insert(key.clone(), m);
        std.insert(key.clone(), var.sqrt());
    }
    (mean, std)
}

/// Evaluates already-trained prompts under `inference`, which may differ
/// from the configuration they were trained with (e.g. another α).
pub fn evaluate_trained<T: Scalar>(
    model: &ClipModel<T>,
    data: &ProtocolData<'_>,
    cfg: &ProtocolConfig,
    trained: &[TrainedSeed<T>],
    inference: InferenceConfig,
) -> Result<MetricsDocument, DatasetError> {
    let tree = prepare_tree(data.tree, cfg)?;
    let targets = data
        .targets
        .iter()
        .map(|(ds, t)| Ok((*ds, prepare_tree(t, cfg)?, target_split(ds))))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let mut per_seed = Vec::with_capacity(trained.len());
    for t in trained {
        let prompts = if cfg.use_gpa { &t.gpa } else { &t.last };
        let mut metrics = IndexMap::new();
        match cfg.task {
            TaskPreset::BaseToNovel => {
                let base = accuracy_on(model, prompts, &tree, data.source, split(&t.splits, "base")?, inference)?;
                let novel = accuracy_on(model, prompts, &tree, data.source, split(&t.splits, "novel")?, inference)?;
                metrics.insert("base".into(), base);
                metrics.insert("novel".into(), novel);
                metrics.insert("hm".into(), harmonic_mean(base, novel));
            }
            TaskPreset::FewShot => {
                let acc = accuracy_on(model, prompts, &tree, data.source, split(&t.splits, "test")?, inference)?;
                metrics.insert("accuracy".into(), acc);
            }
            TaskPreset::CrossDataset => {
                let src = accuracy_on(model, prompts, &tree, data.source, split(&t.splits, "test")?, inference)?;
                metrics.insert("source".into(), src);
                let mut sum = 0.0;
                for (ds, target_tree, set) in &targets {
                    if target_tree.attribute_names != prompts.attributes {
                        return Err(DatasetError::AttributeMismatch {
                            dataset: ds.name.clone(),
                            trained: prompts.attributes.clone(),
                            target: target_tree.attribute_names.clone(),
                        });
                    }
                    let acc = accuracy_on(model, prompts, target_tree, ds, set, inference)?;
                    metrics.insert(format!("target:{}", ds.name), acc);
                    sum += acc;
                }
                if !targets.is_empty() {
                    metrics.insert("target_mean".into(), sum / targets.len() as f64);
                }
            }
        }
        per_seed.push(SeedMetrics { seed: t.seed, metrics });
    }
    let (mean, std) = summarize(&per_seed);
    let echo = ProtocolConfig { inference, ..cfg.clone() };
    Ok(MetricsDocument {
        task: cfg.task,
        dataset: data.source.name.clone(),
        targets: data.targets.iter().map(|(d, _)| d.name.clone()).collect(),
        config: serde_json::to_value(&echo).expect("config serializes"),
        per_seed,
        mean,
        std,
    })
}

fn split<'s>(splits: &'s Splits, name: &str) -> Result<&'s SplitSet, DatasetError> {
    splits.eval(name).ok_or_else(|| DatasetError::Config(format!("split has no `{name}` set")))
}

/// Trains once per seed on the source dataset and evaluates per task.
///
/// Transfer targets are only read after training, for evaluation.
pub fn run_protocol<T: Scalar>(
    model: &ClipModel<T>,
    data: &ProtocolData<'_>,
    cfg: &ProtocolConfig,
) -> Result<ProtocolRun<T>, DatasetError> {
    if cfg.seeds.is_empty() {
        return Err(DatasetError::Config("no seeds".into()));
    }
    if cfg.task == TaskPreset::CrossDataset {
        check_cross_dataset(&data.source.name, data.tree)?;
        for (ds, t) in &data.targets {
            check_cross_dataset(&ds.name, t)?;
        }
    }
    let tree = prepare_tree(data.tree, cfg)?;
    let mut trained = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let splits = match &data.split_root {
            Some(root) if Splits::path(root, &data.source.name, cfg.task, seed).exists() => {
                Splits::read(&Splits::path(root, &data.source.name, cfg.task, seed), data.source, cfg.task, seed)?
            }
            _ => make_splits(data.source, cfg.task, cfg.shots, seed)?,
        };
        let train_tree = tree_for(&tree, data.source, &splits.train)?;
        let images = data.source.images(&splits.train.samples);
        let labels = splits.train.local_labels(data.source);
        let outcome = train(model, &train_tree, TrainData { images: &images, labels: &labels }, &cfg.train_config(seed))?;
        log::info!(
            "seed {seed}: trained {} epochs, final running accuracy {:.2}",
            outcome.epochs.len(),
            outcome.epochs.last().map_or(0.0, |e| e.running_accuracy)
        );
        trained.push(TrainedSeed {
            seed,
            splits,
            last: outcome.last,
            gpa: outcome.gpa,
            epochs: outcome.epochs,
            steps: outcome.steps,
        });
    }
    let metrics = evaluate_trained(model, data, cfg, &trained, cfg.inference)?;
    Ok(ProtocolRun { metrics, trained })
}
