//! Alternating vision/text prompt training with Gaussian prompt aggregation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::bank::{build_embedding_bank, encode_attribute_graph, tokenize_tree, EmbeddingBank, TokenizedAttribute};
use crate::encoder::{encode_image_frozen, encode_texts, ClipModel, EncoderError, Image, PromptState, Trainable};
use crate::inference::{fuse, AlignmentMode};
use crate::objectives::{
    batch_cosine_logits_graph, cross_entropy_graph, kl_batch_graph, l1_graph, text_contrastive_graph,
    text_contrastive_reg, total_loss, Components, LossBreakdown, ObjectiveError, RegCoefficients,
};
use crate::optim::{CosineSchedule, Sgd};
use crate::scalar::Scalar;
use crate::tensor::{argmax, normalized, softmax, Matrix};
use crate::toa::{AttributeTree, ToaError};
use crate::vcp::{keys_graph, pool_batch_graph, PoolingMode};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step} ({phase:?} phase): {breakdown:?}")]
    NonFinite { epoch: usize, step: usize, phase: Phase, breakdown: Box<LossBreakdown> },
    #[error("expected {expected} GPA snapshots, got {got}")]
    SnapshotCount { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Toa(#[from] ToaError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Vision,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskPreset {
    #[serde(rename = "b2n")]
    BaseToNovel,
    #[serde(rename = "xd")]
    CrossDataset,
    #[serde(rename = "fewshot")]
    FewShot,
}

impl TaskPreset {
    pub fn epochs(self) -> usize {
        match self {
            Self::BaseToNovel => 60,
            Self::CrossDataset => 24,
            Self::FewShot => 120,
        }
    }
}

impl std::str::FromStr for TaskPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "b2n" => Ok(Self::BaseToNovel),
            "xd" => Ok(Self::CrossDataset),
            "fewshot" => Ok(Self::FewShot),
            other => Err(format!("unknown task `{other}` (expected b2n, xd or fewshot)")),
        }
    }
}

impl std::fmt::Display for TaskPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BaseToNovel => "b2n",
            Self::CrossDataset => "xd",
            Self::FewShot => "fewshot",
        })
    }
}

/// Learning-rate groups keyed by how many attributes a dataset has.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrGroup {
    /// Few attributes: gentle text updates, strong text regularization.
    #[default]
    LowAttr,
    HighAttr,
}

impl LrGroup {
    /// `(text_lr, vision_lr, μ3)`
    pub fn values(self) -> (f64, f64, f64) {
        match self {
            Self::LowAttr => (0.002, 0.006, 3.0),
            Self::HighAttr => (0.004, 0.004, 1.5),
        }
    }
}

impl std::str::FromStr for LrGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low-attr" => Ok(Self::LowAttr),
            "high-attr" => Ok(Self::HighAttr),
            other => Err(format!("unknown lr group `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    pub vision_phase_len: usize,
    pub text_phase_len: usize,
    pub vision_first: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::preset(TaskPreset::BaseToNovel)
    }
}

impl ScheduleConfig {
    pub fn preset(task: TaskPreset) -> Self {
        Self { total_epochs: task.epochs(), vision_phase_len: 5, text_phase_len: 1, vision_first: true }
    }

    pub fn with_epochs(epochs: usize) -> Self {
        Self { total_epochs: epochs, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.total_epochs == 0 || self.vision_phase_len == 0 || self.text_phase_len == 0 {
            return Err(TrainError::Config("epochs and phase lengths must be positive".into()));
        }
        Ok(())
    }

    /// Phase of every epoch: the cycle repeats and the last one is cut
    /// short, so with vision first any leftover epochs are vision epochs.
    pub fn phases(&self) -> Vec<Phase> {
        let mut cycle = vec![Phase::Vision; self.vision_phase_len];
        let text = vec![Phase::Text; self.text_phase_len];
        if self.vision_first {
            cycle.extend(text);
        } else {
            cycle.splice(0..0, text);
        }
        cycle.into_iter().cycle().take(self.total_epochs).collect()
    }
}

/// Which descriptions enter the text contrastive regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRegScope {
    /// Leaves of the classes present in the batch.
    #[default]
    BatchClasses,
    /// Every leaf of the training tree.
    Tree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub lr_group: LrGroup,
    /// Scales both group learning rates; 1.0 keeps the reference values.
    pub lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub reg: RegCoefficients,
    pub pooling: PoolingMode,
    pub alignment: AlignmentMode,
    /// Fusion weight used for the running training accuracy.
    pub alpha: f64,
    pub text_reg_scope: TextRegScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (_, _, mu3) = LrGroup::LowAttr.values();
        Self {
            schedule: ScheduleConfig::default(),
            lr_group: LrGroup::LowAttr,
            lr_multiplier: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1,
            batch_size: 32,
            reg: RegCoefficients::with_mu3(mu3),
            pooling: PoolingMode::Vcp,
            alignment: AlignmentMode::Experts,
            alpha: crate::inference::DEFAULT_ALPHA,
            text_reg_scope: TextRegScope::BatchClasses,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.schedule.validate()?;
        self.reg.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.lr_multiplier.is_nan() || self.lr_multiplier <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(TrainError::Config("learning-rate multiplier, momentum or weight decay out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// `(text_lr, vision_lr)` after the multiplier.
    pub fn learning_rates(&self) -> (f64, f64) {
        let (t, v, _) = self.lr_group.values();
        (t * self.lr_multiplier, v * self.lr_multiplier)
    }
}

/// Normalized Gaussian weights over 1-based epochs with mean `0.9N` and
/// standard deviation `0.1N`.
pub fn gpa_weights(n: usize) -> Vec<f64> {
    let nf = n as f64;
    let (mean, std) = (0.9 * nf, 0.1 * nf);
    let raw: Vec<f64> = (1..=n)
        .map(|t| {
            let z = (t as f64 - mean) / std;
            (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Running Gaussian-weighted average of per-epoch prompt snapshots.
///
/// The update `agg += (w_t / W_t)(θ_t − agg)`, with `W_t` the cumulative
/// weight, equals `Σ w_t θ_t` once all weights are seen and leaves
/// identical snapshots exactly unchanged.
#[derive(Clone, Debug)]
pub struct GpaState<T> {
    weights: Vec<f64>,
    seen: usize,
    cumulative: f64,
    aggregate: Option<PromptState<T>>,
}

impl<T: Scalar> GpaState<T> {
    pub fn new(total_epochs: usize) -> Self {
        Self { weights: gpa_weights(total_epochs), seen: 0, cumulative: 0.0, aggregate: None }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn accumulate(&mut self, snapshot: &PromptState<T>) -> Result<(), TrainError> {
        let Some(&w) = self.weights.get(self.seen) else {
            return Err(TrainError::SnapshotCount { expected: self.weights.len(), got: self.seen + 1 });
        };
        self.seen += 1;
        self.cumulative += w;
        match &mut self.aggregate {
            None => self.aggregate = Some(snapshot.clone()),
            Some(agg) => {
                let k = T::of(w / self.cumulative);
                for (a, s) in agg.tensors_mut().into_iter().zip(snapshot.tensors()) {
                    for (x, &y) in a.data_mut().iter_mut().zip(s.data()) {
                        *x += k * (y - *x);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PromptState<T>, TrainError> {
        if self.seen != self.weights.len() {
            return Err(TrainError::SnapshotCount { expected: self.weights.len(), got: self.seen });
        }
        self.aggregate.ok_or(TrainError::SnapshotCount { expected: self.weights.len(), got: 0 })
    }
}

/// Parameter-wise `Σ_t w_t θ_t` over exactly `n` snapshots.
pub fn gpa_aggregate<T: Scalar>(snapshots: &[PromptState<T>], n: usize) -> Result<PromptState<T>, TrainError> {
    if snapshots.len() != n {
        return Err(TrainError::SnapshotCount { expected: n, got: snapshots.len() });
    }
    let mut state = GpaState::new(n);
    for s in snapshots {
        state.accumulate(s)?;
    }
    state.finish()
}

/// Images with labels indexing the classes of the training tree.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub images: &'a [Image],
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_total: f64,
    pub mean_class: f64,
    /// Fused accuracy of the batches as seen before each update, in percent.
    pub running_accuracy: f64,
}

pub struct TrainOutcome<T> {
    pub last: PromptState<T>,
    pub gpa: PromptState<T>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Quantities of the frozen backbone that never change during training.
struct Teacher<T> {
    frozen_cls: Vec<Vec<T>>,
    probs: Vec<Vec<T>>,
    /// Frozen text embeddings of every leaf, per attribute, stacked like the bank.
    text: Vec<Matrix<T>>,
}

fn build_teacher<T: Scalar>(
    model: &ClipModel<T>,
    tree: &AttributeTree,
    images: &[Image],
    initial: &PromptState<T>,
) -> Result<Teacher<T>, TrainError> {
    let tau = model.temperature();
    let templates: Vec<Vec<T>> = tree
        .class_names()
        .map(|c| {
            let emb = encode_texts(model, &tree.instantiate_global_context(c)?)?;
            let mut mean = vec![T::zero(); emb.cols()];
            for r in 0..emb.rows() {
                for (m, &x) in mean.iter_mut().zip(emb.row(r)) {
                    *m += x;
                }
            }
            Ok(normalized(&mean))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut frozen_cls = Vec::with_capacity(images.len());
    let mut probs = Vec::with_capacity(images.len());
    for im in images {
        let f = encode_image_frozen(model, im)?;
        let logits: Vec<T> = templates.iter().map(|t| crate::tensor::dot(&f, t) / tau).collect();
        probs.push(softmax(&logits));
        frozen_cls.push(f);
    }
    let bank = build_embedding_bank(model, tree, initial)?;
    Ok(Teacher { frozen_cls, probs, text: bank.attributes.into_iter().map(|a| a.embeddings).collect() })
}

fn rows_of<T: Scalar>(rows: &[Vec<T>], idx: &[usize]) -> Matrix<T> {
    Matrix::from_rows(&idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())
}

/// Row indices (per attribute) of the leaves of `classes`.
fn leaf_rows(segments: &[(usize, usize)], classes: &[usize]) -> Vec<usize> {
    classes.iter().flat_map(|&c| segments[c].0..segments[c].0 + segments[c].1).collect()
}

fn gather_rows<T: Scalar>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    Matrix::from_rows(&rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>())
}

fn batch_classes(labels: &[usize], all: usize, scope: TextRegScope) -> Vec<usize> {
    match scope {
        TextRegScope::Tree => (0..all).collect(),
        TextRegScope::BatchClasses => {
            let mut c: Vec<usize> = labels.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        }
    }
}

/// Per-image vision features under fixed prompts: CLS and expert rows.
struct CachedFeatures<T> {
    cls: Vec<Vec<T>>,
    experts: Vec<Matrix<T>>,
}

fn cache_features<T: Scalar>(
    model: &ClipModel<T>,
    prompts: &PromptState<T>,
    patches: &[Matrix<T>],
) -> CachedFeatures<T> {
    let mut cls = Vec::with_capacity(patches.len());
    let mut experts = Vec::with_capacity(patches.len());
    for p in patches {
        let mut g = Graph::new();
        let mv = model.bind(&mut g, false);
        let pv = prompts.bind(&mut g, Trainable::NONE);
        let (c, e) = mv.vision_forward(&mut g, p, Some(&pv));
        cls.push(g.value(c).row(0).to_vec());
        experts.push(e.map_or_else(|| Matrix::zeros(0, model.embed_dim()), |e| g.value(e).clone()));
    }
    CachedFeatures { cls, experts }
}

struct BatchLosses {
    class_terms: Vec<(String, Var)>,
    l_class: Var,
    kl: Var,
    fused_correct: usize,
}

/// Classification and KL terms for a batch, given per-attribute feature
/// nodes (`B × d`), description nodes and key nodes.
#[allow(clippy::too_many_arguments)]
fn classification_terms<T: Scalar>(
    g: &mut Graph<T>,
    features: &[Var],
    descriptions: &[Var],
    keys: &[Var],
    queries: &[Var],
    segments: &[Vec<(usize, usize)>],
    names: &[String],
    labels: &[usize],
    teacher: &Matrix<T>,
    cfg: &TrainConfig,
    tau: T,
) -> BatchLosses {
    let mut class_terms = Vec::with_capacity(names.len());
    let mut kls = Vec::with_capacity(names.len());
    let mut logit_values = Vec::with_capacity(names.len());
    for a in 0..names.len() {
        let pooled = pool_batch_graph(g, features[a], descriptions[a], keys[a], &segments[a], queries[a], cfg.pooling);
        let logits = batch_cosine_logits_graph(g, features[a], &pooled, tau);
        logit_values.push(g.value(logits).clone());
        class_terms.push((names[a].clone(), cross_entropy_graph(g, logits, labels)));
        kls.push(kl_batch_graph(g, teacher, logits));
    }
    let ce: Vec<Var> = class_terms.iter().map(|(_, v)| *v).collect();
    let ce_sum = g.concat_cols(&ce);
    let l_class = g.mean(ce_sum);
    let kl_sum = g.concat_cols(&kls);
    let kl = g.mean(kl_sum);
    let mut fused_correct = 0;
    for (b, &y) in labels.iter().enumerate() {
        // Cosines times 1/τ; fusion is linear so the argmax is unaffected.
        let per: Vec<Vec<f64>> = logit_values.iter().map(|m| m.row(b).iter().map(|x| x.as_f64()).collect()).collect();
        if let Ok(f) = fuse(&per, cfg.alpha) {
            if argmax(&f) == y {
                fused_correct += 1;
            }
        }
    }
    BatchLosses { class_terms, l_class, kl, fused_correct }
}

/// Leaf-count rules a training tree may break; flattened description sets
/// used by baselines have one leaf per pseudo-attribute.
pub const RELAXED_RULES: [&str; 2] = ["min-2", "max-5"];

/// Trains prompts on a frozen backbone. `tree` holds exactly the training
/// classes; labels index its classes.
pub fn train<T: Scalar>(
    model: &ClipModel<T>,
    tree: &AttributeTree,
    data: TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    tree.ensure_valid_except(&RELAXED_RULES)?;
    let n_classes = tree.num_classes();
    if data.images.len() != data.labels.len() || data.images.is_empty() {
        return Err(TrainError::Config("need one label per image and at least one image".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= n_classes) {
        return Err(TrainError::Label { label: bad, classes: n_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prompts = PromptState::init(model, &tree.attribute_names, &mut rng);
    let teacher = build_teacher(model, tree, data.images, &prompts)?;
    let patches: Vec<Matrix<T>> = data.images.iter().map(|im| im.patches(model.config.patch)).collect();
    let tokenized: Vec<TokenizedAttribute> = tokenize_tree(model, tree, &(0..n_classes).collect::<Vec<_>>())?;
    let names: Vec<String> = tokenized.iter().map(|a| a.name.clone()).collect();
    let segments: Vec<Vec<(usize, usize)>> = tokenized.iter().map(|a| a.segments.clone()).collect();
    let tau = model.temperature();
    let reg = cfg.reg;
    let use_experts = cfg.alignment == AlignmentMode::Experts;

    let phases = cfg.schedule.phases();
    let steps_per_epoch = data.images.len().div_ceil(cfg.batch_size);
    let (text_lr, vision_lr) = cfg.learning_rates();
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total_steps = phases.len() * steps_per_epoch;
    let vision_sched = CosineSchedule { base_lr: vision_lr, warmup, total: total_steps };
    let text_sched = CosineSchedule { base_lr: text_lr, warmup, total: total_steps };
    let mut vision_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut text_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut gpa = GpaState::new(phases.len());

    let mut bank: EmbeddingBank<T> = build_embedding_bank(model, tree, &prompts)?;
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(phases.len());
    let mut step = 0;

    for (epoch, &phase) in phases.iter().enumerate() {
        order.shuffle(&mut rng);
        let cached = (phase == Phase::Text).then(|| cache_features(model, &prompts, &patches));
        let (mut sum_total, mut sum_class, mut correct) = (0.0, 0.0, 0usize);
        let batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        for batch in &batches {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let teacher_probs = rows_of(&teacher.probs, batch);
            let reg_classes = batch_classes(&labels, n_classes, cfg.text_reg_scope);
            let mut g = Graph::new();
            let mv = model.bind(&mut g, false);
            let trainable = if phase == Phase::Vision { Trainable::VISION } else { Trainable::TEXT };
            let pv = prompts.bind(&mut g, trainable);

            // Vision features (B × d per attribute) and the trained CLS rows.
            let (features, cls): (Vec<Var>, Var) = match &cached {
                None => {
                    let mut cls_rows = Vec::with_capacity(batch.len());
                    let mut exp_rows: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); prompts.num_experts()];
                    for &i in batch {
                        let (c, e) = mv.vision_forward(&mut g, &patches[i], Some(&pv));
                        cls_rows.push(c);
                        if let Some(e) = e {
                            for (k, rows) in exp_rows.iter_mut().enumerate() {
                                rows.push(g.slice_rows(e, k, 1));
                            }
                        }
                    }
                    let cls = g.concat_rows(&cls_rows);
                    let mut f = vec![cls];
                    for rows in &exp_rows {
                        f.push(if use_experts { g.concat_rows(rows) } else { cls });
                    }
                    (f, cls)
                }
                Some(c) => {
                    let cls = g.constant(rows_of(&c.cls, batch));
                    let mut f = vec![cls];
                    for k in 0..prompts.num_experts() {
                        if use_experts {
                            let m = Matrix::from_rows(&batch.iter().map(|&i| c.experts[i].row(k).to_vec()).collect::<Vec<_>>());
                            f.push(g.constant(m));
                        } else {
                            f.push(cls);
                        }
                    }
                    (f, cls)
                }
            };

            // Description embeddings: bank constants in vision phases,
            // differentiable encodings in text phases.
            let descriptions: Vec<Var> = match phase {
                Phase::Vision => bank.attributes.iter().map(|a| g.constant(a.embeddings.clone())).collect(),
                Phase::Text => tokenized.iter().map(|a| encode_attribute_graph(&mut g, &mv, model, a, pv.text_context)).collect(),
            };
            let keys: Vec<Var> = descriptions.iter().zip(&pv.vcp).map(|(&d, w)| keys_graph(&mut g, d, w.key)).collect();
            let queries: Vec<Var> = pv.vcp.iter().map(|w| w.query).collect();
            let terms = classification_terms(
                &mut g, &features, &descriptions, &keys, &queries, &segments, &names, &labels, &teacher_probs, cfg, tau,
            );

            let frozen_cls = g.constant(rows_of(&teacher.frozen_cls, batch));
            let l1_sum = l1_graph(&mut g, cls, frozen_cls);
            let l1 = g.scale(l1_sum, T::one() / T::of(batch.len() as f64));

            // Text contrastive term over the leaves of the regularized classes.
            let (con_t, con_t_value) = match phase {
                Phase::Text => {
                    let mut trained = Vec::new();
                    let mut frozen = Vec::new();
                    for (a, &d) in descriptions.iter().enumerate() {
                        for &c in &reg_classes {
                            let (s, n) = segments[a][c];
                            trained.push(g.slice_rows(d, s, n));
                        }
                        frozen.push(gather_rows(&teacher.text[a], &leaf_rows(&segments[a], &reg_classes)));
                    }
                    let trained = g.concat_rows(&trained);
                    let refs: Vec<&Matrix<T>> = frozen.iter().collect();
                    let fz = g.constant(Matrix::concat_rows(&refs));
                    let v = text_contrastive_graph(&mut g, fz, trained);
                    let value = g.scalar(v).as_f64();
                    (Some(v), value)
                }
                Phase::Vision => {
                    let mut trained = Vec::new();
                    let mut frozen = Vec::new();
                    for (a, attr) in bank.attributes.iter().enumerate() {
                        let rows = leaf_rows(&segments[a], &reg_classes);
                        trained.push(gather_rows(&attr.embeddings, &rows));
                        frozen.push(gather_rows(&teacher.text[a], &rows));
                    }
                    let t = Matrix::concat_rows(&trained.iter().collect::<Vec<_>>());
                    let f = Matrix::concat_rows(&frozen.iter().collect::<Vec<_>>());
                    (None, text_contrastive_reg(&f, &t)?.as_f64())
                }
            };

            let mut loss = terms.l_class;
            if reg.enabled {
                let a = g.scale(l1, T::of(reg.mu1));
                let b = g.scale(terms.kl, T::of(reg.mu2));
                loss = g.add(loss, a);
                loss = g.add(loss, b);
                if let Some(c) = con_t {
                    let c = g.scale(c, T::of(reg.mu3));
                    loss = g.add(loss, c);
                }
            }
            let per_attribute: Vec<(String, f64)> =
                terms.class_terms.iter().map(|(n, v)| (n.clone(), g.scalar(*v).as_f64())).collect();
            let components = Components {
                l_class: g.scalar(terms.l_class).as_f64(),
                l_l1_v: g.scalar(l1).as_f64(),
                l_kl_attr: g.scalar(terms.kl).as_f64(),
                l_con_t: con_t_value,
            };
            let breakdown = total_loss(components, per_attribute, &reg)?;
            if !breakdown.is_finite() || !g.scalar(loss).is_finite() {
                return Err(TrainError::NonFinite { epoch, step, phase, breakdown: Box::new(breakdown) });
            }

            let grads = g.backward(loss);
            let lr = match phase {
                Phase::Vision => {
                    let vars = pv.vision_vars();
                    let gs: Vec<Matrix<T>> = {
                        let ts = prompts.vision_tensors_mut();
                        vars.iter().zip(ts).map(|(v, t)| grads.get_or_zeros(*v, t)).collect()
                    };
                    debug_assert!(grads.get(pv.text_context).is_none());
                    let lr = vision_sched.lr(step);
                    vision_opt.step(&mut prompts.vision_tensors_mut(), &gs, lr);
                    lr
                }
                Phase::Text => {
                    let gs = vec![grads.get_or_zeros(pv.text_context, &prompts.text_context)];
                    debug_assert!(grads.get(pv.expert_tokens).is_none());
                    let lr = text_sched.lr(step);
                    text_opt.step(&mut [&mut prompts.text_context], &gs, lr);
                    lr
                }
            };
            if !prompts.is_finite() {
                return Err(TrainError::NonFinite { epoch, step, phase, breakdown: Box::new(breakdown) });
            }
            sum_total += breakdown.l_total;
            sum_class += breakdown.l_class;
            correct += terms.fused_correct;
            log::debug!(
                "epoch {epoch} step {step} {phase:?} total {:.5} class {:.5}",
                breakdown.l_total,
                breakdown.l_class
            );
            steps.push(StepRecord { step, epoch, phase, lr, loss: breakdown });
            step += 1;
        }
        if phase == Phase::Text {
            bank = build_embedding_bank(model, tree, &prompts)?;
        }
        gpa.accumulate(&prompts)?;
        epochs.push(EpochRecord {
            epoch,
            phase,
            mean_total: sum_total / batches.len() as f64,
            mean_class: sum_class / batches.len() as f64,
            running_accuracy: 100.0 * correct as f64 / data.images.len() as f64,
        });
    }
    Ok(TrainOutcome { last: prompts, gpa: gpa.finish()?, steps, epochs })
}
