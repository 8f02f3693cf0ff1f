//! Per-attribute logits, α-weighted fusion and metrics.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::encoder::bank::{bank_version, build_embedding_bank, EmbeddingBank};
use crate::encoder::{encode_image, ClipModel, EncoderError, Image, PromptState, VisionForwardOutput};
use crate::scalar::Scalar;
use crate::tensor::{argmax, cosine, dot, normalized, Matrix};
use crate::vcp::{combine, softmax_ordered};
use crate::toa::AttributeTree;
use crate::vcp::{PoolingMode, VcpError};

pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("alpha < 1 needs at least one attribute besides global context")]
    SingleAttribute,
    #[error("class `{0}` has no descriptions")]
    EmptyDescriptions(String),
    #[error("flattening needs the same number of descriptions for every class")]
    RaggedDescriptions,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("prompts were trained for attributes {trained:?} but the tree has {tree:?}")]
    AttributeMismatch { trained: Vec<String>, tree: Vec<String> },
    #[error("{images} images but {labels} labels")]
    Labels { images: usize, labels: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vcp(#[from] VcpError),
}

/// Which vision feature each attribute is aligned with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    /// Expert token per attribute, CLS for global context.
    #[default]
    Experts,
    /// CLS for every attribute.
    ClsOnly,
}

impl std::str::FromStr for AlignmentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "experts" => Ok(Self::Experts),
            "cls_only" => Ok(Self::ClsOnly),
            other => Err(format!("unknown alignment mode `{other}`")),
        }
    }
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Experts => "experts",
            Self::ClsOnly => "cls_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub pooling: PoolingMode,
    pub alignment: AlignmentMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, pooling: PoolingMode::Vcp, alignment: AlignmentMode::Experts }
    }
}

/// Cosine logits of every attribute (global context first) and their fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLogits {
    pub per_attribute: IndexMap<String, Vec<f64>>,
    pub fused: Vec<f64>,
    pub alpha: f64,
    pub prediction: usize,
}

/// Weight of each attribute in the fused logits: `α` for global context and
/// `(1 − α)/(|A| − 1)` for each other attribute.
pub fn fusion_weights(alpha: f64, num_attributes: usize) -> Result<Vec<f64>, InferenceError> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(InferenceError::Alpha(alpha));
    }
    if num_attributes < 2 {
        if alpha < 1.0 || num_attributes == 0 {
            return Err(InferenceError::SingleAttribute);
        }
        return Ok(vec![1.0]);
    }
    let rest = (1.0 - alpha) / (num_attributes - 1) as f64;
    let mut w = vec![rest; num_attributes];
    w[0] = alpha;
    Ok(w)
}

/// `α·cls + (1 − α)/(|A| − 1)·Σ others`, computed exactly in that form.
pub fn fuse(per_attribute: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>, InferenceError> {
    let a = per_attribute.len();
    fusion_weights(alpha, a)?;
    let c = per_attribute[0].len();
    if per_attribute.iter().any(|l| l.len() != c) {
        return Err(InferenceError::Dimension("attribute logits differ in class count".into()));
    }
    if a == 1 {
        return Ok(per_attribute[0].clone());
    }
    let k = (1.0 - alpha) / (a - 1) as f64;
    Ok((0..c)
        .map(|j| {
            let others: f64 = per_attribute[1..].iter().map(|l| l[j]).sum();
            alpha * per_attribute[0][j] + k * others
        })
        .collect())
}

/// `2bn / (b + n)`, and 0 when both are 0.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        return 0.0;
    }
    2.0 * base * novel / (base + novel)
}

/// Mean cosine between `feature` and each class's description rows.
pub fn description_set_scores<T: Scalar>(feature: &[T], descriptions: &[Matrix<T>]) -> Result<Vec<f64>, InferenceError> {
    descriptions
        .iter()
        .enumerate()
        .map(|(c, m)| {
            if m.rows() == 0 {
                return Err(InferenceError::EmptyDescriptions(c.to_string()));
            }
            let s: f64 = (0..m.rows()).map(|r| cosine(feature, m.row(r)).as_f64()).sum();
            Ok(s / m.rows() as f64)
        })
        .collect()
}

/// Unstructured classification: argmax of the mean description cosine.
pub fn classify_description_set_baseline<T: Scalar>(
    cls_feature: &[T],
    descriptions: &[Matrix<T>],
) -> Result<usize, InferenceError> {
    Ok(argmax(&description_set_scores(cls_feature, descriptions)?))
}

/// Rewrites a tree so description `i` of every class becomes the single
/// leaf of pseudo-attribute `i`. Every class must have the same number of
/// descriptions.
pub fn flatten_tree(tree: &AttributeTree) -> Result<AttributeTree, InferenceError> {
    let mut leaves: IndexMap<String, Vec<String>> = IndexMap::new();
    for (class, attrs) in &tree.per_class {
        let all: Vec<String> = tree.attribute_names.iter().flat_map(|a| attrs.get(a).cloned().unwrap_or_default()).collect();
        if all.is_empty() {
            return Err(InferenceError::EmptyDescriptions(class.clone()));
        }
        leaves.insert(class.clone(), all);
    }
    let n = leaves.values().next().map_or(0, Vec::len);
    if leaves.values().any(|l| l.len() != n) {
        return Err(InferenceError::RaggedDescriptions);
    }
    let names: Vec<String> = (1..=n).map(|i| format!("description {i}")).collect();
    let per_class = leaves
        .into_iter()
        .map(|(c, l)| (c, names.iter().cloned().zip(l.into_iter().map(|d| vec![d])).collect()))
        .collect();
    Ok(AttributeTree {
        dataset_name: tree.dataset_name.clone(),
        attribute_names: names,
        global_context_templates: tree.global_context_templates.clone(),
        per_class,
    })
}

/// Pooling attention weights and pooled feature for one class, using
/// precomputed keys.
fn pool_with_keys<T: Scalar>(
    query: &[T],
    keys: &Matrix<T>,
    rows: &Matrix<T>,
    mode: PoolingMode,
) -> (Vec<T>, Vec<T>) {
    let n = rows.rows();
    let weights = match mode {
        PoolingMode::Average => vec![T::one() / T::of(n as f64); n],
        PoolingMode::Vcp | PoolingMode::AttnMax => {
            let logits: Vec<T> = (0..n).map(|i| dot(query, keys.row(i))).collect();
            if mode == PoolingMode::Vcp {
                softmax_ordered(&logits)
            } else {
                let mut w = vec![T::zero(); n];
                w[argmax(&logits)] = T::one();
                w
            }
        }
    };
    let out = combine(rows, &weights);
    (weights, out)
}

/// Classifier over a fixed (prompts, bank) pair with pooling keys cached.
pub struct Predictor<'a, T> {
    prompts: &'a PromptState<T>,
    bank: &'a EmbeddingBank<T>,
    config: InferenceConfig,
    /// Per attribute: key rows of every stacked description.
    keys: Vec<Matrix<T>>,
    /// Per attribute, per class: description rows.
    rows: Vec<Vec<Matrix<T>>>,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(
        prompts: &'a PromptState<T>,
        bank: &'a EmbeddingBank<T>,
        config: InferenceConfig,
    ) -> Result<Self, InferenceError> {
        fusion_weights(config.alpha, bank.attributes.len())?;
        if prompts.vcp.len() != bank.attributes.len() {
            return Err(InferenceError::Dimension(format!(
                "{} pooling layers for {} attributes",
                prompts.vcp.len(),
                bank.attributes.len()
            )));
        }
        if config.alignment == AlignmentMode::Experts && prompts.num_experts() + 1 != bank.attributes.len() {
            return Err(InferenceError::Dimension("expert count disagrees with bank".into()));
        }
        let keys = bank.attributes.iter().zip(&prompts.vcp).map(|(a, w)| a.embeddings.matmul_t(&w.key)).collect();
        let rows = bank
            .attributes
            .iter()
            .map(|a| (0..a.segments.len()).map(|c| a.class_rows(c)).collect())
            .collect();
        Ok(Self { prompts, bank, config, keys, rows })
    }

    pub fn config(&self) -> InferenceConfig {
        self.config
    }

    fn feature<'f>(&self, features: &'f VisionForwardOutput<T>, attribute: usize) -> &'f [T] {
        if attribute == 0 || self.config.alignment == AlignmentMode::ClsOnly {
            &features.cls_feature
        } else {
            features.expert(attribute - 1)
        }
    }

    /// Per-class attention weights of one attribute for given features.
    pub fn attention(&self, features: &VisionForwardOutput<T>, attribute: usize) -> Vec<Vec<T>> {
        let feature = self.feature(features, attribute);
        let q = Matrix::row_vector(feature).matmul_t(&self.prompts.vcp[attribute].query);
        let a = &self.bank.attributes[attribute];
        a.segments
            .iter()
            .enumerate()
            .map(|(c, &(s, n))| {
                pool_with_keys(q.row(0), &self.keys[attribute].slice_rows(s, n), &self.rows[attribute][c], self.config.pooling).0
            })
            .collect()
    }

    pub fn logits(&self, features: &VisionForwardOutput<T>) -> Result<AttributeLogits, InferenceError> {
        let mut per_attribute = IndexMap::new();
        for (ai, attr) in self.bank.attributes.iter().enumerate() {
            let feature = self.feature(features, ai);
            let q = Matrix::row_vector(feature).matmul_t(&self.prompts.vcp[ai].query);
            let logits: Vec<f64> = attr
                .segments
                .iter()
                .enumerate()
                .map(|(c, &(s, n))| {
                    let keys = self.keys[ai].slice_rows(s, n);
                    let (_, pooled) = pool_with_keys(q.row(0), &keys, &self.rows[ai][c], self.config.pooling);
                    dot(feature, &normalized(&pooled)).as_f64()
                })
                .collect();
            per_attribute.insert(attr.name.clone(), logits);
        }
        let all: Vec<Vec<f64>> = per_attribute.values().cloned().collect();
        let fused = fuse(&all, self.config.alpha)?;
        let prediction = argmax(&fused);
        Ok(AttributeLogits { per_attribute, fused, alpha: self.config.alpha, prediction })
    }
}

/// Encodes `image` and classifies it. The bank must match the current text
/// parameters and tree.
#[allow(clippy::too_many_arguments)]
pub fn predict<T: Scalar>(
    model: &ClipModel<T>,
    image: &Image,
    prompts: &PromptState<T>,
    bank: &EmbeddingBank<T>,
    tree: &AttributeTree,
    alpha: f64,
    pooling: PoolingMode,
    alignment: AlignmentMode,
) -> Result<AttributeLogits, InferenceError> {
    bank.ensure_version(&bank_version(model, tree, prompts))?;
    let predictor = Predictor::new(prompts, bank, InferenceConfig { alpha, pooling, alignment })?;
    predictor.logits(&encode_image(model, image, prompts)?)
}

/// Accuracy of one inference configuration over a labelled image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config: InferenceConfig,
    /// Percent.
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Scores every image under each configuration. Images are encoded once and
/// the bank is built once for all configurations.
pub fn evaluate<T: Scalar>(
    model: &ClipModel<T>,
    prompts: &PromptState<T>,
    tree: &AttributeTree,
    images: &[Image],
    labels: &[usize],
    configs: &[InferenceConfig],
) -> Result<Vec<Evaluation>, InferenceError> {
    if prompts.attributes != tree.attribute_names {
        return Err(InferenceError::AttributeMismatch {
            trained: prompts.attributes.clone(),
            tree: tree.attribute_names.clone(),
        });
    }
    if images.len() != labels.len() {
        return Err(InferenceError::Labels { images: images.len(), labels: labels.len() });
    }
    let bank = build_embedding_bank(model, tree, prompts)?;
    let predictors = configs.iter().map(|&c| Predictor::new(prompts, &bank, c)).collect::<Result<Vec<_>, _>>()?;
    let mut predictions = vec![Vec::with_capacity(images.len()); configs.len()];
    for image in images {
        let features = encode_image(model, image, prompts)?;
        for (p, out) in predictors.iter().zip(predictions.iter_mut()) {
            out.push(p.logits(&features)?.prediction);
        }
    }
    Ok(configs
        .iter()
        .zip(predictions)
        .map(|(&config, predictions)| {
            let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            let accuracy = if labels.is_empty() { 0.0 } else { 100.0 * correct as f64 / labels.len() as f64 };
            Evaluation { config, accuracy, predictions }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::bank::{AttributeEmbeddings, BankVersion};
    use crate::vcp::VcpWeights;
    use proptest::prelude::*;

    #[test]
    fn harmonic_mean_table_rows() {
        for (b, n, hm) in [(84.75, 77.63, 81.04), (69.34, 74.22, 71.70), (82.69, 63.22, 71.66), (80.47, 71.69, 75.83)] {
            assert!((harmonic_mean(b, n) - hm).abs() <= 0.01, "{b} {n}");
        }
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(42.5, 42.5) - 42.5).abs() < 1e-12);
    }

    #[test]
    fn fusion_weights_for_three_attributes() {
        assert_eq!(fusion_weights(0.4, 3).unwrap(), vec![0.4, 0.3, 0.3]);
        assert_eq!(fusion_weights(1.0, 1).unwrap(), vec![1.0]);
        assert!(matches!(fusion_weights(0.4, 1), Err(InferenceError::SingleAttribute)));
        assert!(matches!(fusion_weights(1.2, 3), Err(InferenceError::Alpha(_))));
    }

    #[test]
    fn fused_example_prefers_attributes() {
        // CLS favors class 0 by 0.2, both attributes favor class 1 by 0.3.
        let logits = vec![vec![0.5, 0.3], vec![0.1, 0.4], vec![0.2, 0.5]];
        let fused = fuse(&logits, 0.4).unwrap();
        let margin = fused[1] - fused[0];
        let oracle = 0.4 * -0.2 + 0.6 * 0.3;
        assert!((margin - oracle).abs() < 1e-12);
        assert_eq!(argmax(&fused), 1);
        let cls = fuse(&logits, 1.0).unwrap();
        assert_eq!(cls, logits[0]);
    }

    #[test]
    fn baseline_matches_mean_argmax_oracle() {
        let f = [1.0f64, 0.0];
        let ang = |t: f64| vec![t.cos(), t.sin()];
        let descs = vec![
            Matrix::from_rows(&[ang(0.1), ang(1.5)]),
            Matrix::from_rows(&[ang(0.4), ang(0.5), ang(0.6)]),
            Matrix::from_rows(&[ang(3.0)]),
        ];
        let oracle = [((0.1f64).cos() + (1.5f64).cos()) / 2.0, ((0.4f64).cos() + (0.5f64).cos() + (0.6f64).cos()) / 3.0, (3.0f64).cos()];
        let scores = description_set_scores(&f, &descs).unwrap();
        for (s, o) in scores.iter().zip(oracle) {
            assert!((s - o).abs() < 1e-12);
        }
        assert_eq!(classify_description_set_baseline(&f, &descs).unwrap(), 1);
        // Singleton and duplicated sets.
        let single = vec![Matrix::from_rows(&[ang(0.2)]), Matrix::from_rows(&[ang(0.3)])];
        assert_eq!(classify_description_set_baseline(&f, &single).unwrap(), 0);
        let dup = vec![Matrix::from_rows(&[ang(0.2), ang(0.2), ang(0.9)])];
        let dedup_weighted = (2.0 * (0.2f64).cos() + (0.9f64).cos()) / 3.0;
        assert!((description_set_scores(&f, &dup).unwrap()[0] - dedup_weighted).abs() < 1e-12);
        assert!(classify_description_set_baseline(&f, &[Matrix::<f64>::zeros(0, 2)]).is_err());
    }

    #[test]
    fn flatten_requires_uniform_counts() {
        let tree = crate::toa::fixtures::three_each(&["a", "b"], &["Color", "Shape"]);
        let flat = flatten_tree(&tree).unwrap();
        assert_eq!(flat.attribute_names.len(), 6);
        assert_eq!(flat.descriptions("b", 4).unwrap(), vec![tree.descriptions("b", 2).unwrap()[0].clone()]);
        let dumplings = crate::toa::fixtures::dumplings();
        assert!(matches!(flatten_tree(&dumplings), Err(InferenceError::RaggedDescriptions)));
    }

    fn random_unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
        normalized(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
    }

    /// Bank and prompts for `classes × n` flattened singleton attributes.
    fn synthetic_flat(seed: u64, classes: usize, n: usize, d: usize) -> (EmbeddingBank<f64>, PromptState<f64>, Vec<Matrix<f64>>) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<Matrix<f64>> =
            (0..classes).map(|_| Matrix::from_rows(&(0..n).map(|_| random_unit(&mut rng, d)).collect::<Vec<_>>())).collect();
        let mut attributes = vec![AttributeEmbeddings {
            name: "Global context".into(),
            embeddings: Matrix::from_rows(&(0..classes).map(|_| random_unit(&mut rng, d)).collect::<Vec<_>>()),
            segments: (0..classes).map(|c| (c, 1)).collect(),
        }];
        for i in 0..n {
            let rows: Vec<Vec<f64>> = sets.iter().map(|m| m.row(i).to_vec()).collect();
            attributes.push(AttributeEmbeddings {
                name: format!("description {}", i + 1),
                embeddings: Matrix::from_rows(&rows),
                segments: (0..classes).map(|c| (c, 1)).collect(),
            });
        }
        let bank = EmbeddingBank {
            version: BankVersion { tree_hash: String::new(), text_version: String::new() },
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            attributes,
        };
        let prompts = PromptState {
            attributes: vec![],
            expert_tokens: Matrix::zeros(0, d),
            residuals: vec![],
            text_context: Matrix::zeros(1, d),
            vcp: (0..=n).map(|_| VcpWeights::near_identity(d, 0.3, &mut rng)).collect(),
        };
        (bank, prompts, sets)
    }

    proptest! {
        #[test]
        fn flattened_cls_only_average_reproduces_baseline(seed in 0u64..1000, classes in 2usize..6, n in 1usize..5) {
            let d = 8;
            let (bank, prompts, sets) = synthetic_flat(seed, classes, n, d);
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let features = VisionForwardOutput { cls_feature: random_unit(&mut rng, d), expert_features: IndexMap::new(), patch_features: None };
            let cfg = InferenceConfig { alpha: 0.0, pooling: PoolingMode::Average, alignment: AlignmentMode::ClsOnly };
            let out = Predictor::new(&prompts, &bank, cfg).unwrap().logits(&features).unwrap();
            let scores = description_set_scores(&features.cls_feature, &sets).unwrap();
            for (f, s) in out.fused.iter().zip(&scores) {
                prop_assert!((f - s).abs() < 1e-12);
            }
            prop_assert_eq!(out.prediction, argmax(&scores));
        }

        #[test]
        fn common_positive_scaling_keeps_argmax(logits in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..5), k in 0.01f64..100.0, alpha in 0.0f64..1.0) {
            let scaled: Vec<Vec<f64>> = logits.iter().map(|l| l.iter().map(|x| x * k).collect()).collect();
            prop_assert_eq!(argmax(&fuse(&logits, alpha).unwrap()), argmax(&fuse(&scaled, alpha).unwrap()));
        }

        #[test]
        fn fused_logits_are_affine_in_alpha(logits in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 3), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let fa = fuse(&logits, a).unwrap();
            let fb = fuse(&logits, b).unwrap();
            let mid = fuse(&logits, (a + b) / 2.0).unwrap();
            for j in 0..3 {
                prop_assert!((mid[j] - (fa[j] + fb[j]) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_crossover_is_where_predicted() {
        // Class 0 wins on CLS by 0.2, class 1 on the attribute by 0.3:
        // fused margin is 0.3 - 0.5α, so the argmax flips at α = 0.6.
        let logits = vec![vec![0.6, 0.4], vec![0.1, 0.4]];
        assert_eq!(argmax(&fuse(&logits, 0.59).unwrap()), 1);
        assert_eq!(argmax(&fuse(&logits, 0.61).unwrap()), 0);
    }
}
