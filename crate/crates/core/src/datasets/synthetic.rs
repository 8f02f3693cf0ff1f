//! Procedurally rendered datasets whose classes are defined by latent
//! attributes.
//!
//! The image is divided into a grid of cells and attribute `a` owns cell `a`.
//! Every attribute value is a word paired with a colored sinusoidal grating,
//! and each class allows a few values (variants) per attribute. A sample
//! draws one variant per attribute, so the class is recognized only by
//! combining evidence from several regions. The ground-truth tree names the
//! allowed values, one description per variant.
//!
//! Values, words and gratings depend only on the attribute and value index,
//! so datasets with different seeds or class names share one visual world and
//! one pretrained backbone.

use indexmap::IndexMap;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetError, Sample, Subset};
use crate::encoder::pretrain::{pretrain, PretrainConfig};
use crate::encoder::{ClipModel, Image, ToyConfig};
use crate::scalar::Scalar;
use crate::toa::{default_global_templates, AttributeTree, CLASS_PLACEHOLDER};

const CLASS_NAMES: [&str; 24] = [
    "aster", "briar", "clover", "dahlia", "elder", "fennel", "gorse", "heather", "iris", "juniper", "kale", "lupin",
    "mallow", "nettle", "orchid", "peony", "quince", "rowan", "sorrel", "tansy", "umbel", "vetch", "willow", "yarrow",
];

const DEFAULT_ATTRIBUTES: [&str; 3] = ["Crown", "Band", "Base"];

const VALUE_WORDS: [[&str; 8]; 6] = [
    ["striped", "dotted", "wavy", "ridged", "banded", "zigzag", "rippled", "grooved"],
    ["crimson", "azure", "amber", "violet", "jade", "ivory", "coral", "slate"],
    ["glossy", "matte", "fuzzy", "scaly", "silky", "rough", "waxy", "grainy"],
    ["narrow", "broad", "tapered", "rounded", "pointed", "flared", "curled", "notched"],
    ["faint", "bold", "bright", "dusky", "pale", "vivid", "muted", "deep"],
    ["spotted", "veined", "mottled", "freckled", "marbled", "flecked", "streaked", "blotched"],
];

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 0.8, 0.1],
    [0.7, 0.2, 1.0],
    [0.1, 0.9, 0.5],
    [0.9, 0.9, 0.9],
    [1.0, 0.5, 0.4],
    [0.4, 0.5, 0.6],
];

pub const MAX_VALUES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub attributes: Vec<String>,
    pub values_per_attribute: usize,
    pub variants_per_class: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    pub amplitude: f32,
    /// Index of the first class name, so related datasets use distinct names.
    pub class_name_offset: usize,
    /// Explicit `[class][attribute] → allowed values`; drawn from the seed when absent.
    pub class_values: Option<Vec<Vec<Vec<usize>>>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 0,
            num_classes: 8,
            attributes: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
            values_per_attribute: 6,
            variants_per_class: 2,
            image_size: 32,
            train_per_class: 24,
            test_per_class: 20,
            noise: 0.08,
            amplitude: 0.4,
            class_name_offset: 0,
            class_values: None,
        }
    }
}

impl SyntheticConfig {
    fn grid(&self) -> usize {
        (1..).find(|g| g * g >= self.attributes.len()).unwrap_or(1)
    }

    fn cell(&self) -> usize {
        self.image_size / self.grid()
    }

    fn validate_layout(&self, min_attributes: usize) -> Result<(), DatasetError> {
        let k = self.attributes.len();
        if k < min_attributes || k > VALUE_WORDS.len() {
            return Err(DatasetError::Geometry(format!(
                "need {min_attributes}..={} attributes, got {k}",
                VALUE_WORDS.len()
            )));
        }
        let g = self.grid();
        if !self.image_size.is_multiple_of(g) || self.cell() < 4 {
            return Err(DatasetError::Geometry(format!("{}px image cannot hold a {g}x{g} grid", self.image_size)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DatasetError::Geometry("need training and test samples for every class".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.validate_layout(2)?;
        if self.num_classes < 4 || self.class_name_offset + self.num_classes > CLASS_NAMES.len() {
            return Err(DatasetError::Geometry(format!(
                "need 4 to {} classes after the name offset, got {}",
                CLASS_NAMES.len() - self.class_name_offset.min(CLASS_NAMES.len()),
                self.num_classes
            )));
        }
        if self.values_per_attribute > MAX_VALUES || self.variants_per_class == 0 || self.variants_per_class > self.values_per_attribute {
            return Err(DatasetError::Geometry(format!(
                "{} variants out of {} values (at most {MAX_VALUES})",
                self.variants_per_class, self.values_per_attribute
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[self.class_name_offset..self.class_name_offset + self.num_classes].iter().map(|s| s.to_string()).collect()
    }
}

/// Word naming value `v` of attribute `a`.
pub fn value_word(attribute: usize, value: usize) -> &'static str {
    VALUE_WORDS[attribute % VALUE_WORDS.len()][value]
}

/// Text following `which` for a value named by `word`.
pub fn value_phrase(attribute: &str, word: &str) -> String {
    format!("has {word} {}", attribute.to_lowercase())
}

/// Description of one allowed value.
pub fn describe(class: &str, attribute: &str, word: &str) -> String {
    format!("{class}, which {}", value_phrase(attribute, word))
}

/// Draws a grating for `(attribute, value)` into the cell at `(oy, ox)`.
#[allow(clippy::too_many_arguments)]
fn draw_value(img: &mut Image, oy: usize, ox: usize, cell: usize, attribute: usize, value: usize, amplitude: f32, phase: f32) {
    let theta = std::f32::consts::PI * (value as f32 / MAX_VALUES as f32 + 0.13 * attribute as f32);
    let freq = 1.0 + (value % 3) as f32;
    let color = PALETTE[(value + 3 * attribute) % PALETTE.len()];
    let (s, c) = theta.sin_cos();
    for y in 0..cell {
        for x in 0..cell {
            let u = (x as f32 * c + y as f32 * s) / cell as f32;
            let wave = (2.0 * std::f32::consts::PI * freq * u + phase).sin();
            for (ch, &w) in color.iter().enumerate() {
                img.set(ch, oy + y, ox + x, 0.5 + amplitude * wave * (2.0 * w - 1.0));
            }
        }
    }
}

/// Renders an image showing `values[a]` in the cell of attribute `a`.
pub fn render<R: Rng + ?Sized>(cfg: &SyntheticConfig, values: &[usize], rng: &mut R) -> Image {
    let size = cfg.image_size;
    let (g, cell) = (cfg.grid(), cfg.cell());
    let mut img = Image::zeros(3, size, size);
    img.pixels.iter_mut().for_each(|p| *p = 0.5);
    for (a, &v) in values.iter().enumerate() {
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        draw_value(&mut img, (a / g) * cell, (a % g) * cell, cell, a, v, cfg.amplitude, phase);
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("finite noise level");
        for p in img.pixels.iter_mut() {
            *p = (*p + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct SyntheticAttributeDataset {
    pub config: SyntheticConfig,
    /// `[class][attribute] → allowed values`, each ascending.
    pub class_values: Vec<Vec<Vec<usize>>>,
    /// `[attribute][value]` → text following `which` in a description.
    pub value_phrases: Vec<Vec<String>>,
    pub tree: AttributeTree,
    pub dataset: Dataset,
}

impl SyntheticAttributeDataset {
    /// SHA-256 over the tree, labels, subsets and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.tree.serialize());
        for s in &self.dataset.samples {
            h.update(s.id.as_bytes());
            h.update((s.label as u64).to_le_bytes());
            h.update([matches!(s.subset, Some(Subset::Test)) as u8]);
            for p in &s.image.pixels {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Every string the text tower must be able to tokenize for this dataset.
    pub fn texts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.tree.class_names() {
            for a in 0..self.tree.num_attributes() {
                out.extend(self.tree.descriptions(c, a).unwrap_or_default());
            }
        }
        out
    }
}

fn draw_class_values(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<usize>>>, DatasetError> {
    let mut classes: Vec<Vec<Vec<usize>>> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut found = None;
        for _ in 0..1000 {
            let candidate: Vec<Vec<usize>> = cfg
                .attributes
                .iter()
                .map(|_| {
                    let mut v = (0..cfg.values_per_attribute).choose_multiple(rng, cfg.variants_per_class);
                    v.sort_unstable();
                    v
                })
                .collect();
            if !classes.contains(&candidate) {
                found = Some(candidate);
                break;
            }
        }
        classes.push(found.ok_or_else(|| DatasetError::Geometry("too few value combinations for the class count".into()))?);
    }
    Ok(classes)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticAttributeDataset, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names = cfg.class_names();
    let class_values = match &cfg.class_values {
        Some(v) => {
            if v.len() != cfg.num_classes
                || v.iter().any(|c| c.len() != cfg.attributes.len() || c.iter().any(|a| a.is_empty() || a.iter().any(|&x| x >= cfg.values_per_attribute)))
            {
                return Err(DatasetError::Config("class_values does not match classes, attributes and values".into()));
            }
            v.iter()
                .map(|c| {
                    c.iter()
                        .map(|a| {
                            let mut a = a.clone();
                            a.sort_unstable();
                            a.dedup();
                            a
                        })
                        .collect()
                })
                .collect()
        }
        None => draw_class_values(cfg, &mut rng)?,
    };
    for i in 0..class_values.len() {
        for j in i + 1..class_values.len() {
            if class_values[i] == class_values[j] {
                return Err(DatasetError::NonSeparable(names[i].clone(), names[j].clone()));
            }
        }
    }

    let per_class = names
        .iter()
        .zip(&class_values)
        .map(|(c, values)| {
            let attrs: IndexMap<String, Vec<String>> = cfg
                .attributes
                .iter()
                .enumerate()
                .map(|(a, name)| (name.clone(), values[a].iter().map(|&v| describe(c, name, value_word(a, v))).collect()))
                .collect();
            (c.clone(), attrs)
        })
        .collect();
    let tree = AttributeTree {
        dataset_name: cfg.name.clone(),
        attribute_names: cfg.attributes.clone(),
        global_context_templates: default_global_templates(),
        per_class,
    };
    tree.ensure_valid()?;
    let value_phrases = cfg
        .attributes
        .iter()
        .enumerate()
        .map(|(a, name)| (0..cfg.values_per_attribute).map(|v| value_phrase(name, value_word(a, v))).collect())
        .collect();
    let dataset = render_samples(cfg, names, &class_values, &mut rng);
    Ok(SyntheticAttributeDataset { config: cfg.clone(), class_values, value_phrases, tree, dataset })
}

fn render_samples(cfg: &SyntheticConfig, names: Vec<String>, class_values: &[Vec<Vec<usize>>], rng: &mut ChaCha8Rng) -> Dataset {
    let mut samples = Vec::new();
    for (subset, count) in [(Subset::Train, cfg.train_per_class), (Subset::Test, cfg.test_per_class)] {
        for (label, values) in class_values.iter().enumerate() {
            for i in 0..count {
                let drawn: Vec<usize> = values.iter().map(|v| *v.choose(rng).expect("non-empty variants")).collect();
                let image = render(cfg, &drawn, rng);
                let tag = if subset == Subset::Train { "train" } else { "test" };
                samples.push(Sample { id: format!("{tag}/{label}/{i}"), label, subset: Some(subset), image });
            }
        }
    }
    Dataset { name: cfg.name.clone(), classes: names, samples }
}

/// World rendered from an existing tree. Every description of attribute `a`
/// becomes its own value of `a`, and images of a class show one of its first
/// `depicted` descriptions per attribute. Class names, attributes and the
/// tree come from `tree`; `cfg` supplies geometry, sample counts and seed.
pub fn tree_world(tree: &AttributeTree, depicted: usize, cfg: &SyntheticConfig) -> Result<SyntheticAttributeDataset, DatasetError> {
    tree.ensure_valid()?;
    let cfg = SyntheticConfig {
        name: tree.dataset_name.clone(),
        num_classes: tree.num_classes(),
        attributes: tree.attribute_names.clone(),
        class_values: None,
        ..cfg.clone()
    };
    cfg.validate_layout(1)?;
    if depicted == 0 {
        return Err(DatasetError::Config("a class must depict at least one description".into()));
    }
    let mut value_phrases: Vec<Vec<String>> = vec![Vec::new(); cfg.attributes.len()];
    let mut class_values = Vec::with_capacity(tree.num_classes());
    for class in tree.class_names() {
        let mut per_attr = Vec::with_capacity(cfg.attributes.len());
        for (a, phrases) in value_phrases.iter_mut().enumerate() {
            let descriptions = tree.descriptions(class, a + 1)?;
            let mut shown = Vec::new();
            for (i, d) in descriptions.iter().enumerate() {
                let lower = d.to_lowercase();
                let pos = lower.find(", which").expect("validated grammar") + ", which".len();
                let phrase = d[pos..].trim().to_string();
                let v = match phrases.iter().position(|p| *p == phrase) {
                    Some(v) => v,
                    None => {
                        phrases.push(phrase);
                        phrases.len() - 1
                    }
                };
                if i < depicted {
                    shown.push(v);
                }
            }
            shown.sort_unstable();
            shown.dedup();
            per_attr.push(shown);
        }
        class_values.push(per_attr);
    }
    if let Some((a, p)) = value_phrases.iter().enumerate().find(|(_, p)| p.len() > MAX_VALUES) {
        return Err(DatasetError::Geometry(format!(
            "attribute `{}` has {} distinct descriptions, at most {MAX_VALUES} can be rendered",
            cfg.attributes[a],
            p.len()
        )));
    }
    let values_per_attribute = value_phrases.iter().map(Vec::len).max().unwrap_or(1);
    let cfg = SyntheticConfig { values_per_attribute, variants_per_class: 1, ..cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = tree.class_names().map(str::to_string).collect();
    let dataset = render_samples(&cfg, names, &class_values, &mut rng);
    Ok(SyntheticAttributeDataset { config: cfg, class_values, value_phrases, tree: tree.clone(), dataset })
}

/// Caption mix used to warm-start a toy backbone on a synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldPretraining {
    pub pairs: usize,
    /// Fraction of captions naming the class of a class-consistent image;
    /// the rest describe one attribute of an image with random values.
    pub name_caption_rate: f64,
    pub toy: ToyConfig,
    pub optimizer: PretrainConfig,
    pub seed: u64,
}

impl Default for WorldPretraining {
    fn default() -> Self {
        Self {
            pairs: 3072,
            name_caption_rate: 0.1,
            toy: ToyConfig::default(),
            optimizer: PretrainConfig { epochs: 12, ..PretrainConfig::default() },
            seed: 0,
        }
    }
}

/// Image-caption pairs over the shared world of `worlds`. Attribute captions
/// borrow a random class name so that names carry no attribute information.
pub fn pretraining_pairs(worlds: &[&SyntheticAttributeDataset], spec: &WorldPretraining) -> Vec<(Image, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_ca97);
    let mut out = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let world = worlds[rng.gen_range(0..worlds.len())];
        let cfg = &world.config;
        let class = rng.gen_range(0..cfg.num_classes);
        let class_name = &world.dataset.classes[class];
        if rng.gen_bool(spec.name_caption_rate) {
            let values: Vec<usize> =
                world.class_values[class].iter().map(|v| *v.choose(&mut rng).expect("non-empty variants")).collect();
            out.push((render(cfg, &values, &mut rng), format!("a photo of a {class_name}.")));
        } else {
            let values: Vec<usize> = world.value_phrases.iter().map(|p| rng.gen_range(0..p.len())).collect();
            let a = rng.gen_range(0..cfg.attributes.len());
            let caption = format!("a photo of a {class_name}, which {}.", world.value_phrases[a][values[a]]);
            out.push((render(cfg, &values, &mut rng), caption));
        }
    }
    out
}

/// Builds a toy backbone whose vocabulary covers `worlds` and warm-starts it
/// on [`pretraining_pairs`].
pub fn pretrained_backbone<T: Scalar>(
    worlds: &[&SyntheticAttributeDataset],
    spec: &WorldPretraining,
) -> Result<(ClipModel<T>, Vec<f64>), DatasetError> {
    if worlds.is_empty() {
        return Err(DatasetError::Config("no synthetic world to pretrain on".into()));
    }
    let toy = ToyConfig { image_size: worlds[0].config.image_size, ..spec.toy.clone() };
    let pairs = pretraining_pairs(worlds, spec);
    let mut texts: Vec<String> = worlds.iter().flat_map(|w| w.texts()).collect();
    texts.extend(pairs.iter().map(|(_, c)| c.clone()));
    texts.extend(default_global_templates().iter().map(|t| t.replace(CLASS_PLACEHOLDER, "")));
    let mut model = ClipModel::toy(toy, &texts, spec.seed)?;
    let history = pretrain(&mut model, &pairs, &spec.optimizer)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_has_a_full_description_grid() {
        let w = generate_synthetic(&SyntheticConfig::default()).unwrap();
        assert_eq!(w.tree.num_classes(), 8);
        assert_eq!(w.tree.attribute_names.len(), 3);
        for c in w.tree.class_names() {
            for a in 1..=3 {
                assert_eq!(w.tree.descriptions(c, a).unwrap().len(), 2);
            }
        }
        assert!(w.tree.validate().is_valid());
        assert_eq!(w.dataset.samples.len(), 8 * (24 + 20));
        assert!(w.dataset.samples.iter().all(|s| s.image.height == 32 && s.image.channels == 3));
    }

    #[test]
    fn tree_world_gives_each_description_a_value() {
        let tree = crate::toa::fixtures::dumplings();
        let cfg = SyntheticConfig { train_per_class: 2, test_per_class: 1, ..SyntheticConfig::default() };
        let w = tree_world(&tree, 1, &cfg).unwrap();
        assert_eq!(w.tree, tree);
        assert_eq!(w.dataset.classes, ["dumplings", "spring rolls", "ramen"]);
        let shape = tree.attribute_names.iter().position(|a| a == "Shape").unwrap();
        assert_eq!(w.value_phrases[shape].len(), 8);
        assert_eq!(w.value_phrases[shape][0], "are round with a pleated edge");
        assert_eq!(w.value_phrases[shape][1], "are crescent-shaped");
        assert_eq!(w.class_values[0][shape], vec![0]);
        assert_eq!(w.dataset.samples.len(), 3 * 3);
        let all = tree_world(&tree, 5, &cfg).unwrap();
        assert_eq!(all.class_values[0][shape], vec![0, 1, 2, 3]);
        assert!(matches!(tree_world(&tree, 0, &cfg), Err(DatasetError::Config(_))));
    }

    #[test]
    fn identical_classes_are_rejected() {
        let same = vec![vec![0, 1]; 3];
        let mut values: Vec<Vec<Vec<usize>>> = (0..4).map(|c| vec![vec![c], vec![c], vec![c]]).collect();
        values[2] = same.clone();
        values[3] = same;
        let cfg = SyntheticConfig { num_classes: 4, class_values: Some(values), ..SyntheticConfig::default() };
        match generate_synthetic(&cfg) {
            Err(DatasetError::NonSeparable(a, b)) => assert_eq!((a.as_str(), b.as_str()), ("clover", "dahlia")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_hash() {
        let cfg = SyntheticConfig { train_per_class: 3, test_per_class: 2, ..SyntheticConfig::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn geometry_is_checked() {
        for bad in [
            SyntheticConfig { attributes: vec!["Only".into()], ..SyntheticConfig::default() },
            SyntheticConfig { num_classes: 3, ..SyntheticConfig::default() },
            SyntheticConfig { image_size: 6, ..SyntheticConfig::default() },
            SyntheticConfig { variants_per_class: 9, ..SyntheticConfig::default() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(DatasetError::Geometry(_))), "{bad:?}");
        }
    }

    #[test]
    fn each_attribute_owns_its_cell() {
        let cfg = SyntheticConfig { noise: 0.0, ..SyntheticConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = render(&cfg, &[0, 0, 0], &mut ChaCha8Rng::seed_from_u64(0));
        let b = render(&cfg, &[0, 3, 0], &mut rng);
        let cell = cfg.cell();
        for y in 0..32 {
            for x in 0..32 {
                let in_cell_1 = y < cell && x >= cell;
                let differs = (0..3).any(|c| a.get(c, y, x) != b.get(c, y, x));
                if !in_cell_1 {
                    assert!(!differs, "pixel ({y}, {x}) changed outside the attribute's cell");
                }
            }
        }
    }

    #[test]
    fn cross_dataset_worlds_share_attribute_names() {
        let attrs: Vec<String> = crate::datasets::CROSS_DATASET_ATTRIBUTES.iter().map(|s| s.to_string()).collect();
        let src = generate_synthetic(&SyntheticConfig { attributes: attrs.clone(), train_per_class: 2, test_per_class: 1, ..SyntheticConfig::default() }).unwrap();
        let tgt = generate_synthetic(&SyntheticConfig {
            attributes: attrs,
            class_name_offset: 8,
            seed: 5,
            train_per_class: 2,
            test_per_class: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(src.tree.attribute_names, tgt.tree.attribute_names);
        assert!(src.dataset.classes.iter().all(|c| !tgt.dataset.classes.contains(c)));
    }

    #[test]
    fn pretraining_captions_cover_descriptions_vocabulary() {
        let w = generate_synthetic(&SyntheticConfig { train_per_class: 2, test_per_class: 1, ..SyntheticConfig::default() }).unwrap();
        let spec = WorldPretraining { pairs: 64, ..WorldPretraining::default() };
        let pairs = pretraining_pairs(&[&w], &spec);
        assert_eq!(pairs.len(), 64);
        assert!(pairs.iter().all(|(_, c)| c.starts_with("a photo of a ")));
        assert!(pairs.iter().any(|(_, c)| c.contains(", which has ")));
    }
}
