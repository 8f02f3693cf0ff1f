//! Datasets, splits, the synthetic attribute world and evaluation protocols.
//!
//! A dataset on disk lives under `<root>/<name>/` with
//!
//! * `classes.txt`: one class name per line, in canonical order;
//! * `index.txt`: `<relative image path> <label> [train|test]` per line;
//! * `splits/<task>/<seed>.txt`: optional precomputed splits (see [`splits`]).
//!
//! Images are decoded eagerly and resized to the backbone resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::image::ImageError;
use crate::encoder::{EncoderError, Image};
use crate::inference::InferenceError;
use crate::toa::ToaError;
use crate::training::TrainError;

pub mod protocol;
pub mod splits;
pub mod synthetic;

pub use protocol::{run_protocol, MetricsDocument, ProtocolConfig, ProtocolData, ProtocolRun, SeedMetrics};
pub use splits::{make_splits, SplitSet, Splits};
pub use synthetic::{generate_synthetic, SyntheticAttributeDataset, SyntheticConfig};

/// Attribute set used for every dataset in cross-dataset transfer.
pub const CROSS_DATASET_ATTRIBUTES: [&str; 4] = ["Pattern", "Texture", "Shape", "Context"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("insufficient samples: class `{class}` has {available} training samples, {shots} shots requested")]
    InsufficientSamples { class: String, available: usize, shots: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("non-separable classes: `{0}` and `{1}` have identical attributes")]
    NonSeparable(String, String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("attribute set mismatch: trained on {trained:?}, target `{dataset}` has {target:?}")]
    AttributeMismatch { dataset: String, trained: Vec<String>, target: Vec<String> },
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Toa(#[from] ToaError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Relative image path, or a synthetic identifier.
    pub id: String,
    pub label: usize,
    /// `None` when the index does not tag samples.
    pub subset: Option<Subset>,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.classes.is_empty() {
            return Err(DatasetError::Config(format!("dataset `{}` has no classes", self.name)));
        }
        if let Some(s) = self.samples.iter().find(|s| s.label >= self.classes.len()) {
            return Err(DatasetError::Label { label: s.label, classes: self.classes.len() });
        }
        Ok(())
    }

    pub fn images(&self, ids: &[usize]) -> Vec<Image> {
        ids.iter().map(|&i| self.samples[i].image.clone()).collect()
    }

    /// Loads `<root>/<name>` and resizes every image to `size × size`.
    pub fn load(root: &Path, name: &str, size: usize) -> Result<Self, DatasetError> {
        let dir = root.join(name);
        let classes_path = dir.join("classes.txt");
        let classes: Vec<String> = read_to_string(&classes_path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let index_path = dir.join("index.txt");
        let mut samples = Vec::new();
        for (n, line) in read_to_string(&index_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| DatasetError::Parse { path: index_path.clone(), line: n + 1, message };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (path, label, subset) = match fields.as_slice() {
                [p, l] => (*p, *l, None),
                [p, l, s] => (*p, *l, Some(*s)),
                _ => return Err(parse_err("expected `<path> <label> [train|test]`".into())),
            };
            let label: usize = label.parse().map_err(|_| parse_err(format!("bad label `{label}`")))?;
            let subset = match subset {
                None => None,
                Some("train") => Some(Subset::Train),
                Some("test") => Some(Subset::Test),
                Some(other) => return Err(parse_err(format!("bad subset `{other}`"))),
            };
            let image_path = dir.join(path);
            let image = Image::load_png(&image_path)
                .map_err(|source| DatasetError::Image { path: image_path.clone(), source })?;
            let image = if image.height == size && image.width == size { image } else { image.resize(size, size) };
            samples.push(Sample { id: path.to_string(), label, subset, image });
        }
        let ds = Dataset { name: name.to_string(), classes, samples };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the on-disk layout read by [`Dataset::load`], with PNG images
    /// under `images/`.
    pub fn save(&self, root: &Path) -> Result<PathBuf, DatasetError> {
        let dir = root.join(&self.name);
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| DatasetError::io(&images, e))?;
        write_string(&dir.join("classes.txt"), &(self.classes.join("\n") + "\n"))?;
        let mut index = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("images/{i:05}.png");
            let path = dir.join(&rel);
            s.image.save_png(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
            index.push_str(&rel);
            index.push(' ');
            index.push_str(&s.label.to_string());
            match s.subset {
                Some(Subset::Train) => index.push_str(" train"),
                Some(Subset::Test) => index.push_str(" test"),
                None => {}
            }
            index.push('\n');
        }
        write_string(&dir.join("index.txt"), &index)?;
        Ok(dir)
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))
}

/// Writes through a temporary file so readers never see partial output.
pub(crate) fn write_string(path: &Path, contents: &str) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| DatasetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DatasetError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let mut samples = Vec::new();
        for i in 0..6 {
            let mut image = Image::zeros(3, 8, 8);
            image.set(0, 0, 0, i as f32 / 10.0);
            let subset = if i < 4 { Some(Subset::Train) } else { Some(Subset::Test) };
            samples.push(Sample { id: format!("s{i}"), label: i % 2, subset, image });
        }
        Dataset { name: "tiny".into(), classes: vec!["cat".into(), "dog".into()], samples }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), "tiny", 8).unwrap();
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.samples.len(), 6);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!((a.label, a.subset), (b.label, b.subset));
            assert!((a.image.get(0, 0, 0) - b.image.get(0, 0, 0)).abs() < 1.0 / 255.0);
        }
        let resized = Dataset::load(dir.path(), "tiny", 4).unwrap();
        assert_eq!(resized.samples[0].image.height, 4);
    }

    #[test]
    fn malformed_index_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let index = dir.path().join("tiny/index.txt");
        let mut text = fs::read_to_string(&index).unwrap();
        text.push_str("images/00000.png seven\n");
        fs::write(&index, text).unwrap();
        match Dataset::load(dir.path(), "tiny", 8) {
            Err(DatasetError::Parse { line: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut ds = tiny();
        ds.samples[0].label = 9;
        assert!(matches!(ds.validate(), Err(DatasetError::Label { label: 9, classes: 2 })));
    }
}
