//! Dual-encoder backends with visual expert tokens and shared text context.
//!
//! The vision input sequence is `[CLS, expert_1..expert_K, patches]`; before
//! every layer the layer's residual is added to the expert rows. Descriptions
//! are encoded as `[SOT, ctx_1..ctx_m, words, EOT]` and read out at EOT.

pub mod bank;
pub mod checkpoint;
pub mod clip;
pub mod image;
pub mod pretrain;
pub mod prompt;
pub mod tokenizer;
pub mod transformer;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use bank::{build_embedding_bank, encode_descriptions, BankVersion, EmbeddingBank};
pub use clip::{ClipModel, ToyConfig};
pub use image::Image;
pub use prompt::{PromptState, Trainable};

use crate::autodiff::Graph;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const TOY_BACKEND: &str = "toy";
pub const PRETRAINED_ADAPTER_BACKEND: &str = "pretrained-clip-adapter";
pub const BACKENDS: [&str; 2] = [TOY_BACKEND, PRETRAINED_ADAPTER_BACKEND];

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("description `{description}` needs {len} tokens, backend maximum is {max}")]
    SequenceTooLong { description: String, len: usize, max: usize },
    #[error("class `{class}` has no leaves for attribute `{attribute}`")]
    EmptyLeaves { class: String, attribute: String },
    #[error("while encoding ({class}, {attribute}): {source}")]
    Context { class: String, attribute: String, source: Box<EncoderError> },
    #[error("embedding bank is stale for the current text parameters")]
    StaleBank,
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error(transparent)]
    Toa(#[from] crate::toa::ToaError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Features of one image under a prompt state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionForwardOutput<T> {
    pub cls_feature: Vec<T>,
    pub expert_features: IndexMap<String, Vec<T>>,
    pub patch_features: Option<Matrix<T>>,
}

impl<T: Scalar> VisionForwardOutput<T> {
    /// Expert feature of the `i`-th named attribute.
    pub fn expert(&self, i: usize) -> &[T] {
        &self.expert_features[i]
    }
}

fn check_geometry<T: Scalar>(model: &ClipModel<T>, image: &Image) -> Result<(), EncoderError> {
    let c = &model.config;
    if image.channels != c.channels || image.height != c.image_size || image.width != c.image_size {
        return Err(EncoderError::Dimension(format!(
            "image is {}x{}x{}, backend expects {}x{}x{}",
            image.channels, image.height, image.width, c.channels, c.image_size, c.image_size
        )));
    }
    Ok(())
}

/// Prompted forward pass of one image.
pub fn encode_image<T: Scalar>(
    model: &ClipModel<T>,
    image: &Image,
    prompts: &PromptState<T>,
) -> Result<VisionForwardOutput<T>, EncoderError> {
    check_geometry(model, image)?;
    prompts.check_compatible(model)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let pv = prompts.bind(&mut g, Trainable::NONE);
    let (cls, experts) = vars.vision_forward(&mut g, &image.patches(model.config.patch), Some(&pv));
    let mut expert_features = IndexMap::new();
    if let Some(e) = experts {
        let m = g.value(e);
        for (i, name) in prompts.attributes.iter().enumerate() {
            expert_features.insert(name.clone(), m.row(i).to_vec());
        }
    }
    Ok(VisionForwardOutput { cls_feature: g.value(cls).row(0).to_vec(), expert_features, patch_features: None })
}

pub fn encode_images<T: Scalar>(
    model: &ClipModel<T>,
    images: &[Image],
    prompts: &PromptState<T>,
) -> Result<Vec<VisionForwardOutput<T>>, EncoderError> {
    images.iter().map(|im| encode_image(model, im, prompts)).collect()
}

/// CLS feature of the unprompted backbone.
pub fn encode_image_frozen<T: Scalar>(model: &ClipModel<T>, image: &Image) -> Result<Vec<T>, EncoderError> {
    check_geometry(model, image)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let (cls, _) = vars.vision_forward(&mut g, &image.patches(model.config.patch), None);
    Ok(g.value(cls).row(0).to_vec())
}

/// Unit-norm embeddings of plain texts (no learned context).
pub fn encode_texts<T: Scalar>(model: &ClipModel<T>, texts: &[String]) -> Result<Matrix<T>, EncoderError> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let mut out = Matrix::zeros(texts.len(), model.embed_dim());
    for (i, t) in texts.iter().enumerate() {
        let ids = model.token_ids(t, 0)?;
        let e = vars.text_forward(&mut g, model, &ids, None);
        out.row_mut(i).copy_from_slice(g.value(e).row(0));
    }
    Ok(out)
}
