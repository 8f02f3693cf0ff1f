//! Learnable prompt parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::ClipModel;
use super::EncoderError;
use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vcp::{VcpVars, VcpWeights};

const EXPERT_INIT_STD: f64 = 0.02;
const VCP_INIT_NOISE: f64 = 0.01;

/// Every trainable prompt tensor.
///
/// Expert rows follow `attributes` (global context excluded); `vcp[0]` is
/// the global context's pooling layer and `vcp[i]` belongs to
/// `attributes[i - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState<T> {
    pub attributes: Vec<String>,
    pub expert_tokens: Matrix<T>,
    pub residuals: Vec<Matrix<T>>,
    pub text_context: Matrix<T>,
    pub vcp: Vec<VcpWeights<T>>,
}

/// Which prompt groups receive gradients in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub vision: bool,
    pub text: bool,
}

impl Trainable {
    pub const NONE: Self = Self { vision: false, text: false };
    pub const VISION: Self = Self { vision: true, text: false };
    pub const TEXT: Self = Self { vision: false, text: true };
}

pub struct PromptVars {
    pub num_experts: usize,
    pub expert_tokens: Var,
    pub residuals: Vec<Var>,
    pub text_context: Var,
    pub vcp: Vec<VcpVars>,
}

impl PromptVars {
    pub fn vision_vars(&self) -> Vec<Var> {
        let mut v = vec![self.expert_tokens];
        v.extend(&self.residuals);
        for w in &self.vcp {
            v.extend([w.query, w.key]);
        }
        v
    }
}

impl<T: Scalar> PromptState<T> {
    /// Initial prompts: expert tokens start as the CLS input token plus small
    /// noise, residuals are zero, the context copies the backbone's `ctx_init`
    /// embedding and pooling is near identity.
    pub fn init<R: Rng + ?Sized>(model: &ClipModel<T>, attributes: &[String], rng: &mut R) -> Self {
        let w = model.width();
        let k = attributes.len();
        let d = model.embed_dim();
        Self {
            attributes: attributes.to_vec(),
            expert_tokens: cls_copies(model, k).zip_map(&Matrix::randn(k, w, EXPERT_INIT_STD, rng), |a, b| a + b),
            residuals: (0..model.config.vision_layers).map(|_| Matrix::zeros(k, w)).collect(),
            text_context: model.initial_context(),
            vcp: (0..=k).map(|_| VcpWeights::near_identity(d, VCP_INIT_NOISE, rng)).collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.attributes.len()
    }

    pub fn check_compatible(&self, model: &ClipModel<T>) -> Result<(), EncoderError> {
        let w = model.width();
        let d = model.embed_dim();
        let k = self.num_experts();
        let mismatch = |what: &str| Err(EncoderError::Dimension(what.to_string()));
        if self.expert_tokens.shape() != (k, w) {
            return mismatch("expert tokens");
        }
        if self.residuals.len() != model.config.vision_layers || self.residuals.iter().any(|r| r.shape() != (k, w)) {
            return mismatch("deep residuals");
        }
        if self.text_context.shape() != (model.config.n_ctx, w) {
            return mismatch("text context");
        }
        if self.vcp.len() != k + 1 || self.vcp.iter().any(|v| v.query.shape() != (d, d) || v.key.shape() != (d, d)) {
            return mismatch("pooling weights");
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable) -> PromptVars {
        PromptVars {
            num_experts: self.num_experts(),
            expert_tokens: g.leaf(self.expert_tokens.clone(), trainable.vision),
            residuals: self.residuals.iter().map(|r| g.leaf(r.clone(), trainable.vision)).collect(),
            text_context: g.leaf(self.text_context.clone(), trainable.text),
            vcp: self
                .vcp
                .iter()
                .map(|w| VcpVars {
                    query: g.leaf(w.query.clone(), trainable.vision),
                    key: g.leaf(w.key.clone(), trainable.vision),
                })
                .collect(),
        }
    }

    /// Vision-side tensors in the order of [`PromptVars::vision_vars`].
    pub fn vision_tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.expert_tokens];
        v.extend(self.residuals.iter_mut());
        for w in &mut self.vcp {
            v.push(&mut w.query);
            v.push(&mut w.key);
        }
        v
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut v = vec![&self.expert_tokens];
        v.extend(self.residuals.iter());
        v.push(&self.text_context);
        for w in &self.vcp {
            v.push(&w.query);
            v.push(&w.key);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.expert_tokens];
        v.extend(self.residuals.iter_mut());
        v.push(&mut self.text_context);
        for w in &mut self.vcp {
            v.push(&mut w.query);
            v.push(&mut w.key);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// `k` copies of the class token with its position embedding.
fn cls_copies<T: Scalar>(model: &ClipModel<T>, k: usize) -> Matrix<T> {
    let v = &model.vision;
    let cls: Vec<T> = v.class_embedding.row(0).iter().zip(v.positional.row(0)).map(|(&a, &b)| a + b).collect();
    Matrix::from_rows(&vec![cls; k])
}
