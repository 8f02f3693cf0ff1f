//! Toy dual-encoder with CLIP-style vision and text transformers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::PromptVars;
use super::tokenizer::Vocabulary;
use super::transformer::{causal_mask, Block, BlockVars, LayerNorm, LayerNormVars, Linear, LinearVars};
use super::EncoderError;
use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub context_length: usize,
    pub n_ctx: usize,
    pub ctx_init: String,
    /// Hide expert tokens from every other token so each expert only
    /// influences its own output row.
    pub expert_isolation: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            width: 64,
            embed_dim: 64,
            vision_layers: 4,
            text_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            context_length: 32,
            n_ctx: 4,
            ctx_init: "a photo of a.".into(),
            expert_isolation: true,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if [self.image_size, self.channels, self.patch, self.width, self.embed_dim, self.heads, self.mlp_ratio]
            .contains(&0)
        {
            return bad("sizes must be positive");
        }
        if self.vision_layers == 0 || self.text_layers == 0 {
            return bad("layer counts must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return bad("patch must divide image_size");
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.n_ctx == 0 || self.context_length < self.n_ctx + 3 {
            return bad("context_length must hold SOT, context tokens, one word and EOT");
        }
        if super::tokenizer::tokenize(&self.ctx_init).len() < self.n_ctx {
            return bad("ctx_init has fewer tokens than n_ctx");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionTower<T> {
    pub patch_embed: Linear<T>,
    pub class_embedding: Matrix<T>,
    pub positional: Matrix<T>,
    pub ln_pre: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_post: LayerNorm<T>,
    pub proj: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextTower<T> {
    pub token_embedding: Matrix<T>,
    pub positional: Matrix<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
    pub proj: Matrix<T>,
}

/// Dual encoder. Backbone weights are shared by every prompt state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel<T> {
    pub backend_id: String,
    pub config: ToyConfig,
    pub vocab: Vocabulary,
    pub vision: VisionTower<T>,
    pub text: TextTower<T>,
    /// Log of the inverse softmax temperature.
    pub logit_scale: T,
}

pub struct VisionVars {
    pub patch_embed: LinearVars,
    pub class_embedding: Var,
    pub positional: Var,
    pub ln_pre: LayerNormVars,
    pub blocks: Vec<BlockVars>,
    pub ln_post: LayerNormVars,
    pub proj: Var,
}

pub struct TextVars {
    pub token_embedding: Var,
    pub positional: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_final: LayerNormVars,
    pub proj: Var,
    /// Frozen embeddings are gathered as constants instead of via one-hot products.
    trainable: bool,
}

/// Graph handles for every backbone tensor.
pub struct ClipVars {
    pub vision: VisionVars,
    pub text: TextVars,
    pub logit_scale: Var,
    expert_isolation: bool,
}

fn linear_vars(l: &LinearVars) -> [Var; 2] {
    [l.weight, l.bias]
}

fn ln_vars(l: &LayerNormVars) -> [Var; 2] {
    [l.gain, l.bias]
}

fn block_vars(b: &BlockVars) -> Vec<Var> {
    let mut v = Vec::with_capacity(12);
    v.extend(ln_vars(&b.ln_attn));
    v.extend(linear_vars(&b.qkv));
    v.extend(linear_vars(&b.out));
    v.extend(ln_vars(&b.ln_mlp));
    v.extend(linear_vars(&b.fc1));
    v.extend(linear_vars(&b.fc2));
    v
}

impl ClipVars {
    /// Every backbone node, ordered like [`ClipModel::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let v = &self.vision;
        let mut out = Vec::new();
        out.extend(linear_vars(&v.patch_embed));
        out.extend([v.class_embedding, v.positional]);
        out.extend(ln_vars(&v.ln_pre));
        for b in &v.blocks {
            out.extend(block_vars(b));
        }
        out.extend(ln_vars(&v.ln_post));
        out.push(v.proj);
        let t = &self.text;
        out.extend([t.token_embedding, t.positional]);
        for b in &t.blocks {
            out.extend(block_vars(b));
        }
        out.extend(ln_vars(&t.ln_final));
        out.push(t.proj);
        out
    }
}

impl<T: Scalar> ClipModel<T> {
    /// Fresh randomly initialized toy backbone whose vocabulary covers `texts`.
    pub fn toy<S: AsRef<str>>(
        config: ToyConfig,
        texts: impl IntoIterator<Item = S>,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut vocab = Vocabulary::build([config.ctx_init.as_str()]);
        vocab.extend(texts);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let emb_std = 0.02;
        let vision = VisionTower {
            patch_embed: Linear::new(config.patch_dim(), w, &mut rng),
            class_embedding: Matrix::randn(1, w, emb_std, &mut rng),
            positional: Matrix::randn(1 + config.num_patches(), w, emb_std, &mut rng),
            ln_pre: LayerNorm::new(w),
            blocks: (0..config.vision_layers).map(|_| Block::new(w, config.heads, config.mlp_ratio, &mut rng)).collect(),
            ln_post: LayerNorm::new(w),
            proj: Matrix::randn(w, config.embed_dim, 1.0 / (w as f64).sqrt(), &mut rng),
        };
        let text = TextTower {
            token_embedding: Matrix::randn(vocab.len(), w, emb_std, &mut rng),
            positional: Matrix::randn(config.context_length, w, emb_std, &mut rng),
            blocks: (0..config.text_layers).map(|_| Block::new(w, config.heads, config.mlp_ratio, &mut rng)).collect(),
            ln_final: LayerNorm::new(w),
            proj: Matrix::randn(w, config.embed_dim, 1.0 / (w as f64).sqrt(), &mut rng),
        };
        Ok(Self {
            backend_id: super::TOY_BACKEND.into(),
            config,
            vocab,
            vision,
            text,
            logit_scale: T::of((1.0f64 / 0.07).ln()),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Softmax temperature τ = exp(-logit_scale).
    pub fn temperature(&self) -> T {
        (-self.logit_scale).exp()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = Vec::new();
        let v = &self.vision;
        out.push(("vision.patch_embed.weight".into(), &v.patch_embed.weight));
        out.push(("vision.patch_embed.bias".into(), &v.patch_embed.bias));
        out.push(("vision.class_embedding".into(), &v.class_embedding));
        out.push(("vision.positional".into(), &v.positional));
        out.push(("vision.ln_pre.gain".into(), &v.ln_pre.gain));
        out.push(("vision.ln_pre.bias".into(), &v.ln_pre.bias));
        for (i, b) in v.blocks.iter().enumerate() {
            for (j, t) in b.tensors().into_iter().enumerate() {
                out.push((format!("vision.blocks.{i}.{}", BLOCK_TENSOR_NAMES[j]), t));
            }
        }
        out.push(("vision.ln_post.gain".into(), &v.ln_post.gain));
        out.push(("vision.ln_post.bias".into(), &v.ln_post.bias));
        out.push(("vision.proj".into(), &v.proj));
        let t = &self.text;
        out.push(("text.token_embedding".into(), &t.token_embedding));
        out.push(("text.positional".into(), &t.positional));
        for (i, b) in t.blocks.iter().enumerate() {
            for (j, m) in b.tensors().into_iter().enumerate() {
                out.push((format!("text.blocks.{i}.{}", BLOCK_TENSOR_NAMES[j]), m));
            }
        }
        out.push(("text.ln_final.gain".into(), &t.ln_final.gain));
        out.push(("text.ln_final.bias".into(), &t.ln_final.bias));
        out.push(("text.proj".into(), &t.proj));
        out
    }

    /// Mutable tensors in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = Vec::new();
        let v = &mut self.vision;
        out.push(&mut v.patch_embed.weight);
        out.push(&mut v.patch_embed.bias);
        out.push(&mut v.class_embedding);
        out.push(&mut v.positional);
        out.push(&mut v.ln_pre.gain);
        out.push(&mut v.ln_pre.bias);
        for b in &mut v.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut v.ln_post.gain);
        out.push(&mut v.ln_post.bias);
        out.push(&mut v.proj);
        let t = &mut self.text;
        out.push(&mut t.token_embedding);
        out.push(&mut t.positional);
        for b in &mut t.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut t.ln_final.gain);
        out.push(&mut t.ln_final.bias);
        out.push(&mut t.proj);
        out
    }

    /// Text-tower tensors only, used to version embedding banks.
    pub fn text_tensors(&self) -> Vec<&Matrix<T>> {
        self.named_tensors().into_iter().filter(|(n, _)| n.starts_with("text.")).map(|(_, t)| t).collect()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ClipVars {
        let v = &self.vision;
        let vision = VisionVars {
            patch_embed: v.patch_embed.bind(g, trainable),
            class_embedding: g.leaf(v.class_embedding.clone(), trainable),
            positional: g.leaf(v.positional.clone(), trainable),
            ln_pre: v.ln_pre.bind(g, trainable),
            blocks: v.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            ln_post: v.ln_post.bind(g, trainable),
            proj: g.leaf(v.proj.clone(), trainable),
        };
        let t = &self.text;
        let text = TextVars {
            token_embedding: g.leaf(t.token_embedding.clone(), trainable),
            positional: g.leaf(t.positional.clone(), trainable),
            blocks: t.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            ln_final: t.ln_final.bind(g, trainable),
            proj: g.leaf(t.proj.clone(), trainable),
            trainable,
        };
        let logit_scale = g.leaf(Matrix::filled(1, 1, self.logit_scale), trainable);
        ClipVars { vision, text, logit_scale, expert_isolation: self.config.expert_isolation }
    }

    /// Token ids of `text`, checked against the maximum sequence length once
    /// SOT, EOT and `n_ctx` context slots are added.
    pub fn token_ids(&self, text: &str, n_ctx: usize) -> Result<Vec<usize>, EncoderError> {
        let ids = self.vocab.encode(text);
        let len = ids.len() + n_ctx + 2;
        if len > self.config.context_length {
            return Err(EncoderError::SequenceTooLong {
                description: text.to_string(),
                len,
                max: self.config.context_length,
            });
        }
        Ok(ids)
    }

    /// Embedding rows for the leading context tokens taken from `ctx_init`.
    pub fn initial_context(&self) -> Matrix<T> {
        let ids = self.vocab.encode(&self.config.ctx_init);
        let rows: Vec<Vec<T>> =
            ids[..self.config.n_ctx].iter().map(|&i| self.text.token_embedding.row(i).to_vec()).collect();
        Matrix::from_rows(&rows)
    }

    /// Text used by the frozen reference encoder and by pretraining: the
    /// context initialization spelled out in front of `body`.
    pub fn plain_prompt(&self, body: &str) -> String {
        let words: Vec<String> = super::tokenizer::tokenize(&self.config.ctx_init);
        format!("{} {body}", words[..self.config.n_ctx].join(" "))
    }
}

/// Additive mask over `[CLS, experts, patches]`: expert keys are visible
/// only to their own query row.
fn expert_mask<T: Scalar>(len: usize, k: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in 1..=k {
            if i != j {
                m[(i, j)] = T::neg_infinity();
            }
        }
    }
    m
}

const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "ln_attn.gain",
    "ln_attn.bias",
    "qkv.weight",
    "qkv.bias",
    "out.weight",
    "out.bias",
    "ln_mlp.gain",
    "ln_mlp.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

impl ClipVars {
    /// Vision forward. Returns unit-norm `1 × d` CLS and `K × d` expert
    /// features (`None` without prompts or with zero experts).
    pub fn vision_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        patches: &Matrix<T>,
        prompts: Option<&PromptVars>,
    ) -> (Var, Option<Var>) {
        let v = &self.vision;
        let isolate = self.expert_isolation;
        let p = patches.rows();
        let x = g.constant(patches.clone());
        let tokens = v.patch_embed.forward(g, x);
        let pos_patch = g.slice_rows(v.positional, 1, p);
        let tokens = g.add(tokens, pos_patch);
        let pos_cls = g.slice_rows(v.positional, 0, 1);
        let cls = g.add(v.class_embedding, pos_cls);
        let experts = prompts.filter(|pv| pv.num_experts > 0);
        let k = experts.map_or(0, |pv| pv.num_experts);
        let seq = match experts {
            Some(pv) => g.concat_rows(&[cls, pv.expert_tokens, tokens]),
            None => g.concat_rows(&[cls, tokens]),
        };
        let mut h = v.ln_pre.forward(g, seq);
        let width = g.value(h).cols();
        let mask = (k > 0 && isolate).then(|| g.constant(expert_mask(1 + k + p, k)));
        for (l, block) in v.blocks.iter().enumerate() {
            if let Some(&r) = experts.and_then(|pv| pv.residuals.get(l)) {
                let top = g.constant(Matrix::zeros(1, width));
                let bottom = g.constant(Matrix::zeros(p, width));
                let r = g.concat_rows(&[top, r, bottom]);
                h = g.add(h, r);
            }
            h = block.forward(g, h, mask);
        }
        let head = g.slice_rows(h, 0, 1 + k);
        let head = v.ln_post.forward(g, head);
        let head = g.matmul(head, v.proj);
        let head = g.normalize_rows(head);
        let cls = g.slice_rows(head, 0, 1);
        let experts = (k > 0).then(|| g.slice_rows(head, 1, k));
        (cls, experts)
    }

    /// Text forward for one token sequence. With `context`, its rows fill the
    /// slots right after SOT. Returns a unit-norm `1 × d` node.
    pub fn text_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        model: &ClipModel<T>,
        ids: &[usize],
        context: Option<Var>,
    ) -> Var {
        let t = &self.text;
        let mut tail = Vec::with_capacity(ids.len() + 1);
        tail.extend_from_slice(ids);
        tail.push(model.vocab.eot());
        let sot = self.gather(g, model, &[model.vocab.sot()]);
        let rest = self.gather(g, model, &tail);
        let n_ctx = context.map_or(0, |c| g.value(c).rows());
        let seq = match context {
            Some(c) => g.concat_rows(&[sot, c, rest]),
            None => g.concat_rows(&[sot, rest]),
        };
        let len = 1 + n_ctx + tail.len();
        let pos = g.slice_rows(t.positional, 0, len);
        let mut h = g.add(seq, pos);
        let mask = g.constant(causal_mask(len));
        for block in &t.blocks {
            h = block.forward(g, h, Some(mask));
        }
        let eot = g.slice_rows(h, len - 1, 1);
        let eot = t.ln_final.forward(g, eot);
        let out = g.matmul(eot, t.proj);
        g.normalize_rows(out)
    }

    fn gather<T: Scalar>(&self, g: &mut Graph<T>, model: &ClipModel<T>, ids: &[usize]) -> Var {
        let table = &model.text.token_embedding;
        if self.text.trainable {
            let mut onehot = Matrix::zeros(ids.len(), table.rows());
            for (r, &i) in ids.iter().enumerate() {
                onehot[(r, i)] = T::one();
            }
            let oh = g.constant(onehot);
            g.matmul(oh, self.text.token_embedding)
        } else {
            let rows: Vec<Vec<T>> = ids.iter().map(|&i| table.row(i).to_vec()).collect();
            g.constant(Matrix::from_rows(&rows))
        }
    }
}
