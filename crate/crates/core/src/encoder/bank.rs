//! Description embeddings for every (class, attribute) pair.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::{ClipModel, ClipVars};
use super::prompt::{PromptState, Trainable};
use super::EncoderError;
use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toa::AttributeTree;

/// Descriptions per graph when encoding without gradients.
const CHUNK: usize = 64;

/// Tree plus text-parameter fingerprint a bank was built from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BankVersion {
    pub tree_hash: String,
    pub text_version: String,
}

/// Token ids of one attribute's leaves for a set of classes, stacked in
/// class order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedAttribute {
    pub name: String,
    pub sequences: Vec<Vec<usize>>,
    pub segments: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeEmbeddings<T> {
    pub name: String,
    /// Every leaf embedding of this attribute, classes stacked in tree order.
    pub embeddings: Matrix<T>,
    /// `(start, len)` rows of each class.
    pub segments: Vec<(usize, usize)>,
}

impl<T: Scalar> AttributeEmbeddings<T> {
    pub fn class_rows(&self, class: usize) -> Matrix<T> {
        let (s, n) = self.segments[class];
        self.embeddings.slice_rows(s, n)
    }
}

/// Unit-norm description embeddings; index 0 is the global context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank<T> {
    pub version: BankVersion,
    pub class_names: Vec<String>,
    pub attributes: Vec<AttributeEmbeddings<T>>,
}

impl<T: Scalar> EmbeddingBank<T> {
    pub fn num_matrices(&self) -> usize {
        self.attributes.len() * self.class_names.len()
    }

    pub fn get(&self, class: usize, attribute: usize) -> Matrix<T> {
        self.attributes[attribute].class_rows(class)
    }

    pub fn ensure_version(&self, expected: &BankVersion) -> Result<(), EncoderError> {
        if &self.version != expected {
            return Err(EncoderError::StaleBank);
        }
        Ok(())
    }
}

fn hash_tensors<'a, T: Scalar>(h: &mut Sha256, tensors: impl IntoIterator<Item = &'a Matrix<T>>) {
    for t in tensors {
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for &x in t.data() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
}

/// Fingerprint of the text tower plus the shared context tokens.
pub fn text_version<T: Scalar>(model: &ClipModel<T>, prompts: &PromptState<T>) -> String {
    let mut h = Sha256::new();
    h.update(model.backend_id.as_bytes());
    hash_tensors(&mut h, model.text_tensors());
    hash_tensors(&mut h, [&prompts.text_context]);
    hex::encode(h.finalize())
}

pub fn bank_version<T: Scalar>(model: &ClipModel<T>, tree: &AttributeTree, prompts: &PromptState<T>) -> BankVersion {
    BankVersion { tree_hash: tree.content_hash(), text_version: text_version(model, prompts) }
}

/// Tokenizes the leaves of every attribute (global context first) for
/// `classes` (tree indices), checking sequence lengths.
pub fn tokenize_tree<T: Scalar>(
    model: &ClipModel<T>,
    tree: &AttributeTree,
    classes: &[usize],
) -> Result<Vec<TokenizedAttribute>, EncoderError> {
    let names: Vec<&str> = tree.class_names().collect();
    let n_ctx = model.config.n_ctx;
    tree.attribute_ids()
        .into_iter()
        .map(|attr| {
            let mut sequences = Vec::new();
            let mut segments = Vec::with_capacity(classes.len());
            for &c in classes {
                let class = names.get(c).ok_or_else(|| EncoderError::Dimension(format!("class index {c}")))?;
                let leaves = tree.descriptions(class, attr.index)?;
                if leaves.is_empty() {
                    return Err(EncoderError::EmptyLeaves { class: class.to_string(), attribute: attr.name.clone() });
                }
                segments.push((sequences.len(), leaves.len()));
                for leaf in &leaves {
                    let ids = model.token_ids(leaf, n_ctx).map_err(|e| EncoderError::Context {
                        class: class.to_string(),
                        attribute: attr.name.clone(),
                        source: Box::new(e),
                    })?;
                    sequences.push(ids);
                }
            }
            Ok(TokenizedAttribute { name: attr.name, sequences, segments })
        })
        .collect()
}

/// Encodes every sequence of `attr` in graph `g` and stacks the unit-norm
/// embeddings. Identical sequences share one forward pass.
pub fn encode_attribute_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ClipVars,
    model: &ClipModel<T>,
    attr: &TokenizedAttribute,
    context: Var,
) -> Var {
    let mut seen: std::collections::HashMap<&[usize], Var> = std::collections::HashMap::new();
    let rows: Vec<Var> = attr
        .sequences
        .iter()
        .map(|ids| *seen.entry(ids.as_slice()).or_insert_with(|| vars.text_forward(g, model, ids, Some(context))))
        .collect();
    g.concat_rows(&rows)
}

/// Embeddings of token sequences through the prompted text tower, without
/// gradients.
pub fn encode_sequences<T: Scalar>(model: &ClipModel<T>, prompts: &PromptState<T>, sequences: &[Vec<usize>]) -> Matrix<T> {
    let d = model.embed_dim();
    let mut out = Matrix::zeros(sequences.len(), d);
    let mut cache: std::collections::HashMap<&[usize], usize> = std::collections::HashMap::new();
    for (chunk_idx, chunk) in sequences.chunks(CHUNK).enumerate() {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let pv = prompts.bind(&mut g, Trainable::NONE);
        for (i, ids) in chunk.iter().enumerate() {
            let row = chunk_idx * CHUNK + i;
            if let Some(&prev) = cache.get(ids.as_slice()) {
                let v = out.row(prev).to_vec();
                out.row_mut(row).copy_from_slice(&v);
                continue;
            }
            let e = vars.text_forward(&mut g, model, ids, Some(pv.text_context));
            out.row_mut(row).copy_from_slice(g.value(e).row(0));
            cache.insert(ids.as_slice(), row);
        }
    }
    out
}

/// `n × d` unit-norm embeddings of the leaves of `(class, attribute)`.
pub fn encode_descriptions<T: Scalar>(
    model: &ClipModel<T>,
    tree: &AttributeTree,
    prompts: &PromptState<T>,
    attribute: usize,
    class: &str,
) -> Result<Matrix<T>, EncoderError> {
    prompts.check_compatible(model)?;
    let leaves = tree.descriptions(class, attribute)?;
    let seqs = leaves
        .iter()
        .map(|l| model.token_ids(l, model.config.n_ctx))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(encode_sequences(model, prompts, &seqs))
}

pub fn build_embedding_bank<T: Scalar>(
    model: &ClipModel<T>,
    tree: &AttributeTree,
    prompts: &PromptState<T>,
) -> Result<EmbeddingBank<T>, EncoderError> {
    prompts.check_compatible(model)?;
    let classes: Vec<usize> = (0..tree.num_classes()).collect();
    let tokenized = tokenize_tree(model, tree, &classes)?;
    let attributes = tokenized
        .into_iter()
        .map(|a| AttributeEmbeddings {
            embeddings: encode_sequences(model, prompts, &a.sequences),
            name: a.name,
            segments: a.segments,
        })
        .collect();
    Ok(EmbeddingBank {
        version: bank_version(model, tree, prompts),
        class_names: tree.class_names().map(str::to_string).collect(),
        attributes,
    })
}
