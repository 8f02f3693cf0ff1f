//! Parameter blobs, backbone directories and prompt checkpoints.
//!
//! Blob layout (little endian): magic `TAPB`, `u32` format version, `u64`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, `u64`
//! rows, `u64` cols and `rows * cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::clip::{ClipModel, ToyConfig};
use super::prompt::PromptState;
use super::tokenizer::Vocabulary;
use super::{EncoderError, BACKENDS, PRETRAINED_ADAPTER_BACKEND};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vcp::VcpWeights;

const MAGIC: &[u8; 4] = b"TAPB";
const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> EncoderError {
    EncoderError::Checkpoint(msg.into())
}

pub fn write_blob<T: Scalar>(path: &Path, tensors: &[(String, &Matrix<T>)]) -> Result<(), EncoderError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &x in t.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated blob"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_blob<T: Scalar>(path: &Path) -> Result<Vec<(String, Matrix<T>)>, EncoderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad(format!("{} is not a parameter blob", path.display())));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported blob version {version}")));
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        let raw = c.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|b| T::of(f64::from_le_bytes(b.try_into().unwrap()))).collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Copies `loaded` into `targets` by position, checking names and shapes.
fn assign<T: Scalar>(
    names: &[String],
    targets: Vec<&mut Matrix<T>>,
    loaded: Vec<(String, Matrix<T>)>,
) -> Result<(), EncoderError> {
    if loaded.len() != targets.len() {
        return Err(bad(format!("expected {} tensors, found {}", targets.len(), loaded.len())));
    }
    for ((name, target), (got, value)) in names.iter().zip(targets).zip(loaded) {
        if *name != got {
            return Err(bad(format!("expected tensor `{name}`, found `{got}`")));
        }
        if target.shape() != value.shape() {
            return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", value.shape(), target.shape())));
        }
        *target = value;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BackboneHeader {
    backend_id: String,
    config: ToyConfig,
    vocabulary: Vocabulary,
    logit_scale: f64,
}

/// Writes `backbone.json` and `backbone.bin` into `dir`.
pub fn save_backbone<T: Scalar>(model: &ClipModel<T>, dir: &Path) -> Result<(), EncoderError> {
    std::fs::create_dir_all(dir)?;
    let header = BackboneHeader {
        backend_id: model.backend_id.clone(),
        config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        logit_scale: model.logit_scale.as_f64(),
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| bad(e.to_string()))?;
    std::fs::write(dir.join("backbone.json"), json + "\n")?;
    write_blob(&dir.join("backbone.bin"), &model.named_tensors())
}

/// Loads a backbone directory. `as_backend` overrides the recorded backend id.
pub fn load_backbone<T: Scalar>(dir: &Path, as_backend: Option<&str>) -> Result<ClipModel<T>, EncoderError> {
    let text = std::fs::read_to_string(dir.join("backbone.json"))?;
    let header: BackboneHeader = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let id = as_backend.unwrap_or(&header.backend_id).to_string();
    if !BACKENDS.contains(&id.as_str()) {
        return Err(EncoderError::UnknownBackend(id));
    }
    header.config.validate()?;
    // Shapes come from a throwaway init; values are overwritten below.
    let mut model: ClipModel<T> = ClipModel::toy(header.config.clone(), std::iter::empty::<&str>(), 0)?;
    model.vocab = header.vocabulary;
    model.text.token_embedding = Matrix::zeros(model.vocab.len(), model.config.width);
    model.backend_id = id;
    model.logit_scale = T::of(header.logit_scale);
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let loaded = read_blob(&dir.join("backbone.bin"))?;
    assign(&names, model.tensors_mut(), loaded)?;
    Ok(model)
}

/// Registry entry point: the adapter wraps externally supplied weights that
/// follow the toy architecture's tensor layout.
pub fn load_pretrained_adapter<T: Scalar>(dir: &Path) -> Result<ClipModel<T>, EncoderError> {
    load_backbone(dir, Some(PRETRAINED_ADAPTER_BACKEND))
}

fn prompt_names<T: Scalar>(p: &PromptState<T>) -> Vec<String> {
    let mut names = vec!["expert_tokens".to_string()];
    names.extend((0..p.residuals.len()).map(|l| format!("residual.{l}")));
    names.push("text_context".into());
    for i in 0..p.vcp.len() {
        names.push(format!("vcp.{i}.query"));
        names.push(format!("vcp.{i}.key"));
    }
    names
}

pub fn save_prompts<T: Scalar>(p: &PromptState<T>, path: &Path) -> Result<(), EncoderError> {
    let named: Vec<(String, &Matrix<T>)> = prompt_names(p).into_iter().zip(p.tensors()).collect();
    write_blob(path, &named)
}

/// Loads prompts saved for `attributes` on a backbone with the given geometry.
pub fn load_prompts<T: Scalar>(
    path: &Path,
    model: &ClipModel<T>,
    attributes: &[String],
) -> Result<PromptState<T>, EncoderError> {
    let k = attributes.len();
    let d = model.embed_dim();
    let w = model.width();
    let mut p = PromptState {
        attributes: attributes.to_vec(),
        expert_tokens: Matrix::zeros(k, w),
        residuals: vec![Matrix::zeros(k, w); model.config.vision_layers],
        text_context: Matrix::zeros(model.config.n_ctx, w),
        vcp: vec![VcpWeights { query: Matrix::zeros(d, d), key: Matrix::zeros(d, d) }; k + 1],
    };
    let names = prompt_names(&p);
    assign(&names, p.tensors_mut(), read_blob(path)?)?;
    Ok(p)
}

/// Contents of `manifest.json` in a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub backend_id: String,
    pub embed_dim: usize,
    pub attributes: Vec<String>,
    pub tree_hash: String,
    pub epoch: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub struct Checkpoint<T> {
    pub manifest: CheckpointManifest,
    pub backbone: ClipModel<T>,
    pub last: PromptState<T>,
    pub gpa: PromptState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<(), EncoderError> {
        std::fs::create_dir_all(dir)?;
        save_backbone(&self.backbone, &dir.join("backbone"))?;
        save_prompts(&self.last, &dir.join("prompts_last.bin"))?;
        save_prompts(&self.gpa, &dir.join("prompts_gpa.bin"))?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| bad(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EncoderError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let backbone = load_backbone(&dir.join("backbone"), None)?;
        if backbone.embed_dim() != manifest.embed_dim {
            return Err(bad("manifest embed_dim disagrees with backbone"));
        }
        let last = load_prompts(&dir.join("prompts_last.bin"), &backbone, &manifest.attributes)?;
        let gpa = load_prompts(&dir.join("prompts_gpa.bin"), &backbone, &manifest.attributes)?;
        Ok(Self { manifest, backbone, last, gpa })
    }
}
