//! Contrastive warm start for the toy backbone on image-caption pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::ClipModel;
use super::image::Image;
use super::EncoderError;
use crate::autodiff::Graph;
use crate::objectives::cross_entropy_graph;
use crate::optim::{Adam, CosineSchedule};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Upper bound on the learned logit scale, as in CLIP.
const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092; // ln 100

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 1e-3, warmup_steps: 20, seed: 0 }
    }
}

/// Symmetric InfoNCE over in-batch pairs, optimized with Adam. Returns the
/// mean loss of every epoch.
pub fn pretrain<T: Scalar>(
    model: &mut ClipModel<T>,
    pairs: &[(Image, String)],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>, EncoderError> {
    if cfg.batch_size < 2 || pairs.len() < 2 {
        return Err(EncoderError::Config("pretraining needs at least two pairs per batch".into()));
    }
    let tokenized: Vec<(Matrix<T>, Vec<usize>)> = pairs
        .iter()
        .map(|(im, cap)| Ok((im.patches(model.config.patch), model.token_ids(cap, 0)?)))
        .collect::<Result<_, EncoderError>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let schedule =
        CosineSchedule { base_lr: cfg.lr, warmup: cfg.warmup_steps, total: steps_per_epoch * cfg.epochs };
    let mut adam = Adam::default();
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let mut img = Vec::with_capacity(batch.len());
            let mut txt = Vec::with_capacity(batch.len());
            for &i in batch {
                img.push(vars.vision_forward(&mut g, &tokenized[i].0, None).0);
                txt.push(vars.text_forward(&mut g, model, &tokenized[i].1, None));
            }
            let img = g.concat_rows(&img);
            let txt = g.concat_rows(&txt);
            let sim = g.matmul_t(img, txt);
            let scale = g.exp(vars.logit_scale);
            let logits = g.mul_scalar(sim, scale);
            let labels: Vec<usize> = (0..batch.len()).collect();
            let l_img = cross_entropy_graph(&mut g, logits, &labels);
            let logits_t = g.transpose(logits);
            let l_txt = cross_entropy_graph(&mut g, logits_t, &labels);
            let sum = g.add(l_img, l_txt);
            let loss = g.scale(sum, T::of(0.5));
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(EncoderError::Config(format!("pretraining diverged at step {step}")));
            }
            let grads = g.backward(loss);
            let all = vars.all();
            let mut gs: Vec<Matrix<T>> = Vec::with_capacity(all.len() + 1);
            {
                let params = model.tensors_mut();
                for (v, p) in all.iter().zip(params.iter()) {
                    gs.push(grads.get_or_zeros(*v, p));
                }
            }
            let mut scale_m = Matrix::filled(1, 1, model.logit_scale);
            gs.push(grads.get_or_zeros(vars.logit_scale, &scale_m));
            let lr = schedule.lr(step);
            {
                let mut params = model.tensors_mut();
                params.push(&mut scale_m);
                adam.step(&mut params, &gs, lr);
            }
            model.logit_scale = scale_m.data()[0].min(T::of(MAX_LOGIT_SCALE));
            total += value;
            batches += 1;
            step += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}
