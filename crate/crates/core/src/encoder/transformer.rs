//! Pre-LN transformer blocks shared by both towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Affine layer norm parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self { gain: Matrix::filled(1, width, T::one()), bias: Matrix::zeros(1, width) }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> LayerNormVars {
        LayerNormVars { gain: g.leaf(self.gain.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, T::of(LN_EPS));
        let n = g.mul_row(n, self.gain);
        g.add_row(n, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self { weight: Matrix::randn(fan_in, fan_out, std, rng), bias: Matrix::zeros(1, fan_out) }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> LinearVars {
        LinearVars { weight: g.leaf(self.weight.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = g.matmul(x, self.weight);
        g.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub ln_attn: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub ln_mlp: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        assert!(width.is_multiple_of(heads), "width must be divisible by heads");
        Self {
            ln_attn: LayerNorm::new(width),
            qkv: Linear::new(width, 3 * width, rng),
            out: Linear::new(width, width, rng),
            ln_mlp: LayerNorm::new(width),
            fc1: Linear::new(width, mlp_ratio * width, rng),
            fc2: Linear::new(mlp_ratio * width, width, rng),
            heads,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BlockVars {
        BlockVars {
            ln_attn: self.ln_attn.bind(g, trainable),
            qkv: self.qkv.bind(g, trainable),
            out: self.out.bind(g, trainable),
            ln_mlp: self.ln_mlp.bind(g, trainable),
            fc1: self.fc1.bind(g, trainable),
            fc2: self.fc2.bind(g, trainable),
            heads: self.heads,
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![
            &self.ln_attn.gain,
            &self.ln_attn.bias,
            &self.qkv.weight,
            &self.qkv.bias,
            &self.out.weight,
            &self.out.bias,
            &self.ln_mlp.gain,
            &self.ln_mlp.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![
            &mut self.ln_attn.gain,
            &mut self.ln_attn.bias,
            &mut self.qkv.weight,
            &mut self.qkv.bias,
            &mut self.out.weight,
            &mut self.out.bias,
            &mut self.ln_mlp.gain,
            &mut self.ln_mlp.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

/// Graph handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln_attn: LayerNormVars,
    pub qkv: LinearVars,
    pub out: LinearVars,
    pub ln_mlp: LayerNormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub heads: usize,
}

impl BlockVars {
    /// One residual attention + MLP block. `mask` is added to the attention
    /// scores of every head (use `-inf` entries for causal masking).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<Var>) -> Var {
        let width = g.value(x).cols();
        let hd = width / self.heads;
        let scale = T::one() / T::of(hd as f64).sqrt();

        let h = self.ln_attn.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * hd, hd);
            let k = g.slice_cols(qkv, width + head * hd, hd);
            let v = g.slice_cols(qkv, 2 * width + head * hd, hd);
            let s = g.matmul_t(q, k);
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = self.out.forward(g, cat);
        let x = g.add(x, attn);

        let h = self.ln_mlp.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.quick_gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }
}

/// `len × len` additive mask that blocks attention to later positions.
pub fn causal_mask<T: Scalar>(len: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = T::neg_infinity();
        }
    }
    m
}
