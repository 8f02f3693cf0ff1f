//! Vision-conditional pooling.
//!
//! For one attribute, the expert feature attends over a class's description
//! embeddings: `query = W_q e`, `keys = W_k d_i`, weights are the softmax of
//! `query · key_i`, and the pooled feature is the weight-averaged description
//! embeddings. There is no value projection and no logit scaling, so the
//! output is always a convex combination of the description embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{argmax, dot, Matrix};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VcpError {
    #[error("empty attribute leaf set")]
    EmptyLeafSet,
    #[error("dimension mismatch: expert {expert}, descriptions {descriptions}, projections {projection}")]
    Dimension { expert: usize, descriptions: usize, projection: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Softmax attention pooling.
    #[default]
    Vcp,
    /// Uniform weights, training free.
    Average,
    /// One-hot on the highest attention score.
    AttnMax,
}

impl std::str::FromStr for PoolingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vcp" => Ok(Self::Vcp),
            "average" => Ok(Self::Average),
            "attn_max" => Ok(Self::AttnMax),
            other => Err(format!("unknown pooling mode `{other}`")),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Vcp => "vcp",
            Self::Average => "average",
            Self::AttnMax => "attn_max",
        })
    }
}

/// Query and key projections of one attribute's pooling layer, both `d × d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcpWeights<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
}

impl<T: Scalar> VcpWeights<T> {
    pub fn identity(d: usize) -> Self {
        Self { query: Matrix::identity(d), key: Matrix::identity(d) }
    }

    /// Identity plus `N(0, noise²)` entries.
    pub fn near_identity<R: Rng + ?Sized>(d: usize, noise: f64, rng: &mut R) -> Self {
        let mut query = Matrix::identity(d);
        query.add_assign(&Matrix::randn(d, d, noise, rng));
        let mut key = Matrix::identity(d);
        key.add_assign(&Matrix::randn(d, d, noise, rng));
        Self { query, key }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledAttributeFeature<T> {
    pub vector: Vec<T>,
    pub attention_weights: Vec<T>,
}

fn check_dims<T: Scalar>(expert: &[T], descriptions: &Matrix<T>, w: &VcpWeights<T>) -> Result<(), VcpError> {
    if descriptions.rows() == 0 {
        return Err(VcpError::EmptyLeafSet);
    }
    let d = expert.len();
    let ok = descriptions.cols() == d
        && w.query.shape() == (d, d)
        && w.key.shape() == (d, d);
    if ok {
        Ok(())
    } else {
        Err(VcpError::Dimension { expert: d, descriptions: descriptions.cols(), projection: w.query.rows() })
    }
}

/// Raw attention scores `(W_q e) · (W_k d_i)` for every description row.
pub fn attention_logits<T: Scalar>(
    expert: &[T],
    descriptions: &Matrix<T>,
    weights: &VcpWeights<T>,
) -> Result<Vec<T>, VcpError> {
    check_dims(expert, descriptions, weights)?;
    let q = Matrix::row_vector(expert).matmul_t(&weights.query);
    let keys = descriptions.matmul_t(&weights.key);
    Ok((0..keys.rows()).map(|i| dot(q.row(0), keys.row(i))).collect())
}

/// Sums in ascending order so the result does not depend on input order.
fn ordered_sum<T: Scalar>(mut xs: Vec<T>) -> T {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    xs.into_iter().sum()
}

/// Softmax whose normalizer is an [`ordered_sum`], so permuting the logits
/// permutes the weights exactly.
pub(crate) fn softmax_ordered<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z = ordered_sum(exps.clone());
    exps.into_iter().map(|e| e / z).collect()
}

/// `Σ_i weights_i · descriptions_i`, each coordinate summed in value order.
pub(crate) fn combine<T: Scalar>(descriptions: &Matrix<T>, weights: &[T]) -> Vec<T> {
    (0..descriptions.cols())
        .map(|j| ordered_sum(weights.iter().enumerate().map(|(i, &w)| w * descriptions[(i, j)]).collect()))
        .collect()
}

pub fn pool<T: Scalar>(
    expert: &[T],
    descriptions: &Matrix<T>,
    weights: &VcpWeights<T>,
) -> Result<PooledAttributeFeature<T>, VcpError> {
    pool_mode(expert, descriptions, weights, PoolingMode::Vcp)
}

pub fn pool_mode<T: Scalar>(
    expert: &[T],
    descriptions: &Matrix<T>,
    weights: &VcpWeights<T>,
    mode: PoolingMode,
) -> Result<PooledAttributeFeature<T>, VcpError> {
    let logits = attention_logits(expert, descriptions, weights)?;
    let n = logits.len();
    let attention_weights = match mode {
        PoolingMode::Vcp => softmax_ordered(&logits),
        PoolingMode::Average => vec![T::one() / T::of(n as f64); n],
        PoolingMode::AttnMax => {
            let mut w = vec![T::zero(); n];
            w[argmax(&logits)] = T::one();
            w
        }
    };
    let vector = combine(descriptions, &attention_weights);
    Ok(PooledAttributeFeature { vector, attention_weights })
}

/// Projections of one attribute's pooling layer as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VcpVars {
    pub query: Var,
    pub key: Var,
}

/// Differentiable pooling of every class at once.
///
/// `descriptions` stacks all classes' description rows; `segments[c]` is the
/// `(start, len)` row range of class `c`. Returns a `C × d` node of pooled
/// (unnormalized) features. Keys are computed once for all classes.
pub fn pool_classes_graph<T: Scalar>(
    g: &mut Graph<T>,
    expert: Var,
    descriptions: Var,
    segments: &[(usize, usize)],
    w: VcpVars,
    mode: PoolingMode,
) -> Var {
    let mut pooled = Vec::with_capacity(segments.len());
    if mode == PoolingMode::Average {
        for &(start, len) in segments {
            let rows = g.slice_rows(descriptions, start, len);
            pooled.push(g.mean_rows(rows));
        }
        return g.concat_rows(&pooled);
    }
    let q = g.matmul_t(expert, w.query);
    let keys = g.matmul_t(descriptions, w.key);
    let logits = g.matmul_t(q, keys);
    for &(start, len) in segments {
        let rows = g.slice_rows(descriptions, start, len);
        match mode {
            PoolingMode::Vcp => {
                let seg = g.slice_cols(logits, start, len);
                let att = g.softmax_rows(seg);
                pooled.push(g.matmul(att, rows));
            }
            PoolingMode::AttnMax => {
                let seg = &g.value(logits).row(0)[start..start + len];
                let best = argmax(seg);
                pooled.push(g.row(rows, best));
            }
            PoolingMode::Average => unreachable!(),
        }
    }
    g.concat_rows(&pooled)
}

/// Batched pooling: row `b` of the `c`-th returned `B × d` node is class
/// `c`'s pooled feature conditioned on row `b` of `features`. `keys` must be
/// `descriptions · W_kᵀ` (see [`keys_graph`]) and may be shared between
/// batches that use the same key projection.
pub fn pool_batch_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    descriptions: Var,
    keys: Var,
    segments: &[(usize, usize)],
    query: Var,
    mode: PoolingMode,
) -> Vec<Var> {
    let b = g.value(features).rows();
    if mode == PoolingMode::Average {
        let ones = g.constant(Matrix::filled(b, 1, T::one()));
        return segments
            .iter()
            .map(|&(start, len)| {
                let rows = g.slice_rows(descriptions, start, len);
                let mean = g.mean_rows(rows);
                g.matmul(ones, mean)
            })
            .collect();
    }
    let q = g.matmul_t(features, query);
    let logits = g.matmul_t(q, keys);
    segments
        .iter()
        .map(|&(start, len)| {
            let rows = g.slice_rows(descriptions, start, len);
            let att = match mode {
                PoolingMode::Vcp => {
                    let seg = g.slice_cols(logits, start, len);
                    g.softmax_rows(seg)
                }
                _ => {
                    let lv = g.value(logits);
                    let mut pick = Matrix::zeros(b, len);
                    for r in 0..b {
                        pick[(r, argmax(&lv.row(r)[start..start + len]))] = T::one();
                    }
                    g.constant(pick)
                }
            };
            g.matmul(att, rows)
        })
        .collect()
}

/// `descriptions · W_kᵀ`
pub fn keys_graph<T: Scalar>(g: &mut Graph<T>, descriptions: Var, key: Var) -> Var {
    g.matmul_t(descriptions, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn single_description_passes_through() {
        let d = mat(&[&[0.3, -0.2, 0.9]]);
        let out = pool(&[1.0, 2.0, 3.0], &d, &VcpWeights::identity(3)).unwrap();
        assert_eq!(out.attention_weights, vec![1.0]);
        assert_eq!(out.vector, d.row(0).to_vec());
    }

    #[test]
    fn orthogonal_descriptions_give_uniform_weights() {
        let d = mat(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.6, 0.8]]);
        let out = pool(&[1.0, 0.0, 0.0], &d, &VcpWeights::identity(3)).unwrap();
        for w in &out.attention_weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let mean: Vec<f64> = (0..3).map(|j| (d[(0, j)] + d[(1, j)] + d[(2, j)]) / 3.0).collect();
        for (a, b) in out.vector.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_logit_instance_matches_scalar_oracle() {
        // expert e = (1, 0); identity projections; rows chosen so logits are (2, 0).
        let d = mat(&[&[2.0, 1.0], &[0.0, -3.0]]);
        let out = pool(&[1.0, 0.0], &d, &VcpWeights::identity(2)).unwrap();
        let e2 = 2.0f64.exp();
        let w0 = e2 / (e2 + 1.0);
        let w1 = 1.0 / (e2 + 1.0);
        assert!((w0 - 0.8808).abs() < 1e-4 && (w1 - 0.1192).abs() < 1e-4);
        assert!((out.attention_weights[0] - w0).abs() < 1e-12);
        assert!((out.attention_weights[1] - w1).abs() < 1e-12);
        let expect = [w0 * 2.0 + w1 * 0.0, w0 * 1.0 + w1 * -3.0];
        for (a, b) in out.vector.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_modes() {
        let d = mat(&[&[0.1, 0.0], &[0.9, 0.0], &[0.3, 0.0]]);
        let w = VcpWeights::identity(2);
        let avg = pool_mode(&[1.0, 0.0], &d, &w, PoolingMode::Average).unwrap();
        assert_eq!(avg.attention_weights, vec![1.0 / 3.0; 3]);
        let max = pool_mode(&[1.0, 0.0], &d, &w, PoolingMode::AttnMax).unwrap();
        assert_eq!(max.attention_weights, vec![0.0, 1.0, 0.0]);
        assert_eq!(max.vector, vec![0.9, 0.0]);
        // ties break toward the lowest index
        let tied = mat(&[&[0.5, 1.0], &[0.5, -1.0]]);
        let max = pool_mode(&[1.0, 0.0], &tied, &w, PoolingMode::AttnMax).unwrap();
        assert_eq!(max.attention_weights, vec![1.0, 0.0]);
    }

    #[test]
    fn vcp_equals_average_when_keys_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Matrix::<f64>::randn(4, 5, 1.0, &mut rng);
        let mut w = VcpWeights::near_identity(5, 0.1, &mut rng);
        w.key = Matrix::zeros(5, 5);
        let e = Matrix::<f64>::randn(1, 5, 1.0, &mut rng);
        let a = pool_mode(e.row(0), &d, &w, PoolingMode::Vcp).unwrap();
        let b = pool_mode(e.row(0), &d, &w, PoolingMode::Average).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let w = VcpWeights::<f64>::identity(2);
        assert_eq!(pool(&[1.0, 0.0], &Matrix::zeros(0, 2), &w), Err(VcpError::EmptyLeafSet));
        assert!(matches!(pool(&[1.0, 0.0, 0.0], &Matrix::zeros(1, 3), &w), Err(VcpError::Dimension { .. })));
    }

    #[test]
    fn graph_pooling_matches_plain_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        let descs = Matrix::<f64>::randn(7, d, 1.0, &mut rng);
        let segments = [(0, 3), (3, 1), (4, 3)];
        let w = VcpWeights::near_identity(d, 0.2, &mut rng);
        let e = Matrix::<f64>::randn(1, d, 1.0, &mut rng);
        for mode in [PoolingMode::Vcp, PoolingMode::Average, PoolingMode::AttnMax] {
            let mut g = Graph::new();
            let ev = g.constant(e.clone());
            let dv = g.constant(descs.clone());
            let vars = VcpVars { query: g.constant(w.query.clone()), key: g.constant(w.key.clone()) };
            let out = pool_classes_graph(&mut g, ev, dv, &segments, vars, mode);
            for (c, &(s, l)) in segments.iter().enumerate() {
                let plain = pool_mode(e.row(0), &descs.slice_rows(s, l), &w, mode).unwrap();
                for (a, b) in g.value(out).row(c).iter().zip(&plain.vector) {
                    assert!((a - b).abs() < 1e-12, "{mode}");
                }
            }
        }
    }

    #[test]
    fn batch_pooling_matches_per_sample_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 5;
        let descs = Matrix::<f64>::randn(6, d, 1.0, &mut rng);
        let segments = [(0, 2), (2, 3), (5, 1)];
        let w = VcpWeights::near_identity(d, 0.3, &mut rng);
        let batch = Matrix::<f64>::randn(4, d, 1.0, &mut rng);
        for mode in [PoolingMode::Vcp, PoolingMode::Average, PoolingMode::AttnMax] {
            let mut g = Graph::new();
            let fv = g.constant(batch.clone());
            let dv = g.constant(descs.clone());
            let q = g.constant(w.query.clone());
            let k = g.constant(w.key.clone());
            let keys = keys_graph(&mut g, dv, k);
            let out = pool_batch_graph(&mut g, fv, dv, keys, &segments, q, mode);
            for (c, &(s, l)) in segments.iter().enumerate() {
                for b in 0..batch.rows() {
                    let plain = pool_mode(batch.row(b), &descs.slice_rows(s, l), &w, mode).unwrap();
                    for (x, y) in g.value(out[c]).row(b).iter().zip(&plain.vector) {
                        assert!((x - y).abs() < 1e-12, "{mode}");
                    }
                }
            }
        }
    }

    #[test]
    fn sharper_logits_lower_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = Matrix::<f64>::randn(5, 4, 1.0, &mut rng);
            let e = Matrix::<f64>::randn(1, 4, 1.0, &mut rng);
            let w = VcpWeights::identity(4);
            let entropy = |t: f64| {
                let p = pool(e.scale(t).data(), &d, &w).unwrap().attention_weights;
                -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>()
            };
            let (h1, h2, h3) = (entropy(1.0), entropy(2.0), entropy(4.0));
            assert!(h2 <= h1 + 1e-12 && h3 <= h2 + 1e-12);
        }
    }
}
