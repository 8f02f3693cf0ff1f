//! Classification and regularization objectives.
//!
//! Every loss exists twice: a plain function over matrices (used for
//! reporting, metrics and oracle comparisons) and a graph builder that the
//! training loop differentiates. The two are checked against each other and
//! against finite differences in the tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{cosine, log_sum_exp, softmax, Matrix};

/// Probability floor applied before taking logarithms in the KL term.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("missing contrastive term for attribute `{0}`")]
    MissingAttribute(String),
    #[error("description sets differ between frozen and trained embeddings")]
    MismatchedDescriptions,
    #[error("regularization coefficients must be nonnegative")]
    NegativeCoefficient,
    #[error("temperature must be positive")]
    Temperature,
}

/// Weights of the three regularizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegCoefficients {
    /// L1 on the vision CLS feature.
    pub mu1: f64,
    /// KL between teacher zero-shot and per-attribute predictions.
    pub mu2: f64,
    /// Symmetric contrastive loss on text features.
    pub mu3: f64,
    pub enabled: bool,
}

impl Default for RegCoefficients {
    fn default() -> Self {
        Self { mu1: 10.0, mu2: 2.5, mu3: 1.5, enabled: true }
    }
}

impl RegCoefficients {
    pub fn with_mu3(mu3: f64) -> Self {
        Self { mu3, ..Self::default() }
    }

    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.mu1 < 0.0 || self.mu2 < 0.0 || self.mu3 < 0.0 {
            return Err(ObjectiveError::NegativeCoefficient);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_class: f64,
    pub l_l1_v: f64,
    pub l_con_t: f64,
    pub l_kl_attr: f64,
    pub l_total: f64,
    pub per_attribute_class_losses: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_class, self.l_l1_v, self.l_con_t, self.l_kl_attr, self.l_total].iter().all(|x| x.is_finite())
    }
}

/// Mean cross-entropy over the batch with logits `cos(expert_i, pooled_i[c]) / τ`.
///
/// `pooled[i]` is the `C × d` matrix of class features conditioned on sample `i`.
pub fn contrastive_loss<T: Scalar>(
    expert_features: &Matrix<T>,
    pooled: &[Matrix<T>],
    labels: &[usize],
    tau: T,
) -> Result<T, ObjectiveError> {
    if tau <= T::zero() {
        return Err(ObjectiveError::Temperature);
    }
    if pooled.len() != expert_features.rows() || labels.len() != expert_features.rows() {
        return Err(ObjectiveError::Dimension("contrastive_loss"));
    }
    if !expert_features.is_finite() || pooled.iter().any(|p| !p.is_finite()) {
        return Err(ObjectiveError::NonFinite("contrastive_loss"));
    }
    let mut total = T::zero();
    for (i, (p, &y)) in pooled.iter().zip(labels).enumerate() {
        let logits: Vec<T> = (0..p.rows()).map(|c| cosine(expert_features.row(i), p.row(c)) / tau).collect();
        if y >= logits.len() {
            return Err(ObjectiveError::Dimension("contrastive_loss label"));
        }
        total += log_sum_exp(&logits) - logits[y];
    }
    Ok(total / T::of(labels.len() as f64))
}

/// Cross-entropy of precomputed logits rows against labels, averaged.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> T {
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        total += log_sum_exp(logits.row(i)) - logits[(i, y)];
    }
    total / T::of(labels.len() as f64)
}

/// Arithmetic mean of per-attribute contrastive losses over the attribute set.
pub fn class_loss<T: Scalar>(terms: &[(String, T)], attributes: &[String]) -> Result<T, ObjectiveError> {
    let mut sum = T::zero();
    for a in attributes {
        let (_, v) = terms
            .iter()
            .find(|(name, _)| name == a)
            .ok_or_else(|| ObjectiveError::MissingAttribute(a.clone()))?;
        sum += *v;
    }
    Ok(sum / T::of(attributes.len() as f64))
}

/// `‖trained − frozen‖₁`
pub fn l1_vision_reg<T: Scalar>(trained_cls: &[T], frozen_cls: &[T]) -> Result<T, ObjectiveError> {
    if trained_cls.len() != frozen_cls.len() {
        return Err(ObjectiveError::Dimension("l1_vision_reg"));
    }
    Ok(trained_cls.iter().zip(frozen_cls).map(|(&a, &b)| (a - b).abs()).sum())
}

/// Symmetric InfoNCE between trained and frozen text embeddings; row `i` of
/// both matrices must be the same description.
pub fn text_contrastive_reg<T: Scalar>(frozen: &Matrix<T>, trained: &Matrix<T>) -> Result<T, ObjectiveError> {
    if frozen.shape() != trained.shape() {
        return Err(ObjectiveError::MismatchedDescriptions);
    }
    let n = frozen.rows();
    let mut sim = Matrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            sim[(i, k)] = cosine(frozen.row(i), trained.row(k));
        }
    }
    let half = T::of(0.5);
    let mut total = T::zero();
    for d in 0..n {
        let row: Vec<T> = (0..n).map(|k| sim[(d, k)]).collect();
        let col: Vec<T> = (0..n).map(|k| sim[(k, d)]).collect();
        total += half * (log_sum_exp(&row) - sim[(d, d)]) + half * (log_sum_exp(&col) - sim[(d, d)]);
    }
    Ok(total)
}

/// Mean over attributes of `KL(teacher ‖ student_a)`; all inputs are logits
/// already divided by τ. Probabilities are floored at [`PROB_FLOOR`].
pub fn kl_attr_reg<T: Scalar>(teacher_logits: &[T], student_logits: &[Vec<T>]) -> Result<T, ObjectiveError> {
    if student_logits.iter().any(|s| s.len() != teacher_logits.len()) {
        return Err(ObjectiveError::Dimension("kl_attr_reg"));
    }
    let floor = T::of(PROB_FLOOR);
    let p: Vec<T> = softmax(teacher_logits).into_iter().map(|x| x.max(floor)).collect();
    let mut total = T::zero();
    for s in student_logits {
        let q: Vec<T> = softmax(s).into_iter().map(|x| x.max(floor)).collect();
        total += p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi.ln() - qi.ln())).sum::<T>();
    }
    Ok(total / T::of(student_logits.len() as f64))
}

/// KL between explicit distributions (used where the probabilities are given).
pub fn kl_from_probs<T: Scalar>(teacher: &[T], student: &[T]) -> T {
    let floor = T::of(PROB_FLOOR);
    teacher
        .iter()
        .zip(student)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(floor), q.max(floor));
            p * (p.ln() - q.ln())
        })
        .sum()
}

/// Regularization components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub l_class: f64,
    pub l_l1_v: f64,
    pub l_kl_attr: f64,
    pub l_con_t: f64,
}

pub fn total_loss(
    components: Components,
    per_attribute: Vec<(String, f64)>,
    coefficients: &RegCoefficients,
) -> Result<LossBreakdown, ObjectiveError> {
    coefficients.validate()?;
    let Components { l_class, l_l1_v, l_kl_attr, l_con_t } = components;
    let l_total = if coefficients.enabled {
        l_class + coefficients.mu1 * l_l1_v + coefficients.mu2 * l_kl_attr + coefficients.mu3 * l_con_t
    } else {
        l_class
    };
    Ok(LossBreakdown { l_class, l_l1_v, l_con_t, l_kl_attr, l_total, per_attribute_class_losses: per_attribute })
}

// ---------------------------------------------------------------------------
// Graph builders

/// Logits `cos(feature, rows) / τ` as a `1 × C` node. `feature` is `1 × d`
/// and must already be unit length; `rows` is normalized here.
pub fn cosine_logits_graph<T: Scalar>(g: &mut Graph<T>, feature: Var, rows: Var, tau: T) -> Var {
    let unit = g.normalize_rows(rows);
    let sims = g.matmul_t(feature, unit);
    g.scale(sims, T::one() / tau)
}

/// `B × C` logits `cos(features_b, pooled[c]_b) / τ` where `pooled[c]` is a
/// `B × d` node of per-sample class features. `features` must be unit rows.
pub fn batch_cosine_logits_graph<T: Scalar>(g: &mut Graph<T>, features: Var, pooled: &[Var], tau: T) -> Var {
    let d = g.value(features).cols();
    let ones = g.constant(Matrix::filled(d, 1, T::one()));
    let cols: Vec<Var> = pooled
        .iter()
        .map(|&p| {
            let unit = g.normalize_rows(p);
            let prod = g.mul(unit, features);
            g.matmul(prod, ones)
        })
        .collect();
    let sims = g.concat_cols(&cols);
    g.scale(sims, T::one() / tau)
}

/// Cross-entropy of a `B × C` logits node against labels, averaged.
pub fn cross_entropy_graph<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Var {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_per_row(logp, labels);
    let mean = g.mean(picked);
    g.scale(mean, -T::one())
}

pub fn l1_graph<T: Scalar>(g: &mut Graph<T>, trained: Var, frozen: Var) -> Var {
    let diff = g.sub(trained, frozen);
    let abs = g.abs(diff);
    g.sum(abs)
}

/// `KL(teacher ‖ softmax(student_logits))` for a `1 × C` student row; the
/// teacher distribution is a constant.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, teacher_probs: &[T], student_logits: Var) -> Var {
    let floor = T::of(PROB_FLOOR);
    let p: Vec<T> = teacher_probs.iter().map(|&x| x.max(floor)).collect();
    let entropy_term: T = p.iter().map(|&pi| pi * pi.ln()).sum();
    let q = g.softmax_rows(student_logits);
    let q = g.clamp_min(q, floor);
    let logq = g.ln(q);
    let pv = g.constant(Matrix::row_vector(&p));
    let cross = g.mul(pv, logq);
    let cross = g.sum(cross);
    // KL = Σ p log p − Σ p log q
    let neg = g.scale(cross, -T::one());
    let c = g.constant(Matrix::filled(1, 1, entropy_term));
    g.add(neg, c)
}

/// Mean over rows of `KL(teacher_b ‖ softmax(student_b))` for a `B × C`
/// student logits node and constant teacher distributions.
pub fn kl_batch_graph<T: Scalar>(g: &mut Graph<T>, teacher_probs: &Matrix<T>, student_logits: Var) -> Var {
    let floor = T::of(PROB_FLOOR);
    let p = teacher_probs.map(|x| x.max(floor));
    let b = T::of(p.rows() as f64);
    let entropy_term: T = p.data().iter().map(|&pi| pi * pi.ln()).sum::<T>() / b;
    let q = g.softmax_rows(student_logits);
    let q = g.clamp_min(q, floor);
    let logq = g.ln(q);
    let pv = g.constant(p);
    let cross = g.mul(pv, logq);
    let cross = g.sum(cross);
    let neg = g.scale(cross, -T::one() / b);
    let c = g.constant(Matrix::filled(1, 1, entropy_term));
    g.add(neg, c)
}

/// Symmetric InfoNCE between `frozen` (constant) and `trained` rows.
pub fn text_contrastive_graph<T: Scalar>(g: &mut Graph<T>, frozen: Var, trained: Var) -> Var {
    let f = g.normalize_rows(frozen);
    let t = g.normalize_rows(trained);
    let sim = g.matmul_t(f, t);
    let n = g.value(sim).rows();
    let idx: Vec<usize> = (0..n).collect();
    let row_lp = g.log_softmax_rows(sim);
    let row_terms = g.pick_per_row(row_lp, &idx);
    let sim_t = g.transpose(sim);
    let col_lp = g.log_softmax_rows(sim_t);
    let col_terms = g.pick_per_row(col_lp, &idx);
    let both = g.add(row_terms, col_terms);
    let s = g.sum(both);
    g.scale(s, -T::of(0.5))
}
