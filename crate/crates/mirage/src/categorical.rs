//! Uniform-mixing categorical diffusion over atom types.
//!
//! Types live in `{0, .., K-1}` where index 0 is the mirage
//! placeholder; for a model with `n_types` real species the total class
//! count is `k_total = n_types + 1`. The one-step transition is
//! `Q_t = (1 - q_t) I + q_t 11^T / K`, so both the one-step and the
//! cumulative kernels stay in the two-parameter family
//! `r I + (1 - r) 11^T / K` with retention `r = prod (1 - q_s)`.
//!
//! The reverse process is x0-parameterized: the network predicts clean
//! -type logits and the analytic posterior
//! `q(a_{t-1} | a_t, a_0) proportional to (Q_t^T onehot(a_t)) .* (Q_bar_{t-1} a0)`
//! converts them into a distribution over the previous step. The loss
//! is the plain ELBO: KL terms for t >= 2 against the hard-target
//! posterior and a cross-entropy reconstruction term at t = 1, summed
//! over every slot including mirage ones.

use crate::schedule::NoiseSchedule;
use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CategoricalError {
    #[error("probabilities sum to {sum}, expected 1 within 1e-12")]
    NotNormalized { sum: f64 },
    #[error("probability at index {index} is {value}, expected nonnegative and finite")]
    BadProbability { index: usize, value: f64 },
    #[error("distribution needs at least 2 classes, got {k}")]
    TooFewClasses { k: usize },
    #[error("type index {index} out of range for {k_total} classes")]
    IndexOutOfRange { index: usize, k_total: usize },
    #[error("posterior numerator vanished for every class")]
    Underflow,
}

/// A distribution over the `k_total` type classes; index 0 is mirage.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeDistribution {
    probs: Vec<f64>,
}

impl TypeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, CategoricalError> {
        if probs.len() < 2 {
            return Err(CategoricalError::TooFewClasses { k: probs.len() });
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(CategoricalError::BadProbability { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CategoricalError::NotNormalized { sum });
        }
        Ok(TypeDistribution { probs })
    }

    /// Point mass at `index`.
    pub fn hard(index: usize, k_total: usize) -> Result<Self, CategoricalError> {
        if index >= k_total {
            return Err(CategoricalError::IndexOutOfRange { index, k_total });
        }
        let mut probs = vec![0.0; k_total];
        probs[index] = 1.0;
        Ok(TypeDistribution { probs })
    }

    pub fn uniform(k_total: usize) -> Self {
        TypeDistribution {
            probs: vec![1.0 / k_total as f64; k_total],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k_total(&self) -> usize {
        self.probs.len()
    }

    /// Inverse-CDF draw; consumes one uniform variate.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

/// Forward marginal `Q_bar_t onehot(a0)` as an explicit distribution.
pub fn forward_marginal(
    a0: usize,
    retention: f64,
    k_total: usize,
) -> Result<TypeDistribution, CategoricalError> {
    if a0 >= k_total {
        return Err(CategoricalError::IndexOutOfRange { index: a0, k_total });
    }
    let off = (1.0 - retention) / k_total as f64;
    let mut probs = vec![off; k_total];
    probs[a0] += retention;
    Ok(TypeDistribution { probs })
}

/// Draws `a_t ~ Cat(Q_bar_t onehot(a0))`.
///
/// The marginal is a mixture of a point mass (with the cumulative
/// retention) and the uniform distribution, and is sampled that way.
pub fn type_forward_sample<R: Rng>(
    a0: usize,
    t: usize,
    schedule: &NoiseSchedule,
    k_total: usize,
    rng: &mut R,
) -> Result<usize, CategoricalError> {
    if a0 >= k_total {
        return Err(CategoricalError::IndexOutOfRange { index: a0, k_total });
    }
    let retention = schedule.q_alpha_bar(t);
    let u: f64 = rng.random();
    if u < retention {
        Ok(a0)
    } else {
        Ok(rng.random_range(0..k_total))
    }
}

/// Posterior `q(a_{t-1} | a_t, a0_probs)` from explicit rates:
/// `q_t` the step-t mixing rate and `retention_prev` the cumulative
/// retention through step t-1. Supports hard (one-hot) and soft
/// (model-predicted) `a0` distributions.
pub fn type_posterior_from_rates(
    a_t: usize,
    a0_probs: &TypeDistribution,
    q_t: f64,
    retention_prev: f64,
) -> Result<TypeDistribution, CategoricalError> {
    let k_total = a0_probs.k_total();
    if a_t >= k_total {
        return Err(CategoricalError::IndexOutOfRange { index: a_t, k_total });
    }
    let k = k_total as f64;
    let mut probs = Vec::with_capacity(k_total);
    let mut norm = 0.0;
    for (j, &p0) in a0_probs.probs().iter().enumerate() {
        // Q_t is symmetric, so Q_t^T onehot(a_t) is its a_t-th row.
        let lik = if j == a_t { 1.0 - q_t + q_t / k } else { q_t / k };
        let prior = retention_prev * p0 + (1.0 - retention_prev) / k;
        let w = lik * prior;
        probs.push(w);
        norm += w;
    }
    if norm <= 0.0 || !norm.is_finite() {
        return Err(CategoricalError::Underflow);
    }
    for p in &mut probs {
        *p /= norm;
    }
    Ok(TypeDistribution { probs })
}

/// Posterior `q(a_{t-1} | a_t, a0_probs)` for `t >= 2` on a schedule.
pub fn type_posterior(
    a_t: usize,
    a0_probs: &TypeDistribution,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<TypeDistribution, CategoricalError> {
    assert!(t >= 2, "posterior defined for t >= 2, got t = {t}");
    type_posterior_from_rates(a_t, a0_probs, schedule.q_beta(t), schedule.q_alpha_bar(t - 1))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `KL(p || q)` with the `0 log 0 = 0` convention.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.ln());
        }
    }
    acc
}

/// Plain (gradient-free) ELBO term for one step over a batch of slots.
///
/// For `t >= 2`, the sum over every slot of the KL between the
/// hard-target posterior and the posterior induced by the predicted
/// clean-type logits; at `t = 1`, the reconstruction cross-entropy
/// `-log softmax(logits)[a0]`. Mirage slots (`a0 = 0`) participate on
/// equal terms: keeping placeholders is part of what the model must
/// learn.
pub fn type_loss(
    pred_a0_logits: &Array2<f64>,
    a_t: &[usize],
    a0: &[usize],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64, CategoricalError> {
    let n = pred_a0_logits.nrows();
    let k_total = pred_a0_logits.ncols();
    assert_eq!(a_t.len(), n, "slot count mismatch");
    assert_eq!(a0.len(), n, "slot count mismatch");
    assert!(t >= 1, "loss defined for t >= 1");
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = pred_a0_logits.row(i).to_vec();
        if t == 1 {
            let probs = softmax(&row);
            total -= probs[a0[i]].ln();
        } else {
            let hard = TypeDistribution::hard(a0[i], k_total)?;
            let q_post = type_posterior(a_t[i], &hard, t, schedule)?;
            let soft = TypeDistribution::new(softmax(&row))?;
            let p_post = type_posterior(a_t[i], &soft, t, schedule)?;
            total += kl_categorical(q_post.probs(), p_post.probs());
        }
    }
    Ok(total)
}

/// One reverse step for a single slot: sample the posterior with the
/// soft `a0` induced by the predicted logits, or the softmax itself at
/// `t = 1`.
pub fn type_backward_step<R: Rng>(
    a_t: usize,
    pred_a0_logits: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<usize, CategoricalError> {
    assert!(t >= 1, "backward step defined for t >= 1");
    let soft = TypeDistribution::new(softmax(pred_a0_logits))?;
    if t == 1 {
        return Ok(soft.sample(rng));
    }
    let post = type_posterior(a_t, &soft, t, schedule)?;
    Ok(post.sample(rng))
}
