//! Wrapped-normal diffusion on fractional coordinates.
//!
//! Coordinates live on the unit 3-torus. The forward process adds
//! Gaussian noise of scale `sigma_t` and wraps; the training target is
//! the conditional score `d/dx log q(F_t | F_0)`, a truncated series
//! over periodic images:
//!
//! `score(d) = sum_k w_k * (-(d + k) / sigma^2)`,
//! `w_k proportional to exp(-(d + k)^2 / (2 sigma^2))`,
//!
//! with `d` the signed wrapped difference in `(-0.5, 0.5]` and
//! `k = -K..K`. Terms are accumulated as `(+k, -k)` pairs so the score
//! is exactly odd in `d` and exactly zero at `d = 0`.
//!
//! The reverse kernel is the ancestral predictor
//! `wrap(F_t + (sigma_t^2 - sigma_{t-1}^2) * score + c_t * eps)` with
//! `c_t^2 = sigma_{t-1}^2 (sigma_t^2 - sigma_{t-1}^2) / sigma_t^2`;
//! `sigma_0 = 0` makes the final step deterministic. Adding a common
//! shift to every coordinate commutes with the kernel, which is the
//! torus analogue of translation invariance.

use crate::crystal::{signed_wrap, wrap, wrap3};
use crate::schedule::NoiseSchedule;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Normalization applied to the per-step coordinate loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// No normalization; raw squared score error.
    Unit,
    /// Divide by a Monte-Carlo estimate of `E[score^2]` at each
    /// `sigma_t`, flattening the loss scale across steps.
    #[default]
    InverseExpectedSquare,
}

/// Numerical parameters of the truncated wrapped-normal series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WrappedScoreConfig {
    /// Periodic images per side; `2k+1` series terms in total.
    pub truncation_k: usize,
    pub loss_norm: LossNorm,
}

impl Default for WrappedScoreConfig {
    fn default() -> Self {
        WrappedScoreConfig {
            truncation_k: 5,
            loss_norm: LossNorm::InverseExpectedSquare,
        }
    }
}

/// Draws from the forward marginal: `wrap(F0 + sigma_t * eps)`.
pub fn wn_forward_sample<R: Rng>(f0: &[[f64; 3]], sigma_t: f64, rng: &mut R) -> Vec<[f64; 3]> {
    assert!(sigma_t >= 0.0, "noise scale must be nonnegative");
    f0.iter()
        .map(|row| {
            let mut out = *row;
            for v in &mut out {
                let eps: f64 = StandardNormal.sample(rng);
                *v = wrap(*v + sigma_t * eps);
            }
            out
        })
        .collect()
}

/// Truncated conditional score for one signed wrapped difference.
///
/// `d` may be any real; only its value mod 1 matters. Weights are
/// stabilized by factoring out the largest exponent, so tiny `sigma`
/// cannot underflow the normalizer.
pub fn wrapped_score_scalar(d: f64, sigma: f64, truncation_k: usize) -> f64 {
    assert!(sigma > 0.0, "score requires sigma > 0");
    assert!(truncation_k >= 1, "need at least one image per side");
    assert!(
        sigma < 0.25 || truncation_k >= 3,
        "truncation_k >= 3 required once sigma reaches 0.25"
    );
    let d = signed_wrap(d);
    let inv_var = 1.0 / (sigma * sigma);
    let log_w = |x: f64| -x * x * 0.5 * inv_var;
    // exp of the centered exponent; k = 0 dominates for |d| <= 0.5.
    let peak = log_w(d);
    let mut num = -d * inv_var;
    let mut den = 1.0f64;
    for k in 1..=truncation_k {
        let kf = k as f64;
        let wp = (log_w(d + kf) - peak).exp();
        let wm = (log_w(d - kf) - peak).exp();
        num += wp * (-(d + kf) * inv_var) + wm * (-(d - kf) * inv_var);
        den += wp + wm;
    }
    num / den
}

/// Log of the truncated wrapped-normal density at signed difference
/// `d`, via log-sum-exp. Smooth in `d` across the whole real line, so
/// finite differences of it are a valid oracle for the score.
pub fn wrapped_log_density(d: f64, sigma: f64, truncation_k: usize) -> f64 {
    assert!(sigma > 0.0);
    let inv_var = 1.0 / (sigma * sigma);
    let mut exponents = Vec::with_capacity(2 * truncation_k + 1);
    for k in -(truncation_k as i64)..=(truncation_k as i64) {
        let x = d + k as f64;
        exponents.push(-x * x * 0.5 * inv_var);
    }
    let m = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|e| (e - m).exp()).sum();
    m + sum.ln() - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Per-entry conditional score of `F_t` given `F_0`.
pub fn wn_conditional_score(
    f_t: &[[f64; 3]],
    f0: &[[f64; 3]],
    sigma_t: f64,
    cfg: &WrappedScoreConfig,
) -> Vec<[f64; 3]> {
    assert_eq!(f_t.len(), f0.len(), "coordinate row counts differ");
    f_t.iter()
        .zip(f0)
        .map(|(a, b)| {
            let mut out = [0.0; 3];
            for axis in 0..3 {
                let d = signed_wrap(a[axis] - b[axis]);
                out[axis] = wrapped_score_scalar(d, sigma_t, cfg.truncation_k);
            }
            out
        })
        .collect()
}

/// Mirage-masked score-matching loss:
/// `lambda_t * sum_{i in mask} ||target_i - pred_i||^2`.
///
/// Rows outside the mask never enter the sum, so mirage predictions
/// cannot influence the value in any bit.
pub fn masked_coord_loss(
    pred_score: &[[f64; 3]],
    target_score: &[[f64; 3]],
    mask: &[usize],
    lambda_t: f64,
) -> f64 {
    assert_eq!(pred_score.len(), target_score.len());
    let mut acc = 0.0;
    for &i in mask {
        let p = pred_score[i];
        let t = target_score[i];
        for axis in 0..3 {
            let d = t[axis] - p[axis];
            acc += d * d;
        }
    }
    lambda_t * acc
}

/// Deterministic coefficients of the reverse kernel at one step:
/// the score multiplier `b_t` and the noise scale `c_t`.
pub fn coord_backward_coeffs(sigma_t: f64, sigma_prev: f64) -> (f64, f64) {
    let var_gap = sigma_t * sigma_t - sigma_prev * sigma_prev;
    let b = var_gap;
    let c = (sigma_prev * sigma_prev * var_gap / (sigma_t * sigma_t)).sqrt();
    (b, c)
}

/// One reverse step over all rows. `t = 1` is deterministic because
/// `sigma_0 = 0`.
pub fn coord_backward_step<R: Rng>(
    f_t: &[[f64; 3]],
    pred_score: &[[f64; 3]],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Vec<[f64; 3]> {
    let eps: Vec<[f64; 3]> = f_t
        .iter()
        .map(|_| {
            [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ]
        })
        .collect();
    coord_backward_with_noise(f_t, pred_score, t, schedule, &eps)
}

/// Reverse step with caller-supplied Gaussian draws, one triple per row.
pub fn coord_backward_with_noise(
    f_t: &[[f64; 3]],
    pred_score: &[[f64; 3]],
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[[f64; 3]],
) -> Vec<[f64; 3]> {
    assert_eq!(f_t.len(), pred_score.len());
    assert_eq!(f_t.len(), eps.len());
    let (b, c) = coord_backward_coeffs(schedule.sigma(t), schedule.sigma(t - 1));
    f_t.iter()
        .zip(pred_score)
        .zip(eps)
        .map(|((f, s), e)| {
            let mut out = [0.0; 3];
            for axis in 0..3 {
                out[axis] = f[axis] + b * s[axis] + c * e[axis];
            }
            wrap3(out)
        })
        .collect()
}

/// Per-step loss weight `lambda_t` under the configured normalization.
///
/// The inverse-expected-square estimate draws wrapped differences from
/// the forward marginal at `sigma_t` and averages the squared score.
/// The draw uses a fixed internal seed, so the weight is a pure
/// function of `(sigma_t, cfg)` and identical across runs.
pub fn coord_loss_weight(sigma_t: f64, cfg: &WrappedScoreConfig) -> f64 {
    match cfg.loss_norm {
        LossNorm::Unit => 1.0,
        LossNorm::InverseExpectedSquare => {
            let n = 4096;
            let mut rng = ChaCha8Rng::seed_from_u64(0x5c0e_3a11);
            let mut acc = 0.0;
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let d = signed_wrap(sigma_t * z);
                let s = wrapped_score_scalar(d, sigma_t, cfg.truncation_k);
                acc += s * s;
            }
            let expected_sq = acc / n as f64;
            1.0 / expected_sq
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, ScheduleConfig};

    fn rows(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    }

    #[test]
    fn zero_noise_returns_input() {
        let f0 = rows(6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(wn_forward_sample(&f0, 0.0, &mut rng), f0);
    }

    #[test]
    fn forward_output_stays_in_cell() {
        let f0 = rows(50, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for sigma in [0.01, 0.3, 2.0, 25.0] {
            for row in wn_forward_sample(&f0, sigma, &mut rng) {
                for v in row {
                    assert!((0.0..1.0).contains(&v), "value {v} escaped the cell");
                }
            }
        }
    }

    #[test]
    fn large_sigma_marginal_is_uniform_by_ks() {
        // One-sample Kolmogorov-Smirnov distance against U[0,1).
        let f0 = vec![[0.37, 0.91, 0.05]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n / 3 + 1 {
            for v in &wn_forward_sample(&f0, 10.0, &mut rng)[0] {
                xs.push(*v);
            }
        }
        xs.truncate(n);
        xs.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((x - lo).abs()).max((hi - x).abs());
        }
        assert!(d < 0.01, "KS distance {d}");
    }

    #[test]
    fn score_is_exactly_odd_and_zero_at_origin() {
        assert_eq!(wrapped_score_scalar(0.0, 0.1, 5), 0.0);
        for d in [0.01, 0.1, 0.25, 0.4, 0.49] {
            for sigma in [0.05, 0.2, 0.7] {
                let plus = wrapped_score_scalar(d, sigma, 5);
                let minus = wrapped_score_scalar(-d, sigma, 5);
                assert_eq!(plus, -minus, "d={d} sigma={sigma}");
            }
        }
    }

    #[test]
    fn narrow_truncation_matches_wide_oracle() {
        // sigma = 0.05, d = 0.1: the unwrapped term dominates and the
        // score is -d/sigma^2 = -40 to near machine precision.
        let narrow = wrapped_score_scalar(0.1, 0.05, 5);
        let wide = wrapped_score_scalar(0.1, 0.05, 100);
        let rel = (narrow - wide).abs() / wide.abs();
        assert!(rel < 1e-10, "relative truncation error {rel}");
        assert!((wide - (-40.0)).abs() < 1e-9, "wide-series value {wide}");
    }

    #[test]
    fn score_matches_log_density_gradient() {
        // Central finite differences of the K = 100 log density.
        let h = 1e-6;
        for &sigma in &[0.01, 0.03, 0.05, 0.1, 0.25, 0.5, 1.0] {
            for i in 0..19 {
                let d = -0.45 + 0.05 * i as f64;
                let fd = (wrapped_log_density(d + h, sigma, 100)
                    - wrapped_log_density(d - h, sigma, 100))
                    / (2.0 * h);
                let s = wrapped_score_scalar(d, sigma, 5);
                let err = (s - fd).abs();
                assert!(err < 1e-5, "sigma={sigma} d={d}: |score-fd| = {err:.3e}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "truncation_k >= 3")]
    fn wide_sigma_requires_enough_images() {
        wrapped_score_scalar(0.2, 0.3, 2);
    }

    #[test]
    #[should_panic(expected = "sigma > 0")]
    fn nonpositive_sigma_is_rejected() {
        wrapped_score_scalar(0.1, 0.0, 5);
    }

    #[test]
    fn masked_loss_ignores_unmasked_rows() {
        let target = rows(5, 7);
        let pred = rows(5, 8);
        let mask = vec![0, 2, 4];
        let base = masked_coord_loss(&pred, &target, &mask, 1.3);

        // Arbitrary garbage on rows 1 and 3 cannot move the loss.
        let mut vandalized = pred.clone();
        vandalized[1] = [1e9, -3.0, 7.7];
        vandalized[3] = [f64::MAX, 0.0, -1e200];
        assert_eq!(masked_coord_loss(&vandalized, &target, &mask, 1.3), base);

        assert_eq!(masked_coord_loss(&pred, &target, &[], 1.3), 0.0);

        // Full mask is the plain unmasked sum.
        let full: Vec<usize> = (0..5).collect();
        let mut manual = 0.0;
        for i in 0..5 {
            for a in 0..3 {
                manual += (target[i][a] - pred[i][a]).powi(2);
            }
        }
        assert!((masked_coord_loss(&pred, &target, &full, 1.0) - manual).abs() < 1e-15);
    }

    #[test]
    fn backward_coeffs_degenerate_cases() {
        let (b, c) = coord_backward_coeffs(0.4, 0.4);
        assert_eq!(b, 0.0);
        assert_eq!(c, 0.0);
        // sigma_prev = 0 (the t = 1 step): no noise is injected.
        let (_, c) = coord_backward_coeffs(0.4, 0.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn backward_with_zero_score_and_zero_noise_is_identity() {
        let s = make_schedule(100, &ScheduleConfig::default()).unwrap();
        let f_t = rows(4, 9);
        let zeros = vec![[0.0; 3]; 4];
        let out = coord_backward_with_noise(&f_t, &zeros, 1, &s, &zeros);
        assert_eq!(out, f_t);
    }

    #[test]
    fn backward_outputs_stay_in_cell() {
        let s = make_schedule(100, &ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f_t = rows(8, 11);
        let cfg = WrappedScoreConfig::default();
        for t in (1..=100).rev() {
            let score = wn_conditional_score(&f_t, &rows(8, 12), s.sigma(t), &cfg);
            for row in coord_backward_step(&f_t, &score, t, &s, &mut rng) {
                for v in row {
                    assert!((0.0..1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn backward_commutes_with_common_shifts() {
        let s = make_schedule(100, &ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f_t = rows(6, 14);
        let f0 = rows(6, 15);
        let cfg = WrappedScoreConfig::default();
        for trial in 0..100 {
            let t = 2 + trial % 99;
            let tau: f64 = rng.random::<f64>();
            let eps = rows(6, 1000 + trial as u64);
            let shifted: Vec<[f64; 3]> = f_t
                .iter()
                .map(|r| wrap3([r[0] + tau, r[1] + tau, r[2] + tau]))
                .collect();
            let f0_shifted: Vec<[f64; 3]> = f0
                .iter()
                .map(|r| wrap3([r[0] + tau, r[1] + tau, r[2] + tau]))
                .collect();
            // The conditional score is shift-invariant, so recomputing
            // it on shifted arguments feeds the kernel the same field.
            let score = wn_conditional_score(&f_t, &f0, s.sigma(t), &cfg);
            let score_shifted = wn_conditional_score(&shifted, &f0_shifted, s.sigma(t), &cfg);
            let base = coord_backward_with_noise(&f_t, &score, t, &s, &eps);
            let moved = coord_backward_with_noise(&shifted, &score_shifted, t, &s, &eps);
            for (b, m) in base.iter().zip(&moved) {
                for axis in 0..3 {
                    let err = signed_wrap(m[axis] - (b[axis] + tau)).abs();
                    assert!(err < 1e-10, "t={t} residual {err}");
                }
            }
        }
    }

    #[test]
    fn small_sigma_loss_weight_matches_fisher_information() {
        // Far from the wrap, E[score^2] = 1/sigma^2 exactly, so the
        // weight approaches sigma^2.
        let cfg = WrappedScoreConfig::default();
        let w = coord_loss_weight(0.01, &cfg);
        let rel = (w - 1e-4).abs() / 1e-4;
        assert!(rel < 0.1, "weight {w}, relative error {rel}");
        // Unit norm is exactly 1.
        let unit = WrappedScoreConfig {
            loss_norm: LossNorm::Unit,
            ..cfg
        };
        assert_eq!(coord_loss_weight(0.3, &unit), 1.0);
    }

    #[test]
    fn loss_weight_is_deterministic() {
        let cfg = WrappedScoreConfig::default();
        assert_eq!(coord_loss_weight(0.2, &cfg), coord_loss_weight(0.2, &cfg));
    }
}
