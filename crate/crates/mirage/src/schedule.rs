//! Per-step noise tables for the three diffusion components.
//!
//! One [`NoiseSchedule`] carries everything the processes need, indexed by
//! step `t` in `1..=T`:
//!
//! * `beta[t]`, `alpha_bar[t]`: lattice DDPM rates, with the standard
//!   convention `q(L_t | L_{t-1}) = N(sqrt(1-beta_t) L_{t-1}, beta_t I)`
//!   and `alpha_bar_t = prod_{s<=t} (1 - beta_s)`,
//! * `sigma[t]`: wrapped-normal coordinate noise scale, strictly
//!   increasing, terminal value near-uniform on the torus,
//! * `q_beta[t]`: type-mixing rate behind `Q_t = (1-q) I + q 11^T / K`.
//!
//! Default shapes: cosine `alpha_bar` (offset 0.008, beta clipped at
//! 0.999 and `alpha_bar` rebuilt from the clipped betas), geometric
//! `sigma`, linear `q_beta` ending at exactly 1 so the terminal type
//! marginal is exactly uniform.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 steps, got {t_max}")]
    TooFewSteps { t_max: usize },
    #[error("schedule parameter {param} = {value} is outside its valid range")]
    ConfigOutOfRange { param: &'static str, value: f64 },
    #[error("schedule table rejected: {reason}")]
    InvalidTable { reason: String },
    #[error(
        "terminal coordinate noise sigma_T = {sigma_t} is not near-uniform on the torus \
         (total variation to uniform {tv:.3e}, require < 1e-3)"
    )]
    NotNearUniform { sigma_t: f64, tv: f64 },
    #[error("type mixing rate {value} is outside [0, 1]")]
    MixingRateOutOfRange { value: f64 },
    #[error("type count {k} must be at least 2")]
    TooFewTypes { k: usize },
}

/// Shape parameters for [`make_schedule`].
///
/// `sigma_max` defaults to 0.6: the terminal wrapped normal must sit
/// within total variation 1e-3 of uniform, which needs `sigma_T` above
/// roughly 0.58 (at 0.5 the distance is still about 4.6e-3).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Cosine offset for the lattice `alpha_bar` shape.
    pub cosine_offset: f64,
    /// Upper clip for per-step `beta`.
    pub beta_clip: f64,
    /// Coordinate noise scale at the first step anchor.
    pub sigma_min: f64,
    /// Coordinate noise scale at the last step.
    pub sigma_max: f64,
    /// Type mixing rate at the first step; the last step always mixes
    /// fully (rate 1).
    pub q_beta_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cosine_offset: 0.008,
            beta_clip: 0.999,
            sigma_min: 0.005,
            sigma_max: 0.6,
            q_beta_min: 1e-3,
        }
    }
}

/// Immutable noise tables for steps `1..=t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    q_beta: Vec<f64>,
    // Cached cumulative type retention prod_{s<=t} (1 - q_beta_s).
    q_alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} outside 1..={}", self.t_max);
        self.beta[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention, matching an unnoised state.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.t_max, "step {t} outside 0..={}", self.t_max);
        self.alpha_bar[t - 1]
    }

    /// `sigma(0)` is 0 by convention: the step-0 state carries no noise.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        assert!(t <= self.t_max, "step {t} outside 0..={}", self.t_max);
        self.sigma[t - 1]
    }

    pub fn q_beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} outside 1..={}", self.t_max);
        self.q_beta[t - 1]
    }

    /// Cumulative type retention; `q_alpha_bar(0)` is 1.
    pub fn q_alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        assert!(t <= self.t_max, "step {t} outside 0..={}", self.t_max);
        self.q_alpha_bar[t - 1]
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma_table(&self) -> &[f64] {
        &self.sigma
    }

    pub fn q_beta_table(&self) -> &[f64] {
        &self.q_beta
    }

    /// Rebuilds a schedule from raw per-step tables, enforcing every
    /// table invariant. `alpha_bar` and the cumulative type retention
    /// are derived here so they can never disagree with `beta` and
    /// `q_beta`.
    pub fn from_tables(
        beta: Vec<f64>,
        sigma: Vec<f64>,
        q_beta: Vec<f64>,
    ) -> Result<Self, ScheduleError> {
        let t_max = beta.len();
        if t_max < 2 {
            return Err(ScheduleError::TooFewSteps { t_max });
        }
        if sigma.len() != t_max || q_beta.len() != t_max {
            return Err(ScheduleError::InvalidTable {
                reason: format!(
                    "table lengths differ: beta {}, sigma {}, q_beta {}",
                    t_max,
                    sigma.len(),
                    q_beta.len()
                ),
            });
        }
        for (i, &b) in beta.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(ScheduleError::InvalidTable {
                    reason: format!("beta[{}] = {b} outside (0, 1)", i + 1),
                });
            }
        }
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        for (i, w) in alpha_bar.windows(2).enumerate() {
            if w[1] >= w[0] {
                return Err(ScheduleError::InvalidTable {
                    reason: format!("alpha_bar not strictly decreasing at step {}", i + 2),
                });
            }
        }
        if alpha_bar[t_max - 1] <= 0.0 {
            return Err(ScheduleError::InvalidTable {
                reason: "alpha_bar underflowed to zero".into(),
            });
        }
        for (i, &s) in sigma.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(ScheduleError::InvalidTable {
                    reason: format!("sigma[{}] = {s} must be a positive real", i + 1),
                });
            }
            if i > 0 && s <= sigma[i - 1] {
                return Err(ScheduleError::InvalidTable {
                    reason: format!("sigma not strictly increasing at step {}", i + 1),
                });
            }
        }
        let sigma_t = sigma[t_max - 1];
        let tv = wrapped_normal_tv_to_uniform(sigma_t);
        if tv >= 1e-3 {
            return Err(ScheduleError::NotNearUniform { sigma_t, tv });
        }
        let mut q_alpha_bar = Vec::with_capacity(t_max);
        let mut qprod = 1.0;
        for (i, &q) in q_beta.iter().enumerate() {
            if !q.is_finite() || q <= 0.0 || q > 1.0 {
                return Err(ScheduleError::InvalidTable {
                    reason: format!("q_beta[{}] = {q} outside (0, 1]", i + 1),
                });
            }
            qprod *= 1.0 - q;
            q_alpha_bar.push(qprod);
        }
        // Terminal type marginal must be near-uniform: every entry of
        // the cumulative mixing matrix differs from uniform by at most
        // the terminal retention.
        if q_alpha_bar[t_max - 1] >= 1e-3 {
            return Err(ScheduleError::InvalidTable {
                reason: format!(
                    "terminal type retention {} leaves the type marginal far from uniform",
                    q_alpha_bar[t_max - 1]
                ),
            });
        }
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha_bar,
            sigma,
            q_beta,
            q_alpha_bar,
        })
    }
}

/// Builds the default-shape schedule for `t_max` steps.
pub fn make_schedule(t_max: usize, config: &ScheduleConfig) -> Result<NoiseSchedule, ScheduleError> {
    if t_max < 2 {
        return Err(ScheduleError::TooFewSteps { t_max });
    }
    let range_err = |param, value| Err(ScheduleError::ConfigOutOfRange { param, value });
    if !(config.cosine_offset > 0.0 && config.cosine_offset <= 0.1) {
        return range_err("cosine_offset", config.cosine_offset);
    }
    if !(config.beta_clip > 0.5 && config.beta_clip < 1.0) {
        return range_err("beta_clip", config.beta_clip);
    }
    if !(config.sigma_min > 0.0 && config.sigma_min < config.sigma_max) {
        return range_err("sigma_min", config.sigma_min);
    }
    if !(config.sigma_max <= 2.0) {
        return range_err("sigma_max", config.sigma_max);
    }
    if !(config.q_beta_min > 0.0 && config.q_beta_min <= 0.1) {
        return range_err("q_beta_min", config.q_beta_min);
    }

    let mut beta = Vec::with_capacity(t_max);
    let mut prev = 1.0;
    for t in 1..=t_max {
        let ab = cosine_alpha_bar(t, t_max, config.cosine_offset);
        let b = (1.0 - ab / prev).min(config.beta_clip);
        prev = ab;
        beta.push(b);
    }
    let sigma = (1..=t_max)
        .map(|t| geometric_sigma(config.sigma_min, config.sigma_max, t, t_max))
        .collect();
    // Linear ramp from q_beta_min to exactly 1: the final step mixes
    // fully, so the terminal type marginal is exactly uniform.
    let q_beta = (1..=t_max)
        .map(|t| {
            let frac = (t - 1) as f64 / (t_max - 1) as f64;
            config.q_beta_min + (1.0 - config.q_beta_min) * frac
        })
        .collect();
    NoiseSchedule::from_tables(beta, sigma, q_beta)
}

/// Cosine cumulative signal shape `f(t) / f(0)` with
/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
fn cosine_alpha_bar(t: usize, t_max: usize, offset: f64) -> f64 {
    let f = |u: f64| {
        let inner = ((u / t_max as f64) + offset) / (1.0 + offset) * PI / 2.0;
        inner.cos().powi(2)
    };
    f(t as f64) / f(0.0)
}

/// Geometric interpolation `sigma_min * (sigma_max / sigma_min)^(t/T)`.
pub fn geometric_sigma(sigma_min: f64, sigma_max: f64, t: usize, t_max: usize) -> f64 {
    sigma_min * (sigma_max / sigma_min).powf(t as f64 / t_max as f64)
}

/// One-step type transition `Q_t = (1 - q) I + q 11^T / K`.
///
/// Column-stochastic and symmetric; the uniform vector is a fixed point
/// for every mixing rate.
pub fn d3pm_transition(q_beta_t: f64, k: usize) -> Result<Array2<f64>, ScheduleError> {
    if !(0.0..=1.0).contains(&q_beta_t) || !q_beta_t.is_finite() {
        return Err(ScheduleError::MixingRateOutOfRange { value: q_beta_t });
    }
    if k < 2 {
        return Err(ScheduleError::TooFewTypes { k });
    }
    let off = q_beta_t / k as f64;
    let diag = 1.0 - q_beta_t + off;
    let mut m = Array2::from_elem((k, k), off);
    for i in 0..k {
        m[(i, i)] = diag;
    }
    Ok(m)
}

/// Cumulative type transition `Q_bar_t = r I + (1 - r) 11^T / K` where
/// `r = prod_{s<=t} (1 - q_beta_s)` is the retention.
pub fn d3pm_cumulative(retention: f64, k: usize) -> Result<Array2<f64>, ScheduleError> {
    if !(0.0..=1.0).contains(&retention) || !retention.is_finite() {
        return Err(ScheduleError::MixingRateOutOfRange { value: retention });
    }
    if k < 2 {
        return Err(ScheduleError::TooFewTypes { k });
    }
    let off = (1.0 - retention) / k as f64;
    let mut m = Array2::from_elem((k, k), off);
    for i in 0..k {
        m[(i, i)] = retention + off;
    }
    Ok(m)
}

/// Total variation distance between a wrapped normal of scale `sigma`
/// (any mean) and the uniform density on the unit torus, by trapezoid
/// quadrature on a fine grid.
pub fn wrapped_normal_tv_to_uniform(sigma: f64) -> f64 {
    let n = 4001;
    let h = 1.0 / (n - 1) as f64;
    let density = |x: f64| {
        let mut s = 0.0;
        for k in -8..=8 {
            let d = x + k as f64;
            s += (-d * d / (2.0 * sigma * sigma)).exp();
        }
        s / (sigma * (2.0 * PI).sqrt())
    };
    let mut total = 0.0;
    let mut prev = (density(0.0) - 1.0).abs();
    for i in 1..n {
        let cur = (density(i as f64 * h) - 1.0).abs();
        total += 0.5 * (prev + cur) * h;
        prev = cur;
    }
    0.5 * total
}
