//! Gaussian DDPM over the 3x3 lattice matrix.
//!
//! Forward kernel (standard convention):
//! `q(L_t | L_{t-1}) = N(sqrt(1 - beta_t) L_{t-1}, beta_t I)` entrywise,
//! with closed-form marginal
//! `q(L_t | L_0) = N(sqrt(alpha_bar_t) L_0, (1 - alpha_bar_t) I)`.
//!
//! The learned reverse kernel predicts the posterior mean directly and
//! shares the forward posterior variance. All steps are entrywise, so
//! every function here is linear in its matrix arguments; left
//! multiplication by an orthogonal Q commutes with each step when the
//! same noise draw is transformed alongside.

use crate::linalg::{gaussian_mat3, Mat3};
use crate::schedule::NoiseSchedule;
use rand::Rng;

/// Parameters of the Gaussian posterior `q(L_{t-1} | L_t, L_0)`.
///
/// The variance is isotropic and depends only on the step, never on the
/// data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticePosterior {
    pub mean: Mat3,
    pub variance: f64,
}

/// Draws from the forward marginal `q(L_t | L_0)`.
///
/// Panics when `t` is outside `1..=T`.
pub fn lattice_forward_sample<R: Rng>(
    l0: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Mat3 {
    let eps = gaussian_mat3(rng);
    lattice_forward_with_noise(l0, t, schedule, &eps)
}

/// Forward marginal with the caller supplying the Gaussian draw.
pub fn lattice_forward_with_noise(
    l0: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Mat3,
) -> Mat3 {
    let ab = schedule.alpha_bar(t);
    assert!(t >= 1, "forward sample needs t >= 1");
    l0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
}

/// One-step forward kernel `q(L_t | L_{t-1})`, used to check that the
/// tabulated marginal really is the t-fold composition.
pub fn lattice_one_step_forward<R: Rng>(
    l_prev: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Mat3 {
    let b = schedule.beta(t);
    let eps = gaussian_mat3(rng);
    l_prev.scale((1.0 - b).sqrt()).add(&eps.scale(b.sqrt()))
}

/// Closed-form posterior `q(L_{t-1} | L_t, L_0)` for `t >= 2`.
///
/// Mean is the convex-style combination
/// `sqrt(alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t) * L_0
///  + sqrt(alpha_t) (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * L_t`
/// and variance `beta_tilde_t = (1 - alpha_bar_{t-1}) beta_t / (1 - alpha_bar_t)`.
///
/// Panics for `t < 2`: the t = 1 term is a reconstruction term handled
/// by the loss, not a posterior.
pub fn lattice_posterior(
    l_t: &Mat3,
    l0: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
) -> LatticePosterior {
    assert!(t >= 2, "posterior defined for t >= 2, got t = {t}");
    let beta_t = schedule.beta(t);
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let alpha_t = 1.0 - beta_t;
    let denom = 1.0 - ab_t;
    let coef0 = ab_prev.sqrt() * beta_t / denom;
    let coef_t = alpha_t.sqrt() * (1.0 - ab_prev) / denom;
    LatticePosterior {
        mean: l0.scale(coef0).add(&l_t.scale(coef_t)),
        variance: (1.0 - ab_prev) * beta_t / denom,
    }
}

/// KL between the true posterior and the learned kernel when both share
/// the posterior variance:
/// `gamma_t * ||pred_mean - posterior.mean||_F^2 / (2 * variance)`.
pub fn lattice_loss(pred_mean: &Mat3, posterior: &LatticePosterior, gamma_t: f64) -> f64 {
    let diff = pred_mean.sub(&posterior.mean);
    gamma_t * diff.frob_sq() / (2.0 * posterior.variance)
}

/// One reverse step: `pred_mean + sqrt(beta_tilde_t) * eps` for `t > 1`,
/// exactly `pred_mean` at `t = 1`.
pub fn lattice_backward_step<R: Rng>(
    pred_mean: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Mat3 {
    if t <= 1 {
        return *pred_mean;
    }
    let eps = gaussian_mat3(rng);
    lattice_backward_with_noise(pred_mean, t, schedule, &eps)
}

/// Reverse step with the caller supplying the Gaussian draw; `eps` is
/// ignored at `t = 1`.
pub fn lattice_backward_with_noise(
    pred_mean: &Mat3,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Mat3,
) -> Mat3 {
    if t <= 1 {
        return *pred_mean;
    }
    let beta_t = schedule.beta(t);
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let var = (1.0 - ab_prev) * beta_t / (1.0 - ab_t);
    pred_mean.add(&eps.scale(var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthogonal;
    use crate::schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two steps of beta = 0.2: alpha_bar = [0.8, 0.64]. The sigma and
    /// q_beta tables only need to satisfy their own invariants.
    fn tiny_schedule() -> NoiseSchedule {
        NoiseSchedule::from_tables(vec![0.2, 0.2], vec![0.3, 0.65], vec![0.5, 1.0]).unwrap()
    }

    fn l0() -> Mat3 {
        Mat3([[4.1, 0.2, -0.3], [0.0, 3.7, 0.5], [-0.2, 0.1, 5.2]])
    }

    #[test]
    fn forward_with_zero_noise_scales_the_input() {
        let s = tiny_schedule();
        let out = lattice_forward_with_noise(&l0(), 2, &s, &Mat3::zeros());
        let expect = l0().scale(0.64f64.sqrt());
        assert_eq!(out, expect);
    }

    #[test]
    fn forward_mean_matches_closed_form() {
        // alpha_bar_2 = 0.64, so the marginal mean is 0.8 * L0.
        let s = tiny_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut acc = Mat3::zeros();
        for _ in 0..n {
            acc = acc.add(&lattice_forward_sample(&l0(), 2, &s, &mut rng));
        }
        let mean = acc.scale(1.0 / n as f64);
        let expect = l0().scale(0.8);
        // Entry standard error sqrt((1 - 0.64) / n); allow 3 of them.
        let tol = 3.0 * (0.36f64 / n as f64).sqrt();
        for i in 0..3 {
            for j in 0..3 {
                let err = (mean.0[i][j] - expect.0[i][j]).abs();
                assert!(err < tol, "entry ({i},{j}) off by {err}, tol {tol}");
            }
        }
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        let s = make_schedule(1000, &ScheduleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let l = lattice_forward_sample(&l0(), 1000, &s, &mut rng);
            for v in l.flatten() {
                sum += v;
                sum_sq += v * v;
            }
        }
        let count = (n * 9) as f64;
        let mean = sum / count;
        let var = sum_sq / count - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "terminal entry variance {var}");
        assert!(mean.abs() < 0.02, "terminal entry mean {mean}");
    }

    #[test]
    fn composed_one_step_kernels_match_the_marginal_moments() {
        let s = tiny_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let l1 = lattice_one_step_forward(&l0(), 1, &s, &mut rng);
            let l2 = lattice_one_step_forward(&l1, 2, &s, &mut rng);
            // Track one representative entry.
            let v = l2.0[0][0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let want_mean = 0.8 * l0().0[0][0];
        let want_var = 0.36;
        let mean_tol = 4.0 * (want_var / n as f64).sqrt();
        let var_tol = 4.0 * want_var * (2.0 / n as f64).sqrt();
        assert!((mean - want_mean).abs() < mean_tol, "mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() < var_tol, "var {var} vs {want_var}");
    }

    #[test]
    fn posterior_matches_grid_quadrature_bayes_oracle() {
        // Scalar case: discretize q(x_1 | x_2, x_0) proportional to
        // N(x_2; sqrt(1-b) x_1, b) * N(x_1; sqrt(ab_1) x_0, 1 - ab_1)
        // on a fine grid and compare moments with the closed form.
        let s = tiny_schedule();
        let (x0, x_t) = (-0.3, 0.7);
        let b: f64 = 0.2;
        let ab1: f64 = 0.8;
        let step = 2e-4;
        let half = 8.0;
        let mut norm = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut x = -half;
        while x <= half {
            let lik = (-(x_t - (1.0 - b).sqrt() * x).powi(2) / (2.0 * b)).exp();
            let prior = (-(x - ab1.sqrt() * x0).powi(2) / (2.0 * (1.0 - ab1))).exp();
            let w = lik * prior;
            norm += w;
            m1 += w * x;
            m2 += w * x * x;
            x += step;
        }
        let grid_mean = m1 / norm;
        let grid_var = m2 / norm - grid_mean * grid_mean;

        let scalar = |v: f64| Mat3([[v, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let post = lattice_posterior(&scalar(x_t), &scalar(x0), 2, &s);
        assert!(
            (post.mean.0[0][0] - grid_mean).abs() < 1e-8,
            "mean {} vs grid {grid_mean}",
            post.mean.0[0][0]
        );
        assert!(
            (post.variance - grid_var).abs() < 1e-8,
            "variance {} vs grid {grid_var}",
            post.variance
        );
    }

    #[test]
    fn posterior_of_zeros_is_zero_and_variance_is_data_free() {
        let s = tiny_schedule();
        let zero = Mat3::zeros();
        let post = lattice_posterior(&zero, &zero, 2, &s);
        assert_eq!(post.mean, zero);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v0 = post.variance;
        for _ in 0..20 {
            let p = lattice_posterior(&gaussian_mat3(&mut rng), &gaussian_mat3(&mut rng), 2, &s);
            assert_eq!(p.variance, v0);
            assert!(p.variance > 0.0);
        }
    }

    #[test]
    #[should_panic(expected = "t >= 2")]
    fn posterior_rejects_t1() {
        let s = tiny_schedule();
        lattice_posterior(&Mat3::zeros(), &Mat3::zeros(), 1, &s);
    }

    #[test]
    fn loss_arithmetic() {
        let post = LatticePosterior {
            mean: l0(),
            variance: 0.25,
        };
        assert_eq!(lattice_loss(&l0(), &post, 1.0), 0.0);
        // Offsetting every entry by E gives 9 E^2 gamma / (2 v).
        let e = 0.37;
        let off = l0().map(|v| v + e);
        let want = 9.0 * e * e / (2.0 * 0.25);
        assert!((lattice_loss(&off, &post, 1.0) - want).abs() < 1e-12);
        assert!((lattice_loss(&off, &post, 2.0) - 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn backward_t1_is_deterministic() {
        let s = tiny_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = lattice_backward_step(&l0(), 1, &s, &mut rng);
        assert_eq!(out, l0());
        // And the rng was never consumed: two calls agree bitwise.
        let again = lattice_backward_step(&l0(), 1, &s, &mut rng);
        assert_eq!(again, l0());
    }

    #[test]
    fn backward_is_seed_reproducible() {
        let s = tiny_schedule();
        let a = lattice_backward_step(&l0(), 2, &s, &mut ChaCha8Rng::seed_from_u64(77));
        let b = lattice_backward_step(&l0(), 2, &s, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
        let c = lattice_backward_step(&l0(), 2, &s, &mut ChaCha8Rng::seed_from_u64(78));
        assert_ne!(a, c);
    }

    #[test]
    fn backward_noise_scale_is_the_posterior_deviation() {
        let s = tiny_schedule();
        let eps = Mat3::identity();
        let out = lattice_backward_with_noise(&Mat3::zeros(), 2, &s, &eps);
        let var = lattice_posterior(&Mat3::zeros(), &Mat3::zeros(), 2, &s).variance;
        assert!((out.0[0][0] - var.sqrt()).abs() < 1e-15);
        assert_eq!(out.0[0][1], 0.0);
    }

    #[test]
    fn backward_commutes_with_orthogonal_maps_under_shared_noise() {
        // step(Q pred, Q eps) = Q step(pred, eps): entrywise linearity.
        let s = tiny_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let q = random_orthogonal(&mut rng);
            let pred = gaussian_mat3(&mut rng);
            let eps = gaussian_mat3(&mut rng);
            let lhs = lattice_backward_with_noise(&q.matmul(&pred), 2, &s, &q.matmul(&eps));
            let rhs = q.matmul(&lattice_backward_with_noise(&pred, 2, &s, &eps));
            let err = lhs.sub(&rhs).frob_sq().sqrt();
            assert!(err < 1e-10, "equivariance residual {err}");
        }
    }
}
