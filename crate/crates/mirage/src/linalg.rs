//! Minimal 3x3 matrix arithmetic for lattice handling.
//!
//! Row convention throughout: the i-th row of a lattice matrix is the i-th
//! basis vector, so a fractional coordinate maps to Cartesian space as the
//! row-vector product `x = f * L`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// 3x3 matrix stored row-major. Serializes as a plain nested array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn zeros() -> Self {
        Mat3([[0.0; 3]; 3])
    }

    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Cubic cell with edge length `a`.
    pub fn cubic(a: f64) -> Self {
        Mat3([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]])
    }

    pub fn row(&self, i: usize) -> [f64; 3] {
        self.0[i]
    }

    pub fn col(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Matrix inverse, or `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        let inv = |r1: usize, c1: usize, r2: usize, c2: usize| {
            (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / d
        };
        // Adjugate transpose, expanded by cofactors.
        Some(Mat3([
            [inv(1, 1, 2, 2), inv(0, 2, 2, 1), inv(0, 1, 1, 2)],
            [inv(1, 2, 2, 0), inv(0, 0, 2, 2), inv(0, 2, 1, 0)],
            [inv(1, 0, 2, 1), inv(0, 1, 2, 0), inv(0, 0, 1, 1)],
        ]))
    }

    pub fn matmul(&self, other: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in other.0.iter().enumerate() {
                    out[i][j] += self.0[i][k] * row[j];
                }
            }
        }
        Mat3(out)
    }

    pub fn add(&self, other: &Mat3) -> Mat3 {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat3) -> Mat3 {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat3 {
        let mut out = self.0;
        for row in &mut out {
            for v in row {
                *v = f(*v);
            }
        }
        Mat3(out)
    }

    pub fn zip(&self, other: &Mat3, f: impl Fn(f64, f64) -> f64) -> Mat3 {
        let mut out = self.0;
        for (row, orow) in out.iter_mut().zip(&other.0) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v = f(*v, *o);
            }
        }
        Mat3(out)
    }

    /// Squared Frobenius norm, the sum of squared entries.
    pub fn frob_sq(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Entries flattened row-major.
    pub fn flatten(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_flat(v: &[f64]) -> Mat3 {
        assert_eq!(v.len(), 9, "expected 9 entries for a 3x3 matrix");
        Mat3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }
}

/// Row vector times matrix: `(v * M)_j = sum_i v_i M_ij`.
///
/// This is the fractional-to-Cartesian map under the rows-as-basis
/// convention.
pub fn vec_mat(v: [f64; 3], m: &Mat3) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, vi) in v.iter().enumerate() {
        for j in 0..3 {
            out[j] += vi * m.0[i][j];
        }
    }
    out
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// 3x3 matrix with independent standard normal entries.
pub fn gaussian_mat3<R: Rng>(rng: &mut R) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for row in &mut out {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }
    Mat3(out)
}

/// Uniform random orthogonal matrix (Haar on O(3)), reflections included.
///
/// Gram-Schmidt on a Gaussian matrix gives a rotation-distributed frame up
/// to sign choices; an extra row negation with probability 1/2 covers the
/// det = -1 component.
pub fn random_orthogonal<R: Rng>(rng: &mut R) -> Mat3 {
    loop {
        let g = gaussian_mat3(rng);
        if let Some(q) = gram_schmidt_rows(&g) {
            let mut q = q;
            if rng.random::<bool>() {
                for v in &mut q.0[0] {
                    *v = -*v;
                }
            }
            return q;
        }
    }
}

/// Uniform random rotation (Haar on SO(3)).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let mut q = random_orthogonal(rng);
    if q.det() < 0.0 {
        for v in &mut q.0[0] {
            *v = -*v;
        }
    }
    q
}

fn gram_schmidt_rows(m: &Mat3) -> Option<Mat3> {
    let mut rows = m.0;
    for i in 0..3 {
        // Project out earlier rows twice: a single pass can leave a
        // residual of ~1e-12 on ill-conditioned draws.
        for _ in 0..2 {
            for j in 0..i {
                let proj = dot3(rows[i], rows[j]);
                for k in 0..3 {
                    rows[i][k] -= proj * rows[j][k];
                }
            }
        }
        let n = norm3(rows[i]);
        // Reject near-degenerate draws; the caller retries.
        if n < 1e-8 {
            return None;
        }
        for v in &mut rows[i] {
            *v /= n;
        }
    }
    Some(Mat3(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = gaussian_mat3(&mut rng);
            if m.det().abs() < 1e-3 {
                continue;
            }
            let inv = m.inverse().unwrap();
            let id = m.matmul(&inv);
            let err = id.sub(&Mat3::identity()).frob_sq().sqrt();
            assert!(err < 1e-10, "inverse roundtrip error {err}");
        }
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        let m = Mat3([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 1.0, 1.0]]);
        assert!(m.inverse().is_none());
    }

    #[test]
    fn vec_mat_matches_row_convention() {
        let l = Mat3([[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [1.0, 0.0, 4.0]]);
        // f = (1, 1, 1) lands on the sum of the basis rows.
        assert_eq!(vec_mat([1.0, 1.0, 1.0], &l), [3.0, 3.0, 4.0]);
        // f = e_2 picks out the third row.
        assert_eq!(vec_mat([0.0, 0.0, 1.0], &l), [1.0, 0.0, 4.0]);
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut saw_reflection = false;
        let mut saw_rotation = false;
        for _ in 0..200 {
            let q = random_orthogonal(&mut rng);
            let gram = q.matmul(&q.transpose());
            let err = gram.sub(&Mat3::identity()).frob_sq().sqrt();
            assert!(err < 1e-12, "orthogonality error {err}");
            let d = q.det();
            assert!((d.abs() - 1.0).abs() < 1e-12);
            if d < 0.0 {
                saw_reflection = true;
            } else {
                saw_rotation = true;
            }
        }
        assert!(saw_reflection && saw_rotation);
    }

    #[test]
    fn random_rotation_has_positive_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            assert!(random_rotation(&mut rng).det() > 0.0);
        }
    }
}
