//! Crystal representation and the mirage padding scheme.
//!
//! A crystal is `(L, F, A)`: lattice rows as basis vectors, fractional
//! coordinates on the unit 3-torus, and strictly positive atom types.
//! Type 0 is reserved for *mirage atoms*: placeholders that pad every
//! crystal to a fixed slot count so the diffusion state has constant
//! shape while the number of real atoms stays free to change.
//!
//! [`infuse`] pads a crystal to `n_m` slots, [`reduce`] strips mirage
//! slots back out, and `reduce(infuse(c)) == c` holds bitwise because
//! real atoms keep their order and values.

use crate::linalg::Mat3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved placeholder type. Real atoms use types `1..=n_types`.
pub const MIRAGE_TYPE: u32 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum CrystalError {
    #[error("crystal must contain at least one atom")]
    Empty,
    #[error("coordinate rows ({coords}) and type entries ({types}) differ")]
    LengthMismatch { coords: usize, types: usize },
    #[error("atom {atom} has reserved mirage type 0")]
    MirageTypeInInput { atom: usize },
    #[error("atom {atom} coordinate {value} on axis {axis} is outside [0, 1)")]
    CoordOutOfRange { atom: usize, axis: usize, value: f64 },
    #[error("atom {atom} has a non-finite coordinate")]
    NonFiniteCoord { atom: usize },
    #[error("lattice has a non-finite entry")]
    NonFiniteLattice,
    #[error("lattice is singular")]
    SingularLattice,
    #[error("crystal has {n} atoms but only {n_m} slots are available")]
    TooManyAtoms { n: usize, n_m: usize },
}

/// A periodic crystal with real atoms only.
///
/// Invariants, enforced by [`Crystal::new`]:
/// * at least one atom, and one type entry per coordinate row,
/// * every fractional coordinate lies in `[0, 1)` and is finite,
/// * every atom type is at least 1 (type 0 never appears),
/// * the lattice is finite and invertible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub lattice: Mat3,
    pub frac_coords: Vec<[f64; 3]>,
    pub atom_types: Vec<u32>,
}

impl Crystal {
    pub fn new(
        lattice: Mat3,
        frac_coords: Vec<[f64; 3]>,
        atom_types: Vec<u32>,
    ) -> Result<Self, CrystalError> {
        if frac_coords.len() != atom_types.len() {
            return Err(CrystalError::LengthMismatch {
                coords: frac_coords.len(),
                types: atom_types.len(),
            });
        }
        if frac_coords.is_empty() {
            return Err(CrystalError::Empty);
        }
        if let Some(atom) = atom_types.iter().position(|&t| t == MIRAGE_TYPE) {
            return Err(CrystalError::MirageTypeInInput { atom });
        }
        validate_lattice(&lattice)?;
        validate_coords(&frac_coords)?;
        Ok(Crystal {
            lattice,
            frac_coords,
            atom_types,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }
}

/// A crystal padded to a fixed slot count for diffusion.
///
/// Slots with type 0 are mirage placeholders. The set of real slots is
/// always recomputed from `atom_types` via [`mirage_mask`]; it is never
/// stored, so it cannot drift out of sync as types churn during
/// generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandedCrystal {
    pub lattice: Mat3,
    pub frac_coords: Vec<[f64; 3]>,
    pub atom_types: Vec<u32>,
}

impl ExpandedCrystal {
    pub fn new(
        lattice: Mat3,
        frac_coords: Vec<[f64; 3]>,
        atom_types: Vec<u32>,
    ) -> Result<Self, CrystalError> {
        if frac_coords.len() != atom_types.len() {
            return Err(CrystalError::LengthMismatch {
                coords: frac_coords.len(),
                types: atom_types.len(),
            });
        }
        if frac_coords.is_empty() {
            return Err(CrystalError::Empty);
        }
        validate_lattice(&lattice)?;
        validate_coords(&frac_coords)?;
        Ok(ExpandedCrystal {
            lattice,
            frac_coords,
            atom_types,
        })
    }

    /// Total slot count, real and mirage together.
    pub fn n_slots(&self) -> usize {
        self.atom_types.len()
    }

    pub fn n_real(&self) -> usize {
        self.atom_types.iter().filter(|&&t| t != MIRAGE_TYPE).count()
    }
}

/// Where mirage coordinates are placed when padding a crystal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MirageInit {
    /// Uniform over the unit cell.
    #[default]
    Uniform,
    /// All placeholders at the arithmetic mean of the real atoms'
    /// fractional coordinates, taken without unwrapping across the
    /// periodic boundary.
    Center,
}

/// Pads `crystal` to `n_m` slots with uniformly placed mirage atoms.
///
/// Real atoms come first and keep their order, coordinates and types
/// bitwise; slots `n..n_m` get type 0. Errors when the crystal already
/// has more than `n_m` atoms.
pub fn infuse<R: Rng>(
    crystal: &Crystal,
    n_m: usize,
    rng: &mut R,
) -> Result<ExpandedCrystal, CrystalError> {
    infuse_with(crystal, n_m, MirageInit::Uniform, rng)
}

/// [`infuse`] with an explicit placement rule for mirage coordinates.
pub fn infuse_with<R: Rng>(
    crystal: &Crystal,
    n_m: usize,
    init: MirageInit,
    rng: &mut R,
) -> Result<ExpandedCrystal, CrystalError> {
    let n = crystal.n_atoms();
    if n > n_m {
        return Err(CrystalError::TooManyAtoms { n, n_m });
    }
    let mut frac_coords = Vec::with_capacity(n_m);
    let mut atom_types = Vec::with_capacity(n_m);
    frac_coords.extend_from_slice(&crystal.frac_coords);
    atom_types.extend_from_slice(&crystal.atom_types);
    let center = {
        let mut c = [0.0; 3];
        for row in &crystal.frac_coords {
            for axis in 0..3 {
                c[axis] += row[axis];
            }
        }
        for v in &mut c {
            *v /= n as f64;
        }
        c
    };
    for _ in n..n_m {
        let f = match init {
            MirageInit::Uniform => [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()],
            MirageInit::Center => center,
        };
        frac_coords.push(f);
        atom_types.push(MIRAGE_TYPE);
    }
    Ok(ExpandedCrystal {
        lattice: crystal.lattice,
        frac_coords,
        atom_types,
    })
}

/// Strips mirage slots, keeping real atoms in order with their values
/// untouched. Returns `None` when every slot is mirage.
pub fn reduce(expanded: &ExpandedCrystal) -> Option<Crystal> {
    let mut frac_coords = Vec::new();
    let mut atom_types = Vec::new();
    for (f, &t) in expanded.frac_coords.iter().zip(&expanded.atom_types) {
        if t != MIRAGE_TYPE {
            frac_coords.push(*f);
            atom_types.push(t);
        }
    }
    if atom_types.is_empty() {
        return None;
    }
    Some(Crystal {
        lattice: expanded.lattice,
        frac_coords,
        atom_types,
    })
}

/// Indices of real (non-mirage) slots, ascending.
pub fn mirage_mask(expanded: &ExpandedCrystal) -> Vec<usize> {
    expanded
        .atom_types
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != MIRAGE_TYPE)
        .map(|(i, _)| i)
        .collect()
}

/// Maps any finite real to the fundamental cell `[0, 1)`.
///
/// `x - floor(x)` can round up to exactly 1.0 when `x` is a tiny
/// negative (for instance -1e-17), so the result is folded once more.
pub fn wrap(x: f64) -> f64 {
    let mut r = x - x.floor();
    if r >= 1.0 {
        r -= 1.0;
    }
    r
}

pub fn wrap3(f: [f64; 3]) -> [f64; 3] {
    [wrap(f[0]), wrap(f[1]), wrap(f[2])]
}

/// Signed wrapped difference in `(-0.5, 0.5]`, congruent to `v` mod 1.
///
/// Ties at half a cell resolve to +0.5 so the value is unique.
pub fn signed_wrap(v: f64) -> f64 {
    v - (v - 0.5).ceil()
}

/// Shortest signed displacement from `b` to `a` on the torus, per axis.
pub fn torus_diff(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        signed_wrap(a[0] - b[0]),
        signed_wrap(a[1] - b[1]),
        signed_wrap(a[2] - b[2]),
    ]
}

fn validate_lattice(lattice: &Mat3) -> Result<(), CrystalError> {
    if !lattice.is_finite() {
        return Err(CrystalError::NonFiniteLattice);
    }
    if lattice.det() == 0.0 {
        return Err(CrystalError::SingularLattice);
    }
    Ok(())
}

fn validate_coords(frac_coords: &[[f64; 3]]) -> Result<(), CrystalError> {
    for (atom, f) in frac_coords.iter().enumerate() {
        for (axis, &v) in f.iter().enumerate() {
            if !v.is_finite() {
                return Err(CrystalError::NonFiniteCoord { atom });
            }
            if !(0.0..1.0).contains(&v) {
                return Err(CrystalError::CoordOutOfRange {
                    atom,
                    axis,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_crystal() -> Crystal {
        Crystal::new(
            Mat3::cubic(4.0),
            vec![[0.1, 0.2, 0.3], [0.6, 0.5, 0.9], [0.25, 0.75, 0.5]],
            vec![3, 1, 7],
        )
        .unwrap()
    }

    #[test]
    fn wrap_basic_values() {
        assert_eq!(wrap(1.25), 0.25);
        assert_eq!(wrap(-0.25), 0.75);
        assert_eq!(wrap(1.0), 0.0);
        assert_eq!(wrap(0.0), 0.0);
        assert_eq!(wrap(-3.0), 0.0);
        assert_eq!(wrap(2.75), 0.75);
    }

    #[test]
    fn wrap_tiny_negative_stays_in_cell() {
        // -1e-17 - floor(-1e-17) rounds to exactly 1.0 in f64.
        let r = wrap(-1e-17);
        assert!((0.0..1.0).contains(&r), "wrap(-1e-17) = {r}");
        assert_eq!(r, 0.0);
    }

    #[test]
    fn wrap_preserves_values_close_to_one() {
        let x = 1.0 - 1e-16;
        assert_eq!(wrap(x), x);
    }

    #[test]
    fn signed_wrap_range_and_ties() {
        assert!((signed_wrap(0.8) - -0.2).abs() < 1e-15);
        assert!((signed_wrap(-0.8) - 0.2).abs() < 1e-15);
        assert_eq!(signed_wrap(0.5), 0.5);
        assert_eq!(signed_wrap(-0.5), 0.5);
        assert_eq!(signed_wrap(3.25), 0.25);
        assert_eq!(signed_wrap(0.25), 0.25);
    }

    #[test]
    fn torus_diff_picks_shortest_displacement() {
        let d = torus_diff([0.9, 0.1, 0.75], [0.1, 0.9, 0.25]);
        assert!((d[0] - -0.2).abs() < 1e-15);
        assert!((d[1] - 0.2).abs() < 1e-15);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn infuse_pads_with_mirage_atoms() {
        let c = sample_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = infuse(&c, 5, &mut rng).unwrap();
        assert_eq!(e.n_slots(), 5);
        assert_eq!(e.n_real(), 3);
        assert_eq!(&e.atom_types[..3], &[3, 1, 7]);
        assert_eq!(&e.atom_types[3..], &[0, 0]);
        assert_eq!(&e.frac_coords[..3], &c.frac_coords[..]);
        for f in &e.frac_coords[3..] {
            for v in f {
                assert!((0.0..1.0).contains(v));
            }
        }
    }

    #[test]
    fn infuse_center_places_placeholders_at_the_real_atom_mean() {
        let c = sample_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = infuse_with(&c, 6, MirageInit::Center, &mut rng).unwrap();
        let want = [0.95 / 3.0, 1.45 / 3.0, 1.7 / 3.0];
        for f in &e.frac_coords[3..] {
            assert_eq!(*f, want);
        }
    }

    #[test]
    fn infuse_rejects_oversize_crystal() {
        let c = sample_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            infuse(&c, 2, &mut rng).unwrap_err(),
            CrystalError::TooManyAtoms { n: 3, n_m: 2 }
        );
    }

    #[test]
    fn reduce_after_infuse_is_identity() {
        let c = sample_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n_m in [3, 4, 8, 20] {
            let e = infuse(&c, n_m, &mut rng).unwrap();
            assert_eq!(reduce(&e), Some(c.clone()));
        }
    }

    #[test]
    fn reduce_of_all_mirage_is_none() {
        let e = ExpandedCrystal::new(
            Mat3::cubic(3.0),
            vec![[0.1, 0.1, 0.1], [0.4, 0.4, 0.4]],
            vec![0, 0],
        )
        .unwrap();
        assert_eq!(reduce(&e), None);
    }

    #[test]
    fn mirage_mask_lists_real_slots() {
        let e = ExpandedCrystal::new(
            Mat3::cubic(3.0),
            vec![[0.1; 3], [0.2; 3], [0.3; 3], [0.4; 3], [0.5; 3]],
            vec![2, 0, 5, 0, 1],
        )
        .unwrap();
        assert_eq!(mirage_mask(&e), vec![0, 2, 4]);
        assert_eq!(e.n_real(), 3);
    }

    #[test]
    fn mask_after_infuse_covers_exactly_the_real_atoms() {
        let c = sample_crystal();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = infuse(&c, 7, &mut rng).unwrap();
        assert_eq!(mirage_mask(&e), vec![0, 1, 2]);
    }

    #[test]
    fn crystal_rejects_mirage_type() {
        let err = Crystal::new(Mat3::cubic(4.0), vec![[0.1; 3], [0.2; 3]], vec![1, 0]);
        assert_eq!(err.unwrap_err(), CrystalError::MirageTypeInInput { atom: 1 });
    }

    #[test]
    fn crystal_rejects_unwrapped_coords() {
        let err = Crystal::new(Mat3::cubic(4.0), vec![[0.1, 1.0, 0.2]], vec![1]);
        assert!(matches!(
            err.unwrap_err(),
            CrystalError::CoordOutOfRange { atom: 0, axis: 1, .. }
        ));
        let err = Crystal::new(Mat3::cubic(4.0), vec![[-0.3, 0.0, 0.2]], vec![1]);
        assert!(matches!(err.unwrap_err(), CrystalError::CoordOutOfRange { .. }));
    }

    #[test]
    fn crystal_rejects_degenerate_shapes() {
        assert_eq!(
            Crystal::new(Mat3::cubic(4.0), vec![], vec![]).unwrap_err(),
            CrystalError::Empty
        );
        assert_eq!(
            Crystal::new(Mat3::cubic(4.0), vec![[0.1; 3]], vec![1, 2]).unwrap_err(),
            CrystalError::LengthMismatch { coords: 1, types: 2 }
        );
        let singular = Mat3([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(
            Crystal::new(singular, vec![[0.1; 3]], vec![1]).unwrap_err(),
            CrystalError::SingularLattice
        );
    }

    proptest! {
        #[test]
        fn wrap_lands_in_cell_and_is_idempotent(x in -1e6f64..1e6) {
            let r = wrap(x);
            prop_assert!((0.0..1.0).contains(&r));
            prop_assert_eq!(wrap(r), r);
            // Congruence mod 1 within accumulated rounding.
            prop_assert!(((x - r) - (x - r).round()).abs() < 1e-9);
        }

        #[test]
        fn signed_wrap_is_congruent_and_half_open(v in -1e3f64..1e3) {
            let d = signed_wrap(v);
            prop_assert!(d > -0.5 && d <= 0.5);
            prop_assert!(((v - d) - (v - d).round()).abs() < 1e-10);
        }

        #[test]
        fn infuse_reduce_roundtrip(
            n in 1usize..6,
            pad in 0usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut coords = Vec::new();
            let mut types = Vec::new();
            for _ in 0..n {
                coords.push([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]);
                types.push(rng.random_range(1u32..=12));
            }
            let c = Crystal::new(Mat3::cubic(5.0), coords, types).unwrap();
            let e = infuse(&c, n + pad, &mut rng).unwrap();
            prop_assert_eq!(mirage_mask(&e).len(), n);
            prop_assert_eq!(reduce(&e), Some(c));
        }
    }
}
