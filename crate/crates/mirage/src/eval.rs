//! Generation-quality metrics: uniqueness and novelty under a
//! quantized structural fingerprint, atom-count statistics, and a
//! minimal-distance validity screen.
//!
//! The fingerprint stands in for a full structure matcher. It hashes
//! three invariants of the crystal: the sorted composition, the
//! multiset of interatomic distances under periodic images up to a
//! cutoff (quantized at `delta_d`), and the cell volume per atom.
//! Distances depend on the lattice only through `L L^T`, so the
//! fingerprint cannot move under any right orthogonal map `L -> L Q`,
//! under atom permutations, or under a common periodic translation.
//! Quantization makes it err toward treating near-identical structures
//! as equal, so uniqueness and novelty read conservatively (never
//! inflated). Stability is out of scope everywhere: reports speak of
//! "U&N", not "S.U.N.".

use crate::crystal::Crystal;
use crate::linalg::vec_mat;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("lattice is numerically degenerate (|det| = {det:.3e})")]
    DegenerateLattice { det: f64 },
    #[error("no samples to evaluate")]
    EmptySamples,
}

/// Default distance cutoff in angstroms.
pub const DEFAULT_CUTOFF: f64 = 6.0;
/// Default distance quantization step in angstroms.
pub const DEFAULT_DELTA_D: f64 = 0.05;
/// Volume-per-atom quantization step in cubic angstroms.
pub const VOLUME_QUANTUM: f64 = 0.01;
/// Default minimal interatomic distance for the validity screen.
pub const DEFAULT_MIN_DIST: f64 = 0.5;

/// Hashable structural identity used for duplicate and novelty
/// decisions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct StructureFingerprint {
    /// Sorted (type, count) pairs.
    pub composition: Vec<(u32, usize)>,
    /// Sorted quantized distances within the cutoff.
    pub distances: Vec<i64>,
    /// Cell volume per atom in `VOLUME_QUANTUM` units.
    pub volume_per_atom: i64,
}

/// All periodic-image pair distances up to `cutoff`, unordered pairs
/// and self-images each counted once.
pub fn periodic_pair_distances(crystal: &Crystal, cutoff: f64) -> Result<Vec<f64>, EvalError> {
    let l = &crystal.lattice;
    let det = l.det();
    if !det.is_finite() || det.abs() < 1e-9 {
        return Err(EvalError::DegenerateLattice { det });
    }
    let l_inv = l.inverse().ok_or(EvalError::DegenerateLattice { det })?;
    // Cartesian displacements are row vectors (df + k) * L, so the
    // i-th component of any fractional vector reaching `cutoff` is
    // bounded by cutoff times the i-th column norm of L^{-1}.
    let mut col_norm = [0.0; 3];
    for (i, norm) in col_norm.iter_mut().enumerate() {
        *norm = (0..3).map(|r| l_inv.0[r][i] * l_inv.0[r][i]).sum::<f64>().sqrt();
    }
    let n = crystal.n_atoms();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let df = [
                crystal.frac_coords[j][0] - crystal.frac_coords[i][0],
                crystal.frac_coords[j][1] - crystal.frac_coords[i][1],
                crystal.frac_coords[j][2] - crystal.frac_coords[i][2],
            ];
            let mut lo = [0i64; 3];
            let mut hi = [0i64; 3];
            for axis in 0..3 {
                let spread = cutoff * col_norm[axis];
                lo[axis] = (-df[axis] - spread).ceil() as i64;
                hi[axis] = (-df[axis] + spread).floor() as i64;
            }
            for ka in lo[0]..=hi[0] {
                for kb in lo[1]..=hi[1] {
                    for kc in lo[2]..=hi[2] {
                        if i == j {
                            // Self-pairs: skip the null shift and count
                            // each +-k pair once via lexicographic sign.
                            let positive = ka > 0
                                || (ka == 0 && kb > 0)
                                || (ka == 0 && kb == 0 && kc > 0);
                            if !positive {
                                continue;
                            }
                        }
                        let v = [
                            df[0] + ka as f64,
                            df[1] + kb as f64,
                            df[2] + kc as f64,
                        ];
                        let r = vec_mat(v, l);
                        let d = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                        if d <= cutoff {
                            out.push(d);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Computes the fingerprint of one crystal.
pub fn fingerprint(
    crystal: &Crystal,
    cutoff: f64,
    delta_d: f64,
) -> Result<StructureFingerprint, EvalError> {
    assert!(cutoff > 0.0 && delta_d > 0.0, "positive cutoff and bin width");
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &a in &crystal.atom_types {
        *counts.entry(a).or_insert(0) += 1;
    }
    let mut distances: Vec<i64> = periodic_pair_distances(crystal, cutoff)?
        .into_iter()
        .map(|d| (d / delta_d).round() as i64)
        .collect();
    distances.sort_unstable();
    let volume = crystal.lattice.det().abs() / crystal.n_atoms() as f64;
    Ok(StructureFingerprint {
        composition: counts.into_iter().collect(),
        distances,
        volume_per_atom: (volume / VOLUME_QUANTUM).round() as i64,
    })
}

fn fingerprints(
    samples: &[Crystal],
    cutoff: f64,
    delta_d: f64,
) -> Result<Vec<StructureFingerprint>, EvalError> {
    samples
        .par_iter()
        .map(|c| fingerprint(c, cutoff, delta_d))
        .collect()
}

/// Fraction of distinct fingerprints among the samples.
pub fn uniqueness(samples: &[Crystal], cutoff: f64, delta_d: f64) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let prints = fingerprints(samples, cutoff, delta_d)?;
    let distinct: HashSet<&StructureFingerprint> = prints.iter().collect();
    Ok(distinct.len() as f64 / samples.len() as f64)
}

/// Fraction of samples whose fingerprint matches no reference entry.
pub fn novelty(
    samples: &[Crystal],
    reference: &[Crystal],
    cutoff: f64,
    delta_d: f64,
) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySamples);
    }
    let known: HashSet<StructureFingerprint> =
        fingerprints(reference, cutoff, delta_d)?.into_iter().collect();
    let prints = fingerprints(samples, cutoff, delta_d)?;
    let fresh = prints.iter().filter(|p| !known.contains(p)).count();
    Ok(fresh as f64 / samples.len() as f64)
}

/// Exact histogram of atom counts; empty input gives an empty map.
pub fn atom_count_histogram(samples: &[Crystal]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for c in samples {
        *hist.entry(c.n_atoms()).or_insert(0) += 1;
    }
    hist
}

/// True iff every periodic-image pair distance is at least `min_dist`.
pub fn validity_screen(crystal: &Crystal, min_dist: f64) -> Result<bool, EvalError> {
    let close = periodic_pair_distances(crystal, min_dist)?;
    Ok(close.iter().all(|&d| d >= min_dist))
}
