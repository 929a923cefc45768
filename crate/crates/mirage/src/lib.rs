//! Joint diffusion over periodic crystals whose atom count can change
//! during generation.
//!
//! A crystal is a triplet `(L, F, A)`: a 3x3 lattice matrix whose rows are
//! basis vectors, fractional coordinates on the unit 3-torus, and integer
//! atom types. Three coupled diffusion processes act on the triplet:
//!
//! * a Gaussian DDPM on the lattice ([`lattice`]),
//! * a wrapped-normal score diffusion on the coordinates ([`torus`]),
//! * a uniform-mixing categorical diffusion on the types ([`categorical`]).
//!
//! Variable atom count comes from *mirage atoms*: every crystal is padded
//! to a fixed slot count with placeholder atoms of type 0 before diffusion
//! ([`crystal::infuse`]) and placeholders are stripped after generation
//! ([`crystal::reduce`]). The type process may turn placeholders into real
//! atoms and vice versa, so the number of real atoms is itself sampled.
//!
//! [`net`] provides the permutation-equivariant denoiser, [`engine`] the
//! training and sampling loops, [`eval`] generation-quality metrics,
//! [`io`] file formats, and [`verify`] a self-check suite over the
//! symmetry and correctness contracts.

pub mod autodiff;
pub mod categorical;
pub mod crystal;
pub mod engine;
pub mod eval;
pub mod io;
pub mod lattice;
pub mod linalg;
pub mod net;
pub mod schedule;
pub mod torus;
pub mod verify;
