//! Numerical workbench for orthogonality criteria of bounded arithmetic
//! sequences against uniquely ergodic model systems.
//!
//! Everything here works with finite prefixes u(1..N) of bounded complex
//! sequences. The library is organized around the experiment surface:
//!
//! * [`seqgen`] — concrete sequence generators and the slowly-varying
//!   block normal form,
//! * [`empirics`] — quantization to finite alphabets plus empirical
//!   cylinder/coupling frequencies,
//! * [`correlate`] — autocorrelations and the scalar statistics built
//!   from them (the performance core),
//! * [`spectral`] — atom-mass extraction from autocorrelation averages,
//! * [`dynsys`] — model uniquely ergodic systems (rotations, the affine
//!   skew product, the Heisenberg nilrotation) and orthogonality tests,
//! * [`joinplan`] — integer coupling allocation, Rokhlin towers and the
//!   locally-orbital permutation pipeline.
//!
//! All operations are deterministic: identical inputs produce bit-identical
//! outputs regardless of thread count. Parallel code must reduce in a fixed
//! order; see [`util::KahanSum`] and the chunking helpers.

pub mod correlate;
pub mod dynsys;
pub mod empirics;
pub mod error;
pub mod joinplan;
pub mod seqgen;
pub mod spectral;
pub mod util;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
