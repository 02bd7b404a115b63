//! Shared numeric helpers: compensated summation, phase arithmetic, and
//! deterministic parallel reduction.
//!
//! Reproducibility contract: every statistic in this crate must produce
//! bit-identical results regardless of thread count. The helpers here make
//! that cheap to honor: summation always happens in a fixed index order
//! (Kahan-compensated), and parallel reductions split work into chunks of a
//! fixed size whose partial sums are combined sequentially in chunk order.

use num_complex::Complex64;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

/// Kahan–Neumaier compensated accumulator for `f64`.
///
/// The compensation keeps the error of a length-n sum at O(1) ulps instead
/// of O(n), which matters for the 1e7-term sums the statistics run over.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Componentwise compensated accumulator for complex sums.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanComplex {
    re: KahanSum,
    im: KahanSum,
}

impl KahanComplex {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    #[inline]
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}

/// Fractional part in [0, 1) for any finite input (also for negatives).
#[inline]
pub fn frac(x: f64) -> f64 {
    let f = x - x.floor();
    // x slightly below an integer can round to 1.0 after the subtraction.
    if f >= 1.0 {
        0.0
    } else {
        f
    }
}

/// e^{2πi t}, evaluated after reduction of t mod 1 so the sin/cos argument
/// stays in [0, 2π) at full precision even for large t.
#[inline]
pub fn unit_phase(t: f64) -> Complex64 {
    let a = std::f64::consts::TAU * frac(t);
    Complex64::new(a.cos(), a.sin())
}

/// frac(y + n·x) with the product error compensated.
///
/// A plain `frac(n * x)` keeps only the rounded product, whose absolute
/// error is ulp(n·x)/2: already 1e-10 for n near 1e6. Splitting the product
/// into rounded part plus fma residual and reducing the rounded part first
/// keeps the result accurate near 1e-16 regardless of n.
#[inline]
pub fn frac_prod(n: f64, x: f64, y: f64) -> f64 {
    let hi = n * x;
    let lo = n.mul_add(x, -hi);
    frac(frac(hi) + frac(y) + lo)
}

/// Work-chunk size for deterministic parallel sums. Fixed: it must never be
/// derived from the thread count, or partial sums would regroup.
pub const PAR_CHUNK: usize = 1 << 14;

/// Deterministic parallel complex sum of `f(i)` for `i` in `0..n`.
///
/// Chunks of `PAR_CHUNK` indices are summed independently (possibly in
/// parallel) with compensation; the per-chunk results are then combined
/// sequentially in chunk order, so the result is a pure function of `n`
/// and `f`.
pub fn par_sum_complex<F>(n: usize, f: F) -> Complex64
where
    F: Fn(usize) -> Complex64 + Sync,
{
    let chunks: Vec<Complex64> = (0..n.div_ceil(PAR_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * PAR_CHUNK;
            let hi = (lo + PAR_CHUNK).min(n);
            let mut acc = KahanComplex::new();
            for i in lo..hi {
                acc.add(f(i));
            }
            acc.value()
        })
        .collect();
    let mut total = KahanComplex::new();
    for z in chunks {
        total.add(z);
    }
    total.value()
}

/// Deterministic parallel real sum of `f(i)` for `i` in `0..n`.
pub fn par_sum_f64<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks: Vec<f64> = (0..n.div_ceil(PAR_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * PAR_CHUNK;
            let hi = (lo + PAR_CHUNK).min(n);
            let mut acc = KahanSum::new();
            for i in lo..hi {
                acc.add(f(i));
            }
            acc.value()
        })
        .collect();
    let mut total = KahanSum::new();
    for x in chunks {
        total.add(x);
    }
    total.value()
}

/// SHA-256 of the little-endian (re, im) byte stream of a value list.
/// This is the identity of a sequence for caching purposes; labels and
/// metadata deliberately do not participate.
pub fn values_hash(values: &[Complex64]) -> String {
    let mut hasher = Sha256::new();
    for z in values {
        hasher.update(z.re.to_le_bytes());
        hasher.update(z.im.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
