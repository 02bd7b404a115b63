//! Generators for the concrete bounded arithmetic sequences the statistics
//! operate on, plus the slowly-varying block normal form.
//!
//! Every generator returns a finite prefix u(1..N) with |u(n)| ≤ 1. The
//! prefix is the universal currency of this crate: statistics, quantization
//! and the joining pipeline all consume [`ArithmeticSequence`] values.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Error;
use crate::util::{frac_prod, unit_phase, values_hash, KahanSum};
use crate::Result;

/// Permitted slack above modulus 1, absorbing sin/cos rounding.
pub const MODULUS_SLACK: f64 = 1e-12;

/// Above this length the Liouville sieve switches to segmented processing
/// so memory stays at one bit per integer plus a fixed working set.
const SIEVE_SEGMENT_THRESHOLD: u64 = 100_000_000;

/// Segment length for the segmented sieve (integers per segment).
const SIEVE_SEGMENT_LEN: u64 = 1 << 20;

/// Guard against absurd allocation requests (values are 16 bytes each).
const MAX_SEQUENCE_LEN: u64 = 500_000_000;

/// A Besicovitch-distance above this marks the blockified input as probably
/// not mean slowly varying.
pub const MSV_SUSPECT_DISTANCE: f64 = 0.1;

/// Finite prefix u(1), …, u(N) of a bounded complex sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ArithmeticSequence {
    /// Index of the first value; always 1.
    pub start_index: u64,
    pub values: Vec<Complex64>,
    pub label: String,
    /// Free-form provenance metadata (generator name, parameters, flags).
    pub params: BTreeMap<String, String>,
}

impl ArithmeticSequence {
    /// Wraps values, enforcing nonemptiness and the modulus bound.
    pub fn new(label: impl Into<String>, values: Vec<Complex64>) -> Result<Self> {
        let seq = ArithmeticSequence {
            start_index: 1,
            values,
            label: label.into(),
            params: BTreeMap::new(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// u(n) for 1-based n.
    #[inline]
    pub fn value(&self, n: usize) -> Complex64 {
        self.values[n - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("sequence must have length >= 1"));
        }
        if self.start_index != 1 {
            return Err(Error::invalid(format!(
                "start_index must be 1, got {}",
                self.start_index
            )));
        }
        for (i, z) in self.values.iter().enumerate() {
            if !z.re.is_finite() || !z.im.is_finite() {
                return Err(Error::invalid(format!("non-finite value at n={}", i + 1)));
            }
            if z.norm() > 1.0 + MODULUS_SLACK {
                return Err(Error::invalid(format!(
                    "|u({})| = {} exceeds 1 + {MODULUS_SLACK:e}",
                    i + 1,
                    z.norm()
                )));
            }
        }
        Ok(())
    }

    /// Content hash of the raw values; the cache identity of the sequence.
    pub fn content_hash(&self) -> String {
        values_hash(&self.values)
    }

    /// Writes `n,re,im` CSV. Floats use the shortest round-trip form, so the
    /// file reproduces the values bit for bit on read.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "n,re,im")?;
        for (i, z) in self.values.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, z.re, z.im)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the `n,re,im` format produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(r: R, label: impl Into<String>) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(r));
        let mut values = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("csv row {}: {e}", row + 2)))?;
            if rec.len() != 3 {
                return Err(Error::invalid(format!(
                    "csv row {}: expected 3 fields, got {}",
                    row + 2,
                    rec.len()
                )));
            }
            let n: u64 = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("csv row {}: bad index: {e}", row + 2)))?;
            if n as usize != row + 1 {
                return Err(Error::invalid(format!(
                    "csv row {}: indices must be consecutive from 1, got {n}",
                    row + 2
                )));
            }
            let re: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("csv row {}: bad re: {e}", row + 2)))?;
            let im: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("csv row {}: bad im: {e}", row + 2)))?;
            values.push(Complex64::new(re, im));
        }
        ArithmeticSequence::new(label, values)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".to_string());
        Self::read_csv(std::fs::File::open(path)?, label)
    }

    /// Writes the binary form: magic `FSLAB001`, then little-endian f64
    /// (re, im) pairs. Length is implied by file size.
    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        w.write_all(BINARY_MAGIC)?;
        for z in &self.values {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary_path(&self, path: &Path) -> Result<()> {
        self.write_binary(std::fs::File::create(path)?)
    }

    pub fn read_binary<R: Read>(mut r: R, label: impl Into<String>) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let values = decode_binary_values(&buf)?;
        ArithmeticSequence::new(label, values)
    }

    pub fn read_binary_path(path: &Path) -> Result<Self> {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".to_string());
        Self::read_binary(std::fs::File::open(path)?, label)
    }
}

/// Magic prefix of the binary sequence/table format.
pub const BINARY_MAGIC: &[u8; 8] = b"FSLAB001";

/// Decodes the `FSLAB001` + LE f64-pair framing into complex values.
pub fn decode_binary_values(buf: &[u8]) -> Result<Vec<Complex64>> {
    if buf.len() < 8 || &buf[..8] != BINARY_MAGIC {
        return Err(Error::CacheError("bad magic in binary sequence".into()));
    }
    let body = &buf[8..];
    if body.len() % 16 != 0 {
        return Err(Error::CacheError(format!(
            "binary body of {} bytes is not a whole number of complex values",
            body.len()
        )));
    }
    let mut values = Vec::with_capacity(body.len() / 16);
    for chunk in body.chunks_exact(16) {
        let re = f64::from_le_bytes(chunk[..8].try_into().unwrap());
        let im = f64::from_le_bytes(chunk[8..].try_into().unwrap());
        values.push(Complex64::new(re, im));
    }
    Ok(values)
}

/// Encodes values in the `FSLAB001` framing.
pub fn encode_binary_values(values: &[Complex64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 16 * values.len());
    buf.extend_from_slice(BINARY_MAGIC);
    for z in values {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    buf
}

// ---------------------------------------------------------------------------
// Liouville λ(n)
// ---------------------------------------------------------------------------

/// λ(n) = (−1)^{Ω(n)} for n = 1..N, where Ω counts prime factors with
/// multiplicity. A linear sieve stores one parity bit per integer; beyond
/// [`SIEVE_SEGMENT_THRESHOLD`] a segmented sieve keeps memory flat.
pub fn gen_liouville(n: u64) -> Result<ArithmeticSequence> {
    gen_liouville_with_threshold(n, SIEVE_SEGMENT_THRESHOLD)
}

/// Same as [`gen_liouville`] with an explicit segmentation threshold. Used
/// to exercise the segmented path at test scale.
pub fn gen_liouville_with_threshold(n: u64, threshold: u64) -> Result<ArithmeticSequence> {
    if n == 0 {
        return Err(Error::invalid("liouville requires N >= 1"));
    }
    if n > MAX_SEQUENCE_LEN {
        return Err(Error::ResourceLimit(format!(
            "N = {n} exceeds the {MAX_SEQUENCE_LEN} value ceiling"
        )));
    }
    let signs = if n <= threshold {
        liouville_parity_linear(n)
    } else {
        liouville_parity_segmented(n)
    };
    let values: Vec<Complex64> = signs
        .iter()
        .map(|&neg| Complex64::new(if neg { -1.0 } else { 1.0 }, 0.0))
        .collect();
    let mut seq = ArithmeticSequence::new("liouville", values)?;
    seq.params.insert("generator".into(), "liouville".into());
    seq.params.insert("n".into(), n.to_string());
    Ok(seq)
}

/// One bit per integer: bit i set ⇔ λ(i+1) = −1 (Ω(i+1) odd).
struct ParityBits {
    bits: Vec<u64>,
}

impl ParityBits {
    fn new(n: usize) -> Self {
        ParityBits {
            bits: vec![0; n.div_ceil(64)],
        }
    }

    #[inline]
    fn get(&self, i: usize) -> bool {
        (self.bits[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: usize, v: bool) {
        if v {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }
}

/// Linear sieve: every composite m = p·k is visited exactly once through its
/// smallest prime factor p, and Ω being completely additive gives
/// λ(p·k) = −λ(k) unconditionally.
fn liouville_parity_linear(n: u64) -> Vec<bool> {
    let n = n as usize;
    let mut composite = ParityBits::new(n + 1);
    let mut odd = ParityBits::new(n + 1);
    let mut primes: Vec<u32> = Vec::new();
    for i in 2..=n {
        if !composite.get(i) {
            primes.push(i as u32);
            odd.set(i, true);
        }
        for &p in &primes {
            let m = i * p as usize;
            if m > n {
                break;
            }
            composite.set(m, true);
            let flipped = !odd.get(i);
            odd.set(m, flipped);
            if i % p as usize == 0 {
                break;
            }
        }
    }
    (1..=n).map(|i| odd.get(i)).collect()
}

/// Segmented sieve: for each segment, divide out every prime p ≤ √N from
/// each position, accumulating the parity of the exponent sum; a leftover
/// cofactor > 1 is a single extra prime.
fn liouville_parity_segmented(n: u64) -> Vec<bool> {
    let root = (n as f64).sqrt() as u64 + 1;
    let small_primes = simple_primes(root);
    let seg_count = n.div_ceil(SIEVE_SEGMENT_LEN);
    let segments: Vec<Vec<bool>> = (0..seg_count)
        .into_par_iter()
        .map(|s| {
            let lo = s * SIEVE_SEGMENT_LEN + 1;
            let hi = ((s + 1) * SIEVE_SEGMENT_LEN).min(n);
            let len = (hi - lo + 1) as usize;
            let mut rem: Vec<u64> = (lo..=hi).collect();
            let mut odd = vec![false; len];
            for &p in &small_primes {
                let p = p as u64;
                if p * p > hi {
                    break;
                }
                let mut m = lo.div_ceil(p) * p;
                while m <= hi {
                    let idx = (m - lo) as usize;
                    while rem[idx] % p == 0 {
                        rem[idx] /= p;
                        odd[idx] = !odd[idx];
                    }
                    m += p;
                }
            }
            for (idx, &r) in rem.iter().enumerate() {
                if r > 1 {
                    odd[idx] = !odd[idx];
                }
            }
            odd
        })
        .collect();
    let mut out = Vec::with_capacity(n as usize);
    for seg in segments {
        out.extend_from_slice(&seg);
    }
    out
}

/// Plain Eratosthenes sieve for the base primes of the segmented pass.
fn simple_primes(limit: u64) -> Vec<u32> {
    if limit < 2 {
        return Vec::new();
    }
    let limit = limit as usize;
    let mut is_comp = vec![false; limit + 1];
    let mut primes = Vec::new();
    for i in 2..=limit {
        if !is_comp[i] {
            primes.push(i as u32);
            let mut m = i * i;
            while m <= limit {
                is_comp[m] = true;
                m += i;
            }
        }
    }
    primes
}

// ---------------------------------------------------------------------------
// Orbit-concatenation sequence on the 2-torus
// ---------------------------------------------------------------------------

/// Concatenation over k = 1..L of the length-k² pieces
/// (e^{2πi·j·kα})_{j=0..k²−1}: the k-th piece reads the vertical character
/// along the orbit of (kα, 0) under (x, y) ↦ (x, x + y).
///
/// Total length is L(L+1)(2L+1)/6.
pub fn gen_skew_sequence(alpha: f64, l: u64) -> Result<ArithmeticSequence> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if l == 0 {
        return Err(Error::invalid("skew sequence requires L >= 1"));
    }
    let total = l * (l + 1) * (2 * l + 1) / 6;
    if total > MAX_SEQUENCE_LEN {
        return Err(Error::ResourceLimit(format!(
            "L = {l} yields {total} values, above the {MAX_SEQUENCE_LEN} ceiling"
        )));
    }
    let mut values = Vec::with_capacity(total as usize);
    for k in 1..=l {
        // x is the orbit's frequency. frac_prod keeps j·x mod 1 accurate at
        // every j and matches the orbit evaluator's closed form bit for bit.
        let x = frac_prod(k as f64, alpha, 0.0);
        let kk = (k * k) as usize;
        for j in 0..kk {
            values.push(unit_phase(frac_prod(j as f64, x, 0.0)));
        }
    }
    let mut seq = ArithmeticSequence::new("skew", values)?;
    seq.params.insert("generator".into(), "skew".into());
    seq.params.insert("alpha".into(), format!("{alpha}"));
    seq.params.insert("l".into(), l.to_string());
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Archimedean character and power decay
// ---------------------------------------------------------------------------

/// u(n) = n^{it} = e^{i·t·ln n}.
pub fn gen_archimedean(t: f64, n: u64) -> Result<ArithmeticSequence> {
    if n == 0 {
        return Err(Error::invalid("archimedean requires N >= 1"));
    }
    if !t.is_finite() {
        return Err(Error::invalid("t must be finite"));
    }
    if n > MAX_SEQUENCE_LEN {
        return Err(Error::ResourceLimit(format!("N = {n} too large")));
    }
    let values: Vec<Complex64> = (1..=n)
        .map(|k| {
            let a = t * (k as f64).ln();
            Complex64::new(a.cos(), a.sin())
        })
        .collect();
    let mut seq = ArithmeticSequence::new("archimedean", values)?;
    seq.params.insert("generator".into(), "archimedean".into());
    seq.params.insert("t".into(), format!("{t}"));
    seq.params.insert("n".into(), n.to_string());
    Ok(seq)
}

/// u(n) = n^{−r} for r > 0; real, positive, with vanishing Cesàro mean of
/// |u| as N grows.
pub fn gen_power_decay(r: f64, n: u64) -> Result<ArithmeticSequence> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!("r = {r} must be positive")));
    }
    if n == 0 {
        return Err(Error::invalid("power decay requires N >= 1"));
    }
    if n > MAX_SEQUENCE_LEN {
        return Err(Error::ResourceLimit(format!("N = {n} too large")));
    }
    let values: Vec<Complex64> = (1..=n)
        .map(|k| Complex64::new((k as f64).powf(-r), 0.0))
        .collect();
    let mut seq = ArithmeticSequence::new("power_decay", values)?;
    seq.params.insert("generator".into(), "power_decay".into());
    seq.params.insert("r".into(), format!("{r}"));
    seq.params.insert("n".into(), n.to_string());
    Ok(seq)
}

/// Seeded iid ±1 noise; experiment scaffolding for null-model comparisons.
/// ChaCha8 keeps the stream identical across platforms and runs.
pub fn gen_random_signs(n: u64, seed: u64) -> Result<ArithmeticSequence> {
    if n == 0 {
        return Err(Error::invalid("random signs require N >= 1"));
    }
    if n > MAX_SEQUENCE_LEN {
        return Err(Error::ResourceLimit(format!("N = {n} too large")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(if rng.next_u32() & 1 == 0 { 1.0 } else { -1.0 }, 0.0))
        .collect();
    let mut seq = ArithmeticSequence::new("random_signs", values)?;
    seq.params.insert("generator".into(), "random_signs".into());
    seq.params.insert("seed".into(), seed.to_string());
    seq.params.insert("n".into(), n.to_string());
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Mean-slowly-varying block normal form
// ---------------------------------------------------------------------------

/// Block decomposition of a flattened sequence ṽ: on [b_k, b_{k+1}) the
/// values stay within ε_k of the representative z_k.
#[derive(Clone, Debug)]
pub struct BlockStructure {
    /// 1-based block start indices, strictly increasing, first entry 1.
    pub boundaries: Vec<u64>,
    /// Representative value z_k of block k.
    pub block_values: Vec<Complex64>,
    /// Tolerance ε_k > 0 of block k; nonincreasing in k.
    pub tolerances: Vec<f64>,
    /// Gaps b_{k+1} − b_k are nondecreasing for k ≥ gap_threshold.
    pub gap_threshold: usize,
    /// Length of the underlying sequence (the last block ends at seq_len).
    pub seq_len: u64,
}

impl BlockStructure {
    pub fn validate(&self) -> Result<()> {
        let k = self.boundaries.len();
        if k == 0 || self.block_values.len() != k || self.tolerances.len() != k {
            return Err(Error::invalid("block structure arrays must be nonempty and aligned"));
        }
        if self.boundaries[0] != 1 {
            return Err(Error::invalid("first block must start at index 1"));
        }
        for i in 1..k {
            if self.boundaries[i] <= self.boundaries[i - 1] {
                return Err(Error::invalid("block boundaries must be strictly increasing"));
            }
        }
        if *self.boundaries.last().unwrap() > self.seq_len {
            return Err(Error::invalid("block boundaries exceed sequence length"));
        }
        for i in 0..k {
            if !(self.tolerances[i] > 0.0) {
                return Err(Error::invalid("tolerances must be positive"));
            }
            if i > 0 && self.tolerances[i] > self.tolerances[i - 1] {
                return Err(Error::invalid("tolerances must be nonincreasing"));
            }
        }
        let gaps: Vec<u64> = self
            .boundaries
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect();
        for i in self.gap_threshold.max(1)..gaps.len() {
            if gaps[i] < gaps[i - 1] {
                return Err(Error::invalid(format!(
                    "gap at block {} decreases past the declared threshold {}",
                    i, self.gap_threshold
                )));
            }
        }
        Ok(())
    }

    /// Half-open index range (1-based) of block k.
    pub fn block_range(&self, k: usize) -> (u64, u64) {
        let start = self.boundaries[k];
        let end = if k + 1 < self.boundaries.len() {
            self.boundaries[k + 1]
        } else {
            self.seq_len + 1
        };
        (start, end)
    }
}

/// The jump-threshold schedule δ_1 > δ_2 > … used by [`msv_blockify`];
/// δ_j = 4^{−j} keeps the per-scale budget 2j·δ_j strictly decreasing.
pub fn default_delta_schedule() -> Vec<f64> {
    (1..=20).map(|j| 4f64.powi(-j)).collect()
}

/// Floor for block tolerances, so ε_k stays positive even when a block is
/// exactly constant.
const MIN_BLOCK_EPS: f64 = 1e-15;

/// Normalizes v into a block form ṽ: marks indices where |v(n+1) − v(n)|
/// exceeds the active scale's threshold δ_j, merges markers closer than j,
/// flattens ṽ to the run-start value across each merged run, and then cuts
/// blocks so that each has length at most 2j − 1 at scale j and satisfies
/// sup |ṽ − z_k| < ε_k with ε_k = min_{j' ≤ j} 2j'·δ_{j'}.
///
/// The scale j active at position n grows as the empirical density of
/// δ_j-jumps beyond n falls below δ_j, so slowly varying inputs spend most
/// of their length at deep scales with long blocks and tight tolerances.
/// Inputs that never jump at the finest scale collapse to a single block.
///
/// The returned sequence's `params` carry the Besicovitch distance
/// (1/N)Σ|v − ṽ|, the δ_1-jump density, and a suspect flag for inputs whose
/// distance exceeds [`MSV_SUSPECT_DISTANCE`].
pub fn msv_blockify(
    v: &ArithmeticSequence,
    delta_schedule: &[f64],
) -> Result<(ArithmeticSequence, BlockStructure)> {
    validate_schedule(delta_schedule)?;
    let n = v.len();
    let vals = &v.values;

    // Per-scale sup budgets; the running minimum keeps ε_k nonincreasing
    // even for schedules where 2j·δ_j is not monotone.
    let budgets: Vec<f64> = {
        let mut running = f64::INFINITY;
        delta_schedule
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                running = running.min(2.0 * (i as f64 + 1.0) * d);
                running.max(MIN_BLOCK_EPS)
            })
            .collect()
    };
    let finest_budget = *budgets.last().unwrap();

    let jumps: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let mut jump_sum = KahanSum::new();
    for &d in &jumps {
        jump_sum.add(d);
    }
    let msv_score = jump_sum.value() / n as f64;
    let jump_density = if jumps.is_empty() {
        0.0
    } else {
        jumps.iter().filter(|&&d| d >= delta_schedule[0]).count() as f64 / jumps.len() as f64
    };

    // A sequence that never strays from its first value by the finest budget
    // is one block outright; nothing to mark or flatten.
    let sup0 = vals
        .iter()
        .map(|z| (z - vals[0]).norm())
        .fold(0.0f64, f64::max);
    if sup0 < finest_budget {
        let mut out = v.clone();
        out.label = format!("{}/msv", v.label);
        annotate_msv(&mut out, 0.0, jump_density, msv_score);
        let blocks = BlockStructure {
            boundaries: vec![1],
            block_values: vec![vals[0]],
            tolerances: vec![finest_budget],
            gap_threshold: 0,
            seq_len: n as u64,
        };
        blocks.validate()?;
        return Ok((out, blocks));
    }

    // Scale onsets: scale j activates at the first position beyond which
    // δ_j-jumps have empirical density at most δ_j. Onsets are forced
    // nondecreasing; scale 1 covers the whole prefix.
    let jn = jumps.len();
    let mut onsets = vec![0usize; delta_schedule.len()];
    for (j, &delta) in delta_schedule.iter().enumerate().skip(1) {
        let mut suffix = vec![0u32; jn + 1];
        for i in (0..jn).rev() {
            suffix[i] = suffix[i + 1] + u32::from(jumps[i] >= delta);
        }
        let mut m = onsets[j - 1];
        while m < jn && suffix[m] as f64 > delta * (jn - m) as f64 {
            m += 1;
        }
        onsets[j] = m;
    }
    let scale_at = |pos: usize| -> usize {
        // Largest j with onset ≤ pos; onsets are sorted.
        match onsets.binary_search_by(|&o| {
            if o <= pos {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        }) {
            Ok(i) | Err(i) => i.saturating_sub(1),
        }
    };

    // Large-jump markers at the position where the new regime starts.
    let mut markers: Vec<usize> = Vec::new();
    for (i, &d) in jumps.iter().enumerate() {
        let j = scale_at(i);
        if d >= delta_schedule[j] {
            markers.push(i + 1);
        }
    }

    // Merge markers closer than the scale index (1-based) of the cluster
    // head; flatten ṽ to the head value across each multi-marker cluster.
    let mut flat = vals.clone();
    let mut cuts: Vec<usize> = vec![0];
    let mut i = 0;
    while i < markers.len() {
        let head = markers[i];
        let merge_gap = scale_at(head.saturating_sub(1)) + 1;
        let mut last = head;
        let mut k = i + 1;
        while k < markers.len() && markers[k] - last <= merge_gap {
            last = markers[k];
            k += 1;
        }
        if last > head {
            for t in head..=last.min(n - 1) {
                flat[t] = vals[head];
            }
            cuts.push(head);
            if last + 1 < n {
                cuts.push(last + 1);
            }
        } else {
            cuts.push(head);
        }
        i = k;
    }
    for &o in &onsets {
        if o > 0 && o < n {
            cuts.push(o);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    // Cap pass: at scale j blocks may span at most 2j − 1 indices (1-based
    // scale). Peeling length-j pieces leaves a final piece in [j, 2j−1], so
    // gaps within one scale are nondecreasing.
    let mut capped: Vec<usize> = Vec::with_capacity(cuts.len());
    for (ci, &b) in cuts.iter().enumerate() {
        let e = if ci + 1 < cuts.len() { cuts[ci + 1] } else { n };
        capped.push(b);
        let j = scale_at(b) + 1;
        let cap = 2 * j - 1;
        let mut start = b;
        while e - start > cap {
            start += j;
            capped.push(start);
        }
    }

    // Enforcement pass: walk blocks and cut again wherever the flattened
    // values leave the scale budget, so the recorded ε_k bound is exact by
    // construction, not merely expected.
    let mut boundaries: Vec<u64> = Vec::new();
    let mut block_values: Vec<Complex64> = Vec::new();
    let mut tolerances: Vec<f64> = Vec::new();
    let mut cut_iter = capped.iter().peekable();
    let mut b = *cut_iter.next().unwrap();
    loop {
        let planned_end = cut_iter.peek().map(|&&x| x).unwrap_or(n);
        let eps = budgets[scale_at(b)];
        let z = flat[b];
        let mut end = planned_end;
        for t in b + 1..planned_end {
            if (flat[t] - z).norm() >= eps {
                end = t;
                break;
            }
        }
        boundaries.push(b as u64 + 1);
        block_values.push(z);
        tolerances.push(eps);
        if end == planned_end {
            match cut_iter.next() {
                Some(&next) => b = next,
                None => break,
            }
        } else {
            b = end;
        }
    }

    let gaps: Vec<u64> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
    let mut gap_threshold = 0;
    for k in 1..gaps.len() {
        if gaps[k] < gaps[k - 1] {
            gap_threshold = k;
        }
    }

    let mut dist_sum = KahanSum::new();
    for (a, bv) in vals.iter().zip(flat.iter()) {
        dist_sum.add((a - bv).norm());
    }
    let distance = dist_sum.value() / n as f64;

    let mut out = ArithmeticSequence::new(format!("{}/msv", v.label), flat)?;
    out.params = v.params.clone();
    annotate_msv(&mut out, distance, jump_density, msv_score);

    let blocks = BlockStructure {
        boundaries,
        block_values,
        tolerances,
        gap_threshold,
        seq_len: n as u64,
    };
    blocks.validate()?;
    Ok((out, blocks))
}

fn validate_schedule(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid("delta schedule must be nonempty"));
    }
    for (i, &d) in s.iter().enumerate() {
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::invalid(format!("delta schedule entry {i} = {d} must be positive")));
        }
        if i > 0 && d >= s[i - 1] {
            return Err(Error::invalid(
                "delta schedule must be strictly decreasing",
            ));
        }
    }
    Ok(())
}

fn annotate_msv(seq: &mut ArithmeticSequence, distance: f64, jump_density: f64, msv_score: f64) {
    seq.params
        .insert("besicovitch_distance".into(), format!("{distance}"));
    seq.params
        .insert("jump_density".into(), format!("{jump_density}"));
    seq.params.insert("msv_score".into(), format!("{msv_score}"));
    seq.params.insert(
        "msv_suspect".into(),
        (distance > MSV_SUSPECT_DISTANCE).to_string(),
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent Ω(n) parity by trial division; the oracle for the sieve.
    fn liouville_trial(mut n: u64) -> f64 {
        let mut omega = 0u32;
        let mut p = 2;
        while p * p <= n {
            while n % p == 0 {
                n /= p;
                omega += 1;
            }
            p += 1;
        }
        if n > 1 {
            omega += 1;
        }
        if omega % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    #[test]
    fn liouville_first_ten_values_match_trial_division() {
        let seq = gen_liouville(10).unwrap();
        let expected = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0];
        for (i, &e) in expected.iter().enumerate() {
            assert_eq!(
                seq.values[i].re,
                e,
                "lambda({}) should be {e}",
                i + 1
            );
            assert_eq!(seq.values[i].im, 0.0);
        }
    }

    #[test]
    fn liouville_matches_trial_division_oracle_exhaustively() {
        let n = 10_000;
        let seq = gen_liouville(n).unwrap();
        for k in 1..=n {
            assert_eq!(
                seq.value(k as usize).re,
                liouville_trial(k),
                "sieve disagrees with trial division at n = {k}"
            );
        }
    }

    #[test]
    fn liouville_is_completely_multiplicative_on_prefix() {
        let n = 10_000usize;
        let seq = gen_liouville(n as u64).unwrap();
        for m in 2..=n {
            for k in 2..=n / m {
                let lhs = seq.value(m * k).re;
                let rhs = seq.value(m).re * seq.value(k).re;
                assert_eq!(lhs, rhs, "lambda({m}*{k}) != lambda({m})*lambda({k})");
            }
        }
    }

    #[test]
    fn liouville_mean_is_small_at_one_million() {
        let seq = gen_liouville(1_000_000).unwrap();
        let mut s = KahanSum::new();
        for z in &seq.values {
            s.add(z.re);
        }
        let mean = s.value() / seq.len() as f64;
        assert!(
            mean.abs() < 0.01,
            "mean of lambda over 1e6 terms is {mean}, expected |mean| < 0.01"
        );
    }

    #[test]
    fn segmented_sieve_agrees_with_linear_sieve() {
        let n = 300_000;
        let linear = gen_liouville_with_threshold(n, u64::MAX).unwrap();
        // Threshold 1 forces segmentation; segment length stays the built-in
        // 2^20, so this crosses a segment boundary mid-range.
        let segmented = gen_liouville_with_threshold(n, 1).unwrap();
        assert_eq!(linear.values, segmented.values);
    }

    #[test]
    fn skew_sequence_l2_matches_hand_unrolled_entries() {
        let alpha = 0.6180339887498949;
        let seq = gen_skew_sequence(alpha, 2).unwrap();
        assert_eq!(seq.len(), 5);
        let tau = std::f64::consts::TAU;
        // Block k=1: single entry 1. Block k=2: e^{2πi·j·2α}, j = 0..3.
        let mut expected = vec![Complex64::new(1.0, 0.0)];
        for j in 0..4 {
            let turns = (j as f64) * 2.0 * alpha;
            let a = tau * (turns - turns.floor());
            expected.push(Complex64::new(a.cos(), a.sin()));
        }
        for (i, (got, want)) in seq.values.iter().zip(expected.iter()).enumerate() {
            assert!(
                (got - want).norm() < 1e-12,
                "entry {i}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn skew_sequence_length_is_square_pyramidal() {
        assert_eq!(gen_skew_sequence(0.5, 1).ok().map(|s| s.len()), Some(1));
        let seq = gen_skew_sequence(0.6180339887498949, 150).unwrap();
        assert_eq!(seq.len(), 1_136_275, "sum of k^2 for k <= 150");
        assert_eq!(seq.values[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn skew_alpha_domain_is_open_unit_interval() {
        assert!(gen_skew_sequence(0.0, 3).is_err());
        assert!(gen_skew_sequence(1.0, 3).is_err());
        assert!(gen_skew_sequence(-0.3, 3).is_err());
        assert!(gen_skew_sequence(0.5, 0).is_err());
    }

    #[test]
    fn archimedean_phase_at_seven_is_ln_seven() {
        let seq = gen_archimedean(1.0, 10).unwrap();
        assert_eq!(seq.values[0], Complex64::new(1.0, 0.0), "ln 1 = 0");
        let arg7 = seq.value(7).arg();
        let ln7 = 7f64.ln();
        assert!(
            (arg7 - ln7).abs() < 1e-12,
            "arg u(7) = {arg7}, expected ln 7 = {ln7}"
        );
        let t0 = gen_archimedean(0.0, 5).unwrap();
        for z in &t0.values {
            assert_eq!(*z, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn power_decay_mean_is_scaled_harmonic_number() {
        let seq = gen_power_decay(1.0, 10).unwrap();
        let mut s = KahanSum::new();
        for z in &seq.values {
            s.add(z.norm());
        }
        // H_10 = 7381/2520, summed here from the exact fractions.
        let h10: f64 = (1..=10).map(|k| 1.0 / k as f64).sum();
        assert!((h10 - 7381.0 / 2520.0).abs() < 1e-15);
        let mean = s.value() / 10.0;
        assert!(
            (mean - h10 / 10.0).abs() < 1e-15,
            "Besicovitch mean {mean} should equal H_10/10 = {}",
            h10 / 10.0
        );
    }

    #[test]
    fn power_decay_mean_vanishes_at_scale() {
        let seq = gen_power_decay(0.5, 1_000_000).unwrap();
        let mut s = KahanSum::new();
        for z in &seq.values {
            s.add(z.norm());
        }
        let mean = s.value() / seq.len() as f64;
        assert!(mean < 0.01, "mean {mean} should be < 0.01 (about 2/sqrt(N))");
    }

    #[test]
    fn power_decay_rejects_nonpositive_exponent() {
        assert!(gen_power_decay(0.0, 10).is_err());
        assert!(gen_power_decay(-1.0, 10).is_err());
    }

    #[test]
    fn random_signs_are_deterministic_per_seed() {
        let a = gen_random_signs(1000, 7).unwrap();
        let b = gen_random_signs(1000, 7).unwrap();
        let c = gen_random_signs(1000, 8).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        for z in &a.values {
            assert!(z.re == 1.0 || z.re == -1.0);
        }
    }

    #[test]
    fn msv_constant_input_collapses_to_single_block() {
        let v = ArithmeticSequence::new(
            "const",
            vec![Complex64::new(0.5, 0.25); 1000],
        )
        .unwrap();
        let (flat, blocks) = msv_blockify(&v, &default_delta_schedule()).unwrap();
        assert_eq!(blocks.boundaries, vec![1], "constant input is one block");
        assert_eq!(blocks.block_values[0], Complex64::new(0.5, 0.25));
        assert_eq!(flat.values, v.values);
        assert_eq!(flat.params["besicovitch_distance"], "0");
        assert!(blocks.tolerances[0] > 0.0);
    }

    #[test]
    fn msv_rejects_bad_schedules() {
        let v = ArithmeticSequence::new("x", vec![Complex64::new(1.0, 0.0); 10]).unwrap();
        assert!(msv_blockify(&v, &[0.25, 0.25]).is_err(), "constant schedule");
        assert!(msv_blockify(&v, &[0.1, 0.2]).is_err(), "increasing schedule");
        assert!(msv_blockify(&v, &[]).is_err(), "empty schedule");
        assert!(msv_blockify(&v, &[0.25, 0.0]).is_err(), "nonpositive entry");
    }

    #[test]
    fn msv_archimedean_distance_is_small() {
        let v = gen_archimedean(1.0, 100_000).unwrap();
        let (flat, _) = msv_blockify(&v, &default_delta_schedule()).unwrap();
        let dist: f64 = flat.params["besicovitch_distance"].parse().unwrap();
        assert!(
            dist < 0.05,
            "n^i is mean slowly varying; distance {dist} should be < 0.05"
        );
        assert_eq!(flat.params["msv_suspect"], "false");
    }

    #[test]
    fn msv_blocks_satisfy_sup_bound_exactly() {
        for v in [
            gen_archimedean(1.0, 50_000).unwrap(),
            gen_random_signs(5_000, 3).unwrap(),
            gen_power_decay(0.3, 20_000).unwrap(),
        ] {
            let (flat, blocks) = msv_blockify(&v, &default_delta_schedule()).unwrap();
            blocks.validate().unwrap();
            for k in 0..blocks.boundaries.len() {
                let (s, e) = blocks.block_range(k);
                let z = blocks.block_values[k];
                let eps = blocks.tolerances[k];
                for n in s..e {
                    let dev = (flat.value(n as usize) - z).norm();
                    assert!(
                        dev < eps,
                        "block {k} of {}: |v~({n}) - z| = {dev} >= eps = {eps}",
                        v.label
                    );
                }
            }
        }
    }

    #[test]
    fn msv_iid_input_reports_high_jump_density_and_large_distance() {
        let v = gen_random_signs(20_000, 11).unwrap();
        let (flat, _) = msv_blockify(&v, &default_delta_schedule()).unwrap();
        let density: f64 = flat.params["jump_density"].parse().unwrap();
        assert!(
            (0.4..0.6).contains(&density),
            "iid +-1 jump density {density} should be near 0.5"
        );
        assert_eq!(
            flat.params["msv_suspect"], "true",
            "iid input should be flagged as not slowly varying"
        );
    }

    #[test]
    fn sequence_csv_roundtrip_is_bit_exact() {
        let mut seq = gen_archimedean(1.7, 500).unwrap();
        seq.values.push(Complex64::new(1e-300, -0.9999999999999999));
        let seq = ArithmeticSequence::new("roundtrip", seq.values).unwrap();
        let mut buf = Vec::new();
        seq.write_csv(&mut buf).unwrap();
        let back = ArithmeticSequence::read_csv(&buf[..], "roundtrip").unwrap();
        assert_eq!(seq.values.len(), back.values.len());
        for (a, b) in seq.values.iter().zip(back.values.iter()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn sequence_binary_roundtrip_and_magic_check() {
        let seq = gen_random_signs(257, 5).unwrap();
        let mut buf = Vec::new();
        seq.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"FSLAB001");
        let back = ArithmeticSequence::read_binary(&buf[..], "x").unwrap();
        assert_eq!(seq.values, back.values);

        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            ArithmeticSequence::read_binary(&corrupt[..], "x"),
            Err(Error::CacheError(_))
        ));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            ArithmeticSequence::read_binary(truncated, "x"),
            Err(Error::CacheError(_))
        ));
    }

    #[test]
    fn modulus_validation_rejects_oversized_values() {
        let err = ArithmeticSequence::new("bad", vec![Complex64::new(1.1, 0.0)]);
        assert!(err.is_err());
        let ok = ArithmeticSequence::new("edge", vec![Complex64::new(1.0, 0.0)]);
        assert!(ok.is_ok());
        assert!(ArithmeticSequence::new("empty", vec![]).is_err());
    }
}
