//! Symbolic coding of bounded sequences and the empirical block statistics
//! read off them: cylinder frequencies over one-sided windows, and joint
//! frequencies of block pairs sitting at positions linked by a map φ.
//!
//! All windows are one-sided and in-range; nothing wraps around the end of
//! the sample. Frequencies are plain counts over the admissible window
//! positions, so tables are exactly reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::Error;
use crate::seqgen::ArithmeticSequence;
use crate::util::frac;
use crate::Result;

/// Alphabet sizes above this are refused by all quantizers.
pub const MAX_ALPHABET: u32 = 256;

/// Phase-bin count used when no quantization rule is given.
pub const DEFAULT_PHASE_BINS: u32 = 16;

/// Cylinder lengths above this are refused outright.
pub const MAX_CYLINDER_LEN: usize = 12;

/// Cap on the number of distinct blocks a dense count table may hold.
pub const MAX_TABLE_CELLS: u64 = 10_000_000;

/// A sequence coded over the alphabet {0, …, M−1}, together with a
/// representative complex value per symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolicSequence {
    pub symbols: Vec<u32>,
    pub alphabet_size: u32,
    /// Representative value of each symbol, indexed by symbol.
    pub symbol_values: Vec<Complex64>,
}

impl SymbolicSequence {
    pub fn new(symbols: Vec<u32>, alphabet_size: u32, symbol_values: Vec<Complex64>) -> Result<Self> {
        let s = SymbolicSequence {
            symbols,
            alphabet_size,
            symbol_values,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size == 0 {
            return Err(Error::invalid("alphabet must be nonempty"));
        }
        if self.alphabet_size > MAX_ALPHABET {
            return Err(Error::OverflowAlphabet(format!(
                "alphabet size {} exceeds {MAX_ALPHABET}",
                self.alphabet_size
            )));
        }
        if self.symbol_values.len() != self.alphabet_size as usize {
            return Err(Error::invalid(
                "symbol_values must have one entry per alphabet symbol",
            ));
        }
        if let Some(&bad) = self.symbols.iter().find(|&&s| s >= self.alphabet_size) {
            return Err(Error::invalid(format!(
                "symbol {bad} outside alphabet of size {}",
                self.alphabet_size
            )));
        }
        Ok(())
    }
}

/// How to code complex values into symbols.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantizeRule {
    /// ±1-valued input: −1 ↦ 0, +1 ↦ 1.
    Signs,
    /// Unimodular (or zero) input: e^{2πiθ} ↦ ⌊Mθ⌋. Zeros, if present,
    /// get one extra trailing symbol.
    PhaseBins(u32),
    /// Alphabet = the distinct values occurring in the input, sorted by
    /// (re, im); refused when there are more than [`MAX_ALPHABET`].
    ValueSet,
}

/// Tolerance for recognizing ±1 and unit-modulus values.
const QUANT_TOL: f64 = 1e-9;

/// Codes a bounded sequence into symbols according to the rule.
pub fn quantize(u: &ArithmeticSequence, rule: &QuantizeRule) -> Result<SymbolicSequence> {
    u.validate()?;
    match rule {
        QuantizeRule::Signs => {
            let mut symbols = Vec::with_capacity(u.len());
            for (i, z) in u.values.iter().enumerate() {
                let s = if (z - Complex64::new(-1.0, 0.0)).norm() <= QUANT_TOL {
                    0
                } else if (z - Complex64::new(1.0, 0.0)).norm() <= QUANT_TOL {
                    1
                } else {
                    return Err(Error::invalid(format!(
                        "sign quantization requires values in {{-1, +1}}; u({}) = {z}",
                        i + 1
                    )));
                };
                symbols.push(s);
            }
            SymbolicSequence::new(
                symbols,
                2,
                vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
            )
        }
        QuantizeRule::PhaseBins(m) => {
            let m = *m;
            if m == 0 {
                return Err(Error::invalid("phase bin count must be >= 1"));
            }
            if m + 1 > MAX_ALPHABET {
                return Err(Error::OverflowAlphabet(format!(
                    "phase bins {m} plus zero symbol exceed {MAX_ALPHABET}"
                )));
            }
            let mut saw_zero = false;
            let mut symbols = Vec::with_capacity(u.len());
            for (i, z) in u.values.iter().enumerate() {
                let r = z.norm();
                if r == 0.0 {
                    saw_zero = true;
                    symbols.push(m);
                } else if (r - 1.0).abs() <= QUANT_TOL {
                    let theta = frac(z.arg() / std::f64::consts::TAU);
                    let bin = ((theta * m as f64) as u32).min(m - 1);
                    symbols.push(bin);
                } else {
                    return Err(Error::invalid(format!(
                        "phase quantization requires |u(n)| in {{0}} or within {QUANT_TOL:e} of 1; |u({})| = {r}",
                        i + 1
                    )));
                }
            }
            let alphabet = if saw_zero { m + 1 } else { m };
            let mut symbol_values: Vec<Complex64> = (0..m)
                .map(|k| {
                    let theta = (k as f64 + 0.5) / m as f64;
                    Complex64::from_polar(1.0, std::f64::consts::TAU * theta)
                })
                .collect();
            if saw_zero {
                symbol_values.push(Complex64::new(0.0, 0.0));
            }
            SymbolicSequence::new(symbols, alphabet, symbol_values)
        }
        QuantizeRule::ValueSet => {
            let mut distinct: Vec<(u64, u64)> = u
                .values
                .iter()
                .map(|z| (z.re.to_bits(), z.im.to_bits()))
                .collect();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() > MAX_ALPHABET as usize {
                return Err(Error::OverflowAlphabet(format!(
                    "{} distinct values exceed the {MAX_ALPHABET}-symbol cap",
                    distinct.len()
                )));
            }
            let mut reps: Vec<Complex64> = distinct
                .iter()
                .map(|&(re, im)| Complex64::new(f64::from_bits(re), f64::from_bits(im)))
                .collect();
            // Sort representatives by value, not bit pattern, so the
            // alphabet order is the natural (re, im) order.
            reps.sort_by(|a, b| {
                a.re.partial_cmp(&b.re)
                    .unwrap()
                    .then(a.im.partial_cmp(&b.im).unwrap())
            });
            let index: BTreeMap<(u64, u64), u32> = reps
                .iter()
                .enumerate()
                .map(|(i, z)| ((z.re.to_bits(), z.im.to_bits()), i as u32))
                .collect();
            let symbols: Vec<u32> = u
                .values
                .iter()
                .map(|z| index[&(z.re.to_bits(), z.im.to_bits())])
                .collect();
            SymbolicSequence::new(symbols, reps.len() as u32, reps)
        }
    }
}

// ---------------------------------------------------------------------------
// Cylinder tables
// ---------------------------------------------------------------------------

/// Empirical frequencies of all blocks of length 1..=k_max over one-sided
/// windows: freq(B) = #{1 ≤ n ≤ N−|B|+1 : s(n..n+|B|) = B} / (N−|B|+1).
#[derive(Clone, Debug)]
pub struct CylinderTable {
    pub k_max: usize,
    pub n: u64,
    pub alphabet_size: u32,
    /// levels[ℓ−1] maps each observed length-ℓ block to its frequency.
    pub levels: Vec<BTreeMap<Vec<u32>, f64>>,
}

impl CylinderTable {
    /// Frequency of a block, 0 if unobserved.
    pub fn freq(&self, block: &[u32]) -> f64 {
        self.levels
            .get(block.len() - 1)
            .and_then(|m| m.get(block))
            .copied()
            .unwrap_or(0.0)
    }

    /// Checks per-level total mass and downward marginal consistency.
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.k_max {
            return Err(Error::invalid("level count must equal k_max"));
        }
        let n = self.n as f64;
        let tol = self.k_max as f64 / n;
        for (li, level) in self.levels.iter().enumerate() {
            let total: f64 = level.values().sum();
            if (total - 1.0).abs() > tol {
                return Err(Error::invalid(format!(
                    "length-{} frequencies sum to {total}, expected 1 within {tol}",
                    li + 1
                )));
            }
        }
        // freq_ℓ(B) and Σ_a freq_{ℓ+1}(B·a) may differ only through the
        // window at the very end of the sample and the denominator shift.
        let marg_tol = 2.0 / (self.n as f64 - self.k_max as f64);
        for li in 0..self.k_max.saturating_sub(1) {
            for (block, &f) in &self.levels[li] {
                let mut ext = 0.0;
                for a in 0..self.alphabet_size {
                    let mut b = block.clone();
                    b.push(a);
                    ext += self.freq(&b);
                }
                if (f - ext).abs() > marg_tol {
                    return Err(Error::invalid(format!(
                        "marginal mismatch at length {}: {f} vs {ext}",
                        li + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// One JSON object per level: `{"k":1,"N":100,"freq":{"0":0.5,...}}`.
    /// Keys are sorted, so the output is byte-deterministic.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (li, level) in self.levels.iter().enumerate() {
            let mut freq = serde_json::Map::new();
            for (block, &f) in level {
                freq.insert(
                    encode_block(block, self.alphabet_size),
                    serde_json::json!(f),
                );
            }
            let obj = serde_json::json!({
                "k": li + 1,
                "N": self.n,
                "freq": serde_json::Value::Object(freq),
            });
            let _ = writeln!(out, "{obj}");
        }
        out
    }
}

/// Symbol-string key for a block: base-36 digits when the alphabet fits,
/// otherwise dot-separated decimal.
pub fn encode_block(block: &[u32], alphabet_size: u32) -> String {
    if alphabet_size <= 36 {
        block
            .iter()
            .map(|&s| char::from_digit(s, 36).unwrap())
            .collect()
    } else {
        block
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

/// Counts all blocks of length 1..=k_max. Dense rolling-code counting keeps
/// this O(k_max · N); the dense table size M^k_max is capped.
pub fn cylinder_frequencies(s: &SymbolicSequence, k_max: usize) -> Result<CylinderTable> {
    s.validate()?;
    if k_max == 0 {
        return Err(Error::invalid("k_max must be >= 1"));
    }
    if k_max > MAX_CYLINDER_LEN {
        return Err(Error::invalid(format!(
            "k_max = {k_max} exceeds the cylinder length cap {MAX_CYLINDER_LEN}"
        )));
    }
    let n = s.len();
    if k_max > n {
        return Err(Error::invalid(format!(
            "k_max = {k_max} exceeds sequence length {n}"
        )));
    }
    let m = s.alphabet_size as u64;
    let mut cells: u64 = 1;
    for _ in 0..k_max {
        cells = cells.saturating_mul(m);
        if cells > MAX_TABLE_CELLS {
            return Err(Error::ResourceLimit(format!(
                "alphabet^k_max = {m}^{k_max} exceeds {MAX_TABLE_CELLS} table cells"
            )));
        }
    }

    let mut levels = Vec::with_capacity(k_max);
    for ell in 1..=k_max {
        let size = m.pow(ell as u32) as usize;
        let mut counts = vec![0u32; size];
        // Rolling code of the current window, most recent symbol lowest.
        let mut code: u64 = 0;
        let modulus = m.pow(ell as u32);
        for (i, &sym) in s.symbols.iter().enumerate() {
            code = (code * m + sym as u64) % modulus;
            if i + 1 >= ell {
                counts[code as usize] += 1;
            }
        }
        let windows = (n - ell + 1) as f64;
        let mut map = BTreeMap::new();
        for (codeval, &c) in counts.iter().enumerate() {
            if c > 0 {
                map.insert(decode_code(codeval as u64, m, ell), c as f64 / windows);
            }
        }
        levels.push(map);
    }
    Ok(CylinderTable {
        k_max,
        n: n as u64,
        alphabet_size: s.alphabet_size,
        levels,
    })
}

fn decode_code(mut code: u64, m: u64, ell: usize) -> Vec<u32> {
    let mut block = vec![0u32; ell];
    for slot in block.iter_mut().rev() {
        *slot = (code % m) as u32;
        code /= m;
    }
    block
}

// ---------------------------------------------------------------------------
// Coupling tables
// ---------------------------------------------------------------------------

/// Joint empirical frequencies of block pairs (B, C) with B read at n and C
/// read at φ(n): freq(B, C) = #{n ≤ N : both windows in range, match} / N.
/// Windows running past the sample are skipped and tallied as edge loss, so
/// per-level masses are (N − skipped)/N rather than exactly 1.
#[derive(Clone, Debug)]
pub struct CouplingTable {
    pub k_max: usize,
    pub n: u64,
    pub alphabet_size: u32,
    /// levels[ℓ−1] maps (B, C) pairs of length ℓ to their joint frequency.
    pub levels: Vec<BTreeMap<(Vec<u32>, Vec<u32>), f64>>,
    /// Windows skipped per level because a window ran out of range.
    pub edge_loss: Vec<u64>,
    /// Per-level law of the first block (sum over C), from the joint.
    pub first_marginals: Vec<BTreeMap<Vec<u32>, f64>>,
    /// Per-level law of the second block (sum over B), from the joint.
    pub second_marginals: Vec<BTreeMap<Vec<u32>, f64>>,
}

impl CouplingTable {
    pub fn freq(&self, b: &[u32], c: &[u32]) -> f64 {
        if b.len() != c.len() {
            return 0.0;
        }
        self.levels
            .get(b.len() - 1)
            .and_then(|m| m.get(&(b.to_vec(), c.to_vec())))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != self.k_max
            || self.edge_loss.len() != self.k_max
            || self.first_marginals.len() != self.k_max
            || self.second_marginals.len() != self.k_max
        {
            return Err(Error::invalid("coupling table arrays must align with k_max"));
        }
        for (li, level) in self.levels.iter().enumerate() {
            let total: f64 = level.values().sum();
            let expected = (self.n - self.edge_loss[li]) as f64 / self.n as f64;
            if (total - expected).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "level {} mass {total} disagrees with admissible-window mass {expected}",
                    li + 1
                )));
            }
            if (total - 1.0).abs() > 2.0 * self.k_max as f64 / self.n as f64 {
                return Err(Error::invalid(format!(
                    "level {} mass {total} lost more than edge effects allow",
                    li + 1
                )));
            }
            for (side, marginal) in [
                (0usize, &self.first_marginals[li]),
                (1, &self.second_marginals[li]),
            ] {
                let mut recount: BTreeMap<&Vec<u32>, f64> = BTreeMap::new();
                for ((b, c), &f) in level {
                    *recount.entry(if side == 0 { b } else { c }).or_insert(0.0) += f;
                }
                if recount.len() != marginal.len()
                    || recount
                        .iter()
                        .any(|(k, v)| (marginal.get(*k).copied().unwrap_or(-1.0) - v).abs() > 1e-12)
                {
                    return Err(Error::invalid(format!(
                        "level {} marginal {side} inconsistent with the joint law",
                        li + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Largest gap between a stored marginal and a cylinder law, over all
    /// blocks at one level. Quantifies the edge-loss drift.
    pub fn marginal_gap(&self, cylinders: &CylinderTable, level: usize, side: usize) -> f64 {
        let marginal = if side == 0 {
            &self.first_marginals[level]
        } else {
            &self.second_marginals[level]
        };
        let mut gap = 0.0f64;
        for (block, &f) in &cylinders.levels[level] {
            let m = marginal.get(block).copied().unwrap_or(0.0);
            gap = gap.max((f - m).abs());
        }
        for (block, &m) in marginal {
            if !cylinders.levels[level].contains_key(block) {
                gap = gap.max(m);
            }
        }
        gap
    }

    /// One JSON object per level with `"B|C"` keys, sorted.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (li, level) in self.levels.iter().enumerate() {
            let mut freq = serde_json::Map::new();
            for ((b, c), &f) in level {
                let key = format!(
                    "{}|{}",
                    encode_block(b, self.alphabet_size),
                    encode_block(c, self.alphabet_size)
                );
                freq.insert(key, serde_json::json!(f));
            }
            let obj = serde_json::json!({
                "k": li + 1,
                "N": self.n,
                "edge_loss": self.edge_loss[li],
                "freq": serde_json::Value::Object(freq),
            });
            let _ = writeln!(out, "{obj}");
        }
        out
    }
}

/// Checks that phi lists each of 1..=N exactly once.
pub fn check_permutation(phi: &[u64], n: usize) -> Result<()> {
    if phi.len() != n {
        return Err(Error::invalid(format!(
            "phi has {} entries, expected {n}",
            phi.len()
        )));
    }
    let mut seen = vec![false; n];
    for &img in phi {
        if img == 0 || img as usize > n {
            return Err(Error::invalid(format!(
                "phi value {img} outside 1..={n}: not a permutation"
            )));
        }
        let slot = &mut seen[img as usize - 1];
        if *slot {
            return Err(Error::invalid(format!(
                "phi repeats value {img}: not a permutation"
            )));
        }
        *slot = true;
    }
    Ok(())
}

/// Builds the joint block law of s at n and at φ(n), for block lengths
/// 1..=k_max. `phi[i]` is the 1-based image of position i+1 and must be a
/// permutation of {1..N}.
pub fn coupling_from_pairs(
    s: &SymbolicSequence,
    phi: &[u64],
    k_max: usize,
) -> Result<CouplingTable> {
    s.validate()?;
    let n = s.len();
    check_permutation(phi, n)?;
    if k_max == 0 || k_max > MAX_CYLINDER_LEN {
        return Err(Error::invalid(format!(
            "k_max = {k_max} outside 1..={MAX_CYLINDER_LEN}"
        )));
    }
    if k_max > n {
        return Err(Error::invalid("k_max exceeds sequence length"));
    }
    let m = s.alphabet_size as u64;
    let mut cells: u64 = 1;
    for _ in 0..k_max {
        cells = cells.saturating_mul(m.saturating_mul(m));
        if cells > MAX_TABLE_CELLS {
            return Err(Error::ResourceLimit(format!(
                "(alphabet^2)^k_max exceeds {MAX_TABLE_CELLS} table cells"
            )));
        }
    }

    let mut levels = Vec::with_capacity(k_max);
    let mut edge_loss = Vec::with_capacity(k_max);
    let mut first_marginals = Vec::with_capacity(k_max);
    let mut second_marginals = Vec::with_capacity(k_max);
    for ell in 1..=k_max {
        let mut map: BTreeMap<(Vec<u32>, Vec<u32>), u64> = BTreeMap::new();
        let mut skipped = 0u64;
        for i in 0..n {
            let target = phi[i] as usize;
            if i + ell > n || target + ell - 1 > n {
                skipped += 1;
                continue;
            }
            let b = s.symbols[i..i + ell].to_vec();
            let c = s.symbols[target - 1..target - 1 + ell].to_vec();
            *map.entry((b, c)).or_insert(0) += 1;
        }
        let denom = n as f64;
        let level: BTreeMap<(Vec<u32>, Vec<u32>), f64> = map
            .into_iter()
            .map(|(k, v)| (k, v as f64 / denom))
            .collect();
        let mut first: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        let mut second: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for ((b, c), &f) in &level {
            *first.entry(b.clone()).or_insert(0.0) += f;
            *second.entry(c.clone()).or_insert(0.0) += f;
        }
        levels.push(level);
        edge_loss.push(skipped);
        first_marginals.push(first);
        second_marginals.push(second);
    }
    Ok(CouplingTable {
        k_max,
        n: n as u64,
        alphabet_size: s.alphabet_size,
        levels,
        edge_loss,
        first_marginals,
        second_marginals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqgen::{gen_liouville, gen_random_signs, gen_skew_sequence};

    fn seq(values: Vec<Complex64>) -> ArithmeticSequence {
        ArithmeticSequence::new("test", values).unwrap()
    }

    #[test]
    fn sign_quantization_maps_minus_to_zero_plus_to_one() {
        let u = gen_liouville(100).unwrap();
        let s = quantize(&u, &QuantizeRule::Signs).unwrap();
        assert_eq!(s.alphabet_size, 2);
        for (z, &sym) in u.values.iter().zip(&s.symbols) {
            assert_eq!(sym, u32::from(z.re > 0.0));
        }
        let bad = seq(vec![Complex64::new(0.5, 0.0)]);
        assert!(quantize(&bad, &QuantizeRule::Signs).is_err());
    }

    #[test]
    fn phase_bins_follow_floor_of_scaled_angle() {
        let theta = 0.618;
        let u = seq(vec![Complex64::from_polar(
            1.0,
            std::f64::consts::TAU * theta,
        )]);
        let s = quantize(&u, &QuantizeRule::PhaseBins(8)).unwrap();
        assert_eq!(s.symbols, vec![4], "floor(8 * 0.618) = 4");
        assert_eq!(s.alphabet_size, 8, "no zeros, no extra symbol");

        let with_zero = seq(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        let s2 = quantize(&with_zero, &QuantizeRule::PhaseBins(8)).unwrap();
        assert_eq!(s2.symbols, vec![0, 8], "zero goes to the extra symbol");
        assert_eq!(s2.alphabet_size, 9);
        assert_eq!(s2.symbol_values[8], Complex64::new(0.0, 0.0));

        let bad = seq(vec![Complex64::new(0.5, 0.0)]);
        assert!(quantize(&bad, &QuantizeRule::PhaseBins(8)).is_err());
    }

    #[test]
    fn phase_bins_cover_skew_sequence() {
        let u = gen_skew_sequence(0.6180339887498949, 12).unwrap();
        let s = quantize(&u, &QuantizeRule::PhaseBins(DEFAULT_PHASE_BINS)).unwrap();
        assert_eq!(s.len(), u.len());
        assert!(s.symbols.iter().all(|&x| x < 16));
    }

    #[test]
    fn value_set_alphabet_is_sorted_distinct_values() {
        let u = seq(vec![
            Complex64::new(0.5, 0.0),
            Complex64::new(-0.5, 0.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, 1.0),
        ]);
        let s = quantize(&u, &QuantizeRule::ValueSet).unwrap();
        assert_eq!(s.alphabet_size, 3);
        assert_eq!(s.symbol_values[0], Complex64::new(-0.5, 0.0));
        assert_eq!(s.symbol_values[1], Complex64::new(0.0, 1.0));
        assert_eq!(s.symbol_values[2], Complex64::new(0.5, 0.0));
        assert_eq!(s.symbols, vec![2, 0, 2, 1]);
    }

    #[test]
    fn value_set_overflows_on_rich_input() {
        let values: Vec<Complex64> = (0..300)
            .map(|k| Complex64::new(k as f64 / 300.0, 0.0))
            .collect();
        let u = seq(values);
        assert!(matches!(
            quantize(&u, &QuantizeRule::ValueSet),
            Err(Error::OverflowAlphabet(_))
        ));
    }

    #[test]
    fn cylinder_counts_on_alternating_sequence() {
        // s = 0 1 0 1 0 1 0 1 (N = 8)
        let s = SymbolicSequence::new(
            vec![0, 1, 0, 1, 0, 1, 0, 1],
            2,
            vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        let t = cylinder_frequencies(&s, 3).unwrap();
        assert_eq!(t.freq(&[0]), 0.5);
        assert_eq!(t.freq(&[1]), 0.5);
        // Length 2: 7 windows, "01" at 4 starts, "10" at 3.
        assert_eq!(t.freq(&[0, 1]), 4.0 / 7.0);
        assert_eq!(t.freq(&[1, 0]), 3.0 / 7.0);
        assert_eq!(t.freq(&[0, 0]), 0.0);
        // Length 3: 6 windows, "010" at 3, "101" at 3.
        assert_eq!(t.freq(&[0, 1, 0]), 0.5);
        assert_eq!(t.freq(&[1, 0, 1]), 0.5);
        t.validate().unwrap();
    }

    #[test]
    fn cylinder_masses_sum_to_one_per_level() {
        let u = gen_random_signs(5_000, 2).unwrap();
        let s = quantize(&u, &QuantizeRule::Signs).unwrap();
        let t = cylinder_frequencies(&s, 6).unwrap();
        for level in &t.levels {
            let total: f64 = level.values().sum();
            assert!((total - 1.0).abs() < 1e-12, "per-level mass is exact");
        }
        t.validate().unwrap();
    }

    #[test]
    fn cylinder_guards_reject_oversized_requests() {
        let s = SymbolicSequence::new(
            vec![0; 100],
            200,
            vec![Complex64::new(0.0, 0.0); 200],
        )
        .unwrap();
        assert!(matches!(
            cylinder_frequencies(&s, 4),
            Err(Error::ResourceLimit(_))
        ));
        let tiny = SymbolicSequence::new(
            vec![0, 1],
            2,
            vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        assert!(cylinder_frequencies(&tiny, 13).is_err());
        assert!(cylinder_frequencies(&tiny, 3).is_err(), "k_max > N");
    }

    #[test]
    fn cylinder_frequencies_are_shift_stable() {
        let u = gen_random_signs(4_000, 9).unwrap();
        let s = quantize(&u, &QuantizeRule::Signs).unwrap();
        let shifted = SymbolicSequence::new(
            s.symbols[1..].to_vec(),
            s.alphabet_size,
            s.symbol_values.clone(),
        )
        .unwrap();
        let t1 = cylinder_frequencies(&s, 4).unwrap();
        let t2 = cylinder_frequencies(&shifted, 4).unwrap();
        let n = s.len() as f64;
        for (level1, level2) in t1.levels.iter().zip(&t2.levels) {
            for (block, &f1) in level1 {
                let f2 = level2.get(block).copied().unwrap_or(0.0);
                assert!(
                    (f1 - f2).abs() <= 2.0 / n,
                    "dropping one symbol moved freq({block:?}) by {}",
                    (f1 - f2).abs()
                );
            }
        }
    }

    #[test]
    fn identity_coupling_is_diagonal() {
        let u = gen_random_signs(2_000, 4).unwrap();
        let s = quantize(&u, &QuantizeRule::Signs).unwrap();
        let phi: Vec<u64> = (1..=s.len() as u64).collect();
        let t = coupling_from_pairs(&s, &phi, 3).unwrap();
        t.validate().unwrap();
        for level in &t.levels {
            for ((b, c), &f) in level {
                assert!(f > 0.0);
                assert_eq!(b, c, "identity map couples every block with itself");
            }
        }
        // Level ℓ loses exactly ℓ−1 windows at the right edge.
        assert_eq!(t.edge_loss, vec![0, 1, 2]);
    }

    #[test]
    fn coupling_counts_respect_explicit_map() {
        // s = 0 1 0 1; φ is the cyclic shift n ↦ n+1 (4 ↦ 1).
        let s = SymbolicSequence::new(
            vec![0, 1, 0, 1],
            2,
            vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        let phi = vec![2, 3, 4, 1];
        let t = coupling_from_pairs(&s, &phi, 2).unwrap();
        assert_eq!(t.edge_loss, vec![0, 2], "n=4 B-window and phi(3)=4 C-window overrun");
        // Length 1: every index pairs its symbol with the next one's.
        assert_eq!(t.freq(&[0], &[1]), 0.5);
        assert_eq!(t.freq(&[1], &[0]), 0.5);
        assert_eq!(t.freq(&[0], &[0]), 0.0);
        t.validate().unwrap();

        assert!(
            coupling_from_pairs(&s, &[2, 3, 4, 4], 1).is_err(),
            "repeated value is not a permutation"
        );
        assert!(
            coupling_from_pairs(&s, &[2, 3, 4, 5], 1).is_err(),
            "out-of-range value is not a permutation"
        );
    }

    #[test]
    fn coupling_marginals_match_cylinder_law_up_to_edge_loss() {
        let u = gen_random_signs(3_000, 6).unwrap();
        let s = quantize(&u, &QuantizeRule::Signs).unwrap();
        let phi: Vec<u64> = (1..=s.len() as u64).collect();
        let coupling = coupling_from_pairs(&s, &phi, 2).unwrap();
        let cylinders = cylinder_frequencies(&s, 2).unwrap();
        let n = s.len() as f64;
        for level in 0..2 {
            for side in 0..2 {
                let gap = coupling.marginal_gap(&cylinders, level, side);
                assert!(
                    gap <= 3.0 * coupling.k_max as f64 / n,
                    "marginal {side} at level {level} drifts by {gap}"
                );
            }
        }
    }

    #[test]
    fn json_lines_are_deterministic_and_carry_level_headers() {
        let s = SymbolicSequence::new(
            vec![0, 1, 0],
            2,
            vec![Complex64::new(-1.0, 0.0), Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        let t = cylinder_frequencies(&s, 2).unwrap();
        let a = t.to_json_lines();
        let b = t.to_json_lines();
        assert_eq!(a, b);
        let first: serde_json::Value = a.lines().next().unwrap().parse::<String>().ok()
            .and_then(|l| serde_json::from_str(&l).ok())
            .unwrap();
        assert_eq!(first["k"], 1);
        assert_eq!(first["N"], 3);
        assert!(first["freq"].get("0").is_some());
    }

    #[test]
    fn block_keys_use_base36_then_dotted_decimal() {
        assert_eq!(encode_block(&[0, 1, 10], 36), "01a");
        assert_eq!(encode_block(&[0, 1, 40], 40), "0.1.40");
    }
}
