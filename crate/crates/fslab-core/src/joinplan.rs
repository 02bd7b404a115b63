//! Integer coupling allocation, permutation construction over Rokhlin
//! towers, and the empirical self-joining pipeline.
//!
//! The chain: a target coupling λ of an empirical measure κ is rounded to
//! integer cell counts (`coupling_allocate`), the counts are realized as a
//! permutation of {1..N} pairing index sets atom by atom
//! (`build_permutation`), and the tower-aware variant threads the pairing
//! through the levels of a Rokhlin tower so the permutation commutes with
//! the index shift off a small defect set (`build_dynamic_permutation`).
//! `self_joining_pipeline` iterates that over a refining schedule of
//! partitions, producing locally orbital permutations whose empirical pair
//! statistics approximate the target self-joining.

use std::collections::BTreeMap;
use std::io::{Read as IoRead, Write as IoWrite};

use rayon::prelude::*;
use serde::Serialize;

use crate::correlate::{Averaging, StatReport};
use crate::empirics::{check_permutation, coupling_from_pairs, QuantizeRule, SymbolicSequence};
use crate::error::Error;
use crate::seqgen::ArithmeticSequence;
use crate::util::{frac_prod, KahanSum};
use crate::Result;

/// Marginal consistency tolerance for coupling targets.
pub const MARGINAL_TOL: f64 = 1e-9;
/// Level value marking indices not covered by a tower.
pub const OUTSIDE_LEVEL: u32 = u32::MAX;
/// Short-return budget for the subshift tower base: the fraction of base
/// visits whose next visit arrives in under h steps may not exceed this.
pub const SUBSHIFT_RETURN_BUDGET: f64 = 0.2;
/// Cap on derived-partition atoms; the feasibility scan is O(atoms²).
pub const MAX_DYNAMIC_ATOMS: usize = 4000;
/// Cap on distinct cells in pairwise word tables.
pub const MAX_PAIR_CELLS: usize = 10_000_000;
/// Magic prefix of the permutation plan binary format.
pub const PLAN_MAGIC: &[u8; 8] = b"FSPERM01";

// ---------------------------------------------------------------------------
// Coupling specification and integer allocation
// ---------------------------------------------------------------------------

/// A target 2-fold coupling: masses κ_i > 0 summing to 1 and a nonnegative
/// matrix λ with both marginals equal to κ.
#[derive(Clone, Debug)]
pub struct CouplingSpec {
    pub kappa: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl CouplingSpec {
    pub fn new(kappa: Vec<f64>, lambda: Vec<Vec<f64>>, epsilon: f64) -> Result<Self> {
        let spec = CouplingSpec {
            kappa,
            lambda,
            epsilon,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// λ = κ ⊗ κ, the independent coupling.
    pub fn product(kappa: Vec<f64>, epsilon: f64) -> Result<Self> {
        let lambda = kappa
            .iter()
            .map(|a| kappa.iter().map(|b| a * b).collect())
            .collect();
        CouplingSpec::new(kappa, lambda, epsilon)
    }

    /// λ = diag(κ), the identity coupling.
    pub fn diagonal(kappa: Vec<f64>, epsilon: f64) -> Result<Self> {
        let m = kappa.len();
        let lambda = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { kappa[i] } else { 0.0 })
                    .collect()
            })
            .collect();
        CouplingSpec::new(kappa, lambda, epsilon)
    }

    pub fn m(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::invalid("coupling needs at least one atom"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be a positive real, got {}",
                self.epsilon
            )));
        }
        let mut total = KahanSum::new();
        for (i, k) in self.kappa.iter().enumerate() {
            if !(*k > 0.0) {
                return Err(Error::invalid(format!(
                    "kappa[{i}] = {k}, every atom needs positive mass"
                )));
            }
            total.add(*k);
        }
        if (total.value() - 1.0).abs() > MARGINAL_TOL {
            return Err(Error::invalid(format!(
                "kappa sums to {}, expected 1",
                total.value()
            )));
        }
        if self.lambda.len() != m {
            return Err(Error::invalid("lambda row count differs from atom count"));
        }
        let mut col_sums = vec![KahanSum::new(); m];
        for (i, row) in self.lambda.iter().enumerate() {
            if row.len() != m {
                return Err(Error::invalid(format!(
                    "lambda row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            let mut row_sum = KahanSum::new();
            for (j, l) in row.iter().enumerate() {
                if !(*l >= 0.0) {
                    return Err(Error::invalid(format!("lambda[{i}][{j}] = {l} is negative")));
                }
                row_sum.add(*l);
                col_sums[j].add(*l);
            }
            if (row_sum.value() - self.kappa[i]).abs() > MARGINAL_TOL {
                return Err(Error::invalid(format!(
                    "lambda row {i} sums to {}, kappa[{i}] = {}",
                    row_sum.value(),
                    self.kappa[i]
                )));
            }
        }
        for (j, c) in col_sums.iter().enumerate() {
            if (c.value() - self.kappa[j]).abs() > MARGINAL_TOL {
                return Err(Error::invalid(format!(
                    "lambda column {j} sums to {}, kappa[{j}] = {}",
                    c.value(),
                    self.kappa[j]
                )));
            }
        }
        Ok(())
    }

    /// Smallest N accepted by the sample-size precondition: every positive
    /// cell must satisfy N ≥ 1/(ε·λ_{ij}).
    pub fn n_large(&self) -> u64 {
        let mut worst = 0.0f64;
        for row in &self.lambda {
            for l in row {
                if *l > 0.0 {
                    worst = worst.max(1.0 / (self.epsilon * l));
                }
            }
        }
        worst.ceil() as u64
    }
}

/// Integer cell counts rounded from a coupling target.
#[derive(Clone, Debug)]
pub struct AllocationMatrix {
    pub v: Vec<u64>,
    pub n: u64,
    pub v_ij: Vec<Vec<u64>>,
    pub kappa: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl AllocationMatrix {
    /// Re-verifies the cell bound |V_{ij}/N − λ_{ij}| ≤ 2ε·λ_{ij} and both
    /// capacity rows Σ_j V_{ij} ≤ V_i, Σ_i V_{ij} ≤ V_j. The comparisons
    /// carry a 1e-12 relative guard for the float evaluation of what is an
    /// exact real inequality.
    pub fn check_conditions(&self) -> Result<()> {
        let m = self.v.len();
        let n = self.n as f64;
        for i in 0..m {
            for j in 0..m {
                let lam = self.lambda[i][j];
                let dev = (self.v_ij[i][j] as f64 / n - lam).abs();
                if dev > 2.0 * self.epsilon * lam + 1e-12 * (1.0 + lam) {
                    return Err(Error::invalid(format!(
                        "cell ({i},{j}): |V/N − lambda| = {dev} exceeds 2·eps·lambda = {}",
                        2.0 * self.epsilon * lam
                    )));
                }
            }
        }
        for i in 0..m {
            let row: u64 = self.v_ij[i].iter().sum();
            if row > self.v[i] {
                return Err(Error::invalid(format!(
                    "row {i} allocates {row} indices, only {} available",
                    self.v[i]
                )));
            }
        }
        for j in 0..m {
            let col: u64 = (0..m).map(|i| self.v_ij[i][j]).sum();
            if col > self.v[j] {
                return Err(Error::invalid(format!(
                    "column {j} receives {col} indices, only {} available",
                    self.v[j]
                )));
            }
        }
        Ok(())
    }
}

/// Rounds the coupling λ to integer counts V_{ij} = min(⌊V_i λ_{ij}/κ_i⌋,
/// ⌊V_j λ_{ij}/κ_j⌋). Deterministic in its inputs; the preconditions are
/// reported by the exact inequality that failed.
pub fn coupling_allocate(spec: &CouplingSpec, v: &[u64], n: u64) -> Result<AllocationMatrix> {
    spec.validate()?;
    let m = spec.m();
    if v.len() != m {
        return Err(Error::invalid(format!(
            "{} atom counts for {m} atoms",
            v.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("N must be positive"));
    }
    let nf = n as f64;
    for i in 0..m {
        let dev = (v[i] as f64 / nf - spec.kappa[i]).abs();
        if dev > spec.epsilon * spec.kappa[i] {
            return Err(Error::insufficient(format!(
                "|V[{i}]/N − kappa[{i}]| = {dev} exceeds eps·kappa[{i}] = {}",
                spec.epsilon * spec.kappa[i]
            )));
        }
    }
    for i in 0..m {
        for j in 0..m {
            let lam = spec.lambda[i][j];
            if lam > 0.0 && nf < 1.0 / (spec.epsilon * lam) {
                return Err(Error::insufficient(format!(
                    "N = {n} is below 1/(eps·lambda[{i}][{j}]) = {}",
                    1.0 / (spec.epsilon * lam)
                )));
            }
        }
    }
    let v_ij = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let lam = spec.lambda[i][j];
                    let a = (v[i] as f64 * lam / spec.kappa[i]).floor();
                    let b = (v[j] as f64 * lam / spec.kappa[j]).floor();
                    a.min(b) as u64
                })
                .collect()
        })
        .collect();
    let alloc = AllocationMatrix {
        v: v.to_vec(),
        n,
        v_ij,
        kappa: spec.kappa.clone(),
        lambda: spec.lambda.clone(),
        epsilon: spec.epsilon,
    };
    alloc.check_conditions()?;
    Ok(alloc)
}

// ---------------------------------------------------------------------------
// Permutation plans
// ---------------------------------------------------------------------------

/// A permutation φ of {1..N} with its defect count
/// #{n < N : φ(n+1) ≠ φ(n)+1} — the breaks in shift-equivariance.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationPlan {
    pub phi: Vec<u64>,
    pub defect_count: u64,
}

fn recount_defects(phi: &[u64]) -> u64 {
    phi.windows(2).filter(|w| w[1] != w[0] + 1).count() as u64
}

impl PermutationPlan {
    pub fn from_phi(phi: Vec<u64>) -> Result<Self> {
        check_permutation(&phi, phi.len())?;
        let defect_count = recount_defects(&phi);
        Ok(PermutationPlan { phi, defect_count })
    }

    pub fn n(&self) -> usize {
        self.phi.len()
    }

    /// φ(n) for 1-based n.
    pub fn image(&self, n: u64) -> u64 {
        self.phi[(n - 1) as usize]
    }

    pub fn defect_fraction(&self) -> f64 {
        if self.phi.is_empty() {
            0.0
        } else {
            self.defect_count as f64 / self.phi.len() as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_permutation(&self.phi, self.phi.len())?;
        let recount = recount_defects(&self.phi);
        if recount != self.defect_count {
            return Err(Error::invalid(format!(
                "defect count {} disagrees with recount {recount}",
                self.defect_count
            )));
        }
        Ok(())
    }

    pub fn write_binary<W: IoWrite>(&self, mut w: W) -> Result<()> {
        w.write_all(PLAN_MAGIC)?;
        w.write_all(&(self.phi.len() as u64).to_le_bytes())?;
        for p in &self.phi {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: IoRead>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::CacheError(format!("plan header unreadable: {e}")))?;
        if &magic != PLAN_MAGIC {
            return Err(Error::CacheError(
                "plan file does not start with the expected magic".into(),
            ));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)
            .map_err(|e| Error::CacheError(format!("plan length unreadable: {e}")))?;
        let n = u64::from_le_bytes(len8) as usize;
        let mut phi = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|e| Error::CacheError(format!("plan body truncated: {e}")))?;
            phi.push(u64::from_le_bytes(buf));
        }
        PermutationPlan::from_phi(phi)
    }

    pub fn write_binary_path(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(f))
    }

    pub fn read_binary_path(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        PermutationPlan::read_binary(std::io::BufReader::new(f))
    }
}

/// Builds φ from an allocation: for each cell (i, j) in row-major order the
/// lowest V_{ij} unused indices of atom i map, in increasing order, onto the
/// lowest V_{ij} unused indices of atom j; leftovers pair sorted-to-sorted.
pub fn build_permutation(alloc: &AllocationMatrix, atom_of: &[u32]) -> Result<PermutationPlan> {
    let m = alloc.v.len();
    let n = atom_of.len();
    if n as u64 != alloc.n {
        return Err(Error::invalid(format!(
            "{n} labels for an allocation over N = {}",
            alloc.n
        )));
    }
    let mut members: Vec<Vec<u64>> = vec![Vec::new(); m];
    for (idx, a) in atom_of.iter().enumerate() {
        if *a as usize >= m {
            return Err(Error::invalid(format!(
                "label {a} at index {} is outside the {m} atoms",
                idx + 1
            )));
        }
        members[*a as usize].push(idx as u64 + 1);
    }
    for i in 0..m {
        if members[i].len() as u64 != alloc.v[i] {
            return Err(Error::invalid(format!(
                "atom {i} has {} indices, allocation expects {}",
                members[i].len(),
                alloc.v[i]
            )));
        }
    }
    let mut phi = vec![0u64; n];
    let mut src_next = vec![0usize; m];
    let mut tgt_next = vec![0usize; m];
    // Sources and targets draw from the same member lists through separate
    // cursors; C2/C3 guarantee neither runs out.
    let mut tgt_taken: Vec<Vec<u64>> = vec![Vec::new(); m];
    for i in 0..m {
        for j in 0..m {
            let take = alloc.v_ij[i][j] as usize;
            for t in 0..take {
                let s = members[i][src_next[i] + t];
                let d = members[j][tgt_next[j] + t];
                phi[(s - 1) as usize] = d;
            }
            src_next[i] += take;
            tgt_taken[j].push(alloc.v_ij[i][j]);
            tgt_next[j] += take;
        }
    }
    let mut free_src: Vec<u64> = Vec::new();
    for i in 0..m {
        free_src.extend_from_slice(&members[i][src_next[i]..]);
    }
    free_src.sort_unstable();
    let mut free_tgt: Vec<u64> = Vec::new();
    for j in 0..m {
        free_tgt.extend_from_slice(&members[j][tgt_next[j]..]);
    }
    free_tgt.sort_unstable();
    for (s, d) in free_src.iter().zip(free_tgt.iter()) {
        phi[(*s - 1) as usize] = *d;
    }
    PermutationPlan::from_phi(phi)
}

/// Max over atom cells of |(1/N)#{n : atom(n)=i, atom(φ(n))=j} − λ_{ij}|.
pub fn empirical_cell_error(phi: &[u64], atom_of: &[u32], lambda: &[Vec<f64>]) -> f64 {
    let m = lambda.len();
    let n = phi.len();
    let mut counts = vec![0u64; m * m];
    for (idx, target) in phi.iter().enumerate() {
        let a = atom_of[idx] as usize;
        let b = atom_of[(*target - 1) as usize] as usize;
        counts[a * m + b] += 1;
    }
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let freq = counts[i * m + j] as f64 / n as f64;
            worst = worst.max((freq - lambda[i][j]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Rokhlin towers
// ---------------------------------------------------------------------------

/// Per-index tower levels: `levels[n-1]` is the level of index n, or
/// [`OUTSIDE_LEVEL`]. Columns are complete: a level-j index with j ≤ h−2 is
/// always followed by j+1, and every level j > 0 is preceded by j−1.
#[derive(Clone, Debug)]
pub struct TowerAssignment {
    pub height: usize,
    pub levels: Vec<u32>,
    pub outside_fraction: f64,
    /// The in-measure deficiency budget the construction aimed for.
    pub declared_epsilon: f64,
    /// Set when the realized outside fraction exceeds the declared budget.
    pub flagged: bool,
}

impl TowerAssignment {
    pub fn validate(&self) -> Result<()> {
        let h = self.height;
        if h == 0 {
            return Err(Error::InvalidTower("height must be positive".into()));
        }
        let n = self.levels.len();
        let mut outside = 0u64;
        for (i, l) in self.levels.iter().enumerate() {
            if *l == OUTSIDE_LEVEL {
                outside += 1;
                continue;
            }
            if *l as usize >= h {
                return Err(Error::InvalidTower(format!(
                    "index {}: level {l} with height {h}",
                    i + 1
                )));
            }
            if (*l as usize) <= h.saturating_sub(2) {
                let next = self.levels.get(i + 1).copied();
                if i + 1 < n && next != Some(*l + 1) {
                    return Err(Error::InvalidTower(format!(
                        "index {}: level {l} not followed by {}",
                        i + 1,
                        l + 1
                    )));
                }
                if i + 1 == n {
                    return Err(Error::InvalidTower(format!(
                        "index {}: column cut off at level {l}",
                        i + 1
                    )));
                }
            }
            if *l > 0 && (i == 0 || self.levels[i - 1] != *l - 1) {
                return Err(Error::InvalidTower(format!(
                    "index {}: level {l} not preceded by {}",
                    i + 1,
                    l - 1
                )));
            }
        }
        let fraction = outside as f64 / n.max(1) as f64;
        if (fraction - self.outside_fraction).abs() > 1e-12 {
            return Err(Error::InvalidTower(format!(
                "outside fraction {} disagrees with recount {fraction}",
                self.outside_fraction
            )));
        }
        Ok(())
    }

    /// 1-based base indices of complete columns, ascending.
    pub fn column_bases(&self) -> Vec<u64> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == 0)
            .map(|(i, _)| i as u64 + 1)
            .collect()
    }
}

/// Trims cut-off columns at both ends (head indices sitting above level 0,
/// tail indices below the top), then seals the assignment.
fn finish_tower(height: usize, mut levels: Vec<u32>, declared_epsilon: f64) -> TowerAssignment {
    let h = height as u32;
    for l in levels.iter_mut() {
        if *l == OUTSIDE_LEVEL {
            break;
        }
        if *l >= 1 && *l <= h - 1 {
            *l = OUTSIDE_LEVEL;
        } else {
            break;
        }
    }
    for l in levels.iter_mut().rev() {
        if *l == OUTSIDE_LEVEL {
            break;
        }
        if h >= 2 && *l <= h - 2 {
            *l = OUTSIDE_LEVEL;
        } else {
            break;
        }
    }
    let outside = levels.iter().filter(|l| **l == OUTSIDE_LEVEL).count();
    let outside_fraction = outside as f64 / levels.len().max(1) as f64;
    TowerAssignment {
        height,
        levels,
        outside_fraction,
        declared_epsilon,
        flagged: outside_fraction > declared_epsilon,
    }
}

/// Tower over the rotation orbit x_n = frac(n·α): level j is the arc
/// [frac(jα), frac(jα)+δ). The h arcs must be pairwise disjoint mod 1.
pub fn build_tower_rotation(alpha: f64, h: usize, delta: f64, n: usize) -> Result<TowerAssignment> {
    if h == 0 || n == 0 {
        return Err(Error::invalid("height and length must be positive"));
    }
    if !(delta > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("delta must be positive and alpha finite"));
    }
    if delta * h as f64 >= 1.0 {
        return Err(Error::InvalidTower(format!(
            "h·delta = {} leaves no room outside the tower",
            delta * h as f64
        )));
    }
    let bases: Vec<f64> = (0..h).map(|j| frac_prod(j as f64, alpha, 0.0)).collect();
    for j in 0..h {
        for k in 0..j {
            let fwd = frac_prod(1.0, bases[j] - bases[k], 0.0);
            let bwd = frac_prod(1.0, bases[k] - bases[j], 0.0);
            if fwd < delta || bwd < delta {
                return Err(Error::InvalidTower(format!(
                    "levels {k} and {j} overlap: arc distance {}",
                    fwd.min(bwd)
                )));
            }
        }
    }
    let mut levels = vec![OUTSIDE_LEVEL; n];
    for (i, l) in levels.iter_mut().enumerate() {
        let x = frac_prod((i + 1) as f64, alpha, 0.0);
        for (j, b) in bases.iter().enumerate() {
            let d = frac_prod(1.0, x - b, 0.0);
            if d < delta {
                *l = j as u32;
                break;
            }
        }
    }
    let tower = finish_tower(h, levels, 1.0 - delta * h as f64);
    tower.validate()?;
    Ok(tower)
}

/// Tower over a symbol stream: base visits are occurrences of `base_block`,
/// thinned to gaps ≥ max(h, |B|); each inter-visit gap is sliced into full
/// height-h runs, the remainder left outside. Fails if the thinning drops
/// more than [`SUBSHIFT_RETURN_BUDGET`] of the non-overlapping visits.
pub fn build_tower_subshift(symbols: &[u32], base_block: &[u32], h: usize) -> Result<TowerAssignment> {
    let n = symbols.len();
    let b = base_block.len();
    if h == 0 || b == 0 {
        return Err(Error::invalid("height and base block must be nonempty"));
    }
    if n < b {
        return Err(Error::InvalidTower(
            "stream shorter than the base block".into(),
        ));
    }
    // Non-overlapping occurrences, greedily from the left.
    let mut visits: Vec<usize> = Vec::new();
    let mut i = 0usize;
    while i + b <= n {
        if symbols[i..i + b] == *base_block {
            visits.push(i);
            i += b;
        } else {
            i += 1;
        }
    }
    if visits.is_empty() {
        return Err(Error::InvalidTower(
            "base block never occurs in the stream".into(),
        ));
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = 0usize;
    for v in &visits {
        match kept.last() {
            Some(prev) if v - prev < h => dropped += 1,
            _ => kept.push(*v),
        }
    }
    let short_fraction = dropped as f64 / visits.len() as f64;
    if short_fraction > SUBSHIFT_RETURN_BUDGET {
        return Err(Error::InvalidTower(format!(
            "{short_fraction:.3} of base visits return in under {h} steps"
        )));
    }
    let mut levels = vec![OUTSIDE_LEVEL; n];
    for (k, v) in kept.iter().enumerate() {
        let gap_end = if k + 1 < kept.len() { kept[k + 1] } else { n };
        let full = (gap_end - v) / h;
        for r in 0..full * h {
            levels[v + r] = (r % h) as u32;
        }
    }
    let tower = finish_tower(h, levels, SUBSHIFT_RETURN_BUDGET);
    tower.validate()?;
    Ok(tower)
}

/// Index tower: level(n) = (n−1) mod h over the longest prefix made of
/// complete columns; the tail stays outside. The scaffold the pipeline uses.
pub fn build_index_tower(n: usize, h: usize) -> Result<TowerAssignment> {
    if h == 0 || n == 0 {
        return Err(Error::invalid("height and length must be positive"));
    }
    if n < h {
        return Err(Error::InvalidTower(format!(
            "cannot stack a height-{h} tower on {n} indices"
        )));
    }
    let covered = n - n % h;
    let mut levels = vec![OUTSIDE_LEVEL; n];
    for (i, l) in levels.iter_mut().enumerate().take(covered) {
        *l = (i % h) as u32;
    }
    let tower = finish_tower(h, levels, (h as f64 - 1.0) / n as f64 + f64::EPSILON);
    tower.validate()?;
    Ok(tower)
}

// ---------------------------------------------------------------------------
// Target joinings over derived atoms
// ---------------------------------------------------------------------------

/// How the target self-joining is generated from the sequence's own
/// empirical measure. Arbitrary tables are not accepted: only targets whose
/// marginals equal the empirical masses by construction.
#[derive(Clone, Debug)]
pub enum LambdaKind {
    /// κ ⊗ κ.
    Product,
    /// diag(κ).
    Diagonal,
    /// The cyclic joint law of (atom(n), atom(n+m)) along the stream.
    ShiftedDiagonal(usize),
    /// A convex blend of the above; weights must sum to 1.
    Mixture(Vec<(f64, LambdaKind)>),
}

impl LambdaKind {
    pub fn label(&self) -> String {
        match self {
            LambdaKind::Product => "product".into(),
            LambdaKind::Diagonal => "diagonal".into(),
            LambdaKind::ShiftedDiagonal(m) => format!("shifted_diagonal({m})"),
            LambdaKind::Mixture(parts) => {
                let inner: Vec<String> = parts
                    .iter()
                    .map(|(w, k)| format!("{w}*{}", k.label()))
                    .collect();
                format!("mixture({})", inner.join("+"))
            }
        }
    }
}

/// Evaluated target: κ plus a λ accessor that never materializes the dense
/// matrix for the product case.
enum LambdaTable {
    Product,
    Diagonal,
    Sparse(BTreeMap<(u32, u32), f64>),
    Blend(Vec<(f64, LambdaTable)>),
}

impl LambdaTable {
    fn get(&self, kappa: &[f64], a: u32, b: u32) -> f64 {
        match self {
            LambdaTable::Product => kappa[a as usize] * kappa[b as usize],
            LambdaTable::Diagonal => {
                if a == b {
                    kappa[a as usize]
                } else {
                    0.0
                }
            }
            LambdaTable::Sparse(cells) => cells.get(&(a, b)).copied().unwrap_or(0.0),
            LambdaTable::Blend(parts) => parts
                .iter()
                .map(|(w, t)| w * t.get(kappa, a, b))
                .sum(),
        }
    }
}

fn build_lambda_table(kind: &LambdaKind, stream: &[u32], m: usize, nested: bool) -> Result<LambdaTable> {
    match kind {
        LambdaKind::Product => Ok(LambdaTable::Product),
        LambdaKind::Diagonal => Ok(LambdaTable::Diagonal),
        LambdaKind::ShiftedDiagonal(s) => {
            let n = stream.len();
            if *s == 0 || *s >= n {
                return Err(Error::invalid(format!(
                    "shift {s} must lie in [1, {})",
                    n
                )));
            }
            let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for i in 0..n {
                let a = stream[i];
                let b = stream[(i + s) % n];
                *cells.entry((a, b)).or_insert(0) += 1;
            }
            let nf = n as f64;
            Ok(LambdaTable::Sparse(
                cells
                    .into_iter()
                    .map(|(k, c)| (k, c as f64 / nf))
                    .collect(),
            ))
        }
        LambdaKind::Mixture(parts) => {
            if nested {
                return Err(Error::invalid("mixtures do not nest"));
            }
            if parts.is_empty() {
                return Err(Error::invalid("mixture needs at least one component"));
            }
            let total: f64 = parts.iter().map(|(w, _)| *w).sum();
            if (total - 1.0).abs() > MARGINAL_TOL || parts.iter().any(|(w, _)| *w < 0.0) {
                return Err(Error::invalid(
                    "mixture weights must be nonnegative and sum to 1",
                ));
            }
            let built = parts
                .iter()
                .map(|(w, k)| Ok((*w, build_lambda_table(k, stream, m, true)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LambdaTable::Blend(built))
        }
    }
}

// ---------------------------------------------------------------------------
// Dynamic (tower-compatible) permutations
// ---------------------------------------------------------------------------

/// A dynamic permutation with its per-construction bookkeeping: which pairs
/// were placed by the tower runs, the realized label-pair error, and the
/// defect budget 4ε + 2/h + 2/N it was built against.
#[derive(Clone, Debug)]
pub struct DynamicOutcome {
    pub plan: PermutationPlan,
    /// True where (n, φ(n)) was placed by a tower run, false on complement.
    pub assigned: Vec<bool>,
    pub atoms: usize,
    pub sup_q_error: f64,
    pub defect_fraction: f64,
    pub defect_bound: f64,
    pub ti_violations: u64,
}

/// Counts indices where a run-placed pair with both coordinates strictly
/// below the top level fails to continue: φ(n+1) ≠ φ(n)+1.
pub fn ti_violation_count(plan: &PermutationPlan, assigned: &[bool], tower: &TowerAssignment) -> u64 {
    let n = plan.n();
    let top = tower.height as u32 - 1;
    let mut bad = 0u64;
    for i in 0..n.saturating_sub(1) {
        if !assigned[i] {
            continue;
        }
        let ls = tower.levels[i];
        if ls == OUTSIDE_LEVEL || ls >= top {
            continue;
        }
        let t = plan.phi[i];
        let lt = tower.levels[(t - 1) as usize];
        if lt == OUTSIDE_LEVEL || lt >= top {
            continue;
        }
        if plan.phi[i + 1] != t + 1 {
            bad += 1;
        }
    }
    bad
}

struct DerivedAtoms {
    /// Dense atom id per index; u32::MAX outside the tower.
    atom_of: Vec<u32>,
    /// (level, label) per dense atom.
    descr: Vec<(u32, u32)>,
    counts: Vec<u64>,
    /// In-tower atom ids in index order, the stream the λ builders read.
    stream: Vec<u32>,
    n_eff: u64,
}

/// Partition atoms: (tower level, Q-label at the index). Outside indices are
/// excluded; they can only ever land in the complement pairing.
fn derive_atoms(labels: &[u32], tower: &TowerAssignment) -> Result<DerivedAtoms> {
    let n = labels.len();
    if tower.levels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels against a tower over {} indices",
            n,
            tower.levels.len()
        )));
    }
    let mut ids: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut atom_of = vec![u32::MAX; n];
    let mut stream = Vec::new();
    for i in 0..n {
        let l = tower.levels[i];
        if l == OUTSIDE_LEVEL {
            continue;
        }
        let key = (l, labels[i]);
        let next = ids.len() as u32;
        let id = *ids.entry(key).or_insert(next);
        atom_of[i] = id;
        stream.push(id);
    }
    if ids.is_empty() {
        return Err(Error::InvalidTower("tower covers no indices".into()));
    }
    if ids.len() > MAX_DYNAMIC_ATOMS {
        return Err(Error::ResourceLimit(format!(
            "{} derived atoms exceed the {MAX_DYNAMIC_ATOMS} cap",
            ids.len()
        )));
    }
    let mut descr = vec![(0u32, 0u32); ids.len()];
    for (key, id) in &ids {
        descr[*id as usize] = *key;
    }
    let mut counts = vec![0u64; ids.len()];
    for a in &stream {
        counts[*a as usize] += 1;
    }
    Ok(DerivedAtoms {
        atom_of,
        descr,
        counts,
        n_eff: stream.len() as u64,
        stream,
    })
}

/// Builds a permutation compatible with the tower: base-level cells are
/// paired by the integer-rounded target and every pairing is propagated
/// upward one level per index, so φ(n+1) = φ(n)+1 along each run. Runs pair
/// full column segments; of the two segments of a split column, the lower
/// one carries the target offset d and the upper one its complement d−h.
pub fn build_dynamic_permutation(
    labels: &[u32],
    tower: &TowerAssignment,
    kind: &LambdaKind,
    epsilon: f64,
) -> Result<DynamicOutcome> {
    tower.validate()?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("epsilon must be a positive real"));
    }
    let n = labels.len();
    let h = tower.height;
    let atoms = derive_atoms(labels, tower)?;
    let m = atoms.descr.len();
    let kappa: Vec<f64> = atoms
        .counts
        .iter()
        .map(|c| *c as f64 / atoms.n_eff as f64)
        .collect();
    let table = build_lambda_table(kind, &atoms.stream, m, false)?;

    // Sample-size precondition on every positive target cell.
    let nf = atoms.n_eff as f64;
    for a in 0..m as u32 {
        for b in 0..m as u32 {
            let lam = table.get(&kappa, a, b);
            if lam > 0.0 && nf < 1.0 / (epsilon * lam) {
                let (la, qa) = atoms.descr[a as usize];
                let (lb, qb) = atoms.descr[b as usize];
                return Err(Error::insufficient(format!(
                    "N = {} is below 1/(eps·lambda) = {} at cell \
                     ((level {la}, label {qa}), (level {lb}, label {qb}))",
                    atoms.n_eff,
                    1.0 / (epsilon * lam)
                )));
            }
        }
    }

    // Dense atom id at (level, label), if realized.
    let mut atom_at: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for (id, key) in atoms.descr.iter().enumerate() {
        atom_at.insert(*key, id as u32);
    }
    let bases = tower.column_bases();
    let label_at = |col: usize, level: usize| labels[(bases[col] - 1) as usize + level];

    // Per-column claim state, per side. A column's source half is claimed
    // bottom-first (offset d), leaving the top d indices for the complement
    // strip d−h; targets mirror this top-first.
    const FREE: u32 = u32::MAX;
    const FULL: u32 = u32::MAX - 1;
    let c = bases.len();
    let mut src_state = vec![FREE; c];
    let mut tgt_state = vec![FREE; c];
    let mut runs: Vec<(usize, usize, i64)> = Vec::new();

    let q_values: Vec<u32> = {
        let mut seen: Vec<u32> = labels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        seen
    };

    for d in 0..h {
        // Strip +d: source levels [0, h-1-d], target levels [d, h-1].
        for qs in &q_values {
            let Some(&a) = atom_at.get(&(0, *qs)) else { continue };
            for qt in &q_values {
                let Some(&b) = atom_at.get(&(d as u32, *qt)) else { continue };
                let lam = table.get(&kappa, a, b);
                let mut want = (nf * lam).floor() as u64;
                let mut sc = 0usize;
                let mut tc = 0usize;
                while want > 0 {
                    while sc < c && !(src_state[sc] == FREE && label_at(sc, 0) == *qs) {
                        sc += 1;
                    }
                    while tc < c && !(tgt_state[tc] == FREE && label_at(tc, d) == *qt) {
                        tc += 1;
                    }
                    if sc == c || tc == c {
                        break;
                    }
                    if d == 0 {
                        src_state[sc] = FULL;
                        tgt_state[tc] = FULL;
                    } else {
                        src_state[sc] = d as u32;
                        tgt_state[tc] = d as u32;
                    }
                    runs.push((sc, tc, d as i64));
                    want -= 1;
                }
            }
        }
        if d == 0 {
            continue;
        }
        // Strip d−h: source levels [h-d, h-1] on columns whose bottom went
        // to strip d; target levels [0, d-1] likewise.
        for qs in &q_values {
            let Some(&a) = atom_at.get(&((h - d) as u32, *qs)) else { continue };
            for qt in &q_values {
                let Some(&b) = atom_at.get(&(0, *qt)) else { continue };
                let lam = table.get(&kappa, a, b);
                let mut want = (nf * lam).floor() as u64;
                let mut sc = 0usize;
                let mut tc = 0usize;
                while want > 0 {
                    while sc < c
                        && !(src_state[sc] == d as u32 && label_at(sc, h - d) == *qs)
                    {
                        sc += 1;
                    }
                    while tc < c && !(tgt_state[tc] == d as u32 && label_at(tc, 0) == *qt) {
                        tc += 1;
                    }
                    if sc == c || tc == c {
                        break;
                    }
                    src_state[sc] = FULL;
                    tgt_state[tc] = FULL;
                    runs.push((sc, tc, d as i64 - h as i64));
                    want -= 1;
                }
            }
        }
    }

    let mut phi = vec![0u64; n];
    let mut assigned = vec![false; n];
    let mut taken_tgt = vec![false; n];
    for (sc, tc, delta) in &runs {
        let (s0, t0, len) = if *delta >= 0 {
            let d = *delta as usize;
            (bases[*sc], bases[*tc] + d as u64, h - d)
        } else {
            let d = (h as i64 + *delta) as usize; // delta = d − h
            (bases[*sc] + (h - d) as u64, bases[*tc], d)
        };
        for r in 0..len as u64 {
            let s = (s0 + r - 1) as usize;
            let t = t0 + r;
            phi[s] = t;
            assigned[s] = true;
            taken_tgt[(t - 1) as usize] = true;
        }
    }
    let mut free_src: Vec<u64> = (1..=n as u64)
        .filter(|i| phi[(*i - 1) as usize] == 0)
        .collect();
    let free_tgt: Vec<u64> = (1..=n as u64)
        .filter(|i| !taken_tgt[(*i - 1) as usize])
        .collect();
    debug_assert_eq!(free_src.len(), free_tgt.len());
    for (s, t) in free_src.drain(..).zip(free_tgt) {
        phi[(s - 1) as usize] = t;
    }

    let plan = PermutationPlan::from_phi(phi)?;
    let ti_violations = ti_violation_count(&plan, &assigned, tower);
    let defect_fraction = plan.defect_fraction();
    let defect_bound = 4.0 * epsilon + 2.0 / h as f64 + 2.0 / n as f64;

    // Realized label-pair law against the target's label projection. Tower
    // atoms project to point masses; outside indices use their own labels
    // under the blanket complement mass.
    let q_index: BTreeMap<u32, usize> = q_values.iter().enumerate().map(|(i, q)| (*q, i)).collect();
    let qn = q_values.len();
    let mut realized = vec![0u64; qn * qn];
    for i in 0..n {
        let a = q_index[&labels[i]];
        let b = q_index[&labels[(plan.phi[i] - 1) as usize]];
        realized[a * qn + b] += 1;
    }
    let in_tower_mass = atoms.n_eff as f64 / n as f64;
    let mut target = vec![0.0f64; qn * qn];
    for a in 0..m as u32 {
        let (_, qa) = atoms.descr[a as usize];
        let ia = q_index[&qa];
        for b in 0..m as u32 {
            let lam = table.get(&kappa, a, b);
            if lam > 0.0 {
                let (_, qb) = atoms.descr[b as usize];
                target[ia * qn + q_index[&qb]] += lam * in_tower_mass;
            }
        }
    }
    let mut sup_q_error = 0.0f64;
    for cell in 0..qn * qn {
        let freq = realized[cell] as f64 / n as f64;
        sup_q_error = sup_q_error.max((freq - target[cell]).abs());
    }

    Ok(DynamicOutcome {
        plan,
        assigned,
        atoms: m,
        sup_q_error,
        defect_fraction,
        defect_bound,
        ti_violations,
    })
}

// ---------------------------------------------------------------------------
// Self-joining pipeline
// ---------------------------------------------------------------------------

/// Per-stage refinement parameters; 1/h < ε must hold at every stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageParams {
    pub epsilon: f64,
    pub h: usize,
    pub q_len: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineSchedule {
    pub stages: Vec<StageParams>,
}

impl PipelineSchedule {
    /// ε_ℓ = 2^{−ℓ}, h_ℓ = 2^{ℓ+1}, labels = length-ℓ cylinders.
    pub fn geometric(stages: usize) -> Self {
        PipelineSchedule {
            stages: (1..=stages)
                .map(|l| StageParams {
                    epsilon: 0.5f64.powi(l as i32),
                    h: 1usize << (l + 1),
                    q_len: l,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.epsilon > 0.0) || s.h == 0 || s.q_len == 0 {
                return Err(Error::invalid(format!("stage {}: degenerate parameters", i + 1)));
            }
            if 1.0 / s.h as f64 >= s.epsilon {
                return Err(Error::invalid(format!(
                    "stage {}: requires 1/h < eps, got h = {}, eps = {}",
                    i + 1,
                    s.h,
                    s.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// One completed pipeline stage: the permutation plus its error report.
#[derive(Clone, Debug, Serialize)]
pub struct StageOutcome {
    pub stage: usize,
    pub n: usize,
    pub epsilon: f64,
    pub h: usize,
    pub q_len: usize,
    pub atoms: usize,
    pub defect_fraction: f64,
    pub defect_bound: f64,
    pub ti_violations: u64,
    pub sup_q_error: f64,
    /// k ↦ sup cell error of the realized pair law against the target,
    /// over length-k cylinders, k = 1, 2.
    pub sup_cylinder_error: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub plan: PermutationPlan,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineOutcome {
    pub lambda: String,
    pub stages: Vec<StageOutcome>,
    /// Stage index (1-based) and message of the stage that could not run.
    pub aborted: Option<(usize, String)>,
}

fn rolling_codes(symbols: &[u32], alphabet: u32, k: usize) -> Result<Vec<u32>> {
    let n = symbols.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("window length {k} out of range")));
    }
    let mut span = 1u64;
    for _ in 0..k {
        span = span.saturating_mul(alphabet as u64);
        if span as usize > MAX_PAIR_CELLS {
            return Err(Error::ResourceLimit(format!(
                "alphabet^{k} exceeds the {MAX_PAIR_CELLS} cell cap"
            )));
        }
    }
    let mut codes = Vec::with_capacity(n - k + 1);
    let mut code = 0u64;
    for (i, s) in symbols.iter().enumerate() {
        code = code * alphabet as u64 + *s as u64;
        if i + 1 >= k {
            codes.push(code as u32);
            let high = symbols[i + 1 - k] as u64;
            code -= high * (span / alphabet as u64);
        }
    }
    Ok(codes)
}

/// Target pair law over length-k window codes, in the count/M convention
/// over the M = N−k+1 windows, so a realized identity pairing reproduces
/// the diagonal target with zero error in the same arithmetic.
fn window_target(
    kind: &LambdaKind,
    codes: &[u32],
    span: usize,
    nested: bool,
) -> Result<BTreeMap<(u32, u32), f64>> {
    let m = codes.len();
    let mf = m as f64;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for c in codes {
        *counts.entry(*c).or_insert(0) += 1;
    }
    match kind {
        LambdaKind::Product => {
            if counts.len() * counts.len() > MAX_PAIR_CELLS {
                return Err(Error::ResourceLimit("product target too wide".into()));
            }
            let mut out = BTreeMap::new();
            for (a, ca) in &counts {
                for (b, cb) in &counts {
                    out.insert((*a, *b), (*ca as f64 / mf) * (*cb as f64 / mf));
                }
            }
            Ok(out)
        }
        LambdaKind::Diagonal => Ok(counts
            .into_iter()
            .map(|(a, c)| ((a, a), c as f64 / mf))
            .collect()),
        LambdaKind::ShiftedDiagonal(s) => {
            if *s == 0 || *s >= m {
                return Err(Error::invalid(format!("shift {s} out of range")));
            }
            let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for i in 0..m {
                *cells.entry((codes[i], codes[(i + s) % m])).or_insert(0) += 1;
            }
            Ok(cells
                .into_iter()
                .map(|(k, c)| (k, c as f64 / mf))
                .collect())
        }
        LambdaKind::Mixture(parts) => {
            if nested {
                return Err(Error::invalid("mixtures do not nest"));
            }
            let mut out: BTreeMap<(u32, u32), f64> = BTreeMap::new();
            for (w, k) in parts {
                for (cell, v) in window_target(k, codes, span, true)? {
                    *out.entry(cell).or_insert(0.0) += w * v;
                }
            }
            Ok(out)
        }
    }
}

fn stage_cylinder_errors(
    s: &SymbolicSequence,
    plan: &PermutationPlan,
    kind: &LambdaKind,
    k_max: usize,
) -> Result<BTreeMap<usize, f64>> {
    let n = s.symbols.len();
    let pairs = coupling_from_pairs(s, &plan.phi, k_max)?;
    let mut out = BTreeMap::new();
    for k in 1..=k_max {
        let codes = rolling_codes(&s.symbols, s.alphabet_size, k)?;
        let valid = (n as u64 - pairs.edge_loss[k - 1]) as f64;
        // Counts are recovered exactly: freq was count/N with count < 2^53.
        let mut realized: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        let span = s.alphabet_size as usize;
        for (words, freq) in &pairs.levels[k - 1] {
            let count = (freq * n as f64).round();
            let code = |w: &[u32]| {
                w.iter()
                    .fold(0u32, |acc, x| acc * s.alphabet_size + *x)
            };
            realized.insert((code(&words.0), code(&words.1)), count / valid);
        }
        let target = window_target(kind, &codes, span, false)?;
        let mut cells: Vec<(u32, u32)> = realized.keys().chain(target.keys()).copied().collect();
        cells.sort_unstable();
        cells.dedup();
        let mut worst = 0.0f64;
        for cell in cells {
            let r = realized.get(&cell).copied().unwrap_or(0.0);
            let t = target.get(&cell).copied().unwrap_or(0.0);
            worst = worst.max((r - t).abs());
        }
        out.insert(k, worst);
    }
    Ok(out)
}

fn choose_quantize_rule(u: &ArithmeticSequence) -> QuantizeRule {
    let pm_one = u.values.iter().all(|v| {
        v.im.abs() <= 1e-9 && (v.re.abs() - 1.0).abs() <= 1e-9
    });
    if pm_one {
        QuantizeRule::Signs
    } else {
        QuantizeRule::PhaseBins(16)
    }
}

/// Runs the staged construction: at stage ℓ the first Ns[ℓ−1] indices are
/// labeled by length-q_len cylinder words, stacked into an index tower of
/// height h_ℓ, and paired by the integer-rounded target. A stage whose
/// sample-size precondition fails aborts the pipeline, recording the stage
/// index; completed stages are kept. Logarithmic averaging is refused: the
/// construction has no logarithmic counterpart.
pub fn self_joining_pipeline(
    u: &ArithmeticSequence,
    ns: &[usize],
    kind: &LambdaKind,
    schedule: Option<&PipelineSchedule>,
    averaging: Averaging,
    aperiodic_relabel: bool,
) -> Result<PipelineOutcome> {
    if averaging == Averaging::Logarithmic {
        return Err(Error::invalid(
            "the self-joining construction is defined for Cesàro averaging only",
        ));
    }
    u.validate()?;
    if ns.is_empty() {
        return Err(Error::invalid("pipeline needs at least one stage length"));
    }
    for w in ns.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid("stage lengths must increase"));
        }
    }
    if *ns.last().expect("nonempty") > u.len() {
        return Err(Error::invalid(format!(
            "stage length {} exceeds the sequence length {}",
            ns.last().expect("nonempty"),
            u.len()
        )));
    }
    let default_schedule;
    let schedule = match schedule {
        Some(s) => s,
        None => {
            default_schedule = PipelineSchedule::geometric(ns.len());
            &default_schedule
        }
    };
    schedule.validate()?;
    if schedule.stages.len() < ns.len() {
        return Err(Error::invalid(format!(
            "{} stage lengths but only {} scheduled stages",
            ns.len(),
            schedule.stages.len()
        )));
    }

    let rule = choose_quantize_rule(u);
    let full = crate::empirics::quantize(u, &rule)?;

    let mut stages = Vec::new();
    let mut aborted = None;
    for (li, (&n, params)) in ns.iter().zip(&schedule.stages).enumerate() {
        let stage_no = li + 1;
        let sliced = SymbolicSequence {
            symbols: full.symbols[..n].to_vec(),
            alphabet_size: full.alphabet_size,
            symbol_values: full.symbol_values.clone(),
        };
        let outcome = run_stage(&sliced, params, kind, aperiodic_relabel);
        match outcome {
            Ok(mut st) => {
                st.stage = stage_no;
                stages.push(st);
            }
            Err(Error::InsufficientSample(msg)) => {
                aborted = Some((stage_no, msg));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PipelineOutcome {
        lambda: kind.label(),
        stages,
        aborted,
    })
}

fn run_stage(
    s: &SymbolicSequence,
    params: &StageParams,
    kind: &LambdaKind,
    aperiodic_relabel: bool,
) -> Result<StageOutcome> {
    let n = s.symbols.len();
    let k = params.q_len;
    if n < params.h + k {
        return Err(Error::insufficient(format!(
            "N = {n} cannot host height {} with length-{k} labels",
            params.h
        )));
    }
    let codes = rolling_codes(&s.symbols, s.alphabet_size, k)?;
    let mut labels = vec![0u32; n];
    labels[..codes.len()].copy_from_slice(&codes);
    // The last k−1 indices have no full window; they stay outside the tower.
    let covered = codes.len();
    let mut q_count = {
        let mut c = codes.clone();
        c.sort_unstable();
        c.dedup();
        c.len() as u32
    };
    if aperiodic_relabel {
        // Adjoin a 3-cell coding of an irrational rotation, so a periodic
        // label stream cannot stay periodic.
        let golden = 0.618_033_988_749_894_9;
        for (i, l) in labels.iter_mut().enumerate().take(covered) {
            let bin = (frac_prod((i + 1) as f64, golden, 0.0) * 3.0).floor() as u32;
            *l = *l * 3 + bin.min(2);
        }
        q_count *= 3;
    }
    let _ = q_count;
    let mut tower = build_index_tower(n, params.h)?;
    for i in covered..n {
        tower.levels[i] = OUTSIDE_LEVEL;
    }
    // Re-trim: blanking the tail may have cut a column's top.
    let tower = finish_tower(params.h, tower.levels, tower.declared_epsilon.max((params.h as f64 + k as f64) / n as f64));
    tower.validate()?;

    let dyn_out = build_dynamic_permutation(&labels, &tower, kind, params.epsilon)?;
    let sup_cylinder_error = stage_cylinder_errors(s, &dyn_out.plan, kind, 2)?;
    Ok(StageOutcome {
        stage: 0,
        n,
        epsilon: params.epsilon,
        h: params.h,
        q_len: k,
        atoms: dyn_out.atoms,
        defect_fraction: dyn_out.defect_fraction,
        defect_bound: dyn_out.defect_bound,
        ti_violations: dyn_out.ti_violations,
        sup_q_error: dyn_out.sup_q_error,
        sup_cylinder_error,
        plan: dyn_out.plan,
    })
}

// ---------------------------------------------------------------------------
// Product projection check
// ---------------------------------------------------------------------------

/// Shift-averaged product test: for words B, C up to length k_max,
/// compares (1/M)Σ_{m≤M} freq_m(B,C) with κ(B)κ(C), where freq_m pairs
/// index n with φ(n)−m. The reported value is the worst cell's deviation of
/// the average; `mean_abs_deviation` carries the stricter per-shift variant
/// (1/M)Σ_m |freq_m − κκ|, which separates periodic pairings that the
/// averaged form washes out.
pub fn product_projection_check(
    s: &SymbolicSequence,
    phi: &[u64],
    m_max: usize,
    k_max: usize,
) -> Result<StatReport> {
    s.validate()?;
    let n = s.symbols.len();
    check_permutation(phi, n)?;
    if m_max == 0 {
        return Err(Error::invalid("need at least one shift"));
    }
    if k_max == 0 {
        return Err(Error::invalid("need at least length-1 words"));
    }
    let mut worst_avg = 0.0f64;
    let mut worst_mean_abs = 0.0f64;
    let mut trend = Vec::with_capacity(m_max);
    let mut per_m_sup = vec![0.0f64; m_max];
    for k in 1..=k_max {
        let codes = rolling_codes(&s.symbols, s.alphabet_size, k)?;
        let windows = codes.len();
        let mut span = 1usize;
        for _ in 0..k {
            span *= s.alphabet_size as usize;
        }
        if span * span > MAX_PAIR_CELLS {
            return Err(Error::ResourceLimit(format!(
                "length-{k} pair table exceeds the cell cap"
            )));
        }
        let kappa: Vec<f64> = {
            let mut c = vec![0u64; span];
            for code in &codes {
                c[*code as usize] += 1;
            }
            c.iter().map(|x| *x as f64 / windows as f64).collect()
        };
        // Integer pair counts per shift; merged deterministically.
        let tables: Vec<(Vec<u64>, u64)> = (1..=m_max)
            .into_par_iter()
            .map(|m| {
                let mut counts = vec![0u64; span * span];
                let mut admissible = 0u64;
                for i in 0..windows {
                    let t = phi[i] as i64 - m as i64;
                    if t < 1 || t as usize > windows {
                        continue;
                    }
                    admissible += 1;
                    let a = codes[i] as usize;
                    let b = codes[(t - 1) as usize] as usize;
                    counts[a * span + b] += 1;
                }
                (counts, admissible)
            })
            .collect();
        if tables.iter().all(|(_, adm)| *adm == 0) {
            return Err(Error::insufficient(
                "no admissible index pairs at any shift".into(),
            ));
        }
        for a in 0..span {
            if kappa[a] == 0.0 {
                continue;
            }
            for b in 0..span {
                if kappa[b] == 0.0 {
                    continue;
                }
                let prod = kappa[a] * kappa[b];
                let mut avg = KahanSum::new();
                let mut mean_abs = KahanSum::new();
                let mut used = 0u64;
                for (counts, admissible) in &tables {
                    if *admissible == 0 {
                        continue;
                    }
                    used += 1;
                    let f = counts[a * span + b] as f64 / *admissible as f64;
                    avg.add(f);
                    mean_abs.add((f - prod).abs());
                }
                let dev = (avg.value() / used as f64 - prod).abs();
                worst_avg = worst_avg.max(dev);
                worst_mean_abs = worst_mean_abs.max(mean_abs.value() / used as f64);
                for (mi, (counts, admissible)) in tables.iter().enumerate() {
                    if *admissible == 0 {
                        continue;
                    }
                    let f = counts[a * span + b] as f64 / *admissible as f64;
                    per_m_sup[mi] = per_m_sup[mi].max((f - prod).abs());
                }
            }
        }
    }
    for (mi, sup) in per_m_sup.iter().enumerate() {
        trend.push(((mi + 1) as f64, *sup));
    }
    Ok(StatReport::new("product_projection", worst_avg)
        .with_param("m_max", m_max as u64)
        .with_param("k_max", k_max as u64)
        .with_param("mean_abs_deviation", worst_mean_abs)
        .with_trend(trend))
}
