//! Atom-mass estimates for the spectral measure behind a lag table.
//!
//! The total atomic mass of a positive measure on the circle is the Cesàro
//! mean of |γ(h)|², and the mass at a point e^{2πiθ} is the mean of
//! γ(h)e^{−2πihθ}. Everything here is a plain finite-H average of table
//! entries: no kernels, no smoothing, and no claims beyond the numbers —
//! every field is a finite-H estimate, with thresholds left to the caller.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::correlate::AutocorrTable;
use crate::error::Error;
use crate::util::{unit_phase, KahanComplex, KahanSum};
use crate::Result;

/// Smallest lag depth the atom estimates accept.
pub const MIN_LAG_DEPTH: usize = 10;

/// Finite-H atom-mass summary of a lag table.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    /// Lag depth the averages ran over.
    pub h: usize,
    /// (1/H) Σ_{h=1..H} |γ(h)|²: estimated total atomic mass.
    pub mean_sq: f64,
    /// |(1/H) Σ_{h=1..H} γ(h)|²: estimated mass at the point 1.
    pub mean_abs_sq: f64,
    /// mean_sq − mean_abs_sq clamped at 0: estimated mass away from 1.
    pub nontrivial_atom_mass: f64,
    /// q ↦ estimated mass on the q-th roots of unity, for small q.
    pub rational_profile: BTreeMap<u32, f64>,
}

impl SpectralSummary {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0 + 1e-9).contains(&self.mean_sq)
            || self.mean_abs_sq < 0.0
            || self.mean_abs_sq > self.mean_sq + 1e-12
        {
            return Err(Error::invalid(format!(
                "need 0 <= mean_abs_sq <= mean_sq <= 1, got {} and {}",
                self.mean_abs_sq, self.mean_sq
            )));
        }
        if !(0.0..=1.0 + 1e-9).contains(&self.nontrivial_atom_mass) {
            return Err(Error::invalid(
                "nontrivial atom mass must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("spectral summary serializes")
    }
}

fn require_depth(acf: &AutocorrTable) -> Result<()> {
    if acf.h_max < MIN_LAG_DEPTH {
        return Err(Error::invalid(format!(
            "atom estimates need H >= {MIN_LAG_DEPTH}, table has {}",
            acf.h_max
        )));
    }
    Ok(())
}

/// Summarizes the atomic part of the spectral measure: total mass, mass at
/// 1, their difference, and the small-denominator rational profile.
pub fn wiener_atom_mass(acf: &AutocorrTable) -> Result<SpectralSummary> {
    require_depth(acf)?;
    let h = acf.h_max;
    let mut sq = KahanSum::new();
    let mut mean = KahanComplex::new();
    for g in &acf.gamma[1..=h] {
        sq.add(g.norm_sqr());
        mean.add(*g);
    }
    let mean_sq = (sq.value() / h as f64).min(1.0);
    let mean_abs_sq = (mean.value() / h as f64).norm_sqr().min(mean_sq);
    let mut rational_profile = BTreeMap::new();
    for q in 1..=(h / MIN_LAG_DEPTH).min(10) as u32 {
        rational_profile.insert(q, rational_atom_mass(acf, q)?);
    }
    let summary = SpectralSummary {
        h,
        mean_sq,
        mean_abs_sq,
        nontrivial_atom_mass: (mean_sq - mean_abs_sq).max(0.0),
        rational_profile,
    };
    summary.validate()?;
    Ok(summary)
}

/// |(1/⌊H/q⌋) Σ_{j=1..⌊H/q⌋} γ(qj)|: estimated total mass on the roots of
/// z^q = 1. Needs at least [`MIN_LAG_DEPTH`] multiples of q in the table.
pub fn rational_atom_mass(acf: &AutocorrTable, q: u32) -> Result<f64> {
    require_depth(acf)?;
    if q == 0 {
        return Err(Error::invalid("q must be >= 1"));
    }
    let h = acf.h_max;
    if q as usize > h / MIN_LAG_DEPTH {
        return Err(Error::invalid(format!(
            "q = {q} leaves fewer than {MIN_LAG_DEPTH} multiples below H = {h}"
        )));
    }
    let count = h / q as usize;
    let mut acc = KahanComplex::new();
    for j in 1..=count {
        acc.add(acf.gamma(q as usize * j));
    }
    Ok((acc.value() / count as f64).norm())
}

/// |(1/H) Σ_{h=1..H} γ(h) e^{−2πihθ}|: estimated mass at e^{2πiθ}.
pub fn atom_mass_at(acf: &AutocorrTable, theta: f64) -> Result<f64> {
    require_depth(acf)?;
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta = {theta} must lie in [0, 1)")));
    }
    let h = acf.h_max;
    let mut acc = KahanComplex::new();
    for (lag, g) in acf.gamma[1..=h].iter().enumerate() {
        acc.add(g * unit_phase(-((lag + 1) as f64) * theta));
    }
    Ok((acc.value() / h as f64).norm())
}

/// Mass estimates on the uniform grid θ = j/points; one row per point.
pub fn atom_mass_grid(acf: &AutocorrTable, points: usize) -> Result<Vec<(f64, f64)>> {
    require_depth(acf)?;
    if points == 0 {
        return Err(Error::invalid("grid needs at least one point"));
    }
    (0..points)
        .into_par_iter()
        .map(|j| {
            let theta = j as f64 / points as f64;
            Ok((theta, atom_mass_at(acf, theta)?))
        })
        .collect()
}

/// `theta,mass` CSV of a grid scan, for plotting.
pub fn write_mass_grid_csv<W: Write>(grid: &[(f64, f64)], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "theta,mass")?;
    for (theta, mass) in grid {
        writeln!(w, "{theta},{mass}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlate::{autocorrelation, Averaging};
    use crate::seqgen::{gen_random_signs, ArithmeticSequence};

    fn alternating(n: usize) -> ArithmeticSequence {
        let values: Vec<Complex64> = (1..=n)
            .map(|k| Complex64::new(if k % 2 == 0 { 1.0 } else { -1.0 }, 0.0))
            .collect();
        ArithmeticSequence::new("alternating", values).unwrap()
    }

    fn cube_root_phases(n: usize) -> ArithmeticSequence {
        let values: Vec<Complex64> = (1..=n)
            .map(|k| unit_phase(k as f64 / 3.0))
            .collect();
        ArithmeticSequence::new("third_roots", values).unwrap()
    }

    #[test]
    fn alternating_sequence_has_unit_mass_at_minus_one() {
        let u = alternating(10_000);
        let acf = autocorrelation(&u, 120, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        assert!((s.mean_sq - 1.0).abs() < 1e-12, "gamma(h) = (-1)^h has unit modulus");
        assert!(s.mean_abs_sq < 1e-12, "even H cancels the lag mean exactly");
        assert!((s.nontrivial_atom_mass - 1.0).abs() < 1e-12);
        let at_half = atom_mass_at(&acf, 0.5).unwrap();
        assert!((at_half - 1.0).abs() < 1e-12, "the atom sits at theta = 1/2");
        let q2 = rational_atom_mass(&acf, 2).unwrap();
        assert!((q2 - 1.0).abs() < 1e-12, "gamma(2j) = 1 exactly");
    }

    #[test]
    fn constant_sequence_has_all_mass_at_one() {
        let u = ArithmeticSequence::new("one", vec![Complex64::new(1.0, 0.0); 5_000]).unwrap();
        let acf = autocorrelation(&u, 100, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        assert!((s.mean_sq - 1.0).abs() < 1e-12);
        assert!((s.mean_abs_sq - 1.0).abs() < 1e-12);
        assert_eq!(s.nontrivial_atom_mass, 0.0);
        for (_, v) in &s.rational_profile {
            assert!((v - 1.0).abs() < 1e-12, "every root-of-unity set contains 1");
        }
        let away = atom_mass_at(&acf, 1.0 / 3.0).unwrap();
        assert!(away < 0.02, "geometric cancellation off the atom");
    }

    #[test]
    fn period_three_phases_load_only_denominator_three() {
        // H = 120: a multiple of 3, so the q = 2 geometric sums close.
        let u = cube_root_phases(10_000);
        let acf = autocorrelation(&u, 120, Averaging::Cesaro).unwrap();
        let q3 = rational_atom_mass(&acf, 3).unwrap();
        assert!((q3 - 1.0).abs() < 1e-12, "gamma(3j) = 1");
        let q2 = rational_atom_mass(&acf, 2).unwrap();
        assert!(q2 < 1e-3, "no mass on square roots of unity, got {q2}");
    }

    #[test]
    fn noise_has_negligible_atom_mass() {
        let u = gen_random_signs(100_000, 17).unwrap();
        let acf = autocorrelation(&u, 100, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        assert!(s.mean_sq < 0.01, "squared correlations of noise are O(1/N)");
        assert!(s.nontrivial_atom_mass < 0.01);
    }

    #[test]
    fn cauchy_schwarz_bounds_every_single_atom() {
        for u in [alternating(5_000), gen_random_signs(5_000, 23).unwrap()] {
            let acf = autocorrelation(&u, 200, Averaging::Cesaro).unwrap();
            let s = wiener_atom_mass(&acf).unwrap();
            let bound = s.mean_sq.sqrt() + 1e-12;
            for j in 0..50 {
                let theta = j as f64 / 50.0;
                let mass = atom_mass_at(&acf, theta).unwrap();
                assert!(
                    mass <= bound,
                    "atom estimate {mass} at theta={theta} exceeds sqrt(mean_sq) = {bound}"
                );
            }
        }
    }

    #[test]
    fn grid_mass_squares_stay_below_total_mass() {
        // On the H-point grid the squared estimates sum to exactly the
        // total atomic mass estimate; finite-H slack is 0.01.
        let u = alternating(4_000);
        let h = 64;
        let acf = autocorrelation(&u, h, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        let grid = atom_mass_grid(&acf, h).unwrap();
        let total: f64 = grid.iter().map(|(_, m)| m * m).sum();
        assert!(
            total <= s.mean_sq + 0.01,
            "grid mass {total} exceeds mean_sq {} + 0.01",
            s.mean_sq
        );
    }

    #[test]
    fn q_one_mass_is_exactly_the_lag_mean_modulus() {
        let u = gen_random_signs(8_000, 31).unwrap();
        let acf = autocorrelation(&u, 150, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        let q1 = rational_atom_mass(&acf, 1).unwrap();
        assert!(
            (q1 - s.mean_abs_sq.sqrt()).abs() < 1e-12,
            "mass on {{1}} is |mean gamma| = sqrt(mean_abs_sq)"
        );
    }

    #[test]
    fn depth_and_argument_guards() {
        let u = alternating(1_000);
        let shallow = autocorrelation(&u, 9, Averaging::Cesaro).unwrap();
        assert!(wiener_atom_mass(&shallow).is_err());
        let acf = autocorrelation(&u, 100, Averaging::Cesaro).unwrap();
        assert!(rational_atom_mass(&acf, 11).is_err(), "q > H/10");
        assert!(rational_atom_mass(&acf, 10).is_ok());
        assert!(rational_atom_mass(&acf, 0).is_err());
        assert!(atom_mass_at(&acf, 1.0).is_err());
        assert!(atom_mass_at(&acf, -0.1).is_err());
    }

    #[test]
    fn summary_serializes_with_sorted_profile() {
        let u = alternating(2_000);
        let acf = autocorrelation(&u, 100, Averaging::Cesaro).unwrap();
        let s = wiener_atom_mass(&acf).unwrap();
        let line = s.to_json_line();
        assert_eq!(line, s.to_json_line());
        let parsed: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed["h"], 100);
        assert!(parsed["rational_profile"]["2"].as_f64().unwrap() > 0.99);

        let mut csv = Vec::new();
        let grid = atom_mass_grid(&acf, 4).unwrap();
        write_mass_grid_csv(&grid, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("theta,mass\n0,"));
        assert_eq!(text.lines().count(), 5);
    }
}
