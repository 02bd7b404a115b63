//! Model systems with one invariant measure, and the correlation harnesses
//! that test a sequence against them.
//!
//! Four systems: the circle rotation, the two-torus rotation, the skew map
//! (x, y) ↦ (x, x + y) whose fibers are circle rotations, and the nilrotation
//! on the 3-dimensional unitriangular group modulo its integer lattice.
//! Observables come from a closed catalogue of characters; each test reports
//! plain normalized correlation sums. Rotation orbits use closed forms with
//! compensated index products; the nil orbit is stepped, one exact group
//! multiplication plus lattice reduction per index.

use num_complex::Complex64;

use crate::correlate::{Averaging, StatReport};
use crate::error::Error;
use crate::seqgen::ArithmeticSequence;
use crate::util::{frac, frac_prod, unit_phase, KahanComplex, KahanSum};
use crate::Result;

// ---------------------------------------------------------------------------
// Systems and observables
// ---------------------------------------------------------------------------

/// The map side of a model system. Coordinates live in [0, 1); starting
/// points are reduced on entry and the nil state is reduced after each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SystemKind {
    /// x ↦ x + α on the circle.
    CircleRotation { alpha: f64 },
    /// (x, y) ↦ (x + α, y + β) on the 2-torus.
    TorusRotation { alpha: f64, beta: f64 },
    /// (x, y) ↦ (x, x + y): the first coordinate picks the fiber rotation.
    SkewProduct,
    /// Left translation by (a, b, c) on the unitriangular group mod its
    /// integer lattice, in coordinates where
    /// (a, b, c)·(x, y, z) = (a + x, b + y, c + z + a·y).
    Heisenberg { a: f64, b: f64, c: f64 },
}

impl SystemKind {
    /// Number of point coordinates.
    pub fn dim(&self) -> usize {
        match self {
            SystemKind::CircleRotation { .. } => 1,
            SystemKind::TorusRotation { .. } | SystemKind::SkewProduct => 2,
            SystemKind::Heisenberg { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::CircleRotation { .. } => "circle_rotation",
            SystemKind::TorusRotation { .. } => "torus_rotation",
            SystemKind::SkewProduct => "skew_product",
            SystemKind::Heisenberg { .. } => "heisenberg",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params: Vec<f64> = match self {
            SystemKind::CircleRotation { alpha } => vec![*alpha],
            SystemKind::TorusRotation { alpha, beta } => vec![*alpha, *beta],
            SystemKind::SkewProduct => vec![],
            SystemKind::Heisenberg { a, b, c } => vec![*a, *b, *c],
        };
        for p in params {
            if !p.is_finite() {
                return Err(Error::invalid(format!(
                    "{} parameter {p} is not finite",
                    self.name()
                )));
            }
        }
        Ok(())
    }
}

/// Character observables. `character(r, s)` is (x, y) ↦ e^{2πi(rx+sy)}; the
/// vertical character is its (0, 1) case; on the nil system both read the
/// second coordinate of the torus projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observable {
    Character { r: i32, s: i32 },
    VerticalCharacter,
    HeisenbergCharacter,
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::Character { r, s } => format!("char:{r},{s}"),
            Observable::VerticalCharacter => "vertical".to_string(),
            Observable::HeisenbergCharacter => "heisenberg_character".to_string(),
        }
    }
}

impl std::str::FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(body) = s.strip_prefix("char:") {
            let (r, t) = body
                .split_once(',')
                .ok_or_else(|| Error::invalid(format!("expected char:r,s, got {s:?}")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<i32>()
                    .map_err(|_| Error::invalid(format!("bad character exponent {v:?}")))
            };
            return Ok(Observable::Character {
                r: parse(r)?,
                s: parse(t)?,
            });
        }
        match s {
            "vertical" | "vertical_character" => Ok(Observable::VerticalCharacter),
            "heisenberg_character" => Ok(Observable::HeisenbergCharacter),
            other => Err(Error::invalid(format!("unknown observable {other:?}"))),
        }
    }
}

/// A system paired with an observable it supports.
#[derive(Clone, Copy, Debug)]
pub struct OrbitSystem {
    pub kind: SystemKind,
    pub observable: Observable,
}

impl OrbitSystem {
    pub fn new(kind: SystemKind, observable: Observable) -> Result<Self> {
        kind.validate()?;
        check_observable(&kind, &observable)?;
        Ok(OrbitSystem { kind, observable })
    }
}

fn check_observable(kind: &SystemKind, obs: &Observable) -> Result<()> {
    let ok = match (kind, obs) {
        (SystemKind::CircleRotation { .. }, Observable::Character { s, .. }) => *s == 0,
        (SystemKind::CircleRotation { .. }, _) => false,
        (SystemKind::Heisenberg { .. }, _) => true,
        (_, Observable::Character { .. } | Observable::VerticalCharacter) => true,
        (_, Observable::HeisenbergCharacter) => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "observable {} is not defined on {}",
            obs.name(),
            kind.name()
        )))
    }
}

fn check_point(kind: &SystemKind, x0: &[f64]) -> Result<()> {
    if x0.len() != kind.dim() {
        return Err(Error::invalid(format!(
            "{} takes {} coordinates, point has {}",
            kind.name(),
            kind.dim(),
            x0.len()
        )));
    }
    for c in x0 {
        if !c.is_finite() {
            return Err(Error::invalid(format!("coordinate {c} is not finite")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Orbit evaluation
// ---------------------------------------------------------------------------

/// Observable value at a planar point; the second coordinate may be an
/// unreduced representative, which integer character exponents absorb.
#[inline]
fn eval_planar(obs: &Observable, x: f64, y: f64) -> Complex64 {
    match obs {
        Observable::Character { r, s } => {
            unit_phase(frac_prod(*r as f64, x, 0.0) + frac_prod(*s as f64, y, 0.0))
        }
        Observable::VerticalCharacter | Observable::HeisenbergCharacter => unit_phase(y),
    }
}

/// Unitriangular state with all coordinates kept in [0, 1).
#[derive(Clone, Copy)]
struct NilState {
    x: f64,
    y: f64,
    z: f64,
}

impl NilState {
    fn reduced(x: f64, y: f64, z: f64) -> Self {
        // Lattice reduction: right factors (0,q,0), (p,0,0), (0,0,r) with
        // integer entries. The y step shifts z by x·q before z is reduced.
        let q = -y.floor();
        let y = frac(y);
        let z = z + x * q;
        let x = frac(x);
        let z = frac(z);
        NilState { x, y, z }
    }

    fn step(self, a: f64, b: f64, c: f64) -> Self {
        NilState::reduced(a + self.x, b + self.y, c + self.z + a * self.y)
    }
}

/// Streams f(T^{start+j} x0) for j = 0..count into `emit`, sequentially.
fn stream_orbit(
    sys: &OrbitSystem,
    x0: &[f64],
    start: u64,
    count: usize,
    mut emit: impl FnMut(Complex64),
) -> Result<()> {
    sys.kind.validate()?;
    check_observable(&sys.kind, &sys.observable)?;
    check_point(&sys.kind, x0)?;
    let obs = &sys.observable;
    match sys.kind {
        SystemKind::CircleRotation { alpha } => {
            let x0 = frac(x0[0]);
            let r = match obs {
                Observable::Character { r, .. } => *r as f64,
                _ => unreachable!("catalogue check rejects the rest"),
            };
            for j in 0..count {
                let x = frac_prod((start + j as u64) as f64, alpha, x0);
                emit(unit_phase(frac_prod(r, x, 0.0)));
            }
        }
        SystemKind::TorusRotation { alpha, beta } => {
            let (x0, y0) = (frac(x0[0]), frac(x0[1]));
            for j in 0..count {
                let n = (start + j as u64) as f64;
                emit(eval_planar(obs, frac_prod(n, alpha, x0), frac_prod(n, beta, y0)));
            }
        }
        SystemKind::SkewProduct => {
            // Closed form: the n-th image of (x, y) is (x, y + nx).
            let (x, y0) = (frac(x0[0]), frac(x0[1]));
            for j in 0..count {
                emit(eval_planar(obs, x, frac_prod((start + j as u64) as f64, x, y0)));
            }
        }
        SystemKind::Heisenberg { a, b, c } => {
            let mut st = NilState::reduced(x0[0], x0[1], x0[2]);
            for _ in 0..start {
                st = st.step(a, b, c);
            }
            for j in 0..count {
                if j > 0 {
                    st = st.step(a, b, c);
                }
                emit(eval_planar(obs, st.x, st.y));
            }
        }
    }
    Ok(())
}

/// The stream (f(T^n x0))_{n=1..N} as a sequence indexed from 1.
pub fn orbit_evaluate(sys: &OrbitSystem, x0: &[f64], n: usize) -> Result<ArithmeticSequence> {
    if n == 0 {
        return Err(Error::invalid("orbit evaluation needs N >= 1"));
    }
    let mut values = Vec::with_capacity(n);
    stream_orbit(sys, x0, 1, n, |v| values.push(v))?;
    let mut seq = ArithmeticSequence::new("orbit", values)?;
    seq.params.insert("system".into(), sys.kind.name().into());
    seq.params.insert("observable".into(), sys.observable.name());
    seq.params.insert("x0".into(), format_point(x0));
    Ok(seq)
}

/// Same stream computed by stepping the map once per index instead of by
/// closed forms. Exists to cross-check the closed forms; the nil system has
/// no closed form, so there the two paths coincide by construction.
pub fn orbit_evaluate_stepped(
    sys: &OrbitSystem,
    x0: &[f64],
    n: usize,
) -> Result<ArithmeticSequence> {
    if n == 0 {
        return Err(Error::invalid("orbit evaluation needs N >= 1"));
    }
    sys.kind.validate()?;
    check_observable(&sys.kind, &sys.observable)?;
    check_point(&sys.kind, x0)?;
    let mut values = Vec::with_capacity(n);
    match sys.kind {
        SystemKind::CircleRotation { alpha } => {
            let mut x = frac(x0[0]);
            let r = match &sys.observable {
                Observable::Character { r, .. } => *r as f64,
                _ => unreachable!("catalogue check rejects the rest"),
            };
            for _ in 0..n {
                x = frac(x + alpha);
                values.push(unit_phase(frac_prod(r, x, 0.0)));
            }
        }
        SystemKind::TorusRotation { alpha, beta } => {
            let (mut x, mut y) = (frac(x0[0]), frac(x0[1]));
            for _ in 0..n {
                x = frac(x + alpha);
                y = frac(y + beta);
                values.push(eval_planar(&sys.observable, x, y));
            }
        }
        SystemKind::SkewProduct => {
            let x = frac(x0[0]);
            let mut y = frac(x0[1]);
            for _ in 0..n {
                y = frac(y + x);
                values.push(eval_planar(&sys.observable, x, y));
            }
        }
        SystemKind::Heisenberg { a, b, c } => {
            let mut st = NilState::reduced(x0[0], x0[1], x0[2]);
            for _ in 0..n {
                st = st.step(a, b, c);
                values.push(eval_planar(&sys.observable, st.x, st.y));
            }
        }
    }
    let mut seq = ArithmeticSequence::new("orbit_stepped", values)?;
    seq.params.insert("system".into(), sys.kind.name().into());
    seq.params.insert("observable".into(), sys.observable.name());
    seq.params.insert("x0".into(), format_point(x0));
    Ok(seq)
}

fn format_point(x0: &[f64]) -> String {
    let coords: Vec<String> = x0.iter().map(|c| format!("{c}")).collect();
    format!("[{}]", coords.join(","))
}

// ---------------------------------------------------------------------------
// Orthogonality trend
// ---------------------------------------------------------------------------

/// c(N) = |(1/N) Σ_{n≤N} u(n)·f(T^n x0)| over the given depths, one orbit
/// pass total. The logarithmic variant weights term n by 1/n and divides by
/// the partial harmonic sum, so a perfectly correlated pair still reads 1.
pub fn orthogonality_test(
    u: &ArithmeticSequence,
    sys: &OrbitSystem,
    x0: &[f64],
    ns: &[usize],
    averaging: Averaging,
) -> Result<StatReport> {
    u.validate()?;
    if ns.is_empty() {
        return Err(Error::invalid("orthogonality trend needs at least one depth"));
    }
    let mut depths: Vec<usize> = ns.to_vec();
    depths.sort_unstable();
    depths.dedup();
    if depths[0] == 0 {
        return Err(Error::invalid("depth 0 has no average"));
    }
    let max_n = *depths.last().expect("nonempty");
    if max_n > u.len() {
        return Err(Error::invalid(format!(
            "trend depth {max_n} exceeds sequence length {}",
            u.len()
        )));
    }

    let mut acc = KahanComplex::new();
    let mut weight = KahanSum::new();
    let mut trend = Vec::with_capacity(depths.len());
    let mut next = 0usize;
    let mut n = 0u64;
    stream_orbit(sys, x0, 1, max_n, |fv| {
        n += 1;
        let term = u.value(n) * fv;
        match averaging {
            Averaging::Cesaro => {
                acc.add(term);
                weight.add(1.0);
            }
            Averaging::Logarithmic => {
                let w = 1.0 / n as f64;
                acc.add(term * w);
                weight.add(w);
            }
        }
        if next < depths.len() && n as usize == depths[next] {
            trend.push((n as f64, acc.value().norm() / weight.value()));
            next += 1;
        }
    })?;

    let value = trend.last().expect("at least one depth").1;
    Ok(StatReport::new("orthogonality", value)
        .with_param("system", sys.kind.name())
        .with_param("observable", sys.observable.name())
        .with_param("x0", format_point(x0))
        .with_param("averaging", averaging.as_str())
        .with_param("max_n", max_n as u64)
        .with_trend(trend))
}

// ---------------------------------------------------------------------------
// Block-restarted orthogonality
// ---------------------------------------------------------------------------

/// Cut points with one restart point per block. Block k covers
/// [cuts[k], cuts[k+1]); gaps must be nondecreasing from `threshold` on.
#[derive(Clone, Debug)]
pub struct BlockSchedule {
    pub cuts: Vec<u64>,
    pub restarts: Vec<Vec<f64>>,
    pub threshold: usize,
}

impl BlockSchedule {
    pub fn new(cuts: Vec<u64>, restarts: Vec<Vec<f64>>, threshold: usize) -> Result<Self> {
        let s = BlockSchedule {
            cuts,
            restarts,
            threshold,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cuts.len() < 2 {
            return Err(Error::invalid("schedule needs at least two cut points"));
        }
        if self.cuts[0] == 0 {
            return Err(Error::invalid("cut points are 1-based indices"));
        }
        for w in self.cuts.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "cut points must increase, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let gaps: Vec<u64> = self.cuts.windows(2).map(|w| w[1] - w[0]).collect();
        for k in self.threshold..gaps.len().saturating_sub(1) {
            if gaps[k + 1] < gaps[k] {
                return Err(Error::invalid(format!(
                    "block lengths must be nondecreasing past block {}: {} then {}",
                    self.threshold,
                    gaps[k],
                    gaps[k + 1]
                )));
            }
        }
        if self.restarts.len() != self.cuts.len() - 1 {
            return Err(Error::invalid(format!(
                "{} blocks need {} restart points, got {}",
                self.cuts.len() - 1,
                self.cuts.len() - 1,
                self.restarts.len()
            )));
        }
        Ok(())
    }
}

/// (1/b_K) Σ_{k<K} |Σ_{b_k ≤ n < b_{k+1}} u(n)·f(S^{n−b_k} y_k)|: every block
/// restarts the orbit at its own point, so one aligned block cannot hide
/// behind cancellation elsewhere. Uses the first K cut points.
pub fn strong_momo_test(
    u: &ArithmeticSequence,
    sys: &OrbitSystem,
    schedule: &BlockSchedule,
    f: &Observable,
    k: usize,
) -> Result<StatReport> {
    u.validate()?;
    schedule.validate()?;
    if k < 2 || k > schedule.cuts.len() {
        return Err(Error::invalid(format!(
            "K must lie in [2, {}], got {k}",
            schedule.cuts.len()
        )));
    }
    let probe = OrbitSystem::new(sys.kind, *f)?;
    let b_last = schedule.cuts[k - 1];
    if b_last > u.len() as u64 {
        return Err(Error::invalid(format!(
            "schedule reaches {b_last}, past the sequence length {}",
            u.len()
        )));
    }

    let mut total = KahanSum::new();
    let mut trend = Vec::with_capacity(k - 1);
    for block in 0..k - 1 {
        let lo = schedule.cuts[block];
        let hi = schedule.cuts[block + 1];
        let y = &schedule.restarts[block];
        let mut acc = KahanComplex::new();
        let mut n = lo;
        stream_orbit(&probe, y, 0, (hi - lo) as usize, |fv| {
            acc.add(u.value(n) * fv);
            n += 1;
        })?;
        total.add(acc.value().norm());
        trend.push((hi as f64, total.value() / hi as f64));
    }

    let value = total.value() / b_last as f64;
    Ok(StatReport::new("strong_momo", value)
        .with_param("system", sys.kind.name())
        .with_param("observable", f.name())
        .with_param("blocks", (k - 1) as u64)
        .with_param("b_last", b_last)
        .with_trend(trend))
}
