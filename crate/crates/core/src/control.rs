//! Pulse schedules, switching functions, effective switchings and filters.
//!
//! All pulses are instantaneous rotations about y. π pulses are absorbed into
//! the switching function `y(t) = (−1)^{#π before t}`; non-π pulses sit on the
//! interval boundaries `t_0 = 0 < … < t_N = T`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when comparing times against the δ grid and Δ.
const GRID_TOL: f64 = 1e-6;

/// Hardware limits: minimum pulse separation Δ and time resolution δ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Δ, seconds.
    pub min_separation: f64,
    /// δ, seconds.
    pub resolution: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            min_separation: 10e-6,
            resolution: 1e-6,
        }
    }
}

impl Constraints {
    pub fn new(min_separation: f64, resolution: f64) -> Result<Self> {
        if !(min_separation > 0.0 && resolution > 0.0) {
            return Err(Error::Invalid("Δ and δ must be positive".into()));
        }
        Ok(Constraints {
            min_separation,
            resolution,
        })
    }

    /// Nearest multiple of δ.
    pub fn snap(&self, t: f64) -> f64 {
        (t / self.resolution).round() * self.resolution
    }

    pub fn on_grid(&self, t: f64) -> bool {
        let x = t / self.resolution;
        (x - x.round()).abs() < GRID_TOL
    }

    /// Largest frequency the schedule can sample without aliasing, `2π/Δ`.
    pub fn max_frequency(&self) -> f64 {
        2.0 * PI / self.min_separation
    }
}

/// Piecewise-constant ±1 function on `[breakpoints[0], breakpoints[n]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchingFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<i8>,
}

impl SwitchingFunction {
    pub fn constant(a: f64, b: f64, v: i8) -> Self {
        SwitchingFunction {
            breakpoints: vec![a, b],
            values: vec![v],
        }
    }

    /// `y(t)` starting at +1 on `[a, b]` and flipping at each time in `flips`.
    pub fn from_flips(a: f64, b: f64, flips: &[f64]) -> Self {
        let mut bp = vec![a];
        let mut values = Vec::new();
        let mut v = 1i8;
        let mut sorted: Vec<f64> = flips.to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for &t in &sorted {
            if t <= a {
                v = -v;
                continue;
            }
            if t >= b {
                break;
            }
            if t > *bp.last().unwrap() {
                values.push(v);
                bp.push(t);
            }
            v = -v;
        }
        values.push(v);
        bp.push(b);
        let mut s = SwitchingFunction {
            breakpoints: bp,
            values,
        };
        s.merge();
        s
    }

    fn merge(&mut self) {
        let mut bp = vec![self.breakpoints[0]];
        let mut vals: Vec<i8> = Vec::new();
        for (i, &v) in self.values.iter().enumerate() {
            let end = self.breakpoints[i + 1];
            if end <= *bp.last().unwrap() {
                continue;
            }
            if vals.last() == Some(&v) {
                *bp.last_mut().unwrap() = end;
            } else {
                vals.push(v);
                bp.push(end);
            }
        }
        if vals.is_empty() {
            vals.push(self.values.first().copied().unwrap_or(1));
            bp.push(bp[0]);
        }
        self.breakpoints = bp;
        self.values = vals;
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn end(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    /// Value at `t` (right-continuous; the last segment is closed).
    pub fn value_at(&self, t: f64) -> i8 {
        let n = self.values.len();
        for i in 0..n {
            if t < self.breakpoints[i + 1] {
                return self.values[i];
            }
        }
        self.values[n - 1]
    }

    /// `(start, end, value)` per segment.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, i8)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.breakpoints[i], self.breakpoints[i + 1], v))
    }

    /// Restriction to `[a, b]`, which must lie inside the domain.
    pub fn restrict(&self, a: f64, b: f64) -> Self {
        let mut bp = vec![a];
        let mut values = Vec::new();
        for (s, e, v) in self.segments() {
            if e <= a || s >= b {
                continue;
            }
            values.push(v);
            bp.push(e.min(b));
        }
        if values.is_empty() {
            values.push(self.value_at(a));
            bp.push(b);
        }
        SwitchingFunction {
            breakpoints: bp,
            values,
        }
    }

    pub fn shifted(&self, dt: f64) -> Self {
        SwitchingFunction {
            breakpoints: self.breakpoints.iter().map(|t| t + dt).collect(),
            values: self.values.clone(),
        }
    }

    pub fn filter(&self) -> FilterFunction {
        FilterFunction {
            breakpoints: self.breakpoints.clone(),
            signs: self.values.clone(),
        }
    }
}

/// Control schedule over N intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    /// `t_0 = 0, t_1, …, t_N = T`.
    pub boundaries: Vec<f64>,
    /// `θ_0, …, θ_N`, rotation angles about y at the boundaries.
    pub angles: Vec<f64>,
    /// π-pulse times for each of the N intervals, inside `[t_{k−1}, t_k]`.
    pub pi_pulses: Vec<Vec<f64>>,
    pub constraints: Constraints,
}

impl PulseSchedule {
    pub fn new(
        boundaries: Vec<f64>,
        angles: Vec<f64>,
        pi_pulses: Vec<Vec<f64>>,
        constraints: Constraints,
    ) -> Result<Self> {
        let n = boundaries.len();
        if n < 2 {
            return Err(Error::Invalid("need at least one interval".into()));
        }
        if angles.len() != n || pi_pulses.len() != n - 1 {
            return Err(Error::Invalid(format!(
                "{} boundaries need {} angles and {} pulse trains",
                n,
                n,
                n - 1
            )));
        }
        if boundaries[0] != 0.0 || boundaries.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid(
                "boundaries must start at 0 and be non-decreasing".into(),
            ));
        }
        for (k, train) in pi_pulses.iter().enumerate() {
            if train
                .iter()
                .any(|&t| t < boundaries[k] - 1e-15 || t > boundaries[k + 1] + 1e-15)
            {
                return Err(Error::Invalid(format!(
                    "π pulse outside interval {}",
                    k + 1
                )));
            }
        }
        Ok(PulseSchedule {
            boundaries,
            angles,
            pi_pulses,
            constraints,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn total_time(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    pub fn all_pi_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.pi_pulses.iter().flatten().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    pub fn pi_count(&self) -> usize {
        self.pi_pulses.iter().map(Vec::len).sum()
    }

    /// The π-generated switching function `y(t)` on `[0, T]`.
    pub fn base_switching(&self) -> SwitchingFunction {
        SwitchingFunction::from_flips(0.0, self.total_time(), &self.all_pi_times())
    }

    /// Interval `k` (1-based) as `(t_{k−1}, t_k)`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.boundaries[k - 1], self.boundaries[k])
    }
}

/// One constraint violation reported by [`schedule_validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    OffGrid { time: f64 },
    TooClose { first: f64, second: f64 },
    ShortInterval { interval: usize, length: f64 },
}

fn is_identity_angle(theta: f64) -> bool {
    let r = theta.rem_euclid(4.0 * PI);
    r.abs() < 1e-12 || (4.0 * PI - r).abs() < 1e-12
}

/// Every Δ/δ violation of the schedule. Coincident pulses are one composite
/// rotation; zero-length intervals are allowed and denote such a merge.
pub fn schedule_validate(s: &PulseSchedule) -> std::result::Result<(), Vec<Violation>> {
    let c = &s.constraints;
    let mut out = Vec::new();
    let mut times: Vec<f64> = s.all_pi_times();
    for (k, &th) in s.angles.iter().enumerate() {
        if !is_identity_angle(th) {
            times.push(s.boundaries[k]);
        }
    }
    for &t in &s.boundaries {
        if !c.on_grid(t) {
            out.push(Violation::OffGrid { time: t });
        }
    }
    for &t in &s.all_pi_times() {
        if !c.on_grid(t) {
            out.push(Violation::OffGrid { time: t });
        }
    }
    for k in 1..=s.n_intervals() {
        let (a, b) = s.interval(k);
        let len = b - a;
        if len > GRID_TOL * c.resolution && len < c.min_separation * (1.0 - GRID_TOL) {
            out.push(Violation::ShortInterval {
                interval: k,
                length: len,
            });
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let merge = GRID_TOL * c.resolution;
    times.dedup_by(|b, a| (*b - *a).abs() <= merge);
    for w in times.windows(2) {
        if w[1] - w[0] < c.min_separation * (1.0 - GRID_TOL) {
            out.push(Violation::TooClose {
                first: w[0],
                second: w[1],
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// π-pulse families used inside a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "n")]
pub enum Sequence {
    Free,
    /// Single π at the midpoint, closed by a π at the end.
    Hahn,
    Cpmg(u32),
}

impl Sequence {
    /// π times relative to the window start, for a window of length `t1`.
    pub fn pulses(&self, t1: f64, c: &Constraints) -> Result<Vec<f64>> {
        match *self {
            Sequence::Free => Ok(Vec::new()),
            Sequence::Hahn => cpmg_sequence(0, t1, c),
            Sequence::Cpmg(n) => cpmg_sequence(n, t1, c),
        }
    }

    /// The window's switching function on `[0, t1]`.
    pub fn switching(&self, t1: f64, c: &Constraints) -> Result<SwitchingFunction> {
        Ok(SwitchingFunction::from_flips(0.0, t1, &self.pulses(t1, c)?))
    }
}

/// n-CPMG π times in a window of length `t1`: `(2k+1)τ` for `k = 0..=n` with
/// `τ = t1/(2(n+1))`, plus one at `t1` when n is even so the count is even.
/// Times are snapped to the δ grid.
pub fn cpmg_sequence(n: u32, t1: f64, c: &Constraints) -> Result<Vec<f64>> {
    let n = n as usize;
    let need = 2.0 * c.min_separation * (n as f64 + 1.0);
    if t1 < need * (1.0 - GRID_TOL) {
        return Err(Error::Infeasible(format!(
            "{n}-CPMG needs t1 >= {need:e} s, got {t1:e} s"
        )));
    }
    let tau = t1 / (2.0 * (n as f64 + 1.0));
    let mut times: Vec<f64> = (0..=n).map(|k| c.snap((2 * k + 1) as f64 * tau)).collect();
    if n.is_multiple_of(2) {
        times.push(c.snap(t1));
    }
    let mut prev = 0.0;
    for &t in &times {
        if t - prev < c.min_separation * (1.0 - GRID_TOL) && t != t1 {
            return Err(Error::Infeasible(format!(
                "snapping {n}-CPMG to the δ grid violates Δ at {t:e} s"
            )));
        }
        prev = t;
    }
    if c.snap(t1) - times[n] < c.min_separation * (1.0 - GRID_TOL) {
        return Err(Error::Infeasible(format!(
            "snapping {n}-CPMG leaves less than Δ before the window end"
        )));
    }
    Ok(times)
}

/// `(−1)^{|r|_k}` for k = 1..N, with `|r|_k = Σ_{j≥k} r_j`.
pub fn interval_signs(r: &[u8]) -> Vec<i8> {
    let n = r.len() - 1;
    (1..=n)
        .map(|k| {
            let s: u32 = r[k..].iter().map(|&b| b as u32).sum();
            if s.is_multiple_of(2) {
                1
            } else {
                -1
            }
        })
        .collect()
}

/// `y_r(t) = (−1)^{|r|_k} y(t)` on interval k.
pub fn toggling_switch(s: &PulseSchedule, r: &[u8]) -> Result<SwitchingFunction> {
    if r.len() != s.n_intervals() + 1 || r.iter().any(|&b| b > 1) {
        return Err(Error::Invalid(
            "r must be a bit vector of length N+1".into(),
        ));
    }
    let y = s.base_switching();
    let sig = interval_signs(r);
    let mut bp = vec![0.0];
    let mut values = Vec::new();
    for k in 1..=s.n_intervals() {
        let (a, b) = s.interval(k);
        if b <= a {
            continue;
        }
        for (_, e, v) in y.restrict(a, b).segments() {
            values.push(v * sig[k - 1]);
            bp.push(e);
        }
    }
    let mut out = SwitchingFunction {
        breakpoints: bp,
        values,
    };
    out.merge();
    Ok(out)
}

/// `Y±` per segment plus the per-interval labels `a` (for Y⁻) and `a′`
/// (for Y⁺).
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveSwitching {
    pub breakpoints: Vec<f64>,
    pub y_plus: Vec<i8>,
    pub y_minus: Vec<i8>,
    pub a: Vec<i8>,
    pub a_prime: Vec<i8>,
    /// Interval boundaries the labels refer to.
    pub boundaries: Vec<f64>,
    /// The π-generated `y(t)` the labels multiply.
    pub base: SwitchingFunction,
}

/// `Y± = (y_r ± f_z·y_r′)/2`.
pub fn effective_switchings(
    s: &PulseSchedule,
    r: &[u8],
    rp: &[u8],
    f_z: i8,
) -> Result<EffectiveSwitching> {
    if f_z != 1 && f_z != -1 {
        return Err(Error::Invalid("f_z must be ±1".into()));
    }
    if r.len() != rp.len() {
        return Err(Error::Invalid("r and r′ must have equal length".into()));
    }
    toggling_switch(s, r)?;
    toggling_switch(s, rp)?;
    let sig = interval_signs(r);
    let sigp = interval_signs(rp);
    let a: Vec<i8> = sig
        .iter()
        .zip(&sigp)
        .map(|(&x, &y)| (x - f_z * y) / 2)
        .collect();
    let a_prime: Vec<i8> = sig
        .iter()
        .zip(&sigp)
        .map(|(&x, &y)| (x + f_z * y) / 2)
        .collect();
    Ok(from_labels(s, &a, &a_prime))
}

/// Builds the effective switching with the given labels on `s`'s intervals.
pub fn from_labels(s: &PulseSchedule, a: &[i8], a_prime: &[i8]) -> EffectiveSwitching {
    let y = s.base_switching();
    let mut bp = vec![0.0];
    let mut yp = Vec::new();
    let mut ym = Vec::new();
    for k in 1..=s.n_intervals() {
        let (lo, hi) = s.interval(k);
        if hi <= lo {
            continue;
        }
        for (_, e, v) in y.restrict(lo, hi).segments() {
            ym.push(a[k - 1] * v);
            yp.push(a_prime[k - 1] * v);
            bp.push(e);
        }
    }
    EffectiveSwitching {
        breakpoints: bp,
        y_plus: yp,
        y_minus: ym,
        a: a.to_vec(),
        a_prime: a_prime.to_vec(),
        boundaries: s.boundaries.clone(),
        base: y,
    }
}

/// Gauge-free representative of an effective switching.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CanonicalConfig {
    /// Y⁻ support labels, each 0 or 1.
    pub a: Vec<i8>,
    /// Y⁺ support labels, each 0 or 1.
    pub a_prime: Vec<i8>,
    /// Per-interval sign `g_k`: the input equals `g_k·(canonical)` on interval k.
    pub gauge: Vec<i8>,
}

/// Absorbs the per-interval sign of the non-vanishing label into a gauge, so
/// that π-pair insertions at `(t_{k−1}, t_k)` (which flip `a_k` and `a′_k`
/// together) and full inversions leave the representative unchanged.
pub fn canonical_config(es: &EffectiveSwitching) -> CanonicalConfig {
    let n = es.a.len();
    let mut a = vec![0; n];
    let mut ap = vec![0; n];
    let mut gauge = vec![1; n];
    for k in 0..n {
        let g = if es.a[k] != 0 { es.a[k] } else { es.a_prime[k] };
        gauge[k] = if g < 0 { -1 } else { 1 };
        a[k] = es.a[k] * gauge[k];
        ap[k] = es.a_prime[k] * gauge[k];
    }
    CanonicalConfig {
        a,
        a_prime: ap,
        gauge,
    }
}

/// Applies a π pair at `(t_{k−1}, t_k)` to the labels: flips interval k.
pub fn pi_pair_flip(es: &EffectiveSwitching, k: usize) -> EffectiveSwitching {
    let mut out = es.clone();
    out.a[k - 1] = -out.a[k - 1];
    out.a_prime[k - 1] = -out.a_prime[k - 1];
    let (lo, hi) = (es.boundaries[k - 1], es.boundaries[k]);
    for i in 0..out.y_minus.len() {
        let mid = 0.5 * (out.breakpoints[i] + out.breakpoints[i + 1]);
        if mid >= lo && mid < hi {
            out.y_minus[i] = -out.y_minus[i];
            out.y_plus[i] = -out.y_plus[i];
        }
    }
    out
}

/// Closed-form filter `F(ω) = ∫ e^{iωt} y(t) dt` of a piecewise-constant
/// sign pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterFunction {
    pub breakpoints: Vec<f64>,
    pub signs: Vec<i8>,
}

/// `sin(x)/x` with the removable singularity filled.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

impl FilterFunction {
    pub fn eval(&self, omega: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &s) in self.signs.iter().enumerate() {
            if s == 0 {
                continue;
            }
            let (a, b) = (self.breakpoints[i], self.breakpoints[i + 1]);
            let len = b - a;
            let mid = 0.5 * (a + b);
            acc += Complex64::from_polar(s as f64 * len * sinc(0.5 * omega * len), omega * mid);
        }
        acc
    }

    pub fn window_length(&self) -> f64 {
        self.breakpoints.last().unwrap() - self.breakpoints[0]
    }
}

/// `F(ω)` of the sign pattern `sw`.
pub fn filter(sw: &SwitchingFunction, omega: f64) -> Complex64 {
    sw.filter().eval(omega)
}

/// Main frequency support search grid: linear below 2π·100 Hz, then 512
/// log-spaced points per decade up to `w_max`.
pub fn mfs_grid(w_max: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * 100.0;
    let mut g: Vec<f64> = (0..512).map(|i| w0 * i as f64 / 512.0).collect();
    if w_max <= w0 {
        g.retain(|&w| w <= w_max);
        g.push(w_max);
        return g;
    }
    let decades = (w_max / w0).log10();
    let n = (decades * 512.0).ceil() as usize;
    for i in 0..=n {
        g.push(w0 * 10f64.powf(decades * i as f64 / n as f64));
    }
    g
}

/// The main frequency support of a non-negative window `x(ω)` (typically
/// `|Re or Im F(ω)F′(−ω)|`) over `grid` (ascending, starting at 0).
///
/// The support is the contiguous band around the global maximum on which
/// `x ≥ β·max`; it is returned when it carries at least a fraction α of the
/// total weight on the grid, and `EmptySupport` is raised otherwise. Band
/// edges are refined by bisection on `x`.
pub fn mfs<X: Fn(f64) -> f64>(x: X, alpha: f64, beta: f64, grid: &[f64]) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(Error::Invalid("α and β must lie in (0, 1)".into()));
    }
    if grid.len() < 3 {
        return Err(Error::Invalid("MFS grid too small".into()));
    }
    let vals: Vec<f64> = grid.iter().map(|&w| x(w)).collect();
    let (imax, &vmax) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    if vmax <= 0.0 {
        return Err(Error::EmptySupport);
    }
    let floor = beta * vmax;
    let mut lo = imax;
    while lo > 0 && vals[lo - 1] >= floor {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < grid.len() && vals[hi + 1] >= floor {
        hi += 1;
    }
    let edge = |inside: f64, outside: f64| {
        let (mut a, mut b) = (inside, outside);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if x(m) >= floor {
                a = m;
            } else {
                b = m;
            }
        }
        a
    };
    let wa = if lo > 0 {
        edge(grid[lo], grid[lo - 1])
    } else {
        grid[0]
    };
    let wb = if hi + 1 < grid.len() {
        edge(grid[hi], grid[hi + 1])
    } else {
        grid[hi]
    };
    let trap = |range: std::ops::Range<usize>| -> f64 {
        range
            .map(|i| 0.5 * (vals[i] + vals[i + 1]) * (grid[i + 1] - grid[i]))
            .sum()
    };
    let total = trap(0..grid.len() - 1);
    let inside = trap(lo..hi);
    if inside < alpha * total {
        return Err(Error::EmptySupport);
    }
    Ok((wa, wb))
}
