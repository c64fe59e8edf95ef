//! Frequency-domain estimation: sampling plans, time traces of the window
//! integrals `𝓘±(t₁, t₂, t₁ + t₂)` on `t₂ = kTs`, their DTFT inversion,
//! stitching of frequency regions and error bounds.
//!
//! With `Z(ω) = F(ω)·conj F′(ω)` for the late pattern `y` and the early
//! pattern `y′`, the traces of one ordered pair and its exchange combine to
//!
//! - plus: `(1/π)∫cos(ωt₂) Re Z S⁺` (even) and `(1/π)∫sin(ωt₂) Im Z S⁺` (odd),
//! - minus: `(1/π)∫sin(ωt₂) Re Z S⁻` (odd) and `(1/π)∫cos(ωt₂) Im Z S⁻` (even).
//!
//! When both windows share a sequence, `Z = |F|²` and only the first member
//! of each pair is measured.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{mfs, mfs_grid, Constraints, FilterFunction, Sequence, SwitchingFunction};
use crate::dynamics::{IntegralBackend, Kind, Shots};
use crate::error::{Error, Result};
use crate::inference::{
    deadtime_pieces, extract_q_quantities, infer_minus, infer_plus, measure_separated_phase,
    measure_separated_plus, measure_square, mix_seed, protocol_grid, resolve_branch,
    safe_zone_bound, tracking_step, ExpectationRecord, Experiment, Measured, PhaseMeasurement,
    Piece, QId, QQuantity, SafeZoneState, Setting, SimulatedExperiment, ThreeWindow,
};
use crate::quad::{uniform_edges, GaussLegendre, Mesh};

/// Default resolution margin `γ` of the `K` rule.
pub const DEFAULT_GAMMA: f64 = 5.0;

/// Estimates are masked where `|divisor|` is below this fraction of its maximum.
pub const MASK_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------
// Plans

/// Knobs of [`plan_sampling`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `ω_c` is capped at this multiple of `ω_b`.
    pub cutoff_multiple: f64,
    /// Upper end of the MFS search, rad/s; `None` uses `2π/Δ`.
    pub w_max: Option<f64>,
    /// Fixed sampling period; snapped to the δ grid.
    pub ts: Option<f64>,
    /// Fixed trace count.
    pub k: Option<usize>,
    pub shots: Shots,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            alpha: 0.5,
            beta: 0.5,
            gamma: DEFAULT_GAMMA,
            cutoff_multiple: 4.0,
            w_max: None,
            ts: None,
            k: None,
            shots: Shots::Infinite,
        }
    }
}

/// What to plan for: the window sequences and an optional target band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub id: String,
    pub t1: f64,
    pub sequence: Sequence,
    #[serde(default)]
    pub partner: Option<Sequence>,
    /// Band to cover, rad/s; must lie inside the filter MFS.
    #[serde(default)]
    pub target: Option<(f64, f64)>,
}

/// Sampling of one window pair: `t₂ = kTs` for `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub id: String,
    pub t1: f64,
    /// Sequence of the late window.
    pub sequence: Sequence,
    /// Sequence of the early window when it differs from `sequence`.
    #[serde(default)]
    pub partner: Option<Sequence>,
    pub ts: f64,
    pub k: usize,
    pub shots: Shots,
    /// Main frequency support `[ω_a, ω_b]`, rad/s.
    pub mfs: (f64, f64),
    pub omega_c: f64,
    /// The support reaches DC; the resolution margin does not apply.
    pub dc: bool,
    /// `ω_a / (2π/(Ts(2K+1)))`.
    pub margin: f64,
    pub gamma: f64,
}

/// The late and early window filters of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterPair {
    pub late: FilterFunction,
    pub early: FilterFunction,
}

impl FilterPair {
    /// `Z(ω) = F(ω)·conj F′(ω)`.
    pub fn z(&self, w: f64) -> Complex64 {
        self.late.eval(w) * self.early.eval(w).conj()
    }

    pub fn exchanged(&self) -> bool {
        self.late != self.early
    }
}

impl SamplingPlan {
    pub fn late_pattern(&self, c: &Constraints) -> Result<SwitchingFunction> {
        self.sequence.switching(self.t1, c)
    }

    pub fn early_pattern(&self, c: &Constraints) -> Result<SwitchingFunction> {
        self.partner.unwrap_or(self.sequence).switching(self.t1, c)
    }

    pub fn filters(&self, c: &Constraints) -> Result<FilterPair> {
        Ok(FilterPair {
            late: self.late_pattern(c)?.filter(),
            early: self.early_pattern(c)?.filter(),
        })
    }

    pub fn exchanged(&self) -> bool {
        matches!(self.partner, Some(p) if p != self.sequence)
    }

    pub fn t2_grid(&self) -> Vec<f64> {
        (0..=self.k).map(|k| k as f64 * self.ts).collect()
    }

    /// Largest admissible `Ts`, `2π/(ω_c + ω_b)` (exclusive).
    pub fn sampling_bound(&self) -> f64 {
        2.0 * PI / (self.omega_c + self.mfs.1)
    }

    /// Width of the Dirichlet kernel's main lobe, `2π/(Ts(2K+1))`.
    pub fn resolution(&self) -> f64 {
        2.0 * PI / (self.ts * (2 * self.k + 1) as f64)
    }

    /// Non-DC plan whose margin is below `γ`.
    pub fn below_margin(&self) -> bool {
        !self.dc && self.margin < self.gamma
    }

    /// Checks the sampling rule (strict) and, for non-DC plans, that the
    /// kernel lobe is narrower than `ω_a`.
    pub fn check(&self) -> Result<()> {
        if self.ts >= self.sampling_bound() {
            return Err(Error::Infeasible(format!(
                "{}: Ts = {:e} s violates Ts < 2π/(ω_c + ω_b) = {:e} s",
                self.id,
                self.ts,
                self.sampling_bound()
            )));
        }
        if !self.dc && self.margin < 1.0 {
            return Err(Error::Infeasible(format!(
                "{}: kernel lobe {:e} rad/s exceeds ω_a = {:e} rad/s",
                self.id,
                self.resolution(),
                self.mfs.0
            )));
        }
        Ok(())
    }
}

/// First local minimum of `x` beyond `from`, searched up to `to` with step `h`.
fn first_minimum<X: Fn(f64) -> f64>(x: X, from: f64, to: f64, h: f64) -> Option<f64> {
    let mut w0 = from;
    let mut w1 = from + h;
    let mut x1 = x(w1);
    let mut descended = x1 < x(w0);
    while w1 + h <= to {
        let w2 = w1 + h;
        let x2 = x(w2);
        if descended && x1 <= x2 {
            let (mut a, mut b) = (w0, w2);
            for _ in 0..100 {
                let m1 = a + (b - a) / 3.0;
                let m2 = b - (b - a) / 3.0;
                if x(m1) <= x(m2) {
                    b = m2;
                } else {
                    a = m1;
                }
            }
            return Some(0.5 * (a + b));
        }
        descended = descended || x2 < x1;
        w0 = w1;
        w1 = w2;
        x1 = x2;
    }
    None
}

/// Chooses `(Ts, K)` for a window pair.
///
/// The support is the MFS of `|Re Z|`; `ω_c` is the first zero of `|Z|`
/// beyond it, capped at `cutoff_multiple·ω_b`. Without a fixed `Ts` the
/// largest δ multiple below the sampling bound is used; without a fixed `K`
/// the smallest `K` with margin `γ` (for DC plans: lobe `≤ ω_b/(10γ)`).
/// Fixed values must satisfy the sampling rule and margin ≥ 1; a margin
/// below `γ` is kept and reported by [`SamplingPlan::below_margin`].
pub fn plan_sampling(
    req: &PlanRequest,
    c: &Constraints,
    opts: &PlanOptions,
) -> Result<SamplingPlan> {
    let t1 = c.snap(req.t1);
    if t1 <= 0.0 {
        return Err(Error::Invalid("window length must be positive".into()));
    }
    let late = req.sequence.switching(t1, c)?.filter();
    let early = req
        .partner
        .unwrap_or(req.sequence)
        .switching(t1, c)?
        .filter();
    let pair = FilterPair { late, early };
    let w_max = opts.w_max.unwrap_or_else(|| c.max_frequency());
    let x = |w: f64| pair.z(w).re.abs();
    let (wa, wb) = mfs(x, opts.alpha, opts.beta, &mfs_grid(w_max))?;
    let (wa, wb) = match req.target {
        Some((a, b)) => {
            if a < wa - 1e-9 * wb || b > wb + 1e-9 * wb || a >= b {
                return Err(Error::Infeasible(format!(
                    "target [{a:e}, {b:e}] rad/s is not inside the filter MFS [{wa:e}, {wb:e}]"
                )));
            }
            (a, b)
        }
        None => (wa, wb),
    };
    let dc = wa <= 0.0;
    let cap = opts.cutoff_multiple * wb;
    let h = (PI / (32.0 * t1)).min(wb / 64.0);
    let omega_c = first_minimum(|w| pair.z(w).norm(), wb, cap, h).map_or(cap, |z| z.min(cap));
    let bound = 2.0 * PI / (omega_c + wb);
    let ts = match opts.ts {
        Some(ts) => c.snap(ts),
        None => {
            let n = (bound / c.resolution).floor();
            let n = if n * c.resolution >= bound {
                n - 1.0
            } else {
                n
            };
            n * c.resolution
        }
    };
    if ts < c.resolution * (1.0 - 1e-9) {
        return Err(Error::Infeasible(format!(
            "{}: the sampling rule needs Ts < {bound:e} s, below the resolution δ = {:e} s",
            req.id, c.resolution
        )));
    }
    let k = match opts.k {
        Some(k) => k,
        None => {
            let lobe = if dc {
                wb / (10.0 * opts.gamma)
            } else {
                wa / opts.gamma
            };
            let n = (2.0 * PI / (ts * lobe)).ceil();
            (((n - 1.0) / 2.0).ceil().max(1.0)) as usize
        }
    };
    let margin = if dc {
        f64::INFINITY
    } else {
        wa * ts * (2 * k + 1) as f64 / (2.0 * PI)
    };
    let plan = SamplingPlan {
        id: req.id.clone(),
        t1,
        sequence: req.sequence,
        partner: req.partner.filter(|p| *p != req.sequence),
        ts,
        k,
        shots: opts.shots,
        mfs: (wa, wb),
        omega_c,
        dc,
        margin,
        gamma: opts.gamma,
    };
    plan.check()?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Traces

/// How a trace extends to `k < 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    /// `𝓘(−t) = 𝓘(t)`, cosine basis.
    Even,
    /// `𝓘(−t) = −𝓘(t)`, sine basis.
    Odd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t2: f64,
    pub value: f64,
    pub variance: f64,
    /// No usable value (ill-conditioned and not interpolated).
    pub missing: bool,
    /// Value filled in from the neighbours.
    pub interpolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub extension: Extension,
    pub points: Vec<TracePoint>,
}

/// The traces of one plan and kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeTraceSet {
    pub plan_id: String,
    pub kind: Kind,
    pub ts: f64,
    /// Branch paired with `Re Z`.
    pub re: Trace,
    /// Branch paired with `Im Z`; absent when both windows share a sequence.
    pub im: Option<Trace>,
    /// Some dropouts could not be interpolated.
    pub degraded: bool,
    /// `t₂` values where the branch decision was ambiguous.
    pub branch_gaps: Vec<f64>,
}

fn extensions(kind: Kind) -> (Extension, Extension) {
    match kind {
        Kind::Plus => (Extension::Even, Extension::Odd),
        Kind::Minus => (Extension::Odd, Extension::Even),
    }
}

fn exact_points(ts: f64, v: &[f64]) -> Vec<TracePoint> {
    v.iter()
        .enumerate()
        .map(|(k, &value)| TracePoint {
            t2: k as f64 * ts,
            value,
            variance: 0.0,
            missing: false,
            interpolated: false,
        })
        .collect()
}

impl TimeTraceSet {
    /// Noiseless traces from given values, e.g. computed by an oracle.
    pub fn from_values(plan: &SamplingPlan, kind: Kind, re: &[f64], im: Option<&[f64]>) -> Self {
        let (er, ei) = extensions(kind);
        TimeTraceSet {
            plan_id: plan.id.clone(),
            kind,
            ts: plan.ts,
            re: Trace {
                extension: er,
                points: exact_points(plan.ts, re),
            },
            im: im.map(|v| Trace {
                extension: ei,
                points: exact_points(plan.ts, v),
            }),
            degraded: false,
            branch_gaps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.re.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.points.is_empty()
    }
}

/// How expectations turn into window-pair integrals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Closed-form settings on each three-interval schedule.
    Direct,
    /// Full cycling grid, `Q` extraction and algebraic inversion.
    QAlgebra,
}

/// Everything [`collect_traces`] needs besides the plan.
pub struct Pipeline<'a, B: IntegralBackend + ?Sized> {
    pub backend: &'a B,
    pub constraints: Constraints,
    pub route: Route,
    pub seed: u64,
    /// Classical estimate used for safe-zone bounds of minus traces.
    pub s_plus_hat: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
    /// Upper limit of the safe-zone integrals, rad/s.
    pub w_max: f64,
    /// Linearly interpolate isolated dropouts.
    pub interpolate_dropouts: bool,
}

/// Stable 64-bit hash of a plan id for seeding.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn ill(e: &Error) -> bool {
    matches!(e, Error::IllConditioned(_))
}

fn q_quantities<E: Experiment + ?Sized>(
    exp: &E,
    w: &ThreeWindow,
    c: &Constraints,
    stream: u64,
) -> Result<(Vec<QQuantity>, f64)> {
    let (s, sigma) = w.schedule(c)?;
    let grid = protocol_grid();
    let settings: Vec<Setting> = grid
        .iter()
        .map(|p| Setting {
            angles: p.angles(),
            state: p.state,
            obs: p.obs,
        })
        .collect();
    let m = exp.run(&s, &settings, stream)?;
    let records: Vec<ExpectationRecord> = grid
        .iter()
        .zip(&m)
        .map(|(p, r)| ExpectationRecord {
            config: *p,
            value: r.value,
            variance: r.variance,
        })
        .collect();
    Ok((
        extract_q_quantities(&records, s.pi_count(), &QId::all())?,
        sigma,
    ))
}

/// First-order variance of `f(Q)` treating the real and imaginary parts of
/// every `Q` as independent with half the quantity's variance each.
fn q_variance<F: Fn(&[QQuantity]) -> Result<f64>>(f: F, qs: &[QQuantity]) -> f64 {
    if qs.iter().all(|q| q.variance == 0.0) {
        return 0.0;
    }
    if f(qs).is_err() {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    let mut work = qs.to_vec();
    for i in 0..qs.len() {
        let var = 0.5 * qs[i].variance;
        if var == 0.0 {
            continue;
        }
        let h = 1e-4 * var.sqrt();
        for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
            work[i].value = qs[i].value + dir * h;
            let up = f(&work);
            work[i].value = qs[i].value - dir * h;
            let dn = f(&work);
            work[i].value = qs[i].value;
            match (up, dn) {
                (Ok(u), Ok(d)) => {
                    let g = (u - d) / (2.0 * h);
                    acc += g * g * var;
                }
                _ => return f64::INFINITY,
            }
        }
    }
    acc
}

impl<B: IntegralBackend + ?Sized> Pipeline<'_, B> {
    fn separated_plus<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        w: &ThreeWindow,
        stream: u64,
    ) -> Result<Measured> {
        match self.route {
            Route::Direct => measure_separated_plus(exp, w, &self.constraints, stream),
            Route::QAlgebra => {
                if w.is_empty() {
                    return Ok(Measured {
                        value: 0.0,
                        variance: 0.0,
                    });
                }
                let (qs, sigma) = q_quantities(exp, w, &self.constraints, stream)?;
                let f = |q: &[QQuantity]| Ok(infer_plus(q)?.p[2][0]);
                Ok(Measured {
                    value: sigma * f(&qs)?,
                    variance: q_variance(f, &qs),
                })
            }
        }
    }

    fn separated_phase<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        w: &ThreeWindow,
        stream: u64,
    ) -> Result<PhaseMeasurement> {
        match self.route {
            Route::Direct => measure_separated_phase(exp, w, &self.constraints, stream),
            Route::QAlgebra => {
                if w.is_empty() {
                    return Ok(PhaseMeasurement {
                        s: 0.0,
                        c: 1.0,
                        var_s: 0.0,
                        var_c: 0.0,
                        sigma: 1.0,
                    });
                }
                let (qs, sigma) = q_quantities(exp, w, &self.constraints, stream)?;
                let block = |q: &[QQuantity]| -> Result<(f64, f64)> {
                    let b = infer_minus(q, &infer_plus(q)?)?[0];
                    Ok((b.sin, b.cos))
                };
                let (s, c) = block(&qs)?;
                Ok(PhaseMeasurement {
                    s,
                    c,
                    var_s: q_variance(|q| Ok(block(q)?.0), &qs),
                    var_c: q_variance(|q| Ok(block(q)?.1), &qs),
                    sigma,
                })
            }
        }
    }

    fn plus_point<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        y: &SwitchingFunction,
        yp: &SwitchingFunction,
        t2: f64,
        stream: u64,
    ) -> Result<Measured> {
        let pieces = deadtime_pieces(y, yp, t2, Kind::Plus);
        let mut value = 0.0;
        let mut variance = 0.0;
        for (i, p) in pieces.iter().enumerate() {
            let st = mix_seed(stream, 0x91, i as u64);
            let (m, sign) = match p {
                Piece::Square { length, sign } => {
                    (measure_square(exp, *length, &self.constraints, st)?, *sign)
                }
                Piece::Separated { window, sign } => (self.separated_plus(exp, window, st)?, *sign),
            };
            value += sign * m.value;
            variance += m.variance;
        }
        Ok(Measured { value, variance })
    }

    fn s_hat(&self) -> Result<&(dyn Fn(f64) -> f64 + Sync)> {
        self.s_plus_hat
            .ok_or_else(|| Error::Missing("minus traces need a classical estimate".into()))
    }

    fn piece_bound(&self, w: &ThreeWindow) -> Result<f64> {
        Ok(safe_zone_bound(
            self.s_hat()?,
            &w.late.filter(),
            &w.early.filter(),
            self.w_max,
        ))
    }

    /// Minus value of a separated piece, subdivided until every part lies
    /// inside the principal range.
    fn minus_piece<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        piece: &Piece,
        stream: u64,
    ) -> Result<Measured> {
        let mut stack = vec![piece.clone()];
        let mut value = 0.0;
        let mut variance = 0.0;
        let mut n = 0u64;
        while let Some(p) = stack.pop() {
            let Piece::Separated { window, sign } = &p else {
                continue;
            };
            if window.is_empty() {
                continue;
            }
            if 4.0 * self.piece_bound(window)? >= 0.5 * PI {
                if let Some((a, b)) = p.split(&self.constraints) {
                    stack.push(a);
                    stack.push(b);
                    continue;
                }
                return Err(Error::Infeasible(
                    "minus piece exceeds the principal range at the δ grid".into(),
                ));
            }
            let e = self
                .separated_phase(exp, window, mix_seed(stream, 0x93, n))?
                .principal();
            n += 1;
            value += sign * e.value;
            variance += e.variance;
        }
        Ok(Measured { value, variance })
    }

    fn minus_point<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        y: &SwitchingFunction,
        yp: &SwitchingFunction,
        t2: f64,
        stream: u64,
    ) -> Result<Measured> {
        let mut value = 0.0;
        let mut variance = 0.0;
        for (i, p) in deadtime_pieces(y, yp, t2, Kind::Minus).iter().enumerate() {
            let m = self.minus_piece(exp, p, mix_seed(stream, 0x92, i as u64))?;
            value += m.value;
            variance += m.variance;
        }
        Ok(Measured { value, variance })
    }

    /// Values of one ordered pattern pair on `t2s`, `None` for dropouts,
    /// plus the ambiguous branch crossings.
    fn ordered<E: Experiment + ?Sized>(
        &self,
        exp: &E,
        plan: &SamplingPlan,
        y: &SwitchingFunction,
        yp: &SwitchingFunction,
        kind: Kind,
        tag: u64,
    ) -> Result<(Vec<Option<Measured>>, Vec<f64>)> {
        let t2s = plan.t2_grid();
        let point = |k: usize| -> Result<Option<Measured>> {
            let stream = mix_seed(tag, k as u64, 0);
            let r = match kind {
                Kind::Plus => self.plus_point(exp, y, yp, t2s[k], stream),
                Kind::Minus => self.minus_point(exp, y, yp, t2s[k], stream),
            };
            match r {
                Ok(m) => Ok(Some(m)),
                Err(e) if ill(&e) => Ok(None),
                Err(e) => Err(e),
            }
        };
        if kind == Kind::Plus {
            let v = (0..t2s.len())
                .into_par_iter()
                .map(point)
                .collect::<Result<Vec<_>>>()?;
            return Ok((v, Vec::new()));
        }
        let s_hat = self.s_hat()?;
        let (fy, fyp) = (y.filter(), yp.filter());
        let bound = safe_zone_bound(s_hat, &fy, &fyp, self.w_max);
        let t1 = plan.t1;
        let tol = 1e-9 * plan.ts;
        if 4.0 * bound < 0.5 * PI {
            let v = (0..t2s.len())
                .into_par_iter()
                .map(point)
                .collect::<Result<Vec<_>>>()?;
            return Ok((v, Vec::new()));
        }
        // Overlapping windows are composed from subdivided pieces; the
        // separated part is tracked across branches on a finer grid.
        let mut out: Vec<Option<Measured>> = (0..t2s.len())
            .into_par_iter()
            .map(|k| {
                if t2s[k] < t1 - tol {
                    point(k)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let delta = self.constraints.resolution;
        let cells = (plan.ts / delta).round() as usize;
        let step = tracking_step(s_hat, &fy, &fyp, self.w_max);
        let dmax = (step / delta).floor() as usize;
        if dmax == 0 {
            return Err(Error::Infeasible(format!(
                "branch tracking needs t2 steps of {step:e} s, below δ"
            )));
        }
        let d = (1..=cells.min(dmax))
            .rev()
            .find(|d| cells.is_multiple_of(*d))
            .unwrap_or(1);
        let h = d as f64 * delta;
        let j0 = (t1 / h - 1e-9).ceil() as usize;
        let j_end = (plan.k * cells) / d;
        if j0 > j_end {
            return Ok((out, Vec::new()));
        }
        let start = j0 as f64 * h;
        let early = yp.shifted(-yp.start());
        let window_at = |t: f64| ThreeWindow {
            early: early.clone(),
            late: y.shifted(t - y.start()),
        };
        let seed_piece = Piece::Separated {
            window: window_at(start),
            sign: 1.0,
        };
        let seed = self.minus_piece(exp, &seed_piece, mix_seed(tag, 0x5EED, 0))?;
        let (_, sigma) = window_at(start).schedule(&self.constraints)?;
        let zone = SafeZoneState::seeded(start, 4.0 * sigma * seed.value, h);
        let fine: Vec<f64> = (j0 + 1..=j_end).map(|j| j as f64 * h).collect();
        let phases = fine
            .par_iter()
            .enumerate()
            .map(|(i, &t)| self.separated_phase(exp, &window_at(t), mix_seed(tag, 0x7A, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let s: Vec<f64> = phases.iter().map(|p| p.s).collect();
        let c: Vec<f64> = phases.iter().map(|p| p.c).collect();
        let mut noise: Vec<f64> = phases.iter().map(|p| p.var_c.sqrt()).collect();
        noise.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let noise = noise.get(noise.len() / 2).copied().unwrap_or(0.0);
        let res = resolve_branch(&fine, &s, &c, &zone, noise)?;
        let gaps = res.gaps.iter().map(|&i| fine[i]).collect();
        for (k, slot) in out.iter_mut().enumerate() {
            if t2s[k] < t1 - tol {
                continue;
            }
            let j = k * cells / d;
            *slot = Some(if j == j0 {
                seed
            } else {
                let i = j - j0 - 1;
                Measured {
                    value: sigma * res.values[i] / 4.0,
                    variance: phases[i].principal().variance,
                }
            });
        }
        Ok((out, gaps))
    }
}

fn finish(
    values: Vec<Option<Measured>>,
    ts: f64,
    extension: Extension,
    interpolate: bool,
) -> (Trace, bool) {
    let n = values.len();
    let mut degraded = false;
    let mut points: Vec<TracePoint> = values
        .iter()
        .enumerate()
        .map(|(k, m)| TracePoint {
            t2: k as f64 * ts,
            value: m.map_or(0.0, |m| m.value),
            variance: m.map_or(0.0, |m| m.variance),
            missing: m.is_none(),
            interpolated: false,
        })
        .collect();
    for k in 0..n {
        if !points[k].missing {
            continue;
        }
        let isolated = k > 0 && k + 1 < n && values[k - 1].is_some() && values[k + 1].is_some();
        if interpolate && isolated {
            let (a, b) = (values[k - 1].unwrap(), values[k + 1].unwrap());
            points[k].value = 0.5 * (a.value + b.value);
            points[k].variance = 0.25 * (a.variance + b.variance);
            points[k].missing = false;
            points[k].interpolated = true;
        } else {
            degraded = true;
        }
    }
    (Trace { extension, points }, degraded)
}

/// Runs the inference at every `t₂ = kTs` of `plan` and assembles the
/// traces of `kind`. Ill-conditioned points become dropouts.
pub fn collect_traces<B: IntegralBackend + ?Sized>(
    plan: &SamplingPlan,
    p: &Pipeline<B>,
    kind: Kind,
) -> Result<TimeTraceSet> {
    let c = &p.constraints;
    let y = plan.late_pattern(c)?;
    let yp = plan.early_pattern(c)?;
    let kind_tag = match kind {
        Kind::Plus => 1,
        Kind::Minus => 2,
    };
    let exp = SimulatedExperiment {
        backend: p.backend,
        shots: plan.shots,
        seed: mix_seed(p.seed, id_hash(&plan.id), kind_tag),
    };
    let (ab, mut gaps) = p.ordered(&exp, plan, &y, &yp, kind, 0xAB)?;
    let (er, ei) = extensions(kind);
    let (re, im) = if plan.exchanged() {
        let (ba, g2) = p.ordered(&exp, plan, &yp, &y, kind, 0xBA)?;
        gaps.extend(g2);
        let comb = |sign: f64| -> Vec<Option<Measured>> {
            ab.iter()
                .zip(&ba)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => Some(Measured {
                        value: 0.5 * (a.value + sign * b.value),
                        variance: 0.25 * (a.variance + b.variance),
                    }),
                    _ => None,
                })
                .collect()
        };
        let swap = |v: Vec<Option<Measured>>| -> Vec<Option<Measured>> {
            v.into_iter()
                .map(|m| {
                    m.map(|m| Measured {
                        value: -m.value,
                        variance: m.variance,
                    })
                })
                .collect()
        };
        let re = comb(1.0);
        // Plus: (ba − ab)/2; minus: (ab − ba)/2.
        let im = match kind {
            Kind::Plus => swap(comb(-1.0)),
            Kind::Minus => comb(-1.0),
        };
        (re, Some(im))
    } else {
        (ab, None)
    };
    let (re, d1) = finish(re, plan.ts, er, p.interpolate_dropouts);
    let (im, d2) = match im {
        Some(v) => {
            let (t, d) = finish(v, plan.ts, ei, p.interpolate_dropouts);
            (Some(t), d)
        }
        None => (None, false),
    };
    Ok(TimeTraceSet {
        plan_id: plan.id.clone(),
        kind,
        ts: plan.ts,
        re,
        im,
        degraded: d1 || d2,
        branch_gaps: gaps,
    })
}

// ---------------------------------------------------------------------------
// Inversion

/// Reconstructed spectrum on a frequency grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub kind: Kind,
    pub omega: Vec<f64>,
    /// `None` where every divisor is below its floor.
    pub value: Vec<Option<f64>>,
    pub variance: Vec<f64>,
    /// Per-point error bound; zero until [`error_bounds`] is applied.
    pub bound: Vec<f64>,
    /// Inside a main frequency support.
    pub mfs: Vec<bool>,
    /// Contributing plan ids per point, joined with `+`.
    pub plan: Vec<String>,
}

impl SpectrumEstimate {
    /// Linear interpolation through the reported points, held constant
    /// outside them up to the last grid point, zero beyond; parity-extended
    /// to negative ω.
    pub fn interpolate(&self, w: f64) -> f64 {
        let sign = match self.kind {
            Kind::Minus if w < 0.0 => -1.0,
            _ => 1.0,
        };
        let w = w.abs();
        if self.omega.last().is_none_or(|&e| w > e) {
            return 0.0;
        }
        let pts: Vec<(f64, f64)> = self
            .omega
            .iter()
            .zip(&self.value)
            .filter_map(|(&o, v)| v.map(|v| (o, v)))
            .collect();
        if pts.is_empty() {
            return 0.0;
        }
        let i = pts.partition_point(|p| p.0 < w);
        let v = if i == 0 {
            pts[0].1
        } else if i == pts.len() {
            pts[i - 1].1
        } else {
            let (a, b) = (pts[i - 1], pts[i]);
            a.1 + (b.1 - a.1) * (w - a.0) / (b.0 - a.0)
        };
        sign * v
    }

    /// Number of reported points.
    pub fn reported(&self) -> usize {
        self.value.iter().filter(|v| v.is_some()).count()
    }
}

fn basis(ext: Extension, x: f64) -> f64 {
    match ext {
        Extension::Even => x.cos(),
        Extension::Odd => x.sin(),
    }
}

/// DTFT of a trace at `w` with its variance: `Ts Σ (2 − δ_k0) 𝓘_k cos(ωkTs)`
/// for even traces and `2Ts Σ_{k≥1} 𝓘_k sin(ωkTs)` for odd ones.
pub fn trace_dtft(trace: &Trace, ts: f64, w: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut var = 0.0;
    for (k, p) in trace.points.iter().enumerate() {
        if p.missing {
            continue;
        }
        let weight = if k == 0 { ts } else { 2.0 * ts };
        let b = weight * basis(trace.extension, w * k as f64 * ts);
        v += b * p.value;
        var += b * b * p.variance;
    }
    (v, var)
}

fn branch_divisor(ext_plus_re: bool, z: Complex64) -> f64 {
    if ext_plus_re {
        z.re
    } else {
        z.im
    }
}

/// Maximum of `|d(ω)|` over `grid` and a scan of `[0, 4ω_b]`.
fn divisor_max<D: Fn(f64) -> f64>(d: D, grid: &[f64], wb: f64) -> f64 {
    let scan = (0..=2048).map(|i| 4.0 * wb * i as f64 / 2048.0);
    grid.iter()
        .copied()
        .chain(scan)
        .map(|w| d(w).abs())
        .fold(0.0, f64::max)
}

/// Inverts the traces of `plan` on `omega`: each branch gives
/// `num_b(ω) = DTFT`, divided by its `d_b = Re Z` or `Im Z`; branches are
/// combined as `Σ d_b num_b / Σ d_b²` over those with `|d_b|` above
/// [`MASK_FLOOR`] of its maximum.
pub fn dtft_reconstruct(
    traces: &TimeTraceSet,
    plan: &SamplingPlan,
    c: &Constraints,
    omega: &[f64],
) -> Result<SpectrumEstimate> {
    let fp = plan.filters(c)?;
    let mut branches: Vec<(&Trace, bool)> = vec![(&traces.re, true)];
    if let Some(im) = &traces.im {
        branches.push((im, false));
    }
    let floors: Vec<f64> = branches
        .iter()
        .map(|&(_, re)| {
            MASK_FLOOR
                * divisor_max(
                    |w| branch_divisor(re, fp.z(w)),
                    omega,
                    plan.mfs.1.max(plan.omega_c),
                )
        })
        .collect();
    let rows: Vec<(Option<f64>, f64)> = omega
        .par_iter()
        .map(|&w| {
            let z = fp.z(w);
            let (mut num, mut den, mut var) = (0.0, 0.0, 0.0);
            for (b, &(tr, re)) in branches.iter().enumerate() {
                let d = branch_divisor(re, z);
                if d.abs() < floors[b] || floors[b] == 0.0 {
                    continue;
                }
                let (n, nv) = trace_dtft(tr, traces.ts, w);
                num += d * n;
                den += d * d;
                var += d * d * nv;
            }
            if den > 0.0 {
                (Some(num / den), var / (den * den))
            } else {
                (None, 0.0)
            }
        })
        .collect();
    if rows.iter().all(|r| r.0.is_none()) {
        return Err(Error::Invalid(format!(
            "{}: every grid point is masked",
            plan.id
        )));
    }
    Ok(SpectrumEstimate {
        kind: traces.kind,
        omega: omega.to_vec(),
        value: rows.iter().map(|r| r.0).collect(),
        variance: rows.iter().map(|r| r.1).collect(),
        bound: vec![0.0; omega.len()],
        mfs: omega
            .iter()
            .map(|&w| w >= plan.mfs.0 && w <= plan.mfs.1)
            .collect(),
        plan: vec![plan.id.clone(); omega.len()],
    })
}

// ---------------------------------------------------------------------------
// Stitching

/// A stitched estimate with the uncovered bands of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Stitched {
    pub estimate: SpectrumEstimate,
    pub gaps: Vec<(f64, f64)>,
}

/// Combines estimates on a common grid. Where several supports overlap the
/// values are averaged with weights `1/(variance + bound²)`, or equally
/// when any of those is zero. Points outside every support are masked.
/// Gaps are reported inside `target`, or between the outermost covered
/// points when no target is given.
pub fn stitch_regions(
    estimates: &[SpectrumEstimate],
    target: Option<(f64, f64)>,
) -> Result<Stitched> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Invalid("nothing to stitch".into()))?;
    for e in estimates {
        if e.omega != first.omega || e.kind != first.kind {
            return Err(Error::Invalid(
                "estimates must share kind and frequency grid".into(),
            ));
        }
    }
    let n = first.omega.len();
    let mut out = SpectrumEstimate {
        kind: first.kind,
        omega: first.omega.clone(),
        value: vec![None; n],
        variance: vec![0.0; n],
        bound: vec![0.0; n],
        mfs: vec![false; n],
        plan: vec![String::new(); n],
    };
    for i in 0..n {
        let members: Vec<&SpectrumEstimate> = estimates
            .iter()
            .filter(|e| e.mfs[i] && e.value[i].is_some())
            .collect();
        if members.is_empty() {
            continue;
        }
        let scale: Vec<f64> = members
            .iter()
            .map(|e| e.variance[i] + e.bound[i] * e.bound[i])
            .collect();
        let w: Vec<f64> = if scale.iter().all(|&s| s > 0.0) {
            scale.iter().map(|s| 1.0 / s).collect()
        } else {
            vec![1.0; members.len()]
        };
        let sw: f64 = w.iter().sum();
        let mut v = 0.0;
        let mut var = 0.0;
        let mut b = 0.0;
        for (e, &wi) in members.iter().zip(&w) {
            v += wi * e.value[i].unwrap();
            var += wi * wi * e.variance[i];
            b += wi * e.bound[i];
        }
        out.value[i] = Some(v / sw);
        out.variance[i] = var / (sw * sw);
        out.bound[i] = b / sw;
        out.mfs[i] = true;
        out.plan[i] = members
            .iter()
            .map(|e| e.plan[i].as_str())
            .collect::<Vec<_>>()
            .join("+");
    }
    let covered: Vec<usize> = (0..n).filter(|&i| out.mfs[i]).collect();
    let (lo, hi) = match (target, covered.first(), covered.last()) {
        (Some(t), _, _) => t,
        (None, Some(&a), Some(&b)) => (out.omega[a], out.omega[b]),
        _ => {
            return Ok(Stitched {
                estimate: out,
                gaps: Vec::new(),
            })
        }
    };
    let mut gaps = Vec::new();
    let mut open: Option<f64> = None;
    let mut last_in = lo;
    for i in 0..n {
        let w = out.omega[i];
        if w < lo || w > hi {
            continue;
        }
        if !out.mfs[i] {
            if open.is_none() {
                open = Some(last_in);
            }
        } else if let Some(a) = open.take() {
            gaps.push((a, w));
        }
        if out.mfs[i] {
            last_in = w;
        }
    }
    if let Some(a) = open {
        gaps.push((a, hi));
    }
    Ok(Stitched {
        estimate: out,
        gaps,
    })
}

// ---------------------------------------------------------------------------
// Error bounds

/// Per-point decomposition of the estimation error bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBounds {
    /// Truncation of the trace at `K`.
    pub finite_k: Vec<f64>,
    /// Images of the filtered spectrum shifted by multiples of `2π/Ts`.
    pub aliasing: Vec<f64>,
    /// Trace inaccuracy, one standard deviation per trace point.
    pub trace: Vec<f64>,
}

impl ErrorBounds {
    pub fn total(&self) -> Vec<f64> {
        (0..self.trace.len())
            .map(|i| self.finite_k[i] + self.aliasing[i] + self.trace[i])
            .collect()
    }
}

struct BranchGeom {
    re: bool,
    ext: Extension,
    floor: f64,
}

fn geometry(traces: &TimeTraceSet, fp: &FilterPair, omega: &[f64], wb: f64) -> Vec<BranchGeom> {
    let mut v = vec![(true, traces.re.extension)];
    if let Some(im) = &traces.im {
        v.push((false, im.extension));
    }
    v.into_iter()
        .map(|(re, ext)| BranchGeom {
            re,
            ext,
            floor: MASK_FLOOR * divisor_max(|w| branch_divisor(re, fp.z(w)), omega, wb),
        })
        .collect()
}

/// Signed aliasing images `Σ_{j≠0} d(ω − jω₂) S(ω − jω₂)` of one branch.
fn images(
    fp: &FilterPair,
    re: bool,
    model: &dyn Fn(f64) -> f64,
    w: f64,
    ts: f64,
    w_limit: f64,
    absolute: bool,
) -> f64 {
    let w2 = 2.0 * PI / ts;
    let jmax = ((w_limit + w.abs()) / w2).ceil() as i64;
    let mut acc = 0.0;
    for j in -jmax..=jmax {
        if j == 0 {
            continue;
        }
        let nu = w - j as f64 * w2;
        if nu.abs() > w_limit {
            continue;
        }
        let t = branch_divisor(re, fp.z(nu)) * model(nu);
        acc += if absolute { t.abs() } else { t };
    }
    acc
}

/// Bound decomposition for an estimate of `plan`: the finite-`K` term from
/// the whole trace tail beyond `K` predicted by `model`, the aliasing term
/// from `model`'s images up to `w_limit`, and `Ts Σ (2 − δ_k0) σ_k` for the
/// trace noise, each divided as in the inversion. Also stores the total in
/// `estimate.bound`.
pub fn error_bounds(
    plan: &SamplingPlan,
    traces: &TimeTraceSet,
    estimate: &mut SpectrumEstimate,
    c: &Constraints,
    model: &(dyn Fn(f64) -> f64 + Sync),
    w_limit: f64,
) -> Result<ErrorBounds> {
    let fp = plan.filters(c)?;
    let ts = traces.ts;
    let geo = geometry(traces, &fp, &estimate.omega, plan.mfs.1.max(plan.omega_c));
    let kk = traces.len().saturating_sub(1).max(1);
    let panel = (0.25 * PI / (kk as f64 * ts)).min(w_limit / 16384.0);
    let mesh = Mesh::from_edges(&uniform_edges(0.0, w_limit, panel), &GaussLegendre::new(8));
    let filtered: Vec<Vec<f64>> = geo
        .iter()
        .map(|g| {
            mesh.nodes
                .iter()
                .map(|&w| branch_divisor(g.re, fp.z(w)) * model(w))
                .collect()
        })
        .collect();
    // Model traces on the sampled grid; the tail beyond K follows from
    // Σ_j G(ω − jω₂) = Ts Σ_{all k} g_k e^{−iωkTs}.
    let model_traces: Vec<Trace> = geo
        .iter()
        .zip(&filtered)
        .map(|(g, f)| {
            let values: Vec<f64> = (0..=kk)
                .into_par_iter()
                .map(|k| {
                    let t = k as f64 * ts;
                    let mut acc = 0.0;
                    for (i, &w) in mesh.nodes.iter().enumerate() {
                        acc += mesh.weights[i] * basis(g.ext, w * t) * f[i];
                    }
                    acc / PI
                })
                .collect();
            Trace {
                extension: g.ext,
                points: exact_points(ts, &values),
            }
        })
        .collect();
    let sigma_sums: Vec<f64> = geo
        .iter()
        .map(|g| {
            let tr = if g.re {
                &traces.re
            } else {
                traces.im.as_ref().unwrap()
            };
            tr.points
                .iter()
                .enumerate()
                .filter(|(k, _)| !(g.ext == Extension::Odd && *k == 0))
                .map(|(k, p)| if k == 0 { ts } else { 2.0 * ts } * p.variance.sqrt())
                .sum()
        })
        .collect();
    let rows: Vec<(f64, f64, f64)> = estimate
        .omega
        .par_iter()
        .map(|&w| {
            let z = fp.z(w);
            let mut den = 0.0;
            let (mut fk, mut al, mut tr) = (0.0, 0.0, 0.0);
            for (b, g) in geo.iter().enumerate() {
                let d = branch_divisor(g.re, z);
                if d.abs() < g.floor || g.floor == 0.0 {
                    continue;
                }
                den += d * d;
                let g_w = d * model(w);
                let signed = images(&fp, g.re, model, w, ts, w_limit, false);
                let tail = g_w + signed - trace_dtft(&model_traces[b], ts, w).0;
                fk += d.abs() * tail.abs();
                al += d.abs() * images(&fp, g.re, model, w, ts, w_limit, true);
                tr += d.abs() * sigma_sums[b];
            }
            if den > 0.0 {
                (fk / den, al / den, tr / den)
            } else {
                (0.0, 0.0, 0.0)
            }
        })
        .collect();
    let eb = ErrorBounds {
        finite_k: rows.iter().map(|r| r.0).collect(),
        aliasing: rows.iter().map(|r| r.1).collect(),
        trace: rows.iter().map(|r| r.2).collect(),
    };
    estimate.bound = eb.total();
    Ok(eb)
}

/// Subtracts the aliasing images predicted by `model` (opt-in).
pub fn mitigate_aliasing(
    plan: &SamplingPlan,
    traces: &TimeTraceSet,
    estimate: &SpectrumEstimate,
    c: &Constraints,
    model: &(dyn Fn(f64) -> f64 + Sync),
    w_limit: f64,
) -> Result<SpectrumEstimate> {
    let fp = plan.filters(c)?;
    let geo = geometry(traces, &fp, &estimate.omega, plan.mfs.1.max(plan.omega_c));
    let mut out = estimate.clone();
    out.value = estimate
        .omega
        .par_iter()
        .zip(&estimate.value)
        .map(|(&w, v)| {
            let v = (*v)?;
            let z = fp.z(w);
            let (mut num, mut den) = (0.0, 0.0);
            for g in &geo {
                let d = branch_divisor(g.re, z);
                if d.abs() < g.floor || g.floor == 0.0 {
                    continue;
                }
                num += d * images(&fp, g.re, model, w, traces.ts, w_limit, false);
                den += d * d;
            }
            Some(if den > 0.0 { v - num / den } else { v })
        })
        .collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scoring

/// Indices of grid points in the central `central` fraction of `band`,
/// below `cutoff`, outside every `exclude` band and with a reported value.
pub fn scored_points(
    est: &SpectrumEstimate,
    band: (f64, f64),
    central: f64,
    cutoff: f64,
    exclude: &[(f64, f64)],
) -> Vec<usize> {
    let (a, b) = band;
    let pad = 0.5 * (1.0 - central) * (b - a);
    let (lo, hi) = (a + pad, b - pad);
    (0..est.omega.len())
        .filter(|&i| {
            let w = est.omega[i];
            w >= lo
                && w <= hi
                && w < cutoff
                && est.value[i].is_some()
                && !exclude.iter().any(|&(x, y)| w >= x && w <= y)
        })
        .collect()
}

/// Median of `|Ŝ − S|/|S|` over `points`.
pub fn median_relative_error(
    est: &SpectrumEstimate,
    truth: &dyn Fn(f64) -> f64,
    points: &[usize],
) -> Option<f64> {
    let mut r: Vec<f64> = points
        .iter()
        .map(|&i| {
            let s = truth(est.omega[i]);
            (est.value[i].unwrap() - s).abs() / s.abs()
        })
        .collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = r.len();
    Some(if n % 2 == 1 {
        r[n / 2]
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2])
    })
}

/// One region end to end: traces, inversion and self-consistent bounds.
#[derive(Clone, Debug)]
pub struct RegionRun {
    pub plan: SamplingPlan,
    pub traces: TimeTraceSet,
    pub estimate: SpectrumEstimate,
    pub bounds: ErrorBounds,
}

/// Collects, inverts and bounds one plan. The bound model is the estimate
/// itself unless `model` is given.
pub fn run_region<B: IntegralBackend + ?Sized>(
    plan: &SamplingPlan,
    p: &Pipeline<B>,
    kind: Kind,
    omega: &[f64],
    model: Option<&(dyn Fn(f64) -> f64 + Sync)>,
    w_limit: f64,
) -> Result<RegionRun> {
    let traces = collect_traces(plan, p, kind)?;
    let mut estimate = dtft_reconstruct(&traces, plan, &p.constraints, omega)?;
    let own = estimate.clone();
    let self_model = |w: f64| own.interpolate(w);
    let m: &(dyn Fn(f64) -> f64 + Sync) = match model {
        Some(m) => m,
        None => &self_model,
    };
    let bounds = error_bounds(plan, &traces, &mut estimate, &p.constraints, m, w_limit)?;
    Ok(RegionRun {
        plan: plan.clone(),
        traces,
        estimate,
        bounds,
    })
}
