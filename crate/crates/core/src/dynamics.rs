//! Exact reduced dynamics of the probe.
//!
//! Interval blocks `P_jk = ∫_{I_j}∫_{I_k} y y C⁺` and
//! `m_jk = Im ∫_{I_j}∫_{I_k} y y C⁻` (j later than k) determine every
//! `v_{(a,a′)} = exp(−Σ a_j a_k P_jk − 2i Σ_{j>k} a_j a′_k m_jk)`, and the
//! expectation is a finite sum over the non-π rotation branches.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::control::{interval_signs, FilterFunction, PulseSchedule, SwitchingFunction};
use crate::error::{Error, Result};
use crate::quad::{graded_edges, GaussLegendre, Mesh};
use crate::spectra::{rectangle_lag_integral, CorrelationTable, SpectrumPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Plus,
    Minus,
}

/// Pauli axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn pauli(self) -> Matrix2<Complex64> {
        let (o, i) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 1.0));
        let one = Complex64::new(1.0, 0.0);
        match self {
            Axis::X => Matrix2::new(o, one, one, o),
            Axis::Y => Matrix2::new(o, -i, i, o),
            Axis::Z => Matrix2::new(one, o, o, -one),
        }
    }

    /// `f_ô^α = Tr(σ_ô σ_α σ_ô σ_α)/2`.
    pub fn f(self, alpha: Axis) -> i8 {
        if self == alpha {
            1
        } else {
            -1
        }
    }
}

/// `ρ_S = (I + sign·σ_axis)/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InitialState {
    pub axis: Axis,
    pub sign: i8,
}

impl InitialState {
    pub fn plus(axis: Axis) -> Self {
        InitialState { axis, sign: 1 }
    }

    pub fn minus(axis: Axis) -> Self {
        InitialState { axis, sign: -1 }
    }

    pub fn matrix(&self) -> Matrix2<Complex64> {
        (Matrix2::identity() + self.axis.pauli() * Complex64::new(self.sign as f64, 0.0))
            * Complex64::new(0.5, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub state: InitialState,
    pub observable: Axis,
    pub schedule: PulseSchedule,
}

/// Source of correlation values for the time-domain route.
pub trait Correlation: Sync {
    fn c_plus(&self, tau: f64) -> f64;
    fn c_minus_im(&self, tau: f64) -> f64;
    /// Length scale over which the functions vary; sets the panel width.
    fn resolution(&self) -> f64;
}

impl Correlation for CorrelationTable {
    fn c_plus(&self, tau: f64) -> f64 {
        CorrelationTable::c_plus(self, tau)
    }
    fn c_minus_im(&self, tau: f64) -> f64 {
        CorrelationTable::c_minus_im(self, tau)
    }
    fn resolution(&self) -> f64 {
        4.0 * self.step()
    }
}

/// Closed-form correlation functions, for tests and toy baths.
pub struct AnalyticCorrelation<P, M> {
    pub plus: P,
    pub minus_im: M,
    pub resolution: f64,
}

impl<P: Fn(f64) -> f64 + Sync, M: Fn(f64) -> f64 + Sync> Correlation for AnalyticCorrelation<P, M> {
    fn c_plus(&self, tau: f64) -> f64 {
        (self.plus)(tau)
    }
    fn c_minus_im(&self, tau: f64) -> f64 {
        (self.minus_im)(tau)
    }
    fn resolution(&self) -> f64 {
        self.resolution
    }
}

/// Double integrals of two sign patterns against the correlations.
pub trait IntegralBackend: Sync {
    /// `∫_A dt ∫_B dt′ a(t) b(t′) C⁺(t − t′)`.
    fn plus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64>;
    /// `Im ∫_A dt ∫_B dt′ a(t) b(t′) C⁻(t − t′)` without time ordering.
    fn minus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64>;
}

/// Time-domain route: every pair of constant segments reduces exactly to a
/// single lag integral against the overlap weight.
pub struct TimeBackend<'a, C: Correlation> {
    pub corr: &'a C,
}

impl<'a, C: Correlation> TimeBackend<'a, C> {
    pub fn new(corr: &'a C) -> Self {
        TimeBackend { corr }
    }

    fn pairwise<G: Fn(f64) -> f64 + Copy>(
        &self,
        a: &FilterFunction,
        b: &FilterFunction,
        ordered: bool,
        g: G,
    ) -> f64 {
        let h = self.corr.resolution();
        let mut acc = 0.0;
        for i in 0..a.signs.len() {
            let sa = a.signs[i];
            if sa == 0 {
                continue;
            }
            for j in 0..b.signs.len() {
                let sb = b.signs[j];
                if sb == 0 {
                    continue;
                }
                acc += (sa * sb) as f64
                    * rectangle_lag_integral(
                        a.breakpoints[i],
                        a.breakpoints[i + 1],
                        b.breakpoints[j],
                        b.breakpoints[j + 1],
                        ordered,
                        h,
                        g,
                    );
            }
        }
        acc
    }

    /// `Im ∫∫_{t ≥ t′} a(t) b(t′) C⁻(t − t′)`.
    pub fn minus_ordered(&self, a: &FilterFunction, b: &FilterFunction) -> f64 {
        self.pairwise(a, b, true, |t| self.corr.c_minus_im(t))
    }

    /// `∫∫_{t ≥ t′} a(t) b(t′) C⁺(t − t′)`.
    pub fn plus_ordered(&self, a: &FilterFunction, b: &FilterFunction) -> f64 {
        self.pairwise(a, b, true, |t| self.corr.c_plus(t))
    }
}

impl<C: Correlation> IntegralBackend for TimeBackend<'_, C> {
    fn plus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64> {
        Ok(self.pairwise(a, b, false, |t| self.corr.c_plus(t)))
    }
    fn minus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64> {
        Ok(self.pairwise(a, b, false, |t| self.corr.c_minus_im(t)))
    }
}

/// Frequency-domain route:
/// `(1/π) ∫_0^{ω_co} S±(ω) Re/Im[G_a(ω) conj G_b(ω)] dω` with `G` the
/// absolute-time filter of each pattern.
pub struct FrequencyBackend<'a> {
    pub pair: &'a SpectrumPair,
    /// Divides every mesh panel width.
    pub refine: f64,
}

impl<'a> FrequencyBackend<'a> {
    pub fn new(pair: &'a SpectrumPair) -> Self {
        FrequencyBackend { pair, refine: 1.0 }
    }

    fn mesh(&self, a: &FilterFunction, b: &FilterFunction) -> Mesh {
        let a0 = a.breakpoints[0];
        let a1 = *a.breakpoints.last().unwrap();
        let b0 = b.breakpoints[0];
        let b1 = *b.breakpoints.last().unwrap();
        let lag = (a1 - b0).abs().max((b1 - a0).abs());
        self.pair.frequency_mesh(lag, self.refine)
    }

    fn cross(&self, a: &FilterFunction, b: &FilterFunction, kind: Kind) -> f64 {
        let mesh = self.mesh(a, b);
        let mut acc = 0.0;
        for (&w, &wt) in mesh.nodes.iter().zip(&mesh.weights) {
            let z = a.eval(w) * b.eval(w).conj();
            acc += wt
                * match kind {
                    Kind::Plus => self.pair.c.eval(w) * z.re,
                    Kind::Minus => self.pair.q.eval(w) * z.im,
                };
        }
        acc / PI
    }
}

impl IntegralBackend for FrequencyBackend<'_> {
    fn plus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64> {
        Ok(self.cross(a, b, Kind::Plus))
    }
    fn minus(&self, a: &FilterFunction, b: &FilterFunction) -> Result<f64> {
        Ok(self.cross(a, b, Kind::Minus))
    }
}

/// A dynamical integral with its kind. Plus values are real; minus values
/// are purely imaginary and stored as their imaginary part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegralValue {
    pub kind: Kind,
    pub value: f64,
}

impl IntegralValue {
    pub fn complex(&self) -> Complex64 {
        match self.kind {
            Kind::Plus => Complex64::new(self.value, 0.0),
            Kind::Minus => Complex64::new(0.0, self.value),
        }
    }
}

/// `I⁺ = ∬_{[0,T]²} Y⁻Y⁻C⁺` or `Im I⁻ = Im ∬_{t≥t′} Y⁻(t)Y⁺(t′)C⁻` for
/// explicit effective switchings.
pub fn integral_time_domain<C: Correlation>(
    y_minus: &FilterFunction,
    other: &FilterFunction,
    corr: &C,
    kind: Kind,
) -> IntegralValue {
    let b = TimeBackend::new(corr);
    let value = match kind {
        Kind::Plus => b.pairwise(y_minus, other, false, |t| corr.c_plus(t)),
        Kind::Minus => b.minus_ordered(y_minus, other),
    };
    IntegralValue { kind, value }
}

/// `𝓘±(t1, t2, t2 + t1) = ∫_{t2}^{t2+t1} dt ∫_0^{t1} dt′ y(t − t2) y′(t′) C±(t − t′)`
/// for window patterns `y`, `y_prime` given on `[0, t1]`.
pub fn window_integral<B: IntegralBackend + ?Sized>(
    backend: &B,
    y: &SwitchingFunction,
    y_prime: &SwitchingFunction,
    t2: f64,
    kind: Kind,
) -> Result<IntegralValue> {
    let late = y.shifted(t2).filter();
    let early = y_prime.filter();
    let value = match kind {
        Kind::Plus => backend.plus(&late, &early)?,
        Kind::Minus => backend.minus(&late, &early)?,
    };
    Ok(IntegralValue { kind, value })
}

/// Frequency-domain evaluation of [`window_integral`], requiring `t2 ≥ t1`.
pub fn integral_freq_domain(
    y: &SwitchingFunction,
    y_prime: &SwitchingFunction,
    t2: f64,
    pair: &SpectrumPair,
    kind: Kind,
) -> Result<IntegralValue> {
    let t1 = y.end() - y.start();
    if t2 < t1 * (1.0 - 1e-12) {
        return Err(Error::Invalid(
            "frequency route needs separated windows (t2 >= t1)".into(),
        ));
    }
    window_integral(&FrequencyBackend::new(pair), y, y_prime, t2, kind)
}

/// Per-interval blocks of a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalIntegrals {
    /// `P[j][k]`, symmetric.
    pub p: Vec<Vec<f64>>,
    /// `m[j][k]` for `j > k`; zero elsewhere.
    pub m: Vec<Vec<f64>>,
}

impl IntervalIntegrals {
    pub fn compute<B: IntegralBackend + ?Sized>(s: &PulseSchedule, backend: &B) -> Result<Self> {
        let n = s.n_intervals();
        let y = s.base_switching();
        let pieces: Vec<Option<FilterFunction>> = (1..=n)
            .map(|k| {
                let (a, b) = s.interval(k);
                (b > a).then(|| y.restrict(a, b).filter())
            })
            .collect();
        let mut p = vec![vec![0.0; n]; n];
        let mut m = vec![vec![0.0; n]; n];
        for j in 0..n {
            for k in 0..=j {
                if let (Some(a), Some(b)) = (&pieces[j], &pieces[k]) {
                    let v = backend.plus(a, b)?;
                    p[j][k] = v;
                    p[k][j] = v;
                    if j > k {
                        m[j][k] = backend.minus(a, b)?;
                    }
                }
            }
        }
        Ok(IntervalIntegrals { p, m })
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    /// `I⁺_{(a)} = Σ_jk a_j a_k P_jk`; labels may be any real weights.
    pub fn i_plus(&self, a: &[f64]) -> f64 {
        let n = self.n();
        let mut s = 0.0;
        for j in 0..n {
            for k in 0..n {
                s += a[j] * a[k] * self.p[j][k];
            }
        }
        s
    }

    /// `Im I⁻_{(a,a′)} = Σ_{j>k} a_j a′_k m_jk`.
    pub fn i_minus(&self, a: &[f64], ap: &[f64]) -> f64 {
        let n = self.n();
        let mut s = 0.0;
        for j in 0..n {
            for k in 0..j {
                s += a[j] * ap[k] * self.m[j][k];
            }
        }
        s
    }

    pub fn a_plus(&self, a: &[f64]) -> f64 {
        (-self.i_plus(a)).exp()
    }

    pub fn a_minus(&self, a: &[f64], ap: &[f64]) -> Complex64 {
        Complex64::from_polar(1.0, -2.0 * self.i_minus(a, ap))
    }

    pub fn v(&self, a: &[f64], ap: &[f64]) -> VValue {
        VValue {
            a_plus: self.a_plus(a),
            a_minus: self.a_minus(a, ap),
        }
    }
}

/// `v = A⁺ A⁻`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VValue {
    pub a_plus: f64,
    pub a_minus: Complex64,
}

impl VValue {
    pub fn value(&self) -> Complex64 {
        self.a_minus * self.a_plus
    }
}

fn rotation_coeff(theta: f64, r: u8) -> f64 {
    if r == 0 {
        (0.5 * theta).cos()
    } else {
        -(0.5 * theta).sin()
    }
}

/// Tolerance on the imaginary residue of an assembled expectation.
pub const IMAG_TOL: f64 = 1e-10;

/// A `(a, a′)` label with the complex weight of its `v` in an expectation.
pub type LabelTerm = ((Vec<i8>, Vec<i8>), Complex64);

/// Expands `E[Ô]` on `n` intervals into `Σ w·v_{(a,a′)}`, one entry per
/// distinct label. `angles` are `θ_0..θ_N`; `n_pi` is the total π count
/// (each contributes `f_ô^y`).
pub fn expectation_terms(
    n: usize,
    angles: &[f64],
    n_pi: usize,
    state: InitialState,
    obs: Axis,
) -> Result<Vec<LabelTerm>> {
    if angles.len() != n + 1 {
        return Err(Error::Invalid("need N+1 angles".into()));
    }
    let fy = obs.f(Axis::Y) as f64;
    let fz = obs.f(Axis::Z);
    let rho = state.matrix();
    let o = obs.pauli();
    let tr0 = (rho * o).trace();
    let tr1 = (Axis::Y.pauli() * rho * o).trace();
    let configs: Vec<Vec<u8>> = (0..1u32 << (n + 1))
        .map(|bits| (0..=n).map(|j| ((bits >> j) & 1) as u8).collect())
        .collect();
    let coeffs: Vec<f64> = configs
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &b)| rotation_coeff(angles[j], b))
                .product()
        })
        .collect();
    let global = fy.powi(n_pi as i32);
    let mut index: HashMap<(Vec<i8>, Vec<i8>), usize> = HashMap::new();
    let mut out: Vec<LabelTerm> = Vec::new();
    for (ir, r) in configs.iter().enumerate() {
        if coeffs[ir] == 0.0 {
            continue;
        }
        let sig = interval_signs(r);
        let r0: i32 = r.iter().map(|&b| b as i32).sum();
        for (irp, rp) in configs.iter().enumerate() {
            let c = coeffs[ir] * coeffs[irp];
            if c == 0.0 {
                continue;
            }
            let sigp = interval_signs(rp);
            let a: Vec<i8> = sig
                .iter()
                .zip(&sigp)
                .map(|(&x, &y)| (x - fz * y) / 2)
                .collect();
            let ap: Vec<i8> = sig
                .iter()
                .zip(&sigp)
                .map(|(&x, &y)| (x + fz * y) / 2)
                .collect();
            let rp0: i32 = rp.iter().map(|&b| b as i32).sum();
            let phase = Complex64::i().powi(r0 - rp0);
            let tr = if (r0 + rp0) % 2 == 0 { tr0 } else { tr1 };
            let w = phase * c * fy.powi(rp0) * tr * global;
            let key = (a, ap);
            match index.get(&key) {
                Some(&i) => out[i].1 += w,
                None => {
                    index.insert(key.clone(), out.len());
                    out.push((key, w));
                }
            }
        }
    }
    Ok(out)
}

/// `E[Ô]` from the interval blocks.
pub fn expectation_from_integrals(
    ii: &IntervalIntegrals,
    angles: &[f64],
    n_pi: usize,
    state: InitialState,
    obs: Axis,
) -> Result<f64> {
    let terms = expectation_terms(ii.n(), angles, n_pi, state, obs)?;
    let mut total = Complex64::new(0.0, 0.0);
    for ((a, ap), w) in &terms {
        let af: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let apf: Vec<f64> = ap.iter().map(|&x| x as f64).collect();
        total += w * ii.v(&af, &apf).value();
    }
    if total.im.abs() > IMAG_TOL {
        return Err(Error::Invalid(format!(
            "expectation has imaginary residue {:e}",
            total.im
        )));
    }
    Ok(total.re)
}

/// `E[Ô]` for a full configuration.
pub fn expectation<B: IntegralBackend + ?Sized>(
    cfg: &ExperimentConfig,
    backend: &B,
) -> Result<f64> {
    let s = &cfg.schedule;
    if s.n_intervals() > 3 {
        return Err(Error::Invalid(
            "at most three intervals are supported".into(),
        ));
    }
    let ii = IntervalIntegrals::compute(s, backend)?;
    expectation_from_integrals(&ii, &s.angles, s.pi_count(), cfg.state, cfg.observable)
}

/// Closed-form measurement equations for the three-interval protocol with
/// rotations only at `t_1` and `t_2` (`θ_0 = θ_3 = 0`). Interval indices
/// below are 1-based; `P13` is the corner plus block and `m31`, `m32` the
/// minus blocks of the last interval against the first and second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    /// `E[Y]_{+y}` at `(k1π, k2π)` = `A⁺_{(1,(−1)^{k1},(−1)^{k1+k2})}`.
    PiOnly { k1: u8, k2: u8 },
    /// `E[Y]_{+y}` of a single window = `A⁺_{(0,0,1)}`.
    LastWindow,
    /// Two intervals, `E[Y]_{+y}` at `k1π` = `A⁺_{(1,0)}A⁺_{(0,1)} e^{∓2P12}`.
    TwoInterval { k1: u8 },
    /// `𝓐 = 4cos(2m32) A⁺_{(1,0,0)} A⁺_{(0,0,1)} sinh(2P13)`.
    ComboA,
    /// `𝓑 = 2cos(2m32) A⁺_{(1,0,0)} A⁺_{(0,0,1)} cosh(2P13)`.
    ComboB,
    /// `sgn(𝓐/𝓑)|𝓐|/√(4𝓑² − 𝓐²) = sinh(2P13)`.
    ComboRatio,
    /// `E[X]_{+z}` at `(k1π, π/2)`.
    PhaseX { k1: u8 },
    /// `E[Y]_{+z}` at `(k1π, π/2)`.
    PhaseY { k1: u8 },
    /// `X0·Y1 + Y0·X1 = −A⁺_{(0,0,1)}² sin(4 m31)`.
    ProductSin,
    /// `X0·X1 − Y0·Y1 = −A⁺_{(0,0,1)}² cos(4 m31)`.
    ProductCos,
}

impl ClosedForm {
    /// Right-hand side from the interval blocks.
    pub fn evaluate(&self, ii: &IntervalIntegrals) -> Result<f64> {
        let want = if matches!(self, ClosedForm::TwoInterval { .. }) {
            2
        } else {
            3
        };
        if *self == ClosedForm::LastWindow {
            return Ok((-ii.p[ii.n() - 1][ii.n() - 1]).exp());
        }
        if ii.n() != want {
            return Err(Error::Invalid(format!("{self:?} needs {want} intervals")));
        }
        let sgn = |k: u8| if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        let a100 = ii.a_plus(&[1.0, 0.0, 0.0][..ii.n()]);
        let a001 = || ii.a_plus(&[0.0, 0.0, 1.0]);
        let (m31, m32, p13) = if ii.n() == 3 {
            (ii.m[2][0], ii.m[2][1], ii.p[0][2])
        } else {
            (0.0, 0.0, 0.0)
        };
        Ok(match *self {
            ClosedForm::PiOnly { k1, k2 } => ii.a_plus(&[1.0, sgn(k1), sgn(k1 + k2)]),
            ClosedForm::LastWindow => unreachable!(),
            ClosedForm::TwoInterval { k1 } => {
                ii.a_plus(&[1.0, 0.0])
                    * ii.a_plus(&[0.0, 1.0])
                    * (-sgn(k1) * 2.0 * ii.p[0][1]).exp()
            }
            ClosedForm::ComboA => 4.0 * (2.0 * m32).cos() * a100 * a001() * (2.0 * p13).sinh(),
            ClosedForm::ComboB => 2.0 * (2.0 * m32).cos() * a100 * a001() * (2.0 * p13).cosh(),
            ClosedForm::ComboRatio => (2.0 * p13).sinh(),
            ClosedForm::PhaseX { k1 } => sgn(k1) * a001() * (2.0 * (sgn(k1) * m32 + m31)).cos(),
            ClosedForm::PhaseY { k1 } => sgn(k1) * a001() * (2.0 * (sgn(k1) * m32 + m31)).sin(),
            ClosedForm::ProductSin => -a001().powi(2) * (4.0 * m31).sin(),
            ClosedForm::ProductCos => -a001().powi(2) * (4.0 * m31).cos(),
        })
    }

    /// Left-hand side assembled from engine expectations on schedules that
    /// share the π structure of `s` (whose angles are ignored).
    pub fn measure(&self, ii: &IntervalIntegrals, n_pi: usize) -> Result<f64> {
        let h = 0.5 * PI;
        let e = |th: &[f64], st: InitialState, o: Axis| -> Result<f64> {
            let mut angles = vec![0.0];
            angles.extend_from_slice(th);
            angles.push(0.0);
            // Closed forms assume an even π count; odd counts flip X readouts.
            let parity = if n_pi % 2 == 1 && o == Axis::X {
                -1.0
            } else {
                1.0
            };
            Ok(parity * expectation_from_integrals(ii, &angles, n_pi, st, o)?)
        };
        let k = |k: u8| k as f64 * PI;
        let (py, px, mx, pz) = (
            InitialState::plus(Axis::Y),
            InitialState::plus(Axis::X),
            InitialState::minus(Axis::X),
            InitialState::plus(Axis::Z),
        );
        let combo = || -> Result<(f64, f64)> {
            let a = e(&[h, h], py, Axis::Y)? - e(&[h, -h], py, Axis::Y)?
                + e(&[-h, -h], py, Axis::Y)?
                - e(&[-h, h], py, Axis::Y)?;
            let b = e(&[h, h], mx, Axis::X)? + e(&[-h, h], px, Axis::X)?;
            Ok((a, b))
        };
        let xy = || -> Result<[f64; 4]> {
            Ok([
                e(&[0.0, h], pz, Axis::X)?,
                e(&[PI, h], pz, Axis::X)?,
                e(&[0.0, h], pz, Axis::Y)?,
                e(&[PI, h], pz, Axis::Y)?,
            ])
        };
        match *self {
            ClosedForm::PiOnly { k1, k2 } => e(&[k(k1), k(k2)], py, Axis::Y),
            ClosedForm::LastWindow => {
                let n = ii.n();
                let last = IntervalIntegrals {
                    p: vec![vec![ii.p[n - 1][n - 1]]],
                    m: vec![vec![0.0]],
                };
                expectation_from_integrals(&last, &[0.0, 0.0], 0, py, Axis::Y)
            }
            ClosedForm::TwoInterval { k1 } => e(&[k(k1)], py, Axis::Y),
            ClosedForm::ComboA => Ok(combo()?.0),
            ClosedForm::ComboB => Ok(combo()?.1),
            ClosedForm::ComboRatio => {
                let (a, b) = combo()?;
                Ok((a / b).signum() * a.abs() / (4.0 * b * b - a * a).sqrt())
            }
            ClosedForm::PhaseX { k1 } => e(&[k(k1), h], pz, Axis::X),
            ClosedForm::PhaseY { k1 } => e(&[k(k1), h], pz, Axis::Y),
            ClosedForm::ProductSin => {
                let [x0, x1, y0, y1] = xy()?;
                Ok(x0 * y1 + y0 * x1)
            }
            ClosedForm::ProductCos => {
                let [x0, x1, y0, y1] = xy()?;
                Ok(x0 * x1 - y0 * y1)
            }
        }
    }
}

/// Evaluates a closed form on the blocks of `s`.
pub fn closed_form_expectation<B: IntegralBackend + ?Sized>(
    id: ClosedForm,
    s: &PulseSchedule,
    backend: &B,
) -> Result<f64> {
    id.evaluate(&IntervalIntegrals::compute(s, backend)?)
}

/// Number of measurement shots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shots {
    Finite(u64),
    Infinite,
}

/// Empirical mean of `shots` ±1 outcomes with `P(+1) = (1 + e)/2`.
pub fn sample_shots(e: f64, shots: Shots, seed: u64) -> Result<f64> {
    if !(e.abs() <= 1.0 + 1e-12) {
        return Err(Error::Invalid(format!("expectation {e} outside [-1, 1]")));
    }
    let e = e.clamp(-1.0, 1.0);
    match shots {
        Shots::Infinite => Ok(e),
        Shots::Finite(0) => Err(Error::Invalid("zero shots".into())),
        Shots::Finite(m) => {
            let p = 0.5 * (1.0 + e);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = Binomial::new(m, p)
                .map_err(|err| Error::Invalid(err.to_string()))?
                .sample(&mut rng);
            Ok((2.0 * k as f64 - m as f64) / m as f64)
        }
    }
}

/// Reference time-domain integral by brute-force tensor Gauss–Legendre over
/// segment cells, used to cross-check the lag reduction.
pub fn integral_2d_reference<C: Correlation>(
    a: &FilterFunction,
    b: &FilterFunction,
    corr: &C,
    kind: Kind,
    ordered: bool,
    panels: usize,
) -> f64 {
    let gl = GaussLegendre::new(8);
    let g = |t: f64| match kind {
        Kind::Plus => corr.c_plus(t),
        Kind::Minus => corr.c_minus_im(t),
    };
    let mesh_of = |f: &FilterFunction, i: usize, extra: &[f64]| {
        let (lo, hi) = (f.breakpoints[i], f.breakpoints[i + 1]);
        let w = (hi - lo) / panels as f64;
        Mesh::from_edges(&graded_edges(lo, hi, extra, |_| w), &gl)
    };
    let mut acc = 0.0;
    for i in 0..a.signs.len() {
        for j in 0..b.signs.len() {
            let s = (a.signs[i] * b.signs[j]) as f64;
            if s == 0.0 {
                continue;
            }
            let ma = mesh_of(a, i, &b.breakpoints);
            for (&t, &wt) in ma.nodes.iter().zip(&ma.weights) {
                let mb = mesh_of(b, j, &[t]);
                acc += s * wt * mb.integrate(|tp| if ordered && tp > t { 0.0 } else { g(t - tp) });
            }
        }
    }
    acc
}
