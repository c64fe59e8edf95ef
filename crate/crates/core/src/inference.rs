//! From expectation values to dynamical integrals.
//!
//! Two routes are provided. The Q route solves the linear system over the
//! full rotation/state/observable grid for the `Q` quantities and combines
//! them nonlinearly. The direct route measures a handful of closed-form
//! settings per three-interval schedule. Region arithmetic (deadtime and
//! strip schemes) and branch tracking for minus integrals sit on top.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::{Constraints, FilterFunction, PulseSchedule, SwitchingFunction};
use crate::dynamics::{
    expectation_from_integrals, expectation_terms, sample_shots, Axis, InitialState,
    IntegralBackend, IntervalIntegrals, Kind, Shots,
};
use crate::error::{Error, Result};
use crate::quad::{uniform_edges, GaussLegendre, Mesh};

/// Floor applied to every estimated amplitude or cosine used as a divisor.
pub const DIVISOR_FLOOR: f64 = 1e-6;

/// Relative residual below which a functional counts as identifiable.
const IDENT_TOL: f64 = 1e-8;

/// SplitMix64 finalizer used to derive independent per-measurement seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Q quantities

/// Canonical label of a `v` factor on three intervals: `a` with its first
/// nonzero entry positive, and `c = (a2·a′1, a3·a′1, a3·a′2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VKey {
    pub a: [i8; 3],
    pub c: [i8; 3],
}

impl VKey {
    pub fn new(a: [i8; 3], c: [i8; 3]) -> Self {
        let neg = a.iter().find(|&&x| x != 0).is_some_and(|&x| x < 0);
        let a = if neg { [-a[0], -a[1], -a[2]] } else { a };
        VKey { a, c }
    }

    pub fn from_labels(a: &[i8], ap: &[i8]) -> Self {
        VKey::new(
            [a[0], a[1], a[2]],
            [a[1] * ap[0], a[2] * ap[0], a[2] * ap[1]],
        )
    }

    /// Representative of `{(a, c), (a, −c)}`, whose `v` are conjugate, with
    /// the sign relating this key's `Im v` to the representative's.
    pub fn conjugate_rep(&self) -> (VKey, f64) {
        let neg = [-self.c[0], -self.c[1], -self.c[2]];
        if self.c >= neg {
            (*self, 1.0)
        } else {
            (VKey { a: self.a, c: neg }, -1.0)
        }
    }

    /// `A⁺_{(a)} exp(−2i Σ c_jk m_jk)`.
    pub fn value(&self, ii: &IntervalIntegrals) -> Complex64 {
        let a: Vec<f64> = self.a.iter().map(|&x| x as f64).collect();
        let phase = self.c[0] as f64 * ii.m[1][0]
            + self.c[1] as f64 * ii.m[2][0]
            + self.c[2] as f64 * ii.m[2][1];
        Complex64::from_polar(ii.a_plus(&a), -2.0 * phase)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pm {
    Plus,
    Minus,
}

impl Pm {
    fn sign(self) -> f64 {
        match self {
            Pm::Plus => 1.0,
            Pm::Minus => -1.0,
        }
    }
}

/// Identifier of an accessible `Q` quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QId {
    Q1(Pm),
    Q2(Pm),
    Q3(Pm),
    Q4,
    Q5(Pm),
    Q6(Pm),
    /// A pure decay amplitude `A⁺_{(a)}` (no phase).
    Pi([i8; 3]),
}

/// Decay labels used by the plus inversion.
pub const PI_LABELS: [[i8; 3]; 5] = [[1, 0, 0], [1, 1, 0], [1, -1, 0], [1, 1, 1], [1, 1, -1]];

impl QId {
    /// Every quantity the inversions consume.
    pub fn all() -> Vec<QId> {
        let mut v = Vec::new();
        for pm in [Pm::Plus, Pm::Minus] {
            v.extend([
                QId::Q1(pm),
                QId::Q2(pm),
                QId::Q3(pm),
                QId::Q5(pm),
                QId::Q6(pm),
            ]);
        }
        v.push(QId::Q4);
        v.extend(PI_LABELS.iter().map(|&a| QId::Pi(a)));
        v
    }

    /// `Q = Σ coef·v_key`.
    pub fn terms(&self) -> Vec<(VKey, f64)> {
        let k = VKey::new;
        match *self {
            QId::Q1(pm) => vec![
                (k([1, 0, -1], [0, 0, -1]), 1.0),
                (k([1, 0, -1], [0, 0, 1]), 1.0),
                (k([1, 0, 1], [0, 0, 1]), pm.sign()),
                (k([1, 0, 1], [0, 0, -1]), pm.sign()),
            ],
            QId::Q2(pm) => vec![
                (k([0, 1, -1], [1, -1, 0]), 1.0),
                (k([0, 1, -1], [-1, 1, 0]), pm.sign()),
            ],
            QId::Q3(pm) => vec![
                (k([0, 1, 1], [1, 1, 0]), 1.0),
                (k([0, 1, 1], [-1, -1, 0]), pm.sign()),
            ],
            QId::Q4 => vec![
                (k([0, 1, 0], [1, 0, 0]), 1.0),
                (k([0, 1, 0], [-1, 0, 0]), 1.0),
            ],
            QId::Q5(pm) => vec![
                (k([0, 0, 1], [0, 1, 1]), 1.0),
                (k([0, 0, 1], [0, -1, -1]), pm.sign()),
            ],
            QId::Q6(pm) => vec![
                (k([0, 0, 1], [0, -1, 1]), 1.0),
                (k([0, 0, 1], [0, 1, -1]), pm.sign()),
            ],
            QId::Pi(a) => vec![(k(a, [0, 0, 0]), 1.0)],
        }
    }

    /// Forward value from known blocks.
    pub fn value(&self, ii: &IntervalIntegrals) -> Complex64 {
        self.terms().iter().map(|(key, c)| key.value(ii) * *c).sum()
    }
}

/// An extracted `Q` with the records it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct QQuantity {
    pub id: QId,
    pub value: Complex64,
    /// Variance of `Re` plus variance of `Im`.
    pub variance: f64,
    /// Indices of the records that enter the estimator.
    pub constituents: Vec<usize>,
}

/// One point of the cycling grid: `θ_0..θ_3` in units of π/2, the initial
/// state and the observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProtocolConfig {
    pub theta: [u8; 4],
    pub state: InitialState,
    pub obs: Axis,
}

impl ProtocolConfig {
    pub fn angles(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| t as f64 * 0.5 * PI).collect()
    }
}

impl std::fmt::Display for ProtocolConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sgn = if self.state.sign > 0 { '+' } else { '-' };
        write!(
            f,
            "theta=({},{},{},{})pi/2 rho={}{:?} obs={:?}",
            self.theta[0],
            self.theta[1],
            self.theta[2],
            self.theta[3],
            sgn,
            self.state.axis,
            self.obs
        )
    }
}

/// The full grid `θ_j ∈ {0, π/2, π}`, six Pauli eigenstates, observables X and Y.
pub fn protocol_grid() -> Vec<ProtocolConfig> {
    let mut out = Vec::with_capacity(972);
    for code in 0..81u32 {
        let theta = [
            (code % 3) as u8,
            (code / 3 % 3) as u8,
            (code / 9 % 3) as u8,
            (code / 27 % 3) as u8,
        ];
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            for sign in [1, -1] {
                for obs in [Axis::X, Axis::Y] {
                    out.push(ProtocolConfig {
                        theta,
                        state: InitialState { axis, sign },
                        obs,
                    });
                }
            }
        }
    }
    out
}

/// A measured expectation value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectationRecord {
    pub config: ProtocolConfig,
    pub value: f64,
    pub variance: f64,
}

/// Noiseless or shot-sampled records for `configs` on a schedule with blocks
/// `ii` and `n_pi` π pulses.
pub fn simulate_records(
    ii: &IntervalIntegrals,
    n_pi: usize,
    configs: &[ProtocolConfig],
    shots: Shots,
    seed: u64,
) -> Result<Vec<ExpectationRecord>> {
    configs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let e = expectation_from_integrals(ii, &cfg.angles(), n_pi, cfg.state, cfg.obs)?;
            let value = sample_shots(e, shots, mix_seed(seed, 0x51, i as u64))?;
            Ok(ExpectationRecord {
                config: *cfg,
                value,
                variance: shot_variance(value, shots),
            })
        })
        .collect()
}

fn shot_variance(e: f64, shots: Shots) -> f64 {
    match shots {
        Shots::Infinite => 0.0,
        Shots::Finite(m) => {
            let m = m as f64;
            (1.0 - e * e).max(1.0 / m) / m
        }
    }
}

/// Least-squares map from records on a fixed set of configurations to the
/// `v` unknowns, factored once and reusable across `t₂`.
pub struct QExtractor {
    configs: Vec<ProtocolConfig>,
    /// Representative key to its `Re` column and optional `Im` column.
    keys: HashMap<VKey, (usize, Option<usize>)>,
    n_unknowns: usize,
    /// Pseudo-inverse, `n_unknowns × n_records`.
    pinv: DMatrix<f64>,
    /// Orthonormal basis of the row space, one column per singular value kept.
    row_space: DMatrix<f64>,
}

impl QExtractor {
    pub fn new(configs: &[ProtocolConfig], n_pi: usize) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::Missing("no expectation records".into()));
        }
        let mut keys: HashMap<VKey, (usize, Option<usize>)> = HashMap::new();
        let mut n_unknowns = 0;
        let mut rows: Vec<HashMap<usize, f64>> = Vec::with_capacity(configs.len());
        for cfg in configs {
            let terms = expectation_terms(3, &cfg.angles(), n_pi, cfg.state, cfg.obs)?;
            let mut row: HashMap<usize, f64> = HashMap::new();
            for ((a, ap), w) in terms {
                let (rep, sign) = VKey::from_labels(&a, &ap).conjugate_rep();
                let (re, im) = *keys.entry(rep).or_insert_with(|| {
                    let re = n_unknowns;
                    n_unknowns += 1;
                    let im = (rep.c != [0, 0, 0]).then(|| {
                        n_unknowns += 1;
                        re + 1
                    });
                    (re, im)
                });
                *row.entry(re).or_default() += w.re;
                if let Some(im) = im {
                    *row.entry(im).or_default() -= sign * w.im;
                }
            }
            rows.push(row);
        }
        let mut d = DMatrix::<f64>::zeros(configs.len(), n_unknowns);
        for (i, row) in rows.iter().enumerate() {
            for (&col, &w) in row {
                d[(i, col)] = w;
            }
        }
        // Eigen-decomposition of the small normal matrix; the rank gap is
        // many orders of magnitude, so squaring the condition number is harmless.
        let eig = (d.transpose() * &d).symmetric_eigen();
        let lmax = eig.eigenvalues.amax();
        let kept: Vec<usize> = (0..n_unknowns)
            .filter(|&i| eig.eigenvalues[i] > 1e-12 * lmax.max(1e-300))
            .collect();
        let mut row_space = DMatrix::<f64>::zeros(n_unknowns, kept.len());
        let mut inv = DMatrix::<f64>::zeros(n_unknowns, n_unknowns);
        for (j, &i) in kept.iter().enumerate() {
            let vi = eig.eigenvectors.column(i);
            inv += vi * vi.transpose() / eig.eigenvalues[i];
            row_space.set_column(j, &vi);
        }
        let pinv = inv * d.transpose();
        Ok(QExtractor {
            configs: configs.to_vec(),
            keys,
            n_unknowns,
            pinv,
            row_space,
        })
    }

    fn functionals(&self, id: QId) -> Option<[DVector<f64>; 2]> {
        let mut re = DVector::<f64>::zeros(self.n_unknowns);
        let mut im = DVector::<f64>::zeros(self.n_unknowns);
        for (key, c) in id.terms() {
            let (rep, sign) = key.conjugate_rep();
            let (cr, ci) = *self.keys.get(&rep)?;
            re[cr] += c;
            if let Some(ci) = ci {
                im[ci] += sign * c;
            }
        }
        Some([re, im])
    }

    /// Whether `id` lies in the span of the configured records.
    pub fn identifiable(&self, id: QId) -> bool {
        let Some(fs) = self.functionals(id) else {
            return false;
        };
        fs.iter().all(|f| {
            if f.norm() == 0.0 {
                return true;
            }
            let proj = &self.row_space * (self.row_space.transpose() * f);
            (f - proj).norm() <= IDENT_TOL * f.norm()
        })
    }

    pub fn configs(&self) -> &[ProtocolConfig] {
        &self.configs
    }

    /// Estimates the requested quantities; records must follow the
    /// configuration order given at construction.
    pub fn extract(&self, records: &[ExpectationRecord], ids: &[QId]) -> Result<Vec<QQuantity>> {
        if records.len() != self.configs.len()
            || records
                .iter()
                .zip(&self.configs)
                .any(|(r, c)| r.config != *c)
        {
            return Err(Error::Invalid(
                "records do not match the extractor configurations".into(),
            ));
        }
        let missing: Vec<QId> = ids
            .iter()
            .copied()
            .filter(|&id| !self.identifiable(id))
            .collect();
        if !missing.is_empty() {
            let have: HashSet<ProtocolConfig> = self.configs.iter().copied().collect();
            let absent: Vec<String> = protocol_grid()
                .into_iter()
                .filter(|c| !have.contains(c))
                .map(|c| c.to_string())
                .collect();
            return Err(Error::Missing(format!(
                "{missing:?} not identifiable; absent configurations: [{}]",
                absent.join("; ")
            )));
        }
        let e = DVector::from_iterator(records.len(), records.iter().map(|r| r.value));
        let var = DVector::from_iterator(records.len(), records.iter().map(|r| r.variance));
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let [fr, fi] = self.functionals(id).unwrap();
            let gr = self.pinv.transpose() * fr;
            let gi = self.pinv.transpose() * fi;
            let value = Complex64::new(gr.dot(&e), gi.dot(&e));
            let variance = gr.component_mul(&gr).dot(&var) + gi.component_mul(&gi).dot(&var);
            let gmax = gr.amax().max(gi.amax());
            let constituents = (0..records.len())
                .filter(|&i| gr[i].abs().max(gi[i].abs()) > 1e-12 * gmax)
                .collect();
            out.push(QQuantity {
                id,
                value,
                variance,
                constituents,
            });
        }
        Ok(out)
    }
}

/// One-shot extraction; builds the extractor from the record configurations.
pub fn extract_q_quantities(
    records: &[ExpectationRecord],
    n_pi: usize,
    ids: &[QId],
) -> Result<Vec<QQuantity>> {
    let configs: Vec<ProtocolConfig> = records.iter().map(|r| r.config).collect();
    QExtractor::new(&configs, n_pi)?.extract(records, ids)
}

// ---------------------------------------------------------------------------
// Integral estimates

/// Position of a block: interval indices (1-based), `later ≥ earlier`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entry {
    pub later: usize,
    pub earlier: usize,
}

/// An inferred integral. Minus values are `Im` parts; `branch` is the `k`
/// of `kπ + (−1)^k arcsin(ŝ)` for the phase `4·value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralEstimate {
    pub entry: Entry,
    pub kind: Kind,
    pub value: f64,
    pub branch: i32,
    pub variance: f64,
}

/// CSV header matching [`IntegralEstimate::csv_row`].
pub const ESTIMATE_CSV_HEADER: &str = "label,kind,value,branch_k,variance";

impl IntegralEstimate {
    pub fn csv_row(&self) -> String {
        let kind = match self.kind {
            Kind::Plus => "plus",
            Kind::Minus => "minus",
        };
        format!(
            "{}{},{},{:e},{},{:e}",
            self.entry.later, self.entry.earlier, kind, self.value, self.branch, self.variance
        )
    }
}

fn lookup(qs: &[QQuantity], id: QId) -> Result<Complex64> {
    qs.iter()
        .find(|q| q.id == id)
        .map(|q| q.value)
        .ok_or_else(|| Error::Missing(format!("{id:?}")))
}

fn floored(x: f64, what: &str) -> Result<f64> {
    if x.abs() < DIVISOR_FLOOR || !x.is_finite() {
        Err(Error::IllConditioned(format!(
            "{what} = {x:e} below divisor floor"
        )))
    } else {
        Ok(x)
    }
}

fn positive(x: f64, what: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Invalid(format!(
            "unphysical amplitude {what} = {x:e}"
        )))
    }
}

/// `cos 4m` and `sin 4m` combinations (times the amplitude products) formed
/// from the Q5/Q6 and Q2/Q3 pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PhaseProducts {
    /// `A₀₀₁²·(cos 4m31, sin 4m31, cos 4m32, sin 4m32)`.
    q56: [f64; 4],
    /// `A(0,0,√2)·A(0,√2,0)·(cos 4m31, sin 4m31, cos 4m21, sin 4m21)`.
    q23: [f64; 4],
}

fn phase_products(qs: &[QQuantity]) -> Result<PhaseProducts> {
    let g = |id| lookup(qs, id);
    let (q5p, q5m, q6p, q6m) = (
        g(QId::Q5(Pm::Plus))?,
        g(QId::Q5(Pm::Minus))?,
        g(QId::Q6(Pm::Plus))?,
        g(QId::Q6(Pm::Minus))?,
    );
    let i4 = Complex64::new(0.0, 4.0);
    let c31 = ((q5p * q6p - q5m * q6m) / 4.0).re;
    let c32 = ((q5p * q6p + q5m * q6m) / 4.0).re;
    let s32 = -((q5p * q6m + q5m * q6p) / i4).re;
    let s31 = ((q5p * q6m - q5m * q6p) / i4).re;
    let (q2p, q2m, q3p, q3m) = (
        g(QId::Q2(Pm::Plus))?,
        g(QId::Q2(Pm::Minus))?,
        g(QId::Q3(Pm::Plus))?,
        g(QId::Q3(Pm::Minus))?,
    );
    let c31b = ((q2p * q3p - q2m * q3m) / 4.0).re;
    let c21 = ((q2p * q3p + q2m * q3m) / 4.0).re;
    let s21 = ((q2p * q3m + q2m * q3p) / -i4).re;
    let s31b = ((q2p * q3m - q2m * q3p) / -i4).re;
    Ok(PhaseProducts {
        q56: [c31, s31, c32, s32],
        q23: [c31b, s31b, c21, s21],
    })
}

/// Plus blocks recovered from `Q` quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct PlusInference {
    /// Symmetric `P[j][k]`, 0-based.
    pub p: [[f64; 3]; 3],
    /// `|cosh(2P13) − Q1⁺/(4cos(2m32)A₁₀₀A₀₀₁)|`.
    pub cosh_residual: f64,
    /// `||Q4| − 2A₀₁₀|cos 2m21||`; the quantity is redundant given the rest.
    pub q4_residual: f64,
}

impl PlusInference {
    pub fn estimates(&self) -> Vec<IntegralEstimate> {
        let mut v = Vec::new();
        for j in 0..3 {
            for k in 0..=j {
                v.push(IntegralEstimate {
                    entry: Entry {
                        later: j + 1,
                        earlier: k + 1,
                    },
                    kind: Kind::Plus,
                    value: self.p[j][k],
                    branch: 0,
                    variance: 0.0,
                });
            }
        }
        v
    }
}

/// Inverts the decay amplitudes and the Q1 pair for all six plus blocks.
pub fn infer_plus(qs: &[QQuantity]) -> Result<PlusInference> {
    let pi =
        |a: [i8; 3]| -> Result<f64> { positive(lookup(qs, QId::Pi(a))?.re, &format!("A+{a:?}")) };
    let a100 = pi([1, 0, 0])?;
    let p11 = -a100.ln();
    let (a110, a1m0) = (pi([1, 1, 0])?, pi([1, -1, 0])?);
    let p12 = -(a110 / a1m0).ln() / 4.0;
    let p22 = -(a110 * a1m0).ln() / 2.0 - p11;
    let pp = phase_products(qs)?;
    let [c31, s31, c32, s32] = pp.q56;
    let a001_sq = positive(0.5 * (c31.hypot(s31) + c32.hypot(s32)), "A+(0,0,1)^2")?;
    let p33 = -a001_sq.ln() / 2.0;
    let a001 = a001_sq.sqrt();
    let q1p = lookup(qs, QId::Q1(Pm::Plus))?.re;
    let q1m = lookup(qs, QId::Q1(Pm::Minus))?.re;
    let cos4m32 = (c32 / a001_sq).clamp(-1.0, 1.0);
    let cos2m32 = floored(((1.0 + cos4m32) / 2.0).sqrt() * q1p.signum(), "cos(2 m32)")?;
    let scale = floored(4.0 * cos2m32 * a100 * a001, "4 cos(2 m32) A100 A001")?;
    let p13 = (q1m / scale).asinh() / 2.0;
    let cosh_residual = ((2.0 * p13).cosh() - q1p / scale).abs();
    let (a111, a11m) = (pi([1, 1, 1])?, pi([1, 1, -1])?);
    let p23 = -(a111 / a11m).ln() / 4.0 - p13;
    let [_, _, c21, _] = pp.q23;
    let a010 = (-p22).exp();
    let amp = (-2.0 * p33 - 2.0 * p22).exp();
    let cos4m21 = (c21 / amp.max(1e-300)).clamp(-1.0, 1.0);
    let q4 = lookup(qs, QId::Q4)?;
    let q4_residual = (q4.norm() - 2.0 * a010 * ((1.0 + cos4m21) / 2.0).sqrt()).abs();
    Ok(PlusInference {
        p: [[p11, p12, p13], [p12, p22, p23], [p13, p23, p33]],
        cosh_residual,
        q4_residual,
    })
}

/// Principal value `kπ + (−1)^k arcsin(s)` of the phase with sine `s` and
/// cosine `c`, with `k ∈ {−1, 0, 1}`.
pub fn principal_phase(s: f64, c: f64) -> (f64, i32) {
    let k = if c >= 0.0 {
        0
    } else if s >= 0.0 {
        1
    } else {
        -1
    };
    (unwrap_value(k, s), k)
}

/// `kπ + (−1)^k arcsin(s)` with `s` clamped to `[−1, 1]`.
pub fn unwrap_value(k: i32, s: f64) -> f64 {
    let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    k as f64 * PI + sign * s.clamp(-1.0, 1.0).asin()
}

/// A minus block with the sine and cosine of its phase `4m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinusBlock {
    pub entry: Entry,
    pub sin: f64,
    pub cos: f64,
    pub estimate: IntegralEstimate,
}

/// Phases of `m31`, `m32` and `m21`, divided by amplitudes from `plus`.
pub fn infer_minus(qs: &[QQuantity], plus: &PlusInference) -> Result<Vec<MinusBlock>> {
    let pp = phase_products(qs)?;
    let a001_sq = floored((-2.0 * plus.p[2][2]).exp(), "A+(0,0,1)^2")?;
    let amp23 = floored(
        (-2.0 * plus.p[2][2] - 2.0 * plus.p[1][1]).exp(),
        "A+(0,0,√2)A+(0,√2,0)",
    )?;
    let [c31, s31, c32, s32] = pp.q56;
    let [_, _, c21, s21] = pp.q23;
    let block = |later, earlier, s: f64, c: f64| {
        let (phi, k) = principal_phase(s, c);
        MinusBlock {
            entry: Entry { later, earlier },
            sin: s,
            cos: c,
            estimate: IntegralEstimate {
                entry: Entry { later, earlier },
                kind: Kind::Minus,
                value: phi / 4.0,
                branch: k,
                variance: 0.0,
            },
        }
    };
    Ok(vec![
        block(3, 1, s31 / a001_sq, c31 / a001_sq),
        block(3, 2, s32 / a001_sq, c32 / a001_sq),
        block(2, 1, s21 / amp23, c21 / amp23),
    ])
}

// ---------------------------------------------------------------------------
// Direct equations on three-interval schedules

/// An expectation setting: all `N+1` boundary angles, state and observable.
#[derive(Clone, Debug, PartialEq)]
pub struct Setting {
    pub angles: Vec<f64>,
    pub state: InitialState,
    pub obs: Axis,
}

impl Setting {
    pub fn three(th1: f64, th2: f64, state: InitialState, obs: Axis) -> Self {
        Setting {
            angles: vec![0.0, th1, th2, 0.0],
            state,
            obs,
        }
    }

    /// `E[Y]_{+y}` of a single window, equal to its decay amplitude.
    pub fn window() -> Self {
        Setting {
            angles: vec![0.0, 0.0],
            state: InitialState::plus(Axis::Y),
            obs: Axis::Y,
        }
    }
}

/// The six settings forming `𝓐` (first four) and `𝓑` (last two).
pub fn corner_plus_settings() -> Vec<Setting> {
    let h = 0.5 * PI;
    let (py, px, mx) = (
        InitialState::plus(Axis::Y),
        InitialState::plus(Axis::X),
        InitialState::minus(Axis::X),
    );
    vec![
        Setting::three(h, h, py, Axis::Y),
        Setting::three(h, -h, py, Axis::Y),
        Setting::three(-h, -h, py, Axis::Y),
        Setting::three(-h, h, py, Axis::Y),
        Setting::three(h, h, mx, Axis::X),
        Setting::three(-h, h, px, Axis::X),
    ]
}

/// `P13` from the six corner settings, with X-observable values normalized
/// to an even π count (see [`parity_normalized`]).
pub fn corner_plus(e: &[f64]) -> Result<f64> {
    let a = e[0] - e[1] + e[2] - e[3];
    let b = e[4] + e[5];
    let d = 4.0 * b * b - a * a;
    if d <= 0.0 {
        return Err(Error::IllConditioned(format!(
            "4B^2 - A^2 = {d:e} is not positive"
        )));
    }
    let root = floored(d.sqrt() / 4.0, "|cos(2 m32)| A100 A001")?;
    Ok((a * b.signum() / (4.0 * root)).asinh() / 2.0)
}

/// `X0, X1, Y0, Y1` with `+z` input, `θ2 = π/2` and `θ1 ∈ {0, π}`.
pub fn corner_minus_settings() -> Vec<Setting> {
    let h = 0.5 * PI;
    let pz = InitialState::plus(Axis::Z);
    vec![
        Setting::three(0.0, h, pz, Axis::X),
        Setting::three(PI, h, pz, Axis::X),
        Setting::three(0.0, h, pz, Axis::Y),
        Setting::three(PI, h, pz, Axis::Y),
    ]
}

/// `(sin 4m31, cos 4m31)` from the four phase settings (parity-normalized)
/// and `A₀₀₁²`.
pub fn corner_minus(e: &[f64], a2: f64) -> Result<(f64, f64)> {
    let a2 = floored(a2, "A+(0,0,1)^2")?;
    let (x0, x1, y0, y1) = (e[0], e[1], e[2], e[3]);
    Ok((-(x0 * y1 + y0 * x1) / a2, -(x0 * x1 - y0 * y1) / a2))
}

/// Variance of `f(x)` by first-order propagation with central differences.
pub fn delta_method<F: Fn(&[f64]) -> Result<f64>>(f: F, x: &[f64], var: &[f64]) -> Result<f64> {
    if var.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        if var[i] == 0.0 {
            continue;
        }
        let h = (1e-4 * var[i].sqrt()).max(1e-9 * x[i].abs().max(1.0));
        xs[i] = x[i] + h;
        let up = f(&xs)?;
        xs[i] = x[i] - h;
        let dn = f(&xs)?;
        xs[i] = x[i];
        let g = (up - dn) / (2.0 * h);
        acc += g * g * var[i];
    }
    Ok(acc)
}

/// A measured expectation with its variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub variance: f64,
}

/// Anything that returns expectation values for settings on a schedule.
pub trait Experiment: Sync {
    /// `stream` identifies the batch for reproducible sampling.
    fn run(&self, s: &PulseSchedule, settings: &[Setting], stream: u64) -> Result<Vec<Measured>>;
}

/// Expectations from the exact engine, optionally shot-sampled.
pub struct SimulatedExperiment<'a, B: IntegralBackend + ?Sized> {
    pub backend: &'a B,
    pub shots: Shots,
    pub seed: u64,
}

impl<B: IntegralBackend + ?Sized> Experiment for SimulatedExperiment<'_, B> {
    fn run(&self, s: &PulseSchedule, settings: &[Setting], stream: u64) -> Result<Vec<Measured>> {
        let ii = IntervalIntegrals::compute(s, self.backend)?;
        settings
            .iter()
            .enumerate()
            .map(|(i, st)| {
                let e =
                    expectation_from_integrals(&ii, &st.angles, s.pi_count(), st.state, st.obs)?;
                let value = sample_shots(e, self.shots, mix_seed(self.seed, stream, i as u64))?;
                Ok(Measured {
                    value,
                    variance: shot_variance(value, self.shots),
                })
            })
            .collect()
    }
}

/// Each π pulse contributes `f_X^y = −1` to X-observable expectations; the
/// closed forms assume an even count, so odd schedules are flipped back.
pub fn parity_normalized(s: &PulseSchedule, settings: &[Setting], m: &[Measured]) -> Vec<f64> {
    let odd = s.pi_count() % 2 == 1;
    settings
        .iter()
        .zip(m)
        .map(|(st, r)| {
            if odd && st.obs == Axis::X {
                -r.value
            } else {
                r.value
            }
        })
        .collect()
}

fn flips(sw: &SwitchingFunction) -> Vec<f64> {
    (1..sw.values.len())
        .filter(|&i| sw.values[i] != sw.values[i - 1])
        .map(|i| sw.breakpoints[i])
        .collect()
}

fn length(sw: &SwitchingFunction) -> f64 {
    sw.end() - sw.start()
}

/// Schedule for one window pattern, measured with [`Setting::window`].
pub fn window_schedule(pattern: &SwitchingFunction, c: &Constraints) -> Result<PulseSchedule> {
    let t0 = pattern.start();
    let pulses = flips(pattern).iter().map(|t| t - t0).collect();
    PulseSchedule::new(vec![0.0, length(pattern)], vec![0.0, 0.0], vec![pulses], *c)
}

/// Two window patterns at absolute times, `early` ending no later than
/// `late` starts, realized as a three-interval schedule with a free gap.
#[derive(Clone, Debug, PartialEq)]
pub struct ThreeWindow {
    pub early: SwitchingFunction,
    pub late: SwitchingFunction,
}

impl ThreeWindow {
    pub fn new(early: SwitchingFunction, late: SwitchingFunction) -> Result<Self> {
        let tol = 1e-12 * late.end().abs().max(1e-9);
        if early.end() > late.start() + tol {
            return Err(Error::Invalid(
                "early window must end before the late window starts".into(),
            ));
        }
        Ok(ThreeWindow { early, late })
    }

    /// The schedule and `σ` with `pattern integral = σ · (corner block)`.
    pub fn schedule(&self, c: &Constraints) -> Result<(PulseSchedule, f64)> {
        let t0 = self.early.start();
        let fe = flips(&self.early);
        let fl = flips(&self.late);
        let b = vec![
            0.0,
            self.early.end() - t0,
            (self.late.start() - t0).max(self.early.end() - t0),
            self.late.end() - t0,
        ];
        let s = PulseSchedule::new(
            b,
            vec![0.0; 4],
            vec![
                fe.iter().map(|t| t - t0).collect(),
                vec![],
                fl.iter().map(|t| t - t0).collect(),
            ],
            *c,
        )?;
        let sigma = (self.early.values[0] * self.late.values[0]) as f64
            * if fe.len().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            };
        Ok((s, sigma))
    }

    pub fn is_empty(&self) -> bool {
        length(&self.early) <= 0.0 || length(&self.late) <= 0.0
    }
}

/// `A⁺` of a single window, measured.
pub fn measure_window<E: Experiment + ?Sized>(
    exp: &E,
    pattern: &SwitchingFunction,
    c: &Constraints,
    stream: u64,
) -> Result<Measured> {
    if length(pattern) <= 0.0 {
        return Ok(Measured {
            value: 1.0,
            variance: 0.0,
        });
    }
    Ok(exp.run(&window_schedule(pattern, c)?, &[Setting::window()], stream)?[0])
}

/// `∫∫_{[0,L]²} C⁺ = −ln A⁺` of a free window of length `L`.
pub fn measure_square<E: Experiment + ?Sized>(
    exp: &E,
    len: f64,
    c: &Constraints,
    stream: u64,
) -> Result<Measured> {
    let m = measure_window(exp, &SwitchingFunction::constant(0.0, len, 1), c, stream)?;
    let e = floored(m.value, "window amplitude")?;
    if e <= 0.0 {
        return Err(Error::IllConditioned(format!(
            "window amplitude {e:e} is not positive"
        )));
    }
    Ok(Measured {
        value: -e.ln(),
        variance: m.variance / (e * e),
    })
}

/// Plus pattern integral of a separated pair through the corner settings.
pub fn measure_separated_plus<E: Experiment + ?Sized>(
    exp: &E,
    w: &ThreeWindow,
    c: &Constraints,
    stream: u64,
) -> Result<Measured> {
    if w.is_empty() {
        return Ok(Measured {
            value: 0.0,
            variance: 0.0,
        });
    }
    let (s, sigma) = w.schedule(c)?;
    let settings = corner_plus_settings();
    let m = exp.run(&s, &settings, stream)?;
    let x = parity_normalized(&s, &settings, &m);
    let v: Vec<f64> = m.iter().map(|r| r.variance).collect();
    let p13 = corner_plus(&x)?;
    let variance = delta_method(corner_plus, &x, &v).unwrap_or(f64::INFINITY);
    Ok(Measured {
        value: sigma * p13,
        variance,
    })
}

/// `(ŝ, ĉ)` of the phase `4σ·𝓘⁻` of a separated pair, with the variances of
/// `ŝ` and `ĉ`. `σ` is returned alongside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseMeasurement {
    pub s: f64,
    pub c: f64,
    pub var_s: f64,
    pub var_c: f64,
    pub sigma: f64,
}

impl PhaseMeasurement {
    /// Principal-value pattern integral `σ·φ/4`.
    pub fn principal(&self) -> IntegralEstimate {
        let (phi, k) = principal_phase(self.s, self.c);
        IntegralEstimate {
            entry: Entry {
                later: 3,
                earlier: 1,
            },
            kind: Kind::Minus,
            value: self.sigma * phi / 4.0,
            branch: k,
            variance: self.var_s / (16.0 * (1.0 - self.s * self.s).max(1e-6)),
        }
    }
}

pub fn measure_separated_phase<E: Experiment + ?Sized>(
    exp: &E,
    w: &ThreeWindow,
    c: &Constraints,
    stream: u64,
) -> Result<PhaseMeasurement> {
    if w.is_empty() {
        return Ok(PhaseMeasurement {
            s: 0.0,
            c: 1.0,
            var_s: 0.0,
            var_c: 0.0,
            sigma: 1.0,
        });
    }
    let (s, sigma) = w.schedule(c)?;
    let settings = corner_minus_settings();
    let m = exp.run(&s, &settings, stream)?;
    let a = measure_window(exp, &w.late, c, mix_seed(stream, 0xA2, 0))?;
    let mut x = parity_normalized(&s, &settings, &m);
    x.push(a.value);
    let mut v: Vec<f64> = m.iter().map(|r| r.variance).collect();
    v.push(a.variance);
    let sc = |x: &[f64]| corner_minus(&x[..4], x[4] * x[4]);
    let (sh, ch) = sc(&x)?;
    Ok(PhaseMeasurement {
        s: sh,
        c: ch,
        var_s: delta_method(|x| Ok(sc(x)?.0), &x, &v).unwrap_or(f64::INFINITY),
        var_c: delta_method(|x| Ok(sc(x)?.1), &x, &v).unwrap_or(f64::INFINITY),
        sigma,
    })
}

/// Appendix pretest outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pretest {
    pub ok: bool,
    /// Estimate of `4𝓑² − 𝓐² = 16 cos²(2m32) A₁₀₀² A₀₀₁²`.
    pub value: f64,
}

/// Two cheap experiments: the early window's amplitude, and the phase
/// setting on `[gap, late]` with an empty first interval.
pub fn magnitude_pretest<E: Experiment + ?Sized>(
    exp: &E,
    w: &ThreeWindow,
    c: &Constraints,
    threshold: f64,
    stream: u64,
) -> Result<Pretest> {
    let e1 = measure_window(exp, &w.early, c, stream)?.value;
    let probe = ThreeWindow {
        early: SwitchingFunction::constant(w.early.end(), w.early.end(), 1),
        late: w.late.clone(),
    };
    let (s, _) = probe.schedule(c)?;
    let setting = Setting::three(0.0, 0.5 * PI, InitialState::plus(Axis::Z), Axis::X);
    let e2 = exp.run(&s, &[setting], mix_seed(stream, 0xB1, 0))?[0].value;
    let value = 16.0 * e1 * e1 * e2 * e2;
    Ok(Pretest {
        ok: value > threshold,
        value,
    })
}

// ---------------------------------------------------------------------------
// Safe zone and branch tracking

/// Branch-tracking state at the current frontier of the safe zone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeZoneState {
    pub frontier: f64,
    pub branch: i32,
    pub last_s: f64,
    pub last_c: f64,
    pub step: f64,
}

impl SafeZoneState {
    /// Start of tracking inside the trivial zone at `frontier`, where the
    /// phase is `phase`.
    pub fn seeded(frontier: f64, phase: f64, step: f64) -> Self {
        let k = ((phase + 0.5 * PI) / PI).floor() as i32;
        SafeZoneState {
            frontier,
            branch: k,
            last_s: phase.sin(),
            last_c: phase.cos(),
            step,
        }
    }
}

/// Unwrapped phases along a `t₂` sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchResolution {
    pub values: Vec<f64>,
    pub branches: Vec<i32>,
    /// Indices whose crossing decision was ambiguous.
    pub gaps: Vec<usize>,
    pub zone: SafeZoneState,
}

/// Tracks `k` across `|ŝ| = 1` crossings: when `ĉ` changes sign between
/// consecutive samples, `k` moves up if `(−1)^k(ŝ_{i−1} + ŝ_i) > 0` and down
/// otherwise. A sign change with `|ŝ|` far from 1, or one where both `ĉ`
/// values sit inside the noise floor while the `ŝ` mean does too, is
/// reported as a gap.
pub fn resolve_branch(
    t2: &[f64],
    s: &[f64],
    c: &[f64],
    zone: &SafeZoneState,
    noise: f64,
) -> Result<BranchResolution> {
    if s.len() != t2.len() || c.len() != t2.len() {
        return Err(Error::Invalid("t2, s and c must have equal length".into()));
    }
    let mut k = zone.branch;
    let (mut ps, mut pc) = (zone.last_s, zone.last_c);
    let mut values = Vec::with_capacity(s.len());
    let mut branches = Vec::with_capacity(s.len());
    let mut gaps = Vec::new();
    for i in 0..s.len() {
        if pc * c[i] < 0.0 {
            let mean = 0.5 * (ps + s[i]);
            let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
            if mean.abs() < 0.5
                || (noise > 0.0 && pc.abs() < noise && c[i].abs() < noise && mean.abs() < noise)
            {
                gaps.push(i);
            }
            if sign * mean > 0.0 {
                k += 1;
            } else {
                k -= 1;
            }
        }
        values.push(unwrap_value(k, s[i]));
        branches.push(k);
        ps = s[i];
        pc = c[i];
    }
    let zone = SafeZoneState {
        frontier: t2.last().copied().unwrap_or(zone.frontier),
        branch: k,
        last_s: ps,
        last_c: pc,
        step: zone.step,
    };
    Ok(BranchResolution {
        values,
        branches,
        gaps,
        zone,
    })
}

fn weighted_bound(
    s_plus: &dyn Fn(f64) -> f64,
    a: &FilterFunction,
    b: &FilterFunction,
    w_max: f64,
    power: i32,
) -> f64 {
    let extent = (a.breakpoints.last().unwrap() - a.breakpoints[0])
        .max(b.breakpoints.last().unwrap() - b.breakpoints[0]);
    let h = (0.5 * PI / extent.max(1e-12)).min(w_max / 2000.0);
    let mesh = Mesh::from_edges(&uniform_edges(0.0, w_max, h), &GaussLegendre::new(8));
    mesh.integrate(|w| w.powi(power) * a.eval(w).norm() * b.eval(w).norm() * s_plus(w).max(0.0))
        / PI
}

/// `(1/π) ∫_0^{w_max} |G_a||G_b| Ŝ⁺ dω ≥ |𝓘⁻|` for the two patterns.
pub fn safe_zone_bound(
    s_plus: &dyn Fn(f64) -> f64,
    a: &FilterFunction,
    b: &FilterFunction,
    w_max: f64,
) -> f64 {
    weighted_bound(s_plus, a, b, w_max, 0)
}

/// `(1/π) ∫ ω|F||F′| Ŝ⁺`, a bound on `|d𝓘⁻/dt₂|`.
pub fn safe_zone_rate(
    s_plus: &dyn Fn(f64) -> f64,
    a: &FilterFunction,
    b: &FilterFunction,
    w_max: f64,
) -> f64 {
    weighted_bound(s_plus, a, b, w_max, 1)
}

/// Largest `t₂` step keeping consecutive phases `4𝓘⁻` within π/2.
pub fn tracking_step(
    s_plus: &dyn Fn(f64) -> f64,
    a: &FilterFunction,
    b: &FilterFunction,
    w_max: f64,
) -> f64 {
    let r = safe_zone_rate(s_plus, a, b, w_max);
    if r <= 0.0 {
        f64::INFINITY
    } else {
        0.5 * PI / (4.0 * r)
    }
}

// ---------------------------------------------------------------------------
// Region arithmetic

/// One region of a decomposed integration domain, weighted by `sign`.
#[derive(Clone, Debug, PartialEq)]
pub enum Piece {
    /// Separated rectangle `late × early` of two patterns at absolute times.
    Separated { window: ThreeWindow, sign: f64 },
    /// `∫∫_{[0,L]²} C⁺` of a free square.
    Square { length: f64, sign: f64 },
}

impl Piece {
    /// Splits the longer side of a separated piece at the grid point nearest
    /// its middle; `None` when neither side can be split.
    pub fn split(&self, c: &Constraints) -> Option<(Piece, Piece)> {
        let Piece::Separated { window, sign } = self else {
            return None;
        };
        let le = length(&window.early);
        let ll = length(&window.late);
        let cut = |sw: &SwitchingFunction| {
            let m = c.snap(0.5 * (sw.start() + sw.end()));
            (m > sw.start() && m < sw.end()).then_some(m)
        };
        let (first, second) = if ll >= le {
            let m = cut(&window.late)?;
            (
                ThreeWindow {
                    early: window.early.clone(),
                    late: window.late.restrict(window.late.start(), m),
                },
                ThreeWindow {
                    early: window.early.clone(),
                    late: window.late.restrict(m, window.late.end()),
                },
            )
        } else {
            let m = cut(&window.early)?;
            (
                ThreeWindow {
                    early: window.early.restrict(window.early.start(), m),
                    late: window.late.clone(),
                },
                ThreeWindow {
                    early: window.early.restrict(m, window.early.end()),
                    late: window.late.clone(),
                },
            )
        };
        Some((
            Piece::Separated {
                window: first,
                sign: *sign,
            },
            Piece::Separated {
                window: second,
                sign: *sign,
            },
        ))
    }

    /// Exact value through a backend, for oracles.
    pub fn exact<B: IntegralBackend + ?Sized>(&self, backend: &B, kind: Kind) -> Result<f64> {
        match self {
            Piece::Separated { window, sign } => {
                if window.is_empty() {
                    return Ok(0.0);
                }
                let (l, e) = (window.late.filter(), window.early.filter());
                Ok(sign
                    * match kind {
                        Kind::Plus => backend.plus(&l, &e)?,
                        Kind::Minus => backend.minus(&l, &e)?,
                    })
            }
            Piece::Square { length, sign } => {
                let f = SwitchingFunction::constant(0.0, *length, 1).filter();
                Ok(sign
                    * match kind {
                        Kind::Plus => backend.plus(&f, &f)?,
                        Kind::Minus => 0.0,
                    })
            }
        }
    }
}

/// Decomposes `∫_{t₂}^{t₂+t₁}dt ∫_0^{t₁}dt′ y(t−t₂) y′(t′) C±(t−t′)` into
/// separated rectangles and free squares. For `t₂ < t₁` the domain splits
/// into the part beyond `t₁`, the part below `t₂`, and the overlap square
/// `[t₂, t₁]²`; the square is cut on the union of both patterns'
/// breakpoints, cells above the diagonal are transposed (sign −1 for the
/// minus kind) and diagonal cells are free squares (zero for minus).
pub fn deadtime_pieces(
    y: &SwitchingFunction,
    y_prime: &SwitchingFunction,
    t2: f64,
    kind: Kind,
) -> Vec<Piece> {
    let t1 = length(y);
    let late = y.shifted(t2 - y.start());
    let early = y_prime.shifted(-y_prime.start());
    if t2 >= t1 * (1.0 - 1e-12) {
        return vec![Piece::Separated {
            window: ThreeWindow { early, late },
            sign: 1.0,
        }];
    }
    let mut out = vec![Piece::Separated {
        window: ThreeWindow {
            early: early.clone(),
            late: late.restrict(t1, t2 + t1),
        },
        sign: 1.0,
    }];
    if t2 > 0.0 {
        out.push(Piece::Separated {
            window: ThreeWindow {
                early: early.restrict(0.0, t2),
                late: late.restrict(t2, t1),
            },
            sign: 1.0,
        });
    }
    let mut cuts: Vec<f64> = late
        .breakpoints
        .iter()
        .chain(&early.breakpoints)
        .copied()
        .filter(|&t| t > t2 && t < t1)
        .collect();
    cuts.push(t2);
    cuts.push(t1);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|b, a| (*b - *a).abs() <= 1e-15 * t1);
    let n = cuts.len() - 1;
    let mid = |i: usize| 0.5 * (cuts[i] + cuts[i + 1]);
    let cell = |i: usize| SwitchingFunction::constant(cuts[i], cuts[i + 1], 1);
    let transpose = match kind {
        Kind::Plus => 1.0,
        Kind::Minus => -1.0,
    };
    for i in 0..n {
        for j in 0..n {
            let s = (late.value_at(mid(i)) * early.value_at(mid(j))) as f64;
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => out.push(Piece::Separated {
                    window: ThreeWindow {
                        early: cell(j),
                        late: cell(i),
                    },
                    sign: s,
                }),
                std::cmp::Ordering::Less => out.push(Piece::Separated {
                    window: ThreeWindow {
                        early: cell(i),
                        late: cell(j),
                    },
                    sign: s * transpose,
                }),
                std::cmp::Ordering::Equal => {
                    if kind == Kind::Plus {
                        out.push(Piece::Square {
                            length: cuts[i + 1] - cuts[i],
                            sign: s,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Sums measured piece values (each already signed by the caller's
/// `measure`), propagating variances.
pub fn deadtime_compose<F: FnMut(&Piece) -> Result<Measured>>(
    pieces: &[Piece],
    mut measure: F,
) -> Result<Measured> {
    let mut value = 0.0;
    let mut variance = 0.0;
    for p in pieces {
        let m = measure(p)?;
        value += m.value;
        variance += m.variance;
    }
    Ok(Measured { value, variance })
}

/// A `δ × δ` cell recovered by double differencing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripCell {
    pub q: usize,
    pub r: usize,
    /// Lag of the cell centre in units of δ.
    pub lag: i64,
    pub value: f64,
    pub variance: f64,
    /// Differencing amplified the noise beyond the threshold.
    pub noisy: bool,
}

/// Cells `(q, r)` for `q ≤ nq`, `r ≤ nr` from corner integrals
/// `R(q, r) = ∫_{T₃}^{T₃+rδ}dt ∫_{T₁}^{T₁+qδ}dt′ C(t−t′)`, with
/// `lag0 = (T₃ − T₁)/δ`. A cell is flagged noisy when its standard
/// deviation exceeds `noise_ratio·|value|`.
pub fn strip_refine<F: FnMut(usize, usize) -> Result<Measured>>(
    nq: usize,
    nr: usize,
    lag0: i64,
    mut corner: F,
    noise_ratio: f64,
) -> Result<Vec<StripCell>> {
    let mut r_tab = vec![
        vec![
            Measured {
                value: 0.0,
                variance: 0.0
            };
            nr + 1
        ];
        nq + 1
    ];
    for q in 1..=nq {
        for r in 1..=nr {
            r_tab[q][r] = corner(q, r)?;
        }
    }
    let mut out = Vec::with_capacity(nq * nr);
    for q in 1..=nq {
        for r in 1..=nr {
            let value = r_tab[q][r].value - r_tab[q - 1][r].value - r_tab[q][r - 1].value
                + r_tab[q - 1][r - 1].value;
            let variance = r_tab[q][r].variance
                + r_tab[q - 1][r].variance
                + r_tab[q][r - 1].variance
                + r_tab[q - 1][r - 1].variance;
            out.push(StripCell {
                q,
                r,
                lag: lag0 + r as i64 - q as i64,
                value,
                variance,
                noisy: variance.sqrt() > noise_ratio * value.abs(),
            });
        }
    }
    Ok(out)
}

/// `M_f = Σ f(lag)·cell/δ²`.
pub fn full_access_mf<F: Fn(i64) -> Complex64>(cells: &[StripCell], delta: f64, f: F) -> Complex64 {
    cells.iter().map(|c| f(c.lag) * c.value).sum::<Complex64>() / (delta * delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        assert_eq!(protocol_grid().len(), 972);
    }

    #[test]
    fn canonical_key() {
        assert_eq!(VKey::new([-1, 0, 1], [0, 0, 1]).a, [1, 0, -1]);
        assert_eq!(VKey::new([0, 0, -1], [1, 1, 0]).a, [0, 0, 1]);
    }

    #[test]
    fn unwrap_identity() {
        for k in -4..=4 {
            for &s in &[-0.9, -0.3, 0.0, 0.4, 0.99] {
                assert!((unwrap_value(k, s).sin() - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn principal_covers_circle() {
        for i in 0..200 {
            let phi = -PI + 2.0 * PI * (i as f64 + 0.5) / 200.0;
            let (v, _) = principal_phase(phi.sin(), phi.cos());
            assert!((v - phi).abs() < 1e-12, "{phi} {v}");
        }
    }

    #[test]
    fn principal_of_zero_phase() {
        assert_eq!(principal_phase(0.0, 1.0), (0.0, 0));
    }
}
