//! Spectral densities S±(ω), their correlation functions C±(τ), the
//! |S⁻| ≤ S⁺ physicality check and a stochastic bath synthesizer.
//!
//! Frequencies are angular (rad/s) and ħ = 1. `S⁺` is even in ω, `S⁻` odd.
//! `C±(τ) = (1/2π) ∫ S±(ω) e^{iωτ} dω`; `C⁺` is real and even, `C⁻` purely
//! imaginary and odd, so only `Im C⁻` is stored.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{graded_edges, GaussLegendre, Mesh};

/// Which correlation a spectrum belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    /// Classical spectrum S⁺, even in ω.
    Symmetric,
    /// Quantum spectrum S⁻, odd in ω.
    Antisymmetric,
}

/// `a1 / (1 + a2·|ω|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcTerm {
    pub a1: f64,
    pub a2: f64,
}

/// Lorentzian bump `b / (1 + c·(|ω| − ω0)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub b: f64,
    pub c: f64,
    pub omega0: f64,
}

impl Bump {
    pub fn half_width(&self) -> f64 {
        1.0 / self.c.sqrt()
    }
}

/// High-frequency floor variants, both functions of ω in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorFormula {
    /// `ω^{1/4} − 70√2·π^{1/4}`, negative over the whole band below 60 kHz.
    Printed,
    /// `70√2·π^{1/4} − ω^{1/4}`, a nearly flat positive floor.
    SignCorrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteFloor {
    pub threshold: f64,
    pub formula: FloorFormula,
}

impl WhiteFloor {
    pub fn value(&self, w: f64) -> f64 {
        let k = 70.0 * 2f64.sqrt() * PI.powf(0.25);
        match self.formula {
            FloorFormula::Printed => w.powf(0.25) - k,
            FloorFormula::SignCorrected => k - w.powf(0.25),
        }
    }
}

/// Multiplies the spectrum by `cos(phase + slope·|ω|)` above `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modulation {
    pub threshold: f64,
    pub phase: f64,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub parity: Parity,
    pub dc: DcTerm,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub white_floor: Option<WhiteFloor>,
    #[serde(default)]
    pub modulation: Option<Modulation>,
    pub cutoff: f64,
}

impl SpectrumModel {
    /// A spectrum that vanishes everywhere.
    pub fn zero(parity: Parity, cutoff: f64) -> Self {
        SpectrumModel {
            parity,
            dc: DcTerm { a1: 0.0, a2: 0.0 },
            bumps: Vec::new(),
            white_floor: None,
            modulation: None,
            cutoff,
        }
    }

    /// Flat spectrum of height `s0` on `|ω| ≤ cutoff`.
    pub fn flat(parity: Parity, s0: f64, cutoff: f64) -> Self {
        SpectrumModel {
            dc: DcTerm { a1: s0, a2: 0.0 },
            ..Self::zero(parity, cutoff)
        }
    }

    /// Spectrum value for ω ≥ 0, before the parity extension.
    fn positive(&self, w: f64) -> f64 {
        if w > self.cutoff {
            return 0.0;
        }
        let mut s = self.dc.a1 / (1.0 + self.dc.a2 * w);
        for b in &self.bumps {
            let d = w - b.omega0;
            s += b.b / (1.0 + b.c * d * d);
        }
        if let Some(f) = &self.white_floor {
            if w >= f.threshold {
                s += f.value(w);
            }
        }
        if let Some(m) = &self.modulation {
            if w >= m.threshold {
                s *= (m.phase + m.slope * w).cos();
            }
        }
        s
    }

    /// `S(ω)` with the parity extension for ω < 0.
    pub fn eval(&self, omega: f64) -> f64 {
        let v = self.positive(omega.abs());
        match self.parity {
            Parity::Symmetric => v,
            Parity::Antisymmetric => {
                if omega > 0.0 {
                    v
                } else if omega < 0.0 {
                    -v
                } else {
                    0.0
                }
            }
        }
    }

    /// Returns a copy with every amplitude multiplied by `k`. The additive
    /// floor has no amplitude parameter, so models carrying one are refused.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if self.white_floor.is_some() && k != 1.0 {
            return Err(Error::Invalid(
                "cannot rescale a spectrum with a white floor".into(),
            ));
        }
        let mut m = self.clone();
        m.dc.a1 *= k;
        for b in &mut m.bumps {
            b.b *= k;
        }
        Ok(m)
    }

    /// Local length scale in ω over which the spectrum varies near `w`.
    pub(crate) fn feature_scale(&self, w: f64) -> f64 {
        let mut s = f64::INFINITY;
        if self.dc.a1 != 0.0 && self.dc.a2 > 0.0 {
            s = s.min(1.0 / self.dc.a2 + w);
        }
        for b in &self.bumps {
            if b.b != 0.0 {
                s = s.min(b.half_width() + (w - b.omega0).abs());
            }
        }
        if let Some(m) = &self.modulation {
            if m.slope != 0.0 && w + s >= m.threshold {
                s = s.min(1.0 / m.slope.abs());
            }
        }
        s
    }

    /// Discontinuities of the ω ≥ 0 branch.
    pub(crate) fn seams(&self) -> Vec<f64> {
        let mut v = vec![self.cutoff];
        if let Some(f) = &self.white_floor {
            v.push(f.threshold);
        }
        if let Some(m) = &self.modulation {
            v.push(m.threshold);
        }
        for b in &self.bumps {
            v.push(b.omega0);
        }
        v
    }
}

/// The classical/quantum pair describing one bath.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPair {
    pub c: SpectrumModel,
    pub q: SpectrumModel,
}

impl SpectrumPair {
    pub fn new(c: SpectrumModel, q: SpectrumModel) -> Result<Self> {
        if c.parity != Parity::Symmetric || q.parity != Parity::Antisymmetric {
            return Err(Error::Invalid(
                "pair needs a symmetric c and an antisymmetric q spectrum".into(),
            ));
        }
        Ok(SpectrumPair { c, q })
    }

    pub fn classical(c: SpectrumModel) -> Self {
        let cutoff = c.cutoff;
        SpectrumPair {
            c,
            q: SpectrumModel::zero(Parity::Antisymmetric, cutoff),
        }
    }

    pub fn cutoff(&self) -> f64 {
        self.c.cutoff.max(self.q.cutoff)
    }

    /// Composite Gauss–Legendre mesh on `[0, ω_co]` resolving both spectra and
    /// the oscillation `e^{iωτ}` for `|τ| ≤ max_lag`. `refine` divides every
    /// panel width (1 = default).
    pub fn frequency_mesh(&self, max_lag: f64, refine: f64) -> Mesh {
        let wc = self.cutoff();
        let osc = if max_lag > 0.0 {
            PI / max_lag
        } else {
            f64::INFINITY
        };
        let cap = wc / 16.0;
        let mut seams = self.c.seams();
        seams.extend(self.q.seams());
        let edges = graded_edges(0.0, wc, &seams, |w| {
            let feat = self.c.feature_scale(w).min(self.q.feature_scale(w)) / 3.0;
            osc.min(feat).min(cap) / refine
        });
        Mesh::from_edges(&edges, &GaussLegendre::new(8))
    }
}

/// Result of the pointwise |S⁻| ≤ S⁺ scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalityReport {
    pub pass: bool,
    /// Grid points where `S⁺ − |S⁻| < −tol`.
    pub violations: Vec<f64>,
    /// `min(S⁺ − |S⁻|)` over the grid.
    pub margin: f64,
    /// Where the minimum margin occurs.
    pub worst_omega: f64,
}

/// Checks `S⁺(ω) − |S⁻(ω)| ≥ −tol` on every grid point.
pub fn check_physicality(pair: &SpectrumPair, grid: &[f64], tol: f64) -> PhysicalityReport {
    let mut margin = f64::INFINITY;
    let mut worst = f64::NAN;
    let mut violations = Vec::new();
    for &w in grid {
        let m = pair.c.eval(w) - pair.q.eval(w).abs();
        if m < margin {
            margin = m;
            worst = w;
        }
        if m < -tol {
            violations.push(w);
        }
    }
    PhysicalityReport {
        pass: violations.is_empty(),
        violations,
        margin,
        worst_omega: worst,
    }
}

/// Default physicality grid: the feature-resolving mesh nodes plus every
/// bump centre and seam on `[0, ω_co]`.
pub fn physicality_grid(pair: &SpectrumPair) -> Vec<f64> {
    let mesh = pair.frequency_mesh(0.0, 4.0);
    let mut g = mesh.nodes;
    g.extend(pair.c.seams());
    g.extend(pair.q.seams());
    g.retain(|w| *w >= 0.0 && *w <= pair.cutoff());
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g.dedup();
    g
}

/// `C±` sampled on a uniform τ grid with analytic first and second
/// derivatives; off-grid values use quintic Hermite interpolation.
#[derive(Clone, Debug)]
pub struct CorrelationTable {
    step: f64,
    /// `[value, d/dτ, d²/dτ²]` of C⁺.
    plus: [Vec<f64>; 3],
    /// `[value, d/dτ, d²/dτ²]` of Im C⁻.
    minus: [Vec<f64>; 3],
}

impl CorrelationTable {
    /// Tabulates `C±` on `[0, tau_max]` with spacing at most `step`.
    pub fn build(pair: &SpectrumPair, tau_max: f64, step: f64) -> Result<Self> {
        if !(tau_max > 0.0 && step > 0.0) {
            return Err(Error::Invalid("tau_max and step must be positive".into()));
        }
        let n = (tau_max / step).ceil() as usize + 2;
        let step = tau_max / (n - 2) as f64;
        let mesh = pair.frequency_mesh(tau_max + 2.0 * step, 1.0);
        let table = Self::tabulate(pair, &mesh, step, n);
        // Convergence probe against a mesh with panels halved.
        let fine = pair.frequency_mesh(tau_max + 2.0 * step, 2.0);
        let scale = table.plus[0][0].abs().max(1e-300);
        for &tau in &[0.0, 0.37 * tau_max, tau_max] {
            let (p1, m1) = correlation_with_mesh(pair, &mesh, tau);
            let (p2, m2) = correlation_with_mesh(pair, &fine, tau);
            let err = (p1 - p2).abs().max((m1 - m2).abs()) / scale;
            if err > 1e-7 {
                return Err(Error::Quadrature(format!(
                    "correlation at tau = {tau:e} s changed by {err:e} (relative) under refinement"
                )));
            }
        }
        Ok(table)
    }

    /// Default spacing: 32 samples per shortest period `2π/ω_co`.
    pub fn default_step(pair: &SpectrumPair) -> f64 {
        PI / (16.0 * pair.cutoff())
    }

    fn tabulate(pair: &SpectrumPair, mesh: &Mesh, step: f64, n: usize) -> Self {
        const BLOCK: usize = 256;
        let sp: Vec<f64> = mesh.nodes.iter().map(|&w| pair.c.eval(w)).collect();
        let sm: Vec<f64> = mesh.nodes.iter().map(|&w| pair.q.eval(w)).collect();
        let blocks: Vec<[Vec<f64>; 6]> = (0..n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|bi| {
                let start = bi * BLOCK;
                let len = BLOCK.min(n - start);
                let mut out: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; len]);
                for (i, &w) in mesh.nodes.iter().enumerate() {
                    let wt = mesh.weights[i] / PI;
                    let (ap, am) = (wt * sp[i], wt * sm[i]);
                    if ap == 0.0 && am == 0.0 {
                        continue;
                    }
                    let w2 = w * w;
                    let rot = Complex64::from_polar(1.0, w * step);
                    let mut z = Complex64::from_polar(1.0, w * step * start as f64);
                    for j in 0..len {
                        out[0][j] += ap * z.re;
                        out[1][j] -= ap * w * z.im;
                        out[2][j] -= ap * w2 * z.re;
                        out[3][j] += am * z.im;
                        out[4][j] += am * w * z.re;
                        out[5][j] -= am * w2 * z.im;
                        z *= rot;
                    }
                }
                out
            })
            .collect();
        let mut plus: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut minus: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
        for b in blocks {
            for k in 0..3 {
                plus[k].extend_from_slice(&b[k]);
                minus[k].extend_from_slice(&b[k + 3]);
            }
        }
        CorrelationTable { step, plus, minus }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Largest |τ| that can be evaluated without extrapolation.
    pub fn tau_max(&self) -> f64 {
        self.step * (self.plus[0].len() - 2) as f64
    }

    pub fn len(&self) -> usize {
        self.plus[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.plus[0].is_empty()
    }

    /// Grid sample `k`: (τ, C⁺, Im C⁻).
    pub fn sample(&self, k: usize) -> (f64, f64, f64) {
        (k as f64 * self.step, self.plus[0][k], self.minus[0][k])
    }

    fn hermite(&self, f: &[Vec<f64>; 3], tau: f64) -> f64 {
        let x = tau / self.step;
        let k = (x.floor() as usize).min(f[0].len() - 2);
        let s = x - k as f64;
        let h = self.step;
        let (s2, s3) = (s * s, s * s * s);
        let (s4, s5) = (s3 * s, s3 * s2);
        let h0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
        let h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
        let h2 = 0.5 * (s2 - 3.0 * s3 + 3.0 * s4 - s5);
        let h3 = 0.5 * (s3 - 2.0 * s4 + s5);
        let h4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
        let h5 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
        h0 * f[0][k]
            + h * (h1 * f[1][k] + h4 * f[1][k + 1])
            + h * h * (h2 * f[2][k] + h3 * f[2][k + 1])
            + h5 * f[0][k + 1]
    }

    /// `C⁺(τ)`, even in τ.
    pub fn c_plus(&self, tau: f64) -> f64 {
        self.hermite(&self.plus, tau.abs())
    }

    /// `Im C⁻(τ)`, odd in τ.
    pub fn c_minus_im(&self, tau: f64) -> f64 {
        let v = self.hermite(&self.minus, tau.abs());
        if tau < 0.0 {
            -v
        } else {
            v
        }
    }

    /// `C⁻(τ)` as a complex number (real part identically zero).
    pub fn c_minus(&self, tau: f64) -> Complex64 {
        Complex64::new(0.0, self.c_minus_im(tau))
    }

    /// Writes the grid samples as `tau_s,c_plus,c_minus_imag` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "tau_s,c_plus,c_minus_imag")?;
        for k in 0..self.len() {
            let (t, p, m) = self.sample(k);
            writeln!(out, "{t:e},{p:e},{m:e}")?;
        }
        Ok(())
    }

    /// `(max_τ |C⁻(τ)|, C⁺(0))` over the table grid.
    pub fn commutator_bound(&self) -> (f64, f64) {
        let m = self.minus[0].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (m, self.plus[0][0])
    }
}

/// `(C⁺(τ), Im C⁻(τ))` by direct quadrature on `mesh` (which must cover
/// `[0, ω_co]` and resolve `e^{iωτ}`).
pub fn correlation_with_mesh(pair: &SpectrumPair, mesh: &Mesh, tau: f64) -> (f64, f64) {
    let mut p = 0.0;
    let mut m = 0.0;
    for (&w, &wt) in mesh.nodes.iter().zip(&mesh.weights) {
        let (s, c) = (w * tau).sin_cos();
        p += wt * pair.c.eval(w) * c;
        m += wt * pair.q.eval(w) * s;
    }
    (p / PI, m / PI)
}

/// `(C⁺(τ), Im C⁻(τ))` at a single lag.
pub fn correlation(pair: &SpectrumPair, tau: f64) -> (f64, f64) {
    let mesh = pair.frequency_mesh(tau.abs(), 1.0);
    correlation_with_mesh(pair, &mesh, tau)
}

/// Overlap length `|[a0,a1] ∩ [b0+τ, b1+τ]|`.
pub fn overlap(a0: f64, a1: f64, b0: f64, b1: f64, tau: f64) -> f64 {
    (a1.min(b1 + tau) - a0.max(b0 + tau)).max(0.0)
}

/// `∫_{a0}^{a1} dt ∫_{b0}^{b1} dt' g(t − t')` reduced to a single integral
/// over the lag, `∫ g(τ)·overlap(τ) dτ`. With `ordered`, only `t ≥ t'`
/// contributes. `h` bounds the panel width.
pub fn rectangle_lag_integral<G: Fn(f64) -> f64>(
    a0: f64,
    a1: f64,
    b0: f64,
    b1: f64,
    ordered: bool,
    h: f64,
    g: G,
) -> f64 {
    if a1 <= a0 || b1 <= b0 {
        return 0.0;
    }
    let mut lo = a0 - b1;
    let hi = a1 - b0;
    if ordered {
        lo = lo.max(0.0);
    }
    if hi <= lo {
        return 0.0;
    }
    let kinks = [a0 - b1, a0 - b0, a1 - b1, a1 - b0, 0.0];
    let edges = graded_edges(lo, hi, &kinks, |_| h);
    let mesh = Mesh::from_edges(&edges, &GaussLegendre::new(8));
    mesh.integrate(|tau| g(tau) * overlap(a0, a1, b0, b1, tau))
}

/// Both sides of the commutator corollary:
/// `lhs = 2|∫_{T1}^{T1+T2}dt ∫_0^{T1}dt' C⁻(t−t')|`,
/// `rhs = ∬_{[0,T1]²} C⁺ + ∬_{[0,T2]²} C⁺`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorollaryBounds {
    pub lhs: f64,
    pub rhs: f64,
    /// `max |C⁻(τ)|` over the table.
    pub max_commutator: f64,
    /// `C⁺(0)`.
    pub c_plus_zero: f64,
}

pub fn corollary_bounds(table: &CorrelationTable, t1: f64, t2: f64) -> Result<CorollaryBounds> {
    if t1 < 0.0 || t2 < 0.0 {
        return Err(Error::Invalid("T1 and T2 must be non-negative".into()));
    }
    if t1 + t2 > table.tau_max() {
        return Err(Error::Invalid(
            "correlation table too short for T1 + T2".into(),
        ));
    }
    let h = 4.0 * table.step();
    let lhs = 2.0
        * rectangle_lag_integral(t1, t1 + t2, 0.0, t1, false, h, |tau| table.c_minus_im(tau)).abs();
    let sq = |t: f64| rectangle_lag_integral(0.0, t, 0.0, t, false, h, |tau| table.c_plus(tau));
    let (max_commutator, c_plus_zero) = table.commutator_bound();
    Ok(CorollaryBounds {
        lhs,
        rhs: sq(t1) + sq(t2),
        max_commutator,
        c_plus_zero,
    })
}

/// One draw of the four-process bath construction. Modes sit at bin centres
/// on `[0, ω_co]`; the negative-frequency half is folded in by doubling the
/// bin power, which yields the same statistics.
#[derive(Clone, Debug)]
pub struct BathRealization {
    pub modes: Vec<f64>,
    amp_minus: Vec<f64>,
    amp_rest: Vec<f64>,
    amp_y: Vec<f64>,
    draws: [Vec<f64>; 4],
}

/// Per-mode amplitudes shared by all realizations of one pair.
#[derive(Clone, Debug)]
pub struct BathModes {
    pub modes: Vec<f64>,
    amp_minus: Vec<f64>,
    amp_rest: Vec<f64>,
    amp_y: Vec<f64>,
}

impl BathModes {
    /// Discretizes `[0, ω_co]` into `n_modes` equal bins. Refuses unphysical
    /// pairs, whose radicands would be negative.
    pub fn new(pair: &SpectrumPair, n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Invalid("need at least one mode".into()));
        }
        let report = check_physicality(pair, &physicality_grid(pair), 0.0);
        if !report.pass {
            return Err(Error::Physicality {
                omega: report.worst_omega,
                margin: report.margin,
            });
        }
        let wc = pair.cutoff();
        let width = wc / n_modes as f64;
        let mut plus = vec![0.0; n_modes];
        let mut minus = vec![0.0; n_modes];
        let mut seams = pair.c.seams();
        seams.extend(pair.q.seams());
        seams.extend((1..n_modes).map(|k| k as f64 * width));
        let edges = graded_edges(0.0, wc, &seams, |w| {
            (pair.c.feature_scale(w).min(pair.q.feature_scale(w)) / 3.0).min(width)
        });
        let mesh = Mesh::from_edges(&edges, &GaussLegendre::new(8));
        for (&w, &wt) in mesh.nodes.iter().zip(&mesh.weights) {
            let k = ((w / width) as usize).min(n_modes - 1);
            plus[k] += wt * pair.c.eval(w);
            minus[k] += wt * pair.q.eval(w);
        }
        let mut modes = Vec::with_capacity(n_modes);
        let mut amp_minus = Vec::with_capacity(n_modes);
        let mut amp_rest = Vec::with_capacity(n_modes);
        let mut amp_y = Vec::with_capacity(n_modes);
        for k in 0..n_modes {
            // Both signs of p fold into one mode: double the bin power.
            let pm = 2.0 * minus[k];
            let pp = 2.0 * plus[k];
            let rest = pp - pm.abs();
            if rest < -1e-12 * pp.abs().max(1.0) {
                return Err(Error::Physicality {
                    omega: (k as f64 + 0.5) * width,
                    margin: rest,
                });
            }
            modes.push((k as f64 + 0.5) * width);
            let root = pm.abs().sqrt() / (2.0 * (2.0 * PI).sqrt());
            amp_minus.push(pm.signum() * root);
            amp_y.push(root);
            amp_rest.push(rest.max(0.0).sqrt() / (2.0 * PI.sqrt()));
        }
        Ok(BathModes {
            modes,
            amp_minus,
            amp_rest,
            amp_y,
        })
    }

    /// Draws the white-noise coefficients for one trajectory.
    pub fn realize(&self, seed: u64) -> BathRealization {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.modes.len();
        let mut draw = || -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let draws = [draw(), draw(), draw(), draw()];
        BathRealization {
            modes: self.modes.clone(),
            amp_minus: self.amp_minus.clone(),
            amp_rest: self.amp_rest.clone(),
            amp_y: self.amp_y.clone(),
            draws,
        }
    }
}

/// Convenience wrapper: discretize and draw in one call.
pub fn synthesize_bath(pair: &SpectrumPair, n_modes: usize, seed: u64) -> Result<BathRealization> {
    Ok(BathModes::new(pair, n_modes)?.realize(seed))
}

impl BathRealization {
    /// Per-mode draws `(a_p, b_p, c_p, d_p)`.
    pub fn draws(&self) -> &[Vec<f64>; 4] {
        &self.draws
    }

    /// `(x̂(t), ŷ(t))` summed over all modes.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let [a, b, c, d] = &self.draws;
        let mut x = 0.0;
        let mut y = 0.0;
        for k in 0..self.modes.len() {
            let (s, co) = (self.modes[k] * t).sin_cos();
            x += self.amp_minus[k] * (a[k] * co + b[k] * s)
                + self.amp_rest[k] * (c[k] * co + d[k] * s);
            y += self.amp_y[k] * (b[k] * co - a[k] * s);
        }
        (x, y)
    }
}

/// Monte-Carlo estimate of `C⁺(τ)` and `Im C⁻(τ)` with standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BathCorrelation {
    pub tau: f64,
    pub plus: f64,
    pub plus_se: f64,
    pub minus_im: f64,
    pub minus_se: f64,
}

/// Ensemble averages over `n_traj` realizations with seeds `seed..seed+n_traj`:
/// `C⁺(τ) = 2⟨x̂(τ)x̂(0) + ŷ(τ)ŷ(0)⟩` and
/// `Im C⁻(τ) = 2⟨x̂(τ)ŷ(0) − ŷ(τ)x̂(0)⟩`.
pub fn bath_correlations(
    modes: &BathModes,
    n_traj: usize,
    seed: u64,
    taus: &[f64],
) -> Vec<BathCorrelation> {
    let samples: Vec<Vec<(f64, f64)>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let r = modes.realize(seed.wrapping_add(i as u64));
            let (x0, y0) = r.eval(0.0);
            taus.iter()
                .map(|&t| {
                    let (x, y) = r.eval(t);
                    (2.0 * (x * x0 + y * y0), 2.0 * (x * y0 - y * x0))
                })
                .collect()
        })
        .collect();
    let n = n_traj as f64;
    taus.iter()
        .enumerate()
        .map(|(j, &tau)| {
            let stats = |f: &dyn Fn(&(f64, f64)) -> f64| {
                let mean = samples.iter().map(|s| f(&s[j])).sum::<f64>() / n;
                let var = samples
                    .iter()
                    .map(|s| (f(&s[j]) - mean).powi(2))
                    .sum::<f64>()
                    / (n - 1.0);
                (mean, (var / n).sqrt())
            };
            let (plus, plus_se) = stats(&|v| v.0);
            let (minus_im, minus_se) = stats(&|v| v.1);
            BathCorrelation {
                tau,
                plus,
                plus_se,
                minus_im,
                minus_se,
            }
        })
        .collect()
}
