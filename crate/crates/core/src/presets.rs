//! The worked example: a 1/f-like classical spectrum with three bumps and a
//! white floor, a quantum spectrum with three bumps and a high-frequency
//! modulation, and the sampling settings used to reconstruct both.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::control::{Constraints, Sequence};
use crate::dynamics::Shots;
use crate::error::Result;
use crate::reconstruction::{plan_sampling, PlanOptions, PlanRequest, SamplingPlan};
use crate::spectra::{
    Bump, DcTerm, FloorFormula, Modulation, Parity, SpectrumModel, SpectrumPair, WhiteFloor,
};

const TWO_PI: f64 = 2.0 * PI;

/// Common cutoff of both spectra, rad/s.
pub const CUTOFF: f64 = TWO_PI * 60e3;

/// Start of the white floor on `S⁺`, rad/s.
pub const FLOOR_START: f64 = TWO_PI * 20e3;

/// Start of the modulation on `S⁻`, rad/s.
pub const MODULATION_START: f64 = TWO_PI * 50e3;

/// Bump in the `f = ω/2π` parametrization: `b / (1 + c (f − f0)²)`.
fn bump(b: f64, c: f64, f0: f64) -> Bump {
    Bump {
        b,
        c: c / (TWO_PI * TWO_PI),
        omega0: TWO_PI * f0,
    }
}

fn dc(a1: f64, a2: f64) -> DcTerm {
    DcTerm {
        a1,
        a2: a2 / TWO_PI,
    }
}

/// The classical spectrum, with the floor formula selectable.
pub fn example_c(floor: FloorFormula) -> SpectrumModel {
    SpectrumModel {
        parity: Parity::Symmetric,
        dc: dc(240e3, 0.02),
        bumps: vec![
            bump(7e3, 0.002, 400.0),
            bump(8e3, 200e-6, 1000.0),
            bump(3e3, 33.33e-6, 3500.0),
        ],
        white_floor: Some(WhiteFloor {
            threshold: FLOOR_START,
            formula: floor,
        }),
        modulation: None,
        cutoff: CUTOFF,
    }
}

/// The quantum spectrum; `scale` multiplies every amplitude.
pub fn example_q(scale: f64) -> SpectrumModel {
    SpectrumModel {
        parity: Parity::Antisymmetric,
        dc: dc(125e3 * scale, 0.0125),
        bumps: vec![
            bump(8e3 * scale, 0.04, 390.0),
            bump(650.0 * scale, 156.25e-6, 1600.0),
            bump(600.0 * scale, 123.46e-6, 3000.0),
        ],
        white_floor: None,
        modulation: Some(Modulation {
            threshold: MODULATION_START,
            phase: PI,
            slope: 3.95e-4 / TWO_PI,
        }),
        cutoff: CUTOFF,
    }
}

/// The example pair with the sign-corrected floor.
pub fn example_pair() -> SpectrumPair {
    SpectrumPair {
        c: example_c(FloorFormula::SignCorrected),
        q: example_q(1.0),
    }
}

/// The example pair with `S⁻` scaled by `scale`.
pub fn example_pair_scaled_q(scale: f64) -> SpectrumPair {
    SpectrumPair {
        c: example_c(FloorFormula::SignCorrected),
        q: example_q(scale),
    }
}

/// `δ = Δ = 0.5 μs`.
pub fn example_constraints() -> Constraints {
    Constraints {
        min_separation: 0.5e-6,
        resolution: 0.5e-6,
    }
}

/// One frequency region of the example: window, sampling and shot budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSetting {
    pub id: String,
    pub t1: f64,
    pub sequence: Sequence,
    /// Sampling period before snapping to the δ grid.
    pub ts: f64,
    /// Trace count of the dense runs.
    pub k: usize,
    /// Shots per observable of the large and the small finite budget.
    pub shots_high: u64,
    pub shots_low: u64,
    /// Cap of `ω_c` in units of `ω_b`.
    pub cutoff_multiple: f64,
}

impl RegionSetting {
    /// Trace count of the sparse runs (a third of `k`).
    pub fn k_sparse(&self) -> usize {
        (self.k as f64 / 3.0).round() as usize
    }

    /// `ts` snapped to the δ grid of `c`.
    pub fn ts_snapped(&self, c: &Constraints) -> f64 {
        c.snap(self.ts)
    }

    pub fn request(&self) -> PlanRequest {
        PlanRequest {
            id: self.id.clone(),
            t1: self.t1,
            sequence: self.sequence,
            partner: None,
            target: None,
        }
    }

    /// Options fixing this region's `Ts`, the given `K` and shot budget.
    pub fn options(&self, k: usize, shots: Shots) -> PlanOptions {
        PlanOptions {
            ts: Some(self.ts),
            k: Some(k),
            cutoff_multiple: self.cutoff_multiple,
            shots,
            ..Default::default()
        }
    }

    /// The dense plan with `shots` per observable.
    pub fn plan(&self, c: &Constraints, shots: Shots) -> Result<SamplingPlan> {
        plan_sampling(&self.request(), c, &self.options(self.k, shots))
    }
}

struct Row(&'static str, f64, Sequence, f64, usize, u64, u64, f64);

fn regions(rows: &[Row]) -> Vec<RegionSetting> {
    rows.iter()
        .map(|r| RegionSetting {
            id: r.0.to_string(),
            t1: r.1,
            sequence: r.2,
            ts: r.3 * r.1,
            k: r.4,
            shots_high: r.5,
            shots_low: r.6,
            cutoff_multiple: r.7,
        })
        .collect()
}

/// The five regions used for `S⁺`.
pub fn c_regions() -> Vec<RegionSetting> {
    use Sequence::{Free, Hahn};
    regions(&[
        Row(
            "c-free-120us",
            120e-6,
            Free,
            2.0 / 3.0,
            250,
            1_000_000,
            10_000,
            4.0,
        ),
        Row(
            "c-hahn-350us",
            350e-6,
            Hahn,
            4.0 / 15.0,
            80,
            100_000,
            10_000,
            4.0,
        ),
        Row(
            "c-hahn-130us",
            130e-6,
            Hahn,
            4.0 / 15.0,
            120,
            1_000_000,
            100_000,
            4.0,
        ),
        Row(
            "c-hahn-50us",
            50e-6,
            Hahn,
            0.2,
            50,
            10_000_000,
            1_000_000,
            4.0,
        ),
        Row(
            "c-hahn-19us",
            19e-6,
            Hahn,
            0.2,
            30,
            10_000_000,
            1_000_000,
            4.0,
        ),
    ])
}

/// The five regions used for `S⁻`.
pub fn q_regions() -> Vec<RegionSetting> {
    use Sequence::{Free, Hahn};
    regions(&[
        Row(
            "q-free-180us",
            180e-6,
            Free,
            0.8,
            240,
            1_000_000,
            10_000,
            1.75,
        ),
        Row(
            "q-hahn-405us",
            405e-6,
            Hahn,
            0.2,
            140,
            1_000_000,
            100_000,
            4.0,
        ),
        Row(
            "q-hahn-145us",
            145e-6,
            Hahn,
            0.2,
            200,
            10_000_000,
            1_000_000,
            4.0,
        ),
        Row(
            "q-hahn-50us",
            50e-6,
            Hahn,
            0.2,
            18,
            10_000_000,
            1_000_000,
            4.0,
        ),
        Row(
            "q-hahn-18us",
            18e-6,
            Hahn,
            0.2,
            30,
            100_000_000,
            10_000_000,
            4.0,
        ),
    ])
}

/// Window lengths of the two 1-CPMG filters whose supports tile one band.
pub const CPMG_PAIR_T1: [f64; 2] = [1.0e-4, 1.8e-4];

/// Longest lag any example experiment needs, with room for the windows.
pub fn example_max_lag() -> f64 {
    let c = example_constraints();
    c_regions()
        .iter()
        .chain(q_regions().iter())
        .map(|r| r.ts_snapped(&c) * r.k as f64 + 2.0 * r.t1)
        .fold(0.0, f64::max)
}
