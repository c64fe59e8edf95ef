#![allow(dead_code)]

use qnspec::control::Constraints;
use qnspec::dynamics::{window_integral, FrequencyBackend, Kind};
use qnspec::reconstruction::{SamplingPlan, TimeTraceSet};
use qnspec::spectra::{Bump, DcTerm, Parity, SpectrumModel, SpectrumPair};

pub fn cons() -> Constraints {
    Constraints::new(0.5e-6, 0.5e-6).unwrap()
}

/// A single Lorentzian `b/(1 + ((ω − ω0)/width)²)` cut off at `cutoff`.
pub fn lorentzian(parity: Parity, b: f64, omega0: f64, width: f64, cutoff: f64) -> SpectrumModel {
    SpectrumModel {
        parity,
        dc: DcTerm { a1: 0.0, a2: 0.0 },
        bumps: vec![Bump {
            b,
            c: 1.0 / (width * width),
            omega0,
        }],
        white_floor: None,
        modulation: None,
        cutoff,
    }
}

/// Traces of `plan` evaluated directly in the frequency domain.
pub fn exact_traces(
    plan: &SamplingPlan,
    pair: &SpectrumPair,
    c: &Constraints,
    kind: Kind,
) -> TimeTraceSet {
    let y = plan.late_pattern(c).unwrap();
    let yp = plan.early_pattern(c).unwrap();
    let fb = FrequencyBackend::new(pair);
    let val = |a: &_, b: &_, t2: f64| window_integral(&fb, a, b, t2, kind).unwrap().value;
    let ab: Vec<f64> = (0..=plan.k)
        .map(|k| val(&y, &yp, k as f64 * plan.ts))
        .collect();
    if !plan.exchanged() {
        return TimeTraceSet::from_values(plan, kind, &ab, None);
    }
    let ba: Vec<f64> = (0..=plan.k)
        .map(|k| val(&yp, &y, k as f64 * plan.ts))
        .collect();
    let re: Vec<f64> = ab.iter().zip(&ba).map(|(a, b)| 0.5 * (a + b)).collect();
    let im: Vec<f64> = ab
        .iter()
        .zip(&ba)
        .map(|(a, b)| match kind {
            Kind::Plus => 0.5 * (b - a),
            Kind::Minus => 0.5 * (a - b),
        })
        .collect();
    TimeTraceSet::from_values(plan, kind, &re, Some(&im))
}

/// Uniform grid of `n` points on `[a, b]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Frequency grid used for the worked example, rad/s.
pub fn example_grid() -> Vec<f64> {
    let mut g = vec![];
    let mut w = 5.0;
    while w < 1e4 {
        g.push(w);
        w += 10.0;
    }
    while w < 8e4 {
        g.push(w);
        w += 100.0;
    }
    while w < 4.2e5 {
        g.push(w);
        w += 500.0;
    }
    g
}
