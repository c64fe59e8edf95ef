mod common;

use std::f64::consts::PI;

use common::*;
use proptest::prelude::*;
use qnspec::control::{Constraints, Sequence};
use qnspec::dynamics::*;
use qnspec::error::Error;
use qnspec::presets::*;
use qnspec::reconstruction::*;
use qnspec::spectra::*;

fn request(id: &str, t1: f64, sequence: Sequence) -> PlanRequest {
    PlanRequest {
        id: id.into(),
        t1,
        sequence,
        partner: None,
        target: None,
    }
}

fn fixed(ts: f64, k: usize) -> PlanOptions {
    PlanOptions {
        ts: Some(ts),
        k: Some(k),
        ..Default::default()
    }
}

/// Hahn window of 100 μs with a default plan and `K` stretched to `span`.
fn hahn_plan(span: f64) -> SamplingPlan {
    let c = cons();
    let auto = plan_sampling(
        &request("hahn", 100e-6, Sequence::Hahn),
        &c,
        &PlanOptions::default(),
    )
    .unwrap();
    let k = (span / auto.ts).ceil() as usize;
    plan_sampling(
        &request("hahn", 100e-6, Sequence::Hahn),
        &c,
        &fixed(auto.ts, k),
    )
    .unwrap()
}

fn interior(plan: &SamplingPlan, n: usize) -> Vec<f64> {
    let (a, b) = plan.mfs;
    let pad = 0.1 * (b - a);
    linspace(a + pad, b - pad, n)
}

fn max_rel_error(est: &SpectrumEstimate, s: &SpectrumModel) -> f64 {
    est.omega
        .iter()
        .zip(&est.value)
        .map(|(&w, v)| (v.unwrap() - s.eval(w)).abs() / s.eval(w).abs())
        .fold(0.0, f64::max)
}

#[test]
fn example_free_window_plan_is_legal() {
    let c = example_constraints();
    let p = plan_sampling(
        &request("free", 120e-6, Sequence::Free),
        &c,
        &fixed(80e-6, 250),
    )
    .unwrap();
    assert!(p.dc);
    assert!(p.ts < p.sampling_bound());
    assert!(p.check().is_ok());
}

#[test]
fn example_short_hahn_plan_is_valid() {
    let c = example_constraints();
    let p = plan_sampling(
        &request("hahn", 19e-6, Sequence::Hahn),
        &c,
        &fixed(19e-6 / 5.0, 30),
    )
    .unwrap();
    assert!(!p.dc);
    assert!(p.check().is_ok());
}

#[test]
fn hahn_cannot_target_dc() {
    let mut req = request("hahn", 100e-6, Sequence::Hahn);
    req.target = Some((0.0, 2e4));
    assert!(matches!(
        plan_sampling(&req, &cons(), &PlanOptions::default()),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn undersampled_fixed_plan_is_rejected() {
    let c = cons();
    let auto = plan_sampling(
        &request("h", 100e-6, Sequence::Hahn),
        &c,
        &PlanOptions::default(),
    )
    .unwrap();
    let bad = fixed(2.0 * auto.sampling_bound(), 100);
    assert!(matches!(
        plan_sampling(&request("h", 100e-6, Sequence::Hahn), &c, &bad),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn example_region_settings() {
    // Margins below γ are kept and flagged.
    let c = example_constraints();
    for r in c_regions().iter().chain(q_regions().iter()) {
        let p = r.plan(&c, Shots::Infinite).unwrap();
        assert!(p.ts < p.sampling_bound(), "{}", r.id);
        let flagged = ["q-hahn-50us", "q-hahn-18us", "c-hahn-19us"].contains(&r.id.as_str());
        assert_eq!(p.below_margin(), flagged, "{} margin {}", r.id, p.margin);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_obey_sampling_rules(
        steps in 20u32..800,
        seq in prop::sample::select(vec![Sequence::Free, Sequence::Hahn, Sequence::Cpmg(1), Sequence::Cpmg(2)]),
        ts_frac in prop::option::of(0.05..1.5f64),
        k in prop::option::of(1usize..400),
    ) {
        let c = cons();
        let t1 = steps as f64 * c.resolution;
        let opts = PlanOptions { ts: ts_frac.map(|f| f * t1), k, ..Default::default() };
        match plan_sampling(&request("p", t1, seq), &c, &opts) {
            Ok(p) => {
                prop_assert!(p.ts < p.sampling_bound());
                prop_assert!(c.on_grid(p.ts));
                prop_assert!(p.dc || p.margin >= 1.0);
                if k.is_none() && !p.dc {
                    prop_assert!(p.margin >= p.gamma * (1.0 - 1e-9));
                }
                if k.is_none() && p.dc {
                    prop_assert!(p.resolution() <= p.mfs.1 / (10.0 * p.gamma) * (1.0 + 1e-9));
                }
                prop_assert_eq!(p.below_margin(), !p.dc && p.margin < p.gamma);
            }
            Err(e) => prop_assert!(matches!(e, Error::Infeasible(_) | Error::EmptySupport)),
        }
    }
}

#[test]
fn zero_spectrum_gives_zero_traces() {
    let c = cons();
    let pair = SpectrumPair::new(
        SpectrumModel::zero(Parity::Symmetric, 1e6),
        SpectrumModel::zero(Parity::Antisymmetric, 1e6),
    )
    .unwrap();
    let fb = FrequencyBackend::new(&pair);
    let plan = plan_sampling(&request("h", 20e-6, Sequence::Hahn), &c, &fixed(4e-6, 12)).unwrap();
    let p = Pipeline {
        backend: &fb,
        constraints: c,
        route: Route::Direct,
        seed: 1,
        s_plus_hat: None,
        w_max: 1e6,
        interpolate_dropouts: true,
    };
    let zero = |_: f64| 0.0;
    for kind in [Kind::Plus, Kind::Minus] {
        let p = Pipeline {
            s_plus_hat: Some(&zero),
            ..p
        };
        let t = collect_traces(&plan, &p, kind).unwrap();
        assert!(
            t.re.points.iter().all(|x| x.value.abs() < 1e-15),
            "{kind:?}"
        );
    }
}

#[test]
fn example_traces_match_frequency_domain() {
    let c = example_constraints();
    let pair = example_pair();
    let regions = c_regions();
    let lag = regions
        .iter()
        .map(|r| r.ts_snapped(&c) * r.k as f64 + 2.0 * r.t1)
        .fold(0.0, f64::max);
    let table = CorrelationTable::build(&pair, lag, CorrelationTable::default_step(&pair)).unwrap();
    let tb = TimeBackend::new(&table);
    let p = Pipeline {
        backend: &tb,
        constraints: c,
        route: Route::Direct,
        seed: 1,
        s_plus_hat: None,
        w_max: 2.0 * CUTOFF,
        interpolate_dropouts: false,
    };
    for r in &regions {
        let plan = r.plan(&c, Shots::Infinite).unwrap();
        let traces = collect_traces(&plan, &p, Kind::Plus).unwrap();
        let y = plan.late_pattern(&c).unwrap();
        let scale = traces
            .re
            .points
            .iter()
            .fold(0.0f64, |m, x| m.max(x.value.abs()));
        for k in (0..=plan.k).step_by((plan.k / 6).max(1)) {
            let t2 = k as f64 * plan.ts;
            let oracle = if t2 >= plan.t1 {
                integral_freq_domain(&y, &y, t2, &pair, Kind::Plus)
                    .unwrap()
                    .value
            } else {
                // Overlapping windows: one direct lag integral of the whole domain.
                window_integral(&tb, &y, &y, t2, Kind::Plus).unwrap().value
            };
            let got = traces.re.points[k].value;
            assert!(
                (got - oracle).abs() < 1e-6 * scale,
                "{} k={k}: {got} {oracle}",
                r.id
            );
        }
    }
}

#[test]
fn single_tone_concentrates_at_its_frequency() {
    let plan = hahn_plan(2e-3);
    let w0 = 4e4;
    let vals: Vec<f64> = (0..=plan.k)
        .map(|k| (w0 * k as f64 * plan.ts).cos())
        .collect();
    let t = TimeTraceSet::from_values(&plan, Kind::Plus, &vals, None);
    let grid = linspace(1e4, 7e4, 601);
    let mags: Vec<f64> = grid
        .iter()
        .map(|&w| trace_dtft(&t.re, plan.ts, w).0.abs())
        .collect();
    let imax = (0..grid.len())
        .max_by(|&a, &b| mags[a].partial_cmp(&mags[b]).unwrap())
        .unwrap();
    assert!((grid[imax] - w0).abs() <= 100.0 + 1e-9, "{}", grid[imax]);
    // Half the tone sits at −w0, so the peak is (2K+1)Ts/2.
    let peak = 0.5 * (2 * plan.k + 1) as f64 * plan.ts;
    assert!(
        (mags[imax] - peak).abs() < 0.02 * peak,
        "{} {peak}",
        mags[imax]
    );
    let far = grid
        .iter()
        .zip(&mags)
        .filter(|(w, _)| (**w - w0).abs() > 10.0 * plan.resolution())
        .fold(0.0f64, |m, (_, v)| m.max(*v));
    assert!(far < 0.05 * mags[imax]);
}

fn round_trip_setup() -> (SamplingPlan, SpectrumModel) {
    let plan = hahn_plan(2e-3);
    let center = 0.5 * (plan.mfs.0 + plan.mfs.1);
    (
        plan.clone(),
        lorentzian(Parity::Symmetric, 1e3, center, 1e4, plan.omega_c),
    )
}

#[test]
fn round_trip_recovers_smooth_spectrum() {
    let c = cons();
    let (plan, s) = round_trip_setup();
    let pair = SpectrumPair::classical(s.clone());
    let traces = exact_traces(&plan, &pair, &c, Kind::Plus);
    let est = dtft_reconstruct(&traces, &plan, &c, &interior(&plan, 80)).unwrap();
    assert_eq!(est.reported(), 80);
    let err = max_rel_error(&est, &s);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn minus_round_trip_and_odd_symmetry() {
    let c = cons();
    let plan = hahn_plan(2e-3);
    let center = 0.5 * (plan.mfs.0 + plan.mfs.1);
    let q = lorentzian(Parity::Antisymmetric, 5e2, center, 1e4, plan.omega_c);
    let pair = SpectrumPair::new(
        lorentzian(Parity::Symmetric, 1e3, center, 1e4, plan.omega_c),
        q.clone(),
    )
    .unwrap();
    let traces = exact_traces(&plan, &pair, &c, Kind::Minus);
    assert_eq!(traces.re.extension, Extension::Odd);
    let grid = interior(&plan, 40);
    let est = dtft_reconstruct(&traces, &plan, &c, &grid).unwrap();
    assert!(max_rel_error(&est, &q) < 1e-3);
    let neg: Vec<f64> = grid.iter().map(|w| -w).collect();
    let mirrored = dtft_reconstruct(&traces, &plan, &c, &neg).unwrap();
    for (a, b) in est.value.iter().zip(&mirrored.value) {
        assert_eq!(a.unwrap(), -b.unwrap());
    }
    assert_eq!(est.interpolate(-grid[7]), -est.interpolate(grid[7]));
}

/// Median relative error over the central 80% of the support for traces
/// sampled every `ts` over the same span.
fn aliasing_error(plan: &SamplingPlan, ts: f64, s: &SpectrumModel) -> f64 {
    let c = cons();
    let k = ((plan.k as f64 * plan.ts) / ts).round() as usize;
    let p = SamplingPlan {
        ts,
        k,
        ..plan.clone()
    };
    let pair = SpectrumPair::classical(s.clone());
    let traces = exact_traces(&p, &pair, &c, Kind::Plus);
    let est = dtft_reconstruct(&traces, &p, &c, &interior(&p, 60)).unwrap();
    let pts = scored_points(&est, p.mfs, 0.8, f64::INFINITY, &[]);
    median_relative_error(&est, &|w| s.eval(w), &pts).unwrap()
}

#[test]
fn violating_sampling_rule_aliases() {
    let c = cons();
    let plan = hahn_plan(1e-3);
    let s = lorentzian(
        Parity::Symmetric,
        1e3,
        0.5 * (plan.mfs.0 + plan.mfs.1),
        5e4,
        4.0 * plan.mfs.1,
    );
    let good = aliasing_error(&plan, plan.ts, &s);
    let bad = aliasing_error(&plan, c.snap(2.0 * plan.sampling_bound()), &s);
    assert!(bad >= 10.0 * good, "{good} {bad}");
}

#[test]
fn error_bound_dominates_round_trip_error() {
    let c = cons();
    let (plan, s) = round_trip_setup();
    let pair = SpectrumPair::classical(s.clone());
    let traces = exact_traces(&plan, &pair, &c, Kind::Plus);
    let mut est = dtft_reconstruct(&traces, &plan, &c, &interior(&plan, 40)).unwrap();
    let eb = error_bounds(&plan, &traces, &mut est, &c, &|w| s.eval(w), s.cutoff).unwrap();
    for (i, &w) in est.omega.iter().enumerate() {
        let err = (est.value[i].unwrap() - s.eval(w)).abs();
        assert!(
            err <= est.bound[i] * (1.0 + 1e-9) + 1e-12 * s.eval(w),
            "{w}: {err} > {}",
            est.bound[i]
        );
        assert!(est.bound[i] < 1e-3 * s.eval(w));
        assert_eq!(eb.trace[i], 0.0);
        assert_eq!(eb.aliasing[i], 0.0);
    }
}

#[test]
fn shot_term_scales_with_inverse_root_budget() {
    let c = cons();
    let plan = hahn_plan(5e-4);
    let center = 0.5 * (plan.mfs.0 + plan.mfs.1);
    let s = lorentzian(Parity::Symmetric, 1e3, center, 1e4, plan.omega_c);
    let pair = SpectrumPair::classical(s.clone());
    let fb = FrequencyBackend::new(&pair);
    let p = Pipeline {
        backend: &fb,
        constraints: c,
        route: Route::Direct,
        seed: 9,
        s_plus_hat: None,
        w_max: plan.omega_c,
        interpolate_dropouts: true,
    };
    let grid = interior(&plan, 10);
    let term = |m: u64| {
        let pl = SamplingPlan {
            shots: Shots::Finite(m),
            ..plan.clone()
        };
        let traces = collect_traces(&pl, &p, Kind::Plus).unwrap();
        let mut est = dtft_reconstruct(&traces, &pl, &c, &grid).unwrap();
        error_bounds(&pl, &traces, &mut est, &c, &|w| s.eval(w), s.cutoff)
            .unwrap()
            .trace
    };
    let (lo, hi) = (term(10_000), term(1_000_000));
    for (a, b) in lo.iter().zip(&hi) {
        let ratio = a / b;
        assert!((5.0..20.0).contains(&ratio), "{ratio}");
    }
}

#[test]
fn halving_k_grows_truncation_error() {
    let c = cons();
    let long = hahn_plan(1.2e-3);
    let center = 0.5 * (long.mfs.0 + long.mfs.1);
    let s = lorentzian(Parity::Symmetric, 1e3, center, 1.5e3, long.omega_c);
    let pair = SpectrumPair::classical(s.clone());
    let short = SamplingPlan {
        k: long.k / 2,
        ..long.clone()
    };
    let run = |plan: &SamplingPlan| {
        let traces = exact_traces(plan, &pair, &c, Kind::Plus);
        let mut est = dtft_reconstruct(&traces, plan, &c, &[center]).unwrap();
        let eb = error_bounds(plan, &traces, &mut est, &c, &|w| s.eval(w), s.cutoff).unwrap();
        (
            eb.finite_k[0],
            (est.value[0].unwrap() - s.eval(center)).abs(),
        )
    };
    let (fk_long, err_long) = run(&long);
    let (fk_short, err_short) = run(&short);
    assert!(fk_short > fk_long);
    assert!(err_short > err_long);
    // The peak is flattened, not sharpened.
    let traces = exact_traces(&short, &pair, &c, Kind::Plus);
    let est = dtft_reconstruct(&traces, &short, &c, &[center]).unwrap();
    assert!(est.value[0].unwrap() < s.eval(center));
}

#[test]
fn masked_where_divisor_vanishes() {
    let c = cons();
    let plan = hahn_plan(5e-4);
    let vals = vec![1.0; plan.k + 1];
    let t = TimeTraceSet::from_values(&plan, Kind::Plus, &vals, None);
    let grid = linspace(0.0, 3.0 * plan.mfs.1, 400);
    let est = dtft_reconstruct(&t, &plan, &c, &grid).unwrap();
    assert_eq!(est.value[0], None);
    let fp = plan.filters(&c).unwrap();
    let dmax = grid.iter().map(|&w| fp.z(w).re.abs()).fold(0.0, f64::max);
    for (i, &w) in grid.iter().enumerate() {
        if est.value[i].is_some() {
            assert!(fp.z(w).re.abs() >= MASK_FLOOR * dmax * (1.0 - 1e-9));
        }
    }
}

fn synthetic(plan: &str, omega: &[f64], band: (f64, f64), value: f64) -> SpectrumEstimate {
    SpectrumEstimate {
        kind: Kind::Plus,
        omega: omega.to_vec(),
        value: omega.iter().map(|_| Some(value)).collect(),
        variance: vec![0.0; omega.len()],
        bound: vec![0.0; omega.len()],
        mfs: omega.iter().map(|&w| w >= band.0 && w <= band.1).collect(),
        plan: vec![plan.into(); omega.len()],
    }
}

#[test]
fn stitch_duplicates_and_gaps() {
    let omega = linspace(0.0, 10.0, 11);
    let a = synthetic("a", &omega, (2.0, 4.0), 3.0);
    let st = stitch_regions(&[a.clone(), a.clone()], None).unwrap();
    for i in 0..omega.len() {
        if a.mfs[i] {
            assert_eq!(st.estimate.value[i], a.value[i]);
        } else {
            assert_eq!(st.estimate.value[i], None);
        }
    }
    assert!(st.gaps.is_empty());
    let b = synthetic("b", &omega, (7.0, 9.0), 5.0);
    let st = stitch_regions(&[a, b], None).unwrap();
    assert_eq!(st.gaps, vec![(4.0, 7.0)]);
    assert_eq!(st.estimate.value[3], Some(3.0));
    assert_eq!(st.estimate.value[8], Some(5.0));
    assert_eq!(st.estimate.plan[8], "b");
}

#[test]
fn cpmg_pair_covers_band() {
    let c = Constraints::new(1e-6, 1e-6).unwrap();
    let omega = linspace(1e4, 1.2e5, 1101);
    let s = lorentzian(Parity::Symmetric, 1e3, 6e4, 4e4, 4e5);
    let pair = SpectrumPair::classical(s);
    let ests: Vec<SpectrumEstimate> = CPMG_PAIR_T1
        .iter()
        .map(|&t1| {
            let plan = plan_sampling(
                &request("cpmg", t1, Sequence::Cpmg(1)),
                &c,
                &PlanOptions::default(),
            )
            .unwrap();
            let traces = exact_traces(&plan, &pair, &c, Kind::Plus);
            dtft_reconstruct(&traces, &plan, &c, &omega).unwrap()
        })
        .collect();
    let st = stitch_regions(&ests, Some((2.6e4, 9.7e4))).unwrap();
    assert!(st.gaps.is_empty(), "{:?}", st.gaps);
}

#[test]
fn q_algebra_route_matches_direct_route() {
    let c = example_constraints();
    let pair = example_pair();
    let table =
        CorrelationTable::build(&pair, 4e-4, CorrelationTable::default_step(&pair)).unwrap();
    let tb = TimeBackend::new(&table);
    let plan = plan_sampling(&request("h", 50e-6, Sequence::Hahn), &c, &fixed(10e-6, 12)).unwrap();
    let s_hat = |w: f64| pair.c.eval(w);
    let p = Pipeline {
        backend: &tb,
        constraints: c,
        route: Route::Direct,
        seed: 1,
        s_plus_hat: Some(&s_hat),
        w_max: 2.0 * CUTOFF,
        interpolate_dropouts: false,
    };
    let q = Pipeline {
        route: Route::QAlgebra,
        ..p
    };
    for kind in [Kind::Plus, Kind::Minus] {
        let a = collect_traces(&plan, &p, kind).unwrap();
        let b = collect_traces(&plan, &q, kind).unwrap();
        let scale = a.re.points.iter().fold(0.0f64, |m, x| m.max(x.value.abs()));
        for (x, y) in a.re.points.iter().zip(&b.re.points) {
            assert!(
                (x.value - y.value).abs() < 1e-8 * scale,
                "{kind:?} {} {}",
                x.value,
                y.value
            );
        }
    }
}

#[test]
fn plans_round_trip_through_json() {
    let plan = hahn_plan(5e-4);
    let text = serde_json::to_string(&plan).unwrap();
    let back: SamplingPlan = serde_json::from_str(&text).unwrap();
    assert_eq!(back, plan);
    assert!((plan.resolution() - 2.0 * PI / (plan.ts * (2 * plan.k + 1) as f64)).abs() < 1e-9);
}
