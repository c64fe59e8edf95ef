use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use proptest::prelude::*;
use qnspec::control::{from_labels, Constraints, PulseSchedule, Sequence, SwitchingFunction};
use qnspec::dynamics::*;
use qnspec::quad::{uniform_edges, GaussLegendre, Mesh};
use qnspec::spectra::{Bump, CorrelationTable, DcTerm, Parity, SpectrumModel, SpectrumPair};

const TAU_C: f64 = 6e-6;

fn gauss_corr(
    c0: f64,
    q0: f64,
) -> AnalyticCorrelation<impl Fn(f64) -> f64 + Sync, impl Fn(f64) -> f64 + Sync> {
    AnalyticCorrelation {
        plus: move |t: f64| c0 * (-(t / TAU_C).powi(2)).exp(),
        minus_im: move |t: f64| q0 * (t / TAU_C) * (-(t / TAU_C).powi(2)).exp(),
        resolution: 1e-6,
    }
}

/// Tensor Gauss–Legendre over `[a0,a1]×[b0,b1]`, optionally restricted to `t ≥ t′`.
fn double_integral<F: Fn(f64) -> f64>(a0: f64, a1: f64, b0: f64, b1: f64, f: F) -> f64 {
    let gl = GaussLegendre::new(10);
    let ma = Mesh::from_edges(&uniform_edges(a0, a1, 0.5e-6), &gl);
    let mb = Mesh::from_edges(&uniform_edges(b0, b1, 0.5e-6), &gl);
    ma.integrate(|t| mb.integrate(|tp| f(t - tp)))
}

fn rot(theta: f64) -> Matrix2<Complex64> {
    let (s, c) = (0.5 * theta).sin_cos();
    Matrix2::new(c.into(), (-s).into(), s.into(), c.into())
}

/// Lab-frame path sum: π pulses act as explicit rotations, the qubit is
/// projected onto σ_z eigenstates between pulses and the bath enters through
/// the Gaussian influence functional of the two paths.
fn lab_path_sum<C: Correlation>(
    s: &PulseSchedule,
    corr: &C,
    state: InitialState,
    obs: Axis,
) -> Complex64 {
    let mut events: Vec<(f64, f64)> = s
        .boundaries
        .iter()
        .zip(&s.angles)
        .map(|(&t, &a)| (t, a))
        .collect();
    events.extend(s.all_pi_times().into_iter().map(|t| (t, PI)));
    let mut edges: Vec<f64> = events.iter().map(|e| e.0).collect();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let kick = |t: f64| {
        events
            .iter()
            .filter(|e| e.0 == t)
            .fold(Matrix2::identity(), |m, e| rot(e.1) * m)
    };
    let n = edges.len() - 1;
    let mut p = vec![vec![0.0; n]; n];
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = double_integral(edges[i], edges[i + 1], edges[j], edges[j + 1], |x| {
                corr.c_plus(x)
            });
            if i > j {
                m[i][j] = double_integral(edges[i], edges[i + 1], edges[j], edges[j + 1], |x| {
                    corr.c_minus_im(x)
                });
            }
        }
    }
    let proj = |s: i8| -> Matrix2<Complex64> {
        if s > 0 {
            Matrix2::new(1.0.into(), 0.0.into(), 0.0.into(), 0.0.into())
        } else {
            Matrix2::new(0.0.into(), 0.0.into(), 0.0.into(), 1.0.into())
        }
    };
    let paths: Vec<Vec<i8>> = (0..1u32 << n)
        .map(|b| {
            (0..n)
                .map(|k| if (b >> k) & 1 == 1 { -1 } else { 1 })
                .collect()
        })
        .collect();
    let amps: Vec<Matrix2<Complex64>> = paths
        .iter()
        .map(|sp| {
            let mut u = kick(edges[0]);
            for k in 0..n {
                u = kick(edges[k + 1]) * proj(sp[k]) * u;
            }
            u
        })
        .collect();
    let rho = state.matrix();
    let o = obs.pauli();
    let mut total = Complex64::new(0.0, 0.0);
    for (a, ua) in paths.iter().zip(&amps) {
        for (b, ub) in paths.iter().zip(&amps) {
            let aa: Vec<f64> = (0..n).map(|k| (a[k] - b[k]) as f64 / 2.0).collect();
            let ap: Vec<f64> = (0..n).map(|k| (a[k] + b[k]) as f64 / 2.0).collect();
            let mut ex = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    ex -= aa[i] * aa[j] * p[i][j];
                    if i > j {
                        ex -= Complex64::new(0.0, 2.0) * aa[i] * ap[j] * m[i][j];
                    }
                }
            }
            total += (o * ua * rho * ub.adjoint()).trace() * ex.exp();
        }
    }
    total
}

fn axis(i: u8) -> Axis {
    [Axis::X, Axis::Y, Axis::Z][i as usize % 3]
}

fn schedule_strategy() -> impl Strategy<Value = PulseSchedule> {
    (1usize..=3)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(4u32..=12, n),
                prop::collection::vec(-PI..PI, n + 1),
                prop::collection::vec(prop::collection::vec(0.05f64..0.95, 0..=1), n),
            )
        })
        .prop_map(|(lens, angles, fracs)| {
            let mut b = vec![0.0];
            for l in &lens {
                b.push(b.last().unwrap() + *l as f64 * 1e-6);
            }
            let pis: Vec<Vec<f64>> = fracs
                .iter()
                .enumerate()
                .map(|(k, f)| {
                    f.iter()
                        .map(|x| b[k] + ((x * lens[k] as f64).round().max(1.0)) * 1e-6)
                        .collect()
                })
                .map(|mut v: Vec<f64>| {
                    v.sort_by(|a, c| a.partial_cmp(c).unwrap());
                    v.dedup();
                    v
                })
                .collect();
            let pis = pis
                .into_iter()
                .enumerate()
                .map(|(k, v)| v.into_iter().filter(|&t| t < b[k + 1]).collect())
                .collect();
            PulseSchedule::new(b, angles, pis, Constraints::new(1e-7, 1e-6).unwrap()).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn engine_matches_lab_frame_path_sum(s in schedule_strategy(), st in 0u8..3, sg in prop::bool::ANY, ob in 0u8..3) {
        let corr = gauss_corr(2.0e9, 1.1e9);
        let state = InitialState { axis: axis(st), sign: if sg { 1 } else { -1 } };
        let cfg = ExperimentConfig { state, observable: axis(ob), schedule: s.clone() };
        let e = expectation(&cfg, &TimeBackend::new(&corr)).unwrap();
        let oracle = lab_path_sum(&s, &corr, state, axis(ob));
        prop_assert!(oracle.im.abs() < 1e-10);
        prop_assert!((e - oracle.re).abs() < 1e-8, "engine {} oracle {}", e, oracle.re);
    }

    #[test]
    fn effective_label_identities(a1 in prop::sample::select(vec![-1i8, 1]), a2 in prop::sample::select(vec![-1i8, 1]),
                                  a3 in prop::sample::select(vec![-1i8, 1]), t in 10u32..30) {
        let corr = gauss_corr(1.0e9, 0.8e9);
        let s = three_window(t as f64 * 1e-6, 1.7 * t as f64 * 1e-6, Sequence::Hahn, Sequence::Cpmg(1));
        let im = |a: [i8; 3], ap: [i8; 3]| {
            let es = from_labels(&s, &a, &ap);
            let ym = FilterFunction_of(&es.breakpoints, &es.y_minus);
            let yp = FilterFunction_of(&es.breakpoints, &es.y_plus);
            integral_time_domain(&ym, &yp, &corr, Kind::Minus).value
        };
        let ip = |a: [i8; 3]| {
            let es = from_labels(&s, &a, &[0, 0, 0]);
            let ym = FilterFunction_of(&es.breakpoints, &es.y_minus);
            integral_time_domain(&ym, &ym, &corr, Kind::Plus).value
        };
        let tol = 1e-10;
        prop_assert!((im([a1, 0, a3], [0, a2, 0]) - im([0, 0, a3], [0, a2, 0])).abs() < tol);
        prop_assert!(im([a1, a2, 0], [0, 0, a3]).abs() < tol);
        let base = im([0, a2, a3], [a1, 0, 0]);
        prop_assert!((im([0, a2, a3], [-a1, 0, 0]) + base).abs() < tol);
        prop_assert!((im([0, -a2, -a3], [a1, 0, 0]) + base).abs() < tol);
        prop_assert!((im([0, -a2, -a3], [-a1, 0, 0]) - base).abs() < tol);
        prop_assert!((ip([a1, a2, a3]) - ip([-a1, -a2, -a3])).abs() < tol * ip([a1, a2, a3]).abs().max(1.0));
    }
}

#[allow(non_snake_case)]
fn FilterFunction_of(bp: &[f64], signs: &[i8]) -> qnspec::control::FilterFunction {
    qnspec::control::FilterFunction {
        breakpoints: bp.to_vec(),
        signs: signs.to_vec(),
    }
}

fn three_window(t1: f64, t2: f64, late: Sequence, early: Sequence) -> PulseSchedule {
    let c = Constraints::new(1e-7, 1e-7).unwrap();
    let e: Vec<f64> = early.pulses(t1, &c).unwrap();
    let l: Vec<f64> = late
        .pulses(t1, &c)
        .unwrap()
        .into_iter()
        .map(|x| x + t2)
        .collect();
    PulseSchedule::new(
        vec![0.0, t1, t2, t2 + t1],
        vec![0.0; 4],
        vec![e, vec![], l],
        c,
    )
    .unwrap()
}

fn random_pair(seed: u64) -> SpectrumPair {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let wc = 2.0 * PI * 60e3;
    let c = SpectrumModel {
        parity: Parity::Symmetric,
        dc: DcTerm {
            a1: rng.random_range(5e3..2e4),
            a2: rng.random_range(1e-4..1e-3),
        },
        bumps: vec![Bump {
            b: rng.random_range(1e3..5e3),
            c: rng.random_range(1e-8..1e-7),
            omega0: rng.random_range(2e4..2e5),
        }],
        white_floor: None,
        modulation: None,
        cutoff: wc,
    };
    let q = SpectrumModel {
        parity: Parity::Antisymmetric,
        dc: DcTerm {
            a1: rng.random_range(1e3..4e3),
            a2: rng.random_range(1e-4..1e-3),
        },
        bumps: vec![Bump {
            b: rng.random_range(1e2..8e2),
            c: rng.random_range(1e-8..1e-7),
            omega0: rng.random_range(2e4..2e5),
        }],
        white_floor: None,
        modulation: None,
        cutoff: wc,
    };
    SpectrumPair::new(c, q).unwrap()
}

const ALL_FORMS: [ClosedForm; 16] = [
    ClosedForm::PiOnly { k1: 0, k2: 0 },
    ClosedForm::PiOnly { k1: 1, k2: 0 },
    ClosedForm::PiOnly { k1: 0, k2: 1 },
    ClosedForm::PiOnly { k1: 1, k2: 1 },
    ClosedForm::LastWindow,
    ClosedForm::ComboA,
    ClosedForm::ComboB,
    ClosedForm::ComboRatio,
    ClosedForm::PhaseX { k1: 0 },
    ClosedForm::PhaseX { k1: 1 },
    ClosedForm::PhaseY { k1: 0 },
    ClosedForm::PhaseY { k1: 1 },
    ClosedForm::ProductSin,
    ClosedForm::ProductCos,
    ClosedForm::TwoInterval { k1: 0 },
    ClosedForm::TwoInterval { k1: 1 },
];

#[test]
fn closed_forms_match_engine() {
    let seqs = [
        Sequence::Free,
        Sequence::Hahn,
        Sequence::Cpmg(1),
        Sequence::Cpmg(2),
    ];
    for seed in 0..5u64 {
        let pair = random_pair(seed);
        let table =
            CorrelationTable::build(&pair, 1e-3, CorrelationTable::default_step(&pair)).unwrap();
        let b = TimeBackend::new(&table);
        for (i, &late) in seqs.iter().enumerate() {
            let t1 = 40e-6 + 20e-6 * i as f64;
            let s = three_window(t1, 2.5 * t1, late, seqs[(i + seed as usize) % 4]);
            let ii = IntervalIntegrals::compute(&s, &b).unwrap();
            for f in ALL_FORMS
                .iter()
                .filter(|f| !matches!(f, ClosedForm::TwoInterval { .. }))
            {
                let lhs = f.measure(&ii, s.pi_count()).unwrap();
                let rhs = f.evaluate(&ii).unwrap();
                assert!(
                    (lhs - rhs).abs() < 1e-8,
                    "{f:?} seed {seed}: {lhs} vs {rhs}"
                );
            }
            let two = PulseSchedule::new(
                vec![0.0, t1, 2.0 * t1],
                vec![0.0; 3],
                vec![
                    s.pi_pulses[0].clone(),
                    s.pi_pulses[2].iter().map(|t| t - 1.5 * t1).collect(),
                ],
                s.constraints,
            )
            .unwrap();
            let ii2 = IntervalIntegrals::compute(&two, &b).unwrap();
            for k1 in 0..2 {
                let f = ClosedForm::TwoInterval { k1 };
                assert!(
                    (f.measure(&ii2, two.pi_count()).unwrap() - f.evaluate(&ii2).unwrap()).abs()
                        < 1e-8
                );
            }
            // Stationarity: the last window alone reproduces A⁺_(0,0,1).
            let last = PulseSchedule::new(
                vec![0.0, t1],
                vec![0.0; 2],
                vec![s.pi_pulses[2].iter().map(|t| t - 2.5 * t1).collect()],
                s.constraints,
            )
            .unwrap();
            let cfg = ExperimentConfig {
                state: InitialState::plus(Axis::Y),
                observable: Axis::Y,
                schedule: last,
            };
            let e = expectation(&cfg, &b).unwrap();
            let rhs = ClosedForm::LastWindow.evaluate(&ii).unwrap();
            assert!((e - rhs).abs() < 1e-8, "stationarity {e} vs {rhs}");
        }
    }
}

#[test]
fn pi_only_template_matches_spec_example() {
    let pair = random_pair(11);
    let table =
        CorrelationTable::build(&pair, 6e-4, CorrelationTable::default_step(&pair)).unwrap();
    let b = TimeBackend::new(&table);
    let s = three_window(50e-6, 120e-6, Sequence::Hahn, Sequence::Free);
    let ii = IntervalIntegrals::compute(&s, &b).unwrap();
    let e = ClosedForm::PiOnly { k1: 1, k2: 0 }
        .measure(&ii, s.pi_count())
        .unwrap();
    assert!((e - ii.a_plus(&[1.0, -1.0, -1.0])).abs() < 1e-10);
    let e = ClosedForm::PiOnly { k1: 0, k2: 0 }
        .measure(&ii, s.pi_count())
        .unwrap();
    assert!((e - ii.a_plus(&[1.0, 1.0, 1.0])).abs() < 1e-10);
}

#[test]
fn diagonal_minus_configs_vanish() {
    let corr = gauss_corr(1e9, 1e9);
    let s = three_window(20e-6, 35e-6, Sequence::Hahn, Sequence::Free);
    let ii = IntervalIntegrals::compute(&s, &TimeBackend::new(&corr)).unwrap();
    for j in 0..3 {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        assert_eq!(ii.i_minus(&e, &e), 0.0);
    }
}

#[test]
fn backends_agree_on_separated_windows() {
    let seqs = [
        Sequence::Free,
        Sequence::Hahn,
        Sequence::Cpmg(1),
        Sequence::Cpmg(2),
        Sequence::Cpmg(3),
    ];
    let c = Constraints::new(1e-6, 1e-7).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..50usize {
        let pair = random_pair(100 + (k / 10) as u64);
        let t1 = 20e-6 + 7e-6 * (k % 10) as f64;
        let t2 = t1 * (1.0 + 0.37 * (k % 7) as f64);
        let y = seqs[k % 5].switching(t1, &c).unwrap();
        let yp = seqs[(k / 5) % 5].switching(t1, &c).unwrap();
        let table =
            CorrelationTable::build(&pair, t1 + t2 + 1e-6, CorrelationTable::default_step(&pair))
                .unwrap();
        let tb = TimeBackend::new(&table);
        for kind in [Kind::Plus, Kind::Minus] {
            let tv = window_integral(&tb, &y, &yp, t2, kind).unwrap().value;
            let fv = integral_freq_domain(&y, &yp, t2, &pair, kind)
                .unwrap()
                .value;
            let err = (tv - fv).abs() / tv.abs().max(1.0);
            worst = worst.max(err);
            assert!(err <= 1e-5, "config {k} {kind:?}: time {tv} freq {fv}");
        }
    }
    assert!(worst < 1e-5);
}

#[test]
fn minus_window_integral_decays_with_separation() {
    let pair = random_pair(7);
    let c = Constraints::new(1e-6, 1e-7).unwrap();
    let y = Sequence::Hahn.switching(50e-6, &c).unwrap();
    let near = integral_freq_domain(&y, &y, 100e-6, &pair, Kind::Minus)
        .unwrap()
        .value;
    let far = integral_freq_domain(&y, &y, 1000e-6, &pair, Kind::Minus)
        .unwrap()
        .value;
    assert!(far.abs() < 0.2 * near.abs(), "near {near} far {far}");
    assert!(integral_freq_domain(&y, &y, 10e-6, &pair, Kind::Minus).is_err());
}

#[test]
fn lag_reduction_matches_tensor_quadrature() {
    let corr = gauss_corr(1.3e9, 0.9e9);
    let a = SwitchingFunction::from_flips(30e-6, 60e-6, &[41e-6, 52e-6]).filter();
    let b = SwitchingFunction::from_flips(0.0, 45e-6, &[12e-6]).filter();
    for kind in [Kind::Plus, Kind::Minus] {
        for ordered in [false, true] {
            let tb = TimeBackend::new(&corr);
            let fast = match (kind, ordered) {
                (Kind::Plus, false) => tb.plus(&a, &b).unwrap(),
                (Kind::Minus, false) => tb.minus(&a, &b).unwrap(),
                (Kind::Plus, true) => tb.plus_ordered(&a, &b),
                (Kind::Minus, true) => tb.minus_ordered(&a, &b),
            };
            let slow = integral_2d_reference(&a, &b, &corr, kind, ordered, 40);
            assert!(
                (fast - slow).abs() < 1e-7 * slow.abs().max(1e-3),
                "{kind:?} {ordered}: {fast} {slow}"
            );
        }
    }
}

#[test]
fn dephasing_preserving_has_no_minus() {
    let corr = gauss_corr(1e9, 1e9);
    let y = SwitchingFunction::from_flips(0.0, 30e-6, &[15e-6]).filter();
    let zero = qnspec::control::FilterFunction {
        breakpoints: vec![0.0, 30e-6],
        signs: vec![0],
    };
    assert_eq!(
        integral_time_domain(&y, &zero, &corr, Kind::Minus).value,
        0.0
    );
}
