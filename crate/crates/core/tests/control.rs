use proptest::prelude::*;
use qnspec::control::*;
use qnspec::error::Error;
use qnspec::quad::{uniform_edges, GaussLegendre, Mesh};

fn cons() -> Constraints {
    Constraints::new(1e-6, 0.5e-6).unwrap()
}

fn three_intervals(pulses: Vec<Vec<f64>>) -> PulseSchedule {
    PulseSchedule::new(
        vec![0.0, 10e-6, 20e-6, 30e-6],
        vec![0.4, 0.3, 0.2, 0.0],
        pulses,
        cons(),
    )
    .unwrap()
}

fn segment_mid(es: &EffectiveSwitching, i: usize) -> f64 {
    0.5 * (es.breakpoints[i] + es.breakpoints[i + 1])
}

#[test]
fn no_pulses_zero_r_is_constant() {
    let s = three_intervals(vec![vec![], vec![], vec![]]);
    let y = toggling_switch(&s, &[0, 0, 0, 0]).unwrap();
    assert_eq!(y.values, vec![1]);
}

#[test]
fn flip_in_second_interval_only() {
    let s = three_intervals(vec![vec![], vec![], vec![]]);
    // |r′|_k is odd on interval 2 only.
    let es = effective_switchings(&s, &[0, 0, 0, 0], &[0, 1, 1, 0], -1).unwrap();
    for i in 0..es.y_minus.len() {
        let t = segment_mid(&es, i);
        let in2 = (10e-6..20e-6).contains(&t);
        assert_eq!(es.y_minus[i] == 0, in2, "t = {t}");
        assert_eq!(es.y_plus[i] == 0, !in2, "t = {t}");
    }
}

#[test]
fn all_positive_labels() {
    let s = three_intervals(vec![vec![5e-6], vec![], vec![25e-6]]);
    let es = effective_switchings(&s, &[0, 0, 0, 0], &[0, 0, 0, 0], -1).unwrap();
    let cc = canonical_config(&es);
    assert_eq!(cc.a, vec![1, 1, 1]);
    assert_eq!(es.a, es.a_prime.iter().map(|_| 1).collect::<Vec<_>>());
}

#[test]
fn full_inversion_keeps_canonical_form() {
    let s = three_intervals(vec![vec![], vec![15e-6], vec![]]);
    let es = effective_switchings(&s, &[0, 1, 0, 0], &[0, 0, 0, 0], -1).unwrap();
    let mut inv = es.clone();
    for k in 1..=3 {
        inv = pi_pair_flip(&inv, k);
    }
    assert_eq!(inv.a, es.a.iter().map(|x| -x).collect::<Vec<_>>());
    assert_eq!(
        inv.a_prime,
        es.a_prime.iter().map(|x| -x).collect::<Vec<_>>()
    );
    let (c0, c1) = (canonical_config(&es), canonical_config(&inv));
    assert_eq!((c0.a, c0.a_prime), (c1.a, c1.a_prime));
}

#[test]
fn partial_inversion_flips_outer_intervals() {
    // Y⁻ on intervals 1 and 3, Y⁺ on interval 2.
    let s = three_intervals(vec![vec![], vec![], vec![]]);
    let es = from_labels(&s, &[1, 0, -1], &[0, 1, 0]);
    let flipped = pi_pair_flip(&pi_pair_flip(&es, 1), 3);
    for i in 0..es.y_minus.len() {
        assert_eq!(flipped.y_minus[i], -es.y_minus[i]);
        assert_eq!(flipped.y_plus[i], es.y_plus[i]);
    }
}

#[test]
fn cpmg_examples() {
    let c = Constraints::new(10e-6, 1e-6).unwrap();
    let close = |a: Vec<f64>, b: &[f64]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    };
    assert!(close(
        cpmg_sequence(1, 100e-6, &c).unwrap(),
        &[25e-6, 75e-6]
    ));
    assert!(close(
        cpmg_sequence(0, 100e-6, &c).unwrap(),
        &[50e-6, 100e-6]
    ));
    assert!(matches!(
        cpmg_sequence(1, 19e-6, &c),
        Err(Error::Infeasible(_))
    ));
}

#[test]
fn filter_examples() {
    let t1 = 1e-4;
    let free = SwitchingFunction::constant(0.0, t1, 1);
    assert!((filter(&free, 0.0).re - t1).abs() < 1e-18);
    let hahn = Sequence::Hahn.switching(t1, &cons()).unwrap();
    assert!(filter(&hahn, 0.0).norm() < 1e-18);
    for &w in &[1.0, 3.3e3, 5e4, 7.77e5] {
        let expect = 4.0 * (0.5 * w * t1).sin().powi(2) / (w * w);
        assert!((filter(&free, w).norm_sqr() - expect).abs() <= 1e-12 * expect);
    }
}

#[test]
fn cpmg_pair_support_union() {
    // Two 1-CPMG windows; the union of their supports in rad/s.
    let c = Constraints::new(1e-6, 1e-6).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for t1 in [1e-4, 1.8e-4] {
        let f = Sequence::Cpmg(1).switching(t1, &c).unwrap().filter();
        let (a, b) = mfs(|w| f.eval(w).norm_sqr(), 0.5, 0.5, &mfs_grid(2e6)).unwrap();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    assert!((lo - 2.56e4).abs() < 0.01e4, "{lo}");
    assert!((hi - 9.74e4).abs() < 0.01e4, "{hi}");
}

#[test]
fn free_evolution_support_contains_dc() {
    let f = SwitchingFunction::constant(0.0, 1e-4, 1).filter();
    let (a, _) = mfs(|w| f.eval(w).norm_sqr(), 0.5, 0.5, &mfs_grid(1e6)).unwrap();
    assert_eq!(a, 0.0);
}

#[test]
fn lower_floor_widens_support() {
    let f = Sequence::Hahn.switching(1e-4, &cons()).unwrap().filter();
    let x = |w: f64| f.eval(w).norm_sqr();
    let g = mfs_grid(2e6);
    let (a0, b0) = mfs(x, 0.5, 0.5, &g).unwrap();
    let (a1, b1) = mfs(x, 0.5, 0.2, &g).unwrap();
    assert!(a1 <= a0 && b1 >= b0 && b1 - a1 > b0 - a0);
    assert!(matches!(mfs(x, 0.99, 0.5, &g), Err(Error::EmptySupport)));
}

#[test]
fn validation_examples() {
    let c = Constraints::new(10e-6, 1e-6).unwrap();
    let ok = PulseSchedule::new(
        vec![0.0, 100e-6],
        vec![1.0, 1.0],
        vec![vec![50e-6, 100e-6]],
        c,
    )
    .unwrap();
    assert!(schedule_validate(&ok).is_ok());
    let close = PulseSchedule::new(
        vec![0.0, 100e-6],
        vec![1.0, 1.0],
        vec![vec![50e-6, 55e-6]],
        c,
    )
    .unwrap();
    assert!(schedule_validate(&close).is_err());
    let off = PulseSchedule::new(
        vec![0.0, 100e-6 + 1e-6 / 3.0],
        vec![1.0, 1.0],
        vec![vec![]],
        c,
    )
    .unwrap();
    assert!(schedule_validate(&off).is_err());
}

fn pulse_train() -> impl Strategy<Value = Vec<Vec<f64>>> {
    // Pulses on a 2 μs grid inside each 10 μs interval.
    prop::collection::vec(prop::collection::btree_set(1u32..5, 0..3), 3).prop_map(|ts| {
        ts.into_iter()
            .enumerate()
            .map(|(k, set)| {
                set.into_iter()
                    .map(|j| (10 * k as u32 + 2 * j) as f64 * 1e-6)
                    .collect()
            })
            .collect()
    })
}

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, n)
}

fn labels() -> impl Strategy<Value = (Vec<i8>, Vec<i8>)> {
    prop::collection::vec((-1i8..=1, any::<bool>()), 3).prop_map(|v| {
        let a: Vec<i8> = v.iter().map(|&(x, _)| x).collect();
        let ap = v
            .iter()
            .map(|&(x, s)| {
                if x == 0 {
                    if s {
                        1
                    } else {
                        -1
                    }
                } else {
                    0
                }
            })
            .collect();
        (a, ap)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn incompatibility(pulses in pulse_train(), r in bits(4), rp in bits(4), fz in prop::sample::select(vec![-1i8, 1])) {
        let s = three_intervals(pulses);
        let es = effective_switchings(&s, &r, &rp, fz).unwrap();
        let y = toggling_switch(&s, &r).unwrap();
        let yp = toggling_switch(&s, &rp).unwrap();
        for i in 0..es.y_minus.len() {
            let (p, m) = (es.y_plus[i], es.y_minus[i]);
            prop_assert_eq!((p + m).abs(), 1);
            prop_assert_eq!(p * m, 0);
            let t = segment_mid(&es, i);
            prop_assert_eq!(2 * m, y.value_at(t) - fz * yp.value_at(t));
            let k = s.boundaries.iter().rposition(|&b| b <= t).unwrap();
            prop_assert_eq!(m, es.a[k] * es.base.value_at(t));
        }
    }

    #[test]
    fn canonical_is_gauge_invariant((a, ap) in labels(), flips in prop::collection::vec(any::<bool>(), 3), pulses in pulse_train()) {
        let s = three_intervals(pulses);
        let es = from_labels(&s, &a, &ap);
        let mut g = es.clone();
        for (k, &f) in flips.iter().enumerate() {
            if f {
                g = pi_pair_flip(&g, k + 1);
            }
        }
        let c0 = canonical_config(&es);
        let c1 = canonical_config(&g);
        prop_assert_eq!((&c0.a, &c0.a_prime), (&c1.a, &c1.a_prime));
        let again = canonical_config(&from_labels(&s, &c0.a, &c0.a_prime));
        prop_assert_eq!((&again.a, &again.a_prime), (&c0.a, &c0.a_prime));
        prop_assert!(again.gauge.iter().all(|&x| x == 1));
    }

    #[test]
    fn cpmg_is_valid_when_feasible(n in 0u32..6, steps in 1u32..400) {
        let c = Constraints::new(2e-6, 0.5e-6).unwrap();
        let t1 = steps as f64 * 0.5e-6;
        if let Ok(times) = cpmg_sequence(n, t1, &c) {
            let s = PulseSchedule::new(vec![0.0, t1], vec![0.0, 0.0], vec![times], c).unwrap();
            prop_assert!(schedule_validate(&s).is_ok());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn filter_matches_quadrature(flips in prop::collection::btree_set(1u32..200, 0..6), w in 0.0..2e6f64) {
        let t1 = 200e-6;
        let f: Vec<f64> = flips.into_iter().map(|k| k as f64 * 1e-6).collect();
        let sw = SwitchingFunction::from_flips(0.0, t1, &f);
        let rule = GaussLegendre::new(12);
        let mut re = 0.0;
        let mut im = 0.0;
        for (a, b, v) in sw.segments() {
            let mesh = Mesh::from_edges(&uniform_edges(a, b, 0.25e-6), &rule);
            re += v as f64 * mesh.integrate(|t| (w * t).cos());
            im += v as f64 * mesh.integrate(|t| (w * t).sin());
        }
        let got = filter(&sw, w);
        let scale = (re * re + im * im).sqrt().max(1e-3 * t1);
        prop_assert!((got.re - re).abs() < 1e-10 * scale && (got.im - im).abs() < 1e-10 * scale);
        prop_assert!(got.norm() <= t1 * (1.0 + 1e-12));
    }
}
