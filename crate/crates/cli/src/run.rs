//! The subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qnspec::dynamics::{
    integral_freq_domain, window_integral, Axis, IntervalIntegrals, Kind, Shots, TimeBackend,
};
use qnspec::inference::{
    corner_minus_settings, corner_plus_settings, extract_q_quantities, infer_plus, mix_seed,
    protocol_grid, simulate_records, Experiment, QId, SimulatedExperiment, ThreeWindow,
};
use qnspec::reconstruction::{
    median_relative_error, plan_sampling, run_region, scored_points, stitch_regions, Pipeline,
    SamplingPlan, SpectrumEstimate,
};
use qnspec::spectra::{
    check_physicality, corollary_bounds, physicality_grid, CorrelationTable, SpectrumPair,
};
use serde::Serialize;

use crate::config::{sequence_name, Workbench};
use crate::error::{CheckFailed, ConfigError};
use crate::output::{self, overlay, read_rows, EstimateRow, Plot, Series, TruthRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Target {
    C,
    Q,
    Both,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Plans every region; planning failures are configuration errors.
fn plan_list(wb: &Workbench, q: bool) -> Result<Vec<SamplingPlan>> {
    let regions = if q { &wb.q_plans } else { &wb.c_plans };
    regions
        .iter()
        .map(|r| {
            plan_sampling(&r.request, &wb.constraints, &r.options)
                .map_err(|e| ConfigError::new(&r.path, e.to_string()).into())
        })
        .collect()
}

fn max_lag(plans: &[&SamplingPlan]) -> f64 {
    plans
        .iter()
        .map(|p| p.ts * p.k as f64 + 2.0 * p.t1)
        .fold(0.0, f64::max)
}

fn table(pair: &SpectrumPair, lag: f64) -> Result<CorrelationTable> {
    Ok(CorrelationTable::build(
        pair,
        lag.max(1e-6) * 1.01,
        CorrelationTable::default_step(pair),
    )?)
}

fn pipeline<'a>(
    wb: &Workbench,
    backend: &'a TimeBackend<'a, CorrelationTable>,
) -> Pipeline<'a, TimeBackend<'a, CorrelationTable>> {
    Pipeline {
        backend,
        constraints: wb.constraints,
        route: wb.route,
        seed: wb.seed,
        s_plus_hat: None,
        w_max: 2.0 * wb.pair.cutoff(),
        interpolate_dropouts: true,
    }
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct ExpectationRow {
    plan_id: String,
    target: &'static str,
    k: usize,
    t2_s: f64,
    setting: usize,
    theta1: f64,
    theta2: f64,
    state: String,
    observable: String,
    expectation: f64,
    variance: f64,
}

fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    }
}

/// Expectations of every separated (`t₂ ≥ t₁`) window experiment.
pub fn simulate(wb: &Workbench) -> Result<PathBuf> {
    prepare_out(&wb.out)?;
    let c_plans = plan_list(wb, false)?;
    let q_plans = plan_list(wb, true)?;
    let all: Vec<(&SamplingPlan, bool)> = c_plans
        .iter()
        .map(|p| (p, false))
        .chain(q_plans.iter().map(|p| (p, true)))
        .collect();
    let lag = max_lag(&all.iter().map(|a| a.0).collect::<Vec<_>>());
    let mut rows = Vec::new();
    if !all.is_empty() {
        let tab = table(&wb.pair, lag)?;
        let backend = TimeBackend::new(&tab);
        let shots_of = |p: &SamplingPlan| p.shots;
        for (ip, (plan, q)) in all.iter().enumerate() {
            let exp = SimulatedExperiment {
                backend: &backend,
                shots: shots_of(plan),
                seed: wb.seed,
            };
            let late = plan.late_pattern(&wb.constraints)?;
            let early = plan.early_pattern(&wb.constraints)?;
            let settings = if *q {
                corner_minus_settings()
            } else {
                corner_plus_settings()
            };
            for (k, t2) in plan.t2_grid().into_iter().enumerate() {
                if t2 < plan.t1 - 1e-12 {
                    continue;
                }
                let (s, _) =
                    ThreeWindow::new(early.clone(), late.shifted(t2))?.schedule(&wb.constraints)?;
                let m = exp.run(&s, &settings, mix_seed(wb.seed, ip as u64, k as u64))?;
                for (i, (st, r)) in settings.iter().zip(&m).enumerate() {
                    rows.push(ExpectationRow {
                        plan_id: plan.id.clone(),
                        target: if *q { "q" } else { "c" },
                        k,
                        t2_s: t2,
                        setting: i,
                        theta1: st.angles[1],
                        theta2: st.angles[2],
                        state: format!(
                            "{}{}",
                            if st.state.sign > 0 { "+" } else { "-" },
                            axis_name(st.state.axis)
                        ),
                        observable: axis_name(st.obs).into(),
                        expectation: r.value,
                        variance: r.variance,
                    });
                }
            }
        }
    }
    let path = wb.out.join("expectations.csv");
    output::write_rows(
        &path,
        &rows,
        &[
            "plan_id",
            "target",
            "k",
            "t2_s",
            "setting",
            "theta1",
            "theta2",
            "state",
            "observable",
            "expectation",
            "variance",
        ],
    )?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// reconstruct

fn truth_rows(wb: &Workbench, q: bool) -> Vec<TruthRow> {
    let m = if q { &wb.pair.q } else { &wb.pair.c };
    wb.omega
        .iter()
        .map(|&w| TruthRow {
            omega_rad_s: w,
            s_true: m.eval(w),
        })
        .collect()
}

fn empty_estimate(wb: &Workbench, kind: Kind) -> SpectrumEstimate {
    let n = wb.omega.len();
    SpectrumEstimate {
        kind,
        omega: wb.omega.clone(),
        value: vec![None; n],
        variance: vec![0.0; n],
        bound: vec![0.0; n],
        mfs: vec![false; n],
        plan: vec![String::new(); n],
    }
}

/// Writes an estimate CSV and its plot, the plot drawn from the files.
fn emit(
    dir: &Path,
    stem: &str,
    est: &SpectrumEstimate,
    truth_csv: &Path,
    log_x: bool,
    title: &str,
) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    output::write_estimate(&csv, est)?;
    let rows: Vec<EstimateRow> = read_rows(&csv)?;
    let truth: Vec<TruthRow> = read_rows(truth_csv)?;
    overlay(title, &rows, &truth, log_x).write(&dir.join(format!("{stem}.svg")))
}

fn reconstruct_kind(
    wb: &Workbench,
    backend: &TimeBackend<'_, CorrelationTable>,
    plans: &[SamplingPlan],
    kind: Kind,
    s_plus_hat: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<SpectrumEstimate> {
    let (tag, q) = match kind {
        Kind::Plus => ("c", false),
        Kind::Minus => ("q", true),
    };
    let truth_csv = wb.out.join(format!("{tag}_truth.csv"));
    output::write_rows(&truth_csv, &truth_rows(wb, q), &["omega_rad_s", "s_true"])?;
    let p = Pipeline {
        s_plus_hat,
        ..pipeline(wb, backend)
    };
    let truth = |w: f64| {
        if q {
            wb.pair.q.eval(w)
        } else {
            wb.pair.c.eval(w)
        }
    };
    let mut ests = Vec::new();
    for plan in plans {
        let run = run_region(plan, &p, kind, &wb.omega, None, wb.pair.cutoff())
            .with_context(|| format!("region {}", plan.id))?;
        let pts = scored_points(&run.estimate, plan.mfs, 0.8, wb.pair.cutoff(), &[]);
        let med = median_relative_error(&run.estimate, &truth, &pts);
        println!(
            "{tag} {}: {} points reported, median relative error {}",
            plan.id,
            run.estimate.reported(),
            med.map_or("n/a".into(), |m| format!("{:.2}%", 100.0 * m))
        );
        if !run.traces.branch_gaps.is_empty() {
            println!(
                "{tag} {}: {} ambiguous branch crossings",
                plan.id,
                run.traces.branch_gaps.len()
            );
        }
        let stem = format!("{tag}_{}", plan.id);
        emit(
            &wb.out,
            &stem,
            &run.estimate,
            &truth_csv,
            plan.dc,
            &format!("{tag}: {}", plan.id),
        )?;
        ests.push(run.estimate);
    }
    let stitched = if ests.is_empty() {
        empty_estimate(wb, kind)
    } else {
        let st = stitch_regions(&ests, None)?;
        for (a, b) in &st.gaps {
            println!("{tag}: uncovered band [{a:.1}, {b:.1}] rad/s");
        }
        st.estimate
    };
    let log_x = plans.iter().any(|p| p.dc);
    emit(
        &wb.out,
        tag,
        &stitched,
        &truth_csv,
        log_x,
        &format!("{tag}: stitched"),
    )?;
    Ok(stitched)
}

pub fn reconstruct(wb: &Workbench, target: Target, c_estimate: Option<&Path>) -> Result<()> {
    if target == Target::Q && c_estimate.is_none() {
        return Err(ConfigError::new(
            "--c-estimate",
            "target q needs a c estimate; pass --c-estimate or use --target both",
        )
        .into());
    }
    let c_plans = if target == Target::Q {
        Vec::new()
    } else {
        plan_list(wb, false)?
    };
    let q_plans = if target == Target::C {
        Vec::new()
    } else {
        plan_list(wb, true)?
    };
    let loaded = c_estimate
        .map(|p| {
            output::read_estimate(p, Kind::Plus)
                .map_err(|e| ConfigError::new("--c-estimate", format!("{e:#}")))
        })
        .transpose()?;
    prepare_out(&wb.out)?;
    let lag = max_lag(&c_plans.iter().chain(&q_plans).collect::<Vec<_>>());
    let tab = table(&wb.pair, lag)?;
    let backend = TimeBackend::new(&tab);
    let c_hat = match target {
        Target::Q => loaded.expect("checked above"),
        _ => reconstruct_kind(wb, &backend, &c_plans, Kind::Plus, None)?,
    };
    if target != Target::C {
        let interp = |w: f64| c_hat.interpolate(w);
        reconstruct_kind(wb, &backend, &q_plans, Kind::Minus, Some(&interp))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check

struct Report {
    lines: Vec<String>,
    failed: usize,
}

impl Report {
    fn add(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        self.lines.push(format!(
            "{} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        ));
    }
}

pub fn check(wb: &Workbench, c_estimate: Option<&Path>, q_estimate: Option<&Path>) -> Result<()> {
    let mut rep = Report {
        lines: Vec::new(),
        failed: 0,
    };
    let pair = &wb.pair;
    let phys = check_physicality(pair, &physicality_grid(pair), 0.0);
    let listed: Vec<String> = phys
        .violations
        .iter()
        .take(10)
        .map(|w| format!("{:.1} Hz", w / (2.0 * std::f64::consts::PI)))
        .collect();
    rep.add(
        "physicality",
        phys.pass,
        if phys.pass {
            format!("min S+ - |S-| = {:e}", phys.margin)
        } else {
            format!(
                "{} grid points violate |S-| <= S+, worst at {:.1} Hz (margin {:e}); first: {}",
                phys.violations.len(),
                phys.worst_omega / (2.0 * std::f64::consts::PI),
                phys.margin,
                listed.join(", ")
            )
        },
    );

    let mut plans = plan_list(wb, false)?;
    plans.extend(plan_list(wb, true)?);
    let t1s: Vec<f64> = if plans.is_empty() {
        vec![20e-6]
    } else {
        plans.iter().map(|p| p.t1).collect()
    };
    let t1_max = t1s.iter().cloned().fold(0.0, f64::max);
    let tab = table(pair, 4.0 * t1_max)?;
    let backend = TimeBackend::new(&tab);

    let mut worst: f64 = 0.0;
    let mut corollary_ok = true;
    for &t1 in &t1s {
        for t2 in [t1, 2.0 * t1] {
            let b = corollary_bounds(&tab, t1, t2)?;
            corollary_ok &=
                b.lhs <= b.rhs * (1.0 + 1e-9) && b.max_commutator <= b.c_plus_zero * (1.0 + 1e-9);
            worst = worst.max(b.lhs / b.rhs.max(f64::MIN_POSITIVE));
        }
    }
    rep.add(
        "corollary",
        corollary_ok,
        format!(
            "max lhs/rhs = {worst:.3} over {} spot checks",
            2 * t1s.len()
        ),
    );

    // Q4⁺ is redundant given the other quantities; its residual must vanish.
    let c = wb.constraints;
    let (late, early) = match plans.first() {
        Some(p) => (p.late_pattern(&c)?, p.early_pattern(&c)?),
        None => {
            let y = qnspec::control::Sequence::Hahn.switching(c.snap(20e-6), &c)?;
            (y.clone(), y)
        }
    };
    let t1 = late.end() - late.start();
    let (s, _) = ThreeWindow::new(early.clone(), late.shifted(c.snap(1.5 * t1)))?.schedule(&c)?;
    let ii = IntervalIntegrals::compute(&s, &backend)?;
    let recs = simulate_records(&ii, s.pi_count(), &protocol_grid(), Shots::Infinite, 0)?;
    let q4 = extract_q_quantities(&recs, s.pi_count(), &QId::all()).and_then(|qs| infer_plus(&qs));
    match q4 {
        Ok(pi) => rep.add(
            "q4-redundancy",
            pi.q4_residual <= 1e-6,
            format!("residual {:e}", pi.q4_residual),
        ),
        Err(e) => rep.add("q4-redundancy", false, e.to_string()),
    }

    let mut worst: f64 = 0.0;
    let mut n = 0;
    for p in plans.iter().take(5) {
        let (y, yp) = (p.late_pattern(&c)?, p.early_pattern(&c)?);
        let t2 = p.t1 + 3.0 * p.ts;
        if t2 + p.t1 > tab.tau_max() {
            continue;
        }
        for kind in [Kind::Plus, Kind::Minus] {
            let tv = window_integral(&backend, &y, &yp, t2, kind)?.value;
            let fv = integral_freq_domain(&y, &yp, t2, pair, kind)?.value;
            worst = worst.max((tv - fv).abs() / tv.abs().max(1.0));
            n += 1;
        }
    }
    rep.add(
        "backend-equivalence",
        worst <= 1e-5,
        format!("worst {worst:.2e} over {n} spot checks"),
    );

    let c_est = c_estimate
        .map(|p| output::read_estimate(p, Kind::Plus))
        .transpose()?;
    let q_est = q_estimate
        .map(|p| output::read_estimate(p, Kind::Minus))
        .transpose()?;
    if let Some(ce) = &c_est {
        let bad = (0..ce.omega.len())
            .filter(|&i| ce.value[i].is_some_and(|v| v + ce.bound[i] < 0.0))
            .count();
        rep.add(
            "estimate-nonnegative",
            bad == 0,
            format!("{bad} points with S+ + bound < 0"),
        );
        if let Some(qe) = &q_est {
            let mut bad = 0;
            let mut total = 0;
            for (i, &w) in qe.omega.iter().enumerate() {
                let Some(q) = qe.value[i] else { continue };
                let j = ce
                    .omega
                    .partition_point(|&x| x < w)
                    .min(ce.omega.len().saturating_sub(1));
                let bound_c = ce.bound.get(j).copied().unwrap_or(0.0);
                if ce.value.get(j).copied().flatten().is_none() {
                    continue;
                }
                total += 1;
                if q.abs() > ce.interpolate(w) + bound_c + qe.bound[i] {
                    bad += 1;
                }
            }
            rep.add(
                "estimate-physicality",
                bad == 0,
                format!("{bad}/{total} points with |S-| > S+ beyond the bounds"),
            );
        }
    }

    prepare_out(&wb.out)?;
    let text = rep.lines.join("\n") + "\n";
    fs::write(wb.out.join("check.txt"), &text)?;
    print!("{text}");
    if rep.failed > 0 {
        return Err(CheckFailed(rep.failed).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// plan, filters

pub fn plan(wb: &Workbench) -> Result<()> {
    let mut plans = plan_list(wb, false)?;
    plans.extend(plan_list(wb, true)?);
    prepare_out(&wb.out)?;
    fs::write(
        wb.out.join("plans.json"),
        serde_json::to_string_pretty(&plans)? + "\n",
    )?;
    println!(
        "{:<16} {:>8} {:>8} {:>6} {:>22} {:>10} {:>4} {:>7}",
        "id", "t1_us", "ts_us", "K", "mfs_rad_s", "omega_c", "dc", "margin"
    );
    for p in &plans {
        println!(
            "{:<16} {:>8.2} {:>8.2} {:>6} {:>22} {:>10.0} {:>4} {:>7}{}",
            p.id,
            p.t1 * 1e6,
            p.ts * 1e6,
            p.k,
            format!("[{:.0}, {:.0}]", p.mfs.0, p.mfs.1),
            p.omega_c,
            if p.dc { "yes" } else { "no" },
            if p.dc {
                "-".into()
            } else {
                format!("{:.2}", p.margin)
            },
            if p.below_margin() {
                "  (below gamma)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct FilterRow {
    plan_id: String,
    late_sequence: String,
    early_sequence: String,
    omega_rad_s: f64,
    late_abs2: f64,
    early_abs2: f64,
    z_re: f64,
    z_im: f64,
}

const PALETTE: [&str; 6] = [
    "#1f6fd1", "#d1461f", "#2a9d3f", "#8e44ad", "#c79a00", "#444444",
];

pub fn filters(wb: &Workbench) -> Result<()> {
    let mut plans = plan_list(wb, false)?;
    plans.extend(plan_list(wb, true)?);
    prepare_out(&wb.out)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (i, p) in plans.iter().enumerate() {
        let f = p.filters(&wb.constraints)?;
        let mut pts = Vec::new();
        for &w in &wb.omega {
            let z = f.z(w);
            rows.push(FilterRow {
                plan_id: p.id.clone(),
                late_sequence: sequence_name(p.sequence),
                early_sequence: sequence_name(p.partner.unwrap_or(p.sequence)),
                omega_rad_s: w,
                late_abs2: f.late.eval(w).norm_sqr(),
                early_abs2: f.early.eval(w).norm_sqr(),
                z_re: z.re,
                z_im: z.im,
            });
            pts.push((w, z.norm()));
        }
        series.push(Series {
            label: p.id.clone(),
            color: PALETTE[i % PALETTE.len()],
            points: pts,
            err: None,
        });
    }
    output::write_rows(
        &wb.out.join("filters.csv"),
        &rows,
        &[
            "plan_id",
            "late_sequence",
            "early_sequence",
            "omega_rad_s",
            "late_abs2",
            "early_abs2",
            "z_re",
            "z_im",
        ],
    )?;
    Plot {
        title: "filter products |Z(ω)|".into(),
        x_label: "ω (rad/s)".into(),
        y_label: "|Z| (s²)".into(),
        log_x: wb.omega.first().is_some_and(|&w| w > 0.0),
        series,
        bands: Vec::new(),
    }
    .write(&wb.out.join("filters.svg"))
}
