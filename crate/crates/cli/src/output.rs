//! CSV files and SVG plots.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use qnspec::dynamics::Kind;
use qnspec::reconstruction::SpectrumEstimate;
use serde::{Deserialize, Serialize};

/// One row of an estimate CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub omega_rad_s: f64,
    /// Empty where nothing was reported.
    pub s_hat: Option<f64>,
    pub error_bound: f64,
    pub mfs_flag: u8,
    pub plan_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub omega_rad_s: f64,
    pub s_true: f64,
}

pub fn estimate_rows(est: &SpectrumEstimate) -> Vec<EstimateRow> {
    (0..est.omega.len())
        .map(|i| EstimateRow {
            omega_rad_s: est.omega[i],
            s_hat: est.value[i],
            error_bound: est.bound[i],
            mfs_flag: est.mfs[i] as u8,
            plan_id: est.plan[i].clone(),
        })
        .collect()
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const ESTIMATE_HEADER: [&str; 5] =
    ["omega_rad_s", "s_hat", "error_bound", "mfs_flag", "plan_id"];

pub fn write_estimate(path: &Path, est: &SpectrumEstimate) -> Result<()> {
    write_rows(path, &estimate_rows(est), &ESTIMATE_HEADER)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// An estimate CSV read back as a spectrum estimate of `kind`.
pub fn read_estimate(path: &Path, kind: Kind) -> Result<SpectrumEstimate> {
    let rows: Vec<EstimateRow> = read_rows(path)?;
    Ok(SpectrumEstimate {
        kind,
        omega: rows.iter().map(|r| r.omega_rad_s).collect(),
        value: rows.iter().map(|r| r.s_hat).collect(),
        variance: vec![0.0; rows.len()],
        bound: rows.iter().map(|r| r.error_bound).collect(),
        mfs: rows.iter().map(|r| r.mfs_flag != 0).collect(),
        plan: rows.iter().map(|r| r.plan_id.clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Plots

pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Drawn as a shaded band `y ± err` when present.
    pub err: Option<Vec<f64>>,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
    /// Shaded x ranges.
    pub bands: Vec<(f64, f64)>,
}

const W: f64 = 800.0;
const H: f64 = 500.0;
const L: f64 = 80.0;
const R: f64 = 20.0;
const T: f64 = 40.0;
const B: f64 = 60.0;

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= n as f64)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1e3).round() / 1e3)
    }
}

impl Plot {
    pub fn svg(&self) -> String {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .filter(|&x| !self.log_x || x > 0.0);
        let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
        let ys = self.series.iter().flat_map(|s| {
            s.points.iter().enumerate().flat_map(move |(i, p)| {
                let e = s.err.as_ref().map_or(0.0, |e| e[i]);
                [p.1 - e, p.1 + e]
            })
        });
        let (mut y0, mut y1) = ys
            .filter(|y| y.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
                (a.min(y), b.max(y))
            });
        if !x0.is_finite() {
            (x0, x1) = if self.log_x { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        let pad = 0.05 * (y1 - y0).max(y1.abs().max(1e-300) * 1e-3);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let fx = |x: f64| {
            let u = if self.log_x {
                (x.ln() - x0.ln()) / (x1.ln() - x0.ln())
            } else {
                (x - x0) / (x1 - x0)
            };
            L + u * (W - L - R)
        };
        let fy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
        let mut s = String::new();
        let mut line = |t: String| {
            s.push_str(&t);
            s.push('\n');
        };
        line(format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        ));
        line(r#"<rect width="100%" height="100%" fill="white"/>"#.into());
        for &(a, b) in &self.bands {
            let (a, b) = (a.max(x0), b.min(x1));
            if b > a {
                line(format!(
                    r##"<rect x="{:.2}" y="{T}" width="{:.2}" height="{:.2}" fill="#dde8f6"/>"##,
                    fx(a),
                    fx(b) - fx(a),
                    H - T - B
                ));
            }
        }
        line(format!(
            r#"<rect x="{L}" y="{T}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            W - L - R,
            H - T - B
        ));
        let xt: Vec<f64> = if self.log_x {
            let (a, b) = (x0.log10().ceil() as i32, x1.log10().floor() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            nice_ticks(x0, x1, 8)
        };
        for x in xt {
            let px = fx(x);
            line(format!(
                r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#,
                H - B,
                H - B + 5.0
            ));
            line(format!(
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                H - B + 18.0,
                fmt_tick(x)
            ));
        }
        for y in nice_ticks(y0, y1, 6) {
            let py = fy(y);
            line(format!(
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{L}" y2="{py:.2}" stroke="black"/>"#,
                L - 5.0
            ));
            line(format!(
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                L - 8.0,
                py + 4.0,
                fmt_tick(y)
            ));
        }
        line(format!(
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            L + 0.5 * (W - L - R),
            H - 15.0,
            esc(&self.x_label)
        ));
        line(format!(
            r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
            T + 0.5 * (H - T - B),
            T + 0.5 * (H - T - B),
            esc(&self.y_label)
        ));
        line(format!(
            r#"<text x="{:.2}" y="25" text-anchor="middle" font-size="14">{}</text>"#,
            0.5 * W,
            esc(&self.title)
        ));
        let visible = |x: f64| !self.log_x || x > 0.0;
        for se in &self.series {
            if let Some(err) = &se.err {
                let pts: Vec<(f64, f64, f64)> = se
                    .points
                    .iter()
                    .zip(err)
                    .filter(|(p, _)| visible(p.0))
                    .map(|(p, e)| (p.0, p.1, *e))
                    .collect();
                if !pts.is_empty() {
                    let mut d = String::new();
                    for (i, (x, y, e)) in pts.iter().enumerate() {
                        d.push_str(&format!(
                            "{}{:.2},{:.2} ",
                            if i == 0 { "M" } else { "L" },
                            fx(*x),
                            fy(y + e)
                        ));
                    }
                    for (x, y, e) in pts.iter().rev() {
                        d.push_str(&format!("L{:.2},{:.2} ", fx(*x), fy(y - e)));
                    }
                    line(format!(
                        r#"<path d="{}Z" fill="{}" fill-opacity="0.25" stroke="none"/>"#,
                        d, se.color
                    ));
                }
            }
            let mut d = String::new();
            let mut pen = false;
            for &(x, y) in &se.points {
                if !visible(x) || !y.is_finite() {
                    pen = false;
                    continue;
                }
                d.push_str(&format!(
                    "{}{:.2},{:.2} ",
                    if pen { "L" } else { "M" },
                    fx(x),
                    fy(y)
                ));
                pen = true;
            }
            line(format!(
                r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                d.trim_end(),
                se.color
            ));
        }
        for (i, se) in self.series.iter().enumerate() {
            let y = T + 15.0 + 16.0 * i as f64;
            line(format!(
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="2"/>"#,
                W - R - 150.0,
                W - R - 125.0,
                se.color
            ));
            line(format!(
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                W - R - 120.0,
                y + 4.0,
                esc(&se.label)
            ));
        }
        line("</svg>".into());
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        f.write_all(self.svg().as_bytes())?;
        Ok(())
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Contiguous runs of flagged grid points as `[ω_first, ω_last]` bands.
pub fn bands(rows: &[EstimateRow]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut start: Option<f64> = None;
    let mut last = 0.0;
    for r in rows {
        match (r.mfs_flag != 0, start) {
            (true, None) => start = Some(r.omega_rad_s),
            (false, Some(a)) => {
                out.push((a, last));
                start = None;
            }
            _ => {}
        }
        last = r.omega_rad_s;
    }
    if let Some(a) = start {
        out.push((a, last));
    }
    out
}

/// Truth, estimate and error band of one estimate CSV, as a plot.
pub fn overlay(title: &str, rows: &[EstimateRow], truth: &[TruthRow], log_x: bool) -> Plot {
    let reported: Vec<&EstimateRow> = rows.iter().filter(|r| r.s_hat.is_some()).collect();
    let lo = reported.first().map_or(0.0, |r| r.omega_rad_s);
    let hi = reported.last().map_or(0.0, |r| r.omega_rad_s);
    // Truth is drawn over the reported span, padded by a fifth on each side.
    let pad = 0.2 * (hi - lo);
    Plot {
        title: title.into(),
        x_label: "ω (rad/s)".into(),
        y_label: "S(ω)".into(),
        log_x,
        series: vec![
            Series {
                label: "truth".into(),
                color: "#222222",
                points: truth
                    .iter()
                    .filter(|t| {
                        reported.is_empty()
                            || (t.omega_rad_s >= lo - pad && t.omega_rad_s <= hi + pad)
                    })
                    .map(|t| (t.omega_rad_s, t.s_true))
                    .collect(),
                err: None,
            },
            Series {
                label: "estimate".into(),
                color: "#1f6fd1",
                points: reported
                    .iter()
                    .map(|r| (r.omega_rad_s, r.s_hat.unwrap()))
                    .collect(),
                err: Some(reported.iter().map(|r| r.error_bound).collect()),
            },
        ],
        bands: bands(rows),
    }
}
