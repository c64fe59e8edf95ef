//! Workbench configuration: the file schema and its ingestion into SI units
//! (seconds, rad/s).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use qnspec::control::{Constraints, Sequence};
use qnspec::dynamics::Shots;
use qnspec::presets;
use qnspec::reconstruction::{PlanOptions, PlanRequest, Route, DEFAULT_GAMMA};
use qnspec::spectra::{
    Bump, DcTerm, FloorFormula, Modulation, Parity, SpectrumModel, SpectrumPair, WhiteFloor,
};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::units::{angular, time, Quantity};

pub const PRESET: &str = "paper-sec5";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Infinite shots.
    #[serde(alias = "infinite-shot")]
    Exact,
    /// Binomial shot noise with each plan's budget.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    #[serde(alias = "direct-equations")]
    Direct,
    QAlgebra,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Log,
    Linear,
}

/// The file format. Every section is optional when `preset` is given, and a
/// section present in the file replaces the preset's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub pipeline: Option<Pipeline>,
    pub out: Option<PathBuf>,
    pub constraints: Option<ConstraintsSpec>,
    pub grid: Option<GridSpec>,
    pub spectra: Option<SpectraSpec>,
    pub plans: Option<PlansSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSpec {
    /// Δ.
    pub min_separation: Quantity,
    /// δ.
    pub resolution: Quantity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub f_min: Quantity,
    pub f_max: Quantity,
    pub points: usize,
    #[serde(default = "log_spacing")]
    pub spacing: Spacing,
}

fn log_spacing() -> Spacing {
    Spacing::Log
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraSpec {
    /// `paper-sec5` selects the worked example; `c` and `q` are then ignored.
    pub preset: Option<String>,
    /// Multiplies every amplitude of the preset's `S⁻`.
    pub q_scale: Option<f64>,
    pub c: Option<SpectrumSpec>,
    /// Absent means a classical bath.
    pub q: Option<SpectrumSpec>,
}

/// A spectrum in ordinary frequency: `a1/(1 + a2·f)` plus bumps
/// `b/(1 + c·(f − f0)²)`, with `f` in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    #[serde(default)]
    pub dc: Option<DcSpec>,
    #[serde(default)]
    pub bumps: Vec<BumpSpec>,
    pub cutoff: Quantity,
    #[serde(default)]
    pub white_floor: Option<FloorSpec>,
    #[serde(default)]
    pub modulation: Option<ModulationSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcSpec {
    pub a1: f64,
    /// Per hertz.
    pub a2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub b: f64,
    /// Per hertz squared.
    pub c: f64,
    pub f0: Quantity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorSpec {
    pub threshold: Quantity,
    #[serde(default = "sign_corrected")]
    pub formula: FloorFormula,
}

fn sign_corrected() -> FloorFormula {
    FloorFormula::SignCorrected
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationSpec {
    pub threshold: Quantity,
    pub phase: f64,
    /// Per hertz.
    pub slope: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlansSpec {
    #[serde(default)]
    pub c: Vec<PlanSpec>,
    #[serde(default)]
    pub q: Vec<PlanSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub id: String,
    pub t1: Quantity,
    /// `free`, `hahn` or `cpmg-N`.
    pub sequence: String,
    pub partner: Option<String>,
    pub ts: Option<Quantity>,
    pub k: Option<usize>,
    /// Shots per observable in sampled mode.
    pub shots: Option<u64>,
    pub cutoff_multiple: Option<f64>,
    pub gamma: Option<f64>,
    /// Band to cover, `[low, high]`.
    pub target: Option<[Quantity; 2]>,
}

/// One region's planning inputs, in SI units.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPlan {
    pub request: PlanRequest,
    pub options: PlanOptions,
    /// Where the entry came from, for error messages.
    pub path: String,
}

/// A fully ingested configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Workbench {
    pub seed: u64,
    pub mode: Mode,
    pub route: Route,
    pub out: PathBuf,
    pub constraints: Constraints,
    /// Evaluation grid, rad/s.
    pub omega: Vec<f64>,
    pub pair: SpectrumPair,
    pub c_plans: Vec<RegionPlan>,
    pub q_plans: Vec<RegionPlan>,
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

pub fn parse_sequence(s: &str, path: &str) -> Result<Sequence, ConfigError> {
    let t = s.trim().to_ascii_lowercase();
    match t.as_str() {
        "free" => Ok(Sequence::Free),
        "hahn" => Ok(Sequence::Hahn),
        _ => t
            .strip_prefix("cpmg")
            .map(|n| n.trim_start_matches(['-', '_', ' ']))
            .and_then(|n| n.parse().ok())
            .map(Sequence::Cpmg)
            .ok_or_else(|| {
                ConfigError::new(path, format!("unknown sequence {s:?} (free, hahn, cpmg-N)"))
            }),
    }
}

pub fn sequence_name(s: Sequence) -> String {
    match s {
        Sequence::Free => "free".into(),
        Sequence::Hahn => "hahn".into(),
        Sequence::Cpmg(n) => format!("cpmg-{n}"),
    }
}

/// The worked example as a file config.
pub fn preset_file() -> FileConfig {
    let us = |t: f64| Quantity::Text(format!("{} us", (t * 1e7).round() / 10.0));
    let plans = |regions: Vec<presets::RegionSetting>| {
        regions
            .into_iter()
            .map(|r| PlanSpec {
                id: r.id.clone(),
                t1: us(r.t1),
                sequence: sequence_name(r.sequence),
                partner: None,
                ts: Some(us(r.ts)),
                k: Some(r.k),
                shots: Some(r.shots_high),
                cutoff_multiple: Some(r.cutoff_multiple),
                gamma: None,
                target: None,
            })
            .collect()
    };
    FileConfig {
        preset: None,
        seed: Some(1),
        mode: Some(Mode::Exact),
        pipeline: Some(Pipeline::Direct),
        out: Some(PathBuf::from("out")),
        constraints: Some(ConstraintsSpec {
            min_separation: "0.5 us".into(),
            resolution: "0.5 us".into(),
        }),
        grid: Some(GridSpec {
            f_min: "1 Hz".into(),
            f_max: "67 kHz".into(),
            points: 1200,
            spacing: Spacing::Log,
        }),
        spectra: Some(SpectraSpec {
            preset: Some(PRESET.into()),
            q_scale: None,
            c: None,
            q: None,
        }),
        plans: Some(PlansSpec {
            c: plans(presets::c_regions()),
            q: plans(presets::q_regions()),
        }),
    }
}

/// Reads TOML or JSON (by extension; TOML otherwise).
pub fn read_file(path: &Path) -> Result<FileConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    let json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if json {
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))
    }
}

/// Resolves a file's `preset` key by filling missing sections from it.
pub fn with_preset(file: FileConfig) -> Result<FileConfig, ConfigError> {
    let Some(name) = &file.preset else {
        return Ok(file);
    };
    if name != PRESET {
        return Err(ConfigError::new(
            "preset",
            format!("unknown preset {name:?} (expected {PRESET})"),
        ));
    }
    let base = preset_file();
    Ok(FileConfig {
        preset: None,
        seed: file.seed.or(base.seed),
        mode: file.mode.or(base.mode),
        pipeline: file.pipeline.or(base.pipeline),
        out: file.out.or(base.out),
        constraints: file.constraints.or(base.constraints),
        grid: file.grid.or(base.grid),
        spectra: file.spectra.or(base.spectra),
        plans: file.plans.or(base.plans),
    })
}

fn spectrum(spec: &SpectrumSpec, parity: Parity, path: &str) -> Result<SpectrumModel, ConfigError> {
    let two_pi = 2.0 * PI;
    let dc = spec
        .dc
        .as_ref()
        .map_or(DcTerm { a1: 0.0, a2: 0.0 }, |d| DcTerm {
            a1: d.a1,
            a2: d.a2 / two_pi,
        });
    let bumps = spec
        .bumps
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let p = format!("{path}.bumps[{i}]");
            if !(b.c > 0.0) {
                return Err(ConfigError::new(&format!("{p}.c"), "must be positive"));
            }
            Ok(Bump {
                b: b.b,
                c: b.c / (two_pi * two_pi),
                omega0: angular(&b.f0, &format!("{p}.f0"))?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let white_floor = spec
        .white_floor
        .as_ref()
        .map(|f| {
            Ok::<_, ConfigError>(WhiteFloor {
                threshold: angular(&f.threshold, &format!("{path}.white_floor.threshold"))?,
                formula: f.formula,
            })
        })
        .transpose()?;
    let modulation = spec
        .modulation
        .as_ref()
        .map(|m| {
            Ok::<_, ConfigError>(Modulation {
                threshold: angular(&m.threshold, &format!("{path}.modulation.threshold"))?,
                phase: m.phase,
                slope: m.slope / two_pi,
            })
        })
        .transpose()?;
    let cutoff = angular(&spec.cutoff, &format!("{path}.cutoff"))?;
    if cutoff <= 0.0 {
        return Err(ConfigError::new(
            &format!("{path}.cutoff"),
            "must be positive",
        ));
    }
    Ok(SpectrumModel {
        parity,
        dc,
        bumps,
        white_floor,
        modulation,
        cutoff,
    })
}

fn spectra(spec: &SpectraSpec) -> Result<SpectrumPair, ConfigError> {
    if let Some(name) = &spec.preset {
        if name != PRESET {
            return Err(ConfigError::new(
                "spectra.preset",
                format!("unknown preset {name:?}"),
            ));
        }
        return Ok(presets::example_pair_scaled_q(spec.q_scale.unwrap_or(1.0)));
    }
    let c = spec
        .c
        .as_ref()
        .ok_or_else(|| ConfigError::new("spectra.c", "missing"))?;
    let c = spectrum(c, Parity::Symmetric, "spectra.c")?;
    match &spec.q {
        Some(q) => {
            let q = spectrum(q, Parity::Antisymmetric, "spectra.q")?;
            // Physicality is a `check` concern; only structural errors stop here.
            Ok(SpectrumPair { c, q })
        }
        None => Ok(SpectrumPair::classical(c)),
    }
}

fn grid(g: &GridSpec) -> Result<Vec<f64>, ConfigError> {
    let a = angular(&g.f_min, "grid.f_min")?;
    let b = angular(&g.f_max, "grid.f_max")?;
    if g.points < 2 {
        return Err(ConfigError::new("grid.points", "need at least 2 points"));
    }
    if !(b > a && a >= 0.0) {
        return Err(ConfigError::new("grid", "need 0 <= f_min < f_max"));
    }
    let n = g.points;
    Ok(match g.spacing {
        Spacing::Linear => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
        Spacing::Log => {
            if a <= 0.0 {
                return Err(ConfigError::new(
                    "grid.f_min",
                    "log spacing needs f_min > 0",
                ));
            }
            let (la, lb) = (a.ln(), b.ln());
            (0..n)
                .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    })
}

fn region(p: &PlanSpec, mode: Mode, path: &str) -> Result<RegionPlan, ConfigError> {
    let field = |f: &str| format!("{path}.{f}");
    let t1 = time(&p.t1, &field("t1"))?;
    if t1 <= 0.0 {
        return Err(ConfigError::new(&field("t1"), "must be positive"));
    }
    let shots = match mode {
        Mode::Exact => Shots::Infinite,
        Mode::Sampled => match p.shots {
            Some(m) if m > 0 => Shots::Finite(m),
            _ => {
                return Err(ConfigError::new(
                    &field("shots"),
                    "sampled mode needs a positive shot budget",
                ))
            }
        },
    };
    let target = p
        .target
        .as_ref()
        .map(|[lo, hi]| {
            Ok::<_, ConfigError>((
                angular(lo, &field("target[0]"))?,
                angular(hi, &field("target[1]"))?,
            ))
        })
        .transpose()?;
    let defaults = PlanOptions::default();
    Ok(RegionPlan {
        request: PlanRequest {
            id: p.id.clone(),
            t1,
            sequence: parse_sequence(&p.sequence, &field("sequence"))?,
            partner: p
                .partner
                .as_deref()
                .map(|s| parse_sequence(s, &field("partner")))
                .transpose()?,
            target,
        },
        options: PlanOptions {
            gamma: p.gamma.unwrap_or(DEFAULT_GAMMA),
            cutoff_multiple: p.cutoff_multiple.unwrap_or(defaults.cutoff_multiple),
            ts: p.ts.as_ref().map(|q| time(q, &field("ts"))).transpose()?,
            k: p.k,
            shots,
            ..defaults
        },
        path: path.to_string(),
    })
}

/// Validates and converts a file config.
pub fn ingest(file: FileConfig, over: &Overrides) -> Result<Workbench, ConfigError> {
    let file = with_preset(file)?;
    let mode = over.mode.or(file.mode).unwrap_or(Mode::Exact);
    let seed = over.seed.or(file.seed);
    if mode == Mode::Sampled && seed.is_none() {
        return Err(ConfigError::new("seed", "sampled mode needs a seed"));
    }
    let cs = file
        .constraints
        .as_ref()
        .ok_or_else(|| ConfigError::new("constraints", "missing"))?;
    let delta_big = time(&cs.min_separation, "constraints.min_separation")?;
    let delta = time(&cs.resolution, "constraints.resolution")?;
    let constraints = Constraints::new(delta_big, delta)
        .map_err(|e| ConfigError::new("constraints", e.to_string()))?;
    if !constraints.on_grid(delta_big) {
        return Err(ConfigError::new(
            "constraints.min_separation",
            format!("Δ = {delta_big:e} s is not a multiple of δ = {delta:e} s"),
        ));
    }
    let omega = grid(
        file.grid
            .as_ref()
            .ok_or_else(|| ConfigError::new("grid", "missing"))?,
    )?;
    let pair = spectra(
        file.spectra
            .as_ref()
            .ok_or_else(|| ConfigError::new("spectra", "missing"))?,
    )?;
    let plans = file.plans.unwrap_or_default();
    let mut ids = HashSet::new();
    let mut regions = |list: &[PlanSpec], name: &str| {
        list.iter()
            .enumerate()
            .map(|(i, p)| {
                let path = format!("plans.{name}[{i}]");
                if !ids.insert(p.id.clone()) {
                    return Err(ConfigError::new(
                        &format!("{path}.id"),
                        format!("duplicate plan id {:?}", p.id),
                    ));
                }
                region(p, mode, &path)
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let c_plans = regions(&plans.c, "c")?;
    let q_plans = regions(&plans.q, "q")?;
    Ok(Workbench {
        seed: seed.unwrap_or(0),
        mode,
        route: match file.pipeline.unwrap_or(Pipeline::Direct) {
            Pipeline::Direct => Route::Direct,
            Pipeline::QAlgebra => Route::QAlgebra,
        },
        out: over
            .out
            .clone()
            .or(file.out)
            .unwrap_or_else(|| PathBuf::from("out")),
        constraints,
        omega,
        pair,
        c_plans,
        q_plans,
    })
}
