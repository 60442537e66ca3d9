//! File formats and the simulate/compare drivers behind the CLI.
//!
//! * `.fis`: one `key = value` per line for `a1..a4, b1..b4, c1, c2, sigma1, sigma2`.
//! * `.traj`: `step_ds = <len>` followed by `straight <len>` / `arc <radius> <sweep>` lines.
//! * `.cfg`: flat `section.key = value` run configuration.
//! * training data: CSV with header `d,delta_r`.
//!
//! `#` starts a comment everywhere. Lengths accept `m`, `cm`, `mm` suffixes,
//! angles `rad` or `deg`; bare numbers are metres and radians.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptMode;
use crate::error::{Error, Result};
use crate::fuzzy::{FisParams, ParamId};
use crate::presets;
use crate::robot::{Pose, RobotGeometry};
use crate::sim::{
    monte_carlo, run_trial, FilterMode, FilterSettings, MonteCarloSummary, Scenario, Segment,
    SimNoiseConfig, TraceRow, TrajectorySpec, TrialTrace,
};
use crate::training::TrainingSet;

/// Column header of trace files.
pub const TRACE_HEADER: &str =
    "step,true_x,true_y,true_theta,dr_x,dr_y,dr_theta,est_x,est_y,est_theta,r1,r2,r3,R11,R22,R33,P11,P22,P33";

/// Header of training data files.
pub const TRAINING_HEADER: &str = "d,delta_r";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, comment-stripped lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

/// `key = value` pairs in file order; duplicates are rejected.
fn key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, content) in content_lines(text) {
        let (k, v) = content.split_once('=').ok_or_else(|| {
            parse_err(
                path,
                line,
                format!("expected `key = value`, found `{content}`"),
            )
        })?;
        let key = k.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(parse_err(path, line, format!("duplicate key `{key}`")));
        }
        out.push((line, key, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_number(path: &Path, line: usize, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid number `{s}`")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(path, line, format!("non-finite number `{s}`")))
    }
}

fn split_unit<'a>(s: &'a str, units: &[&'a str]) -> (&'a str, Option<&'a str>) {
    let s = s.trim();
    for u in units {
        if let Some(num) = s.strip_suffix(u) {
            if num
                .trim_end()
                .ends_with(|c: char| c.is_ascii_digit() || c == '.')
            {
                return (num.trim_end(), Some(u));
            }
        }
    }
    (s, None)
}

fn parse_length(path: &Path, line: usize, s: &str) -> Result<f64> {
    let (num, unit) = split_unit(s, &["mm", "cm", "m"]);
    let v = parse_number(path, line, num)?;
    Ok(match unit {
        Some("cm") => v * 1e-2,
        Some("mm") => v * 1e-3,
        _ => v,
    })
}

fn parse_angle(path: &Path, line: usize, s: &str) -> Result<f64> {
    let (num, unit) = split_unit(s, &["deg", "rad"]);
    let v = parse_number(path, line, num)?;
    Ok(if unit == Some("deg") {
        v.to_radians()
    } else {
        v
    })
}

fn parse_triple(path: &Path, line: usize, s: &str) -> Result<Vector3<f64>> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(parse_err(
            path,
            line,
            format!("expected three comma-separated values, found `{s}`"),
        ));
    }
    Ok(Vector3::new(
        parse_number(path, line, parts[0])?,
        parse_number(path, line, parts[1])?,
        parse_number(path, line, parts[2])?,
    ))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

// ---------------------------------------------------------------- .fis

pub fn parse_fis(path: &Path, text: &str) -> Result<FisParams<f64>> {
    let mut values = [f64::NAN; 12];
    let mut found = [false; 12];
    for (line, key, value) in key_values(path, text)? {
        let id = ParamId::from_key(&key).ok_or_else(|| Error::UnknownKey {
            path: path.to_path_buf(),
            key: key.clone(),
        })?;
        values[id.index()] = parse_number(path, line, &value)?;
        found[id.index()] = true;
    }
    if let Some(missing) = ParamId::ALL.into_iter().find(|id| !found[id.index()]) {
        return Err(parse_err(
            path,
            0,
            format!("missing parameter `{}`", missing.key()),
        ));
    }
    for id in [ParamId::Sigma1, ParamId::Sigma2] {
        if values[id.index()] < crate::fuzzy::SIGMA_MIN {
            log::warn!(
                "{}: {} = {} raised to the width floor {}",
                path.display(),
                id.key(),
                values[id.index()],
                crate::fuzzy::SIGMA_MIN
            );
        }
    }
    let fis = FisParams::from_array(values);
    for key in fis.degenerate_slopes() {
        log::warn!(
            "{}: {key} = 0 makes that membership constant 0.5",
            path.display()
        );
    }
    Ok(fis)
}

pub fn load_fis(path: impl AsRef<Path>) -> Result<FisParams<f64>> {
    let path = path.as_ref();
    parse_fis(path, &read(path)?)
}

pub fn format_fis(fis: &FisParams<f64>) -> String {
    let mut out = String::new();
    for id in ParamId::ALL {
        let _ = writeln!(out, "{} = {}", id.key(), fis.get(id));
    }
    out
}

pub fn save_fis(fis: &FisParams<f64>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &format_fis(fis))
}

// ---------------------------------------------------------------- .traj

pub fn parse_trajectory(path: &Path, text: &str) -> Result<TrajectorySpec> {
    let mut step_ds = None;
    let mut segments = Vec::new();
    for (line, content) in content_lines(text) {
        if let Some((k, v)) = content.split_once('=') {
            if k.trim() != "step_ds" {
                return Err(Error::UnknownKey {
                    path: path.to_path_buf(),
                    key: k.trim().to_string(),
                });
            }
            step_ds = Some(parse_length(path, line, v)?);
            continue;
        }
        let words: Vec<&str> = content.split_whitespace().collect();
        let seg = match words.as_slice() {
            ["straight", len] => Segment::Straight {
                length: parse_length(path, line, len)?,
            },
            ["arc", radius, sweep] => Segment::Arc {
                radius: parse_length(path, line, radius)?,
                sweep: parse_angle(path, line, sweep)?,
            },
            _ => {
                return Err(parse_err(
                    path,
                    line,
                    format!("unrecognized segment `{content}`"),
                ))
            }
        };
        segments.push(seg);
    }
    let spec = TrajectorySpec {
        segments,
        step_ds: step_ds.ok_or_else(|| parse_err(path, 0, "missing `step_ds`"))?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<TrajectorySpec> {
    let path = path.as_ref();
    parse_trajectory(path, &read(path)?)
}

// ---------------------------------------------------------------- .cfg

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: RobotGeometry<f64>,
    pub trajectory_path: PathBuf,
    pub trajectory: TrajectorySpec,
    pub noise: SimNoiseConfig,
    pub filter: FilterSettings,
    pub fis_path: PathBuf,
    pub runs: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            geometry: self.geometry,
            trajectory: self.trajectory.clone(),
            noise: self.noise,
            filter: self.filter,
        }
    }

    pub fn fis(&self) -> Result<FisParams<f64>> {
        load_fis(&self.fis_path)
    }
}

const CONFIG_KEYS: &[&str] = &[
    "geometry.wheel_diameter",
    "geometry.wheel_base",
    "geometry.gear_ratio",
    "geometry.encoder_resolution",
    "trajectory.file",
    "noise.sigma_ds",
    "noise.sigma_dtheta",
    "noise.meas_r",
    "filter.r_scale",
    "filter.p0",
    "adaptation.mode",
    "adaptation.window",
    "adaptation.r_floor",
    "fis.file",
    "runs",
    "seed",
];

pub fn parse_config(path: &Path, text: &str) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (line, key, value) in key_values(path, text)? {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::UnknownKey {
                path: path.to_path_buf(),
                key,
            });
        }
        entries.insert(key, (line, value));
    }
    let required = |key: &str| -> Result<&(usize, String)> {
        entries
            .get(key)
            .ok_or_else(|| parse_err(path, 0, format!("missing required key `{key}`")))
    };
    let length = |key: &str| -> Result<f64> {
        let (line, v) = required(key)?;
        parse_length(path, *line, v)
    };
    let number = |key: &str| -> Result<f64> {
        let (line, v) = required(key)?;
        parse_number(path, *line, v)
    };
    let integer = |key: &str, default: u64| -> Result<u64> {
        match entries.get(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| {
                parse_err(
                    path,
                    *line,
                    format!("`{key}` must be a non-negative integer"),
                )
            }),
        }
    };

    let geometry = RobotGeometry {
        wheel_diameter: length("geometry.wheel_diameter")?,
        wheel_base: length("geometry.wheel_base")?,
        gear_ratio: number("geometry.gear_ratio")?,
        encoder_resolution: number("geometry.encoder_resolution")?,
    };
    geometry.validate()?;

    let trajectory_path = resolve(path, &required("trajectory.file")?.1);
    let trajectory = load_trajectory(&trajectory_path)?;

    let noise = SimNoiseConfig {
        sigma_ds: length("noise.sigma_ds")?,
        sigma_dtheta: {
            let (line, v) = required("noise.sigma_dtheta")?;
            parse_angle(path, *line, v)?
        },
        meas_r: match entries.get("noise.meas_r") {
            Some((line, v)) => parse_triple(path, *line, v)?,
            None => Vector3::from(presets::MEASUREMENT_VARIANCES),
        },
    };
    noise.validate()?;

    let mut filter = FilterSettings::default();
    if let Some((line, v)) = entries.get("filter.r_scale") {
        filter.r_scale = parse_number(path, *line, v)?;
    }
    if let Some((line, v)) = entries.get("filter.p0") {
        filter.p0_diagonal = parse_triple(path, *line, v)?;
    }
    if let Some((line, v)) = entries.get("adaptation.mode") {
        filter.adapt_mode = match v.as_str() {
            "r" => AdaptMode::R,
            "q-experimental" => AdaptMode::QExperimental,
            other => {
                return Err(parse_err(
                    path,
                    *line,
                    format!("unknown adaptation mode `{other}`"),
                ))
            }
        };
    }
    filter.window = integer("adaptation.window", presets::WINDOW as u64)? as usize;
    if let Some((line, v)) = entries.get("adaptation.r_floor") {
        filter.r_floor = parse_number(path, *line, v)?;
    }
    filter.validate()?;

    let fis_path = resolve(path, &required("fis.file")?.1);
    if !fis_path.is_file() {
        return Err(Error::invalid(
            "fis.file",
            format!("{} does not exist", fis_path.display()),
        ));
    }

    let runs = integer("runs", 100)? as usize;
    if runs == 0 {
        return Err(Error::invalid("runs", "must be at least 1"));
    }

    Ok(RunConfig {
        geometry,
        trajectory_path,
        trajectory,
        noise,
        filter,
        fis_path,
        runs,
        seed: integer("seed", 0)?,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    parse_config(path, &read(path)?)
}

// ---------------------------------------------------------------- traces

fn push_fixed(out: &mut String, v: f64) {
    let _ = write!(out, ",{v:.9}");
}

pub fn format_trace(trace: &TrialTrace<f64>) -> String {
    let mut out = String::with_capacity(64 + trace.len() * 256);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let _ = write!(out, "{}", r.step);
        for p in [r.truth, r.dead_reckoned, r.estimate] {
            for v in [p.x, p.y, p.theta] {
                push_fixed(&mut out, v);
            }
        }
        for v in r.residual.iter().chain(r.r_diag.iter()) {
            push_fixed(&mut out, *v);
        }
        for j in 0..3 {
            push_fixed(&mut out, r.covariance[(j, j)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_trace(trace: &TrialTrace<f64>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &format_trace(trace))
}

/// Reads a trace file back. Only covariance diagonals are stored, so the
/// recovered covariance is diagonal.
pub fn read_trace(path: impl AsRef<Path>) -> Result<TrialTrace<f64>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRACE_HEADER => {}
        _ => return Err(parse_err(path, 1, "missing trace header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 19 {
            return Err(parse_err(
                path,
                n,
                format!("expected 19 columns, found {}", fields.len()),
            ));
        }
        let step = fields[0]
            .parse()
            .map_err(|_| parse_err(path, n, format!("invalid step `{}`", fields[0])))?;
        let v = fields[1..]
            .iter()
            .map(|f| parse_number(path, n, f))
            .collect::<Result<Vec<f64>>>()?;
        let pose = |k: usize| Pose {
            x: v[k],
            y: v[k + 1],
            theta: v[k + 2],
        };
        rows.push(TraceRow {
            step,
            truth: pose(0),
            dead_reckoned: pose(3),
            estimate: pose(6),
            residual: Vector3::new(v[9], v[10], v[11]),
            r_diag: Vector3::new(v[12], v[13], v[14]),
            covariance: Matrix3::from_diagonal(&Vector3::new(v[15], v[16], v[17])),
        });
    }
    Ok(TrialTrace { rows })
}

// ---------------------------------------------------------------- summary

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisTriple<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Clone> AxisTriple<T> {
    fn from_array(a: &[T; 3]) -> Self {
        Self {
            x: a[0].clone(),
            y: a[1].clone(),
            theta: a[2].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub rmse_mean: AxisTriple<f64>,
    pub rmse_series: AxisTriple<Vec<f64>>,
    pub nees_series: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub wheel_diameter: f64,
    pub wheel_base: f64,
    pub gear_ratio: f64,
    pub encoder_resolution: f64,
    pub trajectory_file: String,
    pub step_ds: f64,
    pub sigma_ds: f64,
    pub sigma_dtheta: f64,
    pub meas_r: [f64; 3],
    pub r_scale: f64,
    pub p0: [f64; 3],
    pub adaptation_mode: String,
    pub window: usize,
    pub r_floor: f64,
    pub fis_file: String,
    pub fis: BTreeMap<String, f64>,
}

/// On-disk form of a Monte Carlo summary. Keys are emitted in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub runs: usize,
    pub seed: u64,
    pub steps: usize,
    pub modes: BTreeMap<String, ModeReport>,
    pub config: ConfigEcho,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

impl SummaryReport {
    pub fn new(summary: &MonteCarloSummary, config: &RunConfig, fis: &FisParams<f64>) -> Self {
        let modes = summary
            .modes
            .iter()
            .map(|m| {
                let report = ModeReport {
                    rmse_mean: AxisTriple::from_array(&m.rmse_mean),
                    rmse_series: AxisTriple::from_array(&m.rmse_series),
                    nees_series: m
                        .nees_series
                        .iter()
                        .map(|v| v.is_finite().then_some(*v))
                        .collect(),
                };
                (m.mode.name().to_string(), report)
            })
            .collect();
        let f = &config.filter;
        Self {
            runs: summary.runs,
            seed: summary.base_seed,
            steps: summary.steps,
            modes,
            config: ConfigEcho {
                wheel_diameter: config.geometry.wheel_diameter,
                wheel_base: config.geometry.wheel_base,
                gear_ratio: config.geometry.gear_ratio,
                encoder_resolution: config.geometry.encoder_resolution,
                trajectory_file: file_name(&config.trajectory_path),
                step_ds: config.trajectory.step_ds,
                sigma_ds: config.noise.sigma_ds,
                sigma_dtheta: config.noise.sigma_dtheta,
                meas_r: config.noise.meas_r.into(),
                r_scale: f.r_scale,
                p0: f.p0_diagonal.into(),
                adaptation_mode: match f.adapt_mode {
                    AdaptMode::R => "r".into(),
                    AdaptMode::QExperimental => "q-experimental".into(),
                },
                window: f.window,
                r_floor: f.r_floor,
                fis_file: file_name(&config.fis_path),
                fis: ParamId::ALL
                    .iter()
                    .map(|id| (id.key().to_string(), fis.get(*id)))
                    .collect(),
            },
        }
    }
}

pub fn write_summary(report: &SummaryReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut json = serde_json::to_string_pretty(report).expect("summary serializes");
    json.push('\n');
    write(path, &json)
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<SummaryReport> {
    let path = path.as_ref();
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

// ---------------------------------------------------------------- training data

pub fn read_training_csv(path: impl AsRef<Path>) -> Result<TrainingSet<f64>> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRAINING_HEADER => {}
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("expected header `{TRAINING_HEADER}`"),
            ))
        }
    }
    let mut patterns = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let (d, r) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, n, "expected two columns"))?;
        if r.contains(',') {
            return Err(parse_err(path, n, "expected two columns"));
        }
        patterns.push((parse_number(path, n, d)?, parse_number(path, n, r)?));
    }
    TrainingSet::new(patterns)
}

pub fn write_training_csv(data: &TrainingSet<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(TRAINING_HEADER);
    out.push('\n');
    for (d, r) in data.patterns() {
        let _ = writeln!(out, "{d},{r}");
    }
    write(path.as_ref(), &out)
}

// ---------------------------------------------------------------- drivers

/// Runs one trial with the config's seed and writes `trace_<mode>.csv` into `out_dir`.
pub fn simulate(
    config: &RunConfig,
    mode: FilterMode,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fis = config.fis()?;
    let trace = run_trial(&config.scenario(), mode, &fis, config.seed)?;
    let path = out_dir.join(format!("trace_{}.csv", mode.name()));
    write_trace(&trace, &path)?;
    Ok(path)
}

/// Runs the paired Monte Carlo comparison and writes `summary.json` into `out_dir`.
pub fn compare(
    config: &RunConfig,
    runs: usize,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, SummaryReport)> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fis = config.fis()?;
    let summary = monte_carlo(
        &config.scenario(),
        &[FilterMode::Ekf, FilterMode::FnnEkf],
        &fis,
        runs,
        config.seed,
    )?;
    let report = SummaryReport::new(&summary, config, &fis);
    let path = out_dir.join("summary.json");
    write_summary(&report, &path)?;
    Ok((path, report))
}
