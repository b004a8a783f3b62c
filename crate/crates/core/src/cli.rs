//! Scenario runner behind the `levixcorr` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimate::{expected_welch, fit_band, relative_rms, simulated_welch, FitResult, WelchConfig, WelchSpectra};
use crate::model::{build_system, DirectedForce, Misalignment, NamedOffset, SystemConfig, SystemParams, TrapOffset};
use crate::numerics::linspace;
use crate::response::{cancellation_offset, rotation_angle_phi};
use crate::simulate::{detector_projection, integrate_trace, params_hash, SimConfig, Trace};
use crate::spectra::{
    classical_one_sided_at, cross_cooperativity, directed_force_xcorr, effective_occupancy, gamma_opt, masking_ratio,
    peak_ratio, shot_noise_xcorr, PeakRatio, SpectraBundle,
};

/// Cooled occupancy below which the classical simulator is not trusted.
pub const CLASSICAL_OCCUPANCY: f64 = 100.0;

/// Scenario files shipped with the crate, addressable by name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("fig2_p1e-4", include_str!("../scenarios/fig2_p1e-4.json")),
    ("fig2_p1e-3", include_str!("../scenarios/fig2_p1e-3.json")),
    ("fig3_p5e-7", include_str!("../scenarios/fig3_p5e-7.json")),
    ("fig3_p1e-6", include_str!("../scenarios/fig3_p1e-6.json")),
];

#[derive(Debug, Parser)]
#[command(
    name = "levixcorr",
    version,
    about = "Cross-correlation spectra of a cavity-levitated nanoparticle"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a scenario (path or bundled name) and write spectra and metadata.
    Run {
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Write simulated detector-frame traces for every seed of a scenario.
    Simulate {
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate detector misalignment from traces or from a simulated scenario.
    Calibrate {
        /// Directory of `.lvx` trace files.
        #[arg(long, conflicts_with = "simulate", required_unless_present = "simulate")]
        traces: Option<PathBuf>,
        /// Scenario to simulate and calibrate.
        #[arg(long)]
        simulate: Option<String>,
        /// Scenario describing the traces, used for the fit band and segment length.
        #[arg(long, requires = "traces")]
        config: Option<String>,
        #[arg(long)]
        segment_length: Option<usize>,
        /// Also fit the mode rotation on the uncorrected spectra.
        #[arg(long)]
        rotation: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a scenario over a range of one parameter.
    Sweep {
        /// Dotted path into the scenario, e.g. `system.pressure_mbar`.
        #[arg(long)]
        param: String,
        /// `start:stop:points`.
        #[arg(long)]
        range: String,
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// Relative RMS deviation between two spectra tables with the same config hash.
    Compare {
        left: PathBuf,
        right: PathBuf,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// First simulation seed, overriding the scenario.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Analytic,
    Simulate,
    Both,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceConfig {
    #[serde(default)]
    pub psi_deg: f64,
    #[serde(default)]
    pub beta2: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisalignmentConfig {
    #[serde(default)]
    pub beta_err_x_deg: f64,
    #[serde(default)]
    pub beta_err_y_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start_khz: f64,
    pub stop_khz: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default = "d_seeds")]
    pub seeds: u64,
    #[serde(default = "d_first_seed")]
    pub first_seed: u64,
    #[serde(default = "d_duration")]
    pub duration_ms: f64,
    #[serde(default = "d_dt")]
    pub dt_ns: f64,
    pub segment_length: Option<usize>,
}

fn d_seeds() -> u64 {
    4
}
fn d_first_seed() -> u64 {
    1
}
fn d_duration() -> f64 {
    100.0
}
fn d_dt() -> f64 {
    245.0
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            seeds: d_seeds(),
            first_seed: d_first_seed(),
            duration_ms: d_duration(),
            dt_ns: d_dt(),
            segment_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub overrides: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub force: ForceConfig,
    #[serde(default)]
    pub misalignment: MisalignmentConfig,
    pub grid: GridSpec,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

/// Scenario text with its origin, for line-addressed errors.
#[derive(Debug, Clone)]
pub struct Source {
    pub text: String,
    pub origin: String,
}

impl Source {
    /// Reads a file, falling back to a bundled scenario of that name.
    pub fn load(name: &str) -> Result<Source> {
        let path = Path::new(name);
        if !path.exists() {
            if let Some((_, text)) = BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name) {
                return Ok(Source {
                    text: text.to_string(),
                    origin: format!("<bundled {name}>"),
                });
            }
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Source {
            text,
            origin: name.to_string(),
        })
    }

    fn error_at(&self, key: &str, msg: String) -> Error {
        let needle = format!("\"{key}\"");
        let (line, column) = self
            .text
            .lines()
            .enumerate()
            .find_map(|(i, l)| l.find(&needle).map(|c| (i + 1, c + 1)))
            .unwrap_or((1, 1));
        Error::ConfigParse {
            origin: self.origin.clone(),
            line,
            column,
            msg,
        }
    }

    fn parse_error(&self, e: serde_json::Error) -> Error {
        Error::ConfigParse {
            origin: self.origin.clone(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

/// One fully specified evaluation: a scenario with a variant applied.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub label: Option<String>,
    pub scenario: Scenario,
    pub hash: String,
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                merge(d.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (d, s) => *d = s.clone(),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        if k.is_empty() {
            return Err(Error::Config(format!("bad parameter path '{path}'")));
        }
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::Config(format!("'{path}' does not name a scenario field"))),
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn prepare_one(src: &Source, value: Value, label: Option<String>, seed: Option<u64>) -> Result<Prepared> {
    let mut scenario: Scenario = serde_json::from_value(value).map_err(|e| match &label {
        Some(l) => src.error_at(l, format!("variant '{l}': {e}")),
        None => Error::Config(e.to_string()),
    })?;
    scenario.variants.clear();
    if let Some(s) = seed {
        scenario.simulation.first_seed = s;
    }
    validate(&scenario, src)?;
    let mut id = serde_json::to_vec(&scenario).expect("scenario serialises");
    id.extend(label.as_deref().unwrap_or("").as_bytes());
    Ok(Prepared {
        label,
        scenario,
        hash: hash_hex(&id),
    })
}

fn validate(s: &Scenario, src: &Source) -> Result<()> {
    let bad = |key: &str, msg: &str| Err(src.error_at(key, format!("{}: {msg}", s.name)));
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return bad("name", "name must be a non-empty file name");
    }
    if s.grid.points == 0 {
        return bad("points", "grid needs at least one point");
    }
    if !(s.grid.start_khz > 0.0 && s.grid.stop_khz.is_finite()) {
        return bad("start_khz", "grid must start above zero");
    }
    if s.grid.points > 1 && s.grid.stop_khz <= s.grid.start_khz {
        return bad("stop_khz", "grid stop must exceed start");
    }
    if !(0.0..=1.0).contains(&s.force.beta2) {
        return bad("beta2", "beta2 must lie in [0, 1]");
    }
    if !s.force.psi_deg.is_finite() {
        return bad("psi_deg", "psi_deg must be finite");
    }
    if s.mode != Mode::Analytic {
        if s.simulation.seeds == 0 {
            return bad("seeds", "at least one seed is required");
        }
        if !(s.simulation.dt_ns > 0.0) {
            return bad("dt_ns", "time step must be positive");
        }
        if !(s.simulation.duration_ms > 0.0) {
            return bad("duration_ms", "duration must be positive");
        }
    }
    Ok(())
}

/// Expands a scenario into its variants (or itself when it has none).
pub fn prepare(src: &Source, seed: Option<u64>) -> Result<Vec<Prepared>> {
    let base: Scenario = serde_json::from_str(&src.text).map_err(|e| src.parse_error(e))?;
    let mut root: Value = serde_json::from_str(&src.text).map_err(|e| src.parse_error(e))?;
    if let Value::Object(m) = &mut root {
        m.remove("variants");
    }
    if base.variants.is_empty() {
        return Ok(vec![prepare_one(src, root, None, seed)?]);
    }
    let mut labels = std::collections::BTreeSet::new();
    base.variants
        .iter()
        .map(|v| {
            if v.label.is_empty() || v.label.contains(['/', '\\']) || !labels.insert(v.label.clone()) {
                return Err(src.error_at(&v.label, format!("variant label '{}' is empty or repeated", v.label)));
            }
            let mut value = root.clone();
            merge(&mut value, &v.overrides);
            prepare_one(src, value, Some(v.label.clone()), seed)
        })
        .collect()
}

/// A prepared scenario turned into model objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub prepared: Prepared,
    pub params: SystemParams,
    pub offset_lambda: f64,
    pub cancellation: Option<f64>,
    pub force: DirectedForce,
    pub misalignment: Misalignment,
    pub grid: Vec<f64>,
}

pub fn resolve(prepared: &Prepared) -> Result<Resolved> {
    let s = &prepared.scenario;
    let template = build_system(&s.system.env(0.2), &s.system.spec())?;
    let cancellation = cancellation_offset(&template).ok().map(|c| c.offset_lambda);
    let offset_lambda = match s.system.trap_offset_lambda {
        TrapOffset::Lambda(x) => x,
        TrapOffset::Named(NamedOffset::Node) => 0.25,
        TrapOffset::Named(NamedOffset::Cancellation) => cancellation_offset(&template)?.offset_lambda,
    };
    let params = build_system(&s.system.env(offset_lambda), &s.system.spec())?;
    let force = DirectedForce::new(params.gamma, s.force.beta2, s.force.psi_deg.to_radians())?;
    let misalignment = Misalignment::new(
        rotation_angle_phi(&params)?,
        s.misalignment.beta_err_x_deg.to_radians(),
        s.misalignment.beta_err_y_deg.to_radians(),
    )?;
    let tp = 2.0 * std::f64::consts::PI * 1e3;
    let grid = linspace(tp * s.grid.start_khz, tp * s.grid.stop_khz, s.grid.points);
    Ok(Resolved {
        prepared: prepared.clone(),
        params,
        offset_lambda,
        cancellation,
        force,
        misalignment,
        grid,
    })
}

/// Named columns sharing one frequency axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub config_hash: Option<String>,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

const AXIS_COLUMNS: [&str; 2] = ["freq_khz", "omega_rad_s"];

impl Table {
    fn on_axis(omega: &[f64], hash: &str) -> Table {
        let tp = 2.0 * std::f64::consts::PI * 1e3;
        Table {
            config_hash: Some(hash.to_string()),
            columns: vec![
                Column {
                    name: AXIS_COLUMNS[0].into(),
                    values: omega.iter().map(|w| w / tp).collect(),
                },
                Column {
                    name: AXIS_COLUMNS[1].into(),
                    values: omega.to_vec(),
                },
            ],
        }
    }

    fn push(&mut self, name: &str, values: Vec<f64>) {
        self.columns.push(Column {
            name: name.into(),
            values,
        });
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "# config_hash: {h}");
        }
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        let _ = writeln!(s, "{}", names.join(","));
        let rows = self.columns.first().map_or(0, |c| c.values.len());
        for i in 0..rows {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{:e}", c.values[i])).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Table> {
        let mut hash = None;
        let mut lines = text.lines().filter(|l| {
            if let Some(h) = l.strip_prefix("# config_hash:") {
                hash = Some(h.trim().to_string());
            }
            !l.starts_with('#') && !l.trim().is_empty()
        });
        let header = lines.next().ok_or_else(|| Error::Format("missing CSV header".into()))?;
        let mut columns: Vec<Column> = header
            .split(',')
            .map(|n| Column {
                name: n.trim().to_string(),
                values: Vec::new(),
            })
            .collect();
        for (row, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::Format(format!("row {} has {} cells", row + 1, cells.len())));
            }
            for (c, cell) in columns.iter_mut().zip(cells) {
                let v = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number '{cell}'", row + 1)))?;
                c.values.push(v);
            }
        }
        Ok(Table {
            config_hash: hash,
            columns,
        })
    }

    pub fn load(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        } else {
            Table::from_csv(&text)
        }
    }

    fn render(&self, stem: &str, format: Format) -> (PathBuf, Vec<u8>) {
        match format {
            Format::Csv => (PathBuf::from(format!("{stem}.csv")), self.to_csv().into_bytes()),
            Format::Json => (PathBuf::from(format!("{stem}.json")), to_json(self)),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serialises");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub n_bins: usize,
    /// `‖left − right‖/‖right‖` per shared column.
    pub relative_rms: std::collections::BTreeMap<String, f64>,
}

/// Compares two tables column by column; refuses tables from different configs.
pub fn compare_tables(left: &Table, right: &Table) -> Result<Comparison> {
    let (l, r) = match (&left.config_hash, &right.config_hash) {
        (Some(l), Some(r)) => (l, r),
        _ => return Err(Error::Format("table carries no config hash".into())),
    };
    if l != r {
        return Err(Error::HashMismatch {
            left: l.clone(),
            right: r.clone(),
        });
    }
    if left.column("omega_rad_s") != right.column("omega_rad_s") {
        return Err(Error::Domain("tables are on different frequency grids".into()));
    }
    let mut relative_rms = std::collections::BTreeMap::new();
    for c in &left.columns {
        if AXIS_COLUMNS.contains(&c.name.as_str()) {
            continue;
        }
        if let Some(other) = right.column(&c.name) {
            relative_rms.insert(c.name.clone(), relative_rms_or_nan(&c.values, other));
        }
    }
    Ok(Comparison {
        config_hash: l.clone(),
        n_bins: left.columns.first().map_or(0, |c| c.values.len()),
        relative_rms,
    })
}

fn relative_rms_or_nan(a: &[f64], b: &[f64]) -> f64 {
    relative_rms(a, b).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SimulationSummary {
    seeds: u64,
    first_seed: u64,
    dt: f64,
    duration: f64,
    segment_length: usize,
    n_segments: usize,
    band_rad_s: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Metadata {
    name: String,
    label: Option<String>,
    config_hash: String,
    mode: Mode,
    params: SystemParams,
    force: DirectedForce,
    trap_offset_lambda: f64,
    cancellation_offset_lambda: Option<f64>,
    phi_rad: f64,
    a_x: f64,
    a_y: f64,
    cross_cooperativity: f64,
    gamma_opt_rad_s: f64,
    gamma_opt_over_splitting: f64,
    peak_ratio: PeakRatio,
    masking_ratio: [f64; 2],
    effective_occupancy: f64,
    simulation: Option<SimulationSummary>,
    notice: Option<String>,
}

type Outputs = Vec<(PathBuf, Vec<u8>)>;

fn one_sided_columns(res: &Resolved, omega: &[f64], smear: Option<(f64, &WelchConfig)>) -> [Vec<f64>; 3] {
    let (p, f) = (&res.params, &res.force);
    let (bx, by) = (res.misalignment.beta_err_x, res.misalignment.beta_err_y);
    let channel = |k: usize| {
        move |w: f64| {
            let (xx, yy, xy) = classical_one_sided_at(w, p, f);
            detector_one_sided(xx, yy, xy, bx, by)[k]
        }
    };
    let eval = |k: usize| match smear {
        Some((dt, cfg)) => expected_welch(channel(k), omega, dt, cfg),
        None => omega.iter().map(|&w| channel(k)(w)).collect(),
    };
    [eval(0), eval(1), eval(2)]
}

/// One-sided spectra seen through `x̂ = x + β_x y`, `ŷ = y − β_y x`.
pub fn detector_one_sided(sxx: f64, syy: f64, sxy: f64, bx: f64, by: f64) -> [f64; 3] {
    [
        sxx + 2.0 * bx * sxy + bx * bx * syy,
        syy - 2.0 * by * sxy + by * by * sxx,
        (1.0 - bx * by) * sxy + bx * syy - by * sxx,
    ]
}

fn sim_config(s: &SimulationSpec) -> SimConfig {
    SimConfig::new(s.dt_ns * 1e-9, s.duration_ms * 1e-3, s.first_seed)
}

fn welch_for(res: &Resolved, dt: f64) -> Result<WelchConfig> {
    match res.prepared.scenario.simulation.segment_length {
        Some(n) => {
            let c = WelchConfig::new(n);
            c.validate()?;
            Ok(c)
        }
        None => WelchConfig::for_params(&res.params, &res.force, dt),
    }
}

fn run_resolved(res: &Resolved, format: Format) -> Result<Outputs> {
    let s = &res.prepared.scenario;
    let hash = &res.prepared.hash;
    let (p, f) = (&res.params, &res.force);
    let gopt = gamma_opt(p, f)?;
    let n_eff = effective_occupancy(p, f)?;
    let mut out = Outputs::new();
    let mut notice = None;

    if s.mode != Mode::Simulate {
        let bundle = SpectraBundle::compute(&res.grid, p, f, &res.misalignment)?;
        let mut t = Table::on_axis(&res.grid, hash);
        let rot: Vec<f64> = (0..res.grid.len())
            .map(|i| res.misalignment.phi * (bundle.s_yy.values[i] - bundle.s_xx.values[i]))
            .collect();
        t.push("s_xx", bundle.s_xx.values);
        t.push("s_yy", bundle.s_yy.values);
        t.push("s_xy_lab", bundle.s_xy_lab.values);
        t.push("s_qn", shot_noise_xcorr(&res.grid, p)?.values);
        t.push("s_fxfy", directed_force_xcorr(&res.grid, p, f)?.values);
        t.push("s_xy_rotation", rot);
        t.push("s_xy_detector", bundle.s_xy_detector.values);
        out.push(t.render("spectra", format));

        let [a, b, c] = one_sided_columns(res, &res.grid, None);
        let mut t = Table::on_axis(&res.grid, hash);
        t.push("s_xx", a);
        t.push("s_yy", b);
        t.push("s_xy", c);
        out.push(t.render("one_sided", format));
    }

    let mut simulation = None;
    if s.mode != Mode::Analytic {
        if n_eff <= CLASSICAL_OCCUPANCY {
            let msg = format!(
                "cooled occupancy {n_eff:.3} is below the classical threshold {CLASSICAL_OCCUPANCY}; simulation skipped"
            );
            eprintln!("notice: {}: {msg}", s.name);
            notice = Some(msg);
        } else {
            let cfg = sim_config(&s.simulation);
            let welch = welch_for(res, cfg.dt)?;
            let est = simulated_welch(p, f, &cfg, s.simulation.seeds, Some(&res.misalignment), &welch)?;
            let (lo, hi) = (res.grid[0], res.grid[res.grid.len() - 1]);
            let band = fit_band(p, f)?;
            let idx: Vec<usize> = (0..est.s_xx.len())
                .filter(|&i| {
                    let w = est.s_xx.freq_grid[i];
                    w >= lo.max(band.0) && w <= hi.min(band.1)
                })
                .collect();
            if idx.is_empty() {
                return Err(Error::Config(format!(
                    "{}: no Welch bins fall inside the grid and the resonance band",
                    s.name
                )));
            }
            let bins: Vec<f64> = idx.iter().map(|&i| est.s_xx.freq_grid[i]).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let mut sim = Table::on_axis(&bins, hash);
            sim.push("s_xx", pick(&est.s_xx.values));
            sim.push("s_yy", pick(&est.s_yy.values));
            sim.push("s_xy", pick(&est.s_xy.values));
            out.push(sim.render("simulated", format));
            if s.mode == Mode::Both {
                let [a, b, c] = one_sided_columns(res, &bins, Some((cfg.dt, &welch)));
                let mut exp = Table::on_axis(&bins, hash);
                exp.push("s_xx", a);
                exp.push("s_yy", b);
                exp.push("s_xy", c);
                let cmp = compare_tables(&sim, &exp)?;
                out.push(exp.render("expected", format));
                out.push((PathBuf::from("comparison.json"), to_json(&cmp)));
            }
            simulation = Some(SimulationSummary {
                seeds: s.simulation.seeds,
                first_seed: s.simulation.first_seed,
                dt: cfg.dt,
                duration: cfg.duration,
                segment_length: welch.segment_length,
                n_segments: est.n_segments,
                band_rad_s: (bins[0], bins[bins.len() - 1]),
            });
        }
    }

    let meta = Metadata {
        name: s.name.clone(),
        label: res.prepared.label.clone(),
        config_hash: hash.clone(),
        mode: s.mode,
        params: *p,
        force: *f,
        trap_offset_lambda: res.offset_lambda,
        cancellation_offset_lambda: res.cancellation,
        phi_rad: res.misalignment.phi,
        a_x: res.misalignment.a_x(),
        a_y: res.misalignment.a_y(),
        cross_cooperativity: cross_cooperativity(p)?,
        gamma_opt_rad_s: gopt,
        gamma_opt_over_splitting: gopt / (p.omega_x - p.omega_y).abs(),
        peak_ratio: peak_ratio(p, f)?,
        masking_ratio: masking_ratio(p, f, res.misalignment.phi)?,
        effective_occupancy: n_eff,
        simulation,
        notice,
    };
    out.push((PathBuf::from("metadata.json"), to_json(&meta)));
    Ok(out)
}

fn variant_dir(base: &Path, p: &Prepared) -> PathBuf {
    let dir = base.join(&p.scenario.name);
    match &p.label {
        Some(l) => dir.join(l),
        None => dir,
    }
}

fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Evaluates every variant and only then writes, so a failure leaves no files behind.
fn run_prepared(list: &[Prepared], common: &Common) -> Result<Vec<PathBuf>> {
    let resolved: Vec<Resolved> = list.iter().map(resolve).collect::<Result<_>>()?;
    let outputs: Vec<Outputs> = resolved
        .par_iter()
        .map(|r| run_resolved(r, common.format))
        .collect::<Result<_>>()?;
    let mut files = Vec::new();
    for (r, outs) in resolved.iter().zip(outputs) {
        let dir = variant_dir(&common.out, &r.prepared);
        files.extend(outs.into_iter().map(|(p, b)| (dir.join(p), b)));
    }
    write_all(&files)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn run_scenario(scenario: &str, common: &Common) -> Result<Vec<PathBuf>> {
    let src = Source::load(scenario)?;
    run_prepared(&prepare(&src, common.seed)?, common)
}

fn parse_range(range: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = range.split(':').collect();
    let bad = || Error::Config(format!("range '{range}' is not start:stop:points"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    Ok(linspace(a, b, n))
}

pub fn run_sweep(param: &str, range: &str, scenario: &str, common: &Common) -> Result<Vec<PathBuf>> {
    let values = parse_range(range)?;
    let src = Source::load(scenario)?;
    let mut root: Value = serde_json::from_str(&src.text).map_err(|e| src.parse_error(e))?;
    if let Value::Object(m) = &mut root {
        if m.remove("variants").is_some() {
            eprintln!("notice: sweep ignores the variants of {}", src.origin);
        }
    }
    let list: Vec<Prepared> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let mut value = root.clone();
            let num = serde_json::Number::from_f64(v).ok_or_else(|| Error::Config("non-finite sweep value".into()))?;
            set_path(&mut value, param, Value::Number(num))?;
            let label = format!("sweep_{k:03}");
            let mut p = prepare_one(&src, value, Some(label.clone()), common.seed).map_err(|e| match e {
                Error::ConfigParse { msg, .. } => Error::Config(format!("{param} = {v}: {msg}")),
                other => other,
            })?;
            p.label = Some(label);
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let resolved: Vec<Resolved> = list.iter().map(resolve).collect::<Result<_>>()?;
    let mut files = run_prepared(&list, common)?;
    let mut summary = Table {
        config_hash: Some(hash_hex(
            list.iter().map(|p| p.hash.as_str()).collect::<String>().as_bytes(),
        )),
        columns: Vec::new(),
    };
    let mut cols: [Vec<f64>; 6] = Default::default();
    for r in &resolved {
        let (p, f) = (&r.params, &r.force);
        let g = gamma_opt(p, f)?;
        let pr = peak_ratio(p, f)?;
        for (c, v) in cols.iter_mut().zip([
            r.misalignment.phi,
            cross_cooperativity(p)?,
            g,
            g / (p.omega_x - p.omega_y).abs(),
            pr.measured,
            pr.estimate,
        ]) {
            c.push(v);
        }
    }
    summary.push(param, values);
    for (name, c) in [
        "phi_rad",
        "cross_cooperativity",
        "gamma_opt_rad_s",
        "gamma_opt_over_splitting",
        "peak_ratio_measured",
        "peak_ratio_estimate",
    ]
    .into_iter()
    .zip(cols)
    {
        summary.push(name, c);
    }
    let dir = common.out.join(&list[0].scenario.name);
    let (name, bytes) = summary.render("sweep_summary", common.format);
    let path = dir.join(name);
    write_all(&[(path.clone(), bytes)])?;
    files.push(path);
    Ok(files)
}

pub fn run_simulate(scenario: &str, common: &Common) -> Result<Vec<PathBuf>> {
    let src = Source::load(scenario)?;
    let list = prepare(&src, common.seed)?;
    let resolved: Vec<Resolved> = list.iter().map(resolve).collect::<Result<_>>()?;
    let mut written = Vec::new();
    for r in &resolved {
        let s = &r.prepared.scenario.simulation;
        let dir = variant_dir(&common.out, &r.prepared).join("traces");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for k in 0..s.seeds {
            let cfg = SimConfig {
                seed: s.first_seed.wrapping_add(k),
                ..sim_config(s)
            };
            let lab = integrate_trace(&r.params, &r.force, &cfg, None)?;
            let det = detector_projection(&lab, &r.misalignment, None)?;
            let path = dir.join(format!("seed_{}.lvx", cfg.seed));
            det.save(&path)?;
            written.push(path);
        }
        let manifest = serde_json::json!({
            "config_hash": r.prepared.hash,
            "params_hash": params_hash(&r.params, &r.force),
            "dt": s.dt_ns * 1e-9,
            "duration": s.duration_ms * 1e-3,
            "seeds": s.seeds,
            "first_seed": s.first_seed,
        });
        let path = dir.join("manifest.json");
        write_all(&[(path.clone(), to_json(&manifest))])?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub config_hash: String,
    pub source: String,
    pub n_segments: usize,
    pub band_rad_s: (f64, f64),
    pub misalignment: FitResult,
    pub rotation: Option<FitResult>,
    /// Injected values when the spectra come from a simulation.
    pub injected: Option<Misalignment>,
}

fn calibrate_spectra(
    est: &WelchSpectra,
    band: (f64, f64),
    rotation: bool,
    hash: &str,
    source: String,
    injected: Option<Misalignment>,
    format: Format,
) -> Result<Outputs> {
    let mis = est.fit_misalignment(Some(band))?;
    let rot = if rotation {
        Some(est.fit_rotation(Some(band))?)
    } else {
        None
    };
    let (ax, ay) = (mis.get("a_x"), mis.get("a_y"));
    let idx: Vec<usize> = (0..est.s_xx.len())
        .filter(|&i| est.s_xx.freq_grid[i] >= band.0 && est.s_xx.freq_grid[i] <= band.1)
        .collect();
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let bins = pick(&est.s_xx.freq_grid);
    let (sxx, syy, sxy) = (pick(&est.s_xx.values), pick(&est.s_yy.values), pick(&est.s_xy.values));
    let corrected: Vec<f64> = (0..bins.len()).map(|i| sxy[i] - ax * syy[i] + ay * sxx[i]).collect();
    let mut t = Table::on_axis(&bins, hash);
    t.push("s_xx", sxx);
    t.push("s_yy", syy);
    t.push("s_xy", sxy);
    t.push("s_xy_corrected", corrected);
    let report = CalibrationReport {
        config_hash: hash.to_string(),
        source,
        n_segments: est.n_segments,
        band_rad_s: band,
        misalignment: mis,
        rotation: rot,
        injected,
    };
    Ok(vec![
        (PathBuf::from("calibration.json"), to_json(&report)),
        t.render("corrected", format),
    ])
}

pub fn run_calibrate(
    traces: Option<&Path>,
    simulate: Option<&str>,
    config: Option<&str>,
    segment_length: Option<usize>,
    rotation: bool,
    common: &Common,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if let Some(name) = simulate {
        let src = Source::load(name)?;
        let list = prepare(&src, common.seed)?;
        for prepared in &list {
            let r = resolve(prepared)?;
            let s = &prepared.scenario.simulation;
            let cfg = sim_config(s);
            let welch = match segment_length {
                Some(n) => WelchConfig::new(n),
                None => welch_for(&r, cfg.dt)?,
            };
            let est = simulated_welch(&r.params, &r.force, &cfg, s.seeds, Some(&r.misalignment), &welch)?;
            let band = fit_band(&r.params, &r.force)?;
            let outs = calibrate_spectra(
                &est,
                band,
                rotation,
                &prepared.hash,
                format!("simulated {}", src.origin),
                Some(r.misalignment),
                common.format,
            )?;
            let dir = variant_dir(&common.out, prepared).join("calibration");
            files.extend(outs.into_iter().map(|(p, b)| (dir.join(p), b)));
        }
    } else if let Some(dir) = traces {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<PathBuf> = entries
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "lvx"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no .lvx traces in {}", dir.display())));
        }
        let resolved = match config {
            Some(c) => {
                let list = prepare(&Source::load(c)?, None)?;
                Some(resolve(&list[0])?)
            }
            None => None,
        };
        let mut parts = Vec::new();
        let mut hashes = String::new();
        for path in &paths {
            let trace = Trace::load(path)?;
            let welch = match (segment_length, &resolved) {
                (Some(n), _) => WelchConfig::new(n),
                (None, Some(r)) => welch_for(r, trace.dt)?,
                (None, None) => WelchConfig::new(crate::simulate::MIN_SPECTRAL_LEN),
            };
            parts.push(crate::estimate::welch_spectra(&trace, &welch)?);
            let _ = write!(hashes, "{:016x}", trace.params_hash);
        }
        let est = WelchSpectra::combine(&parts)?;
        let band = match &resolved {
            Some(r) => fit_band(&r.params, &r.force)?,
            None => {
                let g = &est.s_xx.freq_grid;
                (g[1], g[g.len() - 2])
            }
        };
        let hash = match &resolved {
            Some(r) => r.prepared.hash.clone(),
            None => hash_hex(hashes.as_bytes()),
        };
        let outs = calibrate_spectra(
            &est,
            band,
            rotation,
            &hash,
            format!("{} traces in {}", paths.len(), dir.display()),
            None,
            common.format,
        )?;
        files.extend(
            outs.into_iter()
                .map(|(p, b)| (common.out.join("calibration").join(p), b)),
        );
    } else {
        return Err(Error::Config("calibrate needs --traces or --simulate".into()));
    }
    write_all(&files)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn run_compare(left: &Path, right: &Path, out: Option<&Path>) -> Result<Comparison> {
    let cmp = compare_tables(&Table::load(left)?, &Table::load(right)?)?;
    let bytes = to_json(&cmp);
    match out {
        Some(p) => write_all(&[(p.to_path_buf(), bytes)])?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(cmp)
}

/// Dispatches a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let files = match &cli.command {
        Command::Run { scenario, common } => run_scenario(scenario, common)?,
        Command::Simulate { scenario, common } => run_simulate(scenario, common)?,
        Command::Calibrate {
            traces,
            simulate,
            config,
            segment_length,
            rotation,
            common,
        } => run_calibrate(
            traces.as_deref(),
            simulate.as_deref(),
            config.as_deref(),
            *segment_length,
            *rotation,
            common,
        )?,
        Command::Sweep {
            param,
            range,
            scenario,
            common,
        } => run_sweep(param, range, scenario, common)?,
        Command::Compare { left, right, out } => {
            run_compare(left, right, out.as_deref())?;
            Vec::new()
        }
    };
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_deep() {
        let mut a = serde_json::json!({"system": {"pressure_mbar": 1e-4, "g_x_khz": 14.0}, "name": "a"});
        merge(&mut a, &serde_json::json!({"system": {"pressure_mbar": 1e-3}}));
        assert_eq!(a["system"]["pressure_mbar"], 1e-3);
        assert_eq!(a["system"]["g_x_khz"], 14.0);
        set_path(&mut a, "force.psi_deg", serde_json::json!(30.0)).unwrap();
        assert_eq!(a["force"]["psi_deg"], 30.0);
        assert!(set_path(&mut a, "name.x", serde_json::json!(1.0)).is_err());
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_range("0:1").is_err());
        assert!(parse_range("0:1:0").is_err());
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::on_axis(&[1.0, 2.0 + 1e-13], "abc");
        t.push("s", vec![0.1, 1.0 / 3.0]);
        let back = Table::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED_SCENARIOS {
            let src = Source {
                text: text.to_string(),
                origin: name.to_string(),
            };
            let list = prepare(&src, None).unwrap();
            assert!(!list.is_empty());
            for p in &list {
                resolve(p).unwrap();
            }
        }
    }

    #[test]
    fn validation_errors_carry_lines() {
        let src = Source {
            text: "{\n  \"name\": \"x\",\n  \"grid\": {\"start_khz\": 100, \"stop_khz\": 150,\n   \"points\": 0}\n}"
                .into(),
            origin: "t.json".into(),
        };
        match prepare(&src, None) {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let src = Source {
            text: "{\"name\": \"x\", \"grid\": {\"start_khz\": 1, \"stop_khz\": 2, \"points\": 3}, \"bogus\": 1}"
                .into(),
            origin: "t.json".into(),
        };
        assert!(matches!(prepare(&src, None), Err(Error::ConfigParse { .. })));
    }

    #[test]
    fn detector_projection_is_first_order_misalignment() {
        let [xx, yy, xy] = detector_one_sided(2.0, 3.0, 0.0, 0.01, 0.02);
        assert!((xy - (0.01 * 3.0 - 0.02 * 2.0)).abs() < 1e-15);
        assert!((xx - (2.0 + 1e-4 * 3.0)).abs() < 1e-15);
        assert!((yy - (3.0 + 4e-4 * 2.0)).abs() < 1e-15);
    }
}
