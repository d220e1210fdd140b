//! Experiment records, reactor configurations and the derivation of
//! simulation inputs from them.
//!
//! Experiment files are small CSV tables. The delimiter is sniffed from the
//! header line: `;` and tab-separated files may use decimal commas (as the
//! tables are usually copied from spreadsheets), comma-separated files must
//! use decimal points. Temperatures are read in °C and gauge pressures in
//! bar; records store SI units (K, Pa).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::species::{Species, N_SPECIES};

/// Standard atmosphere [Pa].
pub const ATMOSPHERE: f64 = 101_325.0;
/// Offset between °C and K.
pub const CELSIUS_OFFSET: f64 = 273.15;
/// Pa per bar.
pub const PA_PER_BAR: f64 = 1.0e5;
/// Back-pressure of every mixer run [Pa gauge].
pub const MIXER_GAUGE_PRESSURE: f64 = 1.4e5;

pub const MIXER_COLUMNS: [&str; 3] = ["residence_time_s", "temperature_C", "band_area_au"];
pub const CALORIMETER_COLUMNS: [&str; 5] = [
    "residence_time_s",
    "temperature_C",
    "pressure_gauge_bar",
    "heat_total_W",
    "gas_flow_ml_min",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("invalid reactor configuration: {0}")]
    Reactor(String),
    #[error("experiment is a {record:?} run but reactor `{reactor}` is a {expected:?} setup")]
    SetupMismatch {
        record: Setup,
        expected: Setup,
        reactor: String,
    },
    #[error("invalid experiment record: {0}")]
    Record(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Mixer,
    Calorimeter,
}

impl Setup {
    pub fn as_str(self) -> &'static str {
        match self {
            Setup::Mixer => "mixer",
            Setup::Calorimeter => "calorimeter",
        }
    }
}

impl std::str::FromStr for Setup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mixer" => Ok(Setup::Mixer),
            "calorimeter" => Ok(Setup::Calorimeter),
            other => Err(format!("unknown setup `{other}`")),
        }
    }
}

/// Geometry, feed and zone layout of one flow reactor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReactorConfig {
    pub name: String,
    pub setup: Setup,
    /// [m³]
    pub volume: f64,
    /// [m²]
    pub cross_section_area: f64,
    /// `volume / cross_section_area` [m]
    pub length: f64,
    pub n_zones: usize,
    /// `n_zones + 1` axial positions from 0 to `length` [m].
    pub zone_bounds: Vec<f64>,
    /// Aminoacetonitrile hydrochloride in feed A [mol/m³].
    pub feed_concentration_educt_a: f64,
    /// Sodium nitrite in feed B [mol/m³].
    pub feed_concentration_educt_b: f64,
    /// Volumetric flow ratio B:A.
    pub feed_flow_ratio: f64,
    /// [kg/m³]
    pub liquid_density: f64,
    /// [Pa]
    pub default_gauge_pressure: f64,
}

/// File form of [`ReactorConfig`]: `length` and `zone_bounds` may be left
/// out, in which case they are derived (equal-length zones).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReactorFile {
    name: String,
    setup: Setup,
    volume: f64,
    cross_section_area: f64,
    length: Option<f64>,
    n_zones: usize,
    zone_bounds: Option<Vec<f64>>,
    feed_concentration_educt_a: f64,
    feed_concentration_educt_b: f64,
    feed_flow_ratio: f64,
    liquid_density: f64,
    default_gauge_pressure: f64,
}

impl ReactorConfig {
    /// Builds a reactor with `n_zones` equally long zones.
    #[allow(clippy::too_many_arguments)]
    pub fn with_equal_zones(
        name: impl Into<String>,
        setup: Setup,
        volume: f64,
        cross_section_area: f64,
        n_zones: usize,
        feed_concentration_educt_a: f64,
        feed_concentration_educt_b: f64,
        feed_flow_ratio: f64,
        liquid_density: f64,
        default_gauge_pressure: f64,
    ) -> Result<Self, DataError> {
        let length = volume / cross_section_area;
        let cfg = Self {
            name: name.into(),
            setup,
            volume,
            cross_section_area,
            length,
            n_zones,
            zone_bounds: equal_zone_bounds(length, n_zones),
            feed_concentration_educt_a,
            feed_concentration_educt_b,
            feed_flow_ratio,
            liquid_density,
            default_gauge_pressure,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same reactor re-partitioned into `n_zones` equal zones.
    pub fn rezoned(&self, n_zones: usize) -> Result<Self, DataError> {
        let mut cfg = self.clone();
        cfg.n_zones = n_zones;
        cfg.zone_bounds = equal_zone_bounds(cfg.length, n_zones);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Reactor(m));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.volume) {
            return bad(format!("volume must be positive, got {}", self.volume));
        }
        if !positive(self.cross_section_area) {
            return bad(format!(
                "cross_section_area must be positive, got {}",
                self.cross_section_area
            ));
        }
        if self.n_zones < 1 {
            return bad("n_zones must be at least 1".into());
        }
        let expected = self.volume / self.cross_section_area;
        if (self.length - expected).abs() > 1e-9 * expected {
            return bad(format!(
                "length {} does not equal volume / cross_section_area = {}",
                self.length, expected
            ));
        }
        if self.zone_bounds.len() != self.n_zones + 1 {
            return bad(format!(
                "expected {} zone bounds, got {}",
                self.n_zones + 1,
                self.zone_bounds.len()
            ));
        }
        if self.zone_bounds[0] != 0.0 {
            return bad("first zone bound must be 0".into());
        }
        if self.zone_bounds.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("zone bounds must be strictly increasing".into());
        }
        let last = self.zone_bounds[self.n_zones];
        if (last - self.length).abs() > 1e-9 * self.length {
            return bad(format!(
                "last zone bound {last} must equal the length {}",
                self.length
            ));
        }
        if !positive(self.feed_concentration_educt_a) || !positive(self.feed_concentration_educt_b)
        {
            return bad("feed concentrations must be positive".into());
        }
        if !positive(self.feed_flow_ratio) {
            return bad("feed_flow_ratio must be positive".into());
        }
        if !positive(self.liquid_density) {
            return bad("liquid_density must be positive".into());
        }
        if !(self.default_gauge_pressure >= 0.0) || !self.default_gauge_pressure.is_finite() {
            return bad("default_gauge_pressure must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let raw: ReactorFile =
            toml::from_str(text).map_err(|e| DataError::Reactor(e.to_string()))?;
        let length = raw.length.unwrap_or(raw.volume / raw.cross_section_area);
        let mut zone_bounds = raw
            .zone_bounds
            .unwrap_or_else(|| equal_zone_bounds(length, raw.n_zones));
        // snap the outlet bound so integration ends exactly at the outlet
        if let Some(last) = zone_bounds.last_mut() {
            if (*last - length).abs() <= 1e-9 * length {
                *last = length;
            }
        }
        let cfg = Self {
            name: raw.name,
            setup: raw.setup,
            volume: raw.volume,
            cross_section_area: raw.cross_section_area,
            length,
            n_zones: raw.n_zones,
            zone_bounds,
            feed_concentration_educt_a: raw.feed_concentration_educt_a,
            feed_concentration_educt_b: raw.feed_concentration_educt_b,
            feed_flow_ratio: raw.feed_flow_ratio,
            liquid_density: raw.liquid_density,
            default_gauge_pressure: raw.default_gauge_pressure,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("reactor config serializes")
    }

    /// Inlet volumetric flow for a nominal residence time [m³/s].
    pub fn inlet_flow(&self, residence_time: f64) -> f64 {
        self.volume / residence_time
    }
}

fn equal_zone_bounds(length: f64, n_zones: usize) -> Vec<f64> {
    let mut bounds: Vec<f64> = (0..=n_zones)
        .map(|i| length * i as f64 / n_zones.max(1) as f64)
        .collect();
    if let Some(last) = bounds.last_mut() {
        *last = length;
    }
    bounds
}

/// One steady-state run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub setup: Setup,
    /// Nominal residence time `V / Q_in` [s].
    pub residence_time: f64,
    /// Bath temperature [K].
    pub temperature: f64,
    /// [Pa]
    pub gauge_pressure: f64,
    /// FTIR band area [a.u.].
    pub band_area: Option<f64>,
    /// Per-zone heats [W]; a single entry holds the total.
    pub zone_heats: Option<Vec<f64>>,
    /// Gas flow at 1 atm, 20 °C [mL/min].
    pub gas_flow_rate: Option<f64>,
}

impl ExperimentRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.residence_time > 0.0) || !self.residence_time.is_finite() {
            return Err(format!(
                "residence time must be positive, got {}",
                self.residence_time
            ));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(format!(
                "temperature must be positive, got {} K",
                self.temperature
            ));
        }
        if !(self.gauge_pressure >= 0.0) || !self.gauge_pressure.is_finite() {
            return Err(format!(
                "gauge pressure must be non-negative, got {} Pa",
                self.gauge_pressure
            ));
        }
        if self.band_area.is_none() && self.zone_heats.is_none() && self.gas_flow_rate.is_none() {
            return Err("record carries no measurement".into());
        }
        if matches!(&self.zone_heats, Some(z) if z.is_empty()) {
            return Err("zone heat list is empty".into());
        }
        Ok(())
    }

    /// Measured total heat [W], if any.
    pub fn total_heat(&self) -> Option<f64> {
        self.zone_heats.as_ref().map(|z| z.iter().sum())
    }
}

fn sniff_delimiter(header: &str) -> u8 {
    if header.contains(';') {
        b';'
    } else if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn parse_number(cell: &str, decimal_comma: bool) -> Option<f64> {
    let cell = cell.trim();
    let value = if decimal_comma {
        cell.replace(',', ".").parse::<f64>()
    } else {
        cell.parse::<f64>()
    };
    value.ok().filter(|v| v.is_finite())
}

/// Reads experiment records of the given setup from CSV text.
pub fn parse_experiments<R: Read>(
    mut reader: R,
    setup: Setup,
) -> Result<Vec<ExperimentRecord>, DataError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| DataError::Io {
            path: "<reader>".into(),
            source: e,
        })?;
    let text = text.trim_start_matches('\u{feff}');
    let Some(header_line) = text.lines().find(|l| !l.trim().is_empty()) else {
        log::warn!(
            "{} experiment file is empty; no records loaded",
            setup.as_str()
        );
        return Ok(Vec::new());
    };
    let delimiter = sniff_delimiter(header_line);
    let decimal_comma = delimiter != b',';

    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = csv_reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));

    let tau_col = require("residence_time_s")?;
    let temp_col = require("temperature_C")?;
    let (band_col, pressure_col, heat_cols, gas_col) = match setup {
        Setup::Mixer => (
            Some(require("band_area_au")?),
            col("pressure_gauge_bar"),
            Vec::new(),
            None,
        ),
        Setup::Calorimeter => {
            let pressure = require("pressure_gauge_bar")?;
            let zone_cols: Vec<usize> = (1..)
                .map_while(|i| col(&format!("heat_zone{i}_W")))
                .collect();
            let heat_cols = if zone_cols.is_empty() {
                vec![require("heat_total_W")?]
            } else {
                zone_cols
            };
            (
                None,
                Some(pressure),
                heat_cols,
                Some(require("gas_flow_ml_min")?),
            )
        }
    };

    let mut records = Vec::new();
    for (i, row) in csv_reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| DataError::Row {
            row: line,
            message: e.to_string(),
        })?;
        if row.iter().all(|c| c.is_empty()) {
            continue;
        }
        let number = |idx: usize| -> Result<f64, DataError> {
            let cell = row.get(idx).unwrap_or("");
            parse_number(cell, decimal_comma).ok_or_else(|| DataError::Row {
                row: line,
                message: format!("non-numeric value `{cell}` in column `{}`", &headers[idx]),
            })
        };
        let residence_time = number(tau_col)?;
        if !(residence_time > 0.0) {
            return Err(DataError::Row {
                row: line,
                message: format!("residence time must be positive, got {residence_time}"),
            });
        }
        let gauge_pressure = match pressure_col {
            Some(c) => bar_to_pa(number(c)?),
            None => MIXER_GAUGE_PRESSURE,
        };
        let band_area = band_col.map(number).transpose()?;
        let zone_heats = if heat_cols.is_empty() {
            None
        } else {
            Some(
                heat_cols
                    .iter()
                    .map(|&c| number(c))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        let gas_flow_rate = gas_col.map(number).transpose()?;
        let record = ExperimentRecord {
            setup,
            residence_time,
            temperature: celsius_to_kelvin(number(temp_col)?),
            gauge_pressure,
            band_area,
            zone_heats,
            gas_flow_rate,
        };
        record
            .validate()
            .map_err(|message| DataError::Row { row: line, message })?;
        records.push(record);
    }
    if records.is_empty() {
        log::warn!("{} experiment file has no data rows", setup.as_str());
    }
    Ok(records)
}

/// Loads an experiment CSV (see [`parse_experiments`]).
pub fn load_experiments(
    path: impl AsRef<Path>,
    setup: Setup,
) -> Result<Vec<ExperimentRecord>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_experiments(file, setup).map_err(|e| match e {
        DataError::Row { row, message } => DataError::Row {
            row,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Writes records in the comma-separated, decimal-point form of the schema.
///
/// All records must share the setup; calorimeter records with per-zone
/// heats are written with `heat_zone{i}_W` columns.
pub fn write_experiments<W: Write>(
    writer: W,
    records: &[ExperimentRecord],
    setup: Setup,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let zones = records
        .iter()
        .filter_map(|r| r.zone_heats.as_ref().map(Vec::len))
        .max()
        .unwrap_or(1);
    match setup {
        Setup::Mixer => {
            w.write_record(MIXER_COLUMNS.iter().copied().chain(["pressure_gauge_bar"]))?
        }
        Setup::Calorimeter if zones > 1 => {
            let mut header: Vec<String> = CALORIMETER_COLUMNS[..3]
                .iter()
                .map(|s| s.to_string())
                .collect();
            header.extend((1..=zones).map(|i| format!("heat_zone{i}_W")));
            header.push(CALORIMETER_COLUMNS[4].to_string());
            w.write_record(&header)?
        }
        Setup::Calorimeter => w.write_record(CALORIMETER_COLUMNS)?,
    }
    for (i, r) in records.iter().enumerate() {
        let missing = |what: &str| DataError::Record(format!("record {i} has no {what}"));
        if r.setup != setup {
            return Err(DataError::Record(format!(
                "record {i} is not a {} run",
                setup.as_str()
            )));
        }
        let mut row = vec![
            r.residence_time.to_string(),
            kelvin_to_celsius(r.temperature).to_string(),
        ];
        match setup {
            Setup::Mixer => {
                row.push(r.band_area.ok_or_else(|| missing("band area"))?.to_string());
                row.push(pa_to_bar(r.gauge_pressure).to_string());
            }
            Setup::Calorimeter => {
                row.push(pa_to_bar(r.gauge_pressure).to_string());
                let heats = r.zone_heats.as_ref().ok_or_else(|| missing("heat"))?;
                if heats.len() != zones {
                    return Err(DataError::Record(format!(
                        "record {i} has {} zone heats, expected {zones}",
                        heats.len()
                    )));
                }
                row.extend(heats.iter().map(f64::to_string));
                row.push(
                    r.gas_flow_rate
                        .ok_or_else(|| missing("gas flow rate"))?
                        .to_string(),
                );
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DataError::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn celsius_to_kelvin(t: f64) -> f64 {
    t + CELSIUS_OFFSET
}

/// Inverse of [`celsius_to_kelvin`], chosen so that converting back
/// reproduces `t` bit for bit whenever possible.
pub fn kelvin_to_celsius(t: f64) -> f64 {
    invert_exactly(t - CELSIUS_OFFSET, t, celsius_to_kelvin)
}

pub fn bar_to_pa(p: f64) -> f64 {
    p * PA_PER_BAR
}

/// Inverse of [`bar_to_pa`] with the same round-trip guarantee as
/// [`kelvin_to_celsius`].
pub fn pa_to_bar(p: f64) -> f64 {
    invert_exactly(p / PA_PER_BAR, p, bar_to_pa)
}

fn invert_exactly(guess: f64, target: f64, forward: impl Fn(f64) -> f64) -> f64 {
    if forward(guess) == target {
        return guess;
    }
    let (mut up, mut down) = (guess, guess);
    for _ in 0..4 {
        up = up.next_up();
        down = down.next_down();
        if forward(up) == target {
            return up;
        }
        if forward(down) == target {
            return down;
        }
    }
    guess
}

/// Initial-value data for one forward simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationInputs {
    /// [m/s]
    pub inlet_velocity: f64,
    /// Inlet concentrations of all species [mol/m³]; inlet gas fraction is zero.
    pub inlet_concentrations: [f64; N_SPECIES],
    /// [Pa]
    pub absolute_pressure: f64,
    /// [K]
    pub temperature: f64,
    pub reactor: ReactorConfig,
}

impl SimulationInputs {
    /// Inputs for arbitrary operating conditions on `reactor`.
    pub fn at_conditions(
        reactor: &ReactorConfig,
        temperature: f64,
        residence_time: f64,
        gauge_pressure: f64,
    ) -> Result<Self, DataError> {
        let record = ExperimentRecord {
            setup: reactor.setup,
            residence_time,
            temperature,
            gauge_pressure,
            band_area: None,
            zone_heats: None,
            gas_flow_rate: Some(0.0),
        };
        derive_inputs(&record, reactor)
    }

    /// Inlet volumetric flow [m³/s].
    pub fn inlet_flow(&self) -> f64 {
        self.inlet_velocity * self.reactor.cross_section_area
    }
}

/// Mixes the two feeds and converts residence time into inlet velocity.
pub fn derive_inputs(
    record: &ExperimentRecord,
    reactor: &ReactorConfig,
) -> Result<SimulationInputs, DataError> {
    if record.setup != reactor.setup {
        return Err(DataError::SetupMismatch {
            record: record.setup,
            expected: reactor.setup,
            reactor: reactor.name.clone(),
        });
    }
    record.validate().map_err(DataError::Record)?;
    let ratio = reactor.feed_flow_ratio;
    let mut inlet = [0.0; N_SPECIES];
    inlet[Species::AminoacetonitrileHcl.index()] =
        reactor.feed_concentration_educt_a / (1.0 + ratio);
    inlet[Species::SodiumNitrite.index()] =
        reactor.feed_concentration_educt_b * ratio / (1.0 + ratio);
    Ok(SimulationInputs {
        inlet_velocity: reactor.length / record.residence_time,
        inlet_concentrations: inlet,
        absolute_pressure: record.gauge_pressure + ATMOSPHERE,
        temperature: record.temperature,
        reactor: reactor.clone(),
    })
}

/// Datasets and reactor descriptions shipped with the crate.
pub mod bundled {
    use super::*;

    pub const MIXER_CSV: &str = include_str!("../data/mixer.csv");
    pub const CALORIMETER_CSV: &str = include_str!("../data/calorimeter.csv");
    pub const MIXER_REACTOR_TOML: &str = include_str!("../data/mixer.toml");
    pub const CALORIMETER_REACTOR_TOML: &str = include_str!("../data/calorimeter.toml");

    pub fn mixer_records() -> Vec<ExperimentRecord> {
        parse_experiments(MIXER_CSV.as_bytes(), Setup::Mixer).expect("bundled mixer data parse")
    }

    pub fn calorimeter_records() -> Vec<ExperimentRecord> {
        parse_experiments(CALORIMETER_CSV.as_bytes(), Setup::Calorimeter)
            .expect("bundled calorimeter data parse")
    }

    pub fn mixer_reactor() -> ReactorConfig {
        ReactorConfig::from_toml_str(MIXER_REACTOR_TOML).expect("bundled mixer reactor parses")
    }

    pub fn calorimeter_reactor() -> ReactorConfig {
        ReactorConfig::from_toml_str(CALORIMETER_REACTOR_TOML)
            .expect("bundled calorimeter reactor parses")
    }
}
