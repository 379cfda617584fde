//! Delimited-text ingestion and canonical panel output.
//!
//! Raw contract rows arrive as comma- or tab-separated text with a
//! header. A config maps header names onto the observation fields and
//! says whether the wage column is already in logs. Rows with unusable
//! wages are dropped and counted; structurally broken rows (missing or
//! unparseable fields) abort with the offending line number. The
//! counters travel in an `IngestReport` meant to be serialized next to
//! the outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{BiennialPanel, Education, Gender, Observation, RawContract, Sector};

/// Header names for each observation field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub worker_id: String,
    pub firm_id: String,
    pub year: String,
    pub wage: String,
    pub hours: String,
    pub gender: String,
    pub age: String,
    pub education: String,
    pub occupation: String,
    pub sector: String,
    pub tenure: String,
    pub contract_span: String,
    /// Optional boolean column marking private-sector employers; rows
    /// default to private when unset.
    pub private_sector: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            worker_id: "worker_id".into(),
            firm_id: "firm_id".into(),
            year: "year".into(),
            wage: "wage".into(),
            hours: "hours".into(),
            gender: "gender".into(),
            age: "age".into(),
            education: "education".into(),
            occupation: "occupation".into(),
            sector: "sector".into(),
            tenure: "tenure".into(),
            contract_span: "contract_span".into(),
            private_sector: None,
        }
    }
}

/// Interpretation of the wage column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WageScale {
    /// Hourly wage in currency; logged on ingest, non-positive rejected.
    Level,
    /// Already the natural log of the hourly wage.
    Log,
}

/// Ingestion settings, usually loaded from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Single-character field delimiter.
    pub delimiter: char,
    pub wage_scale: WageScale,
    pub columns: ColumnMap,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            delimiter: ',',
            wage_scale: WageScale::Level,
            columns: ColumnMap::default(),
        }
    }
}

impl IngestConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("ingest config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .map_err(|_| Error::config("delimiter must be a single ASCII character"))
    }
}

/// Row counters from one ingestion run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub dropped_nonfinite_wage: usize,
    /// Level-scale wages at or below zero.
    pub dropped_nonpositive_wage: usize,
}

fn parse_gender(text: &str) -> Option<Gender> {
    match text.trim() {
        "F" | "f" => Some(Gender::F),
        "M" | "m" => Some(Gender::M),
        _ => None,
    }
}

fn parse_education(text: &str) -> Option<Education> {
    let t = text.trim();
    Education::ALL
        .iter()
        .copied()
        .find(|e| e.label().eq_ignore_ascii_case(t))
        .or_else(|| match t {
            "0" => Some(Education::Dropout),
            "1" => Some(Education::HighSchool),
            "2" => Some(Education::College),
            _ => None,
        })
}

fn parse_sector(text: &str) -> Option<Sector> {
    let t = text.trim();
    Sector::ALL
        .iter()
        .copied()
        .find(|s| s.label().eq_ignore_ascii_case(t))
        .or_else(|| t.parse::<usize>().ok().and_then(|i| Sector::ALL.get(i).copied()))
}

fn parse_bool(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}

/// Read raw contract rows. Wage-value problems are counted and skipped;
/// anything else wrong with a row is a hard error naming its line.
pub fn read_contracts(path: &Path, config: &IngestConfig) -> Result<(Vec<RawContract>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter_byte()?)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("column '{name}' not found in header")))
    };
    let cols = &config.columns;
    let idx_worker = find(&cols.worker_id)?;
    let idx_firm = find(&cols.firm_id)?;
    let idx_year = find(&cols.year)?;
    let idx_wage = find(&cols.wage)?;
    let idx_hours = find(&cols.hours)?;
    let idx_gender = find(&cols.gender)?;
    let idx_age = find(&cols.age)?;
    let idx_edu = find(&cols.education)?;
    let idx_occ = find(&cols.occupation)?;
    let idx_sector = find(&cols.sector)?;
    let idx_tenure = find(&cols.tenure)?;
    let idx_span = find(&cols.contract_span)?;
    let idx_private = cols
        .private_sector
        .as_deref()
        .map(find)
        .transpose()?;

    let mut rows = Vec::new();
    let mut report = IngestReport::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());
        report.rows_read += 1;

        let field = |idx: usize, name: &str| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| Error::data(format!("line {line}: missing field '{name}'")))
        };
        fn parsed<T: std::str::FromStr>(text: &str, line: &str, name: &str) -> Result<T> {
            text.trim()
                .parse()
                .map_err(|_| Error::data(format!("line {line}: cannot parse '{text}' as {name}")))
        }

        let wage: f64 = parsed(field(idx_wage, "wage")?, &line, "wage")?;
        let log_wage = match config.wage_scale {
            WageScale::Log => {
                if !wage.is_finite() {
                    report.dropped_nonfinite_wage += 1;
                    continue;
                }
                wage
            }
            WageScale::Level => {
                if !wage.is_finite() {
                    report.dropped_nonfinite_wage += 1;
                    continue;
                }
                if wage <= 0.0 {
                    report.dropped_nonpositive_wage += 1;
                    continue;
                }
                wage.ln()
            }
        };

        let obs = Observation {
            worker_id: parsed(field(idx_worker, "worker_id")?, &line, "worker_id")?,
            firm_id: parsed(field(idx_firm, "firm_id")?, &line, "firm_id")?,
            year: parsed(field(idx_year, "year")?, &line, "year")?,
            log_wage,
            hours: parsed(field(idx_hours, "hours")?, &line, "hours")?,
            gender: parse_gender(field(idx_gender, "gender")?)
                .ok_or_else(|| Error::data(format!("line {line}: gender must be F or M")))?,
            age: parsed(field(idx_age, "age")?, &line, "age")?,
            education: parse_education(field(idx_edu, "education")?).ok_or_else(|| {
                Error::data(format!("line {line}: unknown education level"))
            })?,
            occupation: parsed(field(idx_occ, "occupation")?, &line, "occupation")?,
            sector: parse_sector(field(idx_sector, "sector")?)
                .ok_or_else(|| Error::data(format!("line {line}: unknown sector")))?,
            tenure: parsed(field(idx_tenure, "tenure")?, &line, "tenure")?,
            contract_span: parsed(field(idx_span, "contract_span")?, &line, "contract_span")?,
        };
        let private_sector = match idx_private {
            Some(idx) => parse_bool(field(idx, "private_sector")?).ok_or_else(|| {
                Error::data(format!("line {line}: private_sector must be boolean"))
            })?,
            None => true,
        };
        rows.push(RawContract {
            obs,
            private_sector,
        });
        report.rows_kept += 1;
    }
    Ok((rows, report))
}

/// One observation on the wire; enums become their labels and wages stay
/// in logs.
#[derive(Serialize)]
struct WireRow<'a> {
    worker_id: u64,
    firm_id: u64,
    year: i32,
    wage: f64,
    hours: f64,
    gender: &'a str,
    age: u32,
    education: &'a str,
    occupation: u32,
    sector: &'a str,
    tenure: f64,
    contract_span: u32,
}

impl<'a> From<&'a Observation> for WireRow<'a> {
    fn from(o: &'a Observation) -> Self {
        WireRow {
            worker_id: o.worker_id,
            firm_id: o.firm_id,
            year: o.year,
            wage: o.log_wage,
            hours: o.hours,
            gender: o.gender.label(),
            age: o.age,
            education: o.education.label(),
            occupation: o.occupation,
            sector: o.sector.label(),
            tenure: o.tenure,
            contract_span: o.contract_span,
        }
    }
}

/// Write a balanced panel as canonical CSV: both periods of each worker
/// on adjacent lines, log wages, enum labels. Floats print shortest
/// round-trip, so reading the file back reproduces the panel exactly.
pub fn write_panel(path: &Path, panel: &BiennialPanel) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::config(format!("cannot write {}: {e}", path.display()))
    })?;
    for row in &panel.rows {
        writer
            .serialize(WireRow::from(&row.first))
            .and_then(|_| writer.serialize(WireRow::from(&row.second)))
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}
