//! CSV and JSON ingestion into a validated [`Dataset`], plus the matching
//! exporters.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datamodel::{validate_dataset, Dataset, Date, DimMap, MetricRegistry, Record, Rule};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("duplicate row for date {date} and dimensions {dims:?}")]
    DuplicateKey { date: Date, dims: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub date_column: String,
    /// `None` infers dimensions as every column that is neither the date
    /// column nor a registered metric.
    pub dimension_columns: Option<Vec<String>>,
    pub registry_path: PathBuf,
    pub delimiter: u8,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            dimension_columns: None,
            registry_path: PathBuf::new(),
            delimiter: b',',
        }
    }
}

impl IngestConfig {
    pub fn with_registry(path: impl Into<PathBuf>) -> Self {
        Self {
            registry_path: path.into(),
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), IngestError> {
        if let Some(dims) = &self.dimension_columns {
            if dims.contains(&self.date_column) {
                return Err(IngestError::Schema(format!(
                    "date column `{}` is also listed as a dimension",
                    self.date_column
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    /// Empty or unparseable numeric cells turned into missing markers.
    pub missing_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub summary: IngestSummary,
}

fn read_file(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_registry(path: &Path) -> Result<MetricRegistry, IngestError> {
    let text = read_file(path)?;
    MetricRegistry::from_json(&text)
        .map_err(|e| IngestError::Schema(format!("registry `{}`: {e}", path.display())))
}

fn parse_date(s: &str, record: usize) -> Result<Date, IngestError> {
    Date::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| IngestError::Parse {
        record,
        message: format!("bad date `{s}`: {e}"),
    })
}

/// Finite number or `None`.
fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn resolve_dimensions(
    columns: &[String],
    registry: &MetricRegistry,
    cfg: &IngestConfig,
) -> Result<Vec<String>, IngestError> {
    match &cfg.dimension_columns {
        Some(dims) => {
            for d in dims {
                if !columns.contains(d) {
                    return Err(IngestError::Schema(format!("dimension column `{d}` absent")));
                }
                if registry.contains(d) {
                    return Err(IngestError::Schema(format!(
                        "column `{d}` is both a dimension and a metric"
                    )));
                }
            }
            Ok(dims.clone())
        }
        None => Ok(columns
            .iter()
            .filter(|c| **c != cfg.date_column && !registry.contains(c))
            .cloned()
            .collect()),
    }
}

fn check_columns(
    columns: &[String],
    dims: &[String],
    registry: &MetricRegistry,
    cfg: &IngestConfig,
) -> Result<(), IngestError> {
    let mut seen = BTreeSet::new();
    for c in columns {
        if !seen.insert(c) {
            return Err(IngestError::Schema(format!("column `{c}` appears twice")));
        }
    }
    if !columns.contains(&cfg.date_column) {
        return Err(IngestError::Schema(format!(
            "date column `{}` absent",
            cfg.date_column
        )));
    }
    for c in columns {
        if *c != cfg.date_column && !dims.contains(c) && !registry.contains(c) {
            return Err(IngestError::Schema(format!(
                "column `{c}` is not in the metric registry"
            )));
        }
    }
    for m in registry.names() {
        if !columns.iter().any(|c| c == m) {
            return Err(IngestError::Schema(format!(
                "registry metric `{m}` has no column"
            )));
        }
    }
    let bad = registry.violations();
    if let Some(v) = bad.first() {
        return Err(IngestError::Schema(format!("registry invalid: {v}")));
    }
    Ok(())
}

/// Parses CSV text into a sorted dataset. Duplicate keys are kept so
/// callers can report them; [`load_csv`] rejects them.
pub fn parse_csv_str(
    text: &str,
    registry: &MetricRegistry,
    cfg: &IngestConfig,
) -> Result<Ingested, IngestError> {
    cfg.check()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::Parse {
            record: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let dims = resolve_dimensions(&header, registry, cfg)?;
    check_columns(&header, &dims, registry, cfg)?;

    let mut summary = IngestSummary::default();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let record_no = i + 1;
        let rec = rec.map_err(|e| IngestError::Parse {
            record: record_no,
            message: e.to_string(),
        })?;
        let mut row: Option<Record> = None;
        let mut dims_map = DimMap::new();
        let mut values = std::collections::BTreeMap::new();
        for (col, cell) in header.iter().zip(rec.iter()) {
            if *col == cfg.date_column {
                row = Some(Record::new(parse_date(cell, record_no)?));
            } else if dims.contains(col) {
                dims_map.insert(col.clone(), cell.to_string());
            } else {
                let v = parse_number(cell);
                if v.is_none() {
                    summary.missing_count += 1;
                }
                values.insert(col.clone(), v);
            }
        }
        let mut row = row.expect("date column checked above");
        row.dims = dims_map;
        row.values = values;
        rows.push(row);
    }
    summary.rows = rows.len();
    let mut dataset = Dataset::new(rows, registry.clone(), dims);
    dataset.sort_canonical();
    Ok(Ingested { dataset, summary })
}

fn cell_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Parses a JSON array of flat objects. Same column rules as CSV.
pub fn parse_json_str(
    text: &str,
    registry: &MetricRegistry,
    cfg: &IngestConfig,
) -> Result<Ingested, IngestError> {
    cfg.check()?;
    let value: Value = serde_json::from_str(text).map_err(|e| IngestError::Parse {
        record: 0,
        message: e.to_string(),
    })?;
    let Value::Array(items) = value else {
        return Err(IngestError::Parse {
            record: 0,
            message: "top-level value must be an array".into(),
        });
    };

    let mut columns: Vec<String> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else {
            return Err(IngestError::Parse {
                record: i + 1,
                message: "element is not an object".into(),
            });
        };
        if !obj.contains_key(&cfg.date_column) {
            return Err(IngestError::Schema(format!(
                "record {} lacks `{}`",
                i + 1,
                cfg.date_column
            )));
        }
        for k in obj.keys() {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    if items.is_empty() {
        // Nothing to infer from; an empty array yields an empty dataset.
        let dims = cfg.dimension_columns.clone().unwrap_or_default();
        return Ok(Ingested {
            dataset: Dataset::new(Vec::new(), registry.clone(), dims),
            summary: IngestSummary::default(),
        });
    }
    // Metrics absent from every object still need a column check.
    let dims = resolve_dimensions(&columns, registry, cfg)?;
    let mut all_cols = columns.clone();
    for m in registry.names() {
        if !all_cols.iter().any(|c| c == m) {
            all_cols.push(m.to_string());
        }
    }
    check_columns(&all_cols, &dims, registry, cfg)?;

    let mut summary = IngestSummary::default();
    let mut rows = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let record_no = i + 1;
        let obj = item.as_object().expect("checked above");
        let date_text = cell_text(&obj[&cfg.date_column]).ok_or_else(|| IngestError::Parse {
            record: record_no,
            message: "date is not a string".into(),
        })?;
        let mut row = Record::new(parse_date(&date_text, record_no)?);
        for d in &dims {
            let v = obj.get(d).ok_or_else(|| {
                IngestError::Schema(format!("record {record_no} lacks dimension `{d}`"))
            })?;
            let text = cell_text(v).ok_or_else(|| IngestError::Parse {
                record: record_no,
                message: format!("dimension `{d}` is not a scalar"),
            })?;
            row.dims.insert(d.clone(), text);
        }
        for m in registry.names() {
            let v = match obj.get(m) {
                None | Some(Value::Null) => None,
                Some(Value::Number(n)) => n.as_f64().filter(|x| x.is_finite()),
                Some(Value::String(s)) => parse_number(s),
                Some(_) => {
                    return Err(IngestError::Parse {
                        record: record_no,
                        message: format!("metric `{m}` is not a scalar"),
                    })
                }
            };
            if v.is_none() {
                summary.missing_count += 1;
            }
            row.values.insert(m.to_string(), v);
        }
        rows.push(row);
    }
    summary.rows = rows.len();
    let mut dataset = Dataset::new(rows, registry.clone(), dims);
    dataset.sort_canonical();
    Ok(Ingested { dataset, summary })
}

fn reject_violations(ingested: Ingested) -> Result<Ingested, IngestError> {
    if let Some(v) = validate_dataset(&ingested.dataset).into_iter().next() {
        return Err(match (v.rule, v.row) {
            (Rule::DuplicateKey, Some(r)) => {
                let (date, dims) = ingested.dataset.key_of(&ingested.dataset.rows[r]);
                IngestError::DuplicateKey { date, dims }
            }
            _ => IngestError::Schema(v.to_string()),
        });
    }
    Ok(ingested)
}

/// Reads a CSV file without rejecting structural violations.
pub fn read_csv(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    let registry = load_registry(&cfg.registry_path)?;
    parse_csv_str(&read_file(path)?, &registry, cfg)
}

pub fn read_json(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    let registry = load_registry(&cfg.registry_path)?;
    parse_json_str(&read_file(path)?, &registry, cfg)
}

/// Reads by extension: `.json` as JSON, anything else as CSV.
pub fn read_any(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("json") => read_json(path, cfg),
        _ => read_csv(path, cfg),
    }
}

pub fn load_csv(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    reject_violations(read_csv(path, cfg)?)
}

pub fn load_json(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    reject_violations(read_json(path, cfg)?)
}

pub fn load_any(path: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    reject_violations(read_any(path, cfg)?)
}

/// Header in export order: date, dimensions, metrics by name.
pub fn csv_header(d: &Dataset) -> Vec<String> {
    std::iter::once("date".to_string())
        .chain(d.dimensions.iter().cloned())
        .chain(d.metrics.names().map(str::to_string))
        .collect()
}

pub fn csv_fields(d: &Dataset, row: &Record) -> Vec<String> {
    std::iter::once(row.date.to_string())
        .chain(
            d.dimensions
                .iter()
                .map(|k| row.dims.get(k).cloned().unwrap_or_default()),
        )
        .chain(d.metrics.names().map(|m| match row.get(m) {
            Some(x) => x.to_string(),
            None => String::new(),
        }))
        .collect()
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn csv_header_line(d: &Dataset) -> String {
    csv_line(&csv_header(d))
}

/// One serialized data line (newline-terminated).
pub fn csv_row_line(d: &Dataset, row: &Record) -> String {
    csv_line(&csv_fields(d, row))
}

/// Serializes a dataset as CSV with a `date` column. Missing values are
/// empty cells; numbers use the shortest round-tripping representation.
pub fn write_csv(d: &Dataset) -> String {
    let mut out = csv_header_line(d);
    for row in &d.rows {
        out.push_str(&csv_row_line(d, row));
    }
    out
}

pub fn write_json(d: &Dataset) -> String {
    let items: Vec<Value> = d
        .rows
        .iter()
        .map(|r| {
            let mut obj = serde_json::Map::new();
            obj.insert("date".into(), Value::String(r.date.to_string()));
            for k in &d.dimensions {
                obj.insert(
                    k.clone(),
                    Value::String(r.dims.get(k).cloned().unwrap_or_default()),
                );
            }
            for m in d.metrics.names() {
                let v = r
                    .get(m)
                    .and_then(serde_json::Number::from_f64)
                    .map(Value::Number)
                    .unwrap_or(Value::Null);
                obj.insert(m.to_string(), v);
            }
            Value::Object(obj)
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("dataset serializes")
}
