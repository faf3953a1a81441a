//! CSV and JSON artifacts. Every file carries the config hash: CSV files as a
//! leading `# config_hash: …` line, JSON files as a `config_hash` field.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use odelap::inference::Chain;
use odelap::laplace::{CovarianceReport, CredibleBand, SymmetricMatrix};
use odelap::posterior::Dataset;
use serde::Serialize;

use crate::error::{CliError, CliResult};

const HASH_PREFIX: &str = "# config_hash: ";

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

fn csv_writer(hash: &str) -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(format!("{HASH_PREFIX}{hash}\n").into_bytes())
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> CliResult<()> {
    let bytes = w.into_inner().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn fmt(v: f64) -> String {
    // shortest repr that round-trips
    format!("{v:?}")
}

/// Writes `t,x1..xp`.
pub fn write_dataset(path: &Path, data: &Dataset, hash: &str) -> CliResult<()> {
    write_curves(path, &data.times, &data.y, hash)
}

pub fn write_curves(path: &Path, times: &[f64], y: &DMatrix<f64>, hash: &str) -> CliResult<()> {
    let mut w = csv_writer(hash);
    let mut header = vec!["t".to_string()];
    header.extend((1..=y.ncols()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, t) in times.iter().enumerate() {
        let mut row = vec![fmt(*t)];
        row.extend(y.row(i).iter().map(|v| fmt(*v)));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(path, w)
}

/// A parsed table: header, numeric rows and the config hash if present.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub hash: Option<String>,
}

/// Reads a numeric CSV. Lines starting with `#` are comments; errors name
/// the 1-based data row.
pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let hash = text.lines().find_map(|l| l.strip_prefix(HASH_PREFIX)).map(|h| h.trim().to_string());
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: row {}: {e}", path.display(), k + 1)))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>().map_err(|_| {
                    CliError::Input(format!("{}: row {}, column {}: not a number: {s:?}", path.display(), k + 1, c + 1))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows, hash })
}

/// Reads a dataset in the `t,x1..xp` layout.
pub fn read_dataset(path: &Path) -> CliResult<(Dataset, Option<String>)> {
    let table = read_table(path)?;
    if table.header.first().map(String::as_str) != Some("t") || table.header.len() < 2 {
        return Err(CliError::Input(format!("{}: header must be t,x1,...,xp", path.display())));
    }
    let p = table.header.len() - 1;
    let times: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
    let y = DMatrix::from_fn(table.rows.len(), p, |i, j| table.rows[i][j + 1]);
    let data = Dataset::new(times, y).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((data, table.hash))
}

pub fn write_chain(path: &Path, chain: &Chain, hash: &str) -> CliResult<()> {
    let mut w = csv_writer(hash);
    w.write_record(&chain.labels).map_err(csv_err(path))?;
    for r in 0..chain.samples.nrows() {
        w.write_record(chain.samples.row(r).iter().map(|v| fmt(*v))).map_err(csv_err(path))?;
    }
    finish(path, w)
}

/// Square matrix with a leading label column.
pub fn write_matrix(path: &Path, labels: &[String], m: &SymmetricMatrix, hash: &str) -> CliResult<()> {
    let mut w = csv_writer(hash);
    let mut header = vec![String::new()];
    header.extend(labels.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..m.dim()).map(|j| fmt(m.get(i, j))));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(path, w)
}

/// Long format: `t,state,lower,upper,center`.
pub fn write_band(path: &Path, band: &CredibleBand, hash: &str) -> CliResult<()> {
    let mut w = csv_writer(hash);
    w.write_record(["t", "state", "lower", "upper", "center"]).map_err(csv_err(path))?;
    for (i, t) in band.times.iter().enumerate() {
        for j in 0..band.lower.ncols() {
            w.write_record([
                fmt(*t),
                format!("x{}", j + 1),
                fmt(band.lower[(i, j)]),
                fmt(band.upper[(i, j)]),
                fmt(band.center[(i, j)]),
            ])
            .map_err(csv_err(path))?;
        }
    }
    finish(path, w)
}

/// Generic rows of strings under a header.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>], hash: &str) -> CliResult<()> {
    let mut w = csv_writer(hash);
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(row).map_err(csv_err(path))?;
    }
    finish(path, w)
}

/// Serialises `value` as pretty JSON with `config_hash` added at top level.
pub fn write_json<T: Serialize>(path: &Path, value: &T, hash: &str) -> CliResult<()> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("config_hash".into(), serde_json::Value::String(hash.to_string()));
    }
    let text = serde_json::to_string_pretty(&v).expect("json value serialises");
    ensure_parent(path)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json_value(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_report(path: &Path) -> CliResult<CovarianceReport> {
    let v = read_json_value(path)?;
    serde_json::from_value(v).map_err(|e| CliError::Input(format!("{}: not a covariance report: {e}", path.display())))
}

/// Reads the hash recorded in a CSV comment or JSON field.
pub fn recorded_hash(path: &Path) -> CliResult<Option<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if let Some(h) = text.lines().next().and_then(|l| l.strip_prefix(HASH_PREFIX)) {
        return Ok(Some(h.trim().to_string()));
    }
    Ok(serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string)))
}
