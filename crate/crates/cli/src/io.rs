//! Measurement CSV, float formatting and atomic file output.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::CliError;

/// Formats a float with 17 significant digits, which round-trips any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// A float serialized as a JSON number with 17 significant digits
/// (`null` when not finite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return serializer.serialize_none();
        }
        let raw = RawValue::from_string(fmt17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

pub fn vec17(v: &DVector<f64>) -> Vec<F17> {
    v.iter().copied().map(F17).collect()
}

pub fn seq17(vs: &[DVector<f64>]) -> Vec<Vec<F17>> {
    vs.iter().map(vec17).collect()
}

/// Parses `k,y1,...,ym` rows; `k` must run 1, 2, 3, ... without gaps.
pub fn read_measurements(path: &Path) -> Result<Vec<DVector<f64>>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io("input", format!("{}: {e}", path.display())))?;
    parse_measurements(file).map_err(|e| match e {
        CliError::Config { message, .. } => CliError::config("input", format!("{}: {message}", path.display())),
        other => other,
    })
}

pub fn parse_measurements(reader: impl std::io::Read) -> Result<Vec<DVector<f64>>, CliError> {
    let bad = |msg: String| CliError::config("input", msg);
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers().map_err(|e| bad(e.to_string()))?.clone();
    let m = header.len().saturating_sub(1);
    if m == 0 || &header[0] != "k" || (1..=m).any(|i| header[i] != format!("y{i}")) {
        return Err(bad(format!("expected header k,y1,...,ym, found {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let k: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("row {}: k = {:?} is not a positive integer", row + 1, &record[0])))?;
        if k != row + 1 {
            return Err(bad(format!("row {}: expected k = {}, found {k}", row + 1, row + 1)));
        }
        let y = (1..=m)
            .map(|i| {
                record[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("row {}: y{i} = {:?} is not a number", row + 1, &record[i])))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(DVector::from_vec(y));
    }
    if out.is_empty() {
        return Err(bad("no measurement rows".into()));
    }
    Ok(out)
}

pub fn measurements_csv(ys: &[DVector<f64>]) -> String {
    let m = ys.first().map_or(0, |y| y.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((1..=m).map(|i| format!("y{i}")));
    w.write_record(&header).expect("in-memory write");
    for (i, y) in ys.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(y.iter().map(|&v| fmt17(v)));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii output")
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let err = |e: &dyn std::fmt::Display| CliError::io("output", format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(&e))?;
    tmp.write_all(contents).map_err(|e| err(&e))?;
    tmp.as_file().sync_all().map_err(|e| err(&e))?;
    tmp.persist(path).map_err(|e| err(&e.error))?;
    Ok(())
}
