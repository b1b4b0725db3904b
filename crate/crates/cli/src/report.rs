use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::CliError;

/// Renders an `f64` with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Pretty JSON whose floats carry 17 significant digits.
struct Sig17(PrettyFormatter<'static>);

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializing to memory");
    buf.push(b'\n');
    String::from_utf8(buf).expect("json is utf-8")
}

/// A rectangular table rendered as CSV with a header row, or as a JSON
/// array of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_header(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) => fmt_f64(*v),
                    Cell::Int(v) => v.to_string(),
                    Cell::Text(s) => s.clone(),
                    Cell::Empty => String::new(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let records: Vec<serde_json::Map<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|row| {
                self.header
                    .iter()
                    .zip(row)
                    .map(|(h, c)| {
                        let v = match c {
                            Cell::Num(v) => serde_json::Value::from(*v),
                            Cell::Int(v) => serde_json::Value::from(*v),
                            Cell::Text(s) => serde_json::Value::from(s.clone()),
                            Cell::Empty => serde_json::Value::Null,
                        };
                        (h.clone(), v)
                    })
                    .collect()
            })
            .collect();
        to_json(&records)
    }
}

/// One declared tolerance and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub command: String,
    pub name: String,
    pub value: f64,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, Default)]
pub struct Fragment {
    pub command: String,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    /// Lines for standard output.
    pub stdout: Vec<String>,
}

impl Fragment {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Default::default()
        }
    }

    pub fn check(
        &mut self,
        name: impl Into<String>,
        value: f64,
        tolerance: impl Into<String>,
        pass: bool,
    ) {
        self.checks.push(Check {
            command: self.command.clone(),
            name: name.into(),
            value,
            tolerance: tolerance.into(),
            pass,
        });
    }

    pub fn file(&mut self, name: impl Into<String>, contents: String) {
        self.artifacts.push(Artifact {
            name: name.into(),
            contents,
        });
    }

    pub fn say(&mut self, line: impl Into<String>) {
        self.stdout.push(line.into());
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) {
        let v = serde_json::to_value(value).expect("summary values serialize");
        self.summary.insert(key.to_string(), v);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_path: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub files: Vec<String>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub wall_clock_seconds: f64,
}

/// Writes every artifact plus `manifest.json` into `dir`.
pub fn write_report(
    dir: &Path,
    manifest: &Manifest,
    fragments: &[Fragment],
) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for a in fragments.iter().flat_map(|f| &f.artifacts) {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.contents).map_err(|e| CliError::io(&path, e))?;
        written.push(a.name.clone());
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, to_json(manifest)).map_err(|e| CliError::io(&path, e))?;
    written.push("manifest.json".into());
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(2.0), "2.0000000000000000e0");
        assert_eq!(fmt_f64(-1.25), "-1.2500000000000000e0");
        let x = 0.1 + 0.2;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        let json = to_json(&serde_json::json!({"a": [1.0 / 3.0], "n": 3}));
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["a"][0].as_f64().unwrap(), 1.0 / 3.0);
        assert!(json.contains("3.3333333333333331e-1"));
        assert!(json.contains("\"n\": 3"));
    }

    #[test]
    fn tables_render_both_formats() {
        let mut t = Table::new(&["k", "v", "note"]);
        t.push(vec![1usize.into(), 0.5.into(), Cell::Empty]);
        assert_eq!(t.to_csv(), "k,v,note\n1,5.0000000000000000e-1,\n");
        let rows: Vec<serde_json::Value> = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(rows[0]["v"].as_f64(), Some(0.5));
        assert!(rows[0]["note"].is_null());
    }
}
