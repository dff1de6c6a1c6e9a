//! Table, CSV and JSON rendering of command results.

use std::fmt::Write as _;

use clap::ValueEnum;
use infsa_core::{Matrix, Vector};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

pub enum Section {
    Matrix(Matrix),
    Vector(Vector),
    /// Ordered key/value pairs; values are preformatted.
    Fields(Vec<(String, Value)>),
    /// Header plus rows of cells.
    Rows(Vec<String>, Vec<Vec<Value>>),
}

#[derive(Default)]
pub struct Report {
    sections: Vec<(String, Section)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn matrix(mut self, name: &str, m: Matrix) -> Self {
        self.sections.push((name.into(), Section::Matrix(m)));
        self
    }

    pub fn vector(mut self, name: &str, v: Vector) -> Self {
        self.sections.push((name.into(), Section::Vector(v)));
        self
    }

    pub fn fields(mut self, name: &str, fields: Vec<(&str, Value)>) -> Self {
        let fields = fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.sections.push((name.into(), Section::Fields(fields)));
        self
    }

    pub fn rows(mut self, name: &str, header: &[&str], rows: Vec<Vec<Value>>) -> Self {
        let header = header.iter().map(|s| s.to_string()).collect();
        self.sections.push((name.into(), Section::Rows(header, rows)));
        self
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.table(),
            Format::Csv => self.csv(),
            Format::Json => {
                let mut obj = Map::new();
                for (name, s) in &self.sections {
                    obj.insert(name.clone(), section_json(s));
                }
                let mut out = serde_json::to_string_pretty(&Value::Object(obj)).expect("report serializes");
                out.push('\n');
                out
            }
        }
    }

    fn table(&self) -> String {
        let mut out = String::new();
        for (idx, (name, s)) in self.sections.iter().enumerate() {
            if idx > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "{name}:");
            match s {
                Section::Matrix(m) => {
                    for i in 0..m.rows() {
                        let cells: Vec<String> = m.row(i).iter().map(|x| format!("{x:>12.6}")).collect();
                        let _ = writeln!(out, "  {}", cells.join(" "));
                    }
                }
                Section::Vector(v) => {
                    for (i, x) in v.iter().enumerate() {
                        let _ = writeln!(out, "  {i:>4}  {x:.6}");
                    }
                }
                Section::Fields(fields) => {
                    let w = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                    for (k, v) in fields {
                        let _ = writeln!(out, "  {k:<w$}  {}", cell_table(v));
                    }
                }
                Section::Rows(header, rows) => {
                    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
                    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(cell_table).collect()).collect();
                    for r in &cells {
                        for (w, c) in widths.iter_mut().zip(r) {
                            *w = (*w).max(c.len());
                        }
                    }
                    let line = |items: &[String]| {
                        items
                            .iter()
                            .zip(&widths)
                            .map(|(c, w)| format!("{c:<w$}"))
                            .collect::<Vec<_>>()
                            .join("  ")
                    };
                    let _ = writeln!(out, "  {}", line(header).trim_end());
                    for r in &cells {
                        let _ = writeln!(out, "  {}", line(r).trim_end());
                    }
                }
            }
        }
        out
    }

    fn csv(&self) -> String {
        let mut out = String::new();
        let multi = self.sections.len() > 1;
        for (idx, (name, s)) in self.sections.iter().enumerate() {
            if multi {
                if idx > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {name}");
            }
            match s {
                Section::Matrix(m) => {
                    for i in 0..m.rows() {
                        let cells: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
                        let _ = writeln!(out, "{}", cells.join(","));
                    }
                }
                Section::Vector(v) => {
                    out.push_str("index,value\n");
                    for (i, x) in v.iter().enumerate() {
                        let _ = writeln!(out, "{i},{x}");
                    }
                }
                Section::Fields(fields) => {
                    out.push_str("key,value\n");
                    for (k, v) in fields {
                        let _ = writeln!(out, "{k},{}", cell_plain(v));
                    }
                }
                Section::Rows(header, rows) => {
                    let _ = writeln!(out, "{}", header.join(","));
                    for r in rows {
                        let cells: Vec<String> = r.iter().map(cell_plain).collect();
                        let _ = writeln!(out, "{}", cells.join(","));
                    }
                }
            }
        }
        out
    }
}

fn cell_plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn cell_table(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap_or(f64::NAN)),
        other => cell_plain(other),
    }
}

fn section_json(s: &Section) -> Value {
    match s {
        Section::Matrix(m) => Value::Array((0..m.rows()).map(|i| json!(m.row(i))).collect()),
        Section::Vector(v) => json!(v.as_slice()),
        Section::Fields(fields) => Value::Object(fields.iter().cloned().collect()),
        Section::Rows(header, rows) => Value::Array(
            rows.iter()
                .map(|r| Value::Object(header.iter().cloned().zip(r.iter().cloned()).collect()))
                .collect(),
        ),
    }
}
