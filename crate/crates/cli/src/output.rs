//! Experiment records: a table of rows plus named checks, written as CSV
//! (the table only) or JSON (everything).

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::Format;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Column-ordered table.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }
}

#[derive(Clone, Debug)]
pub struct Record {
    pub subcommand: &'static str,
    pub seed: u64,
    pub config: Value,
    pub checks: Vec<Check>,
    pub table: Table,
    pub summary: Value,
}

impl Record {
    pub fn new(subcommand: &'static str, seed: u64, config: &impl Serialize, table: Table) -> Self {
        Record {
            subcommand,
            seed,
            config: serde_json::to_value(config).expect("config serialises"),
            checks: Vec::new(),
            table,
            summary: Value::Null,
        }
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), pass, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json()).expect("record serialises");
                s.push('\n');
                s
            }
        }
    }

    fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .table
            .rows
            .iter()
            .map(|r| {
                let m: Map<String, Value> =
                    self.table.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.clone())).collect();
                Value::Object(m)
            })
            .collect();
        serde_json::json!({
            "subcommand": self.subcommand,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config": self.config,
            "passed": self.passed(),
            "checks": self.checks,
            "summary": self.summary,
            "rows": rows,
        })
    }

    fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.table.columns).expect("in-memory write");
        for r in &self.table.rows {
            w.write_record(r.iter().map(cell)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
