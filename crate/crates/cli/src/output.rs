use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use riskflow::io::Table;
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Run header plus one or more named tables.
pub struct Report {
    pub header: Vec<(String, String)>,
    pub tables: Vec<(String, Table)>,
}

impl Report {
    pub fn new(header: Vec<(String, String)>) -> Self {
        Self { header, tables: Vec::new() }
    }

    pub fn add(&mut self, name: &str, table: Table) {
        self.tables.push((name.to_string(), table));
    }

    /// CSV: `# key=value` header lines, then each table introduced by
    /// `# table=<name>` and separated by a blank line.
    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        for (k, v) in &self.header {
            writeln!(w, "# {k}={v}")?;
        }
        for (i, (name, t)) in self.tables.iter().enumerate() {
            if i > 0 {
                writeln!(w)?;
            }
            writeln!(w, "# table={name}")?;
            let mut bare = t.clone();
            bare.header.clear();
            bare.write_csv(w)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut header = Map::new();
        for (k, v) in &self.header {
            header.insert(k.clone(), Value::String(v.clone()));
        }
        let mut tables = Map::new();
        for (name, t) in &self.tables {
            let v = t.to_json();
            tables.insert(name.clone(), json!({"columns": v["columns"], "rows": v["rows"]}));
        }
        json!({"header": header, "tables": tables})
    }

    pub fn emit(&self, format: Format, out: Option<&Path>) -> Result<()> {
        with_output(out, |w| match format {
            Format::Csv => self.write_csv(w),
            Format::Json => {
                serde_json::to_writer_pretty(&mut *w, &self.to_json())?;
                writeln!(w)?;
                Ok(())
            }
        })
    }
}

/// Runs `f` against the output file, or stdout when no file is given.
pub fn with_output(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
            let mut w = BufWriter::new(file);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}
