//! Ensemble import/export and tabular output.
//!
//! Text tables start with `# key=value` header lines followed by a CSV body.
//! The JSON form mirrors it as `{"header": {...}, "columns": [...], "rows": [...]}`.
//!
//! Binary ensembles: magic `RFENS1`, a little-endian `u32` length, a JSON
//! header of that length, then `values`, `increments` and `aux` as `f64` LE.

use std::io::{BufRead, BufReader, Read, Write};

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::contribution::ContributionTable;
use crate::ensemble::{PathEnsemble, PathSource};
use crate::error::{invalid, Error, Result};
use crate::grid::TimeGrid;
use crate::market::model_from_json;

pub const BINARY_MAGIC: &[u8; 6] = b"RFENS1";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v:?}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(_) => Value::Null,
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
        }
    }
}

/// Header, fixed column order, rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { header: Vec::new(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.header.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::ShapeMismatch(format!("row has {} cells, table has {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> Result<()> {
        for (k, v) in &self.header {
            writeln!(w, "# {k}={v}")?;
        }
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(&self.columns)?;
        for r in &self.rows {
            cw.write_record(r.iter().map(Cell::csv))?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut header = Map::new();
        for (k, v) in &self.header {
            header.insert(k.clone(), Value::String(v.clone()));
        }
        let rows: Vec<Value> = self.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect();
        json!({"header": header, "columns": self.columns, "rows": rows})
    }

    pub fn write_json(&self, w: &mut dyn Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, &self.to_json())?;
        writeln!(w)?;
        Ok(())
    }
}

/// Splits `# key=value` lines from a CSV body.
pub fn read_header_csv(r: impl Read) -> Result<(Vec<(String, String)>, Vec<Vec<String>>)> {
    let mut header = Vec::new();
    let mut body = String::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some((k, v)) = rest.split_once('=') {
                header.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(body.as_bytes());
    let mut rows = Vec::new();
    for rec in rd.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn model_json(src: &dyn PathSource) -> Value {
    match src.model() {
        Some(m) => {
            let mut v = m.params_json();
            if let Value::Object(o) = &mut v {
                o.insert("type".into(), Value::String(m.name().to_string()));
            }
            v
        }
        None => Value::Null,
    }
}

fn layout_json(e: &PathEnsemble) -> Value {
    let g = e.grid();
    json!({
        "horizon": g.horizon(),
        "n_steps": g.n_steps(),
        "n_paths": e.n_paths(),
        "n_assets": e.n_assets(),
        "n_drivers": e.n_drivers(),
        "n_aux": e.n_aux(),
        "seed": e.seed(),
        "model": model_json(e),
    })
}

/// Rows `(path, node, asset, value)`; auxiliary tracks use `asset >= n_assets`.
/// Brownian increments are not stored in this form.
pub fn write_ensemble_csv(e: &PathEnsemble, w: &mut dyn Write) -> Result<()> {
    let layout = layout_json(e);
    writeln!(w, "# layout={}", serde_json::to_string(&layout)?)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(["path", "node", "asset", "value"])?;
    let (d, a) = (e.n_assets(), e.n_aux());
    for p in 0..e.n_paths() {
        for k in 0..e.grid().n_nodes() {
            for i in 0..d {
                cw.write_record([p.to_string(), k.to_string(), i.to_string(), e.value(p, k, i).to_string()])?;
            }
            for j in 0..a {
                cw.write_record([p.to_string(), k.to_string(), (d + j).to_string(), e.aux_value(p, k, j).to_string()])?;
            }
        }
    }
    cw.flush()?;
    Ok(())
}

struct Layout {
    grid: TimeGrid,
    n_paths: usize,
    n_assets: usize,
    n_drivers: usize,
    n_aux: usize,
    seed: Option<u64>,
    model: Value,
}

fn parse_layout(v: &Value) -> Result<Layout> {
    let get = |k: &str| -> Result<usize> {
        v.get(k).and_then(Value::as_u64).map(|x| x as usize).ok_or_else(|| Error::Parse(format!("layout field '{k}'")))
    };
    let horizon = v.get("horizon").and_then(Value::as_f64).ok_or_else(|| Error::Parse("layout field 'horizon'".into()))?;
    Ok(Layout {
        grid: TimeGrid::new(horizon, get("n_steps")?)?,
        n_paths: get("n_paths")?,
        n_assets: get("n_assets")?,
        n_drivers: get("n_drivers")?,
        n_aux: get("n_aux")?,
        seed: v.get("seed").and_then(Value::as_u64),
        model: v.get("model").cloned().unwrap_or(Value::Null),
    })
}

fn assemble(l: Layout, values: Vec<f64>, increments: Vec<f64>, aux: Vec<f64>) -> Result<PathEnsemble> {
    let mut e = PathEnsemble::from_parts(l.grid, l.n_paths, l.n_assets, l.n_drivers, l.n_aux, values, increments, aux)?;
    if !l.model.is_null() {
        e = e.with_model(model_from_json(&l.model)?)?;
    }
    if let Some(s) = l.seed {
        e = e.with_seed(s);
    }
    Ok(e)
}

pub fn read_ensemble_csv(r: impl Read) -> Result<PathEnsemble> {
    let (header, rows) = read_header_csv(r)?;
    let layout = header
        .iter()
        .find(|(k, _)| k == "layout")
        .ok_or_else(|| Error::Parse("missing '# layout=' header".into()))?;
    let l = parse_layout(&serde_json::from_str(&layout.1)?)?;
    let nodes = l.grid.n_nodes();
    let (d, a) = (l.n_assets, l.n_aux);
    let mut values = vec![f64::NAN; l.n_paths * nodes * d];
    let mut aux = vec![f64::NAN; l.n_paths * nodes * a];
    for (i, row) in rows.iter().enumerate().skip(1) {
        if row.len() != 4 {
            return Err(Error::Parse(format!("row {i}: expected 4 fields")));
        }
        let num = |j: usize| row[j].parse::<usize>().map_err(|e| Error::Parse(format!("row {i}: {e}")));
        let (p, k, c) = (num(0)?, num(1)?, num(2)?);
        let v: f64 = row[3].parse().map_err(|e| Error::Parse(format!("row {i}: {e}")))?;
        if p >= l.n_paths || k >= nodes || c >= d + a {
            return Err(Error::Parse(format!("row {i}: index out of range")));
        }
        if c < d {
            values[(p * nodes + k) * d + c] = v;
        } else {
            aux[(p * nodes + k) * a + (c - d)] = v;
        }
    }
    if values.iter().chain(&aux).any(|v| v.is_nan()) {
        return Err(Error::Parse("ensemble table is incomplete".into()));
    }
    let increments = vec![0.0; l.n_paths * l.grid.n_steps() * l.n_drivers];
    assemble(l, values, increments, aux)
}

pub fn write_ensemble_binary(e: &PathEnsemble, w: &mut dyn Write) -> Result<()> {
    let header = serde_json::to_vec(&layout_json(e))?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for arr in [e.values(), e.increments(), e.aux_values()] {
        let mut buf = Vec::with_capacity(arr.len() * 8);
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_ensemble_binary(mut r: impl Read) -> Result<PathEnsemble> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Parse("not a riskflow binary ensemble".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let l = parse_layout(&serde_json::from_slice(&header)?)?;
    let nodes = l.grid.n_nodes();
    let mut read_arr = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let values = read_arr(l.n_paths * nodes * l.n_assets)?;
    let increments = read_arr(l.n_paths * l.grid.n_steps() * l.n_drivers)?;
    let aux = read_arr(l.n_paths * nodes * l.n_aux)?;
    assemble(l, values, increments, aux)
}

/// Columns `path, t, asset, u, c, k`.
pub fn contribution_table(t: &ContributionTable) -> Table {
    let mut out = Table::new(&["path", "t", "asset", "u", "c", "k"]);
    for p in 0..t.n_paths {
        for k in 0..t.grid.n_steps() {
            for i in 0..t.n_assets {
                let j = t.index(p, k, i);
                out.rows.push(vec![p.into(), t.grid.t(k).into(), i.into(), t.u[j].into(), t.c[j].into(), (t.u[j] * t.c[j]).into()]);
            }
        }
    }
    out
}

pub fn write_contribution_csv(t: &ContributionTable, w: &mut dyn Write) -> Result<()> {
    contribution_table(t).write_csv(w)
}

/// Reads a square matrix from CSV rows (no header).
pub fn read_matrix_csv(r: impl Read) -> Result<Vec<Vec<f64>>> {
    let (_, rows) = read_header_csv(r)?;
    let m: Vec<Vec<f64>> = rows
        .iter()
        .filter(|r| !(r.len() == 1 && r[0].is_empty()))
        .map(|r| r.iter().map(|x| x.parse::<f64>().map_err(|e| Error::Parse(format!("'{x}': {e}")))).collect())
        .collect::<Result<_>>()?;
    if m.is_empty() || m.iter().any(|r| r.len() != m.len()) {
        return Err(invalid("matrix must be square and non-empty"));
    }
    Ok(m)
}
