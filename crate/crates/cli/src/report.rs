//! Result rows, CSV persistence and the comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const HEADER: &str =
    "method,asc,domain,shift,n_way,k_shot,episodes,mean_acc,ci95,lambda,batch_b,top_m,reg_block,seed,wall_time_s";

/// Header of the per-block parameter-change file; one `block_i` column per block follows.
pub const PARAM_CHANGE_PREFIX: &str = "method,asc,domain,k_shot,reg_block";

/// One evaluation cell.
///
/// `asc` is `off` for the plain baseline, `on` for adaptive weights on source
/// batches, `uniform` with the weights disabled and `target` when the support
/// set itself is regularised. The ASC columns are empty when `asc` is `off`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub asc: String,
    pub domain: String,
    pub shift: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub lambda: Option<f64>,
    pub batch_b: Option<usize>,
    pub top_m: Option<String>,
    pub reg_block: Option<String>,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl ResultRow {
    fn is_baseline(&self) -> bool {
        self.asc == "off"
    }

    /// Everything except the domain columns, used to line rows up in the table.
    fn label(&self) -> String {
        let mut s = format!("{} {}-shot", self.method, self.k_shot);
        if !self.is_baseline() {
            s.push_str(if self.asc == "on" { " +ASC" } else { " +ASC/" });
            if self.asc != "on" {
                s.push_str(&self.asc);
            }
            let mut extras = Vec::new();
            if let Some(b) = self.batch_b {
                extras.push(format!("B={b}"));
            }
            if let Some(m) = &self.top_m {
                extras.push(format!("m={m}"));
            }
            if let Some(r) = &self.reg_block {
                extras.push(format!("block={r}"));
            }
            if let Some(l) = self.lambda {
                extras.push(format!("λ={l}"));
            }
            s.push_str(&format!(" ({})", extras.join(" ")));
        }
        s
    }

    fn baseline_key(&self) -> (String, usize, usize) {
        (self.method.clone(), self.n_way, self.k_shot)
    }
}

pub fn write_rows(rows: &[ResultRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_rows(path: &Path) -> CliResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    let found: Vec<&str> = header.iter().collect();
    if found.join(",") != HEADER {
        return Err(CliError::Format(format!(
            "{}: header {:?} does not match the result schema",
            path.display(),
            found.join(",")
        )));
    }
    let rows = r
        .deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(|e| csv_error(path, e))?;
    for row in &rows {
        if !(0.0..=1.0).contains(&row.mean_acc) {
            return Err(CliError::Format(format!("{}: mean_acc {} outside [0, 1]", path.display(), row.mean_acc)));
        }
    }
    Ok(rows)
}

/// Writes per-block parameter change, one row per (cell, regularised block).
pub fn write_param_change(rows: &[(ResultRow, Vec<f64>)], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let blocks = rows.first().map_or(0, |r| r.1.len());
    let mut header: Vec<String> = PARAM_CHANGE_PREFIX.split(',').map(String::from).collect();
    header.extend((1..=blocks).map(|i| format!("block_{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, change) in rows {
        let mut rec = vec![
            row.method.clone(),
            row.asc.clone(),
            row.domain.clone(),
            row.k_shot.to_string(),
            row.reg_block.clone().unwrap_or_default(),
        ];
        rec.extend(change.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Format(format!("{}: {other:?}", path.display())),
    }
}

/// One line of the comparison table: accuracy per domain and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct TableLine {
    pub label: String,
    pub cells: Vec<Option<f64>>,
    pub average: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub domains: Vec<String>,
    pub lines: Vec<TableLine>,
}

/// Groups rows into table lines, in first-seen order. Every non-baseline
/// line is followed by a `Δ` line against the matching baseline, if any.
pub fn build_table(rows: &[ResultRow]) -> Table {
    let mut domains: Vec<String> = Vec::new();
    for r in rows {
        if !domains.contains(&r.domain) {
            domains.push(r.domain.clone());
        }
    }
    let col = |d: &str| domains.iter().position(|x| x == d).unwrap();

    let mut order: Vec<String> = Vec::new();
    type Key = (String, usize, usize);
    let mut grouped: BTreeMap<String, (Vec<Option<f64>>, Option<Key>)> = BTreeMap::new();
    let mut baselines: BTreeMap<Key, String> = BTreeMap::new();
    for r in rows {
        let label = r.label();
        let entry = grouped.entry(label.clone()).or_insert_with(|| {
            order.push(label.clone());
            (vec![None; domains.len()], None)
        });
        entry.0[col(&r.domain)] = Some(r.mean_acc);
        if r.is_baseline() {
            baselines.entry(r.baseline_key()).or_insert(label);
        } else {
            entry.1 = Some(r.baseline_key());
        }
    }

    let average = |cells: &[Option<f64>]| -> Option<f64> {
        let vals: Option<Vec<f64>> = cells.iter().copied().collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut lines = Vec::new();
    for label in &order {
        let (cells, base_key) = &grouped[label];
        lines.push(TableLine {
            label: label.clone(),
            cells: cells.clone(),
            average: average(cells),
        });
        if let Some(base) = base_key.as_ref().and_then(|k| baselines.get(k)) {
            let base_cells = &grouped[base].0;
            let delta: Vec<Option<f64>> = cells
                .iter()
                .zip(base_cells)
                .map(|(a, b)| Some((*a)? - (*b)?))
                .collect();
            lines.push(TableLine {
                label: "  Δ".into(),
                average: average(&delta),
                cells: delta,
            });
        }
    }
    Table { domains, lines }
}

pub fn render_table(table: &Table) -> String {
    let width = table.lines.iter().map(|l| l.label.chars().count()).max().unwrap_or(0).max(6);
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "");
    for d in &table.domains {
        let _ = write!(out, " {d:>8}");
    }
    let _ = writeln!(out, " {:>8}", "Ave.");
    for line in &table.lines {
        let pad = width - line.label.chars().count();
        let _ = write!(out, "{}{}", line.label, " ".repeat(pad));
        for c in &line.cells {
            let _ = write!(out, " {:>8}", fmt(*c));
        }
        let _ = writeln!(out, " {:>8}", fmt(line.average));
    }
    out
}
