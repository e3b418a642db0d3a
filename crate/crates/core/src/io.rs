//! Delimited-text readers for expression matrices and designs, and the
//! `NAME=w1,w2,…` contrast syntax.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Units × samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub unit_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub values: Vec<f64>,
    /// Values of the column pulled out as external side information.
    pub side: Option<Vec<f64>>,
}

impl ExpressionMatrix {
    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn k(&self) -> usize {
        self.sample_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignTable {
    pub columns: Vec<String>,
    pub sample_ids: Option<Vec<String>>,
    pub x: DMatrix<f64>,
}

fn delimiter_for(path: &Path, header: &str) -> u8 {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("tsv") | Some("tab") => b'\t',
        Some("csv") => b',',
        _ if header.contains('\t') => b'\t',
        _ => b',',
    }
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column,
        message: message.into(),
    }
}

/// Header plus data rows with their 1-based line numbers.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path, first))
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, 1, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(parse_error(path, 1, 1, "missing header row"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, 1, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                record.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_number(path: &Path, line: usize, column: usize, field: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(parse_error(path, line, column, format!("non-finite value '{field}'"))),
        Err(_) => Err(parse_error(path, line, column, format!("expected a number, found '{field}'"))),
    }
}

/// Reads a units × samples matrix. The header holds sample IDs after a
/// leading cell for the unit-ID column. With `side_column`, that column is
/// returned as side information and dropped from the samples.
pub fn read_matrix(path: &Path, side_column: Option<&str>) -> Result<ExpressionMatrix> {
    let table = read_table(path)?;
    if table.header.len() < 2 {
        return Err(parse_error(path, 1, 1, "need a unit-ID column and at least one sample column"));
    }
    let side_index = match side_column {
        Some(name) => Some(
            table.header[1..]
                .iter()
                .position(|h| h == name)
                .map(|j| j + 1)
                .ok_or_else(|| Error::Config(format!("side column '{name}' not found in {}", path.display())))?,
        ),
        None => None,
    };
    let sample_cols: Vec<usize> = (1..table.header.len()).filter(|&j| Some(j) != side_index).collect();
    if sample_cols.is_empty() {
        return Err(parse_error(path, 1, 1, "no sample columns"));
    }
    let sample_ids: Vec<String> = sample_cols.iter().map(|&j| table.header[j].clone()).collect();
    let mut seen = std::collections::HashSet::new();
    for (j, id) in sample_ids.iter().enumerate() {
        if !seen.insert(id) {
            return Err(parse_error(path, 1, sample_cols[j] + 1, format!("duplicate sample ID '{id}'")));
        }
    }

    let mut unit_ids = Vec::with_capacity(table.rows.len());
    let mut values = Vec::with_capacity(table.rows.len() * sample_cols.len());
    let mut side = side_index.map(|_| Vec::with_capacity(table.rows.len()));
    for (line, row) in &table.rows {
        unit_ids.push(row[0].clone());
        for &j in &sample_cols {
            values.push(parse_number(path, *line, j + 1, &row[j])?);
        }
        if let (Some(j), Some(side)) = (side_index, side.as_mut()) {
            side.push(parse_number(path, *line, j + 1, &row[j])?);
        }
    }
    if unit_ids.is_empty() {
        return Err(parse_error(path, 2, 1, "matrix has no units"));
    }
    Ok(ExpressionMatrix { unit_ids, sample_ids, values, side })
}

fn is_sample_header(h: &str) -> bool {
    h.is_empty() || h.eq_ignore_ascii_case("sample") || h.eq_ignore_ascii_case("sample_id")
}

/// Reads a samples × covariates design. A first column headed by an empty
/// cell, `sample` or `sample_id` holds sample IDs.
pub fn read_design(path: &Path) -> Result<DesignTable> {
    let table = read_table(path)?;
    let has_ids = is_sample_header(&table.header[0]);
    let start = usize::from(has_ids);
    let columns: Vec<String> = table.header[start..].to_vec();
    if columns.is_empty() {
        return Err(parse_error(path, 1, 1, "design has no covariate columns"));
    }
    let k = table.rows.len();
    if k == 0 {
        return Err(parse_error(path, 2, 1, "design has no rows"));
    }
    let mut x = DMatrix::zeros(k, columns.len());
    let mut ids = Vec::with_capacity(k);
    for (i, (line, row)) in table.rows.iter().enumerate() {
        if has_ids {
            ids.push(row[0].clone());
        }
        for j in 0..columns.len() {
            x[(i, j)] = parse_number(path, *line, start + j + 1, &row[start + j])?;
        }
    }
    Ok(DesignTable {
        columns,
        sample_ids: has_ids.then_some(ids),
        x,
    })
}

impl DesignTable {
    /// Reorders rows to match `samples` when the design carries sample IDs;
    /// otherwise only checks the row count.
    pub fn aligned_to(&self, samples: &[String]) -> Result<DMatrix<f64>> {
        let Some(ids) = &self.sample_ids else {
            if self.x.nrows() != samples.len() {
                return Err(Error::Input(format!(
                    "design has {} rows but the matrix has {} samples",
                    self.x.nrows(),
                    samples.len()
                )));
            }
            return Ok(self.x.clone());
        };
        if ids.len() != samples.len() {
            return Err(Error::Input(format!(
                "design has {} samples but the matrix has {}",
                ids.len(),
                samples.len()
            )));
        }
        let rows: Vec<usize> = samples
            .iter()
            .map(|s| {
                ids.iter()
                    .position(|id| id == s)
                    .ok_or_else(|| Error::Input(format!("sample '{s}' is missing from the design")))
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(samples.len(), self.x.ncols(), |i, j| self.x[(rows[i], j)]))
    }
}

/// Parses `NAME=w1,w2,…` with one weight per design column.
pub fn parse_contrast(spec: &str, p: usize) -> Result<(String, Vec<f64>)> {
    let (name, weights) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("contrast '{spec}' is not of the form NAME=w1,w2,…")))?;
    let name = name.trim();
    if name.is_empty() {
        return Err(Error::Config(format!("contrast '{spec}' has an empty name")));
    }
    let w = weights
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("contrast {name}: bad weight '{}'", s.trim())))
        })
        .collect::<Result<Vec<f64>>>()?;
    if w.len() != p {
        return Err(Error::Config(format!(
            "contrast {name} has {} weights but the design has {p} columns",
            w.len()
        )));
    }
    Ok((name.to_string(), w))
}

/// Shortest round-trip text for `v`, in scientific notation when tiny or
/// huge.
pub fn fmt_float(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_output(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}
