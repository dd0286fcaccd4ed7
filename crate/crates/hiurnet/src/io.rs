//! CSV readers and writers for the external data interfaces.
//!
//! All files are UTF-8 with a header row and `.` as the decimal separator:
//!
//! - indicators: `grid_id,<feature columns>`
//! - inclusion:  `city_id,grid_id`
//! - flows:      `origin_id,origin_kind,dest_id,dest_kind,volume`
//! - coords:     `grid_id,x,y`
//! - split:      `origin_id,origin_kind,dest_id,dest_kind,set`

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{
    EdgeSplit, FlowRecord, InclusionMap, IndicatorTable, PerTask, UnitId, UnitKind,
};
use crate::tensor::Tensor;

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

struct CsvFile {
    path: String,
    header: Vec<String>,
    /// 1-based data row number (for error messages) and fields.
    rows: Vec<(usize, Vec<String>)>,
}

fn parse_csv(path: &Path) -> Result<CsvFile> {
    let text = read_to_string(path)?;
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::MalformedCsv {
            path: name.clone(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedCsv {
            path: name.clone(),
            message: e.to_string(),
        })?;
        rows.push((i + 2, record.iter().map(str::to_string).collect()));
    }
    Ok(CsvFile {
        path: name,
        header,
        rows,
    })
}

fn parse_number(file: &CsvFile, row: usize, column: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::NonNumericCell {
            path: file.path.clone(),
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

fn parse_index(file: &CsvFile, row: usize, column: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::NonNumericCell {
            path: file.path.clone(),
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

/// Load the per-grid indicator matrix. Rows are keyed by the dense grid id;
/// ids must cover `0..n` exactly once. Values stay raw (unstandardized).
pub fn load_grid_indicators(path: &Path) -> Result<IndicatorTable> {
    let file = parse_csv(path)?;
    if file.header.is_empty() || file.header[0] != "grid_id" {
        return Err(Error::MalformedCsv {
            path: file.path,
            message: "first column must be grid_id".into(),
        });
    }
    let feature_names: Vec<String> = file.header[1..].to_vec();
    let n = file.rows.len();
    let c = feature_names.len();
    let mut data = vec![f64::NAN; n * c];
    let mut seen = vec![false; n];
    for (row, fields) in &file.rows {
        let id = parse_index(&file, *row, "grid_id", &fields[0])?;
        if id >= n {
            return Err(Error::MalformedCsv {
                path: file.path.clone(),
                message: format!("row {row}: grid id {id} outside dense range 0..{n}"),
            });
        }
        if seen[id] {
            return Err(Error::DuplicateGridId {
                path: file.path.clone(),
                row: *row,
                id,
            });
        }
        seen[id] = true;
        for (j, value) in fields[1..].iter().enumerate() {
            let v = parse_number(&file, *row, &feature_names[j], value)?;
            if v < 0.0 || !v.is_finite() {
                return Err(Error::MalformedCsv {
                    path: file.path.clone(),
                    message: format!(
                        "row {row}: column {} must be finite and >= 0, got {v}",
                        feature_names[j]
                    ),
                });
            }
            data[id * c + j] = v;
        }
    }
    Ok(IndicatorTable::new(
        feature_names,
        Tensor::matrix(n, c, data),
    ))
}

pub fn load_inclusion(path: &Path) -> Result<InclusionMap> {
    let file = parse_csv(path)?;
    let mut pairs = Vec::with_capacity(file.rows.len());
    for (row, fields) in &file.rows {
        let city = parse_index(&file, *row, "city_id", &fields[0])?;
        let grid = parse_index(&file, *row, "grid_id", &fields[1])?;
        pairs.push((UnitId::city(city), UnitId::mesh(grid)));
    }
    Ok(InclusionMap::new(pairs))
}

pub fn load_flows(path: &Path) -> Result<Vec<FlowRecord>> {
    let file = parse_csv(path)?;
    let mut records = Vec::with_capacity(file.rows.len());
    let mut seen: HashMap<(UnitId, UnitId), usize> = HashMap::new();
    for (row, fields) in &file.rows {
        let unit = |idx: usize, kind_col: usize| -> Result<UnitId> {
            let index = parse_index(&file, *row, &file.header[idx], &fields[idx])?;
            let kind =
                UnitKind::parse(fields[kind_col].trim()).ok_or_else(|| Error::MalformedCsv {
                    path: file.path.clone(),
                    message: format!(
                        "row {row}: unit kind must be mesh or city, got {:?}",
                        fields[kind_col]
                    ),
                })?;
            Ok(UnitId { kind, index })
        };
        let origin = unit(0, 1)?;
        let destination = unit(2, 3)?;
        let volume = parse_number(&file, *row, "volume", &fields[4])?;
        let record = FlowRecord::new(origin, destination, volume)?;
        if let Some(first) = seen.insert(record.key(), *row) {
            return Err(Error::MalformedCsv {
                path: file.path.clone(),
                message: format!(
                    "row {row}: duplicate flow {origin} -> {destination} (first at row {first})"
                ),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Load planar grid centroids, dense by grid id.
pub fn load_coords(path: &Path) -> Result<Vec<[f64; 2]>> {
    let file = parse_csv(path)?;
    let n = file.rows.len();
    let mut coords = vec![[f64::NAN; 2]; n];
    let mut seen = vec![false; n];
    for (row, fields) in &file.rows {
        let id = parse_index(&file, *row, "grid_id", &fields[0])?;
        if id >= n || seen[id] {
            return Err(Error::MalformedCsv {
                path: file.path.clone(),
                message: format!("row {row}: grid id {id} duplicated or outside 0..{n}"),
            });
        }
        seen[id] = true;
        coords[id] = [
            parse_number(&file, *row, "x", &fields[1])?,
            parse_number(&file, *row, "y", &fields[2])?,
        ];
    }
    Ok(coords)
}

fn format_float(v: f64) -> String {
    // Shortest round-trip formatting keeps files byte-stable across runs.
    format!("{v}")
}

pub fn write_indicators(path: &Path, table: &IndicatorTable) -> Result<()> {
    let mut out = String::from("grid_id");
    for name in &table.feature_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..table.grid_count() {
        let _ = write!(out, "{i}");
        for v in table.values.row(i) {
            let _ = write!(out, ",{}", format_float(*v));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn write_inclusion(path: &Path, inclusion: &InclusionMap) -> Result<()> {
    let mut out = String::from("city_id,grid_id\n");
    for (city, grid) in &inclusion.pairs {
        let _ = writeln!(out, "{},{}", city.index, grid.index);
    }
    write_string(path, &out)
}

pub fn write_flows(path: &Path, flows: &[FlowRecord]) -> Result<()> {
    let mut out = String::from("origin_id,origin_kind,dest_id,dest_kind,volume\n");
    for r in flows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.origin.index,
            r.origin.kind.as_str(),
            r.destination.index,
            r.destination.kind.as_str(),
            format_float(r.volume)
        );
    }
    write_string(path, &out)
}

pub fn write_coords(path: &Path, coords: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("grid_id,x,y\n");
    for (i, c) in coords.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{}", format_float(c[0]), format_float(c[1]));
    }
    write_string(path, &out)
}

/// Persist which set each record landed in. Volumes stay in the flows file.
pub fn write_split(path: &Path, split: &EdgeSplit) -> Result<()> {
    let mut out = String::from("origin_id,origin_kind,dest_id,dest_kind,set\n");
    let mut emit = |records: &PerTask<Vec<FlowRecord>>, set: &str| {
        for (_, group) in records.iter() {
            for r in group {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{set}",
                    r.origin.index,
                    r.origin.kind.as_str(),
                    r.destination.index,
                    r.destination.kind.as_str()
                );
            }
        }
    };
    emit(&split.train, "train");
    emit(&split.val, "val");
    emit(&split.test, "test");
    write_string(path, &out)
}

/// Rebuild an [`EdgeSplit`] from a saved assignment plus the full record list.
pub fn load_split(path: &Path, flows: &[FlowRecord], seed: u64) -> Result<EdgeSplit> {
    let file = parse_csv(path)?;
    let mut assignment: HashMap<(UnitId, UnitId), String> = HashMap::new();
    for (row, fields) in &file.rows {
        let origin = UnitId {
            kind: UnitKind::parse(fields[1].trim()).ok_or_else(|| Error::MalformedCsv {
                path: file.path.clone(),
                message: format!("row {row}: bad origin kind"),
            })?,
            index: parse_index(&file, *row, "origin_id", &fields[0])?,
        };
        let dest = UnitId {
            kind: UnitKind::parse(fields[3].trim()).ok_or_else(|| Error::MalformedCsv {
                path: file.path.clone(),
                message: format!("row {row}: bad dest kind"),
            })?,
            index: parse_index(&file, *row, "dest_id", &fields[2])?,
        };
        if assignment
            .insert((origin, dest), fields[4].trim().to_string())
            .is_some()
        {
            // The split is the leakage boundary; a record assigned twice must
            // never pass silently.
            return Err(Error::MalformedCsv {
                path: file.path.clone(),
                message: format!("row {row}: flow {origin} -> {dest} assigned to a set twice"),
            });
        }
    }
    let mut split = EdgeSplit {
        train: PerTask::default(),
        val: PerTask::default(),
        test: PerTask::default(),
        seed,
    };
    for record in flows {
        let set = assignment
            .get(&record.key())
            .ok_or_else(|| Error::MalformedCsv {
                path: file.path.clone(),
                message: format!(
                    "flow {} -> {} missing from split",
                    record.origin, record.destination
                ),
            })?;
        let bucket = match set.as_str() {
            "train" => &mut split.train,
            "val" => &mut split.val,
            "test" => &mut split.test,
            other => {
                return Err(Error::MalformedCsv {
                    path: file.path.clone(),
                    message: format!("unknown set {other:?}"),
                })
            }
        };
        bucket.get_mut(record.kind()).push(*record);
    }
    Ok(split)
}

/// Per-epoch training history rows.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from(
        "epoch,loss_total,loss_c2m,loss_m2c,loss_m2m,val_rmse_c2m,val_rmse_m2c,val_rmse_m2m,val_rmse_weighted\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            format_float(r.loss_total),
            format_float(r.task_losses.c2m),
            format_float(r.task_losses.m2c),
            format_float(r.task_losses.m2m),
            format_float(r.val_rmse.c2m),
            format_float(r.val_rmse.m2c),
            format_float(r.val_rmse.m2m),
            format_float(r.val_rmse_weighted),
        );
    }
    write_string(path, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub task_losses: PerTask<f64>,
    pub val_rmse: PerTask<f64>,
    pub val_rmse_weighted: f64,
}
