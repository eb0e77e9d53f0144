//! CSV panel I/O plus the two data-preparation mechanics applied to raw
//! records: measurement flags with forward fill, and truncation of
//! variable-length records to a block multiple.

use crate::panel::{Cell, Panel};
use crate::schema::{DatasetSchema, VarKind};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Column naming of a panel CSV. Value columns must match the schema's
/// variable names exactly, in declaration order.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    pub id_column: String,
    pub time_column: String,
    pub value_columns: Vec<String>,
}

impl CsvLayout {
    /// Standard layout for a schema: `id`, `time`, then the variables.
    pub fn for_schema(schema: &DatasetSchema) -> Self {
        Self {
            id_column: "id".to_string(),
            time_column: "time".to_string(),
            value_columns: schema.variables.iter().map(|v| v.name.clone()).collect(),
        }
    }

    pub fn matches_schema(&self, schema: &DatasetSchema) -> bool {
        self.value_columns.len() == schema.variables.len()
            && self
                .value_columns
                .iter()
                .zip(&schema.variables)
                .all(|(c, v)| *c == v.name)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("layout does not match schema variable names")]
    LayoutMismatch,
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("unknown class label `{label}` for variable `{variable}`")]
    UnknownClass { label: String, variable: String },
    #[error("bad numeric value `{value}` for variable `{variable}`")]
    BadNumeric { value: String, variable: String },
    #[error("bad time value `{0}`")]
    BadTime(String),
    #[error("ragged time index for patient `{0}` (duplicate or unordered times)")]
    RaggedTime(String),
    #[error("patient `{id}` has {rows} rows, more than sequence length {max}")]
    TooManyRows { id: String, rows: usize, max: usize },
    #[error("variable `{variable}` entirely missing for patient `{patient}`")]
    AllMissing { variable: String, patient: String },
    #[error("flagged variable `{0}` has no `{0} (M)` companion in the schema")]
    NoCompanionFlag(String),
    #[error("panel error: {0}")]
    Panel(#[from] crate::panel::PanelError),
}

/// Reads a panel CSV: one row per (patient, timestep), patients grouped by
/// id in order of first appearance, rows ordered by the time column.
/// Empty fields become missing cells; class labels are mapped to indices.
pub fn load_csv_panel(
    path: &Path,
    schema: &Arc<DatasetSchema>,
    layout: &CsvLayout,
) -> Result<Panel, IngestError> {
    if !layout.matches_schema(schema) {
        return Err(IngestError::LayoutMismatch);
    }
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let col_of = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let id_col = col_of(&layout.id_column)?;
    let time_col = col_of(&layout.time_column)?;
    let value_cols: Vec<usize> = layout
        .value_columns
        .iter()
        .map(|c| col_of(c))
        .collect::<Result<_, _>>()?;

    // (time, cells) rows per patient, keyed by id in first-seen order.
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, Vec<Cell>)>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(id_col).unwrap_or("").to_string();
        let time_text = record.get(time_col).unwrap_or("");
        let time: f64 = time_text
            .trim()
            .parse()
            .map_err(|_| IngestError::BadTime(time_text.to_string()))?;
        let mut cells = Vec::with_capacity(value_cols.len());
        for (v, &col) in value_cols.iter().enumerate() {
            let text = record.get(col).unwrap_or("").trim();
            let spec = &schema.variables[v];
            let cell = if text.is_empty() {
                Cell::Missing
            } else {
                match spec.kind {
                    VarKind::Numeric => {
                        Cell::Num(text.parse().map_err(|_| IngestError::BadNumeric {
                            value: text.to_string(),
                            variable: spec.name.clone(),
                        })?)
                    }
                    VarKind::Binary | VarKind::Categorical => Cell::Class(
                        spec.class_index(text).ok_or_else(|| IngestError::UnknownClass {
                            label: text.to_string(),
                            variable: spec.name.clone(),
                        })?,
                    ),
                }
            };
            cells.push(cell);
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((time, cells));
    }

    let n_vars = schema.variables.len();
    let t_max = schema.sequence_length;
    let mut patient_ids = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(order.len());
    let mut lengths = Vec::with_capacity(order.len());
    for id in order {
        let mut patient_rows = rows.remove(&id).unwrap();
        patient_rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        if patient_rows.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(IngestError::RaggedTime(id));
        }
        if patient_rows.len() > t_max {
            return Err(IngestError::TooManyRows {
                id,
                rows: patient_rows.len(),
                max: t_max,
            });
        }
        let mut grid = vec![Cell::Missing; t_max * n_vars];
        for (t, (_, cells)) in patient_rows.iter().enumerate() {
            grid[t * n_vars..(t + 1) * n_vars].copy_from_slice(cells);
        }
        lengths.push(patient_rows.len());
        values.push(grid);
        patient_ids.push(id);
    }
    Ok(Panel::new(schema.clone(), patient_ids, values, lengths)?)
}

/// Writes a panel as CSV in the published shape: id column, time column,
/// then one column per variable. Class cells are written as their labels,
/// missing cells as empty fields.
pub fn write_csv_panel(panel: &Panel, layout: &CsvLayout, path: &Path) -> Result<(), IngestError> {
    if !layout.matches_schema(&panel.schema) {
        return Err(IngestError::LayoutMismatch);
    }
    let file = std::fs::File::create(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = csv::Writer::from_writer(file);
    let mut header = vec![layout.id_column.clone(), layout.time_column.clone()];
    header.extend(layout.value_columns.iter().cloned());
    writer.write_record(&header)?;
    for p in 0..panel.n_patients() {
        for t in 0..panel.lengths[p] {
            let mut record = vec![panel.patient_ids[p].clone(), t.to_string()];
            for (v, spec) in panel.schema.variables.iter().enumerate() {
                record.push(match panel.cell(p, t, v) {
                    Cell::Num(x) => format!("{x}"),
                    Cell::Class(k) => spec.class_labels[k].clone(),
                    Cell::Missing => String::new(),
                });
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush().map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Companion measurement-flag name for a variable.
pub fn flag_name(variable: &str) -> String {
    format!("{variable} (M)")
}

/// Replaces missing cells of each flagged variable with the last observed
/// value (first observed value for a missing head) and sets the companion
/// `(M)` binary flag to True exactly where an observation occurred.
pub fn forward_fill_with_flags(raw: &Panel, flagged_vars: &[String]) -> Result<Panel, IngestError> {
    let schema = &raw.schema;
    // Resolve (variable, flag) index pairs up front.
    let mut pairs = Vec::with_capacity(flagged_vars.len());
    for name in flagged_vars {
        let (var_idx, _) = schema
            .variable(name)
            .ok_or_else(|| IngestError::MissingColumn(name.clone()))?;
        let (flag_idx, flag_spec) = schema
            .variable(&flag_name(name))
            .ok_or_else(|| IngestError::NoCompanionFlag(name.clone()))?;
        if flag_spec.kind != VarKind::Binary {
            return Err(IngestError::NoCompanionFlag(name.clone()));
        }
        // Measured state maps to the label literally named "True" when
        // present, otherwise to the second class.
        let true_class = flag_spec.class_index("True").unwrap_or(1);
        pairs.push((var_idx, flag_idx, true_class));
    }

    let mut out = raw.clone();
    for p in 0..raw.n_patients() {
        let len = raw.lengths[p];
        for &(var, flag, true_class) in &pairs {
            let first_observed = (0..len)
                .map(|t| raw.cell(p, t, var))
                .find(|c| !c.is_missing())
                .ok_or_else(|| IngestError::AllMissing {
                    variable: schema.variables[var].name.clone(),
                    patient: raw.patient_ids[p].clone(),
                })?;
            let mut last = first_observed;
            for t in 0..len {
                let observed = !raw.cell(p, t, var).is_missing();
                if observed {
                    last = raw.cell(p, t, var);
                }
                *out.cell_mut(p, t, var) = last;
                *out.cell_mut(p, t, flag) = Cell::Class(if observed {
                    true_class
                } else {
                    1 - true_class
                });
            }
        }
    }
    Ok(out)
}

/// Truncates every patient length down to the closest multiple of `block`.
/// Patients whose record becomes empty are dropped and returned by id.
pub fn truncate_to_multiple(panel: &Panel, block: usize) -> (Panel, Vec<String>) {
    assert!(block >= 1, "block must be >= 1");
    let mut patient_ids = Vec::new();
    let mut values = Vec::new();
    let mut lengths = Vec::new();
    let mut dropped = Vec::new();
    let n_vars = panel.n_vars();
    let t_max = panel.schema.sequence_length;
    for p in 0..panel.n_patients() {
        let new_len = (panel.lengths[p] / block) * block;
        if new_len == 0 {
            dropped.push(panel.patient_ids[p].clone());
            continue;
        }
        let mut grid = panel.values[p].clone();
        for t in new_len..t_max {
            for v in 0..n_vars {
                grid[t * n_vars + v] = Cell::Missing;
            }
        }
        patient_ids.push(panel.patient_ids[p].clone());
        values.push(grid);
        lengths.push(new_len);
    }
    let truncated = Panel {
        schema: panel.schema.clone(),
        patient_ids,
        values,
        lengths,
    };
    (truncated, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{TransformKind, VariableSpec};
    use rand::Rng;

    fn flagged_schema() -> Arc<DatasetSchema> {
        let mut flag = VariableSpec::binary("x (M)", ["False", "True"]);
        flag.is_measurement_flag = true;
        Arc::new(DatasetSchema {
            variables: vec![VariableSpec::numeric("x", TransformKind::MinMaxOnly), flag],
            sequence_length: 4,
            latent_dim: 4,
            hidden_dim: 4,
            embed_dim_binary: 2,
            embed_dim_categorical: 4,
        })
    }

    fn panel_from_series(schema: &Arc<DatasetSchema>, series: &[Option<f64>]) -> Panel {
        let t_max = schema.sequence_length;
        let mut grid = vec![Cell::Missing; t_max * 2];
        for (t, v) in series.iter().enumerate() {
            grid[t * 2] = match v {
                Some(x) => Cell::Num(*x),
                None => Cell::Missing,
            };
        }
        Panel::new(schema.clone(), vec!["p".into()], vec![grid], vec![series.len()]).unwrap()
    }

    fn filled_series(panel: &Panel) -> (Vec<f64>, Vec<usize>) {
        let len = panel.lengths[0];
        let vals = (0..len)
            .map(|t| match panel.cell(0, t, 0) {
                Cell::Num(x) => x,
                _ => panic!("expected numeric"),
            })
            .collect();
        let flags = (0..len)
            .map(|t| match panel.cell(0, t, 1) {
                Cell::Class(k) => k,
                _ => panic!("expected class"),
            })
            .collect();
        (vals, flags)
    }

    #[test]
    fn forward_fill_carries_last_observation() {
        let schema = flagged_schema();
        let raw = panel_from_series(&schema, &[Some(5.0), None, None, Some(7.0)]);
        let filled = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap();
        let (vals, flags) = filled_series(&filled);
        assert_eq!(vals, vec![5.0, 5.0, 5.0, 7.0]);
        assert_eq!(flags, vec![1, 0, 0, 1]);
    }

    #[test]
    fn fully_observed_series_is_unchanged_with_all_true_flags() {
        let schema = flagged_schema();
        let raw = panel_from_series(&schema, &[Some(1.0), Some(2.0), Some(3.0)]);
        let filled = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap();
        let (vals, flags) = filled_series(&filled);
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
        assert_eq!(flags, vec![1, 1, 1]);
    }

    #[test]
    fn leading_missing_backfills_from_first_observation() {
        let schema = flagged_schema();
        let raw = panel_from_series(&schema, &[None, None, Some(3.0)]);
        let filled = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap();
        let (vals, flags) = filled_series(&filled);
        assert_eq!(vals, vec![3.0, 3.0, 3.0]);
        assert_eq!(flags, vec![0, 0, 1]);
    }

    #[test]
    fn entirely_missing_variable_is_an_error() {
        let schema = flagged_schema();
        let raw = panel_from_series(&schema, &[None, None, None]);
        let err = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap_err();
        assert!(matches!(err, IngestError::AllMissing { .. }));
    }

    // Independent oracle: a scan that records observation positions first,
    // then fills each gap from the nearest earlier observation (or the
    // first observation for the head).
    fn oracle_fill(series: &[Option<f64>]) -> (Vec<f64>, Vec<bool>) {
        let observed: Vec<(usize, f64)> = series
            .iter()
            .enumerate()
            .filter_map(|(t, v)| v.map(|x| (t, x)))
            .collect();
        let mut vals = Vec::with_capacity(series.len());
        let mut flags = Vec::with_capacity(series.len());
        for t in 0..series.len() {
            let prior = observed.iter().rev().find(|(tt, _)| *tt <= t);
            let value = match prior {
                Some((_, x)) => *x,
                None => observed.first().expect("oracle needs one observation").1,
            };
            vals.push(value);
            flags.push(series[t].is_some());
        }
        (vals, flags)
    }

    #[test]
    fn forward_fill_matches_scan_oracle_on_random_masks() {
        let schema = flagged_schema();
        let mut rng = crate::seed::rng_from(11);
        for _ in 0..200 {
            let len = rng.gen_range(1..=4);
            let mut series: Vec<Option<f64>> = (0..len)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        Some(rng.gen_range(-5.0..5.0))
                    } else {
                        None
                    }
                })
                .collect();
            if series.iter().all(|v| v.is_none()) {
                series[rng.gen_range(0..len)] = Some(1.0);
            }
            let raw = panel_from_series(&schema, &series);
            let filled = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap();
            let (vals, flags) = filled_series(&filled);
            let (want_vals, want_flags) = oracle_fill(&series);
            assert_eq!(vals, want_vals);
            assert_eq!(
                flags,
                want_flags.iter().map(|&b| b as usize).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn forward_fill_is_idempotent() {
        let schema = flagged_schema();
        let raw = panel_from_series(&schema, &[Some(5.0), None, Some(2.0), None]);
        let once = forward_fill_with_flags(&raw, &["x".to_string()]).unwrap();
        let twice = forward_fill_with_flags(&once, &["x".to_string()]).unwrap();
        let (v1, _) = filled_series(&once);
        let (v2, f2) = filled_series(&twice);
        assert_eq!(v1, v2);
        // All cells observed after the first pass, so flags become all True.
        assert_eq!(f2, vec![1, 1, 1, 1]);
    }

    fn long_schema() -> Arc<DatasetSchema> {
        Arc::new(DatasetSchema {
            variables: vec![VariableSpec::numeric("x", TransformKind::MinMaxOnly)],
            sequence_length: 60,
            latent_dim: 4,
            hidden_dim: 4,
            embed_dim_binary: 2,
            embed_dim_categorical: 4,
        })
    }

    fn panel_of_length(schema: &Arc<DatasetSchema>, len: usize) -> Panel {
        let t_max = schema.sequence_length;
        let mut grid = vec![Cell::Missing; t_max];
        for (t, cell) in grid.iter_mut().enumerate().take(len) {
            *cell = Cell::Num(t as f64);
        }
        Panel::new(schema.clone(), vec!["p".into()], vec![grid], vec![len]).unwrap()
    }

    #[test]
    fn truncation_rounds_down_to_block() {
        let schema = long_schema();
        let (p30, dropped) = truncate_to_multiple(&panel_of_length(&schema, 32), 10);
        assert_eq!(p30.lengths, vec![30]);
        assert!(dropped.is_empty());
        let (p50, _) = truncate_to_multiple(&panel_of_length(&schema, 51), 10);
        assert_eq!(p50.lengths, vec![50]);
    }

    #[test]
    fn truncation_drops_too_short_records() {
        let schema = long_schema();
        let (panel, dropped) = truncate_to_multiple(&panel_of_length(&schema, 7), 10);
        assert_eq!(panel.n_patients(), 0);
        assert_eq!(dropped, vec!["p".to_string()]);
    }

    #[test]
    fn truncation_never_increases_lengths_and_is_modular() {
        let schema = long_schema();
        for len in 1..=60 {
            for block in [1, 3, 10] {
                let (panel, dropped) = truncate_to_multiple(&panel_of_length(&schema, len), block);
                if let Some(&l) = panel.lengths.first() {
                    assert!(l <= len);
                    assert_eq!(l % block, 0);
                } else {
                    assert_eq!(dropped.len(), 1);
                }
            }
        }
    }
}
