//! Panels: real or synthetic data as a (patients x timesteps x variables)
//! grid of typed cells, padded to the schema's sequence length with
//! per-patient effective lengths.

use crate::schema::{DatasetSchema, VarKind};
use std::sync::Arc;
use thiserror::Error;

/// One cell of a panel. Class cells store the index into the variable's
/// declared labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    Class(usize),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    /// Scalar view used by correlations and distances: numeric value as
    /// stored, class cells as their ordinal index.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Cell::Num(x) => Some(*x),
            Cell::Class(k) => Some(*k as f64),
            Cell::Missing => None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PanelError {
    #[error("patient `{patient}` variable `{variable}`: class index {index} out of range (< {classes} required)")]
    ClassOutOfRange {
        patient: String,
        variable: String,
        index: usize,
        classes: usize,
    },
    #[error("patient `{patient}`: length {length} outside [1, {max}]")]
    BadLength {
        patient: String,
        length: usize,
        max: usize,
    },
    #[error("patient `{patient}` variable `{variable}`: numeric cell expected, found class index")]
    KindMismatch { patient: String, variable: String },
    #[error("patient count mismatch between ids ({ids}), values ({values}) and lengths ({lengths})")]
    ShapeMismatch {
        ids: usize,
        values: usize,
        lengths: usize,
    },
}

/// Typed data panel over a shared schema.
#[derive(Debug, Clone)]
pub struct Panel {
    pub schema: Arc<DatasetSchema>,
    pub patient_ids: Vec<String>,
    /// Row-major (t * n_vars + v) cells per patient, padded to
    /// `schema.sequence_length` timesteps with `Cell::Missing`.
    pub values: Vec<Vec<Cell>>,
    /// Effective record length per patient, in [1, sequence_length].
    pub lengths: Vec<usize>,
}

impl Panel {
    pub fn new(
        schema: Arc<DatasetSchema>,
        patient_ids: Vec<String>,
        values: Vec<Vec<Cell>>,
        lengths: Vec<usize>,
    ) -> Result<Self, PanelError> {
        if patient_ids.len() != values.len() || patient_ids.len() != lengths.len() {
            return Err(PanelError::ShapeMismatch {
                ids: patient_ids.len(),
                values: values.len(),
                lengths: lengths.len(),
            });
        }
        let panel = Self {
            schema,
            patient_ids,
            values,
            lengths,
        };
        panel.check()?;
        Ok(panel)
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn n_vars(&self) -> usize {
        self.schema.variables.len()
    }

    pub fn cell(&self, patient: usize, t: usize, var: usize) -> Cell {
        self.values[patient][t * self.n_vars() + var]
    }

    pub fn cell_mut(&mut self, patient: usize, t: usize, var: usize) -> &mut Cell {
        let n_vars = self.n_vars();
        &mut self.values[patient][t * n_vars + var]
    }

    /// Verifies cell typing, class ranges and length bounds.
    pub fn check(&self) -> Result<(), PanelError> {
        let t_max = self.schema.sequence_length;
        let n_vars = self.n_vars();
        for (p, id) in self.patient_ids.iter().enumerate() {
            let len = self.lengths[p];
            if len == 0 || len > t_max {
                return Err(PanelError::BadLength {
                    patient: id.clone(),
                    length: len,
                    max: t_max,
                });
            }
            debug_assert_eq!(self.values[p].len(), t_max * n_vars);
            for t in 0..len {
                for (v, spec) in self.schema.variables.iter().enumerate() {
                    match (self.values[p][t * n_vars + v], spec.kind) {
                        (Cell::Class(k), VarKind::Binary | VarKind::Categorical) => {
                            if k >= spec.class_count() {
                                return Err(PanelError::ClassOutOfRange {
                                    patient: id.clone(),
                                    variable: spec.name.clone(),
                                    index: k,
                                    classes: spec.class_count(),
                                });
                            }
                        }
                        (Cell::Num(_), VarKind::Numeric) | (Cell::Missing, _) => {}
                        _ => {
                            return Err(PanelError::KindMismatch {
                                patient: id.clone(),
                                variable: spec.name.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_missing(&self) -> bool {
        self.patient_ids.iter().enumerate().any(|(p, _)| {
            let n_vars = self.n_vars();
            (0..self.lengths[p]).any(|t| {
                (0..n_vars).any(|v| self.values[p][t * n_vars + v].is_missing())
            })
        })
    }

    /// All valid (patient, timestep) scalar values of one variable, pooled
    /// in patient-major order. Missing cells are skipped.
    pub fn pooled_column(&self, var: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for p in 0..self.n_patients() {
            for t in 0..self.lengths[p] {
                if let Some(x) = self.cell(p, t, var).as_scalar() {
                    out.push(x);
                }
            }
        }
        out
    }

    /// Scalar time series of one variable for one patient over its valid
    /// timesteps. Missing cells yield NaN.
    pub fn patient_series(&self, patient: usize, var: usize) -> Vec<f64> {
        (0..self.lengths[patient])
            .map(|t| self.cell(patient, t, var).as_scalar().unwrap_or(f64::NAN))
            .collect()
    }
}
