//! Dataset schema: ordered variable declarations and the dimensional facts
//! derived from them (encoded width, post-embedding width, block layout).
//!
//! Every downstream width is a pure function of the schema, so the schema is
//! validated once and shared immutably afterwards.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Data type of a variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Numeric,
    Binary,
    Categorical,
}

impl fmt::Display for VarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKind::Numeric => write!(f, "numeric"),
            VarKind::Binary => write!(f, "binary"),
            VarKind::Categorical => write!(f, "categorical"),
        }
    }
}

/// Per-variable transform policy applied before min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    /// Box-Cox power transform with maximum-likelihood lambda, then min-max.
    BoxCoxMinMax,
    /// Natural log, then min-max.
    LogMinMax,
    /// Min-max scaling only.
    MinMaxOnly,
    /// Bin a numeric column into deciles and treat it as a 10-class
    /// categorical afterwards.
    DecileToCategorical,
}

fn default_transform() -> TransformKind {
    TransformKind::MinMaxOnly
}

/// One declared variable of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VarKind,
    /// Class labels in declaration order. One-hot positions and ordinal
    /// ranks follow this order. Empty for numeric variables.
    #[serde(default)]
    pub class_labels: Vec<String>,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub is_quasi_identifier: bool,
    #[serde(default)]
    pub is_measurement_flag: bool,
}

impl VariableSpec {
    pub fn numeric(name: &str, transform: TransformKind) -> Self {
        Self {
            name: name.to_string(),
            kind: VarKind::Numeric,
            class_labels: Vec::new(),
            transform,
            unit: String::new(),
            is_quasi_identifier: false,
            is_measurement_flag: false,
        }
    }

    pub fn binary(name: &str, labels: [&str; 2]) -> Self {
        Self {
            name: name.to_string(),
            kind: VarKind::Binary,
            class_labels: labels.iter().map(|s| s.to_string()).collect(),
            transform: TransformKind::MinMaxOnly,
            unit: String::new(),
            is_quasi_identifier: false,
            is_measurement_flag: false,
        }
    }

    pub fn categorical(name: &str, labels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: VarKind::Categorical,
            class_labels: labels.iter().map(|s| s.to_string()).collect(),
            transform: TransformKind::MinMaxOnly,
            unit: String::new(),
            is_quasi_identifier: false,
            is_measurement_flag: false,
        }
    }

    /// Number of one-hot dimensions this variable occupies in the encoded
    /// tensor: 1 for numeric, class count otherwise.
    pub fn encoded_width(&self) -> usize {
        match self.kind {
            VarKind::Numeric => 1,
            _ => self.class_labels.len(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_labels.iter().position(|l| l == label)
    }
}

fn default_latent_dim() -> usize {
    128
}
fn default_hidden_dim() -> usize {
    128
}
fn default_embed_binary() -> usize {
    2
}
fn default_embed_categorical() -> usize {
    4
}

/// Ordered variable declarations plus the network dimensions that depend on
/// the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub variables: Vec<VariableSpec>,
    /// Fixed number of timesteps per patient record.
    pub sequence_length: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_embed_binary")]
    pub embed_dim_binary: usize,
    #[serde(default = "default_embed_categorical")]
    pub embed_dim_categorical: usize,
}

/// A single violated schema invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("schema declares no variables")]
    NoVariables,
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("variable `{name}`: wrong class count for {kind} ({got} classes)")]
    ClassCount {
        name: String,
        kind: VarKind,
        got: usize,
    },
    #[error("variable `{0}`: duplicate class label `{1}`")]
    DuplicateClassLabel(String, String),
    #[error("variable `{0}`: DecileToCategorical declared on non-numeric variable")]
    DecileOnNonNumeric(String),
    #[error("nonpositive dimension {0} = {1}")]
    NonPositiveDim(&'static str, usize),
    #[error("failed to read schema file: {0}")]
    Io(String),
    #[error("failed to parse schema file: {0}")]
    Parse(String),
}

impl DatasetSchema {
    /// Checks every schema invariant and returns all violations at once.
    pub fn validate(&self) -> Result<(), Vec<SchemaError>> {
        let mut errors = Vec::new();
        if self.variables.is_empty() {
            errors.push(SchemaError::NoVariables);
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                errors.push(SchemaError::DuplicateName(v.name.clone()));
            }
            let n_classes = v.class_labels.len();
            let bad = match v.kind {
                VarKind::Numeric => n_classes != 0,
                VarKind::Binary => n_classes != 2,
                VarKind::Categorical => n_classes < 2,
            };
            if bad {
                errors.push(SchemaError::ClassCount {
                    name: v.name.clone(),
                    kind: v.kind,
                    got: n_classes,
                });
            }
            let mut label_seen = std::collections::HashSet::new();
            for l in &v.class_labels {
                if !label_seen.insert(l.as_str()) {
                    errors.push(SchemaError::DuplicateClassLabel(v.name.clone(), l.clone()));
                }
            }
            if v.transform == TransformKind::DecileToCategorical && v.kind != VarKind::Numeric {
                errors.push(SchemaError::DecileOnNonNumeric(v.name.clone()));
            }
        }
        for (label, dim) in [
            ("sequence_length", self.sequence_length),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim_binary", self.embed_dim_binary),
            ("embed_dim_categorical", self.embed_dim_categorical),
        ] {
            if dim == 0 {
                errors.push(SchemaError::NonPositiveDim(label, dim));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Width of the fully numeric encoding: one dimension per numeric
    /// variable, one per class otherwise.
    pub fn encoded_width(&self) -> usize {
        self.variables.iter().map(|v| v.encoded_width()).sum()
    }

    /// Width after the discriminator's soft embedding: numeric dims pass
    /// through, each binary block becomes `embed_dim_binary` values and each
    /// categorical block becomes `embed_dim_categorical`.
    pub fn embedded_width(&self) -> usize {
        self.variables
            .iter()
            .map(|v| match v.kind {
                VarKind::Numeric => 1,
                VarKind::Binary => self.embed_dim_binary,
                VarKind::Categorical => self.embed_dim_categorical,
            })
            .sum()
    }

    /// Per-variable slots of the encoded tensor, in declaration order.
    pub fn layout(&self) -> Vec<LayoutSlot> {
        let mut slots = Vec::with_capacity(self.variables.len());
        let mut offset = 0;
        for (idx, v) in self.variables.iter().enumerate() {
            let width = v.encoded_width();
            slots.push(LayoutSlot {
                variable: idx,
                kind: v.kind,
                start: offset,
                width,
            });
            offset += width;
        }
        slots
    }

    pub fn variable(&self, name: &str) -> Option<(usize, &VariableSpec)> {
        self.variables
            .iter()
            .enumerate()
            .find(|(_, v)| v.name == name)
    }

    /// Hex SHA-256 over the canonical JSON form; stored in checkpoints and
    /// sidecar files so mismatched artifacts are rejected.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn from_toml_str(text: &str) -> Result<Self, Vec<SchemaError>> {
        let schema: DatasetSchema =
            toml::from_str(text).map_err(|e| vec![SchemaError::Parse(e.to_string())])?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self, Vec<SchemaError>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![SchemaError::Io(format!("{}: {e}", path.display()))])?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }
}

/// Position of one variable inside the encoded tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutSlot {
    /// Index into `schema.variables`.
    pub variable: usize,
    pub kind: VarKind,
    /// First encoded dimension of this variable.
    pub start: usize,
    /// 1 for numeric, class count otherwise.
    pub width: usize,
}

#[cfg(test)]
pub(crate) fn hypotension_schema() -> DatasetSchema {
    // The 20-variable acute hypotension layout: 9 numeric, 4 categorical
    // (4 + 4 + 10 + 13 classes), 7 binary measurement flags.
    use TransformKind::*;
    let fio2_classes: Vec<String> = (1..=10).map(|k| format!("C{k}")).collect();
    let gcs_classes: Vec<String> = (3..=15).map(|k| k.to_string()).collect();
    let mut variables = vec![
        VariableSpec::numeric("MAP", BoxCoxMinMax),
        VariableSpec::numeric("Diastolic BP", BoxCoxMinMax),
        VariableSpec::numeric("Systolic BP", BoxCoxMinMax),
        VariableSpec::numeric("Urine", BoxCoxMinMax),
        VariableSpec::numeric("ALT", BoxCoxMinMax),
        VariableSpec::numeric("AST", BoxCoxMinMax),
        VariableSpec::numeric("PaO2", BoxCoxMinMax),
        VariableSpec::numeric("Lactic Acid", BoxCoxMinMax),
        VariableSpec::numeric("Serum Creatinine", BoxCoxMinMax),
        VariableSpec::categorical("Fluid Boluses", &["0", "250", "500", "1000"]),
        VariableSpec::categorical("Vasopressors", &["0", "1e-6", "8.4", "20.28"]),
        VariableSpec {
            name: "FiO2".into(),
            kind: VarKind::Categorical,
            class_labels: fio2_classes,
            transform: MinMaxOnly,
            unit: "fraction".into(),
            is_quasi_identifier: false,
            is_measurement_flag: false,
        },
        VariableSpec {
            name: "GCS".into(),
            kind: VarKind::Categorical,
            class_labels: gcs_classes,
            transform: MinMaxOnly,
            unit: "point".into(),
            is_quasi_identifier: false,
            is_measurement_flag: false,
        },
    ];
    for flag in [
        "Urine (M)",
        "ALT/AST (M)",
        "FiO2 (M)",
        "GCS (M)",
        "PaO2 (M)",
        "Lactic Acid (M)",
        "Serum Creatinine (M)",
    ] {
        let mut v = VariableSpec::binary(flag, ["False", "True"]);
        v.is_measurement_flag = true;
        variables.push(v);
    }
    DatasetSchema {
        variables,
        sequence_length: 48,
        latent_dim: 128,
        hidden_dim: 128,
        embed_dim_binary: 2,
        embed_dim_categorical: 4,
    }
}
