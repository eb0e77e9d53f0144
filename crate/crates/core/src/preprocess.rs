//! Per-variable invertible transforms (Box-Cox, log, min-max, decile
//! binning), one-hot encoding of panels into the fully numeric tensor the
//! GAN trains on, and the back-transformation that decodes generated
//! tensors into panels.

use crate::panel::{Cell, Panel};
use crate::schema::{DatasetSchema, LayoutSlot, TransformKind, VarKind, VariableSpec};
use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("variable `{0}`: degenerate column (fewer than 2 distinct finite values)")]
    DegenerateColumn(String),
    #[error("variable `{0}`: non-finite value in column")]
    NonFinite(String),
    #[error("variable `{0}`: fewer than 10 distinct values for decile fitting")]
    TooFewDistinct(String),
    #[error("variable `{0}`: decile cut points are not strictly ascending")]
    DegenerateDeciles(String),
    #[error("no fitted transform for numeric variable `{0}`")]
    MissingTransform(String),
    #[error("panel has missing cells; run forward fill first (patient `{0}`)")]
    MissingCells(String),
    #[error("tensor schema hash {got} does not match transform set {want}")]
    SchemaHashMismatch { got: String, want: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("panel error: {0}")]
    Panel(#[from] crate::panel::PanelError),
}

/// Fitted, invertible transform of one numeric variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedTransform {
    pub variable: String,
    pub method: TransformKind,
    /// Maximum-likelihood lambda for Box-Cox; unused otherwise.
    #[serde(default)]
    pub boxcox_lambda: Option<f64>,
    /// Additive shift applied before log/Box-Cox so inputs are strictly
    /// positive; recorded for exact inversion.
    #[serde(default)]
    pub shift: f64,
    /// Min of the power-transformed training values (raw min for deciles).
    pub minmax_min: f64,
    /// Range (max - min) of the transformed training values; > 0.
    pub minmax_range: f64,
    /// Nine ascending cut points at the 0.1..0.9 empirical quantiles.
    #[serde(default)]
    pub decile_cuts: Option<Vec<f64>>,
}

const LAMBDA_LN_THRESHOLD: f64 = 1e-9;

fn boxcox(x: f64, lambda: f64) -> f64 {
    if lambda.abs() < LAMBDA_LN_THRESHOLD {
        x.ln()
    } else {
        ((lambda * x.ln()).exp() - 1.0) / lambda
    }
}

fn boxcox_inv(y: f64, lambda: f64) -> f64 {
    if lambda.abs() < LAMBDA_LN_THRESHOLD {
        y.exp()
    } else {
        // lambda*y + 1 = x^lambda > 0 for in-domain y; guard float drift.
        (lambda * y + 1.0).max(1e-300).powf(1.0 / lambda)
    }
}

/// Profile log-likelihood of the Box-Cox transform at `lambda`.
fn boxcox_log_likelihood(values: &[f64], sum_ln: f64, lambda: f64) -> f64 {
    let n = values.len() as f64;
    let mut mean = 0.0;
    for &x in values {
        mean += boxcox(x, lambda);
    }
    mean /= n;
    let mut var = 0.0;
    for &x in values {
        let d = boxcox(x, lambda) - mean;
        var += d * d;
    }
    var /= n;
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -0.5 * n * var.ln() + (lambda - 1.0) * sum_ln
}

/// Maximizes the Box-Cox log-likelihood over [-5, 5]: coarse grid to
/// bracket the optimum, then golden-section refinement well below the
/// 1e-4 resolution target.
fn fit_boxcox_lambda(values: &[f64]) -> f64 {
    let sum_ln: f64 = values.iter().map(|&x| x.ln()).sum();
    let ll = |lambda: f64| boxcox_log_likelihood(values, sum_ln, lambda);

    let mut best_i = 0;
    let mut best = f64::NEG_INFINITY;
    let grid: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
    for (i, &lambda) in grid.iter().enumerate() {
        let v = ll(lambda);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(grid.len() - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = ll(c);
    let mut fd = ll(d);
    while b - a > 1e-6 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = ll(d);
        }
    }
    0.5 * (a + b)
}

impl FittedTransform {
    /// Forward map to the GAN's [0, 1] scale (not clamped here).
    pub fn apply(&self, x: f64) -> f64 {
        let y = match self.method {
            TransformKind::BoxCoxMinMax => {
                boxcox(x + self.shift, self.boxcox_lambda.unwrap_or(1.0))
            }
            TransformKind::LogMinMax => (x + self.shift).ln(),
            TransformKind::MinMaxOnly => x,
            TransformKind::DecileToCategorical => {
                panic!("decile transform binned at panel level, not applied per cell")
            }
        };
        (y - self.minmax_min) / self.minmax_range
    }

    /// Inverse map from a [0, 1] value back to the original unit.
    pub fn invert(&self, z: f64) -> f64 {
        let y = z * self.minmax_range + self.minmax_min;
        match self.method {
            TransformKind::BoxCoxMinMax => {
                boxcox_inv(y, self.boxcox_lambda.unwrap_or(1.0)) - self.shift
            }
            TransformKind::LogMinMax => y.exp() - self.shift,
            TransformKind::MinMaxOnly => y,
            TransformKind::DecileToCategorical => {
                panic!("decile transform inverts via bin midpoints")
            }
        }
    }

    /// Decile class for a raw value: half-open bins, a value exactly at a
    /// cut point goes to the higher bin.
    pub fn decile_class(&self, x: f64) -> usize {
        let cuts = self.decile_cuts.as_ref().expect("decile transform");
        cuts.partition_point(|c| x >= *c)
    }

    /// Representative raw value for a decile class (bin midpoint; outer
    /// bins use the observed data min/max as their outer edge).
    pub fn decile_midpoint(&self, class: usize) -> f64 {
        let cuts = self.decile_cuts.as_ref().expect("decile transform");
        let data_min = self.minmax_min;
        let data_max = self.minmax_min + self.minmax_range;
        let lo = if class == 0 { data_min } else { cuts[class - 1] };
        let hi = if class == cuts.len() { data_max } else { cuts[class] };
        0.5 * (lo + hi)
    }
}

fn check_finite(name: &str, values: &[f64]) -> Result<(), PreprocessError> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(PreprocessError::NonFinite(name.to_string()));
    }
    Ok(())
}

fn distinct_count(values: &[f64]) -> usize {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    sorted.len()
}

/// Fits one variable's transform on its observed column.
pub fn fit_transform(
    name: &str,
    values: &[f64],
    method: TransformKind,
) -> Result<FittedTransform, PreprocessError> {
    check_finite(name, values)?;
    if distinct_count(values) < 2 {
        return Err(PreprocessError::DegenerateColumn(name.to_string()));
    }
    if method == TransformKind::DecileToCategorical {
        return fit_deciles(name, values);
    }
    let min_raw = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = match method {
        TransformKind::BoxCoxMinMax | TransformKind::LogMinMax => {
            if min_raw <= 0.0 {
                1e-6 - min_raw
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let shifted: Vec<f64> = values.iter().map(|&x| x + shift).collect();
    let (lambda, transformed): (Option<f64>, Vec<f64>) = match method {
        TransformKind::BoxCoxMinMax => {
            let lambda = fit_boxcox_lambda(&shifted);
            let t = shifted.iter().map(|&x| boxcox(x, lambda)).collect();
            (Some(lambda), t)
        }
        TransformKind::LogMinMax => (None, shifted.iter().map(|&x| x.ln()).collect()),
        TransformKind::MinMaxOnly => (None, shifted),
        TransformKind::DecileToCategorical => unreachable!(),
    };
    let t_min = transformed.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = transformed
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = t_max - t_min;
    if !(range > 0.0) || !range.is_finite() {
        return Err(PreprocessError::DegenerateColumn(name.to_string()));
    }
    Ok(FittedTransform {
        variable: name.to_string(),
        method,
        boxcox_lambda: lambda,
        shift,
        minmax_min: t_min,
        minmax_range: range,
        decile_cuts: None,
    })
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Fits nine decile cut points at the 0.1..0.9 empirical quantiles.
pub fn fit_deciles(name: &str, values: &[f64]) -> Result<FittedTransform, PreprocessError> {
    check_finite(name, values)?;
    if distinct_count(values) < 10 {
        return Err(PreprocessError::TooFewDistinct(name.to_string()));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cuts: Vec<f64> = (1..=9).map(|k| quantile(&sorted, 0.1 * k as f64)).collect();
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PreprocessError::DegenerateDeciles(name.to_string()));
    }
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    Ok(FittedTransform {
        variable: name.to_string(),
        method: TransformKind::DecileToCategorical,
        boxcox_lambda: None,
        shift: 0.0,
        minmax_min: min,
        minmax_range: max - min,
        decile_cuts: Some(cuts),
    })
}

/// Complete transform record for one dataset: the working schema (deciles
/// already rewritten to 10-class categoricals) and one fitted transform per
/// remaining numeric variable, plus the decile records themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformSet {
    pub version: u32,
    /// Hash of the schema the transforms were fitted under (pre-rewrite).
    pub source_schema_hash: String,
    /// Working schema after the decile rewrite.
    pub schema: DatasetSchema,
    pub transforms: Vec<FittedTransform>,
}

impl TransformSet {
    pub fn for_variable(&self, name: &str) -> Option<&FittedTransform> {
        self.transforms.iter().find(|t| t.variable == name)
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }

    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| PreprocessError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| PreprocessError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path).map_err(|source| PreprocessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PreprocessError::Format(e.to_string()))
    }
}

/// Ten decile class labels, C1..C10.
fn decile_labels() -> Vec<String> {
    (1..=10).map(|k| format!("C{k}")).collect()
}

/// Fits every numeric variable's transform on the panel and rewrites
/// `DecileToCategorical` variables into 10-class categoricals, binning
/// their cells. Returns the rewritten panel alongside the transform set.
pub fn fit_and_prepare(panel: &Panel) -> Result<(Panel, TransformSet), PreprocessError> {
    if let Some(p) = first_missing_patient(panel) {
        return Err(PreprocessError::MissingCells(p));
    }
    let source_schema = &panel.schema;
    let mut transforms = Vec::new();
    let mut rewritten_vars: Vec<VariableSpec> = Vec::new();
    for (v, spec) in source_schema.variables.iter().enumerate() {
        if spec.kind != VarKind::Numeric {
            rewritten_vars.push(spec.clone());
            continue;
        }
        let column = panel.pooled_column(v);
        let fitted = fit_transform(&spec.name, &column, spec.transform)?;
        if spec.transform == TransformKind::DecileToCategorical {
            let mut rewritten = spec.clone();
            rewritten.kind = VarKind::Categorical;
            rewritten.class_labels = decile_labels();
            rewritten.transform = TransformKind::MinMaxOnly;
            rewritten_vars.push(rewritten);
        } else {
            rewritten_vars.push(spec.clone());
        }
        transforms.push(fitted);
    }
    let mut working = (**source_schema).clone();
    working.variables = rewritten_vars;
    let working = Arc::new(working);

    let mut out = Panel {
        schema: working.clone(),
        patient_ids: panel.patient_ids.clone(),
        values: panel.values.clone(),
        lengths: panel.lengths.clone(),
    };
    for (v, spec) in source_schema.variables.iter().enumerate() {
        if spec.transform != TransformKind::DecileToCategorical || spec.kind != VarKind::Numeric {
            continue;
        }
        let fitted = transforms
            .iter()
            .find(|t| t.variable == spec.name)
            .expect("fitted above");
        for p in 0..out.n_patients() {
            for t in 0..out.lengths[p] {
                if let Cell::Num(x) = out.cell(p, t, v) {
                    *out.cell_mut(p, t, v) = Cell::Class(fitted.decile_class(x));
                }
            }
        }
    }
    let set = TransformSet {
        version: 1,
        source_schema_hash: source_schema.hash(),
        schema: (*working).clone(),
        transforms,
    };
    Ok((out, set))
}

fn first_missing_patient(panel: &Panel) -> Option<String> {
    for p in 0..panel.n_patients() {
        for t in 0..panel.lengths[p] {
            for v in 0..panel.n_vars() {
                if panel.cell(p, t, v).is_missing() {
                    return Some(panel.patient_ids[p].clone());
                }
            }
        }
    }
    None
}

/// Fully numeric (patients x T x encoded_width) tensor with the activation
/// layout that tags each dimension as sigmoid-numeric or part of a softmax
/// block.
#[derive(Debug, Clone)]
pub struct EncodedTensor {
    pub schema: Arc<DatasetSchema>,
    pub data: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl EncodedTensor {
    pub fn layout(&self) -> Vec<LayoutSlot> {
        self.schema.layout()
    }

    pub fn n_patients(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Checks the activation-layout invariants on valid timesteps: numeric
    /// dims in [0,1]; each block componentwise >= 0 and summing to 1 within
    /// `1e-6`; with `strict_onehot`, blocks must be exact one-hot.
    pub fn check_invariants(&self, strict_onehot: bool) -> Result<(), String> {
        let slots = self.layout();
        for p in 0..self.n_patients() {
            for t in 0..self.lengths[p] {
                for slot in &slots {
                    if slot.kind == VarKind::Numeric {
                        let x = self.data[[p, t, slot.start]];
                        if !(0.0..=1.0).contains(&x) {
                            return Err(format!(
                                "numeric dim {} out of [0,1]: {x}",
                                slot.start
                            ));
                        }
                    } else {
                        let mut sum = 0.0;
                        let mut ones = 0;
                        for o in slot.start..slot.start + slot.width {
                            let x = self.data[[p, t, o]];
                            if x < 0.0 {
                                return Err(format!("block dim {o} negative: {x}"));
                            }
                            if strict_onehot && x != 0.0 && x != 1.0 {
                                return Err(format!("block dim {o} not one-hot: {x}"));
                            }
                            if x == 1.0 {
                                ones += 1;
                            }
                            sum += x;
                        }
                        if (sum - 1.0).abs() > 1e-6 {
                            return Err(format!(
                                "block at {} sums to {sum}, expected 1",
                                slot.start
                            ));
                        }
                        if strict_onehot && ones != 1 {
                            return Err(format!("block at {} has {ones} ones", slot.start));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Bit-exact binary serialization (shapes, lengths, schema hash, raw
    /// little-endian f64 data).
    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let io_err = |source| PreprocessError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let hash = self.schema.hash();
        let dims = self.data.shape();
        (|| -> std::io::Result<()> {
            w.write_all(b"SGENC001")?;
            w.write_all(&(hash.len() as u64).to_le_bytes())?;
            w.write_all(hash.as_bytes())?;
            for d in dims {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for &l in &self.lengths {
                w.write_all(&(l as u64).to_le_bytes())?;
            }
            for &x in self.data.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
            w.flush()
        })()
        .map_err(io_err)
    }

    pub fn load(path: &Path, schema: Arc<DatasetSchema>) -> Result<Self, PreprocessError> {
        let io_err = |source| PreprocessError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != b"SGENC001" {
            return Err(PreprocessError::Format("bad magic".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64, PreprocessError> {
            r.read_exact(&mut u64buf).map_err(|source| PreprocessError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let hash_len = read_u64(&mut r)? as usize;
        let mut hash_bytes = vec![0u8; hash_len];
        r.read_exact(&mut hash_bytes).map_err(io_err)?;
        let stored_hash =
            String::from_utf8(hash_bytes).map_err(|e| PreprocessError::Format(e.to_string()))?;
        if stored_hash != schema.hash() {
            return Err(PreprocessError::SchemaHashMismatch {
                got: schema.hash(),
                want: stored_hash,
            });
        }
        let n = read_u64(&mut r)? as usize;
        let t = read_u64(&mut r)? as usize;
        let o = read_u64(&mut r)? as usize;
        let mut lengths = Vec::with_capacity(n);
        for _ in 0..n {
            lengths.push(read_u64(&mut r)? as usize);
        }
        let mut data = Vec::with_capacity(n * t * o);
        let mut f64buf = [0u8; 8];
        for _ in 0..n * t * o {
            r.read_exact(&mut f64buf).map_err(io_err)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let data = Array3::from_shape_vec((n, t, o), data)
            .map_err(|e| PreprocessError::Format(e.to_string()))?;
        Ok(Self {
            schema,
            data,
            lengths,
        })
    }
}

/// Count of numeric cells clamped into [0,1] during encoding, per variable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClampReport {
    pub clamped: Vec<(String, usize)>,
}

impl ClampReport {
    pub fn total(&self) -> usize {
        self.clamped.iter().map(|(_, n)| n).sum()
    }
}

/// Encodes a complete panel: numerics transformed to [0,1] (clamping float
/// drift and out-of-domain values, counted per variable), class cells to
/// exact one-hot blocks. Padded timesteps stay zero.
pub fn encode_panel(
    panel: &Panel,
    transforms: &TransformSet,
) -> Result<(EncodedTensor, ClampReport), PreprocessError> {
    if let Some(p) = first_missing_patient(panel) {
        return Err(PreprocessError::MissingCells(p));
    }
    let schema = &panel.schema;
    let slots = schema.layout();
    let width = schema.encoded_width();
    let n = panel.n_patients();
    let t_max = schema.sequence_length;
    let mut data = Array3::zeros((n, t_max, width));
    let mut clamp_counts = vec![0usize; schema.variables.len()];

    for (slot, spec) in slots.iter().zip(&schema.variables) {
        let fitted = if spec.kind == VarKind::Numeric {
            Some(
                transforms
                    .for_variable(&spec.name)
                    .ok_or_else(|| PreprocessError::MissingTransform(spec.name.clone()))?,
            )
        } else {
            None
        };
        for p in 0..n {
            for t in 0..panel.lengths[p] {
                match panel.cell(p, t, slot.variable) {
                    Cell::Num(x) => {
                        let z = fitted.unwrap().apply(x);
                        let clamped = z.clamp(0.0, 1.0);
                        if clamped != z {
                            clamp_counts[slot.variable] += 1;
                        }
                        data[[p, t, slot.start]] = clamped;
                    }
                    Cell::Class(k) => {
                        data[[p, t, slot.start + k]] = 1.0;
                    }
                    Cell::Missing => unreachable!("checked above"),
                }
            }
        }
    }
    let report = ClampReport {
        clamped: schema
            .variables
            .iter()
            .zip(&clamp_counts)
            .filter(|(_, &n)| n > 0)
            .map(|(v, &n)| (v.name.clone(), n))
            .collect(),
    };
    Ok((
        EncodedTensor {
            schema: schema.clone(),
            data,
            lengths: panel.lengths.clone(),
        },
        report,
    ))
}

/// Argmax over a block with ties broken by the lowest class index.
pub fn argmax_class(block: ArrayView2<f64>) -> Vec<usize> {
    block
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Decodes a tensor back into a typed panel: blocks by argmax, numeric dims
/// clamped to [0,1] then inverted through the fitted transform.
pub fn decode_panel(
    tensor: &EncodedTensor,
    transforms: &TransformSet,
) -> Result<Panel, PreprocessError> {
    let schema = &tensor.schema;
    if schema.hash() != transforms.schema_hash() {
        return Err(PreprocessError::SchemaHashMismatch {
            got: schema.hash(),
            want: transforms.schema_hash(),
        });
    }
    let slots = schema.layout();
    let n = tensor.n_patients();
    let t_max = tensor.seq_len();
    let n_vars = schema.variables.len();
    let mut values = vec![vec![Cell::Missing; t_max * n_vars]; n];
    for (slot, spec) in slots.iter().zip(&schema.variables) {
        let fitted = if spec.kind == VarKind::Numeric {
            Some(
                transforms
                    .for_variable(&spec.name)
                    .ok_or_else(|| PreprocessError::MissingTransform(spec.name.clone()))?,
            )
        } else {
            None
        };
        for (p, patient) in values.iter_mut().enumerate() {
            for t in 0..tensor.lengths[p] {
                let cell = if spec.kind == VarKind::Numeric {
                    let z = tensor.data[[p, t, slot.start]].clamp(0.0, 1.0);
                    Cell::Num(fitted.unwrap().invert(z))
                } else {
                    let mut best = 0;
                    for k in 1..slot.width {
                        if tensor.data[[p, t, slot.start + k]]
                            > tensor.data[[p, t, slot.start + best]]
                        {
                            best = k;
                        }
                    }
                    Cell::Class(best)
                };
                patient[t * n_vars + slot.variable] = cell;
            }
        }
    }
    let ids = (0..n).map(|p| format!("syn_{p}")).collect();
    Ok(Panel::new(schema.clone(), ids, values, tensor.lengths.clone())?)
}

/// Decodes with the patient ids of an existing panel preserved.
pub fn decode_panel_with_ids(
    tensor: &EncodedTensor,
    transforms: &TransformSet,
    ids: Vec<String>,
) -> Result<Panel, PreprocessError> {
    let mut panel = decode_panel(tensor, transforms)?;
    if ids.len() == panel.n_patients() {
        panel.patient_ids = ids;
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::VariableSpec;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn boxcox_lambda_one_is_affine_identity() {
        let t = FittedTransform {
            variable: "x".into(),
            method: TransformKind::BoxCoxMinMax,
            boxcox_lambda: Some(1.0),
            shift: 0.0,
            minmax_min: 0.0,
            minmax_range: 1.0,
            decile_cuts: None,
        };
        for x in [0.5, 1.0, 2.0, 10.0] {
            assert!((t.apply(x) - (x - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn boxcox_lambda_zero_is_log() {
        let t = FittedTransform {
            variable: "x".into(),
            method: TransformKind::BoxCoxMinMax,
            boxcox_lambda: Some(0.0),
            shift: 0.0,
            minmax_min: 0.0,
            minmax_range: 1.0,
            decile_cuts: None,
        };
        for x in [0.5, 1.0, 2.0, 10.0f64] {
            assert!((t.apply(x) - x.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn lognormal_data_fits_lambda_near_zero() {
        let mut rng = crate::seed::rng_from(42);
        let values: Vec<f64> = (0..10_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.exp()
            })
            .collect();
        let fitted = fit_transform("x", &values, TransformKind::BoxCoxMinMax).unwrap();
        let lambda = fitted.boxcox_lambda.unwrap();
        assert!(lambda.abs() < 0.1, "lambda = {lambda}");

        // Independent oracle: dense grid over the log-likelihood.
        let sum_ln: f64 = values.iter().map(|x| x.ln()).sum();
        let mut best = f64::NEG_INFINITY;
        let mut best_lambda = 0.0;
        for i in 0..=2000 {
            let l = -5.0 + 0.005 * i as f64;
            let v = boxcox_log_likelihood(&values, sum_ln, l);
            if v > best {
                best = v;
                best_lambda = l;
            }
        }
        assert!(
            (lambda - best_lambda).abs() <= 0.005 + 1e-9,
            "golden-section {lambda} vs grid {best_lambda}"
        );
    }

    #[test]
    fn constant_column_is_degenerate() {
        let err = fit_transform("x", &[2.0; 8], TransformKind::MinMaxOnly).unwrap_err();
        assert!(matches!(err, PreprocessError::DegenerateColumn(_)));
    }

    #[test]
    fn shift_makes_nonpositive_data_loggable() {
        let values = vec![-3.0, 0.0, 1.0, 4.0];
        let fitted = fit_transform("x", &values, TransformKind::LogMinMax).unwrap();
        assert!(fitted.shift > 3.0 - 1e-9);
        for &x in &values {
            let z = fitted.apply(x);
            assert!(z.is_finite());
            assert!((fitted.invert(z) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn deciles_on_1_to_100() {
        let values: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        let fitted = fit_deciles("x", &values).unwrap();
        assert_eq!(fitted.decile_class(5.0), 0);
        assert_eq!(fitted.decile_class(95.0), 9);
    }

    #[test]
    fn decile_cut_point_goes_to_higher_bin() {
        let values: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        let fitted = fit_deciles("x", &values).unwrap();
        let cut = fitted.decile_cuts.as_ref().unwrap()[0];
        assert_eq!(fitted.decile_class(cut), 1);
        assert_eq!(fitted.decile_class(cut - 1e-9), 0);
    }

    #[test]
    fn deciles_split_uniform_data_evenly() {
        let mut rng = crate::seed::rng_from(3);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fitted = fit_deciles("x", &values).unwrap();
        let mut counts = [0usize; 10];
        for &x in &values {
            counts[fitted.decile_class(x)] += 1;
        }
        for c in counts {
            assert!((90..=110).contains(&c), "bin count {c}");
        }
    }

    #[test]
    fn too_few_distinct_values_rejected_for_deciles() {
        let values = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0];
        assert!(matches!(
            fit_deciles("x", &values).unwrap_err(),
            PreprocessError::TooFewDistinct(_)
        ));
    }

    fn mixed_schema() -> Arc<DatasetSchema> {
        Arc::new(DatasetSchema {
            variables: vec![
                VariableSpec::numeric("x", TransformKind::BoxCoxMinMax),
                VariableSpec::categorical("c", &["a", "b", "c", "d"]),
                VariableSpec::binary("b", ["False", "True"]),
            ],
            sequence_length: 3,
            latent_dim: 4,
            hidden_dim: 4,
            embed_dim_binary: 2,
            embed_dim_categorical: 4,
        })
    }

    fn random_panel(schema: &Arc<DatasetSchema>, n: usize, seed: u64) -> Panel {
        let mut rng = crate::seed::rng_from(seed);
        let t_max = schema.sequence_length;
        let n_vars = schema.variables.len();
        let mut values = Vec::new();
        for _ in 0..n {
            let mut grid = vec![Cell::Missing; t_max * n_vars];
            for t in 0..t_max {
                grid[t * n_vars] = Cell::Num(rng.gen_range(0.5..20.0));
                grid[t * n_vars + 1] = Cell::Class(rng.gen_range(0..4));
                grid[t * n_vars + 2] = Cell::Class(rng.gen_range(0..2));
            }
            values.push(grid);
        }
        Panel::new(
            schema.clone(),
            (0..n).map(|p| format!("p{p}")).collect(),
            values,
            vec![t_max; n],
        )
        .unwrap()
    }

    #[test]
    fn encode_produces_exact_one_hot_blocks() {
        let schema = mixed_schema();
        let panel = random_panel(&schema, 4, 7);
        let (panel, set) = fit_and_prepare(&panel).unwrap();
        let (tensor, clamps) = encode_panel(&panel, &set).unwrap();
        assert_eq!(clamps.total(), 0);
        tensor.check_invariants(true).unwrap();
        // Class index 1 of the 4-class block maps to [0,1,0,0].
        let slot = tensor.layout()[1];
        for p in 0..panel.n_patients() {
            for t in 0..panel.lengths[p] {
                if let Cell::Class(1) = panel.cell(p, t, 1) {
                    let block: Vec<f64> = (0..4).map(|k| tensor.data[[p, t, slot.start + k]]).collect();
                    assert_eq!(block, vec![0.0, 1.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn fitted_extremes_map_to_unit_interval_endpoints() {
        let values = vec![2.0, 3.0, 5.0, 11.0];
        let fitted = fit_transform("x", &values, TransformKind::MinMaxOnly).unwrap();
        assert_eq!(fitted.apply(2.0), 0.0);
        assert_eq!(fitted.apply(11.0), 1.0);
    }

    #[test]
    fn hypotension_schema_encodes_to_width_54() {
        let schema = Arc::new(crate::schema::hypotension_schema());
        let mut rng = crate::seed::rng_from(5);
        let t_max = schema.sequence_length;
        let n_vars = schema.variables.len();
        let mut values = Vec::new();
        for _ in 0..3 {
            let mut grid = vec![Cell::Missing; t_max * n_vars];
            for t in 0..t_max {
                for (v, spec) in schema.variables.iter().enumerate() {
                    grid[t * n_vars + v] = match spec.kind {
                        VarKind::Numeric => Cell::Num(rng.gen_range(1.0..100.0)),
                        _ => Cell::Class(rng.gen_range(0..spec.class_count())),
                    };
                }
            }
            values.push(grid);
        }
        let panel = Panel::new(
            schema.clone(),
            vec!["a".into(), "b".into(), "c".into()],
            values,
            vec![t_max; 3],
        )
        .unwrap();
        let (panel, set) = fit_and_prepare(&panel).unwrap();
        let (tensor, _) = encode_panel(&panel, &set).unwrap();
        assert_eq!(tensor.width(), 54);
    }

    #[test]
    fn decode_argmax_picks_largest_and_breaks_ties_low() {
        let schema = mixed_schema();
        let panel = random_panel(&schema, 2, 9);
        let (panel, set) = fit_and_prepare(&panel).unwrap();
        let (mut tensor, _) = encode_panel(&panel, &set).unwrap();
        let slot = tensor.layout()[1];
        // Soft block [0.1, 0.7, 0.1, 0.1] decodes to class 1.
        for (k, v) in [0.1, 0.7, 0.1, 0.1].iter().enumerate() {
            tensor.data[[0, 0, slot.start + k]] = *v;
        }
        // Exact tie on the binary block decodes to class 0.
        let bslot = tensor.layout()[2];
        tensor.data[[0, 0, bslot.start]] = 0.5;
        tensor.data[[0, 0, bslot.start + 1]] = 0.5;
        let decoded = decode_panel(&tensor, &set).unwrap();
        assert_eq!(decoded.cell(0, 0, 1), Cell::Class(1));
        assert_eq!(decoded.cell(0, 0, 2), Cell::Class(0));
    }

    #[test]
    fn encode_decode_round_trip() {
        let schema = mixed_schema();
        let panel = random_panel(&schema, 6, 13);
        let (panel, set) = fit_and_prepare(&panel).unwrap();
        let (tensor, _) = encode_panel(&panel, &set).unwrap();
        let decoded = decode_panel(&tensor, &set).unwrap();
        for p in 0..panel.n_patients() {
            for t in 0..panel.lengths[p] {
                for v in 0..panel.n_vars() {
                    match (panel.cell(p, t, v), decoded.cell(p, t, v)) {
                        (Cell::Num(a), Cell::Num(b)) => {
                            assert!(
                                (a - b).abs() <= 1e-6 * a.abs().max(1.0),
                                "numeric round trip {a} vs {b}"
                            );
                        }
                        (a, b) => assert_eq!(a, b),
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_domain_values_are_clamped_and_counted() {
        let schema = mixed_schema();
        let train = random_panel(&schema, 4, 21);
        let (train, set) = fit_and_prepare(&train).unwrap();
        // New panel with a value far below the fitted minimum.
        let mut other = train.clone();
        *other.cell_mut(0, 0, 0) = Cell::Num(0.01);
        let (tensor, clamps) = encode_panel(&other, &set).unwrap();
        assert_eq!(clamps.total(), 1);
        tensor.check_invariants(false).unwrap();
        assert_eq!(tensor.data[[0, 0, 0]], 0.0);
    }

    #[test]
    fn encoded_tensor_binary_round_trip_is_bitwise() {
        let schema = mixed_schema();
        let panel = random_panel(&schema, 3, 17);
        let (panel, set) = fit_and_prepare(&panel).unwrap();
        let (tensor, _) = encode_panel(&panel, &set).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        tensor.save(&path).unwrap();
        let loaded = EncodedTensor::load(&path, tensor.schema.clone()).unwrap();
        assert_eq!(tensor.lengths, loaded.lengths);
        assert!(tensor
            .data
            .iter()
            .zip(loaded.data.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn apply_invert_round_trips(
            raw in proptest::collection::vec(0.1f64..50.0, 4..40),
            method_pick in 0usize..3,
        ) {
            let method = [
                TransformKind::BoxCoxMinMax,
                TransformKind::LogMinMax,
                TransformKind::MinMaxOnly,
            ][method_pick];
            prop_assume!(distinct_count(&raw) >= 2);
            let fitted = fit_transform("x", &raw, method).unwrap();
            for &x in &raw {
                let z = fitted.apply(x);
                let back = fitted.invert(z);
                prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn transforms_are_strictly_increasing(
            raw in proptest::collection::vec(0.1f64..50.0, 4..40),
        ) {
            prop_assume!(distinct_count(&raw) >= 2);
            let fitted = fit_transform("x", &raw, TransformKind::BoxCoxMinMax).unwrap();
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted.dedup();
            for w in sorted.windows(2) {
                prop_assert!(fitted.apply(w[0]) < fitted.apply(w[1]));
            }
        }
    }
}
